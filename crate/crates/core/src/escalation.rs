//! The per-patient reminder escalation state machine.
//!
//! Each dose climbs a fixed ladder while it stays unacknowledged: app push at
//! the due time (optionally repeated), email once `email_delay` has passed,
//! and MISSED at the end of its local day. On top of that sit two daily
//! stages keyed to the patient's `daily_check_time` (voice call, then
//! caregiver SMS or a red flag) and a weekly provider review.
//!
//! The engine does no I/O. [`PatientEngine::advance`] returns the actions
//! whose timers fall in `(last, now]`; callers hand them to the channels
//! module. Every timer fires at most once, so advancing in one call or in
//! many smaller steps yields the same actions.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, Days, NaiveDate};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::domain::{
    Channel, DoseEvent, DoseEventId, DoseSchedule, DoseState, EscalationEntry, Flag, FlagId,
    FlagKind, IntakeRecord, MedicationId, NotificationId, PatientId, PatientProfile, ScheduleId,
    Timestamp, Violation,
};
use crate::scheduler::{
    classify_intake, end_of_local_day, local_date, resolve_local, slots_for_day, ClassifyError,
    DateRange, TimingConfig,
};

/// Kinds of engine output. Declaration order is the tie-break order for
/// actions firing at the same instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    SendPush,
    SendEmail,
    SendVoice,
    SendCaregiverSms,
    RaiseRedFlag,
    RaiseProviderFlag,
    MarkMissed,
}

impl ActionKind {
    pub fn channel(self) -> Option<Channel> {
        match self {
            ActionKind::SendPush => Some(Channel::Push),
            ActionKind::SendEmail => Some(Channel::Email),
            ActionKind::SendVoice => Some(Channel::Voice),
            ActionKind::SendCaregiverSms => Some(Channel::CaregiverSms),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::SendPush => "SEND_PUSH",
            ActionKind::SendEmail => "SEND_EMAIL",
            ActionKind::SendVoice => "SEND_VOICE",
            ActionKind::SendCaregiverSms => "SEND_CAREGIVER_SMS",
            ActionKind::RaiseRedFlag => "RAISE_RED_FLAG",
            ActionKind::RaiseProviderFlag => "RAISE_PROVIDER_FLAG",
            ActionKind::MarkMissed => "MARK_MISSED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscalationAction {
    pub kind: ActionKind,
    pub patient_id: PatientId,
    pub dose_event_id: Option<DoseEventId>,
    pub fire_at: Timestamp,
    /// Local date the action belongs to: the dose's date, the checked day,
    /// or the first day of the reviewed week.
    pub local_date: NaiveDate,
    /// Present for `SEND_*` actions.
    pub notification_id: Option<NotificationId>,
    /// Present for `RAISE_*` actions; the flag itself is kept by the engine.
    pub flag_id: Option<FlagId>,
}

impl EscalationAction {
    fn sort_key(&self) -> (Timestamp, ActionKind, Option<&DoseEventId>) {
        (self.fire_at, self.kind, self.dose_event_id.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayEscalationState {
    pub patient_id: PatientId,
    pub local_date: NaiveDate,
    pub any_ack_today: bool,
    pub voice_sent_at: Option<Timestamp>,
    pub caregiver_stage_done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("clock moved backwards: last advance {last}, requested {now}")]
    NonMonotone { last: Timestamp, now: Timestamp },
    #[error("acknowledgement at {at} is ahead of the engine clock {last}; advance first")]
    AheadOfClock { last: Timestamp, at: Timestamp },
    #[error("unknown dose event {0}")]
    UnknownDose(DoseEventId),
    #[error("dose event {0} was already marked missed")]
    AlreadyMissed(DoseEventId),
    #[error(transparent)]
    TooEarly(#[from] ClassifyError),
    #[error("week starting {week} cannot be reviewed before {boundary}")]
    ReviewTooEarly { week: NaiveDate, boundary: Timestamp },
    #[error("invalid profile: {0:?}")]
    Profile(Vec<Violation>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckOutcome {
    pub record: IntakeRecord,
    /// True when the dose had already been acknowledged and the existing
    /// record is returned unchanged.
    pub duplicate: bool,
}

/// A dose as seen from outside, with its intake record if logged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoseView {
    pub event: DoseEvent,
    pub intake: Option<IntakeRecord>,
}

#[derive(Debug, Clone, PartialEq)]
struct TrackedSchedule {
    schedule: DoseSchedule,
    /// Slots due at or before this instant are never materialized.
    added_at: Timestamp,
    /// Set when the medication is stopped; later slots are cancelled.
    cutoff: Option<Timestamp>,
}

impl TrackedSchedule {
    fn admits(&self, due: Timestamp) -> bool {
        due > self.added_at && self.cutoff.is_none_or(|c| due <= c)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dose {
    event: DoseEvent,
    pushes_sent: u32,
    emailed_at: Option<Timestamp>,
    intake: Option<IntakeRecord>,
    missed_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Timer {
    Push(DoseEventId),
    Email(DoseEventId),
    Voice(NaiveDate),
    Caregiver(NaiveDate),
    Weekly(NaiveDate),
    Missed(DoseEventId),
}

impl Timer {
    fn rank(&self) -> u8 {
        match self {
            Timer::Push(_) => 0,
            Timer::Email(_) => 1,
            Timer::Voice(_) => 2,
            Timer::Caregiver(_) => 3,
            Timer::Weekly(_) => 5,
            Timer::Missed(_) => 6,
        }
    }

    fn tiebreak(&self) -> String {
        match self {
            Timer::Push(id) | Timer::Email(id) | Timer::Missed(id) => id.0.clone(),
            Timer::Voice(d) | Timer::Caregiver(d) | Timer::Weekly(d) => d.to_string(),
        }
    }
}

fn monday_of(date: NaiveDate) -> NaiveDate {
    date - Days::new(date.weekday().num_days_from_monday() as u64)
}

fn iso_week_label(monday: NaiveDate) -> String {
    let w = monday.iso_week();
    format!("{}-W{:02}", w.year(), w.week())
}

/// Escalation state for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientEngine {
    profile: PatientProfile,
    tz: Tz,
    cfg: TimingConfig,
    last: Timestamp,
    schedules: BTreeMap<ScheduleId, TrackedSchedule>,
    materialized_through: NaiveDate,
    doses: BTreeMap<DoseEventId, Dose>,
    by_date: BTreeMap<NaiveDate, Vec<DoseEventId>>,
    pending: BTreeSet<DoseEventId>,
    days: BTreeMap<NaiveDate, DayEscalationState>,
    next_voice_day: NaiveDate,
    next_review_week: NaiveDate,
    flagged_weeks: BTreeSet<NaiveDate>,
    flags: Vec<Flag>,
}

impl PatientEngine {
    /// Creates an engine whose clock starts at `created_at`.
    pub fn new(profile: PatientProfile, cfg: TimingConfig, created_at: Timestamp) -> Result<Self, EngineError> {
        crate::domain::validate_profile(&profile).map_err(EngineError::Profile)?;
        let tz = profile.tz().map_err(|v| EngineError::Profile(vec![v]))?;
        let today = local_date(tz, created_at);
        let mut engine = Self {
            profile,
            tz,
            cfg,
            last: created_at,
            schedules: BTreeMap::new(),
            materialized_through: today - Days::new(1),
            doses: BTreeMap::new(),
            by_date: BTreeMap::new(),
            pending: BTreeSet::new(),
            days: BTreeMap::new(),
            next_voice_day: today - Days::new(1),
            next_review_week: monday_of(today) - Days::new(7),
            flagged_weeks: BTreeSet::new(),
            flags: Vec::new(),
        };
        while engine.voice_at(engine.next_voice_day) <= created_at {
            engine.next_voice_day = engine.next_voice_day + Days::new(1);
        }
        while engine.review_boundary(engine.next_review_week) <= created_at {
            engine.next_review_week = engine.next_review_week + Days::new(7);
        }
        engine.materialize_through(today + Days::new(1));
        Ok(engine)
    }

    pub fn patient_id(&self) -> &PatientId {
        &self.profile.patient_id
    }

    pub fn profile(&self) -> &PatientProfile {
        &self.profile
    }

    pub fn timezone(&self) -> Tz {
        self.tz
    }

    pub fn timing(&self) -> &TimingConfig {
        &self.cfg
    }

    /// Instant of the last advance.
    pub fn clock(&self) -> Timestamp {
        self.last
    }

    pub fn flags(&self) -> &[Flag] {
        &self.flags
    }

    pub fn day_state(&self, date: NaiveDate) -> Option<&DayEscalationState> {
        self.days.get(&date)
    }

    pub fn dose(&self, id: &DoseEventId) -> Option<DoseView> {
        self.doses.get(id).map(|d| DoseView { event: d.event.clone(), intake: d.intake.clone() })
    }

    /// Every materialized dose, terminal or not, ordered by id.
    pub fn doses(&self) -> impl Iterator<Item = DoseView> + '_ {
        self.doses.values().map(|d| DoseView { event: d.event.clone(), intake: d.intake.clone() })
    }

    pub fn pending(&self) -> Vec<DoseEvent> {
        self.pending.iter().map(|id| self.doses[id].event.clone()).collect()
    }

    pub fn intakes(&self) -> impl Iterator<Item = &IntakeRecord> + '_ {
        self.doses.values().filter_map(|d| d.intake.as_ref())
    }

    pub fn has_schedule(&self, id: &ScheduleId) -> bool {
        self.schedules.contains_key(id)
    }

    /// Replaces the profile. The timezone may change; doses already
    /// materialized keep their instants.
    pub fn update_profile(&mut self, profile: PatientProfile) -> Result<(), EngineError> {
        crate::domain::validate_profile(&profile).map_err(EngineError::Profile)?;
        self.tz = profile.tz().map_err(|v| EngineError::Profile(vec![v]))?;
        self.profile = profile;
        Ok(())
    }

    pub fn add_schedule(&mut self, schedule: DoseSchedule, at: Timestamp) {
        let tracked = TrackedSchedule { schedule, added_at: at.max(self.last), cutoff: None };
        let first = tracked.schedule.start_date.max(local_date(self.tz, tracked.added_at) - Days::new(1));
        if first <= self.materialized_through {
            let range = DateRange { start: first, end: self.materialized_through };
            for date in range.days() {
                self.materialize_slots(&tracked, date);
            }
        }
        self.schedules.insert(tracked.schedule.schedule_id.clone(), tracked);
    }

    /// Cancels every not-yet-due dose of the medication's schedules. Past
    /// doses keep escalating normally.
    pub fn stop_medication(&mut self, medication_id: &MedicationId, at: Timestamp) -> Vec<DoseEventId> {
        let mut removed = Vec::new();
        for tracked in self.schedules.values_mut().filter(|t| &t.schedule.medication_id == medication_id) {
            tracked.cutoff = Some(at);
        }
        let doomed: Vec<DoseEventId> = self
            .doses
            .values()
            .filter(|d| &d.event.medication_id == medication_id && d.event.due_at > at && !d.event.state.is_terminal())
            .map(|d| d.event.dose_event_id.clone())
            .collect();
        for id in doomed {
            let dose = self.doses.remove(&id).expect("listed above");
            self.pending.remove(&id);
            if let Some(ids) = self.by_date.get_mut(&dose.event.local_date) {
                ids.retain(|x| x != &id);
            }
            removed.push(id);
        }
        removed
    }

    fn materialize_slots(&mut self, tracked: &TrackedSchedule, date: NaiveDate) {
        for (time, due) in slots_for_day(&tracked.schedule, date, self.tz) {
            if !tracked.admits(due) {
                continue;
            }
            let id = DoseEventId::for_slot(&tracked.schedule.schedule_id, date, time);
            if self.doses.contains_key(&id) {
                continue;
            }
            let event = DoseEvent {
                dose_event_id: id.clone(),
                schedule_id: tracked.schedule.schedule_id.clone(),
                medication_id: tracked.schedule.medication_id.clone(),
                local_date: date,
                local_time: time,
                due_at: due,
                state: DoseState::Scheduled,
                escalation_log: Vec::new(),
            };
            let missed_at = end_of_local_day(self.tz, date).max(due + self.cfg.email_delay);
            self.doses.insert(id.clone(), Dose { event, pushes_sent: 0, emailed_at: None, intake: None, missed_at });
            self.by_date.entry(date).or_default().push(id.clone());
            self.pending.insert(id);
        }
    }

    fn materialize_through(&mut self, date: NaiveDate) {
        while self.materialized_through < date {
            let next = self.materialized_through + Days::new(1);
            let tracked: Vec<TrackedSchedule> = self.schedules.values().cloned().collect();
            for t in &tracked {
                self.materialize_slots(t, next);
            }
            self.materialized_through = next;
        }
    }

    fn voice_at(&self, date: NaiveDate) -> Timestamp {
        resolve_local(self.tz, date.and_time(self.profile.daily_check_time.time()))
    }

    fn review_boundary(&self, week_start: NaiveDate) -> Timestamp {
        resolve_local(self.tz, (week_start + Days::new(7)).and_hms_opt(0, 0, 0).unwrap())
    }

    fn reminders(&self) -> u32 {
        self.profile.reminders_per_dose.max(1)
    }

    fn next_timer(&self) -> (Timestamp, Timer) {
        let n = self.reminders();
        let mut best: Option<(Timestamp, u8, String, Timer)> = None;
        let mut offer = |at: Timestamp, timer: Timer| {
            let key = (at, timer.rank(), timer.tiebreak());
            if best.as_ref().is_none_or(|b| key < (b.0, b.1, b.2.clone())) {
                best = Some((key.0, key.1, key.2, timer));
            }
        };
        for id in &self.pending {
            let d = &self.doses[id];
            if d.pushes_sent < n {
                offer(d.event.due_at + self.cfg.push_offset(d.pushes_sent, n), Timer::Push(id.clone()));
            } else if d.emailed_at.is_none() {
                offer(d.event.due_at + self.cfg.email_delay, Timer::Email(id.clone()));
            }
            offer(d.missed_at, Timer::Missed(id.clone()));
        }
        for day in self.days.values() {
            if let (Some(sent), false) = (day.voice_sent_at, day.caregiver_stage_done) {
                offer(sent + self.cfg.caregiver_delay_after_voice, Timer::Caregiver(day.local_date));
            }
        }
        offer(self.voice_at(self.next_voice_day), Timer::Voice(self.next_voice_day));
        offer(self.review_boundary(self.next_review_week), Timer::Weekly(self.next_review_week));
        let (at, _, _, timer) = best.expect("voice and weekly timers always exist");
        (at, timer)
    }

    /// Emits every action whose timer falls in `(last, now]`, in order.
    pub fn advance(&mut self, now: Timestamp) -> Result<Vec<EscalationAction>, EngineError> {
        if now < self.last {
            return Err(EngineError::NonMonotone { last: self.last, now });
        }
        self.materialize_through(local_date(self.tz, now) + Days::new(1));
        let mut actions = Vec::new();
        loop {
            let (at, timer) = self.next_timer();
            if at > now {
                break;
            }
            self.fire(at, timer, &mut actions);
        }
        self.last = now;
        debug_assert!(actions.windows(2).all(|w| w[0].sort_key() <= w[1].sort_key()));
        Ok(actions)
    }

    fn action(&self, kind: ActionKind, at: Timestamp, date: NaiveDate, dose: Option<&DoseEventId>) -> EscalationAction {
        EscalationAction {
            kind,
            patient_id: self.profile.patient_id.clone(),
            dose_event_id: dose.cloned(),
            fire_at: at,
            local_date: date,
            notification_id: None,
            flag_id: None,
        }
    }

    fn day_mut(&mut self, date: NaiveDate) -> &mut DayEscalationState {
        let patient_id = self.profile.patient_id.clone();
        self.days.entry(date).or_insert_with(|| DayEscalationState {
            patient_id,
            local_date: date,
            any_ack_today: false,
            voice_sent_at: None,
            caregiver_stage_done: false,
        })
    }

    fn any_ack_on(&self, date: NaiveDate) -> bool {
        self.days.get(&date).is_some_and(|d| d.any_ack_today)
    }

    fn raise_flag(&mut self, kind: FlagKind, at: Timestamp, context: String) -> FlagId {
        let flag_id = FlagId::new(format!("{}.flag{}", self.profile.patient_id, self.flags.len() + 1));
        self.flags.push(Flag {
            flag_id: flag_id.clone(),
            patient_id: self.profile.patient_id.clone(),
            kind,
            raised_at: at,
            context,
        });
        flag_id
    }

    fn fire(&mut self, at: Timestamp, timer: Timer, out: &mut Vec<EscalationAction>) {
        match timer {
            Timer::Push(id) => {
                let d = self.doses.get_mut(&id).expect("pending dose");
                d.pushes_sent += 1;
                if d.event.state == DoseState::Scheduled {
                    d.event.transition(DoseState::NotifiedPush).expect("ladder");
                }
                let nid = NotificationId::new(format!("{id}.push{}", d.pushes_sent));
                d.event.escalation_log.push(EscalationEntry { notification_id: nid.clone(), channel: Channel::Push, at });
                let date = d.event.local_date;
                let mut a = self.action(ActionKind::SendPush, at, date, Some(&id));
                a.notification_id = Some(nid);
                out.push(a);
            }
            Timer::Email(id) => {
                let d = self.doses.get_mut(&id).expect("pending dose");
                d.event.transition(DoseState::NotifiedEmail).expect("ladder");
                d.emailed_at = Some(at);
                let nid = NotificationId::new(format!("{id}.email"));
                d.event.escalation_log.push(EscalationEntry { notification_id: nid.clone(), channel: Channel::Email, at });
                let date = d.event.local_date;
                let mut a = self.action(ActionKind::SendEmail, at, date, Some(&id));
                a.notification_id = Some(nid);
                out.push(a);
            }
            Timer::Missed(id) => {
                let d = self.doses.get_mut(&id).expect("pending dose");
                d.event.transition(DoseState::Missed).expect("ladder");
                let date = d.event.local_date;
                self.pending.remove(&id);
                out.push(self.action(ActionKind::MarkMissed, at, date, Some(&id)));
            }
            Timer::Voice(date) => {
                self.next_voice_day = date + Days::new(1);
                let escalated = self
                    .by_date
                    .get(&date)
                    .is_some_and(|ids| ids.iter().any(|id| self.doses[id].emailed_at.is_some()));
                if escalated && !self.any_ack_on(date) {
                    self.day_mut(date).voice_sent_at = Some(at);
                    let mut a = self.action(ActionKind::SendVoice, at, date, None);
                    a.notification_id = Some(NotificationId::new(format!(
                        "{}.voice.{}",
                        self.profile.patient_id,
                        date.format("%Y%m%d")
                    )));
                    out.push(a);
                }
            }
            Timer::Caregiver(date) => {
                self.day_mut(date).caregiver_stage_done = true;
                if self.any_ack_on(date) {
                    return;
                }
                if self.profile.caregiver_phone.is_some() {
                    let mut a = self.action(ActionKind::SendCaregiverSms, at, date, None);
                    a.notification_id = Some(NotificationId::new(format!(
                        "{}.sms.{}",
                        self.profile.patient_id,
                        date.format("%Y%m%d")
                    )));
                    out.push(a);
                } else {
                    let flag_id = self.raise_flag(
                        FlagKind::RedFlag,
                        at,
                        format!("no intake logged on {date}; caregiver escalation reached without a caregiver number"),
                    );
                    let mut a = self.action(ActionKind::RaiseRedFlag, at, date, None);
                    a.flag_id = Some(flag_id);
                    out.push(a);
                }
            }
            Timer::Weekly(week) => {
                self.next_review_week = week + Days::new(7);
                if let Some(a) = self.review(week, at) {
                    out.push(a);
                }
            }
        }
    }

    /// Escalated doses of the week that carry no intake record.
    fn unlogged_escalations(&self, week_start: NaiveDate) -> usize {
        (0..7)
            .filter_map(|i| self.by_date.get(&(week_start + Days::new(i))))
            .flatten()
            .filter(|id| {
                let d = &self.doses[*id];
                d.emailed_at.is_some() && d.intake.is_none()
            })
            .count()
    }

    fn review(&mut self, week_start: NaiveDate, at: Timestamp) -> Option<EscalationAction> {
        if self.flagged_weeks.contains(&week_start) {
            return None;
        }
        let count = self.unlogged_escalations(week_start);
        if count <= 2 {
            return None;
        }
        self.flagged_weeks.insert(week_start);
        let flag_id = self.raise_flag(
            FlagKind::ProviderFlag,
            at,
            format!("week {}: {count} escalated doses never logged", iso_week_label(week_start)),
        );
        let mut a = self.action(ActionKind::RaiseProviderFlag, at, week_start, None);
        a.flag_id = Some(flag_id);
        Some(a)
    }

    /// Reviews the ISO week containing `week`. Raises at most one provider
    /// flag per week; advancing past the week boundary runs the same review.
    pub fn weekly_review(&mut self, week: NaiveDate, now: Timestamp) -> Result<Option<EscalationAction>, EngineError> {
        let week_start = monday_of(week);
        let boundary = self.review_boundary(week_start);
        if now < boundary {
            return Err(EngineError::ReviewTooEarly { week: week_start, boundary });
        }
        Ok(self.review(week_start, now))
    }

    /// Checks an acknowledgement without applying it. Returns the record the
    /// acknowledgement would produce, or the existing one for a duplicate.
    pub fn preview_ack(&self, id: &DoseEventId, at: Timestamp) -> Result<AckOutcome, EngineError> {
        if at > self.last {
            return Err(EngineError::AheadOfClock { last: self.last, at });
        }
        let Some(dose) = self.doses.get(id) else {
            return Err(self.unknown_or_early(id, at));
        };
        match dose.event.state {
            DoseState::Acknowledged => Ok(AckOutcome {
                record: dose.intake.clone().expect("acknowledged dose has intake"),
                duplicate: true,
            }),
            DoseState::Missed => Err(EngineError::AlreadyMissed(id.clone())),
            _ => {
                let classification = classify_intake(dose.event.due_at, at, &self.cfg)?;
                Ok(AckOutcome {
                    record: IntakeRecord { dose_event_id: id.clone(), acknowledged_at: at, classification },
                    duplicate: false,
                })
            }
        }
    }

    /// Logs an intake. `at` may lie in the past (a late entry) but not ahead
    /// of the engine clock; advance to `at` first so that timers due before
    /// the acknowledgement have fired.
    pub fn on_acknowledge(&mut self, id: &DoseEventId, at: Timestamp) -> Result<AckOutcome, EngineError> {
        let outcome = self.preview_ack(id, at)?;
        if outcome.duplicate {
            return Ok(outcome);
        }
        let dose = self.doses.get_mut(id).expect("previewed");
        dose.event.transition(DoseState::Acknowledged).expect("non-terminal");
        dose.intake = Some(outcome.record.clone());
        let date = dose.event.local_date;
        self.pending.remove(id);
        self.day_mut(date).any_ack_today = true;
        Ok(outcome)
    }

    /// Swaps the timing configuration; pending timers pick it up.
    pub fn set_timing(&mut self, cfg: TimingConfig) {
        self.cfg = cfg;
    }

    fn unknown_or_early(&self, id: &DoseEventId, at: Timestamp) -> EngineError {
        let slot = id.parse_slot().and_then(|(sid, date, time)| {
            let tracked = self.schedules.get(&sid)?;
            let (_, due) = slots_for_day(&tracked.schedule, date, self.tz).into_iter().find(|(t, _)| *t == time)?;
            tracked.admits(due).then_some(due)
        });
        match slot {
            Some(due) => match classify_intake(due, at, &self.cfg) {
                Err(e) => EngineError::TooEarly(e),
                Ok(_) => EngineError::UnknownDose(id.clone()),
            },
            None => EngineError::UnknownDose(id.clone()),
        }
    }

    /// Doses with a local date in `range`: materialized ones with their
    /// current state, later ones as they will be scheduled. Cancelled and
    /// pre-registration slots are left out.
    pub fn doses_in(&self, range: DateRange) -> Vec<DoseView> {
        let mut out = Vec::new();
        for date in range.days() {
            for tracked in self.schedules.values() {
                for (time, due) in slots_for_day(&tracked.schedule, date, self.tz) {
                    let id = DoseEventId::for_slot(&tracked.schedule.schedule_id, date, time);
                    if let Some(d) = self.doses.get(&id) {
                        out.push(DoseView { event: d.event.clone(), intake: d.intake.clone() });
                    } else if date > self.materialized_through {
                        if tracked.admits(due) {
                            out.push(DoseView {
                                event: DoseEvent {
                                    dose_event_id: id,
                                    schedule_id: tracked.schedule.schedule_id.clone(),
                                    medication_id: tracked.schedule.medication_id.clone(),
                                    local_date: date,
                                    local_time: time,
                                    due_at: due,
                                    state: DoseState::Scheduled,
                                    escalation_log: Vec::new(),
                                },
                                intake: None,
                            });
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| a.event.due_at.cmp(&b.event.due_at).then_with(|| a.event.dose_event_id.cmp(&b.event.dose_event_id)));
        out
    }

    /// Next instant at which advancing could change anything, or `None` when
    /// nothing is outstanding.
    pub fn next_wakeup(&self) -> Option<Timestamp> {
        let (at, timer) = self.next_timer();
        let useful = match &timer {
            Timer::Push(_) | Timer::Email(_) | Timer::Missed(_) | Timer::Caregiver(_) => true,
            Timer::Voice(date) => self.by_date.get(date).is_some_and(|ids| ids.iter().any(|id| self.pending.contains(id))),
            Timer::Weekly(week) => self.unlogged_escalations(*week) > 2,
        };
        let horizon = (!self.schedules.is_empty())
            .then(|| resolve_local(self.tz, self.materialized_through.and_hms_opt(0, 0, 0).unwrap()))
            .filter(|t| *t > self.last);
        let timer_at = if useful {
            Some(at)
        } else {
            // A voice or weekly timer with nothing to do; look past it for
            // the next dose timer.
            self.pending
                .iter()
                .map(|id| {
                    let d = &self.doses[id];
                    d.event.due_at.min(d.missed_at)
                })
                .chain(self.days.values().filter(|d| d.voice_sent_at.is_some() && !d.caregiver_stage_done).map(|d| {
                    d.voice_sent_at.unwrap() + self.cfg.caregiver_delay_after_voice
                }))
                .min()
                .map(|t| t.max(at))
        };
        match (timer_at, horizon) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DayPattern, IntakeClass, TimeOfDay};

    fn ts(s: &str) -> Timestamp {
        s.parse().unwrap()
    }

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn profile(phone: bool, caregiver: bool) -> PatientProfile {
        let mut p = PatientProfile::new("p1", "Ana", "UTC");
        p.email = Some("ana@example.org".into());
        if phone {
            p.phone = Some("+6421000001".into());
        }
        if caregiver {
            p.caregiver_phone = Some("+6421000002".into());
        }
        p
    }

    fn schedule(id: &str, times: &[(u32, u32)]) -> DoseSchedule {
        DoseSchedule {
            schedule_id: ScheduleId::new(id),
            medication_id: MedicationId::new(format!("med-{id}")),
            times_of_day: times.iter().map(|&(h, m)| TimeOfDay::hm(h, m)).collect(),
            days: DayPattern::Daily,
            start_date: date("2024-06-03"),
            end_date: None,
        }
    }

    fn engine(p: PatientProfile, scheds: &[DoseSchedule]) -> PatientEngine {
        let start = ts("2024-06-02T23:59:00Z");
        let mut e = PatientEngine::new(p, TimingConfig::default(), start).unwrap();
        for s in scheds {
            e.add_schedule(s.clone(), start);
        }
        e
    }

    fn kinds(actions: &[EscalationAction]) -> Vec<(ActionKind, String)> {
        actions.iter().map(|a| (a.kind, a.fire_at.format("%d %H:%M").to_string())).collect()
    }

    #[test]
    fn email_after_thirty_minutes() {
        let mut e = engine(profile(true, true), &[schedule("s1", &[(8, 0)])]);
        let a = e.advance(ts("2024-06-03T08:00:00Z")).unwrap();
        assert_eq!(kinds(&a), vec![(ActionKind::SendPush, "03 08:00".into())]);
        let a = e.advance(ts("2024-06-03T08:30:00Z")).unwrap();
        assert_eq!(kinds(&a), vec![(ActionKind::SendEmail, "03 08:30".into())]);
        assert!(e.advance(ts("2024-06-03T08:30:00Z")).unwrap().is_empty());
    }

    #[test]
    fn ack_halts_escalation() {
        let mut e = engine(profile(true, true), &[schedule("s1", &[(8, 0)])]);
        e.advance(ts("2024-06-03T08:10:00Z")).unwrap();
        let id = DoseEventId::new("s1.20240603.0800");
        let out = e.on_acknowledge(&id, ts("2024-06-03T08:10:00Z")).unwrap();
        assert_eq!(out.record.classification, IntakeClass::OnTime);
        let rest = e.advance(ts("2024-06-03T23:59:00Z")).unwrap();
        assert!(rest.is_empty(), "{rest:?}");
        assert_eq!(e.dose(&id).unwrap().event.channels(), vec![Channel::Push]);
    }

    #[test]
    fn voice_then_red_flag_without_caregiver() {
        let mut e = engine(profile(true, false), &[schedule("s1", &[(8, 0), (12, 0), (16, 0)])]);
        let a = e.advance(ts("2024-06-04T00:00:00Z")).unwrap();
        let daily: Vec<_> = kinds(&a)
            .into_iter()
            .filter(|(k, _)| !matches!(k, ActionKind::SendPush | ActionKind::SendEmail | ActionKind::MarkMissed))
            .collect();
        assert_eq!(
            daily,
            vec![(ActionKind::SendVoice, "03 20:00".into()), (ActionKind::RaiseRedFlag, "03 21:00".into())]
        );
        assert_eq!(e.flags().len(), 1);
        assert_eq!(e.flags()[0].kind, FlagKind::RedFlag);
        let day = e.day_state(date("2024-06-03")).unwrap();
        assert!(day.caregiver_stage_done && day.voice_sent_at.is_some());
    }

    #[test]
    fn late_ack_defeats_daily_trigger() {
        let mut e = engine(profile(true, true), &[schedule("s1", &[(8, 0)])]);
        e.advance(ts("2024-06-03T09:30:00Z")).unwrap();
        let out = e.on_acknowledge(&"s1.20240603.0800".into(), ts("2024-06-03T09:30:00Z")).unwrap();
        assert_eq!(out.record.classification, IntakeClass::Late);
        let rest = e.advance(ts("2024-06-04T00:00:00Z")).unwrap();
        assert!(rest.iter().all(|a| a.kind != ActionKind::SendVoice));
    }

    #[test]
    fn duplicate_ack_returns_same_record() {
        let mut e = engine(profile(true, true), &[schedule("s1", &[(8, 0)])]);
        e.advance(ts("2024-06-03T08:20:00Z")).unwrap();
        let id: DoseEventId = "s1.20240603.0800".into();
        let first = e.on_acknowledge(&id, ts("2024-06-03T08:20:00Z")).unwrap();
        e.advance(ts("2024-06-03T10:00:00Z")).unwrap();
        let second = e.on_acknowledge(&id, ts("2024-06-03T10:00:00Z")).unwrap();
        assert!(second.duplicate);
        assert_eq!(first.record, second.record);
    }

    #[test]
    fn ack_errors() {
        let mut e = engine(profile(true, true), &[schedule("s1", &[(8, 0)])]);
        e.advance(ts("2024-06-03T07:00:00Z")).unwrap();
        let id: DoseEventId = "s1.20240603.0800".into();
        assert!(matches!(e.on_acknowledge(&id, ts("2024-06-03T07:00:00Z")), Err(EngineError::TooEarly(_))));
        assert!(matches!(e.on_acknowledge(&id, ts("2024-06-03T07:31:00Z")), Err(EngineError::AheadOfClock { .. })));
        assert!(matches!(e.on_acknowledge(&"nope".into(), ts("2024-06-03T07:00:00Z")), Err(EngineError::UnknownDose(_))));
        // A slot two days out is known but far too early.
        assert!(matches!(
            e.on_acknowledge(&"s1.20240606.0800".into(), ts("2024-06-03T07:00:00Z")),
            Err(EngineError::TooEarly(_))
        ));
        e.advance(ts("2024-06-04T00:00:00Z")).unwrap();
        assert_eq!(e.on_acknowledge(&id, ts("2024-06-04T00:00:00Z")), Err(EngineError::AlreadyMissed(id)));
    }

    #[test]
    fn clock_is_monotone() {
        let mut e = engine(profile(true, true), &[]);
        e.advance(ts("2024-06-03T10:00:00Z")).unwrap();
        assert!(matches!(e.advance(ts("2024-06-03T09:59:59Z")), Err(EngineError::NonMonotone { .. })));
    }

    #[test]
    fn repeated_pushes_split_the_email_delay() {
        let mut p = profile(true, true);
        p.reminders_per_dose = 3;
        let mut e = engine(p, &[schedule("s1", &[(8, 0)])]);
        let a = e.advance(ts("2024-06-03T08:30:00Z")).unwrap();
        assert_eq!(
            kinds(&a),
            vec![
                (ActionKind::SendPush, "03 08:00".into()),
                (ActionKind::SendPush, "03 08:10".into()),
                (ActionKind::SendPush, "03 08:20".into()),
                (ActionKind::SendEmail, "03 08:30".into()),
            ]
        );
        let id: DoseEventId = "s1.20240603.0800".into();
        assert_eq!(e.dose(&id).unwrap().event.state, DoseState::NotifiedEmail);
    }

    #[test]
    fn weekly_review_threshold() {
        // Mon 2024-06-03 .. Sun 2024-06-09.
        for (missed_days, expect_flag) in [(2u32, false), (3, true)] {
            let mut e = engine(profile(true, true), &[schedule("s1", &[(8, 0)])]);
            for day in 3..=9u32 {
                let at = ts(&format!("2024-06-{day:02}T08:05:00Z"));
                e.advance(at).unwrap();
                if day - 3 >= missed_days {
                    e.on_acknowledge(&format!("s1.202406{day:02}.0800").as_str().into(), at).unwrap();
                }
            }
            let a = e.advance(ts("2024-06-10T00:00:00Z")).unwrap();
            let flagged = a.iter().any(|x| x.kind == ActionKind::RaiseProviderFlag);
            assert_eq!(flagged, expect_flag, "missed {missed_days}");
            assert!(matches!(e.weekly_review(date("2024-06-05"), ts("2024-06-10T00:00:00Z")), Ok(None)));
        }
    }

    #[test]
    fn weekly_review_ignores_later_acks_and_waits_for_boundary() {
        let mut e = engine(profile(true, true), &[schedule("s1", &[(8, 0)])]);
        for day in 3..=7u32 {
            let at = ts(&format!("2024-06-{day:02}T09:00:00Z"));
            e.advance(at).unwrap();
            e.on_acknowledge(&format!("s1.202406{day:02}.0800").as_str().into(), at).unwrap();
        }
        assert!(matches!(
            e.weekly_review(date("2024-06-03"), ts("2024-06-09T12:00:00Z")),
            Err(EngineError::ReviewTooEarly { .. })
        ));
        e.advance(ts("2024-06-10T00:00:00Z")).unwrap();
        assert!(e.flags().iter().all(|f| f.kind != FlagKind::ProviderFlag));
    }

    #[test]
    fn stop_cancels_future_doses_only() {
        let mut e = engine(profile(true, true), &[schedule("s1", &[(8, 0), (20, 0)])]);
        e.advance(ts("2024-06-03T12:00:00Z")).unwrap();
        let removed = e.stop_medication(&"med-s1".into(), ts("2024-06-03T12:00:00Z"));
        assert!(removed.contains(&"s1.20240603.2000".into()));
        assert!(removed.contains(&"s1.20240604.0800".into()));
        assert!(e.dose(&"s1.20240603.0800".into()).is_some());
        let rest = e.advance(ts("2024-06-06T00:00:00Z")).unwrap();
        assert!(rest.iter().all(|a| a.dose_event_id.as_ref().is_none_or(|d| d.as_str() == "s1.20240603.0800")));
        let views = e.doses_in(DateRange::new(date("2024-06-03"), date("2024-06-10")).unwrap());
        assert_eq!(views.len(), 1);
    }

    #[test]
    fn schedules_added_later_skip_past_slots() {
        let mut e = engine(profile(true, true), &[]);
        e.advance(ts("2024-06-03T10:00:00Z")).unwrap();
        e.add_schedule(schedule("s1", &[(8, 0), (20, 0)]), ts("2024-06-03T10:00:00Z"));
        let views = e.doses_in(DateRange::single(date("2024-06-03")));
        assert_eq!(views.len(), 1);
        assert_eq!(views[0].event.local_time, TimeOfDay::hm(20, 0));
    }

    #[test]
    fn next_wakeup_tracks_timers() {
        let mut e = engine(profile(true, true), &[schedule("s1", &[(8, 0)])]);
        e.advance(ts("2024-06-03T07:00:00Z")).unwrap();
        assert_eq!(e.next_wakeup(), Some(ts("2024-06-03T08:00:00Z")));
        e.advance(ts("2024-06-03T08:05:00Z")).unwrap();
        assert_eq!(e.next_wakeup(), Some(ts("2024-06-03T08:30:00Z")));
        let mut idle = engine(profile(true, true), &[]);
        idle.advance(ts("2024-06-03T08:05:00Z")).unwrap();
        assert_eq!(idle.next_wakeup(), None);
    }
}
