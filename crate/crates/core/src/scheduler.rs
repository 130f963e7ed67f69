//! Schedule expansion, wall-clock resolution and intake classification.

use chrono::{Days, LocalResult, NaiveDate, NaiveDateTime, TimeDelta, TimeZone, Timelike};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::domain::{
    DoseEvent, DoseEventId, DoseSchedule, DoseState, IntakeClass, PatientProfile, TimeOfDay,
    Timestamp,
};

/// Escalation and classification timings. Serialized in whole minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TimingMinutes", into = "TimingMinutes")]
pub struct TimingConfig {
    pub email_delay: TimeDelta,
    pub on_time_window: TimeDelta,
    pub caregiver_delay_after_voice: TimeDelta,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            email_delay: TimeDelta::minutes(30),
            on_time_window: TimeDelta::minutes(60),
            caregiver_delay_after_voice: TimeDelta::minutes(60),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TimingError {
    #[error("all timing durations must be positive")]
    NonPositive,
    #[error("email_delay must not exceed on_time_window")]
    EmailAfterWindow,
    #[error("on_time_window must not exceed 24h")]
    WindowTooLong,
}

impl TimingConfig {
    pub fn from_minutes(email: i64, window: i64, caregiver: i64) -> Result<Self, TimingError> {
        let cfg = Self {
            email_delay: TimeDelta::minutes(email),
            on_time_window: TimeDelta::minutes(window),
            caregiver_delay_after_voice: TimeDelta::minutes(caregiver),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TimingError> {
        let zero = TimeDelta::zero();
        if self.email_delay <= zero || self.on_time_window <= zero || self.caregiver_delay_after_voice <= zero {
            return Err(TimingError::NonPositive);
        }
        if self.email_delay > self.on_time_window {
            return Err(TimingError::EmailAfterWindow);
        }
        if self.on_time_window > TimeDelta::hours(24) {
            return Err(TimingError::WindowTooLong);
        }
        Ok(())
    }

    /// Offset of the `k`-th push reminder (0-based) when `count` pushes are
    /// spread evenly over the email delay. Whole seconds, rounded down.
    pub fn push_offset(&self, k: u32, count: u32) -> TimeDelta {
        let count = count.max(1) as i64;
        TimeDelta::seconds(self.email_delay.num_seconds() * k as i64 / count)
    }
}

#[derive(Serialize, Deserialize)]
struct TimingMinutes {
    email_delay_minutes: i64,
    on_time_window_minutes: i64,
    caregiver_delay_minutes: i64,
}

impl TryFrom<TimingMinutes> for TimingConfig {
    type Error = TimingError;

    fn try_from(m: TimingMinutes) -> Result<Self, Self::Error> {
        TimingConfig::from_minutes(m.email_delay_minutes, m.on_time_window_minutes, m.caregiver_delay_minutes)
    }
}

impl From<TimingConfig> for TimingMinutes {
    fn from(c: TimingConfig) -> Self {
        Self {
            email_delay_minutes: c.email_delay.num_minutes(),
            on_time_window_minutes: c.on_time_window.num_minutes(),
            caregiver_delay_minutes: c.caregiver_delay_after_voice.num_minutes(),
        }
    }
}

/// Inclusive range of local calendar dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("date range is empty: {start} > {end}")]
pub struct EmptyRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self, EmptyRange> {
        if start > end {
            return Err(EmptyRange { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn single(date: NaiveDate) -> Self {
        Self { start: date, end: date }
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> {
        let end = self.end;
        self.start.iter_days().take_while(move |d| *d <= end)
    }

    pub fn len_days(&self) -> i64 {
        (self.end - self.start).num_days() + 1
    }
}

/// Converts a local wall-clock reading to UTC.
///
/// Ambiguous readings (clocks going back) take the earlier instant. Readings
/// inside a gap (clocks going forward) move to the first valid instant after
/// the gap.
pub fn resolve_local(tz: Tz, local: NaiveDateTime) -> Timestamp {
    match tz.from_local_datetime(&local) {
        LocalResult::Single(t) => t.to_utc(),
        LocalResult::Ambiguous(a, b) => a.to_utc().min(b.to_utc()),
        LocalResult::None => {
            let mut probe = local.with_second(0).unwrap() + TimeDelta::minutes(1);
            loop {
                if let Some(t) = tz.from_local_datetime(&probe).earliest() {
                    return t.to_utc();
                }
                probe += TimeDelta::minutes(1);
            }
        }
    }
}

pub fn local_date(tz: Tz, at: Timestamp) -> NaiveDate {
    at.with_timezone(&tz).date_naive()
}

/// First instant of the local day after `date`.
pub fn end_of_local_day(tz: Tz, date: NaiveDate) -> Timestamp {
    let next = date.checked_add_days(Days::new(1)).expect("date overflow");
    resolve_local(tz, next.and_hms_opt(0, 0, 0).unwrap())
}

/// Dose slots of one schedule on one local date, as `(time, due)` pairs in
/// wall-clock order. Slots that resolve to the same instant (several times
/// inside one DST gap, or a gap time and the time right after it) collapse
/// into the earliest of them.
pub fn slots_for_day(schedule: &DoseSchedule, date: NaiveDate, tz: Tz) -> Vec<(TimeOfDay, Timestamp)> {
    if !schedule.covers(date) {
        return Vec::new();
    }
    let mut out: Vec<(TimeOfDay, Timestamp)> = Vec::with_capacity(schedule.times_of_day.len());
    for &time in &schedule.times_of_day {
        let due = resolve_local(tz, date.and_time(time.time()));
        if out.iter().all(|(_, d)| *d != due) {
            out.push((time, due));
        }
    }
    out
}

/// One SCHEDULED event per covered date and slot, in due order.
pub fn expand_schedule(schedule: &DoseSchedule, range: DateRange, tz: Tz) -> Vec<DoseEvent> {
    let mut out = Vec::new();
    for date in range.days() {
        for (time, due) in slots_for_day(schedule, date, tz) {
            out.push(DoseEvent {
                dose_event_id: DoseEventId::for_slot(&schedule.schedule_id, date, time),
                schedule_id: schedule.schedule_id.clone(),
                medication_id: schedule.medication_id.clone(),
                local_date: date,
                local_time: time,
                due_at: due,
                state: DoseState::Scheduled,
                escalation_log: Vec::new(),
            });
        }
    }
    out.sort_by(|a, b| a.due_at.cmp(&b.due_at).then_with(|| a.dose_event_id.cmp(&b.dose_event_id)));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClassifyError {
    #[error("acknowledgement at {at} is earlier than {earliest}")]
    TooEarly { at: Timestamp, earliest: Timestamp },
}

/// ON_TIME iff `acknowledged_at <= due_at + on_time_window`. Early intakes
/// down to `due_at - email_delay` count as on time; anything earlier is
/// rejected.
pub fn classify_intake(
    due_at: Timestamp,
    acknowledged_at: Timestamp,
    cfg: &TimingConfig,
) -> Result<IntakeClass, ClassifyError> {
    let earliest = due_at - cfg.email_delay;
    if acknowledged_at < earliest {
        return Err(ClassifyError::TooEarly { at: acknowledged_at, earliest });
    }
    if acknowledged_at <= due_at + cfg.on_time_window {
        Ok(IntakeClass::OnTime)
    } else {
        Ok(IntakeClass::Late)
    }
}

/// Earliest instant after `now` at which any timer tied to the pending events
/// fires. Looks only at the events themselves plus the profile's daily check;
/// the escalation engine has an exact version that also knows which daily
/// stages have already run.
pub fn next_wakeup(
    pending: &[DoseEvent],
    profile: &PatientProfile,
    now: Timestamp,
    cfg: &TimingConfig,
) -> Option<Timestamp> {
    let pending: Vec<&DoseEvent> = pending.iter().filter(|e| !e.state.is_terminal()).collect();
    if pending.is_empty() {
        return None;
    }
    let tz = profile.tz().ok()?;
    let mut candidates = Vec::new();
    for e in &pending {
        for k in 0..profile.reminders_per_dose.max(1) {
            candidates.push(e.due_at + cfg.push_offset(k, profile.reminders_per_dose));
        }
        candidates.push(e.due_at + cfg.email_delay);
        candidates.push(end_of_local_day(tz, e.local_date).max(e.due_at + cfg.email_delay));
        let check = resolve_local(tz, e.local_date.and_time(profile.daily_check_time.time()));
        candidates.push(check);
        candidates.push(check + cfg.caregiver_delay_after_voice);
    }
    candidates.into_iter().filter(|t| *t > now).min()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DayPattern;
    use chrono::Weekday;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn ts(s: &str) -> Timestamp {
        s.parse().unwrap()
    }

    fn schedule(times: &[(u32, u32)]) -> DoseSchedule {
        DoseSchedule {
            schedule_id: "sch-1".into(),
            medication_id: "med-1".into(),
            times_of_day: times.iter().map(|&(h, m)| TimeOfDay::hm(h, m)).collect(),
            days: DayPattern::Daily,
            start_date: date(2024, 1, 1),
            end_date: None,
        }
    }

    #[test]
    fn daily_three_days() {
        let ev = expand_schedule(&schedule(&[(8, 0)]), DateRange::new(date(2024, 6, 1), date(2024, 6, 3)).unwrap(), chrono_tz::UTC);
        assert_eq!(ev.len(), 3);
        assert!(ev.iter().all(|e| e.due_at.hour() == 8 && e.state == DoseState::Scheduled));
    }

    #[test]
    fn twice_daily_two_days() {
        let ev = expand_schedule(
            &schedule(&[(8, 0), (20, 0)]),
            DateRange::new(date(2024, 6, 1), date(2024, 6, 2)).unwrap(),
            chrono_tz::Europe::Paris,
        );
        assert_eq!(ev.len(), 4);
        assert!(ev.windows(2).all(|w| w[0].due_at < w[1].due_at));
    }

    #[test]
    fn weekday_subset_and_bounds() {
        let mut s = schedule(&[(9, 0)]);
        s.days = DayPattern::weekdays([Weekday::Mon, Weekday::Fri]);
        s.start_date = date(2024, 6, 4);
        s.end_date = Some(date(2024, 6, 14));
        // June 2024: Mon 3, Fri 7, Mon 10, Fri 14, Mon 17.
        let ev = expand_schedule(&s, DateRange::new(date(2024, 6, 1), date(2024, 6, 30)).unwrap(), chrono_tz::UTC);
        let days: Vec<u32> = ev.iter().map(|e| chrono::Datelike::day(&e.local_date)).collect();
        assert_eq!(days, vec![7, 10, 14]);
    }

    #[test]
    fn empty_range_rejected() {
        assert!(DateRange::new(date(2024, 1, 2), date(2024, 1, 1)).is_err());
    }

    #[test]
    fn gap_reading_moves_past_the_gap() {
        let ny = chrono_tz::America::New_York;
        // 2024-03-10 02:00-03:00 does not exist in New York; 03:00 EDT is 07:00Z.
        assert_eq!(resolve_local(ny, date(2024, 3, 10).and_hms_opt(2, 30, 0).unwrap()), ts("2024-03-10T07:00:00Z"));
        assert_eq!(resolve_local(ny, date(2024, 3, 10).and_hms_opt(2, 0, 0).unwrap()), ts("2024-03-10T07:00:00Z"));
        // 2024-11-03 01:30 happens twice; earlier is EDT (-4).
        assert_eq!(resolve_local(ny, date(2024, 11, 3).and_hms_opt(1, 30, 0).unwrap()), ts("2024-11-03T05:30:00Z"));
    }

    #[test]
    fn gap_slots_collapse() {
        let ev = expand_schedule(
            &schedule(&[(1, 30), (2, 0), (2, 30), (3, 0), (3, 30)]),
            DateRange::single(date(2024, 3, 10)),
            chrono_tz::America::New_York,
        );
        let due: Vec<_> = ev.iter().map(|e| (e.local_time.to_string(), e.due_at)).collect();
        assert_eq!(
            due,
            vec![
                ("01:30".into(), ts("2024-03-10T06:30:00Z")),
                ("02:00".into(), ts("2024-03-10T07:00:00Z")),
                ("03:30".into(), ts("2024-03-10T07:30:00Z")),
            ]
        );
    }

    #[test]
    fn classify_boundaries() {
        let cfg = TimingConfig::default();
        let due = ts("2024-06-01T08:00:00Z");
        assert_eq!(classify_intake(due, ts("2024-06-01T09:00:00Z"), &cfg), Ok(IntakeClass::OnTime));
        assert_eq!(classify_intake(due, ts("2024-06-01T09:00:01Z"), &cfg), Ok(IntakeClass::Late));
        assert_eq!(classify_intake(due, ts("2024-06-01T09:01:00Z"), &cfg), Ok(IntakeClass::Late));
        assert_eq!(classify_intake(due, ts("2024-06-01T07:55:00Z"), &cfg), Ok(IntakeClass::OnTime));
        assert_eq!(classify_intake(due, ts("2024-06-01T07:30:00Z"), &cfg), Ok(IntakeClass::OnTime));
        assert!(classify_intake(due, ts("2024-06-01T07:29:59Z"), &cfg).is_err());
    }

    #[test]
    fn timing_config_invariants() {
        assert!(TimingConfig::from_minutes(30, 60, 60).is_ok());
        assert!(TimingConfig::from_minutes(30, 30, 60).is_ok());
        assert_eq!(TimingConfig::from_minutes(45, 30, 60), Err(TimingError::EmailAfterWindow));
        assert_eq!(TimingConfig::from_minutes(0, 30, 60), Err(TimingError::NonPositive));
        assert_eq!(TimingConfig::from_minutes(30, 25 * 60, 60), Err(TimingError::WindowTooLong));
        let toml_cfg: TimingConfig =
            toml::from_str("email_delay_minutes = 20\non_time_window_minutes = 45\ncaregiver_delay_minutes = 90").unwrap();
        assert_eq!(toml_cfg.caregiver_delay_after_voice, TimeDelta::minutes(90));
        assert!(toml::from_str::<TimingConfig>("email_delay_minutes = 90\non_time_window_minutes = 45\ncaregiver_delay_minutes = 90").is_err());
    }

    #[test]
    fn push_offsets_split_email_delay() {
        let cfg = TimingConfig::default();
        assert_eq!(cfg.push_offset(0, 3), TimeDelta::zero());
        assert_eq!(cfg.push_offset(1, 3), TimeDelta::minutes(10));
        assert_eq!(cfg.push_offset(2, 3), TimeDelta::minutes(20));
        assert_eq!(cfg.push_offset(1, 7), TimeDelta::seconds(257));
    }

    fn event(due: &str, state: DoseState) -> DoseEvent {
        let due = ts(due);
        DoseEvent {
            dose_event_id: "sch-1.20240601.0800".into(),
            schedule_id: "sch-1".into(),
            medication_id: "med-1".into(),
            local_date: due.date_naive(),
            local_time: TimeOfDay::hm(due.hour(), due.minute()),
            due_at: due,
            state,
            escalation_log: vec![],
        }
    }

    #[test]
    fn wakeup_examples() {
        let profile = PatientProfile::new("p1", "Ana", "UTC");
        let cfg = TimingConfig::default();
        let pending = [event("2024-06-01T08:00:00Z", DoseState::Scheduled)];
        assert_eq!(next_wakeup(&pending, &profile, ts("2024-06-01T07:00:00Z"), &cfg), Some(ts("2024-06-01T08:00:00Z")));
        let pushed = [event("2024-06-01T08:00:00Z", DoseState::NotifiedPush)];
        assert_eq!(next_wakeup(&pushed, &profile, ts("2024-06-01T08:05:00Z"), &cfg), Some(ts("2024-06-01T08:30:00Z")));
        assert_eq!(next_wakeup(&[], &profile, ts("2024-06-01T08:05:00Z"), &cfg), None);
        let done = [event("2024-06-01T08:00:00Z", DoseState::Acknowledged)];
        assert_eq!(next_wakeup(&done, &profile, ts("2024-06-01T08:05:00Z"), &cfg), None);
    }
}
