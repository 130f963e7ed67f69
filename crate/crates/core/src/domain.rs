//! Core data model shared by every other module.
//!
//! Values here are plain data plus validation. Identifiers are opaque strings
//! assigned by the store; timestamps are UTC; schedules live in the patient's
//! local wall-clock and are converted when expanded.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveTime, Timelike, Utc, Weekday};
use chrono_tz::Tz;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub type Timestamp = DateTime<Utc>;

macro_rules! opaque_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

opaque_id!(PatientId);
opaque_id!(MedicationId);
opaque_id!(ScheduleId);
opaque_id!(
    /// Deterministic per slot: `{schedule}.{YYYYMMDD}.{HHMM}`.
    DoseEventId
);
opaque_id!(NotificationId);
opaque_id!(FlagId);
opaque_id!(SubmissionId);

impl DoseEventId {
    pub fn for_slot(schedule: &ScheduleId, date: NaiveDate, time: TimeOfDay) -> Self {
        Self(format!(
            "{}.{}.{:02}{:02}",
            schedule,
            date.format("%Y%m%d"),
            time.0.hour(),
            time.0.minute()
        ))
    }

    /// Splits an id back into `(schedule, date, time)`. Returns `None` for ids
    /// that were not produced by [`DoseEventId::for_slot`].
    pub fn parse_slot(&self) -> Option<(ScheduleId, NaiveDate, TimeOfDay)> {
        let mut parts = self.0.rsplitn(3, '.');
        let hhmm = parts.next()?;
        let ymd = parts.next()?;
        let schedule = parts.next()?;
        if hhmm.len() != 4 || ymd.len() != 8 {
            return None;
        }
        let date = NaiveDate::parse_from_str(ymd, "%Y%m%d").ok()?;
        let time = NaiveTime::parse_from_str(hhmm, "%H%M").ok()?;
        Some((ScheduleId::new(schedule), date, TimeOfDay(time)))
    }
}

/// A local wall-clock time of day at minute resolution, serialized as `HH:MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeOfDay(pub NaiveTime);

impl TimeOfDay {
    pub fn hm(hour: u32, minute: u32) -> Self {
        Self(NaiveTime::from_hms_opt(hour, minute, 0).expect("valid hour/minute"))
    }

    pub fn time(self) -> NaiveTime {
        self.0
    }
}

impl Default for TimeOfDay {
    fn default() -> Self {
        Self::hm(20, 0)
    }
}

impl fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.0.hour(), self.0.minute())
    }
}

impl FromStr for TimeOfDay {
    type Err = chrono::ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NaiveTime::parse_from_str(s, "%H:%M").map(TimeOfDay)
    }
}

impl Serialize for TimeOfDay {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TimeOfDay {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub patient_id: PatientId,
    pub display_name: String,
    /// IANA zone name, e.g. `Europe/London`.
    pub timezone: String,
    #[serde(default)]
    pub phone: Option<String>,
    #[serde(default)]
    pub email: Option<String>,
    #[serde(default)]
    pub caregiver_phone: Option<String>,
    #[serde(default)]
    pub daily_check_time: TimeOfDay,
    #[serde(default = "default_reminders")]
    pub reminders_per_dose: u32,
}

fn default_reminders() -> u32 {
    1
}

impl PatientProfile {
    pub fn new(patient_id: impl Into<String>, display_name: impl Into<String>, timezone: impl Into<String>) -> Self {
        Self {
            patient_id: PatientId::new(patient_id),
            display_name: display_name.into(),
            timezone: timezone.into(),
            phone: None,
            email: None,
            caregiver_phone: None,
            daily_check_time: TimeOfDay::default(),
            reminders_per_dose: 1,
        }
    }

    pub fn tz(&self) -> Result<Tz, Violation> {
        self.timezone.parse::<Tz>().map_err(|_| Violation::UnknownTimezone(self.timezone.clone()))
    }
}

/// A single broken invariant, reported by the `validate_*` functions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "violation", content = "detail", rename_all = "snake_case")]
pub enum Violation {
    #[error("unknown timezone: {0}")]
    UnknownTimezone(String),
    #[error("{field} is not an E.164 number: {value}")]
    NotE164 { field: String, value: String },
    #[error("email must contain exactly one '@': {0}")]
    BadEmail(String),
    #[error("reminders_per_dose ≥ 1")]
    RemindersPerDose,
    #[error("medication name is empty")]
    EmptyName,
    #[error("times_of_day is empty")]
    NoTimes,
    #[error("times_of_day must be strictly increasing")]
    TimesNotIncreasing,
    #[error("weekday set is empty")]
    NoWeekdays,
    #[error("end_date {end} is before start_date {start}")]
    EndBeforeStart { start: NaiveDate, end: NaiveDate },
}

pub fn is_e164(s: &str) -> bool {
    let Some(digits) = s.strip_prefix('+') else {
        return false;
    };
    (2..=15).contains(&digits.len())
        && digits.bytes().all(|b| b.is_ascii_digit())
        && !digits.starts_with('0')
}

/// Checks every profile invariant and returns all violations at once.
pub fn validate_profile(profile: &PatientProfile) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if let Err(v) = profile.tz() {
        out.push(v);
    }
    for (field, value) in [("phone", &profile.phone), ("caregiver_phone", &profile.caregiver_phone)] {
        if let Some(v) = value {
            if !is_e164(v) {
                out.push(Violation::NotE164 { field: field.into(), value: v.clone() });
            }
        }
    }
    if let Some(email) = &profile.email {
        if email.matches('@').count() != 1 {
            out.push(Violation::BadEmail(email.clone()));
        }
    }
    if profile.reminders_per_dose < 1 {
        out.push(Violation::RemindersPerDose);
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DoseForm {
    Tablet,
    Capsule,
    Liquid,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MedicationStatus {
    Active,
    Stopped,
}

/// Which loading path created a medication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MedicationSource {
    Auto,
    Webform,
    Manual,
    Scan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Medication {
    pub medication_id: MedicationId,
    pub patient_id: PatientId,
    pub name: String,
    pub strength: String,
    pub form: DoseForm,
    #[serde(default)]
    pub prescriber: Option<String>,
    pub status: MedicationStatus,
    #[serde(default)]
    pub stop_reason: Option<String>,
    #[serde(default)]
    pub stopped_at: Option<Timestamp>,
    pub source: MedicationSource,
}

impl Medication {
    pub fn is_active(&self) -> bool {
        self.status == MedicationStatus::Active
    }

    /// STOPPED iff `stopped_at` is present.
    pub fn is_consistent(&self) -> bool {
        (self.status == MedicationStatus::Stopped) == self.stopped_at.is_some()
    }

    /// Marks the medication as discontinued. A second stop is rejected and
    /// leaves the record untouched.
    pub fn stop(&mut self, reason: impl Into<String>, at: Timestamp) -> Result<(), AlreadyStopped> {
        if !self.is_active() {
            return Err(AlreadyStopped(self.medication_id.clone()));
        }
        self.status = MedicationStatus::Stopped;
        self.stop_reason = Some(reason.into());
        self.stopped_at = Some(at);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("medication {0} is already stopped")]
pub struct AlreadyStopped(pub MedicationId);

/// Recurrence pattern of a schedule: every day, or a subset of weekdays.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum DayPattern {
    #[default]
    Daily,
    /// Sorted Monday-first, no duplicates.
    Weekdays(Vec<Weekday>),
}

impl DayPattern {
    pub fn weekdays(days: impl IntoIterator<Item = Weekday>) -> Self {
        let mut v: Vec<Weekday> = days.into_iter().collect();
        v.sort_by_key(|d| d.num_days_from_monday());
        v.dedup();
        DayPattern::Weekdays(v)
    }

    pub fn matches(&self, date: NaiveDate) -> bool {
        use chrono::Datelike;
        match self {
            DayPattern::Daily => true,
            DayPattern::Weekdays(days) => days.contains(&date.weekday()),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DayPatternRepr {
    Word(String),
    List(Vec<Weekday>),
}

impl Serialize for DayPattern {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            DayPattern::Daily => s.serialize_str("daily"),
            DayPattern::Weekdays(days) => days.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for DayPattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match DayPatternRepr::deserialize(d)? {
            DayPatternRepr::Word(w) if w.eq_ignore_ascii_case("daily") => Ok(DayPattern::Daily),
            DayPatternRepr::Word(w) => Err(serde::de::Error::custom(format!("unknown day pattern {w:?}"))),
            DayPatternRepr::List(days) => Ok(DayPattern::weekdays(days)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoseSchedule {
    pub schedule_id: ScheduleId,
    pub medication_id: MedicationId,
    pub times_of_day: Vec<TimeOfDay>,
    #[serde(default)]
    pub days: DayPattern,
    pub start_date: NaiveDate,
    #[serde(default)]
    pub end_date: Option<NaiveDate>,
}

impl DoseSchedule {
    pub fn covers(&self, date: NaiveDate) -> bool {
        date >= self.start_date && self.end_date.is_none_or(|end| date <= end) && self.days.matches(date)
    }
}

pub fn validate_schedule(schedule: &DoseSchedule) -> Vec<Violation> {
    let mut out = Vec::new();
    if schedule.times_of_day.is_empty() {
        out.push(Violation::NoTimes);
    } else if schedule.times_of_day.windows(2).any(|w| w[0] >= w[1]) {
        out.push(Violation::TimesNotIncreasing);
    }
    if let DayPattern::Weekdays(days) = &schedule.days {
        if days.is_empty() {
            out.push(Violation::NoWeekdays);
        }
    }
    if let Some(end) = schedule.end_date {
        if end < schedule.start_date {
            out.push(Violation::EndBeforeStart { start: schedule.start_date, end });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DoseState {
    Scheduled,
    NotifiedPush,
    NotifiedEmail,
    Acknowledged,
    Missed,
}

impl DoseState {
    pub fn is_terminal(self) -> bool {
        matches!(self, DoseState::Acknowledged | DoseState::Missed)
    }

    /// The legal edges of the per-dose ladder.
    pub fn can_transition(self, to: DoseState) -> bool {
        use DoseState::*;
        match (self, to) {
            (Scheduled, NotifiedPush) | (NotifiedPush, NotifiedEmail) | (NotifiedEmail, Missed) => true,
            (from, Acknowledged) => !from.is_terminal(),
            _ => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DoseState::Scheduled => "SCHEDULED",
            DoseState::NotifiedPush => "NOTIFIED_PUSH",
            DoseState::NotifiedEmail => "NOTIFIED_EMAIL",
            DoseState::Acknowledged => "ACKNOWLEDGED",
            DoseState::Missed => "MISSED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("illegal dose transition {from:?} -> {to:?}")]
pub struct IllegalTransition {
    pub from: DoseState,
    pub to: DoseState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscalationEntry {
    pub notification_id: NotificationId,
    pub channel: Channel,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoseEvent {
    pub dose_event_id: DoseEventId,
    pub schedule_id: ScheduleId,
    pub medication_id: MedicationId,
    pub local_date: NaiveDate,
    pub local_time: TimeOfDay,
    pub due_at: Timestamp,
    pub state: DoseState,
    #[serde(default)]
    pub escalation_log: Vec<EscalationEntry>,
}

impl DoseEvent {
    pub fn transition(&mut self, to: DoseState) -> Result<(), IllegalTransition> {
        if !self.state.can_transition(to) {
            return Err(IllegalTransition { from: self.state, to });
        }
        self.state = to;
        Ok(())
    }

    /// Channels of the per-dose log, in order.
    pub fn channels(&self) -> Vec<Channel> {
        self.escalation_log.iter().map(|e| e.channel).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IntakeClass {
    OnTime,
    Late,
}

impl IntakeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            IntakeClass::OnTime => "ON_TIME",
            IntakeClass::Late => "LATE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntakeRecord {
    pub dose_event_id: DoseEventId,
    pub acknowledged_at: Timestamp,
    pub classification: IntakeClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Channel {
    Push,
    Email,
    Voice,
    CaregiverSms,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Push => "PUSH",
            Channel::Email => "EMAIL",
            Channel::Voice => "VOICE",
            Channel::CaregiverSms => "CAREGIVER_SMS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeliveryOutcome {
    Delivered,
    Failed,
    SkippedNoTarget,
}

impl DeliveryOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            DeliveryOutcome::Delivered => "DELIVERED",
            DeliveryOutcome::Failed => "FAILED",
            DeliveryOutcome::SkippedNoTarget => "SKIPPED_NO_TARGET",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotificationRecord {
    pub notification_id: NotificationId,
    pub patient_id: PatientId,
    #[serde(default)]
    pub dose_event_id: Option<DoseEventId>,
    pub channel: Channel,
    pub sent_at: Timestamp,
    pub target: String,
    pub outcome: DeliveryOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FlagKind {
    RedFlag,
    ProviderFlag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flag {
    pub flag_id: FlagId,
    pub patient_id: PatientId,
    pub kind: FlagKind,
    pub raised_at: Timestamp,
    pub context: String,
}
