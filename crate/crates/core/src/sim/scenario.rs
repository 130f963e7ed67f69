//! Scenario files: patients with their medications, a horizon, and a script
//! of acknowledgements on a virtual clock.

use std::collections::BTreeSet;

use chrono::{Datelike, Days, NaiveDate, NaiveTime, TimeDelta, Timelike, Weekday};
use chrono_tz::Tz;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    validate_profile, DayPattern, DoseForm, DoseSchedule, MedicationId, PatientId, PatientProfile,
    ScheduleId, TimeOfDay, Timestamp,
};
use crate::ingestion::MedicationEntry;
use crate::scheduler::{resolve_local, slots_for_day, TimingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMedication {
    pub name: String,
    #[serde(default)]
    pub strength: String,
    #[serde(default = "default_form")]
    pub form: DoseForm,
    pub times_of_day: Vec<TimeOfDay>,
    #[serde(default)]
    pub days: DayPattern,
    /// Defaults to the horizon start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_date: Option<NaiveDate>,
}

fn default_form() -> DoseForm {
    DoseForm::Tablet
}

fn default_reminders() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPatient {
    pub id: String,
    #[serde(default)]
    pub name: String,
    pub timezone: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phone: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub email: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caregiver_phone: Option<String>,
    #[serde(default)]
    pub daily_check_time: TimeOfDay,
    #[serde(default = "default_reminders")]
    pub reminders_per_dose: u32,
    #[serde(default)]
    pub medications: Vec<ScenarioMedication>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptAction {
    Ack,
    Noop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptItem {
    pub at: Timestamp,
    pub patient: String,
    pub action: ScriptAction,
    /// `Name@YYYY-MM-DDTHH:MM` in the patient's local wall-clock time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dose: Option<String>,
}

/// Seeded random acknowledgement behaviour, expanded into script items
/// before a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    /// Chance that a dose gets acknowledged at all.
    pub ack_probability: f64,
    /// Acknowledgements land uniformly in `[due - early, due + late]`.
    #[serde(default = "default_early")]
    pub early_minutes: i64,
    #[serde(default = "default_late")]
    pub late_minutes: i64,
}

fn default_early() -> i64 {
    45
}

fn default_late() -> i64 {
    180
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub horizon: Horizon,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<Behavior>,
    #[serde(default)]
    pub patients: Vec<ScenarioPatient>,
    #[serde(default)]
    pub script: Vec<ScriptItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("horizon ends before it starts")]
    Horizon,
    #[error("patient {0}: {1}")]
    Patient(String, String),
    #[error("duplicate patient id {0}")]
    DuplicatePatient(String),
    #[error("patient {0}: duplicate medication name {1}")]
    DuplicateMedication(String, String),
    #[error("script item {0}: {1}")]
    Script(usize, String),
    #[error("script item {0} references unknown dose {1}")]
    UnknownDose(usize, String),
}

/// A dose named by medication and local slot.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DoseRef {
    pub medication: String,
    pub date: NaiveDate,
    pub time: TimeOfDay,
}

impl DoseRef {
    pub fn parse(s: &str) -> Option<Self> {
        let (name, slot) = s.rsplit_once('@')?;
        let (date, time) = slot.split_once('T')?;
        Some(Self {
            medication: name.to_owned(),
            date: date.parse().ok()?,
            time: TimeOfDay(NaiveTime::parse_from_str(time, "%H:%M").ok()?),
        })
    }
}

impl std::fmt::Display for DoseRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}T{}", self.medication, self.date, self.time.time().format("%H:%M"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanAction {
    Ack(DoseRef),
    Noop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanItem {
    pub at: Timestamp,
    pub patient: usize,
    pub action: PlanAction,
}

/// A validated scenario with horizon-clipped medications, the run window
/// and the full script (explicit items merged with generated behaviour).
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub timing: TimingConfig,
    pub horizon: Horizon,
    pub profiles: Vec<PatientProfile>,
    /// Per patient, in load order.
    pub medications: Vec<Vec<MedicationEntry>>,
    /// Patients register and load medications here.
    pub setup_at: Timestamp,
    /// The run ends here.
    pub end_at: Timestamp,
    pub script: Vec<PlanItem>,
}

impl Plan {
    pub fn timezone(&self, patient: usize) -> Tz {
        self.profiles[patient].tz().expect("validated")
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Validates and resolves the scenario for a run.
    pub fn plan(&self) -> Result<Plan, ScenarioError> {
        let h = self.horizon;
        if h.end < h.start {
            return Err(ScenarioError::Horizon);
        }
        let timing = self.timing.unwrap_or_default();
        timing.validate().map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let mut profiles = Vec::new();
        let mut medications = Vec::new();
        let mut ids = BTreeSet::new();
        for p in &self.patients {
            if !ids.insert(p.id.clone()) {
                return Err(ScenarioError::DuplicatePatient(p.id.clone()));
            }
            let profile = PatientProfile {
                patient_id: PatientId::new(p.id.clone()),
                display_name: if p.name.is_empty() { p.id.clone() } else { p.name.clone() },
                timezone: p.timezone.clone(),
                phone: p.phone.clone(),
                email: p.email.clone(),
                caregiver_phone: p.caregiver_phone.clone(),
                daily_check_time: p.daily_check_time,
                reminders_per_dose: p.reminders_per_dose,
            };
            if p.id.is_empty() || p.id.contains(char::is_whitespace) {
                return Err(ScenarioError::Patient(p.id.clone(), "id must be non-empty without spaces".into()));
            }
            validate_profile(&profile).map_err(|v| {
                ScenarioError::Patient(p.id.clone(), v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
            })?;
            let mut names = BTreeSet::new();
            let mut entries = Vec::new();
            for m in &p.medications {
                if m.name.trim().is_empty() || m.name.contains('@') || m.name.contains(char::is_whitespace) {
                    return Err(ScenarioError::Patient(p.id.clone(), format!("bad medication name {:?}", m.name)));
                }
                if !names.insert(m.name.clone()) {
                    return Err(ScenarioError::DuplicateMedication(p.id.clone(), m.name.clone()));
                }
                let start = m.start_date.unwrap_or(h.start).max(h.start);
                let end = m.end_date.unwrap_or(h.end).min(h.end);
                if end < start {
                    continue;
                }
                entries.push(MedicationEntry {
                    name: m.name.clone(),
                    strength: if m.strength.is_empty() { "1 unit".into() } else { m.strength.clone() },
                    form: m.form,
                    times_of_day: m.times_of_day.clone(),
                    days: m.days.clone(),
                    start_date: start,
                    end_date: Some(end),
                    prescriber: None,
                });
            }
            if !entries.is_empty() {
                crate::ingestion::validate_entries(&entries, &[])
                    .map_err(|e| ScenarioError::Patient(p.id.clone(), e.to_string()))?;
            }
            profiles.push(profile);
            medications.push(entries);
        }
        let tzs: Vec<Tz> = profiles.iter().map(|p| p.tz().expect("validated")).collect();
        let setup_at = tzs
            .iter()
            .map(|tz| resolve_local(*tz, h.start.and_hms_opt(0, 0, 0).unwrap()))
            .min()
            .unwrap_or_else(|| h.start.and_hms_opt(0, 0, 0).unwrap().and_utc())
            - TimeDelta::minutes(1);
        let end_at = tzs
            .iter()
            .map(|tz| resolve_local(*tz, run_end_date(h.end).and_hms_opt(0, 0, 0).unwrap()))
            .max()
            .unwrap_or_else(|| run_end_date(h.end).and_hms_opt(0, 0, 0).unwrap().and_utc());

        let mut script = Vec::new();
        let mut last = setup_at;
        for (i, item) in self.script.iter().enumerate() {
            let n = i + 1;
            let patient = self
                .patients
                .iter()
                .position(|p| p.id == item.patient)
                .ok_or_else(|| ScenarioError::Script(n, format!("unknown patient {}", item.patient)))?;
            if item.at.second() != 0 || item.at.nanosecond() != 0 {
                return Err(ScenarioError::Script(n, "timestamps must be whole minutes".into()));
            }
            if item.at <= setup_at || item.at > end_at {
                return Err(ScenarioError::Script(n, format!("{} is outside the horizon", item.at)));
            }
            if item.at < last {
                return Err(ScenarioError::Script(n, "timestamps must not decrease".into()));
            }
            last = item.at;
            let action = match item.action {
                ScriptAction::Noop => PlanAction::Noop,
                ScriptAction::Ack => {
                    let text = item.dose.as_deref().ok_or_else(|| ScenarioError::Script(n, "ack needs a dose".into()))?;
                    let dose = DoseRef::parse(text).ok_or_else(|| ScenarioError::Script(n, format!("bad dose ref {text}")))?;
                    if !slot_exists(&medications[patient], &dose, tzs[patient]) {
                        return Err(ScenarioError::UnknownDose(n, text.to_owned()));
                    }
                    PlanAction::Ack(dose)
                }
            };
            script.push(PlanItem { at: item.at, patient, action });
        }
        if let Some(b) = &self.behavior {
            let generated = behave(b, self.seed, &medications, &tzs, setup_at, end_at);
            script.extend(generated);
            // Stable: explicit items stay ahead of generated ones at the
            // same instant.
            script.sort_by_key(|i| i.at);
        }
        Ok(Plan { timing, horizon: h, profiles, medications, setup_at, end_at, script })
    }
}

/// Local date whose midnight ends the run: late enough for the last day's
/// daily stages and for the review of the horizon's last week.
pub fn run_end_date(end: NaiveDate) -> NaiveDate {
    let days_to_monday = 7 - end.weekday().num_days_from_monday() as u64;
    (end + Days::new(2)).max(end + Days::new(days_to_monday))
}

fn probe_schedule(entry: &MedicationEntry) -> DoseSchedule {
    DoseSchedule {
        schedule_id: ScheduleId::new("s"),
        medication_id: MedicationId::new("m"),
        times_of_day: entry.times_of_day.clone(),
        days: entry.days.clone(),
        start_date: entry.start_date,
        end_date: entry.end_date,
    }
}

fn slot_exists(entries: &[MedicationEntry], dose: &DoseRef, tz: Tz) -> bool {
    entries
        .iter()
        .find(|e| e.name == dose.medication)
        .is_some_and(|e| slots_for_day(&probe_schedule(e), dose.date, tz).iter().any(|(t, _)| *t == dose.time))
}

fn behave(
    b: &Behavior,
    seed: u64,
    medications: &[Vec<MedicationEntry>],
    tzs: &[Tz],
    setup_at: Timestamp,
    end_at: Timestamp,
) -> Vec<PlanItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (patient, entries) in medications.iter().enumerate() {
        for entry in entries {
            let schedule = probe_schedule(entry);
            let mut date = entry.start_date;
            while Some(date) <= entry.end_date {
                for (time, due) in slots_for_day(&schedule, date, tzs[patient]) {
                    if !rng.random_bool(b.ack_probability.clamp(0.0, 1.0)) {
                        continue;
                    }
                    let offset = rng.random_range(-b.early_minutes..=b.late_minutes.max(-b.early_minutes));
                    let at = due + TimeDelta::minutes(offset);
                    if at > setup_at && at <= end_at {
                        let dose = DoseRef { medication: entry.name.clone(), date, time };
                        out.push(PlanItem { at, patient, action: PlanAction::Ack(dose) });
                    }
                }
                date = date + Days::new(1);
            }
        }
    }
    out.sort_by_key(|i| i.at);
    out
}

/// Weekday set helper for generators and tests.
pub fn weekdays(days: &[Weekday]) -> DayPattern {
    DayPattern::Weekdays(days.to_vec())
}
