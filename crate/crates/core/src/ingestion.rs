//! Medication loading paths: webform auto-load, in-app manual add and the
//! scan-then-transcribe queue.
//!
//! This module validates and maps payloads. Persistence happens in the store,
//! which applies a whole payload as one log event or nothing at all.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::domain::{
    validate_schedule, DayPattern, DoseForm, DoseSchedule, Medication, MedicationId, MedicationSource,
    MedicationStatus, PatientId, ScheduleId, SubmissionId, TimeOfDay, Timestamp, Violation,
};

/// One medication line as typed into a form or transcribed from a scan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicationEntry {
    pub name: String,
    pub strength: String,
    pub form: DoseForm,
    pub times_of_day: Vec<TimeOfDay>,
    #[serde(default)]
    pub days: DayPattern,
    pub start_date: NaiveDate,
    #[serde(default)]
    pub end_date: Option<NaiveDate>,
    #[serde(default)]
    pub prescriber: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebformPayload {
    pub patient_id: PatientId,
    pub entries: Vec<MedicationEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScanStatus {
    Pending,
    Transcribed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanSubmission {
    pub submission_id: SubmissionId,
    pub patient_id: PatientId,
    /// Content id of the stored image.
    pub image_ref: String,
    pub submitted_at: Timestamp,
    pub status: ScanStatus,
    #[serde(default)]
    pub resolved_payload: Option<WebformPayload>,
}

/// Problems with one entry of a payload, by 1-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryDiagnostic {
    pub entry: usize,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IngestionError {
    #[error("payload has no entries")]
    Empty,
    #[error("unknown patient {0}")]
    UnknownPatient(PatientId),
    #[error("invalid entries: {}", summarize(.0))]
    Invalid(Vec<EntryDiagnostic>),
    #[error("unknown scan submission {0}")]
    UnknownSubmission(SubmissionId),
    #[error("scan submission {0} is {1:?}, not PENDING")]
    NotPending(SubmissionId, ScanStatus),
    #[error("scan image is empty")]
    EmptyImage,
    #[error("payload is for patient {payload} but the submission belongs to {submission}")]
    PatientMismatch { payload: PatientId, submission: PatientId },
}

fn summarize(d: &[EntryDiagnostic]) -> String {
    d.iter().map(|e| format!("entry {}: {}", e.entry, e.problems.join("; "))).collect::<Vec<_>>().join(" | ")
}

/// Key under which two entries count as the same prescription.
pub fn duplicate_key(name: &str, strength: &str, times: &[TimeOfDay]) -> (String, String, Vec<TimeOfDay>) {
    (name.trim().to_lowercase(), strength.trim().to_lowercase(), times.to_vec())
}

/// Checks the entries of one payload against each other and against the
/// patient's active medications (given as their duplicate keys).
pub fn validate_entries(
    entries: &[MedicationEntry],
    existing: &[(String, String, Vec<TimeOfDay>)],
) -> Result<(), IngestionError> {
    if entries.is_empty() {
        return Err(IngestionError::Empty);
    }
    let mut diagnostics = Vec::new();
    let mut seen: Vec<(String, String, Vec<TimeOfDay>)> = Vec::new();
    for (i, entry) in entries.iter().enumerate() {
        let mut problems: Vec<String> = Vec::new();
        if entry.name.trim().is_empty() {
            problems.push(Violation::EmptyName.to_string());
        }
        let probe = DoseSchedule {
            schedule_id: ScheduleId::new("probe"),
            medication_id: MedicationId::new("probe"),
            times_of_day: entry.times_of_day.clone(),
            days: entry.days.clone(),
            start_date: entry.start_date,
            end_date: entry.end_date,
        };
        problems.extend(validate_schedule(&probe).iter().map(ToString::to_string));
        let key = duplicate_key(&entry.name, &entry.strength, &entry.times_of_day);
        if existing.contains(&key) {
            problems.push(format!("duplicate of an active medication: {} {}", entry.name, entry.strength));
        } else if seen.contains(&key) {
            problems.push(format!("duplicate of an earlier entry in this payload: {} {}", entry.name, entry.strength));
        }
        seen.push(key);
        if !problems.is_empty() {
            diagnostics.push(EntryDiagnostic { entry: i + 1, problems });
        }
    }
    if diagnostics.is_empty() {
        Ok(())
    } else {
        Err(IngestionError::Invalid(diagnostics))
    }
}

/// Maps a validated entry to its medication and schedule records.
pub fn map_entry(
    entry: &MedicationEntry,
    patient_id: &PatientId,
    medication_id: MedicationId,
    schedule_id: ScheduleId,
    source: MedicationSource,
) -> (Medication, DoseSchedule) {
    let medication = Medication {
        medication_id: medication_id.clone(),
        patient_id: patient_id.clone(),
        name: entry.name.trim().to_owned(),
        strength: entry.strength.trim().to_owned(),
        form: entry.form,
        prescriber: entry.prescriber.clone(),
        status: MedicationStatus::Active,
        stop_reason: None,
        stopped_at: None,
        source,
    };
    let schedule = DoseSchedule {
        schedule_id,
        medication_id,
        times_of_day: entry.times_of_day.clone(),
        days: entry.days.clone(),
        start_date: entry.start_date,
        end_date: entry.end_date,
    };
    (medication, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(name: &str, times: &[(u32, u32)]) -> MedicationEntry {
        MedicationEntry {
            name: name.into(),
            strength: "10 mg".into(),
            form: DoseForm::Tablet,
            times_of_day: times.iter().map(|&(h, m)| TimeOfDay::hm(h, m)).collect(),
            days: DayPattern::Daily,
            start_date: "2024-06-03".parse().unwrap(),
            end_date: None,
            prescriber: None,
        }
    }

    #[test]
    fn valid_entries_pass() {
        assert_eq!(validate_entries(&[entry("A", &[(8, 0)]), entry("B", &[(9, 0)])], &[]), Ok(()));
    }

    #[test]
    fn diagnostics_name_the_entry() {
        let err = validate_entries(&[entry("A", &[(8, 0)]), entry(" ", &[(9, 0)])], &[]).unwrap_err();
        let IngestionError::Invalid(d) = err else { panic!("{err:?}") };
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].entry, 2);
        assert!(d[0].problems[0].contains("name"));
    }

    #[test]
    fn schedule_problems_are_reported() {
        let mut e = entry("A", &[]);
        e.end_date = Some("2024-06-01".parse().unwrap());
        let IngestionError::Invalid(d) = validate_entries(&[e], &[]).unwrap_err() else { panic!() };
        assert_eq!(d[0].problems.len(), 2);
    }

    #[test]
    fn duplicates_in_payload_and_store() {
        let a = entry("Aspirin", &[(8, 0)]);
        let mut a2 = a.clone();
        a2.name = "ASPIRIN ".into();
        assert!(matches!(validate_entries(&[a.clone(), a2], &[]), Err(IngestionError::Invalid(_))));
        let existing = vec![duplicate_key("aspirin", "10 MG", &a.times_of_day)];
        assert!(matches!(validate_entries(&[a.clone()], &existing), Err(IngestionError::Invalid(_))));
        // Same drug at another time is a different prescription.
        assert_eq!(validate_entries(&[entry("Aspirin", &[(20, 0)])], &existing), Ok(()));
    }

    #[test]
    fn empty_payload() {
        assert_eq!(validate_entries(&[], &[]), Err(IngestionError::Empty));
    }

    #[test]
    fn webform_json_shape() {
        let json = r#"{"patient_id":"p-1","entries":[{"name":"Metformin","strength":"500 mg","form":"TABLET",
            "times_of_day":["08:00","20:00"],"days":"daily","start_date":"2024-06-03"}]}"#;
        let p: WebformPayload = serde_json::from_str(json).unwrap();
        assert_eq!(p.entries[0].times_of_day.len(), 2);
        assert_eq!(p.entries[0].end_date, None);
    }
}
