//! Worked examples for loading, stopping, acknowledging and reporting,
//! driven through the same facade the HTTP service uses.

use chrono::{Days, NaiveDate, TimeDelta};
use mama_core::channels::Transports;
use mama_core::domain::{
    DayPattern, DoseEventId, DoseForm, FlagKind, IntakeClass, MedicationSource, MedicationStatus, PatientId,
    PatientProfile, TimeOfDay, Timestamp,
};
use mama_core::escalation::EngineError;
use mama_core::ingestion::{IngestionError, MedicationEntry, ScanStatus, WebformPayload};
use mama_core::mama::Mama;
use mama_core::reporting::{provider_export, EXPORT_FORMAT};
use mama_core::scheduler::{DateRange, TimingConfig};
use mama_core::store::Store;
use mama_core::world::WorldError;

fn ts(s: &str) -> Timestamp {
    s.parse().unwrap()
}

fn day(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

fn mama() -> Mama {
    Mama::new(Store::in_memory(TimingConfig::default()), Transports::recording().0).unwrap()
}

fn entry(name: &str, strength: &str, times: &[(u32, u32)], start: &str) -> MedicationEntry {
    MedicationEntry {
        name: name.into(),
        strength: strength.into(),
        form: DoseForm::Tablet,
        times_of_day: times.iter().map(|&(h, m)| TimeOfDay::hm(h, m)).collect(),
        days: DayPattern::Daily,
        start_date: day(start),
        end_date: None,
        prescriber: None,
    }
}

fn signed_up(m: &mut Mama, caregiver: bool) -> PatientId {
    let mut profile = PatientProfile::new("", "Ana", "UTC");
    profile.phone = Some("+6421000001".into());
    profile.email = Some("ana@example.org".into());
    profile.daily_check_time = TimeOfDay::hm(20, 0);
    if caregiver {
        profile.caregiver_phone = Some("+6421000002".into());
    }
    m.register(profile, ts("2024-06-02T12:00:00Z"), Some("tok".into())).unwrap().patient_id
}

fn world_err(e: mama_core::mama::OpError) -> WorldError {
    e.world().cloned().unwrap_or_else(|| panic!("not a domain error: {e}"))
}

#[test]
fn webform_with_two_entries_loads_both() {
    let mut m = mama();
    let pid = signed_up(&mut m, true);
    let payload = WebformPayload {
        patient_id: pid.clone(),
        entries: vec![entry("Metformin", "500 mg", &[(8, 0), (20, 0)], "2024-06-03"), entry("Lisinopril", "10 mg", &[(8, 0)], "2024-06-03")],
    };
    let loaded = m.load_webform(&payload, ts("2024-06-02T12:05:00Z")).unwrap();
    assert_eq!(loaded.len(), 2);
    assert!(loaded.iter().all(|l| l.medication.source == MedicationSource::Webform));
    assert_eq!(m.world().medications_of(&pid).count(), 2);
    let schedules: usize = loaded.iter().map(|l| m.world().schedules_of(&l.medication.medication_id).count()).sum();
    assert_eq!(schedules, 2);
}

#[test]
fn webform_with_a_bad_entry_persists_nothing() {
    let mut m = mama();
    let pid = signed_up(&mut m, true);
    let before = m.store().log_bytes().unwrap();
    let payload = WebformPayload {
        patient_id: pid.clone(),
        entries: vec![entry("Metformin", "500 mg", &[(8, 0)], "2024-06-03"), entry("", "10 mg", &[(8, 0)], "2024-06-03")],
    };
    let err = world_err(m.load_webform(&payload, ts("2024-06-02T18:00:00Z")).unwrap_err());
    let WorldError::Ingestion(IngestionError::Invalid(diagnostics)) = err else { panic!("{err:?}") };
    assert_eq!(diagnostics.len(), 1);
    assert_eq!(diagnostics[0].entry, 2);
    assert_eq!(m.store().log_bytes().unwrap(), before);
    // The rejected request did not move the clock either.
    assert_eq!(m.world().clock(), Some(ts("2024-06-02T12:00:00Z")));
}

#[test]
fn loading_the_same_payload_twice_is_a_duplicate() {
    let mut m = mama();
    let pid = signed_up(&mut m, true);
    let payload = WebformPayload { patient_id: pid, entries: vec![entry("Metformin", "500 mg", &[(8, 0)], "2024-06-03")] };
    m.load_webform(&payload, ts("2024-06-02T12:05:00Z")).unwrap();
    let before = m.store().log_bytes().unwrap();
    let err = world_err(m.load_webform(&payload, ts("2024-06-02T12:06:00Z")).unwrap_err());
    assert!(err.to_string().contains("duplicate"), "{err}");
    assert_eq!(m.store().log_bytes().unwrap(), before);
}

#[test]
fn manual_add_validates_the_schedule() {
    let mut m = mama();
    let pid = signed_up(&mut m, true);
    let at = ts("2024-06-02T13:00:00Z");
    let added = m.add_manual(&pid, &entry("Aspirin", "81 mg", &[(9, 0)], "2024-06-03"), at).unwrap();
    assert_eq!(added.medication.source, MedicationSource::Manual);
    assert!(m.add_manual(&pid, &entry("Aspirin", "81 mg", &[], "2024-06-03"), at).is_err());
    let mut backwards = entry("Zinc", "5 mg", &[(9, 0)], "2024-06-03");
    backwards.end_date = Some(day("2024-06-01"));
    assert!(m.add_manual(&pid, &backwards, at).is_err());
    assert_eq!(m.world().medications_of(&pid).count(), 1);
}

#[test]
fn scan_queue_transcribe_and_reject() {
    let mut m = mama();
    let pid = signed_up(&mut m, true);
    let at = ts("2024-06-02T14:00:00Z");
    let scan = m.submit_scan(&pid, "sha256:abcd", at).unwrap();
    assert_eq!(scan.status, ScanStatus::Pending);

    // An invalid transcription leaves the submission pending.
    let bad = WebformPayload { patient_id: pid.clone(), entries: vec![entry("", "1 mg", &[(8, 0)], "2024-06-03")] };
    assert!(m.transcribe(&scan.submission_id, &bad, at).is_err());
    assert_eq!(m.world().scan(&scan.submission_id).unwrap().status, ScanStatus::Pending);

    let good = WebformPayload { patient_id: pid.clone(), entries: vec![entry("Amlodipine", "5 mg", &[(8, 0)], "2024-06-03")] };
    let loaded = m.transcribe(&scan.submission_id, &good, at).unwrap();
    assert_eq!(loaded[0].medication.source, MedicationSource::Scan);
    assert_eq!(m.world().scan(&scan.submission_id).unwrap().status, ScanStatus::Transcribed);
    let err = world_err(m.transcribe(&scan.submission_id, &good, at).unwrap_err());
    assert!(matches!(err, WorldError::Ingestion(IngestionError::NotPending(_, ScanStatus::Transcribed))));

    let other = m.submit_scan(&pid, "sha256:ef01", at).unwrap();
    let rejected = m.reject_scan(&other.submission_id, at).unwrap();
    assert_eq!(rejected.status, ScanStatus::Rejected);
    assert_eq!(m.world().medications_of(&pid).count(), 1);
}

#[test]
fn stopping_a_medication() {
    let mut m = mama();
    let pid = signed_up(&mut m, true);
    let payload = WebformPayload {
        patient_id: pid.clone(),
        entries: vec![entry("Statin", "20 mg", &[(21, 0)], "2024-06-03"), entry("Iron", "65 mg", &[(9, 0)], "2024-06-03")],
    };
    let loaded = m.load_webform(&payload, ts("2024-06-02T12:05:00Z")).unwrap();
    let statin = loaded[0].medication.medication_id.clone();
    let iron = loaded[1].medication.medication_id.clone();

    let stopped = m.flag_stopped(&statin, "side effects", ts("2024-06-04T10:00:00Z")).unwrap();
    assert_eq!(stopped.status, MedicationStatus::Stopped);
    assert_eq!(stopped.stop_reason.as_deref(), Some("side effects"));
    let again = world_err(m.flag_stopped(&statin, "again", ts("2024-06-04T11:00:00Z")).unwrap_err());
    let WorldError::AlreadyStopped(current) = again else { panic!("{again:?}") };
    assert_eq!(current.stop_reason.as_deref(), Some("side effects"));

    let blank = m.flag_stopped(&iron, "", ts("2024-06-04T11:00:00Z")).unwrap();
    assert_eq!(blank.stop_reason.as_deref(), Some(""));

    let range = DateRange::new(day("2024-06-03"), day("2024-06-06")).unwrap();
    let report = m.report(&pid, range).unwrap();
    assert_eq!(report.stopped_medications.len(), 2);
    // Statin doses of Jun 3 (missed at midnight) stay; later ones are gone.
    let row = report.rows.iter().find(|r| r.medication_id == statin).unwrap();
    assert_eq!(row.total, 1);
    let export = m.export(&pid, range).unwrap();
    assert!(export.contains("\"stop_reason\": \"side effects\""));
}

/// One daily dose for 14 days: 9 taken on time, 2 late, 3 never.
fn fortnight(caregiver: bool) -> (Mama, PatientId, DateRange) {
    let mut m = mama();
    let pid = signed_up(&mut m, caregiver);
    let payload = WebformPayload { patient_id: pid.clone(), entries: vec![entry("Metformin", "500 mg", &[(8, 0)], "2024-06-03")] };
    let loaded = m.load_webform(&payload, ts("2024-06-02T12:05:00Z")).unwrap();
    let schedule = loaded[0].schedule.schedule_id.clone();
    let start = day("2024-06-03");
    for i in 0..14u64 {
        let date = start + Days::new(i);
        let due = ts(&format!("{date}T08:00:00Z"));
        let id = DoseEventId::for_slot(&schedule, date, TimeOfDay::hm(8, 0));
        let late_by = match i {
            0..=8 => Some(10),
            9 | 10 => Some(90),
            _ => None,
        };
        if let Some(minutes) = late_by {
            let at = due + TimeDelta::minutes(minutes);
            m.acknowledge(&id, at, at).unwrap();
        }
    }
    m.advance(ts("2024-06-18T00:00:00Z")).unwrap();
    (m, pid, DateRange::new(start, start + Days::new(13)).unwrap())
}

#[test]
fn fourteen_doses_nine_on_time_two_late_three_missed() {
    let (m, pid, range) = fortnight(false);
    let report = m.report(&pid, range).unwrap();
    let row = &report.rows[0];
    assert_eq!((row.on_time, row.late, row.missed, row.pending, row.total), (9, 2, 3, 0, 14));
    assert_eq!((report.taken, report.owed), (11, 14));
    assert_eq!(report.adherence_rate, 11.0 / 14.0);

    // Recount from the intake log itself.
    let engine = m.world().engine(&pid).unwrap();
    let on_time = engine.intakes().filter(|r| r.classification == IntakeClass::OnTime).count();
    let late = engine.intakes().filter(|r| r.classification == IntakeClass::Late).count();
    assert_eq!((on_time, late), (9, 2));

    // Three unacknowledged days without a caregiver: three red flags.
    let red: Vec<_> = report.flags.iter().filter(|f| f.kind == FlagKind::RedFlag).collect();
    assert_eq!(red.len(), 3);
    assert!(red.iter().all(|f| !f.context.is_empty()));
    // The week of Jun 10 had more than two escalated, unlogged doses. Its
    // review runs on Monday Jun 17, so the flag belongs to that day.
    assert!(report.flags.iter().all(|f| f.kind != FlagKind::ProviderFlag));
    let later = m.report(&pid, DateRange::single(day("2024-06-17"))).unwrap();
    let provider: Vec<_> = later.flags.iter().filter(|f| f.kind == FlagKind::ProviderFlag).collect();
    assert_eq!(provider.len(), 1);
    assert_eq!(provider[0].raised_at, ts("2024-06-17T00:00:00Z"));
}

#[test]
fn caregiver_present_means_no_red_flag() {
    let (m, pid, range) = fortnight(true);
    let report = m.report(&pid, range).unwrap();
    assert!(report.flags.iter().all(|f| f.kind != FlagKind::RedFlag));
}

#[test]
fn export_is_deterministic() {
    let (a, pid, range) = fortnight(false);
    let (b, _, _) = fortnight(false);
    let first = a.export(&pid, range).unwrap();
    assert_eq!(first, b.export(&pid, range).unwrap());
    assert_eq!(first, a.export(&pid, range).unwrap());
    let doc = provider_export(a.world(), &pid, range).unwrap();
    assert_eq!(doc.format, EXPORT_FORMAT);
    assert_eq!(doc.medications[0].times_of_day, [TimeOfDay::hm(8, 0)]);
}

#[test]
fn empty_report() {
    let mut m = mama();
    let pid = signed_up(&mut m, true);
    let range = DateRange::single(day("2024-06-03"));
    let report = m.report(&pid, range).unwrap();
    assert!(report.rows.is_empty());
    assert_eq!((report.taken, report.owed, report.adherence_rate), (0, 0, 0.0));
    let doc = provider_export(m.world(), &pid, range).unwrap();
    assert!(doc.medications.is_empty());
    assert!(serde_json::from_str::<serde_json::Value>(&m.export(&pid, range).unwrap()).is_ok());
}

#[test]
fn acknowledgements_are_classified_and_idempotent() {
    let mut m = mama();
    let pid = signed_up(&mut m, true);
    let payload = WebformPayload { patient_id: pid, entries: vec![entry("Metformin", "500 mg", &[(8, 0)], "2024-06-03")] };
    let schedule = m.load_webform(&payload, ts("2024-06-02T12:05:00Z")).unwrap()[0].schedule.schedule_id.clone();
    let id = DoseEventId::for_slot(&schedule, day("2024-06-03"), TimeOfDay::hm(8, 0));

    let early = m.acknowledge(&id, ts("2024-06-03T07:00:00Z"), ts("2024-06-03T07:00:00Z")).unwrap_err();
    assert!(matches!(world_err(early), WorldError::Engine(EngineError::TooEarly(_))));
    let first = m.acknowledge(&id, ts("2024-06-03T09:00:00Z"), ts("2024-06-03T09:05:00Z")).unwrap();
    assert_eq!(first.record.classification, IntakeClass::OnTime);
    assert!(!first.duplicate);
    let seq = m.store().seq();
    let again = m.acknowledge(&id, ts("2024-06-03T09:30:00Z"), ts("2024-06-03T09:30:00Z")).unwrap();
    assert!(again.duplicate);
    assert_eq!(again.record, first.record);
    // Only the clock advance was logged for the duplicate.
    assert_eq!(m.store().seq(), seq + 1);
}
