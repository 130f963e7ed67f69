//! The full domain state, rebuilt by folding the event log.
//!
//! [`World::apply`] is the only way state changes. Every mutation is first
//! checked by a `prepare_*` method that returns the event to log, so a
//! rejected request never reaches the log.

use std::collections::BTreeMap;

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};

use crate::channels::RenderContext;
use crate::domain::{
    validate_profile, DoseEventId, DoseSchedule, Medication, MedicationId, MedicationSource,
    NotificationRecord, PatientId, PatientProfile, ScheduleId, SubmissionId, Timestamp, Violation,
};
use crate::escalation::{AckOutcome, EngineError, EscalationAction, PatientEngine};
use crate::ingestion::{
    duplicate_key, map_entry, validate_entries, IngestionError, MedicationEntry, ScanStatus,
    ScanSubmission, WebformPayload,
};
use crate::scheduler::{DateRange, TimingConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadedMedication {
    pub medication: Medication,
    pub schedule: DoseSchedule,
}

/// The closed set of domain mutations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Configured { timing: TimingConfig },
    PatientRegistered { at: Timestamp, profile: PatientProfile, token: Option<String> },
    ProfileUpdated { at: Timestamp, profile: PatientProfile },
    MedicationsLoaded {
        at: Timestamp,
        patient_id: PatientId,
        source: MedicationSource,
        items: Vec<LoadedMedication>,
        submission_id: Option<SubmissionId>,
    },
    MedicationStopped { at: Timestamp, medication_id: MedicationId, reason: String },
    ClockAdvanced { to: Timestamp },
    DoseAcknowledged { at: Timestamp, dose_event_id: DoseEventId },
    NotificationsDispatched { records: Vec<NotificationRecord> },
    ScanSubmitted { submission: ScanSubmission },
    ScanRejected { at: Timestamp, submission_id: SubmissionId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub profile: PatientProfile,
    pub token: Option<String>,
    pub registered_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorldError {
    #[error("invalid profile: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Profile(Vec<Violation>),
    #[error("patient {0} already exists")]
    DuplicatePatient(PatientId),
    #[error("unknown patient {0}")]
    UnknownPatient(PatientId),
    #[error("unknown medication {0}")]
    UnknownMedication(MedicationId),
    #[error("medication {} is already stopped", .0.medication_id)]
    AlreadyStopped(Box<Medication>),
    #[error("clock moved backwards: at {at}, world clock {clock}")]
    NonMonotone { clock: Timestamp, at: Timestamp },
    #[error(transparent)]
    Ingestion(#[from] IngestionError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Side results of applying an event.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Applied {
    /// Escalation actions that became due while applying; the caller
    /// dispatches them.
    pub actions: Vec<EscalationAction>,
    pub ack: Option<AckOutcome>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Counters {
    patients: u64,
    medications: u64,
    schedules: u64,
    scans: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    timing: TimingConfig,
    clock: Option<Timestamp>,
    patients: BTreeMap<PatientId, PatientRecord>,
    engines: BTreeMap<PatientId, PatientEngine>,
    medications: BTreeMap<MedicationId, Medication>,
    schedules: BTreeMap<ScheduleId, DoseSchedule>,
    scans: BTreeMap<SubmissionId, ScanSubmission>,
    notifications: Vec<NotificationRecord>,
    counters: Counters,
}

impl Default for World {
    fn default() -> Self {
        Self::new(TimingConfig::default())
    }
}

impl World {
    pub fn new(timing: TimingConfig) -> Self {
        Self {
            timing,
            clock: None,
            patients: BTreeMap::new(),
            engines: BTreeMap::new(),
            medications: BTreeMap::new(),
            schedules: BTreeMap::new(),
            scans: BTreeMap::new(),
            notifications: Vec::new(),
            counters: Counters::default(),
        }
    }

    pub fn timing(&self) -> &TimingConfig {
        &self.timing
    }

    pub fn clock(&self) -> Option<Timestamp> {
        self.clock
    }

    pub fn patients(&self) -> impl Iterator<Item = &PatientRecord> {
        self.patients.values()
    }

    pub fn patient(&self, id: &PatientId) -> Option<&PatientRecord> {
        self.patients.get(id)
    }

    pub fn engine(&self, id: &PatientId) -> Option<&PatientEngine> {
        self.engines.get(id)
    }

    pub fn medication(&self, id: &MedicationId) -> Option<&Medication> {
        self.medications.get(id)
    }

    pub fn schedule(&self, id: &ScheduleId) -> Option<&DoseSchedule> {
        self.schedules.get(id)
    }

    pub fn scan(&self, id: &SubmissionId) -> Option<&ScanSubmission> {
        self.scans.get(id)
    }

    pub fn notifications(&self) -> &[NotificationRecord] {
        &self.notifications
    }

    /// Medications of a patient in id order.
    pub fn medications_of<'a>(&'a self, patient: &'a PatientId) -> impl Iterator<Item = &'a Medication> + 'a {
        self.medications.values().filter(move |m| &m.patient_id == patient)
    }

    /// Schedules belonging to one medication.
    pub fn schedules_of<'a>(&'a self, medication: &'a MedicationId) -> impl Iterator<Item = &'a DoseSchedule> + 'a {
        self.schedules.values().filter(move |s| &s.medication_id == medication)
    }

    /// Patient owning a dose event id.
    pub fn patient_of_dose(&self, dose: &DoseEventId) -> Option<&PatientId> {
        let (schedule, _, _) = dose.parse_slot()?;
        let med = self.schedules.get(&schedule)?.medication_id.clone();
        self.medications.get(&med).map(|m| &m.patient_id)
    }

    pub fn scans(&self) -> impl Iterator<Item = &ScanSubmission> {
        self.scans.values()
    }

    pub fn find_token(&self, token: &str) -> Option<&PatientId> {
        self.patients.values().find(|p| p.token.as_deref() == Some(token)).map(|p| &p.profile.patient_id)
    }

    fn check_clock(&self, at: Timestamp) -> Result<(), WorldError> {
        match self.clock {
            Some(clock) if at < clock => Err(WorldError::NonMonotone { clock, at }),
            _ => Ok(()),
        }
    }

    fn require_patient(&self, id: &PatientId) -> Result<&PatientRecord, WorldError> {
        self.patients.get(id).ok_or_else(|| WorldError::UnknownPatient(id.clone()))
    }

    /// Registers a patient. An empty `patient_id` gets a fresh one.
    pub fn prepare_register(
        &self,
        mut profile: PatientProfile,
        at: Timestamp,
        token: Option<String>,
    ) -> Result<Event, WorldError> {
        self.check_clock(at)?;
        if profile.patient_id.as_str().is_empty() {
            profile.patient_id = PatientId::new(format!("p-{}", self.counters.patients + 1));
        }
        if self.patients.contains_key(&profile.patient_id) {
            return Err(WorldError::DuplicatePatient(profile.patient_id));
        }
        validate_profile(&profile).map_err(WorldError::Profile)?;
        Ok(Event::PatientRegistered { at, profile, token })
    }

    pub fn prepare_update_profile(&self, profile: PatientProfile, at: Timestamp) -> Result<Event, WorldError> {
        self.check_clock(at)?;
        self.require_patient(&profile.patient_id)?;
        validate_profile(&profile).map_err(WorldError::Profile)?;
        Ok(Event::ProfileUpdated { at, profile })
    }

    fn active_keys(&self, patient: &PatientId) -> Vec<(String, String, Vec<crate::domain::TimeOfDay>)> {
        self.medications_of(patient)
            .filter(|m| m.is_active())
            .flat_map(|m| self.schedules_of(&m.medication_id).map(|s| duplicate_key(&m.name, &m.strength, &s.times_of_day)))
            .collect()
    }

    fn prepare_load(
        &self,
        patient_id: &PatientId,
        entries: &[MedicationEntry],
        source: MedicationSource,
        submission_id: Option<SubmissionId>,
        at: Timestamp,
    ) -> Result<Event, WorldError> {
        self.check_clock(at)?;
        if !self.patients.contains_key(patient_id) {
            return Err(IngestionError::UnknownPatient(patient_id.clone()).into());
        }
        validate_entries(entries, &self.active_keys(patient_id))?;
        let items = entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let n = i as u64 + 1;
                let (medication, schedule) = map_entry(
                    e,
                    patient_id,
                    MedicationId::new(format!("med-{}", self.counters.medications + n)),
                    ScheduleId::new(format!("sch-{}", self.counters.schedules + n)),
                    source,
                );
                LoadedMedication { medication, schedule }
            })
            .collect();
        Ok(Event::MedicationsLoaded { at, patient_id: patient_id.clone(), source, items, submission_id })
    }

    pub fn prepare_webform(&self, payload: &WebformPayload, at: Timestamp) -> Result<Event, WorldError> {
        self.prepare_load(&payload.patient_id, &payload.entries, MedicationSource::Webform, None, at)
    }

    pub fn prepare_manual(&self, patient_id: &PatientId, entry: &MedicationEntry, at: Timestamp) -> Result<Event, WorldError> {
        self.prepare_load(patient_id, std::slice::from_ref(entry), MedicationSource::Manual, None, at)
    }

    /// Loads entries through the reserved automatic path.
    pub fn prepare_auto(&self, patient_id: &PatientId, entries: &[MedicationEntry], at: Timestamp) -> Result<Event, WorldError> {
        self.prepare_load(patient_id, entries, MedicationSource::Auto, None, at)
    }

    pub fn prepare_submit_scan(&self, patient_id: &PatientId, image_ref: &str, at: Timestamp) -> Result<Event, WorldError> {
        self.check_clock(at)?;
        self.require_patient(patient_id)?;
        if image_ref.is_empty() {
            return Err(IngestionError::EmptyImage.into());
        }
        Ok(Event::ScanSubmitted {
            submission: ScanSubmission {
                submission_id: SubmissionId::new(format!("scan-{}", self.counters.scans + 1)),
                patient_id: patient_id.clone(),
                image_ref: image_ref.to_owned(),
                submitted_at: at,
                status: ScanStatus::Pending,
                resolved_payload: None,
            },
        })
    }

    fn pending_scan(&self, id: &SubmissionId) -> Result<&ScanSubmission, WorldError> {
        let scan = self.scans.get(id).ok_or_else(|| IngestionError::UnknownSubmission(id.clone()))?;
        if scan.status != ScanStatus::Pending {
            return Err(IngestionError::NotPending(id.clone(), scan.status).into());
        }
        Ok(scan)
    }

    pub fn prepare_transcribe(&self, id: &SubmissionId, payload: &WebformPayload, at: Timestamp) -> Result<Event, WorldError> {
        let scan = self.pending_scan(id)?;
        if scan.patient_id != payload.patient_id {
            return Err(IngestionError::PatientMismatch {
                payload: payload.patient_id.clone(),
                submission: scan.patient_id.clone(),
            }
            .into());
        }
        self.prepare_load(&payload.patient_id, &payload.entries, MedicationSource::Scan, Some(id.clone()), at)
    }

    pub fn prepare_reject_scan(&self, id: &SubmissionId, at: Timestamp) -> Result<Event, WorldError> {
        self.check_clock(at)?;
        self.pending_scan(id)?;
        Ok(Event::ScanRejected { at, submission_id: id.clone() })
    }

    pub fn prepare_stop(&self, id: &MedicationId, reason: &str, at: Timestamp) -> Result<Event, WorldError> {
        self.check_clock(at)?;
        let med = self.medications.get(id).ok_or_else(|| WorldError::UnknownMedication(id.clone()))?;
        if !med.is_active() {
            return Err(WorldError::AlreadyStopped(Box::new(med.clone())));
        }
        Ok(Event::MedicationStopped { at, medication_id: id.clone(), reason: reason.to_owned() })
    }

    pub fn prepare_advance(&self, to: Timestamp) -> Result<Event, WorldError> {
        self.check_clock(to)?;
        Ok(Event::ClockAdvanced { to })
    }

    /// Checks an acknowledgement against the current engine state. Callers
    /// advance the clock to `at` first. `Ok(Err(outcome))` means the dose was
    /// already acknowledged and nothing needs logging.
    pub fn prepare_ack(&self, dose: &DoseEventId, at: Timestamp) -> Result<Result<Event, AckOutcome>, WorldError> {
        let patient = self.patient_of_dose(dose).ok_or_else(|| EngineError::UnknownDose(dose.clone()))?;
        let engine = &self.engines[patient];
        let outcome = engine.preview_ack(dose, at)?;
        if outcome.duplicate {
            return Ok(Err(outcome));
        }
        Ok(Ok(Event::DoseAcknowledged { at, dose_event_id: dose.clone() }))
    }

    fn bump_clock(&mut self, at: Timestamp) {
        self.clock = Some(self.clock.map_or(at, |c| c.max(at)));
    }

    /// Advances one patient's engine to `at` if it is behind.
    fn catch_up(&mut self, patient: &PatientId, at: Timestamp) -> Result<Vec<EscalationAction>, WorldError> {
        let engine = self.engines.get_mut(patient).ok_or_else(|| WorldError::UnknownPatient(patient.clone()))?;
        if engine.clock() < at {
            Ok(engine.advance(at)?)
        } else {
            Ok(Vec::new())
        }
    }

    /// Folds one event into the state. Every check runs before the first
    /// change, so a rejected event leaves the state as it was.
    pub fn apply(&mut self, event: &Event) -> Result<Applied, WorldError> {
        let mut applied = Applied::default();
        match event {
            Event::Configured { timing } => {
                self.timing = *timing;
                for engine in self.engines.values_mut() {
                    engine.set_timing(*timing);
                }
            }
            Event::PatientRegistered { at, profile, token } => {
                self.check_clock(*at)?;
                if self.patients.contains_key(&profile.patient_id) {
                    return Err(WorldError::DuplicatePatient(profile.patient_id.clone()));
                }
                let engine = PatientEngine::new(profile.clone(), self.timing, *at)?;
                self.engines.insert(profile.patient_id.clone(), engine);
                self.patients.insert(
                    profile.patient_id.clone(),
                    PatientRecord { profile: profile.clone(), token: token.clone(), registered_at: *at },
                );
                self.counters.patients += 1;
                self.bump_clock(*at);
            }
            Event::ProfileUpdated { at, profile } => {
                self.check_clock(*at)?;
                self.require_patient(&profile.patient_id)?;
                validate_profile(profile).map_err(WorldError::Profile)?;
                applied.actions = self.catch_up(&profile.patient_id, *at)?;
                self.engines.get_mut(&profile.patient_id).expect("checked").update_profile(profile.clone())?;
                self.patients.get_mut(&profile.patient_id).expect("checked").profile = profile.clone();
                self.bump_clock(*at);
            }
            Event::MedicationsLoaded { at, patient_id, items, submission_id, .. } => {
                self.check_clock(*at)?;
                self.require_patient(patient_id)?;
                if let Some(id) = submission_id {
                    self.pending_scan(id)?;
                }
                applied.actions = self.catch_up(patient_id, *at)?;
                let engine = self.engines.get_mut(patient_id).expect("checked");
                for item in items {
                    engine.add_schedule(item.schedule.clone(), *at);
                    self.medications.insert(item.medication.medication_id.clone(), item.medication.clone());
                    self.schedules.insert(item.schedule.schedule_id.clone(), item.schedule.clone());
                }
                self.counters.medications += items.len() as u64;
                self.counters.schedules += items.len() as u64;
                if let Some(id) = submission_id {
                    let scan = self.scans.get_mut(id).expect("checked");
                    scan.status = ScanStatus::Transcribed;
                    scan.resolved_payload = Some(WebformPayload {
                        patient_id: patient_id.clone(),
                        entries: items.iter().map(|i| entry_of(&i.medication, &i.schedule)).collect(),
                    });
                }
                self.bump_clock(*at);
            }
            Event::MedicationStopped { at, medication_id, reason } => {
                self.check_clock(*at)?;
                let med = self.medications.get(medication_id).ok_or_else(|| WorldError::UnknownMedication(medication_id.clone()))?;
                if !med.is_active() {
                    return Err(WorldError::AlreadyStopped(Box::new(med.clone())));
                }
                let patient = med.patient_id.clone();
                applied.actions = self.catch_up(&patient, *at)?;
                let med = self.medications.get_mut(medication_id).expect("checked");
                med.stop(reason.clone(), *at).expect("checked active");
                self.engines.get_mut(&patient).expect("checked").stop_medication(medication_id, *at);
                self.bump_clock(*at);
            }
            Event::ClockAdvanced { to } => {
                self.check_clock(*to)?;
                applied.actions = self.advance_engines(*to)?;
                self.bump_clock(*to);
            }
            Event::DoseAcknowledged { at, dose_event_id } => {
                // Not caught up: the clock must already have reached `at`,
                // which the engine checks before changing anything.
                let patient = self
                    .patient_of_dose(dose_event_id)
                    .ok_or_else(|| EngineError::UnknownDose(dose_event_id.clone()))?
                    .clone();
                let outcome = self.engines.get_mut(&patient).expect("dose owner").on_acknowledge(dose_event_id, *at)?;
                applied.ack = Some(outcome);
                self.bump_clock(*at);
            }
            Event::NotificationsDispatched { records } => {
                self.notifications.extend(records.iter().cloned());
            }
            Event::ScanSubmitted { submission } => {
                self.check_clock(submission.submitted_at)?;
                self.require_patient(&submission.patient_id)?;
                self.scans.insert(submission.submission_id.clone(), submission.clone());
                self.counters.scans += 1;
                self.bump_clock(submission.submitted_at);
            }
            Event::ScanRejected { at, submission_id } => {
                self.check_clock(*at)?;
                self.pending_scan(submission_id)?;
                self.scans.get_mut(submission_id).expect("checked").status = ScanStatus::Rejected;
                self.bump_clock(*at);
            }
        }
        Ok(applied)
    }

    #[cfg(feature = "parallel")]
    fn advance_engines(&mut self, to: Timestamp) -> Result<Vec<EscalationAction>, WorldError> {
        use rayon::prelude::*;
        let batches: Vec<Result<Vec<EscalationAction>, EngineError>> =
            self.engines.par_iter_mut().map(|(_, e)| e.advance(to)).collect();
        let mut out = Vec::new();
        for b in batches {
            out.extend(b?);
        }
        Ok(out)
    }

    #[cfg(not(feature = "parallel"))]
    fn advance_engines(&mut self, to: Timestamp) -> Result<Vec<EscalationAction>, WorldError> {
        let mut out = Vec::new();
        for engine in self.engines.values_mut() {
            out.extend(engine.advance(to)?);
        }
        Ok(out)
    }

    /// What the channels module needs to render `action`.
    pub fn render_context(&self, action: &EscalationAction) -> RenderContext {
        let profile = self.patients[&action.patient_id].profile.clone();
        let (medication, local_due) = match &action.dose_event_id {
            Some(dose) => {
                let view = self.engines[&action.patient_id].dose(dose);
                let med = view.as_ref().and_then(|v| self.medications.get(&v.event.medication_id)).cloned();
                (med, view.map(|v| v.event.local_time))
            }
            None => (None, None),
        };
        let day_doses = if action.dose_event_id.is_none() {
            self.engines[&action.patient_id]
                .doses_in(DateRange::single(action.local_date))
                .into_iter()
                .filter(|v| v.intake.is_none())
                .filter_map(|v| self.medications.get(&v.event.medication_id).map(|m| (m.name.clone(), v.event.local_time)))
                .collect()
        } else {
            Vec::new()
        };
        RenderContext { profile, medication, local_due, day_doses }
    }

    /// Earliest instant at which any patient's engine has work.
    pub fn next_wakeup(&self) -> Option<Timestamp> {
        self.engines.values().filter_map(PatientEngine::next_wakeup).min()
    }

    /// Instant the world clock has reached plus `delta`, for tests and tools.
    pub fn clock_plus(&self, delta: TimeDelta) -> Option<Timestamp> {
        self.clock.map(|c| c + delta)
    }
}

fn entry_of(m: &Medication, s: &DoseSchedule) -> MedicationEntry {
    MedicationEntry {
        name: m.name.clone(),
        strength: m.strength.clone(),
        form: m.form,
        times_of_day: s.times_of_day.clone(),
        days: s.days.clone(),
        start_date: s.start_date,
        end_date: s.end_date,
        prescriber: m.prescriber.clone(),
    }
}
