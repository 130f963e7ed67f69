//! The operations of the reminder service over a [`Store`] and a set of
//! transports. The HTTP service and the simulator both drive this type, so
//! they share one code path.
//!
//! Every mutating operation first validates against the current state; a
//! rejected request writes nothing. Accepted ones advance the clock to the
//! request instant, dispatch whatever became due, then log the mutation.

use crate::channels::{dispatch, Transports};
use crate::domain::{
    DoseEventId, Medication, MedicationId, NotificationRecord, PatientId, PatientProfile, SubmissionId,
    Timestamp,
};
use crate::escalation::{AckOutcome, EngineError, EscalationAction};
use crate::ingestion::{MedicationEntry, ScanSubmission, WebformPayload};
use crate::reporting::{build_report, export_provider_report, AdherenceReport, ReportError};
use crate::scheduler::DateRange;
use crate::store::{Snapshot, Store, StoreError};
use crate::world::{Event, LoadedMedication, World, WorldError};

#[derive(Debug, thiserror::Error)]
pub enum OpError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl OpError {
    /// The domain error behind this one, if it is not an I/O or log failure.
    pub fn world(&self) -> Option<&WorldError> {
        match self {
            OpError::World(e) | OpError::Store(StoreError::World(e)) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub struct Mama {
    store: Store,
    transports: Transports,
}

impl Mama {
    /// Wraps a store. Sends the log tail left undispatched are sent now.
    pub fn new(mut store: Store, transports: Transports) -> Result<Self, OpError> {
        let leftover = store.take_undispatched();
        let mut mama = Self { store, transports };
        mama.send(&leftover)?;
        Ok(mama)
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn world(&self) -> &World {
        self.store.world()
    }

    pub fn snapshot(&self) -> Snapshot {
        self.store.snapshot()
    }

    pub fn into_store(self) -> Store {
        self.store
    }

    fn send(&mut self, actions: &[EscalationAction]) -> Result<Vec<NotificationRecord>, OpError> {
        if !actions.iter().any(|a| a.kind.channel().is_some()) {
            return Ok(Vec::new());
        }
        let world = self.store.world();
        let records = dispatch(actions, |a| world.render_context(a), &mut self.transports);
        self.store.append(Event::NotificationsDispatched { records: records.clone() })?;
        Ok(records)
    }

    fn commit(&mut self, event: Event) -> Result<crate::world::Applied, OpError> {
        let applied = self.store.append(event)?;
        self.send(&applied.actions)?;
        Ok(applied)
    }

    /// Fires every timer up to `to` and dispatches the sends. Returns all
    /// actions, flags and MISSED marks included.
    pub fn advance(&mut self, to: Timestamp) -> Result<Vec<EscalationAction>, OpError> {
        if self.world().clock() == Some(to) {
            return Ok(Vec::new());
        }
        let event = self.world().prepare_advance(to)?;
        let applied = self.store.append(event)?;
        self.send(&applied.actions)?;
        Ok(applied.actions)
    }

    /// Validates with `prepare`, advances to `at`, then logs the event.
    fn run(&mut self, at: Timestamp, prepare: impl Fn(&World) -> Result<Event, WorldError>) -> Result<Event, OpError> {
        prepare(self.world())?;
        self.advance(at)?;
        let event = prepare(self.world())?;
        self.commit(event.clone())?;
        Ok(event)
    }

    /// Signs a patient up. An empty id is replaced by a generated one.
    pub fn register(&mut self, profile: PatientProfile, at: Timestamp, token: Option<String>) -> Result<PatientProfile, OpError> {
        match self.run(at, |w| w.prepare_register(profile.clone(), at, token.clone()))? {
            Event::PatientRegistered { profile, .. } => Ok(profile),
            _ => unreachable!(),
        }
    }

    pub fn update_profile(&mut self, profile: PatientProfile, at: Timestamp) -> Result<PatientProfile, OpError> {
        self.run(at, |w| w.prepare_update_profile(profile.clone(), at))?;
        Ok(profile)
    }

    fn loaded(event: Event) -> Vec<LoadedMedication> {
        match event {
            Event::MedicationsLoaded { items, .. } => items,
            _ => unreachable!(),
        }
    }

    /// Loads every entry of a webform payload, or none of them.
    pub fn load_webform(&mut self, payload: &WebformPayload, at: Timestamp) -> Result<Vec<LoadedMedication>, OpError> {
        Ok(Self::loaded(self.run(at, |w| w.prepare_webform(payload, at))?))
    }

    pub fn add_manual(&mut self, patient_id: &PatientId, entry: &MedicationEntry, at: Timestamp) -> Result<LoadedMedication, OpError> {
        let mut items = Self::loaded(self.run(at, |w| w.prepare_manual(patient_id, entry, at))?);
        Ok(items.remove(0))
    }

    pub fn load_auto(&mut self, patient_id: &PatientId, entries: &[MedicationEntry], at: Timestamp) -> Result<Vec<LoadedMedication>, OpError> {
        Ok(Self::loaded(self.run(at, |w| w.prepare_auto(patient_id, entries, at))?))
    }

    pub fn submit_scan(&mut self, patient_id: &PatientId, image_ref: &str, at: Timestamp) -> Result<ScanSubmission, OpError> {
        match self.run(at, |w| w.prepare_submit_scan(patient_id, image_ref, at))? {
            Event::ScanSubmitted { submission } => Ok(submission),
            _ => unreachable!(),
        }
    }

    pub fn transcribe(&mut self, id: &SubmissionId, payload: &WebformPayload, at: Timestamp) -> Result<Vec<LoadedMedication>, OpError> {
        Ok(Self::loaded(self.run(at, |w| w.prepare_transcribe(id, payload, at))?))
    }

    pub fn reject_scan(&mut self, id: &SubmissionId, at: Timestamp) -> Result<ScanSubmission, OpError> {
        self.run(at, |w| w.prepare_reject_scan(id, at))?;
        Ok(self.world().scan(id).expect("just rejected").clone())
    }

    /// Marks a medication stopped and cancels its future doses.
    pub fn flag_stopped(&mut self, id: &MedicationId, reason: &str, at: Timestamp) -> Result<Medication, OpError> {
        self.run(at, |w| w.prepare_stop(id, reason, at))?;
        Ok(self.world().medication(id).expect("just stopped").clone())
    }

    /// Logs an intake taken at `at`, as reported at `now` (`at <= now`).
    pub fn acknowledge(&mut self, dose: &DoseEventId, at: Timestamp, now: Timestamp) -> Result<AckOutcome, OpError> {
        if self.world().patient_of_dose(dose).is_none() {
            return Err(WorldError::Engine(EngineError::UnknownDose(dose.clone())).into());
        }
        if at > now {
            return Err(WorldError::Engine(EngineError::AheadOfClock { last: now, at }).into());
        }
        self.advance(now)?;
        match self.world().prepare_ack(dose, at)? {
            Err(duplicate) => Ok(duplicate),
            Ok(event) => Ok(self.commit(event)?.ack.expect("ack event yields an outcome")),
        }
    }

    pub fn report(&self, patient_id: &PatientId, range: DateRange) -> Result<AdherenceReport, OpError> {
        Ok(build_report(self.world(), patient_id, range)?)
    }

    pub fn export(&self, patient_id: &PatientId, range: DateRange) -> Result<String, OpError> {
        Ok(export_provider_report(self.world(), patient_id, range)?)
    }
}
