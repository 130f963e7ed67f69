//! Drives the real store, engine and dispatch path through a scenario on a
//! virtual clock.

use std::collections::BTreeMap;

use crate::channels::Transports;
use crate::domain::{DoseEventId, NotificationRecord, PatientId, ScheduleId, Timestamp};
use crate::escalation::{ActionKind, EngineError, EscalationAction};
use crate::ingestion::WebformPayload;
use crate::mama::{Mama, OpError};
use crate::reporting::build_report;
use crate::scheduler::DateRange;
use crate::store::Store;
use crate::world::WorldError;

use super::scenario::{DoseRef, Plan, PlanAction, Scenario, ScenarioError};
use super::transcript::{self as tx, Counts, Line, Rejection, Transcript};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error("{0}")]
    Inconsistent(String),
}

/// A scenario run in progress. It can stop at any instant and resume from
/// the store it leaves behind.
#[derive(Debug)]
pub struct Runner {
    plan: Plan,
    mama: Mama,
    pids: Vec<PatientId>,
    names: BTreeMap<ScheduleId, (usize, String)>,
    schedules: BTreeMap<(usize, String), ScheduleId>,
    cursor: usize,
    stops: Vec<Timestamp>,
    lines: Vec<Line>,
    seen_notifications: usize,
}

impl Runner {
    /// Starts a run on `store`. An empty store gets the scenario's patients
    /// and medications; a store left by an interrupted run of the same plan
    /// resumes where it stopped.
    pub fn start(plan: Plan, store: Store) -> Result<Self, SimError> {
        let (transports, _) = Transports::recording();
        let mut mama = Mama::new(store, transports)?;
        let pids: Vec<PatientId> = plan.profiles.iter().map(|p| p.patient_id.clone()).collect();
        if mama.world().patients().next().is_none() {
            for (i, profile) in plan.profiles.iter().enumerate() {
                mama.register(profile.clone(), plan.setup_at, None)?;
                if !plan.medications[i].is_empty() {
                    let payload = WebformPayload { patient_id: pids[i].clone(), entries: plan.medications[i].clone() };
                    mama.load_webform(&payload, plan.setup_at)?;
                }
            }
        }
        let mut names = BTreeMap::new();
        let mut schedules = BTreeMap::new();
        for (i, pid) in pids.iter().enumerate() {
            if mama.world().patient(pid).is_none() {
                return Err(SimError::Inconsistent(format!("store lacks patient {pid}")));
            }
            for med in mama.world().medications_of(pid) {
                for s in mama.world().schedules_of(&med.medication_id) {
                    names.insert(s.schedule_id.clone(), (i, med.name.clone()));
                    schedules.insert((i, med.name.clone()), s.schedule_id.clone());
                }
            }
        }
        let clock = mama.world().clock().unwrap_or(plan.setup_at);
        let cursor = plan.script.iter().take_while(|i| i.at <= clock).count();
        let seen_notifications = mama.world().notifications().len();
        Ok(Self { plan, mama, pids, names, schedules, cursor, stops: Vec::new(), lines: Vec::new(), seen_notifications })
    }

    /// Extra instants at which to stop and advance. They never change the
    /// outcome; tests use them to check exactly that.
    pub fn with_stops(mut self, mut stops: Vec<Timestamp>) -> Self {
        stops.sort();
        self.stops = stops;
        self
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn mama(&self) -> &Mama {
        &self.mama
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn into_store(self) -> Store {
        self.mama.into_store()
    }

    fn clock(&self) -> Timestamp {
        self.mama.world().clock().unwrap_or(self.plan.setup_at)
    }

    /// Processes everything up to and including `until`.
    pub fn run_until(&mut self, until: Timestamp) -> Result<(), SimError> {
        let until = until.min(self.plan.end_at);
        while self.clock() < until || self.script_due(until) {
            let clock = self.clock();
            let mut target = until;
            if let Some(item) = self.plan.script.get(self.cursor) {
                target = target.min(item.at);
            }
            if let Some(stop) = self.stops.iter().find(|s| **s > clock) {
                target = target.min(*stop);
            }
            self.advance(target.max(clock))?;
            while self.script_due(target) {
                self.step()?;
            }
        }
        Ok(())
    }

    fn script_due(&self, until: Timestamp) -> bool {
        self.plan.script.get(self.cursor).is_some_and(|i| i.at <= until)
    }

    /// Runs to the end of the plan and closes with the report lines.
    pub fn finish(self) -> Result<Transcript, SimError> {
        Ok(self.finish_with_state()?.0)
    }

    /// As [`Runner::finish`], also handing back the service state.
    pub fn finish_with_state(mut self) -> Result<(Transcript, Mama), SimError> {
        self.run_until(self.plan.end_at)?;
        let end = self.plan.end_at;
        let range = DateRange { start: self.plan.horizon.start, end: self.plan.horizon.end };
        for (i, pid) in self.pids.iter().enumerate() {
            if self.plan.medications[i].is_empty() {
                continue;
            }
            let report = build_report(self.mama.world(), pid, range).map_err(OpError::from)?;
            for row in &report.rows {
                let order = self.plan.medications[i].iter().position(|m| m.name == row.name).unwrap_or(usize::MAX);
                let counts = Counts {
                    on_time: row.on_time,
                    late: row.late,
                    missed: row.missed,
                    pending: row.pending,
                    total: row.total,
                };
                self.lines.push(tx::report_row(end, i, pid, order as u32, &row.name, counts));
            }
            self.lines.push(tx::adherence(end, i, pid, report.taken, report.owed));
        }
        Ok((Transcript::new(self.lines), self.mama))
    }

    fn dose_ref(&self, id: &DoseEventId) -> Result<(usize, DoseRef), SimError> {
        let (schedule, date, time) =
            id.parse_slot().ok_or_else(|| SimError::Inconsistent(format!("unparseable dose id {id}")))?;
        let (patient, name) =
            self.names.get(&schedule).ok_or_else(|| SimError::Inconsistent(format!("unknown schedule {schedule}")))?;
        Ok((*patient, DoseRef { medication: name.clone(), date, time }))
    }

    fn advance(&mut self, to: Timestamp) -> Result<(), SimError> {
        let actions = self.mama.advance(to)?;
        let records: BTreeMap<String, NotificationRecord> = self.mama.world().notifications()[self.seen_notifications..]
            .iter()
            .map(|r| (r.notification_id.to_string(), r.clone()))
            .collect();
        self.seen_notifications = self.mama.world().notifications().len();
        for a in &actions {
            let line = self.action_line(a, &records)?;
            self.lines.push(line);
        }
        Ok(())
    }

    fn action_line(&self, a: &EscalationAction, records: &BTreeMap<String, NotificationRecord>) -> Result<Line, SimError> {
        let patient = self
            .pids
            .iter()
            .position(|p| p == &a.patient_id)
            .ok_or_else(|| SimError::Inconsistent(format!("action for unknown patient {}", a.patient_id)))?;
        let pid = &a.patient_id;
        let record = || {
            let nid = a.notification_id.as_ref().map(ToString::to_string).unwrap_or_default();
            records.get(&nid).ok_or_else(|| SimError::Inconsistent(format!("no dispatch record for {nid}")))
        };
        let dose = || {
            a.dose_event_id
                .as_ref()
                .ok_or_else(|| SimError::Inconsistent(format!("{} without a dose", a.kind.as_str())))
                .and_then(|d| self.dose_ref(d))
                .map(|(_, r)| r)
        };
        Ok(match a.kind {
            ActionKind::SendPush => {
                let r = record()?;
                let n = r
                    .notification_id
                    .as_str()
                    .rsplit_once(".push")
                    .and_then(|(_, k)| k.parse().ok())
                    .ok_or_else(|| SimError::Inconsistent(format!("push id {}", r.notification_id)))?;
                tx::push(a.fire_at, patient, pid, &dose()?, n, &r.target, r.outcome)
            }
            ActionKind::SendEmail => {
                let r = record()?;
                tx::email(a.fire_at, patient, pid, &dose()?, &r.target, r.outcome)
            }
            ActionKind::SendVoice => {
                let r = record()?;
                tx::voice(a.fire_at, patient, pid, a.local_date, &r.target, r.outcome)
            }
            ActionKind::SendCaregiverSms => {
                let r = record()?;
                tx::caregiver_sms(a.fire_at, patient, pid, a.local_date, &r.target, r.outcome)
            }
            ActionKind::RaiseRedFlag => tx::red_flag(a.fire_at, patient, pid, a.local_date),
            ActionKind::RaiseProviderFlag => tx::provider_flag(a.fire_at, patient, pid, a.local_date),
            ActionKind::MarkMissed => tx::missed(a.fire_at, patient, pid, &dose()?),
        })
    }

    fn step(&mut self) -> Result<(), SimError> {
        let item = self.plan.script[self.cursor].clone();
        self.cursor += 1;
        let PlanAction::Ack(dose) = &item.action else {
            return Ok(());
        };
        let pid = self.pids[item.patient].clone();
        let schedule = self
            .schedules
            .get(&(item.patient, dose.medication.clone()))
            .ok_or_else(|| SimError::Inconsistent(format!("no schedule for {dose}")))?;
        let id = DoseEventId::for_slot(schedule, dose.date, dose.time);
        match self.mama.acknowledge(&id, item.at, item.at) {
            Ok(outcome) if outcome.duplicate => {}
            Ok(outcome) => {
                self.lines.push(tx::ack(item.at, item.patient, &pid, dose, outcome.record.classification));
            }
            Err(e) => {
                let why = match e.world() {
                    Some(WorldError::Engine(EngineError::AlreadyMissed(_))) => Rejection::Missed,
                    Some(WorldError::Engine(EngineError::TooEarly(_))) => Rejection::TooEarly,
                    _ => return Err(e.into()),
                };
                self.lines.push(tx::ack_rejected(item.at, item.patient, &pid, dose, why));
            }
        }
        Ok(())
    }
}

/// Runs a scenario on a fresh in-memory store.
pub fn run_scenario(scenario: &Scenario) -> Result<Transcript, SimError> {
    run_scenario_with_stops(scenario, Vec::new())
}

/// As [`run_scenario`], additionally advancing the clock at `stops`.
pub fn run_scenario_with_stops(scenario: &Scenario, stops: Vec<Timestamp>) -> Result<Transcript, SimError> {
    let plan = scenario.plan()?;
    let store = Store::in_memory(plan.timing);
    Runner::start(plan, store)?.with_stops(stops).finish()
}
