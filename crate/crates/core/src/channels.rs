//! Message rendering and the transport seam.
//!
//! Real push/email/voice/SMS providers plug in behind [`Transport`]. This
//! crate ships a recording transport, which keeps every message it is handed,
//! and a failure-injecting wrapper for tests.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::domain::{
    Channel, DeliveryOutcome, DoseEventId, Medication, NotificationId, NotificationRecord, PatientId,
    PatientProfile, TimeOfDay, Timestamp,
};
use crate::escalation::{ActionKind, EscalationAction};

pub const PUSH_BODY_LIMIT: usize = 178;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboundMessage {
    pub notification_id: NotificationId,
    pub channel: Channel,
    pub target: String,
    pub subject: Option<String>,
    pub body: String,
    pub patient_id: PatientId,
    pub dose_event_id: Option<DoseEventId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendResult {
    Delivered,
    Failed,
}

/// One delivery channel. Implementations must not touch engine state.
pub trait Transport: Send {
    fn send(&mut self, msg: &OutboundMessage, at: Timestamp) -> SendResult;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentMessage {
    pub at: Timestamp,
    pub message: OutboundMessage,
    pub result: SendResult,
}

/// Shared view of what a [`RecordingTransport`] has seen.
#[derive(Debug, Clone, Default)]
pub struct Recorder(Arc<Mutex<Vec<SentMessage>>>);

impl Recorder {
    pub fn messages(&self) -> Vec<SentMessage> {
        self.0.lock().expect("recorder poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("recorder poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, m: SentMessage) {
        self.0.lock().expect("recorder poisoned").push(m);
    }
}

/// Accepts everything and remembers it.
#[derive(Debug, Default)]
pub struct RecordingTransport {
    recorder: Recorder,
}

impl RecordingTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_recorder(recorder: Recorder) -> Self {
        Self { recorder }
    }

    pub fn recorder(&self) -> Recorder {
        self.recorder.clone()
    }
}

impl Transport for RecordingTransport {
    fn send(&mut self, msg: &OutboundMessage, at: Timestamp) -> SendResult {
        self.recorder.push(SentMessage { at, message: msg.clone(), result: SendResult::Delivered });
        SendResult::Delivered
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailWhen {
    Always,
    /// Fails the n-th, 2n-th, ... message (1-based).
    EveryNth(u32),
    Targets(BTreeSet<String>),
}

/// Records like [`RecordingTransport`] but reports failures per its rule.
#[derive(Debug)]
pub struct FailingTransport {
    rule: FailWhen,
    seen: u32,
    recorder: Recorder,
}

impl FailingTransport {
    pub fn new(rule: FailWhen) -> Self {
        Self { rule, seen: 0, recorder: Recorder::default() }
    }

    pub fn recorder(&self) -> Recorder {
        self.recorder.clone()
    }
}

impl Transport for FailingTransport {
    fn send(&mut self, msg: &OutboundMessage, at: Timestamp) -> SendResult {
        self.seen += 1;
        let fail = match &self.rule {
            FailWhen::Always => true,
            FailWhen::EveryNth(n) => *n > 0 && self.seen % n == 0,
            FailWhen::Targets(t) => t.contains(&msg.target),
        };
        let result = if fail { SendResult::Failed } else { SendResult::Delivered };
        self.recorder.push(SentMessage { at, message: msg.clone(), result });
        result
    }
}

/// One transport per channel.
pub struct Transports {
    pub push: Box<dyn Transport>,
    pub email: Box<dyn Transport>,
    pub voice: Box<dyn Transport>,
    pub sms: Box<dyn Transport>,
}

impl Transports {
    /// Recording transports on every channel, sharing one recorder.
    pub fn recording() -> (Self, Recorder) {
        let recorder = Recorder::default();
        let mk = || Box::new(RecordingTransport::with_recorder(recorder.clone())) as Box<dyn Transport>;
        (Self { push: mk(), email: mk(), voice: mk(), sms: mk() }, recorder)
    }

    pub fn channel_mut(&mut self, channel: Channel) -> &mut dyn Transport {
        match channel {
            Channel::Push => self.push.as_mut(),
            Channel::Email => self.email.as_mut(),
            Channel::Voice => self.voice.as_mut(),
            Channel::CaregiverSms => self.sms.as_mut(),
        }
    }
}

impl std::fmt::Debug for Transports {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Transports { .. }")
    }
}

/// Everything [`render`] needs besides the action.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderContext {
    pub profile: PatientProfile,
    /// The dose's medication, for per-dose actions.
    pub medication: Option<Medication>,
    /// Local due time, for per-dose actions.
    pub local_due: Option<TimeOfDay>,
    /// `(medication name, local time)` of the day's outstanding doses, for
    /// the daily voice and caregiver messages.
    pub day_doses: Vec<(String, TimeOfDay)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    #[error("{0:?} is not a send action")]
    NotASend(ActionKind),
    #[error("no {0:?} target on the patient profile")]
    NoTarget(Channel),
}

pub fn push_target(patient: &PatientId) -> String {
    format!("app:{patient}")
}

fn truncate_chars(s: &str, limit: usize) -> String {
    if s.chars().count() <= limit {
        return s.to_owned();
    }
    let mut out: String = s.chars().take(limit.saturating_sub(1)).collect();
    out.push('…');
    out
}

fn dose_label(ctx: &RenderContext) -> (String, String) {
    let name = match &ctx.medication {
        Some(m) if m.strength.is_empty() => m.name.clone(),
        Some(m) => format!("{} {}", m.name, m.strength),
        None => "your medication".to_owned(),
    };
    let due = ctx.local_due.map(|t| t.to_string()).unwrap_or_else(|| "its scheduled time".to_owned());
    (name, due)
}

fn day_list(ctx: &RenderContext) -> String {
    if ctx.day_doses.is_empty() {
        return "today's medication".to_owned();
    }
    ctx.day_doses.iter().map(|(n, t)| format!("{n} at {t}")).collect::<Vec<_>>().join(", ")
}

/// Builds the message for a `SEND_*` action. Pure.
pub fn render(action: &EscalationAction, ctx: &RenderContext) -> Result<OutboundMessage, RenderError> {
    let channel = action.kind.channel().ok_or(RenderError::NotASend(action.kind))?;
    let p = &ctx.profile;
    let target = match channel {
        Channel::Push => Some(push_target(&p.patient_id)),
        Channel::Email => p.email.clone(),
        Channel::Voice => p.phone.clone(),
        Channel::CaregiverSms => p.caregiver_phone.clone(),
    }
    .ok_or(RenderError::NoTarget(channel))?;
    let (name, due) = dose_label(ctx);
    let date = action.local_date;
    let (subject, body) = match channel {
        Channel::Push => {
            let body = format!("Time to take {name} ({due}). Log it in the app once taken.");
            (None, truncate_chars(&body, PUSH_BODY_LIMIT))
        }
        Channel::Email => (
            Some(format!("Medication reminder: {name} due at {due}")),
            format!(
                "Hello {},\n\nYour dose of {name} was due at {due} on {date} and has not been logged yet. \
                 Please take it and log it in the app.\n",
                p.display_name
            ),
        ),
        Channel::Voice => (
            None,
            format!(
                "Hello {}. This is your medication reminder for {}. No medication has been logged today. \
                 Please take {} and log it in the app.",
                p.display_name,
                spoken_date(date),
                day_list(ctx)
            ),
        ),
        Channel::CaregiverSms => (
            None,
            format!(
                "{} has not logged any medication on {date} ({}). Please check in with them.",
                p.display_name,
                day_list(ctx)
            ),
        ),
    };
    Ok(OutboundMessage {
        notification_id: action
            .notification_id
            .clone()
            .unwrap_or_else(|| NotificationId::new(format!("{}.{}", action.patient_id, channel.as_str()))),
        channel,
        target,
        subject,
        body,
        patient_id: action.patient_id.clone(),
        dose_event_id: action.dose_event_id.clone(),
    })
}

fn spoken_date(date: NaiveDate) -> String {
    date.format("%A %-d %B").to_string()
}

/// Sends every `SEND_*` action in order and returns one record per send.
/// Flag and MISSED actions produce no record; their effects already live in
/// the engine and surface through reporting. A failed send is recorded and
/// does not stop the batch.
pub fn dispatch(
    actions: &[EscalationAction],
    mut context: impl FnMut(&EscalationAction) -> RenderContext,
    transports: &mut Transports,
) -> Vec<NotificationRecord> {
    let mut out = Vec::new();
    for action in actions {
        let Some(channel) = action.kind.channel() else {
            continue;
        };
        let ctx = context(action);
        let notification_id = action
            .notification_id
            .clone()
            .unwrap_or_else(|| NotificationId::new(format!("{}.{}", action.patient_id, channel.as_str())));
        let (target, outcome) = match render(action, &ctx) {
            Ok(msg) => {
                let outcome = match transports.channel_mut(channel).send(&msg, action.fire_at) {
                    SendResult::Delivered => DeliveryOutcome::Delivered,
                    SendResult::Failed => {
                        tracing::warn!(notification = %notification_id, channel = channel.as_str(), "delivery failed");
                        DeliveryOutcome::Failed
                    }
                };
                (msg.target, outcome)
            }
            Err(_) => (String::new(), DeliveryOutcome::SkippedNoTarget),
        };
        out.push(NotificationRecord {
            notification_id,
            patient_id: action.patient_id.clone(),
            dose_event_id: action.dose_event_id.clone(),
            channel,
            sent_at: action.fire_at,
            target,
            outcome,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DoseForm, MedicationSource, MedicationStatus};

    fn profile() -> PatientProfile {
        let mut p = PatientProfile::new("p1", "Ana", "UTC");
        p.email = Some("ana@example.org".into());
        p.caregiver_phone = Some("+6421000002".into());
        p
    }

    fn metformin() -> Medication {
        Medication {
            medication_id: "med-1".into(),
            patient_id: "p1".into(),
            name: "Metformin".into(),
            strength: "500 mg".into(),
            form: DoseForm::Tablet,
            prescriber: None,
            status: MedicationStatus::Active,
            stop_reason: None,
            stopped_at: None,
            source: MedicationSource::Manual,
        }
    }

    fn action(kind: ActionKind) -> EscalationAction {
        EscalationAction {
            kind,
            patient_id: "p1".into(),
            dose_event_id: Some("sch-1.20240603.0800".into()),
            fire_at: "2024-06-03T08:30:00Z".parse().unwrap(),
            local_date: "2024-06-03".parse().unwrap(),
            notification_id: Some("n1".into()),
            flag_id: None,
        }
    }

    fn ctx() -> RenderContext {
        RenderContext {
            profile: profile(),
            medication: Some(metformin()),
            local_due: Some(TimeOfDay::hm(8, 0)),
            day_doses: vec![("Metformin".into(), TimeOfDay::hm(8, 0))],
        }
    }

    #[test]
    fn email_names_medication_and_time() {
        let m = render(&action(ActionKind::SendEmail), &ctx()).unwrap();
        assert!(m.subject.as_deref().unwrap().contains("reminder"));
        assert!(m.body.contains("Metformin") && m.body.contains("08:00"));
        assert!(m.body.contains("log it in the app"));
        assert_eq!(m.target, "ana@example.org");
    }

    #[test]
    fn caregiver_sms_goes_to_caregiver() {
        let m = render(&action(ActionKind::SendCaregiverSms), &ctx()).unwrap();
        assert_eq!(m.target, "+6421000002");
    }

    #[test]
    fn voice_without_phone_has_no_target() {
        assert_eq!(render(&action(ActionKind::SendVoice), &ctx()), Err(RenderError::NoTarget(Channel::Voice)));
        assert_eq!(render(&action(ActionKind::MarkMissed), &ctx()), Err(RenderError::NotASend(ActionKind::MarkMissed)));
    }

    #[test]
    fn push_body_is_bounded() {
        let mut c = ctx();
        c.medication.as_mut().unwrap().name = "X".repeat(400);
        let m = render(&action(ActionKind::SendPush), &c).unwrap();
        assert_eq!(m.body.chars().count(), PUSH_BODY_LIMIT);
        assert_eq!(m.target, "app:p1");
        assert!(m.subject.is_none());
    }

    #[test]
    fn render_is_pure() {
        assert_eq!(render(&action(ActionKind::SendEmail), &ctx()), render(&action(ActionKind::SendEmail), &ctx()));
    }

    #[test]
    fn dispatch_empty() {
        let (mut t, rec) = Transports::recording();
        assert!(dispatch(&[], |_| ctx(), &mut t).is_empty());
        assert!(rec.is_empty());
    }

    #[test]
    fn dispatch_one_push() {
        let (mut t, rec) = Transports::recording();
        let records = dispatch(&[action(ActionKind::SendPush)], |_| ctx(), &mut t);
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].channel, Channel::Push);
        assert_eq!(records[0].outcome, DeliveryOutcome::Delivered);
        assert_eq!(rec.len(), 1);
    }

    #[test]
    fn failures_are_isolated() {
        let (mut t, _) = Transports::recording();
        t.push = Box::new(FailingTransport::new(FailWhen::Always));
        let batch = [
            action(ActionKind::SendPush),
            action(ActionKind::MarkMissed),
            action(ActionKind::SendEmail),
            action(ActionKind::SendVoice),
        ];
        let records = dispatch(&batch, |_| ctx(), &mut t);
        let got: Vec<_> = records.iter().map(|r| (r.channel, r.outcome)).collect();
        assert_eq!(
            got,
            vec![
                (Channel::Push, DeliveryOutcome::Failed),
                (Channel::Email, DeliveryOutcome::Delivered),
                (Channel::Voice, DeliveryOutcome::SkippedNoTarget),
            ]
        );
    }

    #[test]
    fn every_nth_failure() {
        let mut t = FailingTransport::new(FailWhen::EveryNth(2));
        let msg = render(&action(ActionKind::SendPush), &ctx()).unwrap();
        let at = "2024-06-03T08:00:00Z".parse().unwrap();
        let results: Vec<_> = (0..4).map(|_| t.send(&msg, at)).collect();
        assert_eq!(results, vec![SendResult::Delivered, SendResult::Failed, SendResult::Delivered, SendResult::Failed]);
        assert_eq!(t.recorder().len(), 4);
    }
}
