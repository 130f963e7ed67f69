//! Transcript lines: one per notification, flag, MISSED mark, acknowledgement
//! and report row, in a fixed field order for textual diffing.

use chrono::NaiveDate;

use crate::domain::{DeliveryOutcome, IntakeClass, PatientId, Timestamp};

use super::scenario::DoseRef;

/// Within one instant and patient: timers, then acknowledgements, then the
/// closing report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Timer,
    Ack,
    Report,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Line {
    pub at: Timestamp,
    pub patient: usize,
    pub phase: Phase,
    pub rank: u32,
    pub text: String,
}

pub fn stamp(at: Timestamp) -> String {
    at.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn line(at: Timestamp, patient: usize, pid: &PatientId, phase: Phase, rank: u32, body: String) -> Line {
    Line { at, patient, phase, rank, text: format!("{} {pid} {body}", stamp(at)) }
}

fn delivery(target: &str, outcome: DeliveryOutcome) -> String {
    format!("target={target} outcome={}", outcome.as_str())
}

#[allow(clippy::too_many_arguments)]
pub fn push(at: Timestamp, patient: usize, pid: &PatientId, dose: &DoseRef, n: u32, target: &str, outcome: DeliveryOutcome) -> Line {
    line(at, patient, pid, Phase::Timer, 0, format!("PUSH {dose} n={n} {}", delivery(target, outcome)))
}

pub fn email(at: Timestamp, patient: usize, pid: &PatientId, dose: &DoseRef, target: &str, outcome: DeliveryOutcome) -> Line {
    line(at, patient, pid, Phase::Timer, 1, format!("EMAIL {dose} {}", delivery(target, outcome)))
}

pub fn voice(at: Timestamp, patient: usize, pid: &PatientId, date: NaiveDate, target: &str, outcome: DeliveryOutcome) -> Line {
    line(at, patient, pid, Phase::Timer, 2, format!("VOICE date={date} {}", delivery(target, outcome)))
}

pub fn caregiver_sms(at: Timestamp, patient: usize, pid: &PatientId, date: NaiveDate, target: &str, outcome: DeliveryOutcome) -> Line {
    line(at, patient, pid, Phase::Timer, 3, format!("CAREGIVER_SMS date={date} {}", delivery(target, outcome)))
}

pub fn red_flag(at: Timestamp, patient: usize, pid: &PatientId, date: NaiveDate) -> Line {
    line(at, patient, pid, Phase::Timer, 3, format!("RED_FLAG date={date}"))
}

/// `week` is the Monday of the reviewed week.
pub fn provider_flag(at: Timestamp, patient: usize, pid: &PatientId, week: NaiveDate) -> Line {
    line(at, patient, pid, Phase::Timer, 5, format!("PROVIDER_FLAG week={week}"))
}

pub fn missed(at: Timestamp, patient: usize, pid: &PatientId, dose: &DoseRef) -> Line {
    line(at, patient, pid, Phase::Timer, 6, format!("MISSED {dose}"))
}

pub fn ack(at: Timestamp, patient: usize, pid: &PatientId, dose: &DoseRef, class: IntakeClass) -> Line {
    line(at, patient, pid, Phase::Ack, 0, format!("ACK {dose} class={}", class.as_str()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    Missed,
    TooEarly,
}

pub fn ack_rejected(at: Timestamp, patient: usize, pid: &PatientId, dose: &DoseRef, why: Rejection) -> Line {
    let reason = match why {
        Rejection::Missed => "missed",
        Rejection::TooEarly => "too_early",
    };
    line(at, patient, pid, Phase::Ack, 0, format!("ACK_REJECTED {dose} reason={reason}"))
}

/// Counts for one medication over the horizon.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub on_time: u32,
    pub late: u32,
    pub missed: u32,
    pub pending: u32,
    pub total: u32,
}

pub fn report_row(at: Timestamp, patient: usize, pid: &PatientId, order: u32, name: &str, c: Counts) -> Line {
    line(
        at,
        patient,
        pid,
        Phase::Report,
        order,
        format!(
            "REPORT {name} on_time={} late={} missed={} pending={} total={}",
            c.on_time, c.late, c.missed, c.pending, c.total
        ),
    )
}

/// Adherence as an exact fraction `taken/owed`.
pub fn adherence(at: Timestamp, patient: usize, pid: &PatientId, taken: u32, owed: u32) -> Line {
    line(at, patient, pid, Phase::Report, u32::MAX, format!("ADHERENCE {taken}/{owed}"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub lines: Vec<Line>,
}

impl Transcript {
    pub fn new(mut lines: Vec<Line>) -> Self {
        lines.sort();
        Self { lines }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&l.text);
            out.push('\n');
        }
        out
    }

    /// Lines strictly after `at`.
    pub fn after(&self, at: Timestamp) -> Transcript {
        Transcript { lines: self.lines.iter().filter(|l| l.at > at).cloned().collect() }
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    /// Lines whose text contains `needle`.
    pub fn matching<'a>(&'a self, needle: &'a str) -> impl Iterator<Item = &'a Line> + 'a {
        self.lines.iter().filter(move |l| l.text.contains(needle))
    }
}

/// First differing line of two transcripts, as `(index, left, right)`.
pub fn first_difference(a: &Transcript, b: &Transcript) -> Option<(usize, Option<String>, Option<String>)> {
    let n = a.lines.len().max(b.lines.len());
    (0..n).find_map(|i| {
        let l = a.lines.get(i).map(|l| l.text.clone());
        let r = b.lines.get(i).map(|l| l.text.clone());
        (l != r).then_some((i, l, r))
    })
}
