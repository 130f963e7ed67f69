//! Brute-force reference for the escalation rules, used to check the engine.
//!
//! It walks every virtual minute of the run and re-evaluates the reminder
//! rules from scratch state: which doses are due, which have been logged,
//! what has been escalated. It shares nothing with the engine's timer
//! queue or with the scheduler's local-time resolution. A wall-clock target
//! maps to the first minute whose local reading has reached it, which places
//! gap times right after the gap and ambiguous times at their first
//! occurrence.

use std::collections::BTreeMap;

use chrono::{Datelike, Days, NaiveDate, NaiveDateTime, TimeDelta};

use crate::domain::{DayPattern, DeliveryOutcome, IntakeClass, PatientId, Timestamp};

use super::scenario::{DoseRef, Plan, PlanAction, Scenario, ScenarioError};
use super::transcript::{self as tx, Counts, Line, Rejection, Transcript};

/// Runs the oracle on a scenario.
pub fn oracle_replay(scenario: &Scenario) -> Result<Transcript, ScenarioError> {
    Ok(replay_plan(&scenario.plan()?))
}

pub fn replay_plan(plan: &Plan) -> Transcript {
    let mut lines = Vec::new();
    for p in 0..plan.profiles.len() {
        lines.extend(PatientReplay::new(plan, p).run());
    }
    Transcript::new(lines)
}

struct Dose {
    med: usize,
    r: DoseRef,
    due: Timestamp,
    email_minute: usize,
    missed_minute: usize,
    pushes: Vec<Timestamp>,
    emailed: bool,
    ack: Option<IntakeClass>,
    missed: bool,
}

/// The minute grid of one patient: instant and local reading per minute.
struct Grid {
    start: Timestamp,
    /// Running maximum of the local reading, so that "first minute whose
    /// reading has reached X" is a binary search.
    reached: Vec<NaiveDateTime>,
}

impl Grid {
    fn at(&self, minute: usize) -> Timestamp {
        self.start + TimeDelta::minutes(minute as i64)
    }

    fn first_reaching(&self, local: NaiveDateTime) -> Option<usize> {
        let i = self.reached.partition_point(|r| *r < local);
        (i < self.reached.len()).then_some(i)
    }
}

struct PatientReplay<'a> {
    plan: &'a Plan,
    patient: usize,
    pid: PatientId,
    grid: Grid,
    doses: Vec<Dose>,
    lines: Vec<Line>,
}

fn day_matches(days: &DayPattern, date: NaiveDate) -> bool {
    match days {
        DayPattern::Daily => true,
        DayPattern::Weekdays(list) => list.contains(&date.weekday()),
    }
}

impl<'a> PatientReplay<'a> {
    fn new(plan: &'a Plan, patient: usize) -> Self {
        let tz = plan.timezone(patient);
        let minutes = (plan.end_at - plan.setup_at).num_minutes() as usize;
        let mut reached = Vec::with_capacity(minutes + 1);
        let mut max = NaiveDateTime::MIN;
        for i in 0..=minutes {
            let local = (plan.setup_at + TimeDelta::minutes(i as i64)).with_timezone(&tz).naive_local();
            max = max.max(local);
            reached.push(max);
        }
        let grid = Grid { start: plan.setup_at, reached };
        let mut replay = Self {
            plan,
            patient,
            pid: plan.profiles[patient].patient_id.clone(),
            grid,
            doses: Vec::new(),
            lines: Vec::new(),
        };
        replay.enumerate_doses();
        replay
    }

    fn enumerate_doses(&mut self) {
        let delay = self.plan.timing.email_delay;
        let delay_minutes = delay.num_minutes() as usize;
        let n = self.plan.profiles[self.patient].reminders_per_dose.max(1) as i64;
        for (med, entry) in self.plan.medications[self.patient].iter().enumerate() {
            let mut date = entry.start_date;
            let end = entry.end_date.expect("plans clip every medication");
            while date <= end {
                if day_matches(&entry.days, date) {
                    let mut taken_minutes: Vec<usize> = Vec::new();
                    for time in &entry.times_of_day {
                        let minute = self.grid.first_reaching(date.and_time(time.time())).expect("due inside run");
                        if taken_minutes.contains(&minute) {
                            continue;
                        }
                        taken_minutes.push(minute);
                        let due = self.grid.at(minute);
                        let midnight = self.grid.first_reaching((date + Days::new(1)).and_hms_opt(0, 0, 0).unwrap());
                        let email_minute = minute + delay_minutes;
                        let missed_minute = midnight.expect("run covers the day after").max(email_minute);
                        let pushes = (0..n).map(|k| due + TimeDelta::seconds(delay.num_seconds() * k / n)).collect();
                        self.doses.push(Dose {
                            med,
                            r: DoseRef { medication: entry.name.clone(), date, time: *time },
                            due,
                            email_minute,
                            missed_minute,
                            pushes,
                            emailed: false,
                            ack: None,
                            missed: false,
                        });
                    }
                }
                date = date + Days::new(1);
            }
        }
    }

    fn contact(value: &Option<String>) -> (String, DeliveryOutcome) {
        match value {
            Some(v) => (v.clone(), DeliveryOutcome::Delivered),
            None => (String::new(), DeliveryOutcome::SkippedNoTarget),
        }
    }

    fn run(mut self) -> Vec<Line> {
        let profile = self.plan.profiles[self.patient].clone();
        let timing = self.plan.timing;
        let last = self.grid.reached.len() - 1;
        let first_day = self.grid.reached[0].date();
        let last_day = self.grid.reached[last].date();

        // Daily check instants and weekly boundaries inside (start, end].
        let mut checks: BTreeMap<usize, NaiveDate> = BTreeMap::new();
        let mut day = first_day;
        while day <= last_day {
            if let Some(m) = self.grid.first_reaching(day.and_time(profile.daily_check_time.time())) {
                if m >= 1 {
                    checks.insert(m, day);
                }
            }
            day = day + Days::new(1);
        }
        let mut reviews: BTreeMap<usize, NaiveDate> = BTreeMap::new();
        let mut monday = first_day - Days::new(first_day.weekday().num_days_from_monday() as u64 + 7);
        while monday <= last_day {
            if let Some(m) = self.grid.first_reaching((monday + Days::new(7)).and_hms_opt(0, 0, 0).unwrap()) {
                if m >= 1 {
                    reviews.insert(m, monday);
                }
            }
            monday = monday + Days::new(7);
        }
        let caregiver_minutes = timing.caregiver_delay_after_voice.num_minutes() as usize;
        let mut caregiver_checks: BTreeMap<usize, NaiveDate> = BTreeMap::new();
        let mut acked_days: Vec<NaiveDate> = Vec::new();
        let acks: Vec<(Timestamp, DoseRef)> = self
            .plan
            .script
            .iter()
            .filter(|i| i.patient == self.patient)
            .filter_map(|i| match &i.action {
                PlanAction::Ack(r) => Some((i.at, r.clone())),
                PlanAction::Noop => None,
            })
            .collect();
        let mut next_ack = 0;
        let pid = self.pid.clone();
        let p = self.patient;
        let push_target = crate::channels::push_target(&pid);

        for minute in 1..=last {
            let now = self.grid.at(minute);
            let before = self.grid.at(minute - 1);
            let mut out = Vec::new();
            for d in self.doses.iter_mut().filter(|d| d.ack.is_none() && !d.missed && d.due <= now) {
                for (k, at) in d.pushes.iter().enumerate() {
                    if *at > before && *at <= now {
                        out.push(tx::push(*at, p, &pid, &d.r, k as u32 + 1, &push_target, DeliveryOutcome::Delivered));
                    }
                }
                if d.email_minute == minute {
                    d.emailed = true;
                    let (target, outcome) = Self::contact(&profile.email);
                    out.push(tx::email(now, p, &pid, &d.r, &target, outcome));
                }
                if d.missed_minute == minute {
                    d.missed = true;
                    out.push(tx::missed(now, p, &pid, &d.r));
                }
            }
            if let Some(day) = checks.get(&minute) {
                let escalated = self.doses.iter().any(|d| d.r.date == *day && d.emailed);
                if escalated && !acked_days.contains(day) {
                    let (target, outcome) = Self::contact(&profile.phone);
                    out.push(tx::voice(now, p, &pid, *day, &target, outcome));
                    caregiver_checks.insert(minute + caregiver_minutes, *day);
                }
            }
            if let Some(day) = caregiver_checks.get(&minute) {
                if !acked_days.contains(day) {
                    match &profile.caregiver_phone {
                        Some(phone) => out.push(tx::caregiver_sms(now, p, &pid, *day, phone, DeliveryOutcome::Delivered)),
                        None => out.push(tx::red_flag(now, p, &pid, *day)),
                    }
                }
            }
            if let Some(monday) = reviews.get(&minute) {
                let week_end = *monday + Days::new(6);
                let count = self
                    .doses
                    .iter()
                    .filter(|d| d.r.date >= *monday && d.r.date <= week_end && d.emailed && d.ack.is_none())
                    .count();
                if count > 2 {
                    out.push(tx::provider_flag(now, p, &pid, *monday));
                }
            }
            while next_ack < acks.len() && acks[next_ack].0 == now {
                let (_, r) = &acks[next_ack];
                next_ack += 1;
                let Some(d) = self.doses.iter_mut().find(|d| &d.r == r) else {
                    out.push(tx::ack_rejected(now, p, &pid, r, Rejection::TooEarly));
                    continue;
                };
                if d.ack.is_some() {
                    continue;
                }
                if d.missed {
                    out.push(tx::ack_rejected(now, p, &pid, r, Rejection::Missed));
                } else if now < d.due - timing.email_delay {
                    out.push(tx::ack_rejected(now, p, &pid, r, Rejection::TooEarly));
                } else {
                    let class = if now <= d.due + timing.on_time_window { IntakeClass::OnTime } else { IntakeClass::Late };
                    d.ack = Some(class);
                    if !acked_days.contains(&d.r.date) {
                        acked_days.push(d.r.date);
                    }
                    out.push(tx::ack(now, p, &pid, r, class));
                }
            }
            self.lines.extend(out);
        }

        let end = self.grid.at(last);
        let meds = &self.plan.medications[self.patient];
        if !meds.is_empty() {
            let (mut taken, mut owed) = (0, 0);
            for (i, entry) in meds.iter().enumerate() {
                let mut c = Counts::default();
                for d in self.doses.iter().filter(|d| d.med == i) {
                    c.total += 1;
                    match (d.ack, d.missed) {
                        (Some(IntakeClass::OnTime), _) => c.on_time += 1,
                        (Some(IntakeClass::Late), _) => c.late += 1,
                        (None, true) => c.missed += 1,
                        (None, false) => c.pending += 1,
                    }
                }
                taken += c.on_time + c.late;
                owed += c.on_time + c.late + c.missed;
                self.lines.push(tx::report_row(end, p, &pid, i as u32, &entry.name, c));
            }
            self.lines.push(tx::adherence(end, p, &pid, taken, owed));
        }
        self.lines
    }
}
