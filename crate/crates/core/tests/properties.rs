//! Invariants over randomly generated scenarios.

use std::collections::BTreeMap;

use chrono::TimeDelta;
use mama_core::domain::{Channel, DoseState, IntakeClass, Timestamp};
use mama_core::ingestion::{MedicationEntry, WebformPayload};
use mama_core::scheduler::DateRange;
use mama_core::sim::batch::{verify_many, verify_many_sequential};
use mama_core::sim::gen::{generate, GenParams};
use mama_core::sim::{oracle_replay, run_scenario, run_scenario_with_stops, Runner, Scenario};
use mama_core::store::{read_log, LogError, Store, HEADER_LEN};
use proptest::prelude::*;

fn scenario() -> impl Strategy<Value = Scenario> {
    any::<u64>().prop_map(|seed| generate(seed, GenParams::default()))
}

fn finish(s: &Scenario) -> (mama_core::sim::Transcript, mama_core::mama::Mama) {
    let plan = s.plan().unwrap();
    let store = Store::in_memory(plan.timing);
    Runner::start(plan, store).unwrap().finish_with_state().unwrap()
}

/// Instants of `kind` lines by "patient dose-ref", from the transcript.
fn by_dose(t: &mama_core::sim::Transcript, kind: &str) -> BTreeMap<String, Timestamp> {
    t.lines
        .iter()
        .filter_map(|l| {
            let mut f = l.text.split(' ').skip(1);
            let (pid, k, r) = (f.next()?, f.next()?, f.next()?);
            (k == kind).then(|| (format!("{pid} {r}"), l.at))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn engine_matches_oracle(s in scenario()) {
        let engine = run_scenario(&s).unwrap();
        let oracle = oracle_replay(&s).unwrap();
        prop_assert_eq!(engine.render(), oracle.render());
    }

    #[test]
    fn extra_advance_stops_change_nothing(s in scenario(), cuts in proptest::collection::vec(0.0f64..1.0, 0..12)) {
        let plan = s.plan().unwrap();
        let span = (plan.end_at - plan.setup_at).num_minutes() as f64;
        let stops = cuts.iter().map(|c| plan.setup_at + TimeDelta::minutes((c * span) as i64)).collect();
        prop_assert_eq!(run_scenario_with_stops(&s, stops).unwrap(), run_scenario(&s).unwrap());
    }

    #[test]
    fn dose_ladders_follow_the_transition_graph(s in scenario()) {
        let (_, mama) = finish(&s);
        let delay = mama.world().timing().email_delay;
        for p in mama.world().patients() {
            let engine = mama.world().engine(&p.profile.patient_id).unwrap();
            for view in engine.doses() {
                let e = &view.event;
                let channels = e.channels();
                let pushes = channels.iter().take_while(|c| **c == Channel::Push).count();
                prop_assert!(channels[pushes..].iter().all(|c| *c == Channel::Email));
                prop_assert!(channels.len() - pushes <= 1);
                prop_assert!(e.escalation_log.windows(2).all(|w| w[0].at <= w[1].at));
                prop_assert!(e.escalation_log.iter().all(|x| x.at >= e.due_at));
                if let Some(email) = e.escalation_log.iter().find(|x| x.channel == Channel::Email) {
                    prop_assert_eq!(email.at, e.due_at + delay);
                }
                match e.state {
                    DoseState::Acknowledged => prop_assert!(view.intake.is_some()),
                    DoseState::Missed => {
                        prop_assert!(view.intake.is_none());
                        prop_assert!(channels.contains(&Channel::Email));
                    }
                    _ => prop_assert!(view.intake.is_none()),
                }
            }
        }
    }

    #[test]
    fn email_iff_unacknowledged_at_the_delay(s in scenario()) {
        let plan = s.plan().unwrap();
        let (t, mama) = finish(&s);
        let acked = by_dose(&t, "ACK");
        let emails = by_dose(&t, "EMAIL");
        prop_assert_eq!(t.matching(" EMAIL ").count(), emails.len());
        let range = DateRange { start: plan.horizon.start, end: plan.horizon.end };
        let mut doses = 0;
        for (i, profile) in plan.profiles.iter().enumerate() {
            let engine = mama.world().engine(&profile.patient_id).unwrap();
            for view in engine.doses_in(range) {
                doses += 1;
                let e = &view.event;
                let med = &mama.world().medication(&e.medication_id).unwrap().name;
                let r = format!("{} {med}@{}T{}", profile.patient_id, e.local_date, e.local_time);
                let deadline = e.due_at + plan.timing.email_delay;
                let unacked = acked.get(&r).is_none_or(|at| *at >= deadline);
                prop_assert_eq!(emails.get(&r).copied(), unacked.then_some(deadline), "patient {} dose {}", i, r);
            }
        }
        prop_assert_eq!(doses, t.matching("REPORT ").map(|l| total_of(&l.text)).sum::<u32>());
    }

    #[test]
    fn report_rows_conserve_doses(s in scenario()) {
        let plan = s.plan().unwrap();
        let (_, mama) = finish(&s);
        let range = DateRange { start: plan.horizon.start, end: plan.horizon.end };
        for profile in &plan.profiles {
            let report = mama.report(&profile.patient_id, range).unwrap();
            let engine = mama.world().engine(&profile.patient_id).unwrap();
            let (mut taken, mut missed) = (0u32, 0u32);
            for view in engine.doses_in(range) {
                match (view.event.state, view.intake.map(|i| i.classification)) {
                    (DoseState::Acknowledged, Some(IntakeClass::OnTime | IntakeClass::Late)) => taken += 1,
                    (DoseState::Missed, _) => missed += 1,
                    _ => {}
                }
            }
            for row in &report.rows {
                prop_assert_eq!(row.on_time + row.late + row.missed + row.pending, row.total);
            }
            prop_assert_eq!(report.taken, taken);
            prop_assert_eq!(report.owed, taken + missed);
            // The float rate must be the correctly rounded quotient.
            if report.owed > 0 {
                prop_assert_eq!(report.adherence_rate, f64::from(taken) / f64::from(taken + missed));
            } else {
                prop_assert_eq!(report.adherence_rate, 0.0);
            }
        }
    }

    #[test]
    fn replaying_the_log_rebuilds_the_state(s in scenario()) {
        let (_, mama) = finish(&s);
        let bytes = mama.store().log_bytes().unwrap();
        let rebuilt = Store::from_bytes(&bytes).unwrap();
        prop_assert_eq!(rebuilt.seq(), mama.store().seq());
        prop_assert!(rebuilt.world() == mama.world());
    }

    #[test]
    fn truncated_logs_report_the_last_good_record(s in scenario(), frac in 0.0f64..1.0) {
        let (_, mama) = finish(&s);
        let bytes = mama.store().log_bytes().unwrap();
        let full = read_log(&bytes).unwrap();
        let cut = HEADER_LEN + ((bytes.len() - HEADER_LEN) as f64 * frac) as usize;
        let cut = &bytes[..cut];
        match read_log(cut) {
            Ok(prefix) => prop_assert_eq!(&prefix[..], &full[..prefix.len()]),
            Err(LogError::Corrupt { offset, .. }) => {
                let offset = offset as usize;
                prop_assert!(offset < cut.len());
                let prefix = read_log(&cut[..offset]).unwrap();
                prop_assert!(prefix.len() < full.len());
                prop_assert_eq!(&prefix[..], &full[..prefix.len()]);
                // The next intact record would have ended past the cut.
                let next = mama_core::store::encode_record(prefix.len() as u64 + 1, &full[prefix.len()].1);
                prop_assert!(offset + next.len() > cut.len());
            }
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn invalid_webforms_leave_the_store_untouched(s in scenario(), breakage in 0u8..6, later in 0i64..3000) {
        let plan = s.plan().unwrap();
        let (_, mut mama) = finish(&s);
        let Some(profile) = plan.profiles.first() else { return Ok(()) };
        let before = mama.store().log_bytes().unwrap();
        let world = mama.world().clone();
        let at = mama.world().clock().unwrap() + TimeDelta::minutes(later);
        let valid = MedicationEntry {
            name: "Fresh".into(),
            strength: "5 mg".into(),
            form: mama_core::domain::DoseForm::Tablet,
            times_of_day: vec![mama_core::domain::TimeOfDay::hm(9, 0)],
            days: mama_core::domain::DayPattern::Daily,
            start_date: plan.horizon.start,
            end_date: None,
            prescriber: None,
        };
        let mut bad = valid.clone();
        let mut patient = profile.patient_id.clone();
        let mut entries = vec![valid.clone()];
        match breakage {
            0 => { bad.name = "  ".into(); entries.push(bad); }
            1 => { bad.times_of_day.clear(); entries.push(bad); }
            2 => { bad.end_date = plan.horizon.start.pred_opt(); entries.push(bad); }
            3 => { bad.days = mama_core::domain::DayPattern::Weekdays(vec![]); entries.push(bad); }
            4 => entries.push(valid.clone()),
            _ => patient = mama_core::domain::PatientId::new("nobody"),
        }
        let payload = WebformPayload { patient_id: patient, entries };
        prop_assert!(mama.load_webform(&payload, at).is_err());
        prop_assert_eq!(mama.store().log_bytes().unwrap(), before);
        prop_assert!(mama.world() == &world);
    }
}

fn total_of(text: &str) -> u32 {
    text.rsplit_once("total=").unwrap().1.parse().unwrap()
}

#[test]
fn parallel_and_sequential_batches_agree() {
    let scenarios: Vec<Scenario> = (0..64).map(|seed| generate(seed, GenParams::default())).collect();
    let parallel = verify_many(&scenarios);
    assert_eq!(parallel, verify_many_sequential(&scenarios));
    assert!(parallel.iter().all(|v| v.is_match()), "{parallel:?}");
}
