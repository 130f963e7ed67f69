//! Seeded random scenarios for equivalence and property testing.

use chrono::{Days, NaiveDate, NaiveTime, TimeDelta, Weekday};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{DayPattern, DoseForm, TimeOfDay};
use crate::scheduler::TimingConfig;

use super::scenario::{Horizon, Scenario, ScenarioMedication, ScenarioPatient, ScriptAction, ScriptItem};

/// Zones with and without daylight saving, including half-hour offsets and
/// a half-hour DST shift.
pub const ZONES: &[&str] = &[
    "UTC",
    "America/New_York",
    "Europe/London",
    "Pacific/Auckland",
    "Australia/Lord_Howe",
    "Asia/Kolkata",
    "America/Santiago",
    "Asia/Kathmandu",
];

/// Local dates near clock changes in the zones above.
const DST_DATES: &[&str] = &[
    "2024-03-08", "2024-03-29", "2024-04-05", "2024-09-06", "2024-09-27", "2024-10-04", "2024-10-25",
    "2024-11-01",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenParams {
    pub max_days: u32,
    pub max_meds: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { max_days: 7, max_meds: 5 }
    }
}

fn time(h: u32, m: u32) -> TimeOfDay {
    TimeOfDay(NaiveTime::from_hms_opt(h, m, 0).unwrap())
}

fn random_time(rng: &mut ChaCha8Rng) -> TimeOfDay {
    // Bias toward the small hours (where clock changes happen), the
    // edges of the day, and ordinary dosing times.
    match rng.random_range(0..10) {
        0 | 1 => time(rng.random_range(0..4), rng.random_range(0..12) * 5),
        2 => time(23, rng.random_range(0..12) * 5),
        _ => time(rng.random_range(6..23), rng.random_range(0..4) * 15),
    }
}

fn random_times(rng: &mut ChaCha8Rng) -> Vec<TimeOfDay> {
    let n = rng.random_range(1..=4);
    let mut times: Vec<TimeOfDay> = (0..n).map(|_| random_time(rng)).collect();
    times.sort();
    times.dedup();
    times
}

fn random_days(rng: &mut ChaCha8Rng) -> DayPattern {
    if rng.random_bool(0.7) {
        return DayPattern::Daily;
    }
    let all = [Weekday::Mon, Weekday::Tue, Weekday::Wed, Weekday::Thu, Weekday::Fri, Weekday::Sat, Weekday::Sun];
    let k = rng.random_range(1..=6);
    let mut days: Vec<Weekday> = all.choose_multiple(rng, k).copied().collect();
    days.sort_by_key(|d| d.num_days_from_monday());
    DayPattern::Weekdays(days)
}

fn random_timing(rng: &mut ChaCha8Rng) -> Option<TimingConfig> {
    if rng.random_bool(0.6) {
        return None;
    }
    let email = *[20, 30, 45].choose(rng).unwrap();
    let window = email + *[0, 15, 30].choose(rng).unwrap();
    let caregiver = *[30, 60, 90].choose(rng).unwrap();
    Some(TimingConfig::from_minutes(email, window, caregiver).expect("generated timing is valid"))
}

/// A random scenario of at most `max_days` days and `max_meds` medications
/// split over one or two patients, with an acknowledgement script that
/// includes on-time, late, too-early, after-missed and duplicate entries.
pub fn generate(seed: u64, params: GenParams) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let days = rng.random_range(1..=params.max_days.max(1)) as u64;
    let start: NaiveDate = if rng.random_bool(0.5) {
        DST_DATES.choose(&mut rng).unwrap().parse().unwrap()
    } else {
        NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() + Days::new(rng.random_range(0..366))
    };
    let horizon = Horizon { start, end: start + Days::new(days - 1) };
    let timing = random_timing(&mut rng);
    let patient_count = if params.max_meds >= 2 && rng.random_bool(0.3) { 2 } else { 1 };
    let total_meds = rng.random_range(0..=params.max_meds) as usize;
    let mut patients = Vec::new();
    for p in 0..patient_count {
        let id = format!("p{}", p + 1);
        let meds = if p + 1 == patient_count { total_meds - total_meds / patient_count * p } else { total_meds / patient_count };
        let medications = (0..meds)
            .map(|m| {
                let span_start = rng.random_bool(0.8).then_some(horizon.start).or_else(|| {
                    Some(horizon.start + Days::new(rng.random_range(0..days)))
                });
                let span_end = rng.random_bool(0.8).then_some(horizon.end).or_else(|| {
                    let s = span_start.unwrap();
                    Some(s + Days::new(rng.random_range(0..days)))
                });
                ScenarioMedication {
                    name: format!("Med{}", m + 1),
                    strength: format!("{} mg", rng.random_range(1..=20) * 50),
                    form: *[DoseForm::Tablet, DoseForm::Capsule, DoseForm::Liquid].choose(&mut rng).unwrap(),
                    times_of_day: random_times(&mut rng),
                    days: random_days(&mut rng),
                    start_date: span_start,
                    end_date: span_end,
                }
            })
            .collect();
        let check = if rng.random_bool(0.7) {
            time(20, 0)
        } else {
            *[time(2, 30), time(23, 30), time(12, 0), time(21, 45)].choose(&mut rng).unwrap()
        };
        let tag = |rng: &mut ChaCha8Rng, prob: f64, v: String| rng.random_bool(prob).then_some(v);
        patients.push(ScenarioPatient {
            id: id.clone(),
            name: format!("Patient {}", p + 1),
            timezone: ZONES.choose(&mut rng).unwrap().to_string(),
            phone: tag(&mut rng, 0.7, format!("+64210000{:02}", p * 3 + 1)),
            email: tag(&mut rng, 0.8, format!("{id}@example.org")),
            caregiver_phone: tag(&mut rng, 0.6, format!("+64210000{:02}", p * 3 + 2)),
            daily_check_time: check,
            reminders_per_dose: *[1, 1, 1, 2, 3].choose(&mut rng).unwrap(),
            medications,
        });
    }
    let mut scenario = Scenario { seed, horizon, timing, behavior: None, patients, script: Vec::new() };
    scenario.script = random_script(&mut rng, &scenario);
    scenario
}

fn random_script(rng: &mut ChaCha8Rng, scenario: &Scenario) -> Vec<ScriptItem> {
    let Ok(plan) = scenario.plan() else {
        return Vec::new();
    };
    let ack_probability = rng.random_range(0.0..1.0);
    let mut items = Vec::new();
    for (p, entries) in plan.medications.iter().enumerate() {
        let tz = plan.timezone(p);
        for entry in entries {
            let schedule = crate::domain::DoseSchedule {
                schedule_id: "probe".into(),
                medication_id: "probe".into(),
                times_of_day: entry.times_of_day.clone(),
                days: entry.days.clone(),
                start_date: entry.start_date,
                end_date: entry.end_date,
            };
            let mut date = entry.start_date;
            while Some(date) <= entry.end_date {
                for (slot, due) in crate::scheduler::slots_for_day(&schedule, date, tz) {
                    if !rng.random_bool(ack_probability) {
                        continue;
                    }
                    // Mostly near the due time, sometimes far out either way.
                    let offset = match rng.random_range(0..10) {
                        0 => rng.random_range(-120..-20),
                        1 => rng.random_range(200..1500),
                        _ => rng.random_range(-10..120),
                    };
                    let at = due + TimeDelta::minutes(offset);
                    let dose = format!("{}@{}T{}", entry.name, date, slot.time().format("%H:%M"));
                    let mut push = |at| {
                        if at > plan.setup_at && at <= plan.end_at {
                            items.push(ScriptItem {
                                at,
                                patient: plan.profiles[p].patient_id.to_string(),
                                action: ScriptAction::Ack,
                                dose: Some(dose.clone()),
                            });
                        }
                    };
                    push(at);
                    if rng.random_bool(0.05) {
                        push(at + TimeDelta::minutes(rng.random_range(0..30)));
                    }
                }
                date = date + Days::new(1);
            }
        }
        if rng.random_bool(0.3) {
            let span = (plan.end_at - plan.setup_at).num_minutes();
            let at = plan.setup_at + TimeDelta::minutes(rng.random_range(1..=span));
            items.push(ScriptItem { at, patient: plan.profiles[p].patient_id.to_string(), action: ScriptAction::Noop, dose: None });
        }
    }
    items.shuffle(rng);
    items.sort_by_key(|i| i.at);
    items
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_scenarios_are_valid_and_seeded() {
        for seed in 0..50 {
            let s = generate(seed, GenParams::default());
            s.plan().unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            assert_eq!(s, generate(seed, GenParams::default()));
            assert!(s.patients.iter().map(|p| p.medications.len()).sum::<usize>() <= 5);
            assert!((s.horizon.end - s.horizon.start).num_days() < 7);
        }
    }
}
