//! The `mama-sim` binary end to end.

use std::path::PathBuf;
use std::process::{Command, Output};

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mama-sim")).args(args).output().unwrap()
}

fn example() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/week.toml").to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn run_is_reproducible_and_matches_the_oracle() {
    let a = stdout(&sim(&["run", &example()]));
    assert_eq!(a, stdout(&sim(&["run", &example()])));
    assert_eq!(a, stdout(&sim(&["oracle", &example()])));
    assert!(a.contains("2024-03-09T22:00:00Z ben RED_FLAG date=2024-03-09"));
    assert!(a.contains("2024-03-11T04:00:00Z ada PROVIDER_FLAG week=2024-03-04"));
    assert!(a.contains("2024-03-18T04:00:00Z ada ADHERENCE 6/18"), "{a}");
    assert!(stdout(&sim(&["verify", &example()])).contains("ok ("));
}

#[test]
fn generated_scenarios_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.toml");
    let transcript = dir.path().join("t.txt");
    let s = scenario.to_str().unwrap();
    stdout(&sim(&["gen", "--seed", "42", "--days", "3", "--meds", "2", "--out", s]));
    assert!(std::fs::read_to_string(&scenario).unwrap().contains("seed = 42"));
    stdout(&sim(&["run", s, "--out", transcript.to_str().unwrap()]));
    assert_eq!(std::fs::read_to_string(&transcript).unwrap(), stdout(&sim(&["run", s])));
    stdout(&sim(&["verify", s, &example()]));
}

#[test]
fn batch_agrees_in_both_modes() {
    let parallel = stdout(&sim(&["batch", "--count", "40", "--base", "500"]));
    let sequential = stdout(&sim(&["batch", "--count", "40", "--base", "500", "--sequential"]));
    let summary = |s: &str| s.split(" transcript lines").next().unwrap().to_owned();
    assert!(parallel.starts_with("40 scenarios, 40 agree"), "{parallel}");
    assert_eq!(summary(&parallel), summary(&sequential));
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[horizon]\nstart = \"2024-06-05\"\nend = \"2024-06-01\"\n").unwrap();
    let o = sim(&["run", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizon ends before it starts"));
    let o = sim(&["verify", "/nonexistent/scenario.toml"]);
    assert!(!o.status.success());
}

#[test]
fn seed_drives_generated_behaviour() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.toml");
    let text = std::fs::read_to_string(example()).unwrap();
    let head = text.split("[[script]]").next().unwrap();
    std::fs::write(&path, format!("{head}[behavior]\nack_probability = 0.5\n").replacen("seed = 1", "", 1)).unwrap();
    let p = path.to_str().unwrap();
    let one = stdout(&sim(&["run", p, "--seed", "1"]));
    assert_eq!(one, stdout(&sim(&["run", p, "--seed", "1"])));
    let others: Vec<String> = (2..6).map(|s| stdout(&sim(&["run", p, "--seed", &s.to_string()]))).collect();
    assert!(others.iter().any(|o| *o != one));
}
