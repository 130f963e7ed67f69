//! Service configuration, read from a TOML file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use mama_core::domain::TimeOfDay;
use mama_core::scheduler::TimingConfig;
use serde::{Deserialize, Serialize};

/// Where outbound messages go.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransportConfig {
    /// Every message becomes a log line; nothing leaves the host.
    Log,
    /// Every message is appended as one JSON line to `path`.
    Outbox { path: PathBuf },
}

/// Source of "now" for requests and the timer driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    System,
    /// Time only moves through `POST /admin/clock`. For demos and tests.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    pub store_path: PathBuf,
    /// Directory for uploaded prescription images.
    pub blob_dir: PathBuf,
    /// Bearer token for provider and staff endpoints.
    pub provider_token: String,
    #[serde(default)]
    pub timing: TimingConfig,
    /// Used when a sign-up does not choose a daily check time.
    #[serde(default = "default_check_time")]
    pub default_daily_check_time: TimeOfDay,
    #[serde(default = "default_transport")]
    pub transport: TransportConfig,
    #[serde(default = "default_clock")]
    pub clock: ClockMode,
    /// Starting instant of a manual clock; defaults to the system time.
    #[serde(default)]
    pub manual_start: Option<mama_core::domain::Timestamp>,
    /// Upper bound on how long the driver sleeps between checks, in seconds.
    #[serde(default = "default_tick")]
    pub max_sleep_secs: u64,
}

fn default_listen() -> SocketAddr {
    "127.0.0.1:8080".parse().unwrap()
}

fn default_check_time() -> TimeOfDay {
    TimeOfDay::hm(20, 0)
}

fn default_transport() -> TransportConfig {
    TransportConfig::Log
}

fn default_clock() -> ClockMode {
    ClockMode::System
}

fn default_tick() -> u64 {
    60
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("provider_token must not be empty")]
    NoProviderToken,
}

impl Config {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let config: Config =
            toml::from_str(text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        if config.provider_token.trim().is_empty() {
            return Err(ConfigError::NoProviderToken);
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, path)
    }

    /// A config rooted in `dir`, for tests and local runs.
    pub fn in_dir(dir: &Path, provider_token: &str) -> Self {
        Self {
            listen: default_listen(),
            store_path: dir.join("events.log"),
            blob_dir: dir.join("blobs"),
            provider_token: provider_token.to_owned(),
            timing: TimingConfig::default(),
            default_daily_check_time: default_check_time(),
            transport: TransportConfig::Log,
            clock: ClockMode::System,
            manual_start: None,
            max_sleep_secs: default_tick(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_defaults() {
        let c = Config::from_toml(
            "store_path = \"/var/lib/mama/events.log\"\nblob_dir = \"/var/lib/mama/blobs\"\nprovider_token = \"s3cret\"\n",
            Path::new("mama.toml"),
        )
        .unwrap();
        assert_eq!(c.timing, TimingConfig::default());
        assert_eq!(c.transport, TransportConfig::Log);
        assert_eq!(c.clock, ClockMode::System);
        assert_eq!(c.default_daily_check_time, TimeOfDay::hm(20, 0));
    }

    #[test]
    fn full_file() {
        let text = r#"
listen = "0.0.0.0:9000"
store_path = "events.log"
blob_dir = "blobs"
provider_token = "s3cret"
default_daily_check_time = "19:30"
clock = "manual"
manual_start = "2024-06-03T00:00:00Z"

[timing]
email_delay_minutes = 45
on_time_window_minutes = 60
caregiver_delay_minutes = 30

[transport]
kind = "outbox"
path = "outbox.jsonl"
"#;
        let c = Config::from_toml(text, Path::new("mama.toml")).unwrap();
        assert_eq!(c.timing, TimingConfig::from_minutes(45, 60, 30).unwrap());
        assert_eq!(c.transport, TransportConfig::Outbox { path: "outbox.jsonl".into() });
        assert_eq!(c.clock, ClockMode::Manual);
    }

    #[test]
    fn bad_timing_and_empty_token_are_rejected() {
        let base = "store_path = \"e\"\nblob_dir = \"b\"\n";
        assert!(matches!(
            Config::from_toml(&format!("{base}provider_token = \" \"\n"), Path::new("x")),
            Err(ConfigError::NoProviderToken)
        ));
        let bad = format!(
            "{base}provider_token = \"t\"\n[timing]\nemail_delay_minutes = 90\non_time_window_minutes = 60\ncaregiver_delay_minutes = 60\n"
        );
        assert!(matches!(Config::from_toml(&bad, Path::new("x")), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn example_file_parses() {
        let path = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/mama.example.toml"));
        let c = Config::load(path).unwrap();
        assert_eq!(c.timing, TimingConfig::default());
        assert_eq!(c.transport, TransportConfig::Outbox { path: "var/outbox.jsonl".into() });
    }
}
