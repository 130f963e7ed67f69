use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mama_service::config::Config;
use tracing_subscriber::EnvFilter;

/// Medication adherence service.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Path to the TOML config file.
    #[arg(long, env = "MAMA_CONFIG", default_value = "mama.toml")]
    config: PathBuf,
    /// Cut an incomplete final log record left by a crash before loading.
    #[arg(long)]
    repair_torn_tail: bool,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt().with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"))).init();
    let args = Args::parse();
    let config = match Config::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            tracing::error!(error = %e, "bad config");
            return ExitCode::from(2);
        }
    };
    let result = match mama_service::build_state(config, args.repair_torn_tail) {
        Ok(state) => mama_service::serve(state).await,
        Err(e) => Err(e),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, "service failed");
            ExitCode::FAILURE
        }
    }
}
