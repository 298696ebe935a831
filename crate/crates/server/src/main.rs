use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use echo_server::{serve, ServiceConfig, StudyService};

/// Study orchestration service.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// Address to listen on.
    #[arg(long, env = "ECHO_BIND", default_value = "127.0.0.1:8080")]
    bind: String,
    /// Directory holding studies, accounts and event logs.
    #[arg(long, env = "ECHO_STORAGE_ROOT", default_value = "./echo-data")]
    storage_root: PathBuf,
    /// Secret that stored API keys are encrypted under.
    #[arg(long, env = "ECHO_SECRET", hide_env_values = true)]
    secret: String,
    /// Use a virtual clock controlled through the admin clock endpoint.
    #[arg(long, env = "ECHO_TEST_MODE")]
    test_mode: bool,
    /// Bearer token lifetime in seconds.
    #[arg(long, env = "ECHO_TOKEN_TTL_SECS", default_value_t = 12 * 3600)]
    token_ttl_secs: u64,
    /// Requests allowed per token.
    #[arg(long, env = "ECHO_REQUEST_CAP", default_value_t = 100_000)]
    request_cap: u64,
}

#[tokio::main]
async fn main() -> std::process::ExitCode {
    tracing_subscriber::fmt().with_env_filter(
        tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
    )
    .init();
    let args = Args::parse();
    let mut config = ServiceConfig::new(&args.storage_root, args.secret);
    config.test_mode = args.test_mode;
    config.token_ttl = Duration::from_secs(args.token_ttl_secs);
    config.request_cap = args.request_cap;

    let service = match StudyService::open(&config) {
        Ok(s) => Arc::new(s),
        Err(e) => {
            tracing::error!("cannot open storage at {}: {e}", args.storage_root.display());
            return std::process::ExitCode::from(2);
        }
    };
    let listener = match tokio::net::TcpListener::bind(&args.bind).await {
        Ok(l) => l,
        Err(e) => {
            tracing::error!("cannot bind {}: {e}", args.bind);
            return std::process::ExitCode::from(3);
        }
    };
    // Test harnesses read this line to learn the port.
    println!("listening on {}", listener.local_addr().expect("bound socket has an address"));
    tracing::info!(test_mode = config.test_mode, "service ready");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    match serve(listener, service, shutdown).await {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!("server failed: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
