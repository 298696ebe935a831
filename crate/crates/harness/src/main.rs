use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use echo_core::ids::StudyId;
use echo_core::model::{default_study, Modality, StudyConfig};
use echo_harness::{compare_export, run_many, BehaviorScript, Client, RunOptions, SessionTranscript};
use echo_server::api::{CreateStudy, StudyDoc};

/// Scripted participants for the study service.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Base URL of the service.
    #[arg(long, env = "ECHO_ENDPOINT", default_value = "http://127.0.0.1:8080", global = true)]
    endpoint: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct AdminArgs {
    #[arg(long, env = "ECHO_ADMIN_USER")]
    admin_user: Option<String>,
    #[arg(long, env = "ECHO_ADMIN_PASSWORD", hide_env_values = true)]
    admin_password: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a behavior script as one or more participants.
    Run {
        #[arg(long)]
        study: String,
        /// Line-delimited JSON actions.
        #[arg(long)]
        script: PathBuf,
        /// Concurrent participants running the same script.
        #[arg(long, default_value_t = 1)]
        participants: usize,
        #[arg(long)]
        invite_code: Option<String>,
        #[arg(long)]
        label: Option<String>,
        /// Advance the service's virtual clock on `wait` (test mode only).
        #[arg(long)]
        virtual_clock: bool,
        /// Write the transcripts here as JSON instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        admin: AdminArgs,
    },
    /// Create a study from a config file or the default template.
    SeedStudy {
        #[arg(long, conflicts_with = "template")]
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["chat", "search"])]
        template: Option<String>,
        #[arg(long, required_unless_present = "config")]
        study_id: Option<String>,
        #[arg(long)]
        min_interactions: Option<u32>,
        #[command(flatten)]
        admin: AdminArgs,
    },
    /// Check saved transcripts against the current export.
    CompareExport {
        /// Output of `run --out`.
        #[arg(long)]
        transcripts: PathBuf,
        #[command(flatten)]
        admin: AdminArgs,
    },
}

async fn admin_token(client: &Client, args: &AdminArgs) -> Result<Option<String>, String> {
    match (&args.admin_user, &args.admin_password) {
        (Some(u), Some(p)) => client.admin_token(u, p).await.map(Some).map_err(|e| format!("admin login failed: {e}")),
        (None, None) => Ok(None),
        _ => Err("give both --admin-user and --admin-password".into()),
    }
}

async fn run(cli: Cli) -> Result<bool, String> {
    let client = Client::new(&cli.endpoint);
    match cli.command {
        Command::Run { study, script, participants, invite_code, label, virtual_clock, out, admin } => {
            let text = tokio::fs::read_to_string(&script).await.map_err(|e| format!("{}: {e}", script.display()))?;
            let parsed = BehaviorScript::parse(&text).map_err(|e| format!("{}: {e}", script.display()))?;
            let options = RunOptions {
                invite_code,
                external_label: label,
                admin_token: admin_token(&client, &admin).await?,
                virtual_clock,
            };
            if virtual_clock && options.admin_token.is_none() {
                return Err("--virtual-clock needs admin credentials".into());
            }
            let results = run_many(&client, &StudyId::new(study), vec![parsed; participants.max(1)], &options).await;
            let mut transcripts = Vec::new();
            for r in results {
                transcripts.push(r.map_err(|e| format!("service error: {e}"))?);
            }
            let json = serde_json::to_string_pretty(&transcripts).expect("transcripts serialize");
            match out {
                Some(path) => tokio::fs::write(&path, json).await.map_err(|e| format!("{}: {e}", path.display()))?,
                None => println!("{json}"),
            }
            Ok(report(&transcripts))
        }
        Command::SeedStudy { config, template, study_id, min_interactions, admin } => {
            let token = admin_token(&client, &admin).await?.ok_or("seed-study needs admin credentials")?;
            let mut config: StudyConfig = match config {
                Some(path) => {
                    let text = tokio::fs::read(&path).await.map_err(|e| format!("{}: {e}", path.display()))?;
                    serde_json::from_slice(&text).map_err(|e| format!("{}: {e}", path.display()))?
                }
                None => {
                    let modality = if template.as_deref() == Some("search") { Modality::Search } else { Modality::Chat };
                    default_study(study_id.as_deref().expect("clap requires a study id"), modality)
                }
            };
            if let Some(n) = min_interactions {
                config.settings.min_interactions = n;
            }
            let body = CreateStudy { config: Some(config), study_id: None, template: None };
            let doc: StudyDoc = client.post("/api/admin/studies", Some(&token), &body).await.map_err(|e| e.to_string())?;
            eprintln!("created study {} (version {})", doc.config.study_id, doc.version);
            Ok(true)
        }
        Command::CompareExport { transcripts, admin } => {
            let token = admin_token(&client, &admin).await?.ok_or("compare-export needs admin credentials")?;
            let text = tokio::fs::read(&transcripts).await.map_err(|e| format!("{}: {e}", transcripts.display()))?;
            let mut saved: Vec<SessionTranscript> =
                serde_json::from_slice(&text).map_err(|e| format!("{}: {e}", transcripts.display()))?;
            for t in &mut saved {
                t.export = Some(compare_export(&client, &token, t).await.map_err(|e| e.to_string())?);
            }
            Ok(report(&saved))
        }
    }
}

/// Prints problems to stderr; true when there are none.
fn report(transcripts: &[SessionTranscript]) -> bool {
    let mut clean = true;
    for t in transcripts {
        for p in t.problems() {
            clean = false;
            eprintln!("{}: {p}", t.session_id);
        }
    }
    clean
}

#[tokio::main]
async fn main() -> ExitCode {
    match run(Cli::parse()).await {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
