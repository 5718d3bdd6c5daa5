use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use atpo_client::{Client, ClientError};
use atpo_core::api::{ErrorBody, EvaluateRequest, JobState, SampleTreeRequest};
use atpo_core::env::EnvConfig;
use atpo_core::model::Checkpoint;
use atpo_core::runner::ComputeProfile;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "atpo", about = "Train, evaluate and inspect tree-structured dialogue policies")]
struct Cli {
    /// Service to talk to; without it an in-process server is started.
    #[arg(long, global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training job and stream its metrics as JSON lines.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Also write the metrics stream here.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Save the final checkpoint here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        poll_ms: u64,
    },
    /// Accuracy of a checkpoint on a scenario file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// 0 plays greedily.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        turn_limit: u32,
        #[arg(long, default_value_t = 4)]
        max_macro_len: usize,
    },
    /// Grow one rollout tree and write its nodes, edges and depth report.
    SampleTree {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Grow with trained weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Prefill/decode cost and prefix-sharing savings.
    Flops {
        #[arg(long)]
        phi: u64,
        #[arg(long)]
        theta: u64,
        #[arg(long)]
        x: u64,
        #[arg(long)]
        y: u64,
        #[arg(long)]
        n: u64,
    },
}

/// A job that ended without success.
#[derive(Debug)]
struct JobFailed(ErrorBody);

impl std::fmt::Display for JobFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0.message)?;
        if let Some(p) = &self.0.checkpoint {
            write!(f, " (diagnostic checkpoint: {p})")?;
        }
        Ok(())
    }
}

impl std::error::Error for JobFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let code = if let Some(e) = err.downcast_ref::<ClientError>() {
        e.exit_code()
    } else if let Some(JobFailed(body)) = err.downcast_ref::<JobFailed>() {
        body.exit_code()
    } else {
        1
    };
    code as u8
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

async fn run(cli: Cli) -> Result<()> {
    let client = match cli.server {
        Some(url) => Client::new(url),
        None => {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.context("starting the in-process server")?;
            let addr = listener.local_addr()?;
            tokio::spawn(atpo_server::serve(listener));
            Client::new(format!("http://{addr}"))
        }
    };
    match cli.command {
        Command::Train { config, metrics, checkpoint, poll_ms } => {
            train(&client, &config, metrics.as_deref(), checkpoint.as_deref(), poll_ms).await
        }
        Command::Evaluate { checkpoint, scenarios, runs, temperature, seed, turn_limit, max_macro_len } => {
            let req = EvaluateRequest {
                checkpoint: read_checkpoint(&checkpoint)?,
                scenarios: read(&scenarios)?,
                runs,
                temperature,
                seed,
                env: EnvConfig { turn_limit, max_macro_len },
            };
            let resp = client.evaluate(&req).await?;
            for issue in &resp.issues {
                eprintln!("skipped line {}: {}", issue.line, issue.reason);
            }
            println!("{}", serde_json::to_string_pretty(&resp.summary)?);
            Ok(())
        }
        Command::SampleTree { config, seed, out, checkpoint } => {
            let req =
                SampleTreeRequest { config: read(&config)?, seed, checkpoint: checkpoint.as_deref().map(read_checkpoint).transpose()? };
            let resp = client.sample_tree(&req).await?;
            fs::write(&out, serde_json::to_string_pretty(&resp)?).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("{} nodes, {} leaves -> {}", resp.tree.nodes.len(), resp.tree.leaves, out.display());
            Ok(())
        }
        Command::Flops { phi, theta, x, y, n } => {
            let report = client.flops(&ComputeProfile { phi, theta, x, y, n }).await?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing checkpoint {}", path.display()))
}

async fn train(client: &Client, config: &Path, metrics_path: Option<&Path>, checkpoint_path: Option<&Path>, poll_ms: u64) -> Result<()> {
    let job = client.train(&read(config)?).await?;
    eprintln!("job {job} started on {}", client.base());
    let mut sink = metrics_path
        .map(|p| fs::File::create(p).with_context(|| format!("creating {}", p.display())))
        .transpose()?
        .map(std::io::BufWriter::new);
    let mut stdout = std::io::stdout().lock();
    let mut seen = 0;
    let status = loop {
        let status = tokio::select! {
            s = client.job(job) => s?,
            _ = tokio::signal::ctrl_c() => {
                client.cancel(job).await?;
                anyhow::bail!("interrupted; job {job} cancelled");
            }
        };
        for row in client.metrics(job, seen).await? {
            let line = serde_json::to_string(&row)?;
            writeln!(stdout, "{line}")?;
            if let Some(f) = sink.as_mut() {
                writeln!(f, "{line}")?;
            }
            seen += 1;
        }
        if status.state != JobState::Running {
            break status;
        }
        tokio::time::sleep(Duration::from_millis(poll_ms)).await;
    };
    if let Some(f) = sink.as_mut() {
        f.flush()?;
    }
    match status.state {
        JobState::Succeeded => {
            if let Some(p) = checkpoint_path {
                let ck = client.checkpoint(job).await?;
                ck.save(p).with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(e) = &status.final_eval {
                eprintln!("final eval accuracy {:.3} over {} episodes", e.mean, e.episodes);
            }
            Ok(())
        }
        _ => Err(JobFailed(
            status.error.unwrap_or_else(|| ErrorBody::new(atpo_core::api::ErrorKind::Internal, "job ended without a result")),
        )
        .into()),
    }
}
