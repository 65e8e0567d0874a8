use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use droplab_client::Client;
use droplab_core::config::RunConfig;
use droplab_core::hexgrid::HexCoord;
use droplab_core::jobs::{
    CompareJob, DitheringJob, EmbedJob, ErrorBody, EvaluateJob, JobSpec, RunJob, Scenario,
};
use droplab_core::policy::ModelKind;

#[derive(Parser)]
#[command(name = "droplab", version, about = "Ride-hailing relocation experiments")]
struct Cli {
    /// Job service to talk to; an in-process one is started when omitted.
    #[arg(long, global = true)]
    server: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a rule policy (random, greedy) and write event logs.
    Simulate(RunArgs),
    /// Train a model, then evaluate it.
    Train(RunArgs),
    /// Evaluate a saved policy.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Record a relocation graph and compare learned and exact embeddings.
    Embed {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        bucket_ticks: Option<u32>,
    },
    /// Diagnostics.
    #[command(subcommand)]
    Diag(Diag),
    /// Reports over finished runs.
    #[command(subcommand)]
    Report(Report),
    /// Run the job service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Concurrent jobs; defaults to the number of cores.
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Subcommand)]
enum Diag {
    /// Probability of reaching ring n within n steps.
    Dithering {
        #[command(flatten)]
        run: RunArgs,
        /// Walk with a saved policy instead of uniform random moves.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        max_ring: u32,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        /// Start cell as `q,r`.
        #[arg(long, default_value = "0,0", value_parser = parse_hex)]
        origin: HexCoord,
    },
}

#[derive(Subcommand)]
enum Report {
    /// Table of several runs' metrics.
    Compare {
        /// Run directories containing metrics.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Models expected in the table, comma separated.
        #[arg(long, value_delimiter = ',')]
        expected: Vec<String>,
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
}

fn parse_hex(s: &str) -> Result<HexCoord, String> {
    let (q, r) = s.split_once(',').ok_or("expected q,r")?;
    let q = q.trim().parse().map_err(|e| format!("q: {e}"))?;
    let r = r.trim().parse().map_err(|e| format!("r: {e}"))?;
    Ok(HexCoord::new(q, r))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

impl RunArgs {
    fn scenario(&self) -> Result<Scenario, ErrorBody> {
        let (config, base_dir) = match &self.config {
            Some(path) => {
                let cfg = RunConfig::load(path)
                    .map_err(|e| ErrorBody { code: e.code().into(), message: format!("{}: {e}", path.display()) })?;
                let base = absolute(path).parent().map(Path::to_path_buf);
                (cfg, base)
            }
            None => (RunConfig::default(), None),
        };
        Ok(Scenario { config, model: self.model, seed: self.seed, out_dir: self.out.as_deref().map(absolute), base_dir })
    }
}

fn job(cmd: Command) -> Result<JobSpec, ErrorBody> {
    Ok(match cmd {
        Command::Simulate(run) => JobSpec::Simulate(RunJob { scenario: run.scenario()? }),
        Command::Train(run) => JobSpec::Train(RunJob { scenario: run.scenario()? }),
        Command::Evaluate { run, policy } => {
            JobSpec::Evaluate(EvaluateJob { scenario: run.scenario()?, policy: absolute(&policy) })
        }
        Command::Embed { run, bucket_ticks } => JobSpec::Embed(EmbedJob { scenario: run.scenario()?, bucket_ticks }),
        Command::Diag(Diag::Dithering { run, policy, max_ring, trials, origin }) => JobSpec::Dithering(DitheringJob {
            scenario: run.scenario()?,
            policy: policy.as_deref().map(absolute),
            origin,
            max_ring,
            trials,
        }),
        Command::Report(Report::Compare { runs, expected, baseline, out }) => JobSpec::Compare(CompareJob {
            runs: runs.iter().map(|p| absolute(p)).collect(),
            expected,
            baseline,
            out_dir: out.as_deref().map(absolute),
        }),
        Command::Serve { .. } => unreachable!("serve is handled before building a job"),
    })
}

fn fail(body: &ErrorBody) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": body }));
    ExitCode::FAILURE
}

async fn run(cli: Cli) -> Result<(), ErrorBody> {
    let io = |e: std::io::Error| ErrorBody { code: "io".into(), message: e.to_string() };
    if let Command::Serve { addr, workers } = cli.command {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(io)?;
        let state = workers.map(droplab_service::AppState::new).unwrap_or_default();
        eprintln!("listening on http://{}", listener.local_addr().map_err(io)?);
        return droplab_service::serve(listener, state).await.map_err(io);
    }
    let spec = job(cli.command)?;
    let base = match cli.server {
        Some(url) => url,
        None => {
            let (addr, _) = droplab_service::spawn(SocketAddr::from(([127, 0, 0, 1], 0))).await.map_err(io)?;
            format!("http://{addr}")
        }
    };
    let result = Client::new(base).run(&spec).await.map_err(|e| e.body())?;
    let text = serde_json::to_string_pretty(&result).map_err(|e| ErrorBody { code: "json".into(), message: e.to_string() })?;
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let detail = e.render().to_string();
            let message = detail.trim().trim_start_matches("error: ").to_string();
            return fail(&ErrorBody { code: "usage".into(), message });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return fail(&ErrorBody { code: "io".into(), message: e.to_string() }),
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(body) => fail(&body),
    }
}
