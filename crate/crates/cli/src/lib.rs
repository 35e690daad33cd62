//! `servobot` command line: protocol runs, formulation comparison, the
//! annotation server and report replay.

pub mod server;

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use servobot::bench::{
    emit_report, run_protocol, run_protocol_with, Format, Protocol, ProtocolError, RunOptions, RunReport,
    ScenarioConfig, ScenarioError,
};
use servobot::jacobian::{compare_formulations, LearningSetup};
use servobot::par::Execution;
use servobot::tfod::{HumanAnnotator, HumanQueue, TrialStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_SCENARIO: i32 = 2;
pub const EXIT_ACCEPTANCE: i32 = 3;

/// How long a human-mode trial waits for one annotation.
const HUMAN_WAIT: Duration = Duration::from_secs(3600);

#[derive(Debug, Parser)]
#[command(name = "servobot", version, about = "Detection-only mobile manipulation in simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnnotatorArg {
    Oracle,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ProtocolArg {
    VsLearning,
    VosvsBench,
    PickPlace,
    PickPlaceClutter,
    DynamicPlace,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::VsLearning => Protocol::VsLearning,
            ProtocolArg::VosvsBench => Protocol::VosvsBench,
            ProtocolArg::PickPlace => Protocol::PickPlace,
            ProtocolArg::PickPlaceClutter => Protocol::PickPlaceClutter,
            ProtocolArg::DynamicPlace => Protocol::DynamicPlace,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Scenario config (JSON).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Protocol to run when no scenario file is given.
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Write report files here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "json,csv")]
    pub format: Vec<FormatArg>,
    /// Run trials one after another.
    #[arg(long)]
    pub sequential: bool,
    /// Exit 3 when the run misses its acceptance checks.
    #[arg(long)]
    pub ci: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a protocol and write its report.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        annotator: Option<AnnotatorArg>,
        /// Annotation server port for the human annotator.
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Compare the Jacobian update formulations over seeded noisy trials.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Run with the human annotator behind the annotation API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Re-emit and check a saved report.json.
    Replay {
        report: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "json,csv")]
        format: Vec<FormatArg>,
        #[arg(long)]
        ci: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Scenario(String),
    Runtime(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Scenario(e.to_string())
    }
}

impl From<ProtocolError> for Failure {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Scenario(s) => Failure::Scenario(s.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn formats(f: &[FormatArg]) -> Vec<Format> {
    f.iter()
        .map(|f| match f {
            FormatArg::Json => Format::Json,
            FormatArg::Csv => Format::Csv,
        })
        .collect()
}

/// Scenario file (or bare protocol) with command-line overrides applied.
pub fn resolve_config(common: &Common, fallback: Option<Protocol>) -> Result<ScenarioConfig, ScenarioError> {
    let mut cfg = match (&common.scenario, common.protocol) {
        (Some(p), _) => ScenarioConfig::load(p).map_err(|e| match e {
            ScenarioError::Parse { line, column, message } => ScenarioError::Parse {
                line,
                column,
                message: format!("{}: {message}", p.display()),
            },
            other => other,
        })?,
        (None, Some(p)) => ScenarioConfig::new(p.into()),
        (None, None) => match fallback {
            Some(p) => ScenarioConfig::new(p),
            None => return Err(ScenarioError::Invalid("give --scenario or --protocol".into())),
        },
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.trials {
        if t == 0 {
            return Err(ScenarioError::Invalid("trials must be at least 1".into()));
        }
        cfg.trials = Some(t);
    }
    if common.sequential {
        cfg.execution = Execution::Sequential;
    }
    Ok(cfg)
}

fn summarize(r: &RunReport) {
    if let Some(l) = &r.learning {
        println!(
            "learning: converged {} after {} updates, dx/ds_x {:.4e} (analytic {:.4e}), dy/ds_y {:.4e} (analytic {:.4e})",
            l.session.converged,
            l.session.updates_used,
            l.session.lhat.get(0, 0),
            l.analytic.0,
            l.session.lhat.get(1, 1),
            l.analytic.1
        );
        println!("learning: {} clicks, {} Find examples", l.ledger.clicks, l.ledger.counters.find);
    }
    if let Some(c) = &r.comparison {
        print!("{}", c.to_csv());
    }
    for a in &r.arms {
        let g = a.rates.grasp.map(|g| format!(" grasp {g:.1}%")).unwrap_or_default();
        println!(
            "{}: {} objects, VS {:.1}% DE {:.1}%{g}, {:.2} examples per trial, {} placements, {:.1} picks per hour",
            a.name, a.rates.objects, a.rates.vs, a.rates.de, a.mean_examples, a.placements, a.picks_per_hour
        );
    }
}

fn finish(report: &RunReport, out_dir: Option<&Path>, fmt: &[FormatArg], ci: bool) -> Result<i32, Failure> {
    summarize(report);
    if let Some(dir) = out_dir {
        let files = emit_report(report, dir, &formats(fmt)).map_err(|e| Failure::Runtime(e.to_string()))?;
        log::info!("wrote {} files under {}", files.len(), dir.display());
    }
    if ci {
        let bad = report.acceptance_failures();
        if !bad.is_empty() {
            for b in &bad {
                eprintln!("acceptance: {b}");
            }
            return Ok(EXIT_ACCEPTANCE);
        }
    }
    Ok(EXIT_OK)
}

fn run_human(cfg: &ScenarioConfig, opts: &RunOptions, port: u16) -> Result<(RunReport, HumanQueue, tokio::runtime::Runtime), Failure> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    let listener = rt
        .block_on(tokio::net::TcpListener::bind(("0.0.0.0", port)))
        .map_err(|e| Failure::Runtime(format!("bind port {port}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?;
    let queue = HumanQueue::new();
    rt.spawn(server::serve(listener, queue.clone()));
    eprintln!("annotation API listening on http://{addr}/api");
    let mut annotator = HumanAnnotator {
        queue: queue.clone(),
        timeout: HUMAN_WAIT,
    };
    let report = run_protocol_with(cfg, &mut annotator, opts)?;
    let status = queue.status();
    queue.set_status(TrialStatus {
        phase: "done".into(),
        ..status
    });
    Ok((report, queue, rt))
}

fn options(out_dir: Option<&Path>) -> RunOptions {
    RunOptions {
        failure_dir: out_dir.map(|d| d.join("failures")),
    }
}

fn dispatch(cmd: Command) -> Result<i32, Failure> {
    match cmd {
        Command::Run {
            common,
            annotator,
            port,
        } => {
            let mut cfg = resolve_config(&common, None)?;
            if let Some(a) = annotator {
                cfg.annotator = match a {
                    AnnotatorArg::Oracle => servobot::bench::AnnotatorMode::Oracle,
                    AnnotatorArg::Human => servobot::bench::AnnotatorMode::Human,
                };
            }
            let opts = options(common.out_dir.as_deref());
            let report = match cfg.annotator {
                servobot::bench::AnnotatorMode::Oracle => run_protocol(&cfg, &opts)?,
                servobot::bench::AnnotatorMode::Human => run_human(&cfg, &opts, port)?.0,
            };
            finish(&report, common.out_dir.as_deref(), &common.format, common.ci)
        }
        Command::Compare { common } => {
            let mut cfg = resolve_config(&common, Some(Protocol::VsLearning))?;
            cfg.protocol = Protocol::VsLearning;
            let setup = LearningSetup::racquetball(cfg.learning_noise.unwrap_or_default());
            let mut report = RunReport::new(&cfg, Vec::new());
            report.comparison = Some(compare_formulations(&setup, cfg.trials(), cfg.seed, cfg.execution));
            finish(&report, common.out_dir.as_deref(), &common.format, common.ci)
        }
        Command::Serve { common, port } => {
            let cfg = resolve_config(&common, None)?;
            let opts = options(common.out_dir.as_deref());
            let (report, _queue, rt) = run_human(&cfg, &opts, port)?;
            let code = finish(&report, common.out_dir.as_deref(), &common.format, common.ci)?;
            eprintln!("run finished; still serving, interrupt to stop");
            rt.block_on(std::future::pending::<()>());
            Ok(code)
        }
        Command::Replay {
            report,
            out_dir,
            format,
            ci,
        } => {
            let text = std::fs::read_to_string(&report)
                .map_err(|_| Failure::Scenario(format!("missing file: {}", report.display())))?;
            let r = RunReport::from_json(&text).map_err(|e| {
                Failure::Scenario(format!("{}: line {}, column {}: {e}", report.display(), e.line(), e.column()))
            })?;
            finish(&r, out_dir.as_deref(), &format, ci)
        }
    }
}

/// Run a parsed command line and return the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Scenario(msg)) => {
            eprintln!("scenario error: {msg}");
            EXIT_SCENARIO
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}
