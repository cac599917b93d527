use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dtdoa::dataio::{load, DataError, NodeTable};
use dtdoa::eval::{run_experiment, run_sweep, EvalError, NlosSpec, RunConfig, SweepParam, TrialRandomization};
use dtdoa::fusion::{estimate, instances, EstimationConfig, FusionError, Method, PruneConfig, RefAnchorStrategy, SliceSpec};
use dtdoa::geometry::Position;
use dtdoa::log::{ChannelId, NodeId};
use dtdoa::presets::ClockSpread;
use dtdoa::ranging::RangingOptions;
use dtdoa::sim::{simulate, Scenario, SimError};
use dtdoa::solvers::{SolverConfig, SolverError, SolverMethod};

/// Locate a transmitter from timestamps of unsynchronised anchors.
#[derive(Debug, Parser)]
#[command(name = "dtdoa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario and write its timestamp log and node table.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Timestamp log CSV to write.
        #[arg(long)]
        log: PathBuf,
        /// Node table JSON to write.
        #[arg(long)]
        nodes: Option<PathBuf>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the blind position from a node table and a timestamp log.
    Estimate {
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        est: EstimationArgs,
        /// Also write the full result as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run seeded Monte-Carlo trials and write an error report.
    Eval {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        est: EstimationArgs,
        #[command(flatten)]
        trials: TrialArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Repeat `eval` for each value of one parameter.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        param: SweepArg,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        est: EstimationArgs,
        #[command(flatten)]
        trials: TrialArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Oneshot,
    Snp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SolverArg {
    Hyp,
    Ils,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RefArg {
    Near,
    Far,
    Mean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepArg {
    BetaSpreadPpm,
    AlphaSpread,
    PacketsPerChannel,
    BlockLen,
    LminFrac,
    NlosMax,
    DropProbability,
}

#[derive(Debug, Args)]
struct EstimationArgs {
    #[arg(long, value_enum, default_value = "oneshot")]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "ils")]
    solver: SolverArg,
    #[arg(long = "ref", value_enum, default_value = "near")]
    reference: RefArg,
    /// Packet pairs per temporal S&P block; 0 keeps channels whole.
    #[arg(long, default_value_t = 20)]
    blocks: usize,
    /// Fraction of S&P points kept by pruning.
    #[arg(long, default_value_t = 0.5)]
    lmin_frac: f64,
    /// Channels used for estimation (default: all).
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<ChannelId>>,
    /// Do not split S&P slices by anchor subset.
    #[arg(long)]
    no_spatial: bool,
    /// Do not split S&P slices by channel.
    #[arg(long)]
    no_frequency: bool,
    /// Force the inter-anchor frequency ratio to one.
    #[arg(long)]
    no_skew_correction: bool,
}

impl EstimationArgs {
    fn config(&self) -> EstimationConfig {
        EstimationConfig {
            method: match self.method {
                MethodArg::Oneshot => Method::OneShot,
                MethodArg::Snp => Method::Snp,
            },
            strategy: match self.reference {
                RefArg::Near => RefAnchorStrategy::Near,
                RefArg::Far => RefAnchorStrategy::Far,
                RefArg::Mean => RefAnchorStrategy::Mean,
            },
            solver: SolverConfig::with_method(match self.solver {
                SolverArg::Hyp => SolverMethod::Hyp,
                SolverArg::Ils => SolverMethod::Ils,
            }),
            slices: SliceSpec {
                block_len: (self.blocks > 0).then_some(self.blocks),
                spatial: !self.no_spatial,
                frequency: !self.no_frequency,
            },
            prune: PruneConfig {
                l_min_fraction: self.lmin_frac,
            },
            ranging: RangingOptions {
                skew_correction: !self.no_skew_correction,
            },
        }
    }
}

#[derive(Debug, Args)]
struct TrialArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw the blind position per trial in `xmin,ymin,xmax,ymax`.
    #[arg(long, value_delimiter = ',')]
    blind_box: Option<Vec<f64>>,
    /// Draw clock offsets per trial in +-this many seconds.
    #[arg(long)]
    alpha_spread: Option<f64>,
    /// Draw clock skews per trial in +-this many ppm.
    #[arg(long)]
    beta_spread_ppm: Option<f64>,
    /// Nodes whose links get a per-trial, per-channel excess path.
    #[arg(long, value_delimiter = ',')]
    nlos_nodes: Option<Vec<u32>>,
    /// Excess path range `min,max` in meters.
    #[arg(long, value_delimiter = ',', default_value = "5,30")]
    nlos_range: Vec<f64>,
}

impl TrialArgs {
    fn randomization(&self) -> Result<TrialRandomization, Failure> {
        if self.blind_box.as_ref().is_some_and(|b| b.len() != 4) {
            return Err(Failure::Usage("--blind-box takes xmin,ymin,xmax,ymax".into()));
        }
        if self.nlos_range.len() != 2 {
            return Err(Failure::Usage("--nlos-range takes min,max".into()));
        }
        let clocks = (self.alpha_spread.is_some() || self.beta_spread_ppm.is_some()).then(|| {
            let d = ClockSpread::default();
            ClockSpread {
                alpha_s: self.alpha_spread.unwrap_or(d.alpha_s),
                beta_ppm: self.beta_spread_ppm.unwrap_or(d.beta_ppm),
                noise: d.noise,
            }
        });
        Ok(TrialRandomization {
            blind_box: self
                .blind_box
                .as_ref()
                .map(|b| (Position::new(b[0], b[1]), Position::new(b[2], b[3]))),
            clocks,
            nlos: self.nlos_nodes.as_ref().map(|n| NlosSpec {
                nodes: n.iter().copied().map(NodeId).collect(),
                min_m: self.nlos_range[0],
                max_m: self.nlos_range[1],
            }),
        })
    }
}

/// Error classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Estimation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Estimation(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Estimation(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<FusionError> for Failure {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Data(d) => d.into(),
            FusionError::Config(_) | FusionError::Solver(SolverError::InvalidConfig) => Failure::Usage(e.to_string()),
            other => Failure::Estimation(other.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) | EvalError::Sim(_) => Failure::Usage(e.to_string()),
            EvalError::Fusion(f) => f.into(),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn read_scenario(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let s: Scenario = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    s.validate()?;
    Ok(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn run_config(scenario: &Path, est: &EstimationArgs, trials: &TrialArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::new(read_scenario(scenario)?, est.config());
    cfg.channels = est.channels.clone();
    cfg.randomization = trials.randomization()?;
    cfg.trials = trials.trials;
    cfg.seed = trials.seed;
    Ok(cfg)
}

fn print_summary(label: &str, report: &dtdoa::eval::ErrorReport) {
    let s = report.summary();
    let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    println!(
        "{label}trials={} failed={} median_m={} max_m={}",
        s.trials,
        s.failed,
        f(s.median_m),
        f(s.max_m)
    );
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { scenario, log, nodes, seed } => {
            let mut s = read_scenario(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let out = simulate(&s)?;
            out.observed_log()
                .write_csv(create(&log)?)
                .map_err(|e| Failure::Data(e.to_string()))?;
            if let Some(path) = nodes {
                serde_json::to_writer_pretty(create(&path)?, &NodeTable::from_scenario(&s))
                    .map_err(|e| Failure::Data(e.to_string()))?;
            }
            println!("wrote {} timestamps", out.log.len());
        }
        Command::Estimate { nodes, log, est, out } => {
            let cfg = est.config();
            let (table, log) = load(&nodes, &log)?;
            let channels = est.channels.clone().unwrap_or_else(|| log.channels());
            let inst = instances(&log, &table, &channels)?;
            let result = estimate(&inst, &cfg)?;
            println!("{} {}", result.position.x, result.position.y);
            if let Some(truth) = table.blind_truth() {
                log::info!("error vs. table position: {:.3} m", dtdoa::eval::position_error(&result.position, &truth));
            }
            if let Some(path) = out {
                serde_json::to_writer_pretty(create(&path)?, &result).map_err(|e| Failure::Data(e.to_string()))?;
            }
        }
        Command::Eval { scenario, est, trials, out_dir } => {
            let cfg = run_config(&scenario, &est, &trials)?;
            let report = run_experiment(&cfg)?;
            report.write_dir(&out_dir)?;
            print_summary("", &report);
        }
        Command::Sweep {
            scenario,
            param,
            values,
            est,
            trials,
            out_dir,
        } => {
            let cfg = run_config(&scenario, &est, &trials)?;
            let param = match param {
                SweepArg::BetaSpreadPpm => SweepParam::BetaSpreadPpm,
                SweepArg::AlphaSpread => SweepParam::AlphaSpread,
                SweepArg::PacketsPerChannel => SweepParam::PacketsPerChannel,
                SweepArg::BlockLen => SweepParam::BlockLen,
                SweepArg::LminFrac => SweepParam::LminFrac,
                SweepArg::NlosMax => SweepParam::NlosMax,
                SweepArg::DropProbability => SweepParam::DropProbability,
            };
            for (v, report) in run_sweep(&cfg, param, &values)? {
                report.write_dir(&out_dir.join(format!("value-{v}")))?;
                print_summary(&format!("value={v} "), &report);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
