//! Error metrics, ECDF and the seeded Monte-Carlo experiment runner.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::NodeTable;
use crate::fusion::{estimate, instances, EstimationConfig, EstimationResult, FusionError};
use crate::geometry::{distance, Position};
use crate::log::{ChannelId, NodeId};
use crate::presets::{add_nlos_links, randomize_clocks, random_point, ClockSpread};
use crate::sim::{simulate, Scenario, SimError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty sample")]
    Empty,
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn position_error(est: &Position, truth: &Position) -> f64 {
    distance(est, truth)
}

/// Sorted `(value, i / n)` pairs.
pub fn ecdf(errors: &[f64]) -> Result<Vec<(f64, f64)>, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    Ok(v.into_iter().enumerate().map(|(i, x)| (x, (i + 1) as f64 / n)).collect())
}

/// Middle value; mean of the two middle values for even length.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Independent excess path on every link of some nodes, per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlosSpec {
    pub nodes: Vec<NodeId>,
    pub min_m: f64,
    pub max_m: f64,
}

/// Per-trial randomisation of a base scenario.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrialRandomization {
    /// Blind position drawn uniformly in this box.
    pub blind_box: Option<(Position, Position)>,
    /// Clock offsets, skews and noise drawn per node.
    pub clocks: Option<ClockSpread>,
    pub nlos: Option<NlosSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub estimation: EstimationConfig,
    /// Channels used for estimation; all simulated channels when `None`.
    pub channels: Option<Vec<ChannelId>>,
    pub randomization: TrialRandomization,
    pub trials: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(scenario: Scenario, estimation: EstimationConfig) -> Self {
        RunConfig {
            scenario,
            estimation,
            channels: None,
            randomization: TrialRandomization::default(),
            trials: 100,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.trials == 0 {
            return Err(EvalError::Config("need at least one trial".into()));
        }
        self.scenario.validate()?;
        self.estimation.slices.validate()?;
        self.estimation.prune.validate()?;
        self.estimation.solver.validate().map_err(FusionError::from)?;
        if let Some(ch) = &self.channels {
            if ch.is_empty() || ch.iter().any(|c| !self.scenario.channels.contains(c)) {
                return Err(EvalError::Config(format!(
                    "estimation channels {ch:?} not a nonempty subset of {:?}",
                    self.scenario.channels
                )));
            }
        }
        if let Some(n) = &self.randomization.nlos {
            if !(0.0 <= n.min_m && n.min_m <= n.max_m) {
                return Err(EvalError::Config("nlos range must satisfy 0 <= min <= max".into()));
            }
        }
        Ok(())
    }

    /// Scenario of trial `trial`: the base scenario with this trial's draws.
    pub fn trial_scenario(&self, trial: usize) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(trial as u64));
        let mut s = self.scenario.clone();
        let r = &self.randomization;
        if let Some((lo, hi)) = r.blind_box {
            let p = random_point(lo, hi, &mut rng);
            if let Some(b) = s.nodes.iter_mut().find(|n| n.role == crate::sim::NodeRole::Blind) {
                b.position = p;
            }
        }
        if let Some(spread) = &r.clocks {
            randomize_clocks(&mut s, spread, &mut rng);
        }
        if let Some(n) = &r.nlos {
            add_nlos_links(&mut s, &n.nodes, n.min_m, n.max_m, &mut rng);
        }
        s.seed = rng.random();
        s
    }
}

/// Simulates `scenario` and estimates the blind position from its log.
pub fn estimate_scenario(
    scenario: &Scenario,
    cfg: &EstimationConfig,
    channels: Option<&[ChannelId]>,
) -> Result<EstimationResult, EvalError> {
    let out = simulate(scenario)?;
    let nodes = NodeTable::from_scenario(scenario);
    let log = match scenario.wrap_mode {
        crate::sim::WrapMode::None => out.log,
        crate::sim::WrapMode::Bits32 => out
            .observed_log()
            .unwrap_timestamps()
            .map_err(|e| FusionError::Data(e.into()))?,
    };
    let channels = channels.unwrap_or(&scenario.channels);
    let inst = instances(&log, &nodes, channels)?;
    Ok(estimate(&inst, cfg)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub truth: Position,
    pub estimate: Option<Position>,
    pub error_m: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub trials: usize,
    pub failed: usize,
    pub median_m: Option<f64>,
    pub mean_m: Option<f64>,
    pub max_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub trials: Vec<TrialRecord>,
}

impl ErrorReport {
    /// Errors of the successful trials, in trial order.
    pub fn errors(&self) -> Vec<f64> {
        self.trials.iter().filter_map(|t| t.error_m).collect()
    }

    pub fn failed(&self) -> usize {
        self.trials.iter().filter(|t| t.error_m.is_none()).count()
    }

    pub fn median(&self) -> Option<f64> {
        median(&self.errors())
    }

    pub fn max(&self) -> Option<f64> {
        self.errors().into_iter().reduce(f64::max)
    }

    pub fn summary(&self) -> ReportSummary {
        let e = self.errors();
        ReportSummary {
            trials: self.trials.len(),
            failed: self.failed(),
            median_m: median(&e),
            mean_m: (!e.is_empty()).then(|| e.iter().sum::<f64>() / e.len() as f64),
            max_m: e.iter().copied().reduce(f64::max),
        }
    }

    /// `trial,true_x,true_y,est_x,est_y,err_m`; estimate fields are empty for
    /// failed trials.
    pub fn write_trials_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["trial", "true_x", "true_y", "est_x", "est_y", "err_m"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.trials {
            wr.write_record([
                t.trial.to_string(),
                t.truth.x.to_string(),
                t.truth.y.to_string(),
                opt(t.estimate.map(|p| p.x)),
                opt(t.estimate.map(|p| p.y)),
                opt(t.error_m),
            ])?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// `err_m,cum_frac` over successful trials.
    pub fn write_ecdf_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["err_m", "cum_frac"])?;
        let e = self.errors();
        if !e.is_empty() {
            for (v, f) in ecdf(&e)? {
                wr.write_record([v.to_string(), f.to_string()])?;
            }
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Writes `trials.csv`, `ecdf.csv` and `summary.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), EvalError> {
        let io_err = |p: &Path| {
            let path = p.display().to_string();
            move |source| EvalError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("trials.csv");
        self.write_trials_csv(fs::File::create(&p).map_err(io_err(&p))?)?;
        let p = dir.join("ecdf.csv");
        self.write_ecdf_csv(fs::File::create(&p).map_err(io_err(&p))?)?;
        let p = dir.join("summary.json");
        let mut text = serde_json::to_string_pretty(&self.summary())?;
        text.push('\n');
        fs::write(&p, text).map_err(io_err(&p))?;
        Ok(())
    }
}

/// Runs `config.trials` seeded trials. Trials run in parallel; the report is
/// ordered by trial index. A failed trial is recorded, not fatal.
pub fn run_experiment(config: &RunConfig) -> Result<ErrorReport, EvalError> {
    config.validate()?;
    let trials = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let s = config.trial_scenario(i);
            let truth = s.blind().map(|b| b.position).unwrap_or_default();
            match estimate_scenario(&s, &config.estimation, config.channels.as_deref()) {
                Ok(r) => TrialRecord {
                    trial: i,
                    truth,
                    estimate: Some(r.position),
                    error_m: Some(position_error(&r.position, &truth)),
                    failure: None,
                },
                Err(e) => {
                    log::warn!("trial {i}: {e}");
                    TrialRecord {
                        trial: i,
                        truth,
                        estimate: None,
                        error_m: None,
                        failure: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    Ok(ErrorReport { trials })
}

/// Run parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    BetaSpreadPpm,
    AlphaSpread,
    PacketsPerChannel,
    BlockLen,
    LminFrac,
    NlosMax,
    DropProbability,
}

impl SweepParam {
    pub fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<(), EvalError> {
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(EvalError::Config(format!("{value} is not a positive integer")))
            }
        };
        match self {
            SweepParam::BetaSpreadPpm => cfg.randomization.clocks.get_or_insert_with(Default::default).beta_ppm = value,
            SweepParam::AlphaSpread => cfg.randomization.clocks.get_or_insert_with(Default::default).alpha_s = value,
            SweepParam::PacketsPerChannel => cfg.scenario.schedule.packets_per_channel = count()?,
            SweepParam::BlockLen => cfg.estimation.slices.block_len = Some(count()?),
            SweepParam::LminFrac => cfg.estimation.prune.l_min_fraction = value,
            SweepParam::NlosMax => match &mut cfg.randomization.nlos {
                Some(n) => n.max_m = value,
                None => return Err(EvalError::Config("nlos-max sweep needs NLOS nodes".into())),
            },
            SweepParam::DropProbability => cfg.scenario.drop_probability = value,
        }
        Ok(())
    }
}

/// One report per value of `param`, in the given order.
pub fn run_sweep(base: &RunConfig, param: SweepParam, values: &[f64]) -> Result<Vec<(f64, ErrorReport)>, EvalError> {
    values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            param.apply(&mut cfg, v)?;
            Ok((v, run_experiment(&cfg)?))
        })
        .collect()
}
