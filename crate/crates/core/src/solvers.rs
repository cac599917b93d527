//! Position solvers for a set of differential ranges.
//!
//! Both solvers run damped Gauss-Newton iterations:
//!
//! * `Hyp` fits `|p - p_k| - |p - p_ref| = delta_k` directly;
//! * `Ils` treats the reference distance as an extra unknown `d` and fits
//!   pseudo-ranges `|p - p_k| = d + delta_k`, including `delta_ref = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{distance, Position};
use crate::ranging::DifferentialRangeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Hyp,
    Ils,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    AnchorCentroid,
    /// Runs from the anchor centroid and, with four or more anchors, from the
    /// closed-form linearised solution; keeps the better result.
    Multistart,
    Explicit(Position),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub max_iterations: usize,
    /// Meters; iteration stops once an accepted step is shorter.
    pub step_tolerance: f64,
    pub initial_guess: InitialGuess,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: SolverMethod::Ils,
            max_iterations: 50,
            step_tolerance: 1e-6,
            initial_guess: InitialGuess::Multistart,
        }
    }
}

impl SolverConfig {
    pub fn with_method(method: SolverMethod) -> Self {
        SolverConfig {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.max_iterations == 0 || !(self.step_tolerance > 0.0) {
            return Err(SolverError::InvalidConfig);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveOutcome {
    pub position: Position,
    pub converged: bool,
    pub iterations: usize,
    /// Euclidean norm of the residual vector, meters.
    pub residual_norm: f64,
    /// Estimated distance to the reference anchor (`Ils` only).
    pub delta: Option<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("need at least 3 anchors, got {0}")]
    TooFewAnchors(usize),
    #[error("anchors are collinear")]
    CollinearAnchors,
    #[error("singular jacobian at iteration {0}")]
    SingularJacobian(usize),
    #[error("non-finite input or iterate")]
    NonFinite,
    #[error("solver configuration needs a positive tolerance and iteration cap")]
    InvalidConfig,
}

const MAX_HALVINGS: usize = 20;
const SINGULAR_RATIO: f64 = 1e-10;
const ANCHOR_NUDGE_M: f64 = 1e-6;

struct Problem {
    /// Reference anchor first.
    anchors: Vec<Position>,
    /// `deltas[0] == 0`.
    deltas: Vec<f64>,
    centroid: Position,
}

impl Problem {
    fn new(ranges: &DifferentialRangeSet) -> Result<Self, SolverError> {
        let anchors: Vec<Position> = ranges.anchor_positions().collect();
        if anchors.len() < 3 {
            return Err(SolverError::TooFewAnchors(anchors.len()));
        }
        let deltas: Vec<f64> = std::iter::once(0.0)
            .chain(ranges.entries.iter().map(|e| e.delta_m))
            .collect();
        let finite = anchors.iter().all(|p| p.x.is_finite() && p.y.is_finite())
            && deltas.iter().all(|d| d.is_finite());
        if !finite {
            return Err(SolverError::NonFinite);
        }
        if collinear(&anchors) {
            return Err(SolverError::CollinearAnchors);
        }
        let centroid = Position::mean(&anchors).expect("nonempty");
        Ok(Problem {
            anchors,
            deltas,
            centroid,
        })
    }

    /// Moves a point sitting on an anchor slightly towards the centroid,
    /// where the distance gradients are defined.
    fn off_anchor(&self, p: Position) -> Position {
        if !self.anchors.iter().any(|a| distance(a, &p) < 1e-12) {
            return p;
        }
        let dir = self.centroid.sub(&p);
        let n = dir.norm();
        if n < 1e-12 {
            p.add(&Position::new(ANCHOR_NUDGE_M, 0.0))
        } else {
            p.add(&dir.scale(ANCHOR_NUDGE_M / n))
        }
    }

    /// Unit vector from anchor `k` to `p`.
    fn unit(&self, p: &Position, k: usize) -> Position {
        let d = p.sub(&self.anchors[k]);
        d.scale(1.0 / d.norm())
    }
}

fn collinear(anchors: &[Position]) -> bool {
    let scale = anchors
        .iter()
        .flat_map(|a| anchors.iter().map(move |b| distance(a, b)))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return true;
    }
    let a = anchors[0];
    let max_area = anchors
        .iter()
        .flat_map(|b| anchors.iter().map(move |c| (b, c)))
        .map(|(b, c)| {
            let u = b.sub(&a);
            let v = c.sub(&a);
            (u.x * v.y - u.y * v.x).abs()
        })
        .fold(0.0, f64::max);
    max_area < 1e-9 * scale * scale
}

trait Model {
    fn dim(&self) -> usize;
    fn position(&self, x: &DVector<f64>) -> Position;
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn with_position(&self, x: &DVector<f64>, p: Position) -> DVector<f64>;
}

struct HypModel<'a>(&'a Problem);

impl Model for HypModel<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn position(&self, x: &DVector<f64>) -> Position {
        Position::new(x[0], x[1])
    }

    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = self.position(x);
        let pr = self.0;
        let d1 = distance(&p, &pr.anchors[0]);
        DVector::from_iterator(
            pr.anchors.len() - 1,
            (1..pr.anchors.len()).map(|k| distance(&p, &pr.anchors[k]) - d1 - pr.deltas[k]),
        )
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let p = self.position(x);
        let pr = self.0;
        let u1 = pr.unit(&p, 0);
        let n = pr.anchors.len() - 1;
        DMatrix::from_fn(n, 2, |r, c| {
            let uk = pr.unit(&p, r + 1);
            if c == 0 {
                uk.x - u1.x
            } else {
                uk.y - u1.y
            }
        })
    }

    fn with_position(&self, _x: &DVector<f64>, p: Position) -> DVector<f64> {
        DVector::from_vec(vec![p.x, p.y])
    }
}

struct IlsModel<'a>(&'a Problem);

impl Model for IlsModel<'_> {
    fn dim(&self) -> usize {
        3
    }

    fn position(&self, x: &DVector<f64>) -> Position {
        Position::new(x[0], x[1])
    }

    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = self.position(x);
        let pr = self.0;
        DVector::from_iterator(
            pr.anchors.len(),
            (0..pr.anchors.len()).map(|k| distance(&p, &pr.anchors[k]) - x[2] - pr.deltas[k]),
        )
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let p = self.position(x);
        let pr = self.0;
        let units: Vec<Position> = (0..pr.anchors.len()).map(|k| pr.unit(&p, k)).collect();
        DMatrix::from_fn(pr.anchors.len(), 3, |r, c| match c {
            0 => units[r].x,
            1 => units[r].y,
            _ => -1.0,
        })
    }

    fn with_position(&self, x: &DVector<f64>, p: Position) -> DVector<f64> {
        DVector::from_vec(vec![p.x, p.y, x[2]])
    }
}

fn gauss_newton<M: Model>(
    model: &M,
    problem: &Problem,
    mut x: DVector<f64>,
    cfg: &SolverConfig,
) -> Result<Run, SolverError> {
    let cost = |x: &DVector<f64>| model.residuals(x).norm_squared();
    for it in 1..=cfg.max_iterations {
        let p = model.position(&x);
        let nudged = problem.off_anchor(p);
        if nudged != p {
            x = model.with_position(&x, nudged);
        }
        let r = model.residuals(&x);
        let j = model.jacobian(&x);
        let svd = j.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smax > 0.0) || smin / smax < SINGULAR_RATIO || svd.singular_values.len() < model.dim() {
            return Err(SolverError::SingularJacobian(it));
        }
        let step = svd
            .solve(&(-&r), 0.0)
            .map_err(|_| SolverError::SingularJacobian(it))?;
        if !step.iter().all(|v| v.is_finite()) {
            return Err(SolverError::NonFinite);
        }
        if step.norm() < cfg.step_tolerance {
            // below the resolution of cost comparisons; the linear solve is still exact
            return Ok((x + step, true, it));
        }
        let c0 = r.norm_squared();
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &x + &step * scale;
            if cost(&cand) <= c0 {
                accepted = Some(cand);
                break;
            }
            scale *= 0.5;
        }
        let Some(next) = accepted else {
            return Ok((x, false, it));
        };
        let moved = (&next - &x).norm();
        x = next;
        if moved < cfg.step_tolerance {
            return Ok((x, true, it));
        }
    }
    Ok((x, false, cfg.max_iterations))
}

/// Least-squares solution of the pseudo-range equations after squaring,
/// `|p|^2 - d^2 - 2 p_k.p - 2 delta_k d = delta_k^2 - |p_k|^2`, linear in
/// `(p, d, |p|^2 - d^2)`. Coordinates are centred on the anchor centroid.
fn linearised_start(problem: &Problem) -> Option<Position> {
    let n = problem.anchors.len();
    if n < 4 {
        return None;
    }
    let c = problem.centroid;
    let a = DMatrix::from_fn(n, 4, |r, col| {
        let q = problem.anchors[r].sub(&c);
        match col {
            0 => -2.0 * q.x,
            1 => -2.0 * q.y,
            2 => -2.0 * problem.deltas[r],
            _ => 1.0,
        }
    });
    let b = DVector::from_fn(n, |r, _| {
        let q = problem.anchors[r].sub(&c);
        problem.deltas[r].powi(2) - q.norm().powi(2)
    });
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) || svd.singular_values.min() / smax < SINGULAR_RATIO {
        return None;
    }
    let x = svd.solve(&b, 0.0).ok()?;
    let p = Position::new(x[0] + c.x, x[1] + c.y);
    (p.x.is_finite() && p.y.is_finite()).then_some(p)
}

fn starts(problem: &Problem, cfg: &SolverConfig) -> Vec<Position> {
    match cfg.initial_guess {
        InitialGuess::AnchorCentroid => vec![problem.centroid],
        InitialGuess::Multistart => std::iter::once(problem.centroid)
            .chain(linearised_start(problem))
            .collect(),
        InitialGuess::Explicit(p) => vec![p],
    }
}

/// Final iterate, converged flag and iteration count.
type Run = (DVector<f64>, bool, usize);

/// Runs Gauss-Newton from every start; converged runs beat unconverged ones,
/// then lower cost wins, then the earlier start.
fn best_run<M: Model>(
    model: &M,
    problem: &Problem,
    x0s: Vec<DVector<f64>>,
    cfg: &SolverConfig,
) -> Result<Run, SolverError> {
    let mut best: Option<(Run, f64)> = None;
    let mut first_err = None;
    for x0 in x0s {
        match gauss_newton(model, problem, x0, cfg) {
            Ok(run) => {
                let cost = model.residuals(&run.0).norm_squared();
                let better = match &best {
                    None => true,
                    Some(((_, conv, _), c)) => (run.1 && !conv) || (run.1 == *conv && cost < *c),
                };
                if better {
                    best = Some((run, cost));
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match (best, first_err) {
        (Some((run, _)), _) => Ok(run),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one start"),
    }
}

pub fn solve_hyp(ranges: &DifferentialRangeSet, cfg: &SolverConfig) -> Result<SolveOutcome, SolverError> {
    cfg.validate()?;
    let problem = Problem::new(ranges)?;
    let model = HypModel(&problem);
    let x0s = starts(&problem, cfg)
        .into_iter()
        .map(|p| DVector::from_vec(vec![p.x, p.y]))
        .collect();
    let (x, converged, iterations) = best_run(&model, &problem, x0s, cfg)?;
    Ok(SolveOutcome {
        position: model.position(&x),
        converged,
        iterations,
        residual_norm: model.residuals(&x).norm(),
        delta: None,
    })
}

pub fn solve_ils(ranges: &DifferentialRangeSet, cfg: &SolverConfig) -> Result<SolveOutcome, SolverError> {
    cfg.validate()?;
    let problem = Problem::new(ranges)?;
    if problem.anchors.len() == 3 {
        log::warn!("pseudo-range system with 3 anchors has no redundancy");
    }
    let model = IlsModel(&problem);
    let x0s = starts(&problem, cfg)
        .into_iter()
        .map(|p| DVector::from_vec(vec![p.x, p.y, distance(&p, &problem.anchors[0])]))
        .collect();
    let (x, converged, iterations) = best_run(&model, &problem, x0s, cfg)?;
    Ok(SolveOutcome {
        position: model.position(&x),
        converged,
        iterations,
        residual_norm: model.residuals(&x).norm(),
        delta: Some(x[2]),
    })
}

pub fn solve(ranges: &DifferentialRangeSet, cfg: &SolverConfig) -> Result<SolveOutcome, SolverError> {
    match cfg.method {
        SolverMethod::Hyp => solve_hyp(ranges, cfg),
        SolverMethod::Ils => solve_ils(ranges, cfg),
    }
}
