//! Loss assembly, the Adam optimizer, validation metrics, and the adaptive
//! training loops (joint and marginal) plus matched-budget baselines.
//!
//! All batch gradients go through fixed-size chunks folded in chunk order
//! (see [`crate::parallel`]), so a run is bit-reproducible for a given
//! config and seed regardless of the thread count.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use crate::autodiff::{Arith, Tape, TapeCtx};
use crate::error::{Error, Result};
use crate::flow::{train_flow, FlowModel};
use crate::nets::{Surrogate, SurrogateKind};
use crate::parallel::{self, POINT_CHUNK};
use crate::problems::{linspace, marginal_residual, residual_value, Problem, ValidationSet};
use crate::sampling::{
    cutoff_h, halton_sample, rar_select, refine_training_set, uniform_sample, Point, RefineMode,
    RngStream, TrainingSet,
};

/// Chunk size for marginal-mode parameter batches. Each chunk re-records
/// the trunk evaluations for the whole spatial grid, so chunks are kept
/// larger than the per-point default to bound that redundancy.
const XI_CHUNK: usize = 32;

// --- Adam --------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            what: "adam shapes",
            expected: params.len(),
            actual: grads.len().min(state.m.len()),
        });
    }
    state.t += 1;
    let b1t = 1.0 - hyper.beta1.powi(state.t as i32);
    let b2t = 1.0 - hyper.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * grads[i];
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * grads[i] * grads[i];
        let mh = state.m[i] / b1t;
        let vh = state.v[i] / b2t;
        params[i] -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
    }
    Ok(())
}

// --- configuration -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Joint,
    Marginal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    Uniform,
    Qrs,
    Rar,
}

fn default_margin() -> f64 {
    0.05
}

/// Knobs of one adaptive run. `n_e` epochs per stage are shared by the
/// surrogate and the flow; `n_r` is both the initial set size and the
/// number of new points per stage unless `n_init` overrides the former.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveConfig {
    pub n_adaptive: usize,
    pub n_e: usize,
    pub n_r: usize,
    pub m: usize,
    #[serde(default)]
    pub m_x: Option<usize>,
    #[serde(default)]
    pub n_init: Option<usize>,
    #[serde(default)]
    pub n_b: usize,
    #[serde(default)]
    pub gamma: f64,
    pub lr: f64,
    pub seed: u64,
    pub mode: Mode,
    pub refine_mode: RefineMode,
    #[serde(default = "Baseline::none")]
    pub baseline: Baseline,
    #[serde(default = "default_margin")]
    pub box_margin: f64,
    /// Disable per-batch self-normalization of the cross-entropy weights.
    #[serde(default)]
    pub raw_weights: bool,
}

impl Baseline {
    fn none() -> Baseline {
        Baseline::None
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 4] = [
            ("n_adaptive", self.n_adaptive),
            ("n_e", self.n_e),
            ("n_r", self.n_r),
            ("m", self.m),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if let Some(n) = self.n_init {
            if n == 0 {
                return Err(Error::InvalidConfig("n_init must be positive".into()));
            }
        }
        if self.mode == Mode::Marginal && self.m_x.map_or(true, |m| m == 0) {
            return Err(Error::InvalidConfig("marginal mode requires a positive m_x".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("gamma must be nonnegative".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if !(self.box_margin > 0.0) {
            return Err(Error::InvalidConfig("box_margin must be positive".into()));
        }
        Ok(())
    }

    pub fn initial_set_size(&self) -> usize {
        self.n_init.unwrap_or(self.n_r)
    }
}

// RNG stream ids, offset by stage where applicable.
const STREAM_INIT_SET: u64 = 0;
const STREAM_SHUFFLE: u64 = 1000;
const STREAM_FLOW: u64 = 2000;
const STREAM_REFINE: u64 = 3000;
const STREAM_POOL: u64 = 4000;
const STREAM_BOUNDARY: u64 = 5000;

// --- run record ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Surrogate,
    Flow,
    StageVal,
    Refine,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Surrogate => "surrogate",
            Phase::Flow => "flow",
            Phase::StageVal => "stage_val",
            Phase::Refine => "refine",
        }
    }
}

/// One metrics row. For `refine` rows the loss column carries the sampling
/// acceptance rate.
#[derive(Debug, Clone)]
pub struct RecordRow {
    pub stage: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub loss: Option<f64>,
    pub val_mse: Option<f64>,
    pub val_rel_l2: Option<f64>,
    pub n_points: usize,
    pub wall_ms: u64,
}

/// Per-stage, per-epoch metrics of one run.
#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub rows: Vec<RecordRow>,
}

/// Wall-clock measurement is opt-in (`DAS2_TIMING=1`) so that exported
/// metrics are byte-identical across repeated runs by default.
fn timing_enabled() -> bool {
    static ON: OnceLock<bool> = OnceLock::new();
    *ON.get_or_init(|| std::env::var("DAS2_TIMING").map_or(false, |v| v == "1"))
}

struct Timer(Option<Instant>);

impl Timer {
    fn start() -> Timer {
        Timer(timing_enabled().then(Instant::now))
    }
    fn ms(&self) -> u64 {
        self.0.map_or(0, |t| t.elapsed().as_millis() as u64)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

impl RunRecord {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "stage,epoch,phase,loss,val_mse,val_rel_l2,n_points,wall_ms")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.stage,
                r.epoch,
                r.phase.as_str(),
                fmt_opt(r.loss),
                fmt_opt(r.val_mse),
                fmt_opt(r.val_rel_l2),
                r.n_points,
                r.wall_ms
            )?;
        }
        Ok(())
    }

    pub fn count_phase(&self, phase: Phase) -> usize {
        self.rows.iter().filter(|r| r.phase == phase).count()
    }

    /// Full-set validation metrics recorded at the end of each stage.
    pub fn stage_val_rows(&self) -> Vec<&RecordRow> {
        self.rows.iter().filter(|r| r.phase == Phase::StageVal).collect()
    }
}

// --- losses -------------------------------------------------------------------

/// Record the empirical loss
/// `(1/N) sum_i w_i r^2(p_i) + gamma (1/N_b) sum_j b^2(q_j)` on a single
/// tape and return the loss node.
pub fn record_empirical_loss<P: Problem>(
    net: &Surrogate,
    problem: &P,
    points: &[Point],
    weights: Option<&[f64]>,
    boundary: &[Point],
    gamma: f64,
) -> Result<(Tape, crate::autodiff::NodeId)> {
    if points.is_empty() {
        return Err(Error::EmptyInput { what: "loss batch" });
    }
    let mut tape = Tape::new(&net.params);
    let mut terms = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let mut ctx = TapeCtx::new(&mut tape);
        let r = problem.residual_with(net, &mut ctx, &p.coords)?;
        let r2 = tape.square(r);
        let term = match weights {
            Some(w) => {
                let c = tape.constant(w[i]);
                tape.mul(c, r2)
            }
            None => r2,
        };
        terms.push(term);
    }
    let s = tape.sum(&terms);
    let inv_n = tape.constant(1.0 / points.len() as f64);
    let mut loss = tape.mul(inv_n, s);
    if gamma > 0.0 && !boundary.is_empty() {
        let mut bterms = Vec::with_capacity(boundary.len());
        for q in boundary {
            let mut ctx = TapeCtx::new(&mut tape);
            let b = problem.boundary_residual_with(net, &mut ctx, &q.coords)?;
            bterms.push(tape.square(b));
        }
        let bs = tape.sum(&bterms);
        let scale = tape.constant(gamma / boundary.len() as f64);
        let bl = tape.mul(scale, bs);
        loss = tape.add(loss, bl);
    }
    Ok((tape, loss))
}

/// Empirical loss value and parameter gradient, computed over fixed-size
/// point chunks folded in order.
pub fn empirical_loss_grad<P: Problem>(
    net: &Surrogate,
    problem: &P,
    points: &[&Point],
    weights: Option<&[f64]>,
    boundary: &[Point],
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    if points.is_empty() {
        return Err(Error::EmptyInput { what: "loss batch" });
    }
    let n = points.len();
    let idx: Vec<usize> = (0..n).collect();
    let chunks = parallel::chunked_map(&idx, POINT_CHUNK, |_, ids| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new(&net.params);
        let mut terms = Vec::with_capacity(ids.len());
        for &i in ids {
            let mut ctx = TapeCtx::new(&mut tape);
            let r = problem.residual_with(net, &mut ctx, &points[i].coords)?;
            let r2 = tape.square(r);
            let term = match weights {
                Some(w) => {
                    let c = tape.constant(w[i]);
                    tape.mul(c, r2)
                }
                None => r2,
            };
            terms.push(term);
        }
        let s = tape.sum(&terms);
        let grad = tape.grad_params(s)?;
        Ok((tape.value(s), grad))
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.params.len()];
    for c in chunks {
        let (l, g) = c?;
        loss += l;
        for (a, v) in grad.iter_mut().zip(g) {
            *a += v;
        }
    }
    let inv_n = 1.0 / n as f64;
    loss *= inv_n;
    grad.iter_mut().for_each(|g| *g *= inv_n);

    if gamma > 0.0 && !boundary.is_empty() {
        let mut tape = Tape::new(&net.params);
        let mut bterms = Vec::with_capacity(boundary.len());
        for q in boundary {
            let mut ctx = TapeCtx::new(&mut tape);
            let b = problem.boundary_residual_with(net, &mut ctx, &q.coords)?;
            bterms.push(tape.square(b));
        }
        let bs = tape.sum(&bterms);
        let bg = tape.grad_params(bs)?;
        let scale = gamma / boundary.len() as f64;
        loss += scale * tape.value(bs);
        for (a, v) in grad.iter_mut().zip(bg) {
            *a += scale * v;
        }
    }
    Ok((loss, grad))
}

/// Record the marginal loss `(1/N) sum_i w_i rtilde^2(xi_i)` with
/// `rtilde^2` the squared-residual mean over the fixed spatial grid, on a
/// single tape.
pub fn record_marginal_loss<P: Problem>(
    net: &Surrogate,
    problem: &P,
    xi_points: &[Point],
    x_grid: &[f64],
) -> Result<(Tape, crate::autodiff::NodeId)> {
    if xi_points.is_empty() {
        return Err(Error::EmptyInput { what: "parameter batch" });
    }
    if x_grid.is_empty() {
        return Err(Error::EmptyInput { what: "spatial grid" });
    }
    let mut tape = Tape::new(&net.params);
    let mut outer = Vec::with_capacity(xi_points.len());
    let mut coords = Vec::new();
    for xi in xi_points {
        let mut inner = Vec::with_capacity(x_grid.len());
        for &x in x_grid {
            coords.clear();
            coords.push(x);
            coords.extend_from_slice(&xi.coords);
            let mut ctx = TapeCtx::new(&mut tape);
            let r = problem.residual_with(net, &mut ctx, &coords)?;
            inner.push(tape.square(r));
        }
        let s = tape.sum(&inner);
        let inv = tape.constant(1.0 / x_grid.len() as f64);
        outer.push(tape.mul(inv, s));
    }
    let s = tape.sum(&outer);
    let inv_n = tape.constant(1.0 / xi_points.len() as f64);
    let loss = tape.mul(inv_n, s);
    Ok((tape, loss))
}

/// Marginal loss value and gradient over chunks of parameter points.
///
/// For branch–trunk surrogates on problems whose residual is
/// `du/dx - rhs(x, xi)`, the trunk (and its input derivative) is recorded
/// once per chunk for the whole spatial grid and shared across the chunk's
/// parameter points.
pub fn marginal_loss_grad<P: Problem>(
    net: &Surrogate,
    problem: &P,
    xi_points: &[&Point],
    weights: Option<&[f64]>,
    x_grid: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if xi_points.is_empty() {
        return Err(Error::EmptyInput { what: "parameter batch" });
    }
    if x_grid.is_empty() {
        return Err(Error::EmptyInput { what: "spatial grid" });
    }
    let fast = matches!(net.kind, SurrogateKind::BranchTrunk { .. })
        && problem.flux_rhs(x_grid[0], &xi_points[0].coords).is_some();
    let n = xi_points.len();
    let idx: Vec<usize> = (0..n).collect();
    let m_x_inv = 1.0 / x_grid.len() as f64;
    let chunks = parallel::chunked_map(&idx, XI_CHUNK, |_, ids| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new(&net.params);
        let mut outer = Vec::with_capacity(ids.len());
        if fast {
            // Shared trunk: record q(x) and the x-input nodes once.
            let mut ctx = TapeCtx::new(&mut tape);
            let x_nodes: Vec<_> = x_grid.iter().map(|&x| ctx.input(x, true)).collect();
            let trunk: Vec<Vec<_>> = x_nodes.iter().map(|&xn| net.trunk_with(&mut ctx, &[xn])).collect();
            for &i in ids {
                let xi = &xi_points[i].coords;
                let mut ctx = TapeCtx::new(&mut tape);
                let xi_nodes: Vec<_> = xi.iter().map(|&v| ctx.input(v, false)).collect();
                let t = net.branch_with(&mut ctx, &xi_nodes);
                let mut inner = Vec::with_capacity(x_grid.len());
                for (j, &x) in x_grid.iter().enumerate() {
                    let mut ctx = TapeCtx::new(&mut tape);
                    let raw = net.combine_with(&mut ctx, &trunk[j], &t);
                    let u = net.ansatz_with(&mut ctx, x_nodes[j], raw);
                    let du = tape.tangent_of(u)?;
                    let rhs = problem.flux_rhs(x, xi).expect("fast path requires rhs");
                    let c = tape.constant(rhs);
                    let r = tape.sub(du, c);
                    inner.push(tape.square(r));
                }
                let s = tape.sum(&inner);
                let inv = tape.constant(m_x_inv);
                let mut term = tape.mul(inv, s);
                if let Some(w) = weights {
                    let c = tape.constant(w[i]);
                    term = tape.mul(c, term);
                }
                outer.push(term);
            }
        } else {
            let mut coords = Vec::new();
            for &i in ids {
                let xi = &xi_points[i].coords;
                let mut inner = Vec::with_capacity(x_grid.len());
                for &x in x_grid {
                    coords.clear();
                    coords.push(x);
                    coords.extend_from_slice(xi);
                    let mut ctx = TapeCtx::new(&mut tape);
                    let r = problem.residual_with(net, &mut ctx, &coords)?;
                    inner.push(tape.square(r));
                }
                let s = tape.sum(&inner);
                let inv = tape.constant(m_x_inv);
                let mut term = tape.mul(inv, s);
                if let Some(w) = weights {
                    let c = tape.constant(w[i]);
                    term = tape.mul(c, term);
                }
                outer.push(term);
            }
        }
        let s = tape.sum(&outer);
        let grad = tape.grad_params(s)?;
        Ok((tape.value(s), grad))
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.params.len()];
    for c in chunks {
        let (l, g) = c?;
        loss += l;
        for (a, v) in grad.iter_mut().zip(g) {
            *a += v;
        }
    }
    let inv_n = 1.0 / n as f64;
    loss *= inv_n;
    grad.iter_mut().for_each(|g| *g *= inv_n);
    Ok((loss, grad))
}

/// Weighted mean of squared residuals over a whole training set (the
/// importance-weighted discrete residual), without gradients.
pub fn weighted_residual_loss<P: Problem>(net: &Surrogate, problem: &P, set: &TrainingSet, mode: Mode, x_grid: Option<&[f64]>) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyInput { what: "training set" });
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let chunks = parallel::chunked_map(&idx, POINT_CHUNK, |_, ids| -> Result<f64> {
        let mut acc = 0.0;
        for &i in ids {
            let w = set.weights.as_ref().map_or(1.0, |w| w[i]);
            let r2 = match mode {
                Mode::Joint => {
                    let r = residual_value(problem, net, &set.points[i].coords)?;
                    r * r
                }
                Mode::Marginal => {
                    let grid = x_grid.expect("marginal loss needs a spatial grid");
                    marginal_residual(problem, net, &set.points[i].coords, grid)?
                }
            };
            acc += w * r2;
        }
        Ok(acc)
    });
    let mut total = 0.0;
    for c in chunks {
        total += c?;
    }
    Ok(total / set.len() as f64)
}

// --- validation ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMetrics {
    pub mse: f64,
    pub rel_l2: f64,
}

/// Mean squared error and relative l2 error of the surrogate against
/// reference values.
pub fn evaluate_grid(net: &Surrogate, val: &ValidationSet) -> Result<GridMetrics> {
    if val.points.is_empty() {
        return Err(Error::EmptyInput { what: "validation grid" });
    }
    let idx: Vec<usize> = (0..val.points.len()).collect();
    let chunks = parallel::chunked_map(&idx, 1024, |_, ids| -> Result<(f64, f64)> {
        let mut err2 = 0.0;
        let mut ref2 = 0.0;
        for &i in ids {
            let u = net.value(&val.points[i].coords)?;
            let o = val.oracle[i];
            err2 += (u - o) * (u - o);
            ref2 += o * o;
        }
        Ok((err2, ref2))
    });
    let (mut err2, mut ref2) = (0.0, 0.0);
    for c in chunks {
        let (e, r) = c?;
        err2 += e;
        ref2 += r;
    }
    if ref2 == 0.0 {
        return Err(Error::ZeroReferenceNorm);
    }
    Ok(GridMetrics {
        mse: err2 / val.points.len() as f64,
        rel_l2: (err2 / ref2).sqrt(),
    })
}

/// Validation data for a run: the full reference set evaluated at stage
/// boundaries and an optional cheaper set evaluated every epoch.
#[derive(Debug, Clone)]
pub struct ValidationData {
    pub full: ValidationSet,
    pub epoch: Option<ValidationSet>,
}

// --- stage training -----------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn train_stage<P: Problem>(
    net: &mut Surrogate,
    problem: &P,
    set: &TrainingSet,
    boundary: &[Point],
    cfg: &AdaptiveConfig,
    x_grid: Option<&[f64]>,
    stage: usize,
    record: &mut RunRecord,
    epoch_val: Option<&ValidationSet>,
) -> Result<Vec<f64>> {
    let mut adam = AdamState::new(net.params.len());
    let hyper = AdamHyper { lr: cfg.lr, ..AdamHyper::default() };
    let mut shuffle_rng = RngStream::new(cfg.seed, STREAM_SHUFFLE + stage as u64).rng();
    let mut order: Vec<usize> = (0..set.len()).collect();
    let n_batches = set.len().div_ceil(cfg.m);
    let mut epoch_losses = Vec::with_capacity(cfg.n_e);
    for epoch in 1..=cfg.n_e {
        let timer = Timer::start();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for b in 0..n_batches {
            let ids = &order[b * cfg.m..((b + 1) * cfg.m).min(set.len())];
            let batch: Vec<&Point> = ids.iter().map(|&i| &set.points[i]).collect();
            let w: Option<Vec<f64>> = set
                .weights
                .as_ref()
                .map(|ws| ids.iter().map(|&i| ws[i]).collect());
            let (loss, grad) = match cfg.mode {
                Mode::Joint => {
                    empirical_loss_grad(net, problem, &batch, w.as_deref(), boundary, cfg.gamma)?
                }
                Mode::Marginal => {
                    let grid = x_grid.expect("marginal mode requires a spatial grid");
                    marginal_loss_grad(net, problem, &batch, w.as_deref(), grid)?
                }
            };
            adam_step(&mut net.params, &grad, &mut adam, &hyper)?;
            epoch_loss += loss;
        }
        epoch_loss /= n_batches as f64;
        epoch_losses.push(epoch_loss);
        let metrics = epoch_val.map(|v| evaluate_grid(net, v)).transpose()?;
        record.rows.push(RecordRow {
            stage,
            epoch,
            phase: Phase::Surrogate,
            loss: Some(epoch_loss),
            val_mse: metrics.map(|m| m.mse),
            val_rel_l2: metrics.map(|m| m.rel_l2),
            n_points: set.len(),
            wall_ms: timer.ms(),
        });
    }
    Ok(epoch_losses)
}

/// Train the surrogate for one stage on a fixed training set: `n_e` epochs
/// of minibatches drawn without replacement, warm-started from the incoming
/// parameters. Returns the trained surrogate and the per-epoch losses.
pub fn train_surrogate_stage<P: Problem>(
    net: Surrogate,
    set: &TrainingSet,
    cfg: &AdaptiveConfig,
    problem: &P,
) -> Result<(Surrogate, Vec<f64>)> {
    if set.is_empty() {
        return Err(Error::EmptyInput { what: "training set" });
    }
    let mut net = net;
    let x_grid = cfg
        .m_x
        .map(|m| spatial_grid(problem, m));
    let mut record = RunRecord::default();
    let losses = train_stage(
        &mut net,
        problem,
        set,
        &[],
        cfg,
        x_grid.as_deref(),
        0,
        &mut record,
        None,
    )?;
    Ok((net, losses))
}

fn spatial_grid<P: Problem>(problem: &P, m_x: usize) -> Vec<f64> {
    let (lo, hi) = problem.spatial_bounds();
    linspace(lo[0], hi[0], m_x)
}

// --- adaptive loops -----------------------------------------------------------

/// Result of an adaptive run.
pub struct Das2Output {
    pub surrogate: Surrogate,
    pub flow: FlowModel,
    pub record: RunRecord,
    pub training_set: TrainingSet,
}

/// Result of a baseline run.
pub struct BaselineOutput {
    pub surrogate: Surrogate,
    pub record: RunRecord,
    pub training_set: TrainingSet,
}

fn push_stage_val(
    record: &mut RunRecord,
    stage: usize,
    epoch: usize,
    loss: Option<f64>,
    metrics: GridMetrics,
    n_points: usize,
    wall_ms: u64,
) {
    record.rows.push(RecordRow {
        stage,
        epoch,
        phase: Phase::StageVal,
        loss,
        val_mse: Some(metrics.mse),
        val_rel_l2: Some(metrics.rel_l2),
        n_points,
        wall_ms,
    });
}

/// Deep adaptive sampling over the joint spatial–parametric domain.
///
/// Per stage: train the surrogate on the current set, fit the flow to the
/// residual-induced density `r^2 h` by importance-sampled cross entropy
/// (proposal = previous stage's flow), then draw fresh collocation points
/// restricted to the target domain and refine the training set. The flow is
/// trained at the last stage too, but no refinement follows it.
pub fn das2_joint<P: Problem>(
    cfg: &AdaptiveConfig,
    problem: &P,
    net: Surrogate,
    flow: FlowModel,
    val: &ValidationData,
) -> Result<Das2Output> {
    cfg.validate()?;
    if cfg.mode != Mode::Joint {
        return Err(Error::InvalidConfig("das2_joint requires mode = joint".into()));
    }
    let joint_box = problem.joint_domain(cfg.box_margin)?;
    if flow.dim != joint_box.dim() {
        return Err(Error::DimensionMismatch {
            what: "flow dimension for joint sampling",
            expected: joint_box.dim(),
            actual: flow.dim,
        });
    }
    let omega_volume: f64 = (0..joint_box.dim())
        .map(|i| joint_box.upper[i] - joint_box.lower[i])
        .product();
    let mut net = net.with_ansatz(problem.ansatz());
    let mut record = RunRecord::default();

    // Initial training set: uniform over Omega.
    let mut init_rng = RngStream::new(cfg.seed, STREAM_INIT_SET).rng();
    let init_points = uniform_sample(&joint_box, cfg.initial_set_size(), &mut init_rng);
    let n_init_pts = init_points.len();
    let mut set = TrainingSet::from_points(init_points, 0);
    if cfg.refine_mode == RefineMode::Replace {
        set = set.with_weights(vec![omega_volume; n_init_pts])?;
    }

    let mut proposal = flow;
    for stage in 0..cfg.n_adaptive {
        let boundary = stage_boundary_points(problem, cfg, stage);
        train_stage(
            &mut net,
            problem,
            &set,
            &boundary,
            cfg,
            None,
            stage,
            &mut record,
            val.epoch.as_ref(),
        )?;
        let timer = Timer::start();
        let metrics = evaluate_grid(&net, &val.full)?;
        let train_loss = weighted_residual_loss(&net, problem, &set, Mode::Joint, None)?;
        push_stage_val(&mut record, stage, cfg.n_e, Some(train_loss), metrics, set.len(), timer.ms());

        // Fit the flow to the residual-induced density of the current
        // surrogate.
        let snapshot = net.clone();
        let boxed = joint_box.clone();
        let target = move |p: &[f64]| {
            let r = residual_value(problem, &snapshot, p).expect("residual at proposal point");
            let h = cutoff_h(p, &boxed).expect("proposal point inside the enlarged box");
            r * r * h
        };
        let mut flow_rng = RngStream::new(cfg.seed, STREAM_FLOW + stage as u64).rng();
        let (trained, ce_losses) = train_flow(
            proposal.clone(),
            &proposal,
            &target,
            cfg.n_e,
            cfg.m,
            cfg.lr,
            !cfg.raw_weights,
            &mut flow_rng,
        )?;
        for (e, &ce) in ce_losses.iter().enumerate() {
            record.rows.push(RecordRow {
                stage,
                epoch: e + 1,
                phase: Phase::Flow,
                loss: Some(ce),
                val_mse: None,
                val_rel_l2: None,
                n_points: cfg.m,
                wall_ms: 0,
            });
        }
        proposal = trained;

        if stage + 1 < cfg.n_adaptive {
            let timer = Timer::start();
            let mut refine_rng = RngStream::new(cfg.seed, STREAM_REFINE + stage as u64).rng();
            let outcome = proposal
                .sample(cfg.n_r, &mut refine_rng, true)
                .map_err(|e| e.with_stage(stage))?;
            let tag = (stage + 1) as u32;
            let mut generated = TrainingSet::from_points(
                outcome.points.iter().cloned().map(Point::new).collect(),
                tag,
            );
            if cfg.refine_mode == RefineMode::Replace {
                let w: Vec<f64> = outcome
                    .points
                    .iter()
                    .map(|p| Ok(1.0 / proposal.log_pdf(p)?.exp()))
                    .collect::<Result<_>>()?;
                generated = generated.with_weights(w)?;
            }
            set = refine_training_set(&set, generated, cfg.refine_mode)?;
            record.rows.push(RecordRow {
                stage,
                epoch: cfg.n_e,
                phase: Phase::Refine,
                loss: Some(outcome.acceptance),
                val_mse: None,
                val_rel_l2: None,
                n_points: cfg.n_r,
                wall_ms: timer.ms(),
            });
        }
    }
    Ok(Das2Output { surrogate: net, flow: proposal, record, training_set: set })
}

/// Deep adaptive sampling over the parametric domain only: the flow models
/// the marginal residual-induced density `rtilde^2(xi) h(xi)` on the
/// enlarged parameter box, the loss averages squared residuals over a
/// fixed spatial grid.
pub fn das2_marginal<P: Problem>(
    cfg: &AdaptiveConfig,
    problem: &P,
    net: Surrogate,
    flow: FlowModel,
    val: &ValidationData,
) -> Result<Das2Output> {
    cfg.validate()?;
    if cfg.mode != Mode::Marginal {
        return Err(Error::InvalidConfig("das2_marginal requires mode = marginal".into()));
    }
    let param_box = problem.param_domain(cfg.box_margin)?;
    if flow.dim != param_box.dim() {
        return Err(Error::DimensionMismatch {
            what: "flow dimension for marginal sampling",
            expected: param_box.dim(),
            actual: flow.dim,
        });
    }
    let omega_volume: f64 = (0..param_box.dim())
        .map(|i| param_box.upper[i] - param_box.lower[i])
        .product();
    let x_grid = spatial_grid(problem, cfg.m_x.expect("validated"));
    let mut net = net.with_ansatz(problem.ansatz());
    let mut record = RunRecord::default();

    let mut init_rng = RngStream::new(cfg.seed, STREAM_INIT_SET).rng();
    let init_points = uniform_sample(&param_box, cfg.initial_set_size(), &mut init_rng);
    let n_init_pts = init_points.len();
    let mut set = TrainingSet::from_points(init_points, 0);
    if cfg.refine_mode == RefineMode::Replace {
        set = set.with_weights(vec![omega_volume; n_init_pts])?;
    }

    let mut proposal = flow;
    for stage in 0..cfg.n_adaptive {
        train_stage(
            &mut net,
            problem,
            &set,
            &[],
            cfg,
            Some(&x_grid),
            stage,
            &mut record,
            val.epoch.as_ref(),
        )?;
        let timer = Timer::start();
        let metrics = evaluate_grid(&net, &val.full)?;
        let train_loss = weighted_residual_loss(&net, problem, &set, Mode::Marginal, Some(&x_grid))?;
        push_stage_val(&mut record, stage, cfg.n_e, Some(train_loss), metrics, set.len(), timer.ms());

        let snapshot = net.clone();
        let boxed = param_box.clone();
        let grid = x_grid.clone();
        let target = move |xi: &[f64]| {
            let r2 = marginal_residual(problem, &snapshot, xi, &grid)
                .expect("marginal residual at proposal point");
            let h = cutoff_h(xi, &boxed).expect("proposal point inside the enlarged box");
            r2 * h
        };
        let mut flow_rng = RngStream::new(cfg.seed, STREAM_FLOW + stage as u64).rng();
        let (trained, ce_losses) = train_flow(
            proposal.clone(),
            &proposal,
            &target,
            cfg.n_e,
            cfg.m,
            cfg.lr,
            !cfg.raw_weights,
            &mut flow_rng,
        )?;
        for (e, &ce) in ce_losses.iter().enumerate() {
            record.rows.push(RecordRow {
                stage,
                epoch: e + 1,
                phase: Phase::Flow,
                loss: Some(ce),
                val_mse: None,
                val_rel_l2: None,
                n_points: cfg.m,
                wall_ms: 0,
            });
        }
        proposal = trained;

        if stage + 1 < cfg.n_adaptive {
            let timer = Timer::start();
            let mut refine_rng = RngStream::new(cfg.seed, STREAM_REFINE + stage as u64).rng();
            let outcome = proposal
                .sample(cfg.n_r, &mut refine_rng, true)
                .map_err(|e| e.with_stage(stage))?;
            let tag = (stage + 1) as u32;
            let mut generated = TrainingSet::from_points(
                outcome.points.iter().cloned().map(Point::new).collect(),
                tag,
            );
            if cfg.refine_mode == RefineMode::Replace {
                let w: Vec<f64> = outcome
                    .points
                    .iter()
                    .map(|p| Ok(1.0 / proposal.log_pdf(p)?.exp()))
                    .collect::<Result<_>>()?;
                generated = generated.with_weights(w)?;
            }
            set = refine_training_set(&set, generated, cfg.refine_mode)?;
            record.rows.push(RecordRow {
                stage,
                epoch: cfg.n_e,
                phase: Phase::Refine,
                loss: Some(outcome.acceptance),
                val_mse: None,
                val_rel_l2: None,
                n_points: cfg.n_r,
                wall_ms: timer.ms(),
            });
        }
    }
    Ok(Das2Output { surrogate: net, flow: proposal, record, training_set: set })
}

fn stage_boundary_points<P: Problem>(problem: &P, cfg: &AdaptiveConfig, stage: usize) -> Vec<Point> {
    if problem.has_boundary() && cfg.gamma > 0.0 && cfg.n_b > 0 {
        let mut rng = RngStream::new(cfg.seed, STREAM_BOUNDARY + stage as u64).rng();
        problem.sample_boundary(cfg.n_b, &mut rng)
    } else {
        Vec::new()
    }
}

/// Matched-budget non-adaptive baselines. Uniform and quasi-random train on
/// a fixed set of `n_init + (n_adaptive - 1) * n_r` points for
/// `n_adaptive * n_e` epochs; RAR grows the set by top-residual selection
/// from a fresh uniform candidate pool (10x the selection size) each stage.
pub fn run_baseline<P: Problem>(
    cfg: &AdaptiveConfig,
    problem: &P,
    net: Surrogate,
    val: &ValidationData,
) -> Result<BaselineOutput> {
    cfg.validate()?;
    if cfg.baseline == Baseline::None {
        return Err(Error::InvalidConfig("run_baseline requires a baseline choice".into()));
    }
    let domain = match cfg.mode {
        Mode::Joint => problem.joint_domain(cfg.box_margin)?,
        Mode::Marginal => problem.param_domain(cfg.box_margin)?,
    };
    let x_grid = cfg.m_x.map(|m| spatial_grid(problem, m));
    if cfg.mode == Mode::Marginal && x_grid.is_none() {
        return Err(Error::InvalidConfig("marginal mode requires m_x".into()));
    }
    let mut net = net.with_ansatz(problem.ansatz());
    let mut record = RunRecord::default();
    let total_points = cfg.initial_set_size() + (cfg.n_adaptive - 1) * cfg.n_r;

    let mut set = match cfg.baseline {
        Baseline::Uniform => {
            let mut rng = RngStream::new(cfg.seed, STREAM_INIT_SET).rng();
            TrainingSet::from_points(uniform_sample(&domain, total_points, &mut rng), 0)
        }
        Baseline::Qrs => TrainingSet::from_points(halton_sample(&domain, total_points, 0)?, 0),
        Baseline::Rar => {
            let mut rng = RngStream::new(cfg.seed, STREAM_INIT_SET).rng();
            TrainingSet::from_points(uniform_sample(&domain, cfg.initial_set_size(), &mut rng), 0)
        }
        Baseline::None => unreachable!(),
    };

    for stage in 0..cfg.n_adaptive {
        let boundary = stage_boundary_points(problem, cfg, stage);
        train_stage(
            &mut net,
            problem,
            &set,
            &boundary,
            cfg,
            x_grid.as_deref(),
            stage,
            &mut record,
            val.epoch.as_ref(),
        )?;
        let timer = Timer::start();
        let metrics = evaluate_grid(&net, &val.full)?;
        let train_loss = weighted_residual_loss(&net, problem, &set, cfg.mode, x_grid.as_deref())?;
        push_stage_val(&mut record, stage, cfg.n_e, Some(train_loss), metrics, set.len(), timer.ms());

        if cfg.baseline == Baseline::Rar && stage + 1 < cfg.n_adaptive {
            let mut pool_rng = RngStream::new(cfg.seed, STREAM_POOL + stage as u64).rng();
            let pool = uniform_sample(&domain, 10 * cfg.n_r, &mut pool_rng);
            let selected = match cfg.mode {
                Mode::Joint => rar_select(
                    &pool,
                    |p| residual_value(problem, &net, &p.coords).expect("pool residual"),
                    cfg.n_r,
                )?,
                Mode::Marginal => {
                    let grid = x_grid.as_deref().expect("validated");
                    rar_select(
                        &pool,
                        |p| {
                            marginal_residual(problem, &net, &p.coords, grid)
                                .expect("pool residual")
                                .sqrt()
                        },
                        cfg.n_r,
                    )?
                }
            };
            let generated = TrainingSet::from_points(selected, (stage + 1) as u32);
            set = refine_training_set(&set, generated, RefineMode::Grow)?;
            record.rows.push(RecordRow {
                stage,
                epoch: cfg.n_e,
                phase: Phase::Refine,
                loss: None,
                val_mse: None,
                val_rel_l2: None,
                n_points: cfg.n_r,
                wall_ms: 0,
            });
        }
    }
    Ok(BaselineOutput { surrogate: net, record, training_set: set })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradient, Arith};
    use rand::Rng;
    use crate::nets::{mlp_init, Ansatz};
    use crate::problems::{ParamOde, ValidationSpec};

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let g = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &g, &mut st, &AdamHyper::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.m, vec![0.0, 0.0]);

        // Accumulated moments decay once the gradient vanishes.
        let mut st = AdamState::new(1);
        st.m = vec![0.5];
        st.v = vec![0.25];
        let mut q = vec![0.0];
        adam_step(&mut q, &[0.0], &mut st, &AdamHyper::default()).unwrap();
        assert!(st.m[0] < 0.5 && st.v[0] < 0.25);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut p = vec![0.0];
        let g = vec![3.7];
        let mut st = AdamState::new(1);
        let hyper = AdamHyper { lr: 1e-2, ..AdamHyper::default() };
        adam_step(&mut p, &g, &mut st, &hyper).unwrap();
        // Bias-corrected first step is lr * g/|g| up to eps.
        assert!((p[0].abs() - 1e-2).abs() < 1e-6, "{}", p[0]);
        assert!(p[0] < 0.0);
    }

    #[test]
    fn adam_state_carries_between_steps() {
        let hyper = AdamHyper::default();
        let g = vec![1.0];
        let mut p1 = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p1, &g, &mut st, &hyper).unwrap();
        adam_step(&mut p1, &g, &mut st, &hyper).unwrap();

        let mut p2 = vec![0.0];
        let mut st_a = AdamState::new(1);
        adam_step(&mut p2, &g, &mut st_a, &hyper).unwrap();
        let mut st_b = AdamState::new(1); // reset state
        adam_step(&mut p2, &g, &mut st_b, &hyper).unwrap();
        assert_ne!(p1[0].to_bits(), p2[0].to_bits());
    }

    #[test]
    fn adam_shape_mismatch_rejected() {
        let mut p = vec![0.0; 2];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut p, &g, &mut st, &AdamHyper::default()).is_err());
    }

    #[test]
    fn empirical_loss_hand_values() {
        let prob = ParamOde::default();
        // Zero net, ic_shift(1): residual(x, xi) = -xi.
        let mut net = mlp_init(&[2, 4, 1], 0).unwrap().with_ansatz(Ansatz::IcShift(1.0));
        net.params.iter_mut().for_each(|p| *p = 0.0);

        // Single point residual -2, weight 1: loss 4.
        let pts = vec![Point::new(vec![0.5, 2.0])];
        let (tape, loss) = record_empirical_loss(&net, &prob, &pts, None, &[], 0.0).unwrap();
        assert!((tape.value(loss) - 4.0).abs() < 1e-15);

        // Zero-residual surrogate: xi = 0.
        let pts0 = vec![Point::new(vec![0.5, 0.0])];
        let (tape, loss) = record_empirical_loss(&net, &prob, &pts0, None, &[], 0.0).unwrap();
        assert_eq!(tape.value(loss), 0.0);

        // Residuals {1, 3} via xi in {-1, -3}, weights {2, 1}:
        // (2*1 + 1*9)/2 = 5.5.
        let ptsw = vec![Point::new(vec![0.1, -1.0]), Point::new(vec![0.9, -3.0])];
        let (tape, loss) =
            record_empirical_loss(&net, &prob, &ptsw, Some(&[2.0, 1.0]), &[], 0.0).unwrap();
        assert!((tape.value(loss) - 5.5).abs() < 1e-12);

        // Empty batch rejected.
        assert!(record_empirical_loss(&net, &prob, &[], None, &[], 0.0).is_err());
    }

    #[test]
    fn chunked_loss_matches_single_tape() {
        let prob = ParamOde::default();
        let net = mlp_init(&[2, 6, 1], 4).unwrap().with_ansatz(Ansatz::IcShift(1.0));
        let mut rng = RngStream::new(9, 0).rng();
        let pts: Vec<Point> = (0..300)
            .map(|_| Point::new(vec![rng.gen_range(0.0..1.0), rng.gen_range(-3.0..3.0)]))
            .collect();
        let refs: Vec<&Point> = pts.iter().collect();
        let (tape, node) = record_empirical_loss(&net, &prob, &pts, None, &[], 0.0).unwrap();
        let single = tape.value(node);
        let single_grad = tape.grad_params(node).unwrap();
        let (chunked, chunked_grad) =
            empirical_loss_grad(&net, &prob, &refs, None, &[], 0.0).unwrap();
        assert!((single - chunked).abs() / single.abs() < 1e-12);
        for (a, b) in single_grad.iter().zip(chunked_grad.iter()) {
            let scale = a.abs().max(b.abs()).max(1e-12);
            assert!((a - b).abs() / scale < 1e-10);
        }
    }

    #[test]
    fn empirical_loss_gradient_matches_finite_differences() {
        // Parameter gradients through the input derivative on a 2-4-1 net.
        let prob = ParamOde::default();
        let net = mlp_init(&[2, 4, 1], 8).unwrap().with_ansatz(Ansatz::IcShift(1.0));
        let mut rng = RngStream::new(3, 1).rng();
        let pts: Vec<Point> = (0..10)
            .map(|_| Point::new(vec![rng.gen_range(0.0..1.0), rng.gen_range(-3.0..3.0)]))
            .collect();
        let f = |theta: &[f64]| {
            let mut n = net.clone();
            n.params.copy_from_slice(theta);
            let (tape, node) = record_empirical_loss(&n, &prob, &pts, None, &[], 0.0).unwrap();
            (tape.value(node), tape.grad_params(node).unwrap())
        };
        let err = check_gradient(f, &net.params.clone(), 1e-5);
        assert!(err < 1e-5, "gradient error {err}");
    }

    #[test]
    fn marginal_loss_equals_product_set_empirical_loss() {
        let prob = ParamOde::default();
        let net = mlp_init(&[2, 5, 1], 6).unwrap().with_ansatz(Ansatz::IcShift(1.0));
        let x_grid = linspace(0.0, 1.0, 7);
        let xis = vec![Point::new(vec![-1.2]), Point::new(vec![0.4]), Point::new(vec![2.9])];
        let (tape_m, node_m) = record_marginal_loss(&net, &prob, &xis, &x_grid).unwrap();
        let marginal = tape_m.value(node_m);
        // Product set.
        let mut prod = Vec::new();
        for xi in &xis {
            for &x in &x_grid {
                prod.push(Point::new(vec![x, xi.coords[0]]));
            }
        }
        let (tape_e, node_e) = record_empirical_loss(&net, &prob, &prod, None, &[], 0.0).unwrap();
        let empirical = tape_e.value(node_e);
        assert!((marginal - empirical).abs() < 1e-12, "{marginal} vs {empirical}");

        // Constant residual c: zero net, single xi -> c^2.
        let mut zero = mlp_init(&[2, 4, 1], 0).unwrap().with_ansatz(Ansatz::IcShift(1.0));
        zero.params.iter_mut().for_each(|p| *p = 0.0);
        let (tape, node) =
            record_marginal_loss(&zero, &prob, &[Point::new(vec![2.0])], &x_grid).unwrap();
        assert!((tape.value(node) - 4.0).abs() < 1e-12);

        // Empty inputs rejected.
        assert!(record_marginal_loss(&net, &prob, &[], &x_grid).is_err());
        assert!(record_marginal_loss(&net, &prob, &xis, &[]).is_err());
    }

    #[test]
    fn marginal_fast_path_matches_generic() {
        use crate::nets::branch_trunk_init;
        use crate::problems::OplearnCheb;
        let prob = OplearnCheb { m_bound: 1.0, degree: 3, decay: 6.0 };
        let net = branch_trunk_init(&[1, 6, 4], &[3, 6, 4], 2)
            .unwrap()
            .with_ansatz(Ansatz::IcZero);
        let x_grid = linspace(0.0, 1.0, 9);
        let mut rng = RngStream::new(1, 0).rng();
        let xis: Vec<Point> = (0..40)
            .map(|_| Point::new((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let refs: Vec<&Point> = xis.iter().collect();
        let (fast_loss, fast_grad) =
            marginal_loss_grad(&net, &prob, &refs, None, &x_grid).unwrap();
        let (tape, node) = record_marginal_loss(&net, &prob, &xis, &x_grid).unwrap();
        let slow_loss = tape.value(node);
        let slow_grad = tape.grad_params(node).unwrap();
        assert!((fast_loss - slow_loss).abs() / slow_loss.abs() < 1e-11);
        for (a, b) in fast_grad.iter().zip(slow_grad.iter()) {
            let scale = a.abs().max(b.abs()).max(1e-10);
            assert!((a - b).abs() / scale < 1e-8);
        }
    }

    #[test]
    fn evaluate_grid_basics() {
        let prob = ParamOde::default();
        let val = prob
            .build_validation(&ValidationSpec::Grid { nx: 12, nxi: 12 }, 0)
            .unwrap();
        // A surrogate equal to the oracle would give mse 0; emulate with the
        // oracle itself via a constant-offset check instead.
        let net = mlp_init(&[2, 4, 1], 2).unwrap().with_ansatz(Ansatz::IcShift(1.0));
        let m = evaluate_grid(&net, &val).unwrap();
        assert!(m.mse > 0.0 && m.rel_l2 > 0.0);

        // Constant offset delta -> mse = delta^2.
        let delta = 0.3;
        let shifted = ValidationSet {
            points: val.points.clone(),
            oracle: val
                .points
                .iter()
                .map(|p| net.value(&p.coords).unwrap() + delta)
                .collect(),
        };
        let m = evaluate_grid(&net, &shifted).unwrap();
        assert!((m.mse - delta * delta).abs() < 1e-12);

        // Zero reference norm rejected.
        let zero = ValidationSet {
            points: val.points.clone(),
            oracle: vec![0.0; val.points.len()],
        };
        assert!(matches!(evaluate_grid(&net, &zero), Err(Error::ZeroReferenceNorm)));
    }

    /// A toy problem with an explicit boundary residual, to exercise the
    /// gamma path that the in-scope problems make inert through their
    /// ansatz.
    struct ToyWithBoundary;

    impl Problem for ToyWithBoundary {
        fn name(&self) -> &'static str {
            "toy_boundary"
        }
        fn spatial_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn spatial_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![0.0], vec![1.0])
        }
        fn param_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![-1.0], vec![1.0])
        }
        fn ansatz(&self) -> Ansatz {
            Ansatz::None
        }
        fn residual_with<C: Arith>(
            &self,
            net: &Surrogate,
            ctx: &mut C,
            coords: &[f64],
        ) -> Result<C::V> {
            // du/dx - xi
            let u = net.eval_with(ctx, coords, Some(0))?;
            let du = ctx.tangent_of(u);
            let xi = ctx.constant(coords[1]);
            Ok(ctx.sub(du, xi))
        }
        fn has_boundary(&self) -> bool {
            true
        }
        fn boundary_residual_with<C: Arith>(
            &self,
            net: &Surrogate,
            ctx: &mut C,
            coords: &[f64],
        ) -> Result<C::V> {
            // u(0, xi) - 1
            let u = net.eval_with(ctx, coords, Some(0))?;
            let one = ctx.constant(1.0);
            Ok(ctx.sub(u, one))
        }
        fn sample_boundary(&self, n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Point> {
            (0..n)
                .map(|_| Point::new(vec![0.0, rng.gen_range(-1.0..1.0)]))
                .collect()
        }
        fn build_validation(&self, _spec: &ValidationSpec, _seed: u64) -> Result<ValidationSet> {
            unimplemented!("not used in tests")
        }
    }

    #[test]
    fn gamma_boundary_term_contributes() {
        let prob = ToyWithBoundary;
        let mut net = mlp_init(&[2, 4, 1], 0).unwrap();
        net.params.iter_mut().for_each(|p| *p = 0.0);
        // Zero net: residual = -xi, boundary residual = -1.
        let pts = vec![Point::new(vec![0.5, 2.0])];
        let bpts = vec![Point::new(vec![0.0, 0.3])];
        let (tape, loss) = record_empirical_loss(&net, &prob, &pts, None, &bpts, 0.5).unwrap();
        // 4 + 0.5 * 1 = 4.5
        assert!((tape.value(loss) - 4.5).abs() < 1e-12);

        // The chunked version agrees and its gradient passes FD.
        let refs: Vec<&Point> = pts.iter().collect();
        let rich = mlp_init(&[2, 4, 1], 5).unwrap();
        let f = |theta: &[f64]| {
            let mut n = rich.clone();
            n.params.copy_from_slice(theta);
            empirical_loss_grad(&n, &prob, &refs, None, &bpts, 0.5).unwrap()
        };
        let err = check_gradient(f, &rich.params.clone(), 1e-5);
        assert!(err < 1e-6, "gamma-path gradient error {err}");
    }

    #[test]
    fn train_stage_zero_epochs_and_determinism() {
        let prob = ParamOde::default();
        let cfg = AdaptiveConfig {
            n_adaptive: 1,
            n_e: 0,
            n_r: 16,
            m: 8,
            m_x: None,
            n_init: None,
            n_b: 0,
            gamma: 0.0,
            lr: 1e-3,
            seed: 5,
            mode: Mode::Joint,
            refine_mode: RefineMode::Grow,
            baseline: Baseline::None,
            box_margin: 0.05,
            raw_weights: false,
        };
        let domain = prob.joint_domain(0.05).unwrap();
        let mut rng = RngStream::new(5, 0).rng();
        let set = TrainingSet::from_points(uniform_sample(&domain, 16, &mut rng), 0);
        let net = mlp_init(&[2, 6, 1], 1).unwrap().with_ansatz(Ansatz::IcShift(1.0));

        // Zero epochs: unchanged.
        let (same, losses) = train_surrogate_stage(net.clone(), &set, &cfg, &prob).unwrap();
        assert!(losses.is_empty());
        assert_eq!(same.params, net.params);

        // Same seed twice: bit-identical.
        let cfg2 = AdaptiveConfig { n_e: 3, ..cfg };
        let (a, la) = train_surrogate_stage(net.clone(), &set, &cfg2, &prob).unwrap();
        let (b, lb) = train_surrogate_stage(net, &set, &cfg2, &prob).unwrap();
        assert_eq!(la, lb);
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
