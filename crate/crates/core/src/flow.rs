//! Invertible density model over an enlarged box.
//!
//! Structure, outermost first: a fixed componentwise logit transport from
//! the open box `B` to `R^d` (exact log-det), then `K` outer blocks of
//! (fixed reversal permutation over the active dimensions, followed by `L`
//! units of affine coupling + actnorm). After each outer block except the
//! last, the trailing `ceil(d/K)` active dimensions are frozen: they pass
//! through later blocks unchanged but keep feeding the coupling
//! conditioners, preserving the triangular transport structure. The latent
//! prior is the standard normal.
//!
//! Every layer is invertible by construction: actnorm scales are
//! exponentials of free parameters, and the coupling scale exponent is
//! soft-clamped to `[-alpha, alpha]` via `alpha * tanh(s/alpha)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::{Arith, PlainCtx, Tape, TapeCtx};
use crate::error::{Error, Result};
use crate::parallel::{self, POINT_CHUNK};
use crate::trainer::{adam_step, AdamHyper, AdamState};

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

/// Maximum proposal draws per accepted point before a restricted sampling
/// call reports starvation.
pub const MAX_SAMPLE_ATTEMPTS_PER_POINT: usize = 50;

/// The target domain `Omega` plus a per-dimension margin fraction defining
/// the enlarged support box `B` strictly containing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub margin: Vec<f64>,
}

impl BoxDomain {
    /// Uniform margin fraction on every dimension. The margin must be
    /// strictly positive so that `B` strictly contains `Omega`.
    pub fn with_margin(lower: Vec<f64>, upper: Vec<f64>, margin: f64) -> Result<BoxDomain> {
        let m = vec![margin; lower.len()];
        BoxDomain::new(lower, upper, m)
    }

    pub fn new(lower: Vec<f64>, upper: Vec<f64>, margin: Vec<f64>) -> Result<BoxDomain> {
        if lower.len() != upper.len() || lower.len() != margin.len() {
            return Err(Error::DimensionMismatch {
                what: "box bounds",
                expected: lower.len(),
                actual: upper.len().min(margin.len()),
            });
        }
        if lower.is_empty() {
            return Err(Error::EmptyInput { what: "box domain" });
        }
        for i in 0..lower.len() {
            if !(lower[i] < upper[i]) {
                return Err(Error::InvalidConfig(format!(
                    "box dimension {i}: lower {} must be below upper {}",
                    lower[i], upper[i]
                )));
            }
            if !(margin[i] > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "box dimension {i}: margin must be strictly positive to enlarge the box"
                )));
            }
        }
        Ok(BoxDomain { lower, upper, margin })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Lower bound of the enlarged box `B`.
    pub fn b_lower(&self, i: usize) -> f64 {
        self.lower[i] - self.margin[i] * (self.upper[i] - self.lower[i])
    }

    /// Upper bound of the enlarged box `B`.
    pub fn b_upper(&self, i: usize) -> f64 {
        self.upper[i] + self.margin[i] * (self.upper[i] - self.lower[i])
    }

    /// Is the point inside the closed target domain `Omega`?
    pub fn contains_omega(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .enumerate()
                .all(|(i, &v)| v >= self.lower[i] && v <= self.upper[i])
    }

    /// Is the point strictly inside the open enlarged box `B`?
    pub fn contains_b_open(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .enumerate()
                .all(|(i, &v)| v > self.b_lower(i) && v < self.b_upper(i))
    }

    fn check_in_b(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "point dimension",
                expected: self.dim(),
                actual: p.len(),
            });
        }
        for (i, &v) in p.iter().enumerate() {
            if !(v > self.b_lower(i) && v < self.b_upper(i)) {
                return Err(Error::OutsideSupport { dim: i, value: v });
            }
        }
        Ok(())
    }
}

/// Per coupling+actnorm unit: parameter offsets and the positional split of
/// the active dimensions.
#[derive(Debug, Clone)]
struct UnitMeta {
    active: usize,
    /// Transformed positions (within 0..active).
    t_lo: usize,
    t_hi: usize,
    /// Conditioning positions (within 0..active), complement of [t_lo, t_hi).
    c_lo: usize,
    c_hi: usize,
    subnet_sizes: Vec<usize>,
    subnet_off: usize,
    act_ls_off: usize,
    act_b_off: usize,
}

/// The invertible density model.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub dim: usize,
    pub k_blocks: usize,
    pub l_layers: usize,
    pub hidden: usize,
    pub clamp: f64,
    pub box_domain: BoxDomain,
    /// Trailing active dimensions deactivated after each outer block.
    pub frozen_schedule: Vec<usize>,
    pub params: Vec<f64>,
    units: Vec<UnitMeta>,
}

fn mlp_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Active-dimension counts per block and the resulting frozen schedule.
fn freeze_plan(dim: usize, k_blocks: usize) -> (Vec<usize>, Vec<usize>) {
    let step = dim.div_ceil(k_blocks);
    let mut actives = Vec::with_capacity(k_blocks);
    let mut schedule = Vec::with_capacity(k_blocks);
    let mut active = dim;
    for k in 0..k_blocks {
        actives.push(active);
        let frozen = if k + 1 < k_blocks {
            active.saturating_sub(1).min(step).min(active - 1.min(active))
        } else {
            0
        };
        // Keep at least one active dimension.
        let frozen = frozen.min(active - 1);
        schedule.push(frozen);
        active -= frozen;
    }
    (actives, schedule)
}

fn build_units(dim: usize, k_blocks: usize, l_layers: usize, hidden: usize) -> (Vec<UnitMeta>, Vec<usize>, usize) {
    let (actives, schedule) = freeze_plan(dim, k_blocks);
    let mut units = Vec::with_capacity(k_blocks * l_layers);
    let mut off = 0;
    for k in 0..k_blocks {
        let active = actives[k];
        for l in 0..l_layers {
            let (t_lo, t_hi, c_lo, c_hi) = if active == 1 {
                (0, 1, 0, 0)
            } else {
                let h = active / 2;
                if l % 2 == 0 {
                    (0, h, h, active)
                } else {
                    (h, active, 0, h)
                }
            };
            let cond_len = (c_hi - c_lo) + (dim - active);
            let t_len = t_hi - t_lo;
            let subnet_sizes = vec![cond_len, hidden, hidden, 2 * t_len];
            let subnet_off = off;
            off += mlp_count(&subnet_sizes);
            let act_ls_off = off;
            off += active;
            let act_b_off = off;
            off += active;
            units.push(UnitMeta {
                active,
                t_lo,
                t_hi,
                c_lo,
                c_hi,
                subnet_sizes,
                subnet_off,
                act_ls_off,
                act_b_off,
            });
        }
    }
    (units, schedule, off)
}

/// Initialize a flow. Coupling sub-networks get Xavier hidden layers and a
/// zero final layer, and actnorm starts at identity, so the freshly built
/// flow is the identity on the latent side: its density is exactly the
/// box-transport pushforward of the prior.
pub fn flow_init(
    dim: usize,
    k_blocks: usize,
    l_layers: usize,
    hidden: usize,
    box_domain: BoxDomain,
    seed: u64,
) -> Result<FlowModel> {
    if dim == 0 || k_blocks == 0 || l_layers == 0 || hidden == 0 {
        return Err(Error::InvalidConfig(
            "flow dimensions, block/layer counts and hidden width must be positive".into(),
        ));
    }
    if box_domain.dim() != dim {
        return Err(Error::DimensionMismatch {
            what: "flow box dimension",
            expected: dim,
            actual: box_domain.dim(),
        });
    }
    let (units, frozen_schedule, n_params) = build_units(dim, k_blocks, l_layers, hidden);
    let mut params = vec![0.0; n_params];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for u in &units {
        let mut off = u.subnet_off;
        let sizes = &u.subnet_sizes;
        let n_layers = sizes.len() - 1;
        for (li, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            if li + 1 < n_layers {
                let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                for p in params[off..off + fan_in * fan_out].iter_mut() {
                    *p = rng.gen_range(-a..a);
                }
            }
            // Final layer stays zero; biases start at zero everywhere.
            off += fan_in * fan_out + fan_out;
        }
    }
    Ok(FlowModel {
        dim,
        k_blocks,
        l_layers,
        hidden,
        clamp: 1.5,
        box_domain,
        frozen_schedule,
        params,
        units,
    })
}

impl FlowModel {
    pub fn with_clamp(mut self, clamp: f64) -> Self {
        self.clamp = clamp;
        self
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Forward transport `x -> z` plus log-determinant, written once against
    /// the arithmetic context so plain evaluation and tape recording cannot
    /// diverge. Inputs must already be checked to lie strictly inside `B`.
    fn forward_with<C: Arith>(&self, ctx: &mut C, coords: &[f64]) -> (Vec<C::V>, C::V) {
        let d = self.dim;
        let mut vals: Vec<C::V> = Vec::with_capacity(d);
        let mut ld_terms: Vec<C::V> = Vec::new();

        // Box transport: z = logit((x - bl)/width), logdet -ln(width s (1-s)).
        let one = ctx.constant(1.0);
        for i in 0..d {
            let bl = self.box_domain.b_lower(i);
            let width = self.box_domain.b_upper(i) - bl;
            let x = ctx.input(coords[i], false);
            let cbl = ctx.constant(bl);
            let cw = ctx.constant(1.0 / width);
            let num = ctx.sub(x, cbl);
            let s = ctx.mul(num, cw);
            let s1 = ctx.sub(one, s);
            let ln_s = ctx.ln(s);
            let ln_s1 = ctx.ln(s1);
            let z = ctx.sub(ln_s, ln_s1);
            vals.push(z);
            let c = ctx.constant(-width.ln());
            let t1 = ctx.sub(c, ln_s);
            let t2 = ctx.sub(t1, ln_s1);
            ld_terms.push(t2);
        }

        let alpha = self.clamp;
        let c_alpha = ctx.constant(alpha);
        let c_inv_alpha = ctx.constant(1.0 / alpha);
        let mut scratch: Vec<C::V> = Vec::new();
        for (k, chunk) in self.units.chunks(self.l_layers).enumerate() {
            let active = chunk[0].active;
            vals[..active].reverse();
            for u in chunk {
                // Coupling: transform [t_lo, t_hi) conditioned on the
                // complement plus the frozen tail.
                scratch.clear();
                scratch.extend_from_slice(&vals[u.c_lo..u.c_hi]);
                scratch.extend_from_slice(&vals[u.active..d]);
                let out = crate::nets::mlp_forward_with(ctx, u.subnet_off, &u.subnet_sizes, &scratch);
                let t_len = u.t_hi - u.t_lo;
                for j in 0..t_len {
                    let sr = ctx.mul(out[j], c_inv_alpha);
                    let tj = ctx.tanh(sr);
                    let g = ctx.mul(tj, c_alpha);
                    let eg = ctx.exp(g);
                    let scaled = ctx.mul(vals[u.t_lo + j], eg);
                    vals[u.t_lo + j] = ctx.add(scaled, out[t_len + j]);
                    ld_terms.push(g);
                }
                // Actnorm over all active positions.
                for j in 0..u.active {
                    let ls = ctx.param(u.act_ls_off + j);
                    let b = ctx.param(u.act_b_off + j);
                    let es = ctx.exp(ls);
                    let scaled = ctx.mul(vals[j], es);
                    vals[j] = ctx.add(scaled, b);
                    ld_terms.push(ls);
                }
            }
            let _ = k;
        }
        let logdet = ctx.sum(&ld_terms);
        (vals, logdet)
    }

    /// Map a point strictly inside `B` to the latent space, returning
    /// `(z, logdet)` of the forward Jacobian.
    pub fn forward(&self, point: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.box_domain.check_in_b(point)?;
        let mut ctx = PlainCtx::new(&self.params);
        let (z, ld) = self.forward_with(&mut ctx, point);
        Ok((z, ld))
    }

    /// Inverse transport `z -> x`. Always lands strictly inside `B` thanks
    /// to the sigmoidal box map.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "latent dimension",
                expected: self.dim,
                actual: z.len(),
            });
        }
        let d = self.dim;
        let alpha = self.clamp;
        let p = &self.params;
        let mut vals: Vec<f64> = z.to_vec();
        let mut scratch: Vec<f64> = Vec::new();
        let mut ctx = PlainCtx::new(p);
        for chunk in self.units.chunks(self.l_layers).rev() {
            let active = chunk[0].active;
            for u in chunk.iter().rev() {
                // Undo actnorm.
                for j in 0..u.active {
                    vals[j] = (vals[j] - p[u.act_b_off + j]) * (-p[u.act_ls_off + j]).exp();
                }
                // Undo coupling (conditioner positions are unchanged).
                scratch.clear();
                scratch.extend_from_slice(&vals[u.c_lo..u.c_hi]);
                scratch.extend_from_slice(&vals[u.active..d]);
                let out = crate::nets::mlp_forward_with(&mut ctx, u.subnet_off, &u.subnet_sizes, &scratch);
                let t_len = u.t_hi - u.t_lo;
                for j in 0..t_len {
                    let g = alpha * (out[j] / alpha).tanh();
                    vals[u.t_lo + j] = (vals[u.t_lo + j] - out[t_len + j]) * (-g).exp();
                }
            }
            vals[..active].reverse();
        }
        // Invert the box transport. The sigmoid saturates to exactly 0 or 1
        // in f64 for |z| beyond ~37, so clamp it to keep the result strictly
        // inside the open box for any latent input.
        for i in 0..d {
            let bl = self.box_domain.b_lower(i);
            let width = self.box_domain.b_upper(i) - bl;
            let s = (1.0 / (1.0 + (-vals[i]).exp())).clamp(1e-12, 1.0 - 1e-12);
            vals[i] = bl + width * s;
        }
        Ok(vals)
    }

    /// Log density at a point strictly inside `B`:
    /// `log p_Z(f(x)) + log|det df/dx|` with a standard normal prior.
    pub fn log_pdf(&self, point: &[f64]) -> Result<f64> {
        self.box_domain.check_in_b(point)?;
        let mut ctx = PlainCtx::new(&self.params);
        Ok(self.log_pdf_with(&mut ctx, point))
    }

    /// Context-generic log density (no support check).
    fn log_pdf_with<C: Arith>(&self, ctx: &mut C, point: &[f64]) -> C::V {
        let (z, logdet) = self.forward_with(ctx, point);
        let sq: Vec<C::V> = z.iter().map(|&zi| ctx.square(zi)).collect();
        let ssq = ctx.sum(&sq);
        let half = ctx.constant(-0.5);
        let prior_quad = ctx.mul(half, ssq);
        let norm = ctx.constant(-0.5 * self.dim as f64 * LN_2PI);
        let prior = ctx.add(prior_quad, norm);
        ctx.add(prior, logdet)
    }

    /// Record `log p(point; theta_f)` on a tape whose parameters are this
    /// flow's parameters.
    pub fn record_log_pdf(&self, tape: &mut Tape, point: &[f64]) -> Result<crate::autodiff::NodeId> {
        self.box_domain.check_in_b(point)?;
        let mut ctx = TapeCtx::new(tape);
        Ok(self.log_pdf_with(&mut ctx, point))
    }

    /// Draw `n` points by pushing standard-normal latents through the
    /// inverse map. With `restrict_to_omega`, rejection keeps only points in
    /// the closed target domain and fails with the observed acceptance rate
    /// after `MAX_SAMPLE_ATTEMPTS_PER_POINT * n` total draws.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng, restrict_to_omega: bool) -> Result<SampleOutcome> {
        if n == 0 {
            return Err(Error::EmptyInput { what: "sample count" });
        }
        let mut points = Vec::with_capacity(n);
        let mut attempts = 0usize;
        let budget = MAX_SAMPLE_ATTEMPTS_PER_POINT * n;
        let mut z = vec![0.0f64; self.dim];
        while points.len() < n {
            if attempts >= budget {
                let rate = points.len() as f64 / attempts as f64;
                return Err(Error::AcceptanceStarvation {
                    requested: n,
                    accepted: points.len(),
                    attempts,
                    rate,
                    stage: None,
                });
            }
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            attempts += 1;
            let x = self.inverse(&z)?;
            if !restrict_to_omega || self.box_domain.contains_omega(&x) {
                points.push(x);
            }
        }
        let acceptance = n as f64 / attempts as f64;
        Ok(SampleOutcome { points, attempts, acceptance })
    }
}

/// Result of a sampling call, including the observed acceptance rate when
/// rejection was active.
pub struct SampleOutcome {
    pub points: Vec<Vec<f64>>,
    pub attempts: usize,
    pub acceptance: f64,
}

/// Importance weights for a batch drawn from `proposal`, evaluated against
/// the unnormalized target. Computed in log space; `self_normalize` rescales
/// the weights to mean 1 over the batch (a positive per-batch rescale that
/// leaves the minimizer unchanged while removing the unknown normalizing
/// constant from step sizes).
fn importance_weights(
    proposal: &FlowModel,
    target: &(dyn Fn(&[f64]) -> f64 + Sync),
    batch: &[Vec<f64>],
    self_normalize: bool,
) -> Result<Vec<f64>> {
    let m = batch.len();
    let logs: Vec<Option<f64>> = {
        let chunks = parallel::chunked_map(batch, POINT_CHUNK, |_, pts| {
            pts.iter()
                .map(|p| {
                    let r = target(p);
                    let lp = proposal.log_pdf(p)?;
                    if !lp.is_finite() {
                        return Err(Error::BrokenSupport);
                    }
                    if !(r >= 0.0) {
                        return Err(Error::InvalidConfig(
                            "target density must be nonnegative".into(),
                        ));
                    }
                    Ok(if r == 0.0 { None } else { Some(r.ln() - lp) })
                })
                .collect::<Result<Vec<_>>>()
        });
        let mut all = Vec::with_capacity(m);
        for c in chunks {
            all.extend(c?);
        }
        all
    };
    let max_log = logs
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if max_log == f64::NEG_INFINITY {
        // Target vanished on the whole batch.
        return Ok(vec![0.0; m]);
    }
    let mut w: Vec<f64> = logs
        .iter()
        .map(|l| l.map_or(0.0, |lw| (lw - max_log).exp()))
        .collect();
    if self_normalize {
        let s: f64 = w.iter().sum();
        let scale = m as f64 / s;
        for wi in w.iter_mut() {
            *wi *= scale;
        }
    } else {
        let scale = max_log.exp();
        for wi in w.iter_mut() {
            *wi *= scale;
        }
    }
    Ok(w)
}

/// Importance-sampled cross entropy `-(1/m) sum_i w_i log p(x_i; theta_f)`
/// with `w_i = target(x_i) / p_proposal(x_i)`.
pub fn ce_loss(
    flow: &FlowModel,
    proposal: &FlowModel,
    target: &(dyn Fn(&[f64]) -> f64 + Sync),
    batch: &[Vec<f64>],
    self_normalize: bool,
) -> Result<f64> {
    let (loss, _) = ce_loss_grad_inner(flow, proposal, target, batch, self_normalize, false)?;
    Ok(loss)
}

/// Cross entropy and its gradient with respect to the flow parameters.
/// Only the trained flow receives gradients; the proposal and the target
/// enter as fixed weights.
pub fn ce_loss_grad(
    flow: &FlowModel,
    proposal: &FlowModel,
    target: &(dyn Fn(&[f64]) -> f64 + Sync),
    batch: &[Vec<f64>],
    self_normalize: bool,
) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = ce_loss_grad_inner(flow, proposal, target, batch, self_normalize, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn ce_loss_grad_inner(
    flow: &FlowModel,
    proposal: &FlowModel,
    target: &(dyn Fn(&[f64]) -> f64 + Sync),
    batch: &[Vec<f64>],
    self_normalize: bool,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput { what: "cross-entropy batch" });
    }
    let m = batch.len();
    let weights = importance_weights(proposal, target, batch, self_normalize)?;
    if weights.iter().all(|&w| w == 0.0) {
        return Ok((0.0, want_grad.then(|| vec![0.0; flow.params.len()])));
    }
    let indexed: Vec<usize> = (0..m).collect();
    let chunks = parallel::chunked_map(&indexed, POINT_CHUNK, |_, idxs| -> Result<(f64, Option<Vec<f64>>)> {
        if want_grad {
            let mut tape = Tape::new(&flow.params);
            let mut terms = Vec::with_capacity(idxs.len());
            for &i in idxs {
                if weights[i] == 0.0 {
                    continue;
                }
                let lp = flow.record_log_pdf(&mut tape, &batch[i])?;
                let w = tape.constant(weights[i]);
                terms.push(tape.mul(w, lp));
            }
            if terms.is_empty() {
                return Ok((0.0, Some(vec![0.0; flow.params.len()])));
            }
            let s = tape.sum(&terms);
            let grad = tape.grad_params(s)?;
            Ok((tape.value(s), Some(grad)))
        } else {
            let mut acc = 0.0;
            for &i in idxs {
                if weights[i] == 0.0 {
                    continue;
                }
                acc += weights[i] * flow.log_pdf(&batch[i])?;
            }
            Ok((acc, None))
        }
    });
    let scale = -1.0 / m as f64;
    let mut loss = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; flow.params.len()]);
    for c in chunks {
        let (s, g) = c?;
        loss += s;
        if let (Some(acc), Some(gc)) = (grad.as_mut(), g) {
            for (a, v) in acc.iter_mut().zip(gc) {
                *a += v;
            }
        }
    }
    loss *= scale;
    if let Some(acc) = grad.as_mut() {
        for a in acc.iter_mut() {
            *a *= scale;
        }
    }
    Ok((loss, grad))
}

/// Cross-entropy training against an unnormalized target. Each epoch draws
/// a fresh batch of `m` points from the frozen proposal and takes one Adam
/// step on the flow. Returns the trained flow and the per-epoch losses.
#[allow(clippy::too_many_arguments)]
pub fn train_flow(
    mut flow: FlowModel,
    proposal: &FlowModel,
    target: &(dyn Fn(&[f64]) -> f64 + Sync),
    epochs: usize,
    batch_m: usize,
    lr: f64,
    self_normalize: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(FlowModel, Vec<f64>)> {
    let mut losses = Vec::with_capacity(epochs);
    let mut state = AdamState::new(flow.params.len());
    let hyper = AdamHyper { lr, ..AdamHyper::default() };
    for _ in 0..epochs {
        let batch = proposal.sample(batch_m, rng, false)?;
        let (loss, grad) = ce_loss_grad(&flow, proposal, target, &batch.points, self_normalize)?;
        adam_step(&mut flow.params, &grad, &mut state, &hyper)?;
        losses.push(loss);
    }
    Ok((flow, losses))
}

// --- checkpoint I/O ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct UnitCheckpoint {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    actnorm_log_scale: Vec<f64>,
    actnorm_bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FlowCheckpoint {
    version: u32,
    kind: String,
    dim: usize,
    #[serde(rename = "K")]
    k_blocks: usize,
    #[serde(rename = "L")]
    l_layers: usize,
    hidden: usize,
    clamp: f64,
    #[serde(rename = "box")]
    box_domain: BoxDomain,
    frozen_schedule: Vec<usize>,
    layers: Vec<UnitCheckpoint>,
}

impl FlowModel {
    pub fn to_checkpoint_json(&self) -> serde_json::Value {
        let mut layers = Vec::with_capacity(self.units.len());
        for u in &self.units {
            let mut weights = Vec::new();
            let mut biases = Vec::new();
            let mut off = u.subnet_off;
            for w in u.subnet_sizes.windows(2) {
                let (fi, fo) = (w[0], w[1]);
                weights.push(self.params[off..off + fi * fo].to_vec());
                off += fi * fo;
                biases.push(self.params[off..off + fo].to_vec());
                off += fo;
            }
            layers.push(UnitCheckpoint {
                weights,
                biases,
                actnorm_log_scale: self.params[u.act_ls_off..u.act_ls_off + u.active].to_vec(),
                actnorm_bias: self.params[u.act_b_off..u.act_b_off + u.active].to_vec(),
            });
        }
        serde_json::to_value(FlowCheckpoint {
            version: 1,
            kind: "flow".into(),
            dim: self.dim,
            k_blocks: self.k_blocks,
            l_layers: self.l_layers,
            hidden: self.hidden,
            clamp: self.clamp,
            box_domain: self.box_domain.clone(),
            frozen_schedule: self.frozen_schedule.clone(),
            layers,
        })
        .expect("flow checkpoint serialization")
    }

    pub fn from_checkpoint_json(value: &serde_json::Value) -> Result<FlowModel> {
        let ckpt: FlowCheckpoint = serde_json::from_value(value.clone())?;
        if ckpt.kind != "flow" {
            return Err(Error::CheckpointKind { expected: "flow".into(), found: ckpt.kind });
        }
        if ckpt.version != 1 {
            return Err(Error::InvalidConfig(format!("unsupported flow checkpoint version {}", ckpt.version)));
        }
        let mut flow = flow_init(ckpt.dim, ckpt.k_blocks, ckpt.l_layers, ckpt.hidden, ckpt.box_domain, 0)?
            .with_clamp(ckpt.clamp);
        if ckpt.layers.len() != flow.units.len() {
            return Err(Error::DimensionMismatch {
                what: "flow checkpoint layer count",
                expected: flow.units.len(),
                actual: ckpt.layers.len(),
            });
        }
        for (u, lc) in flow.units.iter().zip(ckpt.layers.iter()) {
            let mut off = u.subnet_off;
            for (li, w) in u.subnet_sizes.windows(2).enumerate() {
                let (fi, fo) = (w[0], w[1]);
                if lc.weights[li].len() != fi * fo || lc.biases[li].len() != fo {
                    return Err(Error::DimensionMismatch {
                        what: "flow checkpoint layer shape",
                        expected: fi * fo,
                        actual: lc.weights[li].len(),
                    });
                }
                flow.params[off..off + fi * fo].copy_from_slice(&lc.weights[li]);
                off += fi * fo;
                flow.params[off..off + fo].copy_from_slice(&lc.biases[li]);
                off += fo;
            }
            flow.params[u.act_ls_off..u.act_ls_off + u.active].copy_from_slice(&lc.actnorm_log_scale);
            flow.params[u.act_b_off..u.act_b_off + u.active].copy_from_slice(&lc.actnorm_bias);
        }
        Ok(flow)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint_json())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FlowModel> {
        let data = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&data)?;
        FlowModel::from_checkpoint_json(&value)
    }
}
