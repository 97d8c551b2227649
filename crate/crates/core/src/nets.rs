//! Surrogate architectures: plain MLP over `(x, xi)` and the branch–trunk
//! composite, plus hard-constraint ansatz wrappers that bake the initial
//! condition into the model and make the boundary penalty term inert.
//!
//! Parameters live in one flat vector (weights row-major, bias after each
//! layer's weights; trunk before branch; the composite bias `b0` last) so
//! the optimizer and the tape index them uniformly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::{Arith, Dual, DualCtx, NodeId, PlainCtx, Tape, TapeCtx};
use crate::error::{Error, Result};

/// Hard-constraint wrapper applied to the raw network output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ansatz {
    /// Raw network output.
    None,
    /// `u0 + x * raw`: output equals `u0` exactly at `x = 0`.
    IcShift(f64),
    /// `x * raw`: output vanishes exactly at `x = 0`.
    IcZero,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SurrogateKind {
    Mlp { sizes: Vec<usize> },
    /// Trunk takes the spatial coordinate, branch takes the parameters;
    /// both emit `l` outputs combined as `sum_i q_i(x) t_i(xi) + b0`.
    BranchTrunk {
        trunk_sizes: Vec<usize>,
        branch_sizes: Vec<usize>,
    },
}

/// The approximate parametric solution `u_theta(x, xi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub kind: SurrogateKind,
    pub ansatz: Ansatz,
    pub params: Vec<f64>,
}

fn mlp_param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn validate_sizes(sizes: &[usize], what: &'static str) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "{what} needs at least an input and an output layer, got {sizes:?}"
        )));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidConfig(format!("{what} has a zero-width layer: {sizes:?}")));
    }
    Ok(())
}

fn xavier_fill(params: &mut Vec<f64>, sizes: &[usize], rng: &mut ChaCha8Rng) {
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            params.push(rng.gen_range(-a..a));
        }
        params.extend(std::iter::repeat(0.0).take(fan_out));
    }
}

/// Initialize a plain MLP surrogate: Xavier-uniform weights
/// (`+-sqrt(6/(fan_in+fan_out))`), zero biases, reproducible per seed.
pub fn mlp_init(layer_sizes: &[usize], seed: u64) -> Result<Surrogate> {
    validate_sizes(layer_sizes, "mlp layer_sizes")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(mlp_param_count(layer_sizes));
    xavier_fill(&mut params, layer_sizes, &mut rng);
    Ok(Surrogate {
        kind: SurrogateKind::Mlp { sizes: layer_sizes.to_vec() },
        ansatz: Ansatz::None,
        params,
    })
}

/// Initialize a branch–trunk surrogate. Both sub-networks must agree on the
/// interaction width `l`; `b0` starts at zero and is trained with the rest.
pub fn branch_trunk_init(trunk_sizes: &[usize], branch_sizes: &[usize], seed: u64) -> Result<Surrogate> {
    validate_sizes(trunk_sizes, "trunk layer_sizes")?;
    validate_sizes(branch_sizes, "branch layer_sizes")?;
    let (tl, bl) = (*trunk_sizes.last().unwrap(), *branch_sizes.last().unwrap());
    if tl != bl {
        return Err(Error::DimensionMismatch {
            what: "branch/trunk output width",
            expected: tl,
            actual: bl,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params =
        Vec::with_capacity(mlp_param_count(trunk_sizes) + mlp_param_count(branch_sizes) + 1);
    xavier_fill(&mut params, trunk_sizes, &mut rng);
    xavier_fill(&mut params, branch_sizes, &mut rng);
    params.push(0.0); // b0
    Ok(Surrogate {
        kind: SurrogateKind::BranchTrunk {
            trunk_sizes: trunk_sizes.to_vec(),
            branch_sizes: branch_sizes.to_vec(),
        },
        ansatz: Ansatz::None,
        params,
    })
}

/// Feed-forward pass of one MLP over context values, tanh on hidden layers,
/// linear final layer. `offset` is where the MLP's parameters start in the
/// flat vector.
pub(crate) fn mlp_forward_with<C: Arith>(
    ctx: &mut C,
    offset: usize,
    sizes: &[usize],
    inputs: &[C::V],
) -> Vec<C::V> {
    debug_assert_eq!(inputs.len(), sizes[0]);
    let mut cur: Vec<C::V> = inputs.to_vec();
    let mut next: Vec<C::V> = Vec::new();
    let mut row: Vec<C::V> = Vec::new();
    let mut off = offset;
    let n_layers = sizes.len() - 1;
    for (li, w) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bias_off = off + fan_in * fan_out;
        next.clear();
        for o in 0..fan_out {
            row.clear();
            for i in 0..fan_in {
                row.push(ctx.param(off + o * fan_in + i));
            }
            let z = ctx.dot(&row, &cur);
            let b = ctx.param(bias_off + o);
            let zb = ctx.add(z, b);
            next.push(if li + 1 < n_layers { ctx.tanh(zb) } else { zb });
        }
        std::mem::swap(&mut cur, &mut next);
        off = bias_off + fan_out;
    }
    cur
}

impl Surrogate {
    /// Total input dimension: spatial coordinates first, then parameters.
    pub fn input_dim(&self) -> usize {
        match &self.kind {
            SurrogateKind::Mlp { sizes } => sizes[0],
            SurrogateKind::BranchTrunk { trunk_sizes, branch_sizes } => {
                trunk_sizes[0] + branch_sizes[0]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Interaction width `l` (branch–trunk only).
    pub fn interaction_width(&self) -> Option<usize> {
        match &self.kind {
            SurrogateKind::BranchTrunk { trunk_sizes, .. } => Some(*trunk_sizes.last().unwrap()),
            SurrogateKind::Mlp { .. } => None,
        }
    }

    pub fn with_ansatz(mut self, ansatz: Ansatz) -> Self {
        self.ansatz = ansatz;
        self
    }

    pub(crate) fn trunk_offset(&self) -> usize {
        0
    }

    pub(crate) fn branch_offset(&self) -> usize {
        match &self.kind {
            SurrogateKind::BranchTrunk { trunk_sizes, .. } => mlp_param_count(trunk_sizes),
            SurrogateKind::Mlp { .. } => unreachable!("mlp has no branch"),
        }
    }

    pub(crate) fn b0_index(&self) -> Option<usize> {
        match &self.kind {
            SurrogateKind::BranchTrunk { .. } => Some(self.params.len() - 1),
            SurrogateKind::Mlp { .. } => None,
        }
    }

    /// Trunk outputs `q(x)` as context values.
    pub(crate) fn trunk_with<C: Arith>(&self, ctx: &mut C, x_nodes: &[C::V]) -> Vec<C::V> {
        match &self.kind {
            SurrogateKind::BranchTrunk { trunk_sizes, .. } => {
                mlp_forward_with(ctx, self.trunk_offset(), trunk_sizes, x_nodes)
            }
            SurrogateKind::Mlp { .. } => unreachable!("mlp has no trunk"),
        }
    }

    /// Branch outputs `t(xi)` as context values.
    pub(crate) fn branch_with<C: Arith>(&self, ctx: &mut C, xi_nodes: &[C::V]) -> Vec<C::V> {
        match &self.kind {
            SurrogateKind::BranchTrunk { branch_sizes, .. } => {
                mlp_forward_with(ctx, self.branch_offset(), branch_sizes, xi_nodes)
            }
            SurrogateKind::Mlp { .. } => unreachable!("mlp has no branch"),
        }
    }

    /// `sum_i q_i t_i + b0`.
    pub(crate) fn combine_with<C: Arith>(&self, ctx: &mut C, q: &[C::V], t: &[C::V]) -> C::V {
        let d = ctx.dot(q, t);
        let b0 = ctx.param(self.b0_index().expect("combine on non-composite"));
        ctx.add(d, b0)
    }

    /// Raw (pre-ansatz) output over already-created input nodes.
    pub(crate) fn raw_with<C: Arith>(&self, ctx: &mut C, coord_nodes: &[C::V]) -> Result<C::V> {
        match &self.kind {
            SurrogateKind::Mlp { sizes } => {
                if *sizes.last().unwrap() != 1 {
                    return Err(Error::DimensionMismatch {
                        what: "mlp surrogate output width",
                        expected: 1,
                        actual: *sizes.last().unwrap(),
                    });
                }
                Ok(mlp_forward_with(ctx, 0, sizes, coord_nodes)[0])
            }
            SurrogateKind::BranchTrunk { trunk_sizes, .. } => {
                let nx = trunk_sizes[0];
                let q = self.trunk_with(ctx, &coord_nodes[..nx]);
                let t = self.branch_with(ctx, &coord_nodes[nx..]);
                Ok(self.combine_with(ctx, &q, &t))
            }
        }
    }

    /// Apply the ansatz given the spatial coordinate node.
    pub(crate) fn ansatz_with<C: Arith>(&self, ctx: &mut C, x_node: C::V, raw: C::V) -> C::V {
        match self.ansatz {
            Ansatz::None => raw,
            Ansatz::IcShift(u0) => {
                let c = ctx.constant(u0);
                let xr = ctx.mul(x_node, raw);
                ctx.add(c, xr)
            }
            Ansatz::IcZero => ctx.mul(x_node, raw),
        }
    }

    /// Full evaluation in an arbitrary context. Creates the input nodes
    /// itself, seeding `seed_coord` (if any) for the input derivative.
    pub fn eval_with<C: Arith>(&self, ctx: &mut C, coords: &[f64], seed_coord: Option<usize>) -> Result<C::V> {
        let dim = self.input_dim();
        if coords.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "surrogate input",
                expected: dim,
                actual: coords.len(),
            });
        }
        if let Some(c) = seed_coord {
            if c >= dim {
                return Err(Error::CoordOutOfRange { coord: c, dim });
            }
        }
        let nodes: Vec<C::V> = coords
            .iter()
            .enumerate()
            .map(|(i, &v)| ctx.input(v, seed_coord == Some(i)))
            .collect();
        let raw = self.raw_with(ctx, &nodes)?;
        Ok(self.ansatz_with(ctx, nodes[0], raw))
    }

    /// Plain value at a point.
    pub fn value(&self, coords: &[f64]) -> Result<f64> {
        let mut ctx = PlainCtx::new(&self.params);
        self.eval_with(&mut ctx, coords, None)
    }

    /// Value and derivative with respect to coordinate `seed_coord`,
    /// without building a tape.
    pub fn value_dual(&self, coords: &[f64], seed_coord: usize) -> Result<Dual> {
        let mut ctx = DualCtx::new(&self.params);
        self.eval_with(&mut ctx, coords, Some(seed_coord))
    }
}

/// A scalar recorded on a tape: the tape plus the node holding the value.
pub struct TapedScalar {
    pub tape: Tape,
    pub node: NodeId,
}

impl TapedScalar {
    pub fn value(&self) -> f64 {
        self.tape.value(self.node)
    }
}

/// Evaluate `u_theta` at a point and return the value with a tape
/// sufficient for parameter and input differentiation.
pub fn forward_eval(net: &Surrogate, coords: &[f64]) -> Result<TapedScalar> {
    let mut tape = Tape::new(&net.params);
    let mut ctx = TapeCtx::new(&mut tape);
    let node = net.eval_with(&mut ctx, coords, Some(0))?;
    Ok(TapedScalar { tape, node })
}

/// Derivative of the output with respect to input coordinate `coord`, as a
/// taped quantity (itself differentiable with respect to the parameters).
pub fn grad_input(net: &Surrogate, coords: &[f64], coord: usize) -> Result<TapedScalar> {
    let mut tape = Tape::new(&net.params);
    let node = {
        let mut ctx = TapeCtx::new(&mut tape);
        let out = net.eval_with(&mut ctx, coords, Some(coord))?;
        out
    };
    let d = tape.tangent_of(node)?;
    Ok(TapedScalar { tape, node: d })
}

/// Plain MLP evaluation (kind must be `mlp`, scalar output).
pub fn mlp_eval(net: &Surrogate, coords: &[f64]) -> Result<f64> {
    if !matches!(net.kind, SurrogateKind::Mlp { .. }) {
        return Err(Error::InvalidConfig("mlp_eval on a non-mlp surrogate".into()));
    }
    if coords.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { what: "mlp_eval input" });
    }
    net.value(coords)
}

/// Branch–trunk evaluation `sum_i q_i(x) t_i(xi) + b0` (pre-ansatz
/// composite value, with the ansatz applied on top if configured).
pub fn branch_trunk_eval(net: &Surrogate, x: f64, xi: &[f64]) -> Result<f64> {
    match &net.kind {
        SurrogateKind::BranchTrunk { branch_sizes, .. } => {
            if xi.len() != branch_sizes[0] {
                return Err(Error::DimensionMismatch {
                    what: "branch input",
                    expected: branch_sizes[0],
                    actual: xi.len(),
                });
            }
            let mut coords = Vec::with_capacity(1 + xi.len());
            coords.push(x);
            coords.extend_from_slice(xi);
            net.value(&coords)
        }
        SurrogateKind::Mlp { .. } => {
            Err(Error::InvalidConfig("branch_trunk_eval on a non-composite surrogate".into()))
        }
    }
}

/// Apply the ansatz to a raw output value.
pub fn apply_ansatz(net: &Surrogate, raw: f64, x: f64) -> f64 {
    match net.ansatz {
        Ansatz::None => raw,
        Ansatz::IcShift(u0) => u0 + x * raw,
        Ansatz::IcZero => x * raw,
    }
}

// --- checkpoint I/O ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayerSizesRepr {
    Single(Vec<usize>),
    Pair(Vec<Vec<usize>>),
}

#[derive(Serialize, Deserialize)]
struct SurrogateCheckpoint {
    version: u32,
    kind: String,
    layer_sizes: LayerSizesRepr,
    activation: String,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b0: Option<f64>,
    ansatz: Ansatz,
}

fn split_layers(params: &[f64], sizes: &[usize], weights: &mut Vec<Vec<f64>>, biases: &mut Vec<Vec<f64>>) {
    let mut off = 0;
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        weights.push(params[off..off + fan_in * fan_out].to_vec());
        off += fan_in * fan_out;
        biases.push(params[off..off + fan_out].to_vec());
        off += fan_out;
    }
}

impl Surrogate {
    pub fn to_checkpoint_json(&self) -> serde_json::Value {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let (kind, layer_sizes, b0) = match &self.kind {
            SurrogateKind::Mlp { sizes } => {
                split_layers(&self.params, sizes, &mut weights, &mut biases);
                ("mlp".to_string(), LayerSizesRepr::Single(sizes.clone()), None)
            }
            SurrogateKind::BranchTrunk { trunk_sizes, branch_sizes } => {
                split_layers(&self.params, trunk_sizes, &mut weights, &mut biases);
                split_layers(&self.params[self.branch_offset()..], branch_sizes, &mut weights, &mut biases);
                (
                    "branch_trunk".to_string(),
                    LayerSizesRepr::Pair(vec![trunk_sizes.clone(), branch_sizes.clone()]),
                    Some(self.params[self.params.len() - 1]),
                )
            }
        };
        serde_json::to_value(SurrogateCheckpoint {
            version: 1,
            kind,
            layer_sizes,
            activation: "tanh".to_string(),
            weights,
            biases,
            b0,
            ansatz: self.ansatz,
        })
        .expect("surrogate checkpoint serialization")
    }

    pub fn from_checkpoint_json(value: &serde_json::Value) -> Result<Surrogate> {
        let ckpt: SurrogateCheckpoint = serde_json::from_value(value.clone())?;
        if ckpt.version != 1 {
            return Err(Error::InvalidConfig(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        let mut params = Vec::new();
        for (w, b) in ckpt.weights.iter().zip(ckpt.biases.iter()) {
            params.extend_from_slice(w);
            params.extend_from_slice(b);
        }
        let kind = match (ckpt.kind.as_str(), &ckpt.layer_sizes) {
            ("mlp", LayerSizesRepr::Single(sizes)) => SurrogateKind::Mlp { sizes: sizes.clone() },
            ("branch_trunk", LayerSizesRepr::Pair(pair)) if pair.len() == 2 => {
                params.push(ckpt.b0.ok_or_else(|| {
                    Error::InvalidConfig("branch_trunk checkpoint missing b0".into())
                })?);
                SurrogateKind::BranchTrunk {
                    trunk_sizes: pair[0].clone(),
                    branch_sizes: pair[1].clone(),
                }
            }
            (k, _) => {
                return Err(Error::CheckpointKind {
                    expected: "mlp | branch_trunk".into(),
                    found: k.into(),
                })
            }
        };
        let net = Surrogate { kind, ansatz: ckpt.ansatz, params };
        let expected = match &net.kind {
            SurrogateKind::Mlp { sizes } => mlp_param_count(sizes),
            SurrogateKind::BranchTrunk { trunk_sizes, branch_sizes } => {
                mlp_param_count(trunk_sizes) + mlp_param_count(branch_sizes) + 1
            }
        };
        if net.params.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "checkpoint parameter count",
                expected,
                actual: net.params.len(),
            });
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint_json())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Surrogate> {
        let data = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&data)?;
        Surrogate::from_checkpoint_json(&value)
    }
}
