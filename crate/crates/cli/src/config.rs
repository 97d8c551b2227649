//! Experiment configuration: JSON on disk, fully validated on load.
//! Unknown keys are rejected everywhere.

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use das2_core::nets::{branch_trunk_init, mlp_init, Surrogate};
use das2_core::problems::{OplearnCheb, ParamOde, ValidationSpec};
use das2_core::trainer::AdaptiveConfig;

fn default_u0() -> f64 {
    1.0
}
fn default_xi_min() -> f64 {
    -3.0
}
fn default_xi_max() -> f64 {
    3.0
}
fn default_m_bound() -> f64 {
    1.0
}
fn default_degree() -> usize {
    8
}
fn default_decay() -> f64 {
    6.0
}
fn default_clamp() -> f64 {
    1.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "name", rename_all = "snake_case")]
pub enum ProblemSpec {
    ParamOde {
        #[serde(default = "default_u0")]
        u0: f64,
        #[serde(default = "default_xi_min")]
        xi_min: f64,
        #[serde(default = "default_xi_max")]
        xi_max: f64,
    },
    OplearnCheb {
        #[serde(default = "default_m_bound")]
        m_bound: f64,
        #[serde(default = "default_degree")]
        degree: usize,
        #[serde(default = "default_decay")]
        decay: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum SurrogateSpec {
    /// Plain MLP on the concatenated `(x, xi)` input.
    Mlp { hidden: Vec<usize> },
    /// Branch–trunk composite with `interaction` outputs per sub-network.
    BranchTrunk {
        trunk_hidden: Vec<usize>,
        branch_hidden: Vec<usize>,
        interaction: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub k_blocks: usize,
    pub l_layers: usize,
    pub hidden: usize,
    #[serde(default = "default_clamp")]
    pub clamp: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, untagged)]
pub enum ValidationConfig {
    /// Meshgrid over the joint domain, with an optional smaller grid
    /// evaluated every epoch.
    Grid {
        grid: [usize; 2],
        #[serde(default)]
        epoch_grid: Option<[usize; 2]>,
    },
    /// Operator-learning protocol: box + ball parameter draws crossed with
    /// a uniform spatial grid; `epoch_subset` caps the per-epoch subset.
    Operator {
        n_box: usize,
        n_ball: usize,
        x_points: usize,
        #[serde(default)]
        epoch_subset: Option<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub surrogate: SurrogateSpec,
    pub flow: FlowSpec,
    pub adaptive: AdaptiveConfig,
    pub validation: ValidationConfig,
    #[serde(default)]
    pub output_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.adaptive.validate()?;
        match (&self.problem, &self.surrogate) {
            (ProblemSpec::ParamOde { .. }, SurrogateSpec::BranchTrunk { .. }) => {
                bail!("param_ode uses the mlp surrogate");
            }
            (ProblemSpec::OplearnCheb { .. }, SurrogateSpec::Mlp { .. }) => {
                bail!("oplearn_cheb uses the branch_trunk surrogate");
            }
            _ => {}
        }
        match (&self.problem, &self.validation) {
            (ProblemSpec::ParamOde { .. }, ValidationConfig::Operator { .. }) => {
                bail!("param_ode validation uses the meshgrid form {{\"grid\": [nx, nxi]}}");
            }
            (ProblemSpec::OplearnCheb { .. }, ValidationConfig::Grid { .. }) => {
                bail!("oplearn_cheb validation uses the operator form {{\"n_box\", \"n_ball\", \"x_points\"}}");
            }
            _ => {}
        }
        if let SurrogateSpec::BranchTrunk { interaction, .. } = &self.surrogate {
            if *interaction == 0 {
                bail!("interaction width must be positive");
            }
        }
        if self.flow.k_blocks == 0 || self.flow.l_layers == 0 || self.flow.hidden == 0 {
            bail!("flow block/layer counts and hidden width must be positive");
        }
        Ok(())
    }

    /// Hash of every semantic field (everything except the output
    /// directory), hex-encoded SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Semantic<'a> {
            problem: &'a ProblemSpec,
            surrogate: &'a SurrogateSpec,
            flow: &'a FlowSpec,
            adaptive: &'a AdaptiveConfig,
            validation: &'a ValidationConfig,
        }
        let canonical = serde_json::to_string(&Semantic {
            problem: &self.problem,
            surrogate: &self.surrogate,
            flow: &self.flow,
            adaptive: &self.adaptive,
            validation: &self.validation,
        })
        .expect("config serialization");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_problem(&self) -> BuiltProblem {
        match self.problem {
            ProblemSpec::ParamOde { u0, xi_min, xi_max } => {
                BuiltProblem::Ode(ParamOde { u0, xi_min, xi_max })
            }
            ProblemSpec::OplearnCheb { m_bound, degree, decay } => {
                BuiltProblem::Op(OplearnCheb { m_bound, degree, decay })
            }
        }
    }

    /// Initialize the surrogate for the given problem dimensions.
    pub fn build_surrogate(&self, spatial_dim: usize, param_dim: usize, seed: u64) -> anyhow::Result<Surrogate> {
        let net = match &self.surrogate {
            SurrogateSpec::Mlp { hidden } => {
                let mut sizes = vec![spatial_dim + param_dim];
                sizes.extend_from_slice(hidden);
                sizes.push(1);
                mlp_init(&sizes, seed)?
            }
            SurrogateSpec::BranchTrunk { trunk_hidden, branch_hidden, interaction } => {
                let mut trunk = vec![spatial_dim];
                trunk.extend_from_slice(trunk_hidden);
                trunk.push(*interaction);
                let mut branch = vec![param_dim];
                branch.extend_from_slice(branch_hidden);
                branch.push(*interaction);
                branch_trunk_init(&trunk, &branch, seed)?
            }
        };
        Ok(net)
    }

    pub fn full_validation_spec(&self) -> ValidationSpec {
        match &self.validation {
            ValidationConfig::Grid { grid, .. } => ValidationSpec::Grid { nx: grid[0], nxi: grid[1] },
            ValidationConfig::Operator { n_box, n_ball, x_points, .. } => ValidationSpec::OperatorSet {
                n_box: *n_box,
                n_ball: *n_ball,
                n_x: *x_points,
            },
        }
    }

    pub fn epoch_validation_spec(&self) -> Option<ValidationSpec> {
        match &self.validation {
            ValidationConfig::Grid { epoch_grid, .. } => {
                epoch_grid.map(|g| ValidationSpec::Grid { nx: g[0], nxi: g[1] })
            }
            ValidationConfig::Operator { epoch_subset, x_points, .. } => {
                epoch_subset.map(|n| ValidationSpec::OperatorSet {
                    n_box: n / 2,
                    n_ball: n - n / 2,
                    n_x: *x_points,
                })
            }
        }
    }
}

pub enum BuiltProblem {
    Ode(ParamOde),
    Op(OplearnCheb),
}

/// Derive an independent sub-seed for a named purpose from the master seed.
pub fn derived_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub const SEED_SURROGATE: u64 = 1;
pub const SEED_FLOW: u64 = 2;
pub const SEED_VALIDATION: u64 = 3;
