//! Experiment orchestration and artifact export. Everything a run produces
//! lands under its output directory: metrics.csv, summary.json, the model
//! checkpoints, and the final training set.

use anyhow::{bail, Context};
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use das2_core::flow::{flow_init, FlowModel};
use das2_core::nets::Surrogate;
use das2_core::problems::{OplearnCheb, ParamOde, Problem, ValidationSpec};
use das2_core::sampling::RngStream;
use das2_core::trainer::{
    das2_joint, das2_marginal, evaluate_grid, run_baseline, Baseline, Mode, RunRecord,
    ValidationData,
};

use crate::config::{
    derived_seed, BuiltProblem, ExperimentConfig, SEED_FLOW, SEED_SURROGATE, SEED_VALIDATION,
};

#[derive(Serialize)]
struct Budget {
    points: usize,
    epochs: usize,
}

#[derive(Serialize)]
struct Summary {
    final_mse: f64,
    final_rel_l2: f64,
    budget: Budget,
    seed: u64,
    config_hash: String,
}

pub fn run_experiment(
    config_path: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        cfg.adaptive.seed = seed;
    }
    let out_dir = out_override
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/out"));
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;

    match cfg.build_problem() {
        BuiltProblem::Ode(p) => execute(&p, &cfg, &out_dir),
        BuiltProblem::Op(p) => execute(&p, &cfg, &out_dir),
    }
}

fn execute<P: Problem>(problem: &P, cfg: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<()> {
    let started = Instant::now();
    let adaptive = &cfg.adaptive;
    let seed = adaptive.seed;
    let net = cfg.build_surrogate(
        problem.spatial_dim(),
        problem.param_dim(),
        derived_seed(seed, SEED_SURROGATE),
    )?;
    let val_seed = derived_seed(seed, SEED_VALIDATION);
    let full = problem.build_validation(&cfg.full_validation_spec(), val_seed)?;
    let epoch = cfg
        .epoch_validation_spec()
        .map(|s| problem.build_validation(&s, val_seed.wrapping_add(1)))
        .transpose()?;
    let val = ValidationData { full, epoch };

    let flow_dim = match adaptive.mode {
        Mode::Joint => problem.spatial_dim() + problem.param_dim(),
        Mode::Marginal => problem.param_dim(),
    };
    let flow_box = match adaptive.mode {
        Mode::Joint => problem.joint_domain(adaptive.box_margin)?,
        Mode::Marginal => problem.param_domain(adaptive.box_margin)?,
    };
    let flow = flow_init(
        flow_dim,
        cfg.flow.k_blocks,
        cfg.flow.l_layers,
        cfg.flow.hidden,
        flow_box,
        derived_seed(seed, SEED_FLOW),
    )?
    .with_clamp(cfg.flow.clamp);

    let spatial_dim = problem.spatial_dim();
    let (record, surrogate, flow_out, training_set) = if adaptive.baseline == Baseline::None {
        let out = match adaptive.mode {
            Mode::Joint => das2_joint(adaptive, problem, net, flow, &val)?,
            Mode::Marginal => das2_marginal(adaptive, problem, net, flow, &val)?,
        };
        (out.record, out.surrogate, Some(out.flow), out.training_set)
    } else {
        let out = run_baseline(adaptive, problem, net, &val)?;
        (out.record, out.surrogate, None, out.training_set)
    };

    write_artifacts(cfg, out_dir, &record, &surrogate, flow_out.as_ref(), &training_set, spatial_dim, adaptive.mode)?;
    let last = record
        .stage_val_rows()
        .last()
        .map(|r| (r.val_mse.unwrap_or(f64::NAN), r.val_rel_l2.unwrap_or(f64::NAN)))
        .unwrap_or((f64::NAN, f64::NAN));
    println!(
        "run complete: final mse {:.6e}, rel l2 {:.6e}, {} points, {:.1}s",
        last.0,
        last.1,
        training_set.len(),
        started.elapsed().as_secs_f64()
    );
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn write_artifacts(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    record: &RunRecord,
    surrogate: &Surrogate,
    flow: Option<&FlowModel>,
    training_set: &das2_core::sampling::TrainingSet,
    spatial_dim: usize,
    mode: Mode,
) -> anyhow::Result<()> {
    let mut metrics = BufWriter::new(File::create(out_dir.join("metrics.csv"))?);
    record.write_csv(&mut metrics)?;
    metrics.flush()?;

    surrogate.save(&out_dir.join("surrogate.json"))?;
    if let Some(f) = flow {
        f.save(&out_dir.join("flow.json"))?;
    }

    let set_spatial = match mode {
        Mode::Joint => spatial_dim,
        Mode::Marginal => 0,
    };
    let mut set_csv = BufWriter::new(File::create(out_dir.join("training_set.csv"))?);
    training_set.write_csv(set_spatial, &mut set_csv)?;
    set_csv.flush()?;

    let last = record.stage_val_rows().last().cloned().cloned();
    let summary = Summary {
        final_mse: last.as_ref().and_then(|r| r.val_mse).unwrap_or(f64::NAN),
        final_rel_l2: last.as_ref().and_then(|r| r.val_rel_l2).unwrap_or(f64::NAN),
        budget: Budget {
            points: training_set.len(),
            epochs: cfg.adaptive.n_adaptive * cfg.adaptive.n_e,
        },
        seed: cfg.adaptive.seed,
        config_hash: cfg.config_hash(),
    };
    let mut summary_file = File::create(out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut summary_file, &summary)?;
    summary_file.write_all(b"\n")?;
    Ok(())
}

// --- eval ----------------------------------------------------------------------

fn parse_grid_spec(problem: &str, spec: &str) -> anyhow::Result<ValidationSpec> {
    match problem {
        "param_ode" => {
            let parts: Vec<&str> = spec.split('x').collect();
            if parts.len() != 2 {
                bail!("grid spec for param_ode is NXxNXI, e.g. 256x256");
            }
            Ok(ValidationSpec::Grid { nx: parts[0].parse()?, nxi: parts[1].parse()? })
        }
        "oplearn_cheb" => {
            let mut n_box = None;
            let mut n_ball = None;
            let mut n_x = None;
            for part in spec.split(',') {
                let (key, value) = part
                    .split_once(':')
                    .with_context(|| format!("bad grid component {part}"))?;
                match key {
                    "box" => n_box = Some(value.parse()?),
                    "ball" => n_ball = Some(value.parse()?),
                    "x" => n_x = Some(value.parse()?),
                    other => bail!("unknown grid component {other}"),
                }
            }
            Ok(ValidationSpec::OperatorSet {
                n_box: n_box.context("grid spec needs box:N")?,
                n_ball: n_ball.context("grid spec needs ball:N")?,
                n_x: n_x.context("grid spec needs x:N")?,
            })
        }
        other => bail!("unknown problem {other} (expected param_ode or oplearn_cheb)"),
    }
}

pub fn eval_checkpoint(
    checkpoint: &Path,
    problem_name: &str,
    grid_spec: &str,
    val_seed: u64,
    pointwise: Option<PathBuf>,
) -> anyhow::Result<()> {
    let net = Surrogate::load(checkpoint)?;
    let spec = parse_grid_spec(problem_name, grid_spec)?;
    let (val, expected_dim) = match problem_name {
        "param_ode" => {
            let p = ParamOde::default();
            (p.build_validation(&spec, val_seed)?, 1 + p.param_dim())
        }
        "oplearn_cheb" => {
            let p = OplearnCheb::default();
            (p.build_validation(&spec, val_seed)?, 1 + p.param_dim())
        }
        other => bail!("unknown problem {other}"),
    };
    if net.input_dim() != expected_dim {
        bail!(
            "checkpoint kind mismatch: surrogate expects {} inputs, problem {} provides {}",
            net.input_dim(),
            problem_name,
            expected_dim
        );
    }
    let metrics = evaluate_grid(&net, &val)?;
    println!("mse {}", metrics.mse);
    println!("rel_l2 {}", metrics.rel_l2);
    if let Some(path) = pointwise {
        let mut out = BufWriter::new(File::create(&path)?);
        let dim = val.points[0].dim();
        let mut header: Vec<String> = (0..dim).map(|i| format!("c_{i}")).collect();
        header.extend(["u".into(), "reference".into(), "abs_err".into()]);
        writeln!(out, "{}", header.join(","))?;
        for (p, &o) in val.points.iter().zip(val.oracle.iter()) {
            let u = net.value(&p.coords)?;
            let mut row: Vec<String> = p.coords.iter().map(|v| format!("{v}")).collect();
            row.push(format!("{u}"));
            row.push(format!("{o}"));
            row.push(format!("{}", (u - o).abs()));
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        println!("pointwise errors written to {}", path.display());
    }
    Ok(())
}

// --- sample --------------------------------------------------------------------

pub fn sample_flow(
    flow_path: &Path,
    n: usize,
    seed: u64,
    restrict: bool,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let flow = FlowModel::load(flow_path)?;
    let header: Vec<String> = (0..flow.dim).map(|i| format!("c_{i}")).collect();
    let mut lines = vec![header.join(",")];
    if n > 0 {
        let mut rng = RngStream::new(seed, 0).rng();
        let outcome = flow.sample(n, &mut rng, restrict)?;
        if restrict {
            println!("acceptance rate {:.4}", outcome.acceptance);
        }
        for p in &outcome.points {
            lines.push(p.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","));
        }
    }
    let text = lines.join("\n") + "\n";
    match out {
        Some(path) => {
            std::fs::write(&path, text)?;
            println!("{} points written to {}", n, path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
