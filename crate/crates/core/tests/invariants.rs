//! Cross-module invariants: gradient nesting, flow normalization and
//! sampling consistency, and the residual/value-error coupling regression.

use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use das2_core::autodiff::{check_gradient, Tape, TapeCtx};
use das2_core::flow::{flow_init, BoxDomain, FlowModel};
use das2_core::nets::{grad_input, mlp_init, Ansatz};
use das2_core::problems::{exact_param_ode, linspace, ParamOde, ValidationSpec};
use das2_core::sampling::{cutoff_h, Point};
use das2_core::trainer::{adam_step, evaluate_grid, weighted_residual_loss, AdamHyper, AdamState, Mode};

fn unit_box(d: usize) -> BoxDomain {
    BoxDomain::with_margin(vec![0.0; d], vec![1.0; d], 0.05).unwrap()
}

fn jitter(flow: &mut FlowModel, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in flow.params.iter_mut() {
        *p += rng.gen_range(-scale..scale);
    }
}

#[test]
fn nesting_gradient_matches_finite_differences() {
    // d/dtheta of (du/dx)^2 on a random 2-4-1 net.
    let net = mlp_init(&[2, 4, 1], 17).unwrap();
    let point = [0.35, -0.8];
    let f = |theta: &[f64]| {
        let mut n = net.clone();
        n.params.copy_from_slice(theta);
        let taped = grad_input(&n, &point, 0).unwrap();
        let mut tape = taped.tape;
        let loss = tape.square(taped.node);
        let g = tape.grad_params(loss).unwrap();
        (tape.value(loss), g)
    };
    let err = check_gradient(f, &net.params.clone(), 1e-5);
    assert!(err < 1e-4, "nesting gradient error {err}");
}

#[test]
fn grad_input_matches_finite_differences_random_net() {
    let net = mlp_init(&[2, 4, 1], 23).unwrap();
    for coord in 0..2 {
        let point = [0.42, 1.1];
        let d = grad_input(&net, &point, coord).unwrap().value();
        let h = 1e-6;
        let mut pp = point;
        let mut pm = point;
        pp[coord] += h;
        pm[coord] -= h;
        let fd = (net.value(&pp).unwrap() - net.value(&pm).unwrap()) / (2.0 * h);
        let scale = d.abs().max(fd.abs()).max(1e-12);
        assert!((d - fd).abs() / scale < 1e-5, "coord {coord}: {d} vs {fd}");
    }
}

#[test]
fn residual_tape_replays_bit_exactly() {
    let prob = ParamOde::default();
    let net = mlp_init(&[2, 8, 1], 3).unwrap().with_ansatz(Ansatz::IcShift(1.0));
    let pts: Vec<Point> = vec![
        Point::new(vec![0.2, -1.0]),
        Point::new(vec![0.8, 2.5]),
        Point::new(vec![0.5, 0.0]),
    ];
    let (tape, _) =
        das2_core::trainer::record_empirical_loss(&net, &prob, &pts, None, &[], 0.0).unwrap();
    let replayed = tape.replay();
    for (i, d) in replayed.iter().enumerate() {
        let id = das2_core::autodiff::NodeId(i as u32);
        assert_eq!(d.v.to_bits(), tape.value(id).to_bits());
        assert_eq!(d.dv.to_bits(), tape.tangent(id).to_bits());
    }
}

#[test]
fn flow_density_normalizes_on_a_grid() {
    // Midsize version of the quadrature check (the acceptance suite runs
    // the 400^2 grid).
    let mut flow = flow_init(2, 2, 4, 16, unit_box(2), 5).unwrap();
    jitter(&mut flow, 31, 0.4);
    let n = 200;
    let bl: Vec<f64> = (0..2).map(|i| flow.box_domain.b_lower(i)).collect();
    let bu: Vec<f64> = (0..2).map(|i| flow.box_domain.b_upper(i)).collect();
    let hx = (bu[0] - bl[0]) / (n as f64 - 1.0);
    let hy = (bu[1] - bl[1]) / (n as f64 - 1.0);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = bl[0] + hx * i as f64;
            let y = bl[1] + hy * j as f64;
            // Boundary values: the density extends continuously to 0.
            let p = if i == 0 || j == 0 || i == n - 1 || j == n - 1 {
                0.0
            } else {
                flow.log_pdf(&[x, y]).unwrap().exp()
            };
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 }
                * if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            total += w * p;
        }
    }
    total *= hx * hy;
    assert!((total - 1.0).abs() < 0.02, "quadrature mass {total}");
}

#[test]
fn flow_histogram_matches_density() {
    // Empirical bin frequencies against bin-center densities, on bins
    // holding enough mass for the Monte Carlo error to sit below the
    // tolerance; the tested bins must cover most of the mass.
    let mut flow = flow_init(2, 2, 4, 16, unit_box(2), 9).unwrap();
    jitter(&mut flow, 13, 0.3);
    let n_draw = 1_000_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let bins = 20usize;
    let bl: Vec<f64> = (0..2).map(|i| flow.box_domain.b_lower(i)).collect();
    let bu: Vec<f64> = (0..2).map(|i| flow.box_domain.b_upper(i)).collect();
    let wx = (bu[0] - bl[0]) / bins as f64;
    let wy = (bu[1] - bl[1]) / bins as f64;
    let mut counts = vec![0usize; bins * bins];
    let sample = flow.sample(n_draw, &mut rng, false).unwrap();
    for p in &sample.points {
        let i = (((p[0] - bl[0]) / wx) as usize).min(bins - 1);
        let j = (((p[1] - bl[1]) / wy) as usize).min(bins - 1);
        counts[i * bins + j] += 1;
    }
    let mut tested_mass = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            // 3x3 midpoint quadrature of the density over the bin.
            let mut prob = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    let x = bl[0] + wx * (i as f64 + (a as f64 + 0.5) / 3.0);
                    let y = bl[1] + wy * (j as f64 + (b as f64 + 0.5) / 3.0);
                    prob += flow.log_pdf(&[x, y]).unwrap().exp();
                }
            }
            prob *= wx * wy / 9.0;
            let expected = prob * n_draw as f64;
            if expected >= 2000.0 {
                tested_mass += prob;
                let got = counts[i * bins + j] as f64;
                let rel = (got - expected).abs() / expected;
                assert!(rel < 0.10, "bin ({i},{j}): {got} vs {expected:.1} (rel {rel:.3})");
            }
        }
    }
    assert!(tested_mass > 0.5, "tested bins cover too little mass: {tested_mass}");
}

#[test]
fn residual_loss_tracks_supervised_value_error() {
    // A surrogate trained to small MSE against the exact solution has a
    // residual loss bounded by a constant times that MSE. The factor was
    // recorded at the first green run (observed ~8.6e2 with these seeds);
    // asserted with headroom.
    let prob = ParamOde::default();
    let mut net = mlp_init(&[2, 16, 16, 1], 11).unwrap().with_ansatz(Ansatz::IcShift(1.0));
    let xs = linspace(0.0, 1.0, 12);
    let xis = linspace(-3.0, 3.0, 12);
    let mut pts = Vec::new();
    let mut ys = Vec::new();
    for &x in &xs {
        for &xi in &xis {
            pts.push(vec![x, xi]);
            ys.push(exact_param_ode(1.0, x, xi));
        }
    }
    // Supervised fit with Adam on the taped value loss.
    let mut adam = AdamState::new(net.params.len());
    let hyper = AdamHyper { lr: 3e-3, ..AdamHyper::default() };
    let mut mse = f64::INFINITY;
    for _ in 0..1500 {
        let mut tape = Tape::new(&net.params);
        let mut terms = Vec::with_capacity(pts.len());
        for (p, &y) in pts.iter().zip(&ys) {
            let u = {
                let mut ctx = TapeCtx::new(&mut tape);
                net.eval_with(&mut ctx, p, None).unwrap()
            };
            let c = tape.constant(y);
            let d = tape.sub(u, c);
            terms.push(tape.square(d));
        }
        let s = tape.sum(&terms);
        let inv = tape.constant(1.0 / pts.len() as f64);
        let loss = tape.mul(inv, s);
        let g = tape.grad_params(loss).unwrap();
        adam_step(&mut net.params, &g, &mut adam, &hyper).unwrap();
        mse = tape.value(loss);
    }
    assert!(mse < 5e-2, "supervised fit did not converge: mse {mse}");
    let set = das2_core::sampling::TrainingSet::from_points(
        pts.iter().map(|p| Point::new(p.clone())).collect(),
        0,
    );
    let res_loss = weighted_residual_loss(&net, &prob, &set, Mode::Joint, None).unwrap();
    let factor = res_loss / mse;
    assert!(factor < 2e3, "residual/value factor {factor} (residual {res_loss}, mse {mse})");
}

#[test]
fn validation_oracle_agreement_on_grid() {
    // evaluate_grid against the closed form: a surrogate that IS the
    // closed form would be exact; check the metric plumbing with a
    // perturbation instead.
    let prob = ParamOde::default();
    let val = prob.build_validation(&ValidationSpec::Grid { nx: 32, nxi: 32 }, 0).unwrap();
    let net = mlp_init(&[2, 8, 1], 1).unwrap().with_ansatz(Ansatz::IcShift(1.0));
    let m = evaluate_grid(&net, &val).unwrap();
    assert!(m.mse.is_finite() && m.rel_l2 > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_flow_round_trip(seed in 0u64..400, d in 1usize..4) {
        let mut flow = flow_init(d, 2, 3, 8, unit_box(d), seed).unwrap();
        jitter(&mut flow, seed.wrapping_add(1), 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let x: Vec<f64> = (0..d)
            .map(|i| {
                let lo = flow.box_domain.b_lower(i);
                let hi = flow.box_domain.b_upper(i);
                rng.gen_range(lo + 1e-6..hi - 1e-6)
            })
            .collect();
        let (z, _) = flow.forward(&x).unwrap();
        let back = flow.inverse(&z).unwrap();
        for i in 0..d {
            prop_assert!((back[i] - x[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn prop_ansatz_exact_at_zero(seed in 0u64..1000, xi in -3.0f64..3.0) {
        let net = mlp_init(&[2, 6, 1], seed).unwrap().with_ansatz(Ansatz::IcShift(1.0));
        let u = net.value(&[0.0, xi]).unwrap();
        prop_assert_eq!(u.to_bits(), 1.0f64.to_bits());
    }

    #[test]
    fn prop_cutoff_in_unit_interval(x in -0.04f64..1.04, y in -0.04f64..1.04) {
        let b = unit_box(2);
        let h = cutoff_h(&[x, y], &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
            prop_assert_eq!(h, 1.0);
        }
    }

    #[test]
    fn prop_flow_samples_inside_b(seed in 0u64..200) {
        let mut flow = flow_init(2, 2, 3, 8, unit_box(2), seed).unwrap();
        jitter(&mut flow, seed, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = flow.sample(64, &mut rng, false).unwrap();
        for p in &out.points {
            prop_assert!(flow.box_domain.contains_b_open(p));
        }
    }
}
