//! Residual definitions and reference oracles for the bundled benchmarks:
//! the one-dimensional parametric ODE `du/dx = xi u, u(0) = u0` and the
//! operator-learning problem `du/dx = exp(-D ||xi - 0.5||^2) f(x, xi)` with
//! `f` drawn from a Chebyshev polynomial space.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arith, DualCtx};
use crate::error::{Error, Result};
use crate::flow::BoxDomain;
use crate::nets::{Ansatz, Surrogate};
use crate::sampling::Point;

/// A parametric differential equation posed on `Omega_s x Omega_p`.
///
/// Residuals are written against the arithmetic context so the same
/// definition serves plain evaluation, dual-number evaluation, and tape
/// recording. Implementations are immutable value objects, safe to share
/// across threads.
pub trait Problem: Send + Sync {
    fn name(&self) -> &'static str;
    fn spatial_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    /// Spatial domain bounds (lower, upper).
    fn spatial_bounds(&self) -> (Vec<f64>, Vec<f64>);
    /// Parametric domain bounds (lower, upper).
    fn param_bounds(&self) -> (Vec<f64>, Vec<f64>);
    /// Hard-constraint ansatz the surrogate must carry for this problem.
    fn ansatz(&self) -> Ansatz;

    /// Joint domain `Omega` with an enlargement margin for the flow box.
    fn joint_domain(&self, margin: f64) -> Result<BoxDomain> {
        let (mut lo, mut hi) = self.spatial_bounds();
        let (plo, phi) = self.param_bounds();
        lo.extend(plo);
        hi.extend(phi);
        BoxDomain::with_margin(lo, hi, margin)
    }

    /// Parametric domain `Omega_p` with an enlargement margin.
    fn param_domain(&self, margin: f64) -> Result<BoxDomain> {
        let (plo, phi) = self.param_bounds();
        BoxDomain::with_margin(plo, phi, margin)
    }

    /// Pointwise residual `r(x, xi; theta)` at `coords = [x.., xi..]`.
    fn residual_with<C: Arith>(&self, net: &Surrogate, ctx: &mut C, coords: &[f64]) -> Result<C::V>;

    /// Right-hand side when the residual has the form `du/dx - rhs(x, xi)`
    /// with `rhs` independent of `u`; enables the shared-trunk marginal
    /// loss recorder.
    fn flux_rhs(&self, _x: f64, _xi: &[f64]) -> Option<f64> {
        None
    }

    /// Whether the problem carries a boundary residual (the in-scope
    /// problems enforce conditions through the ansatz instead).
    fn has_boundary(&self) -> bool {
        false
    }

    /// Boundary residual `b(x, xi; theta)` for problems with one.
    fn boundary_residual_with<C: Arith>(
        &self,
        _net: &Surrogate,
        _ctx: &mut C,
        _coords: &[f64],
    ) -> Result<C::V> {
        Err(Error::InvalidConfig(format!(
            "problem {} has no boundary residual",
            self.name()
        )))
    }

    /// Uniform boundary collocation points, when the problem has a boundary
    /// term.
    fn sample_boundary(&self, _n: usize, _rng: &mut ChaCha8Rng) -> Vec<Point> {
        Vec::new()
    }

    /// Reference validation data for this problem.
    fn build_validation(&self, spec: &ValidationSpec, seed: u64) -> Result<ValidationSet>;
}

/// Residual value at a point, computed with dual numbers (no tape).
pub fn residual_value<P: Problem>(problem: &P, net: &Surrogate, coords: &[f64]) -> Result<f64> {
    let mut ctx = DualCtx::new(&net.params);
    let r = problem.residual_with(net, &mut ctx, coords)?;
    Ok(r.v)
}

/// Mean of squared residuals over a fixed spatial grid for one parameter
/// point: the discrete marginal residual.
pub fn marginal_residual<P: Problem>(
    problem: &P,
    net: &Surrogate,
    xi: &[f64],
    x_grid: &[f64],
) -> Result<f64> {
    if x_grid.is_empty() {
        return Err(Error::EmptyInput { what: "spatial grid" });
    }
    let mut acc = 0.0;
    let mut coords = Vec::with_capacity(1 + xi.len());
    for &x in x_grid {
        coords.clear();
        coords.push(x);
        coords.extend_from_slice(xi);
        let r = residual_value(problem, net, &coords)?;
        acc += r * r;
    }
    Ok(acc / x_grid.len() as f64)
}

/// Validation data: points with reference solution values.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub points: Vec<Point>,
    pub oracle: Vec<f64>,
}

/// How to build a validation set.
#[derive(Debug, Clone)]
pub enum ValidationSpec {
    /// Inclusive meshgrid over the joint domain (spatial x parametric),
    /// `nx` by `nxi` points; oracle from the closed form.
    Grid { nx: usize, nxi: usize },
    /// Parameter draws (uniform box + rejection-sampled ball around 0.5)
    /// crossed with a uniform spatial grid; oracle from the adaptive
    /// integrator.
    OperatorSet { n_box: usize, n_ball: usize, n_x: usize },
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

// --- parametric ODE (du/dx = xi u) ------------------------------------------

/// `du/dx = xi u` on `x in [0,1]`, `xi in [xi_min, xi_max]`, `u(0) = u0`.
#[derive(Debug, Clone)]
pub struct ParamOde {
    pub u0: f64,
    pub xi_min: f64,
    pub xi_max: f64,
}

impl Default for ParamOde {
    fn default() -> Self {
        ParamOde { u0: 1.0, xi_min: -3.0, xi_max: 3.0 }
    }
}

/// Closed-form solution `u0 exp(xi x)`.
pub fn exact_param_ode(u0: f64, x: f64, xi: f64) -> f64 {
    u0 * (xi * x).exp()
}

impl Problem for ParamOde {
    fn name(&self) -> &'static str {
        "param_ode"
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
        (vec![self.xi_min], vec![self.xi_max])
    }
    fn ansatz(&self) -> Ansatz {
        Ansatz::IcShift(self.u0)
    }

    fn residual_with<C: Arith>(&self, net: &Surrogate, ctx: &mut C, coords: &[f64]) -> Result<C::V> {
        let u = net.eval_with(ctx, coords, Some(0))?;
        let du = ctx.tangent_of(u);
        let xi = ctx.constant(coords[1]);
        let xiu = ctx.mul(xi, u);
        Ok(ctx.sub(du, xiu))
    }

    fn build_validation(&self, spec: &ValidationSpec, _seed: u64) -> Result<ValidationSet> {
        match *spec {
            ValidationSpec::Grid { nx, nxi } => {
                let xs = linspace(0.0, 1.0, nx);
                let xis = linspace(self.xi_min, self.xi_max, nxi);
                let mut points = Vec::with_capacity(nx * nxi);
                let mut oracle = Vec::with_capacity(nx * nxi);
                for &xi in &xis {
                    for &x in &xs {
                        points.push(Point { coords: vec![x, xi] });
                        oracle.push(exact_param_ode(self.u0, x, xi));
                    }
                }
                Ok(ValidationSet { points, oracle })
            }
            ValidationSpec::OperatorSet { .. } => Err(Error::InvalidConfig(
                "param_ode validation uses the meshgrid spec".into(),
            )),
        }
    }
}

// --- operator learning with a Chebyshev right-hand side ---------------------

/// `du/dx = exp(-D ||xi - 0.5||^2) sum_i xi_i T_i(2x - 1)` on `x in [0,1]`,
/// `xi in [-M, M]^d`, `u(0) = 0`.
#[derive(Debug, Clone)]
pub struct OplearnCheb {
    pub m_bound: f64,
    pub degree: usize,
    pub decay: f64,
}

impl Default for OplearnCheb {
    fn default() -> Self {
        OplearnCheb { m_bound: 1.0, degree: 8, decay: 6.0 }
    }
}

/// `sum_{i=0}^{d-1} xi_i T_i(t)` via the three-term recurrence, scaled by
/// the Gaussian decay factor. The polynomial argument is `t = 2x - 1` so it
/// lies in `[-1, 1]`.
pub fn chebyshev_rhs(x: f64, xi: &[f64], decay: f64) -> f64 {
    let t = 2.0 * x - 1.0;
    let mut sum = 0.0;
    let mut t_prev = 1.0; // T_0
    let mut t_cur = t; // T_1
    for (i, &c) in xi.iter().enumerate() {
        let ti = match i {
            0 => 1.0,
            1 => t,
            _ => {
                let t_next = 2.0 * t * t_cur - t_prev;
                t_prev = t_cur;
                t_cur = t_next;
                t_next
            }
        };
        sum += c * ti;
    }
    let dist2: f64 = xi.iter().map(|&c| (c - 0.5) * (c - 0.5)).sum();
    (-decay * dist2).exp() * sum
}

impl OplearnCheb {
    pub fn rhs(&self, x: f64, xi: &[f64]) -> f64 {
        chebyshev_rhs(x, xi, self.decay)
    }
}

impl Problem for OplearnCheb {
    fn name(&self) -> &'static str {
        "oplearn_cheb"
    }
    fn spatial_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        self.degree
    }
    fn spatial_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0], vec![1.0])
    }
    fn param_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-self.m_bound; self.degree], vec![self.m_bound; self.degree])
    }
    fn ansatz(&self) -> Ansatz {
        Ansatz::IcZero
    }

    fn residual_with<C: Arith>(&self, net: &Surrogate, ctx: &mut C, coords: &[f64]) -> Result<C::V> {
        let u = net.eval_with(ctx, coords, Some(0))?;
        let du = ctx.tangent_of(u);
        let rhs = ctx.constant(self.rhs(coords[0], &coords[1..]));
        Ok(ctx.sub(du, rhs))
    }

    fn flux_rhs(&self, x: f64, xi: &[f64]) -> Option<f64> {
        Some(self.rhs(x, xi))
    }

    fn build_validation(&self, spec: &ValidationSpec, seed: u64) -> Result<ValidationSet> {
        match *spec {
            ValidationSpec::OperatorSet { n_box, n_ball, n_x } => {
                use rand::SeedableRng;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = self.degree;
                let mut xis: Vec<Vec<f64>> = Vec::with_capacity(n_box + n_ball);
                for _ in 0..n_box {
                    xis.push((0..d).map(|_| rng.gen_range(-self.m_bound..self.m_bound)).collect());
                }
                // Ball around 0.5 with radius 0.5 by rejection from its
                // bounding box.
                let mut accepted = 0;
                let mut attempts = 0usize;
                let budget = 20_000 * n_ball.max(1);
                while accepted < n_ball {
                    if attempts >= budget {
                        return Err(Error::AcceptanceStarvation {
                            requested: n_ball,
                            accepted,
                            attempts,
                            rate: accepted as f64 / attempts.max(1) as f64,
                            stage: None,
                        });
                    }
                    attempts += 1;
                    let cand: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
                    let dist2: f64 = cand.iter().map(|&c| (c - 0.5) * (c - 0.5)).sum();
                    if dist2 <= 0.25 {
                        xis.push(cand);
                        accepted += 1;
                    }
                }
                let x_grid = linspace(0.0, 1.0, n_x);
                let mut points = Vec::with_capacity(xis.len() * n_x);
                let mut oracle = Vec::with_capacity(xis.len() * n_x);
                for xi in &xis {
                    let u = rk45_oracle(self, xi, &x_grid)?;
                    for (j, &x) in x_grid.iter().enumerate() {
                        let mut coords = Vec::with_capacity(1 + d);
                        coords.push(x);
                        coords.extend_from_slice(xi);
                        points.push(Point { coords });
                        oracle.push(u[j]);
                    }
                }
                Ok(ValidationSet { points, oracle })
            }
            ValidationSpec::Grid { .. } => Err(Error::InvalidConfig(
                "oplearn_cheb validation uses the operator-set spec".into(),
            )),
        }
    }
}

// --- Dormand-Prince 5(4) reference integrator --------------------------------

/// Adaptive Dormand–Prince 5(4) for a scalar ODE `u' = f(x, u)`, reporting
/// the solution at each requested grid point (the integrator lands on grid
/// points exactly).
pub fn rk45_integrate<F: Fn(f64, f64) -> f64>(
    f: F,
    x0: f64,
    u0: f64,
    grid: &[f64],
    abs_tol: f64,
    rel_tol: f64,
) -> Result<Vec<f64>> {
    const A21: f64 = 1.0 / 5.0;
    const A31: f64 = 3.0 / 40.0;
    const A32: f64 = 9.0 / 40.0;
    const A41: f64 = 44.0 / 45.0;
    const A42: f64 = -56.0 / 15.0;
    const A43: f64 = 32.0 / 9.0;
    const A51: f64 = 19372.0 / 6561.0;
    const A52: f64 = -25360.0 / 2187.0;
    const A53: f64 = 64448.0 / 6561.0;
    const A54: f64 = -212.0 / 729.0;
    const A61: f64 = 9017.0 / 3168.0;
    const A62: f64 = -355.0 / 33.0;
    const A63: f64 = 46732.0 / 5247.0;
    const A64: f64 = 49.0 / 176.0;
    const A65: f64 = -5103.0 / 18656.0;
    const B1: f64 = 35.0 / 384.0;
    const B3: f64 = 500.0 / 1113.0;
    const B4: f64 = 125.0 / 192.0;
    const B5: f64 = -2187.0 / 6784.0;
    const B6: f64 = 11.0 / 84.0;
    // Difference between the 5th- and 4th-order weights.
    const E1: f64 = 71.0 / 57600.0;
    const E3: f64 = -71.0 / 16695.0;
    const E4: f64 = 71.0 / 1920.0;
    const E5: f64 = -17253.0 / 339200.0;
    const E6: f64 = 22.0 / 525.0;
    const E7: f64 = -1.0 / 40.0;
    const C2: f64 = 1.0 / 5.0;
    const C3: f64 = 3.0 / 10.0;
    const C4: f64 = 4.0 / 5.0;
    const C5: f64 = 8.0 / 9.0;

    let mut out = Vec::with_capacity(grid.len());
    let mut x = x0;
    let mut u = u0;
    let mut h_guess: f64 = 0.0;
    for &target in grid {
        if target < x - 1e-14 {
            return Err(Error::InvalidConfig(
                "rk45 grid must be sorted and start at or after x0".into(),
            ));
        }
        while x < target {
            let remaining = target - x;
            if h_guess <= 0.0 {
                h_guess = remaining.min(1e-2);
            }
            let mut h = h_guess.min(remaining);
            loop {
                if h < 1e-14 * (1.0 + x.abs()) {
                    return Err(Error::StepSizeUnderflow { x });
                }
                let k1 = f(x, u);
                let k2 = f(x + C2 * h, u + h * (A21 * k1));
                let k3 = f(x + C3 * h, u + h * (A31 * k1 + A32 * k2));
                let k4 = f(x + C4 * h, u + h * (A41 * k1 + A42 * k2 + A43 * k3));
                let k5 = f(x + C5 * h, u + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4));
                let k6 = f(x + h, u + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5));
                let u_new = u + h * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6);
                let k7 = f(x + h, u_new);
                let err = h * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7);
                let scale = abs_tol + rel_tol * u.abs().max(u_new.abs());
                let err_norm = (err / scale).abs();
                if err_norm <= 1.0 {
                    x += h;
                    u = u_new;
                    let growth = if err_norm > 0.0 {
                        (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
                    } else {
                        5.0
                    };
                    h_guess = h * growth;
                    break;
                }
                h *= (0.9 * err_norm.powf(-0.2)).clamp(0.2, 1.0).min(0.9);
            }
        }
        out.push(u);
    }
    Ok(out)
}

/// Reference solution of the operator-learning ODE on a sorted grid in
/// `[0, 1]`, integrated from `u(0) = 0` at tolerances 1e-8.
pub fn rk45_oracle(problem: &OplearnCheb, xi: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    rk45_integrate(|x, _| problem.rhs(x, xi), 0.0, 0.0, grid, 1e-8, 1e-8)
}
