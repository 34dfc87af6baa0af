//! Reference simulators used to sanity-check certificates.
//!
//! Gamma case: RK4 on the augmented pair (x, y), ẋ = Ax + A1 y,
//! ẏ = −y/T + ρ, where ρ(t) = ∫ Ψ(θ) x(t−θ−h) dθ is a composite Gauss sum
//! over the stored (Hermite-interpolated) history. Poisson case: the exact recursion with a truncated pmf.

use crate::error::{Error, Result};
use crate::gamma::GammaDelaySystem;
use crate::poisson::PoissonDelaySystem;
use crate::quad::{gauss_legendre, gamma_pdf, gamma_tail_limit, integrate, poisson_pmf_table, poisson_tail_limit, psi_kernel, QuadOptions};

#[derive(Clone, Debug, PartialEq)]
pub enum InitialHistory {
    Constant(Vec<f64>),
    /// φ_i(s) = Σ_k coeffs[i][k] s^k for s ≤ 0.
    Polynomial(Vec<Vec<f64>>),
}

impl InitialHistory {
    pub fn dim(&self) -> usize {
        match self {
            InitialHistory::Constant(v) => v.len(),
            InitialHistory::Polynomial(c) => c.len(),
        }
    }

    pub fn eval(&self, s: f64, out: &mut [f64]) {
        match self {
            InitialHistory::Constant(v) => out.copy_from_slice(v),
            InitialHistory::Polynomial(c) => {
                for (o, ci) in out.iter_mut().zip(c) {
                    *o = ci.iter().rev().fold(0.0, |acc, a| acc * s + a);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOptions {
    /// Step size (continuous time only).
    pub dt: f64,
    /// Final time, or number of steps in discrete time.
    pub horizon: f64,
    /// Kernel mass allowed to be dropped when truncating the history sum.
    pub tail_eps: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { dt: 0.01, horizon: 200.0, tail_eps: 1e-12 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    /// Named auxiliary signals sampled alongside x (y and ρ, or f and q).
    pub aux: Vec<(&'static str, Vec<Vec<f64>>)>,
    pub warnings: Vec<String>,
}

impl Trajectory {
    pub fn norms(&self) -> Vec<f64> {
        self.x.iter().map(|v| norm(v)).collect()
    }

    pub fn aux(&self, name: &str) -> Option<&[Vec<f64>]> {
        self.aux.iter().find(|(n, _)| *n == name).map(|(_, v)| v.as_slice())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc: f64, x| acc.hypot(*x))
}

fn check_history(n: usize, phi: &InitialHistory) -> Result<()> {
    if phi.dim() != n {
        return Err(Error::DimensionMismatch(format!("history has {} components, system has {n}", phi.dim())));
    }
    Ok(())
}

/// Cubic-Hermite view of x on (−∞, t_k] built from stored states and
/// derivatives, plus a quadratic segment to a provisional stage state.
struct History<'a> {
    phi: &'a InitialHistory,
    dt: f64,
    grid: &'a [Vec<f64>],
    dgrid: &'a [Vec<f64>],
    stage: Option<(f64, &'a [f64])>,
}

impl History<'_> {
    fn eval(&self, s: f64, out: &mut [f64]) {
        if s <= 0.0 {
            self.phi.eval(s, out);
            return;
        }
        let last = self.grid.len() - 1;
        let t_last = last as f64 * self.dt;
        if s > t_last {
            let (ts, xs) = self.stage.expect("lookup beyond the stored grid needs a stage state");
            let (x, d) = (&self.grid[last], &self.dgrid[last]);
            let delta = ts - t_last;
            let sig = (s - t_last).min(delta);
            for i in 0..out.len() {
                let c = if delta > 0.0 { (xs[i] - x[i] - d[i] * delta) / (delta * delta) } else { 0.0 };
                out[i] = x[i] + sig * (d[i] + c * sig);
            }
            return;
        }
        let u = s / self.dt;
        let k = (u.floor() as usize).min(last.saturating_sub(1));
        let w = u - k as f64;
        let (h00, h10) = ((1.0 + 2.0 * w) * (1.0 - w) * (1.0 - w), w * (1.0 - w) * (1.0 - w));
        let (h01, h11) = (w * w * (3.0 - 2.0 * w), w * w * (w - 1.0));
        let (x0, x1, d0, d1) = (&self.grid[k], &self.grid[k + 1], &self.dgrid[k], &self.dgrid[k + 1]);
        for i in 0..out.len() {
            out[i] = h00 * x0[i] + h01 * x1[i] + self.dt * (h10 * d0[i] + h11 * d1[i]);
        }
    }
}

pub fn simulate_gamma(sys: &GammaDelaySystem, phi: &InitialHistory, opts: &SimOptions) -> Result<Trajectory> {
    let n = sys.dim();
    check_history(n, phi)?;
    if !(opts.dt > 0.0 && opts.horizon > opts.dt) {
        return Err(Error::InvalidParameter("need dt > 0 and horizon > dt".into()));
    }
    if !(opts.tail_eps > 0.0 && opts.tail_eps <= 1e-8) {
        return Err(Error::InvalidParameter("tail_eps must lie in (0, 1e-8]".into()));
    }
    let (t_scale, h, shape, dt) = (sys.t, sys.h, sys.n_shape, opts.dt);
    let mut warnings = Vec::new();
    if dt > t_scale / 10.0 {
        let w = format!("dt = {dt} exceeds T/10 = {}; the kernel is under-resolved", t_scale / 10.0);
        log::warn!("{w}");
        warnings.push(w);
    }
    // Ψ/Ψ0 is the Gamma(N−1, T) density
    let theta_max = gamma_tail_limit(shape - 1, t_scale, opts.tail_eps);
    let m = (theta_max / dt).ceil() as usize;
    // two Gauss points per θ panel: fourth order, matching RK4 and the
    // Hermite history
    let (gx, gw) = gauss_legendre(2);
    let mut nodes = Vec::with_capacity(2 * m);
    for j in 0..m {
        let mid = (j as f64 + 0.5) * dt;
        for (u, w) in gx.iter().zip(&gw) {
            let th = mid + 0.5 * dt * u;
            nodes.push((th, 0.5 * dt * w * psi_kernel(shape, t_scale, th)));
        }
    }
    // rescale to the exact mass Ψ0 = 1/T so constant histories stay at rest
    let mass: f64 = nodes.iter().map(|(_, w)| w).sum();
    nodes.iter_mut().for_each(|(_, w)| *w /= mass * t_scale);

    let rho = |hist: &History, tau: f64, out: &mut [f64]| {
        let mut buf = vec![0.0; n];
        out.iter_mut().for_each(|v| *v = 0.0);
        for (th, w) in &nodes {
            hist.eval(tau - th - h, &mut buf);
            for i in 0..n {
                out[i] += w * buf[i];
            }
        }
    };

    // y(0) = ∫ Γ(θ) φ(−θ−h) dθ
    let gamma_max = gamma_tail_limit(shape, t_scale, opts.tail_eps);
    let mut y = vec![0.0; n];
    let mut buf = vec![0.0; n];
    for (i, yi) in y.iter_mut().enumerate() {
        *yi = integrate(
            |th| {
                phi.eval(-th - h, &mut buf);
                gamma_pdf(shape, t_scale, th) * buf[i]
            },
            0.0,
            gamma_max,
            &QuadOptions::default(),
        )?;
    }

    let steps = (opts.horizon / dt).round() as usize;
    let rate = |x: &[f64], y: &[f64]| -> Vec<f64> {
        let (ax, a1y) = (sys.a.matvec(x), sys.a1.matvec(y));
        (0..n).map(|i| ax[i] + a1y[i]).collect()
    };
    let mut x0 = vec![0.0; n];
    phi.eval(0.0, &mut x0);
    let mut dgrid = vec![rate(&x0, &y)];
    let mut grid = vec![x0];
    let mut ys = vec![y.clone()];
    let mut rhos = Vec::with_capacity(steps + 1);
    let mut times = vec![0.0];

    let deriv = |x: &[f64], y: &[f64], r: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let dx = rate(x, y);
        let dy = (0..n).map(|i| -y[i] / t_scale + r[i]).collect();
        (dx, dy)
    };
    let axpy = |a: &[f64], c: f64, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + c * q).collect() };

    let mut r0 = vec![0.0; n];
    for k in 0..steps {
        let tk = k as f64 * dt;
        let xk = grid[k].clone();
        let yk = ys[k].clone();
        {
            let hist = History { phi, dt, grid: &grid, dgrid: &dgrid, stage: Some((tk, &xk)) };
            rho(&hist, tk, &mut r0);
        }
        rhos.push(r0.clone());
        let (k1x, k1y) = deriv(&xk, &yk, &r0);

        let x2 = axpy(&xk, dt / 2.0, &k1x);
        let y2 = axpy(&yk, dt / 2.0, &k1y);
        let mut r2 = vec![0.0; n];
        rho(&History { phi, dt, grid: &grid, dgrid: &dgrid, stage: Some((tk + dt / 2.0, &x2)) }, tk + dt / 2.0, &mut r2);
        let (k2x, k2y) = deriv(&x2, &y2, &r2);

        let x3 = axpy(&xk, dt / 2.0, &k2x);
        let y3 = axpy(&yk, dt / 2.0, &k2y);
        let mut r3 = vec![0.0; n];
        rho(&History { phi, dt, grid: &grid, dgrid: &dgrid, stage: Some((tk + dt / 2.0, &x3)) }, tk + dt / 2.0, &mut r3);
        let (k3x, k3y) = deriv(&x3, &y3, &r3);

        let x4 = axpy(&xk, dt, &k3x);
        let y4 = axpy(&yk, dt, &k3y);
        let mut r4 = vec![0.0; n];
        rho(&History { phi, dt, grid: &grid, dgrid: &dgrid, stage: Some((tk + dt, &x4)) }, tk + dt, &mut r4);
        let (k4x, k4y) = deriv(&x4, &y4, &r4);

        let xn: Vec<f64> = (0..n).map(|i| xk[i] + dt / 6.0 * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i])).collect();
        let yn: Vec<f64> = (0..n).map(|i| yk[i] + dt / 6.0 * (k1y[i] + 2.0 * k2y[i] + 2.0 * k3y[i] + k4y[i])).collect();
        if xn.iter().chain(&yn).any(|v| !v.is_finite()) {
            warnings.push(format!("state overflowed at t = {}", tk + dt));
            break;
        }
        dgrid.push(rate(&xn, &yn));
        grid.push(xn);
        ys.push(yn);
        times.push((k + 1) as f64 * dt);
    }
    let last = grid.len() - 1;
    {
        let hist = History { phi, dt, grid: &grid, dgrid: &dgrid, stage: None };
        rho(&hist, last as f64 * dt, &mut r0);
    }
    rhos.push(r0);
    Ok(Trajectory { times, x: grid, aux: vec![("y", ys), ("rho", rhos)], warnings })
}

/// `opts.horizon` is the number of steps; `opts.dt` is ignored.
pub fn simulate_poisson(sys: &PoissonDelaySystem, phi: &InitialHistory, opts: &SimOptions) -> Result<Trajectory> {
    let n = sys.dim();
    check_history(n, phi)?;
    if !(opts.horizon >= 1.0) {
        return Err(Error::InvalidParameter("need at least one step".into()));
    }
    if !(opts.tail_eps > 0.0 && opts.tail_eps <= 1e-10) {
        return Err(Error::InvalidParameter("tail_eps must lie in (0, 1e-10]".into()));
    }
    let steps = opts.horizon.round() as usize;
    let tau_max = poisson_tail_limit(sys.lambda, opts.tail_eps);
    let p = poisson_pmf_table(sys.lambda, tau_max + 2);
    let h = sys.h as i64;
    let mut x = Vec::with_capacity(steps + 1);
    let mut x0 = vec![0.0; n];
    phi.eval(0.0, &mut x0);
    x.push(x0);
    let state = |x: &Vec<Vec<f64>>, j: i64, out: &mut [f64]| {
        if j <= 0 {
            phi.eval(j as f64, out);
        } else {
            out.copy_from_slice(&x[j as usize]);
        }
    };
    let mut fs = Vec::with_capacity(steps + 1);
    let mut qs = Vec::with_capacity(steps + 1);
    let mut buf = vec![0.0; n];
    let mut warnings = Vec::new();
    for k in 0..=steps {
        let mut f = vec![0.0; n];
        let mut q = vec![0.0; n];
        for tau in 0..=tau_max {
            state(&x, k as i64 - tau as i64 - h, &mut buf);
            for i in 0..n {
                f[i] += p[tau] * buf[i];
                q[i] += p[tau + 1] * buf[i];
            }
        }
        if k < steps {
            let ax = sys.a.matvec(&x[k]);
            let a1f = sys.a1.matvec(&f);
            let next: Vec<f64> = (0..n).map(|i| ax[i] + a1f[i]).collect();
            if next.iter().any(|v| !v.is_finite()) {
                warnings.push(format!("state overflowed at k = {}", k + 1));
                fs.push(f);
                qs.push(q);
                break;
            }
            x.push(next);
        }
        fs.push(f);
        qs.push(q);
    }
    let times = (0..x.len()).map(|k| k as f64).collect();
    Ok(Trajectory { times, x, aux: vec![("f", fs), ("q", qs)], warnings })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayReport {
    pub decayed: bool,
    pub initial_norm: f64,
    /// Largest |x| over the last 10% of samples.
    pub terminal_max: f64,
}

pub fn decay_metric(traj: &Trajectory, ratio: f64) -> DecayReport {
    let norms = traj.norms();
    let initial_norm = norms.first().copied().unwrap_or(0.0);
    let window = (norms.len() / 10).max(1);
    let terminal_max = norms[norms.len() - window..].iter().fold(0.0f64, |m, v| m.max(*v));
    let finished = traj.warnings.iter().all(|w| !w.contains("overflow"));
    let decayed = finished && terminal_max.is_finite() && terminal_max <= ratio * initial_norm;
    DecayReport { decayed, initial_norm, terminal_max }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn two_cars(t: f64, h: f64) -> GammaDelaySystem {
        let a1 = Matrix::from_rows(&[vec![-2.0, 2.0], vec![2.0, -2.0]]).unwrap();
        GammaDelaySystem::new(Matrix::zeros(2, 2), a1, 2, t, h).unwrap()
    }

    fn discrete_example(lambda: f64) -> PoissonDelaySystem {
        let a = Matrix::from_rows(&[vec![-0.5, 0.0], vec![0.0, 1.0]]).unwrap();
        let a1 = Matrix::from_rows(&[vec![-0.5, 0.8], vec![0.5, -0.2]]).unwrap();
        PoissonDelaySystem::new(a, a1, lambda, 0).unwrap()
    }

    fn expm(a: &Matrix, t: f64) -> Matrix {
        // scaling and squaring with a long Taylor series; fine for small norms
        let s = (a.max_abs() * t).log2().max(0.0).ceil() as i32 + 4;
        let b = a.scaled(t / 2f64.powi(s));
        let mut e = Matrix::identity(a.rows());
        let mut term = Matrix::identity(a.rows());
        for k in 1..30 {
            term = term.matmul(&b).unwrap().scaled(1.0 / k as f64);
            e = e.add(&term).unwrap();
        }
        for _ in 0..s {
            e = e.matmul(&e).unwrap();
        }
        e
    }

    #[test]
    fn delay_free_matches_matrix_exponential() {
        let a = Matrix::from_rows(&[vec![-1.0, 0.5], vec![-0.3, -0.4]]).unwrap();
        let sys = GammaDelaySystem::new(a.clone(), Matrix::zeros(2, 2), 3, 0.2, 0.1).unwrap();
        let phi = InitialHistory::Constant(vec![1.0, -2.0]);
        let traj = simulate_gamma(&sys, &phi, &SimOptions { dt: 0.01, horizon: 10.0, tail_eps: 1e-12 }).unwrap();
        let exact = expm(&a, 10.0).matvec(&[1.0, -2.0]);
        let last = traj.x.last().unwrap();
        for i in 0..2 {
            assert!((last[i] - exact[i]).abs() < 1e-4, "{last:?} vs {exact:?}");
        }
    }

    #[test]
    fn filtered_state_starts_consistent_with_constant_history() {
        let sys = two_cars(0.1, 0.01);
        let phi = InitialHistory::Constant(vec![1.0, -1.0]);
        let traj = simulate_gamma(&sys, &phi, &SimOptions { dt: 0.01, horizon: 0.1, tail_eps: 1e-12 }).unwrap();
        // Γ and Ψ both carry unit-scaled mass against a constant history
        let y0 = &traj.aux("y").unwrap()[0];
        let r0 = &traj.aux("rho").unwrap()[0];
        assert!((y0[0] - 1.0).abs() < 1e-10 && (y0[1] + 1.0).abs() < 1e-10);
        assert!((r0[0] - 10.0).abs() < 1e-10, "{r0:?}");
        assert!(traj.warnings.is_empty());
    }

    #[test]
    fn coarse_step_is_flagged() {
        let sys = two_cars(0.1, 0.01);
        let phi = InitialHistory::Constant(vec![1.0, -1.0]);
        let traj = simulate_gamma(&sys, &phi, &SimOptions { dt: 0.05, horizon: 1.0, tail_eps: 1e-12 }).unwrap();
        assert_eq!(traj.warnings.len(), 1);
    }

    #[test]
    fn halving_dt_converges() {
        let sys = two_cars(0.1, 0.01);
        let phi = InitialHistory::Constant(vec![1.0, -1.0]);
        let run = |dt| simulate_gamma(&sys, &phi, &SimOptions { dt, horizon: 5.0, tail_eps: 1e-12 }).unwrap();
        let (c, f) = (run(0.01), run(0.005));
        let (xc, xf) = (c.x.last().unwrap(), f.x.last().unwrap());
        let diff = norm(&[xc[0] - xf[0], xc[1] - xf[1]]);
        assert!(diff <= 1e-4 * norm(xf).max(1e-300), "diff {diff} at |x| {}", norm(xf));
    }

    #[test]
    fn certified_two_cars_point_decays() {
        let sys = two_cars(0.1, 0.01);
        let phi = InitialHistory::Constant(vec![1.0, -1.0]);
        let traj = simulate_gamma(&sys, &phi, &SimOptions::default()).unwrap();
        assert!(decay_metric(&traj, 1e-3).decayed);
    }

    #[test]
    fn slow_kernel_does_not_decay() {
        let sys = two_cars(2.0, 0.01);
        let phi = InitialHistory::Constant(vec![1.0, -1.0]);
        let traj = simulate_gamma(&sys, &phi, &SimOptions { dt: 0.05, ..Default::default() }).unwrap();
        assert!(!decay_metric(&traj, 1e-3).decayed);
    }

    #[test]
    fn polynomial_history_evaluates() {
        let phi = InitialHistory::Polynomial(vec![vec![1.0, 2.0], vec![0.0, 0.0, 1.0]]);
        let mut out = [0.0; 2];
        phi.eval(-2.0, &mut out);
        assert_eq!(out, [-3.0, 4.0]);
    }

    #[test]
    fn discrete_delay_free_is_matrix_powers() {
        let a = Matrix::from_rows(&[vec![0.5, 0.2], vec![-0.1, 0.7]]).unwrap();
        let sys = PoissonDelaySystem::new(a.clone(), Matrix::zeros(2, 2), 1.3, 2).unwrap();
        let phi = InitialHistory::Constant(vec![1.0, 1.0]);
        let traj = simulate_poisson(&sys, &phi, &SimOptions { horizon: 30.0, ..Default::default() }).unwrap();
        let mut x = vec![1.0, 1.0];
        for k in 0..=30 {
            assert_eq!(traj.x[k], x);
            x = a.matvec(&x);
        }
    }

    #[test]
    fn discrete_tail_truncation_is_converged() {
        let sys = discrete_example(1.0);
        let phi = InitialHistory::Constant(vec![1.0, -1.0]);
        let run = |eps| simulate_poisson(&sys, &phi, &SimOptions { horizon: 60.0, tail_eps: eps, ..Default::default() }).unwrap();
        let (a, b) = (run(1e-12), run(5e-13));
        for (u, v) in a.x.iter().zip(&b.x) {
            let d = norm(&[u[0] - v[0], u[1] - v[1]]);
            assert!(d <= 1e-8 * norm(v).max(1e-300));
        }
    }

    #[test]
    fn tiny_rate_does_not_decay() {
        let sys = discrete_example(0.01);
        let phi = InitialHistory::Constant(vec![1.0, -1.0]);
        let traj = simulate_poisson(&sys, &phi, &SimOptions { horizon: 500.0, ..Default::default() }).unwrap();
        assert!(!decay_metric(&traj, 1e-3).decayed);
    }

    #[test]
    fn decay_metric_trivia() {
        let zero = Trajectory { times: vec![0.0, 1.0], x: vec![vec![0.0], vec![0.0]], aux: vec![], warnings: vec![] };
        assert!(decay_metric(&zero, 1e-3).decayed);
        let flat = Trajectory { times: vec![0.0, 1.0], x: vec![vec![2.0], vec![2.0]], aux: vec![], warnings: vec![] };
        assert!(!decay_metric(&flat, 1e-3).decayed);
    }

    #[test]
    fn rejects_bad_parameters() {
        let sys = two_cars(0.1, 0.0);
        let phi = InitialHistory::Constant(vec![1.0, -1.0]);
        assert!(simulate_gamma(&sys, &phi, &SimOptions { tail_eps: 1e-3, ..Default::default() }).is_err());
        assert!(simulate_gamma(&sys, &InitialHistory::Constant(vec![1.0]), &SimOptions::default()).is_err());
    }
}
