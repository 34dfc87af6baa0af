//! Composite Gauss–Legendre quadrature and the kernel special functions
//! (integer-shape gamma, Poisson).

use crate::error::{Error, Result};
use std::sync::OnceLock;

pub const GL_NODES: usize = 64;

/// Nodes and weights on [−1, 1] by Newton iteration on the Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn gl64() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(GL_NODES))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadOptions {
    pub rel_tol: f64,
    pub max_panels: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-12, max_panels: 512 }
    }
}

fn composite(f: &mut impl FnMut(f64, &mut [f64]), dim: usize, a: f64, b: f64, panels: usize, buf: &mut [f64]) -> Vec<f64> {
    let (x, w) = gl64();
    let mut acc = vec![0.0; dim];
    let hw = 0.5 * (b - a) / panels as f64;
    for p in 0..panels {
        let mid = a + (2 * p + 1) as f64 * hw;
        for (xi, wi) in x.iter().zip(w) {
            buf.iter_mut().for_each(|v| *v = 0.0);
            f(mid + hw * xi, buf);
            for (s, v) in acc.iter_mut().zip(buf.iter()) {
                *s += wi * hw * v;
            }
        }
    }
    acc
}

/// ∫_a^b f over a vector-valued integrand, doubling panels until the
/// largest component change is below `rel_tol` of the largest component.
pub fn integrate_vec(
    mut f: impl FnMut(f64, &mut [f64]),
    dim: usize,
    a: f64,
    b: f64,
    opts: &QuadOptions,
) -> Result<Vec<f64>> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidParameter(format!("integration limits [{a}, {b}]")));
    }
    if a == b {
        return Ok(vec![0.0; dim]);
    }
    let mut buf = vec![0.0; dim];
    let mut panels = 1;
    let mut prev = composite(&mut f, dim, a, b, panels, &mut buf);
    loop {
        panels *= 2;
        let cur = composite(&mut f, dim, a, b, panels, &mut buf);
        let scale = cur.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let change = cur.iter().zip(&prev).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("integrand".into()));
        }
        if change <= opts.rel_tol * scale || scale == 0.0 {
            return Ok(cur);
        }
        if panels >= opts.max_panels {
            log::debug!("quadrature on [{a}, {b}] stopped at {panels} panels, change {change:e}");
            return Ok(cur);
        }
        prev = cur;
    }
}

pub fn integrate(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, opts: &QuadOptions) -> Result<f64> {
    Ok(integrate_vec(|x, out| out[0] = f(x), 1, a, b, opts)?[0])
}

pub fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// Regularised upper incomplete gamma for integer shape k ≥ 1:
/// Q(k, x) = e^{−x} Σ_{j<k} x^j / j!.
pub fn gamma_q_int(k: u32, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut term = 1.0;
    let mut sum = 1.0;
    for j in 1..k {
        term *= x / f64::from(j);
        sum += term;
    }
    (sum.ln() - x).exp()
}

/// Smallest (up to bisection) z with Q(k, z/scale) ≤ eps.
pub fn gamma_tail_limit(k: u32, scale: f64, eps: f64) -> f64 {
    let mut hi = f64::from(k).max(1.0);
    while gamma_q_int(k, hi) > eps {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if gamma_q_int(k, mid) > eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi * scale
}

/// Ψ(θ) = θ^{N−2} e^{−θ/T} / (T^N (N−2)!), N ≥ 2.
pub fn psi_kernel(n_shape: u32, t: f64, theta: f64) -> f64 {
    if theta < 0.0 {
        return 0.0;
    }
    let k = n_shape - 2;
    let log = if k == 0 { 0.0 } else { f64::from(k) * theta.ln() };
    (log - theta / t - f64::from(n_shape) * t.ln() - ln_factorial(k)).exp()
}

/// Erlang(N, T) density.
pub fn gamma_pdf(n_shape: u32, t: f64, theta: f64) -> f64 {
    if theta < 0.0 {
        return 0.0;
    }
    let k = n_shape - 1;
    let log = if k == 0 { 0.0 } else { f64::from(k) * theta.ln() };
    (log - theta / t - f64::from(n_shape) * t.ln() - ln_factorial(k)).exp()
}

fn ln_factorial(k: u32) -> f64 {
    (1..=k).map(|j| f64::from(j).ln()).sum()
}

/// P(i) = e^{−λ} λ^i / i! for i = 0..len.
pub fn poisson_pmf_table(lambda: f64, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut log_term = -lambda;
    for i in 0..len {
        if i > 0 {
            log_term += (lambda / i as f64).ln();
        }
        out.push(log_term.exp());
    }
    out
}

/// Smallest K with P(X > K) ≤ eps for X ~ Poisson(λ).
pub fn poisson_tail_limit(lambda: f64, eps: f64) -> usize {
    let mut cdf = 0.0;
    let mut log_term = -lambda;
    let mut k = 0usize;
    loop {
        if k > 0 {
            log_term += (lambda / k as f64).ln();
        }
        cdf += log_term.exp();
        if 1.0 - cdf <= eps && k as f64 >= lambda {
            return k;
        }
        // cancellation in 1 − cdf: also stop once terms are negligible past the mode
        if k as f64 > lambda && log_term.exp() < eps * 1e-3 {
            return k;
        }
        k += 1;
    }
}
