//! Numerical checks of the Jensen-type inequalities behind the LMIs.
//!
//! Each check evaluates the three sides independently by quadrature or
//! truncated series and reports `gap = lhs − rhs_jensen − rhs_extra`, which
//! should never be negative beyond quadrature error. Double integrals are
//! taken at t = 0, i.e. over θ ≥ 0 and s ∈ [−θ−h, 0].

use crate::error::{Error, Result};
use crate::linalg::{is_positive_definite, Matrix, SymMatrix};
use crate::quad::{gamma_pdf, gamma_tail_limit, integrate_vec, poisson_pmf_table, poisson_tail_limit, psi_kernel, QuadOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Theorem {
    Lemma1,
    Thm1,
    Cor1,
    Thm2,
    Cor2,
    Lemma2Single,
    Lemma2Double,
    Thm3,
    Cor3,
}

impl Theorem {
    pub const ALL: [Theorem; 9] = [
        Theorem::Lemma1,
        Theorem::Thm1,
        Theorem::Cor1,
        Theorem::Thm2,
        Theorem::Cor2,
        Theorem::Lemma2Single,
        Theorem::Lemma2Double,
        Theorem::Thm3,
        Theorem::Cor3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Theorem::Lemma1 => "lemma1",
            Theorem::Thm1 => "thm1",
            Theorem::Cor1 => "cor1",
            Theorem::Thm2 => "thm2",
            Theorem::Cor2 => "cor2",
            Theorem::Lemma2Single => "lemma2_single",
            Theorem::Lemma2Double => "lemma2_double",
            Theorem::Thm3 => "thm3",
            Theorem::Cor3 => "cor3",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestFunctionKind {
    Polynomial,
    TrigDamped,
    PiecewiseRandom,
}

/// Seeded recipe for a random test function varying over `span`.
#[derive(Clone, Debug, PartialEq)]
pub struct TestFunctionSpec {
    pub kind: TestFunctionKind,
    pub seed: u64,
    pub dim: usize,
    pub span: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TestFunction {
    /// offset + slope·s
    Affine { offset: Vec<f64>, slope: Vec<f64> },
    /// Σ_k c[i][k] ((s − center)/scale)^k per component.
    Polynomial { coeffs: Vec<Vec<f64>>, center: f64, scale: f64 },
    /// offset + amp·cos(freq·s/scale + phase)·exp(−decay·|s|/scale)
    TrigDamped { offset: Vec<f64>, amp: Vec<f64>, freq: Vec<f64>, phase: Vec<f64>, decay: Vec<f64>, scale: f64 },
    /// Knot values joined by cosine blends (C¹), constant outside the knots.
    Piecewise { knots: Vec<f64>, values: Vec<Vec<f64>> },
}

impl TestFunction {
    pub fn dim(&self) -> usize {
        match self {
            TestFunction::Affine { offset, .. } => offset.len(),
            TestFunction::Polynomial { coeffs, .. } => coeffs.len(),
            TestFunction::TrigDamped { offset, .. } => offset.len(),
            TestFunction::Piecewise { values, .. } => values[0].len(),
        }
    }

    pub fn constant(v: Vec<f64>) -> Self {
        let slope = vec![0.0; v.len()];
        TestFunction::Affine { offset: v, slope }
    }

    pub fn eval(&self, s: f64, out: &mut [f64]) {
        match self {
            TestFunction::Affine { offset, slope } => {
                for i in 0..out.len() {
                    out[i] = offset[i] + slope[i] * s;
                }
            }
            TestFunction::Polynomial { coeffs, center, scale } => {
                let u = (s - center) / scale;
                for (o, c) in out.iter_mut().zip(coeffs) {
                    *o = c.iter().rev().fold(0.0, |acc, ck| acc * u + ck);
                }
            }
            TestFunction::TrigDamped { offset, amp, freq, phase, decay, scale } => {
                let u = s / scale;
                for i in 0..out.len() {
                    out[i] = offset[i] + amp[i] * (freq[i] * u + phase[i]).cos() * (-decay[i] * u.abs()).exp();
                }
            }
            TestFunction::Piecewise { knots, values } => {
                let last = knots.len() - 1;
                let (k, w) = if s <= knots[0] {
                    (0, 0.0)
                } else if s >= knots[last] {
                    (last - 1, 1.0)
                } else {
                    let k = knots.partition_point(|&x| x <= s) - 1;
                    let r = (s - knots[k]) / (knots[k + 1] - knots[k]);
                    (k, 0.5 - 0.5 * (PI * r).cos())
                };
                for i in 0..out.len() {
                    out[i] = (1.0 - w) * values[k][i] + w * values[k + 1][i];
                }
            }
        }
    }

    /// Points where derivatives beyond the first may jump.
    pub fn breakpoints(&self) -> &[f64] {
        match self {
            TestFunction::Piecewise { knots, .. } => knots,
            _ => &[],
        }
    }

    pub fn eval_scalar(&self, s: f64) -> f64 {
        let mut v = [0.0];
        self.eval(s, &mut v);
        v[0]
    }
}

impl TestFunctionSpec {
    pub fn build(&self) -> TestFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = self.span;
        let scale = (hi - lo).abs().max(1e-6);
        let d = self.dim;
        let mut u = |a: f64, b: f64| rng.gen_range(a..b);
        match self.kind {
            TestFunctionKind::Polynomial => {
                let coeffs = (0..d)
                    .map(|_| {
                        let deg = (u(0.0, 1.0) * 3.0).floor() as usize + 1;
                        (0..=deg).map(|_| u(-1.0, 1.0)).collect()
                    })
                    .collect();
                TestFunction::Polynomial { coeffs, center: lo, scale }
            }
            TestFunctionKind::TrigDamped => {
                let mut draw = |a: f64, b: f64| (0..d).map(|_| u(a, b)).collect::<Vec<_>>();
                TestFunction::TrigDamped {
                    offset: draw(-1.0, 1.0),
                    amp: draw(0.2, 1.5),
                    freq: draw(0.5, 6.0),
                    phase: draw(0.0, 2.0 * PI),
                    decay: draw(0.0, 1.0),
                    scale,
                }
            }
            TestFunctionKind::PiecewiseRandom => {
                let k = 6;
                let knots = (0..k).map(|i| lo + scale * i as f64 / (k - 1) as f64).collect();
                let values = (0..k).map(|_| (0..d).map(|_| u(-1.0, 1.0)).collect()).collect();
                TestFunction::Piecewise { knots, values }
            }
        }
    }
}

/// Which weight g the extra term uses.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightSpec {
    /// Plain Jensen: no extra term.
    None,
    /// An arbitrary scalar function, re-centred numerically so that its
    /// kernel-weighted integral vanishes.
    Custom(TestFunction),
    /// g(u) = a + b − 2u on [a, b].
    FiniteCentered,
    /// g(u) = K0·u − K1 (single integral or single sum).
    AffineCentered,
    /// g(s) = −s − ħ (double integral at t = 0).
    DoubleCentered,
}

#[derive(Clone)]
pub enum Kernel {
    /// Ψ(θ) = θ^{N−2} e^{−θ/T} / (T^N (N−2)!)
    Psi { n_shape: u32, t: f64 },
    /// Erlang(N, T) density.
    Erlang { n_shape: u32, t: f64 },
    /// Integrated over [0, upper].
    Custom { f: Arc<dyn Fn(f64) -> f64 + Send + Sync>, upper: f64 },
}

impl std::fmt::Debug for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Kernel::Psi { n_shape, t } => write!(f, "Psi(N={n_shape}, T={t})"),
            Kernel::Erlang { n_shape, t } => write!(f, "Erlang(N={n_shape}, T={t})"),
            Kernel::Custom { upper, .. } => write!(f, "Custom(upper={upper})"),
        }
    }
}

impl Kernel {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Kernel::Psi { n_shape, t } => psi_kernel(*n_shape, *t, s),
            Kernel::Erlang { n_shape, t } => gamma_pdf(*n_shape, *t, s),
            Kernel::Custom { f, .. } => f(s),
        }
    }

    /// Truncation point; generous enough for polynomial test functions.
    pub fn upper(&self) -> f64 {
        match self {
            Kernel::Psi { n_shape, t } => gamma_tail_limit(n_shape - 1 + 10, *t, 1e-17),
            Kernel::Erlang { n_shape, t } => gamma_tail_limit(n_shape + 10, *t, 1e-17),
            Kernel::Custom { upper, .. } => *upper,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Kernel::Psi { n_shape, t } | Kernel::Erlang { n_shape, t } if *n_shape < 2 || !(*t > 0.0) => {
                Err(Error::InvalidParameter(format!("kernel {self:?}")))
            }
            Kernel::Custom { upper, .. } if !(*upper > 0.0 && upper.is_finite()) => {
                Err(Error::InvalidParameter("custom kernel needs a finite positive upper limit".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DiscreteWeights {
    /// P(i) = e^{−λ} λ^i / i!
    PoissonP { lambda: f64 },
    /// Q(i) = P(i + 1)
    PoissonQ { lambda: f64 },
    Custom(Vec<f64>),
}

impl DiscreteWeights {
    pub fn table(&self) -> Result<Vec<f64>> {
        let (lambda, shift) = match self {
            DiscreteWeights::PoissonP { lambda } => (*lambda, 0),
            DiscreteWeights::PoissonQ { lambda } => (*lambda, 1),
            DiscreteWeights::Custom(w) => {
                if w.is_empty() || w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                    return Err(Error::InvalidParameter("weights must be finite and non-negative".into()));
                }
                return Ok(w.clone());
            }
        };
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda {lambda}")));
        }
        let len = poisson_tail_limit(lambda, 1e-18) + 40;
        Ok(poisson_pmf_table(lambda, len + shift)[shift..].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SumVariant {
    Single,
    /// Σ_i Σ_{j=−i−h}^{−1} M(i) x(j)ᵀ R x(j)
    Double { h: u32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapReport {
    pub lhs: f64,
    pub rhs_jensen: f64,
    pub rhs_extra: f64,
    pub gap: f64,
    /// Extra term through the corresponding corollary's closed form, when
    /// the weight is one of the centred affine choices.
    pub closed_form_extra: Option<f64>,
}

impl GapReport {
    fn new(lhs: f64, rhs_jensen: f64, rhs_extra: f64, closed_form_extra: Option<f64>) -> Self {
        Self { lhs, rhs_jensen, rhs_extra, gap: lhs - rhs_jensen - rhs_extra, closed_form_extra }
    }

    /// The same inequality with the closed-form extra term on the right.
    pub fn via_closed_form(&self) -> Option<GapReport> {
        self.closed_form_extra.map(|e| GapReport::new(self.lhs, self.rhs_jensen, e, Some(e)))
    }

    pub fn relative_gap(&self) -> f64 {
        self.gap / self.lhs.abs().max(f64::MIN_POSITIVE)
    }
}

fn check_r(r: &SymMatrix, omega_dim: usize) -> Result<()> {
    if r.dim() != omega_dim {
        return Err(Error::DimensionMismatch(format!("R is {}x{}, ω has {} components", r.dim(), r.dim(), omega_dim)));
    }
    if !is_positive_definite(r, 0.0)? {
        return Err(Error::InvalidParameter("R must be positive definite".into()));
    }
    Ok(())
}

fn extra_term(energy: f64, reference: f64, v: &[f64], r: &SymMatrix) -> f64 {
    // a centred weight that is numerically zero contributes nothing
    if !(energy > 1e-13 * reference.max(f64::MIN_POSITIVE)) {
        return 0.0;
    }
    r.quad_form(v) / energy
}

fn quad_opts() -> QuadOptions {
    QuadOptions { rel_tol: 1e-12, max_panels: 256 }
}

/// `integrate_vec` over [a, b] split at the breakpoints inside it.
fn integrate_split(
    mut f: impl FnMut(f64, &mut [f64]),
    dim: usize,
    a: f64,
    b: f64,
    breaks: &[f64],
) -> Result<Vec<f64>> {
    let mut pts: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    pts.sort_by(|x, y| x.partial_cmp(y).expect("finite breakpoints"));
    pts.dedup();
    let mut acc = vec![0.0; dim];
    let mut lo = a;
    for hi in pts.into_iter().chain(std::iter::once(b)) {
        let v = integrate_vec(&mut f, dim, lo, hi, &quad_opts())?;
        for (s, x) in acc.iter_mut().zip(v) {
            *s += x;
        }
        lo = hi;
    }
    Ok(acc)
}

fn all_breaks(omega: &TestFunction, g: &WeightSpec) -> Vec<f64> {
    let mut b = omega.breakpoints().to_vec();
    if let WeightSpec::Custom(f) = g {
        b.extend_from_slice(f.breakpoints());
    }
    b
}

fn scalar_weight(g: &WeightSpec) -> Result<Option<&TestFunction>> {
    match g {
        WeightSpec::Custom(f) if f.dim() != 1 => Err(Error::DimensionMismatch("custom weight must be scalar".into())),
        WeightSpec::Custom(f) => Ok(Some(f)),
        _ => Ok(None),
    }
}

/// ∫_a^b ωᵀRω ≥ (b−a)⁻¹ (∫ω)ᵀR(∫ω) + [∫g²]⁻¹ (∫gω)ᵀR(∫gω), ∫g = 0.
pub fn check_finite_interval(a: f64, b: f64, omega: &TestFunction, g: &WeightSpec, r: &SymMatrix) -> Result<GapReport> {
    if !(b > a) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidParameter(format!("interval [{a}, {b}]")));
    }
    let n = omega.dim();
    check_r(r, n)?;
    let custom = scalar_weight(g)?;
    let gfun: Box<dyn Fn(f64) -> f64 + Sync> = match g {
        WeightSpec::None => Box::new(|_| 0.0),
        WeightSpec::FiniteCentered => Box::new(move |u| a + b - 2.0 * u),
        WeightSpec::Custom(_) => {
            let f = custom.expect("custom");
            let mean = integrate_split(|s, o| o[0] = f.eval_scalar(s), 1, a, b, f.breakpoints())?[0] / (b - a);
            Box::new(move |u| f.eval_scalar(u) - mean)
        }
        _ => return Err(Error::InvalidParameter("finite interval takes None, Custom or FiniteCentered".into())),
    };
    let breaks = all_breaks(omega, g);
    let mut w = vec![0.0; n];
    let v = integrate_split(
        |s, o| {
            omega.eval(s, &mut w);
            let gs = gfun(s);
            o[0] = r.quad_form(&w);
            for i in 0..n {
                o[1 + i] = w[i];
                o[1 + n + i] = gs * w[i];
            }
            o[1 + 2 * n] = gs * gs;
        },
        2 + 2 * n,
        a,
        b,
        &breaks,
    )?;
    let m = &v[1..1 + n];
    let pi = &v[1 + n..1 + 2 * n];
    let jensen = r.quad_form(m) / (b - a);
    let extra = match g {
        WeightSpec::None => 0.0,
        _ => extra_term(v[1 + 2 * n], (b - a).powi(3), pi, r),
    };
    let closed = match g {
        WeightSpec::FiniteCentered => {
            // Ω = ∫ω − 2/(b−a) ∫_a^b ∫_a^s ω(r) dr ds
            let inner = integrate_split(
                |s, o| {
                    let iv = integrate_split(|rr, oo| omega.eval(rr, oo), n, a, s, &breaks)
                        .expect("finite limits");
                    o.copy_from_slice(&iv);
                },
                n,
                a,
                b,
                &breaks,
            )?;
            let big: Vec<f64> = (0..n).map(|i| m[i] - 2.0 / (b - a) * inner[i]).collect();
            Some(3.0 / (b - a) * r.quad_form(&big))
        }
        _ => None,
    };
    Ok(GapReport::new(v[0], jensen, extra, closed))
}

/// ∫₀^∞ K ωᵀRω ≥ K0⁻¹ (∫Kω)ᵀR(∫Kω) + [∫Kg²]⁻¹ Ω̄ᵀRΩ̄, ∫Kg = 0.
pub fn check_infinite_single(kernel: &Kernel, omega: &TestFunction, g: &WeightSpec, r: &SymMatrix) -> Result<GapReport> {
    kernel.validate()?;
    let n = omega.dim();
    check_r(r, n)?;
    let custom = scalar_weight(g)?;
    let up = kernel.upper();
    let breaks = all_breaks(omega, g);
    let mom = integrate_split(
        |s, o| {
            let k = kernel.eval(s);
            o[0] = k;
            o[1] = k * s;
            o[2] = k * s * s;
            o[3] = custom.map_or(0.0, |f| k * f.eval_scalar(s));
        },
        4,
        0.0,
        up,
        &breaks,
    )?;
    let (k0, k1, k2) = (mom[0], mom[1], mom[2]);
    let gfun: Box<dyn Fn(f64) -> f64 + Sync> = match g {
        WeightSpec::None => Box::new(|_| 0.0),
        WeightSpec::AffineCentered => Box::new(move |s| k0 * s - k1),
        WeightSpec::Custom(_) => {
            let f = custom.expect("custom");
            let shift = mom[3] / k0;
            Box::new(move |s| f.eval_scalar(s) - shift)
        }
        _ => return Err(Error::InvalidParameter("single integral takes None, Custom or AffineCentered".into())),
    };
    let mut w = vec![0.0; n];
    let v = integrate_split(
        |s, o| {
            let k = kernel.eval(s);
            omega.eval(s, &mut w);
            let gs = gfun(s);
            o[0] = k * r.quad_form(&w);
            for i in 0..n {
                o[1 + i] = k * w[i];
                o[1 + n + i] = k * gs * w[i];
                o[1 + 2 * n + i] = k * s * w[i];
            }
            o[1 + 3 * n] = k * gs * gs;
        },
        2 + 3 * n,
        0.0,
        up,
        &breaks,
    )?;
    let m = &v[1..1 + n];
    let jensen = r.quad_form(m) / k0;
    let extra = match g {
        WeightSpec::None => 0.0,
        _ => {
            let gmax = integrate_split(|s, o| o[0] = kernel.eval(s) * gfun(s).powi(2).max(1.0), 1, 0.0, up, &breaks)?[0];
            extra_term(v[1 + 3 * n], gmax, &v[1 + n..1 + 2 * n], r)
        }
    };
    let closed = match g {
        WeightSpec::AffineCentered => {
            let sm = &v[1 + 2 * n..1 + 3 * n];
            let om: Vec<f64> = (0..n).map(|i| k1 / k0 * m[i] - sm[i]).collect();
            Some(r.quad_form(&om) / (k2 - k1 * k1 / k0))
        }
        _ => None,
    };
    Ok(GapReport::new(v[0], jensen, extra, closed))
}

/// Kernel moments K0..K3 by quadrature.
pub fn kernel_moments(kernel: &Kernel) -> Result<[f64; 4]> {
    kernel.validate()?;
    let v = integrate_vec(
        |s, o| {
            let k = kernel.eval(s);
            o[0] = k;
            o[1] = k * s;
            o[2] = k * s * s;
            o[3] = k * s * s * s;
        },
        4,
        0.0,
        kernel.upper(),
        &quad_opts(),
    )?;
    Ok([v[0], v[1], v[2], v[3]])
}

/// The closed form K̃1 as printed for the double-integral corollary, from
/// kernel moments. (Its defining double integral is one sixth of this.)
pub fn k_tilde1_printed(k: [f64; 4], h: f64) -> f64 {
    let k1h = h * k[0] + k[1];
    h.powi(3) / 2.0 * k[0] + 2.0 * k[3] + (3.0 * h * h * k[0] * (h * k[1] + 2.0 * k[2]) - 3.0 * k[2] * k[2]) / (2.0 * k1h)
}

/// ħ = h/2 + (hK1 + K2)/(2 K1h)
pub fn hbar_from_moments(k: [f64; 4], h: f64) -> f64 {
    h / 2.0 + (h * k[1] + k[2]) / (2.0 * (h * k[0] + k[1]))
}

/// ∫₀^∞ θ-outer, s ∈ [−θ−h, 0] inner nested quadrature of `f(θ, s, out)`.
/// `breaks` are non-smooth points of the integrand in s.
pub fn double_integral(
    kernel: &Kernel,
    h: f64,
    dim: usize,
    breaks: &[f64],
    f: impl Fn(f64, f64, &mut [f64]) + Sync,
) -> Result<Vec<f64>> {
    let up = kernel.upper();
    // the inner integral is non-smooth in θ where its lower limit crosses a break
    let outer_breaks: Vec<f64> = breaks.iter().map(|b| -b - h).filter(|&x| x > 0.0).collect();
    let mut err = None;
    let v = integrate_split(
        |theta, o| {
            let k = kernel.eval(theta);
            if k == 0.0 {
                return;
            }
            match integrate_split(|s, oo| f(theta, s, oo), dim, -theta - h, 0.0, breaks) {
                Ok(iv) => {
                    for (oi, vi) in o.iter_mut().zip(iv) {
                        *oi = k * vi;
                    }
                }
                Err(e) => err = Some(e),
            }
        },
        dim,
        0.0,
        up,
        &outer_breaks,
    )?;
    match err {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

/// ∫∫K ωᵀRω ≥ K1h⁻¹ (∫∫Kω)ᵀR(∫∫Kω) + [∫∫Kg²]⁻¹ ΣᵀRΣ, ∫∫Kg = 0.
pub fn check_infinite_double(kernel: &Kernel, h: f64, omega: &TestFunction, g: &WeightSpec, r: &SymMatrix) -> Result<GapReport> {
    kernel.validate()?;
    if !(h >= 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!("h = {h}")));
    }
    let n = omega.dim();
    check_r(r, n)?;
    let custom = scalar_weight(g)?;
    let km = kernel_moments(kernel)?;
    let hbar = hbar_from_moments(km, h);
    let gfun: Box<dyn Fn(f64) -> f64 + Sync> = match g {
        WeightSpec::None => Box::new(|_| 0.0),
        WeightSpec::DoubleCentered => Box::new(move |s| -s - hbar),
        WeightSpec::Custom(_) => {
            let f = custom.expect("custom");
            let p = double_integral(kernel, h, 2, f.breakpoints(), |_, s, o| {
                o[0] = 1.0;
                o[1] = f.eval_scalar(s);
            })?;
            let shift = p[1] / p[0];
            Box::new(move |s| f.eval_scalar(s) - shift)
        }
        _ => return Err(Error::InvalidParameter("double integral takes None, Custom or DoubleCentered".into())),
    };
    let breaks = all_breaks(omega, g);
    let v = double_integral(kernel, h, 3 + 2 * n, &breaks, |_, s, o| {
        let mut w = [0.0; 16];
        let w = &mut w[..n];
        omega.eval(s, w);
        let gs = gfun(s);
        o[0] = r.quad_form(w);
        o[1] = 1.0;
        o[2] = gs * gs;
        for i in 0..n {
            o[3 + i] = w[i];
            o[3 + n + i] = gs * w[i];
        }
    })?;
    let k1h = v[1];
    let m = &v[3..3 + n];
    let sigma = &v[3 + n..3 + 2 * n];
    let jensen = r.quad_form(m) / k1h;
    let extra = match g {
        WeightSpec::None => 0.0,
        _ => extra_term(v[2], k1h * (1.0 + hbar * hbar), sigma, r),
    };
    let closed = match g {
        WeightSpec::DoubleCentered => Some(r.quad_form(sigma) / k_tilde1_printed(km, h)),
        _ => None,
    };
    Ok(GapReport::new(v[0], jensen, extra, closed))
}

/// Σ̃ through its triple-integral form
/// ∫∫_{−θ−h}^{0} ∫_{−θ−h}^{r} K ω(s) ds dr dθ − ħ ∫∫ K ω.
pub fn sigma_tilde_triple(kernel: &Kernel, h: f64, omega: &TestFunction) -> Result<Vec<f64>> {
    let n = omega.dim();
    let km = kernel_moments(kernel)?;
    let hbar = hbar_from_moments(km, h);
    let breaks = omega.breakpoints();
    let v = double_integral(kernel, h, 2 * n, breaks, |theta, rr, o| {
        let lo = -theta - h;
        let inner = integrate_split(|s, oo| omega.eval(s, oo), n, lo, rr, breaks).expect("inner integral");
        let mut w = [0.0; 16];
        omega.eval(rr, &mut w[..n]);
        o[..n].copy_from_slice(&inner);
        o[n..].copy_from_slice(&w[..n]);
    })?;
    Ok((0..n).map(|i| v[i] - hbar * v[n + i]).collect())
}

/// Single: Σ M ωᵀRω ≥ M0⁻¹|Σ M x|²_R + [Σ M g²]⁻¹ |Σ M g x|²_R.
/// Double (no extra term): Σ_i Σ_{j=−i−h}^{−1} M(i) x(j)ᵀRx(j) ≥ M1h⁻¹ |·|²_R.
pub fn check_summation(
    weights: &DiscreteWeights,
    variant: SumVariant,
    x: &TestFunction,
    g: &WeightSpec,
    r: &SymMatrix,
) -> Result<GapReport> {
    let n = x.dim();
    check_r(r, n)?;
    let m = weights.table()?;
    let custom = scalar_weight(g)?;
    let mut w = vec![0.0; n];
    match variant {
        SumVariant::Double { h } => {
            if *g != WeightSpec::None {
                return Err(Error::InvalidParameter("double summation has no extra-term form".into()));
            }
            let mut lhs = 0.0;
            let mut acc = vec![0.0; n];
            let mut m1h = 0.0;
            for (i, &mi) in m.iter().enumerate() {
                m1h += (i as f64 + f64::from(h)) * mi;
                let len = i as i64 + i64::from(h);
                for j in -len..0 {
                    x.eval(j as f64, &mut w);
                    lhs += mi * r.quad_form(&w);
                    for c in 0..n {
                        acc[c] += mi * w[c];
                    }
                }
            }
            let jensen = if m1h > 0.0 { r.quad_form(&acc) / m1h } else { 0.0 };
            Ok(GapReport::new(lhs, jensen, 0.0, None))
        }
        SumVariant::Single => {
            let (mut m0, mut m1, mut m2, mut mg) = (0.0, 0.0, 0.0, 0.0);
            for (i, &mi) in m.iter().enumerate() {
                let fi = i as f64;
                m0 += mi;
                m1 += mi * fi;
                m2 += mi * fi * fi;
                mg += custom.map_or(0.0, |f| mi * f.eval_scalar(fi));
            }
            if !(m0 > 0.0) {
                return Err(Error::InvalidParameter("weights sum to zero".into()));
            }
            let gfun = |i: f64| -> f64 {
                match g {
                    WeightSpec::AffineCentered => m0 * i - m1,
                    WeightSpec::Custom(f) => f.eval_scalar(i) - mg / m0,
                    _ => 0.0,
                }
            };
            if !matches!(g, WeightSpec::None | WeightSpec::AffineCentered | WeightSpec::Custom(_)) {
                return Err(Error::InvalidParameter("single summation takes None, Custom or AffineCentered".into()));
            }
            let (mut lhs, mut g2, mut gmax) = (0.0, 0.0, 0.0);
            let mut sx = vec![0.0; n];
            let mut gx = vec![0.0; n];
            let mut ix = vec![0.0; n];
            for (i, &mi) in m.iter().enumerate() {
                let fi = i as f64;
                x.eval(fi, &mut w);
                let gi = gfun(fi);
                lhs += mi * r.quad_form(&w);
                g2 += mi * gi * gi;
                gmax += mi * gi.abs().max(1.0).powi(2);
                for c in 0..n {
                    sx[c] += mi * w[c];
                    gx[c] += mi * gi * w[c];
                    ix[c] += mi * fi * w[c];
                }
            }
            let jensen = r.quad_form(&sx) / m0;
            let extra = match g {
                WeightSpec::None => 0.0,
                _ => extra_term(g2, gmax, &gx, r),
            };
            let closed = match g {
                WeightSpec::AffineCentered => {
                    let pt: Vec<f64> = (0..n).map(|c| m1 / m0 * sx[c] - ix[c]).collect();
                    Some(r.quad_form(&pt) / (m2 - m1 * m1 / m0))
                }
                _ => None,
            };
            Ok(GapReport::new(lhs, jensen, extra, closed))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatteryRow {
    pub theorem: Theorem,
    pub seed: u64,
    pub report: GapReport,
}

/// Seed of instance `index` of `theorem` in a battery started from `base`.
pub fn instance_seed(base: u64, theorem: Theorem, index: usize) -> u64 {
    let t = Theorem::ALL.iter().position(|x| *x == theorem).expect("listed") as u64;
    let mut z = base ^ (t << 40) ^ index as u64;
    // splitmix64 finaliser
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
    let l = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let llt = l.matmul(&l.transpose()).expect("square");
    SymMatrix::symmetric_part(&llt).expect("square").shifted(0.05)
}

fn random_kind(rng: &mut ChaCha8Rng) -> TestFunctionKind {
    match rng.gen_range(0..3) {
        0 => TestFunctionKind::Polynomial,
        1 => TestFunctionKind::TrigDamped,
        _ => TestFunctionKind::PiecewiseRandom,
    }
}

fn random_fn(rng: &mut ChaCha8Rng, dim: usize, span: (f64, f64)) -> TestFunction {
    TestFunctionSpec { kind: random_kind(rng), seed: rng.gen(), dim, span }.build()
}

/// One randomly generated instance of `theorem`, fully determined by `seed`.
pub fn run_instance(theorem: Theorem, seed: u64) -> Result<GapReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=3);
    let r = random_spd(&mut rng, n);
    let n_shape = rng.gen_range(2..=5u32);
    let t = rng.gen_range(0.05..1.0);
    let psi = Kernel::Psi { n_shape, t };
    let mean = f64::from(n_shape - 1) * t;
    let lambda = rng.gen_range(0.2..3.0);
    match theorem {
        Theorem::Lemma1 => {
            let a = rng.gen_range(-2.0..2.0);
            let b = a + rng.gen_range(0.1..3.0);
            let omega = random_fn(&mut rng, n, (a, b));
            let g = WeightSpec::Custom(random_fn(&mut rng, 1, (a, b)));
            check_finite_interval(a, b, &omega, &g, &r)
        }
        Theorem::Thm1 | Theorem::Cor1 => {
            let omega = random_fn(&mut rng, n, (0.0, 3.0 * mean));
            if theorem == Theorem::Thm1 {
                let g = WeightSpec::Custom(random_fn(&mut rng, 1, (0.0, 3.0 * mean)));
                check_infinite_single(&psi, &omega, &g, &r)
            } else {
                let rep = check_infinite_single(&psi, &omega, &WeightSpec::AffineCentered, &r)?;
                Ok(rep.via_closed_form().expect("affine weight has a closed form"))
            }
        }
        Theorem::Thm2 | Theorem::Cor2 => {
            let h = rng.gen_range(0.0..1.0);
            let span = (-3.0 * (mean + h), 0.0);
            let omega = random_fn(&mut rng, n, span);
            if theorem == Theorem::Thm2 {
                let g = WeightSpec::Custom(random_fn(&mut rng, 1, span));
                check_infinite_double(&psi, h, &omega, &g, &r)
            } else {
                let rep = check_infinite_double(&psi, h, &omega, &WeightSpec::DoubleCentered, &r)?;
                Ok(rep.via_closed_form().expect("centred weight has a closed form"))
            }
        }
        Theorem::Lemma2Single | Theorem::Thm3 | Theorem::Cor3 => {
            let weights = if rng.gen_bool(0.5) {
                DiscreteWeights::PoissonP { lambda }
            } else {
                DiscreteWeights::PoissonQ { lambda }
            };
            let x = random_fn(&mut rng, n, (0.0, lambda + 4.0));
            match theorem {
                Theorem::Lemma2Single => check_summation(&weights, SumVariant::Single, &x, &WeightSpec::None, &r),
                Theorem::Thm3 => {
                    let g = WeightSpec::Custom(random_fn(&mut rng, 1, (0.0, lambda + 4.0)));
                    check_summation(&weights, SumVariant::Single, &x, &g, &r)
                }
                _ => {
                    let rep = check_summation(&weights, SumVariant::Single, &x, &WeightSpec::AffineCentered, &r)?;
                    Ok(rep.via_closed_form().expect("affine weight has a closed form"))
                }
            }
        }
        Theorem::Lemma2Double => {
            let h = rng.gen_range(0..=3u32);
            let weights = DiscreteWeights::PoissonQ { lambda };
            let x = random_fn(&mut rng, n, (-(lambda + f64::from(h) + 4.0), 0.0));
            check_summation(&weights, SumVariant::Double { h }, &x, &WeightSpec::None, &r)
        }
    }
}

/// `trials` instances of every theorem, ordered by theorem then index.
pub fn run_battery(trials: usize, base_seed: u64) -> Result<Vec<BatteryRow>> {
    let jobs: Vec<(Theorem, u64)> = Theorem::ALL
        .iter()
        .flat_map(|&th| (0..trials).map(move |i| (th, instance_seed(base_seed, th, i))))
        .collect();
    jobs.par_iter()
        .map(|&(theorem, seed)| Ok(BatteryRow { theorem, seed, report: run_instance(theorem, seed)? }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r1() -> SymMatrix {
        SymMatrix::identity(1)
    }

    fn ident() -> TestFunction {
        TestFunction::Affine { offset: vec![0.0], slope: vec![1.0] }
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn finite_constant_is_tight() {
        let rep = check_finite_interval(-1.0, 2.0, &TestFunction::constant(vec![1.5, -0.5]), &WeightSpec::FiniteCentered, &SymMatrix::identity(2)).unwrap();
        assert!(close(rep.lhs, rep.rhs_jensen, 1e-12));
        assert!(rep.rhs_extra.abs() < 1e-12 && rep.gap.abs() < 1e-12);
    }

    #[test]
    fn finite_affine_is_reproduced() {
        // ∫s² − (∫s)² = 1/12 on [0,1], all of it recovered by the extra term
        let rep = check_finite_interval(0.0, 1.0, &ident(), &WeightSpec::FiniteCentered, &r1()).unwrap();
        assert!(close(rep.lhs, 1.0 / 3.0, 1e-12));
        assert!(close(rep.rhs_jensen, 0.25, 1e-12));
        assert!(close(rep.rhs_extra, 1.0 / 12.0, 1e-10));
        assert!(close(rep.closed_form_extra.unwrap(), 1.0 / 12.0, 1e-10));
        assert!(rep.gap.abs() < 1e-12);
    }

    #[test]
    fn single_psi_kernel_identity_function() {
        let k = Kernel::Psi { n_shape: 2, t: 1.0 };
        let rep = check_infinite_single(&k, &ident(), &WeightSpec::AffineCentered, &r1()).unwrap();
        assert!(close(rep.lhs, 2.0, 1e-10), "{rep:?}");
        assert!(close(rep.rhs_jensen, 1.0, 1e-10));
        assert!(close(rep.rhs_extra, 1.0, 1e-10));
        assert!(rep.gap.abs() < 1e-9);
        assert!(close(rep.closed_form_extra.unwrap(), 1.0, 1e-10));
    }

    #[test]
    fn single_constant_has_no_extra() {
        let k = Kernel::Erlang { n_shape: 3, t: 0.4 };
        let rep = check_infinite_single(&k, &TestFunction::constant(vec![2.0]), &WeightSpec::AffineCentered, &r1()).unwrap();
        assert!(rep.rhs_extra.abs() < 1e-10 && rep.gap.abs() < 1e-10);
    }

    #[test]
    fn double_constant_is_jensen_tight() {
        let k = Kernel::Psi { n_shape: 3, t: 0.2 };
        let h = 0.3;
        let rep = check_infinite_double(&k, h, &TestFunction::constant(vec![1.0, 2.0]), &WeightSpec::DoubleCentered, &SymMatrix::identity(2)).unwrap();
        let km = kernel_moments(&k).unwrap();
        let k1h = h * km[0] + km[1];
        assert!(close(rep.lhs, 5.0 * k1h, 1e-10) && close(rep.rhs_jensen, rep.lhs, 1e-10));
        let sig = sigma_tilde_triple(&k, h, &TestFunction::constant(vec![1.0, 2.0])).unwrap();
        assert!(sig.iter().all(|v| v.abs() < 1e-10), "{sig:?}");
    }

    #[test]
    fn double_denominator_against_moment_forms() {
        // ∫∫ Ψ g² by quadrature against the moment expression and the printed form
        let k = Kernel::Psi { n_shape: 2, t: 0.1 };
        let h = 0.0;
        let km = kernel_moments(&k).unwrap();
        let hbar = hbar_from_moments(km, h);
        let v = double_integral(&k, h, 1, &[], |_, s, o| o[0] = (s + hbar).powi(2)).unwrap();
        let gm = crate::gamma::gamma_moments(2, 0.1, h).unwrap();
        assert!(close(v[0], gm.psi_tilde1_integral(h), 1e-10), "{} vs {}", v[0], gm.psi_tilde1_integral(h));
        assert!(close(v[0], 0.01, 1e-10));
        assert!(close(k_tilde1_printed(km, h), 0.06, 1e-10));
        assert!(close(gm.psi_tilde1, 0.06, 1e-12));
    }

    #[test]
    fn sigma_tilde_forms_agree() {
        let k = Kernel::Erlang { n_shape: 3, t: 0.3 };
        let h = 0.2;
        let omega = TestFunctionSpec { kind: TestFunctionKind::TrigDamped, seed: 11, dim: 2, span: (-2.0, 0.0) }.build();
        let triple = sigma_tilde_triple(&k, h, &omega).unwrap();
        let km = kernel_moments(&k).unwrap();
        let hbar = hbar_from_moments(km, h);
        let direct = double_integral(&k, h, 2, omega.breakpoints(), |_, s, o| {
            omega.eval(s, o);
            o.iter_mut().for_each(|v| *v *= -s - hbar);
        })
        .unwrap();
        for i in 0..2 {
            assert!(close(triple[i], direct[i], 1e-9), "{triple:?} vs {direct:?}");
        }
    }

    #[test]
    fn double_affine_is_reproduced() {
        let k = Kernel::Psi { n_shape: 4, t: 0.25 };
        let rep = check_infinite_double(&k, 0.15, &ident(), &WeightSpec::DoubleCentered, &r1()).unwrap();
        assert!(rep.gap.abs() < 1e-9 * rep.lhs, "{rep:?}");
        // the printed denominator is six times the integral, so it recovers a sixth
        assert!(close(rep.closed_form_extra.unwrap(), rep.rhs_extra / 6.0, 1e-9));
    }

    #[test]
    fn summation_identity_sequence_is_tight() {
        let lambda = 1.0;
        let q0 = -(-lambda as f64).exp_m1();
        let q1 = lambda - q0;
        let q2 = lambda * lambda - q1;
        let rep = check_summation(&DiscreteWeights::PoissonQ { lambda }, SumVariant::Single, &ident(), &WeightSpec::AffineCentered, &r1()).unwrap();
        assert!(close(rep.lhs, q2, 1e-12));
        assert!(close(rep.rhs_jensen, q1 * q1 / q0, 1e-12));
        assert!(close(rep.rhs_extra, q2 - q1 * q1 / q0, 1e-10));
        assert!(rep.gap.abs() < 1e-12);
    }

    #[test]
    fn summation_constant_single_is_tight() {
        let rep = check_summation(&DiscreteWeights::PoissonP { lambda: 2.0 }, SumVariant::Single, &TestFunction::constant(vec![3.0]), &WeightSpec::AffineCentered, &r1()).unwrap();
        assert!(rep.gap.abs() < 1e-12 && rep.rhs_extra.abs() < 1e-12);
    }

    #[test]
    fn summation_double_rejects_extra_weight() {
        let w = DiscreteWeights::PoissonP { lambda: 1.0 };
        assert!(check_summation(&w, SumVariant::Double { h: 1 }, &ident(), &WeightSpec::AffineCentered, &r1()).is_err());
        let rep = check_summation(&w, SumVariant::Double { h: 1 }, &ident(), &WeightSpec::None, &r1()).unwrap();
        assert!(rep.gap >= 0.0);
    }

    #[test]
    fn rejects_indefinite_r_and_bad_kernels() {
        let bad = SymMatrix::from_upper(1, |_, _| -1.0);
        assert!(check_finite_interval(0.0, 1.0, &ident(), &WeightSpec::None, &bad).is_err());
        let k = Kernel::Psi { n_shape: 1, t: 1.0 };
        assert!(check_infinite_single(&k, &ident(), &WeightSpec::None, &r1()).is_err());
        assert!(DiscreteWeights::PoissonP { lambda: 0.0 }.table().is_err());
    }

    #[test]
    fn panel_doubling_is_stable_on_goldens() {
        let omega = TestFunctionSpec { kind: TestFunctionKind::PiecewiseRandom, seed: 3, dim: 2, span: (-6.0, 0.0) }.build();
        let k = Kernel::Psi { n_shape: 3, t: 0.5 };
        let run = |panels| {
            let opts = QuadOptions { rel_tol: 0.0, max_panels: panels };
            crate::quad::integrate_vec(
                |s, o| {
                    let mut w = [0.0; 2];
                    omega.eval(-s, &mut w);
                    o[0] = k.eval(s) * (w[0] * w[0] + w[1] * w[1]);
                },
                1,
                0.0,
                k.upper(),
                &opts,
            )
            .unwrap()[0]
        };
        let (a, b) = (run(128), run(256));
        assert!(close(a, b, 1e-9), "{a} vs {b}");
    }

    #[test]
    fn battery_is_reproducible() {
        let a = run_battery(2, 99).unwrap();
        let b = run_battery(2, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2 * Theorem::ALL.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_instances_never_violate(seed in any::<u64>(), t in 0usize..9) {
            let th = Theorem::ALL[t];
            let rep = run_instance(th, seed).unwrap();
            prop_assert!(rep.relative_gap() >= -1e-7, "{} seed {seed}: {rep:?}", th.name());
            prop_assert!(rep.rhs_extra >= -1e-12 * rep.lhs.abs().max(1.0));
        }
    }
}
