//! Gamma-distributed delay: x'(t) = A x(t) + A1 ∫₀^∞ Γ(θ) x(t−θ−h) dθ with Γ
//! the Erlang(N, T) density, certified through the two LKF-based LMIs
//! (`Prop1` on ξ = [x, y, ρ], `Prop2` adding ζ).

use crate::error::{Error, Result};
use crate::linalg::{eig_sym, Matrix, SymMatrix};
use crate::sdp::{solve_feasibility, BlockBuilder, FeasibilityProblem, FeasibilityResult, SolveOptions, Status};
use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct GammaDelaySystem {
    pub a: Matrix,
    pub a1: Matrix,
    /// Erlang shape N ≥ 2.
    pub n_shape: u32,
    /// Scale T > 0.
    pub t: f64,
    /// Constant extra delay h ≥ 0.
    pub h: f64,
}

impl GammaDelaySystem {
    pub fn new(a: Matrix, a1: Matrix, n_shape: u32, t: f64, h: f64) -> Result<Self> {
        check_pair(&a, &a1)?;
        if n_shape < 2 {
            return Err(Error::InvalidParameter(format!("shape N must be >= 2, got {n_shape}")));
        }
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidParameter(format!("scale T must be positive, got {t}")));
        }
        if !(h >= 0.0 && h.is_finite()) {
            return Err(Error::InvalidParameter(format!("h must be >= 0, got {h}")));
        }
        Ok(Self { a, a1, n_shape, t, h })
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn with_params(&self, t: f64, h: f64) -> Result<Self> {
        Self::new(self.a.clone(), self.a1.clone(), self.n_shape, t, h)
    }

    /// Restriction to the orthogonal complement of ker A ∩ ker A1.
    ///
    /// On that kernel both matrices vanish, so the complement coordinates
    /// w = Uᵀx obey a closed delay equation with UᵀAU, UᵀA1U while the kernel
    /// coordinates only integrate w. Certifying the restriction proves decay
    /// of w (e.g. disagreement in consensus-type systems); the kernel modes
    /// themselves are never asymptotically stable.
    pub fn neutral_reduction(&self) -> Result<Option<NeutralReduction>> {
        let (kernel, complement) = common_kernel(&self.a, &self.a1)?;
        if kernel.cols() == 0 {
            return Ok(None);
        }
        if complement.cols() == 0 {
            return Err(Error::InvalidParameter("A = A1 = 0: every mode is neutral".into()));
        }
        let ut = complement.transpose();
        let a = ut.matmul(&self.a)?.matmul(&complement)?;
        let a1 = ut.matmul(&self.a1)?.matmul(&complement)?;
        Ok(Some(NeutralReduction {
            reduced: Self::new(a, a1, self.n_shape, self.t, self.h)?,
            kernel,
            complement,
        }))
    }
}

pub(crate) fn check_pair(a: &Matrix, a1: &Matrix) -> Result<()> {
    if !a.is_square() || a.rows() == 0 || a.rows() != a1.rows() || a.cols() != a1.cols() {
        return Err(Error::DimensionMismatch(format!(
            "A is {}x{}, A1 is {}x{}; both must be the same square size",
            a.rows(),
            a.cols(),
            a1.rows(),
            a1.cols()
        )));
    }
    if !a.is_finite() || !a1.is_finite() {
        return Err(Error::NonFinite("system matrices".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeutralReduction {
    pub reduced: GammaDelaySystem,
    /// Orthonormal basis of ker A ∩ ker A1 (columns).
    pub kernel: Matrix,
    /// Orthonormal basis of its complement (columns).
    pub complement: Matrix,
}

/// (kernel, complement) bases of ker A ∩ ker A1 via AᵀA + A1ᵀA1.
pub fn common_kernel(a: &Matrix, a1: &Matrix) -> Result<(Matrix, Matrix)> {
    let m = a.transpose().matmul(a)?.add(&a1.transpose().matmul(a1)?)?;
    let m = SymMatrix::symmetric_part(&m)?;
    let e = eig_sym(&m)?;
    let n = m.dim();
    let tol = 1e-12 * (1.0 + m.frobenius_norm());
    let ker: Vec<usize> = (0..n).filter(|&k| e.values[k].abs() <= tol).collect();
    let comp: Vec<usize> = (0..n).filter(|&k| e.values[k].abs() > tol).collect();
    let pick = |cols: &[usize]| Matrix::from_fn(n, cols.len(), |i, c| e.vectors[(i, cols[c])]);
    Ok((pick(&ker), pick(&comp)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaMoments {
    pub psi0: f64,
    pub psi1: f64,
    pub psi2: f64,
    pub psi3: f64,
    pub psi1h: f64,
    /// Closed form used by the `Prop2` LMI.
    pub psi_tilde1: f64,
    pub hbar: f64,
}

/// ∫₀^∞ θ^k Ψ(θ) dθ = T^{k−1} (N−1) N ⋯ (N+k−2).
fn psi_moment(n_shape: u32, t: f64, k: u32) -> f64 {
    let rising: f64 = (0..k).map(|j| f64::from(n_shape - 1 + j)).product();
    t.powi(k as i32 - 1) * rising
}

pub fn gamma_moments(n_shape: u32, t: f64, h: f64) -> Result<GammaMoments> {
    if n_shape < 2 || !(t > 0.0) || !(h >= 0.0) || !t.is_finite() || !h.is_finite() {
        return Err(Error::InvalidParameter(format!("gamma moments need N >= 2, T > 0, h >= 0 (N={n_shape}, T={t}, h={h})")));
    }
    let psi0 = psi_moment(n_shape, t, 0);
    let psi1 = psi_moment(n_shape, t, 1);
    let psi2 = psi_moment(n_shape, t, 2);
    let psi3 = psi_moment(n_shape, t, 3);
    let psi1h = h * psi0 + psi1;
    let hbar = h / 2.0 + (h * psi1 + psi2) / (2.0 * psi1h);
    let psi_tilde1 = h.powi(3) / (2.0 * t)
        + 2.0 * psi3
        + (3.0 * h * h * psi0 * (h * psi1 + 2.0 * psi2) - 3.0 * psi2 * psi2) / (2.0 * psi1h);
    Ok(GammaMoments { psi0, psi1, psi2, psi3, psi1h, psi_tilde1, hbar })
}

impl GammaMoments {
    /// ∫₀^∞ ∫_{−θ−h}^0 Ψ(θ) g(s)² ds dθ for the centred affine weight
    /// g(s) = −s − ħ, written through M_k = ∫ Ψ(θ)(θ+h)^k dθ as
    /// M3/3 − M2²/(4 M1). The `psi_tilde1` closed form is six times this.
    pub fn psi_tilde1_integral(&self, h: f64) -> f64 {
        let m1 = self.psi1h;
        let m2 = self.psi2 + 2.0 * h * self.psi1 + h * h * self.psi0;
        let m3 = self.psi3 + 3.0 * h * self.psi2 + 3.0 * h * h * self.psi1 + h.powi(3) * self.psi0;
        m3 / 3.0 - m2 * m2 / (4.0 * m1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GammaProp {
    Prop1,
    Prop2,
}

impl GammaProp {
    pub fn label(&self) -> &'static str {
        match self {
            GammaProp::Prop1 => "1",
            GammaProp::Prop2 => "2",
        }
    }
}

#[derive(Clone, Copy)]
enum B<'a> {
    Z,
    I(f64),
    M(&'a Matrix),
}

/// One block row [b_1 … b_k] of n×n blocks.
fn brow(n: usize, items: &[B]) -> Matrix {
    let mut out = Matrix::zeros(n, n * items.len());
    for (k, b) in items.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                out[(i, k * n + j)] = match b {
                    B::Z => 0.0,
                    B::I(c) => {
                        if i == j {
                            *c
                        } else {
                            0.0
                        }
                    }
                    B::M(m) => m[(i, j)],
                };
            }
        }
    }
    out
}

fn vstack(rows: &[Matrix]) -> Matrix {
    let blocks: Vec<Vec<Option<&Matrix>>> = rows.iter().map(|r| vec![Some(r)]).collect();
    Matrix::from_blocks(&blocks).expect("consistent widths")
}

pub fn build_prop1(sys: &GammaDelaySystem) -> Result<FeasibilityProblem> {
    let n = sys.dim();
    let (t, nn) = (sys.t, f64::from(sys.n_shape));
    let mo = gamma_moments(sys.n_shape, t, sys.h)?;
    let (a, a1) = (&sys.a, &sys.a1);
    use B::*;

    let e1 = brow(n, &[I(1.0), Z, Z]);
    let e3 = brow(n, &[Z, Z, I(1.0)]);
    let f0 = vstack(&[brow(n, &[M(a), M(a1), Z]), brow(n, &[Z, I(-1.0 / t), I(1.0)])]);
    let f1 = vstack(&[brow(n, &[I(1.0), Z, Z]), brow(n, &[Z, I(1.0), Z])]);
    let f01 = brow(n, &[M(a), M(a1), Z]);
    let f13 = brow(n, &[I(1.0 / t), Z, I(-1.0)]);
    let f23 = brow(n, &[Z, I(-1.0), I(t)]);

    let mut p = FeasibilityProblem::new();
    let w = p.add_variable("W", 2 * n);
    let g = p.add_variable("G", n);
    let hv = p.add_variable("H", n);
    let mut xi = BlockBuilder::new("-Xi", 3 * n);
    xi.add_congruence(g, &e1, 1.0 / t)?
        .add_congruence(g, &e3, -t)?
        .add_cross(w, &f1, &f0, 1.0)?
        .add_congruence(g, &f23, -(nn - 1.0) / t)?
        .add_congruence(hv, &f01, mo.psi1h)?
        .add_congruence(hv, &f13, -1.0 / mo.psi1h)?
        .negate();
    p.add_block(xi.build())?;
    for v in [w, g, hv] {
        p.require_positive(v)?;
    }
    Ok(p)
}

pub fn build_prop2(sys: &GammaDelaySystem) -> Result<FeasibilityProblem> {
    let n = sys.dim();
    let (t, h, nn) = (sys.t, sys.h, f64::from(sys.n_shape));
    let mo = gamma_moments(sys.n_shape, t, h)?;
    let (a, a1) = (&sys.a, &sys.a1);
    use B::*;

    let e1 = brow(n, &[I(1.0), Z, Z, Z]);
    let e3 = brow(n, &[Z, Z, I(1.0), Z]);
    let f1 = vstack(&[brow(n, &[I(1.0), Z, Z, Z]), brow(n, &[Z, I(1.0), Z, Z]), brow(n, &[Z, Z, Z, I(1.0)])]);
    let f0 = vstack(&[
        brow(n, &[M(a), M(a1), Z, Z]),
        brow(n, &[Z, I(-1.0 / t), I(1.0), Z]),
        brow(n, &[I(1.0 / t), Z, I(-1.0), Z]),
    ]);
    let f01 = brow(n, &[M(a), M(a1), Z, Z]);
    let f13 = brow(n, &[I(1.0 / t), Z, I(-1.0), Z]);
    let f33 = brow(n, &[I(mo.hbar / t), I(nn - 1.0), I(h - mo.hbar), I(-1.0)]);
    let f23 = brow(n, &[Z, I(-1.0), I(t), Z]);

    let mut p = FeasibilityProblem::new();
    let w = p.add_variable("W", 3 * n);
    let g = p.add_variable("G", n);
    let hv = p.add_variable("H", n);
    let mut xi = BlockBuilder::new("-Xi", 4 * n);
    xi.add_congruence(g, &e1, 1.0 / t)?
        .add_congruence(g, &e3, -t)?
        .add_cross(w, &f1, &f0, 1.0)?
        .add_congruence(g, &f23, -(nn - 1.0) / t)?
        .add_congruence(hv, &f01, mo.psi1h)?
        .add_congruence(hv, &f13, -1.0 / mo.psi1h)?
        .add_congruence(hv, &f33, -1.0 / mo.psi_tilde1)?
        .negate();
    p.add_block(xi.build())?;
    for v in [w, g, hv] {
        p.require_positive(v)?;
    }
    Ok(p)
}

pub fn build_gamma(sys: &GammaDelaySystem, prop: GammaProp) -> Result<FeasibilityProblem> {
    match prop {
        GammaProp::Prop1 => build_prop1(sys),
        GammaProp::Prop2 => build_prop2(sys),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertifyOptions {
    pub solve: SolveOptions,
    /// Certify the restriction off ker A ∩ ker A1 when that kernel is nontrivial.
    pub reduce_neutral: bool,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self { solve: SolveOptions::default(), reduce_neutral: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaCertificate {
    pub prop: GammaProp,
    pub result: FeasibilityResult,
    /// Dimension of the common kernel that was projected out (0 if none).
    pub neutral_dim: usize,
}

impl GammaCertificate {
    pub fn status(&self) -> Status {
        self.result.status
    }
}

pub fn certify_gamma(sys: &GammaDelaySystem, prop: GammaProp, opts: &CertifyOptions) -> Result<GammaCertificate> {
    let (target, neutral_dim) = match (opts.reduce_neutral, sys.neutral_reduction()?) {
        (true, Some(r)) => (r.reduced, r.kernel.cols()),
        _ => (sys.clone(), 0),
    };
    let problem = build_gamma(&target, prop)?;
    let result = solve_feasibility(&problem, &opts.solve)?;
    Ok(GammaCertificate { prop, result, neutral_dim })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaxScale {
    /// Largest certified T (to the bisection tolerance); `None` when even the
    /// bracket's lower end is not certified.
    pub max_t: Option<f64>,
    pub diagnostics: Vec<String>,
    pub solves: usize,
}

pub const PRESCAN_POINTS: usize = 8;

/// Largest T in `bracket` with a Feasible verdict at fixed h, assuming the
/// feasible set in T is an interval starting at the lower end. A pre-scan of
/// equispaced points checks that assumption and reports violations.
pub fn max_scale_bisect(
    template: &GammaDelaySystem,
    h: f64,
    prop: GammaProp,
    bracket: (f64, f64),
    tol: f64,
    opts: &CertifyOptions,
) -> Result<MaxScale> {
    let (lo, hi) = bracket;
    if !(lo > 0.0 && hi > lo && tol > 0.0) {
        return Err(Error::InvalidParameter(format!("bracket ({lo}, {hi}) with tol {tol}")));
    }
    let feasible = |t: f64| -> Result<bool> {
        Ok(certify_gamma(&template.with_params(t, h)?, prop, opts)?.status() == Status::Feasible)
    };
    let grid: Vec<f64> =
        (0..PRESCAN_POINTS).map(|i| lo + (hi - lo) * i as f64 / (PRESCAN_POINTS - 1) as f64).collect();
    let flags: Vec<bool> = grid.par_iter().map(|&t| feasible(t)).collect::<Result<_>>()?;
    let mut solves = PRESCAN_POINTS;
    let mut diagnostics = Vec::new();
    if !flags[0] {
        if flags.iter().any(|&f| f) {
            diagnostics.push(format!("h={h}: T={lo} not certified but a larger T is; assumption of an interval violated"));
        }
        return Ok(MaxScale { max_t: None, diagnostics, solves });
    }
    let first_bad = flags.iter().position(|&f| !f);
    let Some(k) = first_bad else {
        return Ok(MaxScale { max_t: Some(hi), diagnostics, solves });
    };
    if flags[k..].iter().any(|&f| f) {
        diagnostics.push(format!("h={h}: feasible T values after an infeasible one; bisecting the first gap"));
    }
    let (mut a, mut b) = (grid[k - 1], grid[k]);
    while b - a > tol {
        let mid = 0.5 * (a + b);
        solves += 1;
        if feasible(mid)? {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(MaxScale { max_t: Some(a), diagnostics, solves })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionCell {
    pub t: f64,
    pub h: f64,
    pub prop: GammaProp,
    pub status: Status,
    pub margin: f64,
}

/// Every (T, h) grid cell, T-major, evaluated in parallel.
pub fn region_sweep_gamma(
    template: &GammaDelaySystem,
    t_grid: &[f64],
    h_grid: &[f64],
    prop: GammaProp,
    opts: &CertifyOptions,
) -> Result<Vec<RegionCell>> {
    let cells: Vec<(f64, f64)> = t_grid.iter().flat_map(|&t| h_grid.iter().map(move |&h| (t, h))).collect();
    cells
        .par_iter()
        .map(|&(t, h)| {
            let c = certify_gamma(&template.with_params(t, h)?, prop, opts)?;
            Ok(RegionCell { t, h, prop, status: c.result.status, margin: c.result.margin })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::{integrate, psi_kernel, QuadOptions};

    fn two_cars(t: f64, h: f64) -> GammaDelaySystem {
        let a1 = Matrix::from_rows(&[vec![-2.0, 2.0], vec![2.0, -2.0]]).unwrap();
        GammaDelaySystem::new(Matrix::zeros(2, 2), a1, 2, t, h).unwrap()
    }

    fn verdict(t: f64, h: f64, prop: GammaProp) -> Status {
        certify_gamma(&two_cars(t, h), prop, &CertifyOptions::default()).unwrap().status()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn moments_at_reference_point() {
        let m = gamma_moments(2, 0.1, 0.0).unwrap();
        for (got, want) in [(m.psi0, 10.0), (m.psi1, 1.0), (m.psi2, 0.2), (m.psi3, 0.06), (m.psi1h, 1.0), (m.psi_tilde1, 0.06)] {
            assert!(rel(got, want) < 1e-14, "{got} vs {want}");
        }
        assert!(rel(gamma_moments(2, 0.1, 0.01).unwrap().psi1h, 1.1) < 1e-14);
    }

    #[test]
    fn moments_match_quadrature() {
        let q = QuadOptions::default();
        for n in 2..=5 {
            for t in [0.05, 0.1, 0.5, 1.0] {
                let up = crate::quad::gamma_tail_limit(n + 3, t, 1e-18);
                for h in [0.0, 0.1, 1.0] {
                    let m = gamma_moments(n, t, h).unwrap();
                    let mk = |k: i32| integrate(|th| psi_kernel(n, t, th) * th.powi(k), 0.0, up, &q).unwrap();
                    for (k, want) in [(0, m.psi0), (1, m.psi1), (2, m.psi2), (3, m.psi3)] {
                        assert!(rel(mk(k), want) < 1e-10, "N={n} T={t} k={k}");
                    }
                    let ph = integrate(|th| psi_kernel(n, t, th) * (th + h), 0.0, up, &q).unwrap();
                    assert!(rel(ph, m.psi1h) < 1e-10);
                    assert!(rel(m.psi_tilde1, 6.0 * m.psi_tilde1_integral(h)) < 1e-10);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(gamma_moments(1, 0.1, 0.0).is_err());
        assert!(gamma_moments(2, 0.0, 0.0).is_err());
        let z = Matrix::zeros(2, 2);
        assert!(GammaDelaySystem::new(z.clone(), z.clone(), 1, 0.1, 0.0).is_err());
        assert!(GammaDelaySystem::new(z.clone(), Matrix::zeros(3, 3), 2, 0.1, 0.0).is_err());
        assert!(GammaDelaySystem::new(z.clone(), z, 2, 0.1, -1.0).is_err());
    }

    #[test]
    fn variable_counts() {
        let sys = two_cars(0.1, 0.01);
        assert_eq!(build_prop1(&sys).unwrap().n_scalars(), 16);
        assert_eq!(build_prop2(&sys).unwrap().n_scalars(), 27);
    }

    #[test]
    fn two_cars_has_one_neutral_direction() {
        let r = two_cars(0.1, 0.01).neutral_reduction().unwrap().unwrap();
        assert_eq!((r.kernel.cols(), r.reduced.dim()), (1, 1));
        let k = r.kernel.matvec(&[1.0]);
        assert!((k[0] - k[1]).abs() < 1e-12);
    }

    #[test]
    fn prop1_reference_points() {
        assert_eq!(verdict(0.1, 0.01, GammaProp::Prop1), Status::Feasible);
        assert_eq!(verdict(0.30, 1e-5, GammaProp::Prop1), Status::Feasible);
        assert_ne!(verdict(0.35, 0.01, GammaProp::Prop1), Status::Feasible);
    }

    #[test]
    fn prop2_reference_points() {
        assert_eq!(verdict(0.30, 0.01, GammaProp::Prop2), Status::Feasible);
        assert_ne!(verdict(0.36, 0.36, GammaProp::Prop2), Status::Feasible);
        assert_eq!(verdict(0.002, 0.36, GammaProp::Prop2), Status::Feasible);
    }

    #[test]
    fn unreduced_two_cars_is_not_certified() {
        // the neutral mode x1 = x2 makes the full LMI singular
        let opts = CertifyOptions { reduce_neutral: false, ..Default::default() };
        let c = certify_gamma(&two_cars(0.1, 0.01), GammaProp::Prop1, &opts).unwrap();
        assert_ne!(c.status(), Status::Feasible);
    }

    #[test]
    fn max_scale_empty_at_large_delay() {
        let r = max_scale_bisect(&two_cars(0.1, 0.0), 0.36, GammaProp::Prop1, (1e-4, 0.5), 1e-4, &CertifyOptions::default()).unwrap();
        assert_eq!(r.max_t, None);
        assert!(max_scale_bisect(&two_cars(0.1, 0.0), 0.36, GammaProp::Prop1, (0.5, 0.1), 1e-4, &CertifyOptions::default()).is_err());
    }

    #[test]
    fn region_cells_follow_grid_order() {
        let cells = region_sweep_gamma(&two_cars(0.1, 0.0), &[0.1, 0.5], &[0.01], GammaProp::Prop1, &CertifyOptions::default()).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!((cells[0].t, cells[0].status), (0.1, Status::Feasible));
        assert_eq!(cells[1].t, 0.5);
        assert_ne!(cells[1].status, Status::Feasible);
    }
}
