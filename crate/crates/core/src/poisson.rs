//! Poisson-distributed delay in discrete time:
//! x(k+1) = A x(k) + A1 Σ_τ P(τ) x(k−τ−h), P the Poisson(λ) pmf.
//!
//! Certified on ξ(k) = [x(k), f(k), x(k−h), f(k−h), q(k)] with
//! f(k) = Σ P(τ) x(k−τ−h) and q(k) = Σ Q(τ) x(k−τ−h), Q(τ) = P(τ+1).

use crate::error::{Error, Result};
use crate::gamma::check_pair;
use crate::linalg::{Matrix, SymMatrix};
use crate::sdp::{solve_feasibility, BlockBuilder, FeasibilityProblem, FeasibilityResult, MatVar, SolveOptions, Status};
use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct PoissonDelaySystem {
    pub a: Matrix,
    pub a1: Matrix,
    pub lambda: f64,
    pub h: u32,
}

impl PoissonDelaySystem {
    pub fn new(a: Matrix, a1: Matrix, lambda: f64, h: u32) -> Result<Self> {
        check_pair(&a, &a1)?;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self { a, a1, lambda, h })
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.a.clone(), self.a1.clone(), lambda, self.h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoissonMoments {
    /// Σ Q(i) = 1 − e^{−λ}
    pub q0: f64,
    /// Σ i Q(i)
    pub q1_bar: f64,
    /// Σ i² Q(i)
    pub q2_bar: f64,
    /// Σ (i+h) Q(i)
    pub q1h_bar: f64,
    /// Σ (i+h) P(i) = λ + h
    pub p1h: f64,
}

pub fn poisson_moments(lambda: f64, h: u32) -> Result<PoissonMoments> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    let h = f64::from(h);
    let q0 = -(-lambda).exp_m1();
    let q1_bar = lambda - q0;
    Ok(PoissonMoments {
        q0,
        q1_bar,
        q2_bar: lambda * lambda - q1_bar,
        q1h_bar: lambda + q0 * (h - 1.0),
        p1h: lambda + h,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoissonVariant {
    Prop3,
    Remark7,
}

impl PoissonVariant {
    pub fn label(&self) -> &'static str {
        match self {
            PoissonVariant::Prop3 => "3",
            PoissonVariant::Remark7 => "remark7",
        }
    }
}

/// Row of five n×n blocks, each `c·I`, `c·M` or zero.
fn brow(n: usize, items: [(f64, Option<&Matrix>); 5]) -> Matrix {
    let mut out = Matrix::zeros(n, 5 * n);
    for (k, (c, m)) in items.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                out[(i, k * n + j)] = match m {
                    Some(m) => c * m[(i, j)],
                    None if i == j => *c,
                    None => 0.0,
                };
            }
        }
    }
    out
}

const Z: (f64, Option<&Matrix>) = (0.0, None);
const fn id(c: f64) -> (f64, Option<&'static Matrix>) {
    (c, None)
}

/// Both variants share the variable layout, so an assignment for one is an
/// assignment for the other.
pub fn build_poisson(sys: &PoissonDelaySystem, variant: PoissonVariant) -> Result<FeasibilityProblem> {
    let n = sys.dim();
    let mo = poisson_moments(sys.lambda, sys.h)?;
    let (lambda, h) = (sys.lambda, f64::from(sys.h));
    let e = (-lambda).exp();
    let (a, a1) = (&sys.a, &sys.a1);
    let a_minus_i = a.sub(&Matrix::identity(n))?;

    let sel = |k: usize| {
        let mut items = [Z; 5];
        items[k] = id(1.0);
        brow(n, items)
    };
    let f0 = Matrix::from_blocks(&[
        vec![Some(&brow(n, [(1.0, Some(a)), (1.0, Some(a1)), Z, Z, Z]))],
        vec![Some(&brow(n, [Z, Z, (e, Some(a)), (e, Some(a1)), id(1.0)]))],
    ])?;
    let f1 = Matrix::from_blocks(&[vec![Some(&sel(0))], vec![Some(&sel(1))]])?;
    let f01 = brow(n, [(1.0, Some(&a_minus_i)), (1.0, Some(a1)), Z, Z, Z]);
    let f02 = brow(n, [Z, id(-1.0), (e, Some(a)), (e, Some(a1)), id(1.0)]);
    let f12 = brow(n, [id(1.0), id(-1.0), Z, Z, Z]);
    let f13 = brow(n, [id(1.0), Z, id(-1.0), Z, Z]);
    let f15 = brow(n, [id(mo.q0), Z, Z, Z, id(-1.0)]);
    let f24 = brow(n, [Z, id(1.0), Z, id(-1.0), Z]);
    let f25 = brow(n, [Z, id(-lambda), Z, Z, id(mo.q1_bar / mo.q0 + 1.0)]);

    let mut p = FeasibilityProblem::new();
    let w = p.add_variable("W", 2 * n);
    let names = ["G1", "G2", "H1", "H2", "S1", "S2", "R1", "R2"];
    let v: Vec<MatVar> = names.iter().map(|s| p.add_variable(*s, n)).collect();
    let [g1, g2, h1, h2, s1, s2, r1, r2] = [v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]];

    let mut xi = BlockBuilder::new("-Xi", 5 * n);
    // Σ̂
    xi.add_congruence(s1, &sel(0), 1.0)?
        .add_congruence(g1, &sel(0), 1.0)?
        .add_congruence(g2, &sel(0), mo.q0)?
        .add_congruence(g1, &sel(1), -1.0)?
        .add_congruence(s2, &sel(1), 1.0)?
        .add_congruence(s1, &sel(2), -1.0)?
        .add_congruence(s2, &sel(3), -1.0)?
        .add_congruence(g2, &sel(4), -1.0 / mo.q0)?;
    xi.add_congruence(w, &f0, 1.0)?
        .add_congruence(w, &f1, -1.0)?
        .add_congruence(h1, &f12, -1.0 / mo.p1h)?
        .add_congruence(h1, &f01, mo.p1h)?
        .add_congruence(h2, &f01, mo.q1h_bar)?
        .add_congruence(r1, &f01, h * h)?
        .add_congruence(r2, &f02, h * h)?
        .add_congruence(h2, &f15, -1.0 / mo.q1h_bar)?
        .add_congruence(r1, &f13, -1.0)?
        .add_congruence(r2, &f24, -1.0)?;
    if variant == PoissonVariant::Prop3 {
        let c = mo.q2_bar - mo.q1_bar * mo.q1_bar / mo.q0;
        xi.add_congruence(g2, &f25, -1.0 / c)?;
    }
    xi.negate();
    p.add_block(xi.build())?;
    p.require_positive(w)?;
    for x in v {
        p.require_positive(x)?;
    }
    Ok(p)
}

pub fn build_prop3(sys: &PoissonDelaySystem) -> Result<FeasibilityProblem> {
    build_poisson(sys, PoissonVariant::Prop3)
}

pub fn build_remark7(sys: &PoissonDelaySystem) -> Result<FeasibilityProblem> {
    build_poisson(sys, PoissonVariant::Remark7)
}

/// Prop3's −Ξ̂ equals Remark7's plus a PSD term, so any Remark7 assignment
/// certifies Prop3 with at least the same margin.
pub fn certify_remark7_assignment_on_prop3(sys: &PoissonDelaySystem, y: &[f64]) -> Result<f64> {
    build_prop3(sys)?.certify_assignment(y)
}

pub fn certify_poisson(sys: &PoissonDelaySystem, variant: PoissonVariant, opts: &SolveOptions) -> Result<FeasibilityResult> {
    solve_feasibility(&build_poisson(sys, variant)?, opts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaCell {
    pub lambda: f64,
    pub h: u32,
    pub variant: PoissonVariant,
    pub status: Status,
    pub margin: f64,
}

pub fn lambda_scan(
    template: &PoissonDelaySystem,
    lambdas: &[f64],
    variant: PoissonVariant,
    opts: &SolveOptions,
) -> Result<Vec<LambdaCell>> {
    lambdas
        .par_iter()
        .map(|&lambda| {
            let r = certify_poisson(&template.with_lambda(lambda)?, variant, opts)?;
            Ok(LambdaCell { lambda, h: template.h, variant, status: r.status, margin: r.margin })
        })
        .collect()
}

/// Quadratic form of −Ξ̂ (either variant) at a given assignment along ξ.
pub fn xi_quadratic_form(problem: &FeasibilityProblem, y: &[f64], xi: &[f64]) -> Result<f64> {
    let blocks = problem.evaluate_blocks(y)?;
    let m: &SymMatrix = &blocks[0];
    if m.dim() != xi.len() {
        return Err(Error::DimensionMismatch("xi length".into()));
    }
    Ok(m.quad_form(xi))
}
