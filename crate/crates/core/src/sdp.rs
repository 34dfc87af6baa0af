//! Strict LMI feasibility by maximising the worst-block minimum eigenvalue.
//!
//! Decision variables are the upper-triangle entries of symmetric matrix
//! variables, stacked into one vector `y` with `‖y‖∞ ≤ 1`. The solver
//! maximises `t` subject to `B_j(y) − tI ⪰ 0` with a log-det barrier
//! path-following method, and brackets the optimum between a certified lower
//! bound (`min_j λ_min(B_j(y))` at the returned `y`) and a Lagrangian dual upper
//! bound built from the barrier's dual estimate.
//!
//! When every block is homogeneous in `y` and every variable has its own
//! positivity block, the box alone cannot separate infeasible problems
//! (`y = 0` gives `t = 0`). In that case a trace anchor `Σ tr(V_i) ≥ 1/2` is
//! added; any strictly feasible point rescaled to `‖y‖∞ = 1` satisfies it, so
//! the sign of the optimum is unchanged for feasible problems.

use crate::error::{Error, Result};
use crate::linalg::{eig_sym, min_eigenvalue, qr_r_factor, solve_normal_from_r, Matrix, SymMatrix};
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

#[derive(Clone, Debug, PartialEq)]
pub struct MatVarSpec {
    pub name: String,
    pub dim: usize,
    /// Index of the (0, 0) entry in the stacked scalar vector.
    pub offset: usize,
    pub positive: bool,
}

/// Handle to a declared matrix variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatVar {
    pub id: usize,
    pub dim: usize,
    pub offset: usize,
}

impl MatVar {
    /// Scalar index of entry (i, j); order is row-major upper triangle.
    pub fn scalar(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.offset + i * self.dim - i * (i + 1) / 2 + j
    }

    pub fn n_scalars(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    /// Basis matrix for scalar `(i, j)`: `e_i e_jᵀ + e_j e_iᵀ` off the diagonal.
    fn basis(&self, i: usize, j: usize) -> SymMatrix {
        let mut e = SymMatrix::zeros(self.dim);
        e.set(i, j, 1.0);
        e
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineBlock {
    pub name: String,
    pub dim: usize,
    pub constant: SymMatrix,
    /// Scalar index -> coefficient; zero coefficients are never stored.
    pub coefficients: BTreeMap<usize, SymMatrix>,
}

impl AffineBlock {
    pub fn evaluate(&self, y: &[f64]) -> SymMatrix {
        let mut m = self.constant.clone();
        for (&k, c) in &self.coefficients {
            if y[k] != 0.0 {
                m.axpy(y[k], c);
            }
        }
        m
    }
}

/// Accumulates `const + Σ coeff · (terms in matrix variables)` for one block.
#[derive(Clone, Debug)]
pub struct BlockBuilder {
    name: String,
    dim: usize,
    constant: SymMatrix,
    coefficients: BTreeMap<usize, SymMatrix>,
}

impl BlockBuilder {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim, constant: SymMatrix::zeros(dim), coefficients: BTreeMap::new() }
    }

    pub fn add_constant(&mut self, c: &SymMatrix) -> Result<&mut Self> {
        if c.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!("constant in block {}", self.name)));
        }
        self.constant.axpy(1.0, c);
        Ok(self)
    }

    fn add_coeff(&mut self, k: usize, c: f64, m: &SymMatrix) {
        self.coefficients.entry(k).or_insert_with(|| SymMatrix::zeros(self.dim)).axpy(c, m);
    }

    /// `coeff · Fᵀ X F`
    pub fn add_congruence(&mut self, x: MatVar, f: &Matrix, coeff: f64) -> Result<&mut Self> {
        if f.rows() != x.dim || f.cols() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "congruence factor {}x{} for variable of dim {} in block {} (dim {})",
                f.rows(),
                f.cols(),
                x.dim,
                self.name,
                self.dim
            )));
        }
        for i in 0..x.dim {
            for j in i..x.dim {
                let c = x.basis(i, j).congruence(f)?;
                self.add_coeff(x.scalar(i, j), coeff, &c);
            }
        }
        Ok(self)
    }

    /// `coeff · (Lᵀ X R + Rᵀ X L)`
    pub fn add_cross(&mut self, x: MatVar, l: &Matrix, r: &Matrix, coeff: f64) -> Result<&mut Self> {
        for f in [l, r] {
            if f.rows() != x.dim || f.cols() != self.dim {
                return Err(Error::DimensionMismatch(format!("cross factor in block {}", self.name)));
            }
        }
        let lt = l.transpose();
        for i in 0..x.dim {
            for j in i..x.dim {
                let m = lt.matmul(&x.basis(i, j).to_matrix())?.matmul(r)?;
                self.add_coeff(x.scalar(i, j), coeff, &SymMatrix::sym_sum(&m)?);
            }
        }
        Ok(self)
    }

    pub fn negate(&mut self) -> &mut Self {
        self.constant = self.constant.scaled(-1.0);
        for c in self.coefficients.values_mut() {
            *c = c.scaled(-1.0);
        }
        self
    }

    pub fn build(&self) -> AffineBlock {
        let coefficients =
            self.coefficients.iter().filter(|(_, c)| !c.is_zero()).map(|(k, c)| (*k, c.clone())).collect();
        AffineBlock { name: self.name.clone(), dim: self.dim, constant: self.constant.clone(), coefficients }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeasibilityProblem {
    variables: Vec<MatVarSpec>,
    blocks: Vec<AffineBlock>,
    n_scalars: usize,
}

impl FeasibilityProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, name: impl Into<String>, dim: usize) -> MatVar {
        let v = MatVar { id: self.variables.len(), dim, offset: self.n_scalars };
        self.variables.push(MatVarSpec { name: name.into(), dim, offset: self.n_scalars, positive: false });
        self.n_scalars += v.n_scalars();
        v
    }

    /// Adds the block `X ≻ 0`.
    pub fn require_positive(&mut self, x: MatVar) -> Result<()> {
        let name = self.variables[x.id].name.clone();
        let mut b = BlockBuilder::new(name, x.dim);
        b.add_congruence(x, &Matrix::identity(x.dim), 1.0)?;
        self.add_block(b.build())?;
        self.variables[x.id].positive = true;
        Ok(())
    }

    pub fn add_block(&mut self, block: AffineBlock) -> Result<()> {
        if block.constant.dim() != block.dim || block.coefficients.values().any(|c| c.dim() != block.dim) {
            return Err(Error::DimensionMismatch(format!("block {}", block.name)));
        }
        if let Some((&k, _)) = block.coefficients.iter().next_back() {
            if k >= self.n_scalars {
                return Err(Error::DimensionMismatch(format!("block {} references scalar {k}", block.name)));
            }
        }
        if !block.constant.is_finite() || block.coefficients.values().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("block {}", block.name)));
        }
        self.blocks.push(block);
        Ok(())
    }

    pub fn variables(&self) -> &[MatVarSpec] {
        &self.variables
    }

    pub fn variable(&self, name: &str) -> Option<MatVar> {
        self.variables
            .iter()
            .enumerate()
            .find(|(_, v)| v.name == name)
            .map(|(id, v)| MatVar { id, dim: v.dim, offset: v.offset })
    }

    pub fn blocks(&self) -> &[AffineBlock] {
        &self.blocks
    }

    pub fn n_scalars(&self) -> usize {
        self.n_scalars
    }

    /// Value of a matrix variable under an assignment.
    pub fn variable_value(&self, x: MatVar, y: &[f64]) -> SymMatrix {
        SymMatrix::from_upper(x.dim, |i, j| y[x.scalar(i, j)])
    }

    pub fn evaluate_blocks(&self, y: &[f64]) -> Result<Vec<SymMatrix>> {
        if y.len() != self.n_scalars {
            return Err(Error::DimensionMismatch(format!(
                "assignment has {} scalars, problem has {}",
                y.len(),
                self.n_scalars
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("assignment".into()));
        }
        Ok(self.blocks.iter().map(|b| b.evaluate(y)).collect())
    }

    /// `min_j λ_min(B_j(y))`, the margin a given assignment certifies.
    pub fn certify_assignment(&self, y: &[f64]) -> Result<f64> {
        let mut worst = f64::INFINITY;
        for m in self.evaluate_blocks(y)? {
            worst = worst.min(min_eigenvalue(&m)?);
        }
        Ok(worst)
    }

    /// Scalars that the trace anchor sums, when the anchor applies.
    fn anchor_scalars(&self) -> Option<Vec<usize>> {
        let homogeneous = self.blocks.iter().all(|b| b.constant.is_zero());
        let all_positive = !self.variables.is_empty() && self.variables.iter().all(|v| v.positive);
        if !(homogeneous && all_positive) {
            return None;
        }
        Some(
            self.variables
                .iter()
                .enumerate()
                .flat_map(|(id, v)| {
                    let mv = MatVar { id, dim: v.dim, offset: v.offset };
                    (0..v.dim).map(move |i| mv.scalar(i, i))
                })
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Status {
    Feasible,
    Infeasible,
    Indeterminate,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Feasible => "Feasible",
            Status::Infeasible => "Infeasible",
            Status::Indeterminate => "Indeterminate",
        }
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorMode {
    /// Anchor homogeneous problems whose variables are all constrained positive.
    Auto,
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOptions {
    /// Total Newton-step budget for one solve.
    pub max_iters: usize,
    /// Verdicts need the optimum bracketed outside `[-margin_tol, margin_tol]`.
    pub margin_tol: f64,
    /// Target width of the optimum bracket once a verdict is reached.
    pub resolution: f64,
    pub anchor: AnchorMode,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { max_iters: 500, margin_tol: 1e-10, resolution: 1e-9, anchor: AnchorMode::Auto }
    }
}

#[derive(Clone, Debug)]
pub struct FeasibilityResult {
    pub status: Status,
    /// Certified `min_j λ_min(B_j(y))` at `assignment`.
    pub margin: f64,
    /// Dual upper bound on the optimum.
    pub upper_bound: f64,
    pub assignment: Vec<f64>,
    pub newton_steps: usize,
    pub centerings: usize,
    pub anchored: bool,
    /// Set when the path-following stopped early (iteration cap, breakdown).
    pub note: Option<String>,
    pub elapsed: Duration,
}

impl PartialEq for FeasibilityResult {
    /// Everything except wall-clock time.
    fn eq(&self, o: &Self) -> bool {
        self.status == o.status
            && self.margin.to_bits() == o.margin.to_bits()
            && self.upper_bound.to_bits() == o.upper_bound.to_bits()
            && self.assignment.len() == o.assignment.len()
            && self.assignment.iter().zip(&o.assignment).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.newton_steps == o.newton_steps
            && self.centerings == o.centerings
            && self.anchored == o.anchored
            && self.note == o.note
    }
}

const MAX_CENTERINGS: usize = 60;
const TAU_GROWTH: f64 = 10.0;
const CENTERED_DECREMENT: f64 = 1e-5;
const ARMIJO: f64 = 0.25;
/// Newton steps allowed per centering; a well-conditioned centering takes
/// about ten, so hitting this means the barrier has run out of precision.
const CENTERING_STEPS: usize = 50;

struct Barrier<'a> {
    problem: &'a FeasibilityProblem,
    anchor: Option<Vec<usize>>,
    m: usize,
}

/// Barrier quantities at a strictly interior point.
struct Local {
    j: Matrix,
    ones: Vec<f64>,
    inv_blocks: Vec<SymMatrix>,
}

enum Step {
    Centered,
    Stalled(String),
}

impl<'a> Barrier<'a> {
    fn anchor_slack(&self, y: &[f64]) -> Option<f64> {
        self.anchor.as_ref().map(|a| a.iter().map(|&k| y[k]).sum::<f64>() - 0.5)
    }

    /// Barrier value −τt − Σ log det S_j − Σ log(1 − y_k²) − log(anchor slack);
    /// `None` outside the interior.
    fn value(&self, z: &[f64], tau: f64) -> Result<Option<f64>> {
        let (y, t) = (&z[..self.m], z[self.m]);
        if y.iter().any(|v| !(v.abs() < 1.0)) || !t.is_finite() {
            return Ok(None);
        }
        let mut f = -tau * t - y.iter().map(|v| (1.0 - v * v).ln()).sum::<f64>();
        if let Some(s) = self.anchor_slack(y) {
            if !(s > 0.0) {
                return Ok(None);
            }
            f -= s.ln();
        }
        for b in &self.problem.blocks {
            let e = eig_sym(&b.evaluate(y).shifted(-t))?;
            if !(e.values[0] > 0.0) {
                return Ok(None);
            }
            f -= e.values.iter().map(|l| l.ln()).sum::<f64>();
        }
        Ok(Some(f))
    }

    /// Rows of J are the scaled constraint directions, so the barrier Hessian
    /// is JᵀJ and its gradient is −Jᵀ·ones.
    fn local(&self, z: &[f64]) -> Result<Option<Local>> {
        let (y, t) = (&z[..self.m], z[self.m]);
        let p = self.m + 1;
        let block_rows: usize = self.problem.blocks.iter().map(|b| b.dim * (b.dim + 1) / 2).sum();
        let n_rows = block_rows + 2 * self.m + usize::from(self.anchor.is_some());
        let mut j = Matrix::zeros(n_rows, p);
        let mut ones = vec![0.0; n_rows];
        let mut inv_blocks = Vec::with_capacity(self.problem.blocks.len());
        let mut row0 = 0;
        for b in &self.problem.blocks {
            let s = b.evaluate(y).shifted(-t);
            let e = eig_sym(&s)?;
            if !(e.values[0] > 0.0) {
                return Ok(None);
            }
            let half = e.reconstruct_with(|l| 1.0 / l.sqrt()).to_matrix();
            let inv = e.reconstruct_with(|l| 1.0 / l);
            let d = b.dim;
            let mut put = |col: usize, mm: &Matrix| {
                let mut r = row0;
                for a in 0..d {
                    for c in a..d {
                        j[(r, col)] = if a == c { mm[(a, c)] } else { std::f64::consts::SQRT_2 * mm[(a, c)] };
                        r += 1;
                    }
                }
            };
            for (&k, c) in &b.coefficients {
                let mm = half.matmul(&c.to_matrix())?.matmul(&half)?;
                put(k, &mm);
            }
            put(self.m, &inv.scaled(-1.0).to_matrix());
            let mut r = row0;
            for a in 0..d {
                for c in a..d {
                    if a == c {
                        ones[r] = 1.0;
                    }
                    r += 1;
                }
            }
            row0 += d * (d + 1) / 2;
            inv_blocks.push(inv);
        }
        for (k, &v) in y.iter().enumerate() {
            if !(v.abs() < 1.0) {
                return Ok(None);
            }
            j[(row0, k)] = -1.0 / (1.0 - v);
            j[(row0 + 1, k)] = 1.0 / (1.0 + v);
            ones[row0] = 1.0;
            ones[row0 + 1] = 1.0;
            row0 += 2;
        }
        if let Some(a) = &self.anchor {
            let s = self.anchor_slack(y).unwrap_or(0.0);
            if !(s > 0.0) {
                return Ok(None);
            }
            for &k in a {
                j[(row0, k)] = 1.0 / s;
            }
            ones[row0] = 1.0;
        }
        Ok(Some(Local { j, ones, inv_blocks }))
    }

    fn center(&self, z: &mut Vec<f64>, tau: f64, max_iters: usize, steps: &mut usize) -> Result<(Step, Option<Local>)> {
        let p = self.m + 1;
        for _ in 0..max_iters {
            let Some(loc) = self.local(z)? else {
                return Ok((Step::Stalled("left the interior".into()), None));
            };
            let mut rhs = vec![0.0; p];
            for (r, &o) in loc.ones.iter().enumerate() {
                if o != 0.0 {
                    for (c, v) in rhs.iter_mut().enumerate() {
                        *v += loc.j[(r, c)];
                    }
                }
            }
            rhs[self.m] += tau;
            let r = qr_r_factor(&loc.j)?;
            let (dz, w) = match solve_normal_from_r(&r, &rhs) {
                Ok(v) => v,
                Err(e) => return Ok((Step::Stalled(e.to_string()), Some(loc))),
            };
            if dz.iter().any(|v| !v.is_finite()) {
                return Ok((Step::Stalled("non-finite Newton step".into()), Some(loc)));
            }
            let delta = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if delta <= CENTERED_DECREMENT {
                return Ok((Step::Centered, Some(loc)));
            }
            // Armijo backtracking from the full step; g·dz = −δ²
            let f0 = self.value(z, tau)?.expect("interior point");
            let mut alpha = 1.0;
            loop {
                let cand: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + alpha * b).collect();
                if cand != *z {
                    if let Some(f) = self.value(&cand, tau)? {
                        if f <= f0 - ARMIJO * alpha * delta * delta || alpha * delta < 1e-3 {
                            *z = cand;
                            break;
                        }
                    }
                }
                alpha *= 0.5;
                if alpha < 1e-14 {
                    return Ok((Step::Stalled("line search failed".into()), Some(loc)));
                }
            }
            *steps += 1;
        }
        let loc = self.local(z)?;
        Ok((Step::Stalled("centering did not converge (precision or step budget exhausted)".into()), loc))
    }

    /// Weak-duality bound: with Z_j ⪰ 0, Σ tr Z_j = 1,
    /// t* ≤ max over the box (and anchor) of Σ⟨Z_j, B_j(y)⟩.
    fn dual_bound(&self, loc: &Local) -> f64 {
        let total: f64 = loc.inv_blocks.iter().map(|z| z.trace()).sum();
        if !(total > 0.0) || !total.is_finite() {
            return f64::INFINITY;
        }
        let inner = |a: &SymMatrix, b: &SymMatrix| -> f64 {
            a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
        };
        let mut c0 = 0.0;
        let mut a = vec![0.0; self.m];
        for (b, z) in self.problem.blocks.iter().zip(&loc.inv_blocks) {
            c0 += inner(z, &b.constant) / total;
            for (&k, c) in &b.coefficients {
                a[k] += inner(z, c) / total;
            }
        }
        // minimise Σ|a_k + μ ℓ_k| − μ/2 over μ ≥ 0 (piecewise linear, convex)
        let anchored = |mu: f64, an: &[usize]| -> f64 {
            let mut s: f64 = a.iter().map(|v| v.abs()).sum();
            for &k in an {
                s += (a[k] + mu).abs() - a[k].abs();
            }
            s - 0.5 * mu
        };
        let best = match &self.anchor {
            None => a.iter().map(|v| v.abs()).sum(),
            Some(an) => an
                .iter()
                .filter(|&&k| a[k] < 0.0)
                .map(|&k| anchored(-a[k], an))
                .fold(anchored(0.0, an), f64::min),
        };
        c0 + best
    }
}

pub fn solve_feasibility(problem: &FeasibilityProblem, opts: &SolveOptions) -> Result<FeasibilityResult> {
    let start = Instant::now();
    if problem.blocks.is_empty() {
        return Err(Error::InvalidParameter("problem has no blocks".into()));
    }
    if !(opts.margin_tol >= 0.0) || !(opts.resolution > 0.0) || opts.max_iters == 0 {
        return Err(Error::InvalidParameter("solver options".into()));
    }
    let m = problem.n_scalars;
    let anchor = match opts.anchor {
        AnchorMode::Auto => problem.anchor_scalars(),
        AnchorMode::Off => None,
    };
    let mut y0 = vec![0.0; m];
    if let Some(a) = &anchor {
        for &k in a {
            y0[k] = 0.75;
        }
    }
    let lb0 = problem.certify_assignment(&y0)?;
    let mut z = y0;
    z.push(lb0 - 1.0);
    let barrier = Barrier { problem, anchor, m };

    let mut tau = 1.0;
    let mut steps = 0;
    let mut best_lb = lb0;
    let mut best_y = z[..m].to_vec();
    let mut best_ub = f64::INFINITY;
    let mut note = None;
    let mut centerings = 0;
    let status = loop {
        let budget = CENTERING_STEPS.min(opts.max_iters.saturating_sub(steps));
        let (step, loc) = barrier.center(&mut z, tau, budget, &mut steps)?;
        centerings += 1;
        let lb = problem.certify_assignment(&z[..m])?;
        if lb > best_lb {
            best_lb = lb;
            best_y = z[..m].to_vec();
        }
        if let Some(loc) = &loc {
            best_ub = best_ub.min(barrier.dual_bound(loc));
        }
        best_ub = best_ub.max(best_lb);
        let stalled = match step {
            Step::Centered => None,
            Step::Stalled(why) => Some(why),
        };

        if best_lb > opts.margin_tol && best_ub - best_lb <= opts.resolution {
            break Status::Feasible;
        }
        if best_ub < -opts.margin_tol {
            break Status::Infeasible;
        }
        if best_ub - best_lb <= 0.1 * opts.margin_tol {
            note = Some("optimum within margin tolerance of zero".into());
            break Status::Indeterminate;
        }
        if stalled.is_some() || centerings >= MAX_CENTERINGS {
            let why = stalled.unwrap_or_else(|| "centering cap".into());
            note = Some(why);
            break if best_lb > opts.margin_tol { Status::Feasible } else { Status::Indeterminate };
        }
        tau *= TAU_GROWTH;
    };

    Ok(FeasibilityResult {
        status,
        margin: best_lb,
        upper_bound: best_ub,
        assignment: best_y,
        newton_steps: steps,
        centerings,
        anchored: barrier.anchor.is_some(),
        note,
        elapsed: start.elapsed(),
    })
}
