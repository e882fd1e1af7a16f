//! Convex subproblems over Hermitian PSD blocks and a dense interior-point
//! solver for them.
//!
//! A [`ConicProblem`] has Hermitian matrix variables `X_b ⪰ 0`, objective
//! `Σ_b Re Tr(C_b X_b) + q_b/2 ‖X_b‖_F²`, scalar trace constraints
//! `Σ_b Re Tr(A_{c,b} X_b) {≤,=,≥} rhs` and optional pinned diagonal entries.
//!
//! The solver works on the complex blocks directly (no real embedding): it is
//! an infeasible-start primal-dual path-following method with Nesterov–Todd
//! scaling and a Mehrotra corrector. Inequalities get nonnegative slacks. The
//! `q_b/2 ‖X_b‖²` term is kept in the Newton system; since it is a multiple
//! of the identity it commutes with the NT Hessian and the reduced system
//! stays closed-form per block. When the main iteration fails to converge a
//! phase-I problem decides between `Infeasible` and a numerical failure.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::numerics::{hermitian_eig, CMatrix, Hermitian, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("block index {0} out of range")]
    UnknownBlock(usize),
    #[error("coefficient for block {block} has dim {found}, expected {expected}")]
    DimensionMismatch { block: usize, expected: usize, found: usize },
    #[error("diagonal pin ({index}) outside block {block} of dim {dim}")]
    PinOutOfRange { block: usize, index: usize, dim: usize },
    #[error("non-finite problem data")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone)]
pub struct VariableBlock {
    pub dim: usize,
    pub objective: Option<Hermitian>,
    pub quadratic: f64,
    pub diag_fixed: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct LinearConstraint {
    pub terms: Vec<(usize, Hermitian)>,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ConicProblem {
    pub blocks: Vec<VariableBlock>,
    pub constraints: Vec<LinearConstraint>,
}

impl ConicProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, dim: usize) -> usize {
        self.blocks.push(VariableBlock { dim, objective: None, quadratic: 0.0, diag_fixed: vec![] });
        self.blocks.len() - 1
    }

    fn check_dim(&self, block: usize, m: &Hermitian) -> Result<(), ConicError> {
        let b = self.blocks.get(block).ok_or(ConicError::UnknownBlock(block))?;
        if b.dim != m.dim() {
            return Err(ConicError::DimensionMismatch { block, expected: b.dim, found: m.dim() });
        }
        Ok(())
    }

    pub fn set_objective(&mut self, block: usize, c: Hermitian) -> Result<(), ConicError> {
        self.check_dim(block, &c)?;
        self.blocks[block].objective = Some(c);
        Ok(())
    }

    pub fn set_quadratic(&mut self, block: usize, q: f64) -> Result<(), ConicError> {
        let b = self.blocks.get_mut(block).ok_or(ConicError::UnknownBlock(block))?;
        b.quadratic = q;
        Ok(())
    }

    pub fn pin_diagonal(&mut self, block: usize, index: usize, value: f64) -> Result<(), ConicError> {
        let b = self.blocks.get_mut(block).ok_or(ConicError::UnknownBlock(block))?;
        if index >= b.dim {
            return Err(ConicError::PinOutOfRange { block, index, dim: b.dim });
        }
        b.diag_fixed.push((index, value));
        Ok(())
    }

    pub fn add_constraint(
        &mut self,
        terms: Vec<(usize, Hermitian)>,
        sense: Sense,
        rhs: f64,
    ) -> Result<(), ConicError> {
        for (b, a) in &terms {
            self.check_dim(*b, a)?;
        }
        if !rhs.is_finite() {
            return Err(ConicError::NonFinite);
        }
        self.constraints.push(LinearConstraint { terms, sense, rhs });
        Ok(())
    }

    pub fn objective_value(&self, xs: &[Hermitian]) -> f64 {
        self.blocks
            .iter()
            .zip(xs)
            .map(|(b, x)| {
                let lin = b.objective.as_ref().map_or(0.0, |c| c.inner(x));
                lin + 0.5 * b.quadratic * x.frobenius_norm().powi(2)
            })
            .sum()
    }

    pub fn constraint_value(&self, index: usize, xs: &[Hermitian]) -> f64 {
        self.constraints[index].terms.iter().map(|(b, a)| a.inner(&xs[*b])).sum()
    }

    /// Largest violation over the trace constraints and diagonal pins.
    pub fn primal_violation(&self, xs: &[Hermitian]) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, c) in self.constraints.iter().enumerate() {
            let v = self.constraint_value(i, xs);
            let viol = match c.sense {
                Sense::Le => v - c.rhs,
                Sense::Ge => c.rhs - v,
                Sense::Eq => (v - c.rhs).abs(),
            };
            worst = worst.max(viol);
        }
        for (b, blk) in self.blocks.iter().enumerate() {
            for &(i, val) in &blk.diag_fixed {
                worst = worst.max((xs[b].as_matrix()[(i, i)].re - val).abs());
            }
        }
        worst
    }

    fn rhs_norm(&self) -> f64 {
        let c: f64 = self.constraints.iter().map(|c| c.rhs * c.rhs).sum();
        let p: f64 = self.blocks.iter().flat_map(|b| b.diag_fixed.iter()).map(|(_, v)| v * v).sum();
        (c + p).sqrt()
    }

    fn validate(&self) -> Result<(), ConicError> {
        let finite = |h: &Hermitian| h.as_matrix().iter().all(|z| z.re.is_finite() && z.im.is_finite());
        for b in &self.blocks {
            if !b.quadratic.is_finite() || b.quadratic < 0.0 || !b.objective.as_ref().is_none_or(finite) {
                return Err(ConicError::NonFinite);
            }
        }
        for c in &self.constraints {
            if !c.terms.iter().all(|(_, a)| finite(a)) {
                return Err(ConicError::NonFinite);
            }
        }
        Ok(())
    }

    /// Human-readable TOML dump of the problem data for offline inspection.
    pub fn to_debug_string(&self) -> String {
        #[derive(Serialize)]
        struct DumpMatrix {
            dim: usize,
            /// Row-major `[re, im]` pairs.
            entries: Vec<[f64; 2]>,
        }
        #[derive(Serialize)]
        struct DumpBlock {
            dim: usize,
            quadratic: f64,
            objective: Option<DumpMatrix>,
            diag_fixed: Vec<(usize, f64)>,
        }
        #[derive(Serialize)]
        struct DumpTerm {
            block: usize,
            coefficient: DumpMatrix,
        }
        #[derive(Serialize)]
        struct DumpConstraint {
            sense: Sense,
            rhs: f64,
            terms: Vec<DumpTerm>,
        }
        #[derive(Serialize)]
        struct Dump {
            blocks: Vec<DumpBlock>,
            constraints: Vec<DumpConstraint>,
        }
        let mat = |h: &Hermitian| {
            let m = h.as_matrix();
            let n = h.dim();
            DumpMatrix {
                dim: n,
                entries: (0..n * n).map(|i| [m[(i / n, i % n)].re, m[(i / n, i % n)].im]).collect(),
            }
        };
        let dump = Dump {
            blocks: self
                .blocks
                .iter()
                .map(|b| DumpBlock {
                    dim: b.dim,
                    quadratic: b.quadratic,
                    objective: b.objective.as_ref().map(mat),
                    diag_fixed: b.diag_fixed.clone(),
                })
                .collect(),
            constraints: self
                .constraints
                .iter()
                .map(|c| DumpConstraint {
                    sense: c.sense,
                    rhs: c.rhs,
                    terms: c.terms.iter().map(|(b, a)| DumpTerm { block: *b, coefficient: mat(a) }).collect(),
                })
                .collect(),
        };
        toml::to_string(&dump).unwrap_or_else(|e| format!("# dump failed: {e}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIters,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: Vec<Hermitian>,
    pub status: SolveStatus,
    pub objective: f64,
    /// Largest constraint violation in the problem's own units.
    pub primal_residual: f64,
    /// Norm of the dual residual of the normalized problem.
    pub dual_residual: f64,
    /// `max(0, −λ_min)` over the blocks.
    pub psd_violation: f64,
    /// Duality gap in objective units.
    pub gap: f64,
    pub iterations: usize,
    /// Phase-I optimum when the main iteration failed: the fraction of the
    /// initial residual that cannot be removed. Positive means infeasible.
    pub infeasibility: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Relative primal/dual residual target.
    pub feas_tol: f64,
    /// Relative duality-gap target.
    pub gap_tol: f64,
    /// Phase-I optimum above which a problem is declared infeasible.
    pub infeas_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iters: 120, feas_tol: 1e-10, gap_tol: 1e-11, infeas_tol: 1e-7 }
    }
}

// ---------------------------------------------------------------------------
// Standard form: min <c, x> + ½ Σ q_b ‖X_b‖² s.t. A x = b, x ∈ PSD^blocks × R_+^lin

#[derive(Clone)]
struct Row {
    blocks: Vec<(usize, CMatrix)>,
    lin: Vec<(usize, f64)>,
    b: f64,
}

struct StdForm {
    dims: Vec<usize>,
    c_blk: Vec<CMatrix>,
    q: Vec<f64>,
    c_lin: Vec<f64>,
    rows: Vec<Row>,
}

#[derive(Clone, Debug)]
struct Pt {
    blk: Vec<CMatrix>,
    lin: Vec<f64>,
}

fn re_inner(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

fn herm(m: CMatrix) -> CMatrix {
    (&m + m.adjoint()).scale(0.5)
}

impl Pt {
    fn zeros(dims: &[usize], nlin: usize) -> Pt {
        Pt { blk: dims.iter().map(|&n| CMatrix::zeros(n, n)).collect(), lin: vec![0.0; nlin] }
    }

    fn identity(dims: &[usize], nlin: usize, s: f64) -> Pt {
        Pt {
            blk: dims.iter().map(|&n| CMatrix::identity(n, n).scale(s)).collect(),
            lin: vec![s; nlin],
        }
    }

    fn dot(&self, o: &Pt) -> f64 {
        let b: f64 = self.blk.iter().zip(&o.blk).map(|(a, b)| re_inner(a, b)).sum();
        let l: f64 = self.lin.iter().zip(&o.lin).map(|(a, b)| a * b).sum();
        b + l
    }

    fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    fn axpy(&mut self, a: f64, o: &Pt) {
        for (x, y) in self.blk.iter_mut().zip(&o.blk) {
            *x += y.scale(a);
        }
        for (x, y) in self.lin.iter_mut().zip(&o.lin) {
            *x += a * y;
        }
    }

    fn plus(&self, a: f64, o: &Pt) -> Pt {
        let mut p = self.clone();
        p.axpy(a, o);
        p
    }
}

impl StdForm {
    fn nlin(&self) -> usize {
        self.c_lin.len()
    }

    fn degree(&self) -> f64 {
        (self.dims.iter().sum::<usize>() + self.nlin()) as f64
    }

    fn apply_a(&self, x: &Pt) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| row_dot(r, x)))
    }

    fn apply_at(&self, y: &DVector<f64>) -> Pt {
        let mut p = Pt::zeros(&self.dims, self.nlin());
        for (r, &yi) in self.rows.iter().zip(y.iter()) {
            for (b, a) in &r.blocks {
                p.blk[*b] += a.scale(yi);
            }
            for &(j, a) in &r.lin {
                p.lin[j] += a * yi;
            }
        }
        p
    }

    fn b(&self) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.b))
    }

    fn c(&self) -> Pt {
        Pt { blk: self.c_blk.clone(), lin: self.c_lin.clone() }
    }

    fn p_times(&self, x: &Pt) -> Pt {
        Pt {
            blk: x.blk.iter().zip(&self.q).map(|(m, &q)| m.scale(q)).collect(),
            lin: vec![0.0; self.nlin()],
        }
    }

    fn primal_obj(&self, x: &Pt) -> f64 {
        let quad: f64 = x.blk.iter().zip(&self.q).map(|(m, &q)| 0.5 * q * m.norm_squared()).sum();
        self.c().dot(x) + quad
    }
}

fn row_dot(r: &Row, x: &Pt) -> f64 {
    let b: f64 = r.blocks.iter().map(|(b, a)| re_inner(a, &x.blk[*b])).sum();
    let l: f64 = r.lin.iter().map(|&(j, a)| a * x.lin[j]).sum();
    b + l
}

/// Equilibrated standard form of a user problem.
struct Lowered {
    sf: StdForm,
    obj_scale: f64,
}

fn lower(p: &ConicProblem) -> Lowered {
    let dims: Vec<usize> = p.blocks.iter().map(|b| b.dim).collect();
    let mut rows = Vec::new();
    let mut nlin = 0;
    for c in &p.constraints {
        let blocks: Vec<(usize, CMatrix)> = c.terms.iter().map(|(b, a)| (*b, a.as_matrix().clone())).collect();
        let lin = match c.sense {
            Sense::Eq => vec![],
            Sense::Le => {
                nlin += 1;
                vec![(nlin - 1, 1.0)]
            }
            Sense::Ge => {
                nlin += 1;
                vec![(nlin - 1, -1.0)]
            }
        };
        rows.push(Row { blocks, lin, b: c.rhs });
    }
    for (b, blk) in p.blocks.iter().enumerate() {
        for &(i, v) in &blk.diag_fixed {
            let mut e = CMatrix::zeros(blk.dim, blk.dim);
            e[(i, i)] = C64::new(1.0, 0.0);
            rows.push(Row { blocks: vec![(b, e)], lin: vec![], b: v });
        }
    }
    for r in rows.iter_mut() {
        let n2: f64 = r.blocks.iter().map(|(_, a)| a.norm_squared()).sum::<f64>()
            + r.lin.iter().map(|(_, a)| a * a).sum::<f64>();
        let n = n2.sqrt();
        if n > 0.0 {
            for (_, a) in r.blocks.iter_mut() {
                *a = a.unscale(n);
            }
            for (_, a) in r.lin.iter_mut() {
                *a /= n;
            }
            r.b /= n;
        }
    }
    let c_blk: Vec<CMatrix> = p
        .blocks
        .iter()
        .map(|b| b.objective.as_ref().map_or_else(|| CMatrix::zeros(b.dim, b.dim), |c| c.as_matrix().clone()))
        .collect();
    let c_norm = c_blk.iter().map(|c| c.norm_squared()).sum::<f64>().sqrt();
    let q_max = p.blocks.iter().map(|b| b.quadratic).fold(0.0, f64::max);
    let obj_scale = if c_norm.max(q_max) > 0.0 { c_norm.max(q_max) } else { 1.0 };
    let sf = StdForm {
        dims,
        c_blk: c_blk.into_iter().map(|c| c.unscale(obj_scale)).collect(),
        q: p.blocks.iter().map(|b| b.quadratic / obj_scale).collect(),
        c_lin: vec![0.0; nlin],
        rows,
    };
    Lowered { sf, obj_scale }
}

// ---------------------------------------------------------------------------
// NT scaling

struct BlockScaling {
    r: CMatrix,
    rinv: CMatrix,
    lambda: Vec<f64>,
    /// Eigenpairs of `T⁻¹ = R Rᴴ`.
    t_vecs: CMatrix,
    t_vals: Vec<f64>,
}

struct Scaling {
    blk: Vec<BlockScaling>,
    /// `w = sqrt(x/z)` per nonnegative variable.
    w: Vec<f64>,
    lambda_lin: Vec<f64>,
}

/// Any factor `L` with `X = L Lᴴ`, from the eigendecomposition.
fn psd_factor(x: &CMatrix) -> CMatrix {
    let e = hermitian_eig(&Hermitian::symmetrized(x.clone()));
    let top = e.values.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    let mut l = e.vectors.clone();
    for (j, &v) in e.values.iter().enumerate() {
        let s = v.max(top * 1e-300).sqrt();
        l.column_mut(j).iter_mut().for_each(|z| *z *= s);
    }
    l
}

fn block_scaling(x: &CMatrix, z: &CMatrix) -> BlockScaling {
    let n = x.nrows();
    let l1 = psd_factor(x);
    let l2 = psd_factor(z);
    let svd = (l2.adjoint() * &l1).svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let lambda: Vec<f64> = svd.singular_values.iter().map(|s| s.max(f64::MIN_POSITIVE)).collect();
    let mut r = &l1 * v_t.adjoint();
    let mut rinv = u.adjoint() * l2.adjoint();
    for j in 0..n {
        let s = lambda[j].sqrt();
        r.column_mut(j).iter_mut().for_each(|e| *e /= s);
        rinv.row_mut(j).iter_mut().for_each(|e| *e /= s);
    }
    // eigenpairs of T⁻¹ = R Rᴴ keep the directions that dominate (P + H)⁻¹
    // accurate even when T spans many orders of magnitude
    let tinv = Hermitian::symmetrized(&r * r.adjoint());
    let te = hermitian_eig(&tinv);
    BlockScaling { r, rinv, lambda, t_vecs: te.vectors, t_vals: te.values }
}

impl Scaling {
    fn new(x: &Pt, z: &Pt) -> Scaling {
        let blk = x.blk.iter().zip(&z.blk).map(|(x, z)| block_scaling(x, z)).collect();
        let w = x.lin.iter().zip(&z.lin).map(|(x, z)| (x / z).sqrt()).collect();
        let lambda_lin = x.lin.iter().zip(&z.lin).map(|(x, z)| (x * z).sqrt()).collect();
        Scaling { blk, w, lambda_lin }
    }

    /// `(P + H)⁻¹ y`.
    fn kinv(&self, q: &[f64], y: &Pt) -> Pt {
        let blk = y
            .blk
            .iter()
            .zip(&self.blk)
            .zip(q)
            .map(|((y, s), &q)| {
                let mut m = s.t_vecs.adjoint() * y * &s.t_vecs;
                let n = m.nrows();
                for i in 0..n {
                    for j in 0..n {
                        let mu = s.t_vals[i].max(0.0) * s.t_vals[j].max(0.0);
                        m[(i, j)] *= mu / (1.0 + q * mu);
                    }
                }
                herm(&s.t_vecs * m * s.t_vecs.adjoint())
            })
            .collect();
        let lin = y.lin.iter().zip(&self.w).map(|(y, w)| y * w * w).collect();
        Pt { blk, lin }
    }

    /// Scaled primal direction `W⁻ᵀ x`.
    fn scale_x(&self, x: &Pt) -> Pt {
        let blk = x.blk.iter().zip(&self.blk).map(|(x, s)| herm(&s.rinv * x * s.rinv.adjoint())).collect();
        let lin = x.lin.iter().zip(&self.w).map(|(x, w)| x / w).collect();
        Pt { blk, lin }
    }

    /// Scaled dual direction `W z`.
    fn scale_z(&self, z: &Pt) -> Pt {
        let blk = z.blk.iter().zip(&self.blk).map(|(z, s)| herm(s.r.adjoint() * z * &s.r)).collect();
        let lin = z.lin.iter().zip(&self.w).map(|(z, w)| z * w).collect();
        Pt { blk, lin }
    }

    /// `W⁻¹ u`.
    fn unscale_dual(&self, u: &Pt) -> Pt {
        let blk = u.blk.iter().zip(&self.blk).map(|(u, s)| herm(s.rinv.adjoint() * u * &s.rinv)).collect();
        let lin = u.lin.iter().zip(&self.w).map(|(u, w)| u / w).collect();
        Pt { blk, lin }
    }

    /// Solves `λ ∘ u = r` for `u`.
    fn lambda_solve(&self, r: &Pt) -> Pt {
        let blk = r
            .blk
            .iter()
            .zip(&self.blk)
            .map(|(r, s)| {
                let n = r.nrows();
                CMatrix::from_fn(n, n, |i, j| r[(i, j)] * (2.0 / (s.lambda[i] + s.lambda[j])))
            })
            .collect();
        let lin = r.lin.iter().zip(&self.lambda_lin).map(|(r, l)| r / l).collect();
        Pt { blk, lin }
    }

    /// `λ ∘ λ`.
    fn lambda_sq(&self) -> Pt {
        let blk = self
            .blk
            .iter()
            .map(|s| {
                let d = DVector::from_iterator(s.lambda.len(), s.lambda.iter().map(|l| C64::new(l * l, 0.0)));
                CMatrix::from_diagonal(&d)
            })
            .collect();
        Pt { blk, lin: self.lambda_lin.iter().map(|l| l * l).collect() }
    }

    /// Largest step keeping `λ + α d` in the cone, `d` in scaled coordinates.
    fn max_step(&self, d: &Pt) -> f64 {
        let mut alpha = f64::INFINITY;
        for (d, s) in d.blk.iter().zip(&self.blk) {
            let n = d.nrows();
            let m = CMatrix::from_fn(n, n, |i, j| d[(i, j)] / (s.lambda[i] * s.lambda[j]).sqrt());
            let e = hermitian_eig(&Hermitian::symmetrized(m));
            if let Some(&min) = e.values.last() {
                if min < 0.0 {
                    alpha = alpha.min(-1.0 / min);
                }
            }
        }
        for (d, l) in d.lin.iter().zip(&self.lambda_lin) {
            if *d < 0.0 {
                alpha = alpha.min(-l / d);
            }
        }
        alpha
    }
}

/// Symmetrized product `(a b + b a)/2` blockwise.
fn jordan(a: &Pt, b: &Pt) -> Pt {
    Pt {
        blk: a.blk.iter().zip(&b.blk).map(|(a, b)| (a * b + b * a).scale(0.5)).collect(),
        lin: a.lin.iter().zip(&b.lin).map(|(a, b)| a * b).collect(),
    }
}

struct Newton<'a> {
    sf: &'a StdForm,
    sc: Scaling,
    kinv_rows: Vec<Pt>,
    schur: SchurSolver,
}

enum SchurSolver {
    Chol(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl SchurSolver {
    fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            SchurSolver::Chol(c) => c.solve(r),
            SchurSolver::Lu(l) => l.solve(r).unwrap_or_else(|| DVector::zeros(r.len())),
        }
    }
}

impl<'a> Newton<'a> {
    fn new(sf: &'a StdForm, x: &Pt, z: &Pt) -> Option<Newton<'a>> {
        let sc = Scaling::new(x, z);
        let m = sf.rows.len();
        let kinv_rows: Vec<Pt> = sf
            .rows
            .iter()
            .map(|r| {
                let mut p = Pt::zeros(&sf.dims, sf.nlin());
                for (b, a) in &r.blocks {
                    p.blk[*b] += a;
                }
                for &(j, a) in &r.lin {
                    p.lin[j] += a;
                }
                sc.kinv(&sf.q, &p)
            })
            .collect();
        let mut schur = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = row_dot(&sf.rows[i], &kinv_rows[j]);
                schur[(i, j)] = v;
                schur[(j, i)] = v;
            }
        }
        if schur.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let diag_max = (0..m).map(|i| schur[(i, i)].abs()).fold(0.0, f64::max);
        let mut reg = schur.clone();
        for i in 0..m {
            reg[(i, i)] += 1e-15 * diag_max.max(f64::MIN_POSITIVE);
        }
        let solver = match reg.clone().cholesky() {
            Some(c) => SchurSolver::Chol(c),
            None => SchurSolver::Lu(reg.lu()),
        };
        Some(Newton { sf, sc, kinv_rows, schur: solver })
    }

    /// Search direction for complementarity target `λ∘(W dz + W⁻ᵀ dx) = rc`.
    fn direction(&self, rp: &DVector<f64>, rd: &Pt, rc: &Pt) -> (Pt, DVector<f64>, Pt) {
        let u = self.sc.lambda_solve(rc);
        let winv_u = self.sc.unscale_dual(&u);
        let g = winv_u.plus(-1.0, rd);
        let kg = self.sc.kinv(&self.sf.q, &g);
        let rhs = rp - self.sf.apply_a(&kg);
        let mut dy = self.schur.solve(&rhs);
        let mut dx = kg;
        for (row_k, &d) in self.kinv_rows.iter().zip(dy.iter()) {
            dx.axpy(d, row_k);
        }
        for _ in 0..2 {
            let r = rp - self.sf.apply_a(&dx);
            let ddy = self.schur.solve(&r);
            for (row_k, &d) in self.kinv_rows.iter().zip(ddy.iter()) {
                dx.axpy(d, row_k);
            }
            dy += ddy;
        }
        // dual equation taken literally: keeps A^T y + z - P x - c exact
        // when H is badly conditioned
        let mut dz = rd.plus(1.0, &self.sf.p_times(&dx));
        dz.axpy(-1.0, &self.sf.apply_at(&dy));
        (dx, dy, dz)
    }
}

struct IpmResult {
    x: Pt,
    converged: bool,
    stalled: bool,
    iterations: usize,
    dres: f64,
    gap: f64,
    /// `<x, z>` at the returned iterate.
    comp: f64,
}

fn ipm(sf: &StdForm, opts: &SolverOptions, x0: Pt, z0: Pt) -> IpmResult {
    let b = sf.b();
    let c = sf.c();
    let bnorm = 1.0 + b.norm();
    let cnorm = 1.0 + c.norm();
    let nu = sf.degree().max(1.0);
    let mut x = x0;
    let mut z = z0;
    let mut y = DVector::zeros(sf.rows.len());
    let mut best: Option<(f64, Pt, f64, f64, f64)> = None;
    let mut iterations = 0;
    let mut stalled = false;

    for it in 0..=opts.max_iters {
        iterations = it;
        let rp = &b - sf.apply_a(&x);
        let mut rd = c.plus(1.0, &sf.p_times(&x));
        rd.axpy(-1.0, &sf.apply_at(&y));
        rd.axpy(-1.0, &z);
        let pobj = sf.primal_obj(&x);
        let quad = pobj - c.dot(&x);
        let dobj = b.dot(&y) - quad;
        let comp = x.dot(&z);
        let pres = rp.norm() / bnorm;
        let dres = rd.norm() / cnorm;
        let gap = comp.max((pobj - dobj).abs());
        let rel_gap = gap / (1.0 + pobj.abs());
        let merit = pres.max(dres).max(comp.abs() / (1.0 + pobj.abs()));
        if !merit.is_finite() {
            stalled = true;
            break;
        }
        if best.as_ref().is_none_or(|bst| merit < bst.0) {
            best = Some((merit, x.clone(), dres, gap, comp));
        }
        if pres <= opts.feas_tol && dres <= opts.feas_tol && rel_gap <= opts.gap_tol {
            return IpmResult { x, converged: true, stalled: false, iterations: it, dres, gap, comp };
        }
        if it == opts.max_iters {
            break;
        }
        // diverging iterates signal infeasibility or unboundedness
        if x.norm() > 1e12 * (1.0 + bnorm) || y.norm() > 1e12 * (1.0 + cnorm) {
            stalled = true;
            break;
        }
        let mu = comp / nu;
        let Some(newton) = Newton::new(sf, &x, &z) else {
            stalled = true;
            break;
        };
        let lsq = newton.sc.lambda_sq();
        let rc_aff = Pt { blk: lsq.blk.iter().map(|m| -m).collect(), lin: lsq.lin.iter().map(|v| -v).collect() };
        let (dx_a, _dy_a, dz_a) = newton.direction(&rp, &rd, &rc_aff);
        let sdx_a = newton.sc.scale_x(&dx_a);
        let sdz_a = newton.sc.scale_z(&dz_a);
        let a_aff = newton.sc.max_step(&sdx_a).min(newton.sc.max_step(&sdz_a)).min(1.0);
        let mu_aff = x.plus(a_aff, &dx_a).dot(&z.plus(a_aff, &dz_a)) / nu;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
        let corr = jordan(&sdx_a, &sdz_a);
        let mut rc = Pt::identity(&sf.dims, sf.nlin(), sigma * mu);
        rc.axpy(-1.0, &lsq);
        rc.axpy(-1.0, &corr);
        let (dx, dy, dz) = newton.direction(&rp, &rd, &rc);
        let amax = newton.sc.max_step(&newton.sc.scale_x(&dx)).min(newton.sc.max_step(&newton.sc.scale_z(&dz)));
        let alpha = (0.99 * amax).min(1.0);
        if !(alpha > 1e-14) {
            stalled = true;
            break;
        }
        x.axpy(alpha, &dx);
        y += dy * alpha;
        z.axpy(alpha, &dz);
        for m in x.blk.iter_mut().chain(z.blk.iter_mut()) {
            *m = herm(m.clone());
        }
    }
    let (_, bx, dres, gap, comp) = best.expect("at least one iterate evaluated");
    IpmResult { x: bx, converged: false, stalled, iterations, dres, gap, comp }
}

fn initial_point(sf: &StdForm) -> (Pt, Pt) {
    let bmax = sf.rows.iter().map(|r| r.b.abs()).fold(0.0, f64::max);
    let cmax = sf
        .c_blk
        .iter()
        .map(|c| c.norm())
        .chain(sf.c_lin.iter().map(|c| c.abs()))
        .fold(0.0, f64::max);
    let xs = bmax.max(1.0);
    let zs = cmax.max(1.0);
    (Pt::identity(&sf.dims, sf.nlin(), xs), Pt::identity(&sf.dims, sf.nlin(), zs))
}

/// Minimizes `t` subject to `A x + t r0 = b`, `x ⪰ 0`, `t ≥ 0`, starting at a
/// strictly feasible point. Returns the optimal `t`.
fn phase_one(sf: &StdForm, opts: &SolverOptions) -> f64 {
    let (x0, _) = initial_point(sf);
    let r0 = sf.b() - sf.apply_a(&x0);
    if r0.norm() <= 1e-14 * (1.0 + sf.b().norm()) {
        return 0.0;
    }
    let nl = sf.nlin();
    let rows = sf
        .rows
        .iter()
        .zip(r0.iter())
        .map(|(r, &ri)| {
            let mut lin = r.lin.clone();
            lin.push((nl, ri));
            Row { blocks: r.blocks.clone(), lin, b: r.b }
        })
        .collect();
    let mut c_lin = vec![0.0; nl];
    c_lin.push(1.0);
    let aux = StdForm {
        dims: sf.dims.clone(),
        c_blk: sf.dims.iter().map(|&n| CMatrix::zeros(n, n)).collect(),
        q: vec![0.0; sf.dims.len()],
        c_lin,
        rows,
    };
    let mut x = x0;
    x.lin.push(1.0);
    let z = Pt::identity(&aux.dims, aux.nlin(), 1.0);
    let res = ipm(&aux, opts, x, z);
    res.x.lin[nl]
}

/// Solves a conic problem. Never panics on bad numerics: failures are
/// reported through [`SolveStatus`].
pub fn solve(p: &ConicProblem, opts: &SolverOptions) -> ConicSolution {
    let fail = |status| ConicSolution {
        x: p.blocks.iter().map(|b| Hermitian::zeros(b.dim)).collect(),
        status,
        objective: f64::NAN,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
        psd_violation: 0.0,
        gap: f64::INFINITY,
        iterations: 0,
        infeasibility: None,
    };
    if p.validate().is_err() {
        return fail(SolveStatus::NumericalFailure);
    }
    let low = lower(p);
    let sf = &low.sf;
    let (x0, z0) = initial_point(sf);
    let res = ipm(sf, opts, x0, z0);
    let x: Vec<Hermitian> = res.x.blk.iter().map(|m| Hermitian::symmetrized(m.clone())).collect();
    let objective = p.objective_value(&x);
    let primal_residual = p.primal_violation(&x);
    let psd_violation = x.iter().map(|h| (-h.min_eigenvalue()).max(0.0)).fold(0.0, f64::max);
    let gap = res.gap * low.obj_scale;

    // loose acceptance for a stalled but essentially solved problem. On
    // degenerate instances |pobj - dobj| is dominated by y·r_p with large y,
    // so complementarity is the gap measure here
    let rhs_scale = 1.0 + p.rhs_norm();
    let acceptable = primal_residual <= 1e-7 * rhs_scale
        && psd_violation <= 1e-7
        && res.comp * low.obj_scale <= 1e-6 * (1.0 + objective.abs())
        && res.dres <= 1e-7;
    let no_objective = p
        .blocks
        .iter()
        .all(|b| b.quadratic == 0.0 && b.objective.as_ref().is_none_or(|c| c.frobenius_norm() == 0.0));
    let feasible_point = primal_residual <= 1e-7 * rhs_scale && psd_violation <= 1e-7;
    let acceptable = acceptable || (no_objective && feasible_point);
    let mut infeasibility = None;
    let status = if res.converged || acceptable {
        SolveStatus::Optimal
    } else {
        let t = phase_one(sf, opts);
        infeasibility = Some(t);
        if t > opts.infeas_tol {
            SolveStatus::Infeasible
        } else if res.stalled {
            SolveStatus::NumericalFailure
        } else {
            SolveStatus::MaxIters
        }
    };
    ConicSolution {
        x,
        status,
        objective,
        primal_residual,
        dual_residual: res.dres,
        psd_violation,
        gap,
        iterations: res.iterations,
        infeasibility,
    }
}

/// Whether the constraint set is nonempty: solves with the objective removed.
pub fn feasibility_probe(p: &ConicProblem) -> bool {
    let mut q = p.clone();
    for b in q.blocks.iter_mut() {
        b.objective = None;
        b.quadratic = 0.0;
    }
    solve(&q, &SolverOptions::default()).status == SolveStatus::Optimal
}
