//! Convex solvers for residual-constrained sparse coding.
//!
//! Both coding problems have the form
//!
//! ```text
//! minimize  Σ_g weight_g · ‖w_g‖_q   subject to  ‖u − R w‖₂ ≤ ε
//! ```
//!
//! with singleton groups for plain l1 coding. They are solved through the
//! penalized form `½‖u − R w‖² + μ·Ω(w)` by ADMM (exact ridge-type w-update
//! with a cached factorization, proximal z-update), with an outer continuation
//! on μ that drives the residual onto the constraint boundary. Whenever the
//! active set found by ADMM admits it, a Newton solve of the KKT system on
//! that set returns the exact constrained optimum.
//!
//! [`solve_l1_error`] is the least-absolute-deviation fit used by mask
//! estimation: `min ‖e‖₁ s.t. u = D x + e`.

use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SocError};
use crate::linalg::{gram_range, lstsq, GRAM_RANK_TOL};
use crate::model::{BlockKind, BlockedDictionary, ImageVector, SparseCoefficients};

/// Continuation steps on the penalty before giving up.
const MAX_CONTINUATION: usize = 60;

#[derive(Clone, Debug)]
pub struct SolverConfig {
    /// Bound ε on the reconstruction residual.
    pub epsilon: f64,
    /// Occlusion-group weight; `None` derives it from the mean block sizes.
    pub lambda: Option<f64>,
    /// Within-group norm. Supported: 1, 2 and infinity.
    pub q_norm: f64,
    /// ADMM iterations per continuation step.
    pub max_iters: usize,
    /// Relative iterate-change tolerance.
    pub tol: f64,
    /// Accept an ADMM solution whose residual is in `[(1 − window)·ε, ε]`.
    pub residual_window: f64,
    /// Record the augmented Lagrangian around every primal sweep.
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            lambda: None,
            q_norm: 2.0,
            max_iters: 2000,
            tol: 1e-6,
            residual_window: 0.01,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SocError::InvalidConfig(m.to_string()));
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be >= 0");
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0) || !l.is_finite() {
                return bad("lambda must be > 0");
            }
        }
        if !(self.q_norm == 1.0 || self.q_norm == 2.0 || self.q_norm == f64::INFINITY) {
            return bad("q_norm must be 1, 2 or inf");
        }
        if self.max_iters < 1 {
            return bad("max_iters must be >= 1");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be > 0");
        }
        if !(0.0..1.0).contains(&self.residual_window) {
            return bad("residual_window must be in [0, 1)");
        }
        Ok(())
    }

    /// λ from the config, or `sqrt(mean face block / mean occlusion block)`.
    pub fn lambda_for(&self, dict: &BlockedDictionary) -> f64 {
        self.lambda.unwrap_or_else(|| {
            let (face, occ) = dict.mean_block_sizes();
            if face > 0.0 && occ > 0.0 {
                (face / occ).sqrt()
            } else {
                1.0
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub coefficients: SparseCoefficients,
    /// Total ADMM iterations over all continuation steps.
    pub iterations: usize,
    pub final_residual: f64,
    pub objective: f64,
    pub converged: bool,
    /// Penalty weight μ of the penalized problem the solution solves.
    pub penalty: f64,
    /// True when the solution was certified through the KKT system.
    pub exact: bool,
    /// `(before, after)` augmented Lagrangian around each primal sweep.
    pub trace: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum GroupNorm {
    L2,
    LInf,
}

#[derive(Clone, Debug)]
struct Group {
    range: Range<usize>,
    weight: f64,
}

/// Weighted sum of group norms.
#[derive(Clone, Debug)]
struct Penalty {
    groups: Vec<Group>,
    norm: GroupNorm,
}

impl Penalty {
    fn l1(n: usize) -> Self {
        Self {
            groups: (0..n).map(|j| Group { range: j..j + 1, weight: 1.0 }).collect(),
            norm: GroupNorm::L2,
        }
    }

    fn grouped(dict: &BlockedDictionary, lambda: f64, q: f64) -> Self {
        let mut groups = Vec::new();
        for b in dict.blocks() {
            let weight = match b.kind {
                BlockKind::Face => 1.0,
                BlockKind::Occlusion => lambda,
            };
            if q == 1.0 {
                groups.extend(b.range.clone().map(|j| Group { range: j..j + 1, weight }));
            } else {
                groups.push(Group { range: b.range.clone(), weight });
            }
        }
        let norm = if q == f64::INFINITY { GroupNorm::LInf } else { GroupNorm::L2 };
        Self { groups, norm }
    }

    /// Per-column weights when every group is a single column.
    fn singleton_weights(&self) -> Option<Vec<f64>> {
        self.groups
            .iter()
            .enumerate()
            .map(|(j, g)| (g.range == (j..j + 1)).then_some(g.weight))
            .collect()
    }

    fn group_norm(&self, v: &[f64]) -> f64 {
        match self.norm {
            GroupNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            GroupNorm::LInf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    fn dual_norm(&self, v: &[f64]) -> f64 {
        match self.norm {
            GroupNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            GroupNorm::LInf => v.iter().map(|x| x.abs()).sum(),
        }
    }

    fn value(&self, w: &DVector<f64>) -> f64 {
        let s = w.as_slice();
        self.groups
            .iter()
            .map(|g| g.weight * self.group_norm(&s[g.range.clone()]))
            .sum()
    }

    /// Smallest μ for which the zero vector solves the penalized problem.
    fn zero_threshold(&self, corr: &DVector<f64>) -> f64 {
        let s = corr.as_slice();
        self.groups
            .iter()
            .map(|g| self.dual_norm(&s[g.range.clone()]) / g.weight)
            .fold(0.0, f64::max)
    }

    /// In-place proximal map of `t·Ω`.
    fn prox(&self, v: &mut DVector<f64>, t: f64) {
        let s = v.as_mut_slice();
        for g in &self.groups {
            let x = &mut s[g.range.clone()];
            let thr = t * g.weight;
            match self.norm {
                GroupNorm::L2 => {
                    let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let scale = if n > thr { 1.0 - thr / n } else { 0.0 };
                    x.iter_mut().for_each(|a| *a *= scale);
                }
                GroupNorm::LInf => {
                    // x − proj_{ℓ1 ball of radius thr}(x)
                    let proj = project_l1_ball(x, thr);
                    x.iter_mut().zip(proj).for_each(|(a, p)| *a -= p);
                }
            }
        }
    }
}

fn project_l1_ball(x: &[f64], radius: f64) -> Vec<f64> {
    let l1: f64 = x.iter().map(|a| a.abs()).sum();
    if l1 <= radius {
        return x.to_vec();
    }
    let mut mags: Vec<f64> = x.iter().map(|a| a.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, m) in mags.iter().enumerate() {
        cum += m;
        let t = (cum - radius) / (i + 1) as f64;
        if t < *m {
            theta = t;
        }
    }
    x.iter()
        .map(|a| a.signum() * (a.abs() - theta).max(0.0))
        .collect()
}

/// Linear operator with a cached Gram matrix for the ADMM w-update.
struct Operator<'a> {
    a: &'a DMatrix<f64>,
    /// `A Aᵀ` (wide case) or `Aᵀ A` (tall case).
    gram: DMatrix<f64>,
    wide: bool,
}

impl<'a> Operator<'a> {
    fn new(a: &'a DMatrix<f64>) -> Self {
        let wide = a.ncols() > a.nrows();
        let gram = if wide { a * a.transpose() } else { a.tr_mul(a) };
        Self { a, gram, wide }
    }

    /// Keeps ρ within a range where `Gram + ρI` factors reliably.
    fn clamp_rho(&self, rho: f64) -> f64 {
        let scale = self.gram.diagonal().amax().max(1e-300);
        rho.clamp(1e-6 * scale, 1e6 * scale)
    }

    fn factor(&self, rho: f64) -> Cholesky<f64, Dyn> {
        let mut g = self.gram.clone();
        for i in 0..g.nrows() {
            g[(i, i)] += rho;
        }
        Cholesky::new(g).expect("Gram plus positive ridge is positive definite")
    }

    /// Returns `w = (AᵀA + ρI)⁻¹ b` and `A w`.
    fn ridge_solve(
        &self,
        chol: &Cholesky<f64, Dyn>,
        rho: f64,
        b: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        if self.wide {
            // Woodbury: w = (b − Aᵀ (ρI + AAᵀ)⁻¹ A b) / ρ and A w = (ρI + AAᵀ)⁻¹ A b
            let ab = self.a * b;
            let s = chol.solve(&ab);
            let w = (b - self.a.tr_mul(&s)) / rho;
            (w, s)
        } else {
            let w = chol.solve(b);
            let aw = self.a * &w;
            (w, aw)
        }
    }
}

struct AdmmState {
    w: DVector<f64>,
    aw: DVector<f64>,
    z: DVector<f64>,
    /// Scaled dual variable (`y / ρ`).
    dual: DVector<f64>,
    rho: f64,
    chol: Cholesky<f64, Dyn>,
}

impl AdmmState {
    fn new(op: &Operator<'_>, rho: f64) -> Self {
        let rho = op.clamp_rho(rho);
        let n = op.a.ncols();
        Self {
            w: DVector::zeros(n),
            aw: DVector::zeros(op.a.nrows()),
            z: DVector::zeros(n),
            dual: DVector::zeros(n),
            rho,
            chol: op.factor(rho),
        }
    }

    fn set_rho(&mut self, op: &Operator<'_>, rho: f64) {
        let rho = op.clamp_rho(rho);
        if rho != self.rho {
            self.dual *= self.rho / rho;
            self.rho = rho;
            self.chol = op.factor(rho);
        }
    }
}

fn augmented_lagrangian(
    u: &DVector<f64>,
    aw: &DVector<f64>,
    w: &DVector<f64>,
    z: &DVector<f64>,
    dual: &DVector<f64>,
    rho: f64,
    mu: f64,
    penalty: &Penalty,
) -> f64 {
    0.5 * (u - aw).norm_squared() + mu * penalty.value(z) + 0.5 * rho * (w - z + dual).norm_squared()
        - 0.5 * rho * dual.norm_squared()
}

/// ADMM on `½‖u − A w‖² + μ Ω(z)`, `w = z`, warm-started from `st`.
/// Returns (iterations, converged).
#[allow(clippy::too_many_arguments)]
fn admm_penalized(
    op: &Operator<'_>,
    u: &DVector<f64>,
    atu: &DVector<f64>,
    penalty: &Penalty,
    mu: f64,
    st: &mut AdmmState,
    cfg: &SolverConfig,
    trace: &mut Vec<(f64, f64)>,
) -> (usize, bool) {
    let n = st.w.len();
    let abs_tol = 1e-12 * (n as f64).sqrt();
    let mut rebalances = 0;
    for it in 1..=cfg.max_iters {
        let before = cfg.record_trace.then(|| {
            augmented_lagrangian(u, &st.aw, &st.w, &st.z, &st.dual, st.rho, mu, penalty)
        });
        let b = atu + (&st.z - &st.dual) * st.rho;
        let (w, aw) = op.ridge_solve(&st.chol, st.rho, &b);
        let mut z_new = &w + &st.dual;
        penalty.prox(&mut z_new, mu / st.rho);
        if let Some(before) = before {
            let after = augmented_lagrangian(u, &aw, &w, &z_new, &st.dual, st.rho, mu, penalty);
            trace.push((before, after));
        }
        let r_prim = (&w - &z_new).norm();
        let dz = (&z_new - &st.z).norm();
        st.dual += &w - &z_new;
        st.w = w;
        st.aw = aw;
        st.z = z_new;

        let scale = st.w.norm().max(st.z.norm()).max(1e-3);
        if r_prim <= abs_tol + cfg.tol * scale && dz <= abs_tol + cfg.tol * scale {
            return (it, true);
        }
        if it % 10 == 0 && rebalances < 40 {
            let r_dual = st.rho * dz;
            let rel_prim = r_prim / scale;
            let rel_dual = r_dual / (st.rho * st.dual.norm()).max(1e-12);
            if rel_prim > 10.0 * rel_dual {
                st.set_rho(op, st.rho * 2.0);
                rebalances += 1;
            } else if rel_dual > 10.0 * rel_prim {
                st.set_rho(op, st.rho * 0.5);
                rebalances += 1;
            }
        }
    }
    (cfg.max_iters, false)
}

/// Newton solve of the KKT system restricted to the active groups of `z`.
///
/// For ε > 0 the unknowns are the active coefficients and μ, with the residual
/// pinned to ε. For ε = 0 the least-squares fit on the active columns is
/// certified through the minimum-norm dual vector. Returns `None` when the
/// active set does not carry a valid certificate.
fn refine_on_active_set(
    a: &DMatrix<f64>,
    u: &DVector<f64>,
    penalty: &Penalty,
    z: &DVector<f64>,
    mu0: f64,
    eps: f64,
) -> Option<(DVector<f64>, f64)> {
    if penalty.norm != GroupNorm::L2 {
        return None;
    }
    let zs = z.as_slice();
    let active: Vec<&Group> = penalty
        .groups
        .iter()
        .filter(|g| zs[g.range.clone()].iter().any(|v| *v != 0.0))
        .collect();
    if active.is_empty() {
        return None;
    }
    let cols: Vec<usize> = active.iter().flat_map(|g| g.range.clone()).collect();
    let na = cols.len();
    if na > a.nrows() {
        return None;
    }
    let aa = a.select_columns(&cols);
    let gram = aa.tr_mul(&aa);
    // local offsets of each active group inside `cols`
    let mut offsets = Vec::with_capacity(active.len());
    let mut off = 0;
    for g in &active {
        offsets.push((off..off + g.range.len(), g.weight));
        off += g.range.len();
    }
    let grad = |w: &DVector<f64>| -> Option<DVector<f64>> {
        let mut g = DVector::zeros(na);
        for (r, wt) in &offsets {
            let n = w.rows(r.start, r.len()).norm();
            if n <= 1e-14 {
                return None;
            }
            g.rows_mut(r.start, r.len())
                .copy_from(&(w.rows(r.start, r.len()) * (*wt / n)));
        }
        Some(g)
    };

    let (w_a, mu, resid) = if eps == 0.0 {
        if crate::linalg::rank(&aa) < na {
            return None;
        }
        let w_a = lstsq(&aa, u);
        let r = u - &aa * &w_a;
        if r.norm() > 1e-10 * u.norm().max(1.0) {
            return None;
        }
        let g = grad(&w_a)?;
        let nu = &aa * gram.clone().cholesky()?.solve(&g);
        // scale the dual so the certificate reads like the penalized KKT with μ = 1
        (w_a, 1.0, nu)
    } else {
        let mut w: DVector<f64> = DVector::from_iterator(na, cols.iter().map(|&j| z[j]));
        let mut mu = mu0;
        let eval = |w: &DVector<f64>, mu: f64| -> Option<(DVector<f64>, DVector<f64>)> {
            let r = u - &aa * w;
            let g = grad(w)?;
            let mut f = DVector::zeros(na + 1);
            f.rows_mut(0, na).copy_from(&(-aa.tr_mul(&r) + &g * mu));
            f[na] = 0.5 * (r.norm_squared() - eps * eps);
            Some((f, r))
        };
        let (mut f, _) = eval(&w, mu)?;
        let mut converged = false;
        for _ in 0..100 {
            let fnorm = f.norm();
            if fnorm <= 1e-14 {
                converged = true;
                break;
            }
            let r = u - &aa * &w;
            let g = grad(&w)?;
            let mut jac = DMatrix::zeros(na + 1, na + 1);
            jac.view_mut((0, 0), (na, na)).copy_from(&gram);
            for (rg, wt) in &offsets {
                let wg = w.rows(rg.start, rg.len()).into_owned();
                let n = wg.norm();
                let what = &wg / n;
                let h = (DMatrix::identity(rg.len(), rg.len()) - &what * what.transpose())
                    * (mu * wt / n);
                let mut blk = jac.view_mut((rg.start, rg.start), (rg.len(), rg.len()));
                blk += h;
            }
            jac.view_mut((0, na), (na, 1)).copy_from(&g);
            let dr = -aa.tr_mul(&r);
            jac.view_mut((na, 0), (1, na)).copy_from(&dr.transpose());
            let step = jac.lu().solve(&(-&f))?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let w_try = &w + step.rows(0, na) * t;
                let mu_try = mu + step[na] * t;
                if mu_try > 0.0 {
                    if let Some((f_try, _)) = eval(&w_try, mu_try) {
                        if f_try.norm() < fnorm * (1.0 - 1e-4 * t) {
                            w = w_try;
                            mu = mu_try;
                            f = f_try;
                            accepted = true;
                            break;
                        }
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                converged = f.norm() <= 1e-11;
                break;
            }
        }
        if !converged {
            return None;
        }
        let r = u - &aa * &w;
        if (r.norm() - eps).abs() > 1e-9 * eps.max(1e-3) {
            return None;
        }
        (w, mu, r)
    };

    // inactive groups must satisfy the dual bound
    let corr = a.tr_mul(&resid);
    let cs = corr.as_slice();
    for g in &penalty.groups {
        if active.iter().any(|ag| ag.range == g.range) {
            continue;
        }
        let d = penalty.dual_norm(&cs[g.range.clone()]);
        if d > mu * g.weight * (1.0 + 1e-9) + 1e-12 {
            return None;
        }
    }
    let mut full = DVector::zeros(a.ncols());
    for (k, &j) in cols.iter().enumerate() {
        full[j] = w_a[k];
    }
    Some((full, mu))
}

/// Exact weighted-l1 path following (homotopy) from `μ_max` down to the
/// point where the residual norm reaches `eps`.
///
/// Returns `(w, μ, breakpoints)`, or `None` when the active Gram matrix becomes
/// singular or the path does not terminate, in which case the caller falls back
/// to ADMM.
fn homotopy_l1(
    a: &DMatrix<f64>,
    u: &DVector<f64>,
    weights: &[f64],
    eps: f64,
) -> Option<(DVector<f64>, f64, usize)> {
    let n = a.ncols();
    let mut x = DVector::<f64>::zeros(n);
    let mut r = u.clone();
    let c0 = a.tr_mul(u);
    let (j0, mu_max) = (0..n)
        .map(|j| (j, c0[j].abs() / weights[j]))
        .fold((0, 0.0), |b, c| if c.1 > b.1 { c } else { b });
    if mu_max == 0.0 {
        return None;
    }
    let mut mu = mu_max;
    let mut active: Vec<usize> = vec![j0];
    let mut signs: Vec<f64> = vec![c0[j0].signum()];
    let mut just_dropped: Option<usize> = None;
    let max_steps = 20 * n.max(a.nrows());
    for step in 1..=max_steps {
        let aa = a.select_columns(&active);
        let chol = aa.tr_mul(&aa).cholesky()?;
        let ws = DVector::from_iterator(active.len(), active.iter().zip(&signs).map(|(&j, s)| weights[j] * s));
        // dx/dδ on the active set, where δ = decrease of μ
        let d = chol.solve(&ws);
        if d.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let v = &aa * &d;
        let av = a.tr_mul(&v);
        let c = a.tr_mul(&r);

        let mut delta = mu;
        let mut event: Option<(bool, usize)> = None; // (joins, index)
        for j in 0..n {
            if active.contains(&j) || Some(j) == just_dropped {
                continue;
            }
            for (num, den) in [(c[j] - mu * weights[j], av[j] - weights[j]), (c[j] + mu * weights[j], av[j] + weights[j])] {
                if den.abs() > 1e-300 {
                    let t = num / den;
                    if t > 1e-14 * mu_max && t < delta {
                        delta = t;
                        event = Some((true, j));
                    }
                }
            }
        }
        for (k, &j) in active.iter().enumerate() {
            if d[k] != 0.0 {
                let t = -x[j] / d[k];
                if t > 1e-14 * mu_max && t < delta {
                    delta = t;
                    event = Some((false, k));
                }
            }
        }
        // does the residual reach ε inside this segment?
        let vv = v.norm_squared();
        let rv = r.dot(&v);
        let rr = r.norm_squared();
        let disc = rv * rv - vv * (rr - eps * eps);
        if vv > 0.0 && disc >= 0.0 {
            let t = (rv - disc.sqrt()) / vv;
            if t >= 0.0 && t <= delta {
                for (k, &j) in active.iter().enumerate() {
                    x[j] += t * d[k];
                }
                return Some((x, mu - t, step));
            }
        }
        for (k, &j) in active.iter().enumerate() {
            x[j] += delta * d[k];
        }
        mu -= delta;
        r = u - a * &x;
        match event {
            None => {
                // reached μ = 0 without meeting ε
                return None;
            }
            Some((true, j)) => {
                signs.push((c[j] - delta * av[j]).signum());
                active.push(j);
                just_dropped = None;
            }
            Some((false, k)) => {
                let j = active.remove(k);
                signs.remove(k);
                x[j] = 0.0;
                just_dropped = Some(j);
                if active.is_empty() {
                    return None;
                }
            }
        }
        if active.len() > a.nrows() {
            return None;
        }
    }
    None
}

/// KKT check of a weighted-l1 penalized solution with penalty `mu`.
fn l1_kkt_holds(a: &DMatrix<f64>, u: &DVector<f64>, weights: &[f64], w: &DVector<f64>, mu: f64) -> bool {
    let c = a.tr_mul(&(u - a * w));
    let tol = 1e-7 * mu.max(1e-12);
    (0..w.len()).all(|j| {
        if w[j] != 0.0 {
            (c[j] - mu * weights[j] * w[j].signum()).abs() <= tol
        } else {
            c[j].abs() <= mu * weights[j] + tol
        }
    })
}

fn check_inputs(u: &ImageVector, dict: &BlockedDictionary, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    if u.len() != dict.m() {
        return Err(SocError::DimMismatch {
            expected: dict.m(),
            got: u.len(),
        });
    }
    Ok(())
}

fn solve_constrained(
    u: &ImageVector,
    dict: &BlockedDictionary,
    penalty: &Penalty,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    let a = dict.atoms();
    let uv = u.data();
    let eps = cfg.epsilon;
    let report = |w: DVector<f64>, iterations, converged, penalty_w, exact, trace| -> Result<SolveReport> {
        let final_residual = (uv - a * &w).norm();
        let objective = penalty.value(&w);
        Ok(SolveReport {
            coefficients: SparseCoefficients::new(dict, w)?,
            iterations,
            final_residual,
            objective,
            converged,
            penalty: penalty_w,
            exact,
            trace,
        })
    };

    let unorm = uv.norm();
    if unorm <= eps {
        return report(DVector::zeros(a.ncols()), 0, true, f64::INFINITY, true, Vec::new());
    }
    let atu = a.tr_mul(uv);
    let mu_max = penalty.zero_threshold(&atu);
    if mu_max == 0.0 {
        // u orthogonal to every atom: nothing reduces the residual
        return report(DVector::zeros(a.ncols()), 0, false, 0.0, false, Vec::new());
    }
    if eps > 0.0 && !cfg.record_trace && penalty.norm == GroupNorm::L2 {
        if let Some(weights) = penalty.singleton_weights() {
            if let Some((w, mu_star, steps)) = homotopy_l1(a, uv, &weights, eps) {
                if l1_kkt_holds(a, uv, &weights, &w, mu_star) {
                    return report(w, steps, true, mu_star, true, Vec::new());
                }
            }
            log::debug!("homotopy path failed, falling back to ADMM");
        }
    }
    let op = Operator::new(a);
    let feasible_tol = if eps == 0.0 { cfg.tol * unorm } else { 0.0 };
    let target_lo = (1.0 - cfg.residual_window) * eps;

    let mut mu = 0.5 * mu_max;
    let mut st = AdmmState::new(&op, mu.max(1e-8));
    let (mut lo, mut hi): (Option<f64>, f64) = (None, mu_max);
    let mut iterations = 0;
    let mut trace = Vec::new();
    let mut best: Option<(DVector<f64>, f64, f64)> = None; // (w, residual, mu)
    let mut last_converged = false;

    for _ in 0..MAX_CONTINUATION {
        st.set_rho(&op, mu);
        let (its, conv) = admm_penalized(&op, uv, &atu, penalty, mu, &mut st, cfg, &mut trace);
        iterations += its;
        last_converged = conv;

        if let Some((w, mu_star)) = refine_on_active_set(a, uv, penalty, &st.z, mu, eps) {
            let res = (uv - a * &w).norm();
            if res <= eps * (1.0 + 1e-9) + feasible_tol {
                return report(w, iterations, true, mu_star, true, trace);
            }
        }

        let res = (uv - a * &st.z).norm();
        if res <= eps + feasible_tol {
            let better = match &best {
                Some((_, r, _)) => res > *r,
                None => true,
            };
            if better {
                best = Some((st.z.clone(), res, mu));
            }
            if conv && (res >= target_lo || eps == 0.0) {
                return report(st.z.clone(), iterations, true, mu, false, trace);
            }
            lo = Some(mu);
        } else {
            hi = mu;
        }
        mu = match lo {
            None => mu * 0.1,
            Some(l) => (l * hi).sqrt(),
        };
        if let Some(l) = lo {
            if hi / l < 1.0 + 1e-9 {
                break;
            }
        }
        if mu < 1e-14 * mu_max {
            break;
        }
    }
    match best {
        Some((w, _, mu_b)) => report(w, iterations, false, mu_b, false, trace),
        None => {
            let _ = last_converged;
            report(st.z.clone(), iterations, false, mu, false, trace)
        }
    }
}

/// `min ‖w‖₁  s.t.  ‖u − R w‖₂ ≤ ε`.
pub fn solve_l1_bpdn(
    u: &ImageVector,
    dict: &BlockedDictionary,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    check_inputs(u, dict, cfg)?;
    solve_constrained(u, dict, &Penalty::l1(dict.n()), cfg)
}

/// `min Σ_face ‖x_i‖_q + λ Σ_occlusion ‖c_t‖_q  s.t.  ‖u − R w‖₂ ≤ ε`.
pub fn solve_group_bpdn(
    u: &ImageVector,
    dict: &BlockedDictionary,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    check_inputs(u, dict, cfg)?;
    if dict.blocks().is_empty() {
        return Err(SocError::InvalidDictionary("dictionary has no blocks".into()));
    }
    let lambda = cfg.lambda_for(dict);
    solve_constrained(u, dict, &Penalty::grouped(dict, lambda, cfg.q_norm), cfg)
}

/// Penalized l1 coding `min ½‖u − A w‖² + μ‖w‖₁` (used for K-SVD sparse coding).
pub fn lasso(a: &DMatrix<f64>, u: &DVector<f64>, mu: f64, cfg: &SolverConfig) -> DVector<f64> {
    let op = Operator::new(a);
    let penalty = Penalty::l1(a.ncols());
    let atu = a.tr_mul(u);
    let mut st = AdmmState::new(&op, mu.max(1e-8));
    let mut trace = Vec::new();
    admm_penalized(&op, u, &atu, &penalty, mu, &mut st, cfg, &mut trace);
    st.z
}

/// Result of the least-absolute-deviation fit.
#[derive(Clone, Debug)]
pub struct L1ErrorFit {
    pub x: DVector<f64>,
    /// `u − D x`, exact by construction.
    pub e: DVector<f64>,
    pub rank_deficient: bool,
    pub iterations: usize,
}

impl L1ErrorFit {
    pub fn l1(&self) -> f64 {
        self.e.iter().map(|v| v.abs()).sum()
    }
}

/// Least-absolute-deviation regression on raw matrices.
///
/// The optimum of `min ‖u − D x‖₁` is attained at a vertex where `rank(D)`
/// residuals vanish. A few reweighted least-squares steps give a starting
/// point, the best-fitting independent rows give a starting vertex, and
/// exchange steps between vertices follow until the subgradient certificate
/// holds. Rank-deficient `D` is handled on its column space.
pub fn lad_fit(d: &DMatrix<f64>, u: &DVector<f64>, warm: Option<&DVector<f64>>) -> L1ErrorFit {
    let (m, h) = d.shape();
    if m == 0 || h == 0 {
        return L1ErrorFit {
            x: DVector::zeros(h),
            e: u.clone(),
            rank_deficient: h > 0,
            iterations: 0,
        };
    }
    let (vr, _) = gram_range(d, GRAM_RANK_TOL);
    let rank = vr.ncols();
    let rank_deficient = rank < h;
    if rank == 0 {
        return L1ErrorFit {
            x: DVector::zeros(h),
            e: u.clone(),
            rank_deficient,
            iterations: 0,
        };
    }
    // work with the full-column-rank factor A = D V_r, x = V_r y
    let a = d * &vr;
    let y0 = match warm {
        Some(w) if w.len() == h => vr.tr_mul(w),
        _ => irls_start(&a, u, 10),
    };
    let (y, iterations) = lad_vertex_descent(&a, u, y0);
    let x = &vr * y;
    let e = u - d * &x;
    L1ErrorFit {
        x,
        e,
        rank_deficient,
        iterations,
    }
}

/// Reweighted least squares toward the LAD fit of a full-column-rank `a`.
fn irls_start(a: &DMatrix<f64>, u: &DVector<f64>, iters: usize) -> DVector<f64> {
    let (m, r) = a.shape();
    let mut y = lstsq(a, u);
    let floor = 1e-6 * u.amax().max(1e-300);
    for _ in 0..iters {
        let res = u - a * &y;
        let mut g = DMatrix::zeros(r, r);
        let mut b = DVector::zeros(r);
        for i in 0..m {
            let w = 1.0 / res[i].abs().max(floor);
            let row = a.row(i);
            g.ger(w, &row.transpose(), &row.transpose(), 1.0);
            b.axpy(w * u[i], &row.transpose(), 1.0);
        }
        match g.cholesky() {
            Some(c) => y = c.solve(&b),
            None => break,
        }
    }
    y
}

/// Vertex exchange for `min ‖u − A y‖₁`, `A` of full column rank.
fn lad_vertex_descent(a: &DMatrix<f64>, u: &DVector<f64>, y0: DVector<f64>) -> (DVector<f64>, usize) {
    let (m, r) = a.shape();
    let scale = u.amax().max(1e-300);
    let zero_tol = 1e-13 * scale;
    let objective = |y: &DVector<f64>| (u - a * y).iter().map(|v| v.abs()).sum::<f64>();

    // starting vertex: greedy independent rows in order of increasing |residual|
    let res0 = u - a * &y0;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| res0[i].abs().total_cmp(&res0[j].abs()).then(i.cmp(&j)));
    let mut basis: Vec<usize> = Vec::with_capacity(r);
    let mut q: Vec<DVector<f64>> = Vec::with_capacity(r);
    for &i in &order {
        let row = a.row(i).transpose();
        let rn = row.norm();
        if rn == 0.0 {
            continue;
        }
        let mut v = row.clone();
        for qk in &q {
            let c = qk.dot(&v);
            v.axpy(-c, qk, 1.0);
        }
        let vn = v.norm();
        if vn > 1e-8 * rn {
            q.push(v / vn);
            basis.push(i);
            if basis.len() == r {
                break;
            }
        }
    }
    if basis.len() < r {
        return (y0, 0);
    }
    let solve_vertex = |basis: &[usize]| -> Option<DVector<f64>> {
        let ab = a.select_rows(basis);
        let ub = DVector::from_iterator(r, basis.iter().map(|&i| u[i]));
        ab.lu().solve(&ub)
    };
    let Some(mut y) = solve_vertex(&basis) else {
        return (y0, 0);
    };
    let mut best = (objective(&y), y.clone());
    let start_obj = objective(&y0);

    let max_pivots = 50 * r + 500;
    let mut in_basis = vec![false; m];
    basis.iter().for_each(|&i| in_basis[i] = true);
    let mut pivots = 0;
    while pivots < max_pivots {
        let res = u - a * &y;
        let mut s = DVector::zeros(m);
        for i in 0..m {
            if !in_basis[i] && res[i].abs() > zero_tol {
                s[i] = res[i].signum();
            }
        }
        let g = a.tr_mul(&s);
        let ab = a.select_rows(&basis);
        let lu = ab.clone().lu();
        // λ solves A_Bᵀ λ = −g
        let Some(lambda) = ab.transpose().lu().solve(&(-&g)) else {
            break;
        };
        let (k, lk) = lambda
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (k, v)| if v.abs() > acc.1 { (k, v.abs()) } else { acc });
        if lk <= 1.0 + 1e-10 {
            break;
        }
        let sigma = -lambda[k].signum();
        let mut ek = DVector::zeros(r);
        ek[k] = sigma;
        let Some(p) = lu.solve(&ek) else {
            break;
        };
        let qv = a * &p;
        // residual i moves as res_i − t·q_i
        let mut bps: Vec<(f64, usize)> = Vec::new();
        let mut slope = 1.0 - lk;
        for i in 0..m {
            if in_basis[i] || qv[i] == 0.0 {
                continue;
            }
            if res[i].abs() <= zero_tol {
                // already on its kink: moving off costs |q_i| immediately
                bps.push((0.0, i));
            } else {
                let t = res[i] / qv[i];
                if t > 0.0 {
                    bps.push((t, i));
                }
            }
        }
        bps.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut entering = None;
        for &(t, i) in &bps {
            slope += if res[i].abs() <= zero_tol {
                qv[i].abs()
            } else {
                2.0 * qv[i].abs()
            };
            if slope >= 0.0 {
                entering = Some((t, i));
                break;
            }
        }
        let Some((t, i)) = entering else {
            break;
        };
        in_basis[basis[k]] = false;
        basis[k] = i;
        in_basis[i] = true;
        y += &p * t;
        pivots += 1;
        let obj = objective(&y);
        if obj < best.0 {
            best = (obj, y.clone());
        }
    }
    if start_obj < best.0 {
        return (y0, pivots);
    }
    (best.1, pivots)
}

/// `min ‖e‖₁ s.t. u = D x + e` over a (small) dictionary.
pub fn solve_l1_error(u: &ImageVector, dict_small: &BlockedDictionary) -> Result<L1ErrorFit> {
    if u.len() != dict_small.m() {
        return Err(SocError::DimMismatch {
            expected: dict_small.m(),
            got: u.len(),
        });
    }
    let fit = lad_fit(dict_small.atoms(), u.data(), None);
    if fit.rank_deficient {
        log::warn!("l1 error fit: dictionary columns are linearly dependent");
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Block;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dict_from(cols: &[DVector<f64>], blocks: Vec<Block>, m: usize) -> BlockedDictionary {
        BlockedDictionary::from_columns((m, 1), cols, blocks).unwrap()
    }

    fn singletons(n: usize) -> Vec<Block> {
        (0..n)
            .map(|j| Block::new(format!("b{j}"), BlockKind::Face, j..j + 1))
            .collect()
    }

    fn random_cols(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<DVector<f64>> {
        (0..n)
            .map(|_| DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn orthonormal4() -> Vec<DVector<f64>> {
        let h = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0,
                1.0,
            ],
        ) * 0.5;
        (0..4).map(|j| h.column(j).into_owned()).collect()
    }

    #[test]
    fn l1_exact_column_with_zero_epsilon() {
        let cols = orthonormal4();
        let d = dict_from(&cols, singletons(4), 4);
        let u = ImageVector::from_dvector((4, 1), d.column(1)).unwrap();
        let cfg = SolverConfig { epsilon: 0.0, ..Default::default() };
        let rep = solve_l1_bpdn(&u, &d, &cfg).unwrap();
        let w = &rep.coefficients.values;
        for j in 0..4 {
            let want = if j == 1 { 1.0 } else { 0.0 };
            assert!((w[j] - want).abs() < 1e-8, "w = {w}");
        }
        assert!(rep.converged);
    }

    #[test]
    fn zero_input_gives_zero_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cols = random_cols(&mut rng, 6, 9);
        let d = dict_from(&cols, singletons(9), 6);
        let u = ImageVector::zeros((6, 1));
        for eps in [0.0, 0.05] {
            let cfg = SolverConfig { epsilon: eps, ..Default::default() };
            assert_eq!(solve_l1_bpdn(&u, &d, &cfg).unwrap().coefficients.values.norm(), 0.0);
            assert_eq!(solve_group_bpdn(&u, &d, &cfg).unwrap().coefficients.values.norm(), 0.0);
        }
    }

    #[test]
    fn group_zeroes_inactive_block() {
        let cols = orthonormal4();
        let blocks = vec![
            Block::new("one", BlockKind::Face, 0..2),
            Block::new("two", BlockKind::Face, 2..4),
        ];
        let d = dict_from(&cols, blocks, 4);
        let u = ImageVector::from_dvector((4, 1), d.column(0) * 0.6 + d.column(1) * 0.8).unwrap();
        let cfg = SolverConfig { epsilon: 0.0, ..Default::default() };
        let rep = solve_group_bpdn(&u, &d, &cfg).unwrap();
        let w = &rep.coefficients.values;
        assert!(w[2].abs() < 1e-8 && w[3].abs() < 1e-8, "w = {w}");
        assert!((w[0] - 0.6).abs() < 1e-8 && (w[1] - 0.8).abs() < 1e-8);
    }

    #[test]
    fn dimension_mismatch() {
        let d = dict_from(&orthonormal4(), singletons(4), 4);
        let u = ImageVector::zeros((3, 1));
        assert!(matches!(
            solve_l1_bpdn(&u, &d, &SolverConfig::default()),
            Err(SocError::DimMismatch { .. })
        ));
    }

    #[test]
    fn rejects_bad_config() {
        let d = dict_from(&orthonormal4(), singletons(4), 4);
        let u = ImageVector::from_dvector((4, 1), d.column(0)).unwrap();
        for cfg in [
            SolverConfig { q_norm: 3.0, ..Default::default() },
            SolverConfig { tol: 0.0, ..Default::default() },
            SolverConfig { lambda: Some(0.0), ..Default::default() },
            SolverConfig { epsilon: -1.0, ..Default::default() },
        ] {
            assert!(matches!(
                solve_group_bpdn(&u, &d, &cfg),
                Err(SocError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn lambda_default_from_block_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cols = random_cols(&mut rng, 10, 10);
        let blocks = vec![
            Block::new("f1", BlockKind::Face, 0..2),
            Block::new("f2", BlockKind::Face, 2..4),
            Block::new("o", BlockKind::Occlusion, 4..10),
        ];
        let d = dict_from(&cols, blocks, 10);
        let l = SolverConfig::default().lambda_for(&d);
        assert!((l - (2.0f64 / 6.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn path_following_matches_admm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let cols = random_cols(&mut rng, 12, 30);
            let d = dict_from(&cols, singletons(30), 12);
            let raw: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = ImageVector::new((12, 1), raw).unwrap().normalized().unwrap();
            let fast = solve_l1_bpdn(&u, &d, &SolverConfig::default()).unwrap();
            let slow_cfg = SolverConfig { record_trace: true, ..Default::default() };
            let slow = solve_l1_bpdn(&u, &d, &slow_cfg).unwrap();
            assert!(fast.exact);
            assert!((fast.final_residual - 0.05).abs() < 1e-9);
            assert!(fast.objective <= slow.objective + 1e-6, "{} {}", fast.objective, slow.objective);
            assert!((fast.objective - slow.objective).abs() < 1e-4 * slow.objective);
        }
    }

    #[test]
    fn feasibility_and_kkt_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let cols = random_cols(&mut rng, 10, 16);
            let d = dict_from(&cols, singletons(16), 10);
            let u = ImageVector::from_dvector(
                (10, 1),
                DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0)),
            )
            .unwrap()
            .normalized()
            .unwrap();
            let cfg = SolverConfig { epsilon: 0.1, ..Default::default() };
            let rep = solve_l1_bpdn(&u, &d, &cfg).unwrap();
            assert!(rep.final_residual <= 0.1 + 1e-6);
            let w = &rep.coefficients.values;
            let r = u.data() - d.atoms() * w;
            let corr = d.atoms().tr_mul(&r);
            let scale = corr.amax();
            let tol = 1e-6;
            for j in 0..16 {
                if w[j].abs() > 10.0 * tol {
                    assert!((corr[j].abs() - scale).abs() <= tol * scale.max(1.0), "active {j}");
                    assert!(corr[j].signum() == w[j].signum());
                } else {
                    assert!(corr[j].abs() <= scale + tol);
                }
            }
        }
    }

    #[test]
    fn negation_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cols = random_cols(&mut rng, 8, 12);
        let blocks = vec![
            Block::new("a", BlockKind::Face, 0..4),
            Block::new("b", BlockKind::Face, 4..8),
            Block::new("c", BlockKind::Occlusion, 8..12),
        ];
        let d = dict_from(&cols, blocks, 8);
        let u = ImageVector::from_dvector((8, 1), d.column(2) * 0.8 + d.column(9) * 0.4)
            .unwrap()
            .normalized()
            .unwrap();
        let neg = ImageVector::from_dvector((8, 1), -u.data()).unwrap();
        let cfg = SolverConfig { epsilon: 0.05, ..Default::default() };
        for solve in [solve_l1_bpdn, solve_group_bpdn] {
            let p = solve(&u, &d, &cfg).unwrap();
            let n = solve(&neg, &d, &cfg).unwrap();
            assert!((p.objective - n.objective).abs() <= 1e-6 * p.objective.max(1.0));
        }
    }

    #[test]
    fn augmented_lagrangian_sweeps_never_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cols = random_cols(&mut rng, 12, 20);
        let blocks: Vec<Block> = (0..5)
            .map(|b| Block::new(format!("g{b}"), BlockKind::Face, 4 * b..4 * b + 4))
            .collect();
        let d = dict_from(&cols, blocks, 12);
        let u = ImageVector::from_dvector((12, 1), d.column(3) + d.column(17) * 0.5)
            .unwrap()
            .normalized()
            .unwrap();
        let cfg = SolverConfig { epsilon: 0.05, record_trace: true, ..Default::default() };
        for solve in [solve_l1_bpdn, solve_group_bpdn] {
            let rep = solve(&u, &d, &cfg).unwrap();
            assert!(!rep.trace.is_empty());
            for (before, after) in &rep.trace {
                assert!(after <= &(before + cfg.tol), "{before} -> {after}");
            }
        }
    }

    #[test]
    fn q_inf_group_solver_is_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cols = random_cols(&mut rng, 10, 9);
        let blocks: Vec<Block> = (0..3)
            .map(|b| Block::new(format!("g{b}"), BlockKind::Face, 3 * b..3 * b + 3))
            .collect();
        let d = dict_from(&cols, blocks, 10);
        let u = ImageVector::from_dvector((10, 1), d.column(4) + d.column(5))
            .unwrap()
            .normalized()
            .unwrap();
        let cfg = SolverConfig { epsilon: 0.05, q_norm: f64::INFINITY, ..Default::default() };
        let rep = solve_group_bpdn(&u, &d, &cfg).unwrap();
        assert!(rep.final_residual <= 0.05 + 1e-6);
    }

    #[test]
    fn project_l1_ball_matches_definition() {
        let p = project_l1_ball(&[3.0, -1.0, 0.5], 2.0);
        assert!((p.iter().map(|v| v.abs()).sum::<f64>() - 2.0).abs() < 1e-12);
        assert_eq!(project_l1_ball(&[0.5, -0.5], 2.0), vec![0.5, -0.5]);
    }

    #[test]
    fn l1_error_perfect_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cols = random_cols(&mut rng, 30, 3);
        let d = dict_from(&cols, vec![Block::new("s", BlockKind::Face, 0..3)], 30);
        let x = DVector::from_vec(vec![0.3, -0.2, 0.7]);
        let u = ImageVector::from_dvector((30, 1), d.atoms() * &x).unwrap();
        let fit = solve_l1_error(&u, &d).unwrap();
        assert!(fit.e.amax() < 1e-8);
        assert!((&fit.x - &x).amax() < 1e-8);
        let recon = d.atoms() * &fit.x + &fit.e;
        assert!((recon - u.data()).amax() < 1e-12);
    }

    #[test]
    fn l1_error_flags_rank_deficiency() {
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let d = dict_from(&[c.clone(), c.clone()], vec![Block::new("s", BlockKind::Face, 0..2)], 4);
        let u = ImageVector::from_dvector((4, 1), &c * 0.1).unwrap();
        let fit = solve_l1_error(&u, &d).unwrap();
        assert!(fit.rank_deficient);
        assert!(fit.e.amax() < 1e-8);
    }
}
