//! Occlusion mask estimation.
//!
//! Alternates a least-absolute-deviation fit of the image on the currently
//! non-occluded pixels with a binary MRF update of the support, solved
//! exactly by one s-t minimum cut per iteration.

use std::path::Path;

use nalgebra::DVector;

use crate::error::{Result, SocError};
use crate::io::write_pgm_scaled;
use crate::maxflow::FlowGraph;
use crate::model::{BlockKind, BlockedDictionary, ImageVector, OcclusionMask};
use crate::solvers::lad_fit;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Neighborhood {
    Four,
    Eight,
}

/// Pairwise smoothness term of the support MRF (z = 1 is non-occluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairwiseModel {
    /// `β·z_i·z_j`: rewards only neighbouring non-occluded pairs.
    Cooccurrence,
    /// `β·[z_i = z_j]`: rewards agreeing neighbours of either label.
    Potts,
}

#[derive(Clone, Debug)]
pub struct MaskEstimatorConfig {
    pub h: usize,
    pub beta: f64,
    pub tau_schedule: Vec<f64>,
    pub max_outer_iters: usize,
    pub neighborhood: Neighborhood,
    pub pairwise: PairwiseModel,
    /// Minimum fraction of non-occluded pixels before giving up.
    pub degeneracy_floor: f64,
}

impl Default for MaskEstimatorConfig {
    fn default() -> Self {
        Self {
            h: 20,
            beta: 20.0,
            tau_schedule: default_tau_schedule(),
            max_outer_iters: 20,
            neighborhood: Neighborhood::Four,
            pairwise: PairwiseModel::Potts,
            degeneracy_floor: 0.05,
        }
    }
}

/// 0.005 down to 0.002 in steps of 0.0005.
pub fn default_tau_schedule() -> Vec<f64> {
    (0..7).map(|k| (50 - 5 * k) as f64 * 1e-4).collect()
}

impl MaskEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SocError::InvalidConfig(m.to_string()));
        if self.h < 1 {
            return bad("h must be >= 1");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if self.tau_schedule.is_empty() {
            return bad("tau schedule is empty");
        }
        if self.tau_schedule.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("tau values must lie in (0, 1)");
        }
        if self.tau_schedule.windows(2).any(|w| w[1] >= w[0]) {
            return bad("tau schedule must be strictly decreasing");
        }
        if self.max_outer_iters < 1 {
            return bad("max_outer_iters must be >= 1");
        }
        if !(0.0..1.0).contains(&self.degeneracy_floor) {
            return bad("degeneracy floor must be in [0, 1)");
        }
        Ok(())
    }

    fn tau_at(&self, t: usize) -> f64 {
        self.tau_schedule[t.min(self.tau_schedule.len() - 1)]
    }
}

#[derive(Clone, Debug)]
pub struct MaskEstimate {
    pub mask: OcclusionMask,
    /// Final error, zero on non-occluded pixels.
    pub pattern: ImageVector,
    pub iterations: usize,
    /// MRF objective of each new support under the error it was computed from.
    pub energy_trace: Vec<f64>,
    /// `(previous support, new support)` objectives under the same error.
    pub energy_steps: Vec<(f64, f64)>,
    /// τ used at each iteration.
    pub taus: Vec<f64>,
    pub rank_deficient: bool,
}

/// Columns of `dict` with the `h` largest signed inner products with `u`.
pub fn build_lcd(u: &ImageVector, dict: &BlockedDictionary, h: usize) -> Result<BlockedDictionary> {
    let n = dict.n();
    if h < 1 || h > n {
        return Err(SocError::BadH { h, n });
    }
    if u.len() != dict.m() {
        return Err(SocError::DimMismatch {
            expected: dict.m(),
            got: u.len(),
        });
    }
    let psi = dict.atoms().tr_mul(u.data());
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal scores keep ascending column order
    order.sort_by(|&a, &b| psi[b].total_cmp(&psi[a]));
    order.truncate(h);
    dict.select_columns(&order, "lcd", BlockKind::Face)
}

/// `log p(e | z)` of the support model.
pub fn log_likelihood(e: f64, z: u8, tau: f64) -> f64 {
    let small = e.abs() <= tau;
    match (z, small) {
        (1, true) => -tau.ln(),
        (1, false) => tau.ln(),
        (_, true) => tau.ln(),
        (_, false) => 0.0,
    }
}

fn neighbor_pairs(shape: (usize, usize), nb: Neighborhood) -> Vec<(usize, usize)> {
    let (h, w) = shape;
    let mut pairs = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                pairs.push((i, i + 1));
            }
            if r + 1 < h {
                pairs.push((i, i + w));
            }
            if nb == Neighborhood::Eight && r + 1 < h {
                if c + 1 < w {
                    pairs.push((i, i + w + 1));
                }
                if c > 0 {
                    pairs.push((i, i + w - 1));
                }
            }
        }
    }
    pairs
}

fn pair_term(model: PairwiseModel, beta: f64, a: u8, b: u8) -> f64 {
    match model {
        PairwiseModel::Cooccurrence => beta * (a * b) as f64,
        PairwiseModel::Potts => beta * (a == b) as u8 as f64,
    }
}

/// MRF objective `Σ_pairs pair(z_i, z_j) + Σ_i log p(e_i | z_i)` (to be maximized).
pub fn mrf_energy(
    e: &[f64],
    z: &[u8],
    shape: (usize, usize),
    beta: f64,
    tau: f64,
    nb: Neighborhood,
    model: PairwiseModel,
) -> f64 {
    let unary: f64 = e.iter().zip(z).map(|(&ei, &zi)| log_likelihood(ei, zi, tau)).sum();
    let pairwise: f64 = neighbor_pairs(shape, nb)
        .into_iter()
        .map(|(i, j)| pair_term(model, beta, z[i], z[j]))
        .sum();
    unary + pairwise
}

/// Global maximizer of [`mrf_energy`] by a single minimum cut.
pub fn update_support_with(
    e: &ImageVector,
    beta: f64,
    tau: f64,
    nb: Neighborhood,
    model: PairwiseModel,
) -> OcclusionMask {
    let m = e.len();
    let (s, t) = (m, m + 1);
    let mut g = FlowGraph::new(m + 2);
    // cost(z) = −(objective contribution); source side is z = 1
    let mut cost1 = vec![0.0; m];
    let mut cost0 = vec![0.0; m];
    for (i, &ei) in e.as_slice().iter().enumerate() {
        cost1[i] = -log_likelihood(ei, 1, tau);
        cost0[i] = -log_likelihood(ei, 0, tau);
    }
    for (i, j) in neighbor_pairs(e.shape(), nb) {
        match model {
            PairwiseModel::Potts => g.add_edge(i, j, beta, beta),
            PairwiseModel::Cooccurrence => {
                // −β z_i z_j = −β/2 z_i − β/2 z_j + β/2 [z_i ≠ z_j]
                g.add_edge(i, j, beta / 2.0, beta / 2.0);
                cost1[i] -= beta / 2.0;
                cost1[j] -= beta / 2.0;
            }
        }
    }
    for i in 0..m {
        let base = cost0[i].min(cost1[i]);
        // z = 0 (sink side) cuts s → i, z = 1 cuts i → t
        g.add_edge(s, i, cost0[i] - base, 0.0);
        g.add_edge(i, t, cost1[i] - base, 0.0);
    }
    g.max_flow(s, t);
    let side = g.source_side(s);
    let support = (0..m).map(|i| side[i] as u8).collect();
    OcclusionMask::new(e.shape(), support).expect("support matches the error grid")
}

/// [`update_support_with`] using the smoothness model of `cfg`.
pub fn update_support(e: &ImageVector, beta: f64, tau: f64, cfg: &MaskEstimatorConfig) -> OcclusionMask {
    update_support_with(e, beta, tau, cfg.neighborhood, cfg.pairwise)
}

/// Estimates the occlusion mask of `u` against `basis`.
pub fn estimate_mask(
    u: &ImageVector,
    basis: &BlockedDictionary,
    cfg: &MaskEstimatorConfig,
) -> Result<MaskEstimate> {
    estimate_mask_debug(u, basis, cfg, None)
}

/// As [`estimate_mask`], optionally writing `|e|` and `z` per iteration as PGM files.
pub fn estimate_mask_debug(
    u: &ImageVector,
    basis: &BlockedDictionary,
    cfg: &MaskEstimatorConfig,
    debug_dir: Option<&Path>,
) -> Result<MaskEstimate> {
    cfg.validate()?;
    let m = u.len();
    if m != basis.m() {
        return Err(SocError::DimMismatch {
            expected: basis.m(),
            got: m,
        });
    }
    let shape = u.shape();
    let floor = (cfg.degeneracy_floor * m as f64).ceil() as usize;
    let d = basis.atoms();
    let uv = u.data();

    let mut z = OcclusionMask::all_ones(shape);
    let mut x: Option<DVector<f64>> = None;
    let mut e = uv.clone();
    let mut fitted_on: Option<Vec<u8>> = None;
    let mut rank_deficient = false;
    let mut energy_trace = Vec::new();
    let mut energy_steps = Vec::new();
    let mut taus = Vec::new();
    let mut iterations = 0;

    for t in 0..cfg.max_outer_iters {
        iterations = t + 1;
        if z.non_occluded() < floor.max(1) {
            return Err(SocError::Degenerate(format!(
                "{} of {} pixels left unoccluded",
                z.non_occluded(),
                m
            )));
        }
        if fitted_on.as_deref() != Some(z.support()) {
            let rows: Vec<usize> = (0..m).filter(|&i| z.support()[i] == 1).collect();
            let dr = d.select_rows(&rows);
            let ur = uv.select_rows(&rows);
            let fit = lad_fit(&dr, &ur, x.as_ref());
            rank_deficient |= fit.rank_deficient;
            e = uv - d * &fit.x;
            x = Some(fit.x);
            fitted_on = Some(z.support().to_vec());
        }
        let tau = cfg.tau_at(t);
        taus.push(tau);
        let ev = ImageVector::from_dvector(shape, e.clone())?;
        let z_new = update_support(&ev, cfg.beta, tau, cfg);
        let energy = |zz: &OcclusionMask| {
            mrf_energy(e.as_slice(), zz.support(), shape, cfg.beta, tau, cfg.neighborhood, cfg.pairwise)
        };
        let (before, after) = (energy(&z), energy(&z_new));
        energy_steps.push((before, after));
        energy_trace.push(after);
        if let Some(dir) = debug_dir {
            let abs: Vec<f64> = e.iter().map(|v| v.abs()).collect();
            write_pgm_scaled(dir.join(format!("iter{:02}_error.pgm", t + 1)), shape, &abs)?;
            write_pgm_scaled(
                dir.join(format!("iter{:02}_mask.pgm", t + 1)),
                shape,
                &z_new.support().iter().map(|&v| v as f64).collect::<Vec<_>>(),
            )?;
        }
        let unchanged = z_new == z;
        z = z_new;
        if unchanged && t + 1 >= cfg.tau_schedule.len() {
            break;
        }
    }
    if z.non_occluded() < floor.max(1) {
        return Err(SocError::Degenerate(format!(
            "{} of {} pixels left unoccluded",
            z.non_occluded(),
            m
        )));
    }
    // refit on the final support so the pattern matches the returned mask
    if fitted_on.as_deref() != Some(z.support()) {
        let rows: Vec<usize> = (0..m).filter(|&i| z.support()[i] == 1).collect();
        let fit = lad_fit(&d.select_rows(&rows), &uv.select_rows(&rows), x.as_ref());
        rank_deficient |= fit.rank_deficient;
        e = uv - d * &fit.x;
    }
    for (v, &zi) in e.iter_mut().zip(z.support()) {
        if zi == 1 {
            *v = 0.0;
        }
    }
    Ok(MaskEstimate {
        mask: z,
        pattern: ImageVector::from_dvector(shape, e)?,
        iterations,
        energy_trace,
        energy_steps,
        taus,
        rank_deficient,
    })
}

/// The estimated occlusion pattern, unit-normalized.
pub fn extract_pattern(
    u: &ImageVector,
    basis: &BlockedDictionary,
    est: &MaskEstimate,
) -> Result<ImageVector> {
    if u.len() != basis.m() || est.mask.len() != u.len() {
        return Err(SocError::DimMismatch {
            expected: basis.m(),
            got: u.len(),
        });
    }
    if est.mask.occluded() == 0 {
        return Err(SocError::ZeroPattern);
    }
    est.pattern.normalized().map_err(|_| SocError::ZeroPattern)
}
