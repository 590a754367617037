//! Occlusion sample collection and K-SVD compression.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SocError};
use crate::mask::{build_lcd, estimate_mask_debug, extract_pattern, MaskEstimatorConfig};
use crate::model::{Block, BlockKind, BlockedDictionary, ImageVector};
use crate::linalg::{column_basis, lstsq, top_singular};
use crate::solvers::{lasso, SolverConfig};

/// Samples with a norm below this are dropped.
pub const MIN_SAMPLE_NORM: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Soc,
    Ssrc,
    Esrc,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Soc => "soc",
            Strategy::Ssrc => "ssrc",
            Strategy::Esrc => "esrc",
        })
    }
}

impl FromStr for Strategy {
    type Err = SocError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soc" => Ok(Strategy::Soc),
            "ssrc" => Ok(Strategy::Ssrc),
            "esrc" => Ok(Strategy::Esrc),
            other => Err(SocError::InvalidConfig(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OcclusionSampleSet {
    /// One unit-norm sample per column.
    pub samples: DMatrix<f64>,
    pub shape: (usize, usize),
    pub category: String,
    pub strategy: Strategy,
    pub labeled: bool,
}

impl OcclusionSampleSet {
    /// Normalizes the patterns, dropping near-zero ones with a warning.
    pub fn from_patterns(
        shape: (usize, usize),
        patterns: &[DVector<f64>],
        category: impl Into<String>,
        strategy: Strategy,
        labeled: bool,
    ) -> Result<Self> {
        let m = shape.0 * shape.1;
        let mut cols = Vec::with_capacity(patterns.len());
        for (k, p) in patterns.iter().enumerate() {
            if p.len() != m {
                return Err(SocError::DimMismatch {
                    expected: m,
                    got: p.len(),
                });
            }
            let n = p.norm();
            if n < MIN_SAMPLE_NORM {
                log::warn!("dropping near-zero occlusion sample {k}");
                continue;
            }
            cols.push(p / n);
        }
        if cols.is_empty() {
            return Err(SocError::EmptySamples);
        }
        Ok(Self {
            samples: DMatrix::from_columns(&cols),
            shape,
            category: category.into(),
            strategy,
            labeled,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }
}

fn normalized_input(u: &ImageVector) -> Result<ImageVector> {
    if u.is_normalized() {
        Ok(u.clone())
    } else {
        u.normalized()
    }
}

fn pattern_or_zero(v: DVector<f64>, shape: (usize, usize)) -> Result<ImageVector> {
    if v.norm() < MIN_SAMPLE_NORM {
        return Err(SocError::ZeroPattern);
    }
    ImageVector::from_dvector(shape, &v / v.norm())
}

/// Mask-based occlusion pattern: labeled sub-dictionary when `label` is given,
/// otherwise the locality dictionary of `u`.
pub fn collect_soc(
    u: &ImageVector,
    dict: &BlockedDictionary,
    label: Option<&str>,
    cfg: &MaskEstimatorConfig,
) -> Result<ImageVector> {
    collect_soc_debug(u, dict, label, cfg, None)
}

pub fn collect_soc_debug(
    u: &ImageVector,
    dict: &BlockedDictionary,
    label: Option<&str>,
    cfg: &MaskEstimatorConfig,
    debug_dir: Option<&std::path::Path>,
) -> Result<ImageVector> {
    let u = normalized_input(u)?;
    let basis = match label {
        Some(l) => dict.sub_dictionary(l)?,
        None => {
            let faces: Vec<usize> = dict.face_blocks().flat_map(|b| b.range.clone()).collect();
            let face_dict = dict.select_columns(&faces, "faces", BlockKind::Face)?;
            build_lcd(&u, &face_dict, cfg.h)?
        }
    };
    let est = estimate_mask_debug(&u, &basis, cfg, debug_dir)?;
    extract_pattern(&u, &basis, &est)
}

/// `u − P u` for the orthogonal projector `P` onto the span of `sub`.
pub fn ssrc_residual(u: &ImageVector, sub: &BlockedDictionary) -> Result<(DVector<f64>, bool)> {
    if u.len() != sub.m() {
        return Err(SocError::DimMismatch {
            expected: sub.m(),
            got: u.len(),
        });
    }
    let a = sub.atoms();
    let q = column_basis(a);
    let deficient = q.ncols() < a.ncols();
    if deficient {
        log::warn!("projection basis is rank deficient; using the pseudo-inverse");
    }
    let proj = &q * q.tr_mul(u.data());
    Ok((u.data() - proj, deficient))
}

/// Normalized projection residual of `u` onto the span of `sub`.
pub fn collect_ssrc(u: &ImageVector, sub: &BlockedDictionary) -> Result<ImageVector> {
    let u = normalized_input(u)?;
    let (r, _) = ssrc_residual(&u, sub)?;
    pattern_or_zero(r, u.shape())
}

/// Normalized difference between `u` and the column centroid of `sub`.
pub fn collect_esrc(u: &ImageVector, sub: &BlockedDictionary) -> Result<ImageVector> {
    if u.len() != sub.m() {
        return Err(SocError::DimMismatch {
            expected: sub.m(),
            got: u.len(),
        });
    }
    if sub.n() == 0 {
        return Err(SocError::InvalidDictionary("empty dictionary".into()));
    }
    let u = normalized_input(u)?;
    let centroid = sub.atoms().column_mean();
    pattern_or_zero(u.data() - centroid, u.shape())
}

#[derive(Clone, Debug)]
pub struct KsvdConfig {
    pub atom_count: usize,
    pub sparsity_budget: usize,
    pub iterations: usize,
    pub seed: u64,
    /// l1 weight of the coding step relative to `‖Bᵀs‖∞`.
    pub code_penalty: f64,
}

impl Default for KsvdConfig {
    fn default() -> Self {
        Self {
            atom_count: 30,
            sparsity_budget: 5,
            iterations: 20,
            seed: 1,
            code_penalty: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KsvdResult {
    pub dictionary: BlockedDictionary,
    /// `‖S − B X‖_F` after initial coding, then after each iteration.
    pub error_trace: Vec<f64>,
    pub codes: DMatrix<f64>,
}

fn sign_fix(mut atom: DVector<f64>) -> (DVector<f64>, f64) {
    let imax = atom.iamax();
    if atom[imax] < 0.0 {
        atom.neg_mut();
        (atom, -1.0)
    } else {
        (atom, 1.0)
    }
}

/// Sparse code of `s` over `b`: l1-penalized coding, the `budget` largest
/// coefficients refit by least squares.
fn code_sample(b: &DMatrix<f64>, s: &DVector<f64>, budget: usize, penalty: f64) -> DVector<f64> {
    let n = b.ncols();
    let corr = b.tr_mul(s);
    let mu = penalty * corr.amax();
    let solver = SolverConfig {
        max_iters: 500,
        tol: 1e-6,
        ..Default::default()
    };
    let w = if mu > 0.0 {
        lasso(b, s, mu, &solver)
    } else {
        DVector::zeros(n)
    };
    let wmax = w.amax();
    let mut idx: Vec<usize> = (0..n).filter(|&j| w[j].abs() > 1e-9 * wmax).collect();
    if idx.is_empty() {
        idx.push(corr.iamax());
    }
    idx.sort_by(|&i, &j| w[j].abs().total_cmp(&w[i].abs()).then(i.cmp(&j)));
    idx.truncate(budget.min(b.nrows()));
    idx.sort_unstable();
    let x = lstsq(&b.select_columns(&idx), s);
    let mut code = DVector::zeros(n);
    for (k, &j) in idx.iter().enumerate() {
        code[j] = x[k];
    }
    code
}

/// Compresses a sample set into `atom_count` unit-norm occlusion atoms.
pub fn ksvd_train(set: &OcclusionSampleSet, cfg: &KsvdConfig) -> Result<KsvdResult> {
    let p = set.len();
    if p == 0 {
        return Err(SocError::EmptySamples);
    }
    if cfg.atom_count < 1 || cfg.atom_count > p {
        return Err(SocError::InvalidConfig(format!(
            "atom_count {} must be in 1..={p}",
            cfg.atom_count
        )));
    }
    if cfg.sparsity_budget < 1 {
        return Err(SocError::InvalidConfig("sparsity_budget must be >= 1".into()));
    }
    let s = &set.samples;
    let (m, k) = (s.nrows(), cfg.atom_count);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init: Vec<usize> = sample(&mut rng, p, k).into_vec();
    init.sort_unstable();
    let mut b = DMatrix::zeros(m, k);
    for (j, &i) in init.iter().enumerate() {
        b.set_column(j, &sign_fix(s.column(i).into_owned()).0);
    }

    let mut x = DMatrix::zeros(k, p);
    let frob = |b: &DMatrix<f64>, x: &DMatrix<f64>| (s - b * x).norm();
    let coding_pass = |b: &DMatrix<f64>, x: &mut DMatrix<f64>| {
        for i in 0..p {
            let si = s.column(i).into_owned();
            let cur = (&si - b * x.column(i)).norm();
            let cand = code_sample(b, &si, cfg.sparsity_budget, cfg.code_penalty);
            if (&si - b * &cand).norm() <= cur {
                x.set_column(i, &cand);
            }
        }
    };
    coding_pass(&b, &mut x);
    let mut trace = vec![frob(&b, &x)];

    for _ in 0..cfg.iterations {
        for j in 0..k {
            let users: Vec<usize> = (0..p).filter(|&i| x[(j, i)] != 0.0).collect();
            if users.is_empty() {
                // dead atom: replace by the worst-represented sample
                let resid = s - &b * &x;
                let worst = (0..p)
                    .max_by(|&a, &c| {
                        resid.column(a).norm().total_cmp(&resid.column(c).norm()).then(c.cmp(&a))
                    })
                    .expect("p >= 1");
                let col = resid.column(worst).into_owned();
                let cand = if col.norm() > MIN_SAMPLE_NORM {
                    col.normalize()
                } else {
                    s.column(worst).into_owned()
                };
                b.set_column(j, &sign_fix(cand).0);
                continue;
            }
            // error without atom j on the samples that use it
            let mut e = DMatrix::zeros(m, users.len());
            let mut old = DVector::zeros(users.len());
            for (c, &i) in users.iter().enumerate() {
                let col = s.column(i) - &b * x.column(i) + b.column(j) * x[(j, i)];
                e.set_column(c, &col);
                old[c] = x[(j, i)];
            }
            let old_err = (&e - b.column(j) * old.transpose()).norm_squared();
            let (sigma, u1, v1) = top_singular(&e);
            let new_err = e.norm_squared() - sigma * sigma;
            if sigma > 0.0 && new_err <= old_err {
                let (atom, sign) = sign_fix(u1);
                b.set_column(j, &atom);
                for (c, &i) in users.iter().enumerate() {
                    x[(j, i)] = sign * sigma * v1[c];
                }
            }
        }
        coding_pass(&b, &mut x);
        trace.push(frob(&b, &x));
    }

    let dictionary = BlockedDictionary::new(
        b,
        vec![Block::new(set.category.clone(), BlockKind::Occlusion, 0..k)],
        set.shape,
    )?;
    Ok(KsvdResult {
        dictionary,
        error_trace: trace,
        codes: x,
    })
}

/// Eigenvalues of the sample Gram matrix `SᵀS`, descending.
pub fn spectrum(set: &OcclusionSampleSet) -> Vec<f64> {
    let gram = set.samples.tr_mul(&set.samples);
    let mut ev: Vec<f64> = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, m: usize) -> DVector<f64> {
        DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0))
    }

    fn dict(cols: &[DVector<f64>], m: usize) -> BlockedDictionary {
        BlockedDictionary::from_columns(
            (m, 1),
            cols,
            vec![Block::new("s", BlockKind::Face, 0..cols.len())],
        )
        .unwrap()
    }

    #[test]
    fn ssrc_examples() {
        let e = |i: usize| DVector::from_fn(4, |r, _| (r == i) as u8 as f64);
        let sub = dict(&[e(0), e(1)], 4);
        let inside = ImageVector::from_dvector((4, 1), e(0) * 0.6 + e(1) * 0.8).unwrap();
        assert!(matches!(collect_ssrc(&inside, &sub), Err(SocError::ZeroPattern)));
        let perp = ImageVector::from_dvector((4, 1), e(2) * 0.6 + e(3) * 0.8).unwrap();
        let out = collect_ssrc(&perp, &sub).unwrap();
        assert!((out.data() - perp.data()).amax() < 1e-12);
    }

    #[test]
    fn ssrc_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cols: Vec<_> = (0..3).map(|_| rand_vec(&mut rng, 10)).collect();
        let sub = dict(&cols, 10);
        let u = ImageVector::from_dvector((10, 1), rand_vec(&mut rng, 10))
            .unwrap()
            .normalized()
            .unwrap();
        let a = sub.atoms();
        let x = (a.tr_mul(a)).try_inverse().unwrap() * a.tr_mul(u.data());
        let oracle = u.data() - a * x;
        let (r, deficient) = ssrc_residual(&u, &sub).unwrap();
        assert!(!deficient);
        assert!((&r - &oracle).amax() < 1e-10);
        assert!(a.tr_mul(&r).amax() < 1e-8);
        let out = collect_ssrc(&u, &sub).unwrap();
        assert!((out.data() - oracle.normalize()).amax() < 1e-10);
    }

    #[test]
    fn ssrc_rank_deficient_falls_back() {
        let c = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        let sub = dict(&[c.clone(), c.clone()], 3);
        let u = ImageVector::new((3, 1), vec![1.0, 0.0, 0.0]).unwrap();
        let (r, deficient) = ssrc_residual(&u, &sub).unwrap();
        assert!(deficient);
        assert!((r - DVector::from_vec(vec![0.5, -0.5, 0.0])).amax() < 1e-12);
    }

    #[test]
    fn esrc_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = rand_vec(&mut rng, 6).normalize();
        let sub = dict(std::slice::from_ref(&d), 6);
        let u = ImageVector::from_dvector((6, 1), rand_vec(&mut rng, 6)).unwrap().normalized().unwrap();
        let out = collect_esrc(&u, &sub).unwrap();
        assert!((out.data() - (u.data() - &d).normalize()).amax() < 1e-12);

        let at_centroid = ImageVector::from_dvector((6, 1), d.clone()).unwrap();
        assert!(matches!(collect_esrc(&at_centroid, &sub), Err(SocError::ZeroPattern)));

        let cols: Vec<_> = (0..4).map(|_| rand_vec(&mut rng, 6)).collect();
        let sub = dict(&cols, 6);
        let centroid = sub.atoms().column_sum() / 4.0;
        let out = collect_esrc(&u, &sub).unwrap();
        assert!((out.data() - (u.data() - centroid).normalize()).amax() < 1e-12);
    }

    fn set_from(cols: &[DVector<f64>], m: usize) -> OcclusionSampleSet {
        OcclusionSampleSet::from_patterns((m, 1), cols, "occ", Strategy::Soc, true).unwrap()
    }

    #[test]
    fn sample_set_drops_zero_patterns() {
        let v = DVector::from_vec(vec![3.0, 4.0]);
        let set = set_from(&[v.clone(), DVector::zeros(2), v * 2.0], 2);
        assert_eq!(set.len(), 2);
        for c in set.samples.column_iter() {
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            OcclusionSampleSet::from_patterns((2, 1), &[DVector::zeros(2)], "x", Strategy::Esrc, false),
            Err(SocError::EmptySamples)
        ));
    }

    #[test]
    fn ksvd_rank_one_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = rand_vec(&mut rng, 12).normalize();
        let set = set_from(&vec![v.clone(); 30], 12);
        let cfg = KsvdConfig { atom_count: 1, iterations: 5, ..Default::default() };
        let res = ksvd_train(&set, &cfg).unwrap();
        let atom = res.dictionary.column(0);
        assert!((atom.dot(&v).abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ksvd_two_orthogonal_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_vec(&mut rng, 10).normalize();
        let mut b = rand_vec(&mut rng, 10);
        b -= &a * a.dot(&b);
        let b = b.normalize();
        let cols: Vec<_> = (0..20)
            .map(|i| if i % 2 == 0 { a.clone() * (1.0 + i as f64) } else { -b.clone() })
            .collect();
        let set = set_from(&cols, 10);
        let cfg = KsvdConfig { atom_count: 2, sparsity_budget: 1, iterations: 10, ..Default::default() };
        let res = ksvd_train(&set, &cfg).unwrap();
        let d = res.dictionary.atoms();
        for dir in [&a, &b] {
            let best = (0..2).map(|j| d.column(j).dot(dir).abs()).fold(0.0, f64::max);
            assert!((best - 1.0).abs() < 1e-10);
        }
        assert!(*res.error_trace.last().unwrap() < 1e-8);
    }

    #[test]
    fn ksvd_monotone_reproducible_unit_atoms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let basis: Vec<_> = (0..6).map(|_| rand_vec(&mut rng, 40)).collect();
        let cols: Vec<_> = (0..60)
            .map(|_| {
                let mut v = rand_vec(&mut rng, 40) * 0.05;
                for b in &basis {
                    v += b * rng.random_range(-1.0..1.0);
                }
                v
            })
            .collect();
        let set = set_from(&cols, 40);
        let cfg = KsvdConfig { atom_count: 30, iterations: 20, ..Default::default() };
        let r1 = ksvd_train(&set, &cfg).unwrap();
        let r2 = ksvd_train(&set, &cfg).unwrap();
        assert_eq!(r1.dictionary.atoms(), r2.dictionary.atoms());
        assert_eq!(r1.error_trace, r2.error_trace);
        assert_eq!(r1.error_trace.len(), 21);
        for w in r1.error_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        assert_eq!(r1.dictionary.n(), 30);
        for c in r1.dictionary.atoms().column_iter() {
            assert!((c.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ksvd_full_size_zero_iterations_returns_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cols: Vec<_> = (0..5).map(|_| rand_vec(&mut rng, 8)).collect();
        let set = set_from(&cols, 8);
        let cfg = KsvdConfig { atom_count: 5, iterations: 0, ..Default::default() };
        let res = ksvd_train(&set, &cfg).unwrap();
        for j in 0..5 {
            let (want, _) = sign_fix(set.samples.column(j).into_owned());
            assert!((res.dictionary.column(j) - want).amax() < 1e-12);
        }
    }

    #[test]
    fn ksvd_rejects_bad_sizes() {
        let set = set_from(&[DVector::from_vec(vec![1.0, 0.0])], 2);
        let cfg = KsvdConfig { atom_count: 2, ..Default::default() };
        assert!(matches!(ksvd_train(&set, &cfg), Err(SocError::InvalidConfig(_))));
    }

    /// Cyclic Jacobi eigenvalue iteration for symmetric matrices.
    fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
        let n = a.nrows();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)].powi(2))
                .sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[(k, p)], a[(k, q)]);
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)].max(0.0)).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    #[test]
    fn spectrum_examples() {
        let v = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let rank1 = set_from(&[v.clone(), v.clone() * 3.0, -v], 3);
        let ev = spectrum(&rank1);
        assert!((ev[0] - 3.0).abs() < 1e-12);
        assert!(ev[1..].iter().all(|e| e.abs() < 1e-12));

        let e = |i: usize| DVector::from_fn(4, |r, _| (r == i) as u8 as f64);
        let ortho = set_from(&[e(0), e(1), e(2)], 4);
        assert!(spectrum(&ortho).iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn spectrum_matches_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let basis: Vec<_> = (0..3).map(|_| rand_vec(&mut rng, 30)).collect();
        let cols: Vec<_> = (0..12)
            .map(|_| {
                let mut v = rand_vec(&mut rng, 30) * 0.01;
                for b in &basis {
                    v += b * rng.random_range(-1.0..1.0);
                }
                v
            })
            .collect();
        let set = set_from(&cols, 30);
        let ours = spectrum(&set);
        let oracle = jacobi_eigenvalues(set.samples.tr_mul(&set.samples));
        for (a, b) in ours.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(ours[3] < 0.01 * ours[2]);
    }
}
