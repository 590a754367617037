//! Compound-dictionary classification with residual-ratio rejection.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Result, SocError};
use crate::model::{
    residual, Block, BlockKind, BlockedDictionary, ClassificationOutcome, Decision, ImageVector,
    SparseCoefficients,
};
use crate::solvers::{solve_group_bpdn, solve_l1_bpdn, SolveReport, SolverConfig};

/// Label of the identity block appended by the plain SRC baseline.
pub const IDENTITY_LABEL: &str = "identity";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SparsityMode {
    L1,
    Structured,
}

impl fmt::Display for SparsityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SparsityMode::L1 => "l1",
            SparsityMode::Structured => "structured",
        })
    }
}

impl FromStr for SparsityMode {
    type Err = SocError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(SparsityMode::L1),
            "structured" | "group" => Ok(SparsityMode::Structured),
            other => Err(SocError::InvalidConfig(format!("unknown sparsity mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierConfig {
    pub sparsity_mode: SparsityMode,
    pub solver: SolverConfig,
    pub theta_face: f64,
    pub theta_occlusion: f64,
    /// SRC baseline: append an identity block as the occlusion dictionary.
    pub baseline_identity_occlusion: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            sparsity_mode: SparsityMode::Structured,
            solver: SolverConfig::default(),
            theta_face: 0.9,
            theta_occlusion: 0.9,
            baseline_identity_occlusion: false,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("theta_face", self.theta_face), ("theta_occlusion", self.theta_occlusion)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(SocError::InvalidConfig(format!("{name} must be in (0, 1]")));
            }
        }
        self.solver.validate()
    }
}

/// Stacks face dictionaries then occlusion dictionaries into `R = [D, B]`.
///
/// Block kinds are taken from the argument position, labels are kept.
pub fn build_compound(
    face_dicts: &[BlockedDictionary],
    occ_dicts: &[BlockedDictionary],
) -> Result<BlockedDictionary> {
    let first = face_dicts
        .first()
        .or(occ_dicts.first())
        .ok_or_else(|| SocError::InvalidDictionary("no dictionaries to stack".into()))?;
    let shape = first.shape();
    let m = first.m();
    let parts = face_dicts
        .iter()
        .map(|d| (d, BlockKind::Face))
        .chain(occ_dicts.iter().map(|d| (d, BlockKind::Occlusion)));
    let n: usize = face_dicts.iter().chain(occ_dicts).map(BlockedDictionary::n).sum();
    let mut atoms = DMatrix::zeros(m, n);
    let mut blocks = Vec::new();
    let mut at = 0;
    for (d, kind) in parts {
        if d.m() != m {
            return Err(SocError::DimMismatch {
                expected: m,
                got: d.m(),
            });
        }
        atoms.columns_mut(at, d.n()).copy_from(d.atoms());
        for b in d.blocks() {
            blocks.push(Block::new(
                b.label.clone(),
                kind,
                at + b.range.start..at + b.range.end,
            ));
        }
        at += d.n();
    }
    BlockedDictionary::new(atoms, blocks, shape)
}

/// Residual distribution index `k · min r / Σ r`.
pub fn rdi(residuals: &[f64]) -> Result<f64> {
    if residuals.len() < 2 {
        return Err(SocError::Degenerate(format!(
            "RDI needs at least two residuals, got {}",
            residuals.len()
        )));
    }
    if residuals.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(SocError::InvalidConfig("residuals must be finite and >= 0".into()));
    }
    let sum: f64 = residuals.iter().sum();
    if sum == 0.0 {
        return Err(SocError::Degenerate("all residuals are zero".into()));
    }
    let min = residuals.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((residuals.len() as f64 * min / sum).min(1.0))
}

/// Index of the smallest value; ties go to the lowest index.
fn argmin(values: &[(String, f64)]) -> usize {
    let mut best = 0;
    for (i, (_, r)) in values.iter().enumerate() {
        if *r < values[best].1 {
            best = i;
        }
    }
    best
}

/// RDI used for decisions. All-equal residuals (including all zero) count as uniform.
fn decision_rdi(res: &[(String, f64)]) -> f64 {
    let r: Vec<f64> = res.iter().map(|(_, r)| *r).collect();
    rdi(&r).unwrap_or(1.0)
}

fn code(u: &ImageVector, r: &BlockedDictionary, cfg: &ClassifierConfig) -> Result<SolveReport> {
    match cfg.sparsity_mode {
        SparsityMode::L1 => solve_l1_bpdn(u, r, &cfg.solver),
        SparsityMode::Structured => solve_group_bpdn(u, r, &cfg.solver),
    }
}

/// Face and occlusion residuals for a code over `r`.
///
/// Face residuals keep one face block plus every occlusion block, occlusion
/// residuals keep one occlusion block plus every face block.
pub fn class_residuals(
    u: &ImageVector,
    r: &BlockedDictionary,
    coef: &SparseCoefficients,
) -> Result<(Vec<(String, f64)>, Vec<(String, f64)>)> {
    let faces: Vec<&str> = r.face_blocks().map(|b| b.label.as_str()).collect();
    let occs: Vec<&str> = r.occlusion_blocks().map(|b| b.label.as_str()).collect();
    let mut face_res = Vec::with_capacity(faces.len());
    for f in &faces {
        let mut keep = occs.clone();
        keep.push(f);
        face_res.push((f.to_string(), residual(u, r, coef, &keep)?));
    }
    let mut occ_res = Vec::with_capacity(occs.len());
    for o in &occs {
        let mut keep = faces.clone();
        keep.push(o);
        occ_res.push((o.to_string(), residual(u, r, coef, &keep)?));
    }
    Ok((face_res, occ_res))
}

/// Labels from residuals, with RDI rejection.
pub fn decide(
    face_res: Vec<(String, f64)>,
    occ_res: Vec<(String, f64)>,
    coefficients: SparseCoefficients,
    cfg: &ClassifierConfig,
) -> ClassificationOutcome {
    let face_argmin = face_res[argmin(&face_res)].0.clone();
    // a single face class cannot be rejected by a ratio test
    let rdi_face = if face_res.len() >= 2 {
        decision_rdi(&face_res)
    } else {
        0.0
    };
    let face_label = if rdi_face > cfg.theta_face {
        Decision::Rejected
    } else {
        Decision::Label(face_argmin.clone())
    };
    let occlusion_argmin = (!occ_res.is_empty()).then(|| occ_res[argmin(&occ_res)].0.clone());
    let (occlusion_label, rdi_occlusion) = if occ_res.len() >= 2 {
        let v = decision_rdi(&occ_res);
        let label = if v > cfg.theta_occlusion {
            Decision::Rejected
        } else {
            Decision::Label(occlusion_argmin.clone().unwrap_or_default())
        };
        (label, Some(v))
    } else {
        (Decision::NotApplicable, None)
    };
    ClassificationOutcome {
        face_label,
        occlusion_label,
        face_argmin,
        occlusion_argmin,
        face_residuals: face_res,
        occlusion_residuals: occ_res,
        rdi_face,
        rdi_occlusion,
        coefficients,
    }
}

fn check_input(u: &ImageVector, r: &BlockedDictionary) -> Result<()> {
    if r.face_blocks().next().is_none() {
        return Err(SocError::InvalidDictionary("dictionary has no face blocks".into()));
    }
    if u.len() != r.m() {
        return Err(SocError::DimMismatch {
            expected: r.m(),
            got: u.len(),
        });
    }
    if !u.is_normalized() {
        return Err(SocError::InvalidImage("test vector must have unit norm".into()));
    }
    Ok(())
}

/// Codes `u` over the compound dictionary and labels face and occlusion.
pub fn classify(
    u: &ImageVector,
    r: &BlockedDictionary,
    cfg: &ClassifierConfig,
) -> Result<ClassificationOutcome> {
    cfg.validate()?;
    check_input(u, r)?;
    let report = code(u, r, cfg)?;
    if !report.converged {
        log::debug!("solver stopped after {} iterations without converging", report.iterations);
    }
    let (face_res, occ_res) = class_residuals(u, r, &report.coefficients)?;
    Ok(decide(face_res, occ_res, report.coefficients, cfg))
}

/// `[D, I]` with the identity block labeled [`IDENTITY_LABEL`].
pub fn with_identity(d: &BlockedDictionary) -> Result<BlockedDictionary> {
    let m = d.m();
    let eye = BlockedDictionary::new(
        DMatrix::identity(m, m),
        vec![Block::new(IDENTITY_LABEL, BlockKind::Occlusion, 0..m)],
        d.shape(),
    )?;
    let faces = face_part(d)?;
    build_compound(&[faces], &[eye])
}

/// The face blocks of `d` as their own dictionary.
pub fn face_part(d: &BlockedDictionary) -> Result<BlockedDictionary> {
    let blocks: Vec<Block> = d.face_blocks().cloned().collect();
    let n = blocks.last().map(|b| b.range.end).unwrap_or(0);
    if n == 0 {
        return Err(SocError::InvalidDictionary("dictionary has no face blocks".into()));
    }
    BlockedDictionary::new(d.atoms().columns(0, n).into_owned(), blocks, d.shape())
}

/// Plain SRC: l1 coding over `[D, I]` (or `D` alone when the identity flag is off).
///
/// Occlusion blocks of `d`, if any, are ignored.
pub fn classify_src_baseline(
    u: &ImageVector,
    d: &BlockedDictionary,
    cfg: &ClassifierConfig,
) -> Result<ClassificationOutcome> {
    cfg.validate()?;
    let r = if cfg.baseline_identity_occlusion {
        with_identity(d)?
    } else {
        face_part(d)?
    };
    check_input(u, &r)?;
    let report = solve_l1_bpdn(u, &r, &cfg.solver)?;
    let (face_res, occ_res) = class_residuals(u, &r, &report.coefficients)?;
    Ok(decide(face_res, occ_res, report.coefficients, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_dict(cols: &[Vec<f64>], labels: &[&str], kind: BlockKind, shape: (usize, usize)) -> BlockedDictionary {
        let cols: Vec<DVector<f64>> = cols.iter().map(|c| DVector::from_vec(c.clone())).collect();
        let labels: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        BlockedDictionary::from_labeled(shape, &cols, &labels, kind).unwrap()
    }

    fn random_dict(rng: &mut ChaCha8Rng, m: usize, labels: &[&str], kind: BlockKind) -> BlockedDictionary {
        let cols: Vec<Vec<f64>> = labels
            .iter()
            .map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        unit_dict(&cols, labels, kind, (m, 1))
    }

    #[test]
    fn rdi_examples() {
        assert!((rdi(&[1.0, 1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(rdi(&[0.0, 1.0]).unwrap(), 0.0);
        let v = rdi(&[0.2, 0.5, 0.5]).unwrap();
        assert!((v - 3.0 * 0.2 / 1.2).abs() < 1e-12);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rdi_degenerate_inputs() {
        assert!(matches!(rdi(&[0.0, 0.0]), Err(SocError::Degenerate(_))));
        assert!(matches!(rdi(&[0.3]), Err(SocError::Degenerate(_))));
        assert!(rdi(&[-0.1, 0.3]).is_err());
    }

    proptest! {
        #[test]
        fn rdi_in_unit_interval_and_scale_invariant(
            r in proptest::collection::vec(0.0f64..10.0, 2..12),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(r.iter().sum::<f64>() > 1e-9);
            let v = rdi(&r).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            let scaled: Vec<f64> = r.iter().map(|x| x * c).collect();
            prop_assert!((rdi(&scaled).unwrap() - v).abs() < 1e-12);
            let all_equal = r.iter().all(|x| (x - r[0]).abs() < 1e-15);
            if all_equal {
                prop_assert!((v - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(v < 1.0);
            }
        }
    }

    #[test]
    fn compound_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_dict(&mut rng, 5, &["a", "a", "b"], BlockKind::Face);
        let b = random_dict(&mut rng, 5, &["glasses", "glasses"], BlockKind::Occlusion);
        let r = build_compound(std::slice::from_ref(&d), &[b]).unwrap();
        let got: Vec<(&str, BlockKind, std::ops::Range<usize>)> = r
            .blocks()
            .iter()
            .map(|b| (b.label.as_str(), b.kind, b.range.clone()))
            .collect();
        assert_eq!(
            got,
            vec![
                ("a", BlockKind::Face, 0..2),
                ("b", BlockKind::Face, 2..3),
                ("glasses", BlockKind::Occlusion, 3..5)
            ]
        );
        assert_eq!(build_compound(std::slice::from_ref(&d), &[]).unwrap(), d);
    }

    #[test]
    fn compound_full_size_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels: Vec<String> = (0..700).map(|j| format!("c{}", j / 7)).collect();
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        let d = random_dict(&mut rng, 6, &refs, BlockKind::Face);
        let s = random_dict(&mut rng, 6, &["sunglasses"; 50], BlockKind::Occlusion);
        let f = random_dict(&mut rng, 6, &["scarf"; 50], BlockKind::Occlusion);
        let r = build_compound(&[d], &[s, f]).unwrap();
        assert_eq!(r.block("sunglasses").unwrap().range, 700..750);
        assert_eq!(r.block("scarf").unwrap().range, 750..800);
    }

    #[test]
    fn compound_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_dict(&mut rng, 5, &["a"], BlockKind::Face);
        let e = random_dict(&mut rng, 4, &["b"], BlockKind::Face);
        assert!(matches!(
            build_compound(std::slice::from_ref(&d), &[e]),
            Err(SocError::DimMismatch { .. })
        ));
        assert!(matches!(
            build_compound(&[d.clone(), d], &[]),
            Err(SocError::DuplicateLabel(_))
        ));
    }

    #[test]
    fn exact_atom_is_labeled() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = random_dict(&mut rng, 10, &["a", "a", "b", "b", "c", "c"], BlockKind::Face);
        let u = ImageVector::from_dvector((10, 1), d.column(3)).unwrap();
        for mode in [SparsityMode::L1, SparsityMode::Structured] {
            let cfg = ClassifierConfig {
                sparsity_mode: mode,
                solver: SolverConfig { epsilon: 0.0, ..Default::default() },
                ..Default::default()
            };
            let out = classify(&u, &d, &cfg).unwrap();
            assert_eq!(out.face_label, Decision::Label("b".into()));
            assert_eq!(out.occlusion_label, Decision::NotApplicable);
            let rb = out.face_residuals.iter().find(|(l, _)| l == "b").unwrap().1;
            assert!(rb < 1e-6, "{rb}");
        }
    }

    #[test]
    fn reported_residuals_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = random_dict(&mut rng, 12, &["a", "a", "b", "b"], BlockKind::Face);
        let b = random_dict(&mut rng, 12, &["x", "y"], BlockKind::Occlusion);
        let r = build_compound(&[d], &[b]).unwrap();
        let raw: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        let u = ImageVector::new((12, 1), raw).unwrap().normalized().unwrap();
        let out = classify(&u, &r, &ClassifierConfig::default()).unwrap();
        let w = &out.coefficients.values;
        let atoms = r.atoms();
        for (label, res) in &out.face_residuals {
            let mut keep = DVector::zeros(r.n());
            for blk in r.blocks() {
                if &blk.label == label || blk.kind == BlockKind::Occlusion {
                    keep.rows_mut(blk.range.start, blk.len()).copy_from(&w.rows(blk.range.start, blk.len()));
                }
            }
            let direct = (u.data() - atoms * keep).norm();
            assert!((direct - res).abs() < 1e-9);
        }
        assert!(out.rdi_occlusion.is_some());
    }

    #[test]
    fn orthogonal_blocks_structured_picks_one() {
        // blocks spanning disjoint coordinate sets
        let m = 8;
        let e = |i: usize| {
            let mut v = vec![0.0; m];
            v[i] = 1.0;
            v
        };
        let d = unit_dict(
            &[e(0), e(1), e(2), e(3), e(4), e(5)],
            &["a", "a", "b", "b", "c", "c"],
            BlockKind::Face,
            (m, 1),
        );
        let mut raw = vec![0.0; m];
        raw[2] = 0.6;
        raw[3] = 0.8;
        let u = ImageVector::new((m, 1), raw).unwrap();
        let cfg = ClassifierConfig {
            solver: SolverConfig { epsilon: 0.0, ..Default::default() },
            ..Default::default()
        };
        let out = classify(&u, &d, &cfg).unwrap();
        let active: Vec<&str> = d
            .blocks()
            .iter()
            .filter(|b| out.coefficients.block_norm(b) > 1e-8)
            .map(|b| b.label.as_str())
            .collect();
        assert_eq!(active, vec!["b"]);
    }

    #[test]
    fn uniform_residuals_are_rejected() {
        // u orthogonal to every face atom: every face residual equals ‖u‖
        let m = 4;
        let d = unit_dict(
            &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]],
            &["a", "b"],
            BlockKind::Face,
            (m, 1),
        );
        let u = ImageVector::new((m, 1), vec![0.0, 0.0, 0.6, 0.8]).unwrap();
        let out = classify(&u, &d, &ClassifierConfig::default()).unwrap();
        assert!((out.rdi_face - 1.0).abs() < 1e-12);
        assert_eq!(out.face_label, Decision::Rejected);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let res = vec![("b".to_string(), 0.5), ("a".to_string(), 0.5), ("c".to_string(), 0.9)];
        let coef = SparseCoefficients {
            values: DVector::zeros(1),
            dict_id: 0,
        };
        let out = decide(res, vec![], coef, &ClassifierConfig::default());
        assert_eq!(out.face_argmin, "b");
    }

    #[test]
    fn baseline_absorbs_single_pixel_spike() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = 30;
        let labels: Vec<&str> = ["a", "a", "a", "b", "b", "b", "c", "c", "c"].to_vec();
        let d = random_dict(&mut rng, m, &labels, BlockKind::Face);
        let clean = d.column(4) * 0.7 + d.column(5) * 0.3;
        let cfg = ClassifierConfig {
            sparsity_mode: SparsityMode::L1,
            baseline_identity_occlusion: true,
            solver: SolverConfig { epsilon: 1e-3, ..Default::default() },
            ..Default::default()
        };
        let u = ImageVector::from_dvector((m, 1), clean.clone()).unwrap().normalized().unwrap();
        let out = classify_src_baseline(&u, &d, &cfg).unwrap();
        assert_eq!(out.face_label, Decision::Label("b".into()));
        let ident = out.coefficients.values.rows(9, m).amax();
        assert!(ident < 0.05, "{ident}");

        let mut spiked = clean;
        spiked[11] += 0.5;
        let u = ImageVector::from_dvector((m, 1), spiked).unwrap().normalized().unwrap();
        let out = classify_src_baseline(&u, &d, &cfg).unwrap();
        assert_eq!(out.face_label, Decision::Label("b".into()));
        let spike = out.coefficients.values[9 + 11];
        assert!(spike > 0.1, "{spike}");
        assert_eq!(out.occlusion_label, Decision::NotApplicable);
    }

    #[test]
    fn no_occlusion_blocks_matches_baseline_without_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = random_dict(&mut rng, 15, &["a", "a", "b", "b", "c", "c"], BlockKind::Face);
        let cfg = ClassifierConfig {
            sparsity_mode: SparsityMode::L1,
            ..Default::default()
        };
        for _ in 0..10 {
            let raw: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = ImageVector::new((15, 1), raw).unwrap().normalized().unwrap();
            let a = classify(&u, &d, &cfg).unwrap();
            let b = classify_src_baseline(&u, &d, &cfg).unwrap();
            assert_eq!(a.face_label, b.face_label);
            assert_eq!(a.face_residuals, b.face_residuals);
        }
    }

    #[test]
    fn rejects_unnormalized_and_bad_theta() {
        let d = unit_dict(&[vec![1.0, 0.0], vec![0.0, 1.0]], &["a", "b"], BlockKind::Face, (2, 1));
        let u = ImageVector::new((2, 1), vec![2.0, 0.0]).unwrap();
        assert!(classify(&u, &d, &ClassifierConfig::default()).is_err());
        let u = ImageVector::new((2, 1), vec![1.0, 0.0]).unwrap();
        let cfg = ClassifierConfig { theta_face: 0.0, ..Default::default() };
        assert!(matches!(classify(&u, &d, &cfg), Err(SocError::InvalidConfig(_))));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("l1".parse::<SparsityMode>().unwrap(), SparsityMode::L1);
        assert_eq!("Structured".parse::<SparsityMode>().unwrap(), SparsityMode::Structured);
        assert!("l0".parse::<SparsityMode>().is_err());
        assert_eq!(SparsityMode::Structured.to_string(), "structured");
    }
}
