//! In-memory pipeline shared by the commands and the acceptance suite.

use nalgebra::DVector;
use rayon::prelude::*;
use soc_core::classifier::{self, ClassifierConfig};
use soc_core::learning::{
    collect_esrc, collect_soc_debug, collect_ssrc, ksvd_train, KsvdConfig, KsvdResult,
    OcclusionSampleSet, Strategy,
};
use soc_core::mask::MaskEstimatorConfig;
use soc_core::synth::{apply_occlusion_with, class_label, FaceModel, OcclusionShape, RegionKind, SynthSpec};
use soc_core::{
    BlockKind, BlockedDictionary, ClassificationOutcome, ImageVector, OcclusionMask, Result, SocError,
};

/// One image with its ground truth.
#[derive(Clone, Debug)]
pub struct Item {
    pub image: ImageVector,
    pub face: String,
    pub occlusion: Option<String>,
    pub mask: Option<OcclusionMask>,
}

/// A synthetic scenario: clean gallery, occluded images for learning, and test images.
#[derive(Clone, Debug)]
pub struct Corpus {
    /// Raw gallery images, adjacent per class.
    pub gallery_items: Vec<Item>,
    /// The gallery as a unit-norm face dictionary.
    pub gallery: BlockedDictionary,
    pub collect: Vec<Item>,
    pub test: Vec<Item>,
}

/// Layout of a synthetic scenario on top of a [`SynthSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub synth: SynthSpec,
    /// Gallery subjects whose occluded images feed dictionary learning.
    pub collect_subjects: usize,
    /// Occluded images per collect subject and occlusion category.
    pub collect_per_subject: usize,
    /// Subjects outside the gallery, used as invalid faces.
    pub invalid_subjects: usize,
    /// Test images per invalid subject.
    pub invalid_per_subject: usize,
    /// Occlusion covering an unknown texture on a random region of this size range.
    pub unknown_occlusion: Option<(f64, f64)>,
    /// Unknown-occlusion test images per gallery subject.
    pub unknown_per_subject: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            collect_subjects: 10,
            collect_per_subject: 6,
            invalid_subjects: 0,
            invalid_per_subject: 0,
            unknown_occlusion: None,
            unknown_per_subject: 0,
        }
    }
}

/// Category name of the unknown occlusion.
pub const UNKNOWN_OCCLUSION: &str = "unknown";

// disjoint instance ranges keep the occlusion draws of each split apart
const COLLECT_BASE: u64 = 0;
const TEST_BASE: u64 = 1 << 32;
const INVALID_BASE: u64 = 2 << 32;
const UNKNOWN_BASE: u64 = 3 << 32;

fn occlude(img: &ImageVector, shape: &OcclusionShape, spec: &SynthSpec, instance: u64) -> Result<(ImageVector, OcclusionMask)> {
    apply_occlusion_with(img, shape, spec, instance)
}

/// Builds the scenario. Test images cycle through the configured occlusion shapes.
pub fn build_corpus(sc: &ScenarioSpec) -> Result<Corpus> {
    let spec = &sc.synth;
    spec.validate()?;
    if sc.collect_subjects > spec.classes {
        return Err(SocError::BadSpec("more collect subjects than classes".into()));
    }
    let shapes = &spec.occlusion_shapes;
    let model = FaceModel::new(spec);
    let mut gallery_items = Vec::new();
    let mut tests = Vec::new();
    for c in 0..spec.classes {
        let bases = model.class_bases(c);
        for i in 0..spec.samples_per_class {
            gallery_items.push(Item {
                image: model.sample(&bases, c, "train", i),
                face: class_label(c),
                occlusion: None,
                mask: None,
            });
        }
        for i in 0..spec.test_per_class {
            tests.push((model.sample(&bases, c, "test", i), class_label(c)));
        }
    }
    let gallery = gallery_dictionary(&gallery_items)?;

    let mut collect = Vec::new();
    for c in 0..sc.collect_subjects {
        let bases = model.class_bases(c);
        for shape in shapes {
            for i in 0..sc.collect_per_subject {
                let clean = model.sample(&bases, c, &format!("collect-{}", shape.name), i);
                let instance = COLLECT_BASE + collect.len() as u64;
                let (image, mask) = occlude(&clean, shape, spec, instance)?;
                collect.push(Item {
                    image,
                    face: class_label(c),
                    occlusion: Some(shape.name.clone()),
                    mask: Some(mask),
                });
            }
        }
    }

    let mut test = Vec::new();
    for (k, (clean, label)) in tests.into_iter().enumerate() {
        if shapes.is_empty() {
            test.push(Item { image: clean, face: label, occlusion: None, mask: None });
            continue;
        }
        let shape = &shapes[k % shapes.len()];
        let (image, mask) = occlude(&clean, shape, spec, TEST_BASE + k as u64)?;
        test.push(Item { image, face: label, occlusion: Some(shape.name.clone()), mask: Some(mask) });
    }

    if sc.invalid_subjects > 0 && !shapes.is_empty() {
        let mut k = 0;
        for c in spec.classes..spec.classes + sc.invalid_subjects {
            let bases = model.class_bases(c);
            for i in 0..sc.invalid_per_subject {
                let clean = model.sample(&bases, c, "test", i);
                let shape = &shapes[k % shapes.len()];
                let (image, mask) = occlude(&clean, shape, spec, INVALID_BASE + k as u64)?;
                test.push(Item {
                    image,
                    face: class_label(c),
                    occlusion: Some(shape.name.clone()),
                    mask: Some(mask),
                });
                k += 1;
            }
        }
    }

    if let Some((lo, hi)) = sc.unknown_occlusion {
        let mut k = 0;
        for c in 0..spec.classes {
            let bases = model.class_bases(c);
            for i in 0..sc.unknown_per_subject {
                let clean = model.sample(&bases, c, "unknown", i);
                let steps = (sc.unknown_per_subject.max(2) - 1) as f64;
                let fraction = lo + (hi - lo) * i as f64 / steps;
                let shape = OcclusionShape::new(UNKNOWN_OCCLUSION, RegionKind::RandomRectangle, fraction);
                let (image, mask) = occlude(&clean, &shape, spec, UNKNOWN_BASE + k as u64)?;
                test.push(Item {
                    image,
                    face: class_label(c),
                    occlusion: Some(UNKNOWN_OCCLUSION.into()),
                    mask: Some(mask),
                });
                k += 1;
            }
        }
    }
    Ok(Corpus { gallery_items, gallery, collect, test })
}

/// Unit-norm face dictionary with one block per label.
pub fn gallery_dictionary(items: &[Item]) -> Result<BlockedDictionary> {
    let first = items
        .first()
        .ok_or_else(|| SocError::InvalidDictionary("empty gallery".into()))?;
    let cols: Vec<DVector<f64>> = items.iter().map(|it| it.image.data().clone()).collect();
    let labels: Vec<String> = items.iter().map(|it| it.face.clone()).collect();
    BlockedDictionary::from_labeled(first.image.shape(), &cols, &labels, BlockKind::Face)
}

/// Block-average downsampling of every atom, renormalized, blocks kept.
pub fn downsample_dictionary(d: &BlockedDictionary, target: (usize, usize)) -> Result<BlockedDictionary> {
    if d.shape() == target {
        return Ok(d.clone());
    }
    let shape = d.shape();
    let cols = (0..d.n())
        .map(|j| {
            let v = soc_core::model::downsample_values(d.column(j).as_slice(), shape, target)?;
            Ok(DVector::from_vec(v))
        })
        .collect::<Result<Vec<_>>>()?;
    BlockedDictionary::from_columns(target, &cols, d.blocks().to_vec())
}

/// Downsampled and unit-normalized test feature.
pub fn feature(img: &ImageVector, target: (usize, usize)) -> Result<ImageVector> {
    let v = if img.shape() == target {
        img.clone()
    } else {
        img.downsample(target.0, target.1)?
    };
    v.normalized()
}

/// Occlusion pattern of one image at native resolution.
pub fn collect_one(
    item: &Item,
    gallery: &BlockedDictionary,
    strategy: Strategy,
    labeled: bool,
    mask_cfg: &MaskEstimatorConfig,
    debug_dir: Option<&std::path::Path>,
) -> Result<ImageVector> {
    let label = labeled.then_some(item.face.as_str());
    match strategy {
        Strategy::Soc => collect_soc_debug(&item.image, gallery, label, mask_cfg, debug_dir),
        Strategy::Ssrc | Strategy::Esrc => {
            let l = label.ok_or_else(|| {
                SocError::InvalidConfig(format!("strategy {strategy} needs labeled images"))
            })?;
            let sub = gallery.sub_dictionary(l)?;
            if strategy == Strategy::Ssrc {
                collect_ssrc(&item.image, &sub)
            } else {
                collect_esrc(&item.image, &sub)
            }
        }
    }
}

/// Patterns of every item, in input order. Failed items come back as errors.
pub fn collect_patterns(
    items: &[Item],
    gallery: &BlockedDictionary,
    strategy: Strategy,
    labeled: bool,
    mask_cfg: &MaskEstimatorConfig,
) -> Vec<Result<ImageVector>> {
    items
        .par_iter()
        .map(|it| collect_one(it, gallery, strategy, labeled, mask_cfg, None))
        .collect()
}

/// Groups downsampled patterns by occlusion category, in first-appearance order.
pub fn sample_sets(
    items: &[Item],
    patterns: &[Result<ImageVector>],
    target: (usize, usize),
    strategy: Strategy,
    labeled: bool,
) -> Result<Vec<OcclusionSampleSet>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: Vec<Vec<DVector<f64>>> = Vec::new();
    for (it, p) in items.iter().zip(patterns) {
        let Ok(p) = p else { continue };
        let cat = it.occlusion.clone().unwrap_or_else(|| "occlusion".into());
        let pos = match order.iter().position(|c| *c == cat) {
            Some(i) => i,
            None => {
                order.push(cat);
                groups.push(Vec::new());
                order.len() - 1
            }
        };
        let v = p.downsample(target.0, target.1)?;
        groups[pos].push(v.data().clone());
    }
    order
        .into_iter()
        .zip(groups)
        .map(|(cat, g)| OcclusionSampleSet::from_patterns(target, &g, cat, strategy, labeled))
        .collect()
}

/// K-SVD per category; the atom count is capped by the sample count.
pub fn train_dictionaries(sets: &[OcclusionSampleSet], cfg: &KsvdConfig) -> Result<Vec<KsvdResult>> {
    sets.iter()
        .map(|s| {
            let mut c = cfg.clone();
            if c.atom_count > s.len() {
                log::warn!(
                    "category {} has {} samples, reducing atoms from {}",
                    s.category,
                    s.len(),
                    c.atom_count
                );
                c.atom_count = s.len();
            }
            ksvd_train(s, &c)
        })
        .collect()
}

/// `R = [D, B]` from the gallery at feature resolution and trained occlusion dictionaries.
pub fn compound(gallery_features: &BlockedDictionary, occ: &[BlockedDictionary]) -> Result<BlockedDictionary> {
    let faces = classifier::face_part(gallery_features)?;
    let occ: Vec<BlockedDictionary> = occ
        .iter()
        .map(|d| {
            let blocks = d
                .blocks()
                .iter()
                .map(|b| soc_core::Block::new(b.label.clone(), BlockKind::Occlusion, b.range.clone()))
                .collect();
            BlockedDictionary::new(d.atoms().clone(), blocks, d.shape())
        })
        .collect::<Result<_>>()?;
    classifier::build_compound(&[faces], &occ)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Coding over the compound dictionary.
    Soc,
    /// SRC with an identity occlusion block.
    SrcIdentity,
    /// SRC over the face dictionary alone.
    Src,
}

/// Classifies every test feature in input order.
pub fn classify_batch(
    features: &[ImageVector],
    r: &BlockedDictionary,
    cfg: &ClassifierConfig,
    method: Method,
) -> Vec<Result<ClassificationOutcome>> {
    features
        .par_iter()
        .map(|u| match method {
            Method::Soc => classifier::classify(u, r, cfg),
            Method::SrcIdentity => {
                let c = ClassifierConfig { baseline_identity_occlusion: true, ..cfg.clone() };
                classifier::classify_src_baseline(u, r, &c)
            }
            Method::Src => {
                let c = ClassifierConfig { baseline_identity_occlusion: false, ..cfg.clone() };
                classifier::classify_src_baseline(u, r, &c)
            }
        })
        .collect()
}

/// Fraction of outcomes whose face argmin equals the truth (errors count as wrong).
pub fn face_accuracy(outcomes: &[Result<ClassificationOutcome>], truth: &[&str]) -> f64 {
    let pred: Vec<Option<&str>> = outcomes
        .iter()
        .map(|o| o.as_ref().ok().map(|o| o.face_argmin.as_str()))
        .collect();
    let t: Vec<Option<&str>> = truth.iter().map(|s| Some(*s)).collect();
    soc_core::eval::accuracy(&pred, &t)
}

/// Fraction of outcomes whose occlusion argmin equals the truth.
pub fn occlusion_accuracy(outcomes: &[Result<ClassificationOutcome>], truth: &[&str]) -> f64 {
    let pred: Vec<Option<&str>> = outcomes
        .iter()
        .map(|o| o.as_ref().ok().and_then(|o| o.occlusion_argmin.as_deref()))
        .collect();
    let t: Vec<Option<&str>> = truth.iter().map(|s| Some(*s)).collect();
    soc_core::eval::accuracy(&pred, &t)
}
