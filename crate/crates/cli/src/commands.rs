//! The six subcommands. Each reads a [`RunConfig`], writes CSV (and
//! dictionary or image) outputs under the output directory and returns the
//! path of its main output.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use soc_core::eval::{auc, roc_sweep};
use soc_core::io::{load_dictionary, save_dictionary};
use soc_core::learning::{OcclusionSampleSet, Strategy};
use soc_core::{Block, BlockKind, BlockedDictionary, ClassificationOutcome};

use crate::config::RunConfig;
use crate::corpus::{read_corpus, write_corpus, ManifestRow};
use crate::pipeline::{
    build_corpus, classify_batch, collect_one, compound, downsample_dictionary, feature,
    sample_sets, train_dictionaries, Method,
};
use crate::CliError;

/// Flags shared by every command.
#[derive(Clone, Debug)]
pub struct Globals {
    pub out: PathBuf,
    pub debug: bool,
    /// Write per-stage wall-clock times to `stats.csv`.
    pub timing: bool,
}

struct Stopwatch {
    rows: Vec<(String, f64)>,
}

impl Stopwatch {
    fn new() -> Self {
        Self { rows: Vec::new() }
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let v = f();
        self.rows.push((stage.to_string(), t.elapsed().as_secs_f64()));
        v
    }

    fn write(&self, g: &Globals) -> Result<(), CliError> {
        if !g.timing {
            return Ok(());
        }
        let mut w = csv::Writer::from_path(g.out.join("stats.csv"))?;
        w.write_record(["stage", "seconds"])?;
        for (s, t) in &self.rows {
            w.write_record([s.clone(), t.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A dictionary is addressed by its `.json` file, its stem, or the directory
/// holding exactly one `.json` file.
fn stem_of(p: &Path) -> Result<PathBuf, CliError> {
    if !p.is_dir() {
        return Ok(p.with_extension(""));
    }
    let found: Vec<PathBuf> = fs::read_dir(p)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|f| f.extension().is_some_and(|x| x == "json"))
        .collect();
    match found.as_slice() {
        [one] => Ok(one.with_extension("")),
        _ => Err(CliError::Data(format!("expected one dictionary in {}", p.display()))),
    }
}

/// Generates a synthetic corpus; returns the manifest path.
pub fn cmd_synth(cfg: &RunConfig, g: &Globals) -> Result<PathBuf, CliError> {
    let sc = cfg.scenario()?;
    let corpus = build_corpus(&sc)?;
    fs::create_dir_all(&g.out)?;
    write_corpus(&g.out, &corpus)
}

/// Occlusion samples of the `collect` split, one block per category.
pub fn cmd_collect(cfg: &RunConfig, g: &Globals) -> Result<PathBuf, CliError> {
    let (corpus, rows) = read_corpus(&cfg.input_path("corpus")?)?;
    let strategy = cfg.strategy()?;
    let labeled = cfg.labeled()?;
    if strategy != Strategy::Soc && !labeled {
        return Err(CliError::Usage(format!("strategy {strategy} needs labeled = true")));
    }
    let mask_cfg = cfg.mask()?;
    let target = cfg.feature_shape()?;
    fs::create_dir_all(&g.out)?;
    let collect_rows: Vec<&ManifestRow> = rows.iter().filter(|r| r.split == "collect").collect();
    let mut sw = Stopwatch::new();

    let patterns = sw.time("collect", || {
        corpus
            .collect
            .par_iter()
            .enumerate()
            .map(|(k, it)| {
                let dir = g.debug.then(|| g.out.join("debug").join(format!("collect_{k:05}")));
                if let Some(d) = &dir {
                    fs::create_dir_all(d)?;
                }
                Ok(collect_one(it, &corpus.gallery, strategy, labeled, &mask_cfg, dir.as_deref()))
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let mut rej = csv::Writer::from_path(g.out.join("rejected.csv"))?;
    rej.write_record(["index", "path", "occlusion", "reason"])?;
    for (k, p) in patterns.iter().enumerate() {
        if let Err(e) = p {
            log::warn!("sample {k} rejected: {e}");
            let row = collect_rows[k];
            rej.write_record([k.to_string(), row.path.clone(), row.occlusion.clone(), e.to_string()])?;
        }
    }
    rej.flush()?;

    let sets = sample_sets(&corpus.collect, &patterns, target, strategy, labeled)?;
    let samples = sets_to_dictionary(&sets)?;
    let stem = g.out.join("samples");
    save_dictionary(&stem, &samples)?;
    sw.write(g)?;
    Ok(stem.with_extension("json"))
}

fn sets_to_dictionary(sets: &[OcclusionSampleSet]) -> Result<BlockedDictionary, CliError> {
    let first = sets
        .first()
        .ok_or_else(|| CliError::Numerical("no occlusion samples were collected".into()))?;
    let n: usize = sets.iter().map(OcclusionSampleSet::len).sum();
    let mut atoms = DMatrix::zeros(first.samples.nrows(), n);
    let mut blocks = Vec::new();
    let mut at = 0;
    for s in sets {
        atoms.columns_mut(at, s.len()).copy_from(&s.samples);
        blocks.push(Block::new(s.category.clone(), BlockKind::Occlusion, at..at + s.len()));
        at += s.len();
    }
    Ok(BlockedDictionary::new(atoms, blocks, first.shape)?)
}

fn dictionary_to_sets(d: &BlockedDictionary, cfg: &RunConfig) -> Result<Vec<OcclusionSampleSet>, CliError> {
    let strategy = cfg.strategy()?;
    let labeled = cfg.labeled()?;
    d.blocks()
        .iter()
        .map(|b| {
            Ok(OcclusionSampleSet {
                samples: d.atoms().columns(b.range.start, b.len()).into_owned(),
                shape: d.shape(),
                category: b.label.clone(),
                strategy,
                labeled,
            })
        })
        .collect()
}

/// K-SVD per category over the collected samples.
pub fn cmd_train(cfg: &RunConfig, g: &Globals) -> Result<PathBuf, CliError> {
    let samples = load_dictionary(stem_of(&cfg.input_path("samples")?)?)?;
    let sets = dictionary_to_sets(&samples, cfg)?;
    let ksvd = cfg.ksvd()?;
    fs::create_dir_all(&g.out)?;
    let mut sw = Stopwatch::new();
    let trained = sw.time("train", || train_dictionaries(&sets, &ksvd))?;
    let mut w = csv::Writer::from_path(g.out.join("train_trace.csv"))?;
    w.write_record(["category", "iteration", "error"])?;
    for (s, t) in sets.iter().zip(&trained) {
        for (i, e) in t.error_trace.iter().enumerate() {
            w.write_record([s.category.clone(), i.to_string(), e.to_string()])?;
        }
    }
    w.flush()?;
    let dicts: Vec<BlockedDictionary> = trained.into_iter().map(|t| t.dictionary).collect();
    let occ = stack_occlusion(&dicts)?;
    let stem = g.out.join("occlusion");
    save_dictionary(&stem, &occ)?;
    sw.write(g)?;
    Ok(stem.with_extension("json"))
}

fn stack_occlusion(dicts: &[BlockedDictionary]) -> Result<BlockedDictionary, CliError> {
    let first = dicts
        .first()
        .ok_or_else(|| CliError::Numerical("no occlusion dictionaries".into()))?;
    let n: usize = dicts.iter().map(BlockedDictionary::n).sum();
    let mut atoms = DMatrix::zeros(first.m(), n);
    let mut blocks = Vec::new();
    let mut at = 0;
    for d in dicts {
        atoms.columns_mut(at, d.n()).copy_from(d.atoms());
        for b in d.blocks() {
            blocks.push(Block::new(b.label.clone(), BlockKind::Occlusion, at + b.range.start..at + b.range.end));
        }
        at += d.n();
    }
    Ok(BlockedDictionary::new(atoms, blocks, first.shape())?)
}

/// One row of `results.csv`.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub id: usize,
    pub path: String,
    pub true_face: String,
    pub true_occlusion: String,
    pub pred_face: String,
    pub pred_occlusion: String,
    pub face_argmin: String,
    pub occlusion_argmin: String,
    pub rdi_face: Option<f64>,
    pub rdi_occlusion: Option<f64>,
    /// The true face class is in the gallery.
    pub face_valid: bool,
    /// The true occlusion category is in the occlusion dictionary (empty when unoccluded).
    pub occlusion_valid: Option<bool>,
    pub error: String,
}

fn result_row(
    id: usize,
    row: &ManifestRow,
    out: &soc_core::Result<ClassificationOutcome>,
    faces: &BTreeSet<String>,
    occlusions: &BTreeSet<String>,
) -> ResultRow {
    let true_occ = row.occlusion.clone();
    let mut r = ResultRow {
        id,
        path: row.path.clone(),
        true_face: row.face.clone(),
        true_occlusion: true_occ.clone(),
        pred_face: String::new(),
        pred_occlusion: String::new(),
        face_argmin: String::new(),
        occlusion_argmin: String::new(),
        rdi_face: None,
        rdi_occlusion: None,
        face_valid: faces.contains(&row.face),
        occlusion_valid: (!true_occ.is_empty()).then(|| occlusions.contains(&true_occ)),
        error: String::new(),
    };
    match out {
        Ok(o) => {
            r.pred_face = o.face_label.to_string();
            r.pred_occlusion = o.occlusion_label.to_string();
            r.face_argmin = o.face_argmin.clone();
            r.occlusion_argmin = o.occlusion_argmin.clone().unwrap_or_default();
            r.rdi_face = Some(o.rdi_face);
            r.rdi_occlusion = o.rdi_occlusion;
        }
        Err(e) => r.error = e.to_string(),
    }
    r
}

/// Per-category accuracy: face accuracy over valid faces, occlusion accuracy
/// over valid occlusions. The last row pools every category.
fn accuracy_rows(rows: &[ResultRow]) -> Vec<(String, usize, f64, Option<f64>)> {
    let mut cats: Vec<String> = Vec::new();
    for r in rows {
        if !cats.contains(&r.true_occlusion) {
            cats.push(r.true_occlusion.clone());
        }
    }
    let summarize = |name: String, sel: Vec<&ResultRow>| {
        let faces: Vec<&&ResultRow> = sel.iter().filter(|r| r.face_valid).collect();
        let fa = if faces.is_empty() {
            0.0
        } else {
            faces.iter().filter(|r| r.face_argmin == r.true_face).count() as f64 / faces.len() as f64
        };
        let occ: Vec<&&ResultRow> = sel
            .iter()
            .filter(|r| r.occlusion_valid == Some(true) && r.rdi_occlusion.is_some())
            .collect();
        let oa = (!occ.is_empty()).then(|| {
            occ.iter().filter(|r| r.occlusion_argmin == r.true_occlusion).count() as f64 / occ.len() as f64
        });
        (name, faces.len(), fa, oa)
    };
    let mut out: Vec<_> = cats
        .iter()
        .map(|c| {
            let name = if c.is_empty() { "none".to_string() } else { c.clone() };
            summarize(name, rows.iter().filter(|r| &r.true_occlusion == c).collect())
        })
        .collect();
    out.push(summarize("all".into(), rows.iter().collect()));
    out
}

fn write_accuracy(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["category", "count", "face_accuracy", "occlusion_accuracy"])?;
    for (c, n, fa, oa) in accuracy_rows(rows) {
        w.write_record([c, n.to_string(), fa.to_string(), oa.map(|v| v.to_string()).unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(())
}

struct Prepared {
    rows: Vec<ManifestRow>,
    features: Vec<soc_core::ImageVector>,
    faces: BTreeSet<String>,
    gallery: BlockedDictionary,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let (corpus, rows) = read_corpus(&cfg.input_path("corpus")?)?;
    let target = cfg.feature_shape()?;
    let test_rows: Vec<ManifestRow> = rows.into_iter().filter(|r| r.split == "test").collect();
    let features = corpus
        .test
        .iter()
        .map(|it| feature(&it.image, target))
        .collect::<soc_core::Result<Vec<_>>>()?;
    let faces = corpus.gallery.face_blocks().map(|b| b.label.clone()).collect();
    let gallery = downsample_dictionary(&corpus.gallery, target)?;
    Ok(Prepared {
        rows: test_rows,
        features,
        faces,
        gallery,
    })
}

fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "id", "path", "true_face", "true_occlusion", "pred_face", "pred_occlusion", "face_argmin",
            "occlusion_argmin", "rdi_face", "rdi_occlusion", "face_valid", "occlusion_valid", "error",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Classifies the `test` split; writes `results.csv` and `accuracy.csv`.
pub fn cmd_classify(cfg: &RunConfig, g: &Globals) -> Result<PathBuf, CliError> {
    // resolve every input and setting before the slow work
    cfg.input_path("corpus")?;
    let occ_path = cfg.optional_input_path("occlusion_dictionary")?;
    let method = cfg.method()?;
    let ccfg = cfg.classifier()?;
    let verbose = cfg.get("verbose", false)?;
    let occ = match occ_path {
        Some(path) => Some(load_dictionary(stem_of(&path)?)?),
        None => None,
    };
    let p = prepare(cfg)?;
    let r = match &occ {
        Some(o) => {
            if o.shape() != p.gallery.shape() {
                return Err(CliError::Data(format!(
                    "occlusion dictionary is {:?}, features are {:?}",
                    o.shape(),
                    p.gallery.shape()
                )));
            }
            compound(&p.gallery, std::slice::from_ref(o))?
        }
        None => p.gallery.clone(),
    };
    let occ_labels: BTreeSet<String> = r.occlusion_blocks().map(|b| b.label.clone()).collect();
    fs::create_dir_all(&g.out)?;
    let mut sw = Stopwatch::new();
    let outcomes = sw.time("classify", || classify_batch(&p.features, &r, &ccfg, method));
    let rows: Vec<ResultRow> = p
        .rows
        .iter()
        .zip(&outcomes)
        .enumerate()
        .map(|(k, (row, o))| result_row(k, row, o, &p.faces, &occ_labels))
        .collect();
    let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
    let path = g.out.join("results.csv");
    write_results(&path, &rows)?;
    write_accuracy(&g.out.join("accuracy.csv"), &rows)?;
    if verbose {
        write_residuals(&g.out.join("residuals.csv"), &outcomes)?;
    }
    sw.write(g)?;
    if failed > 0 {
        log::warn!("{failed} of {} classifications failed", rows.len());
        if failed == rows.len() {
            return Err(CliError::Numerical("every classification failed".into()));
        }
    }
    Ok(path)
}

/// Long-format residuals: one row per test image and block.
fn write_residuals(path: &Path, outcomes: &[soc_core::Result<ClassificationOutcome>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "kind", "label", "residual"])?;
    for (k, o) in outcomes.iter().enumerate() {
        let Ok(o) = o else { continue };
        for (kind, res) in [("face", &o.face_residuals), ("occlusion", &o.occlusion_residuals)] {
            for (label, r) in res {
                w.write_record([k.to_string(), kind.to_string(), label.clone(), r.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}

/// Face and occlusion RDI scores split into valid and invalid inputs.
///
/// Face scores skip unknown-occlusion rows; occlusion scores use valid faces only.
pub fn rdi_scores(rows: &[ResultRow]) -> ((Vec<f64>, Vec<f64>), (Vec<f64>, Vec<f64>)) {
    let (mut fv, mut fi, mut ov, mut oi) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in rows {
        if let Some(s) = r.rdi_face {
            if r.occlusion_valid != Some(false) {
                if r.face_valid {
                    fv.push(s)
                } else {
                    fi.push(s)
                }
            }
        }
        if let (Some(s), Some(valid)) = (r.rdi_occlusion, r.occlusion_valid) {
            if r.face_valid {
                if valid {
                    ov.push(s)
                } else {
                    oi.push(s)
                }
            }
        }
    }
    ((fv, fi), (ov, oi))
}

/// ROC table from a results CSV; writes `roc.csv` and `auc.csv`.
pub fn cmd_roc(cfg: &RunConfig, g: &Globals) -> Result<PathBuf, CliError> {
    let rows = read_results(&cfg.input_path("results")?)?;
    let ((fv, fi), (ov, oi)) = rdi_scores(&rows);
    let face = roc_sweep(&fv, &fi);
    let occ = roc_sweep(&ov, &oi);
    let has_occ = !ov.is_empty() || !oi.is_empty();
    fs::create_dir_all(&g.out)?;
    let path = g.out.join("roc.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["theta", "face_tpr", "face_fpr", "occlusion_tpr", "occlusion_fpr"])?;
    for (f, o) in face.iter().zip(&occ) {
        let (ot, of) = if has_occ {
            (o.tpr.to_string(), o.fpr.to_string())
        } else {
            (String::new(), String::new())
        };
        w.write_record([f.theta.to_string(), f.tpr.to_string(), f.fpr.to_string(), ot, of])?;
    }
    w.flush()?;
    let mut a = csv::Writer::from_path(g.out.join("auc.csv"))?;
    a.write_record(["curve", "auc", "valid", "invalid"])?;
    for (name, v, i) in [("face", &fv, &fi), ("occlusion", &ov, &oi)] {
        let value = auc(v, i).map(|x| x.to_string()).unwrap_or_default();
        a.write_record([name.to_string(), value, v.len().to_string(), i.len().to_string()])?;
    }
    a.flush()?;
    Ok(path)
}

/// Accuracy against occlusion dictionary size; writes `sweep.csv`.
///
/// Size 0 is plain SRC over the face dictionary.
pub fn cmd_sweep(cfg: &RunConfig, g: &Globals) -> Result<PathBuf, CliError> {
    cfg.input_path("corpus")?;
    let samples = load_dictionary(stem_of(&cfg.input_path("samples")?)?)?;
    let sizes = cfg.sizes()?;
    let ccfg = cfg.classifier()?;
    let base = cfg.ksvd()?;
    let p = prepare(cfg)?;
    if samples.shape() != p.gallery.shape() {
        return Err(CliError::Data("samples and features differ in resolution".into()));
    }
    let sets = dictionary_to_sets(&samples, cfg)?;
    fs::create_dir_all(&g.out)?;
    let mut sw = Stopwatch::new();
    let path = g.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["atoms", "face_accuracy", "occlusion_accuracy"])?;
    for size in sizes {
        let (r, method) = if size == 0 {
            (p.gallery.clone(), Method::Src)
        } else {
            let ks = soc_core::learning::KsvdConfig { atom_count: size, ..base.clone() };
            let trained = sw.time(&format!("train_{size}"), || train_dictionaries(&sets, &ks))?;
            let dicts: Vec<BlockedDictionary> = trained.into_iter().map(|t| t.dictionary).collect();
            (compound(&p.gallery, &dicts)?, Method::Soc)
        };
        let occ_labels: BTreeSet<String> = r.occlusion_blocks().map(|b| b.label.clone()).collect();
        let outcomes = sw.time(&format!("classify_{size}"), || classify_batch(&p.features, &r, &ccfg, method));
        let rows: Vec<ResultRow> = p
            .rows
            .iter()
            .zip(&outcomes)
            .enumerate()
            .map(|(k, (row, o))| result_row(k, row, o, &p.faces, &occ_labels))
            .collect();
        let all = accuracy_rows(&rows).pop().expect("pooled row");
        w.write_record([size.to_string(), all.2.to_string(), all.3.map(|v| v.to_string()).unwrap_or_default()])?;
    }
    w.flush()?;
    sw.write(g)?;
    Ok(path)
}

/// Prints `path` on stdout (used by the binary after each command).
pub fn announce(path: &Path) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", path.display());
}
