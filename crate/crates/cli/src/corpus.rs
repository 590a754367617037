//! Corpus directories: PGM images plus a CSV manifest.
//!
//! Manifest columns are `path, face, occlusion, mask, split`, with paths
//! relative to the manifest. Splits are `gallery`, `collect` and `test`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use soc_core::io::{read_pgm, write_pgm};
use soc_core::OcclusionMask;

use crate::pipeline::{gallery_dictionary, Corpus, Item};
use crate::CliError;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub face: String,
    pub occlusion: String,
    pub mask: String,
    pub split: String,
}

/// Writes every image and mask, then the manifest. Returns the manifest path.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let manifest = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest)?;
    for (split, items) in [
        ("gallery", &corpus.gallery_items),
        ("collect", &corpus.collect),
        ("test", &corpus.test),
    ] {
        for (k, it) in items.iter().enumerate() {
            let name = format!("{split}_{k:05}.pgm");
            write_pgm(dir.join("images").join(&name), &it.image.to_grid()?)?;
            let mask = match &it.mask {
                Some(m) => {
                    write_pgm(dir.join("masks").join(&name), &m.to_grid())?;
                    format!("masks/{name}")
                }
                None => String::new(),
            };
            w.serialize(ManifestRow {
                path: format!("images/{name}"),
                face: it.face.clone(),
                occlusion: it.occlusion.clone().unwrap_or_default(),
                mask,
                split: split.to_string(),
            })?;
        }
    }
    w.flush()?;
    Ok(manifest)
}

/// The manifest path for a corpus given as a directory or as the manifest itself.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST)
    } else {
        p.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(CliError::from))
        .collect()
}

fn load_item(base: &Path, row: &ManifestRow) -> Result<Item, CliError> {
    let image = read_pgm(base.join(&row.path))?.vectorize(false)?;
    let mask = if row.mask.is_empty() {
        None
    } else {
        let g = read_pgm(base.join(&row.mask))?;
        let support = g.values().iter().map(|v| u8::from(*v >= 0.5)).collect();
        Some(OcclusionMask::new(g.shape(), support)?)
    };
    Ok(Item {
        image,
        face: row.face.clone(),
        occlusion: (!row.occlusion.is_empty()).then(|| row.occlusion.clone()),
        mask,
    })
}

/// Loads a corpus; the gallery becomes a unit-norm face dictionary.
pub fn read_corpus(corpus: &Path) -> Result<(Corpus, Vec<ManifestRow>), CliError> {
    let manifest = manifest_path(corpus);
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let rows = read_manifest(&manifest)?;
    let (mut gallery_items, mut collect, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for row in &rows {
        let item = load_item(&base, row)?;
        match row.split.as_str() {
            "gallery" => gallery_items.push(item),
            "collect" => collect.push(item),
            "test" => test.push(item),
            other => return Err(CliError::Data(format!("unknown split `{other}` in manifest"))),
        }
    }
    let gallery = gallery_dictionary(&gallery_items)?;
    Ok((
        Corpus {
            gallery_items,
            gallery,
            collect,
            test,
        },
        rows,
    ))
}
