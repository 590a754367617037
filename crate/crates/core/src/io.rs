//! Binary PGM images and the two-file dictionary format.
//!
//! A dictionary is stored as `<stem>.json` (feature dimension, atom count,
//! grid shape and the block list) next to `<stem>.bin`, the atom matrix as
//! little-endian `f64` in column-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SocError};
use crate::model::{Block, BlockKind, BlockedDictionary, ImageGrid};

/// Parses a binary (`P5`, maxval ≤ 255) graymap.
pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGrid> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(SocError::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
            SocError::Format("non-ASCII PGM header".into())
        })?);
    }
    if fields[0] != "P5" {
        return Err(SocError::Format(format!("unsupported magic `{}`", fields[0])));
    }
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| SocError::Format(format!("bad PGM header field `{s}`")))
    };
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(SocError::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| SocError::Format("truncated PGM raster".into()))?;
    let values = raster
        .iter()
        .map(|&b| (b as f64 / maxval as f64).min(1.0))
        .collect();
    ImageGrid::new(height, width, values)
}

pub fn encode_pgm(img: &ImageGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.values().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<ImageGrid> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &ImageGrid) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

/// Writes an arbitrary field as a PGM after mapping `[min, max]` to `[0, 1]`.
pub fn write_pgm_scaled(path: impl AsRef<Path>, shape: (usize, usize), values: &[f64]) -> Result<()> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let scaled = values.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect();
    write_pgm(path, &ImageGrid::new(shape.0, shape.1, scaled)?)
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct BlockMeta {
    label: String,
    kind: String,
    start: usize,
    end: usize,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct DictionaryMeta {
    m: usize,
    n: usize,
    height: usize,
    width: usize,
    blocks: Vec<BlockMeta>,
}

fn pair_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save_dictionary(stem: impl AsRef<Path>, dict: &BlockedDictionary) -> Result<()> {
    let (meta_path, bin_path) = pair_paths(stem.as_ref());
    let meta = DictionaryMeta {
        m: dict.m(),
        n: dict.n(),
        height: dict.shape().0,
        width: dict.shape().1,
        blocks: dict
            .blocks()
            .iter()
            .map(|b| BlockMeta {
                label: b.label.clone(),
                kind: b.kind.to_string(),
                start: b.range.start,
                end: b.range.end,
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(meta_path, text)?;
    let mut f = fs::File::create(bin_path)?;
    let mut buf = Vec::with_capacity(dict.m() * dict.n() * 8);
    // nalgebra storage is column-major already
    for v in dict.atoms().as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_dictionary(stem: impl AsRef<Path>) -> Result<BlockedDictionary> {
    let (meta_path, bin_path) = pair_paths(stem.as_ref());
    let meta: DictionaryMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
    if meta.m != meta.height * meta.width {
        return Err(SocError::Format(format!(
            "m={} does not match {}x{}",
            meta.m, meta.height, meta.width
        )));
    }
    let raw = fs::read(bin_path)?;
    if raw.len() != meta.m * meta.n * 8 {
        return Err(SocError::Format(format!(
            "matrix file holds {} bytes, expected {}",
            raw.len(),
            meta.m * meta.n * 8
        )));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let atoms = DMatrix::from_vec(meta.m, meta.n, values);
    let blocks = meta
        .blocks
        .into_iter()
        .map(|b| {
            let kind = match b.kind.as_str() {
                "face" => BlockKind::Face,
                "occlusion" => BlockKind::Occlusion,
                other => return Err(SocError::Format(format!("unknown block kind `{other}`"))),
            };
            Ok(Block::new(b.label, kind, b.start..b.end))
        })
        .collect::<Result<Vec<_>>>()?;
    BlockedDictionary::new(atoms, blocks, (meta.height, meta.width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn pgm_roundtrip_quantized() {
        let vals: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let g = ImageGrid::new(3, 4, vals).unwrap();
        let back = decode_pgm(&encode_pgm(&g)).unwrap();
        assert_eq!(back.shape(), (3, 4));
        for (a, b) in g.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n# max\n100\n".to_vec();
        bytes.extend([0u8, 100u8]);
        let g = decode_pgm(&bytes).unwrap();
        assert_eq!(g.values(), &[0.0, 1.0]);
    }

    #[test]
    fn pgm_rejects_bad_input() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn dictionary_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cols = vec![
            DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]),
            DVector::from_vec(vec![0.5, -1.0, 0.0, 2.0]),
            DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0]),
        ];
        let d = BlockedDictionary::from_columns(
            (2, 2),
            &cols,
            vec![
                Block::new("s1", BlockKind::Face, 0..2),
                Block::new("scarf", BlockKind::Occlusion, 2..3),
            ],
        )
        .unwrap();
        let stem = dir.path().join("dict");
        save_dictionary(&stem, &d).unwrap();
        let back = load_dictionary(&stem).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.id(), d.id());
        let bin = fs::read(dir.path().join("dict.bin")).unwrap();
        // first value is column 0, row 0; second is column 0, row 1
        let v0 = f64::from_le_bytes(bin[0..8].try_into().unwrap());
        let v1 = f64::from_le_bytes(bin[8..16].try_into().unwrap());
        assert!((v0 - d.atoms()[(0, 0)]).abs() == 0.0);
        assert!((v1 - d.atoms()[(1, 0)]).abs() == 0.0);
    }
}
