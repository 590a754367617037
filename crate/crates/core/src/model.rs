//! Images, block-structured dictionaries and the residual primitives shared by
//! every other module.
//!
//! Grayscale intensities live in `[0, 1]` as `f64`. Vectors are the row-major
//! flattening of a grid; dictionaries store one vector per column together with
//! a block map that assigns contiguous column ranges to face classes or
//! occlusion categories. Face blocks always precede occlusion blocks.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SocError};

/// Unit-norm tolerance for dictionary atoms and normalized vectors.
pub const UNIT_TOL: f64 = 1e-9;

/// A grayscale image, row-major, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(SocError::BadDims(format!("{height}x{width} grid")));
        }
        if width * height != values.len() {
            return Err(SocError::DimMismatch {
                expected: width * height,
                got: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(SocError::InvalidImage(format!("intensity {v} outside [0,1]")));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Row-major flattening, optionally scaled to unit l2 norm.
    pub fn vectorize(&self, normalize: bool) -> Result<ImageVector> {
        let v = ImageVector::new(self.shape(), self.values.clone())?;
        if normalize {
            v.normalized()
        } else {
            Ok(v)
        }
    }

    /// Block-average downsampling over a uniform partition of the source grid.
    ///
    /// Partition boundaries are `round(k * src / target)`, so every output
    /// pixel averages a non-empty rectangle and the global mean is preserved
    /// exactly whenever the target divides the source.
    pub fn downsample(&self, target_h: usize, target_w: usize) -> Result<ImageGrid> {
        let values = downsample_values(&self.values, self.shape(), (target_h, target_w))?;
        // averages of [0,1] values stay in [0,1] up to rounding
        let values = values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        ImageGrid::new(target_h, target_w, values)
    }
}

/// Block-average downsampling of any row-major field (signed values allowed).
pub fn downsample_values(
    values: &[f64],
    (src_h, src_w): (usize, usize),
    (dst_h, dst_w): (usize, usize),
) -> Result<Vec<f64>> {
    if dst_h == 0 || dst_w == 0 || dst_h > src_h || dst_w > src_w {
        return Err(SocError::BadDims(format!(
            "cannot downsample {src_h}x{src_w} to {dst_h}x{dst_w}"
        )));
    }
    if values.len() != src_h * src_w {
        return Err(SocError::DimMismatch {
            expected: src_h * src_w,
            got: values.len(),
        });
    }
    let bounds = |src: usize, dst: usize| -> Vec<usize> {
        (0..=dst)
            .map(|k| ((k * src) as f64 / dst as f64).round() as usize)
            .collect()
    };
    let rb = bounds(src_h, dst_h);
    let cb = bounds(src_w, dst_w);
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for i in 0..dst_h {
        for j in 0..dst_w {
            let mut acc = 0.0;
            for r in rb[i]..rb[i + 1] {
                let row = &values[r * src_w..(r + 1) * src_w];
                acc += row[cb[j]..cb[j + 1]].iter().sum::<f64>();
            }
            let count = (rb[i + 1] - rb[i]) * (cb[j + 1] - cb[j]);
            out.push(acc / count as f64);
        }
    }
    Ok(out)
}

/// A flattened image (or signed image-shaped field such as an error map).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageVector {
    data: DVector<f64>,
    shape: (usize, usize),
    normalized: bool,
}

impl ImageVector {
    pub fn new(shape: (usize, usize), data: Vec<f64>) -> Result<Self> {
        Self::from_dvector(shape, DVector::from_vec(data))
    }

    pub fn from_dvector(shape: (usize, usize), data: DVector<f64>) -> Result<Self> {
        if shape.0 * shape.1 != data.len() {
            return Err(SocError::DimMismatch {
                expected: shape.0 * shape.1,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SocError::InvalidImage("non-finite value".into()));
        }
        let normalized = (data.norm() - 1.0).abs() <= UNIT_TOL;
        Ok(Self { data, shape, normalized })
    }

    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            data: DVector::zeros(shape.0 * shape.1),
            shape,
            normalized: false,
        }
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.data.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(SocError::ZeroNorm);
        }
        Ok(Self {
            data: &self.data / n,
            shape: self.shape,
            normalized: true,
        })
    }

    /// Interprets the data as intensities and rebuilds a grid.
    pub fn to_grid(&self) -> Result<ImageGrid> {
        ImageGrid::new(self.shape.0, self.shape.1, self.data.as_slice().to_vec())
    }

    /// Block-average downsampling of the raw values; the result is not renormalized.
    pub fn downsample(&self, target_h: usize, target_w: usize) -> Result<ImageVector> {
        let v = downsample_values(self.data.as_slice(), self.shape, (target_h, target_w))?;
        ImageVector::new((target_h, target_w), v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Face,
    Occlusion,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Face => f.write_str("face"),
            BlockKind::Occlusion => f.write_str("occlusion"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub kind: BlockKind,
    pub range: Range<usize>,
}

impl Block {
    pub fn new(label: impl Into<String>, kind: BlockKind, range: Range<usize>) -> Self {
        Self {
            label: label.into(),
            kind,
            range,
        }
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

/// Column-stacked unit-norm atoms with a contiguous block map (`R = [D, B]`).
#[derive(Clone, Debug)]
pub struct BlockedDictionary {
    atoms: DMatrix<f64>,
    blocks: Vec<Block>,
    shape: (usize, usize),
    id: u64,
}

impl PartialEq for BlockedDictionary {
    fn eq(&self, other: &Self) -> bool {
        self.atoms == other.atoms && self.blocks == other.blocks && self.shape == other.shape
    }
}

impl BlockedDictionary {
    /// Validates the block layout and the unit norm of every column.
    pub fn new(atoms: DMatrix<f64>, blocks: Vec<Block>, shape: (usize, usize)) -> Result<Self> {
        if shape.0 * shape.1 != atoms.nrows() {
            return Err(SocError::DimMismatch {
                expected: shape.0 * shape.1,
                got: atoms.nrows(),
            });
        }
        let mut next = 0;
        let mut seen = HashSet::new();
        let mut in_occlusion = false;
        for b in &blocks {
            if b.range.start != next || b.range.end <= b.range.start {
                return Err(SocError::InvalidDictionary(format!(
                    "block `{}` spans {:?}, expected to start at column {next}",
                    b.label, b.range
                )));
            }
            if !seen.insert(b.label.as_str()) {
                return Err(SocError::DuplicateLabel(b.label.clone()));
            }
            match b.kind {
                BlockKind::Occlusion => in_occlusion = true,
                BlockKind::Face if in_occlusion => {
                    return Err(SocError::InvalidDictionary(format!(
                        "face block `{}` follows an occlusion block",
                        b.label
                    )))
                }
                BlockKind::Face => {}
            }
            next = b.range.end;
        }
        if next != atoms.ncols() {
            return Err(SocError::InvalidDictionary(format!(
                "blocks cover {next} of {} columns",
                atoms.ncols()
            )));
        }
        for (j, col) in atoms.column_iter().enumerate() {
            let n = col.norm();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(SocError::InvalidDictionary(format!(
                    "column {j} has norm {n}"
                )));
            }
        }
        let id = fingerprint(&atoms, &blocks);
        Ok(Self {
            atoms,
            blocks,
            shape,
            id,
        })
    }

    /// Builds a dictionary from raw columns, normalizing each to unit norm.
    pub fn from_columns(
        shape: (usize, usize),
        columns: &[DVector<f64>],
        blocks: Vec<Block>,
    ) -> Result<Self> {
        let m = shape.0 * shape.1;
        let mut atoms = DMatrix::zeros(m, columns.len());
        for (j, c) in columns.iter().enumerate() {
            if c.len() != m {
                return Err(SocError::DimMismatch {
                    expected: m,
                    got: c.len(),
                });
            }
            let n = c.norm();
            if n == 0.0 {
                return Err(SocError::ZeroNorm);
            }
            atoms.set_column(j, &(c / n));
        }
        Self::new(atoms, blocks, shape)
    }

    /// One block per label, in first-appearance order of `labels`.
    ///
    /// Columns sharing a label must be adjacent.
    pub fn from_labeled(
        shape: (usize, usize),
        columns: &[DVector<f64>],
        labels: &[String],
        kind: BlockKind,
    ) -> Result<Self> {
        if columns.len() != labels.len() {
            return Err(SocError::DimMismatch {
                expected: columns.len(),
                got: labels.len(),
            });
        }
        let mut blocks: Vec<Block> = Vec::new();
        for (j, l) in labels.iter().enumerate() {
            match blocks.last_mut() {
                Some(b) if &b.label == l => b.range.end = j + 1,
                _ => blocks.push(Block::new(l.clone(), kind, j..j + 1)),
            }
        }
        Self::from_columns(shape, columns, blocks)
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Feature dimension.
    pub fn m(&self) -> usize {
        self.atoms.nrows()
    }

    /// Atom count.
    pub fn n(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn block(&self, label: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.label == label)
            .ok_or_else(|| SocError::UnknownLabel(label.to_string()))
    }

    pub fn face_blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.iter().filter(|b| b.kind == BlockKind::Face)
    }

    pub fn occlusion_blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.iter().filter(|b| b.kind == BlockKind::Occlusion)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.label.as_str()).collect()
    }

    /// The sub-dictionary holding only the labeled block.
    pub fn sub_dictionary(&self, label: &str) -> Result<BlockedDictionary> {
        let b = self.block(label)?;
        let atoms = self.atoms.columns(b.range.start, b.len()).into_owned();
        BlockedDictionary::new(
            atoms,
            vec![Block::new(b.label.clone(), b.kind, 0..b.len())],
            self.shape,
        )
    }

    /// Dictionary restricted to the listed columns, as a single block.
    pub fn select_columns(
        &self,
        columns: &[usize],
        label: &str,
        kind: BlockKind,
    ) -> Result<BlockedDictionary> {
        if columns.is_empty() {
            return Err(SocError::InvalidDictionary("empty column selection".into()));
        }
        let atoms = self.atoms.select_columns(columns);
        BlockedDictionary::new(atoms, vec![Block::new(label, kind, 0..columns.len())], self.shape)
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.atoms.column(j).into_owned()
    }

    /// Mean block sizes of the face and occlusion parts (0 when a part is empty).
    pub fn mean_block_sizes(&self) -> (f64, f64) {
        let mean = |it: Vec<usize>| {
            if it.is_empty() {
                0.0
            } else {
                it.iter().sum::<usize>() as f64 / it.len() as f64
            }
        };
        (
            mean(self.face_blocks().map(Block::len).collect()),
            mean(self.occlusion_blocks().map(Block::len).collect()),
        )
    }

    /// `R * coef` as an image-shaped vector.
    pub fn reconstruct(&self, coef: &SparseCoefficients) -> Result<ImageVector> {
        self.check(coef)?;
        ImageVector::from_dvector(self.shape, &self.atoms * &coef.values)
    }

    fn check(&self, coef: &SparseCoefficients) -> Result<()> {
        if coef.values.len() != self.n() {
            return Err(SocError::DimMismatch {
                expected: self.n(),
                got: coef.values.len(),
            });
        }
        if coef.dict_id != self.id {
            return Err(SocError::WrongDictionary);
        }
        Ok(())
    }
}

fn fingerprint(atoms: &DMatrix<f64>, blocks: &[Block]) -> u64 {
    const PRIME: u64 = 0x100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    eat(&(atoms.nrows() as u64).to_le_bytes());
    eat(&(atoms.ncols() as u64).to_le_bytes());
    for v in atoms.iter() {
        eat(&v.to_bits().to_le_bytes());
    }
    for b in blocks {
        eat(b.label.as_bytes());
        eat(&[b.kind as u8]);
        eat(&(b.range.start as u64).to_le_bytes());
    }
    h
}

/// Coefficients aligned to the columns of one dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCoefficients {
    pub values: DVector<f64>,
    pub dict_id: u64,
}

impl SparseCoefficients {
    pub fn new(dict: &BlockedDictionary, values: DVector<f64>) -> Result<Self> {
        if values.len() != dict.n() {
            return Err(SocError::DimMismatch {
                expected: dict.n(),
                got: values.len(),
            });
        }
        Ok(Self {
            values,
            dict_id: dict.id(),
        })
    }

    pub fn zeros(dict: &BlockedDictionary) -> Self {
        Self {
            values: DVector::zeros(dict.n()),
            dict_id: dict.id(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block_norm(&self, block: &Block) -> f64 {
        self.values.rows(block.range.start, block.len()).norm()
    }
}

/// Keeps the labeled block, zeroes everything else.
pub fn block_select(
    coef: &SparseCoefficients,
    dict: &BlockedDictionary,
    label: &str,
) -> Result<SparseCoefficients> {
    dict.check(coef)?;
    let b = dict.block(label)?;
    let mut values = DVector::zeros(coef.len());
    values
        .rows_mut(b.range.start, b.len())
        .copy_from(&coef.values.rows(b.range.start, b.len()));
    Ok(SparseCoefficients {
        values,
        dict_id: coef.dict_id,
    })
}

/// `‖u − R·masked(coef)‖₂`, where blocks outside `keep_labels` are zeroed.
pub fn residual<S: AsRef<str>>(
    u: &ImageVector,
    dict: &BlockedDictionary,
    coef: &SparseCoefficients,
    keep_labels: &[S],
) -> Result<f64> {
    dict.check(coef)?;
    if u.len() != dict.m() {
        return Err(SocError::DimMismatch {
            expected: dict.m(),
            got: u.len(),
        });
    }
    let mut masked = DVector::zeros(coef.len());
    for l in keep_labels {
        let b = dict.block(l.as_ref())?;
        masked
            .rows_mut(b.range.start, b.len())
            .copy_from(&coef.values.rows(b.range.start, b.len()));
    }
    Ok((u.data() - dict.atoms() * masked).norm())
}

/// Binary support over the image grid: 1 = non-occluded, 0 = occluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcclusionMask {
    support: Vec<u8>,
    shape: (usize, usize),
}

impl OcclusionMask {
    pub fn new(shape: (usize, usize), support: Vec<u8>) -> Result<Self> {
        if shape.0 * shape.1 != support.len() {
            return Err(SocError::DimMismatch {
                expected: shape.0 * shape.1,
                got: support.len(),
            });
        }
        if support.iter().any(|&z| z > 1) {
            return Err(SocError::InvalidImage("mask values must be 0 or 1".into()));
        }
        Ok(Self { support, shape })
    }

    pub fn all_ones(shape: (usize, usize)) -> Self {
        Self {
            support: vec![1; shape.0 * shape.1],
            shape,
        }
    }

    pub fn support(&self) -> &[u8] {
        &self.support
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn non_occluded(&self) -> usize {
        self.support.iter().filter(|&&z| z == 1).count()
    }

    pub fn occluded(&self) -> usize {
        self.len() - self.non_occluded()
    }

    /// Intersection-over-union of the occluded (zero) sets.
    pub fn occlusion_iou(&self, other: &OcclusionMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.support.iter().zip(&other.support) {
            let (oa, ob) = (*a == 0, *b == 0);
            inter += (oa && ob) as usize;
            union += (oa || ob) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Mask as an intensity image (1 → white).
    pub fn to_grid(&self) -> ImageGrid {
        ImageGrid {
            width: self.shape.1,
            height: self.shape.0,
            values: self.support.iter().map(|&z| z as f64).collect(),
        }
    }
}

/// Label decision for one side (face or occlusion) of a classification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decision {
    Label(String),
    Rejected,
    /// Fewer than two candidate blocks: not a classification task.
    NotApplicable,
}

impl Decision {
    pub fn label(&self) -> Option<&str> {
        match self {
            Decision::Label(l) => Some(l),
            _ => None,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Label(l) => f.write_str(l),
            Decision::Rejected => f.write_str("REJECTED"),
            Decision::NotApplicable => f.write_str("NONE"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassificationOutcome {
    pub face_label: Decision,
    pub occlusion_label: Decision,
    /// Winner before rejection (argmin of the face residuals).
    pub face_argmin: String,
    pub occlusion_argmin: Option<String>,
    pub face_residuals: Vec<(String, f64)>,
    pub occlusion_residuals: Vec<(String, f64)>,
    pub rdi_face: f64,
    pub rdi_occlusion: Option<f64>,
    pub coefficients: SparseCoefficients,
}
