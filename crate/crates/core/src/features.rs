//! Feature maps, datasets, global pooling and the `.fmb` interchange format.
//!
//! Layout of [`FeatureMap::values`] is position-major with the channel index
//! varying fastest: value `(row, col, ch)` lives at `(row * W + col) * E + ch`.
//!
//! `.fmb` layout (all integers little-endian, no padding):
//!
//! ```text
//! 0..8    magic "MODEFMB1"
//! 8..12   u32 version = 1
//! 12..28  u32 count, H, W, E
//! 28..32  u32 class_count
//!         count x (i32 label, H*W*E x f32 values)
//!         u32 metadata entries, each (u32 len, key bytes, u32 len, value bytes)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::{read_file, Reader, Writer};
use crate::error::{contract, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{all_finite, Scalar};

pub const FMB_MAGIC: &[u8; 8] = b"MODEFMB1";
pub const FMB_VERSION: u32 = 1;

/// Label reserved for examples without an ID class (OOD test data).
pub const NO_LABEL: i32 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MapShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl MapShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        contract!(
            height >= 1 && width >= 1 && channels >= 1,
            "feature map shape must be positive, got {height}x{width}x{channels}"
        );
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    #[inline]
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.positions() * self.channels
    }

    pub fn is_even_grid(&self) -> bool {
        self.height.is_multiple_of(2) && self.width.is_multiple_of(2)
    }
}

/// One example's `H x W` grid of `E`-dimensional local representations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    shape: MapShape,
    values: Vec<T>,
    label: i32,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(shape: MapShape, values: Vec<T>, label: i32) -> Result<Self> {
        contract!(
            values.len() == shape.len(),
            "feature map holds {} values, shape {}x{}x{} needs {}",
            values.len(),
            shape.height,
            shape.width,
            shape.channels,
            shape.len()
        );
        if !all_finite(&values) {
            return Err(Error::Validation("feature map contains non-finite values".into()));
        }
        Ok(Self {
            shape,
            values,
            label,
        })
    }

    /// Builds a map from an `(H*W) x E` matrix whose rows are positions.
    pub fn from_rows(shape: MapShape, rows: &Matrix<T>, label: i32) -> Result<Self> {
        contract!(
            rows.rows() == shape.positions() && rows.cols() == shape.channels,
            "row matrix {}x{} does not match map shape",
            rows.rows(),
            rows.cols()
        );
        Self::new(shape, rows.as_slice().to_vec(), label)
    }

    #[inline]
    pub fn shape(&self) -> MapShape {
        self.shape
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    #[inline]
    pub fn label(&self) -> i32 {
        self.label
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// The `E` channels at flat position `idx = row * W + col`.
    #[inline]
    pub fn position(&self, idx: usize) -> &[T] {
        let e = self.shape.channels;
        &self.values[idx * e..(idx + 1) * e]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[T] {
        self.position(row * self.shape.width + col)
    }

    pub fn positions(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.shape.channels)
    }

    /// Positions as an `(H*W) x E` matrix.
    pub fn to_rows(&self) -> Matrix<T> {
        Matrix::new(self.shape.positions(), self.shape.channels, self.values.clone())
            .expect("shape invariant")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalVector<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> GlobalVector<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Channel-wise arithmetic mean over all positions.
pub fn global_pool<T: Scalar>(map: &FeatureMap<T>) -> GlobalVector<T> {
    GlobalVector {
        values: mean_of_positions(map, 0..map.height(), 0..map.width()),
    }
}

pub(crate) fn mean_of_positions<T: Scalar>(
    map: &FeatureMap<T>,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> Vec<T> {
    let mut acc = vec![T::zero(); map.channels()];
    let mut n = 0usize;
    for r in rows {
        for c in cols.clone() {
            for (a, &v) in acc.iter_mut().zip(map.at(r, c)) {
                *a = *a + v;
            }
            n += 1;
        }
    }
    let inv = T::one() / T::count(n);
    acc.iter_mut().for_each(|a| *a = *a * inv);
    acc
}

/// Stride-2 `2x2` average pooling. Output is `(H/2) x (W/2) x E`.
pub fn pool2x2<T: Scalar>(map: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    contract!(
        map.shape().is_even_grid(),
        "2x2 pooling needs an even grid, got {}x{}",
        map.height(),
        map.width()
    );
    let out_shape = MapShape::new(map.height() / 2, map.width() / 2, map.channels())?;
    let mut values = Vec::with_capacity(out_shape.len());
    for r in 0..out_shape.height {
        for c in 0..out_shape.width {
            values.extend(mean_of_positions(map, 2 * r..2 * r + 2, 2 * c..2 * c + 2));
        }
    }
    FeatureMap::new(out_shape, values, map.label())
}

/// Ordered collection of equally shaped feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset<T> {
    shape: MapShape,
    maps: Vec<FeatureMap<T>>,
    class_count: u32,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Scalar> FeatureDataset<T> {
    pub fn new(shape: MapShape, maps: Vec<FeatureMap<T>>, class_count: u32) -> Result<Self> {
        for (i, m) in maps.iter().enumerate() {
            contract!(
                m.shape() == shape,
                "map {i} has shape {:?}, dataset declares {:?}",
                m.shape(),
                shape
            );
            if m.label() != NO_LABEL && (m.label() < 0 || m.label() as u32 >= class_count) {
                return Err(Error::Validation(format!(
                    "map {i} label {} outside [0, {class_count})",
                    m.label()
                )));
            }
        }
        Ok(Self {
            shape,
            maps,
            class_count,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn shape(&self) -> MapShape {
        self.shape
    }

    pub fn maps(&self) -> &[FeatureMap<T>] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn class_count(&self) -> u32 {
        self.class_count
    }

    pub fn labels(&self) -> Vec<i32> {
        self.maps.iter().map(FeatureMap::label).collect()
    }

    pub fn is_labeled(&self) -> bool {
        self.maps.iter().all(|m| m.label() >= 0)
    }
}

pub fn save_features<T: Scalar>(dataset: &FeatureDataset<T>, path: &Path) -> Result<()> {
    let shape = dataset.shape();
    let mut w = Writer::default();
    w.bytes(FMB_MAGIC);
    w.u32(FMB_VERSION);
    w.len_u32(dataset.len(), path, "count")?;
    w.len_u32(shape.height, path, "height")?;
    w.len_u32(shape.width, path, "width")?;
    w.len_u32(shape.channels, path, "channels")?;
    w.u32(dataset.class_count());
    for map in dataset.maps() {
        w.i32(map.label());
        for &v in map.values() {
            w.f32(v.as_f32());
        }
    }
    w.len_u32(dataset.metadata.len(), path, "metadata entries")?;
    for (k, v) in &dataset.metadata {
        w.len_u32(k.len(), path, "metadata key")?;
        w.bytes(k.as_bytes());
        w.len_u32(v.len(), path, "metadata value")?;
        w.bytes(v.as_bytes());
    }
    w.finish(path)
}

pub fn load_features<T: Scalar>(path: &Path) -> Result<FeatureDataset<T>> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(FMB_MAGIC)?;
    r.version(FMB_VERSION)?;
    let count = r.u32("count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let e = r.u32("channels")? as usize;
    let class_count = r.u32("class_count")?;
    let shape = MapShape::new(h, w, e).map_err(|_| r.format_err(format!("invalid shape {h}x{w}x{e}")))?;

    let mut maps = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let label = r.i32("label")?;
        let raw = r.f32s(shape.len(), "map values")?;
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{}: map {i} contains non-finite values",
                path.display()
            )));
        }
        let values = raw.into_iter().map(|v| T::lit(v as f64)).collect();
        maps.push(
            FeatureMap::new(shape, values, label)
                .map_err(|e| Error::Validation(format!("{}: map {i}: {e}", path.display())))?,
        );
    }
    let entries = r.u32("metadata count")?;
    let mut metadata = BTreeMap::new();
    for _ in 0..entries {
        let k = r.string("metadata key")?;
        let v = r.string("metadata value")?;
        metadata.insert(k, v);
    }
    r.finish()?;
    let mut ds = FeatureDataset::new(shape, maps, class_count)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    ds.metadata = metadata;
    Ok(ds)
}
