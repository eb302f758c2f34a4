//! Deterministic 8×8 shape-classification task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{hash64, Matrix, Rng};

pub const GRID: usize = 8;
pub const CLASSES: usize = 3;
const SHAPE_LEN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    /// Five consecutive pixels in one row.
    HorizontalBar,
    /// Five consecutive pixels in one column.
    VerticalBar,
    /// A plus sign: center pixel and its four neighbors.
    Cross,
}

impl ShapeClass {
    pub fn from_label(label: usize) -> Self {
        match label % CLASSES {
            0 => ShapeClass::HorizontalBar,
            1 => ShapeClass::VerticalBar,
            _ => ShapeClass::Cross,
        }
    }

    /// Pixel offsets relative to the shape's anchor, and the anchor ranges
    /// that keep the shape on the grid.
    fn layout(self) -> (Vec<(usize, usize)>, usize, usize) {
        match self {
            ShapeClass::HorizontalBar => ((0..SHAPE_LEN).map(|c| (0, c)).collect(), GRID, GRID - SHAPE_LEN + 1),
            ShapeClass::VerticalBar => ((0..SHAPE_LEN).map(|r| (r, 0)).collect(), GRID - SHAPE_LEN + 1, GRID),
            ShapeClass::Cross => (vec![(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)], GRID - 2, GRID - 2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub noise_std: f64,
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            noise_std: 0.5,
            seed: 0,
            train_count: 4096,
            test_count: 1024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Samples as rows of pixels (`count × 64`, row-major grid) with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pixels: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices` as a new dataset.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let cols = self.pixels.cols();
        let mut pixels = Matrix::zeros(indices.len(), cols);
        for (r, &i) in indices.iter().enumerate() {
            pixels.row_mut(r).copy_from_slice(self.pixels.row(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// One sample, a pure function of `(spec, split, index)`. The label cycles
/// through the classes with the index.
pub fn sample(spec: &ToyDatasetSpec, split: Split, index: usize) -> (Vec<f64>, usize) {
    let label = index % CLASSES;
    let stream = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut rng = Rng::seed_from_u64(hash64(spec.seed, stream, index as u64));
    let (offsets, rows, cols) = ShapeClass::from_label(label).layout();
    let (r0, c0) = (rng.below(rows), rng.below(cols));
    let mut pixels = vec![0.0; GRID * GRID];
    for (dr, dc) in offsets {
        pixels[(r0 + dr) * GRID + c0 + dc] = 1.0;
    }
    if spec.noise_std > 0.0 {
        pixels.iter_mut().for_each(|p| *p += spec.noise_std * rng.next_gaussian());
    }
    (pixels, label)
}

fn build(spec: &ToyDatasetSpec, split: Split, count: usize) -> Dataset {
    let mut pixels = Matrix::zeros(count, GRID * GRID);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let (p, label) = sample(spec, split, i);
        pixels.row_mut(i).copy_from_slice(&p);
        labels.push(label);
    }
    Dataset { pixels, labels }
}

/// Train and test splits.
pub fn gen_dataset(spec: &ToyDatasetSpec) -> Result<(Dataset, Dataset)> {
    if spec.train_count == 0 || spec.test_count == 0 {
        return Err(Error::InvalidParameter("dataset counts must be at least 1".into()));
    }
    if !(spec.noise_std.is_finite() && spec.noise_std >= 0.0) {
        return Err(Error::InvalidParameter(format!("invalid noise std {}", spec.noise_std)));
    }
    Ok((
        build(spec, Split::Train, spec.train_count),
        build(spec, Split::Test, spec.test_count),
    ))
}
