//! Pixel-set and grid sample types, synthetic phenology generation,
//! sampling transforms and the on-disk dataset format.

mod io;
mod synth;
mod transform;

use serde::{Deserialize, Serialize};

use crate::encoding::TimeAxis;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{read_dataset, read_dataset_from, write_dataset, write_dataset_to, DATASET_MAGIC, DATASET_VERSION};
pub use synth::{double_logistic, generate_synthetic, ClassPrior, SynthConfig, SyntheticSet};
pub use transform::{grid_to_pixelset, temporal_dropout};

/// One parcel as an unordered set of pixel time series.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSetSample {
    /// `[T, C, N_pix]`.
    pub values: Tensor<f32>,
    pub time: TimeAxis,
    pub label: usize,
    pub parcel_id: u32,
}

impl PixelSetSample {
    pub fn new(values: Tensor<f32>, time: TimeAxis, label: usize, parcel_id: u32) -> Result<Self> {
        match values.shape() {
            &[t, c, n] if t == time.len() && c >= 1 && n >= 1 => Ok(Self {
                values,
                time,
                label,
                parcel_id,
            }),
            s => Err(Error::Data(format!(
                "pixel-set values must be [T={}, C>=1, N_pix>=1], got {s:?}",
                time.len()
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_pix(&self) -> usize {
        self.values.shape()[2]
    }

    /// Values rearranged as one series per pixel: `[N_pix, T, C]`.
    pub fn pixel_series(&self) -> Tensor<f32> {
        let (t, c, n) = (self.len(), self.channels(), self.n_pix());
        let src = self.values.data();
        let mut out = vec![0.0; n * t * c];
        for ti in 0..t {
            for ci in 0..c {
                for p in 0..n {
                    out[(p * t + ti) * c + ci] = src[(ti * c + ci) * n + p];
                }
            }
        }
        Tensor::from_parts(vec![n, t, c], out)
    }
}

/// One image time series with dense labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSample {
    /// `[T, C, H, W]`.
    pub values: Tensor<f32>,
    pub time: TimeAxis,
    /// Row-major `H * W` class ids, or [`crate::IGNORE_INDEX`].
    pub semantic_labels: Vec<usize>,
    /// Row-major `H * W` parcel ids; 0 is background.
    pub parcel_ids: Vec<u32>,
}

impl GridSample {
    pub fn new(values: Tensor<f32>, time: TimeAxis, semantic_labels: Vec<usize>, parcel_ids: Vec<u32>) -> Result<Self> {
        let ok = match values.shape() {
            &[t, c, h, w] => {
                t == time.len() && c >= 1 && h >= 1 && w >= 1 && semantic_labels.len() == h * w && parcel_ids.len() == h * w
            }
            _ => false,
        };
        if !ok {
            return Err(Error::Data(format!(
                "grid values {:?} inconsistent with {} steps and {} labels",
                values.shape(),
                time.len(),
                semantic_labels.len()
            )));
        }
        Ok(Self {
            values,
            time,
            semantic_labels,
            parcel_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[3]
    }

    /// Values rearranged as one series per pixel: `[H * W, T, C]`.
    pub fn pixel_series(&self) -> Tensor<f32> {
        let (t, c) = (self.len(), self.channels());
        let n = self.height() * self.width();
        let src = self.values.data();
        let mut out = vec![0.0; n * t * c];
        for ti in 0..t {
            for ci in 0..c {
                let plane = &src[(ti * c + ci) * n..(ti * c + ci + 1) * n];
                for (p, &v) in plane.iter().enumerate() {
                    out[(p * t + ti) * c + ci] = v;
                }
            }
        }
        Tensor::from_parts(vec![n, t, c], out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    PixelSet,
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub channels: usize,
    pub class_names: Vec<String>,
}

impl DatasetMeta {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    PixelSet(Vec<PixelSetSample>),
    Grid(Vec<GridSample>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Samples,
}

impl Dataset {
    pub fn kind(&self) -> DatasetKind {
        match self.samples {
            Samples::PixelSet(_) => DatasetKind::PixelSet,
            Samples::Grid(_) => DatasetKind::Grid,
        }
    }

    pub fn len(&self) -> usize {
        match &self.samples {
            Samples::PixelSet(s) => s.len(),
            Samples::Grid(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel_sets(&self) -> Result<&[PixelSetSample]> {
        match &self.samples {
            Samples::PixelSet(s) => Ok(s),
            Samples::Grid(_) => Err(Error::Data("expected a pixel-set dataset, got a grid dataset".into())),
        }
    }

    pub fn grids(&self) -> Result<&[GridSample]> {
        match &self.samples {
            Samples::Grid(s) => Ok(s),
            Samples::PixelSet(_) => Err(Error::Data("expected a grid dataset, got a pixel-set dataset".into())),
        }
    }
}
