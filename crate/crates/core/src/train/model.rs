use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{GridSample, PixelSetSample};
use crate::encoding::{sinusoidal_pe, TimeAxis, DEFAULT_MAX_PERIOD};
use crate::error::{Error, Result};
use crate::exchanger::{exchanger_forward_stages, ExchangerConfig, ExchangerParams};
use crate::graph::{Graph, Var};
use crate::heads::{
    cosine_logits, dense_head, mil_pool, project, temporal_pool, ClassifierConfig, ClassifierParams, DenseHeadParams,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub exchanger: ExchangerConfig,
    pub classifier: ClassifierConfig,
    pub channels: usize,
    pub n_classes: usize,
    pub max_period: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            exchanger: ExchangerConfig::default(),
            classifier: ClassifierConfig::default(),
            channels: 4,
            n_classes: 5,
            max_period: DEFAULT_MAX_PERIOD,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.exchanger.validate()?;
        if self.channels == 0 || self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least one channel and two classes, got {} and {}",
                self.channels, self.n_classes
            )));
        }
        if !self.exchanger.d.is_multiple_of(2) {
            return Err(Error::Config(format!("width {} must be even for the time embedding", self.exchanger.d)));
        }
        let c = &self.classifier;
        if c.hidden == 0 || c.proj == 0 || !(c.init_scale > 0.0 && c.init_scale.is_finite()) {
            return Err(Error::Config(format!(
                "classifier needs positive widths and a positive finite scale, got {}, {} and {}",
                c.hidden, c.proj, c.init_scale
            )));
        }
        Ok(())
    }
}

/// Rebuilds the layout from the stored config and copies every checkpoint
/// parameter into it by name; both sides must hold the same names.
fn restore<M>(
    ck: &Checkpoint,
    build: impl FnOnce(&ModelConfig, &mut ParamStore<f32>, &mut ChaCha8Rng) -> Result<M>,
) -> Result<(M, ParamStore<f32>)> {
    let cfg: ModelConfig = ck.config()?;
    let mut store = ParamStore::new();
    let model = build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    let copied = store.copy_prefix_from(&ck.params, "")?;
    if copied != store.len() {
        return Err(Error::Config(format!("checkpoint fills {copied} of {} parameters of this model", store.len())));
    }
    Ok((model, store))
}

/// Channel embedding followed by the temporal encoder, applied to every
/// pixel series independently.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub embed: (ParamId, ParamId),
    pub encoder: ExchangerParams,
    pub max_period: f64,
}

impl Backbone {
    pub fn init<T: Scalar, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let d = cfg.exchanger.d;
        let embed = (
            store.fan_in(format!("{BACKBONE_PREFIX}embed.w"), &[cfg.channels, d], rng),
            store.zeros(format!("{BACKBONE_PREFIX}embed.b"), &[d]),
        );
        let encoder = ExchangerParams::init(&cfg.exchanger, store, &format!("{BACKBONE_PREFIX}exchanger"), rng)?;
        Ok(Self {
            embed,
            encoder,
            max_period: cfg.max_period,
        })
    }

    /// The backbone part of any model checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ParamStore<f32>)> {
        let cfg: ModelConfig = ck.config()?;
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = Self::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        let copied = store.copy_prefix_from(&ck.params, BACKBONE_PREFIX)?;
        if copied != store.len() {
            return Err(Error::Config(format!("checkpoint fills {copied} of {} backbone parameters", store.len())));
        }
        Ok((backbone, store))
    }

    /// Encodes `series: [N, T, C]`; returns the `[N, T, d]` output of every
    /// stage.
    pub fn encode_stages<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        series: &Tensor<f32>,
        time: &TimeAxis,
    ) -> Result<Vec<Var>> {
        let x = g.constant(series.cast());
        let (w, b) = (g.param(store, self.embed.0), g.param(store, self.embed.1));
        let v = g.matmul(x, w)?;
        let v = g.add_bcast(v, b)?;
        let pe = sinusoidal_pe::<T>(time, self.encoder.config.d, self.max_period)?;
        let p = g.constant(pe);
        exchanger_forward_stages(g, store, &self.encoder, v, p, &time.valid)
    }

    /// Per-pixel features after temporal pooling: `[N, d]`.
    pub fn pixel_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        series: &Tensor<f32>,
        time: &TimeAxis,
    ) -> Result<Var> {
        let out = *self.encode_stages(g, store, series, time)?.last().expect("at least one stage");
        temporal_pool(g, out, &time.valid)
    }
}

/// Pixel-set bag classifier: backbone, MIL pooling, projector and cosine
/// prototypes.
#[derive(Clone, Debug)]
pub struct PixelSetClassifier {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub head: ClassifierParams,
}

impl PixelSetClassifier {
    pub fn init<T: Scalar, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::init(cfg, store, rng)?;
        let head = ClassifierParams::init(cfg.exchanger.d, cfg.n_classes, &cfg.classifier, store, "head", rng);
        Ok(Self {
            config: cfg.clone(),
            backbone,
            head,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ParamStore<f32>)> {
        restore(ck, Self::init)
    }

    /// Bag feature before the projector: `[d]`.
    pub fn bag_feature<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, s: &PixelSetSample) -> Result<Var> {
        let pixels = self.backbone.pixel_features(g, store, &s.pixel_series(), &s.time)?;
        mil_pool(g, pixels, &vec![true; s.n_pix()])
    }

    /// Class logits `[1, K]`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, s: &PixelSetSample) -> Result<Var> {
        let f = self.bag_feature(g, store, s)?;
        let f = g.reshape(f, &[1, self.config.exchanger.d])?;
        let z = project(g, store, &self.head, f)?;
        cosine_logits(g, store, &self.head, z)
    }
}

/// Per-pixel segmentation model: backbone, temporal pooling and a linear
/// head per pixel.
#[derive(Clone, Debug)]
pub struct DenseModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub head: DenseHeadParams,
}

impl DenseModel {
    pub fn init<T: Scalar, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::init(cfg, store, rng)?;
        let head = DenseHeadParams::init(cfg.exchanger.d, cfg.n_classes, store, "dense_head", rng);
        Ok(Self {
            config: cfg.clone(),
            backbone,
            head,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ParamStore<f32>)> {
        restore(ck, Self::init)
    }

    /// Logits `[P, K]` for the listed pixels of `grid` (row-major indices).
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        grid: &GridSample,
        pixels: &[usize],
    ) -> Result<Var> {
        let all = grid.pixel_series();
        let row = grid.len() * grid.channels();
        let mut data = Vec::with_capacity(pixels.len() * row);
        for &p in pixels {
            data.extend_from_slice(&all.data()[p * row..(p + 1) * row]);
        }
        let series = Tensor::new(&[pixels.len(), grid.len(), grid.channels()], data)?;
        let feats = self.backbone.pixel_features(g, store, &series, &grid.time)?;
        dense_head(g, store, &self.head, feats)
    }
}
