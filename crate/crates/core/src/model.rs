//! A complete counter: backbone plus either the SFSL head or a direct
//! regression head used as the baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::{self, BackboneConfig, Variant};
use crate::error::{Error, Result};
use crate::glc::{partition_image, resize_bilinear, PartitionGrid};
use crate::params::{Bound, ParamStore};
use crate::sfsl::{self, SfslHeadConfig, F_HAT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// Similarity-based probability and density maps, then a regressor.
    Sfsl,
    /// Baseline: regress the count straight from backbone outputs.
    Direct,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Sfsl => "sfsl",
            HeadKind::Direct => "direct",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadKind,
    /// Hidden widths of the conv-variant regressor MLP.
    pub mlp_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::conv_default(),
            head: HeadKind::Sfsl,
            mlp_hidden: vec![128, 64],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.variant == Variant::Conv && self.mlp_hidden.is_empty() {
            return Err(Error::config("mlp_hidden", "needs at least one hidden layer"));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::config("mlp_hidden", "widths must be positive"));
        }
        Ok(())
    }

    pub fn sfsl_head(&self) -> SfslHeadConfig {
        SfslHeadConfig {
            variant: self.backbone.variant,
            positions: self.backbone.positions(),
            feature_dim: self.backbone.feature_dim,
            hidden: self.mlp_hidden.clone(),
        }
    }
}

/// Tape nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// Predicted count, `[1]`.
    pub count: Var,
    /// Probability map `p` (SFSL head only).
    pub probability: Option<Var>,
    /// Density map `d` (SFSL head on the conv backbone only).
    pub density: Option<Var>,
}

/// Evaluated [`ModelOutput`].
#[derive(Clone, Debug, PartialEq)]
pub struct MapValues {
    pub count: f64,
    pub probability: Option<Tensor>,
    pub density: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountingModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// When set, whole-image predictions are the sum over these tiles
    /// (for models trained on patch labels).
    pub inference_tiles: Option<PartitionGrid>,
}

fn init_direct_head(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    let bb = &config.backbone;
    match bb.variant {
        Variant::Conv => {
            let mut widths = vec![bb.positions()];
            widths.extend(&config.mlp_hidden);
            widths.push(1);
            sfsl::init_dense_stack(&mut p, rng, "head.fc", &widths)?;
        }
        Variant::Token => sfsl::init_dense_stack(&mut p, rng, "head.out", &[bb.feature_dim, 1])?,
    }
    Ok(p)
}

impl CountingModel {
    /// Backbone weights come from `seed`; head weights from stream 1 of the
    /// same seed, so changing the head never perturbs the backbone init.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = backbone::init_params(&config.backbone, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let head = match config.head {
            HeadKind::Sfsl => sfsl::init_head(&config.sfsl_head(), &mut rng)?,
            HeadKind::Direct => init_direct_head(&config, &mut rng)?,
        };
        params.extend(head)?;
        Ok(Self {
            config,
            params,
            inference_tiles: None,
        })
    }

    /// Wraps existing parameters after checking every expected name is present.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("from_params", got.shape(), t.shape()));
            }
        }
        if params.len() != reference.params.len() {
            let extra = params.names().find(|n| !reference.params.contains(n)).unwrap_or("");
            return Err(Error::invalid("from_params", format!("unexpected parameter `{extra}`")));
        }
        Ok(Self {
            config,
            params,
            inference_tiles: None,
        })
    }

    pub fn input_size(&self) -> usize {
        self.config.backbone.input_size
    }

    /// The learned unbiased feature, if this model has an SFSL head.
    pub fn f_hat(&self) -> Option<&Tensor> {
        self.params.get(F_HAT).ok()
    }

    /// Records one image (already at the input size) on `tape`.
    pub fn forward(&self, bound: &Bound, tape: &mut Tape, image: &Tensor) -> Result<ModelOutput> {
        let bb = &self.config.backbone;
        match (bb.variant, self.config.head) {
            (Variant::Conv, HeadKind::Sfsl) => {
                let fm = backbone::extract_features(bb, bound, tape, image)?;
                let inv_s = backbone::inverse_scale_map(bb, bound, tape, &fm)?;
                let p = sfsl::probability_map(tape, &fm, bound.get(F_HAT)?)?;
                let d = sfsl::density_map(tape, p, inv_s)?;
                let count = sfsl::regress_count(tape, bound, &self.config.sfsl_head(), d, p)?;
                Ok(ModelOutput {
                    count,
                    probability: Some(p),
                    density: Some(d),
                })
            }
            (Variant::Conv, HeadKind::Direct) => {
                let fm = backbone::extract_features(bb, bound, tape, image)?;
                let s = backbone::inverse_scale_map(bb, bound, tape, &fm)?;
                let row = tape.reshape(s, &[1, fm.positions()])?;
                let out = sfsl::dense_stack(tape, bound, "head.fc", self.config.mlp_hidden.len() + 1, row)?;
                Ok(ModelOutput {
                    count: tape.reshape(out, &[1])?,
                    probability: None,
                    density: None,
                })
            }
            (Variant::Token, HeadKind::Sfsl) => {
                let enc = backbone::attention_encode(bb, bound, tape, image)?;
                let p = tape.cosine_rows(enc.tokens, bound.get(F_HAT)?)?;
                let count = sfsl::regress_count(tape, bound, &self.config.sfsl_head(), enc.class_vector, p)?;
                Ok(ModelOutput {
                    count,
                    probability: Some(p),
                    density: None,
                })
            }
            (Variant::Token, HeadKind::Direct) => {
                let enc = backbone::attention_encode(bb, bound, tape, image)?;
                let row = tape.reshape(enc.class_vector, &[1, bb.feature_dim])?;
                let out = sfsl::dense_stack(tape, bound, "head.out", 1, row)?;
                Ok(ModelOutput {
                    count: tape.reshape(out, &[1])?,
                    probability: None,
                    density: None,
                })
            }
        }
    }

    fn fit(&self, image: &Tensor) -> Result<Tensor> {
        resize_bilinear(image, self.input_size(), self.input_size())
    }

    /// Count prediction for one image of any size, resized to the input size.
    /// Ignores [`Self::inference_tiles`].
    pub fn predict_item(&self, image: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let out = self.forward(&bound, &mut tape, &self.fit(image)?)?;
        let c = tape.value(out.count).item()?;
        if !c.is_finite() {
            return Err(Error::NonFinite {
                context: format!("prediction {c}"),
            });
        }
        Ok(c)
    }

    /// Count and map values for one image, resized to the input size.
    pub fn predict_maps(&self, image: &Tensor) -> Result<MapValues> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let out = self.forward(&bound, &mut tape, &self.fit(image)?)?;
        Ok(MapValues {
            count: tape.value(out.count).item()?,
            probability: out.probability.map(|v| tape.value(v).clone()),
            density: out.density.map(|v| tape.value(v).clone()),
        })
    }

    /// Whole-image count, summing tile predictions when the model was trained
    /// on patches.
    pub fn predict(&self, image: &Tensor) -> Result<f64> {
        match self.inference_tiles {
            None => self.predict_item(image),
            Some(grid) => partition_image(image, grid)?
                .iter()
                .map(|t| self.predict_item(t))
                .sum(),
        }
    }

    /// Global prediction and the per-tile predictions for `grid`.
    pub fn predict_global_local(&self, image: &Tensor, grid: PartitionGrid) -> Result<(f64, Vec<f64>)> {
        let global = self.predict_item(image)?;
        let locals = partition_image(image, grid)?
            .iter()
            .map(|t| self.predict_item(t))
            .collect::<Result<Vec<_>>>()?;
        Ok((global, locals))
    }
}
