//! Run configuration files: `key = value` lines, `#` comments, every key
//! optional. The digest hashes the canonical listing of all effective values.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, ConvConfig, TokenConfig, Variant};
use crate::datagen::DatasetSpec;
use crate::error::{Error, Result};
use crate::glc::{AdamConfig, LocalLoss, PartitionGrid, TrainConfig};
use crate::model::{HeadKind, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub head: HeadKind,
    pub input_size: usize,
    pub feature_dim: usize,
    pub conv: ConvConfig,
    pub token: TokenConfig,
    pub mlp_hidden: Vec<usize>,

    pub grid: PartitionGrid,
    pub alpha: f64,
    pub local_loss: LocalLoss,
    pub glc_detach_global: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub track_consistency: bool,

    pub seed: u64,
    /// Seeds of the multi-seed suites.
    pub seeds: Vec<u64>,
    /// Train on exactly labeled patches and predict whole images as patch sums.
    pub patch_label_mode: bool,
    pub patch_grid: PartitionGrid,
    /// The first `train_scenes` scenes of a dataset train; the rest test.
    pub train_scenes: usize,
    /// Label deviation applied to training counts.
    pub label_noise_sigma: f64,
    pub sigmas: Vec<f64>,
    /// Adds the direct and plain-SFSL token arms to the ablation suite.
    pub token_ablation: bool,
    /// Record elapsed seconds in result files. Off keeps reruns byte-identical.
    pub wall_clock: bool,

    pub dataset: DatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bb = BackboneConfig::conv_default();
        let tc = TrainConfig::default();
        Self {
            variant: bb.variant,
            head: HeadKind::Sfsl,
            input_size: bb.input_size,
            feature_dim: bb.feature_dim,
            conv: bb.conv,
            token: bb.token,
            mlp_hidden: tc.model.mlp_hidden.clone(),
            grid: tc.grid,
            alpha: tc.alpha,
            local_loss: tc.local_loss,
            glc_detach_global: tc.detach_global,
            batch_size: tc.batch_size,
            epochs: tc.epochs,
            adam: tc.adam,
            track_consistency: tc.track_consistency,
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            patch_label_mode: false,
            patch_grid: PartitionGrid { rows: 2, cols: 3 },
            train_scenes: 200,
            label_noise_sigma: 0.0,
            sigmas: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            token_ablation: false,
            wall_clock: false,
            dataset: DatasetSpec::default(),
        }
    }
}

fn parse_grid(s: &str) -> Option<PartitionGrid> {
    let (r, c) = s.split_once(['x', 'X'])?;
    PartitionGrid::new(r.trim().parse().ok()?, c.trim().parse().ok()?).ok()
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    s.split(',').map(|v| v.trim().parse().ok()).collect()
}

fn fmt_list<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            variant: self.variant,
            input_size: self.input_size,
            feature_dim: self.feature_dim,
            conv: self.conv.clone(),
            token: self.token.clone(),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone(),
            head: self.head,
            mlp_hidden: self.mlp_hidden.clone(),
        }
    }

    /// Training settings for one run with `seed`.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            model: self.model(),
            grid: self.grid,
            alpha: self.alpha,
            local_loss: self.local_loss,
            detach_global: self.glc_detach_global,
            batch_size: self.batch_size,
            epochs: self.epochs,
            adam: self.adam.clone(),
            seed,
            track_consistency: self.track_consistency,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(self.seed).validate()?;
        self.dataset.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "needs at least one seed"));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::config("sigmas", format!("{s} is not a non-negative number")));
        }
        if !(self.label_noise_sigma >= 0.0 && self.label_noise_sigma.is_finite()) {
            return Err(Error::config("label_noise_sigma", "must be non-negative"));
        }
        if self.train_scenes == 0 {
            return Err(Error::config("train_scenes", "must be positive"));
        }
        Ok(())
    }

    /// Sorted `key = value` lines covering every setting.
    pub fn canonical(&self) -> String {
        let d = &self.dataset;
        let mut kv: Vec<(&str, String)> = vec![
            ("variant", self.variant.as_str().into()),
            ("head", self.head.as_str().into()),
            ("input_size", self.input_size.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("conv_layers", self.conv.layers.to_string()),
            ("conv_kernel", self.conv.kernel.to_string()),
            ("conv_downsample", self.conv.downsample.to_string()),
            ("token_patch", self.token.patch.to_string()),
            ("token_layers", self.token.layers.to_string()),
            ("token_heads", self.token.heads.to_string()),
            ("token_mlp_hidden", self.token.mlp_hidden.to_string()),
            ("mlp_hidden", fmt_list(&self.mlp_hidden)),
            ("grid", self.grid.to_string()),
            ("alpha", format!("{:?}", self.alpha)),
            ("local_loss", self.local_loss.as_str().into()),
            ("glc_detach_global", self.glc_detach_global.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", format!("{:?}", self.adam.lr)),
            ("beta1", format!("{:?}", self.adam.beta1)),
            ("beta2", format!("{:?}", self.adam.beta2)),
            ("adam_eps", format!("{:?}", self.adam.eps)),
            ("weight_decay", format!("{:?}", self.adam.weight_decay)),
            ("track_consistency", self.track_consistency.to_string()),
            ("seed", self.seed.to_string()),
            ("seeds", fmt_list(&self.seeds)),
            ("patch_label_mode", self.patch_label_mode.to_string()),
            ("patch_grid", self.patch_grid.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("label_noise_sigma", format!("{:?}", self.label_noise_sigma)),
            ("sigmas", fmt_list(&self.sigmas)),
            ("token_ablation", self.token_ablation.to_string()),
            ("wall_clock", self.wall_clock.to_string()),
            ("num_scenes", d.num_scenes.to_string()),
            ("image_size", d.image_size.to_string()),
            ("count_min", d.count_min.to_string()),
            ("count_max", d.count_max.to_string()),
            ("blob_sigma_min", format!("{:?}", d.blob_sigma_range.0)),
            ("blob_sigma_max", format!("{:?}", d.blob_sigma_range.1)),
            ("background_noise_std", format!("{:?}", d.background_noise_std)),
            ("perspective_gradient", d.perspective_gradient.to_string()),
            ("data_seed", d.seed.to_string()),
        ];
        kv.sort();
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of [`Self::canonical`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        fn bad(key: &str, line: usize, expected: &'static str) -> Error {
            Error::MalformedValue {
                key: key.to_string(),
                line,
                expected,
            }
        }
        let uint = || value.parse::<usize>().map_err(|_| bad(key, line, "a non-negative integer"));
        let u64v = || value.parse::<u64>().map_err(|_| bad(key, line, "a non-negative integer"));
        let float = || {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(key, line, "a finite number"))
        };
        let boolean = || value.parse::<bool>().map_err(|_| bad(key, line, "true or false"));
        let grid = || parse_grid(value).ok_or_else(|| bad(key, line, "a grid such as 2x2"));
        match key {
            "variant" => {
                self.variant = match value {
                    "conv" => Variant::Conv,
                    "token" => Variant::Token,
                    _ => return Err(bad(key, line, "conv or token")),
                }
            }
            "head" => {
                self.head = match value {
                    "sfsl" => HeadKind::Sfsl,
                    "direct" => HeadKind::Direct,
                    _ => return Err(bad(key, line, "sfsl or direct")),
                }
            }
            "local_loss" => {
                self.local_loss = match value {
                    "lc" => LocalLoss::Consistency,
                    "lgt" => LocalLoss::GroundTruthSum,
                    "none" => LocalLoss::None,
                    _ => return Err(bad(key, line, "lc, lgt or none")),
                }
            }
            "input_size" => self.input_size = uint()?,
            "feature_dim" => self.feature_dim = uint()?,
            "conv_layers" => self.conv.layers = uint()?,
            "conv_kernel" => self.conv.kernel = uint()?,
            "conv_downsample" => self.conv.downsample = uint()?,
            "token_patch" => self.token.patch = uint()?,
            "token_layers" => self.token.layers = uint()?,
            "token_heads" => self.token.heads = uint()?,
            "token_mlp_hidden" => self.token.mlp_hidden = uint()?,
            "mlp_hidden" => {
                self.mlp_hidden = parse_list(value).ok_or_else(|| bad(key, line, "comma-separated integers"))?
            }
            "grid" => self.grid = grid()?,
            "alpha" => self.alpha = float()?,
            "glc_detach_global" => self.glc_detach_global = boolean()?,
            "batch_size" => self.batch_size = uint()?,
            "epochs" => self.epochs = uint()?,
            "lr" => self.adam.lr = float()?,
            "beta1" => self.adam.beta1 = float()?,
            "beta2" => self.adam.beta2 = float()?,
            "adam_eps" => self.adam.eps = float()?,
            "weight_decay" => self.adam.weight_decay = float()?,
            "track_consistency" => self.track_consistency = boolean()?,
            "seed" => self.seed = u64v()?,
            "seeds" => self.seeds = parse_list(value).ok_or_else(|| bad(key, line, "comma-separated integers"))?,
            "patch_label_mode" => self.patch_label_mode = boolean()?,
            "patch_grid" => self.patch_grid = grid()?,
            "train_scenes" => self.train_scenes = uint()?,
            "label_noise_sigma" => self.label_noise_sigma = float()?,
            "sigmas" => self.sigmas = parse_list(value).ok_or_else(|| bad(key, line, "comma-separated numbers"))?,
            "token_ablation" => self.token_ablation = boolean()?,
            "wall_clock" => self.wall_clock = boolean()?,
            "num_scenes" => self.dataset.num_scenes = uint()?,
            "image_size" => self.dataset.image_size = uint()?,
            "count_min" => self.dataset.count_min = uint()?,
            "count_max" => self.dataset.count_max = uint()?,
            "blob_sigma_min" => self.dataset.blob_sigma_range.0 = float()?,
            "blob_sigma_max" => self.dataset.blob_sigma_range.1 = float()?,
            "background_noise_std" => self.dataset.background_noise_std = float()?,
            "perspective_gradient" => self.dataset.perspective_gradient = boolean()?,
            "data_seed" => self.dataset.seed = u64v()?,
            _ => {
                return Err(Error::UnknownKey {
                    key: key.to_string(),
                    line,
                })
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::MalformedValue {
                key: content.to_string(),
                line,
                expected: "a `key = value` line",
            })?;
            cfg.set(key.trim(), value.trim(), line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    RunConfig::parse(&std::fs::read_to_string(path)?)
}
