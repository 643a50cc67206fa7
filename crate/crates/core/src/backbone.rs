//! Feature extractors that turn an image into per-position feature vectors.
//!
//! Two variants are provided. The convolutional stack downsamples the image
//! with strided 3×3 convolutions and carries a 1×1 head predicting the
//! inverse object scale at every output position. The token variant splits
//! the image into square patches and runs a small self-attention encoder
//! with a prepended class token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, Bound, ParamStore};

/// Images are single-channel.
pub const IMAGE_CHANNELS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Conv,
    Token,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Conv => "conv",
            Variant::Token => "token",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvConfig {
    pub layers: usize,
    pub kernel: usize,
    /// Total spatial reduction; a power of two realized by stride-2 layers
    /// at the start of the stack.
    pub downsample: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenConfig {
    pub patch: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub variant: Variant,
    /// Square input side in pixels.
    pub input_size: usize,
    /// Feature width D (conv channels, or token hidden size).
    pub feature_dim: usize,
    pub conv: ConvConfig,
    pub token: TokenConfig,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            kernel: 3,
            downsample: 8,
        }
    }
}

impl Default for TokenConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            layers: 2,
            heads: 4,
            mlp_hidden: 64,
        }
    }
}

impl BackboneConfig {
    pub fn conv_default() -> Self {
        Self {
            variant: Variant::Conv,
            input_size: 64,
            feature_dim: 16,
            conv: ConvConfig::default(),
            token: TokenConfig::default(),
        }
    }

    pub fn token_default() -> Self {
        Self {
            variant: Variant::Token,
            feature_dim: 16,
            ..Self::conv_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::config("input_size", "must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        match self.variant {
            Variant::Conv => {
                let c = &self.conv;
                if c.layers == 0 {
                    return Err(Error::config("conv_layers", "must be positive"));
                }
                if c.kernel == 0 || c.kernel.is_multiple_of(2) {
                    return Err(Error::config("conv_kernel", "must be odd"));
                }
                if !c.downsample.is_power_of_two() {
                    return Err(Error::config("conv_downsample", "must be a power of two"));
                }
                if self.strided_layers() > c.layers {
                    return Err(Error::config(
                        "conv_downsample",
                        format!("needs {} stride-2 layers but only {} layers", self.strided_layers(), c.layers),
                    ));
                }
                if !self.input_size.is_multiple_of(c.downsample) {
                    return Err(Error::config(
                        "input_size",
                        format!("{} not divisible by downsample {}", self.input_size, c.downsample),
                    ));
                }
            }
            Variant::Token => {
                let t = &self.token;
                if t.patch == 0 || !self.input_size.is_multiple_of(t.patch) {
                    return Err(Error::config(
                        "token_patch",
                        format!("input size {} not divisible by patch {}", self.input_size, t.patch),
                    ));
                }
                if t.heads == 0 || !self.feature_dim.is_multiple_of(t.heads) {
                    return Err(Error::config(
                        "token_heads",
                        format!("hidden size {} not divisible by {} heads", self.feature_dim, t.heads),
                    ));
                }
                if t.layers == 0 || t.mlp_hidden == 0 {
                    return Err(Error::config("token_layers", "layers and mlp width must be positive"));
                }
            }
        }
        Ok(())
    }

    fn strided_layers(&self) -> usize {
        self.conv.downsample.trailing_zeros() as usize
    }

    /// Side length of the spatial feature grid (or of the patch grid).
    pub fn grid_side(&self) -> usize {
        match self.variant {
            Variant::Conv => self.input_size / self.conv.downsample,
            Variant::Token => self.input_size / self.token.patch,
        }
    }

    /// Number of feature positions M (tokens K for the token variant).
    pub fn positions(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    fn head_dim(&self) -> usize {
        self.feature_dim / self.token.heads
    }
}

/// Per-position features, `[M, D]` on the tape.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub features: Var,
    pub rows: usize,
    pub cols: usize,
    /// The `[D, rows, cols]` map the features were read from (conv only).
    pub spatial: Option<Var>,
}

impl FeatureMap {
    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }
}

/// Output of the attention encoder.
#[derive(Clone, Debug)]
pub struct TokenEncoding {
    /// Class-token output, `[D]`.
    pub class_vector: Var,
    /// Patch-token outputs, `[K, D]`.
    pub tokens: Var,
    /// Attention weights per layer and head, each `[K+1, K+1]`.
    pub attention: Vec<Vec<Tensor>>,
}

fn conv_name(i: usize, what: &str) -> String {
    format!("backbone.conv{i}.{what}")
}

/// Glorot-initialized weights and zero biases. Deterministic in `seed`.
pub fn init_params(config: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let d = config.feature_dim;
    match config.variant {
        Variant::Conv => {
            let k = config.conv.kernel;
            let mut in_ch = IMAGE_CHANNELS;
            for i in 0..config.conv.layers {
                p.insert(
                    conv_name(i, "weight"),
                    glorot_uniform(&mut rng, &[d, in_ch, k, k], in_ch * k * k, d * k * k),
                )?;
                p.insert(conv_name(i, "bias"), Tensor::zeros(&[d]))?;
                in_ch = d;
            }
            p.insert("backbone.scale.weight", glorot_uniform(&mut rng, &[1, d, 1, 1], d, 1))?;
            p.insert("backbone.scale.bias", Tensor::zeros(&[1]))?;
        }
        Variant::Token => {
            let t = &config.token;
            let patch_len = t.patch * t.patch * IMAGE_CHANNELS;
            let k = config.positions();
            let dh = config.head_dim();
            p.insert("backbone.embed.weight", glorot_uniform(&mut rng, &[patch_len, d], patch_len, d))?;
            p.insert("backbone.embed.bias", Tensor::zeros(&[d]))?;
            p.insert("backbone.cls", glorot_uniform(&mut rng, &[1, d], 1, d))?;
            p.insert("backbone.pos", glorot_uniform(&mut rng, &[k + 1, d], k + 1, d))?;
            for l in 0..t.layers {
                for h in 0..t.heads {
                    for which in ["q", "k", "v"] {
                        p.insert(
                            format!("backbone.block{l}.head{h}.{which}"),
                            glorot_uniform(&mut rng, &[d, dh], d, dh),
                        )?;
                    }
                }
                p.insert(format!("backbone.block{l}.attn_out.weight"), glorot_uniform(&mut rng, &[d, d], d, d))?;
                p.insert(format!("backbone.block{l}.attn_out.bias"), Tensor::zeros(&[d]))?;
                p.insert(
                    format!("backbone.block{l}.mlp0.weight"),
                    glorot_uniform(&mut rng, &[d, t.mlp_hidden], d, t.mlp_hidden),
                )?;
                p.insert(format!("backbone.block{l}.mlp0.bias"), Tensor::zeros(&[t.mlp_hidden]))?;
                p.insert(
                    format!("backbone.block{l}.mlp1.weight"),
                    glorot_uniform(&mut rng, &[t.mlp_hidden, d], t.mlp_hidden, d),
                )?;
                p.insert(format!("backbone.block{l}.mlp1.bias"), Tensor::zeros(&[d]))?;
            }
        }
    }
    Ok(p)
}

fn check_image(config: &BackboneConfig, image: &Tensor) -> Result<()> {
    let s = config.input_size;
    if image.shape() != [IMAGE_CHANNELS, s, s] {
        return Err(Error::shape("backbone input", image.shape(), &[IMAGE_CHANNELS, s, s]));
    }
    Ok(())
}

/// Runs the backbone on a `[1, S, S]` image.
pub fn extract_features(config: &BackboneConfig, params: &Bound, tape: &mut Tape, image: &Tensor) -> Result<FeatureMap> {
    check_image(config, image)?;
    match config.variant {
        Variant::Conv => {
            let k = config.conv.kernel;
            let strided = config.strided_layers();
            let mut x = tape.constant(image.clone());
            for i in 0..config.conv.layers {
                let stride = if i < strided { 2 } else { 1 };
                let w = params.get(&conv_name(i, "weight"))?;
                let b = params.get(&conv_name(i, "bias"))?;
                x = tape.conv2d(x, w, stride, k / 2)?;
                x = tape.bias_add(x, b, 0)?;
                x = tape.relu(x)?;
            }
            let side = config.grid_side();
            debug_assert_eq!(tape.value(x).shape(), [config.feature_dim, side, side]);
            let flat = tape.reshape(x, &[config.feature_dim, side * side])?;
            let features = tape.transpose(flat)?;
            Ok(FeatureMap {
                features,
                rows: side,
                cols: side,
                spatial: Some(x),
            })
        }
        Variant::Token => {
            let enc = attention_encode(config, params, tape, image)?;
            let side = config.grid_side();
            Ok(FeatureMap {
                features: enc.tokens,
                rows: side,
                cols: side,
                spatial: None,
            })
        }
    }
}

/// Per-position inverse scale `1/s_i` from a 1×1 convolution over the final
/// feature map. Unconstrained linear output. Returns a `[M]` vector.
pub fn inverse_scale_map(config: &BackboneConfig, params: &Bound, tape: &mut Tape, features: &FeatureMap) -> Result<Var> {
    let spatial = match (config.variant, features.spatial) {
        (Variant::Conv, Some(s)) => s,
        _ => {
            return Err(Error::invalid(
                "inverse_scale_map",
                "only the convolutional backbone has a scale head",
            ))
        }
    };
    let w = params.get("backbone.scale.weight")?;
    let b = params.get("backbone.scale.bias")?;
    let s = tape.conv2d(spatial, w, 1, 0)?;
    let s = tape.bias_add(s, b, 0)?;
    tape.reshape(s, &[features.positions()])
}

/// Splits a `[1, S, S]` image into `[K, P·P]` rows, patches in row-major order.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w) = match *image.shape() {
        [1, h, w] => (h, w),
        _ => return Err(Error::invalid("patchify", format!("expected [1, H, W], got {:?}", image.shape()))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid("patchify", format!("{h}x{w} not divisible by patch {patch}")));
    }
    let (pr, pc) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..pr {
        for c in 0..pc {
            for y in 0..patch {
                let base = (r * patch + y) * w + c * patch;
                out.extend_from_slice(&src[base..base + patch]);
            }
        }
    }
    Tensor::new(vec![pr * pc, patch * patch], out)
}

/// Patch embedding, class token, then `layers` blocks of multi-head
/// self-attention and a ReLU MLP, each wrapped in a residual connection.
pub fn attention_encode(config: &BackboneConfig, params: &Bound, tape: &mut Tape, image: &Tensor) -> Result<TokenEncoding> {
    if config.variant != Variant::Token {
        return Err(Error::invalid("attention_encode", "requires the token backbone"));
    }
    check_image(config, image)?;
    let t = &config.token;
    let d = config.feature_dim;
    let k = config.positions();
    let dh = config.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let patches = tape.constant(patchify(image, t.patch)?);
    let emb = tape.matmul(patches, params.get("backbone.embed.weight")?)?;
    let emb = tape.bias_add(emb, params.get("backbone.embed.bias")?, 1)?;
    let x = tape.concat(&[params.get("backbone.cls")?, emb], 0)?;
    let mut x = tape.add(x, params.get("backbone.pos")?)?;

    let mut attention = Vec::with_capacity(t.layers);
    for l in 0..t.layers {
        let mut heads = Vec::with_capacity(t.heads);
        let mut maps = Vec::with_capacity(t.heads);
        for h in 0..t.heads {
            let q = tape.matmul(x, params.get(&format!("backbone.block{l}.head{h}.q"))?)?;
            let kk = tape.matmul(x, params.get(&format!("backbone.block{l}.head{h}.k"))?)?;
            let v = tape.matmul(x, params.get(&format!("backbone.block{l}.head{h}.v"))?)?;
            let kt = tape.transpose(kk)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let a = tape.softmax_rows(scores)?;
            maps.push(tape.value(a).clone());
            heads.push(tape.matmul(a, v)?);
        }
        let cat = tape.concat(&heads, 1)?;
        let proj = tape.matmul(cat, params.get(&format!("backbone.block{l}.attn_out.weight"))?)?;
        let proj = tape.bias_add(proj, params.get(&format!("backbone.block{l}.attn_out.bias"))?, 1)?;
        x = tape.add(x, proj)?;

        let hdn = tape.matmul(x, params.get(&format!("backbone.block{l}.mlp0.weight"))?)?;
        let hdn = tape.bias_add(hdn, params.get(&format!("backbone.block{l}.mlp0.bias"))?, 1)?;
        let hdn = tape.relu(hdn)?;
        let out = tape.matmul(hdn, params.get(&format!("backbone.block{l}.mlp1.weight"))?)?;
        let out = tape.bias_add(out, params.get(&format!("backbone.block{l}.mlp1.bias"))?, 1)?;
        x = tape.add(x, out)?;
        attention.push(maps);
    }
    let cls = tape.slice_rows(x, 0, 1)?;
    let class_vector = tape.reshape(cls, &[d])?;
    let tokens = tape.slice_rows(x, 1, k + 1)?;
    Ok(TokenEncoding {
        class_vector,
        tokens,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn image(seed: u64, size: usize) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..size * size).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![1, size, size], data).unwrap()
    }

    fn features_of(config: &BackboneConfig, params: &ParamStore, img: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fm = extract_features(config, &bound, &mut tape, img).unwrap();
        tape.value(fm.features).clone()
    }

    #[test]
    fn same_seed_same_params() {
        for cfg in [BackboneConfig::conv_default(), BackboneConfig::token_default()] {
            assert_eq!(init_params(&cfg, 7).unwrap(), init_params(&cfg, 7).unwrap());
            assert_ne!(init_params(&cfg, 7).unwrap(), init_params(&cfg, 8).unwrap());
        }
    }

    #[test]
    fn conv_parameter_count_closed_form() {
        // 4 layers of 3x3, D=16: (1*16*9 + 16) + 3 * (16*16*9 + 16) + scale head (16 + 1)
        let expected = (16 * 9 + 16) + 3 * (16 * 16 * 9 + 16) + 17;
        let p = init_params(&BackboneConfig::conv_default(), 0).unwrap();
        assert_eq!(p.num_scalars(), expected);
        assert_eq!(expected, 7137);
    }

    #[test]
    fn token_parameter_count_closed_form() {
        // patch 16 -> 256 inputs, D=16, K=16, 2 layers, 4 heads of 4, MLP 64
        let embed = 256 * 16 + 16;
        let tokens = 16 + 17 * 16;
        let per_layer = 3 * 4 * (16 * 4) + (16 * 16 + 16) + (16 * 64 + 64) + (64 * 16 + 16);
        let expected = embed + tokens + 2 * per_layer;
        let p = init_params(&BackboneConfig::token_default(), 0).unwrap();
        assert_eq!(p.num_scalars(), expected);
    }

    #[test]
    fn conv_feature_shape() {
        let cfg = BackboneConfig::conv_default();
        let p = init_params(&cfg, 1).unwrap();
        let f = features_of(&cfg, &p, &image(0, 64));
        assert_eq!(f.shape(), &[64, 16]);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let cfg = BackboneConfig::conv_default();
        let mut p = init_params(&cfg, 1).unwrap();
        for (_, t) in p.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let f = features_of(&cfg, &p, &image(3, 64));
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_are_deterministic_and_batch_consistent() {
        let cfg = BackboneConfig::conv_default();
        let p = init_params(&cfg, 2).unwrap();
        let imgs: Vec<Tensor> = (0..3).map(|s| image(s, 64)).collect();
        // one tape for the batch vs a tape per image
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let batch: Vec<Tensor> = imgs
            .iter()
            .map(|img| {
                let fm = extract_features(&cfg, &bound, &mut tape, img).unwrap();
                tape.value(fm.features).clone()
            })
            .collect();
        for (img, f) in imgs.iter().zip(&batch) {
            assert_eq!(&features_of(&cfg, &p, img), f);
        }
    }

    #[test]
    fn wrong_image_size_rejected() {
        let cfg = BackboneConfig::conv_default();
        let p = init_params(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        assert!(extract_features(&cfg, &bound, &mut tape, &image(0, 32)).is_err());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = BackboneConfig::conv_default();
        cfg.input_size = 60;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("input_size"), "{err}");
        let mut cfg = BackboneConfig::token_default();
        cfg.token.heads = 5;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("token_heads"), "{err}");
    }

    #[test]
    fn scale_map_shape_and_zero_head() {
        let cfg = BackboneConfig::conv_default();
        let mut p = init_params(&cfg, 4).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let fm = extract_features(&cfg, &bound, &mut tape, &image(1, 64)).unwrap();
        let s = inverse_scale_map(&cfg, &bound, &mut tape, &fm).unwrap();
        assert_eq!(tape.value(s).shape(), &[fm.positions()]);

        p.get_mut("backbone.scale.weight").unwrap().data_mut().fill(0.0);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let fm = extract_features(&cfg, &bound, &mut tape, &image(1, 64)).unwrap();
        let s = inverse_scale_map(&cfg, &bound, &mut tape, &fm).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_map_rejected_for_tokens() {
        let cfg = BackboneConfig::token_default();
        let p = init_params(&cfg, 4).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let fm = extract_features(&cfg, &bound, &mut tape, &image(1, 64)).unwrap();
        assert!(inverse_scale_map(&cfg, &bound, &mut tape, &fm).is_err());
    }

    #[test]
    fn scale_head_gradient_matches_finite_differences() {
        let cfg = BackboneConfig {
            input_size: 16,
            feature_dim: 4,
            conv: ConvConfig {
                layers: 2,
                kernel: 3,
                downsample: 2,
            },
            ..BackboneConfig::conv_default()
        };
        let p = init_params(&cfg, 9).unwrap();
        let img = image(5, 16);
        let w0 = p.get("backbone.scale.weight").unwrap().clone();
        let err = grad_check(
            |tape, w| {
                let mut bound = p.bind_frozen(tape);
                bound.replace("backbone.scale.weight", w)?;
                let fm = extract_features(&cfg, &bound, tape, &img)?;
                let s = inverse_scale_map(&cfg, &bound, tape, &fm)?;
                let sq = tape.square(s)?;
                tape.sum(sq)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn token_shapes_and_class_token() {
        let cfg = BackboneConfig::token_default();
        let p = init_params(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let enc = attention_encode(&cfg, &bound, &mut tape, &image(2, 64)).unwrap();
        assert_eq!(tape.value(enc.tokens).shape(), &[16, 16]);
        assert_eq!(tape.value(enc.class_vector).shape(), &[16]);
        for layer in &enc.attention {
            for a in layer {
                assert_eq!(a.shape(), &[17, 17]);
                for row in a.data().chunks(17) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let cfg = BackboneConfig {
            token: TokenConfig {
                layers: 1,
                ..TokenConfig::default()
            },
            ..BackboneConfig::token_default()
        };
        let mut p = init_params(&cfg, 3).unwrap();
        let names: Vec<String> = p
            .names()
            .filter(|n| n.ends_with(".q") || n.ends_with(".k"))
            .map(String::from)
            .collect();
        for n in names {
            p.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let img = image(2, 64);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let enc = attention_encode(&cfg, &bound, &mut tape, &img).unwrap();
        for a in &enc.attention[0] {
            assert!(a.data().iter().all(|&v| (v - 1.0 / 17.0).abs() < 1e-15));
        }
        // each attended value is the column mean of V: check head 0 directly
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let patches = tape.constant(patchify(&img, 16).unwrap());
        let emb = tape.matmul(patches, bound.get("backbone.embed.weight").unwrap()).unwrap();
        let emb = tape.bias_add(emb, bound.get("backbone.embed.bias").unwrap(), 1).unwrap();
        let x = tape.concat(&[bound.get("backbone.cls").unwrap(), emb], 0).unwrap();
        let x = tape.add(x, bound.get("backbone.pos").unwrap()).unwrap();
        let v = tape.matmul(x, bound.get("backbone.block0.head0.v").unwrap()).unwrap();
        let v = tape.value(v).clone();
        let a = &enc.attention[0][0];
        let dh = cfg.feature_dim / cfg.token.heads;
        for col in 0..dh {
            let mean: f64 = (0..17).map(|r| v.at(&[r, col])).sum::<f64>() / 17.0;
            let attended: f64 = (0..17).map(|r| a.at(&[0, r]) * v.at(&[r, col])).sum();
            assert!((mean - attended).abs() < 1e-12);
        }
    }

    #[test]
    fn patchify_layout() {
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }
}
