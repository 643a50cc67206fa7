//! Self-adaptive feature similarity head.
//!
//! A learnable unit vector `f̂` acts as the cluster center of object features.
//! Every position's feature is compared with it by a cosine similarity mapped
//! into `[0, 1]`, giving a soft probability map `p`. For the convolutional
//! variant the density is `d = p · (1/s)` with the inverse scale predicted by
//! the backbone, and `(d, p)` is regressed to a count by a three-layer MLP.
//! For the token variant the class-token output and the token probabilities
//! feed a single linear layer.
//!
//! The two positive multipliers that could scale `p` and `d` are fixed to one:
//! the regressor that follows is linear in its first layer and absorbs them.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{forward, OpKind, Tape, Tensor, Var};
use crate::backbone::{FeatureMap, Variant};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, Bound, ParamStore};

/// Reserved parameter name of the unbiased feature.
pub const F_HAT: &str = "sfsl.f_hat";

/// Runs whose `‖f̂‖` drops below this are aborted.
pub const F_HAT_MIN_NORM: f64 = 1e-8;

/// The learnable cluster-center estimate `f̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnbiasedFeature(Tensor);

impl UnbiasedFeature {
    pub fn new(value: Tensor) -> Result<Self> {
        if value.ndim() != 1 {
            return Err(Error::invalid("unbiased_feature", format!("expected a vector, got {:?}", value.shape())));
        }
        check_norm(&value)?;
        Ok(Self(value))
    }

    /// Uniform sample from the unit sphere in `dim` dimensions.
    pub fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                return Self(Tensor::vector(v.into_iter().map(|x| x / n).collect()));
            }
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Errors when `‖f̂‖` has collapsed below [`F_HAT_MIN_NORM`].
pub fn check_norm(f_hat: &Tensor) -> Result<()> {
    let n = f_hat.norm();
    if !n.is_finite() {
        Err(Error::Degenerate(format!("‖f_hat‖ = {n}")))
    } else if n < F_HAT_MIN_NORM {
        Err(Error::Degenerate(format!("‖f_hat‖ = {n:e} is below {F_HAT_MIN_NORM:e}")))
    } else {
        Ok(())
    }
}

/// Shape of the regressor that follows the similarity maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SfslHeadConfig {
    pub variant: Variant,
    /// M spatial positions (conv) or K tokens.
    pub positions: usize,
    pub feature_dim: usize,
    /// Hidden widths of the conv-variant MLP.
    pub hidden: Vec<usize>,
}

impl SfslHeadConfig {
    /// Width of the concatenated `(d, p)` regressor input.
    pub fn regressor_width(&self) -> usize {
        match self.variant {
            Variant::Conv => 2 * self.positions,
            Variant::Token => 2 * self.feature_dim,
        }
    }

    /// Whether token probabilities need a learned map from K to D entries.
    pub fn projects_tokens(&self) -> bool {
        self.variant == Variant::Token && self.positions != self.feature_dim
    }
}

pub(crate) fn init_dense_stack<R: Rng + ?Sized>(
    params: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    widths: &[usize],
) -> Result<()> {
    for (i, pair) in widths.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        params.insert(format!("{prefix}{i}.weight"), glorot_uniform(rng, &[a, b], a, b))?;
        params.insert(format!("{prefix}{i}.bias"), Tensor::zeros(&[b]))?;
    }
    Ok(())
}

/// Applies `layers` dense layers to a `[1, n]` row, ReLU between layers and a
/// linear final layer.
pub(crate) fn dense_stack(tape: &mut Tape, params: &Bound, prefix: &str, layers: usize, input: Var) -> Result<Var> {
    let mut x = input;
    for i in 0..layers {
        let w = params.get(&format!("{prefix}{i}.weight"))?;
        let b = params.get(&format!("{prefix}{i}.bias"))?;
        let (xin, win) = (tape.value(x).shape()[1], tape.value(w).shape()[0]);
        if xin != win {
            return Err(Error::shape("regressor", tape.value(x).shape(), tape.value(w).shape()));
        }
        x = tape.matmul(x, w)?;
        x = tape.bias_add(x, b, 1)?;
        if i + 1 < layers {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// `f̂` plus regressor weights, deterministic in the caller's generator.
pub fn init_head<R: Rng + ?Sized>(config: &SfslHeadConfig, rng: &mut R) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    p.insert(F_HAT, UnbiasedFeature::random_unit(config.feature_dim, rng).into_tensor())?;
    match config.variant {
        Variant::Conv => {
            if config.hidden.is_empty() {
                return Err(Error::config("mlp_hidden", "needs at least one hidden layer"));
            }
            let mut widths = vec![config.regressor_width()];
            widths.extend(&config.hidden);
            widths.push(1);
            init_dense_stack(&mut p, rng, "sfsl.fc", &widths)?;
        }
        Variant::Token => {
            if config.projects_tokens() {
                let (k, d) = (config.positions, config.feature_dim);
                p.insert("sfsl.p_proj.weight", glorot_uniform(rng, &[k, d], k, d))?;
            }
            init_dense_stack(&mut p, rng, "sfsl.out", &[config.regressor_width(), 1])?;
        }
    }
    Ok(p)
}

/// Normalized cosine similarity of two `[D]` vectors, a `[1]` result in `[0, 1]`.
pub fn cosine_similarity(tape: &mut Tape, f: Var, f_hat: Var) -> Result<Var> {
    let (fs, hs) = (tape.value(f).shape().to_vec(), tape.value(f_hat).shape().to_vec());
    if fs.len() != 1 || fs != hs {
        return Err(Error::shape("cosine_similarity", &fs, &hs));
    }
    let row = tape.reshape(f, &[1, fs[0]])?;
    tape.cosine_rows(row, f_hat)
}

/// `p_i = sim(f_i, f̂)` for every position, a `[M]` vector.
pub fn probability_map(tape: &mut Tape, features: &FeatureMap, f_hat: Var) -> Result<Var> {
    tape.cosine_rows(features.features, f_hat)
}

/// `d_i = p_i · (1/s_i)`.
pub fn density_map(tape: &mut Tape, p: Var, inv_scale: Var) -> Result<Var> {
    let (ps, ss) = (tape.value(p).shape(), tape.value(inv_scale).shape());
    if ps != ss || ps.len() != 1 {
        return Err(Error::shape("density_map", ps, ss));
    }
    tape.mul(p, inv_scale)
}

/// Count regression from the density (or class vector) `d` and probabilities `p`.
///
/// Conv: three-layer MLP on `(d, p)`, both of length M.
/// Token: `wᵀ(d, p) + b` where `d` is the class-token output and `p` the token
/// probabilities, mapped to length D first when K ≠ D.
pub fn regress_count(tape: &mut Tape, params: &Bound, config: &SfslHeadConfig, d: Var, p: Var) -> Result<Var> {
    let p = match config.variant {
        Variant::Token if config.projects_tokens() => {
            let k = tape.value(p).numel();
            let row = tape.reshape(p, &[1, k])?;
            let proj = tape.matmul(row, params.get("sfsl.p_proj.weight")?)?;
            tape.reshape(proj, &[config.feature_dim])?
        }
        _ => p,
    };
    let (dn, pn) = (tape.value(d).numel(), tape.value(p).numel());
    if dn + pn != config.regressor_width() || dn != pn {
        return Err(Error::shape(
            "regress_count",
            &[dn, pn],
            &[config.regressor_width() / 2, config.regressor_width() / 2],
        ));
    }
    let d = tape.reshape(d, &[dn])?;
    let x = tape.concat(&[d, p], 0)?;
    let x = tape.reshape(x, &[1, dn + pn])?;
    let out = match config.variant {
        Variant::Conv => dense_stack(tape, params, "sfsl.fc", config.hidden.len() + 1, x)?,
        Variant::Token => dense_stack(tape, params, "sfsl.out", 1, x)?,
    };
    tape.reshape(out, &[1])
}

/// `Σ_maps Σ_i sim(f_i, f̂)²`: the weighted similarity objective with the
/// weights taken from the probability map itself. Evaluated only.
pub fn unbiased_objective(feature_maps: &[Tensor], f_hat: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    for fm in feature_maps {
        let p = forward(&OpKind::CosineRows, &[fm, f_hat])?;
        total += p.data().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sim(tape: &mut Tape, f: &[f64], g: &[f64]) -> f64 {
        let f = tape.constant(Tensor::vector(f.to_vec()));
        let g = tape.constant(Tensor::vector(g.to_vec()));
        let s = cosine_similarity(tape, f, g).unwrap();
        tape.value(s).item().unwrap()
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::new();
        let f = [0.3, -1.2, 2.0];
        assert!((sim(&mut tape, &f, &f) - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = f.iter().map(|v| -v).collect();
        assert!(sim(&mut tape, &f, &neg).abs() < 1e-15);
        assert_eq!(sim(&mut tape, &[1.0, 0.0], &[0.0, 1.0]), 0.5);
    }

    #[test]
    fn cosine_length_mismatch() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let g = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(cosine_similarity(&mut tape, f, g).is_err());
    }

    #[test]
    fn density_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.8, 0.2]));
        let s = tape.constant(Tensor::vector(vec![0.5, 0.0]));
        let d = density_map(&mut tape, p, s).unwrap();
        assert_eq!(tape.value(d).data(), &[0.4, 0.0]);
        let short = tape.constant(Tensor::vector(vec![1.0]));
        assert!(density_map(&mut tape, p, short).is_err());
    }

    #[test]
    fn token_regressor_hand_example() {
        let cfg = SfslHeadConfig {
            variant: Variant::Token,
            positions: 2,
            feature_dim: 2,
            hidden: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = init_head(&cfg, &mut rng).unwrap();
        params.get_mut("sfsl.out0.weight").unwrap().data_mut().fill(1.0);
        params.get_mut("sfsl.out0.bias").unwrap().data_mut().fill(1.0);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let d = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = regress_count(&mut tape, &bound, &cfg, d, p).unwrap();
        assert_eq!(tape.value(c).item().unwrap(), 11.0);
    }

    #[test]
    fn zero_regressor_returns_bias() {
        let cfg = SfslHeadConfig {
            variant: Variant::Conv,
            positions: 4,
            feature_dim: 3,
            hidden: vec![8, 5],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = init_head(&cfg, &mut rng).unwrap();
        let names: Vec<String> = params.names().filter(|n| n.starts_with("sfsl.fc")).map(String::from).collect();
        for n in names {
            params.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        params.get_mut("sfsl.fc2.bias").unwrap().data_mut()[0] = 7.25;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let d = tape.constant(Tensor::vector(vec![0.3; 4]));
        let p = tape.constant(Tensor::vector(vec![0.9; 4]));
        let c = regress_count(&mut tape, &bound, &cfg, d, p).unwrap();
        assert_eq!(tape.value(c).item().unwrap(), 7.25);
    }

    #[test]
    fn conv_regressor_width_is_twice_positions() {
        let cfg = SfslHeadConfig {
            variant: Variant::Conv,
            positions: 64,
            feature_dim: 16,
            hidden: vec![128, 64],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = init_head(&cfg, &mut rng).unwrap();
        assert_eq!(params.get("sfsl.fc0.weight").unwrap().shape(), &[128, 128]);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let d = tape.constant(Tensor::vector(vec![0.1; 63]));
        let p = tape.constant(Tensor::vector(vec![0.1; 63]));
        assert!(regress_count(&mut tape, &bound, &cfg, d, p).is_err());
    }

    #[test]
    fn objective_examples() {
        let f = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let f_hat = Tensor::vector(vec![1.0, -2.0, 4.0]);
        assert!((unbiased_objective(&[f], &f_hat).unwrap() - 1.0).abs() < 1e-15);
        let zeros = Tensor::zeros(&[10, 3]);
        let v = Tensor::vector(vec![0.0, 1.0, 0.0]);
        assert_eq!(unbiased_objective(&[zeros], &v).unwrap(), 0.25 * 10.0);
    }

    #[test]
    fn f_hat_init_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = UnbiasedFeature::random_unit(16, &mut rng);
        assert!((f.tensor().norm() - 1.0).abs() < 1e-12);
        assert!(UnbiasedFeature::new(Tensor::vector(vec![0.0; 4])).is_err());
    }
}
