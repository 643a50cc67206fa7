use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::batch::assemble_batch;
use super::loss::{glc_loss, gt_sum_loss, regression_loss, total_loss, LocalLoss, LossBundle};
use super::partition::PartitionGrid;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{CountingModel, ModelConfig};
use crate::params::Bound;
use crate::sfsl::{check_norm, F_HAT};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub grid: PartitionGrid,
    pub alpha: f64,
    pub local_loss: LocalLoss,
    /// Treat global predictions as constants inside `L_c`.
    pub detach_global: bool,
    /// Global images per batch b.
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Evaluate `L_c` without gradients when it is not part of the objective,
    /// so histories of every arm carry the consistency term. When off, such
    /// arms record `L_c = 0`.
    pub track_consistency: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            grid: PartitionGrid::square(2),
            alpha: 1.0,
            local_loss: LocalLoss::Consistency,
            detach_global: false,
            batch_size: 6,
            epochs: 300,
            adam: AdamConfig::default(),
            seed: 0,
            track_consistency: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::config("alpha", "must be finite and non-negative"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::config("adam_beta", "betas must lie in [0, 1)"));
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "eps must be positive and decay non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's batches, weighted by batch size.
    pub losses: LossBundle,
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn first(&self) -> Option<&EpochRecord> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CountingModel,
    pub history: History,
    pub optimizer: AdamState,
}

struct BatchLosses {
    l_r: f64,
    l_c: f64,
    l_gt: Option<f64>,
}

fn item(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

fn finite_or(context: impl FnOnce() -> String, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context: context() })
    }
}

/// Predictions for every item, globals and locals kept apart.
fn forward_items(
    model: &CountingModel,
    bound: &Bound,
    tape: &mut Tape,
    images: &[&Tensor],
    tiles: usize,
    with_locals: bool,
) -> Result<(Vec<Var>, Vec<Vec<Var>>)> {
    let mut globals = Vec::with_capacity(images.len());
    let mut locals = Vec::with_capacity(images.len());
    for chunk in images.chunks(tiles + 1) {
        globals.push(model.forward(bound, tape, chunk[0])?.count);
        if with_locals {
            let l = chunk[1..]
                .iter()
                .map(|t| model.forward(bound, tape, t).map(|o| o.count))
                .collect::<Result<Vec<_>>>()?;
            locals.push(l);
        }
    }
    Ok((globals, locals))
}

fn train_batch(
    config: &TrainConfig,
    model: &mut CountingModel,
    state: &mut AdamState,
    samples: &[(&Tensor, f64)],
    where_: impl Fn() -> String,
) -> Result<BatchLosses> {
    let batch = assemble_batch(samples, config.grid, model.input_size())?;
    let n = batch.tiles;
    let trains_locals = config.local_loss != LocalLoss::None;

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let (item_refs, global_only): (Vec<&Tensor>, Vec<&Tensor>) = (
        batch.items.iter().collect(),
        (0..batch.images).map(|i| batch.global(i)).collect(),
    );
    let (globals, locals) = if trains_locals {
        forward_items(model, &bound, &mut tape, &item_refs, n, true)?
    } else {
        forward_items(model, &bound, &mut tape, &global_only, 0, false)?
    };

    let l_r = regression_loss(&mut tape, &globals, &batch.global_counts)?;
    let (objective, l_c, l_gt) = match config.local_loss {
        LocalLoss::Consistency => {
            let g = if config.detach_global {
                globals
                    .iter()
                    .map(|&v| {
                        let c = tape.value(v).clone();
                        tape.constant(c)
                    })
                    .collect()
            } else {
                globals.clone()
            };
            let l_c = glc_loss(&mut tape, &g, &locals)?;
            (total_loss(&mut tape, l_r, l_c, config.alpha)?, item(&tape, l_c), None)
        }
        LocalLoss::GroundTruthSum => {
            let l_gt = gt_sum_loss(&mut tape, &locals, &batch.global_counts)?;
            let l_c = glc_loss(&mut tape, &globals, &locals)?;
            let objective = tape.add(l_r, l_gt)?;
            (objective, item(&tape, l_c), Some(item(&tape, l_gt)))
        }
        LocalLoss::None => {
            let l_c = if config.track_consistency {
                consistency_value(model, &batch.items, n)?
            } else {
                0.0
            };
            (l_r, l_c, None)
        }
    };
    let lr_value = item(&tape, l_r);
    finite_or(|| format!("{}: loss", where_()), &[lr_value, item(&tape, objective), l_c])?;

    let mut grads = tape.backward(objective)?;
    let grads = bound.collect_grads(&mut grads, &model.params)?;
    for (name, g) in &grads {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                context: format!("{}: gradient of `{name}`", where_()),
            });
        }
    }
    adam_step(&mut model.params, &grads, state)?;
    if let Ok(f) = model.params.get(F_HAT) {
        check_norm(f).map_err(|e| match e {
            Error::Degenerate(m) => Error::Degenerate(format!("{}: {m}", where_())),
            other => other,
        })?;
    }
    Ok(BatchLosses {
        l_r: lr_value,
        l_c,
        l_gt,
    })
}

/// `L_c` of an interleaved item list on a gradient-free tape.
fn consistency_value(model: &CountingModel, items: &[Tensor], tiles: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let refs: Vec<&Tensor> = items.iter().collect();
    let (g, l) = forward_items(model, &bound, &mut tape, &refs, tiles, true)?;
    let l_c = glc_loss(&mut tape, &g, &l)?;
    Ok(item(&tape, l_c))
}

/// Mean absolute error of `model.predict` over labeled samples.
pub(crate) fn mean_abs_error(model: &CountingModel, samples: &[(Tensor, f64)]) -> Result<f64> {
    let mut acc = 0.0;
    for (img, c) in samples {
        acc += (model.predict(img)? - c).abs();
    }
    Ok(acc / samples.len() as f64)
}

/// Trains a freshly initialized model. See [`train_with_state`].
pub fn train(config: &TrainConfig, train_set: &[(Tensor, f64)], val_set: &[(Tensor, f64)]) -> Result<TrainOutcome> {
    config.validate()?;
    let model = CountingModel::init(config.model.clone(), config.seed)?;
    train_with_state(config, model, None, train_set, val_set)
}

/// Runs `config.epochs` epochs of shuffled mini-batch training from the given
/// model and optimizer state. Deterministic in `config.seed`.
pub fn train_with_state(
    config: &TrainConfig,
    mut model: CountingModel,
    state: Option<AdamState>,
    train_set: &[(Tensor, f64)],
    val_set: &[(Tensor, f64)],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    let mut state = state.unwrap_or_else(|| AdamState::new(config.adam.clone(), &model.params));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sr, mut sc, mut sgt, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<(&Tensor, f64)> = chunk.iter().map(|&i| (&train_set[i].0, train_set[i].1)).collect();
            let where_ = || format!("epoch {} batch {bi}", epoch + 1);
            let b = train_batch(config, &mut model, &mut state, &samples, where_)?;
            let w = chunk.len() as f64;
            sr += b.l_r * w;
            sc += b.l_c * w;
            sgt += b.l_gt.unwrap_or(0.0) * w;
            seen += chunk.len();
        }
        let denom = seen as f64;
        let l_gt = (config.local_loss == LocalLoss::GroundTruthSum).then(|| sgt / denom);
        let losses = LossBundle::new(sr / denom, sc / denom, l_gt, config.alpha);
        let val_mae = if val_set.is_empty() {
            None
        } else {
            Some(mean_abs_error(&model, val_set)?)
        };
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            losses,
            val_mae,
        });
    }
    Ok(TrainOutcome {
        model,
        history,
        optimizer: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn tiny_config() -> TrainConfig {
        let mut backbone = BackboneConfig::conv_default();
        backbone.input_size = 16;
        backbone.feature_dim = 4;
        TrainConfig {
            model: ModelConfig {
                backbone,
                mlp_hidden: vec![8],
                ..ModelConfig::default()
            },
            epochs: 3,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    fn data(n: usize) -> Vec<(Tensor, f64)> {
        (0..n)
            .map(|i| {
                let v = (i as f64 + 1.0) / (n as f64 + 1.0);
                (Tensor::full(&[1, 16, 16], v), 10.0 * v)
            })
            .collect()
    }

    #[test]
    fn history_length_and_determinism() {
        let cfg = tiny_config();
        let a = train(&cfg, &data(5), &data(2)).unwrap();
        let b = train(&cfg, &data(5), &data(2)).unwrap();
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params, b.model.params);
        assert!(a.history.epochs.iter().all(|e| e.val_mae.is_some()));
        let e = a.history.last().unwrap();
        assert_eq!(e.losses.total, e.losses.l_r + e.losses.alpha * e.losses.l_c);
        // 5 samples in batches of 2 → 3 optimizer steps per epoch
        assert_eq!(a.optimizer.step, 9);
    }

    #[test]
    fn every_local_loss_runs() {
        for local in [LocalLoss::None, LocalLoss::Consistency, LocalLoss::GroundTruthSum] {
            let cfg = TrainConfig {
                local_loss: local,
                ..tiny_config()
            };
            let out = train(&cfg, &data(3), &[]).unwrap();
            let last = out.history.last().unwrap();
            assert!(last.losses.l_c.is_finite());
            assert_eq!(last.losses.l_gt.is_some(), local == LocalLoss::GroundTruthSum);
        }
    }

    #[test]
    fn detached_global_differs() {
        let base = tiny_config();
        let det = TrainConfig {
            detach_global: true,
            ..base.clone()
        };
        let a = train(&base, &data(4), &[]).unwrap();
        let b = train(&det, &data(4), &[]).unwrap();
        assert_ne!(a.model.params, b.model.params);
    }

    #[test]
    fn invalid_configs_rejected() {
        let d = data(2);
        for cfg in [
            TrainConfig { batch_size: 0, ..tiny_config() },
            TrainConfig { epochs: 0, ..tiny_config() },
            TrainConfig { alpha: f64::NAN, ..tiny_config() },
        ] {
            assert!(matches!(train(&cfg, &d, &[]), Err(Error::InvalidConfig { .. })));
        }
        assert!(train(&tiny_config(), &[], &[]).is_err());
    }

    #[test]
    fn non_finite_loss_reports_position() {
        let mut d = data(2);
        d[1].1 = f64::INFINITY;
        let err = train(&tiny_config(), &d, &[]).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("epoch 1 batch 0"), "{err}");
    }
}
