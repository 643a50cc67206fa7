//! Metrics and the multi-seed experiment harness.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::backbone::Variant;
use crate::config::RunConfig;
use crate::datagen::{inject_label_noise, labeled, make_patch_dataset, SyntheticScene};
use crate::error::{Error, Result};
use crate::glc::{train, LocalLoss, PartitionGrid, TrainOutcome};
use crate::model::{CountingModel, HeadKind};

pub const CSV_HEADER: [&str; 9] = [
    "arm",
    "config_digest",
    "seed",
    "mae",
    "mse",
    "final_lr",
    "final_lc",
    "consistency_gap",
    "seconds",
];

/// Mean absolute error and root-mean-square error.
pub fn mae_mse(preds: &[f64], counts: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != counts.len() || preds.is_empty() {
        return Err(Error::shape("mae_mse", &[preds.len()], &[counts.len()]));
    }
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, c) in preds.iter().zip(counts) {
        let e = p - c;
        abs += e.abs();
        sq += e * e;
    }
    let n = preds.len() as f64;
    Ok((abs / n, (sq / n).sqrt()))
}

/// Mean over images of `|Σ_j c̃^j − c̃| / max(1, |c̃|)`.
pub fn consistency_gap(model: &CountingModel, images: &[Tensor], grid: PartitionGrid) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("consistency_gap", "no images"));
    }
    let mut acc = 0.0;
    for img in images {
        let (g, locals) = model.predict_global_local(img, grid)?;
        acc += (locals.iter().sum::<f64>() - g).abs() / g.abs().max(1.0);
    }
    Ok(acc / images.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRecord {
    pub arm: String,
    pub config_digest: String,
    pub seed: u64,
    pub mae: f64,
    pub mse: f64,
    pub final_lr: f64,
    pub final_lc: f64,
    pub consistency_gap: f64,
    pub seconds: f64,
}

/// A labeled configuration in a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub label: String,
    pub config: RunConfig,
}

impl Arm {
    fn derive(base: &RunConfig, label: &str, f: impl FnOnce(&mut RunConfig)) -> Self {
        let mut config = base.clone();
        f(&mut config);
        Self {
            label: label.to_string(),
            config,
        }
    }
}

/// Arms of the loss/head ablation, in output order.
pub fn ablation_arms(base: &RunConfig) -> Vec<Arm> {
    let alpha = base.alpha;
    let weak_only = |c: &mut RunConfig| {
        c.local_loss = LocalLoss::None;
        c.alpha = 0.0;
        c.grid = PartitionGrid::square(2);
    };
    let mut arms = vec![
        Arm::derive(base, "baseline L_r", |c| {
            c.variant = Variant::Conv;
            c.head = HeadKind::Direct;
            weak_only(c);
        }),
        Arm::derive(base, "SFSL L_r", |c| {
            c.variant = Variant::Conv;
            c.head = HeadKind::Sfsl;
            weak_only(c);
        }),
        Arm::derive(base, "SFSL L_r+L_gt(n=4)", |c| {
            c.variant = Variant::Conv;
            c.head = HeadKind::Sfsl;
            c.local_loss = LocalLoss::GroundTruthSum;
            c.alpha = 1.0;
            c.grid = PartitionGrid::square(2);
        }),
        Arm::derive(base, "SFSL L_r+L_c(n=16)", |c| {
            c.variant = Variant::Conv;
            c.head = HeadKind::Sfsl;
            c.local_loss = LocalLoss::Consistency;
            c.alpha = alpha;
            c.grid = PartitionGrid::square(4);
        }),
        Arm::derive(base, "SFSL L_r+L_c(n=4)", |c| {
            c.variant = Variant::Conv;
            c.head = HeadKind::Sfsl;
            c.local_loss = LocalLoss::Consistency;
            c.alpha = alpha;
            c.grid = PartitionGrid::square(2);
        }),
    ];
    if base.token_ablation {
        arms.push(Arm::derive(base, "token L_r", |c| {
            c.variant = Variant::Token;
            c.head = HeadKind::Direct;
            weak_only(c);
        }));
        arms.push(Arm::derive(base, "token SFSL L_r", |c| {
            c.variant = Variant::Token;
            c.head = HeadKind::Sfsl;
            weak_only(c);
        }));
    }
    arms.push(Arm::derive(base, "token SFSL L_r+L_c(n=4)", |c| {
        c.variant = Variant::Token;
        c.head = HeadKind::Sfsl;
        c.local_loss = LocalLoss::Consistency;
        c.alpha = alpha;
        c.grid = PartitionGrid::square(2);
    }));
    arms
}

/// Splits a dataset into the configured train and test parts.
pub fn split_scenes<'a>(config: &RunConfig, scenes: &'a [SyntheticScene]) -> Result<(&'a [SyntheticScene], &'a [SyntheticScene])> {
    if scenes.len() <= config.train_scenes {
        return Err(Error::config(
            "train_scenes",
            format!("{} training scenes leave no test scenes in a dataset of {}", config.train_scenes, scenes.len()),
        ));
    }
    Ok(scenes.split_at(config.train_scenes))
}

/// Training pairs: exact patch labels in patch mode, otherwise the scene
/// counts with label deviation drawn from `seed` when configured.
pub fn training_set(config: &RunConfig, scenes: &[SyntheticScene], seed: u64) -> Result<Vec<(Tensor, f64)>> {
    if config.patch_label_mode {
        return make_patch_dataset(scenes, config.patch_grid);
    }
    let mut set = labeled(scenes);
    if config.label_noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        for (_, c) in &mut set {
            *c = inject_label_noise(*c, config.label_noise_sigma, &mut rng)?;
        }
    }
    Ok(set)
}

/// One trained run and its record.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub record: ExperimentRecord,
    pub outcome: TrainOutcome,
}

/// Trains `config` with `seed`, then scores it on clean test counts.
pub fn run_arm(label: &str, config: &RunConfig, train_scenes: &[SyntheticScene], test_scenes: &[SyntheticScene], seed: u64) -> Result<RunResult> {
    config.validate()?;
    if test_scenes.is_empty() {
        return Err(Error::invalid("run_arm", "no test scenes"));
    }
    let start = Instant::now();
    let train_set = training_set(config, train_scenes, seed)?;
    let mut outcome = train(&config.train_config(seed), &train_set, &[])?;
    if config.patch_label_mode {
        outcome.model.inference_tiles = Some(config.patch_grid);
    }
    let model = &outcome.model;
    let preds = test_scenes
        .iter()
        .map(|s| model.predict(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<f64> = test_scenes.iter().map(|s| s.count as f64).collect();
    let (mae, mse) = mae_mse(&preds, &counts)?;
    let images: Vec<Tensor> = test_scenes.iter().map(|s| s.image.clone()).collect();
    let gap = consistency_gap(model, &images, config.grid)?;
    let last = outcome.history.last().expect("at least one epoch");
    let record = ExperimentRecord {
        arm: label.to_string(),
        config_digest: config.digest(),
        seed,
        mae,
        mse,
        final_lr: last.losses.l_r,
        final_lc: last.losses.l_c,
        consistency_gap: gap,
        seconds: if config.wall_clock {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    };
    Ok(RunResult { record, outcome })
}

/// Records of a suite plus the runs that aborted.
#[derive(Debug, Default)]
pub struct SuiteReport {
    pub records: Vec<ExperimentRecord>,
    pub failures: Vec<(String, u64, Error)>,
}

impl SuiteReport {
    /// MAE of `arm` per seed, in seed order.
    pub fn maes(&self, arm: &str) -> Vec<(u64, f64)> {
        self.records.iter().filter(|r| r.arm == arm).map(|r| (r.seed, r.mae)).collect()
    }
}

fn run_suite(arms: &[Arm], scenes: &[SyntheticScene], seeds: &[u64]) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for arm in arms {
        let (tr, te) = split_scenes(&arm.config, scenes)?;
        for &seed in seeds {
            match run_arm(&arm.label, &arm.config, tr, te, seed) {
                Ok(r) => report.records.push(r.record),
                Err(e) => report.failures.push((arm.label.clone(), seed, e)),
            }
        }
    }
    Ok(report)
}

/// Every ablation arm on every seed of `base.seeds`. Aborted runs are listed
/// in the report instead of stopping the suite.
pub fn ablation_suite(base: &RunConfig, scenes: &[SyntheticScene]) -> Result<SuiteReport> {
    base.validate()?;
    if base.seeds.len() < 3 {
        return Err(Error::config("seeds", "the ablation suite needs at least 3 seeds"));
    }
    run_suite(&ablation_arms(base), scenes, &base.seeds)
}

/// Arms of the label-deviation sweep, one per σ.
pub fn robustness_arms(base: &RunConfig, sigmas: &[f64]) -> Vec<Arm> {
    sigmas
        .iter()
        .map(|&s| Arm::derive(base, &format!("sigma={s}"), |c| c.label_noise_sigma = s))
        .collect()
}

/// Trains with deviated training labels for each σ and scores on clean test
/// labels.
pub fn robustness_sweep(base: &RunConfig, scenes: &[SyntheticScene], sigmas: &[f64]) -> Result<SuiteReport> {
    base.validate()?;
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::config("sigmas", format!("{s} is negative")));
    }
    run_suite(&robustness_arms(base, sigmas), scenes, &base.seeds)
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

/// One row per record under [`CSV_HEADER`], floats with 17 significant digits.
pub fn write_records<W: Write>(out: W, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.arm.clone(),
            r.config_digest.clone(),
            r.seed.to_string(),
            float(r.mae),
            float(r.mse),
            float(r.final_lr),
            float(r.final_lc),
            float(r.consistency_gap),
            float(r.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: std::io::Read>(input: R) -> Result<Vec<ExperimentRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            row[i].parse().map_err(|_| Error::Format {
                offset: row.position().map_or(0, |p| p.byte() as usize),
                reason: format!("column {} is not a number", CSV_HEADER[i]),
            })
        };
        out.push(ExperimentRecord {
            arm: row[0].to_string(),
            config_digest: row[1].to_string(),
            seed: num(2)? as u64,
            mae: num(3)?,
            mse: num(4)?,
            final_lr: num(5)?,
            final_lc: num(6)?,
            consistency_gap: num(7)?,
            seconds: num(8)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::ModelConfig;

    #[test]
    fn mae_mse_examples() {
        assert_eq!(mae_mse(&[10.0, 20.0], &[12.0, 18.0]).unwrap(), (2.0, 2.0));
        assert_eq!(mae_mse(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), (0.0, 0.0));
        assert!(mae_mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae_mse(&[], &[]).is_err());
    }

    #[test]
    fn zero_model_has_zero_gap() {
        let mut m = CountingModel::init(
            ModelConfig {
                backbone: BackboneConfig {
                    input_size: 16,
                    feature_dim: 4,
                    ..BackboneConfig::conv_default()
                },
                mlp_hidden: vec![4],
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        for (_, t) in m.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        // a zero f̂ is allowed at inference; the cosine is then 0.5 everywhere
        let imgs = vec![Tensor::full(&[1, 32, 32], 0.3)];
        assert_eq!(consistency_gap(&m, &imgs, PartitionGrid::square(2)).unwrap(), 0.0);
    }

    #[test]
    fn arms_enumerated_with_distinct_digests() {
        let base = RunConfig::default();
        let arms = ablation_arms(&base);
        assert_eq!(arms.len(), 6);
        let mut digests: Vec<String> = arms.iter().map(|a| a.config.digest()).collect();
        digests.sort();
        digests.dedup();
        assert_eq!(digests.len(), 6);
        let with_tokens = ablation_arms(&RunConfig {
            token_ablation: true,
            ..base
        });
        assert_eq!(with_tokens.len(), 8);
    }

    #[test]
    fn csv_layout_and_round_trip() {
        let r = ExperimentRecord {
            arm: "SFSL L_r+L_c(n=4)".into(),
            config_digest: "ab".into(),
            seed: 3,
            mae: 0.1,
            mse: 1.0 / 3.0,
            final_lr: 2.5,
            final_lc: 0.0,
            consistency_gap: 1e-300,
            seconds: 0.0,
        };
        let mut buf = Vec::new();
        write_records(&mut buf, std::slice::from_ref(&r)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert!(text.contains("3.3333333333333331e-1"));
        assert!(!text.contains('\r'));
        assert_eq!(read_records(buf.as_slice()).unwrap(), vec![r]);
    }

    #[test]
    fn sigma_zero_leaves_labels_alone() {
        let scenes = crate::datagen::generate_dataset(&crate::datagen::DatasetSpec {
            num_scenes: 3,
            ..Default::default()
        })
        .unwrap();
        let clean = training_set(&RunConfig::default(), &scenes, 0).unwrap();
        assert_eq!(clean, labeled(&scenes));
        let noisy = training_set(
            &RunConfig {
                label_noise_sigma: 0.1,
                ..RunConfig::default()
            },
            &scenes,
            0,
        )
        .unwrap();
        assert_ne!(noisy, clean);
        let patches = training_set(
            &RunConfig {
                patch_label_mode: true,
                ..RunConfig::default()
            },
            &scenes,
            0,
        )
        .unwrap();
        assert_eq!(patches.len(), 18);
    }
}
