//! The gradient verification suite behind `weakcount gradcheck`.
//!
//! Every differentiable op is checked against central differences on several
//! random instances, followed by whole-model checks of the training loss on a
//! micro batch (one image, four subimages). A deliberately wrong backward
//! rule must then be caught, which shows the checker is not vacuous.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_with, AdjointFault, GradCheckOptions, Tape, Tensor, Var};
use crate::backbone::{BackboneConfig, ConvConfig, TokenConfig, Variant};
use crate::error::{Error, Result};
use crate::glc::{assemble_batch, glc_loss, gt_sum_loss, regression_loss, total_loss, LocalLoss, PartitionGrid};
use crate::model::{CountingModel, HeadKind, ModelConfig};

/// Largest accepted `|analytic − numeric| / max(1, |numeric|)`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
const OP_SEEDS: u64 = 5;
const MODEL_SEEDS: u64 = 2;
const COORDS_PER_TENSOR: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub max_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOutcome {
    pub cases: Vec<CaseResult>,
    /// Error measured with a scaled adjoint injected; must exceed the tolerance.
    pub control_error: f64,
}

impl SuiteOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !(c.max_error <= GRADCHECK_TOLERANCE))
    }

    pub fn control_detected(&self) -> bool {
        self.control_error > GRADCHECK_TOLERANCE
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none() && self.control_detected()
    }

    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_error).fold(0.0, f64::max)
    }
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Uniform magnitudes in `[lo, hi)` with random signs.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let t = uniform(rng, shape, lo, hi);
    let signs: Vec<f64> = (0..t.numel()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let data = t.data().iter().zip(signs).map(|(v, s)| v * s).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut d = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (r, c, k) = (d(1, 4), d(1, 4), d(1, 4));
    let (r2, c2) = (d(1, 3), d(1, 3));
    let (ch, o, h, w) = (d(1, 3), d(1, 3), d(4, 7), d(4, 7));
    let stride = d(1, 2);
    let padding = d(0, 1);
    let rows = d(2, 5);
    let conv_build: Build = match (stride, padding) {
        (1, 0) => |t, v| t.conv2d(v[0], v[1], 1, 0),
        (1, _) => |t, v| t.conv2d(v[0], v[1], 1, 1),
        (_, 0) => |t, v| t.conv2d(v[0], v[1], 2, 0),
        _ => |t, v| t.conv2d(v[0], v[1], 2, 1),
    };
    let slice_build: Build = |t, v| {
        let n = t.value(v[0]).shape()[0];
        t.slice_rows(v[0], 1, n)
    };
    let mut u = |shape: &[usize]| uniform(rng, shape, -1.0, 1.0);
    let mut cases = vec![
        OpCase { name: "add", inputs: vec![u(&[r, c]), u(&[r, c])], build: |t, v| t.add(v[0], v[1]) },
        OpCase { name: "sub", inputs: vec![u(&[r, c]), u(&[r, c])], build: |t, v| t.sub(v[0], v[1]) },
        OpCase { name: "mul", inputs: vec![u(&[r, c]), u(&[r, c])], build: |t, v| t.mul(v[0], v[1]) },
        OpCase { name: "matmul", inputs: vec![u(&[r, k]), u(&[k, c])], build: |t, v| t.matmul(v[0], v[1]) },
        OpCase { name: "sum", inputs: vec![u(&[r, c])], build: |t, v| t.sum(v[0]) },
        OpCase { name: "mean", inputs: vec![u(&[r, c])], build: |t, v| t.mean(v[0]) },
        OpCase { name: "concat0", inputs: vec![u(&[r, c]), u(&[r2, c])], build: |t, v| t.concat(v, 0) },
        OpCase { name: "concat1", inputs: vec![u(&[r, c]), u(&[r, c2])], build: |t, v| t.concat(v, 1) },
        OpCase { name: "scale", inputs: vec![u(&[r, c])], build: |t, v| t.scale(v[0], -1.75) },
        OpCase { name: "softmax_rows", inputs: vec![u(&[r, c])], build: |t, v| t.softmax_rows(v[0]) },
        OpCase { name: "transpose", inputs: vec![u(&[r, c])], build: |t, v| t.transpose(v[0]) },
        OpCase { name: "conv2d", inputs: vec![u(&[ch, h, w]), u(&[o, ch, 3, 3])], build: conv_build },
        OpCase { name: "reshape", inputs: vec![u(&[r, c])], build: |t, v| {
            let n = t.value(v[0]).numel();
            t.reshape(v[0], &[n, 1])
        } },
        OpCase { name: "slice_rows", inputs: vec![u(&[rows, c])], build: slice_build },
        OpCase { name: "bias_add0", inputs: vec![u(&[ch, h, w]), u(&[ch])], build: |t, v| t.bias_add(v[0], v[1], 0) },
        OpCase { name: "bias_add1", inputs: vec![u(&[r, c]), u(&[c])], build: |t, v| t.bias_add(v[0], v[1], 1) },
        OpCase { name: "cosine_rows", inputs: vec![u(&[r, c + 1]), u(&[c + 1])], build: |t, v| t.cosine_rows(v[0], v[1]) },
        OpCase { name: "square", inputs: vec![u(&[r, c])], build: |t, v| t.square(v[0]) },
        OpCase { name: "exp", inputs: vec![uniform(rng, &[r, c], -2.0, 2.0)], build: |t, v| t.exp(v[0]) },
        OpCase { name: "sqrt", inputs: vec![uniform(rng, &[r, c], 0.5, 3.0)], build: |t, v| t.sqrt(v[0]) },
    ];
    // kinks and poles stay out of reach of the finite-difference step
    cases.push(OpCase {
        name: "relu",
        inputs: vec![away_from_zero(rng, &[r, c], 0.05, 1.0)],
        build: |t, v| t.relu(v[0]),
    });
    cases.push(OpCase {
        name: "div",
        inputs: vec![uniform(rng, &[r, c], -1.0, 1.0), away_from_zero(rng, &[r, c], 0.5, 2.0)],
        build: |t, v| t.div(v[0], v[1]),
    });
    cases
}

/// Checks `Σ w ⊙ op(inputs)` with respect to every input in turn.
fn check_op(case: &OpCase, weights_seed: u64) -> Result<f64> {
    let mut probe = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = (case.build)(&mut probe, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let weights = uniform(&mut rng, probe.value(out).shape(), -1.0, 1.0);

    let mut worst: f64 = 0.0;
    for i in 0..case.inputs.len() {
        let f = |tape: &mut Tape, x: Var| -> Result<Var> {
            let vars: Vec<Var> = case
                .inputs
                .iter()
                .enumerate()
                .map(|(j, t)| if j == i { x } else { tape.constant(t.clone()) })
                .collect();
            let y = (case.build)(tape, &vars)?;
            let w = tape.constant(weights.clone());
            let p = tape.mul(y, w)?;
            tape.sum(p)
        };
        let report = grad_check_with(f, &case.inputs[i], &GradCheckOptions::with_step(STEP))?;
        worst = worst.max(report.max_error);
    }
    Ok(worst)
}

/// Model configurations for the whole-network checks.
fn micro_models() -> Vec<(&'static str, ModelConfig, LocalLoss)> {
    let conv = BackboneConfig {
        variant: Variant::Conv,
        input_size: 16,
        feature_dim: 4,
        conv: ConvConfig::default(),
        token: TokenConfig::default(),
    };
    let token = |d: usize| BackboneConfig {
        variant: Variant::Token,
        input_size: 16,
        feature_dim: d,
        conv: ConvConfig::default(),
        token: TokenConfig {
            patch: 8,
            layers: 1,
            heads: 2,
            mlp_hidden: 8,
        },
    };
    let m = |backbone, head| ModelConfig {
        backbone,
        head,
        mlp_hidden: vec![8, 6],
    };
    vec![
        ("model conv sfsl L_r+L_c", m(conv.clone(), HeadKind::Sfsl), LocalLoss::Consistency),
        ("model conv sfsl L_r+L_gt", m(conv.clone(), HeadKind::Sfsl), LocalLoss::GroundTruthSum),
        ("model conv direct L_r+L_c", m(conv, HeadKind::Direct), LocalLoss::Consistency),
        ("model token sfsl L_r+L_c", m(token(4), HeadKind::Sfsl), LocalLoss::Consistency),
        ("model token sfsl projected L_r+L_c", m(token(6), HeadKind::Sfsl), LocalLoss::Consistency),
    ]
}

/// The training objective of one micro batch, as a function of parameter `name`.
fn model_loss(model: &CountingModel, items: &[Tensor], counts: &[f64], local: LocalLoss, name: &str, tape: &mut Tape, x: Var) -> Result<Var> {
    let mut bound = model.params.bind_frozen(tape);
    bound.replace(name, x)?;
    let mut preds = Vec::with_capacity(items.len());
    for item in items {
        preds.push(model.forward(&bound, tape, item)?.count);
    }
    let n = items.len() / counts.len() - 1;
    let globals: Vec<Var> = preds.iter().step_by(n + 1).copied().collect();
    let locals: Vec<Vec<Var>> = preds.chunks(n + 1).map(|c| c[1..].to_vec()).collect();
    let l_r = regression_loss(tape, &globals, counts)?;
    match local {
        LocalLoss::Consistency => {
            let l_c = glc_loss(tape, &globals, &locals)?;
            total_loss(tape, l_r, l_c, 1.0)
        }
        LocalLoss::GroundTruthSum => {
            let l_gt = gt_sum_loss(tape, &locals, counts)?;
            tape.add(l_r, l_gt)
        }
        LocalLoss::None => Ok(l_r),
    }
}

fn check_model(config: &ModelConfig, local: LocalLoss, seed: u64, fault: Option<AdjointFault>) -> Result<f64> {
    let model = CountingModel::init(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let image = uniform(&mut rng, &[1, 24, 24], 0.0, 1.0);
    let count = rng.random_range(5.0..30.0);
    let batch = assemble_batch(&[(&image, count)], PartitionGrid::new(2, 2)?, config.backbone.input_size)?;

    let mut worst: f64 = 0.0;
    for (name, value) in model.params.iter() {
        let mut coords: Vec<usize> = (0..value.numel()).collect();
        if coords.len() > COORDS_PER_TENSOR {
            for i in 0..COORDS_PER_TENSOR {
                let j = rng.random_range(i..coords.len());
                coords.swap(i, j);
            }
            coords.truncate(COORDS_PER_TENSOR);
        }
        let options = GradCheckOptions {
            step: STEP,
            coords: Some(coords),
            fault: fault.clone(),
        };
        let f = |tape: &mut Tape, x: Var| model_loss(&model, &batch.items, &batch.global_counts, local, name, tape, x);
        worst = worst.max(grad_check_with(f, value, &options)?.max_error);
    }
    Ok(worst)
}

/// Runs every case derived from `seed`.
pub fn gradcheck_suite(seed: u64) -> Result<SuiteOutcome> {
    let mut cases = Vec::new();
    for s in 0..OP_SEEDS {
        let case_seed = seed.wrapping_mul(1000).wrapping_add(s);
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        for case in op_cases(&mut rng) {
            cases.push(CaseResult {
                name: case.name.to_string(),
                seed: case_seed,
                max_error: check_op(&case, case_seed ^ 0xabc)?,
            });
        }
    }
    for s in 0..MODEL_SEEDS {
        let case_seed = seed.wrapping_mul(1000).wrapping_add(s);
        for (name, config, local) in micro_models() {
            cases.push(CaseResult {
                name: name.to_string(),
                seed: case_seed,
                max_error: check_model(&config, local, case_seed, None)?,
            });
        }
    }
    let (_, config, local) = micro_models().swap_remove(0);
    let control_error = check_model(
        &config,
        local,
        seed,
        Some(AdjointFault {
            op: "matmul",
            factor: 1.01,
        }),
    )?;
    Ok(SuiteOutcome { cases, control_error })
}

/// Fails with [`Error::GradCheck`] unless the suite passes.
pub fn run_gradcheck(seed: u64) -> Result<SuiteOutcome> {
    let outcome = gradcheck_suite(seed)?;
    if let Some(bad) = outcome.failures().next() {
        return Err(Error::GradCheck(format!(
            "{} (seed {}) error {:e} exceeds {GRADCHECK_TOLERANCE:e}",
            bad.name, bad.seed, bad.max_error
        )));
    }
    if !outcome.control_detected() {
        return Err(Error::GradCheck(format!(
            "injected adjoint fault went unnoticed (error {:e})",
            outcome.control_error
        )));
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_cases_cover_every_differentiable_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let names: Vec<&str> = op_cases(&mut rng).iter().map(|c| c.name).collect();
        for op in ["add", "sub", "mul", "div", "matmul", "relu", "sum", "mean", "concat0", "scale", "exp", "sqrt", "softmax_rows", "transpose", "conv2d"] {
            assert!(names.contains(&op), "{op}");
        }
    }

    #[test]
    fn single_seed_op_cases_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in op_cases(&mut rng) {
            let err = check_op(&case, 1).unwrap();
            assert!(err <= GRADCHECK_TOLERANCE, "{}: {err:e}", case.name);
        }
    }
}
