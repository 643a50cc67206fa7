//! Count losses. Predictions enter as `[1]` tape nodes, one per image.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which term ties the subimage predictions together during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LocalLoss {
    /// Regression on global images only.
    None,
    /// `L_c`: local sums pulled toward the global prediction.
    Consistency,
    /// `L_gt`: local sums pulled toward the ground-truth count (ablation).
    GroundTruthSum,
}

impl LocalLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            LocalLoss::None => "none",
            LocalLoss::Consistency => "lc",
            LocalLoss::GroundTruthSum => "lgt",
        }
    }
}

/// Loss values of one batch or one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBundle {
    pub l_r: f64,
    pub l_c: f64,
    pub l_gt: Option<f64>,
    pub alpha: f64,
    pub total: f64,
}

impl LossBundle {
    /// `total` is computed here as `l_r + alpha * l_c`.
    pub fn new(l_r: f64, l_c: f64, l_gt: Option<f64>, alpha: f64) -> Self {
        Self {
            l_r,
            l_c,
            l_gt,
            alpha,
            total: l_r + alpha * l_c,
        }
    }
}

fn stack(tape: &mut Tape, preds: &[Var], op: &'static str) -> Result<Var> {
    if preds.is_empty() {
        return Err(Error::invalid(op, "no predictions"));
    }
    for &p in preds {
        if !tape.value(p).is_scalar() {
            return Err(Error::NotScalar {
                shape: tape.value(p).shape().to_vec(),
            });
        }
    }
    let x = tape.concat(preds, 0)?;
    tape.reshape(x, &[preds.len()])
}

fn mean_square(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// `L_r = (1/b) Σ (c̃_i − c_i)²`.
pub fn regression_loss(tape: &mut Tape, global_preds: &[Var], counts: &[f64]) -> Result<Var> {
    if global_preds.len() != counts.len() {
        return Err(Error::shape("regression_loss", &[global_preds.len()], &[counts.len()]));
    }
    let preds = stack(tape, global_preds, "regression_loss")?;
    let target = tape.constant(Tensor::vector(counts.to_vec()));
    mean_square(tape, preds, target)
}

fn local_sums(tape: &mut Tape, local_preds: &[Vec<Var>], op: &'static str) -> Result<Var> {
    let n = local_preds.first().map_or(0, Vec::len);
    if n == 0 || local_preds.iter().any(|l| l.len() != n) {
        return Err(Error::invalid(op, "every image needs the same non-zero number of subimages"));
    }
    let sums = local_preds
        .iter()
        .map(|locals| {
            let v = stack(tape, locals, op)?;
            tape.sum(v)
        })
        .collect::<Result<Vec<_>>>()?;
    stack(tape, &sums, op)
}

/// `L_c = (1/b) Σ_i (Σ_j c̃_i^j − c̃_i)²`. Gradients reach both branches.
pub fn glc_loss(tape: &mut Tape, global_preds: &[Var], local_preds: &[Vec<Var>]) -> Result<Var> {
    if global_preds.len() != local_preds.len() {
        return Err(Error::shape("glc_loss", &[global_preds.len()], &[local_preds.len()]));
    }
    let sums = local_sums(tape, local_preds, "glc_loss")?;
    let globals = stack(tape, global_preds, "glc_loss")?;
    mean_square(tape, sums, globals)
}

/// `L_gt = (1/b) Σ_i (Σ_j c̃_i^j − c_i)²`.
pub fn gt_sum_loss(tape: &mut Tape, local_preds: &[Vec<Var>], counts: &[f64]) -> Result<Var> {
    if local_preds.len() != counts.len() {
        return Err(Error::shape("gt_sum_loss", &[local_preds.len()], &[counts.len()]));
    }
    let sums = local_sums(tape, local_preds, "gt_sum_loss")?;
    let target = tape.constant(Tensor::vector(counts.to_vec()));
    mean_square(tape, sums, target)
}

/// `L_total = L_r + α·L_c`.
pub fn total_loss(tape: &mut Tape, l_r: Var, l_c: Var, alpha: f64) -> Result<Var> {
    let weighted = tape.scale(l_c, alpha)?;
    tape.add(l_r, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(tape: &mut Tape, v: &[f64]) -> Vec<Var> {
        v.iter().map(|&x| tape.leaf(Tensor::scalar(x))).collect()
    }

    fn val(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn regression_examples() {
        let mut tape = Tape::new();
        let p = scalars(&mut tape, &[3.0, 5.0]);
        let l = regression_loss(&mut tape, &p, &[3.0, 5.0]).unwrap();
        assert_eq!(val(&tape, l), 0.0);
        let p = scalars(&mut tape, &[10.0]);
        let l = regression_loss(&mut tape, &p, &[12.0]).unwrap();
        assert_eq!(val(&tape, l), 4.0);
        assert!(regression_loss(&mut tape, &p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn regression_matches_loop() {
        let preds = [1.25, -3.5, 7.0];
        let counts = [2.0, 0.5, 9.75];
        let mut tape = Tape::new();
        let p = scalars(&mut tape, &preds);
        let l = regression_loss(&mut tape, &p, &counts).unwrap();
        let mut acc = 0.0;
        for (a, b) in preds.iter().zip(&counts) {
            acc += (a - b) * (a - b);
        }
        assert!((val(&tape, l) - acc / 3.0).abs() < 1e-12);
    }

    #[test]
    fn glc_examples() {
        let mut tape = Tape::new();
        let g = scalars(&mut tape, &[10.0]);
        let l = vec![scalars(&mut tape, &[2.0, 2.0, 2.0, 2.0])];
        let loss = glc_loss(&mut tape, &g, &l).unwrap();
        assert_eq!(val(&tape, loss), 4.0);
        let g = scalars(&mut tape, &[8.0]);
        let loss = glc_loss(&mut tape, &g, &l).unwrap();
        assert_eq!(val(&tape, loss), 0.0);
    }

    #[test]
    fn glc_gradient_reaches_both_branches() {
        let mut tape = Tape::new();
        let g = scalars(&mut tape, &[10.0]);
        let l = vec![scalars(&mut tape, &[2.0, 2.5, 2.0, 2.0])];
        let loss = glc_loss(&mut tape, &g, &l).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d/dg (s - g)^2 = -2(s - g) = 3; d/dl_j = 2(s - g) = -3
        assert_eq!(grads.get(g[0]).unwrap().data(), &[3.0]);
        for &v in &l[0] {
            assert_eq!(grads.get(v).unwrap().data(), &[-3.0]);
        }
    }

    #[test]
    fn gt_sum_examples() {
        let mut tape = Tape::new();
        let l = vec![scalars(&mut tape, &[3.0, 3.0, 3.0, 3.0])];
        let loss = gt_sum_loss(&mut tape, &l, &[10.0]).unwrap();
        assert_eq!(val(&tape, loss), 4.0);
        let loss = gt_sum_loss(&mut tape, &l, &[12.0]).unwrap();
        assert_eq!(val(&tape, loss), 0.0);
        // same as glc with the ground truth in place of the global prediction
        let g = scalars(&mut tape, &[10.0]);
        let a = gt_sum_loss(&mut tape, &l, &[10.0]).unwrap();
        let b = glc_loss(&mut tape, &g, &l).unwrap();
        assert_eq!(val(&tape, a), val(&tape, b));
    }

    #[test]
    fn total_examples() {
        let mut tape = Tape::new();
        let lr = tape.leaf(Tensor::scalar(2.0));
        let lc = tape.leaf(Tensor::scalar(3.0));
        let t = total_loss(&mut tape, lr, lc, 1.0).unwrap();
        assert_eq!(val(&tape, t), 5.0);
        let t = total_loss(&mut tape, lr, lc, 0.0).unwrap();
        assert_eq!(val(&tape, t), 2.0);
        assert_eq!(LossBundle::new(2.0, 3.0, None, 1.0).total, 5.0);
    }

    #[test]
    fn mismatched_locals_rejected() {
        let mut tape = Tape::new();
        let g = scalars(&mut tape, &[1.0, 2.0]);
        let l = vec![scalars(&mut tape, &[1.0, 1.0]), scalars(&mut tape, &[1.0])];
        assert!(glc_loss(&mut tape, &g, &l).is_err());
        assert!(glc_loss(&mut tape, &g[..1], &l).is_err());
    }
}
