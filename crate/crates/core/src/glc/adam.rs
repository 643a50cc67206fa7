use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sfsl::F_HAT;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 weight decay, added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates per parameter and the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
    /// Parameters excluded from weight decay.
    pub decay_exempt: BTreeSet<String>,
}

impl AdamState {
    /// Zero moments for every parameter in `params`; `f̂` is exempt from decay.
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            p.iter()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(params),
            second: zeros(params),
            decay_exempt: [F_HAT.to_string()].into_iter().collect(),
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        if m.shape() != p.shape() {
            return Err(Error::shape("adam_step", m.shape(), p.shape()));
        }
        state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
    }
    state.step += 1;
    let c = state.config.clone();
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, g) in grads {
        let decay = if state.decay_exempt.contains(name) {
            0.0
        } else {
            c.weight_decay
        };
        let p = params.get_mut(name)?;
        let m = state.first.get_mut(name).expect("inserted above");
        let v = state.second.get_mut(name).expect("inserted above");
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gd = gv + decay * *pv;
            *mv = c.beta1 * *mv + (1.0 - c.beta1) * gd;
            *vv = c.beta2 * *vv + (1.0 - c.beta2) * gd * gd;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::scalar(v)).unwrap();
        p
    }

    fn grad(name: &str, g: f64) -> BTreeMap<String, Tensor> {
        [(name.to_string(), Tensor::scalar(g))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = single("w", 1.5);
        let mut s = AdamState::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &p,
        );
        adam_step(&mut p, &grad("w", 0.0), &mut s).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3, 0.5, -20.0] {
            let mut p = single("w", 0.0);
            let mut s = AdamState::new(
                AdamConfig {
                    weight_decay: 0.0,
                    ..AdamConfig::default()
                },
                &p,
            );
            adam_step(&mut p, &grad("w", g), &mut s).unwrap();
            let moved = p.get("w").unwrap().data()[0].abs();
            // |m̂| / (sqrt(v̂) + eps) = |g| / (|g| + eps)
            assert!((moved - 1e-3 * g.abs() / (g.abs() + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn three_steps_on_square() {
        // x_{t+1} = x_t − lr·m̂/(√v̂ + ε), g = 2x, worked out by hand in f64
        let expected = [0.999000000005, 0.9980000262138343, 0.9970000960651408];
        let mut p = single("x", 1.0);
        let mut s = AdamState::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &p,
        );
        for want in expected {
            let x = p.get("x").unwrap().data()[0];
            adam_step(&mut p, &grad("x", 2.0 * x), &mut s).unwrap();
            let got = p.get("x").unwrap().data()[0];
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
        assert_eq!(s.step, 3);
    }

    #[test]
    fn f_hat_exempt_from_decay() {
        let mut p = ParamStore::new();
        p.insert(F_HAT, Tensor::scalar(1.0)).unwrap();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let g: BTreeMap<String, Tensor> = [(F_HAT.to_string(), Tensor::scalar(0.0)), ("w".to_string(), Tensor::scalar(0.0))]
            .into_iter()
            .collect();
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p.get(F_HAT).unwrap().data(), &[1.0]);
        assert!(p.get("w").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single("w", 0.0);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let g = [("w".to_string(), Tensor::vector(vec![1.0, 2.0]))].into_iter().collect();
        assert!(adam_step(&mut p, &g, &mut s).is_err());
    }

    proptest::proptest! {
        #[test]
        fn one_step_decreases_quadratic(x0 in -50.0f64..50.0, curv in 0.1f64..10.0) {
            proptest::prop_assume!(x0.abs() > 1e-2);
            // f(x) = curv·x²/2; the first step has length lr, far below 1/curv
            let mut p = single("x", x0);
            let mut s = AdamState::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }, &p);
            adam_step(&mut p, &grad("x", curv * x0), &mut s).unwrap();
            let x1 = p.get("x").unwrap().data()[0];
            proptest::prop_assert!(curv * x1 * x1 < curv * x0 * x0);
        }
    }
}
