use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::tensor::Real;

/// Learning rate per parameter group name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearningRates(pub BTreeMap<String, f64>);

impl LearningRates {
    pub fn new<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Self(pairs.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn get(&self, group: &str) -> Option<f64> {
        self.0.get(group).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 5e-4 }
    }
}

/// Momentum SGD with coupled weight decay:
/// `v ← μ·v + g + λ·w; w ← w − lr·v`, then gradients are cleared.
pub fn sgd_step<T: Real, M: Parameterized<T> + ?Sized>(
    model: &mut M,
    lrs: &LearningRates,
    cfg: SgdConfig,
) -> Result<()> {
    let mut missing = None;
    model.visit_params(&mut |p| {
        if let Some(g) = &p.group {
            if lrs.get(g).is_none() && missing.is_none() {
                missing = Some(g.clone());
            }
        }
    });
    if let Some(g) = missing {
        return Err(Error::Config(format!("no learning rate for parameter group `{g}`")));
    }
    let mu = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    let mut bad = None;
    model.visit_params_mut(&mut |p| {
        let Some(g) = &p.group else { return };
        let lr = T::lit(lrs.get(g).unwrap());
        for ((w, v), grad) in p.value.iter_mut().zip(&mut p.momentum).zip(&mut p.grad) {
            *v = mu * *v + *grad + wd * *w;
            *w -= lr * *v;
            *grad = T::zero();
        }
        if bad.is_none() && p.value.iter().any(|w| !w.is_finite()) {
            bad = Some(p.name.clone());
        }
    });
    model.bump_version();
    match bad {
        Some(name) => Err(Error::Numeric(format!("parameter `{name}` became non-finite"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, Network};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_net(w: f64) -> Network<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut n = Network::new(vec![("d".into(), LayerSpec::Dense { inputs: 1, outputs: 1 })], "head", &mut rng).unwrap();
        n.layers_mut()[0].params[0].value = vec![w];
        n.layers_mut()[0].params[1].value = vec![0.0];
        n
    }

    fn set_grad(n: &mut Network<f64>, g: f64) {
        n.layers_mut()[0].params[0].grad = vec![g];
    }

    fn weight(n: &Network<f64>) -> f64 {
        n.layers()[0].params[0].value[0]
    }

    #[test]
    fn plain_step() {
        let mut n = scalar_net(1.0);
        set_grad(&mut n, 1.0);
        let lrs = LearningRates::new([("head", 0.1)]);
        sgd_step(&mut n, &lrs, SgdConfig { momentum: 0.0, weight_decay: 0.0 }).unwrap();
        assert!((weight(&n) - 0.9).abs() < 1e-15);
        assert_eq!(n.layers()[0].params[0].grad, vec![0.0]);
    }

    #[test]
    fn momentum_two_steps() {
        let mut n = scalar_net(0.0);
        let lrs = LearningRates::new([("head", 0.1)]);
        let cfg = SgdConfig { momentum: 0.9, weight_decay: 0.0 };
        set_grad(&mut n, 1.0);
        sgd_step(&mut n, &lrs, cfg).unwrap();
        assert!((weight(&n) + 0.1).abs() < 1e-15);
        set_grad(&mut n, 1.0);
        sgd_step(&mut n, &lrs, cfg).unwrap();
        assert!((n.layers()[0].params[0].momentum[0] - 1.9).abs() < 1e-15);
        assert!((weight(&n) + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only() {
        let mut n = scalar_net(1.0);
        let lrs = LearningRates::new([("head", 0.1)]);
        sgd_step(&mut n, &lrs, SgdConfig { momentum: 0.0, weight_decay: 5e-4 }).unwrap();
        assert!((weight(&n) - 0.99995).abs() < 1e-15);
    }

    #[test]
    fn missing_group_is_config_error() {
        let mut n = scalar_net(1.0);
        let lrs = LearningRates::new([("backbone", 0.1)]);
        assert!(matches!(sgd_step(&mut n, &lrs, SgdConfig::default()), Err(Error::Config(_))));
        assert_eq!(weight(&n), 1.0);
    }
}
