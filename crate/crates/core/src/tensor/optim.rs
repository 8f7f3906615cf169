use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(1e-3)
    }
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Adam { lr, .. } | Optimizer::Sgd { lr } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if let Optimizer::Adam { beta1, beta2, eps, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::invalid("adam needs beta1, beta2 in [0, 1) and eps > 0"));
            }
        }
        Ok(())
    }
}

/// Per-parameter moment accumulators plus the shared step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub optimizer: Optimizer,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer) -> Result<Self> {
        optimizer.validate()?;
        Ok(Self { optimizer, step: 0, first: BTreeMap::new(), second: BTreeMap::new() })
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    /// Apply one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", format!("`{name}`: param {:?}, grad {:?}", p.shape(), g.shape())));
            }
            if let Some(m) = self.first.get(name) {
                if m.len() != g.numel() {
                    return Err(Error::shape("optimizer_step", format!("`{name}`: state size {}", m.len())));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        for (name, g) in grads {
            let p = params.get_mut(name)?.data_mut();
            match self.optimizer {
                Optimizer::Sgd { lr } => {
                    for (w, d) in p.iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
                Optimizer::Adam { lr, beta1, beta2, eps } => {
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..p.len() {
                        let d = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * d;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * d * d;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = store(1.25);
        let mut st = OptimizerState::new(Optimizer::adam(0.01)).unwrap();
        st.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.25]);
        assert_eq!(st.step, 1);
        st.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(st.step, 2);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        // t = 1: m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps).
        let mut p = store(0.0);
        let mut st = OptimizerState::new(Optimizer::Adam { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }).unwrap();
        st.step(&mut p, &grad(0.5)).unwrap();
        let expected = -0.01 * 0.5 / (0.5 + 1e-8);
        let got = p.get("w").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((got - -0.0099999998).abs() < 1e-12);
    }

    #[test]
    fn sgd_step() {
        let mut p = store(1.0);
        let mut st = OptimizerState::new(Optimizer::Sgd { lr: 0.1 }).unwrap();
        st.step(&mut p, &grad(2.0)).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = store(1.0);
        let mut st = OptimizerState::new(Optimizer::adam(0.01)).unwrap();
        let g = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        assert!(st.step(&mut p, &g).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        assert!(OptimizerState::new(Optimizer::Sgd { lr: 0.0 }).is_err());
    }

    #[test]
    fn update_is_pure() {
        let mut p1 = store(0.3);
        let mut s1 = OptimizerState::new(Optimizer::adam(0.01)).unwrap();
        s1.step(&mut p1, &grad(0.2)).unwrap();
        let (mut p2, mut s2) = (p1.clone(), s1.clone());
        s1.step(&mut p1, &grad(-0.7)).unwrap();
        s2.step(&mut p2, &grad(-0.7)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }
}
