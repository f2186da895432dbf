//! AdamW with decoupled weight decay and a linear learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear interpolation from `start` to `end` as `step` runs over `0..total`.
pub fn linear_lr(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return start;
    }
    start + (end - start) * step as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Optimizer state: first and second moments for exactly the trainable
/// tensors, plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new<'a>(config: AdamWConfig, trainable: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> Self {
        let moments = trainable
            .into_iter()
            .map(|(n, shape)| {
                (
                    n.to_string(),
                    Moments {
                        m: Tensor::zeros(shape),
                        v: Tensor::zeros(shape),
                    },
                )
            })
            .collect();
        Self { config, t: 0, moments }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn tracks(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// One update over every tracked tensor found in `targets` (each tree
    /// visited under its name prefix). `grads` must name exactly the
    /// tracked tensors.
    pub fn step(
        &mut self,
        lr: f64,
        grads: &BTreeMap<String, Tensor>,
        targets: &mut [(&str, &mut dyn Params)],
    ) -> Result<()> {
        if let Some(frozen) = grads.keys().find(|n| !self.moments.contains_key(*n)) {
            return Err(Error::contract(format!("gradient supplied for frozen tensor {frozen}")));
        }
        if let Some(missing) = self.moments.keys().find(|n| !grads.contains_key(*n)) {
            return Err(Error::contract(format!("no gradient for trainable tensor {missing}")));
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut updated = 0usize;
        let mut err = None;
        for (prefix, tree) in targets.iter_mut() {
            tree.visit_mut(prefix, &mut |name, p| {
                let Some(mom) = self.moments.get_mut(&name) else {
                    return;
                };
                let g = &grads[&name];
                if g.shape() != p.shape() {
                    err.get_or_insert(Error::ShapeMismatch {
                        op: "optimizer_step",
                        lhs: g.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                    return;
                }
                updated += 1;
                let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
                for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    *w -= lr * (update + weight_decay * *w);
                }
            });
        }
        if let Some(e) = err {
            return Err(e);
        }
        if updated != self.moments.len() {
            return Err(Error::contract(format!(
                "{} tracked tensors but only {updated} found among the targets",
                self.moments.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Tensor);

    impl Params for One {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
            f(format!("{prefix}w"), &self.0);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
            f(format!("{prefix}w"), &mut self.0);
        }
    }

    fn grads(pairs: &[(&str, f64)]) -> BTreeMap<String, Tensor> {
        pairs.iter().map(|(n, g)| (n.to_string(), Tensor::scalar(*g))).collect()
    }

    fn single(value: f64, grad: f64, config: AdamWConfig, lr: f64) -> f64 {
        let mut p = One(Tensor::scalar(value));
        let mut opt = AdamW::new(config, [("w", &[][..])]);
        opt.step(lr, &grads(&[("w", grad)]), &mut [("", &mut p)]).unwrap();
        p.0.item()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert_eq!(single(0.37, 0.0, cfg, 1e-4), 0.37);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let (w0, g, lr) = (0.5, 1.0, 1e-4);
        let c = AdamWConfig::default();
        // After one step, m̂ = g and v̂ = g², so the adaptive term is g / (|g| + eps).
        let m_hat = ((1.0 - c.beta1) * g) / (1.0 - c.beta1);
        let v_hat = ((1.0 - c.beta2) * g * g) / (1.0 - c.beta2);
        let expected = w0 - lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * w0);
        let got = single(w0, g, c, lr);
        assert!((got - expected).abs() <= 1e-15, "{got} vs {expected}");
        assert!((got - (w0 - lr * (1.0 / (1.0 + 1e-8) + 0.01 * w0))).abs() <= 1e-15);
    }

    #[test]
    fn schedule_midpoint_is_the_mean() {
        let mid = linear_lr(1e-4, 1e-5, 1000, 2000);
        assert!((mid - (1e-4 + 1e-5) / 2.0).abs() < 1e-18);
        assert_eq!(linear_lr(1e-4, 1e-5, 0, 2000), 1e-4);
    }

    #[test]
    fn gradient_for_untracked_tensor_is_rejected() {
        let mut p = One(Tensor::scalar(1.0));
        let mut opt = AdamW::new(AdamWConfig::default(), [("w", &[][..])]);
        let both = grads(&[("w", 1.0), ("frozen", 1.0)]);
        assert!(matches!(opt.step(1e-3, &both, &mut [("", &mut p)]), Err(Error::Contract(_))));
        assert!(matches!(opt.step(1e-3, &BTreeMap::new(), &mut [("", &mut p)]), Err(Error::Contract(_))));
        assert_eq!(opt.steps_taken(), 0);
        assert_eq!(p.0.item(), 1.0);
    }

    #[test]
    fn repeated_steps_descend_a_quadratic() {
        let mut p = One(Tensor::scalar(3.0));
        let mut opt = AdamW::new(AdamWConfig::default(), [("m/w", &[][..])]);
        for _ in 0..500 {
            let g = grads(&[("m/w", 2.0 * p.0.item())]);
            opt.step(0.05, &g, &mut [("m/", &mut p)]).unwrap();
        }
        assert!(p.0.item().abs() < 0.1, "{}", p.0.item());
    }
}
