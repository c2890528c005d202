//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every parameter. Parameters without a gradient entry
    /// are treated as having zero gradient (their moments still decay).
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        for name in grads.keys() {
            if !params.contains_key(name) {
                return Err(Error::Invalid {
                    op: "adam",
                    msg: format!("gradient for unknown parameter {:?}", name),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let zero;
            let g = match grads.get(name) {
                Some(g) => {
                    if g.len() != p.len() {
                        return Err(Error::Invalid {
                            op: "adam",
                            msg: format!(
                                "gradient length {} does not match parameter {:?} of length {}",
                                g.len(),
                                name,
                                p.len()
                            ),
                        });
                    }
                    g.as_slice()
                }
                None => {
                    zero = vec![0.0; p.len()];
                    zero.as_slice()
                }
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, vals: Vec<f64>) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), Tensor::vector(vals));
        m
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // With g = 1 the bias-corrected first step is lr * g / (sqrt(g^2) + eps).
        let mut params = single("p", vec![0.0]);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut params, &grads).unwrap();
        let p = params["p"].data()[0];
        assert!((p + 0.001).abs() < 1e-9, "p = {}", p);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_moments_untouched() {
        let mut params = single("p", vec![3.5, -1.25]);
        let before = params.clone();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params["p"], before["p"]);
        assert!(opt.m["p"].iter().all(|&x| x == 0.0));
        assert!(opt.v["p"].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn descends_a_quadratic() {
        // 100 steps on f(p) = p^2 from p = 1 must drive |p| below 0.9.
        let mut params = single("p", vec![1.0]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.005));
        for _ in 0..100 {
            let g = 2.0 * params["p"].data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), vec![g]);
            opt.step(&mut params, &grads).unwrap();
        }
        assert!(params["p"].data()[0].abs() < 0.9);
    }

    #[test]
    fn unknown_gradient_name_is_an_error() {
        let mut params = single("p", vec![0.0]);
        let mut grads = BTreeMap::new();
        grads.insert("q".to_string(), vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt.step(&mut params, &grads).is_err());
    }
}
