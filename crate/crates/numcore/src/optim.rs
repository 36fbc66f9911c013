use crate::error::{NumError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::all_finite;
use ndarray::ArrayD;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name and
/// created lazily the first time a parameter receives a gradient.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (ArrayD<F>, ArrayD<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore<F>,
        grads: &BTreeMap<String, ArrayD<F>>,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NumError::invalid(
                "adam_step",
                format!("learning rate must be > 0, got {lr}"),
            ));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| NumError::UnknownParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(NumError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !all_finite(g) {
                return Err(NumError::NonFinite { op: "adam_step" });
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = F::of(1.0 - beta1.powi(t));
        let bc2 = F::of(1.0 - beta2.powi(t));
        let (b1, b2, eps, lr) = (F::of(beta1), F::of(beta2), F::of(eps), F::of(lr));
        let one = F::one();

        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            ndarray::Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut BTreeMap<String, ArrayD<F>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::of(max_norm / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Slanted triangular learning rate: a short linear climb to `eta_max`
/// over the first `cut_frac` of training, then a long linear decay back to
/// `eta_max / ratio`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StlrSchedule {
    pub eta_max: f64,
    pub total_steps: usize,
    pub cut_frac: f64,
    pub ratio: f64,
}

impl StlrSchedule {
    pub fn new(eta_max: f64, total_steps: usize, cut_frac: f64, ratio: f64) -> Result<Self> {
        if !(eta_max > 0.0 && eta_max.is_finite()) {
            return Err(NumError::invalid(
                "stlr",
                format!("eta_max must be > 0, got {eta_max}"),
            ));
        }
        if !(cut_frac > 0.0 && cut_frac < 1.0) {
            return Err(NumError::invalid(
                "stlr",
                format!("cut_frac must lie in (0, 1), got {cut_frac}"),
            ));
        }
        if !(ratio > 1.0 && ratio.is_finite()) {
            return Err(NumError::invalid(
                "stlr",
                format!("ratio must be > 1, got {ratio}"),
            ));
        }
        Ok(StlrSchedule {
            eta_max,
            total_steps,
            cut_frac,
            ratio,
        })
    }

    /// Step at which the schedule peaks.
    pub fn cut(&self) -> usize {
        ((self.total_steps as f64 * self.cut_frac).floor() as usize).max(1)
    }

    pub fn lr(&self, t: usize) -> f64 {
        let t = if t > self.total_steps {
            log::warn!("stlr: step {t} past horizon {}, clamping", self.total_steps);
            self.total_steps
        } else {
            t
        };
        let cut = self.cut() as f64;
        let tf = t as f64;
        let p = if tf < cut {
            tf / cut
        } else {
            1.0 - (tf - cut) / (cut * (1.0 / self.cut_frac - 1.0))
        };
        // floor at the minimum rate when total_steps * cut_frac is fractional
        let p = p.max(0.0);
        self.eta_max * (1.0 + p * (self.ratio - 1.0)) / self.ratio
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn single(value: f64) -> (ParamStore<f64>, BTreeMap<String, ArrayD<f64>>) {
        let mut p = ParamStore::new();
        p.insert_filled("w", &[1], 0.0);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[1]), value));
        (p, g)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut p, g) = single(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &g, 1e-3).unwrap();
        assert_eq!(p.get("w").unwrap()[[0]], 0.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction: delta = -lr / (1 + eps)
        let (mut p, g) = single(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &g, 1e-3).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap()[[0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        // scripted recurrence in plain f64
        let (mut p, g) = single(0.5);
        let mut adam = Adam::new(AdamConfig::default());
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 0.0f64);
        let mut last = 0.0;
        for t in 1..=100 {
            adam.step(&mut p, &g, 1e-2).unwrap();
            m = 0.9 * m + 0.1 * 0.5;
            v = 0.999 * v + 0.001 * 0.25;
            theta -= 1e-2 * (m / (1.0 - 0.9f64.powi(t)))
                / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            let now = p.get("w").unwrap()[[0]];
            assert!(now < last);
            assert!((now - theta).abs() < 1e-12);
            last = now;
        }
    }

    #[test]
    fn nan_gradient_is_a_hard_error() {
        let (mut p, mut g) = single(0.0);
        g.get_mut("w").unwrap()[[0]] = f64::NAN;
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(
            adam.step(&mut p, &g, 1e-3),
            Err(NumError::NonFinite { .. })
        ));
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), ArrayD::from_elem(IxDyn(&[1]), 3.0f64));
        g.insert("b".to_string(), ArrayD::from_elem(IxDyn(&[1]), 4.0f64));
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((g["a"][[0]] - 0.6).abs() < 1e-12);
        assert!((g["b"][[0]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn stlr_reference_points() {
        let s = StlrSchedule::new(1e-3, 1000, 0.1, 32.0).unwrap();
        assert_eq!(s.cut(), 100);
        assert!((s.lr(0) - 3.125e-5).abs() < 1e-12);
        assert!((s.lr(100) - 1e-3).abs() < 1e-12);
        assert!((s.lr(1000) - 3.125e-5).abs() < 1e-12);
        assert_eq!(s.lr(2000), s.lr(1000));
    }

    #[test]
    fn stlr_rejects_bad_parameters() {
        assert!(StlrSchedule::new(1e-3, 10, 0.0, 32.0).is_err());
        assert!(StlrSchedule::new(1e-3, 10, 1.0, 32.0).is_err());
        assert!(StlrSchedule::new(1e-3, 10, 0.1, 1.0).is_err());
        assert!(StlrSchedule::new(0.0, 10, 0.1, 32.0).is_err());
    }
}
