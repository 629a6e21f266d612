//! Discrete noise schedules and the closed-form forward process.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Element, Tensor};

/// Which family of betas to build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    /// Squared-cosine cumulative schedule with offset `s`.
    Cosine { s: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    #[serde(flatten)]
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, kind: ScheduleKind::Linear { beta_start: 1e-4, beta_end: 0.02 } }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear { beta_start, beta_end } => NoiseSchedule::linear(self.steps, beta_start, beta_end),
            ScheduleKind::Cosine { s } => NoiseSchedule::cosine(self.steps, s),
        }
    }
}

/// `betas`, `alphas = 1 - betas` and their running products, 0-indexed.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Validate `betas` and derive the cumulative tables from them.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            invalid!("schedule needs at least one step");
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            invalid!("beta[{i}] = {b} outside (0, 1)");
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if alpha_bars.last().copied().unwrap_or(0.0) <= 0.0 {
            invalid!("cumulative product underflows to zero");
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// Betas evenly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            invalid!("step count must be positive");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            invalid!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}");
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + step * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn cosine(steps: usize, s: f64) -> Result<Self> {
        if steps == 0 {
            invalid!("step count must be positive");
        }
        if !(s > 0.0 && s.is_finite()) {
            invalid!("cosine offset must be positive, got {s}");
        }
        let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let betas = (0..steps)
            .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(1e-8, 0.999))
            .collect();
        Self::from_betas(betas)
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`; zero at `t = 0`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            invalid!("step {t} outside [0, {})", self.steps());
        }
        Ok(())
    }

    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn forward_marginal<E: Element>(&self, x0: &Tensor<E>, t: usize, eps: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_step(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
        }
        let ab = self.alpha_bars[t];
        let (a, b) = (E::from_f64(ab.sqrt()), E::from_f64((1.0 - ab).sqrt()));
        Ok(x0.zip_map(eps, |x, e| a * x + b * e))
    }

    /// Invert [`NoiseSchedule::forward_marginal`] for a known noise.
    pub fn recover_x0<E: Element>(&self, xt: &Tensor<E>, t: usize, eps: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_step(t)?;
        if xt.shape() != eps.shape() {
            return Err(Error::Shape(format!("x_t {:?} vs eps {:?}", xt.shape(), eps.shape())));
        }
        let ab = self.alpha_bars[t];
        if ab <= 0.0 {
            return Err(Error::Singular(format!("alpha_bar[{t}] = 0")));
        }
        let (inv, b) = (E::from_f64(1.0 / ab.sqrt()), E::from_f64((1.0 - ab).sqrt()));
        Ok(xt.zip_map(eps, |x, e| (x - b * e) * inv))
    }

    /// Little-endian f64 betas.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.betas.iter().flat_map(|b| b.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!("schedule blob length {} not a multiple of 8", bytes.len())));
        }
        let betas = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_betas(betas)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_endpoints_and_first_product() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.steps(), 1000);
        assert!((s.betas()[0] - 1e-4).abs() < 1e-18);
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
        assert!((s.alpha_bars()[0] - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn last_product_matches_log_domain_oracle() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let log_sum: f64 = (0..1000).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln()).sum();
        assert!((s.alpha_bars()[999] - log_sum.exp()).abs() < 1e-12);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 1e-4, 1e-4).unwrap();
        assert_eq!(s.alpha_bars(), &[0.9999]);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn cosine_schedule_is_valid() {
        let s = NoiseSchedule::cosine(200, 0.008).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn posterior_variance_bounded_by_beta() {
        for s in [NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(), NoiseSchedule::cosine(100, 0.008).unwrap()] {
            assert_eq!(s.posterior_variance(0), 0.0);
            for t in 1..s.steps() {
                let v = s.posterior_variance(t);
                assert!(v > 0.0 && v <= s.betas()[t], "t={t} v={v}");
            }
        }
    }

    #[test]
    fn noise_free_and_shape_checks() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x0 = Tensor::<f64>::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]);
        let z = Tensor::zeros(vec![2, 2]);
        let xt = s.forward_marginal(&x0, 40, &z).unwrap();
        let a = s.alpha_bars()[40].sqrt();
        assert!(xt.data().iter().zip(x0.data()).all(|(y, x)| *y == a * x));
        assert!(s.forward_marginal(&x0, 40, &Tensor::zeros(vec![4])).is_err());
        assert!(s.forward_marginal(&x0, 100, &z).is_err());
    }

    #[test]
    fn byte_roundtrip_is_exact() {
        let s = NoiseSchedule::cosine(50, 0.008).unwrap();
        assert_eq!(NoiseSchedule::from_bytes(&s.to_bytes()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn alpha_bars_are_rebuildable_and_decreasing(
            steps in 1usize..400, start in 1e-5f64..0.01, width in 0.0f64..0.05
        ) {
            let s = NoiseSchedule::linear(steps, start, start + width).unwrap();
            let mut acc = 1.0;
            for t in 0..steps {
                acc *= 1.0 - s.betas()[t];
                prop_assert!((s.alpha_bars()[t] - acc).abs() < 1e-12);
                prop_assert!(s.alpha_bars()[t] > 0.0 && s.alpha_bars()[t] < 1.0);
                if t > 0 {
                    prop_assert!(s.alpha_bars()[t] < s.alpha_bars()[t - 1]);
                }
            }
        }

        #[test]
        fn recover_inverts_forward(
            vals in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..64), t in 0usize..200
        ) {
            let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
            let n = vals.len();
            let x0 = Tensor::new(vec![n], vals.iter().map(|v| v.0).collect());
            let eps = Tensor::new(vec![n], vals.iter().map(|v| v.1).collect());
            let xt = s.forward_marginal(&x0, t, &eps).unwrap();
            let back = s.recover_x0(&xt, t, &eps).unwrap();
            prop_assert!(back.max_abs_diff(&x0) < 1e-6);
        }
    }
}
