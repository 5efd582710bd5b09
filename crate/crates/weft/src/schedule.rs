//! Linear-beta diffusion schedule with forward noising and DDIM updates.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WeftError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "snake_case")]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 100, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Precomputed betas and signal fractions for `T` forward steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

/// Builds a schedule with betas spaced linearly from `beta_start` to
/// `beta_end` inclusive, so `alphas_cumprod[0] = 1 - beta_start`.
pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t < 2 {
        return Err(WeftError::Config(format!("schedule needs T >= 2, got {t}")));
    }
    if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
        return Err(WeftError::Config(format!(
            "betas must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let span = (beta_end - beta_start) / (t - 1) as f64;
    let betas: Vec<f64> = (0..t).map(|i| beta_start + span * i as f64).collect();
    let mut alphas_cumprod = Vec::with_capacity(t);
    let mut prod = 1.0;
    for &b in &betas {
        prod *= 1.0 - b;
        alphas_cumprod.push(prod);
    }
    Ok(NoiseSchedule { betas, alphas_cumprod })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| WeftError::Config(format!("timestep {t} outside schedule of length {}", self.len())))
    }

    /// Signal fraction one step before `t` along the sampling trajectory:
    /// `alpha_bar(t_prev)` for interior steps and exactly 1.0 when the
    /// trajectory has left the chain (`t_prev` is `None`).
    pub fn alpha_bar_prev(&self, t_prev: Option<usize>) -> Result<f64> {
        match t_prev {
            Some(tp) => self.alpha_bar(tp),
            None => Ok(1.0),
        }
    }
}

/// Forward noising: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn add_noise(x0: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(WeftError::ShapeMismatch {
            expected: format!("{:?}", x0.shape()),
            got: format!("{:?}", eps.shape()),
        });
    }
    let abar = s.alpha_bar(t)?;
    let (ca, cb) = (abar.sqrt(), (1.0 - abar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| ca * x + cb * e)
        .collect();
    Ok(Tensor::from_vec(x0.shape(), data))
}

/// Core DDIM update between two signal levels. Reconstructs
/// `x0_hat = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)` and re-noises it to
/// `abar_prev`; `sigma` adds the stochastic DDPM-like component when eta > 0.
fn ddim_update(
    x_t: &Tensor,
    eps_pred: &Tensor,
    abar_t: f64,
    abar_prev: f64,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if x_t.shape() != eps_pred.shape() {
        return Err(WeftError::ShapeMismatch {
            expected: format!("{:?}", x_t.shape()),
            got: format!("{:?}", eps_pred.shape()),
        });
    }
    let sigma = if eta > 0.0 {
        eta * ((1.0 - abar_prev) / (1.0 - abar_t)).sqrt() * (1.0 - abar_t / abar_prev).sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - abar_prev - sigma * sigma).max(0.0).sqrt();
    let (sa_t, sa_p) = (abar_t.sqrt(), abar_prev.sqrt());
    let mut data: Vec<f64> = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&x, &e)| {
            let x0_hat = (x - (1.0 - abar_t).sqrt() * e) / sa_t;
            sa_p * x0_hat + dir * e
        })
        .collect();
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| {
            WeftError::Config("eta > 0 requires a noise tensor for the stochastic term".into())
        })?;
        if z.shape() != x_t.shape() {
            return Err(WeftError::ShapeMismatch {
                expected: format!("{:?}", x_t.shape()),
                got: format!("{:?}", z.shape()),
            });
        }
        for (d, &n) in data.iter_mut().zip(z.data()) {
            *d += sigma * n;
        }
    }
    Ok(Tensor::from_vec(x_t.shape(), data))
}

/// One reverse sampling step from timestep `t` to `t_prev` (`None` means the
/// trajectory exits the chain and the clean reconstruction is returned).
pub fn ddim_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    s: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(WeftError::Config(format!(
                "sampling must move toward the data: t_prev {tp} >= t {t}"
            )));
        }
    }
    ddim_update(x_t, eps_pred, s.alpha_bar(t)?, s.alpha_bar_prev(t_prev)?, eta, noise)
}

/// Descending timestep ladder for `steps` sampler iterations over a chain of
/// length `t_max`. Step i visits `i * t_max / steps`, so the ladder always
/// ends at timestep 0 and `steps = 1` degenerates to a single jump from 0.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(WeftError::Config("sampler needs at least one step".into()));
    }
    if steps > t_max {
        return Err(WeftError::Config(format!(
            "sampler steps {steps} exceed schedule length {t_max}"
        )));
    }
    Ok((0..steps).map(|i| i * t_max / steps).rev().collect())
}

/// Draws standard normal noise shaped like `shape`.
pub fn sample_noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn schedule_rejects_degenerate_configs() {
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn alpha_bar_matches_running_product() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(0).unwrap() - (1.0 - 1e-4)).abs() < 1e-15);
        let mut prod = 1.0;
        for t in 0..s.len() {
            prod *= 1.0 - s.betas()[t];
            assert!((s.alpha_bar(t).unwrap() - prod).abs() < 1e-12);
        }
        assert!((s.betas()[99] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing() {
        let s = make_schedule(50, 1e-3, 0.1).unwrap();
        for t in 1..s.len() {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
    }

    #[test]
    fn add_noise_extremes() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]);
        let eps = Tensor::from_vec(&[2, 2], vec![0.3, 0.1, -0.4, 0.2]);
        // At t = 0 nearly all signal survives.
        let xt = add_noise(&x0, &eps, 0, &s).unwrap();
        assert!(xt.max_abs_diff(&x0) < 0.02);
        // At the last step the signal fraction is small.
        let abar = s.alpha_bar(99).unwrap();
        assert!(abar < 0.4, "abar_T = {abar}");
    }

    #[test]
    fn ddim_step_inverts_add_noise_for_perfect_eps() {
        // If eps_pred equals the true eps used for noising, the eta = 0 update
        // to abar_prev = 1 returns x0 exactly (up to float error).
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = Tensor::from_vec(&[3], vec![0.7, -1.1, 2.0]);
        let eps = Tensor::from_vec(&[3], vec![0.2, -0.3, 0.5]);
        for t in [0, 7, 50, 99] {
            let xt = add_noise(&x0, &eps, t, &s).unwrap();
            let back = ddim_step(&xt, &eps, t, None, &s, 0.0, None).unwrap();
            assert!(back.max_abs_diff(&x0) < 1e-9, "t = {t}");
        }
    }

    #[test]
    fn ddim_step_matches_scalar_oracle() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 3], &mut rng);
        let e = Tensor::randn(&[2, 3], &mut rng);
        let (t, tp) = (64, 32);
        let got = ddim_step(&x, &e, t, Some(tp), &s, 0.0, None).unwrap();
        let (at, ap) = (s.alpha_bar(t).unwrap(), s.alpha_bar(tp).unwrap());
        for i in 0..x.len() {
            let x0_hat = (x.data()[i] - (1.0 - at).sqrt() * e.data()[i]) / at.sqrt();
            let want = ap.sqrt() * x0_hat + (1.0 - ap).sqrt() * e.data()[i];
            assert!((got.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_step_rejects_forward_motion_and_shape_mismatch() {
        let s = make_schedule(10, 1e-3, 0.02).unwrap();
        let x = Tensor::zeros(&[2]);
        assert!(ddim_step(&x, &x, 3, Some(5), &s, 0.0, None).is_err());
        assert!(ddim_step(&x, &Tensor::zeros(&[3]), 5, Some(3), &s, 0.0, None).is_err());
    }

    #[test]
    fn stochastic_step_needs_noise_and_uses_it() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x = Tensor::from_vec(&[2], vec![0.4, -0.9]);
        let e = Tensor::from_vec(&[2], vec![0.1, 0.2]);
        assert!(ddim_step(&x, &e, 60, Some(30), &s, 1.0, None).is_err());
        let z = Tensor::from_vec(&[2], vec![1.0, -1.0]);
        let a = ddim_step(&x, &e, 60, Some(30), &s, 1.0, Some(&z)).unwrap();
        let b = ddim_step(&x, &e, 60, Some(30), &s, 0.0, None).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn timestep_ladder_covers_and_descends() {
        let ts = ddim_timesteps(100, 25).unwrap();
        assert_eq!(ts.len(), 25);
        assert_eq!(*ts.first().unwrap(), 96);
        assert_eq!(*ts.last().unwrap(), 0);
        for pair in ts.windows(2) {
            assert!(pair[0] > pair[1]);
        }
        assert_eq!(ddim_timesteps(100, 1).unwrap(), vec![0]);
        assert!(ddim_timesteps(100, 0).is_err());
        assert!(ddim_timesteps(100, 101).is_err());
    }

    proptest! {
        #[test]
        fn cumprod_invariant_holds_for_random_configs(
            t in 2usize..64,
            start in 1e-5f64..5e-3,
            spread in 0.0f64..0.2,
        ) {
            let end = (start + spread).min(0.9);
            let s = make_schedule(t, start, end).unwrap();
            let mut prod = 1.0;
            for i in 0..t {
                prod *= 1.0 - s.betas()[i];
                prop_assert!((s.alpha_bar(i).unwrap() - prod).abs() < 1e-12);
                if i > 0 {
                    prop_assert!(s.alpha_bar(i).unwrap() < s.alpha_bar(i - 1).unwrap());
                }
            }
        }

        #[test]
        fn noising_then_exact_denoising_round_trips(
            seed in 0u64..1000,
            t in 0usize..100,
        ) {
            let s = make_schedule(100, 1e-4, 0.02).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = Tensor::randn(&[4], &mut rng);
            let eps = Tensor::randn(&[4], &mut rng);
            let xt = add_noise(&x0, &eps, t, &s).unwrap();
            let back = ddim_step(&xt, &eps, t, None, &s, 0.0, None).unwrap();
            prop_assert!(back.max_abs_diff(&x0) < 1e-8);
        }
    }
}
