use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// DDPM noise schedule. Timesteps are 1-based: `beta(1)` is the first
/// forward step and `alpha_bar(T)` the most corrupted level.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl Default for NoiseSchedule {
    /// Linear betas from `1e-4` to `0.2` over 50 steps.
    fn default() -> Self {
        NoiseSchedule::linear(50, 1e-4, 0.2).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::domain("NoiseSchedule", "need at least two steps"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::domain(
                "NoiseSchedule",
                format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        let betas: Vec<f64> =
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        NoiseSchedule { betas, alphas, alpha_bars, sigmas }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::domain("NoiseSchedule", format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    /// `prod_{i<=t} alpha_i`; `t = 0` is the clean limit `1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigmas[self.check(t)?])
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) z` for a given noise draw.
pub fn noised_with(x0: &Matrix, t: usize, schedule: &NoiseSchedule, z: &Matrix) -> Result<Matrix> {
    let ab = schedule.alpha_bar(t)?;
    if ab == 1.0 {
        return Ok(x0.clone());
    }
    let mut out = x0.scale(ab.sqrt());
    out.add_scaled_in_place(z, (1.0 - ab).sqrt())?;
    Ok(out)
}

/// Samples `x_t ~ q(x_t | x_0)`. `t = 0` returns `x0` unchanged.
pub fn forward_noising<R: Rng + ?Sized>(
    x0: &Matrix,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Matrix> {
    schedule.alpha_bar(t)?;
    let z = gaussian(x0.rows(), x0.cols(), rng);
    noised_with(x0, t, schedule, &z)
}

pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}
