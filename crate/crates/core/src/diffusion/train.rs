use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Prompt, ToyDataset, ToySample};
use super::model::ToyDenoiser;
use super::schedule::{gaussian, noised_with, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub heldout: usize,
    /// Probability that a drawn example is a two-concept grid.
    pub pair_prob: f64,
    /// Pair every grid with a random prompt instead of its own.
    pub shuffle_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 2000, batch: 16, lr: 1e-3, seed: 0, heldout: 64, pair_prob: 0.05, shuffle_labels: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.heldout == 0 {
            return Err(Error::domain("TrainConfig", "batch and heldout must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::domain("TrainConfig", format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.pair_prob) {
            return Err(Error::domain("TrainConfig", format!("pair_prob must lie in [0, 1], got {}", self.pair_prob)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_heldout: f64,
    pub final_heldout: f64,
    /// Mean training loss of each step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn loss_ratio(&self) -> f64 {
        self.final_heldout / self.initial_heldout
    }
}

struct Example {
    x_t: Matrix,
    t: usize,
    prompt: Prompt,
    noise: Matrix,
}

fn draw<R: Rng>(data: &ToyDataset, schedule: &NoiseSchedule, cfg: &TrainConfig, rng: &mut R) -> Result<Example> {
    let (singles, pairs): (Vec<&ToySample>, Vec<&ToySample>) = data.samples.iter().partition(|s| s.prompt.len() == 1);
    let pool =
        if pairs.is_empty() || (!singles.is_empty() && !rng.random_bool(cfg.pair_prob)) { singles } else { pairs };
    let sample = pool[rng.random_range(0..pool.len())];
    let shuffle = cfg.shuffle_labels;
    let prompt =
        if shuffle { data.samples[rng.random_range(0..data.len())].prompt.clone() } else { sample.prompt.clone() };
    let t = rng.random_range(1..=schedule.steps());
    let noise = gaussian(sample.grid.rows(), sample.grid.cols(), rng);
    let x_t = noised_with(&sample.grid, t, schedule, &noise)?;
    Ok(Example { x_t, t, prompt, noise })
}

fn mse(eps: &Matrix, target: &Matrix) -> f64 {
    eps.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        / eps.as_slice().len() as f64
}

/// Mean squared noise-prediction error over a fixed set of examples.
fn eval(model: &ToyDenoiser, set: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in set {
        let eps = model.predict_noise_plain(&ex.x_t, ex.t, &model.context(&ex.prompt))?;
        total += mse(&eps, &ex.noise);
    }
    Ok(total / set.len() as f64)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &ToyDenoiser) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.as_slice().len()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut ToyDenoiser, grads: &ToyDenoiser, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for (((p, g), m), v) in model.params_mut().into_iter().zip(grads.params()).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains the noise predictor with plain attention (no context updates).
///
/// The held-out batch comes from a separate RNG stream of the same seed so it
/// never overlaps the training draws.
pub fn train(
    data: &ToyDataset,
    model: &ToyDenoiser,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(ToyDenoiser, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("train", "dataset is empty"));
    }
    let mut held_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    held_rng.set_stream(1);
    let heldout = (0..cfg.heldout).map(|_| draw(data, schedule, cfg, &mut held_rng)).collect::<Result<Vec<_>>>()?;
    let initial = eval(model, &heldout)?;
    let mut model = model.clone();
    if cfg.steps == 0 {
        return Ok((model, TrainReport { initial_heldout: initial, final_heldout: initial, losses: vec![] }));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let mut adam = Adam::new(&model);
    let mut losses = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / (cfg.batch * heldout[0].noise.as_slice().len()) as f64;
    for step in 0..cfg.steps {
        let mut grads = model.zeros_like();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let ex = draw(data, schedule, cfg, &mut rng)?;
            let cache = model.forward_cached(&ex.x_t, ex.t, &model.context(&ex.prompt))?;
            loss += mse(&cache.eps, &ex.noise) / cfg.batch as f64;
            let d_eps = cache.eps.sub(&ex.noise)?.scale(2.0 * scale);
            let g_ctx = model.backward(&cache, &d_eps, &mut grads)?;
            ToyDenoiser::backward_context(&ex.prompt, &g_ctx, &mut grads);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, seed: cfg.seed, loss });
        }
        losses.push(loss);
        adam.update(&mut model, &grads, cfg.lr);
    }
    model.trained_steps += cfg.steps;
    let final_heldout = eval(&model, &heldout)?;
    Ok((model, TrainReport { initial_heldout: initial, final_heldout, losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::DenoiserConfig;

    #[test]
    fn zero_steps_returns_weights_unchanged() {
        let m = ToyDenoiser::new(&DenoiserConfig::default(), 4).unwrap();
        let (out, report) = train(
            &ToyDataset::two_concept(),
            &m,
            &NoiseSchedule::default(),
            &TrainConfig { steps: 0, heldout: 4, ..Default::default() },
        )
        .unwrap();
        assert_eq!(out, m);
        assert_eq!(report.loss_ratio(), 1.0);
    }

    #[test]
    fn divergence_is_reported() {
        let m = ToyDenoiser::new(&DenoiserConfig::default(), 4).unwrap();
        let cfg = TrainConfig { steps: 50, batch: 2, heldout: 2, lr: 1e300, seed: 11, ..Default::default() };
        match train(&ToyDataset::two_concept(), &m, &NoiseSchedule::default(), &cfg) {
            Err(Error::Diverged { seed, .. }) => assert_eq!(seed, 11),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1.final_heldout)),
        }
    }
}
