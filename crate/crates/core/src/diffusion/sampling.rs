use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{CHANNELS, TOKENS};
use super::model::ToyDenoiser;
use super::schedule::{gaussian, noised_with, NoiseSchedule};
use crate::ebcq::ContextSet;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::xattn::{CascadeConfig, EnergyRecord, EnergyTrace};

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    /// `step` is the reverse-step counter (0 at `x_T`), used by the update schedule.
    fn predict(
        &self,
        x: &Matrix,
        t: usize,
        contexts: &ContextSet,
        cfg: &CascadeConfig,
        step: usize,
    ) -> Result<(Matrix, Vec<EnergyRecord>)>;

    fn is_trained(&self) -> bool {
        true
    }
}

impl NoisePredictor for ToyDenoiser {
    fn predict(
        &self,
        x: &Matrix,
        t: usize,
        contexts: &ContextSet,
        cfg: &CascadeConfig,
        step: usize,
    ) -> Result<(Matrix, Vec<EnergyRecord>)> {
        self.predict_noise(x, t, contexts, cfg, step)
    }

    fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }
}

/// Predicts zero noise everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(
        &self,
        x: &Matrix,
        _: usize,
        _: &ContextSet,
        _: &CascadeConfig,
        _: usize,
    ) -> Result<(Matrix, Vec<EnergyRecord>)> {
        Ok((Matrix::zeros(x.rows(), x.cols()), Vec::new()))
    }
}

/// `(x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_t) + sigma_t z`.
/// `z = None` drops the noise term.
pub fn ddpm_update(
    x_t: &Matrix,
    t: usize,
    eps: &Matrix,
    schedule: &NoiseSchedule,
    z: Option<&Matrix>,
) -> Result<Matrix> {
    if eps.shape() != x_t.shape() {
        return Err(Error::shape("reverse_step", format!("noise {:?} vs state {:?}", eps.shape(), x_t.shape())));
    }
    let a = schedule.alpha(t)?;
    let coef = (1.0 - a) / (1.0 - schedule.alpha_bar(t)?).sqrt();
    let mut out = x_t.clone();
    out.add_scaled_in_place(eps, -coef)?;
    let mut out = out.scale(1.0 / a.sqrt());
    if let Some(z) = z {
        out.add_scaled_in_place(z, schedule.sigma(t)?)?;
    }
    Ok(out)
}

/// One ancestral step `x_t -> x_{t-1}`. Noise is drawn from `rng` after the
/// prediction, and not at all for `t = 1`.
pub fn reverse_step<P: NoisePredictor + ?Sized>(
    model: &P,
    x_t: &Matrix,
    t: usize,
    contexts: &ContextSet,
    schedule: &NoiseSchedule,
    cfg: &CascadeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Matrix, Vec<EnergyRecord>)> {
    schedule.beta(t)?;
    let (eps, records) = model.predict(x_t, t, contexts, cfg, schedule.steps() - t)?;
    let z = (t > 1).then(|| gaussian(x_t.rows(), x_t.cols(), rng));
    let out = ddpm_update(x_t, t, &eps, schedule, z.as_ref())?;
    if !out.is_finite() {
        return Err(Error::NonFinite("reverse_step"));
    }
    Ok((out, records))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub grid: Matrix,
    pub trace: EnergyTrace,
    pub warnings: Vec<String>,
}

pub(crate) fn trajectory_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn composite_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn untrained_warning<P: NoisePredictor + ?Sized>(model: &P, warnings: &mut Vec<String>) {
    if !model.is_trained() {
        warnings.push("denoiser has not been trained".into());
    }
}

fn range_warning(grid: &Matrix, warnings: &mut Vec<String>) {
    let m = grid.max_abs();
    if m > 1.5 {
        warnings.push(format!("sample leaves the expected range: max |x| = {m:.3}"));
    }
}

/// Full reverse chain from `x_T ~ N(0, I)`; the trajectory depends only on
/// `seed`, so runs with different update configs share `x_T` and all noise draws.
pub fn sample<P: NoisePredictor + ?Sized>(
    model: &P,
    contexts: &ContextSet,
    schedule: &NoiseSchedule,
    cfg: &CascadeConfig,
    seed: u64,
) -> Result<SampleOutput> {
    let mut warnings = Vec::new();
    untrained_warning(model, &mut warnings);
    let mut rng = trajectory_rng(seed);
    let mut x = gaussian(TOKENS, CHANNELS, &mut rng);
    let mut trace = EnergyTrace::default();
    for t in (1..=schedule.steps()).rev() {
        let (next, records) = reverse_step(model, &x, t, contexts, schedule, cfg, &mut rng)?;
        trace.extend(records);
        x = next;
    }
    range_warning(&x, &mut warnings);
    Ok(SampleOutput { grid: x, trace, warnings })
}

/// Reference sampler with a fixed context and no update code at all.
pub fn sample_plain(model: &ToyDenoiser, context: &Matrix, schedule: &NoiseSchedule, seed: u64) -> Result<Matrix> {
    let mut rng = trajectory_rng(seed);
    let mut x = gaussian(TOKENS, CHANNELS, &mut rng);
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict_noise_plain(&x, t, context)?;
        let z = (t > 1).then(|| gaussian(TOKENS, CHANNELS, &mut rng));
        x = ddpm_update(&x, t, &eps, schedule, z.as_ref())?;
    }
    Ok(x)
}

/// Fills the tokens with `mask = 1` and keeps the rest equal to `known`.
///
/// After every reverse step the kept tokens are replaced by `known` noised to
/// the new level (exactly `known` after the last step). Updates inside the
/// model only see the generated tokens' queries.
pub fn inpaint<P: NoisePredictor + ?Sized>(
    model: &P,
    known: &Matrix,
    mask: &[f64],
    contexts: &ContextSet,
    schedule: &NoiseSchedule,
    cfg: &CascadeConfig,
    seed: u64,
) -> Result<SampleOutput> {
    if known.shape() != (TOKENS, CHANNELS) {
        return Err(Error::shape(
            "inpaint",
            format!("known grid must be {TOKENS}x{CHANNELS}, got {:?}", known.shape()),
        ));
    }
    if mask.len() != TOKENS {
        return Err(Error::shape("inpaint", format!("mask has {} entries for {TOKENS} tokens", mask.len())));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::domain("inpaint", "mask entries must be 0 or 1"));
    }
    if mask.iter().all(|&m| m == 0.0) {
        return Ok(SampleOutput {
            grid: known.clone(),
            trace: EnergyTrace::default(),
            warnings: vec!["mask selects no tokens; returning the known grid".into()],
        });
    }
    if mask.iter().all(|&m| m == 1.0) {
        return sample(model, contexts, schedule, cfg, seed);
    }

    let mut cfg = cfg.clone();
    for u in &mut cfg.updates {
        u.mask = Some(mask.to_vec());
    }
    let mut warnings = Vec::new();
    untrained_warning(model, &mut warnings);
    let mut rng = trajectory_rng(seed);
    let mut known_rng = composite_rng(seed);
    let mut x = gaussian(TOKENS, CHANNELS, &mut rng);
    let mut trace = EnergyTrace::default();
    for t in (1..=schedule.steps()).rev() {
        let (next, records) = reverse_step(model, &x, t, contexts, schedule, &cfg, &mut rng)?;
        trace.extend(records);
        let z = gaussian(TOKENS, CHANNELS, &mut known_rng);
        let kept = noised_with(known, t - 1, schedule, &z)?;
        x = Matrix::from_fn(TOKENS, CHANNELS, |i, j| if mask[i] == 1.0 { next.get(i, j) } else { kept.get(i, j) });
    }
    range_warning(&x, &mut warnings);
    Ok(SampleOutput { grid: x, trace, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::data::{render, Prompt};
    use crate::diffusion::model::DenoiserConfig;
    use crate::ebcu::UpdateConfig;
    use crate::xattn::Variant;

    fn ctx() -> ContextSet {
        ContextSet::single(Matrix::zeros(1, 4))
    }

    #[test]
    fn zero_predictor_step_rescales() {
        let s = NoiseSchedule::default();
        let x = Matrix::from_fn(TOKENS, CHANNELS, |i, j| (i + j) as f64 * 0.01);
        let out = ddpm_update(&x, 7, &Matrix::zeros(TOKENS, CHANNELS), &s, None).unwrap();
        assert_eq!(out, x.scale(1.0 / s.alpha(7).unwrap().sqrt()));
        // at t = 1 no noise is drawn
        let mut rng = trajectory_rng(0);
        let (out, _) = reverse_step(&ZeroPredictor, &x, 1, &ctx(), &s, &CascadeConfig::baseline(4), &mut rng).unwrap();
        assert_eq!(out, x.scale(1.0 / s.alpha(1).unwrap().sqrt()));
        assert!(reverse_step(&ZeroPredictor, &x, 0, &ctx(), &s, &CascadeConfig::baseline(4), &mut rng).is_err());
    }

    #[test]
    fn gamma_zero_matches_plain_sampler_bitwise() {
        let m = ToyDenoiser::new(&DenoiserConfig::default(), 5).unwrap();
        let s = NoiseSchedule::default();
        let p: Prompt = "1+2".parse().unwrap();
        let out = sample(&m, &m.context_set(&p), &s, &CascadeConfig::baseline(m.d_model()), 42).unwrap();
        assert_eq!(out.grid, sample_plain(&m, &m.context(&p), &s, 42).unwrap());
        assert_eq!(out.trace.records.len(), 50 * 4);
        assert!(out.warnings.iter().any(|w| w.contains("trained")));

        let again = sample(&m, &m.context_set(&p), &s, &CascadeConfig::baseline(m.d_model()), 42).unwrap();
        assert_eq!(again, out);

        let ebcu = CascadeConfig::uniform(UpdateConfig::new(m.d_model()).with_gammas(0.02, 0.02), Variant::Ebcu);
        let e = sample(&m, &m.context_set(&p), &s, &ebcu, 42).unwrap();
        assert_ne!(e.grid, out.grid);
        assert_ne!(e.trace.records[0].e_cond, out.trace.records[0].e_cond);
    }

    #[test]
    fn inpaint_edge_masks() {
        let m = ToyDenoiser::new(&DenoiserConfig::default(), 6).unwrap();
        let s = NoiseSchedule::default();
        let p: Prompt = "3".parse().unwrap();
        let known = render(&p);
        let cfg = CascadeConfig::uniform(UpdateConfig::new(m.d_model()).with_gammas(0.02, 0.02), Variant::Ebcu);
        let none = inpaint(&m, &known, &[0.0; TOKENS], &m.context_set(&p), &s, &cfg, 1).unwrap();
        assert_eq!(none.grid, known);
        assert!(!none.warnings.is_empty());
        let all = inpaint(&m, &known, &[1.0; TOKENS], &m.context_set(&p), &s, &cfg, 1).unwrap();
        assert_eq!(all, sample(&m, &m.context_set(&p), &s, &cfg, 1).unwrap());

        let half: Vec<f64> = (0..TOKENS).map(|i| if i < TOKENS / 2 { 0.0 } else { 1.0 }).collect();
        let out = inpaint(&m, &known, &half, &m.context_set(&p), &s, &cfg, 1).unwrap();
        for i in 0..TOKENS / 2 {
            for j in 0..CHANNELS {
                assert!((out.grid.get(i, j) - known.get(i, j)).abs() < 1e-6);
            }
        }
        assert!(inpaint(&m, &known, &[0.5; TOKENS], &m.context_set(&p), &s, &cfg, 1).is_err());
        assert!(inpaint(&m, &known, &[1.0; 3], &m.context_set(&p), &s, &cfg, 1).is_err());
    }
}
