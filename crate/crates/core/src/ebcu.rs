//! Bayesian context update: energies over keys, the log-posterior gradient
//! and the practical update rule applied to context vectors.
//!
//! With `K = C W_K`:
//!
//! ```text
//! E(Q;K) = alpha/2 tr(K K^T) - sum_i lse(Q k_i^T, beta)
//! E(K)   = lse(1/2 diag(K K^T), 1)
//! grad_K log p(K|Q) = softmax_2(beta K Q^T) Q - (alpha I + D(softmax(1/2 diag(K K^T)))) K
//! ```
//!
//! The update ascends the log posterior in `C` through the chain rule
//! `grad_C = grad_K W_K^T`, with separate (optionally per-token, scheduled)
//! step sizes for the attention and regularization terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{lse_unchecked, row_softmax, row_sq_norms, scale_rows, softmax, sq_norm_sum, Matrix};

/// Step sizes searched per sample for multi-concept generation and inpainting.
pub const GAMMA_GRID: [f64; 4] = [1e-2, 1.5e-2, 2e-2, 2.5e-2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Step,
    ExpDecay,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "step" => Ok(ScheduleKind::Step),
            "exp" | "exp_decay" => Ok(ScheduleKind::ExpDecay),
            other => Err(Error::Parse(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Step => "step",
            ScheduleKind::ExpDecay => "exp",
        })
    }
}

/// Step-size schedule over the sampling-step index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub gamma0: f64,
    pub tau: usize,
    pub lambda: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { kind: ScheduleKind::Constant, gamma0: 1.0, tau: 0, lambda: 1.0 }
    }
}

impl ScheduleSpec {
    pub fn constant(gamma0: f64) -> Self {
        ScheduleSpec { gamma0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 >= 0.0) || !self.gamma0.is_finite() {
            return Err(Error::domain("ScheduleSpec", format!("gamma0 must be nonnegative, got {}", self.gamma0)));
        }
        if self.kind == ScheduleKind::ExpDecay && !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::domain("ScheduleSpec", format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `gamma(t)`: constant `gamma0`; step `gamma0 * [t > tau]`; exp-decay `gamma0 * lambda^t`.
pub fn schedule(spec: &ScheduleSpec, t: usize) -> f64 {
    match spec.kind {
        ScheduleKind::Constant => spec.gamma0,
        ScheduleKind::Step => {
            if t > spec.tau {
                spec.gamma0
            } else {
                0.0
            }
        }
        ScheduleKind::ExpDecay => spec.gamma0 * spec.lambda.powi(t.min(i32::MAX as usize) as i32),
    }
}

/// Step sizes for the `N` context tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRates {
    Uniform(f64),
    PerToken(Vec<f64>),
}

impl Default for TokenRates {
    fn default() -> Self {
        TokenRates::Uniform(0.0)
    }
}

impl TokenRates {
    fn resolve(&self, n: usize) -> Result<Vec<f64>> {
        let rates = match self {
            TokenRates::Uniform(g) => vec![*g; n],
            TokenRates::PerToken(v) if v.len() == n => v.clone(),
            TokenRates::PerToken(v) => {
                return Err(Error::shape("TokenRates", format!("{} rates for {n} tokens", v.len())))
            }
        };
        if let Some(bad) = rates.iter().find(|g| !(**g >= 0.0) || !g.is_finite()) {
            return Err(Error::domain("TokenRates", format!("step sizes must be nonnegative, got {bad}")));
        }
        Ok(rates)
    }

    pub fn is_zero(&self) -> bool {
        match self {
            TokenRates::Uniform(g) => *g == 0.0,
            TokenRates::PerToken(v) => v.iter().all(|g| *g == 0.0),
        }
    }

    pub fn scaled(&self, s: f64) -> TokenRates {
        match self {
            TokenRates::Uniform(g) => TokenRates::Uniform(g * s),
            TokenRates::PerToken(v) => TokenRates::PerToken(v.iter().map(|g| g * s).collect()),
        }
    }
}

/// Configuration of one context update.
///
/// The schedule's `gamma0` multiplies the per-token rates, so a unit
/// `gamma0` leaves them as given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub beta: f64,
    pub alpha: f64,
    pub gamma_attn: TokenRates,
    pub gamma_reg: TokenRates,
    pub schedule: ScheduleSpec,
    /// Binary query mask (one entry per query row); `None` means unmasked.
    pub mask: Option<Vec<f64>>,
}

impl UpdateConfig {
    /// No-op update with `beta = 1/sqrt(d_head)` and `alpha = 0`.
    pub fn new(d_head: usize) -> Self {
        UpdateConfig {
            beta: 1.0 / (d_head as f64).sqrt(),
            alpha: 0.0,
            gamma_attn: TokenRates::Uniform(0.0),
            gamma_reg: TokenRates::Uniform(0.0),
            schedule: ScheduleSpec::default(),
            mask: None,
        }
    }

    pub fn with_gammas(mut self, gamma_attn: f64, gamma_reg: f64) -> Self {
        self.gamma_attn = TokenRates::Uniform(gamma_attn);
        self.gamma_reg = TokenRates::Uniform(gamma_reg);
        self
    }

    pub fn is_noop(&self) -> bool {
        (self.gamma_attn.is_zero() && self.gamma_reg.is_zero()) || self.schedule.gamma0 == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::domain("UpdateConfig", format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::domain("UpdateConfig", format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        self.schedule.validate()?;
        if let Some(mask) = &self.mask {
            if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(Error::domain("UpdateConfig", "mask entries must be 0 or 1"));
            }
        }
        Ok(())
    }
}

fn check_cols(op: &'static str, q: &Matrix, k: &Matrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::shape(op, format!("query dim {} vs key dim {}", q.cols(), k.cols())));
    }
    Ok(())
}

/// `E(Q;K) = alpha/2 tr(K K^T) - sum_i lse(Q k_i^T, beta)`.
pub fn cond_energy(q: &Matrix, k: &Matrix, alpha: f64, beta: f64) -> Result<f64> {
    check_cols("cond_energy", q, k)?;
    if !(beta > 0.0) {
        return Err(Error::domain("cond_energy", format!("beta must be positive, got {beta}")));
    }
    let s = q.matmul_t(k)?;
    Ok(cond_energy_from_scores(&s, k, alpha, beta))
}

/// Same as [`cond_energy`] given `S = Q K^T` (`P x N`).
pub(crate) fn cond_energy_from_scores(s: &Matrix, k: &Matrix, alpha: f64, beta: f64) -> f64 {
    let st = s.transpose();
    let lse_sum = crate::numerics::compensated_sum((0..st.rows()).map(|i| lse_unchecked(st.row(i), beta)));
    let reg = if alpha == 0.0 { 0.0 } else { 0.5 * alpha * sq_norm_sum(k) };
    reg - lse_sum
}

/// `E(K) = log sum_i exp(1/2 |k_i|^2)`.
pub fn prior_energy(k: &Matrix) -> f64 {
    let half: Vec<f64> = row_sq_norms(k).into_iter().map(|x| 0.5 * x).collect();
    lse_unchecked(&half, 1.0)
}

/// `softmax(1/2 diag(K K^T))`: how strongly the prior shrinks each key.
pub fn prior_weights(k: &Matrix) -> Vec<f64> {
    let half: Vec<f64> = row_sq_norms(k).into_iter().map(|x| 0.5 * x).collect();
    softmax(&half).expect("matrix has at least one row")
}

/// `grad_K log p(K | Q) = -(grad_K E(Q;K) + grad_K E(K))`.
pub fn grad_log_posterior(q: &Matrix, k: &Matrix, alpha: f64, beta: f64) -> Result<Matrix> {
    check_cols("grad_log_posterior", q, k)?;
    let attn = row_softmax(&k.matmul_t(q)?, beta)?.matmul(q)?;
    let mut reg = scale_rows(k, &prior_weights(k))?;
    if alpha != 0.0 {
        reg.add_scaled_in_place(k, alpha)?;
    }
    attn.sub(&reg)
}

/// One context update step `C + (D(g_attn) A - D(g_reg)(alpha K + D(p) K)) W_K^T`,
/// where `A = softmax_2(beta K Q^T) M Q`, `K = C W_K` and `p` are the prior weights.
pub fn context_update(c: &Matrix, q: &Matrix, w_k: &Matrix, cfg: &UpdateConfig, t: usize) -> Result<Matrix> {
    if c.cols() != w_k.rows() {
        return Err(Error::shape("context_update", format!("context dim {} vs W_K rows {}", c.cols(), w_k.rows())));
    }
    check_cols("context_update", q, w_k)?;
    let k = c.matmul(w_k)?;
    let s = q.matmul_t(&k)?;
    context_update_from_scores(c, q, &k, &s, w_k, cfg, t)
}

/// Context update reusing `K = C W_K` and `S = Q K^T` computed by the caller.
pub(crate) fn context_update_from_scores(
    c: &Matrix,
    q: &Matrix,
    k: &Matrix,
    s: &Matrix,
    w_k: &Matrix,
    cfg: &UpdateConfig,
    t: usize,
) -> Result<Matrix> {
    cfg.validate()?;
    let n = c.rows();
    let factor = schedule(&cfg.schedule, t);
    let g_attn: Vec<f64> = cfg.gamma_attn.resolve(n)?.into_iter().map(|g| g * factor).collect();
    let g_reg: Vec<f64> = cfg.gamma_reg.resolve(n)?.into_iter().map(|g| g * factor).collect();
    if let Some(mask) = &cfg.mask {
        if mask.len() != q.rows() {
            return Err(Error::shape(
                "context_update",
                format!("mask has {} entries for {} queries", mask.len(), q.rows()),
            ));
        }
    }
    if g_attn.iter().chain(&g_reg).all(|&g| g == 0.0) {
        return Ok(c.clone());
    }

    let weights = row_softmax(&s.transpose(), cfg.beta)?;
    let attn = match &cfg.mask {
        Some(mask) => weights.matmul(&scale_rows(q, mask)?)?,
        None => weights.matmul(q)?,
    };
    let mut reg = scale_rows(k, &prior_weights(k))?;
    if cfg.alpha != 0.0 {
        reg.add_scaled_in_place(k, cfg.alpha)?;
    }
    let delta_k = scale_rows(&attn, &g_attn)?.sub(&scale_rows(&reg, &g_reg)?)?;
    let delta_c = delta_k.matmul_t(w_k)?;

    let mut out = c.clone();
    for i in 0..n {
        if g_attn[i] == 0.0 && g_reg[i] == 0.0 {
            continue;
        }
        for (o, d) in out.row_mut(i).iter_mut().zip(delta_c.row(i)) {
            *o += d;
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("context_update"));
    }
    Ok(out)
}
