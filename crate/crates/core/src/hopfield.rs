//! Modern Hopfield energy, its fixed-point update and the attention bridge.

use crate::error::{Error, Result};
use crate::numerics::{compensated_sum, lse_unchecked, row_softmax, softmax_in_place, Matrix};

/// Stored patterns as the columns of a `d x N` matrix, plus inverse temperature.
#[derive(Clone, Debug)]
pub struct PatternStore {
    patterns: Matrix,
    beta: f64,
}

impl PatternStore {
    pub fn new(patterns: Matrix, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::domain("PatternStore::new", format!("beta must be positive, got {beta}")));
        }
        Ok(PatternStore { patterns, beta })
    }

    /// Uses the attention default `beta = 1/sqrt(d)`.
    pub fn with_default_beta(patterns: Matrix) -> Result<Self> {
        let beta = 1.0 / (patterns.rows() as f64).sqrt();
        Self::new(patterns, beta)
    }

    pub fn dim(&self) -> usize {
        self.patterns.rows()
    }

    pub fn len(&self) -> usize {
        self.patterns.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn patterns(&self) -> &Matrix {
        &self.patterns
    }

    fn check(&self, zeta: &[f64], op: &'static str) -> Result<()> {
        if zeta.len() != self.dim() {
            return Err(Error::shape(op, format!("state has {} entries, patterns have {}", zeta.len(), self.dim())));
        }
        Ok(())
    }

    /// `X^T zeta`: similarity of the state with every stored pattern.
    fn similarities(&self, zeta: &[f64]) -> Vec<f64> {
        let x = &self.patterns;
        (0..x.cols()).map(|j| (0..x.rows()).map(|i| x.get(i, j) * zeta[i]).sum()).collect()
    }

    /// `X p` for a weight vector `p` over patterns.
    fn combine(&self, p: &[f64]) -> Vec<f64> {
        let x = &self.patterns;
        (0..x.rows()).map(|i| p.iter().enumerate().fold(0.0, |acc, (j, &w)| acc + w * x.get(i, j))).collect()
    }
}

/// `E(zeta; X) = 1/2 zeta^T zeta - lse(X^T zeta, beta)`.
pub fn hopfield_energy(zeta: &[f64], store: &PatternStore) -> Result<f64> {
    store.check(zeta, "hopfield_energy")?;
    let half_norm = 0.5 * compensated_sum(zeta.iter().map(|z| z * z));
    Ok(half_norm - lse_unchecked(&store.similarities(zeta), store.beta))
}

/// `zeta_new = X softmax(beta X^T zeta)`.
pub fn hopfield_update(zeta: &[f64], store: &PatternStore) -> Result<Vec<f64>> {
    store.check(zeta, "hopfield_update")?;
    let mut p = store.similarities(zeta);
    softmax_in_place(&mut p, store.beta);
    Ok(store.combine(&p))
}

/// Gradient of [`hopfield_energy`] with respect to the state: `zeta - X softmax(beta X^T zeta)`.
pub fn hopfield_energy_grad(zeta: &[f64], store: &PatternStore) -> Result<Vec<f64>> {
    let target = hopfield_update(zeta, store)?;
    Ok(zeta.iter().zip(&target).map(|(z, t)| z - t).collect())
}

/// One gradient-descent step on the energy with step size `eta`.
///
/// With `eta = 1` this is exactly [`hopfield_update`].
pub fn hopfield_gd_step(zeta: &[f64], store: &PatternStore, eta: f64) -> Result<Vec<f64>> {
    let target = hopfield_update(zeta, store)?;
    if eta == 1.0 {
        return Ok(target);
    }
    Ok(zeta.iter().zip(&target).map(|(z, t)| z - eta * (z - t)).collect())
}

/// Trace of a fixed-point iteration.
#[derive(Clone, Debug)]
pub struct HopfieldRun {
    pub energies: Vec<f64>,
    pub state: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `max |zeta_{t+1} - zeta_t|` of the last step taken.
    pub last_step: f64,
}

/// Iterates [`hopfield_update`] until `max |delta| < tol` or `max_iter` steps.
/// `energies[0]` is the energy of the initial state.
pub fn iterate(zeta0: &[f64], store: &PatternStore, tol: f64, max_iter: usize) -> Result<HopfieldRun> {
    let mut state = zeta0.to_vec();
    let mut energies = vec![hopfield_energy(&state, store)?];
    let mut last_step = f64::INFINITY;
    for it in 1..=max_iter {
        let next = hopfield_update(&state, store)?;
        last_step = next.iter().zip(&state).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        state = next;
        energies.push(hopfield_energy(&state, store)?);
        if last_step < tol {
            return Ok(HopfieldRun { energies, state, iterations: it, converged: true, last_step });
        }
    }
    Ok(HopfieldRun { energies, state, iterations: max_iter, converged: false, last_step })
}

/// Softmax attention `softmax_2(beta Q K^T) V`.
pub fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, beta: f64) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::shape("attention_forward", format!("query dim {} vs key dim {}", q.cols(), k.cols())));
    }
    let s = q.matmul_t(k)?;
    attention_from_scores(&s, v, beta)
}

/// Attention output from precomputed scores `S = Q K^T` (`P x N`).
pub fn attention_from_scores(s: &Matrix, v: &Matrix, beta: f64) -> Result<Matrix> {
    if s.cols() != v.rows() {
        return Err(Error::shape("attention", format!("{} keys vs {} values", s.cols(), v.rows())));
    }
    row_softmax(s, beta)?.matmul(v)
}
