//! Composition of queries over several contexts.
//!
//! Each concept `s` contributes a query energy
//! `E(Q; K_s) = 1/2 tr(Q Q^T) - sum_i lse(K_s q_i^T, beta)`; their mean is
//! minimized by one step of the weighted multi-context attention
//! `1/M sum_s alpha_s softmax_2(beta Q K_s^T) V_s`.

use crate::error::{Error, Result};
use crate::hopfield::attention_from_scores;
use crate::numerics::{compensated_sum, lse_unchecked, sq_norm_sum, Matrix};

/// Main context plus editorial contexts, each with a composition weight.
///
/// By convention the first entry is the main prompt with weight 1;
/// negative weights negate a concept.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSet {
    contexts: Vec<Matrix>,
    alphas: Vec<f64>,
    labels: Vec<String>,
}

impl ContextSet {
    pub fn new(contexts: Vec<Matrix>, alphas: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if contexts.is_empty() {
            return Err(Error::domain("ContextSet", "at least one context is required"));
        }
        if alphas.len() != contexts.len() || labels.len() != contexts.len() {
            return Err(Error::shape(
                "ContextSet",
                format!("{} contexts, {} weights, {} labels", contexts.len(), alphas.len(), labels.len()),
            ));
        }
        let d = contexts[0].cols();
        if contexts.iter().any(|c| c.cols() != d) {
            return Err(Error::shape("ContextSet", "contexts must share the embedding width"));
        }
        if alphas.iter().any(|a| !a.is_finite()) {
            return Err(Error::domain("ContextSet", "composition weights must be finite"));
        }
        Ok(ContextSet { contexts, alphas, labels })
    }

    /// A single main context with weight 1.
    pub fn single(context: Matrix) -> Self {
        ContextSet { contexts: vec![context], alphas: vec![1.0], labels: vec!["main".into()] }
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn contexts(&self) -> &[Matrix] {
        &self.contexts
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn context_dim(&self) -> usize {
        self.contexts[0].cols()
    }

    /// Same weights and labels, new context matrices.
    pub fn with_contexts(&self, contexts: Vec<Matrix>) -> Result<Self> {
        ContextSet::new(contexts, self.alphas.clone(), self.labels.clone())
    }

    pub fn with_alphas(&self, alphas: Vec<f64>) -> Result<Self> {
        ContextSet::new(self.contexts.clone(), alphas, self.labels.clone())
    }
}

/// `E(Q; K_s) = 1/2 tr(Q Q^T) - sum_i lse(K_s q_i^T, beta)`.
pub fn query_energy(q: &Matrix, k: &Matrix, beta: f64) -> Result<f64> {
    Ok(0.5 * sq_norm_sum(q) - query_lse_sum(q, k, beta)?)
}

fn query_lse_sum(q: &Matrix, k: &Matrix, beta: f64) -> Result<f64> {
    if q.cols() != k.cols() {
        return Err(Error::shape("query_energy", format!("query dim {} vs key dim {}", q.cols(), k.cols())));
    }
    if !(beta > 0.0) {
        return Err(Error::domain("query_energy", format!("beta must be positive, got {beta}")));
    }
    let s = q.matmul_t(k)?;
    Ok(compensated_sum((0..s.rows()).map(|i| lse_unchecked(s.row(i), beta))))
}

/// Mean of the per-concept query energies; the quadratic term is counted once.
pub fn compositional_energy(q: &Matrix, keys: &[Matrix], beta: f64) -> Result<f64> {
    if keys.is_empty() {
        return Err(Error::domain("compositional_energy", "no keys"));
    }
    let sums = keys.iter().map(|k| query_lse_sum(q, k, beta)).collect::<Result<Vec<_>>>()?;
    Ok(0.5 * sq_norm_sum(q) - compensated_sum(sums) / keys.len() as f64)
}

/// `1/M sum_s alpha_s softmax_2(beta Q K_s^T) V_s` with `K_s = C_s W_K`, `V_s = C_s W_V`.
pub fn ebcq_forward(q: &Matrix, set: &ContextSet, w_k: &Matrix, w_v: &Matrix, beta: f64) -> Result<Matrix> {
    let mut scores = Vec::with_capacity(set.len());
    let mut values = Vec::with_capacity(set.len());
    for c in set.contexts() {
        let k = c.matmul(w_k)?;
        if k.cols() != q.cols() {
            return Err(Error::shape("ebcq_forward", format!("query dim {} vs key dim {}", q.cols(), k.cols())));
        }
        scores.push(q.matmul_t(&k)?);
        values.push(c.matmul(w_v)?);
    }
    compose_from_scores(&scores, &values, set.alphas(), beta)
}

/// Weighted attention mixture from per-concept scores `S_s = Q K_s^T` and values.
/// Concepts are summed in order.
pub(crate) fn compose_from_scores(scores: &[Matrix], values: &[Matrix], alphas: &[f64], beta: f64) -> Result<Matrix> {
    let mut acc: Option<Matrix> = None;
    for ((s, v), &a) in scores.iter().zip(values).zip(alphas) {
        let out = attention_from_scores(s, v, beta)?;
        match acc.as_mut() {
            None => acc = Some(if a == 1.0 { out } else { out.scale(a) }),
            Some(m) => m.add_scaled_in_place(&out, a)?,
        }
    }
    let acc = acc.ok_or_else(|| Error::domain("ebcq_forward", "empty context set"))?;
    let m = scores.len();
    Ok(if m == 1 { acc } else { acc.scale(1.0 / m as f64) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hopfield::attention_forward;
    use crate::numerics::lse;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn query_energy_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random(&mut rng, 3, 4);
        let e = query_energy(&Matrix::zeros(5, 4), &k, 0.5).unwrap();
        assert!((e + 5.0 * (3.0f64).ln() / 0.5).abs() < 1e-13);

        let q = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
        let k1 = Matrix::from_rows(&[[0.5, 0.25]]).unwrap();
        assert!((query_energy(&q, &k1, 0.3).unwrap() - (2.5 - 0.0)).abs() < 1e-15);

        let q = random(&mut rng, 6, 4);
        let mut oracle = 0.5 * q.as_slice().iter().map(|x| x * x).sum::<f64>();
        for i in 0..6 {
            let sims: Vec<f64> = (0..3).map(|n| (0..4).map(|j| q.get(i, j) * k.get(n, j)).sum()).collect();
            oracle -= lse(&sims, 0.5).unwrap();
        }
        assert!((query_energy(&q, &k, 0.5).unwrap() - oracle).abs() < 1e-13);
    }

    #[test]
    fn compositional_energy_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random(&mut rng, 6, 4);
        let k = random(&mut rng, 3, 4);
        assert_eq!(
            compositional_energy(&q, std::slice::from_ref(&k), 0.5).unwrap(),
            query_energy(&q, &k, 0.5).unwrap()
        );
        let same = compositional_energy(&q, &[k.clone(), k.clone(), k.clone()], 0.5).unwrap();
        assert!((same - query_energy(&q, &k, 0.5).unwrap()).abs() < 1e-13);

        let keys: Vec<Matrix> = (0..3).map(|n| random(&mut rng, n + 2, 4)).collect();
        let mean = keys.iter().map(|k| query_energy(&q, k, 0.5).unwrap()).sum::<f64>() / 3.0;
        assert!((compositional_energy(&q, &keys, 0.5).unwrap() - mean).abs() < 1e-13);
        assert!(compositional_energy(&q, &[], 0.5).is_err());
    }

    fn setup(rng: &mut ChaCha8Rng) -> (Matrix, Matrix, Matrix, Matrix) {
        (random(rng, 5, 4), random(rng, 3, 6), random(rng, 6, 4), random(rng, 6, 4))
    }

    #[test]
    fn single_context_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, c, wk, wv) = setup(&mut rng);
        let out = ebcq_forward(&q, &ContextSet::single(c.clone()), &wk, &wv, 0.5).unwrap();
        let plain = attention_forward(&q, &c.matmul(&wk).unwrap(), &c.matmul(&wv).unwrap(), 0.5).unwrap();
        assert_eq!(out.max_abs_diff(&plain), 0.0);

        let twice = ContextSet::new(vec![c.clone(), c.clone()], vec![1.0, 1.0], vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(ebcq_forward(&q, &twice, &wk, &wv, 0.5).unwrap().max_abs_diff(&plain), 0.0);

        let negated = twice.with_alphas(vec![1.0, -1.0]).unwrap();
        assert_eq!(ebcq_forward(&q, &negated, &wk, &wv, 0.5).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn linear_in_weights_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, c1, wk, wv) = setup(&mut rng);
        let c2 = random(&mut rng, 2, 6);
        let c3 = random(&mut rng, 4, 6);
        let labels: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let set =
            ContextSet::new(vec![c1.clone(), c2.clone(), c3.clone()], vec![1.0, 0.7, -0.4], labels.clone()).unwrap();
        let base = ebcq_forward(&q, &set, &wk, &wv, 0.5).unwrap();
        let scaled = set.with_alphas(vec![2.5, 1.75, -1.0]).unwrap();
        assert!(ebcq_forward(&q, &scaled, &wk, &wv, 0.5).unwrap().max_abs_diff(&base.scale(2.5)) < 1e-12);

        let perm = ContextSet::new(vec![c3, c1, c2], vec![-0.4, 1.0, 0.7], labels).unwrap();
        assert!(ebcq_forward(&q, &perm, &wk, &wv, 0.5).unwrap().max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn context_set_validation() {
        assert!(ContextSet::new(vec![], vec![], vec![]).is_err());
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 4);
        assert!(ContextSet::new(vec![a.clone(), b], vec![1.0, 1.0], vec!["a".into(), "b".into()]).is_err());
        assert!(ContextSet::new(vec![a], vec![1.0, 0.5], vec!["a".into()]).is_err());
    }
}
