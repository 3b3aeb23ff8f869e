//! Cross-attention layers with context updates, and the per-step cascade of
//! updated contexts through a layer stack.
//!
//! Inside one sampling step the contexts start from the frozen encoder
//! embeddings, are updated by every layer and handed to the next one, and are
//! dropped when the step ends.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::ebcq::{compose_from_scores, ContextSet};
use crate::ebcu::{cond_energy_from_scores, context_update_from_scores, prior_energy, UpdateConfig};
use crate::error::{Error, Result};
use crate::numerics::{fmt_f64, Matrix};

thread_local! {
    static SIMILARITY_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `Q K^T` evaluations performed by layer forwards on this thread.
pub fn similarity_evaluations() -> u64 {
    SIMILARITY_EVALS.with(Cell::get)
}

pub fn reset_similarity_evaluations() {
    SIMILARITY_EVALS.with(|c| c.set(0));
}

fn similarity(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    SIMILARITY_EVALS.with(|c| c.set(c.get() + 1));
    q.matmul_t(k)
}

/// Query/key/value projections of one cross-attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl LayerWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        let d_h = w_q.cols();
        if w_k.cols() != d_h || w_v.cols() != d_h {
            return Err(Error::shape("LayerWeights", "W_Q, W_K and W_V must share the head dimension"));
        }
        if w_k.rows() != w_v.rows() {
            return Err(Error::shape("LayerWeights", "W_K and W_V must share the context dimension"));
        }
        Ok(LayerWeights { w_q, w_k, w_v })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_head(&self) -> usize {
        self.w_q.cols()
    }

    pub fn d_context(&self) -> usize {
        self.w_k.rows()
    }
}

/// Position-wise feed-forward mixer `h + silu(h W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn add_row(m: &Matrix, row: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(row.row(0)) {
            *o += b;
        }
    }
    out
}

impl FeedForward {
    /// Pre-activation and activation, kept for backprop.
    pub(crate) fn hidden(&self, h: &Matrix) -> Result<(Matrix, Matrix)> {
        let z = add_row(&h.matmul(&self.w1)?, &self.b1);
        let u = z.map(silu);
        Ok((z, u))
    }

    pub fn forward(&self, h: &Matrix) -> Result<Matrix> {
        let (_, u) = self.hidden(h)?;
        h.add(&add_row(&u.matmul(&self.w2)?, &self.b2))
    }
}

/// One cross-attention layer followed by its feed-forward mixer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub attn: LayerWeights,
    pub ff: FeedForward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub blocks: Vec<Block>,
}

impl LayerStack {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| Error::domain("LayerStack", "at least one layer is required"))?;
        let d = first.attn.d_model();
        for b in &blocks {
            if b.attn.d_model() != d || b.attn.d_head() != d {
                return Err(Error::shape("LayerStack", "every layer must map d_model -> d_model"));
            }
        }
        Ok(LayerStack { blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Ebcu,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Ebcu => "ebcu",
        })
    }
}

/// Update settings for every context of a [`ContextSet`], plus the label
/// written to energy records.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    pub updates: Vec<UpdateConfig>,
    pub variant: Variant,
}

impl CascadeConfig {
    /// The same update for every context.
    pub fn uniform(update: UpdateConfig, variant: Variant) -> Self {
        CascadeConfig { updates: vec![update], variant }
    }

    /// Plain attention: every step size zero.
    pub fn baseline(d_head: usize) -> Self {
        CascadeConfig::uniform(UpdateConfig::new(d_head), Variant::Baseline)
    }

    pub fn for_context(&self, s: usize) -> &UpdateConfig {
        &self.updates[s.min(self.updates.len() - 1)]
    }

    pub fn beta(&self) -> f64 {
        self.updates[0].beta
    }

    fn check(&self, m: usize) -> Result<()> {
        if self.updates.is_empty() || (self.updates.len() != 1 && self.updates.len() != m) {
            return Err(Error::shape(
                "CascadeConfig",
                format!("{} update configs for {m} contexts", self.updates.len()),
            ));
        }
        Ok(())
    }
}

/// Energies of the main context at one layer of one sampling step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    pub t: usize,
    pub layer: usize,
    pub variant: Variant,
    /// `E(Q;K)` with `alpha = 0`.
    pub e_cond: f64,
    /// `E(K)`.
    pub e_prior: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnergyTrace {
    pub records: Vec<EnergyRecord>,
}

impl EnergyTrace {
    pub const CSV_HEADER: &'static str = "t,layer,variant,e_cond,e_prior";

    pub fn push(&mut self, r: EnergyRecord) {
        self.records.push(r);
    }

    pub fn extend(&mut self, rs: impl IntoIterator<Item = EnergyRecord>) {
        self.records.extend(rs);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!("{},{},{},{},{}\n", r.t, r.layer, r.variant, fmt_f64(r.e_cond), fmt_f64(r.e_prior)));
        }
        s
    }
}

/// Output of one layer: the attention output (before the residual), the
/// updated contexts and the energies of the updated main context.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub attention: Matrix,
    pub contexts: ContextSet,
    pub record: EnergyRecord,
}

/// One cross-attention layer with context updates.
///
/// Projects `Q = latent W_Q`, `K_s = C_s W_K`, `V_s = C_s W_V`, computes each
/// `S_s = Q K_s^T` once and feeds it to both the attention output and the
/// context update of concept `s`.
pub fn layer_forward(
    latent: &Matrix,
    set: &ContextSet,
    w: &LayerWeights,
    cfg: &CascadeConfig,
    t: usize,
) -> Result<LayerOutput> {
    cfg.check(set.len())?;
    if set.context_dim() != w.d_context() {
        return Err(Error::shape(
            "layer_forward",
            format!("context dim {} vs W_K rows {}", set.context_dim(), w.d_context()),
        ));
    }
    let q = latent.matmul(&w.w_q)?;
    let mut keys = Vec::with_capacity(set.len());
    let mut values = Vec::with_capacity(set.len());
    let mut scores = Vec::with_capacity(set.len());
    for c in set.contexts() {
        let k = c.matmul(&w.w_k)?;
        scores.push(similarity(&q, &k)?);
        values.push(c.matmul(&w.w_v)?);
        keys.push(k);
    }
    let attention = compose_from_scores(&scores, &values, set.alphas(), cfg.beta())?;
    let updated = set
        .contexts()
        .iter()
        .enumerate()
        .map(|(s, c)| context_update_from_scores(c, &q, &keys[s], &scores[s], &w.w_k, cfg.for_context(s), t))
        .collect::<Result<Vec<_>>>()?;
    let (e_cond, e_prior) = if updated[0] == set.contexts()[0] {
        (cond_energy_from_scores(&scores[0], &keys[0], 0.0, cfg.beta()), prior_energy(&keys[0]))
    } else {
        let k = updated[0].matmul(&w.w_k)?;
        (cond_energy_from_scores(&q.matmul_t(&k)?, &k, 0.0, cfg.beta()), prior_energy(&k))
    };
    let record = EnergyRecord { t, layer: 0, variant: cfg.variant, e_cond, e_prior };
    Ok(LayerOutput { attention, contexts: set.with_contexts(updated)?, record })
}

/// Runs the whole stack for one sampling step. Contexts restart from
/// `init_contexts`, flow layer to layer and are discarded at the end.
pub fn cascade_step(
    latent: &Matrix,
    init_contexts: &ContextSet,
    stack: &LayerStack,
    cfg: &CascadeConfig,
    t: usize,
) -> Result<(Matrix, Vec<EnergyRecord>)> {
    let mut contexts = init_contexts.clone();
    let mut h = latent.clone();
    let mut records = Vec::with_capacity(stack.len());
    for (l, block) in stack.blocks.iter().enumerate() {
        let out = layer_forward(&h, &contexts, &block.attn, cfg, t)?;
        h = block.ff.forward(&h.add(&out.attention)?)?;
        contexts = out.contexts;
        records.push(EnergyRecord { layer: l, ..out.record });
    }
    Ok((h, records))
}

/// Applies `k` context updates inside one layer, each with the step sizes
/// divided by `k`. Queries stay fixed; keys follow the updated contexts.
pub fn multi_step_update(
    latent: &Matrix,
    set: &ContextSet,
    w: &LayerWeights,
    cfg: &CascadeConfig,
    t: usize,
    k: usize,
) -> Result<ContextSet> {
    if k == 0 {
        return Err(Error::domain("multi_step_update", "k must be at least 1"));
    }
    cfg.check(set.len())?;
    let q = latent.matmul(&w.w_q)?;
    let scale = 1.0 / k as f64;
    let mut contexts = set.contexts().to_vec();
    for _ in 0..k {
        for (s, c) in contexts.iter_mut().enumerate() {
            let base = cfg.for_context(s);
            let step_cfg = if k == 1 {
                base.clone()
            } else {
                UpdateConfig {
                    gamma_attn: base.gamma_attn.scaled(scale),
                    gamma_reg: base.gamma_reg.scaled(scale),
                    ..base.clone()
                }
            };
            let keys = c.matmul(&w.w_k)?;
            let s_qk = similarity(&q, &keys)?;
            *c = context_update_from_scores(c, &q, &keys, &s_qk, &w.w_k, &step_cfg, t)?;
        }
    }
    set.with_contexts(contexts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ebcu::{cond_energy, context_update};
    use crate::hopfield::attention_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
    }

    fn weights(rng: &mut ChaCha8Rng, d: usize, dc: usize) -> LayerWeights {
        LayerWeights::new(random(rng, d, d, 0.5), random(rng, dc, d, 0.5), random(rng, dc, d, 0.5)).unwrap()
    }

    fn block(rng: &mut ChaCha8Rng, d: usize, dc: usize) -> Block {
        Block {
            attn: weights(rng, d, dc),
            ff: FeedForward {
                w1: random(rng, d, 2 * d, 0.3),
                b1: random(rng, 1, 2 * d, 0.1),
                w2: random(rng, 2 * d, d, 0.3),
                b2: random(rng, 1, d, 0.1),
            },
        }
    }

    fn ebcu(d: usize, g: f64) -> CascadeConfig {
        CascadeConfig::uniform(UpdateConfig::new(d).with_gammas(g, g), Variant::Ebcu)
    }

    #[test]
    fn zero_rates_give_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = weights(&mut rng, 6, 5);
        let latent = random(&mut rng, 9, 6, 1.0);
        let c = random(&mut rng, 3, 5, 1.0);
        let set = ContextSet::single(c.clone());
        let cfg = CascadeConfig::baseline(6);
        let out = layer_forward(&latent, &set, &w, &cfg, 0).unwrap();
        let q = latent.matmul(&w.w_q).unwrap();
        let plain = attention_forward(&q, &c.matmul(&w.w_k).unwrap(), &c.matmul(&w.w_v).unwrap(), cfg.beta()).unwrap();
        assert_eq!(out.attention, plain);
        assert_eq!(out.contexts, set);

        let twice = ContextSet::new(vec![c.clone(), c], vec![1.0, 1.0], vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(layer_forward(&latent, &twice, &w, &cfg, 0).unwrap().attention, plain);
    }

    #[test]
    fn updated_contexts_lower_the_conditional_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lower = 0;
        for _ in 0..20 {
            let w = weights(&mut rng, 6, 5);
            let latent = random(&mut rng, 9, 6, 1.0);
            let set = ContextSet::single(random(&mut rng, 3, 5, 1.0));
            let cfg = CascadeConfig::uniform(UpdateConfig::new(6).with_gammas(0.05, 0.0), Variant::Ebcu);
            let first = layer_forward(&latent, &set, &w, &cfg, 0).unwrap();
            let second = layer_forward(&latent, &first.contexts, &w, &cfg, 0).unwrap();
            if second.record.e_cond < first.record.e_cond {
                lower += 1;
            }
        }
        assert_eq!(lower, 20);
    }

    #[test]
    fn one_similarity_per_layer_and_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = LayerStack::new((0..3).map(|_| block(&mut rng, 6, 5)).collect()).unwrap();
        let latent = random(&mut rng, 9, 6, 1.0);
        let c1 = random(&mut rng, 3, 5, 1.0);
        let c2 = random(&mut rng, 2, 5, 1.0);
        let set = ContextSet::new(vec![c1, c2], vec![1.0, 0.7], vec!["a".into(), "b".into()]).unwrap();
        reset_similarity_evaluations();
        cascade_step(&latent, &set, &stack, &ebcu(6, 0.02), 0).unwrap();
        assert_eq!(similarity_evaluations(), 3 * 2);
    }

    #[test]
    fn single_layer_cascade_is_one_layer_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = block(&mut rng, 6, 5);
        let stack = LayerStack::new(vec![b.clone()]).unwrap();
        let latent = random(&mut rng, 9, 6, 1.0);
        let set = ContextSet::single(random(&mut rng, 3, 5, 1.0));
        let cfg = ebcu(6, 0.02);
        let (h, recs) = cascade_step(&latent, &set, &stack, &cfg, 2).unwrap();
        let out = layer_forward(&latent, &set, &b.attn, &cfg, 2).unwrap();
        assert_eq!(h, b.ff.forward(&latent.add(&out.attention).unwrap()).unwrap());
        assert_eq!(recs, vec![out.record]);
    }

    #[test]
    fn zero_rate_cascade_matches_plain_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = LayerStack::new((0..4).map(|_| block(&mut rng, 6, 5)).collect()).unwrap();
        let latent = random(&mut rng, 9, 6, 1.0);
        let c = random(&mut rng, 3, 5, 1.0);
        let (h, _) =
            cascade_step(&latent, &ContextSet::single(c.clone()), &stack, &CascadeConfig::baseline(6), 0).unwrap();
        let mut plain = latent;
        for b in &stack.blocks {
            let q = plain.matmul(&b.attn.w_q).unwrap();
            let a = attention_forward(
                &q,
                &c.matmul(&b.attn.w_k).unwrap(),
                &c.matmul(&b.attn.w_v).unwrap(),
                1.0 / 6f64.sqrt(),
            )
            .unwrap();
            plain = b.ff.forward(&plain.add(&a).unwrap()).unwrap();
        }
        assert_eq!(h, plain);
    }

    #[test]
    fn cascade_threads_contexts_through_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stack = LayerStack::new((0..3).map(|_| block(&mut rng, 6, 5)).collect()).unwrap();
        let latent = random(&mut rng, 9, 6, 1.0);
        let c = random(&mut rng, 3, 5, 1.0);
        let cfg = ebcu(6, 0.03);
        let upd = cfg.for_context(0).clone();
        let (_, recs) = cascade_step(&latent, &ContextSet::single(c.clone()), &stack, &cfg, 0).unwrap();

        // Hand-threaded oracle for the context leaving layer 3.
        let mut h = latent;
        let mut ctx = c;
        for b in &stack.blocks[..2] {
            let q = h.matmul(&b.attn.w_q).unwrap();
            let a =
                attention_forward(&q, &ctx.matmul(&b.attn.w_k).unwrap(), &ctx.matmul(&b.attn.w_v).unwrap(), upd.beta)
                    .unwrap();
            ctx = context_update(&ctx, &q, &b.attn.w_k, &upd, 0).unwrap();
            h = b.ff.forward(&h.add(&a).unwrap()).unwrap();
        }
        let w3 = &stack.blocks[2].attn;
        let q3 = h.matmul(&w3.w_q).unwrap();
        let ctx = context_update(&ctx, &q3, &w3.w_k, &upd, 0).unwrap();
        let e3 = cond_energy(&q3, &ctx.matmul(&w3.w_k).unwrap(), 0.0, upd.beta).unwrap();
        assert!((recs[2].e_cond - e3).abs() < 1e-12 * e3.abs().max(1.0));
        assert_eq!(recs.iter().map(|r| r.layer).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn contexts_reinitialize_every_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stack = LayerStack::new((0..2).map(|_| block(&mut rng, 6, 5)).collect()).unwrap();
        let set = ContextSet::single(random(&mut rng, 3, 5, 1.0));
        let cfg = ebcu(6, 0.05);
        let x1 = random(&mut rng, 9, 6, 1.0);
        let (x2, _) = cascade_step(&x1, &set, &stack, &cfg, 0).unwrap();
        let (_, recs) = cascade_step(&x2, &set, &stack, &cfg, 1).unwrap();
        let w = &stack.blocks[0].attn;
        let q = x2.matmul(&w.w_q).unwrap();
        let fresh = context_update(&set.contexts()[0], &q, &w.w_k, cfg.for_context(0), 1).unwrap();
        let fresh = cond_energy(&q, &fresh.matmul(&w.w_k).unwrap(), 0.0, cfg.beta()).unwrap();
        assert_eq!(recs[0].e_cond, fresh);
    }

    #[test]
    fn multi_step_update_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut better = 0;
        for i in 0..20 {
            let w = weights(&mut rng, 6, 5);
            let latent = random(&mut rng, 9, 6, 1.0);
            let set = ContextSet::single(random(&mut rng, 3, 5, 1.0));
            // attention term only: then each update descends E(Q;K) itself
            let cfg = CascadeConfig::uniform(UpdateConfig::new(6).with_gammas(0.05, 0.0), Variant::Ebcu);
            let one = multi_step_update(&latent, &set, &w, &cfg, 0, 1).unwrap();
            if i == 0 {
                let direct =
                    context_update(&set.contexts()[0], &latent.matmul(&w.w_q).unwrap(), &w.w_k, cfg.for_context(0), 0)
                        .unwrap();
                assert_eq!(one.contexts()[0], direct);
                assert_eq!(multi_step_update(&latent, &set, &w, &CascadeConfig::baseline(6), 0, 3).unwrap(), set);
                assert!(multi_step_update(&latent, &set, &w, &cfg, 0, 0).is_err());
            }
            let four = multi_step_update(&latent, &set, &w, &cfg, 0, 4).unwrap();
            let q = latent.matmul(&w.w_q).unwrap();
            let e =
                |s: &ContextSet| cond_energy(&q, &s.contexts()[0].matmul(&w.w_k).unwrap(), 0.0, cfg.beta()).unwrap();
            if e(&four) <= e(&one) {
                better += 1;
            }
        }
        assert!(better >= 18, "{better}/20");
    }

    #[test]
    fn trace_csv_schema() {
        let mut tr = EnergyTrace::default();
        tr.push(EnergyRecord { t: 3, layer: 1, variant: Variant::Ebcu, e_cond: -1.5, e_prior: 0.25 });
        let csv = tr.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,layer,variant,e_cond,e_prior"));
        assert_eq!(lines.next(), Some("3,1,ebcu,-1.5000000000000000e0,2.5000000000000000e-1"));
    }
}
