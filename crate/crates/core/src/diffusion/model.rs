//! Small cross-attention denoiser over grid tokens.
//!
//! `h_0 = x W_in + b_in + pos + tau(t) W_time`, then per block
//! `h <- FF(h + attn(h W_Q, C W_K, C W_V))`, and `eps = h_L W_out + b_out`.
//! The context `C` holds `tokens_per_concept` rows per prompt concept:
//! `concept_table[c_i * tokens_per_concept + j] + slot_emb[i]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Prompt, CHANNELS, MAX_PROMPT, NUM_CONCEPTS, TOKENS};
use crate::ebcq::ContextSet;
use crate::error::{Error, Result};
use crate::numerics::{row_softmax, Matrix};
use crate::xattn::{
    add_row, cascade_step, silu_grad, Block, CascadeConfig, EnergyRecord, FeedForward, LayerStack, LayerWeights,
};

pub const TIME_FEATURES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub d_context: usize,
    pub layers: usize,
    pub tokens_per_concept: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { d_model: 32, d_ff: 64, d_context: 32, layers: 4, tokens_per_concept: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDenoiser {
    pub w_in: Matrix,
    pub b_in: Matrix,
    pub pos: Matrix,
    pub w_time: Matrix,
    pub stack: LayerStack,
    pub w_out: Matrix,
    pub b_out: Matrix,
    pub concept_table: Matrix,
    pub slot_emb: Matrix,
    pub trained_steps: usize,
}

/// Sinusoidal features of the diffusion timestep.
pub fn time_features(t: usize) -> Matrix {
    let t = t as f64;
    Matrix::from_fn(1, TIME_FEATURES, |_, j| {
        let k = (j / 2) as f64;
        let freq = (-(1000f64).ln() * k / (TIME_FEATURES / 2) as f64).exp();
        if j % 2 == 0 {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, rows, cols, s)
}

impl ToyDenoiser {
    pub fn new(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        if cfg.d_model == 0 || cfg.d_ff == 0 || cfg.d_context == 0 || cfg.layers == 0 || cfg.tokens_per_concept == 0 {
            return Err(Error::domain("ToyDenoiser", "all dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let blocks = (0..cfg.layers)
            .map(|_| {
                let attn = LayerWeights::new(
                    glorot(&mut rng, d, d),
                    glorot(&mut rng, cfg.d_context, d),
                    glorot(&mut rng, cfg.d_context, d),
                )?;
                let ff = FeedForward {
                    w1: glorot(&mut rng, d, cfg.d_ff),
                    b1: Matrix::zeros(1, cfg.d_ff),
                    w2: glorot(&mut rng, cfg.d_ff, d).scale(0.5),
                    b2: Matrix::zeros(1, d),
                };
                Ok(Block { attn, ff })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyDenoiser {
            w_in: glorot(&mut rng, CHANNELS, d),
            b_in: Matrix::zeros(1, d),
            pos: uniform(&mut rng, TOKENS, d, 0.5),
            w_time: glorot(&mut rng, TIME_FEATURES, d),
            stack: LayerStack::new(blocks)?,
            w_out: glorot(&mut rng, d, CHANNELS),
            b_out: Matrix::zeros(1, CHANNELS),
            concept_table: uniform(&mut rng, NUM_CONCEPTS * cfg.tokens_per_concept, cfg.d_context, 1.0),
            slot_emb: uniform(&mut rng, MAX_PROMPT, cfg.d_context, 0.5),
            trained_steps: 0,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_in.cols()
    }

    pub fn d_context(&self) -> usize {
        self.concept_table.cols()
    }

    pub fn tokens_per_concept(&self) -> usize {
        self.concept_table.rows() / NUM_CONCEPTS
    }

    pub fn layers(&self) -> usize {
        self.stack.len()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.rows() * m.cols()).sum()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.w_in, &self.b_in, &self.pos, &self.w_time];
        for b in &self.stack.blocks {
            out.extend([&b.attn.w_q, &b.attn.w_k, &b.attn.w_v, &b.ff.w1, &b.ff.b1, &b.ff.w2, &b.ff.b2]);
        }
        out.extend([&self.w_out, &self.b_out, &self.concept_table, &self.slot_emb]);
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.w_in, &mut self.b_in, &mut self.pos, &mut self.w_time];
        for b in &mut self.stack.blocks {
            out.extend([
                &mut b.attn.w_q,
                &mut b.attn.w_k,
                &mut b.attn.w_v,
                &mut b.ff.w1,
                &mut b.ff.b1,
                &mut b.ff.w2,
                &mut b.ff.b2,
            ]);
        }
        out.extend([&mut self.w_out, &mut self.b_out, &mut self.concept_table, &mut self.slot_emb]);
        out
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub(crate) fn zeros_like(&self) -> ToyDenoiser {
        let mut z = self.clone();
        for p in z.params_mut() {
            *p = Matrix::zeros(p.rows(), p.cols());
        }
        z.trained_steps = 0;
        z
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Initial context matrix of a prompt.
    pub fn context(&self, prompt: &Prompt) -> Matrix {
        let tpc = self.tokens_per_concept();
        Matrix::from_fn(prompt.len() * tpc, self.d_context(), |r, j| {
            let (slot, tok) = (r / tpc, r % tpc);
            self.concept_table.get(prompt.concepts()[slot] * tpc + tok, j) + self.slot_emb.get(slot, j)
        })
    }

    /// The prompt as a single-context set.
    pub fn context_set(&self, prompt: &Prompt) -> ContextSet {
        ContextSet::single(self.context(prompt))
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.shape() != (TOKENS, CHANNELS) {
            return Err(Error::shape("ToyDenoiser", format!("expected {TOKENS}x{CHANNELS} grid, got {:?}", x.shape())));
        }
        Ok(())
    }

    /// Token embedding `h_0` of a noisy grid at timestep `t`.
    pub fn embed(&self, x: &Matrix, t: usize) -> Result<Matrix> {
        let tf = time_features(t).matmul(&self.w_time)?.add(&self.b_in)?;
        add_row(&x.matmul(&self.w_in)?, &tf).add(&self.pos)
    }

    fn readout(&self, h: &Matrix) -> Result<Matrix> {
        Ok(add_row(&h.matmul(&self.w_out)?, &self.b_out))
    }

    /// Noise prediction through the context cascade, with energy records per layer.
    pub fn predict_noise(
        &self,
        x: &Matrix,
        t: usize,
        contexts: &ContextSet,
        cfg: &CascadeConfig,
        step: usize,
    ) -> Result<(Matrix, Vec<EnergyRecord>)> {
        self.check_input(x)?;
        let h0 = self.embed(x, t)?;
        let (h, records) = cascade_step(&h0, contexts, &self.stack, cfg, step)?;
        Ok((self.readout(&h)?, records))
    }

    /// Plain cross-attention forward with a fixed context.
    pub fn predict_noise_plain(&self, x: &Matrix, t: usize, context: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x, t, context)?.eps)
    }

    pub(crate) fn forward_cached(&self, x: &Matrix, t: usize, context: &Matrix) -> Result<ForwardCache> {
        self.check_input(x)?;
        let beta = 1.0 / (self.d_model() as f64).sqrt();
        let mut h = self.embed(x, t)?;
        let mut blocks = Vec::with_capacity(self.layers());
        for b in &self.stack.blocks {
            let q = h.matmul(&b.attn.w_q)?;
            let k = context.matmul(&b.attn.w_k)?;
            let v = context.matmul(&b.attn.w_v)?;
            let a = row_softmax(&q.matmul_t(&k)?, beta)?;
            let u = h.add(&a.matmul(&v)?)?;
            let (z, act) = b.ff.hidden(&u)?;
            let next = u.add(&add_row(&act.matmul(&b.ff.w2)?, &b.ff.b2))?;
            blocks.push(BlockCache { h_in: h, q, k, v, a, u, z, act });
            h = next;
        }
        let eps = self.readout(&h)?;
        Ok(ForwardCache { x: x.clone(), t, context: context.clone(), blocks, h_out: h, eps, beta })
    }

    /// Accumulates into `grads` the gradient of `sum(d_eps * eps)`, and returns
    /// the gradient with respect to the context matrix.
    pub(crate) fn backward(&self, cache: &ForwardCache, d_eps: &Matrix, grads: &mut ToyDenoiser) -> Result<Matrix> {
        grads.w_out.add_scaled_in_place(&cache.h_out.t_matmul(d_eps)?, 1.0)?;
        grads.b_out.add_scaled_in_place(&d_eps.column_sums(), 1.0)?;
        let mut g_h = d_eps.matmul_t(&self.w_out)?;
        let mut g_ctx = Matrix::zeros(cache.context.rows(), cache.context.cols());
        for (l, (b, bc)) in self.stack.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut grads.stack.blocks[l];
            // feed-forward
            gb.ff.w2.add_scaled_in_place(&bc.act.t_matmul(&g_h)?, 1.0)?;
            gb.ff.b2.add_scaled_in_place(&g_h.column_sums(), 1.0)?;
            let g_act = g_h.matmul_t(&b.ff.w2)?;
            let g_z = g_act.hadamard(&bc.z.map(silu_grad))?;
            gb.ff.w1.add_scaled_in_place(&bc.u.t_matmul(&g_z)?, 1.0)?;
            gb.ff.b1.add_scaled_in_place(&g_z.column_sums(), 1.0)?;
            let g_u = g_h.add(&g_z.matmul_t(&b.ff.w1)?)?;
            // attention
            let g_a = g_u.matmul_t(&bc.v)?;
            let g_v = bc.a.t_matmul(&g_u)?;
            let g_s = softmax_backward(&bc.a, &g_a, cache.beta);
            let g_q = g_s.matmul(&bc.k)?;
            let g_k = g_s.t_matmul(&bc.q)?;
            gb.attn.w_q.add_scaled_in_place(&bc.h_in.t_matmul(&g_q)?, 1.0)?;
            gb.attn.w_k.add_scaled_in_place(&cache.context.t_matmul(&g_k)?, 1.0)?;
            gb.attn.w_v.add_scaled_in_place(&cache.context.t_matmul(&g_v)?, 1.0)?;
            g_ctx.add_scaled_in_place(&g_k.matmul_t(&b.attn.w_k)?, 1.0)?;
            g_ctx.add_scaled_in_place(&g_v.matmul_t(&b.attn.w_v)?, 1.0)?;
            g_h = g_u.add(&g_q.matmul_t(&b.attn.w_q)?)?;
        }
        // embedding
        grads.w_in.add_scaled_in_place(&cache.x.t_matmul(&g_h)?, 1.0)?;
        grads.pos.add_scaled_in_place(&g_h, 1.0)?;
        let g_row = g_h.column_sums();
        grads.b_in.add_scaled_in_place(&g_row, 1.0)?;
        grads.w_time.add_scaled_in_place(&time_features(cache.t).t_matmul(&g_row)?, 1.0)?;
        Ok(g_ctx)
    }

    /// Routes a context gradient to the embedding table and slot rows.
    pub(crate) fn backward_context(prompt: &Prompt, g_ctx: &Matrix, grads: &mut ToyDenoiser) {
        let tpc = grads.tokens_per_concept();
        for r in 0..g_ctx.rows() {
            let (slot, row) = (r / tpc, prompt.concepts()[r / tpc] * tpc + r % tpc);
            for (j, g) in g_ctx.row(r).iter().enumerate() {
                let cur = grads.concept_table.get(row, j);
                grads.concept_table.set(row, j, cur + g);
                let cur = grads.slot_emb.get(slot, j);
                grads.slot_emb.set(slot, j, cur + g);
            }
        }
    }
}

/// `dS = beta A o (dA - rowdot(dA, A))` for `A = softmax_rows(beta S)`.
fn softmax_backward(a: &Matrix, g_a: &Matrix, beta: f64) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| {
        let dot: f64 = a.row(i).iter().zip(g_a.row(i)).map(|(p, g)| p * g).sum();
        beta * a.get(i, j) * (g_a.get(i, j) - dot)
    })
}

pub(crate) struct BlockCache {
    h_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
    u: Matrix,
    z: Matrix,
    act: Matrix,
}

pub(crate) struct ForwardCache {
    x: Matrix,
    t: usize,
    context: Matrix,
    blocks: Vec<BlockCache>,
    h_out: Matrix,
    pub(crate) eps: Matrix,
    beta: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::gaussian;
    use crate::ebcu::UpdateConfig;
    use crate::xattn::Variant;

    fn small() -> ToyDenoiser {
        ToyDenoiser::new(&DenoiserConfig { d_model: 6, d_ff: 8, d_context: 5, layers: 2, tokens_per_concept: 2 }, 3)
            .unwrap()
    }

    fn loss(m: &ToyDenoiser, x: &Matrix, t: usize, p: &Prompt, target: &Matrix) -> f64 {
        let eps = m.predict_noise_plain(x, t, &m.context(p)).unwrap();
        eps.sub(target).unwrap().as_slice().iter().map(|e| e * e).sum::<f64>()
    }

    #[test]
    fn default_model_size() {
        let m = ToyDenoiser::new(&DenoiserConfig::default(), 0).unwrap();
        assert!(m.param_count() < 100_000);
        assert_eq!(m.params().len(), 4 + 7 * 4 + 4);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = gaussian(TOKENS, CHANNELS, &mut rng);
        let target = gaussian(TOKENS, CHANNELS, &mut rng);
        let p: Prompt = "4+1".parse().unwrap();
        let t = 17;
        let cache = m.forward_cached(&x, t, &m.context(&p)).unwrap();
        let d_eps = cache.eps.sub(&target).unwrap().scale(2.0);
        let mut grads = m.zeros_like();
        let g_ctx = m.backward(&cache, &d_eps, &mut grads).unwrap();
        ToyDenoiser::backward_context(&p, &g_ctx, &mut grads);

        let h = 1e-5;
        let n_params = m.params().len();
        let mut worst: f64 = 0.0;
        for pi in 0..n_params {
            let (rows, cols) = m.params()[pi].shape();
            for probe in 0..6 {
                let (i, j) = ((probe * 7 + pi) % rows, (probe * 5 + pi) % cols);
                let mut plus = m.clone();
                let v = plus.params()[pi].get(i, j);
                plus.params_mut()[pi].set(i, j, v + h);
                let mut minus = m.clone();
                minus.params_mut()[pi].set(i, j, v - h);
                let fd = (loss(&plus, &x, t, &p, &target) - loss(&minus, &x, t, &p, &target)) / (2.0 * h);
                let an = grads.params()[pi].get(i, j);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn baseline_cascade_matches_plain_forward_bitwise() {
        let m = ToyDenoiser::new(&DenoiserConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(TOKENS, CHANNELS, &mut rng);
        let p: Prompt = "0+7".parse().unwrap();
        let plain = m.predict_noise_plain(&x, 30, &m.context(&p)).unwrap();
        let (eps, recs) =
            m.predict_noise(&x, 30, &m.context_set(&p), &CascadeConfig::baseline(m.d_model()), 0).unwrap();
        assert_eq!(eps, plain);
        assert_eq!(recs.len(), 4);
        let ebcu = CascadeConfig::uniform(UpdateConfig::new(m.d_model()).with_gammas(0.02, 0.02), Variant::Ebcu);
        let (eps2, _) = m.predict_noise(&x, 30, &m.context_set(&p), &ebcu, 0).unwrap();
        assert_ne!(eps2, plain);
        assert!(m.predict_noise_plain(&Matrix::zeros(3, 2), 1, &m.context(&p)).is_err());
    }
}
