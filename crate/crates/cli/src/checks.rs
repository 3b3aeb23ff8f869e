//! Finite-difference and exact-identity checks over seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use energy_attention::ebcq::{ebcq_forward, ContextSet};
use energy_attention::ebcu::{cond_energy, context_update, grad_log_posterior, prior_energy, UpdateConfig};
use energy_attention::hopfield::{
    attention_forward, hopfield_energy, hopfield_energy_grad, hopfield_gd_step, hopfield_update, iterate, PatternStore,
};
use energy_attention::numerics::{fmt_f64, lse, softmax};
use energy_attention::Matrix;

/// Deliberate bug for exercising the harness itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    SignFlip,
}

#[derive(Clone, Copy, Debug)]
pub struct Sizes {
    pub n_max: usize,
    pub p_max: usize,
    pub d_max: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Sizes { n_max: 8, p_max: 16, d_max: 8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub worst_seed: u64,
}

impl CheckResult {
    pub const CSV_HEADER: &'static str = "check,instances,max_error,tolerance,worst_seed,pass";

    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.name,
            self.instances,
            fmt_f64(self.max_error),
            fmt_f64(self.tolerance),
            self.worst_seed,
            self.passed()
        )
    }
}

pub fn results_csv(results: &[CheckResult]) -> String {
    let mut s = format!("{}\n", CheckResult::CSV_HEADER);
    for r in results {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn fold(name: &'static str, tolerance: f64, errors: impl IntoIterator<Item = (u64, f64)>) -> CheckResult {
    let mut out = CheckResult { name, instances: 0, max_error: 0.0, tolerance, worst_seed: 0 };
    for (seed, e) in errors {
        out.instances += 1;
        // NaN counts as the worst possible error
        if !(e <= out.max_error) {
            out.max_error = if e.is_nan() { f64::INFINITY } else { e };
            out.worst_seed = seed;
        }
    }
    out
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// `|a - f|_F / max(|a|_F, |f|_F)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nf: f64 = numeric.iter().map(|f| f * f).sum::<f64>().sqrt();
    let scale = na.max(nf);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

const H: f64 = 1e-5;

/// Central differences of `f` in every entry of `x`.
fn fd_matrix(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let bump = |d: f64| {
                Matrix::from_fn(x.rows(), x.cols(), |a, b| if (a, b) == (i, j) { x.get(a, b) + d } else { x.get(a, b) })
            };
            out.push((f(&bump(H)) - f(&bump(-H))) / (2.0 * H));
        }
    }
    out
}

fn fd_vec(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += H;
            m[i] -= H;
            (f(&p) - f(&m)) / (2.0 * H)
        })
        .collect()
}

/// One random problem. `N` cycles through `1..=n_max` with the seed so the
/// single-key case is always covered.
pub struct Instance {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub c: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub alpha: f64,
    pub beta: f64,
}

impl Instance {
    pub fn new(seed: u64, sizes: Sizes) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1 + (seed as usize) % sizes.n_max;
        let p = rng.random_range(1..=sizes.p_max);
        let d = rng.random_range(1..=sizes.d_max);
        let dc = rng.random_range(1..=sizes.d_max);
        Instance {
            q: random(&mut rng, p, d),
            k: random(&mut rng, n, d),
            v: random(&mut rng, n, d),
            c: random(&mut rng, n, dc),
            w_k: random(&mut rng, dc, d),
            w_v: random(&mut rng, dc, d),
            alpha: [0.0, 0.5][(seed % 2) as usize],
            beta: [0.25, 1.0][((seed / 2) % 2) as usize],
        }
    }
}

fn sign(fault: Fault) -> f64 {
    match fault {
        Fault::None => 1.0,
        Fault::SignFlip => -1.0,
    }
}

/// Log-posterior gradient in `K` against differences of `-(E(Q;K) + E(K))`.
pub fn posterior_gradient(seeds: impl IntoIterator<Item = u64>, sizes: Sizes, tol: f64, fault: Fault) -> CheckResult {
    fold(
        "log_posterior_grad",
        tol,
        seeds.into_iter().map(|seed| {
            let x = Instance::new(seed, sizes);
            let g = grad_log_posterior(&x.q, &x.k, x.alpha, x.beta).expect("valid instance").scale(sign(fault));
            let fd = fd_matrix(&x.k, |k| -(cond_energy(&x.q, k, x.alpha, x.beta).unwrap() + prior_energy(k)));
            (seed, relative_error(g.as_slice(), &fd))
        }),
    )
}

/// Uniform-rate context update with `alpha = 0` against differences of the
/// log posterior taken directly in `C`.
pub fn chain_rule(seeds: impl IntoIterator<Item = u64>, sizes: Sizes, tol: f64, fault: Fault) -> CheckResult {
    let gamma = 1e-3;
    fold(
        "context_chain_rule",
        tol,
        seeds.into_iter().map(|seed| {
            let x = Instance::new(seed, sizes);
            let cfg = UpdateConfig { beta: x.beta, ..UpdateConfig::new(x.q.cols()) }.with_gammas(gamma, gamma);
            let updated = context_update(&x.c, &x.q, &x.w_k, &cfg, 0).expect("valid instance");
            let step = updated.sub(&x.c).unwrap().scale(sign(fault) / gamma);
            let fd = fd_matrix(&x.c, |c| {
                let k = c.matmul(&x.w_k).unwrap();
                -(cond_energy(&x.q, &k, 0.0, x.beta).unwrap() + prior_energy(&k))
            });
            (seed, relative_error(step.as_slice(), &fd))
        }),
    )
}

pub fn hopfield_gradient(seeds: impl IntoIterator<Item = u64>, sizes: Sizes, tol: f64, fault: Fault) -> CheckResult {
    fold(
        "hopfield_energy_grad",
        tol,
        seeds.into_iter().map(|seed| {
            let x = Instance::new(seed, sizes);
            let store = PatternStore::new(x.k.transpose(), x.beta).unwrap();
            let zeta = x.q.row(0);
            let g: Vec<f64> = hopfield_energy_grad(zeta, &store).unwrap().iter().map(|v| v * sign(fault)).collect();
            let fd = fd_vec(zeta, |z| hopfield_energy(z, &store).unwrap());
            (seed, relative_error(&g, &fd))
        }),
    )
}

pub fn lse_gradient(seeds: impl IntoIterator<Item = u64>, sizes: Sizes, tol: f64) -> CheckResult {
    fold(
        "lse_grad_is_softmax",
        tol,
        seeds.into_iter().map(|seed| {
            let x = Instance::new(seed, sizes);
            let v: Vec<f64> = x.q.row(0).iter().map(|a| a * 3.0).collect();
            let scaled: Vec<f64> = v.iter().map(|a| a * x.beta).collect();
            let g = softmax(&scaled).unwrap();
            let fd = fd_vec(&v, |w| lse(w, x.beta).unwrap());
            (seed, relative_error(&g, &fd))
        }),
    )
}

fn explicit_attention(q: &Matrix, k: &Matrix, v: &Matrix, beta: f64) -> Matrix {
    let mut rows = Vec::new();
    for i in 0..q.rows() {
        let s: Vec<f64> =
            (0..k.rows()).map(|n| beta * q.row(i).iter().zip(k.row(n)).map(|(a, b)| a * b).sum::<f64>()).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = w.iter().sum();
        rows.push(
            (0..v.cols()).map(|j| (0..k.rows()).map(|n| w[n] / z * v.get(n, j)).sum::<f64>()).collect::<Vec<_>>(),
        );
    }
    Matrix::from_rows(&rows).unwrap()
}

/// Exact identities; each check reports the largest absolute deviation.
pub fn identities(seeds: impl IntoIterator<Item = u64> + Clone, sizes: Sizes, tol: f64) -> Vec<CheckResult> {
    let per = |name: &'static str, f: &dyn Fn(&Instance) -> f64| {
        fold(name, tol, seeds.clone().into_iter().map(|seed| (seed, f(&Instance::new(seed, sizes)))))
    };
    vec![
        per("gd_step_eta1_is_update", &|x| {
            let store = PatternStore::new(x.k.transpose(), x.beta).unwrap();
            let z = x.q.row(0);
            let a = hopfield_gd_step(z, &store, 1.0).unwrap();
            let b = hopfield_update(z, &store).unwrap();
            a.iter().zip(&b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        }),
        per("attention_matches_oracle", &|x| {
            attention_forward(&x.q, &x.k, &x.v, x.beta)
                .unwrap()
                .max_abs_diff(&explicit_attention(&x.q, &x.k, &x.v, x.beta))
        }),
        per("single_context_composition", &|x| {
            let q = &x.q;
            let composed = ebcq_forward(q, &ContextSet::single(x.c.clone()), &x.w_k, &x.w_v, x.beta).unwrap();
            let plain =
                attention_forward(q, &x.c.matmul(&x.w_k).unwrap(), &x.c.matmul(&x.w_v).unwrap(), x.beta).unwrap();
            composed.max_abs_diff(&plain)
        }),
        per("zero_rate_update_is_noop", &|x| {
            let cfg = UpdateConfig { beta: x.beta, ..UpdateConfig::new(x.q.cols()) };
            let out = context_update(&x.c, &x.q, &x.w_k, &cfg, 0).unwrap();
            if out == x.c {
                0.0
            } else {
                f64::INFINITY
            }
        }),
        per("all_ones_mask_is_unmasked", &|x| {
            let cfg =
                UpdateConfig { beta: x.beta, alpha: x.alpha, ..UpdateConfig::new(x.q.cols()) }.with_gammas(0.02, 0.01);
            let masked = UpdateConfig { mask: Some(vec![1.0; x.q.rows()]), ..cfg.clone() };
            let a = context_update(&x.c, &x.q, &x.w_k, &cfg, 0).unwrap();
            let b = context_update(&x.c, &x.q, &x.w_k, &masked, 0).unwrap();
            a.max_abs_diff(&b)
        }),
        per("negated_duplicate_is_zero", &|x| {
            let set =
                ContextSet::new(vec![x.c.clone(), x.c.clone()], vec![1.0, -1.0], vec!["main".into(), "neg".into()])
                    .unwrap();
            ebcq_forward(&x.q, &set, &x.w_k, &x.w_v, x.beta).unwrap().max_abs()
        }),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentReport {
    pub instances: usize,
    /// Largest single-step energy increase seen (negative if every step decreased).
    pub max_increase: f64,
    pub converged: usize,
    pub max_iterations: usize,
    pub worst_seed: u64,
}

/// Runs the Hopfield fixed-point iteration on random instances.
pub fn hopfield_descent(seeds: impl IntoIterator<Item = u64>, tol: f64, max_iter: usize) -> DescentReport {
    let mut r =
        DescentReport { instances: 0, max_increase: f64::NEG_INFINITY, converged: 0, max_iterations: 0, worst_seed: 0 };
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..=16);
        let n = rng.random_range(1..=16);
        let beta = rng.random_range(0.25..4.0);
        let store = PatternStore::new(random(&mut rng, d, n), beta).unwrap();
        let zeta: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let run = iterate(&zeta, &store, tol, max_iter).unwrap();
        let inc = run.energies.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        if inc > r.max_increase {
            r.max_increase = inc;
            r.worst_seed = seed;
        }
        r.instances += 1;
        r.converged += run.converged as usize;
        r.max_iterations = r.max_iterations.max(run.iterations);
    }
    r
}
