//! Paired baseline / context-update runs over many seeds.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{concept_scores, template_correlation, Prompt, Region, TOKENS};
use super::model::ToyDenoiser;
use super::sampling::{inpaint, sample, SampleOutput};
use super::schedule::NoiseSchedule;
use crate::ebcu::UpdateConfig;
use crate::error::{Error, Result};
use crate::numerics::{fmt_f64, Matrix};
use crate::xattn::{CascadeConfig, EnergyTrace, Variant};

/// Default attention-term step size for the toy model.
pub const DEFAULT_GAMMA_ATTN: f64 = 2.5e-2;
/// Default regularization-term step size for the toy model.
pub const DEFAULT_GAMMA_REG: f64 = 2e-2;

/// Constant-rate update config for every context.
pub fn ebcu_config(d_head: usize, gamma_attn: f64, gamma_reg: f64) -> CascadeConfig {
    CascadeConfig::uniform(UpdateConfig::new(d_head).with_gammas(gamma_attn, gamma_reg), Variant::Ebcu)
}

/// Runs `f` for every seed (in parallel) and returns the results in seed order.
pub fn per_seed<T, F>(seeds: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    seeds.par_iter().map(|&s| f(s)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub t: usize,
    pub layer: usize,
    pub mean_baseline: f64,
    pub std_baseline: f64,
    pub mean_ebcu: f64,
    pub std_ebcu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyGap {
    pub cells: Vec<CellStats>,
    /// Per reverse step: running sum over steps of the layer-summed mean
    /// posterior-energy difference `(E(Q;K)+E(K))_baseline - (...)_ebcu`.
    pub cumulative: Vec<f64>,
    pub seeds: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

impl EnergyGap {
    pub const CELLS_HEADER: &'static str = "t,layer,mean_baseline,std_baseline,mean_ebcu,std_ebcu";
    pub const CUMULATIVE_HEADER: &'static str = "t,cumulative_posterior_diff";

    /// Aggregates paired traces (one baseline and one update trace per seed).
    pub fn from_traces(baseline: &[EnergyTrace], ebcu: &[EnergyTrace]) -> Result<Self> {
        if baseline.len() != ebcu.len() || baseline.is_empty() {
            return Err(Error::shape(
                "EnergyGap",
                format!("{} baseline vs {} update traces", baseline.len(), ebcu.len()),
            ));
        }
        type Cell = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
        let mut cells: BTreeMap<(usize, usize), Cell> = BTreeMap::new();
        for (b, e) in baseline.iter().zip(ebcu) {
            if b.records.len() != e.records.len() {
                return Err(Error::shape("EnergyGap", "paired traces differ in length"));
            }
            for (rb, re) in b.records.iter().zip(&e.records) {
                if (rb.t, rb.layer) != (re.t, re.layer) {
                    return Err(Error::shape("EnergyGap", "paired traces are not aligned"));
                }
                let c = cells.entry((rb.t, rb.layer)).or_default();
                c.0.push(rb.e_cond);
                c.1.push(re.e_cond);
                c.2.push(rb.e_cond + rb.e_prior);
                c.3.push(re.e_cond + re.e_prior);
            }
        }
        let mut stats = Vec::with_capacity(cells.len());
        let mut per_step: BTreeMap<usize, f64> = BTreeMap::new();
        for (&(t, layer), (b, e, pb, pe)) in &cells {
            let (mean_baseline, std_baseline) = mean_std(b);
            let (mean_ebcu, std_ebcu) = mean_std(e);
            stats.push(CellStats { t, layer, mean_baseline, std_baseline, mean_ebcu, std_ebcu });
            *per_step.entry(t).or_default() += mean_std(pb).0 - mean_std(pe).0;
        }
        let cumulative = per_step
            .values()
            .scan(0.0, |acc, d| {
                *acc += d;
                Some(*acc)
            })
            .collect();
        Ok(EnergyGap { cells: stats, cumulative, seeds: baseline.len() })
    }

    /// Fraction of cells whose mean update energy is strictly below the baseline's.
    pub fn fraction_lower(&self) -> f64 {
        let lower = self.cells.iter().filter(|c| c.mean_ebcu < c.mean_baseline).count();
        lower as f64 / self.cells.len() as f64
    }

    /// Fraction of cells where the two means are equal.
    pub fn fraction_tied(&self) -> f64 {
        self.cells.iter().filter(|c| c.mean_ebcu == c.mean_baseline).count() as f64 / self.cells.len() as f64
    }

    pub fn cumulative_nonnegative(&self) -> bool {
        self.cumulative.iter().all(|&c| c >= 0.0)
    }

    pub fn cells_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CELLS_HEADER);
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.t,
                c.layer,
                fmt_f64(c.mean_baseline),
                fmt_f64(c.std_baseline),
                fmt_f64(c.mean_ebcu),
                fmt_f64(c.std_ebcu)
            ));
        }
        s
    }

    pub fn cumulative_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CUMULATIVE_HEADER);
        for (t, c) in self.cumulative.iter().enumerate() {
            s.push_str(&format!("{t},{}\n", fmt_f64(*c)));
        }
        s
    }
}

/// Paired runs of both variants for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedRun {
    pub seed: u64,
    pub baseline: SampleOutput,
    pub ebcu: SampleOutput,
}

pub fn paired_samples(
    model: &ToyDenoiser,
    prompt: &Prompt,
    schedule: &NoiseSchedule,
    ebcu: &CascadeConfig,
    seeds: &[u64],
) -> Result<Vec<PairedRun>> {
    let base = CascadeConfig::baseline(model.d_model());
    let set = model.context_set(prompt);
    per_seed(seeds, |seed| {
        Ok(PairedRun {
            seed,
            baseline: sample(model, &set, schedule, &base, seed)?,
            ebcu: sample(model, &set, schedule, ebcu, seed)?,
        })
    })
}

pub fn energy_gap(runs: &[PairedRun]) -> Result<EnergyGap> {
    let b: Vec<EnergyTrace> = runs.iter().map(|r| r.baseline.trace.clone()).collect();
    let e: Vec<EnergyTrace> = runs.iter().map(|r| r.ebcu.trace.clone()).collect();
    EnergyGap::from_traces(&b, &e)
}

/// Smallest per-concept template correlation of a generated grid.
pub fn min_concept_score(grid: &Matrix, prompt: &Prompt) -> f64 {
    concept_scores(grid, prompt).into_iter().fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeglectRow {
    pub seed: u64,
    pub min_baseline: f64,
    pub min_ebcu: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeglectReport {
    pub rows: Vec<NeglectRow>,
}

impl NeglectReport {
    pub const CSV_HEADER: &'static str = "seed,min_corr_baseline,min_corr_ebcu";

    pub fn from_runs(runs: &[PairedRun], prompt: &Prompt) -> Self {
        let rows = runs
            .iter()
            .map(|r| NeglectRow {
                seed: r.seed,
                min_baseline: min_concept_score(&r.baseline.grid, prompt),
                min_ebcu: min_concept_score(&r.ebcu.grid, prompt),
            })
            .collect();
        NeglectReport { rows }
    }

    pub fn wins(&self) -> usize {
        self.rows.iter().filter(|r| r.min_ebcu > r.min_baseline).count()
    }

    pub fn strict_majority(&self) -> bool {
        2 * self.wins() > self.rows.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.seed, fmt_f64(r.min_baseline), fmt_f64(r.min_ebcu)));
        }
        s
    }
}

/// Bottom-half mask: the top half is kept, the bottom half generated.
pub fn bottom_half_mask() -> Vec<f64> {
    (0..TOKENS).map(|i| if Region::Bottom.tokens().contains(&i) { 1.0 } else { 0.0 }).collect()
}

/// Per seed: template correlation of the generated region with `concept`,
/// for the baseline and the masked update.
#[allow(clippy::too_many_arguments)]
pub fn inpaint_comparison(
    model: &ToyDenoiser,
    known: &Matrix,
    mask: &[f64],
    prompt: &Prompt,
    concept: usize,
    region: Region,
    schedule: &NoiseSchedule,
    ebcu: &CascadeConfig,
    seeds: &[u64],
) -> Result<Vec<NeglectRow>> {
    let base = CascadeConfig::baseline(model.d_model());
    let set = model.context_set(prompt);
    per_seed(seeds, |seed| {
        let b = inpaint(model, known, mask, &set, schedule, &base, seed)?;
        let e = inpaint(model, known, mask, &set, schedule, ebcu, seed)?;
        Ok(NeglectRow {
            seed,
            min_baseline: template_correlation(&b.grid, concept, region),
            min_ebcu: template_correlation(&e.grid, concept, region),
        })
    })
}
