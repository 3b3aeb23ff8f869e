use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use energy_attention::diffusion::data::{concept_scores, render, Region, CHANNELS, GRID_SIDE, TOKENS};
use energy_attention::diffusion::experiments::{
    bottom_half_mask, energy_gap, paired_samples, EnergyGap, NeglectReport,
};
use energy_attention::diffusion::sampling::{inpaint, sample, SampleOutput};
use energy_attention::diffusion::schedule::gaussian;
use energy_attention::diffusion::train::{train, TrainConfig};
use energy_attention::diffusion::{DenoiserConfig, NoiseSchedule, Prompt, ToyDataset, ToyDenoiser};
use energy_attention::ebcq::ContextSet;
use energy_attention::ebcu::{ScheduleSpec, UpdateConfig};
use energy_attention::hopfield::{iterate, PatternStore};
use energy_attention::numerics::fmt_f64;
use energy_attention::xattn::{layer_forward, CascadeConfig, EnergyTrace, Variant};
use energy_attention::Matrix;

use crate::checks::{self, CheckResult, Fault, Sizes};
use crate::config::{ConfigError, RunConfig};
use crate::svg::{line_plot, Series};

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    CheckFailed,
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let out = cfg.out_dir();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(out, "manifest.txt", &cfg.manifest())?;
    match cfg.command.as_str() {
        "gradcheck" => gradcheck(cfg),
        "train" => cmd_train(cfg),
        "energy-trace" => energy_trace(cfg),
        "sample" => cmd_sample(cfg),
        "compose" => compose(cfg),
        "inpaint" => cmd_inpaint(cfg),
        "hopfield-demo" => hopfield_demo(cfg),
        other => bail!(ConfigError(format!("unknown command `{other}`"))),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let first = cfg.u64("seed");
    let seeds = first..first + cfg.u64("seeds");
    let sizes = Sizes { n_max: cfg.usize("n_max"), p_max: cfg.usize("p_max"), d_max: cfg.usize("d_max") };
    let tol = cfg.f64("tol");
    let fault = if cfg.str("inject_fault") == "sign_flip" { Fault::SignFlip } else { Fault::None };

    let mut results = vec![
        checks::posterior_gradient(seeds.clone(), sizes, tol, fault),
        checks::chain_rule(seeds.clone(), sizes, tol, fault),
        checks::hopfield_gradient(seeds.clone(), sizes, tol, fault),
        checks::lse_gradient(seeds.clone(), sizes, tol),
    ];
    results.extend(checks::identities(seeds.clone(), sizes, cfg.f64("identity_tol")));
    let descent = checks::hopfield_descent(seeds.clone(), 1e-8, 10_000);
    results.push(CheckResult {
        name: "hopfield_descent",
        instances: descent.instances,
        max_error: if descent.converged == descent.instances { descent.max_increase.max(0.0) } else { f64::INFINITY },
        tolerance: 1e-12,
        worst_seed: descent.worst_seed,
    });

    write(cfg.out_dir(), "checks.csv", &checks::results_csv(&results))?;
    for r in &results {
        println!(
            "{:<28} max_error {:.3e}  tol {:.0e}  {}",
            r.name,
            r.max_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&CheckResult> = results.iter().filter(|r| !r.passed()).collect();
    for r in &failed {
        eprintln!("check `{}` failed: error {:e} at seed {}", r.name, r.max_error, r.worst_seed);
    }
    Ok(if failed.is_empty() { Outcome::Ok } else { Outcome::CheckFailed })
}

fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let dcfg = DenoiserConfig {
        d_model: cfg.usize("d_model"),
        d_ff: cfg.usize("d_ff"),
        d_context: cfg.usize("d_model"),
        layers: cfg.usize("layers"),
        tokens_per_concept: cfg.usize("tokens_per_concept"),
    };
    let tcfg = TrainConfig {
        steps: cfg.usize("steps"),
        batch: cfg.usize("batch"),
        lr: cfg.f64("lr"),
        seed: cfg.u64("seed"),
        heldout: cfg.usize("heldout"),
        pair_prob: cfg.f64("pair_prob"),
        shuffle_labels: cfg.bool("shuffle_labels"),
    };
    let sched = NoiseSchedule::linear(cfg.usize("diffusion_steps"), cfg.f64("beta_start"), cfg.f64("beta_end"))
        .map_err(|e| ConfigError(e.to_string()))?;
    let model = ToyDenoiser::new(&dcfg, cfg.u64("init_seed"))?;
    let (model, report) = train(&ToyDataset::two_concept(), &model, &sched, &tcfg)?;

    let out = cfg.out_dir();
    write(out, "checkpoint.json", &serde_json::to_string(&model)?)?;
    let mut loss = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        loss.push_str(&format!("{},{}\n", i + 1, fmt_f64(*l)));
    }
    write(out, "loss.csv", &loss)?;
    write(
        out,
        "heldout.csv",
        &format!(
            "initial_heldout,final_heldout,ratio\n{},{},{}\n",
            fmt_f64(report.initial_heldout),
            fmt_f64(report.final_heldout),
            fmt_f64(report.loss_ratio())
        ),
    )?;
    println!(
        "trained {} steps ({} parameters): held-out loss {:.4} -> {:.4} (ratio {:.3})",
        tcfg.steps,
        model.param_count(),
        report.initial_heldout,
        report.final_heldout,
        report.loss_ratio()
    );
    Ok(Outcome::Ok)
}

fn load_model(cfg: &RunConfig) -> Result<ToyDenoiser> {
    let path = cfg.str("checkpoint");
    let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read checkpoint `{path}`: {e}")))?;
    let model: ToyDenoiser =
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("checkpoint `{path}` is not a model: {e}")))?;
    if !model.is_finite() {
        bail!(ConfigError(format!("checkpoint `{path}` has non-finite weights")));
    }
    Ok(model)
}

fn noise_schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    Ok(NoiseSchedule::linear(cfg.usize("steps"), cfg.f64("beta_start"), cfg.f64("beta_end"))
        .map_err(|e| ConfigError(e.to_string()))?)
}

fn update_config(cfg: &RunConfig, d_head: usize) -> Result<UpdateConfig> {
    let mut u = UpdateConfig::new(d_head).with_gammas(cfg.f64("gamma_attn"), cfg.f64("gamma_reg"));
    u.alpha = cfg.f64("alpha");
    u.schedule = ScheduleSpec {
        kind: cfg.str("schedule").parse()?,
        gamma0: 1.0,
        tau: cfg.usize("tau"),
        lambda: cfg.f64("lambda"),
    };
    u.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(u)
}

fn ebcu_cascade(cfg: &RunConfig, model: &ToyDenoiser) -> Result<CascadeConfig> {
    Ok(CascadeConfig::uniform(update_config(cfg, model.d_model())?, Variant::Ebcu))
}

fn grid_csv(grid: &Matrix) -> String {
    let mut s = String::from("token,row,col,c0,c1\n");
    for i in 0..TOKENS {
        s.push_str(&format!(
            "{i},{},{},{},{}\n",
            i / GRID_SIDE,
            i % GRID_SIDE,
            fmt_f64(grid.get(i, 0)),
            fmt_f64(grid.get(i, 1))
        ));
    }
    s
}

fn scores_rows(variant: &str, grid: &Matrix, prompt: &Prompt) -> String {
    let mut s = String::new();
    for ((c, region), score) in prompt.placements().zip(concept_scores(grid, prompt)) {
        s.push_str(&format!("{variant},{c},{},{}\n", region_name(region), fmt_f64(score)));
    }
    s
}

const SCORES_HEADER: &str = "variant,concept,region,correlation\n";

fn region_name(r: Region) -> &'static str {
    match r {
        Region::Full => "full",
        Region::Top => "top",
        Region::Bottom => "bottom",
    }
}

fn write_sample(out: &Path, variant: &str, s: &SampleOutput) -> Result<()> {
    for w in &s.warnings {
        eprintln!("warning ({variant}): {w}");
    }
    write(out, &format!("grid_{variant}.csv"), &grid_csv(&s.grid))?;
    write(out, &format!("trace_{variant}.csv"), &s.trace.to_csv())
}

fn variants(cfg: &RunConfig, on: &'static str, off: &'static str) -> Vec<&'static str> {
    match cfg.str("variant") {
        "both" => vec![off, on],
        v if v == on => vec![on],
        _ => vec![off],
    }
}

fn cmd_sample(cfg: &RunConfig) -> Result<Outcome> {
    let model = load_model(cfg)?;
    let sched = noise_schedule(cfg)?;
    let prompt = cfg.prompt("prompt");
    let set = model.context_set(&prompt);
    let out = cfg.out_dir();
    let mut scores = String::from(SCORES_HEADER);
    for v in variants(cfg, "ebcu", "baseline") {
        let cascade = if v == "ebcu" { ebcu_cascade(cfg, &model)? } else { CascadeConfig::baseline(model.d_model()) };
        let s = sample(&model, &set, &sched, &cascade, cfg.u64("seed"))?;
        write_sample(out, v, &s)?;
        scores.push_str(&scores_rows(v, &s.grid, &prompt));
        println!(
            "{v}: concept correlations {:?}",
            concept_scores(&s.grid, &prompt).iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>()
        );
    }
    write(out, "scores.csv", &scores)?;
    Ok(Outcome::Ok)
}

fn compose(cfg: &RunConfig) -> Result<Outcome> {
    let model = load_model(cfg)?;
    let sched = noise_schedule(cfg)?;
    let prompt = cfg.prompt("prompt");
    let mut prompts = vec![prompt.clone()];
    prompts.extend(cfg.prompt_list("contexts"));
    let mut alphas = cfg.f64_list("alpha_s");
    if alphas.len() == 1 {
        alphas = vec![alphas[0]; prompts.len()];
    }
    if alphas.len() != prompts.len() {
        bail!(ConfigError(format!("key `alpha_s`: {} weights for {} contexts", alphas.len(), prompts.len())));
    }
    let set = ContextSet::new(
        prompts.iter().map(|p| model.context(p)).collect(),
        alphas,
        prompts.iter().map(|p| p.to_string()).collect(),
    )
    .map_err(|e| ConfigError(e.to_string()))?;

    let seed = cfg.u64("seed");
    let out = cfg.out_dir();
    let mut scores = String::from(SCORES_HEADER);
    let mut probe = String::from("variant,layer0_max_abs_attention\n");
    for v in variants(cfg, "ebcu", "ebcq") {
        let cascade = if v == "ebcu" { ebcu_cascade(cfg, &model)? } else { CascadeConfig::baseline(model.d_model()) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_t = gaussian(TOKENS, CHANNELS, &mut rng);
        let h0 = model.embed(&x_t, sched.steps())?;
        let first = layer_forward(&h0, &set, &model.stack.blocks[0].attn, &cascade, 0)?;
        let m = first.attention.max_abs();
        println!("{v}: first-step layer-0 max |attention| = {m:.3e}");
        probe.push_str(&format!("{v},{}\n", fmt_f64(m)));

        let s = sample(&model, &set, &sched, &cascade, seed)?;
        write_sample(out, v, &s)?;
        scores.push_str(&scores_rows(v, &s.grid, &prompt));
    }
    write(out, "scores.csv", &scores)?;
    write(out, "attention.csv", &probe)?;
    Ok(Outcome::Ok)
}

fn read_mask(path: &str) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read mask `{path}`: {e}")))?;
    let mask = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "0" | "0.0" => Ok(0.0),
            "1" | "1.0" => Ok(1.0),
            other => Err(ConfigError(format!("mask `{path}`: entries must be 0 or 1, got `{other}`"))),
        })
        .collect::<Result<Vec<f64>, _>>()?;
    if mask.len() != TOKENS {
        bail!(ConfigError(format!("mask `{path}` has {} entries, expected {TOKENS}", mask.len())));
    }
    Ok(mask)
}

fn cmd_inpaint(cfg: &RunConfig) -> Result<Outcome> {
    let model = load_model(cfg)?;
    let sched = noise_schedule(cfg)?;
    let prompt = cfg.prompt("prompt");
    let known = match cfg.str("known") {
        "" => render(&prompt),
        path => {
            let text =
                fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read known grid `{path}`: {e}")))?;
            let m = Matrix::from_csv(&text).map_err(|e| ConfigError(format!("known grid `{path}`: {e}")))?;
            if m.shape() != (TOKENS, CHANNELS) {
                bail!(ConfigError(format!("known grid `{path}` must be {TOKENS}x{CHANNELS}, got {:?}", m.shape())));
            }
            m
        }
    };
    let mask = match cfg.str("mask") {
        "" => bottom_half_mask(),
        path => read_mask(path)?,
    };
    let set = model.context_set(&prompt);
    let out = cfg.out_dir();
    let mut scores = String::from(SCORES_HEADER);
    for v in variants(cfg, "ebcu", "baseline") {
        let cascade = if v == "ebcu" { ebcu_cascade(cfg, &model)? } else { CascadeConfig::baseline(model.d_model()) };
        let s = inpaint(&model, &known, &mask, &set, &sched, &cascade, cfg.u64("seed"))?;
        write_sample(out, v, &s)?;
        scores.push_str(&scores_rows(v, &s.grid, &prompt));
    }
    write(out, "scores.csv", &scores)?;
    Ok(Outcome::Ok)
}

fn seeded_trace_csv(runs: &[(u64, &EnergyTrace)]) -> String {
    let mut s = String::from("seed,t,layer,variant,e_cond,e_prior\n");
    for (seed, trace) in runs {
        for r in &trace.records {
            s.push_str(&format!(
                "{seed},{},{},{},{},{}\n",
                r.t,
                r.layer,
                r.variant,
                fmt_f64(r.e_cond),
                fmt_f64(r.e_prior)
            ));
        }
    }
    s
}

fn energy_plots(gap: &EnergyGap) -> (String, String) {
    let xs: Vec<f64> = (0..gap.cells.len()).map(|i| i as f64).collect();
    let pick = |f: fn(&energy_attention::diffusion::experiments::CellStats) -> f64| {
        gap.cells.iter().map(f).collect::<Vec<_>>()
    };
    let energy = line_plot(
        "E(Q;K) per (step, layer) cell, mean +/- std",
        "cell (step-major)",
        "E(Q;K)",
        &[
            Series::new("baseline", xs.clone(), pick(|c| c.mean_baseline)).with_band(pick(|c| c.std_baseline)),
            Series::new("ebcu", xs, pick(|c| c.mean_ebcu)).with_band(pick(|c| c.std_ebcu)),
        ],
    );
    let cumulative = line_plot(
        "cumulative posterior energy difference (baseline - ebcu)",
        "sampling step",
        "cumulative difference",
        &[Series::new("difference", (0..gap.cumulative.len()).map(|i| i as f64).collect(), gap.cumulative.clone())],
    );
    (energy, cumulative)
}

fn energy_trace(cfg: &RunConfig) -> Result<Outcome> {
    let model = load_model(cfg)?;
    let sched = noise_schedule(cfg)?;
    let prompt = cfg.prompt("prompt");
    let first = cfg.u64("seed");
    let seeds: Vec<u64> = (first..first + cfg.u64("seeds")).collect();
    let runs = paired_samples(&model, &prompt, &sched, &ebcu_cascade(cfg, &model)?, &seeds)?;
    let gap = energy_gap(&runs)?;

    let out = cfg.out_dir();
    let traces: Vec<(u64, &EnergyTrace)> =
        runs.iter().flat_map(|r| [(r.seed, &r.baseline.trace), (r.seed, &r.ebcu.trace)]).collect();
    write(out, "trace.csv", &seeded_trace_csv(&traces))?;
    write(out, "cells.csv", &gap.cells_csv())?;
    write(out, "cumulative.csv", &gap.cumulative_csv())?;
    write(out, "neglect.csv", &NeglectReport::from_runs(&runs, &prompt).to_csv())?;
    let (energy_svg, cumulative_svg) = energy_plots(&gap);
    write(out, "energy.svg", &energy_svg)?;
    write(out, "cumulative.svg", &cumulative_svg)?;
    println!(
        "{} seeds, {} cells: ebcu lower in {:.3}, tied in {:.3}; cumulative difference nonnegative: {}",
        gap.seeds,
        gap.cells.len(),
        gap.fraction_lower(),
        gap.fraction_tied(),
        gap.cumulative_nonnegative()
    );
    Ok(Outcome::Ok)
}

fn hopfield_demo(cfg: &RunConfig) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.u64("seed"));
    let (d, n) = (cfg.usize("dim"), cfg.usize("patterns"));
    let patterns = Matrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
    let store = PatternStore::new(patterns, cfg.f64("beta")).map_err(|e| ConfigError(e.to_string()))?;
    let zeta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = iterate(&zeta, &store, cfg.f64("tol"), cfg.usize("max_iter"))?;

    let mut csv = String::from("iteration,energy\n");
    for (i, e) in run.energies.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", fmt_f64(*e)));
    }
    let out = cfg.out_dir();
    write(out, "energy.csv", &csv)?;
    let xs = (0..run.energies.len()).map(|i| i as f64).collect();
    write(
        out,
        "energy.svg",
        &line_plot("Hopfield energy", "iteration", "energy", &[Series::new("energy", xs, run.energies.clone())]),
    )?;

    let worst = run.energies.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    println!(
        "{} iterations, converged: {}, final energy {:.6}, largest step increase {:.3e}",
        run.iterations,
        run.converged,
        run.energies.last().copied().unwrap_or(f64::NAN),
        worst.max(0.0)
    );
    if worst > 1e-12 {
        eprintln!("energy increased by {worst:e}");
        return Ok(Outcome::CheckFailed);
    }
    Ok(Outcome::Ok)
}
