//! End-to-end acceptance suite. Prints one line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use energy_attention::diffusion::experiments::{ebcu_config, energy_gap, paired_samples, NeglectReport};
use energy_attention::diffusion::experiments::{DEFAULT_GAMMA_ATTN, DEFAULT_GAMMA_REG};
use energy_attention::diffusion::{NoiseSchedule, Prompt, ToyDenoiser};
use energy_attention_cli::checks::{self, CheckResult, Fault, Sizes};

struct Outcome {
    pass: bool,
    detail: String,
}

fn time_limited(pass: bool, elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    let within = elapsed < limit;
    Outcome {
        pass: pass && within,
        detail: format!("{detail}; {:.1}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()),
    }
}

fn check_line(r: &CheckResult) -> String {
    format!(
        "{} {} instances, max {:.2e} (tol {:.0e}, worst seed {})",
        r.name, r.instances, r.max_error, r.tolerance, r.worst_seed
    )
}

fn gradient() -> Outcome {
    let start = Instant::now();
    let r = checks::posterior_gradient(0..100, Sizes { n_max: 8, p_max: 16, d_max: 8 }, 1e-6, Fault::None);
    time_limited(r.passed() && r.instances == 100, start.elapsed(), Duration::from_secs(10), check_line(&r))
}

fn chain_rule() -> Outcome {
    let r = checks::chain_rule(0..50, Sizes::default(), 1e-6, Fault::None);
    Outcome { pass: r.passed() && r.instances == 50, detail: check_line(&r) }
}

fn descent() -> Outcome {
    let start = Instant::now();
    let r = checks::hopfield_descent(0..1000, 1e-8, 10_000);
    let pass = r.instances == 1000 && r.max_increase <= 1e-12 && r.converged == r.instances;
    time_limited(
        pass,
        start.elapsed(),
        Duration::from_secs(30),
        format!(
            "{} instances, {} converged (max {} iterations), largest energy increase {:.2e}",
            r.instances, r.converged, r.max_iterations, r.max_increase
        ),
    )
}

fn identities() -> Outcome {
    let rs = checks::identities(0..100, Sizes::default(), 1e-12);
    let failing: Vec<String> = rs.iter().filter(|r| !r.passed()).map(check_line).collect();
    let worst = rs.iter().map(|r| r.max_error).fold(0.0, f64::max);
    Outcome {
        pass: failing.is_empty(),
        detail: if failing.is_empty() {
            format!("{} identities x 100 instances, max deviation {worst:.2e}", rs.len())
        } else {
            failing.join("; ")
        },
    }
}

fn run_cli(args: &[&str]) -> i32 {
    let mut argv = vec!["ebca"];
    argv.extend_from_slice(args);
    energy_attention_cli::run(argv)
}

fn train_model(dir: &Path) -> (Outcome, Option<ToyDenoiser>) {
    let out = dir.join("train");
    let start = Instant::now();
    let code = run_cli(&["train", "--out", out.to_str().unwrap()]);
    let elapsed = start.elapsed();
    if code != 0 {
        return (Outcome { pass: false, detail: format!("train exited with {code}") }, None);
    }
    let model: ToyDenoiser = serde_json::from_str(&fs::read_to_string(out.join("checkpoint.json")).unwrap()).unwrap();
    (time_limited(true, elapsed, Duration::from_secs(300), format!("{} steps", model.trained_steps)), Some(model))
}

fn energy_and_neglect(model: &ToyDenoiser, train: Outcome) -> (Outcome, Outcome) {
    let prompt: Prompt = "0+1".parse().unwrap();
    let sched = NoiseSchedule::default();
    let cfg = ebcu_config(model.d_model(), DEFAULT_GAMMA_ATTN, DEFAULT_GAMMA_REG);
    let seeds: Vec<u64> = (0..30).collect();
    let runs = paired_samples(model, &prompt, &sched, &cfg, &seeds).unwrap();

    let gap = energy_gap(&runs).unwrap();
    let frac = gap.fraction_lower();
    let energy = Outcome {
        pass: train.pass && frac >= 0.9 && gap.cumulative_nonnegative(),
        detail: format!(
            "training {}; {} seeds: ebcu lower in {:.3} of {} cells, cumulative difference nonnegative: {} (min {:.3e})",
            train.detail,
            gap.seeds,
            frac,
            gap.cells.len(),
            gap.cumulative_nonnegative(),
            gap.cumulative.iter().copied().fold(f64::INFINITY, f64::min)
        ),
    };

    let neglect = NeglectReport::from_runs(&runs[..20], &prompt);
    let neglect = Outcome {
        pass: neglect.strict_majority(),
        detail: format!("ebcu minimum concept correlation higher in {}/{} seeds", neglect.wins(), neglect.rows.len()),
    };
    (energy, neglect)
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn determinism(dir: &Path) -> Outcome {
    let ckpt = dir.join("train/checkpoint.json");
    let ckpt = ckpt.to_str().unwrap();
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("gradcheck", vec!["--seeds", "20"]),
        ("train", vec!["--steps", "200"]),
        ("energy-trace", vec!["--checkpoint", ckpt, "--seeds", "4"]),
        ("sample", vec!["--checkpoint", ckpt, "--seed", "7"]),
        ("compose", vec!["--checkpoint", ckpt, "--set", "contexts=2;3", "--alpha-s", "1,0.5,-0.5"]),
        ("inpaint", vec!["--checkpoint", ckpt, "--seed", "3"]),
        ("hopfield-demo", vec![]),
    ];
    let mut problems = Vec::new();
    let mut files = 0;
    for (cmd, extra) in &runs {
        let first = dir.join(format!("det/{cmd}/a"));
        let second = dir.join(format!("det/{cmd}/b"));
        let mut args = vec![*cmd, "--out", first.to_str().unwrap()];
        args.extend(extra);
        let code = run_cli(&args);
        let manifest = first.join("manifest.txt");
        let again = run_cli(&[cmd, "--config", manifest.to_str().unwrap(), "--out", second.to_str().unwrap()]);
        if code != 0 || again != 0 {
            problems.push(format!("{cmd} exited {code}/{again}"));
            continue;
        }
        let (a, b) = (csv_files(&first), csv_files(&second));
        if a.is_empty() || a != b {
            problems.push(format!("{cmd} outputs differ"));
        }
        files += a.len();
    }
    Outcome {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("{} subcommands, {files} files byte-identical after manifest re-run", runs.len())
        } else {
            problems.join("; ")
        },
    }
}

fn line(lines: &mut Vec<String>, n: usize, name: &str, o: &Outcome, t: Duration) -> bool {
    let l = format!(
        "criterion {n} {:<22} {} [{:.2}s] {}",
        name,
        if o.pass { "PASS" } else { "FAIL" },
        t.as_secs_f64(),
        o.detail
    );
    println!("{l}");
    lines.push(l);
    o.pass
}

fn report(lines: &mut Vec<String>, n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    line(lines, n, name, &o, start.elapsed())
}

fn main() {
    // `cargo test -- <filter>` passes extra args; the suite always runs whole.
    let dir = tempfile::tempdir().expect("temp dir");
    let mut ok = true;
    let mut lines = Vec::new();
    ok &= report(&mut lines, 1, "gradient", gradient);
    ok &= report(&mut lines, 2, "chain-rule", chain_rule);
    ok &= report(&mut lines, 3, "hopfield-descent", descent);
    ok &= report(&mut lines, 4, "identities", identities);

    let start = Instant::now();
    let (train, model) = train_model(dir.path());
    let train_time = start.elapsed();
    match model {
        Some(model) => {
            let start = Instant::now();
            let (energy, neglect) = energy_and_neglect(&model, train);
            let sampling = start.elapsed();
            for (n, name, o) in [(5, "energy-gap", energy), (6, "neglect", neglect)] {
                let t = if n == 5 { train_time + sampling } else { sampling };
                ok &= line(&mut lines, n, name, &o, t);
            }
        }
        None => {
            let none = Outcome { pass: false, detail: "no trained model".into() };
            line(&mut lines, 5, "energy-gap", &train, train_time);
            line(&mut lines, 6, "neglect", &none, Duration::ZERO);
            ok = false;
        }
    }
    ok &= report(&mut lines, 7, "manifest-determinism", || determinism(dir.path()));

    println!("\n---- acceptance summary ----");
    for l in &lines {
        println!("{l}");
    }
    println!("acceptance: {}", if ok { "all criteria passed" } else { "FAILED" });
    if !ok {
        std::process::exit(1);
    }
}
