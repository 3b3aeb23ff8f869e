//! Flat `key = value` run configuration.
//!
//! Every subcommand declares the keys it accepts. Values come from the
//! defaults, then an optional config file, then command-line overrides.
//! Unknown keys and out-of-range values are rejected before anything runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use energy_attention::diffusion::Prompt;

/// Invalid configuration; maps to exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy)]
pub enum Kind {
    Int { min: u64, max: u64 },
    Float { min: f64, max: f64 },
    FloatList,
    Choice(&'static [&'static str]),
    Prompt,
    PromptList,
    Text,
}

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    /// `None` marks a required key.
    pub default: Option<&'static str>,
    pub kind: Kind,
}

const fn key(name: &'static str, default: &'static str, kind: Kind) -> Key {
    Key { name, default: Some(default), kind }
}

const fn required(name: &'static str, kind: Kind) -> Key {
    Key { name, default: None, kind }
}

const UNIT: Kind = Kind::Float { min: 0.0, max: 1.0 };
const NONNEG: Kind = Kind::Float { min: 0.0, max: f64::MAX };
const SEED: Kind = Kind::Int { min: 0, max: u64::MAX };

const SCHEDULE_KEYS: [Key; 6] = [
    key("gamma_attn", "0.025", NONNEG),
    key("gamma_reg", "0.02", NONNEG),
    key("alpha", "0", NONNEG),
    key("schedule", "constant", Kind::Choice(&["constant", "step", "exp"])),
    key("tau", "0", Kind::Int { min: 0, max: 10_000 }),
    key("lambda", "1", Kind::Float { min: f64::MIN_POSITIVE, max: 1.0 }),
];

const DIFFUSION_KEYS: [Key; 3] = [
    key("steps", "50", Kind::Int { min: 2, max: 10_000 }),
    key("beta_start", "0.0001", UNIT),
    key("beta_end", "0.2", UNIT),
];

pub fn schema(command: &str) -> Option<Vec<Key>> {
    let mut keys = vec![key("seed", "0", SEED)];
    match command {
        "gradcheck" => keys.extend([
            key("seeds", "100", Kind::Int { min: 1, max: 1_000_000 }),
            key("n_max", "8", Kind::Int { min: 1, max: 64 }),
            key("p_max", "16", Kind::Int { min: 1, max: 256 }),
            key("d_max", "8", Kind::Int { min: 1, max: 64 }),
            key("tol", "1e-6", Kind::Float { min: 0.0, max: 1.0 }),
            key("identity_tol", "1e-12", Kind::Float { min: 0.0, max: 1.0 }),
            key("inject_fault", "none", Kind::Choice(&["none", "sign_flip"])),
        ]),
        "train" => keys.extend([
            key("steps", "2000", Kind::Int { min: 0, max: 10_000_000 }),
            key("batch", "16", Kind::Int { min: 1, max: 4096 }),
            key("lr", "0.001", Kind::Float { min: f64::MIN_POSITIVE, max: 1.0 }),
            key("pair_prob", "0.05", UNIT),
            key("heldout", "64", Kind::Int { min: 1, max: 100_000 }),
            key("shuffle_labels", "false", Kind::Choice(&["false", "true"])),
            key("init_seed", "0", SEED),
            key("d_model", "32", Kind::Int { min: 1, max: 512 }),
            key("d_ff", "64", Kind::Int { min: 1, max: 2048 }),
            key("layers", "4", Kind::Int { min: 1, max: 64 }),
            key("tokens_per_concept", "2", Kind::Int { min: 1, max: 16 }),
            key("diffusion_steps", "50", Kind::Int { min: 2, max: 10_000 }),
            key("beta_start", "0.0001", UNIT),
            key("beta_end", "0.2", UNIT),
        ]),
        "energy-trace" => {
            keys.extend([
                required("checkpoint", Kind::Text),
                key("seeds", "30", Kind::Int { min: 1, max: 100_000 }),
                key("prompt", "0+1", Kind::Prompt),
            ]);
            keys.extend(SCHEDULE_KEYS);
            keys.extend(DIFFUSION_KEYS);
        }
        "sample" => {
            keys.extend([
                required("checkpoint", Kind::Text),
                key("prompt", "0+1", Kind::Prompt),
                key("variant", "both", Kind::Choice(&["baseline", "ebcu", "both"])),
            ]);
            keys.extend(SCHEDULE_KEYS);
            keys.extend(DIFFUSION_KEYS);
        }
        "compose" => {
            keys.extend([
                required("checkpoint", Kind::Text),
                key("prompt", "0+1", Kind::Prompt),
                key("contexts", "", Kind::PromptList),
                key("alpha_s", "1", Kind::FloatList),
                key("variant", "both", Kind::Choice(&["ebcq", "ebcu", "both"])),
            ]);
            keys.extend(SCHEDULE_KEYS);
            keys.extend(DIFFUSION_KEYS);
        }
        "inpaint" => {
            keys.extend([
                required("checkpoint", Kind::Text),
                key("prompt", "0+1", Kind::Prompt),
                key("known", "", Kind::Text),
                key("mask", "", Kind::Text),
                key("variant", "both", Kind::Choice(&["baseline", "ebcu", "both"])),
            ]);
            keys.extend(SCHEDULE_KEYS);
            keys.extend(DIFFUSION_KEYS);
        }
        "hopfield-demo" => keys.extend([
            key("dim", "16", Kind::Int { min: 1, max: 4096 }),
            key("patterns", "8", Kind::Int { min: 1, max: 4096 }),
            key("beta", "1", Kind::Float { min: f64::MIN_POSITIVE, max: 1e6 }),
            key("tol", "1e-10", Kind::Float { min: 0.0, max: 1.0 }),
            key("max_iter", "1000", Kind::Int { min: 1, max: 10_000_000 }),
        ]),
        _ => return None,
    }
    keys.push(key("out", "", Kind::Text));
    Some(keys)
}

fn validate(k: &Key, value: &str) -> Result<(), String> {
    match k.kind {
        Kind::Int { min, max } => {
            let v: u64 = value.parse().map_err(|_| format!("expected an integer, got `{value}`"))?;
            if v < min || v > max {
                return Err(format!("{v} is outside [{min}, {max}]"));
            }
        }
        Kind::Float { min, max } => {
            let v: f64 = value.parse().map_err(|_| format!("expected a number, got `{value}`"))?;
            if !v.is_finite() || v < min || v > max {
                return Err(format!("{v} is outside [{min}, {max}]"));
            }
        }
        Kind::FloatList => {
            for part in value.split(',') {
                let v: f64 =
                    part.trim().parse().map_err(|_| format!("expected comma-separated numbers, got `{value}`"))?;
                if !v.is_finite() {
                    return Err(format!("non-finite entry in `{value}`"));
                }
            }
        }
        Kind::Choice(options) => {
            if !options.contains(&value) {
                return Err(format!("expected one of {}, got `{value}`", options.join("|")));
            }
        }
        Kind::Prompt => {
            value.parse::<Prompt>().map_err(|e| e.to_string())?;
        }
        Kind::PromptList => {
            for part in value.split(';').filter(|p| !p.trim().is_empty()) {
                part.trim().parse::<Prompt>().map_err(|e| e.to_string())?;
            }
        }
        Kind::Text => {}
    }
    Ok(())
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| ConfigError(format!("{origin}:{}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults, then `file` pairs, then `overrides`; the last value wins.
    pub fn resolve(
        command: &str,
        file: &[(String, String)],
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let keys = schema(command).ok_or_else(|| ConfigError(format!("unknown command `{command}`")))?;
        let mut values = BTreeMap::new();
        for k in &keys {
            if let Some(d) = k.default {
                values.insert(k.name.to_string(), d.to_string());
            }
        }
        for (origin, pairs) in [("config file", file), ("command line", overrides)] {
            for (name, value) in pairs {
                if name == "command" {
                    if value != command {
                        return Err(ConfigError(format!("{origin}: config is for `{value}`, not `{command}`")));
                    }
                    continue;
                }
                let k = keys
                    .iter()
                    .find(|k| k.name == name)
                    .ok_or_else(|| ConfigError(format!("{origin}: unknown key `{name}` for `{command}`")))?;
                validate(k, value).map_err(|e| ConfigError(format!("{origin}: key `{name}`: {e}")))?;
                values.insert(name.clone(), value.clone());
            }
        }
        if let Some(k) = keys.iter().find(|k| !values.contains_key(k.name)) {
            return Err(ConfigError(format!("missing required key `{}`", k.name)));
        }
        if values["out"].is_empty() {
            values.insert("out".into(), format!("runs/{command}"));
        }
        Ok(RunConfig { command: command.to_string(), values })
    }

    pub fn str(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or_else(|| panic!("key `{name}` not in schema"))
    }

    pub fn u64(&self, name: &str) -> u64 {
        self.str(name).parse().expect("validated")
    }

    pub fn usize(&self, name: &str) -> usize {
        self.str(name).parse().expect("validated")
    }

    pub fn f64(&self, name: &str) -> f64 {
        self.str(name).parse().expect("validated")
    }

    pub fn bool(&self, name: &str) -> bool {
        self.str(name) == "true"
    }

    pub fn f64_list(&self, name: &str) -> Vec<f64> {
        self.str(name).split(',').map(|p| p.trim().parse().expect("validated")).collect()
    }

    pub fn prompt(&self, name: &str) -> Prompt {
        self.str(name).parse().expect("validated")
    }

    pub fn prompt_list(&self, name: &str) -> Vec<Prompt> {
        self.str(name)
            .split(';')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse().expect("validated"))
            .collect()
    }

    pub fn out_dir(&self) -> &Path {
        Path::new(self.str("out"))
    }

    /// The resolved configuration as a config file that reproduces this run.
    pub fn manifest(&self) -> String {
        let mut s = format!("# ebca {} manifest\ncommand = {}\n", self.command, self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}
