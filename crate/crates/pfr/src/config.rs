//! INI-style run configuration.
//!
//! ```ini
//! [trainer]
//! iterations = 3000
//! [losses]
//! lambda_adv = 0.002
//! [models]
//! stage_channels = 16, 32, 64, 64
//! ```
//!
//! `#` and `;` start comments. Unknown sections and keys are errors; missing
//! keys take their defaults and are reported back to the caller.

use std::collections::BTreeMap;
use std::str::FromStr;

use pfr_core::losses::{AlignOptions, Distance, LossWeights, Pairing};
use pfr_core::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{}{detail}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    pub detail: String,
}

impl ConfigError {
    fn at(line: usize, detail: impl Into<String>) -> Self {
        ConfigError {
            line: Some(line),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed `key = value` pairs grouped by section. Keys are consumed as they
/// are read; [`Ini::finish`] rejects whatever is left.
#[derive(Debug, Clone)]
pub struct Ini {
    entries: BTreeMap<(String, String), Entry>,
}

impl Ini {
    pub fn parse(text: &str, sections: &[&str]) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::at(line, "unterminated section header"))?
                    .trim();
                if !sections.contains(&name) {
                    return Err(ConfigError::at(
                        line,
                        format!("unknown section [{name}] (expected one of {sections:?})"),
                    ));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::at(line, format!("expected `key = value`, found {content:?}")))?;
            let sec = section
                .clone()
                .ok_or_else(|| ConfigError::at(line, "key outside of any section"))?;
            let key = key.trim().to_string();
            if let Some(prev) = entries.insert(
                (sec.clone(), key.clone()),
                Entry {
                    value: value.trim().to_string(),
                    line,
                },
            ) {
                return Err(ConfigError::at(
                    line,
                    format!("duplicate key {sec}.{key} (first set on line {})", prev.line),
                ));
            }
        }
        Ok(Ini { entries })
    }

    fn take<T>(&mut self, section: &str, key: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, ConfigError> {
        match self.entries.remove(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some(e) => parse(&e.value)
                .map(Some)
                .map_err(|d| ConfigError::at(e.line, format!("{section}.{key}: {d}"))),
        }
    }

    pub fn get<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>, ConfigError> {
        self.take(section, key, |v| v.parse().map_err(|_| format!("cannot parse {v:?}")))
    }

    pub fn require<T: FromStr>(&mut self, section: &str, key: &str) -> Result<T, ConfigError> {
        self.get(section, key)?.ok_or_else(|| ConfigError {
            line: None,
            detail: format!("missing required key {section}.{key}"),
        })
    }

    /// Errors on the first key that was never read.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_iter().min_by_key(|(_, e)| e.line) {
            None => Ok(()),
            Some(((s, k), e)) => Err(ConfigError::at(e.line, format!("unknown key {s}.{k}"))),
        }
    }
}

/// Everything `train` reads from its configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub stage_channels: [usize; 4],
    pub disc_channels: [usize; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            stage_channels: pfr_core::models::SegNetConfig::default().stage_channels,
            disc_channels: pfr_core::models::DiscriminatorConfig::default().hidden_channels,
        }
    }
}

pub const SECTIONS: [&str; 3] = ["trainer", "losses", "models"];

fn list<const N: usize>(v: &str) -> Result<[usize; N], String> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad integer {p:?}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<usize>| format!("expected {N} comma-separated values, found {}", p.len()))
}

fn distance(v: &str) -> Result<Distance, String> {
    match v {
        "mean_squared" => Ok(Distance::MeanSquared),
        "frobenius" => Ok(Distance::Frobenius),
        _ => Err(format!("unknown distance {v:?} (mean_squared or frobenius)")),
    }
}

fn pairing(v: &str) -> Result<Pairing, String> {
    match v {
        "per_sample" => Ok(Pairing::PerSample),
        "batch_mean" => Ok(Pairing::BatchMean),
        _ => Err(format!("unknown pairing {v:?} (per_sample or batch_mean)")),
    }
}

fn poly(v: &str) -> Result<Option<f64>, String> {
    if v == "none" {
        return Ok(None);
    }
    v.parse().map(Some).map_err(|_| format!("expected a power or `none`, found {v:?}"))
}

impl RunConfig {
    /// Parses a configuration; the second element lists `section.key` names
    /// that were absent and took their defaults.
    pub fn parse(text: &str) -> Result<(RunConfig, Vec<String>), ConfigError> {
        let mut ini = Ini::parse(text, &SECTIONS)?;
        let mut cfg = RunConfig::default();
        let mut defaulted = Vec::new();
        macro_rules! field {
            ($sec:literal, $key:literal, $target:expr) => {
                match ini.get($sec, $key)? {
                    Some(v) => $target = v,
                    None => defaulted.push(concat!($sec, ".", $key).to_string()),
                }
            };
            ($sec:literal, $key:literal, $target:expr, $parse:expr) => {
                match ini.take($sec, $key, $parse)? {
                    Some(v) => $target = v,
                    None => defaulted.push(concat!($sec, ".", $key).to_string()),
                }
            };
        }
        let t = &mut cfg.train;
        field!("trainer", "iterations", t.iterations);
        field!("trainer", "batch_size", t.batch_size);
        field!("trainer", "lr_seg", t.lr_seg);
        field!("trainer", "momentum", t.momentum);
        field!("trainer", "lr_disc", t.lr_disc);
        field!("trainer", "beta1", t.beta1);
        field!("trainer", "beta2", t.beta2);
        field!("trainer", "adam_eps", t.adam_eps);
        field!("trainer", "seed", t.seed);
        field!("trainer", "eval_every", t.eval_every);
        field!("trainer", "paired_debug", t.paired_debug);
        field!("trainer", "poly_decay", t.poly_decay, poly);
        field!("losses", "lambda_adv", t.weights.lambda_adv);
        field!("losses", "lambda_pfr", t.weights.lambda_pfr);
        field!("losses", "distance", t.align.distance, distance);
        field!("losses", "pairing", t.align.pairing, pairing);
        field!("models", "stage_channels", cfg.stage_channels, list::<4>);
        field!("models", "disc_channels", cfg.disc_channels, list::<3>);
        ini.finish()?;
        cfg.train.validate().map_err(|e| ConfigError {
            line: None,
            detail: e.to_string(),
        })?;
        Ok((cfg, defaulted))
    }

    /// The configuration with both loss weights zeroed.
    pub fn source_only(mut self) -> Self {
        self.train.weights = LossWeights::SOURCE_ONLY;
        self
    }

    /// Serializes every key, so `parse(to_ini())` reproduces `self`.
    pub fn to_ini(&self) -> String {
        let t = &self.train;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        let AlignOptions { distance, pairing } = t.align;
        format!(
            "[trainer]\niterations = {}\nbatch_size = {}\nlr_seg = {:?}\nmomentum = {:?}\nlr_disc = {:?}\n\
             beta1 = {:?}\nbeta2 = {:?}\nadam_eps = {:?}\nseed = {}\neval_every = {}\npaired_debug = {}\n\
             poly_decay = {}\n\n[losses]\nlambda_adv = {:?}\nlambda_pfr = {:?}\ndistance = {}\npairing = {}\n\n\
             [models]\nstage_channels = {}\ndisc_channels = {}\n",
            t.iterations,
            t.batch_size,
            t.lr_seg,
            t.momentum,
            t.lr_disc,
            t.beta1,
            t.beta2,
            t.adam_eps,
            t.seed,
            t.eval_every,
            t.paired_debug,
            t.poly_decay.map_or("none".to_string(), |p| format!("{p:?}")),
            t.weights.lambda_adv,
            t.weights.lambda_pfr,
            match distance {
                Distance::MeanSquared => "mean_squared",
                Distance::Frobenius => "frobenius",
            },
            match pairing {
                Pairing::PerSample => "per_sample",
                Pairing::BatchMean => "batch_mean",
            },
            join(&self.stage_channels),
            join(&self.disc_channels),
        )
    }
}
