//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Every key is optional and defaults to the values below. Unknown and
//! repeated keys are errors.
//!
//! | key                 | default    | meaning                              |
//! |---------------------|------------|--------------------------------------|
//! | in_channels         | 1          | 1 gray, 3 color                      |
//! | num_eams            | 4          | enhancement attention modules        |
//! | channels            | 64         | feature maps                         |
//! | reduction           | 16         | attention bottleneck ratio           |
//! | dilations           | 1,2,3,4    | merge-and-run dilations              |
//! | lambda              | 0.5        | soft-shrink threshold                |
//! | lsc, ssc, lc, fa    | true       | ablation switches                    |
//! | lr                  | 1e-4       | initial learning rate                |
//! | lr_halving_interval | 100000     | iterations between halvings          |
//! | batch               | 32         | patches per batch                    |
//! | patch               | 80         | patch side                           |
//! | sigma               | 25         | noise level, or `lo-hi` for blind    |
//! | max_iters           | 10000      | training length                      |
//! | seed                | 0          | master seed                          |
//! | adam_beta1          | 0.9        |                                      |
//! | adam_beta2          | 0.999      |                                      |
//! | adam_eps            | 1e-8       |                                      |
//! | checkpoint_every    | 1000       | checkpoint cadence in iterations     |

use std::collections::HashSet;
use std::fmt::Write;
use std::str::FromStr;

use crate::data::SigmaSpec;
use crate::error::{ConfigError, Error, Result};
use crate::model::NetworkConfig;
use crate::train::TrainConfig;

pub const KEYS: [&str; 21] = [
    "in_channels",
    "num_eams",
    "channels",
    "reduction",
    "dilations",
    "lambda",
    "lsc",
    "ssc",
    "lc",
    "fa",
    "lr",
    "lr_halving_interval",
    "batch",
    "patch",
    "sigma",
    "max_iters",
    "seed",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "checkpoint_every",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

fn parse_num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.into(),
        reason: format!("`{v}` is not a valid number"),
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            line,
            key: key.into(),
            reason: format!("`{v}` is not a boolean"),
        }),
    }
}

pub fn parse_sigma(v: &str) -> Option<SigmaSpec> {
    let spec = match v.split_once('-') {
        Some((lo, hi)) => SigmaSpec::Range(lo.trim().parse().ok()?, hi.trim().parse().ok()?),
        None => SigmaSpec::Fixed(v.parse().ok()?),
    };
    spec.validate().ok().map(|_| spec)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.into(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.into(),
                });
            }
            cfg.set(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<(), ConfigError> {
        let (n, t) = (&mut self.network, &mut self.train);
        match key {
            "in_channels" => n.in_channels = parse_num(line, key, v)?,
            "num_eams" => n.num_eams = parse_num(line, key, v)?,
            "channels" => n.channels = parse_num(line, key, v)?,
            "reduction" => n.reduction = parse_num(line, key, v)?,
            "dilations" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse_num(line, key, p.trim()))
                    .collect::<Result<_, _>>()?;
                n.dilations = parts.try_into().map_err(|_| ConfigError::BadValue {
                    line,
                    key: key.into(),
                    reason: "expected four comma-separated dilations".into(),
                })?;
            }
            "lambda" => n.lambda = parse_num(line, key, v)?,
            "lsc" => n.ablation.lsc = parse_bool(line, key, v)?,
            "ssc" => n.ablation.ssc = parse_bool(line, key, v)?,
            "lc" => n.ablation.lc = parse_bool(line, key, v)?,
            "fa" => n.ablation.fa = parse_bool(line, key, v)?,
            "lr" => t.lr0 = parse_num(line, key, v)?,
            "lr_halving_interval" => t.lr_halving_interval = parse_num(line, key, v)?,
            "batch" => t.batch = parse_num(line, key, v)?,
            "patch" => t.patch = parse_num(line, key, v)?,
            "sigma" => {
                t.sigma = parse_sigma(v).ok_or_else(|| ConfigError::BadValue {
                    line,
                    key: key.into(),
                    reason: format!("`{v}` is neither a level nor a `lo-hi` range"),
                })?
            }
            "max_iters" => t.max_iters = parse_num(line, key, v)?,
            "seed" => t.seed = parse_num(line, key, v)?,
            "adam_beta1" => t.adam.beta1 = parse_num(line, key, v)?,
            "adam_beta2" => t.adam.beta2 = parse_num(line, key, v)?,
            "adam_eps" => t.adam.eps = parse_num(line, key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(line, key, v)?,
            _ => unreachable!("key list checked by caller"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let msg = |e: Error| ConfigError::Invalid(e.to_string());
        self.network.validate().map_err(msg)?;
        self.train.validate().map_err(msg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text)?)
    }

    /// Every key with its resolved value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let (n, t) = (&self.network, &self.train);
        let d = n.dilations;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("in_channels", n.in_channels.to_string());
        put("num_eams", n.num_eams.to_string());
        put("channels", n.channels.to_string());
        put("reduction", n.reduction.to_string());
        put("dilations", format!("{},{},{},{}", d[0], d[1], d[2], d[3]));
        put("lambda", format!("{:?}", n.lambda));
        put("lsc", n.ablation.lsc.to_string());
        put("ssc", n.ablation.ssc.to_string());
        put("lc", n.ablation.lc.to_string());
        put("fa", n.ablation.fa.to_string());
        put("lr", format!("{:?}", t.lr0));
        put("lr_halving_interval", t.lr_halving_interval.to_string());
        put("batch", t.batch.to_string());
        put("patch", t.patch.to_string());
        put("sigma", t.sigma.to_string());
        put("max_iters", t.max_iters.to_string());
        put("seed", t.seed.to_string());
        put("adam_beta1", format!("{:?}", t.adam.beta1));
        put("adam_beta2", format!("{:?}", t.adam.beta2));
        put("adam_eps", format!("{:?}", t.adam.eps));
        put("checkpoint_every", t.checkpoint_every.to_string());
        s
    }
}
