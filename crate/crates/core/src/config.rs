//! Pipeline configuration as flat `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; omitted keys keep their defaults. [`PipelineConfig::to_text`]
//! lists every key with its current value.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::model::ModelConfig;
use crate::search::EaConfig;
use crate::supernet::SamplingMode;

#[derive(Debug, Clone, PartialEq)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupernetSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub sampling: SamplingMode,
    pub granularity: usize,
    /// Restrict choice sets and the search space to the filter's survivors.
    pub filtering: bool,
    /// Admit ranks at or above the breakeven rank in default choice sets.
    pub allow_overcomplete: bool,
}

/// FLOPs window as fractions of the dense model, or absolute bounds when
/// both `lower` and `upper` are set.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSpec {
    pub lower_frac: f64,
    pub upper_frac: f64,
    pub lower: Option<u64>,
    pub upper: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub data: DatasetSpec,
    pub val_fraction: f64,
    pub model: ModelConfig,
    pub base: BaseTrainConfig,
    pub supernet: SupernetSettings,
    pub filter: FilterConfig,
    /// Fraction of the validation split used to score local candidates.
    pub score_fraction: f64,
    pub ea: EaConfig,
    pub window: WindowSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DatasetSpec::default(),
            val_fraction: 0.2,
            model: ModelConfig::default(),
            base: BaseTrainConfig {
                epochs: 20,
                batch_size: 32,
                lr: 0.05,
                momentum: 0.9,
            },
            supernet: SupernetSettings {
                epochs: 20,
                batch_size: 32,
                lr: 0.01,
                momentum: 0.9,
                sampling: SamplingMode::LowRankAware,
                granularity: 4,
                filtering: true,
                allow_overcomplete: false,
            },
            filter: FilterConfig::default(),
            score_fraction: 0.25,
            ea: EaConfig::default(),
            window: WindowSpec {
                lower_frac: 0.4,
                upper_frac: 0.5,
                lower: None,
                upper: None,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value '{value}' for key '{key}' (expected true or false)"
        ))),
    }
}

/// `0` and `none` unset an optional count.
fn parse_opt<T: FromStr + PartialEq + Default>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        return Ok(None);
    }
    let v: T = parse(key, value)?;
    Ok((v != T::default()).then_some(v))
}

fn opt_text<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), T::to_string)
}

impl PipelineConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.classes" => self.data.classes = parse(key, value)?,
            "data.samples_per_class" => self.data.samples_per_class = parse(key, value)?,
            "data.image_side" => self.data.image_side = parse(key, value)?,
            "data.patch_side" => self.data.patch_side = parse(key, value)?,
            "data.noise_sigma" => self.data.noise_sigma = parse(key, value)?,
            "data.val_fraction" => self.val_fraction = parse(key, value)?,
            "model.embed_dim" => self.model.embed_dim = parse(key, value)?,
            "model.depth" => self.model.depth = parse(key, value)?,
            "model.heads" => self.model.heads = parse(key, value)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse(key, value)?,
            "base.epochs" => self.base.epochs = parse(key, value)?,
            "base.batch_size" => self.base.batch_size = parse(key, value)?,
            "base.lr" => self.base.lr = parse(key, value)?,
            "base.momentum" => self.base.momentum = parse(key, value)?,
            "supernet.epochs" => self.supernet.epochs = parse(key, value)?,
            "supernet.batch_size" => self.supernet.batch_size = parse(key, value)?,
            "supernet.lr" => self.supernet.lr = parse(key, value)?,
            "supernet.momentum" => self.supernet.momentum = parse(key, value)?,
            "supernet.sampling" => self.supernet.sampling = value.parse()?,
            "supernet.granularity" => self.supernet.granularity = parse(key, value)?,
            "supernet.filtering" => self.supernet.filtering = parse_bool(key, value)?,
            "supernet.allow_overcomplete" => self.supernet.allow_overcomplete = parse_bool(key, value)?,
            "filter.lambda" => self.filter.lambda = parse(key, value)?,
            "filter.top_k" => self.filter.top_k = parse(key, value)?,
            "filter.proxy_fraction" => self.filter.proxy_fraction = parse(key, value)?,
            "filter.local_epochs" => self.filter.local_epochs = parse(key, value)?,
            "filter.exhaustive_cap" => self.filter.exhaustive_cap = parse(key, value)?,
            "filter.batch_size" => self.filter.batch_size = parse(key, value)?,
            "filter.lr" => self.filter.lr = parse(key, value)?,
            "filter.score_fraction" => self.score_fraction = parse(key, value)?,
            "ea.population" => self.ea.population = parse(key, value)?,
            "ea.generations" => self.ea.generations = parse(key, value)?,
            "ea.parent_fraction" => self.ea.parent_fraction = parse(key, value)?,
            "ea.mutation_prob" => self.ea.mutation_prob = parse(key, value)?,
            "ea.crossover_prob" => self.ea.crossover_prob = parse(key, value)?,
            "ea.eval_batches" => self.ea.eval_batches = parse_opt(key, value)?,
            "ea.batch_size" => self.ea.batch_size = parse(key, value)?,
            "window.lower_frac" => self.window.lower_frac = parse(key, value)?,
            "window.upper_frac" => self.window.upper_frac = parse(key, value)?,
            "window.lower" => self.window.lower = parse_opt(key, value)?,
            "window.upper" => self.window.upper = parse_opt(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Copies shared fields into the sub-configs and derives their seeds
    /// from the master seed.
    pub fn sync(&mut self) {
        self.data.seed = self.seed;
        self.model.image_side = self.data.image_side;
        self.model.patch_side = self.data.patch_side;
        self.model.classes = self.data.classes;
        self.model.seed = self.seed.wrapping_add(1);
        self.filter.seed = self.seed.wrapping_add(3);
        self.ea.seed = self.seed.wrapping_add(5);
    }

    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn supernet_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.filter.validate()?;
        self.ea.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("data.val_fraction {} must lie in (0, 1)", self.val_fraction));
        }
        if !(self.score_fraction > 0.0 && self.score_fraction <= 1.0) {
            return bad(format!(
                "filter.score_fraction {} must lie in (0, 1]",
                self.score_fraction
            ));
        }
        if self.base.batch_size == 0 || self.supernet.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.supernet.granularity == 0 {
            return bad("supernet.granularity must be positive".into());
        }
        if self.window.lower.is_some() != self.window.upper.is_some() {
            return bad("window.lower and window.upper must be set together".into());
        }
        Ok(())
    }

    /// Every key with its current value, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("data.classes", self.data.classes.to_string());
        kv("data.samples_per_class", self.data.samples_per_class.to_string());
        kv("data.image_side", self.data.image_side.to_string());
        kv("data.patch_side", self.data.patch_side.to_string());
        kv("data.noise_sigma", self.data.noise_sigma.to_string());
        kv("data.val_fraction", self.val_fraction.to_string());
        kv("model.embed_dim", self.model.embed_dim.to_string());
        kv("model.depth", self.model.depth.to_string());
        kv("model.heads", self.model.heads.to_string());
        kv("model.mlp_ratio", self.model.mlp_ratio.to_string());
        kv("base.epochs", self.base.epochs.to_string());
        kv("base.batch_size", self.base.batch_size.to_string());
        kv("base.lr", self.base.lr.to_string());
        kv("base.momentum", self.base.momentum.to_string());
        kv("supernet.epochs", self.supernet.epochs.to_string());
        kv("supernet.batch_size", self.supernet.batch_size.to_string());
        kv("supernet.lr", self.supernet.lr.to_string());
        kv("supernet.momentum", self.supernet.momentum.to_string());
        kv("supernet.sampling", self.supernet.sampling.to_string());
        kv("supernet.granularity", self.supernet.granularity.to_string());
        kv("supernet.filtering", self.supernet.filtering.to_string());
        kv(
            "supernet.allow_overcomplete",
            self.supernet.allow_overcomplete.to_string(),
        );
        kv("filter.lambda", self.filter.lambda.to_string());
        kv("filter.top_k", self.filter.top_k.to_string());
        kv("filter.proxy_fraction", self.filter.proxy_fraction.to_string());
        kv("filter.local_epochs", self.filter.local_epochs.to_string());
        kv("filter.exhaustive_cap", self.filter.exhaustive_cap.to_string());
        kv("filter.batch_size", self.filter.batch_size.to_string());
        kv("filter.lr", self.filter.lr.to_string());
        kv("filter.score_fraction", self.score_fraction.to_string());
        kv("ea.population", self.ea.population.to_string());
        kv("ea.generations", self.ea.generations.to_string());
        kv("ea.parent_fraction", self.ea.parent_fraction.to_string());
        kv("ea.mutation_prob", self.ea.mutation_prob.to_string());
        kv("ea.crossover_prob", self.ea.crossover_prob.to_string());
        kv("ea.eval_batches", opt_text(&self.ea.eval_batches));
        kv("ea.batch_size", self.ea.batch_size.to_string());
        kv("window.lower_frac", self.window.lower_frac.to_string());
        kv("window.upper_frac", self.window.upper_frac.to_string());
        kv("window.lower", opt_text(&self.window.lower));
        kv("window.upper", opt_text(&self.window.upper));
        s
    }
}
