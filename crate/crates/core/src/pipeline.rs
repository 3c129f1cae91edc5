//! The staged pipeline: data, base training, decomposition, filtering,
//! supernet training, search, evaluation and export.
//!
//! Each stage exists twice: as a plain function over in-memory values, and
//! as a `run_*` wrapper that reads its inputs from and writes its artifact
//! to a [`Workspace`] directory. Every stage rounds the weights it produces
//! to single precision before returning them, so what is in memory is
//! exactly what a reload of the artifact yields.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{
    dataset_to_checkpoint, model_from_checkpoint, model_to_checkpoint, supernet_from_checkpoint,
    supernet_to_checkpoint, Checkpoint,
};
use crate::config::PipelineConfig;
use crate::cost::{cost_of, cost_of_slots, CostReport, FlopsWindow};
use crate::data::{generate, proxy_subset, train_val_split, Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::filter::{build_local_supernet, score_local, train_local_supernet, BlockFilterResult, RetainedSpace};
use crate::linalg::{svd, truncate};
use crate::model::{Model, SlotWeights};
use crate::report;
use crate::search::{search, SearchOutcome};
use crate::supernet::{
    train_supernet, RankChoiceSet, RankConfig, SamplingMode, Supernet, SupernetTrainConfig, TraceRecord,
};
use crate::train::{evaluate, steps_per_epoch, train_epoch, Sgd, TrainSettings};

pub const DATASET: &str = "dataset.flra";
pub const BASE: &str = "base.flra";
pub const BASE_REPORT: &str = "base_report.txt";
pub const DECOMPOSED: &str = "decomposed.flra";
pub const FILTER_REPORT: &str = "filter_report.txt";
pub const RETAINED_SPACE: &str = "retained_space.txt";
pub const SUPERNET: &str = "supernet.flra";
pub const SUPERNET_TRACE: &str = "supernet_trace.txt";
pub const SEARCH_REPORT: &str = "search_report.txt";
pub const EXPORT: &str = "export.flra";

/// Dataset and its splits, all regenerated from the config.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub ds: Dataset,
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    /// Stratified subset of `train` for local supernets.
    pub proxy: DatasetSplit,
    /// Stratified subset of `val` for scoring local candidates.
    pub score: DatasetSplit,
}

pub fn prepare_data(cfg: &PipelineConfig) -> Result<DataBundle> {
    let ds = generate(&cfg.data)?;
    let (train, val) = train_val_split(&ds, cfg.val_fraction, cfg.split_seed())?;
    let proxy = proxy_subset(&ds, &train, cfg.filter.proxy_fraction, cfg.split_seed().wrapping_add(1))?;
    let score = proxy_subset(&ds, &val, cfg.score_fraction, cfg.split_seed().wrapping_add(2))?;
    Ok(DataBundle {
        ds,
        train,
        val,
        proxy,
        score,
    })
}

/// Trains the dense model; returns it with the mean loss of each epoch.
pub fn train_base(cfg: &PipelineConfig, data: &DataBundle) -> Result<(Model, Vec<f64>)> {
    let mut model = Model::new(&cfg.model)?;
    let b = &cfg.base;
    let mut opt = Sgd::new(
        b.lr,
        b.momentum,
        b.epochs * steps_per_epoch(data.train.len(), b.batch_size),
    );
    let settings = TrainSettings {
        batch_size: b.batch_size,
        seed: cfg.seed,
    };
    let mut losses = Vec::with_capacity(b.epochs);
    for epoch in 0..b.epochs {
        let trace = train_epoch(&mut model, &data.ds, &data.train, &mut opt, &settings, epoch)?;
        losses.push(trace.iter().sum::<f64>() / trace.len() as f64);
    }
    model.round_to_f32();
    Ok((model, losses))
}

/// Factors every slot at full rank `min(m, n)`; lossless up to rounding.
pub fn decompose(base: &Model) -> Result<Model> {
    let mut m = base.clone();
    for slot in m.slots() {
        let sp = m.slot_mut(slot.id);
        if let SlotWeights::Dense(w) = &sp.weights {
            let (u, v) = truncate(&svd(w)?, slot.m.min(slot.n))?;
            sp.weights = SlotWeights::Factored { u, v };
        }
    }
    m.round_to_f32();
    Ok(m)
}

pub fn default_choice_sets(cfg: &PipelineConfig) -> Result<Vec<RankChoiceSet>> {
    let g = cfg.supernet.granularity;
    cfg.model
        .slots()
        .iter()
        .map(|s| {
            if cfg.supernet.allow_overcomplete {
                let ranks: Vec<usize> = (1..).map(|k| k * g).take_while(|&r| r <= s.m.min(s.n)).collect();
                RankChoiceSet::new(ranks, s, g, true)
            } else {
                RankChoiceSet::default_for(s, g)
            }
        })
        .collect()
}

/// Choice sets holding only the ranks that survive in `space`.
pub fn choice_sets_from_space(cfg: &PipelineConfig, space: &RetainedSpace) -> Result<Vec<RankChoiceSet>> {
    let slots = cfg.model.slots();
    let per_slot = space.slot_choices();
    if per_slot.len() != slots.len() {
        return Err(Error::Argument(format!(
            "retained space covers {} slots, model has {}",
            per_slot.len(),
            slots.len()
        )));
    }
    slots
        .iter()
        .zip(per_slot)
        .map(|(s, ranks)| RankChoiceSet::new(ranks, s, cfg.supernet.granularity, cfg.supernet.allow_overcomplete))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub blocks: Vec<BlockFilterResult>,
    pub space: RetainedSpace,
}

/// Filters each block in turn with its own local supernet.
pub fn filter(cfg: &PipelineConfig, data: &DataBundle, base: &Model) -> Result<FilterOutcome> {
    let sets = default_choice_sets(cfg)?;
    let mut blocks = Vec::with_capacity(cfg.model.depth);
    for b in 0..cfg.model.depth {
        let mut net = build_local_supernet(base, b, &sets[b * 6..(b + 1) * 6])?;
        train_local_supernet(&mut net, &data.ds, &data.proxy, base, &cfg.filter)?;
        blocks.push(score_local(&net, b, &data.ds, &data.score.indices, &cfg.filter)?);
    }
    let space = RetainedSpace::new(blocks.iter().map(|r| r.retained.clone()).collect())?;
    Ok(FilterOutcome { blocks, space })
}

/// Builds the supernet on `factored` (the decomposed model) and trains it
/// against `teacher`.
pub fn train_supernet_stage(
    cfg: &PipelineConfig,
    data: &DataBundle,
    factored: &Model,
    teacher: &Model,
    sets: &[RankChoiceSet],
    sampling: SamplingMode,
    epochs: usize,
) -> Result<(Supernet, Vec<TraceRecord>)> {
    let choices: Vec<Option<RankChoiceSet>> = sets.iter().cloned().map(Some).collect();
    let mut net = Supernet::build(factored, &choices)?;
    let s = &cfg.supernet;
    let trace = train_supernet(
        &mut net,
        &data.ds,
        &data.train,
        teacher,
        &SupernetTrainConfig {
            epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            momentum: s.momentum,
            seed: cfg.supernet_seed(),
            sampling,
            choice_blocks_only: false,
        },
    )?;
    let blocks = net.choice_blocks().to_vec();
    let steps = net.steps_trained();
    let mut model = net.into_model();
    model.round_to_f32();
    Ok((Supernet::from_parts(model, blocks, steps)?, trace))
}

pub fn dense_cost(cfg: &PipelineConfig) -> Result<CostReport> {
    cost_of(&cfg.model, None)
}

pub fn window(cfg: &PipelineConfig) -> Result<FlopsWindow> {
    match (cfg.window.lower, cfg.window.upper) {
        (Some(lo), Some(hi)) => FlopsWindow::new(lo, hi),
        _ => FlopsWindow::from_fractions(dense_cost(cfg)?.flops, cfg.window.lower_frac, cfg.window.upper_frac),
    }
}

/// Search space for a supernet: the filter's survivors, or every
/// combination of the supernet's choice sets.
pub fn search_space(net: &Supernet, retained: Option<&RetainedSpace>) -> Result<RetainedSpace> {
    match retained {
        Some(s) => Ok(s.clone()),
        None => RetainedSpace::product(net.choice_sets().iter().map(|c| c.ranks().to_vec()).collect()),
    }
}

pub fn search_stage(
    cfg: &PipelineConfig,
    data: &DataBundle,
    net: &Supernet,
    space: &RetainedSpace,
) -> Result<SearchOutcome> {
    search(net, space, &window(cfg)?, &cfg.ea, &data.ds, &data.val.indices)
}

/// Directory holding a run's artifacts.
#[derive(Debug, Clone)]
pub struct Workspace {
    dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of an artifact that must already exist.
    pub fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn read(&self, name: &str) -> Result<String> {
        let p = self.require(name)?;
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    }

    pub fn load_model(&self, cfg: &PipelineConfig, name: &str) -> Result<Model> {
        model_from_checkpoint(&cfg.model, &Checkpoint::load(&self.require(name)?)?)
    }

    pub fn load_supernet(&self, cfg: &PipelineConfig) -> Result<Supernet> {
        supernet_from_checkpoint(&cfg.model, &Checkpoint::load(&self.require(SUPERNET)?)?)
    }
}

pub fn run_gen_data(cfg: &PipelineConfig, ws: &Workspace) -> Result<String> {
    let data = prepare_data(cfg)?;
    dataset_to_checkpoint(&data.ds).save(&ws.path(DATASET))?;
    Ok(format!(
        "gen-data samples={} train={} val={} proxy={} score={}",
        data.ds.len(),
        data.train.len(),
        data.val.len(),
        data.proxy.len(),
        data.score.len()
    ))
}

pub fn run_train_base(cfg: &PipelineConfig, ws: &Workspace) -> Result<String> {
    let data = prepare_data(cfg)?;
    let (model, losses) = train_base(cfg, &data)?;
    let train_acc = evaluate(&model, &data.ds, &data.train.indices, None)?;
    let val_acc = evaluate(&model, &data.ds, &data.val.indices, None)?;
    model_to_checkpoint(&model).save(&ws.path(BASE))?;
    let mut text = String::new();
    for (e, l) in losses.iter().enumerate() {
        text.push_str(&format!("record=epoch epoch={e} loss={l}\n"));
    }
    text.push_str(&format!(
        "record=summary train_accuracy={train_acc} val_accuracy={val_acc}\n"
    ));
    ws.write(BASE_REPORT, &text)?;
    Ok(format!("train-base train_accuracy={train_acc} val_accuracy={val_acc}"))
}

pub fn run_decompose(cfg: &PipelineConfig, ws: &Workspace) -> Result<String> {
    let base = ws.load_model(cfg, BASE)?;
    let dec = decompose(&base)?;
    model_to_checkpoint(&dec).save(&ws.path(DECOMPOSED))?;
    let c = cost_of_slots(&cfg.model, &dec.max_ranks())?;
    Ok(format!("decompose slots={} {c}", dec.slots().len()))
}

pub fn run_filter(cfg: &PipelineConfig, ws: &Workspace) -> Result<String> {
    let base = ws.load_model(cfg, BASE)?;
    let data = prepare_data(cfg)?;
    let out = filter(cfg, &data, &base)?;
    ws.write(FILTER_REPORT, &report::filter_report(&out.blocks))?;
    ws.write(RETAINED_SPACE, &report::retained_space_text(&out.space))?;
    Ok(format!(
        "filter blocks={} retained_configs={}",
        out.blocks.len(),
        out.space.size()
    ))
}

fn retained(cfg: &PipelineConfig, ws: &Workspace) -> Result<Option<RetainedSpace>> {
    if cfg.supernet.filtering {
        Ok(Some(report::parse_retained_space(&ws.read(RETAINED_SPACE)?)?))
    } else {
        Ok(None)
    }
}

pub fn run_train_supernet(cfg: &PipelineConfig, ws: &Workspace) -> Result<String> {
    let teacher = ws.load_model(cfg, BASE)?;
    let factored = ws.load_model(cfg, DECOMPOSED)?;
    let sets = match retained(cfg, ws)? {
        Some(space) => choice_sets_from_space(cfg, &space)?,
        None => default_choice_sets(cfg)?,
    };
    let data = prepare_data(cfg)?;
    let (net, trace) = train_supernet_stage(
        cfg,
        &data,
        &factored,
        &teacher,
        &sets,
        cfg.supernet.sampling,
        cfg.supernet.epochs,
    )?;
    supernet_to_checkpoint(&net).save(&ws.path(SUPERNET))?;
    ws.write(SUPERNET_TRACE, &report::trace_text(&trace))?;
    Ok(format!(
        "train-supernet steps={} space={} sampling={} final_loss={}",
        trace.len(),
        net.space_size(),
        cfg.supernet.sampling,
        trace.last().map_or(f64::NAN, |t| t.loss)
    ))
}

pub fn run_search(cfg: &PipelineConfig, ws: &Workspace) -> Result<String> {
    let net = ws.load_supernet(cfg)?;
    let space = search_space(&net, retained(cfg, ws)?.as_ref())?;
    let data = prepare_data(cfg)?;
    let w = window(cfg)?;
    let out = search(&net, &space, &w, &cfg.ea, &data.ds, &data.val.indices)?;
    let dense = dense_cost(cfg)?.flops;
    ws.write(SEARCH_REPORT, &report::search_report(&out, &w, dense))?;
    let best = out.best();
    Ok(format!(
        "search best={} fitness={} {} flops_ratio={}",
        best.config,
        best.fitness,
        best.cost,
        best.cost.flops as f64 / dense as f64
    ))
}

/// Which configuration `eval` and `export` should use.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigChoice {
    /// Every slot at its stored width.
    Full,
    /// Best candidate of the search report.
    Best,
    Explicit(RankConfig),
}

impl std::str::FromStr for ConfigChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ConfigChoice::Full),
            "best" => Ok(ConfigChoice::Best),
            other => other.parse().map(ConfigChoice::Explicit),
        }
    }
}

fn best_from_report(ws: &Workspace) -> Result<RankConfig> {
    report::parse_records(&ws.read(SEARCH_REPORT)?)?
        .into_iter()
        .find(|r| r.kind() == "candidate")
        .ok_or_else(|| Error::Argument("search report lists no candidates".into()))?
        .parse("config")
}

/// Validation accuracy and cost of `choice` on the checkpoint `name`. A
/// supernet checkpoint takes configs over its choice blocks; any other
/// checkpoint takes one rank per slot.
pub fn eval_artifact(
    cfg: &PipelineConfig,
    ws: &Workspace,
    name: &str,
    choice: &ConfigChoice,
) -> Result<(f64, CostReport)> {
    let data = prepare_data(cfg)?;
    let val = &data.val.indices;
    let config = match choice {
        ConfigChoice::Best => Some(best_from_report(ws)?),
        ConfigChoice::Explicit(c) => Some(c.clone()),
        ConfigChoice::Full => None,
    };
    if name == SUPERNET {
        let net = ws.load_supernet(cfg)?;
        let c = config.unwrap_or_else(|| net.max_config());
        let view = net.activate(&c)?;
        return Ok((view.evaluate(&data.ds, val)?, view.cost()));
    }
    let model = ws.load_model(cfg, name)?;
    let acc = evaluate(&model, &data.ds, val, config.as_ref().map(RankConfig::ranks))?;
    let ranks: Vec<Option<usize>> = match &config {
        None => model.max_ranks(),
        Some(c) => model
            .max_ranks()
            .iter()
            .zip(c.ranks())
            .map(|(m, &r)| m.map(|_| r))
            .collect(),
    };
    Ok((acc, cost_of_slots(&cfg.model, &ranks)?))
}

pub fn run_export(cfg: &PipelineConfig, ws: &Workspace, choice: &ConfigChoice) -> Result<String> {
    let net = ws.load_supernet(cfg)?;
    let config = match choice {
        ConfigChoice::Best => best_from_report(ws)?,
        ConfigChoice::Explicit(c) => c.clone(),
        ConfigChoice::Full => net.max_config(),
    };
    let view = net.activate(&config)?;
    let model = view.export();
    let cost = view.cost();
    model_to_checkpoint(&model).save(&ws.path(EXPORT))?;
    Ok(format!("export config={config} {cost}"))
}

/// Every stage in order.
pub fn run_all(cfg: &PipelineConfig, ws: &Workspace) -> Result<Vec<String>> {
    let mut lines = vec![
        run_gen_data(cfg, ws)?,
        run_train_base(cfg, ws)?,
        run_decompose(cfg, ws)?,
    ];
    if cfg.supernet.filtering {
        lines.push(run_filter(cfg, ws)?);
    }
    lines.push(run_train_supernet(cfg, ws)?);
    lines.push(run_search(cfg, ws)?);
    lines.push(run_export(cfg, ws, &ConfigChoice::Best)?);
    Ok(lines)
}
