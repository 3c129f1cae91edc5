//! Line-delimited text reports.
//!
//! Every line is one record of space-separated `key=value` fields; the
//! first field is always `record=<kind>`. Values never contain spaces and
//! floats are printed in shortest round-trip form, so reports parse back
//! exactly and are byte-stable across runs.

use std::fmt::Write as _;

use crate::cost::FlopsWindow;
use crate::error::{Error, Result};
use crate::filter::{BlockFilterResult, BlockSpace, RetainedSpace};
use crate::search::SearchOutcome;
use crate::supernet::{RankConfig, TraceRecord};

/// One parsed report line.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub fields: Vec<(String, String)>,
}

impl Record {
    pub fn kind(&self) -> &str {
        self.get("record").unwrap_or("")
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn req(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Argument(format!("record '{}' lacks field '{key}'", self.kind())))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.req(key)?;
        v.parse()
            .map_err(|_| Error::Argument(format!("field {key}='{v}' does not parse")))
    }
}

pub fn parse_records(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let fields = l
                .split_whitespace()
                .map(|f| {
                    f.split_once('=')
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .ok_or_else(|| Error::Argument(format!("malformed field '{f}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Record { fields })
        })
        .collect()
}

fn ranks_text(r: &[usize]) -> String {
    RankConfig(r.to_vec()).to_string()
}

pub fn filter_report(results: &[BlockFilterResult]) -> String {
    let mut s = String::new();
    for r in results {
        writeln!(
            s,
            "record=block block={} exhaustive={} scored={} retained={}",
            r.block,
            r.exhaustive,
            r.scores.len(),
            r.retained.size()
        )
        .unwrap();
        for sc in &r.scores {
            writeln!(
                s,
                "record=score block={} ranks={} p={} f={} m={} retained={}",
                r.block,
                ranks_text(&sc.candidate),
                sc.p,
                sc.f,
                sc.m,
                r.is_retained(&sc.candidate)
            )
            .unwrap();
        }
    }
    s
}

pub fn retained_space_text(space: &RetainedSpace) -> String {
    let mut s = String::new();
    for (b, block) in space.blocks().iter().enumerate() {
        match block {
            BlockSpace::Explicit(c) => {
                for ranks in c {
                    writeln!(s, "record=explicit block={b} ranks={}", ranks_text(ranks)).unwrap();
                }
            }
            BlockSpace::Product(sets) => {
                for (j, set) in sets.iter().enumerate() {
                    writeln!(s, "record=product block={b} slot={j} ranks={}", ranks_text(set)).unwrap();
                }
            }
        }
    }
    s
}

pub fn parse_retained_space(text: &str) -> Result<RetainedSpace> {
    let mut blocks: Vec<BlockSpace> = Vec::new();
    for rec in parse_records(text)? {
        let b: usize = rec.parse("block")?;
        let ranks: RankConfig = rec.parse("ranks")?;
        if b > blocks.len() {
            return Err(Error::Argument(format!("retained space skips to block {b}")));
        }
        match (rec.kind(), blocks.get_mut(b)) {
            ("explicit", None) => blocks.push(BlockSpace::Explicit(vec![ranks.0])),
            ("explicit", Some(BlockSpace::Explicit(c))) => c.push(ranks.0),
            ("product", None) => blocks.push(BlockSpace::Product(vec![ranks.0])),
            ("product", Some(BlockSpace::Product(sets))) => sets.push(ranks.0),
            (kind, _) => return Err(Error::Argument(format!("unexpected '{kind}' record for block {b}"))),
        }
    }
    RetainedSpace::new(blocks)
}

pub fn trace_text(trace: &[TraceRecord]) -> String {
    let mut s = String::new();
    for t in trace {
        writeln!(s, "record=step step={} config={} loss={}", t.step, t.config, t.loss).unwrap();
    }
    s
}

pub fn search_report(outcome: &SearchOutcome, window: &FlopsWindow, dense_flops: u64) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "record=window lower={} upper={} dense_flops={dense_flops}",
        window.lower, window.upper
    )
    .unwrap();
    for g in &outcome.history {
        writeln!(
            s,
            "record=generation generation={} best={} mean={} evaluated={}",
            g.generation, g.best, g.mean, g.evaluated
        )
        .unwrap();
    }
    for (i, c) in outcome.ranked.iter().enumerate() {
        writeln!(
            s,
            "record=candidate position={i} config={} fitness={} flops={} params={} flops_ratio={}",
            c.config,
            c.fitness,
            c.cost.flops,
            c.cost.params,
            c.cost.flops as f64 / dense_flops as f64
        )
        .unwrap();
    }
    s
}

/// Points not dominated by a cheaper-or-equal point with at least the same
/// accuracy, sorted by FLOPs.
pub fn pareto_front(points: &[(u64, f64)]) -> Vec<(u64, f64)> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut front: Vec<(u64, f64)> = Vec::new();
    for p in sorted {
        if front.last().is_none_or(|last| p.1 > last.1) {
            front.push(p);
        }
    }
    front
}
