//! Binary tensor container used for every artifact on disk.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "FLRA" | version | tensor count
//! per tensor: name length | UTF-8 name | rank | dims… | f32 values…
//! ```
//!
//! Values are stored in single precision, so a model round-trips exactly
//! once it has been rounded with [`Model::round_to_f32`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, FormatError, Result};
use crate::linalg::Matrix;
use crate::model::{Model, ModelConfig, SlotWeights};
use crate::supernet::{ChoiceBlock, RankChoiceSet, Supernet};

pub const MAGIC: [u8; 4] = *b"FLRA";
pub const VERSION: u32 = 1;

const STEPS_TENSOR: &str = "supernet.steps";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, at: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| FormatError::ShapeTable("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("tensor rank")? as usize;
            if rank == 0 {
                return Err(FormatError::ShapeTable(format!("tensor {name} has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("tensor dims")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| FormatError::ShapeTable(format!("tensor {name} has shape {shape:?}")))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or(FormatError::Truncated { what: "tensor values" })?,
                "tensor values",
            )?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.iter().any(|t: &Tensor| t.name == name) {
                return Err(FormatError::ShapeTable(format!("duplicate tensor {name}")));
            }
            tensors.push(Tensor { name, shape, values });
        }
        if r.at != bytes.len() {
            return Err(FormatError::ShapeTable(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::decode(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(FormatError::Truncated { what })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn model_to_checkpoint(model: &Model) -> Checkpoint {
    Checkpoint {
        tensors: model
            .params()
            .into_iter()
            .map(|p| Tensor::new(p.name, p.shape, p.data.iter().map(|&v| v as f32).collect()))
            .collect(),
    }
}

fn shape_err(msg: String) -> Error {
    Error::Format(FormatError::ShapeTable(msg))
}

/// Rebuilds a model of configuration `cfg` from named tensors. A slot is
/// factored if its `.u`/`.v` tensors are present and dense if `.w` is.
/// Names listed in `extra` are ignored; any other unknown tensor is an error.
fn model_from_tensors(cfg: &ModelConfig, ck: &Checkpoint, extra: &[String]) -> Result<Model> {
    let by_name: BTreeMap<&str, &Tensor> = ck.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut model = Model::new(cfg)?;
    for slot in cfg.slots() {
        let (u, v) = (format!("{}.u", slot.id), format!("{}.v", slot.id));
        if let (Some(tu), Some(tv)) = (by_name.get(u.as_str()), by_name.get(v.as_str())) {
            let (ru, rv) = (
                tu.shape.last().copied().unwrap_or(0),
                tv.shape.last().copied().unwrap_or(0),
            );
            if ru != rv || ru == 0 {
                return Err(shape_err(format!("{} factors have widths {ru} and {rv}", slot.id)));
            }
            model.slot_mut(slot.id).weights = SlotWeights::Factored {
                u: Matrix::zeros(slot.m, ru),
                v: Matrix::zeros(slot.n, ru),
            };
        }
    }
    let mut used = 0;
    for p in model.params_mut() {
        let t = by_name
            .get(p.name.as_str())
            .ok_or_else(|| shape_err(format!("missing tensor {}", p.name)))?;
        if t.shape != p.shape {
            return Err(shape_err(format!(
                "tensor {} has shape {:?}, expected {:?}",
                p.name, t.shape, p.shape
            )));
        }
        for (d, &s) in p.data.iter_mut().zip(&t.values) {
            *d = s as f64;
        }
        used += 1;
    }
    let known = used + ck.tensors.iter().filter(|t| extra.contains(&t.name)).count();
    if known != ck.tensors.len() {
        let names: Vec<String> = model.params().into_iter().map(|p| p.name).collect();
        let stray = ck
            .tensors
            .iter()
            .find(|t| !names.contains(&t.name) && !extra.contains(&t.name))
            .map(|t| t.name.clone())
            .unwrap_or_default();
        return Err(shape_err(format!("unexpected tensor {stray}")));
    }
    Ok(model)
}

pub fn model_from_checkpoint(cfg: &ModelConfig, ck: &Checkpoint) -> Result<Model> {
    model_from_tensors(cfg, ck, &[])
}

pub fn supernet_to_checkpoint(net: &Supernet) -> Checkpoint {
    let mut ck = model_to_checkpoint(net.model());
    for b in net.choice_blocks() {
        let r = b.choices.ranks();
        ck.tensors.push(Tensor::new(
            format!("{}.ranks", b.slot.id),
            vec![r.len()],
            r.iter().map(|&x| x as f32).collect(),
        ));
    }
    ck.tensors
        .push(Tensor::new(STEPS_TENSOR, vec![1], vec![net.steps_trained() as f32]));
    ck
}

/// Restores a supernet. Choice sets are validated with granularity 1 and
/// overcomplete ranks allowed, since the writer already enforced its own
/// policy.
pub fn supernet_from_checkpoint(cfg: &ModelConfig, ck: &Checkpoint) -> Result<Supernet> {
    let mut extra = vec![STEPS_TENSOR.to_string()];
    let mut blocks = Vec::new();
    for slot in cfg.slots() {
        let name = format!("{}.ranks", slot.id);
        if let Some(t) = ck.get(&name) {
            let ranks: Vec<usize> = t.values.iter().map(|&v| v as usize).collect();
            if t.values.iter().zip(&ranks).any(|(&v, &r)| v != r as f32) {
                return Err(shape_err(format!("{name} holds non-integer ranks")));
            }
            blocks.push(ChoiceBlock {
                slot,
                choices: RankChoiceSet::new(ranks, &slot, 1, true)?,
            });
            extra.push(name);
        }
    }
    let steps = ck.get(STEPS_TENSOR).map_or(0, |t| t.values[0] as usize);
    let model = model_from_tensors(cfg, ck, &extra)?;
    Supernet::from_parts(model, blocks, steps)
}

/// Images as `N × side × side` and labels as an `N` vector of whole numbers.
pub fn dataset_to_checkpoint(ds: &Dataset) -> Checkpoint {
    let side = ds.spec().image_side;
    Checkpoint {
        tensors: vec![
            Tensor::new(
                "images",
                vec![ds.len(), side, side],
                ds.images().iter().map(|&v| v as f32).collect(),
            ),
            Tensor::new(
                "labels",
                vec![ds.len()],
                ds.labels().iter().map(|&l| l as f32).collect(),
            ),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let ck = Checkpoint {
            tensors: vec![
                Tensor::new("a", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]),
                Tensor::new("b.c", vec![1], vec![42.0]),
            ],
        };
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"FLRA");
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
    }

    #[test]
    fn corruption_kinds_are_distinct() {
        let ck = Checkpoint {
            tensors: vec![Tensor::new("a", vec![2], vec![1.0, 2.0])],
        };
        let good = ck.encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(FormatError::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(FormatError::VersionMismatch { found: 9, expected: 1 })
        ));
        assert!(matches!(
            Checkpoint::decode(&good[..good.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(Checkpoint::decode(&bad), Err(FormatError::ShapeTable(_))));
    }
}
