//! A desk-scale vision transformer.
//!
//! Patch embedding (+ learned positions) → `depth` pre-norm transformer
//! blocks → final layer norm → mean over tokens → linear classifier. Every
//! block has six compressible linear slots (q, k, v, proj, fc1, fc2); each
//! slot holds either a dense weight or a pair of factors whose leading
//! columns are used at a given rank.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flops;
use crate::layers::{
    attention_bwd, attention_fwd, gelu_bwd, gelu_fwd, layernorm_bwd, layernorm_fwd, linear_bwd, linear_fwd,
    lowrank_linear_bwd, lowrank_linear_fwd, AttentionCache, AttentionShape, LayerNormCache,
};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 8,
            patch_side: 4,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            classes: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_side == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return bad(format!(
                "image side {} is not divisible by patch side {}",
                self.image_side, self.patch_side
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 || self.hidden_dim() == 0 {
            return bad(format!("mlp ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Every compressible linear slot, block-major in role order.
    pub fn slots(&self) -> Vec<LinearSlot> {
        let (d, h) = (self.embed_dim, self.hidden_dim());
        (0..self.depth)
            .flat_map(|block| {
                Role::ALL.into_iter().map(move |role| {
                    let (m, n) = match role {
                        Role::Fc1 => (d, h),
                        Role::Fc2 => (h, d),
                        _ => (d, d),
                    };
                    LinearSlot {
                        id: SlotId { block, role },
                        m,
                        n,
                    }
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Q,
    K,
    V,
    Proj,
    Fc1,
    Fc2,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::Q, Role::K, Role::V, Role::Proj, Role::Fc1, Role::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::Proj => "proj",
            Role::Fc1 => "fc1",
            Role::Fc2 => "fc2",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotId {
    pub block: usize,
    pub role: Role,
}

impl SlotId {
    /// Position of this slot in [`ModelConfig::slots`].
    pub fn index(&self) -> usize {
        self.block * Role::ALL.len() + self.role.index()
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.role.name())
    }
}

/// A compressible linear module mapping `m` inputs to `n` outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearSlot {
    pub id: SlotId,
    pub m: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotWeights {
    /// `m × n`
    Dense(Matrix),
    /// `u: m × R`, `v: n × R`; rank `r ≤ R` uses the first `r` columns of both.
    Factored { u: Matrix, v: Matrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotParams {
    pub weights: SlotWeights,
    pub bias: Vec<f64>,
}

impl SlotParams {
    /// Stored factor width, or `None` for a dense slot.
    pub fn max_rank(&self) -> Option<usize> {
        match &self.weights {
            SlotWeights::Dense(_) => None,
            SlotWeights::Factored { u, .. } => Some(u.cols()),
        }
    }

    /// Dense equivalent weight (`U·Vᵀ` at full stored width for factored slots).
    pub fn effective_weight(&self) -> Matrix {
        match &self.weights {
            SlotWeights::Dense(w) => w.clone(),
            SlotWeights::Factored { u, v } => u.matmul_t(v).expect("factor shapes"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            shift: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    /// Indexed by [`Role`].
    pub slots: [SlotParams; 6],
}

impl Block {
    pub fn slot(&self, role: Role) -> &SlotParams {
        &self.slots[role.index()]
    }

    pub fn slot_mut(&mut self, role: Role) -> &mut SlotParams {
        &mut self.slots[role.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    pub patch_w: Matrix,
    pub patch_b: Vec<f64>,
    pub pos: Matrix,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNormParams,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

/// Where a parameter tensor sits in the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    Norm { block: Option<usize> },
    SlotDense(SlotId),
    SlotFactorU(SlotId),
    SlotFactorV(SlotId),
    SlotBias(SlotId),
    Head,
}

impl ParamRole {
    pub fn slot(&self) -> Option<SlotId> {
        match self {
            ParamRole::SlotDense(s)
            | ParamRole::SlotFactorU(s)
            | ParamRole::SlotFactorV(s)
            | ParamRole::SlotBias(s) => Some(*s),
            _ => None,
        }
    }

    pub fn is_factor(&self) -> bool {
        matches!(self, ParamRole::SlotFactorU(_) | ParamRole::SlotFactorV(_))
    }
}

#[derive(Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub data: &'a mut [f64],
}

macro_rules! collect_params {
    ($self:ident, $ty:ident, $iter:ident, $mat:ident, $vec:ident) => {{
        let mut out: Vec<$ty<'_>> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, role: ParamRole, data| {
            out.push($ty {
                name,
                shape,
                role,
                data,
            });
        };
        let Model {
            patch_w,
            patch_b,
            pos,
            blocks,
            ln_f,
            head_w,
            head_b,
            ..
        } = $self;
        push(
            "patch.w".into(),
            vec![patch_w.rows(), patch_w.cols()],
            ParamRole::Embedding,
            patch_w.$mat(),
        );
        push(
            "patch.b".into(),
            vec![patch_b.len()],
            ParamRole::Embedding,
            patch_b.$vec(),
        );
        push(
            "pos".into(),
            vec![pos.rows(), pos.cols()],
            ParamRole::Embedding,
            pos.$mat(),
        );
        for (bi, block) in blocks.$iter().enumerate() {
            let Block { ln1, ln2, slots } = block;
            let norm = ParamRole::Norm { block: Some(bi) };
            push(
                format!("blocks.{bi}.ln1.gain"),
                vec![ln1.gain.len()],
                norm.clone(),
                ln1.gain.$vec(),
            );
            push(
                format!("blocks.{bi}.ln1.shift"),
                vec![ln1.shift.len()],
                norm.clone(),
                ln1.shift.$vec(),
            );
            push(
                format!("blocks.{bi}.ln2.gain"),
                vec![ln2.gain.len()],
                norm.clone(),
                ln2.gain.$vec(),
            );
            push(
                format!("blocks.{bi}.ln2.shift"),
                vec![ln2.shift.len()],
                norm,
                ln2.shift.$vec(),
            );
            for (role, sp) in Role::ALL.into_iter().zip(slots.$iter()) {
                let id = SlotId { block: bi, role };
                let SlotParams { weights, bias } = sp;
                match weights {
                    SlotWeights::Dense(w) => {
                        push(
                            format!("{id}.w"),
                            vec![w.rows(), w.cols()],
                            ParamRole::SlotDense(id),
                            w.$mat(),
                        );
                    }
                    SlotWeights::Factored { u, v } => {
                        push(
                            format!("{id}.u"),
                            vec![u.rows(), u.cols()],
                            ParamRole::SlotFactorU(id),
                            u.$mat(),
                        );
                        push(
                            format!("{id}.v"),
                            vec![v.rows(), v.cols()],
                            ParamRole::SlotFactorV(id),
                            v.$mat(),
                        );
                    }
                }
                push(
                    format!("{id}.b"),
                    vec![bias.len()],
                    ParamRole::SlotBias(id),
                    bias.$vec(),
                );
            }
        }
        push(
            "ln_f.gain".into(),
            vec![ln_f.gain.len()],
            ParamRole::Norm { block: None },
            ln_f.gain.$vec(),
        );
        push(
            "ln_f.shift".into(),
            vec![ln_f.shift.len()],
            ParamRole::Norm { block: None },
            ln_f.shift.$vec(),
        );
        push(
            "head.w".into(),
            vec![head_w.rows(), head_w.cols()],
            ParamRole::Head,
            head_w.$mat(),
        );
        push("head.b".into(), vec![head_b.len()], ParamRole::Head, head_b.$vec());
        out
    }};
}

/// Per-block forward intermediates.
#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LayerNormCache,
    h1: Matrix,
    slot_inner: [Option<Matrix>; 6],
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: AttentionCache,
    attn_out: Matrix,
    ln2: LayerNormCache,
    h2: Matrix,
    fc1_out: Matrix,
    act: Matrix,
}

/// Everything [`Model::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    ranks: Vec<Option<usize>>,
    patches: Matrix,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
    pooled: Matrix,
}

impl Model {
    /// Deterministic initialization from `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, pd, t, c) = (cfg.embed_dim, cfg.patch_dim(), cfg.tokens(), cfg.classes);
        let patch_w = Matrix::random_with(pd, d, &mut rng, 1.0 / (pd as f64).sqrt());
        let pos = Matrix::random_with(t, d, &mut rng, 0.5);
        let mut blocks = Vec::with_capacity(cfg.depth);
        let slots = cfg.slots();
        for b in 0..cfg.depth {
            let make = |slot: &LinearSlot, rng: &mut ChaCha8Rng| SlotParams {
                weights: SlotWeights::Dense(Matrix::random_with(slot.m, slot.n, rng, 1.0 / (slot.m as f64).sqrt())),
                bias: vec![0.0; slot.n],
            };
            let s = &slots[b * 6..(b + 1) * 6];
            blocks.push(Block {
                ln1: LayerNormParams::new(d),
                ln2: LayerNormParams::new(d),
                slots: [
                    make(&s[0], &mut rng),
                    make(&s[1], &mut rng),
                    make(&s[2], &mut rng),
                    make(&s[3], &mut rng),
                    make(&s[4], &mut rng),
                    make(&s[5], &mut rng),
                ],
            });
        }
        let head_w = Matrix::random_with(d, c, &mut rng, 1.0 / (d as f64).sqrt());
        Ok(Self {
            cfg: cfg.clone(),
            patch_w,
            patch_b: vec![0.0; d],
            pos,
            blocks,
            ln_f: LayerNormParams::new(d),
            head_w,
            head_b: vec![0.0; c],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn slots(&self) -> Vec<LinearSlot> {
        self.cfg.slots()
    }

    pub fn slot(&self, id: SlotId) -> &SlotParams {
        self.blocks[id.block].slot(id.role)
    }

    pub fn slot_mut(&mut self, id: SlotId) -> &mut SlotParams {
        self.blocks[id.block].slot_mut(id.role)
    }

    /// Stored factor width per slot (`None` for dense slots).
    pub fn max_ranks(&self) -> Vec<Option<usize>> {
        self.slots().iter().map(|s| self.slot(s.id).max_rank()).collect()
    }

    /// Every parameter tensor in a fixed order shared by all models of the
    /// same structure.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        collect_params!(self, ParamRef, iter, data, as_slice)
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        collect_params!(self, ParamMut, iter_mut, data_mut, as_mut_slice)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// A model of identical structure with every parameter zeroed; used as
    /// gradient and momentum buffers.
    pub fn zeros_like(&self) -> Model {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data.fill(0.0);
        }
        z
    }

    /// Sum of all parameters as raw bit patterns; any change to any weight
    /// changes it with overwhelming probability.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            for v in p.data {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Rounds every parameter to single precision, the precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            for v in p.data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn resolve_ranks(&self, ranks: Option<&[usize]>) -> Result<Vec<Option<usize>>> {
        let slots = self.slots();
        if let Some(r) = ranks {
            if r.len() != slots.len() {
                return Err(Error::shape(
                    "forward",
                    format!("{} ranks for {} slots", r.len(), slots.len()),
                ));
            }
        }
        slots
            .iter()
            .enumerate()
            .map(|(i, s)| match self.slot(s.id).max_rank() {
                None => Ok(None),
                Some(max) => {
                    let r = ranks.map_or(max, |r| r[i]);
                    if r == 0 || r > max {
                        Err(Error::RankNotInChoices {
                            slot: s.id.to_string(),
                            rank: r,
                        })
                    } else {
                        Ok(Some(r))
                    }
                }
            })
            .collect()
    }

    fn patchify(&self, images: &[f64], batch: usize) -> Result<Matrix> {
        let (side, ps) = (self.cfg.image_side, self.cfg.patch_side);
        if batch == 0 || images.len() != batch * side * side {
            return Err(Error::shape(
                "forward",
                format!("{} pixels for a batch of {batch} {side}×{side} images", images.len()),
            ));
        }
        let g = side / ps;
        let t = g * g;
        let mut out = Matrix::zeros(batch * t, ps * ps);
        for b in 0..batch {
            let img = &images[b * side * side..(b + 1) * side * side];
            for pr in 0..g {
                for pc in 0..g {
                    let row = out.row_mut(b * t + pr * g + pc);
                    for i in 0..ps {
                        for j in 0..ps {
                            row[i * ps + j] = img[(pr * ps + i) * side + pc * ps + j];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Logits for a batch of images (`batch · side²` pixels, row-major per image).
    /// `ranks` gives one rank per slot; dense slots ignore theirs and `None`
    /// runs factored slots at full stored width.
    pub fn forward(&self, images: &[f64], batch: usize, ranks: Option<&[usize]>) -> Result<Matrix> {
        Ok(self.forward_train(images, batch, ranks)?.0)
    }

    pub fn forward_train(
        &self,
        images: &[f64],
        batch: usize,
        ranks: Option<&[usize]>,
    ) -> Result<(Matrix, ForwardCache)> {
        let ranks = self.resolve_ranks(ranks)?;
        let (t, d) = (self.cfg.tokens(), self.cfg.embed_dim);
        let patches = self.patchify(images, batch)?;
        let mut x = linear_fwd(&patches, &self.patch_w, &self.patch_b)?;
        flops::add(flops::ELEMENTWISE * (batch * t * d) as u64);
        for b in 0..batch {
            for i in 0..t {
                for (o, p) in x.row_mut(b * t + i).iter_mut().zip(self.pos.row(i)) {
                    *o += p;
                }
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let (y, cache) = self.block_fwd(block, &x, batch, &ranks[bi * 6..(bi + 1) * 6])?;
            caches.push(cache);
            x = y;
        }
        let (xf, ln_f) = layernorm_fwd(&x, &self.ln_f.gain, &self.ln_f.shift)?;
        flops::add(flops::ELEMENTWISE * (batch * t * d) as u64);
        let mut pooled = Matrix::zeros(batch, d);
        for b in 0..batch {
            let prow = pooled.row_mut(b);
            for i in 0..t {
                for (o, v) in prow.iter_mut().zip(xf.row(b * t + i)) {
                    *o += v;
                }
            }
            for o in prow.iter_mut() {
                *o /= t as f64;
            }
        }
        let logits = linear_fwd(&pooled, &self.head_w, &self.head_b)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok((
            logits,
            ForwardCache {
                batch,
                ranks,
                patches,
                blocks: caches,
                ln_f,
                pooled,
            },
        ))
    }

    fn slot_fwd(sp: &SlotParams, x: &Matrix, rank: Option<usize>) -> Result<(Matrix, Option<Matrix>)> {
        match (&sp.weights, rank) {
            (SlotWeights::Dense(w), _) => Ok((linear_fwd(x, w, &sp.bias)?, None)),
            (SlotWeights::Factored { u, v }, Some(r)) => {
                let (y, z) = lowrank_linear_fwd(x, u.prefix(r), v.prefix(r), &sp.bias)?;
                Ok((y, Some(z)))
            }
            (SlotWeights::Factored { .. }, None) => unreachable!("ranks resolved for factored slots"),
        }
    }

    fn block_fwd(
        &self,
        block: &Block,
        x: &Matrix,
        batch: usize,
        ranks: &[Option<usize>],
    ) -> Result<(Matrix, BlockCache)> {
        let shape = AttentionShape {
            batch,
            tokens: self.cfg.tokens(),
            heads: self.cfg.heads,
        };
        let (h1, ln1) = layernorm_fwd(x, &block.ln1.gain, &block.ln1.shift)?;
        let mut inner: [Option<Matrix>; 6] = Default::default();
        let (q, zq) = Self::slot_fwd(block.slot(Role::Q), &h1, ranks[0])?;
        let (k, zk) = Self::slot_fwd(block.slot(Role::K), &h1, ranks[1])?;
        let (v, zv) = Self::slot_fwd(block.slot(Role::V), &h1, ranks[2])?;
        let (attn_out, attn) = attention_fwd(&q, &k, &v, shape)?;
        let (proj, zp) = Self::slot_fwd(block.slot(Role::Proj), &attn_out, ranks[3])?;
        let x_mid = residual(x, &proj);
        let (h2, ln2) = layernorm_fwd(&x_mid, &block.ln2.gain, &block.ln2.shift)?;
        let (fc1_out, z1) = Self::slot_fwd(block.slot(Role::Fc1), &h2, ranks[4])?;
        let act = gelu_fwd(&fc1_out);
        let (fc2_out, z2) = Self::slot_fwd(block.slot(Role::Fc2), &act, ranks[5])?;
        let y = residual(&x_mid, &fc2_out);
        inner[0] = zq;
        inner[1] = zk;
        inner[2] = zv;
        inner[3] = zp;
        inner[4] = z1;
        inner[5] = z2;
        Ok((
            y,
            BlockCache {
                ln1,
                h1,
                slot_inner: inner,
                q,
                k,
                v,
                attn,
                attn_out,
                ln2,
                h2,
                fc1_out,
                act,
            },
        ))
    }

    /// Back-propagates `dlogits` through the pass recorded in `cache`,
    /// accumulating into `grads` (a [`Model::zeros_like`] buffer). Factor
    /// gradients land in the leading `r` columns only.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix, grads: &mut Model) -> Result<()> {
        let batch = cache.batch;
        let (t, d) = (self.cfg.tokens(), self.cfg.embed_dim);
        if dlogits.shape() != (batch, self.cfg.classes) {
            return Err(Error::shape("backward", format!("dlogits {:?}", dlogits.shape())));
        }
        let head = linear_bwd(&cache.pooled, &self.head_w, dlogits)?;
        accumulate(grads.head_w.data_mut(), head.dw.data());
        accumulate(&mut grads.head_b, &head.db);
        let mut dxf = Matrix::zeros(batch * t, d);
        for b in 0..batch {
            for i in 0..t {
                for (o, g) in dxf.row_mut(b * t + i).iter_mut().zip(head.dx.row(b)) {
                    *o = g / t as f64;
                }
            }
        }
        let (mut dx, dg, ds) = layernorm_bwd(&cache.ln_f, &self.ln_f.gain, &dxf)?;
        accumulate(&mut grads.ln_f.gain, &dg);
        accumulate(&mut grads.ln_f.shift, &ds);

        for bi in (0..self.blocks.len()).rev() {
            dx = self.block_bwd(
                bi,
                &cache.blocks[bi],
                &cache.ranks[bi * 6..(bi + 1) * 6],
                &dx,
                batch,
                grads,
            )?;
        }

        let mut dpos = vec![0.0; t * d];
        for b in 0..batch {
            for i in 0..t {
                for (o, g) in dpos[i * d..(i + 1) * d].iter_mut().zip(dx.row(b * t + i)) {
                    *o += g;
                }
            }
        }
        accumulate(grads.pos.data_mut(), &dpos);
        let emb = linear_bwd(&cache.patches, &self.patch_w, &dx)?;
        accumulate(grads.patch_w.data_mut(), emb.dw.data());
        accumulate(&mut grads.patch_b, &emb.db);
        Ok(())
    }

    fn slot_bwd(
        sp: &SlotParams,
        gsp: &mut SlotParams,
        x: &Matrix,
        inner: Option<&Matrix>,
        rank: Option<usize>,
        dy: &Matrix,
    ) -> Result<Matrix> {
        match (&sp.weights, &mut gsp.weights) {
            (SlotWeights::Dense(w), SlotWeights::Dense(gw)) => {
                let g = linear_bwd(x, w, dy)?;
                accumulate(gw.data_mut(), g.dw.data());
                accumulate(&mut gsp.bias, &g.db);
                Ok(g.dx)
            }
            (SlotWeights::Factored { u, v }, SlotWeights::Factored { u: gu, v: gv }) => {
                let r = rank.expect("rank for factored slot");
                let z = inner.expect("cached inner activation");
                let g = lowrank_linear_bwd(x, u.prefix(r), v.prefix(r), z, dy)?;
                scatter_prefix(gu, &g.du);
                scatter_prefix(gv, &g.dv);
                accumulate(&mut gsp.bias, &g.db);
                Ok(g.dx)
            }
            _ => Err(Error::shape("backward", "gradient buffer structure differs from model")),
        }
    }

    fn block_bwd(
        &self,
        bi: usize,
        c: &BlockCache,
        ranks: &[Option<usize>],
        dy: &Matrix,
        batch: usize,
        grads: &mut Model,
    ) -> Result<Matrix> {
        let block = &self.blocks[bi];
        let gblock = &mut grads.blocks[bi];
        let shape = AttentionShape {
            batch,
            tokens: self.cfg.tokens(),
            heads: self.cfg.heads,
        };
        // y = x_mid + fc2(gelu(fc1(ln2(x_mid))))
        let dact = Self::slot_bwd(
            block.slot(Role::Fc2),
            gblock.slot_mut(Role::Fc2),
            &c.act,
            c.slot_inner[5].as_ref(),
            ranks[5],
            dy,
        )?;
        let dfc1 = gelu_bwd(&c.fc1_out, &dact)?;
        let dh2 = Self::slot_bwd(
            block.slot(Role::Fc1),
            gblock.slot_mut(Role::Fc1),
            &c.h2,
            c.slot_inner[4].as_ref(),
            ranks[4],
            &dfc1,
        )?;
        let (dxm_norm, dg2, ds2) = layernorm_bwd(&c.ln2, &block.ln2.gain, &dh2)?;
        accumulate(&mut gblock.ln2.gain, &dg2);
        accumulate(&mut gblock.ln2.shift, &ds2);
        let dx_mid = dy.add(&dxm_norm)?;

        // x_mid = x + proj(attn(q, k, v))
        let dattn = Self::slot_bwd(
            block.slot(Role::Proj),
            gblock.slot_mut(Role::Proj),
            &c.attn_out,
            c.slot_inner[3].as_ref(),
            ranks[3],
            &dx_mid,
        )?;
        let (dq, dk, dv) = attention_bwd(&c.q, &c.k, &c.v, &c.attn, &dattn, shape)?;
        let mut dh1 = Self::slot_bwd(
            block.slot(Role::Q),
            gblock.slot_mut(Role::Q),
            &c.h1,
            c.slot_inner[0].as_ref(),
            ranks[0],
            &dq,
        )?;
        let dh1k = Self::slot_bwd(
            block.slot(Role::K),
            gblock.slot_mut(Role::K),
            &c.h1,
            c.slot_inner[1].as_ref(),
            ranks[1],
            &dk,
        )?;
        let dh1v = Self::slot_bwd(
            block.slot(Role::V),
            gblock.slot_mut(Role::V),
            &c.h1,
            c.slot_inner[2].as_ref(),
            ranks[2],
            &dv,
        )?;
        accumulate(dh1.data_mut(), dh1k.data());
        accumulate(dh1.data_mut(), dh1v.data());
        let (dx_norm, dg1, ds1) = layernorm_bwd(&c.ln1, &block.ln1.gain, &dh1)?;
        accumulate(&mut gblock.ln1.gain, &dg1);
        accumulate(&mut gblock.ln1.shift, &ds1);
        dx_mid.add(&dx_norm)
    }
}

fn residual(x: &Matrix, y: &Matrix) -> Matrix {
    flops::add(flops::ELEMENTWISE * x.data().len() as u64);
    x.add(y).expect("residual shapes")
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Adds an `rows × r` gradient into the leading `r` columns of a wider buffer.
fn scatter_prefix(dst: &mut Matrix, g: &Matrix) {
    let r = g.cols();
    for i in 0..g.rows() {
        for (d, s) in dst.row_mut(i)[..r].iter_mut().zip(g.row(i)) {
            *d += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_has_twelve_slots() {
        let slots = ModelConfig::default().slots();
        assert_eq!(slots.len(), 12);
        for (i, s) in slots.iter().enumerate() {
            assert_eq!(s.id.index(), i);
        }
        let fc1 = slots[4];
        assert_eq!((fc1.id.role, fc1.m, fc1.n), (Role::Fc1, 32, 64));
        assert_eq!(slots[11].id.to_string(), "blocks.1.fc2");
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let cfg = ModelConfig {
            embed_dim: 33,
            heads: 4,
            ..Default::default()
        };
        assert!(matches!(Model::new(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn init_and_forward_are_deterministic() {
        let cfg = ModelConfig::default();
        let a = Model::new(&cfg).unwrap();
        let b = Model::new(&cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let img = Matrix::seeded_random(2, 64, 1, 1.0);
        assert_eq!(
            a.forward(img.data(), 2, None).unwrap(),
            b.forward(img.data(), 2, None).unwrap()
        );
        let other = Model::new(&ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.checksum(), other.checksum());
    }

    #[test]
    fn zeros_like_matches_structure() {
        let m = Model::new(&ModelConfig::default()).unwrap();
        let z = m.zeros_like();
        assert_eq!(z.param_count(), m.param_count());
        assert!(z.params().iter().all(|p| p.data.iter().all(|&v| v == 0.0)));
        let names: Vec<_> = m.params().into_iter().map(|p| p.name).collect();
        assert_eq!(names.first().map(String::as_str), Some("patch.w"));
        assert!(names.contains(&"blocks.0.q.w".to_string()));
        assert_eq!(names.last().map(String::as_str), Some("head.b"));
    }

    #[test]
    fn rank_out_of_range_is_rejected() {
        let mut m = Model::new(&ModelConfig::default()).unwrap();
        let id = m.slots()[0].id;
        m.slot_mut(id).weights = SlotWeights::Factored {
            u: Matrix::zeros(32, 8),
            v: Matrix::zeros(32, 8),
        };
        let img = vec![0.0; 64];
        let mut ranks = vec![1; 12];
        ranks[0] = 9;
        assert!(matches!(
            m.forward(&img, 1, Some(&ranks)),
            Err(Error::RankNotInChoices { .. })
        ));
        ranks[0] = 8;
        assert!(m.forward(&img, 1, Some(&ranks)).is_ok());
    }
}
