//! Tiny frozen sequential recommender with adapter injection points.
//!
//! The model embeds item ids, adds learned positional embeddings and runs
//! `num_blocks` single-head causal self-attention blocks, each wrapped in a
//! residual connection. The representation at the last position is scored
//! against the output projection restricted to one domain's item range.
//!
//! Adapters attach to every `W_Q`, `W_K`, `W_V`, `W_O`. Gradients are
//! computed by hand-written reverse mode; [`grad_trainables`] chains the
//! per-matrix gradients through the client's update composition.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{s, Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lowrank::{compose, frob_inner, AdapterPair, Matrix};
use crate::wire;

pub const PROJECTIONS_PER_BLOCK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];

    fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }
}

/// Identifies one adapted attention matrix: `block * 4 + projection`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub u32);

impl LayerId {
    pub fn new(block: usize, projection: Projection) -> Self {
        let p = Projection::ALL
            .iter()
            .position(|&x| x == projection)
            .expect("projection listed in ALL");
        LayerId((block * PROJECTIONS_PER_BLOCK + p) as u32)
    }

    pub fn block(self) -> usize {
        self.0 as usize / PROJECTIONS_PER_BLOCK
    }

    pub fn projection(self) -> Projection {
        Projection::ALL[self.0 as usize % PROJECTIONS_PER_BLOCK]
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}.{}", self.block(), self.projection().short())
    }
}

/// A contiguous block of global item ids, e.g. one domain's vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemRange {
    pub start: usize,
    pub len: usize,
}

impl ItemRange {
    pub fn contains(&self, id: usize) -> bool {
        id >= self.start && id < self.start + self.len
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// One next-item prediction example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub context: Vec<usize>,
    pub target: usize,
    pub candidates: ItemRange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub max_seq_len: usize,
    pub num_blocks: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.embed_dim < 2 {
            problems.push(format!("embed_dim {} < 2", self.embed_dim));
        }
        if self.vocab_size < 2 {
            problems.push(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            problems.push(format!("max_seq_len {} < 2", self.max_seq_len));
        }
        if self.num_blocks < 1 {
            problems.push("num_blocks must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Every adapter target, in block-major order.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.num_blocks)
            .flat_map(|b| Projection::ALL.iter().map(move |&p| LayerId::new(b, p)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl AttentionBlock {
    fn get(&self, p: Projection) -> &Matrix {
        match p {
            Projection::Query => &self.w_q,
            Projection::Key => &self.w_k,
            Projection::Value => &self.w_v,
            Projection::Output => &self.w_o,
        }
    }

    fn get_mut(&mut self, p: Projection) -> &mut Matrix {
        match p {
            Projection::Query => &mut self.w_q,
            Projection::Key => &mut self.w_k,
            Projection::Value => &mut self.w_v,
            Projection::Output => &mut self.w_o,
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            w_q: Matrix::zeros((d, d)),
            w_k: Matrix::zeros((d, d)),
            w_v: Matrix::zeros((d, d)),
            w_o: Matrix::zeros((d, d)),
        }
    }
}

/// Backbone weights. Mutation is only possible before [`freeze`](Self::freeze).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    config: BackboneConfig,
    token_embedding: Matrix,
    positional_embedding: Matrix,
    blocks: Vec<AttentionBlock>,
    output_projection: Matrix,
    frozen: bool,
}

/// Draws every entry i.i.d. from `U[-1/√d, 1/√d]`.
pub fn init_backbone(config: BackboneConfig, seed: u64) -> Result<BackboneParams> {
    config.validate()?;
    let d = config.embed_dim;
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize| {
        Matrix::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
    };
    let token_embedding = draw(config.vocab_size, d);
    let positional_embedding = draw(config.max_seq_len, d);
    let blocks = (0..config.num_blocks)
        .map(|_| AttentionBlock {
            w_q: draw(d, d),
            w_k: draw(d, d),
            w_v: draw(d, d),
            w_o: draw(d, d),
        })
        .collect();
    let output_projection = draw(config.vocab_size, d);
    Ok(BackboneParams {
        config,
        token_embedding,
        positional_embedding,
        blocks,
        output_projection,
        frozen: false,
    })
}

impl BackboneParams {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn token_embedding(&self) -> &Matrix {
        &self.token_embedding
    }

    pub fn positional_embedding(&self) -> &Matrix {
        &self.positional_embedding
    }

    pub fn output_projection(&self) -> &Matrix {
        &self.output_projection
    }

    /// Mutable access for constructing test fixtures; refused once frozen.
    pub fn output_projection_mut(&mut self) -> Result<&mut Matrix> {
        if self.frozen {
            return Err(Error::contract("backbone is frozen"));
        }
        Ok(&mut self.output_projection)
    }

    /// The frozen weight matrix an adapter with this id perturbs.
    pub fn target(&self, layer: LayerId) -> Result<&Matrix> {
        self.blocks
            .get(layer.block())
            .map(|b| b.get(layer.projection()))
            .ok_or_else(|| Error::Input(format!("no adapter target {layer}")))
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        self.config.layer_ids()
    }

    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.token_embedding, &self.positional_embedding];
        for b in &self.blocks {
            v.extend([&b.w_q, &b.w_k, &b.w_v, &b.w_o]);
        }
        v.push(&self.output_projection);
        v
    }

    /// SHA-256 over the bit patterns of every entry.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for m in self.tensors() {
            for v in m.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Serialized snapshot: a header of five `u32` dims followed by the
    /// tensors in the adapter wire's matrix format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        for v in [
            c.vocab_size,
            c.embed_dim,
            c.max_seq_len,
            c.num_blocks,
            self.frozen as usize,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend(wire::encode_matrices(self.tensors()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Wire("backbone snapshot header truncated".into()));
        }
        let word = |i: usize| {
            u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize
        };
        let config = BackboneConfig {
            vocab_size: word(0),
            embed_dim: word(1),
            max_seq_len: word(2),
            num_blocks: word(3),
        };
        config.validate()?;
        let frozen = word(4) != 0;
        let mut mats = wire::decode_matrices(&bytes[20..])?.into_iter();
        let expected = 3 + 4 * config.num_blocks;
        if mats.len() != expected {
            return Err(Error::Wire(format!(
                "expected {expected} tensors, found {}",
                mats.len()
            )));
        }
        let token_embedding = mats.next().expect("counted");
        let positional_embedding = mats.next().expect("counted");
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for _ in 0..config.num_blocks {
            let mut it = mats.by_ref().take(4);
            blocks.push(AttentionBlock {
                w_q: it.next().expect("counted"),
                w_k: it.next().expect("counted"),
                w_v: it.next().expect("counted"),
                w_o: it.next().expect("counted"),
            });
        }
        let output_projection = mats.next().expect("counted");
        let d = config.embed_dim;
        let shapes_ok = token_embedding.dim() == (config.vocab_size, d)
            && positional_embedding.dim() == (config.max_seq_len, d)
            && output_projection.dim() == (config.vocab_size, d)
            && blocks.iter().all(|b| {
                Projection::ALL.iter().all(|&p| b.get(p).dim() == (d, d))
            });
        if !shapes_ok {
            return Err(Error::Wire("tensor shapes inconsistent with header".into()));
        }
        Ok(Self {
            config,
            token_embedding,
            positional_embedding,
            blocks,
            output_projection,
            frozen,
        })
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        let t = sample.context.len();
        if t == 0 || t > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {t} outside [1, {}]",
                self.config.max_seq_len
            )));
        }
        let c = sample.candidates;
        if c.len == 0 || c.end() > self.config.vocab_size {
            return Err(Error::Input(format!(
                "candidate range {}..{} outside vocabulary of {}",
                c.start,
                c.end(),
                self.config.vocab_size
            )));
        }
        if let Some(&bad) = sample
            .context
            .iter()
            .find(|&&id| id >= self.config.vocab_size)
        {
            return Err(Error::Input(format!("unknown item id {bad}")));
        }
        if !c.contains(sample.target) {
            return Err(Error::Input(format!(
                "target {} outside candidate range {}..{}",
                sample.target,
                c.start,
                c.end()
            )));
        }
        Ok(())
    }
}

/// Per-layer additive perturbations `Δ` applied as `W + Δ`.
pub type DeltaMap = BTreeMap<LayerId, Matrix>;

/// The backbone with deltas folded into its attention matrices.
pub struct EffectiveModel<'a> {
    params: &'a BackboneParams,
    blocks: Vec<AttentionBlock>,
}

impl<'a> EffectiveModel<'a> {
    pub fn new(params: &'a BackboneParams, deltas: &DeltaMap) -> Result<Self> {
        let mut blocks = params.blocks.clone();
        for (&layer, delta) in deltas {
            let block = blocks
                .get_mut(layer.block())
                .ok_or_else(|| Error::Input(format!("no adapter target {layer}")))?;
            let w = block.get_mut(layer.projection());
            if w.dim() != delta.dim() {
                return Err(Error::dim(format!(
                    "delta for {layer} has shape {:?}, target is {:?}",
                    delta.dim(),
                    w.dim()
                )));
            }
            *w += delta;
        }
        Ok(Self { params, blocks })
    }

    /// Loss and candidate logits for one sample.
    pub fn loss(&self, sample: &Sample) -> Result<(f64, Array1<f64>)> {
        self.params.check_sample(sample)?;
        let cache = self.forward(&sample.context);
        let logits = self.logits(&cache, sample.candidates);
        let loss = nll(&logits, sample.target - sample.candidates.start);
        Ok((loss, logits))
    }

    /// Candidate logits only.
    pub fn score(&self, context: &[usize], candidates: ItemRange) -> Result<Array1<f64>> {
        let probe = Sample {
            context: context.to_vec(),
            target: candidates.start,
            candidates,
        };
        self.params.check_sample(&probe)?;
        let cache = self.forward(context);
        Ok(self.logits(&cache, candidates))
    }

    fn logits(&self, cache: &ForwardCache, candidates: ItemRange) -> Array1<f64> {
        let u = self
            .params
            .output_projection
            .slice(s![candidates.start..candidates.end(), ..]);
        u.dot(&cache.last())
    }

    fn forward(&self, context: &[usize]) -> ForwardCache {
        let p = self.params;
        let t = context.len();
        let d = p.config.embed_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut x = Matrix::zeros((t, d));
        for (pos, &id) in context.iter().enumerate() {
            let mut row = x.row_mut(pos);
            row += &p.token_embedding.row(id);
            row += &p.positional_embedding.row(pos);
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for w in &self.blocks {
            let q = x.dot(&w.w_q.t());
            let k = x.dot(&w.w_k.t());
            let v = x.dot(&w.w_v.t());
            let mut attn = q.dot(&k.t()) * scale;
            causal_softmax_rows(&mut attn);
            let z = attn.dot(&v);
            let out = &x + &z.dot(&w.w_o.t());
            blocks.push(BlockCache {
                input: x,
                q,
                k,
                v,
                attn,
                z,
            });
            x = out;
        }
        ForwardCache { blocks, output: x }
    }

    /// Reverse pass for one sample, accumulating `weight · ∂loss/∂θ` into `grads`.
    fn backward(
        &self,
        sample: &Sample,
        weight: f64,
        grads: &mut Gradients,
        full: bool,
    ) -> Result<f64> {
        self.params.check_sample(sample)?;
        let p = self.params;
        let d = p.config.embed_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let cache = self.forward(&sample.context);
        let cands = sample.candidates;
        let logits = self.logits(&cache, cands);
        let target = sample.target - cands.start;
        let loss = nll(&logits, target);

        // dL/dlogits = softmax - onehot
        let mut dlogits = softmax(&logits);
        dlogits[target] -= 1.0;
        dlogits *= weight;

        let u = p.output_projection.slice(s![cands.start..cands.end(), ..]);
        let h = cache.last();
        let t = sample.context.len();
        let mut dx = Matrix::zeros((t, d));
        dx.row_mut(t - 1).assign(&u.t().dot(&dlogits));
        if full {
            let mut du = grads
                .output_projection
                .slice_mut(s![cands.start..cands.end(), ..]);
            for (i, g) in dlogits.iter().enumerate() {
                du.row_mut(i).scaled_add(*g, &h);
            }
        }

        for (bi, (w, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let g = &mut grads.blocks[bi];
            // out = x + z W_oᵀ
            let d_out = &dx;
            g.w_o += &d_out.t().dot(&c.z);
            let dz = d_out.dot(&w.w_o);
            // z = attn v
            let dattn = dz.dot(&c.v.t());
            let dv = c.attn.t().dot(&dz);
            // attn = softmax(q kᵀ · scale) with causal mask
            let mut dscore = Matrix::zeros(c.attn.dim());
            for i in 0..t {
                let a = c.attn.row(i);
                let da = dattn.row(i);
                let dot: f64 = a.iter().zip(da.iter()).take(i + 1).map(|(x, y)| x * y).sum();
                for j in 0..=i {
                    dscore[[i, j]] = a[j] * (da[j] - dot) * scale;
                }
            }
            let dq = dscore.dot(&c.k);
            let dk = dscore.t().dot(&c.q);
            g.w_q += &dq.t().dot(&c.input);
            g.w_k += &dk.t().dot(&c.input);
            g.w_v += &dv.t().dot(&c.input);
            let mut dinput = dx.clone();
            dinput += &dq.dot(&w.w_q);
            dinput += &dk.dot(&w.w_k);
            dinput += &dv.dot(&w.w_v);
            dx = dinput;
        }

        if full {
            for (pos, &id) in sample.context.iter().enumerate() {
                let row = dx.row(pos);
                let mut te = grads.token_embedding.row_mut(id);
                te += &row;
                let mut pe = grads.positional_embedding.row_mut(pos);
                pe += &row;
            }
        }
        Ok(loss)
    }
}

struct BlockCache {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Matrix,
    z: Matrix,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    output: Matrix,
}

impl ForwardCache {
    fn last(&self) -> ArrayView1<'_, f64> {
        self.output.row(self.output.nrows() - 1)
    }
}

/// Gradient buffers shaped like the backbone.
#[derive(Clone, Debug)]
struct Gradients {
    token_embedding: Matrix,
    positional_embedding: Matrix,
    blocks: Vec<AttentionBlock>,
    output_projection: Matrix,
}

impl Gradients {
    fn zeros(config: &BackboneConfig, full: bool) -> Self {
        let d = config.embed_dim;
        let (v, t) = if full {
            (config.vocab_size, config.max_seq_len)
        } else {
            (0, 0)
        };
        Self {
            token_embedding: Matrix::zeros((v, d)),
            positional_embedding: Matrix::zeros((t, d)),
            blocks: (0..config.num_blocks).map(|_| AttentionBlock::zeros(d)).collect(),
            output_projection: Matrix::zeros((v, d)),
        }
    }

    fn layer(&self, layer: LayerId) -> &Matrix {
        self.blocks[layer.block()].get(layer.projection())
    }
}

fn causal_softmax_rows(scores: &mut Matrix) {
    let t = scores.nrows();
    for i in 0..t {
        let mut row = scores.row_mut(i);
        let max = row
            .iter()
            .take(i + 1)
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for j in 0..t {
            if j <= i {
                row[j] = (row[j] - max).exp();
                sum += row[j];
            } else {
                row[j] = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

/// `-log softmax(logits)[target]`, computed stably.
fn nll(logits: &Array1<f64>, target: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Loss and candidate logits of one sample under `W + Δ`.
pub fn forward_loss(
    params: &BackboneParams,
    deltas: &DeltaMap,
    sample: &Sample,
) -> Result<(f64, Array1<f64>)> {
    EffectiveModel::new(params, deltas)?.loss(sample)
}

/// Mean loss over a batch.
pub fn mean_loss(params: &BackboneParams, deltas: &DeltaMap, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let model = EffectiveModel::new(params, deltas)?;
    let mut total = 0.0;
    for s in batch {
        total += model.loss(s)?.0;
    }
    Ok(total / batch.len() as f64)
}

/// Mean batch loss and `∂loss/∂W_eff` for every adapter target.
pub fn grad_effective(
    params: &BackboneParams,
    deltas: &DeltaMap,
    batch: &[Sample],
) -> Result<(f64, DeltaMap)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let model = EffectiveModel::new(params, deltas)?;
    let mut grads = Gradients::zeros(&params.config, false);
    let w = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        loss += w * model.backward(s, w, &mut grads, false)?;
    }
    let out = params
        .layer_ids()
        .into_iter()
        .map(|l| (l, grads.layer(l).clone()))
        .collect();
    Ok((loss, out))
}

/// The client's own trainable adapters, one pair per attention matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pairs: BTreeMap<LayerId, AdapterPair>,
}

impl AdapterSet {
    /// `A ~ U[-1/√r, 1/√r]`, `B = 0`, so the initial update is exactly zero.
    pub fn init(params: &BackboneParams, rank: usize, seed: u64) -> Result<Self> {
        let d = params.embed_dim();
        if rank == 0 || rank > d {
            return Err(Error::config(format!("rank {rank} outside [1, {d}]")));
        }
        let bound = 1.0 / (rank as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = params
            .layer_ids()
            .into_iter()
            .map(|l| {
                let a = Matrix::from_shape_simple_fn((rank, d), || rng.random_range(-bound..=bound));
                let b = Matrix::zeros((d, rank));
                (l, AdapterPair { layer_id: l, a_mat: a, b_mat: b })
            })
            .collect();
        Ok(Self { pairs })
    }

    /// Builds a set, checking every pair against the backbone targets.
    pub fn from_pairs(
        params: &BackboneParams,
        pairs: impl IntoIterator<Item = AdapterPair>,
    ) -> Result<Self> {
        let pairs: BTreeMap<_, _> = pairs.into_iter().map(|p| (p.layer_id, p)).collect();
        let ids = params.layer_ids();
        if pairs.len() != ids.len() || !ids.iter().all(|l| pairs.contains_key(l)) {
            return Err(Error::dim(
                "adapter set must cover exactly the attention projections",
            ));
        }
        for p in pairs.values() {
            p.validate()?;
            let target = params.target(p.layer_id)?;
            if (p.d_out(), p.d_in()) != target.dim() {
                return Err(Error::dim(format!(
                    "adapter {} composes to {}×{}, target is {:?}",
                    p.layer_id,
                    p.d_out(),
                    p.d_in(),
                    target.dim()
                )));
            }
        }
        Ok(Self { pairs })
    }

    #[cfg(test)]
    pub(crate) fn from_pairs_unchecked(pairs: impl IntoIterator<Item = AdapterPair>) -> Self {
        Self {
            pairs: pairs.into_iter().map(|p| (p.layer_id, p)).collect(),
        }
    }

    pub fn get(&self, layer: LayerId) -> Option<&AdapterPair> {
        self.pairs.get(&layer)
    }

    pub fn get_mut(&mut self, layer: LayerId) -> Option<&mut AdapterPair> {
        self.pairs.get_mut(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = &AdapterPair> {
        self.pairs.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut AdapterPair> {
        self.pairs.values_mut()
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.pairs.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.pairs.values().next().map_or(0, |p| p.rank())
    }

    pub fn param_count(&self) -> usize {
        self.pairs.values().map(|p| p.param_count()).sum()
    }

    /// `B·A` per layer.
    pub fn composed(&self) -> Result<DeltaMap> {
        self.pairs
            .iter()
            .map(|(&l, p)| Ok((l, compose(p)?)))
            .collect()
    }
}

/// How a client's delta is assembled from its trainables and received pairs.
#[derive(Clone, Copy, Debug)]
pub enum Composition<'a> {
    /// `ΔW = B_own·A_own`.
    Own,
    /// `ΔW = Σ_j α_j B_j A_j`, with slot `self_index` taken by the own pair.
    Weighted {
        received: &'a BTreeMap<LayerId, Vec<AdapterPair>>,
        alpha: &'a [f64],
        self_index: usize,
    },
    /// `ΔW = (Σ_j α_j B_j)(Σ_j α_j A_j)`, slot `self_index` taken by the own pair.
    Separate {
        received: &'a BTreeMap<LayerId, Vec<AdapterPair>>,
        alpha: &'a [f64],
        self_index: usize,
    },
}

impl Composition<'_> {
    fn slots<'s>(
        received: &'s BTreeMap<LayerId, Vec<AdapterPair>>,
        alpha: &[f64],
        self_index: usize,
        own: &'s AdapterPair,
    ) -> Result<Vec<&'s AdapterPair>> {
        let layer = own.layer_id;
        let list = received
            .get(&layer)
            .ok_or_else(|| Error::protocol(format!("no received components for layer {layer}")))?;
        if list.len() != alpha.len() {
            return Err(Error::protocol(format!(
                "layer {layer}: {} components for {} weights",
                list.len(),
                alpha.len()
            )));
        }
        if self_index >= list.len() {
            return Err(Error::protocol(format!(
                "self index {self_index} outside {} components",
                list.len()
            )));
        }
        Ok(list
            .iter()
            .enumerate()
            .map(|(j, p)| if j == self_index { own } else { p })
            .collect())
    }

    /// Assembles the delta for one layer.
    pub fn delta(&self, own: &AdapterPair) -> Result<Matrix> {
        match *self {
            Composition::Own => compose(own),
            Composition::Weighted {
                received,
                alpha,
                self_index,
            } => {
                let slots = Self::slots(received, alpha, self_index, own)?;
                let mut out = Matrix::zeros((own.d_out(), own.d_in()));
                for (p, &a) in slots.iter().zip(alpha) {
                    let m = compose(p)?;
                    if m.dim() != out.dim() {
                        return Err(Error::dim(format!("layer {}: mixed shapes", own.layer_id)));
                    }
                    out.scaled_add(a, &m);
                }
                Ok(out)
            }
            Composition::Separate {
                received,
                alpha,
                self_index,
            } => {
                let slots = Self::slots(received, alpha, self_index, own)?;
                let (b_sum, a_sum) = separate_sums(&slots, alpha, own)?;
                Ok(b_sum.dot(&a_sum))
            }
        }
    }

    /// Deltas for every layer of `own`.
    pub fn deltas(&self, own: &AdapterSet) -> Result<DeltaMap> {
        own.iter()
            .map(|p| Ok((p.layer_id, self.delta(p)?)))
            .collect()
    }

    fn alpha_len(&self) -> usize {
        match self {
            Composition::Own => 0,
            Composition::Weighted { alpha, .. } | Composition::Separate { alpha, .. } => alpha.len(),
        }
    }
}

fn separate_sums(slots: &[&AdapterPair], alpha: &[f64], own: &AdapterPair) -> Result<(Matrix, Matrix)> {
    let mut b_sum = Matrix::zeros(own.b_mat.dim());
    let mut a_sum = Matrix::zeros(own.a_mat.dim());
    for (p, &a) in slots.iter().zip(alpha) {
        if p.a_mat.dim() != a_sum.dim() || p.b_mat.dim() != b_sum.dim() {
            return Err(Error::dim(format!(
                "layer {}: factor shapes differ across clients",
                own.layer_id
            )));
        }
        b_sum.scaled_add(a, &p.b_mat);
        a_sum.scaled_add(a, &p.a_mat);
    }
    Ok((b_sum, a_sum))
}

/// Gradient of one own adapter pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad {
    pub a_mat: Matrix,
    pub b_mat: Matrix,
}

/// Gradients for everything a client may train. Backbone entries and other
/// clients' factors never receive a gradient.
#[derive(Clone, Debug)]
pub struct TrainableGrads {
    pub loss: f64,
    pub own: BTreeMap<LayerId, PairGrad>,
    pub alpha: Vec<f64>,
}

/// Exact gradients of the mean batch loss with respect to the client's own
/// adapter factors and its personalized weights.
pub fn grad_trainables(
    params: &BackboneParams,
    own: &AdapterSet,
    composition: &Composition<'_>,
    batch: &[Sample],
    batch_index: usize,
) -> Result<TrainableGrads> {
    if !params.is_frozen() {
        return Err(Error::contract("grad_trainables requires a frozen backbone"));
    }
    let deltas = composition.deltas(own)?;
    let (loss, g_eff) = grad_effective(params, &deltas, batch)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss in batch {batch_index}")));
    }
    let mut alpha_grad = vec![0.0; composition.alpha_len()];
    let mut own_grads = BTreeMap::new();
    for p in own.iter() {
        let g = &g_eff[&p.layer_id];
        let pg = match *composition {
            Composition::Own => PairGrad {
                a_mat: p.b_mat.t().dot(g),
                b_mat: g.dot(&p.a_mat.t()),
            },
            Composition::Weighted {
                received,
                alpha,
                self_index,
            } => {
                let slots = Composition::slots(received, alpha, self_index, p)?;
                for (j, q) in slots.iter().enumerate() {
                    alpha_grad[j] += frob_inner(g, &compose(q)?)?;
                }
                let w = alpha[self_index];
                PairGrad {
                    a_mat: p.b_mat.t().dot(g) * w,
                    b_mat: g.dot(&p.a_mat.t()) * w,
                }
            }
            Composition::Separate {
                received,
                alpha,
                self_index,
            } => {
                let slots = Composition::slots(received, alpha, self_index, p)?;
                let (b_sum, a_sum) = separate_sums(&slots, alpha, p)?;
                let d_b_sum = g.dot(&a_sum.t());
                let d_a_sum = b_sum.t().dot(g);
                for (j, q) in slots.iter().enumerate() {
                    alpha_grad[j] += frob_inner(&d_b_sum, &q.b_mat)? + frob_inner(&d_a_sum, &q.a_mat)?;
                }
                let w = alpha[self_index];
                PairGrad {
                    a_mat: d_a_sum * w,
                    b_mat: d_b_sum * w,
                }
            }
        };
        own_grads.insert(p.layer_id, pg);
    }
    if own_grads
        .values()
        .any(|g| !g.a_mat.iter().chain(g.b_mat.iter()).all(|v| v.is_finite()))
        || !alpha_grad.iter().all(|v| v.is_finite())
    {
        return Err(Error::Numeric(format!(
            "non-finite gradient in batch {batch_index}"
        )));
    }
    Ok(TrainableGrads {
        loss,
        own: own_grads,
        alpha: alpha_grad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Full-parameter minibatch gradient descent on the pooled sample, then
/// freezes. Returns the trained parameters and the mean loss per epoch,
/// with the loss before any update at index 0.
pub fn pretrain_backbone(
    mut params: BackboneParams,
    pooled: &[Sample],
    settings: PretrainSettings,
) -> Result<(BackboneParams, Vec<f64>)> {
    if params.frozen {
        return Err(Error::contract("pretraining a frozen backbone"));
    }
    if pooled.is_empty() {
        return Err(Error::contract("pretraining needs a non-empty pooled sample"));
    }
    if settings.batch_size == 0 || !(settings.lr.is_finite() && settings.lr >= 0.0) {
        return Err(Error::config("pretraining needs batch_size > 0 and a finite lr"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    let empty = DeltaMap::new();
    let mut history = vec![mean_loss(&params, &empty, pooled)?];
    for epoch in 0..settings.epochs {
        shuffle(&mut order, &mut rng);
        for (bi, chunk) in order.chunks(settings.batch_size).enumerate() {
            let grads = {
                let model = EffectiveModel::new(&params, &empty)?;
                let mut grads = Gradients::zeros(&params.config, true);
                let w = 1.0 / chunk.len() as f64;
                let mut loss = 0.0;
                for &i in chunk {
                    loss += w * model.backward(&pooled[i], w, &mut grads, true)?;
                }
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite pretraining loss at epoch {epoch}, batch {bi}"
                    )));
                }
                grads
            };
            let lr = settings.lr;
            params.token_embedding.scaled_add(-lr, &grads.token_embedding);
            params
                .positional_embedding
                .scaled_add(-lr, &grads.positional_embedding);
            params.output_projection.scaled_add(-lr, &grads.output_projection);
            for (b, g) in params.blocks.iter_mut().zip(&grads.blocks) {
                for p in Projection::ALL {
                    b.get_mut(p).scaled_add(-lr, g.get(p));
                }
            }
        }
        history.push(mean_loss(&params, &empty, pooled)?);
    }
    params.frozen = true;
    Ok((params, history))
}

/// Fisher–Yates with the crate's seeded generator.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
