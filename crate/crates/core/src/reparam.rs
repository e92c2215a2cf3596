//! Folding the branch into per-layer lookup tables, and the lookup-only
//! inference path that uses them.
//!
//! The expert vector depends only on the token id, so it can be tabulated
//! once per layer:
//!
//! ```text
//! M̃[t] = α · rmsnorm(M[t] + β · G(E[t]))
//! ```
//!
//! At inference the branch becomes one row read plus the gate and output
//! projections.

use std::fmt;

use fnv::FnvHasher;
use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::hash::Hasher;

use crate::backbone::{ForwardOutput, MekiPath, Model};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::meki::{self, ExpertVector, MekiLayerParams};
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::storage;

/// Element type of a folded bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BankDType {
    F32,
    F16,
    F64,
}

impl BankDType {
    pub fn size_of(self) -> usize {
        match self {
            BankDType::F16 => 2,
            BankDType::F32 => 4,
            BankDType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            BankDType::F32 => 0,
            BankDType::F16 => 1,
            BankDType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(BankDType::F32),
            1 => Ok(BankDType::F16),
            2 => Ok(BankDType::F64),
            other => Err(Error::Format(format!("unknown bank dtype code {other}"))),
        }
    }
}

impl fmt::Display for BankDType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BankDType::F32 => "f32",
            BankDType::F16 => "f16",
            BankDType::F64 => "f64",
        })
    }
}

impl std::str::FromStr for BankDType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(BankDType::F32),
            "f16" => Ok(BankDType::F16),
            "f64" => Ok(BankDType::F64),
            other => Err(Error::InvalidArgument(format!("unknown bank dtype `{other}`"))),
        }
    }
}

/// Flat table storage, layer-major then token then channel.
#[derive(Debug, Clone, PartialEq)]
pub enum BankData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    F64(Vec<f64>),
}

impl BankData {
    pub fn dtype(&self) -> BankDType {
        match self {
            BankData::F32(_) => BankDType::F32,
            BankData::F16(_) => BankDType::F16,
            BankData::F64(_) => BankDType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BankData::F32(v) => v.len(),
            BankData::F16(v) => v.len(),
            BankData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Encode f64 values with round-to-nearest-even.
    pub fn from_f64(dtype: BankDType, values: &[f64]) -> Self {
        match dtype {
            BankDType::F32 => BankData::F32(values.iter().map(|&v| v as f32).collect()),
            BankDType::F16 => BankData::F16(values.iter().map(|&v| f16::from_f64(v)).collect()),
            BankDType::F64 => BankData::F64(values.to_vec()),
        }
    }

    fn get_f64(&self, i: usize) -> f64 {
        match self {
            BankData::F32(v) => v[i] as f64,
            BankData::F16(v) => v[i].to_f64(),
            BankData::F64(v) => v[i],
        }
    }

    /// Little-endian bytes of elements `range`.
    pub fn le_bytes(&self, range: std::ops::Range<usize>) -> Vec<u8> {
        match self {
            BankData::F32(v) => v[range].iter().flat_map(|x| x.to_le_bytes()).collect(),
            BankData::F16(v) => v[range].iter().flat_map(|x| x.to_le_bytes()).collect(),
            BankData::F64(v) => v[range].iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Decode little-endian bytes.
    pub fn from_le_bytes(dtype: BankDType, bytes: &[u8]) -> Result<Self> {
        let size = dtype.size_of();
        if bytes.len() % size != 0 {
            return Err(Error::Integrity(format!("{} bytes is not a whole number of {dtype} values", bytes.len())));
        }
        let chunks = bytes.chunks_exact(size);
        Ok(match dtype {
            BankDType::F32 => BankData::F32(chunks.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            BankDType::F16 => BankData::F16(chunks.map(|c| f16::from_le_bytes(c.try_into().unwrap())).collect()),
            BankDType::F64 => BankData::F64(chunks.map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        })
    }
}

/// Folded per-layer tables `[L × |V| × d_mem]`. Read-only once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBank {
    n_layers: usize,
    vocab_size: usize,
    d_mem: usize,
    provenance: u64,
    data: BankData,
}

impl FusedBank {
    pub fn new(n_layers: usize, vocab_size: usize, d_mem: usize, data: BankData, provenance: u64) -> Result<Self> {
        if n_layers == 0 || vocab_size == 0 || d_mem == 0 {
            return Err(Error::Config(format!(
                "bank dimensions must be positive, got L={n_layers} |V|={vocab_size} d_mem={d_mem}"
            )));
        }
        let want = n_layers * vocab_size * d_mem;
        if data.len() != want {
            return Err(Error::Config(format!("bank holds {} values, expected {want}", data.len())));
        }
        Ok(Self {
            n_layers,
            vocab_size,
            d_mem,
            provenance,
            data,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn d_mem(&self) -> usize {
        self.d_mem
    }

    pub fn dtype(&self) -> BankDType {
        self.data.dtype()
    }

    pub fn provenance(&self) -> u64 {
        self.provenance
    }

    pub fn data(&self) -> &BankData {
        &self.data
    }

    /// Size of the table payload in bytes.
    pub fn payload_bytes(&self) -> usize {
        self.data.len() * self.dtype().size_of()
    }

    fn offset(&self, layer: usize, token: usize) -> Result<usize> {
        if layer >= self.n_layers {
            return Err(Error::Index {
                what: "layer",
                index: layer,
                bound: self.n_layers,
            });
        }
        if token >= self.vocab_size {
            return Err(Error::Index {
                what: "token",
                index: token,
                bound: self.vocab_size,
            });
        }
        Ok((layer * self.vocab_size + token) * self.d_mem)
    }

    /// Row `(layer, token)`, widened to f64 (exact for every bank dtype).
    pub fn row(&self, layer: usize, token: usize) -> Result<ExpertVector<f64>> {
        let start = self.offset(layer, token)?;
        Ok(ExpertVector((start..start + self.d_mem).map(|i| self.data.get_f64(i)).collect()))
    }

    /// Rows for a batch of ids as a `[ids.len() × d_mem]` tensor.
    pub fn rows<S: Scalar>(&self, layer: usize, ids: &[usize]) -> Result<Tensor<S>> {
        let mut out = Vec::with_capacity(ids.len() * self.d_mem);
        for &t in ids {
            let start = self.offset(layer, t)?;
            out.extend((start..start + self.d_mem).map(|i| S::from_f64(self.data.get_f64(i))));
        }
        Tensor::new(&[ids.len(), self.d_mem], out)
    }

    /// Whole table for one layer, `[|V| × d_mem]`.
    pub fn table(&self, layer: usize) -> Result<Tensor<f64>> {
        let start = self.offset(layer, 0)?;
        let n = self.vocab_size * self.d_mem;
        Tensor::new(&[self.vocab_size, self.d_mem], (start..start + n).map(|i| self.data.get_f64(i)).collect())
    }

    /// FNV-1a over the payload bytes of `layer`.
    pub fn layer_checksum(&self, layer: usize) -> Result<u64> {
        let start = self.offset(layer, 0)?;
        Ok(fnv64(&self.data.le_bytes(start..start + self.vocab_size * self.d_mem)))
    }

    /// FNV-1a over the whole payload.
    pub fn content_hash(&self) -> u64 {
        fnv64(&self.data.le_bytes(0..self.data.len()))
    }

    fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        if (self.n_layers, self.vocab_size, self.d_mem) != (cfg.n_layers, cfg.vocab_size, cfg.d_mem) {
            return Err(Error::Config(format!(
                "bank is L={} |V|={} d_mem={}, model is L={} |V|={} d_mem={}",
                self.n_layers, self.vocab_size, self.d_mem, cfg.n_layers, cfg.vocab_size, cfg.d_mem
            )));
        }
        Ok(())
    }
}

pub(crate) fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

const FOLD_CHUNK: usize = 4096;

/// Tabulate the expert vector of every token for one layer, in f64.
pub fn fold_layer(
    store: &ParamStore<f64>,
    params: &MekiLayerParams,
    e_global: ParamId,
    cfg: &ModelConfig,
    variant: Variant,
) -> Result<Tensor<f64>> {
    let (v, d, m) = (cfg.vocab_size, cfg.d_model, cfg.d_mem);
    let e_shape = store.get(e_global).value.shape();
    if e_shape != [v, d] {
        return Err(Error::Config(format!("embedding table is {e_shape:?}, expected [{v}, {d}]")));
    }
    if let Some(mem) = params.memory {
        let shape = store.get(mem).value.shape();
        if shape != [v, m] {
            return Err(Error::Config(format!("memory table is {shape:?}, expected [{v}, {m}]")));
        }
    }
    let mut out = Vec::with_capacity(v * m);
    let ids: Vec<usize> = (0..v).collect();
    for chunk in ids.chunks(FOLD_CHUNK) {
        let mut g = Graph::inference();
        let e = g.param(store, e_global);
        let rows = meki::expert_vector(&mut g, store, params, e, chunk, cfg, variant)
            .map_err(|err| match err {
                Error::Shape { .. } => Error::Config(err.to_string()),
                other => other,
            })?;
        out.extend_from_slice(g.value(rows).data());
    }
    Tensor::new(&[v, m], out)
}

/// Fold every layer of `model` into a bank of `dtype`, stamped with
/// `provenance`.
pub fn fold_model<S: Scalar>(model: &Model<S>, dtype: BankDType, provenance: u64) -> Result<FusedBank> {
    let cfg = &model.config;
    if !cfg.variant.enabled() {
        return Err(Error::Config("cannot fold a model without memory branches".into()));
    }
    let wide = model.to_dtype::<f64>();
    let mut values = Vec::with_capacity(cfg.n_layers * cfg.vocab_size * cfg.d_mem);
    for block in &wide.blocks {
        let params = block.meki.as_ref().ok_or_else(|| Error::Internal("enabled variant without branch".into()))?;
        let table = fold_layer(&wide.store, params, wide.embed, cfg, cfg.variant)?;
        values.extend_from_slice(table.data());
    }
    FusedBank::new(cfg.n_layers, cfg.vocab_size, cfg.d_mem, BankData::from_f64(dtype, &values), provenance)
}

/// Fold `model`, using the hash of its serialized checkpoint as provenance.
pub fn reparameterize<S: Scalar>(model: &Model<S>, dtype: BankDType) -> Result<FusedBank> {
    fold_model(model, dtype, storage::checkpoint_hash(model)?)
}

/// Lookup-only branch for layer `layer`: `ẽ_t = M̃[x_t]`, then gate, fuse
/// and inject exactly as in training. No projector work is done.
#[allow(clippy::too_many_arguments)]
pub fn meki_forward_infer<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    bank: &FusedBank,
    layer: usize,
    params: &MekiLayerParams,
    ids: &[usize],
    h: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    bank.check_config(cfg)?;
    if g.value(h).rows() != ids.len() {
        return Err(Error::shape("meki", g.shape(h), &[ids.len()]));
    }
    let e = g.constant(bank.rows(layer, ids)?);
    meki::gate_fuse_inject(g, store, params, e, h, cfg)
}

/// A model paired with a bank whose provenance has been checked.
#[derive(Debug, Clone, Copy)]
pub struct InferenceSession<'a, S: Scalar> {
    model: &'a Model<S>,
    bank: &'a FusedBank,
}

impl<'a, S: Scalar> InferenceSession<'a, S> {
    /// `checkpoint_hash` identifies the checkpoint the gating weights came
    /// from. A mismatch with the bank is an integrity error unless
    /// `allow_mismatch` is set, in which case it is only logged.
    pub fn new(model: &'a Model<S>, bank: &'a FusedBank, checkpoint_hash: u64, allow_mismatch: bool) -> Result<Self> {
        bank.check_config(&model.config)?;
        if bank.provenance != checkpoint_hash {
            let msg = format!(
                "bank provenance {:016x} does not match checkpoint {:016x}",
                bank.provenance, checkpoint_hash
            );
            if !allow_mismatch {
                return Err(Error::Integrity(msg));
            }
            log::warn!("{msg}; continuing as requested");
        }
        Ok(Self { model, bank })
    }

    /// Session for an in-memory model, hashing its serialized form.
    pub fn for_model(model: &'a Model<S>, bank: &'a FusedBank, allow_mismatch: bool) -> Result<Self> {
        let hash = storage::checkpoint_hash(model)?;
        Self::new(model, bank, hash, allow_mismatch)
    }

    pub fn model(&self) -> &Model<S> {
        self.model
    }

    pub fn bank(&self) -> &FusedBank {
        self.bank
    }

    pub fn forward(&self, ids: &[usize]) -> Result<ForwardOutput<S>> {
        self.model.forward(ids, MekiPath::Fused(self.bank))
    }

    pub fn forward_batch(&self, ids: &[usize], seq_len: usize) -> Result<ForwardOutput<S>> {
        self.model.forward_batch(ids, seq_len, MekiPath::Fused(self.bank))
    }

    /// Greedy continuation of `prompt` by `n_new` tokens.
    pub fn generate(&self, prompt: &[usize], n_new: usize) -> Result<Vec<usize>> {
        let mut ids = prompt.to_vec();
        for _ in 0..n_new {
            let start = ids.len().saturating_sub(self.model.config.max_seq_len);
            let out = self.forward(&ids[start..])?;
            let last = out.logits.row(out.logits.rows() - 1);
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .ok_or_else(|| Error::Internal("empty logits".into()))?;
            ids.push(next);
        }
        Ok(ids)
    }
}

/// Outcome of comparing the training and fused paths.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub max_abs_diff_logits: f64,
    /// Worst residual-stream difference after each block.
    pub per_layer_max_diff: Vec<f64>,
    pub tol: f64,
    pub pass: bool,
}

/// Run both paths on `n_sequences` random sequences and report the largest
/// logit divergence. Passes iff it is within `tol`.
pub fn verify_equivalence<S: Scalar>(
    model: &Model<S>,
    bank: &FusedBank,
    n_sequences: usize,
    seq_len: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    bank.check_config(&model.config)?;
    if n_sequences == 0 || seq_len == 0 {
        return Err(Error::InvalidArgument("need at least one token to compare".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = model.config.vocab_size;
    let seqs: Vec<Vec<usize>> = (0..n_sequences)
        .map(|_| (0..seq_len).map(|_| rng.random_range(0..v)).collect())
        .collect();
    let diffs = seqs
        .par_iter()
        .map(|ids| -> Result<(f64, Vec<f64>)> {
            let train = model.forward(ids, MekiPath::Train)?;
            let fused = model.forward(ids, MekiPath::Fused(bank))?;
            let logits = train.logits.max_abs_diff(&fused.logits)?;
            let layers = train
                .hidden
                .iter()
                .zip(&fused.hidden)
                .map(|(a, b)| a.max_abs_diff(b))
                .collect::<Result<Vec<_>>>()?;
            Ok((logits, layers))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut max_logits = 0.0f64;
    let mut per_layer = vec![0.0f64; model.config.n_layers];
    for (l, layers) in diffs {
        max_logits = max_logits.max(l);
        for (acc, d) in per_layer.iter_mut().zip(layers) {
            *acc = acc.max(d);
        }
    }
    Ok(EquivalenceReport {
        n_sequences,
        seq_len,
        max_abs_diff_logits: max_logits,
        per_layer_max_diff: per_layer,
        tol,
        pass: max_logits <= tol,
    })
}
