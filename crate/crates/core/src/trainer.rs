//! Pretraining loop on a synthetic fact corpus.
//!
//! The corpus is a Markov chain over token ids: the successor of `x` is a
//! fixed seeded function of `x` (a composition of random permutations), and
//! with probability `noise_prob` the next token is drawn uniformly instead.
//! Knowledge is therefore purely token-conditional.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Model;
use crate::config::{KvMap, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Validation loss is recorded every `eval_interval` steps and at the end.
    pub eval_interval: usize,
    pub eval_sequences: usize,
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            seq_len: 128,
            peak_lr: 4e-4,
            min_lr: 2e-4,
            warmup_steps: 100,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            seed: 0,
            eval_interval: 100,
            eval_sequences: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 || self.eval_interval == 0 {
            return Err(Error::Config("steps, batch_size, seq_len and eval_interval must be >= 1".into()));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::Config(format!(
                "need 0 <= min_lr <= peak_lr, got {} and {}",
                self.min_lr, self.peak_lr
            )));
        }
        if !(self.grad_clip_norm > 0.0) || !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("grad_clip_norm and adam_eps must be > 0, weight_decay >= 0".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("seq_len", self.seq_len);
        kv.set("peak_lr", self.peak_lr);
        kv.set("min_lr", self.min_lr);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("weight_decay", self.weight_decay);
        kv.set("grad_clip_norm", self.grad_clip_norm);
        kv.set("adam_beta1", self.adam_beta1);
        kv.set("adam_beta2", self.adam_beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("seed", self.seed);
        kv.set("eval_interval", self.eval_interval);
        kv.set("eval_sequences", self.eval_sequences);
        kv
    }

    /// Missing keys fall back to [`TrainConfig::toy`].
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::toy();
        Ok(Self {
            steps: kv.get_or("steps", d.steps)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            seq_len: kv.get_or("seq_len", d.seq_len)?,
            peak_lr: kv.get_or("peak_lr", d.peak_lr)?,
            min_lr: kv.get_or("min_lr", d.min_lr)?,
            warmup_steps: kv.get_or("warmup_steps", d.warmup_steps)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            grad_clip_norm: kv.get_or("grad_clip_norm", d.grad_clip_norm)?,
            adam_beta1: kv.get_or("adam_beta1", d.adam_beta1)?,
            adam_beta2: kv.get_or("adam_beta2", d.adam_beta2)?,
            adam_eps: kv.get_or("adam_eps", d.adam_eps)?,
            seed: kv.get_or("seed", d.seed)?,
            eval_interval: kv.get_or("eval_interval", d.eval_interval)?,
            eval_sequences: kv.get_or("eval_sequences", d.eval_sequences)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub vocab_size: usize,
    /// Number of random permutations composed into the successor map.
    pub fact_depth: usize,
    pub noise_prob: f64,
    pub train_tokens: usize,
    pub val_tokens: usize,
    pub seed: u64,
}

impl SyntheticCorpusSpec {
    pub fn toy() -> Self {
        Self {
            vocab_size: 512,
            fact_depth: 2,
            noise_prob: 0.05,
            train_tokens: 200_000,
            val_tokens: 20_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::Config(format!("corpus vocab_size must be >= 8, got {}", self.vocab_size)));
        }
        if self.fact_depth == 0 {
            return Err(Error::Config("fact_depth must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.noise_prob) {
            return Err(Error::Config(format!("noise_prob must lie in [0, 0.5), got {}", self.noise_prob)));
        }
        if self.train_tokens < 2 || self.val_tokens < 2 {
            return Err(Error::Config("train_tokens and val_tokens must be >= 2".into()));
        }
        Ok(())
    }

    /// Cross-entropy of the true next-token law, in nats.
    pub fn bayes_cross_entropy(&self) -> f64 {
        let (p, v) = (self.noise_prob, self.vocab_size as f64);
        let hit = 1.0 - p + p / v;
        let miss = p / v;
        let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
        -(xlogx(hit) + (v - 1.0) * xlogx(miss))
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("vocab_size", self.vocab_size);
        kv.set("fact_depth", self.fact_depth);
        kv.set("noise_prob", self.noise_prob);
        kv.set("train_tokens", self.train_tokens);
        kv.set("val_tokens", self.val_tokens);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::toy();
        Ok(Self {
            vocab_size: kv.get_or("vocab_size", d.vocab_size)?,
            fact_depth: kv.get_or("fact_depth", d.fact_depth)?,
            noise_prob: kv.get_or("noise_prob", d.noise_prob)?,
            train_tokens: kv.get_or("train_tokens", d.train_tokens)?,
            val_tokens: kv.get_or("val_tokens", d.val_tokens)?,
            seed: kv.get_or("seed", d.seed)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// The noiseless successor of each token.
    pub successor: Vec<usize>,
}

/// Build train and validation streams from independent draws of the same chain.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let v = spec.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut successor: Vec<usize> = (0..v).collect();
    for _ in 0..spec.fact_depth {
        let mut perm: Vec<usize> = (0..v).collect();
        perm.shuffle(&mut rng);
        successor = successor.iter().map(|&x| perm[x]).collect();
    }
    let sample = |n: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(n);
        let mut x = rng.random_range(0..v);
        out.push(x);
        while out.len() < n {
            x = if rng.random::<f64>() < spec.noise_prob {
                rng.random_range(0..v)
            } else {
                successor[x]
            };
            out.push(x);
        }
        out
    };
    let mut train_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut val_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let train = sample(spec.train_tokens, &mut train_rng);
    let val = sample(spec.val_tokens, &mut val_rng);
    Ok(Corpus { train, val, successor })
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay reaching `min_lr`
/// at the last step.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(1).saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return cfg.peak_lr;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (PI * progress).cos())
}

/// Parameters exempt from weight decay: norm scales, the branch scalars,
/// embeddings and the memory tables.
pub fn is_no_decay(name: &str) -> bool {
    name.ends_with("norm")
        || name.ends_with(".alpha")
        || name.ends_with(".beta")
        || name == "embed"
        || name == "unembed"
        || name.ends_with(".memory")
}

/// Scale gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let scale = S::from_f64(max_norm / norm);
        for p in store.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay. Moments are kept in f64.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new<S: Scalar>(store: &ParamStore<S>, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, p)| p.value.numel()).collect();
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            decay: store.iter().map(|(_, p)| !is_no_decay(&p.name)).collect(),
        }
    }

    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grads = p.grad.data().to_vec();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                let x = w.as_f64();
                *w = S::from_f64(x - lr * (update + wd * x));
            }
        }
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S: Scalar> {
    pub model: Model<S>,
    pub history: Vec<LossRecord>,
    pub final_val_loss: f64,
}

/// `(inputs, targets)` for `n` windows starting at `starts`.
fn windows(stream: &[usize], starts: &[usize], seq_len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(starts.len() * seq_len);
    let mut targets = Vec::with_capacity(starts.len() * seq_len);
    for &s in starts {
        inputs.extend_from_slice(&stream[s..s + seq_len]);
        targets.extend_from_slice(&stream[s + 1..s + seq_len + 1]);
    }
    (inputs, targets)
}

fn first_non_finite<S: Scalar>(store: &ParamStore<S>, grads: bool) -> Option<String> {
    store
        .iter()
        .find(|(_, p)| !if grads { p.grad.all_finite() } else { p.value.all_finite() })
        .map(|(_, p)| p.name.clone())
}

const EVAL_CHUNK: usize = 16;

/// Mean next-token cross-entropy over `n_sequences` fixed, non-overlapping
/// windows at the start of `stream`.
pub fn evaluate_val_loss<S: Scalar>(model: &Model<S>, stream: &[usize], n_sequences: usize, seq_len: usize) -> Result<f64> {
    if n_sequences == 0 {
        return Err(Error::InvalidArgument("need at least one evaluation sequence".into()));
    }
    let need = n_sequences * (seq_len + 1);
    if stream.len() < need {
        return Err(Error::Config(format!(
            "validation stream has {} tokens, {n_sequences} windows of {seq_len} need {need}",
            stream.len()
        )));
    }
    let starts: Vec<usize> = (0..n_sequences).map(|i| i * (seq_len + 1)).collect();
    let mut total = 0.0;
    for chunk in starts.chunks(EVAL_CHUNK) {
        let (inputs, targets) = windows(stream, chunk, seq_len);
        let mut g = Graph::inference();
        let loss = model.loss_graph(&mut g, &inputs, &targets, seq_len)?;
        total += g.value(loss).data()[0].as_f64() * chunk.len() as f64;
    }
    Ok(total / n_sequences as f64)
}

/// Train a fresh model initialized from `train_cfg.seed`.
pub fn train<S: Scalar>(model_cfg: &ModelConfig, train_cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome<S>> {
    let model = Model::init(model_cfg.clone(), train_cfg.seed)?;
    train_model(model, train_cfg, corpus)
}

/// Train `model` in place. Fully deterministic given the seed.
pub fn train_model<S: Scalar>(mut model: Model<S>, cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if corpus.train.len() < cfg.seq_len + 2 {
        return Err(Error::Config(format!(
            "training stream of {} tokens is too short for seq_len {}",
            corpus.train.len(),
            cfg.seq_len
        )));
    }
    if let Some(&bad) = corpus.train.iter().chain(&corpus.val).find(|&&t| t >= model.config.vocab_size) {
        return Err(Error::Index {
            what: "token",
            index: bad,
            bound: model.config.vocab_size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c_0000_0001);
    let mut opt = AdamW::new(&model.store, cfg);
    let mut history = Vec::with_capacity(cfg.steps);
    let max_start = corpus.train.len() - cfg.seq_len - 1;
    let mut final_val = f64::NAN;

    for step in 0..cfg.steps {
        let lr = lr_at(cfg, step);
        let starts: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..=max_start)).collect();
        let (inputs, targets) = windows(&corpus.train, &starts, cfg.seq_len);

        model.store.zero_grad();
        let mut g = Graph::new();
        let loss = model.loss_graph(&mut g, &inputs, &targets, cfg.seq_len)?;
        let train_loss = g.value(loss).data()[0].as_f64();
        g.backward(loss, &mut model.store)?;
        drop(g);
        if !train_loss.is_finite() {
            let param = first_non_finite(&model.store, true)
                .or_else(|| first_non_finite(&model.store, false))
                .unwrap_or_else(|| "loss".into());
            return Err(Error::Diverged { step, param });
        }
        clip_grad_norm(&mut model.store, cfg.grad_clip_norm);
        opt.step(&mut model.store, lr);
        if let Some(param) = first_non_finite(&model.store, false) {
            return Err(Error::Diverged { step, param });
        }

        let last = step + 1 == cfg.steps;
        let val_loss = if step % cfg.eval_interval == 0 || last {
            let v = evaluate_val_loss(&model, &corpus.val, cfg.eval_sequences, cfg.seq_len)?;
            if last {
                final_val = v;
            }
            Some(v)
        } else {
            None
        };
        history.push(LossRecord {
            step,
            lr,
            train_loss,
            val_loss,
        });
    }
    Ok(TrainOutcome {
        model,
        history,
        final_val_loss: final_val,
    })
}

/// Loss history as CSV with header `step,lr,train_loss,val_loss`; rows
/// without an evaluation leave `val_loss` empty.
pub fn write_history_csv(history: &[LossRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "step,lr,train_loss,val_loss")?;
    for r in history {
        match r.val_loss {
            Some(v) => writeln!(w, "{},{},{},{}", r.step, r.lr, r.train_loss, v)?,
            None => writeln!(w, "{},{},{},", r.step, r.lr, r.train_loss)?,
        }
    }
    Ok(())
}

/// Bigram counts `[V × V]` from a stream, row-normalized with add-`smoothing`.
pub fn bigram_table(stream: &[usize], vocab: usize, smoothing: f64) -> Tensor<f64> {
    let mut counts = vec![smoothing; vocab * vocab];
    for w in stream.windows(2) {
        counts[w[0] * vocab + w[1]] += 1.0;
    }
    for row in counts.chunks_mut(vocab) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|c| *c /= s);
        }
    }
    Tensor::new(&[vocab, vocab], counts).expect("square table")
}

/// Mean `−ln P(next | current)` of a bigram table on a stream.
pub fn bigram_loss(table: &Tensor<f64>, stream: &[usize]) -> f64 {
    let v = table.last_dim();
    let total: f64 = stream.windows(2).map(|w| -table.data()[w[0] * v + w[1]].ln()).sum();
    total / (stream.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_spec(noise: f64, depth: usize) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            vocab_size: 64,
            fact_depth: depth,
            noise_prob: noise,
            train_tokens: 4000,
            val_tokens: 2000,
            seed: 3,
        }
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_mem: 4,
            vocab_size: 64,
            n_heads: 2,
            d_ffn: 32,
            max_seq_len: 32,
            ..ModelConfig::toy()
        }
    }

    fn small_train(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            seq_len: 16,
            warmup_steps: steps / 10,
            eval_interval: 5,
            eval_sequences: 8,
            peak_lr: 3e-3,
            min_lr: 1e-3,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn corpus_is_deterministic_and_disjoint() {
        let a = generate_corpus(&small_spec(0.1, 2)).unwrap();
        let b = generate_corpus(&small_spec(0.1, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(&a.train[..100], &a.val[..100]);
        let mut other = small_spec(0.1, 2);
        other.seed = 4;
        assert_ne!(generate_corpus(&other).unwrap().train, a.train);
    }

    #[test]
    fn noiseless_depth_one_is_a_deterministic_map() {
        let c = generate_corpus(&small_spec(0.0, 1)).unwrap();
        assert!(c.train.windows(2).all(|w| w[1] == c.successor[w[0]]));
        let table = bigram_table(&c.train, 64, 0.0);
        assert_eq!(bigram_loss(&table, &c.train), 0.0);
        let mut sorted = c.successor.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn optimal_predictor_matches_closed_form_entropy() {
        let spec = SyntheticCorpusSpec {
            train_tokens: 400_000,
            val_tokens: 400_000,
            ..small_spec(0.1, 2)
        };
        let c = generate_corpus(&spec).unwrap();
        // The Bayes predictor knows the successor map and the noise law.
        let (p, v) = (spec.noise_prob, spec.vocab_size as f64);
        let measured: f64 = c
            .val
            .windows(2)
            .map(|w| if w[1] == c.successor[w[0]] { -(1.0 - p + p / v).ln() } else { -(p / v).ln() })
            .sum::<f64>()
            / (c.val.len() - 1) as f64;
        let want = spec.bayes_cross_entropy();
        assert!(((measured - want) / want).abs() < 0.02, "{measured} vs {want}");
        // A count-based bigram model fitted on train approaches the same value.
        let fitted = bigram_loss(&bigram_table(&c.train, 64, 0.5), &c.val);
        assert!(((fitted - want) / want).abs() < 0.02, "{fitted} vs {want}");
    }

    #[test]
    fn corpus_spec_validation() {
        assert!(generate_corpus(&SyntheticCorpusSpec { vocab_size: 7, ..small_spec(0.0, 1) }).is_err());
        assert!(generate_corpus(&SyntheticCorpusSpec { fact_depth: 0, ..small_spec(0.0, 1) }).is_err());
        assert!(generate_corpus(&small_spec(0.5, 1)).is_err());
        assert!(generate_corpus(&small_spec(-0.1, 1)).is_err());
    }

    #[test]
    fn schedule_endpoints_and_shape() {
        let cfg = TrainConfig {
            steps: 1000,
            warmup_steps: 100,
            ..TrainConfig::toy()
        };
        assert_eq!(lr_at(&cfg, 0), 0.0);
        assert_eq!(lr_at(&cfg, 100), cfg.peak_lr);
        assert!((lr_at(&cfg, 999) - cfg.min_lr).abs() < 1e-18);
        assert!((lr_at(&cfg, 50) - cfg.peak_lr / 2.0).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn schedule_matches_closed_form(steps in 2usize..5000, warm_frac in 0.0f64..0.9, at in 0.0f64..1.0) {
            let warmup = ((steps - 1) as f64 * warm_frac) as usize;
            let cfg = TrainConfig { steps, warmup_steps: warmup, ..TrainConfig::toy() };
            let step = ((steps - 1) as f64 * at) as usize;
            let want = if step < warmup {
                cfg.peak_lr * step as f64 / warmup as f64
            } else if steps - 1 == warmup {
                cfg.peak_lr
            } else {
                let t = (step - warmup) as f64 / (steps - 1 - warmup) as f64;
                cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            };
            prop_assert!((lr_at(&cfg, step) - want).abs() <= 1e-15);
            prop_assert!(lr_at(&cfg, step) <= cfg.peak_lr + 1e-18);
        }

        #[test]
        fn clipping_bounds_the_global_norm(scale in 0.01f64..100.0, seed in 0u64..50) {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..3 {
                let id = store.insert(format!("p{i}"), Tensor::zeros(&[5])).unwrap();
                for g in store.get_mut(id).grad.data_mut() {
                    *g = rng.random_range(-1.0..1.0) * scale;
                }
            }
            let before = clip_grad_norm(&mut store, 1.0);
            let after = store.grad_norm();
            if before > 1.0 {
                prop_assert!(after <= 1.0 + 1e-6);
            } else {
                prop_assert_eq!(after, before);
            }
        }
    }

    #[test]
    fn no_decay_set() {
        for name in ["final_norm", "layers.0.attn_norm", "layers.1.meki.alpha", "layers.1.meki.beta",
                     "layers.0.meki.expert_norm", "layers.0.meki.out_norm", "embed", "unembed", "layers.2.meki.memory"] {
            assert!(is_no_decay(name), "{name}");
        }
        for name in ["layers.0.attn.q", "layers.0.ffn.up", "layers.0.meki.gate", "layers.0.meki.out", "layers.0.meki.proj.up"] {
            assert!(!is_no_decay(name), "{name}");
        }
    }

    #[test]
    fn adamw_first_step_and_decay_exemptions() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("layers.0.attn.q", Tensor::full(&[2], 1.0)).unwrap();
        let n = store.insert("final_norm", Tensor::full(&[2], 1.0)).unwrap();
        store.get_mut(w).grad.data_mut().copy_from_slice(&[0.5, -2.0]);
        store.get_mut(n).grad.data_mut().copy_from_slice(&[0.0, 0.0]);
        let cfg = TrainConfig::toy();
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, 0.01);
        // Bias-corrected first step moves each weight by about lr·sign(g).
        let v = store.get(w).value.data();
        assert!((v[0] - (1.0 - 0.01 * (1.0 + 0.1))).abs() < 1e-6);
        assert!((v[1] - (1.0 + 0.01 - 0.01 * 0.1)).abs() < 1e-6);
        // Zero gradient and no decay: untouched.
        assert_eq!(store.get(n).value.data(), &[1.0, 1.0]);
    }

    #[test]
    fn untrained_uniform_model_scores_ln_vocab() {
        let mut m = Model::<f64>::init(small_model(), 0).unwrap();
        let e = m.embed;
        m.store.get_mut(e).value.data_mut().fill(0.0);
        let c = generate_corpus(&small_spec(0.05, 2)).unwrap();
        let a = evaluate_val_loss(&m, &c.val, 4, 16).unwrap();
        assert!((a - 64f64.ln()).abs() < 1e-12);
        assert_eq!(a, evaluate_val_loss(&m, &c.val, 4, 16).unwrap());
        assert!(evaluate_val_loss(&m, &c.val[..20], 4, 16).is_err());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let c = generate_corpus(&small_spec(0.05, 2)).unwrap();
        let a = train::<f64>(&small_model(), &small_train(12), &c).unwrap();
        let b = train::<f64>(&small_model(), &small_train(12), &c).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history[0].lr, 0.0);
        assert!(a.final_val_loss.is_finite());
        assert_eq!(a.history.last().unwrap().val_loss, Some(a.final_val_loss));
    }

    #[test]
    fn loss_decreases_on_fact_corpus() {
        let c = generate_corpus(&small_spec(0.05, 2)).unwrap();
        let out = train::<f32>(&small_model(), &small_train(60), &c).unwrap();
        let vals: Vec<f64> = out.history.iter().filter_map(|r| r.val_loss).collect();
        assert!(vals.last().unwrap() < &(vals[0] - 0.1), "{vals:?}");
    }

    #[test]
    fn divergence_names_step_and_parameter() {
        let c = generate_corpus(&small_spec(0.05, 2)).unwrap();
        let mut m = Model::<f64>::init(small_model(), 0).unwrap();
        let id = m.store.id("layers.1.ffn.down").unwrap();
        m.store.get_mut(id).value.data_mut()[0] = f64::NAN;
        match train_model(m, &small_train(5), &c) {
            Err(Error::Diverged { step, param }) => {
                assert_eq!(step, 0);
                assert!(param.starts_with("layers.") || param == "embed", "{param}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn history_csv_layout() {
        let rows = [
            LossRecord { step: 0, lr: 0.0, train_loss: 4.0, val_loss: Some(4.1) },
            LossRecord { step: 1, lr: 1e-4, train_loss: 3.5, val_loss: None },
        ];
        let mut out = Vec::new();
        write_history_csv(&rows, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,lr,train_loss,val_loss\n0,0,4,4.1\n1,0.0001,3.5,\n");
    }

    #[test]
    fn configs_round_trip_through_kv() {
        let t = TrainConfig { steps: 77, peak_lr: 1.5e-3, ..TrainConfig::toy() };
        assert_eq!(TrainConfig::from_kv(&t.to_kv()).unwrap(), t);
        let s = SyntheticCorpusSpec { noise_prob: 0.1, ..SyntheticCorpusSpec::toy() };
        assert_eq!(SyntheticCorpusSpec::from_kv(&s.to_kv()).unwrap(), s);
        assert!(TrainConfig { warmup_steps: 2000, ..TrainConfig::toy() }.validate().is_err());
        assert!(TrainConfig { min_lr: 1.0, ..TrainConfig::toy() }.validate().is_err());
    }

    #[test]
    fn bayes_entropy_reference_value() {
        let spec = SyntheticCorpusSpec { noise_prob: 0.05, vocab_size: 512, ..SyntheticCorpusSpec::toy() };
        assert!((spec.bayes_cross_entropy() - 0.509_6).abs() < 1e-3);
        let clean = SyntheticCorpusSpec { noise_prob: 0.0, ..spec };
        assert_eq!(clean.bayes_cross_entropy(), 0.0);
    }
}
