//! The training-time memory branch.
//!
//! For token `x` at layer `l` the branch builds an expert vector from a
//! per-layer lookup table `M` and a projection `G` of the shared token
//! embedding, mixes it with a low-rank gate computed from the hidden state,
//! and projects back to model width:
//!
//! ```text
//! e = α · rmsnorm(M[x] + β · G(E[x]))
//! g = act(W_gate · h)
//! v = e + g            (or e ⊙ g)
//! y = rmsnorm(W_out · v)
//! ```
//!
//! `e` depends only on the token id and the layer's weights, which is what
//! lets [`crate::reparam`] fold it into a static table.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{FusionStrategy, GateActivation, ModelConfig, ProjectorKind, Variant};
use crate::error::{Error, Result};
use crate::numerics::{swiglu_graph, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// MAC-ledger scopes used by the branch.
pub mod scope {
    pub const PROJECTOR: &str = "meki.projector";
    pub const GATE: &str = "meki.gate";
    pub const OUT: &str = "meki.out";
    pub const PREFIX: &str = "meki.";
}

/// Weights of the dynamic projector `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorParams {
    SwiGlu { up: ParamId, act: ParamId, down: ParamId },
    Linear { w: ParamId },
}

impl ProjectorParams {
    pub fn kind(&self) -> ProjectorKind {
        match self {
            ProjectorParams::SwiGlu { .. } => ProjectorKind::SwiGlu,
            ProjectorParams::Linear { .. } => ProjectorKind::Linear,
        }
    }
}

/// One layer's branch parameters, as handles into a [`ParamStore`].
///
/// `memory` is absent for the dynamic-only variant and `projector` for the
/// static-only one; both are absent when the branch is disabled entirely
/// (in which case the whole struct is normally omitted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MekiLayerParams {
    pub memory: Option<ParamId>,
    pub projector: Option<ProjectorParams>,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub w_gate: ParamId,
    pub w_out: ParamId,
    pub expert_norm: ParamId,
    pub out_norm: ParamId,
}

fn normal<S: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| S::from_f64(dist.sample(rng))).collect()).expect("shape")
}

const INIT_STD: f64 = 0.02;
const ALPHA_INIT: f64 = 0.1;
const BETA_INIT: f64 = 1.0;

impl MekiLayerParams {
    /// Allocate and initialize the branch under `prefix` (e.g. `layers.0.meki`).
    /// `W_out` starts at zero so the branch is silent at step 0.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (d, m, v) = (cfg.d_model, cfg.d_mem, cfg.vocab_size);
        let memory = if cfg.variant.uses_memory() {
            Some(store.insert(format!("{prefix}.memory"), normal(rng, &[v, m], INIT_STD))?)
        } else {
            None
        };
        let projector = if cfg.variant.uses_projector() {
            Some(match cfg.projector_kind {
                ProjectorKind::SwiGlu => {
                    let hid = cfg.projector_hidden();
                    ProjectorParams::SwiGlu {
                        up: store.insert(format!("{prefix}.proj.up"), normal(rng, &[hid, d], INIT_STD))?,
                        act: store.insert(format!("{prefix}.proj.act"), normal(rng, &[hid, d], INIT_STD))?,
                        down: store.insert(format!("{prefix}.proj.down"), normal(rng, &[m, hid], INIT_STD))?,
                    }
                }
                ProjectorKind::Linear => ProjectorParams::Linear {
                    w: store.insert(format!("{prefix}.proj.linear"), normal(rng, &[m, d], INIT_STD))?,
                },
            })
        } else {
            None
        };
        Ok(Self {
            memory,
            projector,
            alpha: store.insert(format!("{prefix}.alpha"), Tensor::scalar(S::from_f64(ALPHA_INIT)))?,
            beta: store.insert(format!("{prefix}.beta"), Tensor::scalar(S::from_f64(BETA_INIT)))?,
            w_gate: store.insert(format!("{prefix}.gate"), normal(rng, &[m, d], INIT_STD))?,
            w_out: store.insert(format!("{prefix}.out"), Tensor::zeros(&[d, m]))?,
            expert_norm: store.insert(format!("{prefix}.expert_norm"), Tensor::full(&[m], S::one()))?,
            out_norm: store.insert(format!("{prefix}.out_norm"), Tensor::full(&[d], S::one()))?,
        })
    }

    /// Look up existing parameters by name and check their shapes.
    pub fn bind<S: Scalar>(store: &ParamStore<S>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let (d, m, v) = (cfg.d_model, cfg.d_mem, cfg.vocab_size);
        let memory = if cfg.variant.uses_memory() {
            Some(lookup(store, &format!("{prefix}.memory"), &[v, m])?)
        } else {
            None
        };
        let projector = if cfg.variant.uses_projector() {
            Some(match cfg.projector_kind {
                ProjectorKind::SwiGlu => {
                    let hid = cfg.projector_hidden();
                    ProjectorParams::SwiGlu {
                        up: lookup(store, &format!("{prefix}.proj.up"), &[hid, d])?,
                        act: lookup(store, &format!("{prefix}.proj.act"), &[hid, d])?,
                        down: lookup(store, &format!("{prefix}.proj.down"), &[m, hid])?,
                    }
                }
                ProjectorKind::Linear => ProjectorParams::Linear {
                    w: lookup(store, &format!("{prefix}.proj.linear"), &[m, d])?,
                },
            })
        } else {
            None
        };
        Ok(Self {
            memory,
            projector,
            alpha: lookup(store, &format!("{prefix}.alpha"), &[1])?,
            beta: lookup(store, &format!("{prefix}.beta"), &[1])?,
            w_gate: lookup(store, &format!("{prefix}.gate"), &[m, d])?,
            w_out: lookup(store, &format!("{prefix}.out"), &[d, m])?,
            expert_norm: lookup(store, &format!("{prefix}.expert_norm"), &[m])?,
            out_norm: lookup(store, &format!("{prefix}.out_norm"), &[d])?,
        })
    }
}

pub(crate) fn lookup<S: Scalar>(store: &ParamStore<S>, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
    let actual = store.get(id).value.shape();
    if actual != shape {
        return Err(Error::Config(format!(
            "parameter `{name}` has shape {actual:?}, expected {shape:?}"
        )));
    }
    Ok(id)
}

/// One token's expert (or fused) vector of width `d_mem`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertVector<S>(pub Vec<S>);

impl<S: Scalar> ExpertVector<S> {
    pub fn values(&self) -> &[S] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `M[x_t]` for each id. Gradient reaches only the looked-up rows.
pub fn static_lookup<S: Scalar>(g: &mut Graph<S>, memory: Var, ids: &[usize]) -> Result<Var> {
    g.gather(memory, ids)
}

/// `G(E_global[x_t])` for each id.
pub fn dynamic_project<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    e_global: Var,
    projector: &ProjectorParams,
    kind: ProjectorKind,
    ids: &[usize],
) -> Result<Var> {
    if projector.kind() != kind {
        return Err(Error::Config(format!(
            "projector weights are {} but config asks for {}",
            projector.kind(),
            kind
        )));
    }
    let x = g.gather(e_global, ids)?;
    g.scoped(scope::PROJECTOR, |g| match *projector {
        ProjectorParams::SwiGlu { up, act, down } => {
            let (up, act, down) = (g.param(store, up), g.param(store, act), g.param(store, down));
            swiglu_graph(g, x, up, act, down)
        }
        ProjectorParams::Linear { w } => {
            let w = g.param(store, w);
            g.linear(x, w)
        }
    })
}

/// Expert vectors `e_t` for each id under `variant`.
pub fn expert_vector<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    params: &MekiLayerParams,
    e_global: Var,
    ids: &[usize],
    cfg: &ModelConfig,
    variant: Variant,
) -> Result<Var> {
    let missing = |what: &str| Error::Config(format!("{variant} variant needs {what}, which this layer lacks"));
    let dynamic = |g: &mut Graph<S>| -> Result<Var> {
        let proj = params.projector.as_ref().ok_or_else(|| missing("a projector"))?;
        let m_dyn = dynamic_project(g, store, e_global, proj, cfg.projector_kind, ids)?;
        let beta = g.param(store, params.beta);
        g.scale_by(m_dyn, beta)
    };
    let pre = match variant {
        Variant::Full => {
            let mem = params.memory.ok_or_else(|| missing("a memory table"))?;
            let mem = g.param(store, mem);
            let m_static = static_lookup(g, mem, ids)?;
            let m_dyn = dynamic(g)?;
            g.add(m_static, m_dyn)?
        }
        Variant::StaticOnly => {
            let mem = params.memory.ok_or_else(|| missing("a memory table"))?;
            let mem = g.param(store, mem);
            static_lookup(g, mem, ids)?
        }
        Variant::DynamicOnly => dynamic(g)?,
        Variant::Disabled => {
            return Err(Error::Internal("expert_vector reached with the branch disabled".into()));
        }
    };
    let gamma = g.param(store, params.expert_norm);
    let normed = g.rmsnorm(pre, gamma, cfg.eps)?;
    let alpha = g.param(store, params.alpha);
    g.scale_by(normed, alpha)
}

/// `act(W_gate · h_t)` row-wise.
pub fn gate<S: Scalar>(g: &mut Graph<S>, w_gate: Var, h: Var, activation: GateActivation) -> Result<Var> {
    let z = g.scoped(scope::GATE, |g| g.linear(h, w_gate))?;
    Ok(match activation {
        GateActivation::Sigmoid => g.sigmoid(z),
        GateActivation::Silu => g.silu(z),
    })
}

/// `e + g` for additive strategies, `e ⊙ g` for multiplicative ones.
pub fn fuse<S: Scalar>(g: &mut Graph<S>, e: Var, gate: Var, strategy: FusionStrategy) -> Result<Var> {
    if strategy.is_additive() {
        g.add(e, gate)
    } else {
        g.mul(e, gate)
    }
}

/// `rmsnorm(W_out · v)` row-wise.
pub fn inject<S: Scalar>(g: &mut Graph<S>, w_out: Var, gamma: Var, v: Var, eps: f64) -> Result<Var> {
    let up = g.scoped(scope::OUT, |g| g.linear(v, w_out))?;
    g.rmsnorm(up, gamma, eps)
}

/// Full training-path branch over a batch: `ids[i]` is the token at row `i`
/// of `h`.
pub fn meki_forward_train<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    params: &MekiLayerParams,
    e_global: Var,
    ids: &[usize],
    h: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    if g.value(h).rows() != ids.len() {
        return Err(Error::shape("meki", g.shape(h), &[ids.len()]));
    }
    let e = expert_vector(g, store, params, e_global, ids, cfg, cfg.variant)?;
    gate_fuse_inject(g, store, params, e, h, cfg)
}

/// Shared tail of both paths: gate from `h`, fuse with `e`, project up.
pub(crate) fn gate_fuse_inject<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    params: &MekiLayerParams,
    e: Var,
    h: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let w_gate = g.param(store, params.w_gate);
    let gt = gate(g, w_gate, h, cfg.fusion.activation())?;
    let v = fuse(g, e, gt, cfg.fusion)?;
    let w_out = g.param(store, params.w_out);
    let gamma = g.param(store, params.out_norm);
    inject(g, w_out, gamma, v, cfg.eps)
}

/// Forward-only expert vector for a single token.
pub fn expert_vector_for<S: Scalar>(
    store: &ParamStore<S>,
    params: &MekiLayerParams,
    e_global: ParamId,
    token: usize,
    cfg: &ModelConfig,
    variant: Variant,
) -> Result<ExpertVector<S>> {
    let mut g = Graph::inference();
    let e = g.param(store, e_global);
    let out = expert_vector(&mut g, store, params, e, &[token], cfg, variant)?;
    Ok(ExpertVector(g.value(out).data().to_vec()))
}
