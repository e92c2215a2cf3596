//! Model configuration and the flat `key = value` text format shared by
//! config files and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! text_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

text_enum!(
    /// How the gate signal combines with the expert vector.
    FusionStrategy {
        AdditiveSigmoid => "additive_sigmoid",
        MultiplicativeSigmoid => "multiplicative_sigmoid",
        AdditiveSilu => "additive_silu",
        MultiplicativeSilu => "multiplicative_silu",
    }
);

text_enum!(
    /// Where the memory branch sits inside a block.
    InjectionPosition {
        ParallelFfn => "parallel_ffn",
        ParallelAttn => "parallel_attn",
        AfterAttn => "after_attn",
        AfterFfn => "after_ffn",
    }
);

text_enum!(
    /// Which expert-vector sources are active.
    Variant {
        Full => "full",
        StaticOnly => "static_only",
        DynamicOnly => "dynamic_only",
        Disabled => "disabled",
    }
);

text_enum!(
    ProjectorKind {
        SwiGlu => "swiglu",
        Linear => "linear",
    }
);

/// Gate nonlinearity; fixed by the fusion strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateActivation {
    Sigmoid,
    Silu,
}

impl FusionStrategy {
    pub fn activation(self) -> GateActivation {
        match self {
            FusionStrategy::AdditiveSigmoid | FusionStrategy::MultiplicativeSigmoid => GateActivation::Sigmoid,
            FusionStrategy::AdditiveSilu | FusionStrategy::MultiplicativeSilu => GateActivation::Silu,
        }
    }

    pub fn is_additive(self) -> bool {
        matches!(self, FusionStrategy::AdditiveSigmoid | FusionStrategy::AdditiveSilu)
    }
}

impl Variant {
    pub fn uses_memory(self) -> bool {
        matches!(self, Variant::Full | Variant::StaticOnly)
    }

    pub fn uses_projector(self) -> bool {
        matches!(self, Variant::Full | Variant::DynamicOnly)
    }

    pub fn enabled(self) -> bool {
        self != Variant::Disabled
    }
}

/// Architectural hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_mem: usize,
    pub vocab_size: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub rope_theta: f64,
    pub eps: f64,
    pub fusion: FusionStrategy,
    pub position: InjectionPosition,
    pub variant: Variant,
    pub projector_kind: ProjectorKind,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            d_mem: 16,
            vocab_size: 512,
            n_heads: 4,
            d_ffn: 192,
            max_seq_len: 128,
            rope_theta: 500_000.0,
            eps: 1e-6,
            fusion: FusionStrategy::AdditiveSigmoid,
            position: InjectionPosition::ParallelFfn,
            variant: Variant::Full,
            projector_kind: ProjectorKind::SwiGlu,
            tie_embeddings: true,
        }
    }

    /// The 0.6B shape: 28 layers, width 1024, memory width 128, 151680 tokens.
    pub fn meki_0_6b() -> Self {
        Self {
            n_layers: 28,
            d_model: 1024,
            d_mem: 128,
            vocab_size: 151_680,
            n_heads: 16,
            d_ffn: 3072,
            max_seq_len: 4096,
            ..Self::toy()
        }
    }

    /// Intermediate width of the SwiGLU projector: `floor(d_model / 2)`, at least 1.
    pub fn projector_hidden(&self) -> usize {
        (self.d_model / 2).max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_mem", self.d_mem),
            ("vocab_size", self.vocab_size),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_mem >= self.d_model {
            return Err(Error::Config(format!(
                "d_mem ({}) must be smaller than d_model ({})",
                self.d_mem, self.d_model
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) not divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::Config(format!("rope_theta must be > 0, got {}", self.rope_theta)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.set("n_layers", self.n_layers);
        kv.set("d_model", self.d_model);
        kv.set("d_mem", self.d_mem);
        kv.set("vocab_size", self.vocab_size);
        kv.set("n_heads", self.n_heads);
        kv.set("d_ffn", self.d_ffn);
        kv.set("max_seq_len", self.max_seq_len);
        kv.set("rope_theta", self.rope_theta);
        kv.set("eps", self.eps);
        kv.set("fusion", self.fusion);
        kv.set("position", self.position);
        kv.set("variant", self.variant);
        kv.set("projector_kind", self.projector_kind);
        kv.set("tie_embeddings", self.tie_embeddings);
        kv
    }

    /// Read model fields from `kv`, falling back to [`ModelConfig::toy`] for
    /// missing keys. Unrelated keys are ignored.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::toy();
        let cfg = Self {
            n_layers: kv.get_or("n_layers", d.n_layers)?,
            d_model: kv.get_or("d_model", d.d_model)?,
            d_mem: kv.get_or("d_mem", d.d_mem)?,
            vocab_size: kv.get_or("vocab_size", d.vocab_size)?,
            n_heads: kv.get_or("n_heads", d.n_heads)?,
            d_ffn: kv.get_or("d_ffn", d.d_ffn)?,
            max_seq_len: kv.get_or("max_seq_len", d.max_seq_len)?,
            rope_theta: kv.get_or("rope_theta", d.rope_theta)?,
            eps: kv.get_or("eps", d.eps)?,
            fusion: kv.get_or("fusion", d.fusion)?,
            position: kv.get_or("position", d.position)?,
            variant: kv.get_or("variant", d.variant)?,
            projector_kind: kv.get_or("projector_kind", d.projector_kind)?,
            tie_embeddings: kv.get_or("tie_embeddings", d.tie_embeddings)?,
        };
        Ok(cfg)
    }
}

/// Ordered `key = value` map. Lines starting with `#` are comments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("bad value for `{key}`: `{v}` ({e})"))),
        }
    }

    pub fn extend(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

impl fmt::Display for KvMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
