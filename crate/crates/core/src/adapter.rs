//! Multi-head cross-attention between appearance and label embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const PREFIX: &str = "lgd.attn";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Temperature {
    /// `sqrt(C / T)`, the per-head dimension.
    #[default]
    PerHead,
    /// `sqrt(C)` regardless of head count.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QueryDirection {
    /// Appearance embeddings query the label embeddings.
    #[default]
    Student,
    /// Label embeddings query the appearance embeddings.
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub heads: usize,
    pub temperature: Temperature,
    pub query: QueryDirection,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            heads: 8,
            temperature: Temperature::PerHead,
            query: QueryDirection::Student,
        }
    }
}

impl AttentionConfig {
    pub fn tau(&self, channels: usize) -> f64 {
        match self.temperature {
            Temperature::PerHead => (channels as f64 / self.heads as f64).sqrt(),
            Temperature::Strict => (channels as f64).sqrt(),
        }
    }
}

/// `f_Q` and `f_K` are bias-free; `f_V` and `f_P` carry biases.
pub fn init_attention<R: Rng>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Result<()> {
    for m in ["q", "k", "v", "p"] {
        store.insert_he_uniform(&format!("{PREFIX}.{m}.w"), &[channels, channels], channels, rng)?;
    }
    for m in ["v", "p"] {
        store.insert(&format!("{PREFIX}.{m}.b"), Tensor::zeros(&[channels]))?;
    }
    Ok(())
}

pub struct Attended {
    /// Interacted embeddings, one row per query.
    pub output: Var,
    /// One `(N+1)×(N+1)` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

pub fn cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    appearance: Var,
    labels: Var,
    cfg: &AttentionConfig,
) -> Result<Attended> {
    let (sa, sl) = (g.shape(appearance).to_vec(), g.shape(labels).to_vec());
    if sa.len() != 2 || sa != sl {
        return Err(Error::shape("cross_attention", &sa, &sl));
    }
    let c = sa[1];
    if cfg.heads == 0 || c % cfg.heads != 0 {
        return Err(Error::invalid(
            "cross_attention",
            format!("{} heads do not divide {c} channels", cfg.heads),
        ));
    }
    let (queries, memory) = match cfg.query {
        QueryDirection::Student => (appearance, labels),
        QueryDirection::Label => (labels, appearance),
    };
    let wq = g.param(store, &format!("{PREFIX}.q.w"))?;
    let wk = g.param(store, &format!("{PREFIX}.k.w"))?;
    let wv = g.param(store, &format!("{PREFIX}.v.w"))?;
    let bv = g.param(store, &format!("{PREFIX}.v.b"))?;
    let q = g.matmul(queries, wq)?;
    let k = g.matmul(memory, wk)?;
    let v = g.linear(memory, wv, Some(bv))?;

    let dh = c / cfg.heads;
    let tau = cfg.tau(c);
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for t in 0..cfg.heads {
        let qt = g.slice_last(q, t * dh, dh)?;
        let kt = g.slice_last(k, t * dh, dh)?;
        let vt = g.slice_last(v, t * dh, dh)?;
        let kt = g.transpose(kt)?;
        let scores = g.matmul(qt, kt)?;
        let w = g.softmax_rows(scores, tau)?;
        heads.push(g.matmul(w, vt)?);
        weights.push(w);
    }
    let joined = g.concat_last(&heads)?;
    let wp = g.param(store, &format!("{PREFIX}.p.w"))?;
    let bp = g.param(store, &format!("{PREFIX}.p.b"))?;
    let output = g.linear(joined, wp, Some(bp))?;
    Ok(Attended { output, weights })
}
