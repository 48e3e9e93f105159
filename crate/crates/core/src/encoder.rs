//! Label descriptors and their set encoder, per-level feature projection,
//! and mask pooling of appearance embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::scene::Annotation;
use crate::tensor::Tensor;

const PREFIX: &str = "lgd.label_enc";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Shared MLP, global max pool, per-row concat with the global feature.
    #[default]
    PointnetLite,
    /// Shared MLP only; rows never see each other.
    Mlp,
}

/// `4 + K + 1`: box, one-hot class, context slot.
pub fn descriptor_dim(num_classes: usize) -> usize {
    4 + num_classes + 1
}

/// `(N+1)×(4+K+1)` descriptors; row 0 is the whole-image context object.
pub fn build_descriptors(annotations: &[Annotation], num_classes: usize) -> Tensor {
    let d = descriptor_dim(num_classes);
    let mut data = vec![0.0; (annotations.len() + 1) * d];
    data[..4].copy_from_slice(&[0.0, 0.0, 1.0, 1.0]);
    data[4 + num_classes] = 1.0;
    for (i, a) in annotations.iter().enumerate() {
        let row = &mut data[(i + 1) * d..(i + 2) * d];
        row[..4].copy_from_slice(&a.bbox);
        row[4 + a.category] = 1.0;
    }
    Tensor::new(&[annotations.len() + 1, d], data).unwrap()
}

pub fn init_label_encoder<R: Rng>(
    store: &mut ParamStore,
    in_dim: usize,
    hidden: [usize; 2],
    channels: usize,
    kind: EncoderKind,
    rng: &mut R,
) -> Result<()> {
    let mut fan_in = in_dim;
    for (i, &h) in hidden.iter().enumerate() {
        let n = i + 1;
        store.insert_he_uniform(&format!("{PREFIX}.fc{n}.w"), &[fan_in, h], fan_in, rng)?;
        store.insert(&format!("{PREFIX}.fc{n}.b"), Tensor::zeros(&[h]))?;
        store.insert(&format!("{PREFIX}.ln{n}.gamma"), Tensor::full(&[h], 1.0))?;
        store.insert(&format!("{PREFIX}.ln{n}.beta"), Tensor::zeros(&[h]))?;
        fan_in = h;
    }
    let out_in = match kind {
        EncoderKind::PointnetLite => 2 * hidden[1],
        EncoderKind::Mlp => hidden[1],
    };
    store.insert_he_uniform(&format!("{PREFIX}.out.w"), &[out_in, channels], out_in, rng)?;
    store.insert(&format!("{PREFIX}.out.b"), Tensor::zeros(&[channels]))
}

fn affine(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

/// Label embeddings `L`, one `C`-row per descriptor.
pub fn encode_labels(g: &mut Graph, store: &ParamStore, descriptors: &Tensor, kind: EncoderKind) -> Result<Var> {
    if descriptors.rank() != 2 {
        return Err(Error::invalid(
            "encode_labels",
            format!("descriptors must be a matrix, got {:?}", descriptors.shape()),
        ));
    }
    let mut h = g.constant(descriptors.clone());
    for n in 1..=2 {
        let z = affine(g, store, &format!("{PREFIX}.fc{n}"), h)?;
        let z = g.layer_norm(z, LN_EPS);
        let gamma = g.param(store, &format!("{PREFIX}.ln{n}.gamma"))?;
        let beta = g.param(store, &format!("{PREFIX}.ln{n}.beta"))?;
        let z = g.mul(z, gamma)?;
        let z = g.add(z, beta)?;
        h = g.relu(z);
    }
    let features = match kind {
        EncoderKind::PointnetLite => {
            let rows = g.shape(h)[0];
            let global = g.max_rows(h)?;
            let global = g.repeat_rows(global, rows)?;
            g.concat_last(&[h, global])?
        }
        EncoderKind::Mlp => h,
    };
    affine(g, store, &format!("{PREFIX}.out"), features)
}

pub fn proj_name(level: usize) -> String {
    format!("lgd.proj.p{}", level + 1)
}

pub fn init_projections<R: Rng>(store: &mut ParamStore, levels: usize, channels: usize, rng: &mut R) -> Result<()> {
    for level in 0..levels {
        let name = proj_name(level);
        store.insert_he_uniform(&format!("{name}.w"), &[3, 3, channels, channels], 9 * channels, rng)?;
        store.insert(&format!("{name}.b"), Tensor::zeros(&[channels]))?;
    }
    Ok(())
}

/// One 3×3 convolution with the weights of `level`.
pub fn project_features(g: &mut Graph, store: &ParamStore, level: usize, x: Var) -> Result<Var> {
    let name = proj_name(level);
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.conv3x3(x, w, Some(b), 1)
}

/// `a_i = Σ_cells m_i · x` for every mask column. `masks` is
/// `(H·W)×(N+1)`, the result `(N+1)×C`.
pub fn mask_pool(g: &mut Graph, x: Var, masks: &Tensor) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || masks.rank() != 2 || masks.shape()[0] != s[0] * s[1] {
        return Err(Error::shape("mask_pool", &s, masks.shape()));
    }
    let (cells, n) = (masks.shape()[0], masks.shape()[1]);
    let mut mt = vec![0.0; cells * n];
    for cell in 0..cells {
        for i in 0..n {
            mt[i * cells + cell] = masks.data()[cell * n + i];
        }
    }
    let mt = g.constant(Tensor::new(&[n, cells], mt)?);
    let flat = g.reshape(x, &[cells, s[2]])?;
    g.matmul(mt, flat)
}
