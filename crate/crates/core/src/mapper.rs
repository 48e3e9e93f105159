//! Maps interacted embeddings back onto the feature grid, adapts student
//! features, and measures the normalized distillation distance.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const PREFIX: &str = "lgd.mapper";
const ADAPT: &str = "lgd.adapt";
pub const DISTILL_EPS: f64 = 1e-5;

fn conv_params<R: Rng>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Result<()> {
    store.insert_he_uniform(&format!("{name}.w"), &[3, 3, c, c], 9 * c, rng)?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[c]))
}

/// `F_ctx`, `F_inst` (affine), `G` (one conv) and `F_ref` (three convs).
pub fn init_mapper<R: Rng>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Result<()> {
    for fc in ["ctx", "inst"] {
        store.insert_he_uniform(&format!("{PREFIX}.{fc}.w"), &[channels, channels], channels, rng)?;
        store.insert(&format!("{PREFIX}.{fc}.b"), Tensor::zeros(&[channels]))?;
    }
    for conv in ["g", "ref1", "ref2", "ref3"] {
        conv_params(store, &format!("{PREFIX}.{conv}"), channels, rng)?;
    }
    Ok(())
}

/// Two convolutions with a ReLU between them.
pub fn init_adapter<R: Rng>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Result<()> {
    conv_params(store, &format!("{ADAPT}.c1"), channels, rng)?;
    conv_params(store, &format!("{ADAPT}.c2"), channels, rng)
}

fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.conv3x3(x, w, Some(b), 1)
}

fn affine(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

fn bind(g: &mut Graph, store: &ParamStore, name: &str) -> Result<()> {
    g.param(store, &format!("{name}.w"))?;
    g.param(store, &format!("{name}.b"))?;
    Ok(())
}

/// Mask columns `start..start+len` of an `(H·W)×(N+1)` matrix.
fn mask_columns(masks: &Tensor, start: usize, len: usize) -> Tensor {
    let n = masks.last_dim();
    let data = masks
        .data()
        .chunks_exact(n)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect();
    Tensor::new(&[masks.shape()[0], len], data).unwrap()
}

/// The map fed into the refinement stack:
/// `m_0 F_ctx(e_0)ᵀ + G(Σ_{i≥1} m_i F_inst(e_i)ᵀ)`, as `H×W×C`. Without
/// context participation the first term is dropped.
pub fn compose_fill(
    g: &mut Graph,
    store: &ParamStore,
    embeddings: Var,
    masks: &Tensor,
    extent: (usize, usize),
    context: bool,
) -> Result<Var> {
    let es = g.shape(embeddings).to_vec();
    let (h, w) = extent;
    if es.len() != 2 || masks.rank() != 2 || masks.shape()[1] != es[0] || masks.shape()[0] != h * w {
        return Err(Error::shape("map_knowledge", &es, masks.shape()));
    }
    let (rows, c) = (es[0], es[1]);
    let objects = rows - 1;

    let inst_flat = if objects > 0 {
        let e = g.slice_rows(embeddings, 1, objects)?;
        let f = affine(g, store, &format!("{PREFIX}.inst"), e)?;
        let m = g.constant(mask_columns(masks, 1, objects));
        g.matmul(m, f)?
    } else {
        // bound but unused, so the entries report an exact zero gradient
        bind(g, store, &format!("{PREFIX}.inst"))?;
        g.constant(Tensor::zeros(&[h * w, c]))
    };
    let inst = g.reshape(inst_flat, &[h, w, c])?;
    let filled = conv(g, store, &format!("{PREFIX}.g"), inst)?;
    if !context {
        bind(g, store, &format!("{PREFIX}.ctx"))?;
        return Ok(filled);
    }
    let e0 = g.slice_rows(embeddings, 0, 1)?;
    let ctx = affine(g, store, &format!("{PREFIX}.ctx"), e0)?;
    let m0 = g.constant(mask_columns(masks, 0, 1));
    let ctx_map = g.matmul(m0, ctx)?;
    let ctx_map = g.reshape(ctx_map, &[h, w, c])?;
    g.add(ctx_map, filled)
}

/// Instructive features of one level: ReLU then three convolutions over
/// [`compose_fill`].
pub fn map_knowledge(
    g: &mut Graph,
    store: &ParamStore,
    embeddings: Var,
    masks: &Tensor,
    extent: (usize, usize),
    context: bool,
) -> Result<Var> {
    let fill = compose_fill(g, store, embeddings, masks, extent, context)?;
    let mut x = g.relu(fill);
    for i in 1..=3 {
        x = conv(g, store, &format!("{PREFIX}.ref{i}"), x)?;
    }
    Ok(x)
}

pub fn adapt_student(g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
    let y = conv(g, store, &format!("{ADAPT}.c1"), x)?;
    let y = g.relu(y);
    conv(g, store, &format!("{ADAPT}.c2"), y)
}

/// `Σ_p ‖IN(X_p^S) − IN(detach(X_p^I))‖² / Σ_p H_p·W_p·C`.
pub fn distill_loss(g: &mut Graph, student: &[Var], instructive: &[Var]) -> Result<Var> {
    if student.len() != instructive.len() || student.is_empty() {
        return Err(Error::invalid(
            "distill_loss",
            format!("{} student levels vs {} instructive levels", student.len(), instructive.len()),
        ));
    }
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (&s, &t) in student.iter().zip(instructive) {
        if g.shape(s) != g.shape(t) {
            return Err(Error::shape("distill_loss", g.shape(s), g.shape(t)));
        }
        count += g.value(s).numel();
        let t = g.detach(t);
        let ns = g.instance_norm(s, DISTILL_EPS);
        let nt = g.instance_norm(t, DISTILL_EPS);
        let d = g.sub(ns, nt)?;
        let sq = g.mul(d, d)?;
        let level = g.sum_all(sq);
        total = Some(match total {
            Some(acc) => g.add(acc, level)?,
            None => level,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use crate::rng;
    use crate::scene::{rasterize_mask, Annotation, MaskPyramid};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn identity_kernel(c: usize) -> Tensor {
        let mut k = vec![0.0; 9 * c * c];
        for ch in 0..c {
            k[4 * c * c + ch * c + ch] = 1.0;
        }
        Tensor::new(&[3, 3, c, c], k).unwrap()
    }

    fn mapper_store(c: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut r = rng::stream(seed, "init");
        init_mapper(&mut s, c, &mut r).unwrap();
        init_adapter(&mut s, c, &mut r).unwrap();
        s
    }

    fn set_identity(s: &mut ParamStore, names: &[&str], c: usize) {
        for n in names {
            *s.value_mut(&format!("{n}.w")).unwrap() = identity_kernel(c);
            *s.value_mut(&format!("{n}.b")).unwrap() = Tensor::zeros(&[c]);
        }
    }

    fn affine_row(s: &ParamStore, name: &str, e: &[f64]) -> Vec<f64> {
        let c = e.len();
        let w = s.value(&format!("{name}.w")).unwrap().data();
        let b = s.value(&format!("{name}.b")).unwrap().data();
        (0..c).map(|j| b[j] + (0..c).map(|i| e[i] * w[i * c + j]).sum::<f64>()).collect()
    }

    fn boxes() -> Vec<Annotation> {
        vec![
            Annotation {
                bbox: [0.0, 0.0, 0.5, 0.5],
                category: 0,
            },
            Annotation {
                bbox: [0.5, 0.5, 1.0, 0.75],
                category: 1,
            },
        ]
    }

    #[test]
    fn zero_mapper_gives_zero_map() {
        let c = 3;
        let mut s = mapper_store(c, 1);
        let names: Vec<String> = s.names().filter(|n| n.starts_with(PREFIX)).map(str::to_string).collect();
        for n in names {
            let v = s.value_mut(&n).unwrap();
            *v = Tensor::zeros(v.shape());
        }
        let masks = MaskPyramid::build(&boxes(), &[(4, 4)]);
        let mut g = Graph::new();
        let e = g.constant(random(&[3, c], 2));
        let x = map_knowledge(&mut g, &s, e, &masks.levels[0], (4, 4), true).unwrap();
        assert!(g.value(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_scene_uses_context_only() {
        let c = 3;
        let s = mapper_store(c, 2);
        let masks = MaskPyramid::build(&[], &[(4, 4)]);
        let e = random(&[1, c], 3);
        let mut g = Graph::new();
        let ev = g.constant(e.clone());
        let fill = compose_fill(&mut g, &s, ev, &masks.levels[0], (4, 4), true).unwrap();
        let ctx = affine_row(&s, "lgd.mapper.ctx", e.data());
        let gb = s.value("lgd.mapper.g.b").unwrap().data();
        for cell in g.value(fill).data().chunks_exact(c) {
            for ch in 0..c {
                assert!((cell[ch] - (ctx[ch] + gb[ch])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disjoint_boxes_fill_by_construction() {
        let c = 3;
        let mut s = mapper_store(c, 4);
        set_identity(&mut s, &["lgd.mapper.g"], c);
        let anns = boxes();
        let masks = MaskPyramid::build(&anns, &[(4, 4)]);
        let e = random(&[3, c], 5);
        let mut g = Graph::new();
        let ev = g.constant(e.clone());
        let fill = compose_fill(&mut g, &s, ev, &masks.levels[0], (4, 4), true).unwrap();
        let ctx = affine_row(&s, "lgd.mapper.ctx", &e.data()[..c]);
        let inst: Vec<Vec<f64>> = (1..3).map(|i| affine_row(&s, "lgd.mapper.inst", &e.data()[i * c..(i + 1) * c])).collect();
        let m: Vec<Vec<f64>> = anns.iter().map(|a| rasterize_mask(a.bbox, 4, 4)).collect();
        for (cell, got) in g.value(fill).data().chunks_exact(c).enumerate() {
            for ch in 0..c {
                let mut expected = ctx[ch];
                for (i, mi) in m.iter().enumerate() {
                    if mi[cell] == 1.0 {
                        expected += inst[i][ch];
                    }
                }
                assert!((got[ch] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn map_is_constant_inside_each_box() {
        let c = 2;
        let mut s = mapper_store(c, 6);
        set_identity(&mut s, &["lgd.mapper.g", "lgd.mapper.ref1", "lgd.mapper.ref2", "lgd.mapper.ref3"], c);
        let anns = boxes();
        let masks = MaskPyramid::build(&anns, &[(8, 8)]);
        let mut g = Graph::new();
        let e = g.constant(random(&[3, c], 7));
        let x = map_knowledge(&mut g, &s, e, &masks.levels[0], (8, 8), true).unwrap();
        let out = g.value(x).data();
        for a in &anns {
            let m = rasterize_mask(a.bbox, 8, 8);
            let cells: Vec<usize> = (0..64).filter(|&i| m[i] == 1.0).collect();
            for &cell in &cells {
                assert_eq!(out[cell * c..(cell + 1) * c], out[cells[0] * c..(cells[0] + 1) * c]);
            }
        }
    }

    #[test]
    fn count_mismatch_rejected() {
        let s = mapper_store(2, 0);
        let masks = MaskPyramid::build(&boxes(), &[(4, 4)]);
        let mut g = Graph::new();
        let e = g.constant(random(&[2, 2], 0));
        assert!(map_knowledge(&mut g, &s, e, &masks.levels[0], (4, 4), true).is_err());
    }

    #[test]
    fn identity_adapter_on_nonnegative_maps() {
        let c = 3;
        let mut s = mapper_store(c, 8);
        set_identity(&mut s, &["lgd.adapt.c1", "lgd.adapt.c2"], c);
        let x = Tensor::new(&[8, 8, c], random(&[8, 8, c], 9).data().iter().map(|v| v.abs()).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = adapt_student(&mut g, &s, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn adapter_gradients_pass_check() {
        let c = 2;
        let s = mapper_store(c, 10);
        let x = random(&[4, 4, c], 11);
        let report = grad_check_params(
            &s,
            |g, st| {
                let xv = g.constant(x.clone());
                let y = adapt_student(g, st, xv)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            },
            |n| n.starts_with(ADAPT),
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    fn distill_of(a: &[Tensor], b: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let av: Vec<Var> = a.iter().map(|t| g.constant(t.clone())).collect();
        let bv: Vec<Var> = b.iter().map(|t| g.constant(t.clone())).collect();
        let l = distill_loss(&mut g, &av, &bv).unwrap();
        g.value(l).item()
    }

    #[test]
    fn identical_maps_have_zero_loss() {
        let x = vec![random(&[4, 4, 3], 1), random(&[2, 2, 3], 2)];
        assert_eq!(distill_of(&x, &x), 0.0);
    }

    #[test]
    fn per_channel_scaling_is_invisible() {
        let s = vec![random(&[4, 4, 3], 3), random(&[2, 2, 3], 4)];
        let t = vec![random(&[4, 4, 3], 5), random(&[2, 2, 3], 6)];
        let scaled: Vec<Tensor> = t
            .iter()
            .map(|x| Tensor::new(x.shape(), x.data().iter().map(|v| 3.0 * v).collect()).unwrap())
            .collect();
        let (a, b) = (distill_of(&s, &t), distill_of(&s, &scaled));
        // eps breaks exact invariance by O(eps / channel variance)
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-4 * a, "{a} vs {b}");
    }

    #[test]
    fn distill_shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(distill_loss(&mut g, &[a], &[b]).is_err());
    }

    #[test]
    fn distill_gradient_skips_instructive_branch() {
        let c = 2;
        let s = mapper_store(c, 12);
        let masks = MaskPyramid::build(&boxes(), &[(4, 4)]);
        let x = random(&[4, 4, c], 13);
        let mut g = Graph::new();
        let e = g.input(random(&[3, c], 14), true);
        let xi = map_knowledge(&mut g, &s, e, &masks.levels[0], (4, 4), true).unwrap();
        let xv = g.constant(x);
        let xs = adapt_student(&mut g, &s, xv).unwrap();
        let loss = distill_loss(&mut g, &[xs], &[xi]).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(e).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
        for (name, grad) in g.param_grads() {
            let nonzero = grad.data().iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, name.starts_with(ADAPT), "{name}");
        }
    }
}
