#![allow(dead_code)]

use lgd_core::gradcheck::{grad_check, GradCheckReport};
use lgd_core::{Graph, Result, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

type Body = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One differentiable op with inputs, reduced to a scalar by a fixed
/// random projection so every output component carries a distinct weight.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    body: Body,
}

impl OpCase {
    pub fn check(&self, tol: f64) -> GradCheckReport {
        grad_check(|g, v| (self.body)(g, v), &self.inputs, tol).unwrap()
    }
}

fn project(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn case<F>(name: &'static str, inputs: Vec<Tensor>, out_shape: &[usize], r: &mut ChaCha8Rng, f: F) -> OpCase
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
{
    let weights = uniform(r, out_shape, -1.0, 1.0);
    OpCase {
        name,
        inputs,
        body: Box::new(move |g, v| {
            let y = f(g, v)?;
            project(g, y, &weights)
        }),
    }
}

/// Every differentiable core op at extents `h×w×c` (each in 1..=8).
pub fn op_cases(seed: u64, (h, w, c): (usize, usize, usize)) -> Vec<OpCase> {
    let mut r = rng(seed);
    let r = &mut r;
    let hw = h * w;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let cout = (c % 5) + 1;
    let mut out = Vec::new();

    let map = uniform(r, &[h, w, c], -1.0, 1.0);
    let m1 = uniform(r, &[h, c], -1.0, 1.0);
    out.push(case("matmul", vec![m1.clone(), uniform(r, &[c, w], -1.0, 1.0)], &[h, w], r, |g, v| g.matmul(v[0], v[1])));
    out.push(case("transpose", vec![m1.clone()], &[c, h], r, |g, v| g.transpose(v[0])));
    out.push(case(
        "linear",
        vec![m1.clone(), uniform(r, &[c, w], -1.0, 1.0), uniform(r, &[w], -1.0, 1.0)],
        &[h, w],
        r,
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    ));
    out.push(case(
        "conv3x3",
        vec![map.clone(), uniform(r, &[3, 3, c, cout], -1.0, 1.0), uniform(r, &[cout], -1.0, 1.0)],
        &[h, w, cout],
        r,
        |g, v| g.conv3x3(v[0], v[1], Some(v[2]), 1),
    ));
    out.push(case(
        "conv3x3_stride2",
        vec![map.clone(), uniform(r, &[3, 3, c, cout], -1.0, 1.0)],
        &[ho, wo, cout],
        r,
        |g, v| g.conv3x3(v[0], v[1], None, 2),
    ));
    out.push(case("relu", vec![map.clone()], &[h, w, c], r, |g, v| Ok(g.relu(v[0]))));
    out.push(case("exp", vec![map.clone()], &[h, w, c], r, |g, v| Ok(g.exp(v[0]))));
    out.push(case("scale", vec![map.clone()], &[h, w, c], r, |g, v| Ok(g.scale(v[0], -1.7))));
    out.push(case("add", vec![map.clone(), uniform(r, &[h, w, c], -1.0, 1.0)], &[h, w, c], r, |g, v| g.add(v[0], v[1])));
    out.push(case("add_channel", vec![map.clone(), uniform(r, &[c], -1.0, 1.0)], &[h, w, c], r, |g, v| g.add(v[0], v[1])));
    out.push(case("sub", vec![map.clone(), uniform(r, &[h, w, c], -1.0, 1.0)], &[h, w, c], r, |g, v| g.sub(v[0], v[1])));
    out.push(case("mul", vec![map.clone(), uniform(r, &[h, w, c], -1.0, 1.0)], &[h, w, c], r, |g, v| g.mul(v[0], v[1])));
    out.push(case("mul_channel", vec![map.clone(), uniform(r, &[c], -1.0, 1.0)], &[h, w, c], r, |g, v| g.mul(v[0], v[1])));
    out.push(case("mul_spatial", vec![map.clone(), uniform(r, &[h, w, 1], -1.0, 1.0)], &[h, w, c], r, |g, v| g.mul(v[0], v[1])));
    out.push(case("sum_spatial", vec![map.clone()], &[c], r, |g, v| Ok(g.sum_spatial(v[0]))));
    out.push(case("reshape", vec![map.clone()], &[hw, c], r, move |g, v| g.reshape(v[0], &[hw, c])));
    out.push(case("layer_norm", vec![m1.clone()], &[h, c], r, |g, v| Ok(g.layer_norm(v[0], 1e-5))));
    out.push(case("instance_norm", vec![map.clone()], &[h, w, c], r, |g, v| Ok(g.instance_norm(v[0], 1e-5))));
    out.push(case(
        "concat_last",
        vec![map.clone(), uniform(r, &[h, w, cout], -1.0, 1.0)],
        &[h, w, c + cout],
        r,
        |g, v| g.concat_last(&[v[0], v[1]]),
    ));
    let keep = c.div_ceil(2);
    out.push(case("slice_last", vec![map.clone()], &[h, w, keep], r, move |g, v| g.slice_last(v[0], c - keep, keep)));
    let rows = h.div_ceil(2);
    out.push(case("slice_rows", vec![m1.clone()], &[rows, c], r, move |g, v| g.slice_rows(v[0], h - rows, rows)));
    out.push(case("resize_nearest", vec![map.clone()], &[2 * h, 2 * w, c], r, move |g, v| g.resize_nearest(v[0], 2 * h, 2 * w)));
    out.push(case("softmax_rows", vec![m1.clone()], &[h, c], r, |g, v| g.softmax_rows(v[0], 1.3)));
    out.push(case("max_rows", vec![m1.clone()], &[1, c], r, |g, v| g.max_rows(v[0])));
    out.push(case("repeat_rows", vec![uniform(r, &[1, c], -1.0, 1.0)], &[h, c], r, move |g, v| g.repeat_rows(v[0], h)));

    let classes: Vec<usize> = (0..hw).map(|_| r.gen_range(0..=c)).collect();
    out.push(OpCase {
        name: "focal_loss",
        inputs: vec![uniform(r, &[hw, c], -3.0, 3.0)],
        body: Box::new(move |g, v| g.focal_loss(v[0], &classes, 0.25, 2.0)),
    });
    let target = uniform(r, &[hw, 4], 0.5, 2.0);
    let mut positive: Vec<bool> = (0..hw).map(|_| r.gen_bool(0.6)).collect();
    positive[0] = true;
    out.push(OpCase {
        name: "iou_loss",
        inputs: vec![uniform(r, &[hw, 4], 0.5, 2.0)],
        body: Box::new(move |g, v| g.iou_loss(v[0], &target, &positive)),
    });
    out
}
