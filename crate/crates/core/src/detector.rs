//! The anchor-free student: strided conv backbone, two-level FPN-lite, a
//! detection head that can be applied to any pyramid, center-based target
//! assignment, the focal + IoU loss, and box decoding with per-class NMS.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::numeric::sigmoid;
use crate::params::ParamStore;
use crate::scene::Annotation;
use crate::tensor::Tensor;

/// Strides of the two pyramid levels.
pub const STRIDES: [usize; 2] = [8, 16];
/// Total downsampling of the backbone; input sides must be multiples of it.
pub const MAX_STRIDE: usize = 16;

pub const HEAD_PREFIX: &str = "head";
pub const UNSHARED_HEAD_PREFIX: &str = "lgd.head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Pyramid width `C`.
    pub channels: usize,
    /// Output widths of the four stride-2 backbone blocks.
    pub backbone_widths: [usize; 4],
    /// Longer box side (pixels) separating level 1 from level 2.
    pub size_split: f64,
    pub prior_prob: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_classes: 3,
            channels: 64,
            backbone_widths: [16, 32, 64, 64],
            size_split: 32.0,
            prior_prob: 0.01,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

fn conv_params<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<()> {
    store.insert_he_uniform(&format!("{name}.w"), &[3, 3, cin, cout], 9 * cin, rng)?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[cout]))
}

/// Allocates `student.backbone.*` and `student.fpn.*`.
pub fn init_student<R: Rng>(store: &mut ParamStore, cfg: &DetectorConfig, rng: &mut R) -> Result<()> {
    let mut cin = 3;
    for (i, &w) in cfg.backbone_widths.iter().enumerate() {
        conv_params(store, &format!("student.backbone.c{}", i + 1), cin, w, rng)?;
        cin = w;
    }
    for (name, cin) in [("lat3", cfg.backbone_widths[2]), ("lat4", cfg.backbone_widths[3])] {
        store.insert_he_uniform(&format!("student.fpn.{name}.w"), &[cin, cfg.channels], cin, rng)?;
        store.insert(&format!("student.fpn.{name}.b"), Tensor::zeros(&[cfg.channels]))?;
    }
    Ok(())
}

/// Weight bound of the two prediction convolutions (std 0.01), so that
/// initial logits sit at the prior bias.
pub const PREDICTION_INIT_BOUND: f64 = 0.017_320_508_075_688_773;

/// Allocates one detection head under `prefix`. The classification bias
/// starts at `-ln((1 - prior) / prior)`.
pub fn init_head<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &DetectorConfig, rng: &mut R) -> Result<()> {
    let c = cfg.channels;
    conv_params(store, &format!("{prefix}.tower"), c, c, rng)?;
    store.insert_uniform(&format!("{prefix}.cls.w"), &[3, 3, c, cfg.num_classes], PREDICTION_INIT_BOUND, rng)?;
    let bias = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
    store.insert(&format!("{prefix}.cls.b"), Tensor::full(&[cfg.num_classes], bias))?;
    store.insert_uniform(&format!("{prefix}.reg.w"), &[3, 3, c, 4], PREDICTION_INIT_BOUND, rng)?;
    store.insert(&format!("{prefix}.reg.b"), Tensor::zeros(&[4]))
}

/// Student feature maps, finest level first.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<Var>,
    pub extents: Vec<(usize, usize)>,
}

pub fn level_extents(height: usize, width: usize) -> Vec<(usize, usize)> {
    STRIDES.iter().map(|s| (height.div_ceil(*s), width.div_ceil(*s))).collect()
}

fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.conv3x3(x, w, Some(b), stride)
}

/// Per-pixel affine map over channels (a 1×1 convolution).
pub fn pointwise(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = g.reshape(x, &[rows, shape[shape.len() - 1]])?;
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.linear(flat, w, Some(b))?;
    let cout = g.shape(y)[1];
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = cout;
    g.reshape(y, &out_shape)
}

/// Image `H×W×3` to the two-level pyramid (strides 8 and 16).
pub fn forward_backbone(g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<Pyramid> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::invalid("forward_backbone", format!("expected an H×W×3 image, got {s:?}")));
    }
    if s[0] % MAX_STRIDE != 0 || s[1] % MAX_STRIDE != 0 {
        return Err(Error::invalid(
            "forward_backbone",
            format!("image {}×{} is not divisible by stride {MAX_STRIDE}", s[0], s[1]),
        ));
    }
    let mut x = g.constant(image.clone());
    let mut taps = Vec::with_capacity(4);
    for i in 1..=4 {
        let y = conv(g, store, &format!("student.backbone.c{i}"), x, 2)?;
        x = g.relu(y);
        taps.push(x);
    }
    let p2 = pointwise(g, store, "student.fpn.lat4", taps[3])?;
    let lat3 = pointwise(g, store, "student.fpn.lat3", taps[2])?;
    let (h1, w1) = (g.shape(lat3)[0], g.shape(lat3)[1]);
    let up = g.resize_nearest(p2, h1, w1)?;
    let p1 = g.add(lat3, up)?;
    Ok(Pyramid {
        levels: vec![p1, p2],
        extents: level_extents(s[0], s[1]),
    })
}

/// Per-level head outputs: logits `H_p×W_p×K` and positive regressions
/// `H_p×W_p×4` in stride units.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub cls: Vec<Var>,
    pub reg: Vec<Var>,
}

/// Applies the head under `prefix` to every level. Parameters are bound by
/// name, so two calls with the same prefix on one graph share them.
pub fn detection_head(g: &mut Graph, store: &ParamStore, prefix: &str, levels: &[Var]) -> Result<HeadOutput> {
    let mut cls = Vec::with_capacity(levels.len());
    let mut reg = Vec::with_capacity(levels.len());
    for &x in levels {
        let t = conv(g, store, &format!("{prefix}.tower"), x, 1)?;
        let t = g.relu(t);
        cls.push(conv(g, store, &format!("{prefix}.cls"), t, 1)?);
        let r = conv(g, store, &format!("{prefix}.reg"), t, 1)?;
        reg.push(g.exp(r));
    }
    Ok(HeadOutput { cls, reg })
}

// ------------------------------------------------------------ targets

#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    /// Row-major cell labels; `num_classes` marks background.
    pub classes: Vec<usize>,
    /// `(H_p·W_p)×4` distances `(l, t, r, b)` in stride units, zero off
    /// the positive cells.
    pub reg: Tensor,
    pub positive: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMap {
    pub levels: Vec<LevelTargets>,
}

impl TargetMap {
    pub fn num_positive(&self) -> usize {
        self.levels.iter().map(|l| l.positive.iter().filter(|&&p| p).count()).sum()
    }
}

/// Whether a box with longer side `side` (pixels) belongs on `level`.
pub fn level_accepts(level: usize, side: f64, split: f64) -> bool {
    if level == 0 {
        side <= split
    } else {
        side > split
    }
}

pub fn assign_targets(annotations: &[Annotation], image_size: (usize, usize), cfg: &DetectorConfig) -> TargetMap {
    let (img_h, img_w) = (image_size.0 as f64, image_size.1 as f64);
    let boxes: Vec<[f64; 4]> = annotations
        .iter()
        .map(|a| [a.bbox[0] * img_w, a.bbox[1] * img_h, a.bbox[2] * img_w, a.bbox[3] * img_h])
        .collect();
    let levels = level_extents(image_size.0, image_size.1)
        .into_iter()
        .enumerate()
        .map(|(level, (hp, wp))| {
            let s = STRIDES[level] as f64;
            let mut classes = vec![cfg.num_classes; hp * wp];
            let mut reg = vec![0.0; hp * wp * 4];
            let mut positive = vec![false; hp * wp];
            for r in 0..hp {
                for c in 0..wp {
                    let (cx, cy) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
                    let mut best: Option<(f64, usize)> = None;
                    for (i, b) in boxes.iter().enumerate() {
                        let inside = b[0] < cx && cx < b[2] && b[1] < cy && cy < b[3];
                        let side = (b[2] - b[0]).max(b[3] - b[1]);
                        if !inside || !level_accepts(level, side, cfg.size_split) {
                            continue;
                        }
                        let area = (b[2] - b[0]) * (b[3] - b[1]);
                        if best.is_none_or(|(a, _)| area < a) {
                            best = Some((area, i));
                        }
                    }
                    if let Some((_, i)) = best {
                        let cell = r * wp + c;
                        let b = boxes[i];
                        classes[cell] = annotations[i].category;
                        positive[cell] = true;
                        reg[cell * 4..cell * 4 + 4]
                            .copy_from_slice(&[(cx - b[0]) / s, (cy - b[1]) / s, (b[2] - cx) / s, (b[3] - cy) / s]);
                    }
                }
            }
            LevelTargets {
                classes,
                reg: Tensor::new(&[hp * wp, 4], reg).unwrap(),
                positive,
            }
        })
        .collect();
    TargetMap { levels }
}

/// `(Σ focal + Σ_{positive} −ln IoU) / max(1, #positive)` over all levels.
pub fn detection_loss(g: &mut Graph, out: &HeadOutput, targets: &TargetMap, cfg: &DetectorConfig) -> Result<Var> {
    if out.cls.len() != targets.levels.len() {
        return Err(Error::invalid(
            "detection_loss",
            format!("{} head levels vs {} target levels", out.cls.len(), targets.levels.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for ((&cls, &reg), t) in out.cls.iter().zip(&out.reg).zip(&targets.levels) {
        let cells = t.classes.len();
        let logits = g.reshape(cls, &[cells, cfg.num_classes])?;
        let focal = g.focal_loss(logits, &t.classes, cfg.focal_alpha, cfg.focal_gamma)?;
        let dists = g.reshape(reg, &[cells, 4])?;
        let iou = g.iou_loss(dists, &t.reg, &t.positive)?;
        let level = g.add(focal, iou)?;
        total = Some(match total {
            Some(acc) => g.add(acc, level)?,
            None => level,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("detection_loss", "no pyramid levels"))?;
    Ok(g.scale(total, 1.0 / targets.num_positive().max(1) as f64))
}

// ------------------------------------------------------------ decoding

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// Normalized `(x1, y1, x2, y2)`.
    pub bbox: [f64; 4],
    pub category: usize,
    pub score: f64,
}

pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy NMS within each class. Input order breaks score ties; output is
/// sorted by descending score.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.category == d.category && box_iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Thresholds, decodes and suppresses head outputs of one image.
/// `cls[p]` is `H_p×W_p×K`, `reg[p]` is `H_p×W_p×4`.
pub fn decode_detections(cls: &[Tensor], reg: &[Tensor], image_size: (usize, usize), cfg: &DecodeConfig) -> Vec<Detection> {
    let (img_h, img_w) = (image_size.0 as f64, image_size.1 as f64);
    let mut candidates = Vec::new();
    for (level, (logits, dists)) in cls.iter().zip(reg).enumerate() {
        let (hp, wp, k) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        let s = STRIDES[level] as f64;
        for cell in 0..hp * wp {
            let (r, c) = (cell / wp, cell % wp);
            let (cx, cy) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
            let d = &dists.data()[cell * 4..cell * 4 + 4];
            let bbox = [
                ((cx - d[0] * s) / img_w).clamp(0.0, 1.0),
                ((cy - d[1] * s) / img_h).clamp(0.0, 1.0),
                ((cx + d[2] * s) / img_w).clamp(0.0, 1.0),
                ((cy + d[3] * s) / img_h).clamp(0.0, 1.0),
            ];
            for (category, &x) in logits.data()[cell * k..(cell + 1) * k].iter().enumerate() {
                let score = sigmoid(x);
                if score > cfg.score_thresh {
                    candidates.push(Detection { bbox, category, score });
                }
            }
        }
    }
    let mut kept = nms(candidates, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}

/// Inference through the student path only: backbone, FPN and `head.*`.
pub fn predict(store: &ParamStore, image: &Tensor, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    let mut g = Graph::new();
    let pyr = forward_backbone(&mut g, store, image)?;
    let out = detection_head(&mut g, store, HEAD_PREFIX, &pyr.levels)?;
    let cls: Vec<Tensor> = out.cls.iter().map(|&v| g.value(v).clone()).collect();
    let reg: Vec<Tensor> = out.reg.iter().map(|&v| g.value(v).clone()).collect();
    Ok(decode_detections(&cls, &reg, (image.shape()[0], image.shape()[1]), cfg))
}
