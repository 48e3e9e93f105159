//! Wires the student and the training-only instructive branch into the
//! per-scene loss graph.

use serde::{Deserialize, Serialize};

use crate::adapter::{self, AttentionConfig, QueryDirection, Temperature};
use crate::detector::{self, DetectorConfig, Pyramid, HEAD_PREFIX, UNSHARED_HEAD_PREFIX};
use crate::encoder::{self, EncoderKind};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::mapper;
use crate::params::ParamStore;
use crate::rng;
use crate::scene::{MaskPyramid, Scene};

/// Settings of the instructive branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LgdConfig {
    pub heads: usize,
    pub temperature: Temperature,
    pub query_direction: QueryDirection,
    pub label_encoder: EncoderKind,
    pub encoder_widths: [usize; 2],
    /// Apply `head.*` to the instructive pyramid; otherwise `lgd.head.*`.
    pub head_sharing: bool,
    pub context_participation: bool,
}

impl Default for LgdConfig {
    fn default() -> Self {
        LgdConfig {
            heads: 8,
            temperature: Temperature::PerHead,
            query_direction: QueryDirection::Student,
            label_encoder: EncoderKind::PointnetLite,
            encoder_widths: [64, 128],
            head_sharing: true,
            context_participation: true,
        }
    }
}

impl LgdConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            temperature: self.temperature,
            query: self.query_direction,
        }
    }

    pub fn head_prefix(&self) -> &'static str {
        if self.head_sharing {
            HEAD_PREFIX
        } else {
            UNSHARED_HEAD_PREFIX
        }
    }
}

/// Allocates every parameter. `lgd = None` gives the plain student.
pub fn init_model(det: &DetectorConfig, lgd: Option<&LgdConfig>, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, "init");
    detector::init_student(&mut store, det, &mut r)?;
    detector::init_head(&mut store, HEAD_PREFIX, det, &mut r)?;
    if let Some(l) = lgd {
        let c = det.channels;
        encoder::init_label_encoder(
            &mut store,
            encoder::descriptor_dim(det.num_classes),
            l.encoder_widths,
            c,
            l.label_encoder,
            &mut r,
        )?;
        encoder::init_projections(&mut store, detector::STRIDES.len(), c, &mut r)?;
        adapter::init_attention(&mut store, c, &mut r)?;
        mapper::init_mapper(&mut store, c, &mut r)?;
        mapper::init_adapter(&mut store, c, &mut r)?;
        if !l.head_sharing {
            detector::init_head(&mut store, UNSHARED_HEAD_PREFIX, det, &mut r)?;
        }
    }
    Ok(store)
}

/// Intermediate quantities of the instructive branch for one scene.
pub struct Instructive {
    pub masks: MaskPyramid,
    pub labels: Var,
    pub appearance: Vec<Var>,
    pub interacted: Vec<Var>,
    /// `weights[level][head]`.
    pub weights: Vec<Vec<Var>>,
    pub maps: Vec<Var>,
}

pub fn instructive_branch(
    g: &mut Graph,
    store: &ParamStore,
    det: &DetectorConfig,
    lgd: &LgdConfig,
    pyramid: &Pyramid,
    scene: &Scene,
) -> Result<Instructive> {
    let masks = MaskPyramid::build(&scene.annotations, &pyramid.extents);
    let descriptors = encoder::build_descriptors(&scene.annotations, det.num_classes);
    let labels = encoder::encode_labels(g, store, &descriptors, lgd.label_encoder)?;
    let attn = lgd.attention();
    let mut out = Instructive {
        masks,
        labels,
        appearance: Vec::new(),
        interacted: Vec::new(),
        weights: Vec::new(),
        maps: Vec::new(),
    };
    for (level, &x) in pyramid.levels.iter().enumerate() {
        let projected = encoder::project_features(g, store, level, x)?;
        let a = encoder::mask_pool(g, projected, &out.masks.levels[level])?;
        let att = adapter::cross_attention(g, store, a, labels, &attn)?;
        let map = mapper::map_knowledge(
            g,
            store,
            att.output,
            &out.masks.levels[level],
            pyramid.extents[level],
            lgd.context_participation,
        )?;
        out.appearance.push(a);
        out.interacted.push(att.output);
        out.weights.push(att.weights);
        out.maps.push(map);
    }
    Ok(out)
}

/// Scalar loss nodes of one scene. Absent terms are `None`.
pub struct SceneLosses {
    pub det_s: Var,
    pub det_i: Option<Var>,
    pub distill: Option<Var>,
    pub total: Var,
    pub pyramid: Pyramid,
    pub instructive: Option<Instructive>,
    pub adapted: Vec<Var>,
}

/// Builds `L_det^S [+ L_det^I [+ L_distill]]` for one scene.
pub fn scene_losses(
    g: &mut Graph,
    store: &ParamStore,
    det: &DetectorConfig,
    lgd: Option<&LgdConfig>,
    scene: &Scene,
    distilling: bool,
) -> Result<SceneLosses> {
    let image = &scene.image;
    let pyramid = detector::forward_backbone(g, store, image)?;
    let targets = detector::assign_targets(&scene.annotations, (image.shape()[0], image.shape()[1]), det);
    let out_s = detector::detection_head(g, store, HEAD_PREFIX, &pyramid.levels)?;
    let det_s = detector::detection_loss(g, &out_s, &targets, det)?;
    let Some(lgd) = lgd else {
        return Ok(SceneLosses {
            det_s,
            det_i: None,
            distill: None,
            total: det_s,
            pyramid,
            instructive: None,
            adapted: Vec::new(),
        });
    };

    let inst = instructive_branch(g, store, det, lgd, &pyramid, scene)?;
    let out_i = detector::detection_head(g, store, lgd.head_prefix(), &inst.maps)?;
    let det_i = detector::detection_loss(g, &out_i, &targets, det)?;
    let mut total = g.add(det_s, det_i)?;
    let mut distill = None;
    let mut adapted = Vec::new();
    if distilling {
        for &x in &pyramid.levels {
            adapted.push(mapper::adapt_student(g, store, x)?);
        }
        let d = mapper::distill_loss(g, &adapted, &inst.maps)?;
        total = g.add(total, d)?;
        distill = Some(d);
    }
    Ok(SceneLosses {
        det_s,
        det_i: Some(det_i),
        distill,
        total,
        pyramid,
        instructive: Some(inst),
        adapted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GenConfig};

    pub(crate) fn tiny() -> (DetectorConfig, LgdConfig) {
        (
            DetectorConfig {
                channels: 4,
                backbone_widths: [3, 4, 4, 4],
                ..DetectorConfig::default()
            },
            LgdConfig {
                heads: 2,
                encoder_widths: [4, 6],
                ..LgdConfig::default()
            },
        )
    }

    #[test]
    fn baseline_store_has_no_lgd_entries() {
        let (det, _) = tiny();
        let s = init_model(&det, None, 0).unwrap();
        assert!(s.names().all(|n| !n.starts_with("lgd.")));
    }

    #[test]
    fn unshared_mode_adds_second_head() {
        let (det, mut lgd) = tiny();
        let shared = init_model(&det, Some(&lgd), 0).unwrap();
        assert!(!shared.contains("lgd.head.cls.w"));
        lgd.head_sharing = false;
        let unshared = init_model(&det, Some(&lgd), 0).unwrap();
        assert!(unshared.contains("lgd.head.cls.w"));
    }

    #[test]
    fn shared_head_mutation_moves_both_branches() {
        let (det, lgd) = tiny();
        let mut store = init_model(&det, Some(&lgd), 1).unwrap();
        let scene = generate_scene(3, &GenConfig::default());
        let eval = |s: &ParamStore| {
            let mut g = Graph::new();
            let l = scene_losses(&mut g, s, &det, Some(&lgd), &scene, false).unwrap();
            (g.value(l.det_s).item(), g.value(l.det_i.unwrap()).item())
        };
        let (s0, i0) = eval(&store);
        store.value_mut("head.cls.b").unwrap().data_mut()[0] += 0.5;
        let (s1, i1) = eval(&store);
        assert_ne!(s0, s1);
        assert_ne!(i0, i1);
    }

    #[test]
    fn empty_scene_runs_context_only() {
        let (det, lgd) = tiny();
        let store = init_model(&det, Some(&lgd), 2).unwrap();
        let gen = GenConfig {
            min_objects: 0,
            max_objects: 0,
            ..GenConfig::default()
        };
        let scene = generate_scene(4, &gen);
        let mut g = Graph::new();
        let l = scene_losses(&mut g, &store, &det, Some(&lgd), &scene, true).unwrap();
        assert!(g.value(l.total).is_finite());
        assert!(g.value(l.distill.unwrap()).item() >= 0.0);
    }
}
