//! Synthetic shapes scenes, the newline-delimited dataset format, and box
//! mask rasterization.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Upper bound on annotations per scene accepted by the loader.
pub const MAX_ANNOTATIONS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape side range in pixels (inclusive).
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            num_classes: 3,
            min_objects: 1,
            max_objects: 5,
            min_side: 8,
            max_side: 44,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("gen_config", msg));
        if self.image_size == 0 || self.num_classes == 0 {
            return bad("image_size and num_classes must be positive".into());
        }
        if self.min_objects > self.max_objects || self.max_objects > MAX_ANNOTATIONS {
            return bad(format!(
                "object range {}..={} must be ordered and at most {MAX_ANNOTATIONS}",
                self.min_objects, self.max_objects
            ));
        }
        if self.min_side < 2 || self.min_side > self.max_side || self.max_side > self.image_size {
            return bad(format!(
                "side range {}..={} must lie in 2..={}",
                self.min_side, self.max_side, self.image_size
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    /// Normalized `(x1, y1, x2, y2)`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub category: usize,
}

impl Annotation {
    pub fn validate(&self, num_classes: usize) -> std::result::Result<(), String> {
        let [x1, y1, x2, y2] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(format!("box {:?} outside [0, 1]", self.bbox));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(format!("degenerate box {:?}", self.bbox));
        }
        if self.category >= num_classes {
            return Err(format!("category {} >= {num_classes}", self.category));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.bbox[2] - self.bbox[0]) * (self.bbox[3] - self.bbox[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub gen: GenConfig,
    /// `H×W×3`, values in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

fn scene_id(seed: u64) -> String {
    format!("scene-{seed:016x}")
}

/// Renders one scene. Deterministic in `(seed, gen)`.
pub fn generate_scene(seed: u64, gen: &GenConfig) -> Scene {
    let mut r = <rng::Rng as rand::SeedableRng>::seed_from_u64(seed);
    let size = gen.image_size;
    let mut img = vec![0.0; size * size * 3];

    let base: [f64; 3] = [r.gen_range(0.05..0.35), r.gen_range(0.05..0.35), r.gen_range(0.05..0.35)];
    let (fx, fy, phase) = (r.gen_range(0.1..0.6), r.gen_range(0.1..0.6), r.gen_range(0.0..std::f64::consts::TAU));
    for y in 0..size {
        for x in 0..size {
            let wave = 0.04 * (fx * x as f64 + fy * y as f64 + phase).sin();
            for c in 0..3 {
                let noise = r.gen_range(-0.04..0.04);
                img[(y * size + x) * 3 + c] = (base[c] + wave + noise).clamp(0.0, 1.0);
            }
        }
    }

    let count = r.gen_range(gen.min_objects..=gen.max_objects);
    let mut annotations = Vec::with_capacity(count);
    for _ in 0..count {
        let category = r.gen_range(0..gen.num_classes);
        let w = r.gen_range(gen.min_side..=gen.max_side);
        let h = if category % 3 == 1 { w } else { r.gen_range(gen.min_side..=gen.max_side) };
        let x0 = r.gen_range(0..=size - w);
        let y0 = r.gen_range(0..=size - h);
        let shade = 0.15 * (category / 3) as f64;
        let color = [
            r.gen_range(0.55..1.0) - shade,
            r.gen_range(0.55..1.0) - shade,
            r.gen_range(0.55..1.0) - shade,
        ];

        let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0, 0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                if !shape_covers(category % 3, x - x0, y - y0, w, h) {
                    continue;
                }
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
                img[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&color);
            }
        }
        if min_x == usize::MAX {
            continue;
        }
        let s = size as f64;
        annotations.push(Annotation {
            bbox: [
                min_x as f64 / s,
                min_y as f64 / s,
                (max_x + 1) as f64 / s,
                (max_y + 1) as f64 / s,
            ],
            category,
        });
    }

    Scene {
        id: scene_id(seed),
        seed,
        gen: gen.clone(),
        image: Tensor::new(&[size, size, 3], img).unwrap(),
        annotations,
    }
}

/// Pixel membership for rectangle (0), disc (1) and upward triangle (2)
/// inside a `w×h` frame, tested at pixel centers.
fn shape_covers(kind: usize, dx: usize, dy: usize, w: usize, h: usize) -> bool {
    let (px, py) = (dx as f64 + 0.5, dy as f64 + 0.5);
    let (w, h) = (w as f64, h as f64);
    match kind {
        0 => true,
        1 => {
            let (cx, cy) = (w / 2.0, h / 2.0);
            let (nx, ny) = ((px - cx) / cx, (py - cy) / cy);
            nx * nx + ny * ny <= 1.0
        }
        _ => {
            // apex at top center, base along the bottom edge
            let half = 0.5 * w * (py / h);
            (px - w / 2.0).abs() <= half
        }
    }
}

// ------------------------------------------------------------ masks

/// Binary `hp×wp` mask of the cells whose centers fall inside the
/// half-open box `[x1, x2) × [y1, y2)`. A box that covers no cell center
/// gets the single cell containing its center.
pub fn rasterize_mask(bbox: [f64; 4], hp: usize, wp: usize) -> Vec<f64> {
    let [x1, y1, x2, y2] = bbox;
    let mut mask = vec![0.0; hp * wp];
    let mut any = false;
    for r in 0..hp {
        let cy = (r as f64 + 0.5) / hp as f64;
        if cy < y1 || cy >= y2 {
            continue;
        }
        for c in 0..wp {
            let cx = (c as f64 + 0.5) / wp as f64;
            if cx >= x1 && cx < x2 {
                mask[r * wp + c] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        let col = ((0.5 * (x1 + x2) * wp as f64) as usize).min(wp - 1);
        let row = ((0.5 * (y1 + y2) * hp as f64) as usize).min(hp - 1);
        mask[row * wp + col] = 1.0;
    }
    mask
}

/// Per-level mask matrices. Level `p` holds an `(H_p·W_p) × (N+1)`
/// tensor whose column 0 is the all-ones context mask and column `i` the
/// mask of annotation `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid {
    pub levels: Vec<Tensor>,
    pub extents: Vec<(usize, usize)>,
}

impl MaskPyramid {
    pub fn build(annotations: &[Annotation], extents: &[(usize, usize)]) -> Self {
        let n = annotations.len() + 1;
        let levels = extents
            .iter()
            .map(|&(hp, wp)| {
                let mut data = vec![0.0; hp * wp * n];
                let columns = std::iter::once(rasterize_mask([0.0, 0.0, 1.0, 1.0], hp, wp))
                    .chain(annotations.iter().map(|a| rasterize_mask(a.bbox, hp, wp)));
                for (i, col) in columns.enumerate() {
                    for (cell, v) in col.into_iter().enumerate() {
                        data[cell * n + i] = v;
                    }
                }
                Tensor::new(&[hp * wp, n], data).unwrap()
            })
            .collect();
        MaskPyramid {
            levels,
            extents: extents.to_vec(),
        }
    }

    pub fn num_objects(&self) -> usize {
        self.levels[0].last_dim() - 1
    }

    /// Mask of object `i` (0 = context) at `level`, row-major `H_p×W_p`.
    pub fn mask(&self, level: usize, i: usize) -> Vec<f64> {
        let t = &self.levels[level];
        let n = t.last_dim();
        t.data().iter().skip(i).step_by(n).copied().collect()
    }
}

// ------------------------------------------------------------ dataset file

/// One line of the dataset file. Images are not stored; they are
/// regenerated from `seed` and `gen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub id: String,
    pub seed: u64,
    pub gen: GenConfig,
    pub annotations: Vec<Annotation>,
}

impl SceneRecord {
    pub fn from_scene(scene: &Scene) -> Self {
        SceneRecord {
            id: scene.id.clone(),
            seed: scene.seed,
            gen: scene.gen.clone(),
            annotations: scene.annotations.clone(),
        }
    }

    /// Materializes the scene, rendering its image from the recorded seed.
    pub fn scene(&self) -> Scene {
        let mut s = generate_scene(self.seed, &self.gen);
        s.id = self.id.clone();
        s.annotations = self.annotations.clone();
        s
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Error::InvalidScene {
            id: self.id.clone(),
            msg,
        };
        self.gen.validate().map_err(|e| fail(e.to_string()))?;
        if self.annotations.len() > MAX_ANNOTATIONS {
            return Err(fail(format!(
                "{} annotations exceed the limit of {MAX_ANNOTATIONS}",
                self.annotations.len()
            )));
        }
        for a in &self.annotations {
            a.validate(self.gen.num_classes).map_err(fail)?;
        }
        Ok(())
    }
}

/// Generates `count` scenes whose seeds are drawn from the `data` stream
/// of `root_seed`.
pub fn generate_dataset(root_seed: u64, count: usize, gen: &GenConfig) -> Vec<Scene> {
    (0..count)
        .map(|i| generate_scene(rng::derive_seed(root_seed, "data", i as u64), gen))
        .collect()
}

pub fn write_dataset(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut out = Vec::new();
    for s in scenes {
        serde_json::to_writer(&mut out, &SceneRecord::from_scene(s)).expect("record serializes");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<SceneRecord>> {
    let mut records = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: k + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: k + 1,
            msg: e.to_string(),
        })?;
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}

pub fn load_annotations(path: &Path) -> Result<Vec<SceneRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(f))
}
