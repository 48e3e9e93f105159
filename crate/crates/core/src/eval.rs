//! COCO-style average precision and the baseline-versus-LGD comparison.

use serde::{Deserialize, Serialize};

use crate::detector::{box_iou, predict, DecodeConfig, Detection};
use crate::error::Result;
use crate::params::ParamStore;
use crate::scene::{Annotation, Scene};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Greedy matching within one image and class. `dets` must be sorted by
/// descending score; each detection takes the unmatched ground truth of
/// highest IoU at or above `iou_thresh` (first index on ties). Returns the
/// true-positive flag of every detection.
pub fn match_detections(dets: &[[f64; 4]], gts: &[[f64; 4]], iou_thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let iou = box_iou(d, g);
                if iou >= iou_thresh && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, j));
                }
            }
            match best {
                Some((_, j)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP of detections given as `(score, is_tp)` over
/// `num_gt` ground truths. Ties in score keep input order.
pub fn average_precision(mut scored: Vec<(f64, bool)>, num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(scored.len());
    for (k, &(_, hit)) in scored.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope: best precision at any recall >= r
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        while k < curve.len() && curve[k].0 < r - 1e-12 {
            k += 1;
        }
        if k < curve.len() {
            sum += curve[k].1;
        }
    }
    sum / 101.0
}

/// Per-class AP at one IoU threshold; `None` for classes without ground
/// truth. `dets[i]` and `gts[i]` belong to image `i`.
pub fn compute_ap(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], num_classes: usize, iou_thresh: f64) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|class| {
            let mut scored = Vec::new();
            let mut num_gt = 0;
            for (image_dets, image_gts) in dets.iter().zip(gts) {
                let g: Vec<[f64; 4]> = image_gts.iter().filter(|a| a.category == class).map(|a| a.bbox).collect();
                num_gt += g.len();
                let mut d: Vec<&Detection> = image_dets.iter().filter(|d| d.category == class).collect();
                d.sort_by(|a, b| b.score.total_cmp(&a.score));
                let boxes: Vec<[f64; 4]> = d.iter().map(|d| d.bbox).collect();
                let hits = match_detections(&boxes, &g, iou_thresh);
                scored.extend(d.iter().zip(hits).map(|(d, h)| (d.score, h)));
            }
            (num_gt > 0).then(|| average_precision(scored, num_gt))
        })
        .collect()
}

fn mean_defined(values: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap50: f64,
    /// Mean over IoU thresholds 0.50:0.05:0.95.
    pub ap: f64,
    /// Per-class AP averaged over thresholds; `None` without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub num_detections: usize,
    pub num_ground_truth: usize,
}

pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], num_classes: usize) -> EvalResult {
    let per_threshold: Vec<Vec<Option<f64>>> = iou_thresholds()
        .iter()
        .map(|&t| compute_ap(dets, gts, num_classes, t))
        .collect();
    let per_class_ap: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            per_threshold[0][c].map(|_| per_threshold.iter().map(|v| v[c].unwrap()).sum::<f64>() / per_threshold.len() as f64)
        })
        .collect();
    EvalResult {
        ap50: mean_defined(&per_threshold[0]),
        ap: mean_defined(&per_class_ap),
        per_class_ap,
        num_detections: dets.iter().map(Vec::len).sum(),
        num_ground_truth: gts.iter().map(Vec::len).sum(),
    }
}

/// Runs the student path on every scene and scores the detections.
pub fn evaluate_store(store: &ParamStore, scenes: &[Scene], num_classes: usize, decode: &DecodeConfig) -> Result<EvalResult> {
    let mut dets = Vec::with_capacity(scenes.len());
    for s in scenes {
        dets.push(predict(store, &s.image, decode)?);
    }
    let gts: Vec<Vec<Annotation>> = scenes.iter().map(|s| s.annotations.clone()).collect();
    Ok(evaluate(&dets, &gts, num_classes))
}

// ------------------------------------------------------------ comparison

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApPair {
    pub ap50: f64,
    pub ap: f64,
}

impl From<&EvalResult> for ApPair {
    fn from(r: &EvalResult) -> Self {
        ApPair { ap50: r.ap50, ap: r.ap }
    }
}

impl ApPair {
    fn minus(self, other: ApPair) -> ApPair {
        ApPair {
            ap50: self.ap50 - other.ap50,
            ap: self.ap - other.ap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub baseline: ApPair,
    pub lgd: ApPair,
    pub delta: ApPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<SeedComparison>,
    pub median_baseline: ApPair,
    pub median_lgd: ApPair,
    pub median_delta: ApPair,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_pair(pairs: impl Iterator<Item = ApPair> + Clone) -> ApPair {
    ApPair {
        ap50: median(&pairs.clone().map(|p| p.ap50).collect::<Vec<_>>()),
        ap: median(&pairs.map(|p| p.ap).collect::<Vec<_>>()),
    }
}

/// Builds the comparison from per-seed evaluations `(seed, baseline, lgd)`.
pub fn compare_results(runs: &[(u64, EvalResult, EvalResult)]) -> Comparison {
    let seeds: Vec<SeedComparison> = runs
        .iter()
        .map(|(seed, b, l)| {
            let (b, l) = (ApPair::from(b), ApPair::from(l));
            SeedComparison {
                seed: *seed,
                baseline: b,
                lgd: l,
                delta: l.minus(b),
            }
        })
        .collect();
    Comparison {
        median_baseline: median_pair(seeds.iter().map(|s| s.baseline)),
        median_lgd: median_pair(seeds.iter().map(|s| s.lgd)),
        median_delta: median_pair(seeds.iter().map(|s| s.delta)),
        seeds,
    }
}

/// Evaluates paired checkpoints (one pair per seed) on `valset`.
pub fn compare_runs(
    pairs: &[(u64, &ParamStore, &ParamStore)],
    valset: &[Scene],
    num_classes: usize,
    decode: &DecodeConfig,
) -> Result<Comparison> {
    let mut runs = Vec::with_capacity(pairs.len());
    for (seed, baseline, lgd) in pairs {
        runs.push((
            *seed,
            evaluate_store(baseline, valset, num_classes, decode)?,
            evaluate_store(lgd, valset, num_classes, decode)?,
        ));
    }
    Ok(compare_results(&runs))
}

impl Comparison {
    pub fn table(&self) -> String {
        let mut out = String::from("seed        base AP50  base AP   lgd AP50   lgd AP    dAP50     dAP\n");
        let row = |label: String, b: ApPair, l: ApPair, d: ApPair| {
            format!(
                "{label:<10} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>+9.4} {:>+9.4}\n",
                b.ap50, b.ap, l.ap50, l.ap, d.ap50, d.ap
            )
        };
        for s in &self.seeds {
            out += &row(s.seed.to_string(), s.baseline, s.lgd, s.delta);
        }
        out += &row("median".into(), self.median_baseline, self.median_lgd, self.median_delta);
        out
    }

    /// One JSON record per seed, newline separated.
    pub fn records(&self) -> String {
        self.seeds
            .iter()
            .map(|s| serde_json::to_string(s).expect("record serializes") + "\n")
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn det(bbox: [f64; 4], score: f64) -> Detection {
        Detection {
            bbox,
            category: 0,
            score,
        }
    }

    fn gt(bbox: [f64; 4]) -> Annotation {
        Annotation { bbox, category: 0 }
    }

    #[test]
    fn perfect_detections_score_one() {
        let g = vec![gt([0.1, 0.1, 0.4, 0.4]), gt([0.5, 0.5, 0.9, 0.8])];
        let d: Vec<Detection> = g.iter().map(|a| det(a.bbox, 1.0)).collect();
        let r = evaluate(&[d], &[g], 1);
        assert_eq!((r.ap50, r.ap), (1.0, 1.0));
    }

    #[test]
    fn no_detections_score_zero() {
        let r = evaluate(&[vec![]], &[vec![gt([0.1, 0.1, 0.4, 0.4])]], 1);
        assert_eq!(r.ap50, 0.0);
    }

    #[test]
    fn trailing_false_positive_keeps_full_ap() {
        // IoU of the first detection with the ground truth is 0.6
        let g = gt([0.0, 0.0, 0.5, 0.6]);
        let d1 = det([0.0, 0.0, 0.5, 0.36], 0.9);
        assert!((box_iou(&d1.bbox, &g.bbox) - 0.6).abs() < 1e-12);
        let d2 = det([0.7, 0.7, 0.9, 0.9], 0.8);
        let ap = compute_ap(&[vec![d1, d2]], &[vec![g]], 1, 0.5);
        assert_eq!(ap, vec![Some(1.0)]);
    }

    #[test]
    fn leading_false_positive_halves_precision() {
        let g = gt([0.0, 0.0, 0.5, 0.5]);
        let hit = det(g.bbox, 0.5);
        let miss = det([0.6, 0.6, 0.9, 0.9], 0.9);
        let ap = compute_ap(&[vec![hit, miss]], &[vec![g]], 1, 0.5)[0].unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn class_without_ground_truth_excluded() {
        let r = evaluate(&[vec![det([0.1, 0.1, 0.3, 0.3], 0.9)]], &[vec![gt([0.1, 0.1, 0.3, 0.3])]], 2);
        assert_eq!(r.per_class_ap[1], None);
        assert_eq!(r.ap50, 1.0);
    }

    fn random_box<R: Rng>(r: &mut R) -> [f64; 4] {
        let (x, y) = (r.gen_range(0.0..0.6), r.gen_range(0.0..0.6));
        [x, y, x + r.gen_range(0.1..0.4), y + r.gen_range(0.1..0.4)]
    }

    /// Enumerates every (detection, ground truth) pair from scratch at each
    /// step instead of scanning a running candidate.
    fn matcher_oracle(dets: &[[f64; 4]], gts: &[[f64; 4]], thr: f64) -> Vec<bool> {
        let mut matched: Vec<Option<usize>> = vec![None; dets.len()];
        for i in 0..dets.len() {
            let pairs: Vec<(usize, f64)> = (0..gts.len())
                .filter(|j| !matched[..i].contains(&Some(*j)))
                .map(|j| (j, box_iou(&dets[i], &gts[j])))
                .filter(|&(_, iou)| iou >= thr)
                .collect();
            matched[i] = pairs
                .iter()
                .find(|&&(_, iou)| pairs.iter().all(|&(_, o)| o <= iou))
                .map(|&(j, _)| j);
        }
        matched.iter().map(Option::is_some).collect()
    }

    #[test]
    fn matcher_agrees_with_oracle() {
        let mut r = rng::stream(3, "test");
        for _ in 0..100 {
            let dets: Vec<[f64; 4]> = (0..r.gen_range(0..=5)).map(|_| random_box(&mut r)).collect();
            let gts: Vec<[f64; 4]> = (0..r.gen_range(0..=5)).map(|_| random_box(&mut r)).collect();
            for thr in [0.1, 0.5, 0.75] {
                assert_eq!(match_detections(&dets, &gts, thr), matcher_oracle(&dets, &gts, thr));
            }
        }
    }

    fn random_case<R: Rng>(r: &mut R) -> (Vec<Vec<Detection>>, Vec<Vec<Annotation>>) {
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..3 {
            let g: Vec<Annotation> = (0..r.gen_range(1..=4))
                .map(|_| Annotation {
                    bbox: random_box(r),
                    category: r.gen_range(0..2),
                })
                .collect();
            let mut d = Vec::new();
            for a in &g {
                if r.gen_bool(0.7) {
                    d.push(Detection {
                        bbox: a.bbox.map(|v| v + r.gen_range(-0.05..0.05)),
                        category: a.category,
                        score: r.gen_range(0.0..1.0),
                    });
                }
            }
            for _ in 0..r.gen_range(0..3) {
                d.push(Detection {
                    bbox: random_box(r),
                    category: r.gen_range(0..2),
                    score: r.gen_range(0.0..1.0),
                });
            }
            dets.push(d);
            gts.push(g);
        }
        (dets, gts)
    }

    #[test]
    fn ap50_bounds_ap() {
        let mut r = rng::stream(4, "test");
        for _ in 0..200 {
            let (d, g) = random_case(&mut r);
            let res = evaluate(&d, &g, 2);
            assert!(res.ap <= res.ap50 + 1e-12);
            assert!((0.0..=1.0).contains(&res.ap) && (0.0..=1.0).contains(&res.ap50));
        }
    }

    #[test]
    fn top_scored_true_positive_never_hurts() {
        // A duplicate of an already matched box can displace a lower scored
        // match without adding recall, so the added detection targets a
        // ground truth that the current matching leaves uncovered.
        let mut r = rng::stream(5, "test");
        let mut checked = 0;
        for _ in 0..400 {
            let (mut d, g) = random_case(&mut r);
            let Some((image, target)) = uncovered_gt(&d, &g, 0.5) else {
                continue;
            };
            let before = evaluate(&d, &g, 2);
            d[image].push(Detection {
                bbox: target.bbox,
                category: target.category,
                score: 2.0,
            });
            let after = evaluate(&d, &g, 2);
            assert!(after.ap50 >= before.ap50 - 1e-12, "{} < {}", after.ap50, before.ap50);
            checked += 1;
        }
        assert!(checked >= 50);
    }

    fn uncovered_gt(d: &[Vec<Detection>], g: &[Vec<Annotation>], thr: f64) -> Option<(usize, Annotation)> {
        for (i, (image_dets, image_gts)) in d.iter().zip(g).enumerate() {
            for class in 0..2 {
                let gi: Vec<&Annotation> = image_gts.iter().filter(|a| a.category == class).collect();
                let mut di: Vec<&Detection> = image_dets.iter().filter(|x| x.category == class).collect();
                di.sort_by(|a, b| b.score.total_cmp(&a.score));
                let mut taken = vec![false; gi.len()];
                for det in di {
                    let mut best: Option<(f64, usize)> = None;
                    for (j, a) in gi.iter().enumerate() {
                        let iou = box_iou(&det.bbox, &a.bbox);
                        if !taken[j] && iou >= thr && best.is_none_or(|(b, _)| iou > b) {
                            best = Some((iou, j));
                        }
                    }
                    if let Some((_, j)) = best {
                        taken[j] = true;
                    }
                }
                if let Some(j) = taken.iter().position(|t| !t) {
                    return Some((i, *gi[j]));
                }
            }
        }
        None
    }

    #[test]
    fn identical_runs_have_zero_delta() {
        let (d, g) = random_case(&mut rng::stream(6, "test"));
        let r = evaluate(&d, &g, 2);
        let c = compare_results(&[(0, r.clone(), r.clone()), (1, r.clone(), r)]);
        assert_eq!(c.median_delta, ApPair { ap50: 0.0, ap: 0.0 });
        assert!(c.table().contains("median"));
        let rec: serde_json::Value = serde_json::from_str(c.records().lines().next().unwrap()).unwrap();
        for key in ["seed", "baseline", "lgd", "delta"] {
            assert!(rec.get(key).is_some());
        }
    }

    #[test]
    fn median_of_even_count() {
        assert_eq!(median(&[3.0, 1.0, 2.0, 4.0]), 2.5);
        assert_eq!(median(&[5.0, -1.0, 0.0]), 0.0);
    }
}
