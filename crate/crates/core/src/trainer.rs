//! Joint optimization of the student and the instructive branch under the
//! fractional schedule (distillation start, backbone freeze, LR steps).

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{self, LgdConfig};
use crate::params::{ParamStore, SgdConfig};
use crate::rng;
use crate::scene::Scene;
use crate::tensor::{self, Tensor};

pub const BACKBONE_PREFIX: &str = "student.backbone.";
const ADAPT_PREFIX: &str = "lgd.adapt.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Student only; no `lgd.*` parameters exist.
    Baseline,
    #[default]
    Lgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub total_iters: usize,
    pub batch_size: usize,
    /// Learning rate at `reference_batch`; scaled linearly to `batch_size`.
    pub base_lr: f64,
    pub reference_batch: usize,
    /// Fractions of `total_iters` at which the LR is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<f64>,
    pub lr_gamma: f64,
    /// Linear LR warmup over this fraction of `total_iters`, starting at
    /// `warmup_factor` times the scheduled rate.
    pub warmup_frac: f64,
    pub warmup_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the trainable gradients so their global L2 norm is at most
    /// this value.
    pub grad_clip_norm: Option<f64>,
    pub distill_start_frac: f64,
    pub distill_end_frac: Option<f64>,
    pub backbone_freeze_frac: f64,
    pub seed: u64,
    /// Write `ckpt_{iter}.bin` every this many iterations (0: final only).
    pub checkpoint_every: usize,
    pub lgd: LgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Lgd,
            total_iters: 2000,
            batch_size: 8,
            base_lr: 0.01,
            reference_batch: 16,
            lr_milestones: vec![2.0 / 3.0, 8.0 / 9.0],
            lr_gamma: 0.1,
            warmup_frac: 0.05,
            warmup_factor: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip_norm: Some(35.0),
            distill_start_frac: 1.0 / 6.0,
            distill_end_frac: None,
            backbone_freeze_frac: 1.0 / 9.0,
            seed: 0,
            checkpoint_every: 0,
            lgd: LgdConfig::default(),
        }
    }
}

fn frac_iter(frac: f64, total: usize) -> usize {
    (frac * total as f64).round() as usize
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("train_config", msg));
        let fracs = [
            Some(self.distill_start_frac),
            self.distill_end_frac,
            Some(self.backbone_freeze_frac),
            Some(self.warmup_frac),
            Some(self.warmup_factor),
        ];
        if fracs.iter().flatten().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("schedule fractions must lie in [0, 1]".into());
        }
        if self.lr_milestones.iter().any(|f| !(0.0..=1.0).contains(f)) || !self.lr_milestones.is_sorted() {
            return bad(format!("lr milestones {:?} must be ordered fractions", self.lr_milestones));
        }
        if self.batch_size == 0 || self.reference_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.grad_clip_norm.is_some_and(|m| m.is_nan() || m <= 0.0) {
            return bad("grad_clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn lgd(&self) -> Option<&LgdConfig> {
        match self.mode {
            Mode::Baseline => None,
            Mode::Lgd => Some(&self.lgd),
        }
    }

    pub fn distill_start(&self) -> usize {
        frac_iter(self.distill_start_frac, self.total_iters)
    }

    pub fn freeze_end(&self) -> usize {
        frac_iter(self.backbone_freeze_frac, self.total_iters)
    }

    pub fn distilling(&self, iter: usize) -> bool {
        self.mode == Mode::Lgd
            && iter >= self.distill_start()
            && self
                .distill_end_frac
                .is_none_or(|f| iter < frac_iter(f, self.total_iters))
    }

    pub fn frozen(&self, iter: usize) -> bool {
        iter < self.freeze_end()
    }

    pub fn lr(&self, iter: usize) -> f64 {
        let steps = self
            .lr_milestones
            .iter()
            .filter(|&&f| iter >= frac_iter(f, self.total_iters))
            .count();
        let warmup = frac_iter(self.warmup_frac, self.total_iters);
        let ramp = if iter < warmup {
            let t = iter as f64 / warmup as f64;
            self.warmup_factor * (1.0 - t) + t
        } else {
            1.0
        };
        self.base_lr * self.batch_size as f64 / self.reference_batch as f64 * self.lr_gamma.powi(steps as i32) * ramp
    }
}

/// Batch-mean loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: usize,
    pub det_s: f64,
    pub det_i: f64,
    pub distill: f64,
    pub total: f64,
    pub lr: f64,
    /// Before clipping.
    pub grad_norm: f64,
    pub frozen: bool,
    pub distilling: bool,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub det: DetectorConfig,
    pub store: ParamStore,
    pub iter: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, det: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let store = model::init_model(&det, cfg.lgd(), cfg.seed)?;
        Ok(Trainer {
            cfg,
            det,
            store,
            iter: 0,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }

    /// Indices of the next batch; each epoch is an independent seeded
    /// permutation of the dataset.
    pub fn next_batch(&mut self, dataset_len: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size {
            if self.cursor == self.order.len() {
                self.order = (0..dataset_len).collect();
                let mut r = rng::stream(rng::derive_seed(self.cfg.seed, "shuffle", self.epoch), "shuffle");
                self.order.shuffle(&mut r);
                self.epoch += 1;
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Forward, backward and one SGD update over `batch`. Gradients are
    /// batch means.
    pub fn train_step(&mut self, batch: &[&Scene]) -> Result<LossReport> {
        let iter = self.iter;
        let distilling = self.cfg.distilling(iter);
        let frozen = self.cfg.frozen(iter);
        let scale = 1.0 / batch.len() as f64;
        let mut sums = [0.0; 4];
        for scene in batch {
            let mut g = Graph::new();
            let l = model::scene_losses(&mut g, &self.store, &self.det, self.cfg.lgd(), scene, distilling)?;
            let parts = [
                g.value(l.det_s).item(),
                l.det_i.map_or(0.0, |v| g.value(v).item()),
                l.distill.map_or(0.0, |v| g.value(v).item()),
                g.value(l.total).item(),
            ];
            if parts.iter().any(|v| !v.is_finite()) {
                self.store.zero_grads();
                return Err(Error::NonFiniteLoss {
                    iter,
                    scene_ids: batch.iter().map(|s| s.id.clone()).collect(),
                });
            }
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p * scale;
            }
            g.backward(l.total)?;
            for (name, grad) in g.param_grads() {
                let scaled = Tensor::new(grad.shape(), grad.data().iter().map(|v| v * scale).collect())?;
                self.store.accumulate_grad(&name, &scaled)?;
            }
        }
        let lr = self.cfg.lr(iter);
        let sgd = SgdConfig {
            lr,
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
        };
        let is_frozen =
            |name: &str| (frozen && name.starts_with(BACKBONE_PREFIX)) || (!distilling && name.starts_with(ADAPT_PREFIX));
        let grad_norm = self.store.grad_norm(|n| !is_frozen(n));
        if let Some(max) = self.cfg.grad_clip_norm.filter(|&m| grad_norm > m) {
            self.store.scale_grads(max / grad_norm, |n| !is_frozen(n));
        }
        self.store.sgd_update(&sgd, is_frozen)?;
        self.iter += 1;
        Ok(LossReport {
            iter,
            det_s: sums[0],
            det_i: sums[1],
            distill: sums[2],
            total: sums[3],
            lr,
            grad_norm,
            frozen,
            distilling,
        })
    }

    /// Parameters, momentum buffers and the iteration counter.
    pub fn checkpoint_records(&self) -> Vec<(String, Tensor)> {
        let mut records = self.store.full_state();
        records.push(("opt.iter".to_string(), Tensor::scalar(self.iter as f64)));
        records
    }
}

/// `student.*` and `head.*` only: everything inference needs.
pub fn is_student_tensor(name: &str) -> bool {
    name.starts_with("student.") || name.starts_with("head.")
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub reports: Vec<LossReport>,
    /// Files written, when an output directory was given.
    pub final_checkpoint: Option<PathBuf>,
    pub student_export: Option<PathBuf>,
}

/// Runs `total_iters` steps over seeded shuffles of `dataset`. With
/// `out_dir`, writes `metrics.ndjson`, periodic and final `ckpt_{iter}.bin`
/// and `student_only_final.bin`.
pub fn run_training(
    cfg: &TrainConfig,
    det: &DetectorConfig,
    dataset: &[Scene],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::invalid("run_training", "dataset is empty"));
    }
    let mut trainer = Trainer::new(cfg.clone(), det.clone())?;
    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.ndjson");
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut reports = Vec::with_capacity(cfg.total_iters);
    for _ in 0..cfg.total_iters {
        let idx = trainer.next_batch(dataset.len());
        let batch: Vec<&Scene> = idx.iter().map(|&i| &dataset[i]).collect();
        let report = trainer.train_step(&batch)?;
        if let Some((f, path)) = metrics.as_mut() {
            let line = serde_json::to_string(&report).expect("report serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        reports.push(report);
        if let Some(dir) = out_dir {
            let it = trainer.iter;
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it < cfg.total_iters {
                save_checkpoint(&dir.join(format!("ckpt_{it}.bin")), &trainer.checkpoint_records())?;
            }
        }
    }
    let (mut final_checkpoint, mut student_export) = (None, None);
    if let Some(dir) = out_dir {
        let ckpt = dir.join(format!("ckpt_{}.bin", trainer.iter));
        save_checkpoint(&ckpt, &trainer.checkpoint_records())?;
        let export = dir.join("student_only_final.bin");
        tensor::save_records(&export, trainer.store.records(is_student_tensor))?;
        final_checkpoint = Some(ckpt);
        student_export = Some(export);
    }
    Ok(TrainOutcome {
        store: trainer.store,
        reports,
        final_checkpoint,
        student_export,
    })
}

fn save_checkpoint(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    tensor::save_records(path, records.iter().map(|(n, t)| (n.as_str(), t)))
}

/// Loads the parameter values of a checkpoint or student export,
/// ignoring optimizer state.
pub fn load_params(path: &Path) -> Result<ParamStore> {
    let records = tensor::load_records(path)?;
    ParamStore::from_records(records.into_iter().filter(|(n, _)| !n.starts_with("opt.")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, GenConfig};

    fn tiny(mode: Mode, total: usize) -> (TrainConfig, DetectorConfig) {
        let det = DetectorConfig {
            channels: 4,
            backbone_widths: [3, 4, 4, 4],
            ..DetectorConfig::default()
        };
        let cfg = TrainConfig {
            mode,
            total_iters: total,
            batch_size: 2,
            lgd: LgdConfig {
                heads: 2,
                encoder_widths: [4, 6],
                ..LgdConfig::default()
            },
            ..TrainConfig::default()
        };
        (cfg, det)
    }

    fn small_data(n: usize) -> Vec<Scene> {
        generate_dataset(5, n, &GenConfig::default())
    }

    #[test]
    fn schedule_for_default_run() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.distill_start(), 333);
        assert_eq!(cfg.freeze_end(), 222);
        assert!((cfg.lr(0) - 0.005 * 0.001).abs() < 1e-15);
        assert!((cfg.lr(50) - 0.005 * 0.5005).abs() < 1e-15);
        assert!((cfg.lr(100) - 0.005).abs() < 1e-15);
        assert!((cfg.lr(1333) - 0.0005).abs() < 1e-15);
        assert!((cfg.lr(1778) - 0.00005).abs() < 1e-15);
        assert!(!cfg.distilling(332) && cfg.distilling(333));
    }

    #[test]
    fn distill_end_is_optional() {
        let cfg = TrainConfig {
            total_iters: 100,
            distill_end_frac: Some(0.5),
            ..TrainConfig::default()
        };
        assert!(cfg.distilling(49) && !cfg.distilling(50));
    }

    #[test]
    fn invalid_fractions_rejected() {
        let cfg = TrainConfig {
            distill_start_frac: 1.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lr_milestones: vec![0.9, 0.5],
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn composition_and_freeze_over_short_run() {
        let (mut cfg, det) = tiny(Mode::Lgd, 12);
        cfg.distill_start_frac = 0.25;
        cfg.backbone_freeze_frac = 0.5;
        let data = small_data(6);
        let mut t = Trainer::new(cfg.clone(), det).unwrap();
        let backbone = |s: &ParamStore| {
            s.records(|n| n.starts_with(BACKBONE_PREFIX))
                .into_iter()
                .map(|(n, v)| (n.to_string(), v.clone()))
                .collect::<Vec<_>>()
        };
        let initial = backbone(&t.store);
        for it in 0..12 {
            let idx = t.next_batch(data.len());
            let batch: Vec<&Scene> = idx.iter().map(|&i| &data[i]).collect();
            let r = t.train_step(&batch).unwrap();
            assert!((r.total - (r.det_s + r.det_i + r.distill)).abs() < 1e-9);
            if it < 3 {
                assert_eq!(r.distill, 0.0);
            } else {
                assert!(r.distill > 0.0);
            }
            if it < 6 {
                assert_eq!(backbone(&t.store), initial);
            }
        }
        assert_ne!(backbone(&t.store), initial);
    }

    #[test]
    fn baseline_has_only_student_loss() {
        let (cfg, det) = tiny(Mode::Baseline, 3);
        let out = run_training(&cfg, &det, &small_data(4), None).unwrap();
        assert!(out.store.names().all(|n| !n.starts_with("lgd.")));
        for r in &out.reports {
            assert_eq!(r.total, r.det_s);
            assert_eq!((r.det_i, r.distill), (0.0, 0.0));
        }
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let (cfg, det) = tiny(Mode::Lgd, 4);
        let data = small_data(5);
        let a = run_training(&cfg, &det, &data, None).unwrap();
        let b = run_training(&cfg, &det, &data, None).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn shuffle_visits_every_scene_per_epoch() {
        let (cfg, det) = tiny(Mode::Baseline, 1);
        let mut t = Trainer::new(cfg, det).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| t.next_batch(6)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn non_finite_loss_names_batch() {
        let (cfg, det) = tiny(Mode::Baseline, 1);
        let mut t = Trainer::new(cfg, det).unwrap();
        t.store.value_mut("head.cls.b").unwrap().data_mut()[0] = f64::NAN;
        let data = small_data(2);
        match t.train_step(&[&data[0], &data[1]]) {
            Err(Error::NonFiniteLoss { scene_ids, .. }) => assert_eq!(scene_ids, vec![data[0].id.clone(), data[1].id.clone()]),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn outputs_on_disk() {
        let (mut cfg, det) = tiny(Mode::Lgd, 4);
        cfg.checkpoint_every = 2;
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&cfg, &det, &small_data(4), Some(dir.path())).unwrap();
        assert!(dir.path().join("ckpt_2.bin").exists());
        assert!(dir.path().join("ckpt_4.bin").exists());
        let lines = std::fs::read_to_string(dir.path().join("metrics.ndjson")).unwrap();
        assert_eq!(lines.lines().count(), 4);
        let export = load_params(out.student_export.as_ref().unwrap()).unwrap();
        assert!(export.names().all(is_student_tensor));
        let full = load_params(out.final_checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(full.records(|_| true), out.store.records(|_| true));
    }
}
