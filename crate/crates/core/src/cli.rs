//! Command-line front end: `gen`, `train`, `eval`, `inspect`, `compare`.
//!
//! Every command accepts `--config FILE` and any number of dotted-path
//! overrides (`--trainer.total_iters 2000` or `--trainer.total_iters=2000`)
//! which win over the file. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};
use crate::error::Error;
use crate::eval::{compare_runs, evaluate_store};
use crate::graph::Graph;
use crate::mapper;
use crate::model::scene_losses;
use crate::scene::{self, Scene};
use crate::tensor::{self, Tensor};
use crate::trainer::{self, Mode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lgd", version, about = "Label-guided self-distillation on synthetic shapes")]
struct Cli {
    /// Base configuration file; defaults are used for absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a shapes dataset file.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Root seed of the `data` stream (`data.train_seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of scenes (`data.train_count`).
        #[arg(long)]
        count: Option<usize>,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Train and write metrics, checkpoints and the student-only export.
    Train {
        /// Shorthand for `--trainer.mode`.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Shorthand for `--trainer.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Training dataset file (`data.train_path`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint through the student path.
    Eval {
        checkpoint: PathBuf,
        /// Dataset file; defaults to the generated validation set.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Result file; defaults to `eval.json` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump pyramid, instructive maps, attention weights and masks of one
    /// scene.
    Inspect {
        checkpoint: PathBuf,
        /// Scene id; the first scene when absent.
        #[arg(long)]
        scene: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare baseline and LGD checkpoints seed by seed.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        seeds: Vec<u64>,
        #[arg(long, num_args = 1.., required = true)]
        baseline: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        lgd: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown mode `{s}` (expected baseline or lgd)"))
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Splits field-path flags (dotted paths or top-level keys such as
/// `--out_dir`) from the arguments clap understands.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), Failure> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let top_level: Vec<String> = match serde_json::to_value(RunConfig::default()).expect("config serializes") {
        serde_json::Value::Object(m) => m.keys().cloned().collect(),
        _ => Vec::new(),
    };
    let is_field = |f: &str| {
        let key = f.split('=').next().unwrap_or_default();
        (key.contains('.') && !key.starts_with('.')) || top_level.iter().any(|k| k == key)
    };
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| is_field(f)) else {
            rest.push(arg);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Failure::Usage(format!("--{flag} needs a value")))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

/// Runs one command and returns its exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let outcome = split_overrides(args).and_then(|(rest, overrides)| match Cli::try_parse_from(rest) {
        Ok(cli) => dispatch(cli, &overrides),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                Err(Failure::Usage(String::new()))
            } else {
                Ok(())
            }
        }
    });
    match outcome {
        Ok(_) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            EXIT_USAGE
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn resolve(config: Option<&Path>, fallback: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, Failure> {
    let base = match config.or(fallback) {
        Some(p) if !p.exists() => return Err(Failure::Runtime(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    base.with_overrides(overrides).map_err(|e| Failure::Usage(e.to_string()))
}

fn push(overrides: &mut Vec<(String, String)>, key: &str, value: Option<String>) {
    if let Some(v) = value {
        overrides.push((key.to_string(), v));
    }
}

fn json_str(p: &Path) -> String {
    serde_json::to_string(p).expect("path serializes")
}

fn dispatch(cli: Cli, overrides: &[(String, String)]) -> CmdResult {
    let mut ov = overrides.to_vec();
    let config = cli.config.as_deref();
    match cli.command {
        Command::Gen { out, seed, count, force } => {
            // shorthands first so explicit dotted flags still win
            let mut all = Vec::new();
            push(&mut all, "data.train_seed", seed.map(|s| s.to_string()));
            push(&mut all, "data.train_count", count.map(|c| c.to_string()));
            all.extend(ov);
            let cfg = resolve(config, None, &all)?;
            cmd_gen(&cfg, &out, force)
        }
        Command::Train { mode, seed, data } => {
            let mut all = Vec::new();
            push(&mut all, "trainer.mode", mode.map(|m| serde_json::to_string(&m).unwrap()));
            push(&mut all, "trainer.seed", seed.map(|s| s.to_string()));
            push(&mut all, "data.train_path", data.as_deref().map(json_str));
            all.extend(ov);
            let cfg = resolve(config, None, &all)?;
            cmd_train(&cfg)
        }
        Command::Eval { checkpoint, data, out } => {
            push(&mut ov, "data.val_path", data.as_deref().map(json_str));
            let cfg = resolve(config, sibling_config(&checkpoint).as_deref(), &ov)?;
            cmd_eval(&cfg, &checkpoint, out.as_deref())
        }
        Command::Inspect { checkpoint, scene, data, out } => {
            push(&mut ov, "data.val_path", data.as_deref().map(json_str));
            let cfg = resolve(config, sibling_config(&checkpoint).as_deref(), &ov)?;
            cmd_inspect(&cfg, &checkpoint, scene.as_deref(), out.as_deref())
        }
        Command::Compare { seeds, baseline, lgd, data } => {
            if seeds.len() != baseline.len() || seeds.len() != lgd.len() {
                return Err(Failure::Usage(format!(
                    "{} seeds, {} baseline and {} lgd checkpoints must match in number",
                    seeds.len(),
                    baseline.len(),
                    lgd.len()
                )));
            }
            push(&mut ov, "data.val_path", data.as_deref().map(json_str));
            let cfg = resolve(config, None, &ov)?;
            cmd_compare(&cfg, &seeds, &baseline, &lgd)
        }
    }
}

/// The resolved configuration written next to a checkpoint, if any.
fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.join(RESOLVED_CONFIG_FILE);
    p.exists().then_some(p)
}

fn cmd_gen(cfg: &RunConfig, out: &Path, force: bool) -> CmdResult {
    if out.exists() && !force {
        return Err(Failure::Runtime(format!("{} exists; pass --force to overwrite", out.display())));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let scenes = scene::generate_dataset(cfg.data.train_seed, cfg.data.train_count, &cfg.gen);
    scene::write_dataset(out, &scenes)?;
    let mut resolved = out.as_os_str().to_owned();
    resolved.push(".");
    resolved.push(RESOLVED_CONFIG_FILE);
    let resolved = PathBuf::from(resolved);
    std::fs::write(&resolved, cfg.to_pretty_json() + "\n").map_err(|e| Error::io(&resolved, e))?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> CmdResult {
    let dir = cfg.resolved_out_dir();
    cfg.write_resolved(&dir)?;
    let scenes = cfg.train_scenes()?;
    let outcome = trainer::run_training(&cfg.trainer, &cfg.model, &scenes, Some(&dir))?;
    if let Some(last) = outcome.reports.last() {
        println!(
            "iter {} det_s {:.4} det_i {:.4} distill {:.4} total {:.4}",
            last.iter, last.det_s, last.det_i, last.distill, last.total
        );
    }
    for p in [outcome.final_checkpoint, outcome.student_export].into_iter().flatten() {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> CmdResult {
    let store = trainer::load_params(checkpoint)?;
    let scenes = cfg.val_scenes()?;
    let result = evaluate_store(&store, &scenes, cfg.model.num_classes, &cfg.decode)?;
    let text = serde_json::to_string_pretty(&result).expect("result serializes");
    println!("{text}");
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = cfg.resolved_out_dir();
            cfg.write_resolved(&dir)?;
            dir.join("eval.json")
        }
    };
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn pick_scene(scenes: Vec<Scene>, id: Option<&str>) -> Result<Scene, Failure> {
    match id {
        None => scenes
            .into_iter()
            .next()
            .ok_or_else(|| Failure::Runtime("dataset is empty".into())),
        Some(id) => scenes
            .into_iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Failure::Runtime(format!("scene `{id}` not found"))),
    }
}

/// Tensors of the instructive pass on one scene, named for external tools.
/// Level `l` uses suffix `p{l+1}`: `x` student pyramid, `xs` adapted
/// student, `xi` instructive map, `resid` the difference of their instance
/// normalizations, `mask` the `(H·W)×(N+1)` mask matrix and `attn.p{l+1}.h{t}`
/// the attention weights of head `t` with rows summing to one.
pub fn inspect_records(cfg: &RunConfig, store: &crate::ParamStore, scene: &Scene) -> crate::Result<Vec<(String, Tensor)>> {
    let mut g = Graph::new();
    let l = scene_losses(&mut g, store, &cfg.model, Some(&cfg.trainer.lgd), scene, true)?;
    let inst = l.instructive.as_ref().expect("instructive branch was requested");
    let mut out = vec![("image".to_string(), scene.image.clone())];
    for level in 0..l.pyramid.levels.len() {
        let p = level + 1;
        out.push((format!("x.p{p}"), g.value(l.pyramid.levels[level]).clone()));
        out.push((format!("xs.p{p}"), g.value(l.adapted[level]).clone()));
        out.push((format!("xi.p{p}"), g.value(inst.maps[level]).clone()));
        let ns = g.instance_norm(l.adapted[level], mapper::DISTILL_EPS);
        let ni = g.instance_norm(inst.maps[level], mapper::DISTILL_EPS);
        let resid = g.sub(ns, ni)?;
        out.push((format!("resid.p{p}"), g.value(resid).clone()));
        out.push((format!("mask.p{p}"), inst.masks.levels[level].clone()));
        for (t, &w) in inst.weights[level].iter().enumerate() {
            out.push((format!("attn.p{p}.h{t}"), g.value(w).clone()));
        }
    }
    Ok(out)
}

fn cmd_inspect(cfg: &RunConfig, checkpoint: &Path, scene_id: Option<&str>, out: Option<&Path>) -> CmdResult {
    let store = trainer::load_params(checkpoint)?;
    if !store.names().any(|n| n.starts_with("lgd.")) {
        return Err(Failure::Runtime(format!(
            "{} holds no lgd.* tensors; inspect needs a full training checkpoint",
            checkpoint.display()
        )));
    }
    let scene = pick_scene(cfg.val_scenes()?, scene_id)?;
    let records = inspect_records(cfg, &store, &scene)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = cfg.resolved_out_dir();
            cfg.write_resolved(&dir)?;
            dir.join(format!("inspect_{}.bin", scene.id))
        }
    };
    tensor::save_records(&path, records.iter().map(|(n, t)| (n.as_str(), t)))?;
    for (name, t) in &records {
        println!("{name:14} {:?}", t.shape());
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_compare(cfg: &RunConfig, seeds: &[u64], baseline: &[PathBuf], lgd: &[PathBuf]) -> CmdResult {
    let mut stores = Vec::with_capacity(seeds.len());
    for (b, l) in baseline.iter().zip(lgd) {
        stores.push((trainer::load_params(b)?, trainer::load_params(l)?));
    }
    let pairs: Vec<_> = seeds.iter().zip(&stores).map(|(&s, (b, l))| (s, b, l)).collect();
    let scenes = cfg.val_scenes()?;
    let cmp = compare_runs(&pairs, &scenes, cfg.model.num_classes, &cfg.decode)?;
    let dir = cfg.resolved_out_dir();
    cfg.write_resolved(&dir)?;
    let table = cmp.table();
    print!("{table}");
    for (name, body) in [("comparison.txt", table), ("comparison.ndjson", cmp.records())] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
