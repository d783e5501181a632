//! Subcommand implementations behind the `motionseg` binary.

mod args;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgMatches, CommandFactory, FromArgMatches};

use motionseg::augment::{augment_sequence, regroup_windows, AugmentParams};
use motionseg::dataset::{
    list_sequences, load_sequence, load_windows, read_runs, save_window, sequence_dir, write_manifest, write_runs,
    write_sequence, ManifestEntry, MANIFEST_FILE, RUNS_FILE,
};
use motionseg::evaluate::{benchmark_fn, eval_csv, evaluate_with, EvalRow};
use motionseg::ingest::{build_windows_shared, generate_scene, LabelMap, PointCloud, Pose, SceneConfig, DEFAULT_MOTION_THRESHOLD};
use motionseg::model::{load_checkpoint, save_checkpoint, BlockStyle, Model, ModelConfig, Variant};
use motionseg::preproc::{build_bev_window_with, BevWindow, GridSpec, ResidualMode};
use motionseg::quantize::{calibrate_activations, Precision, QuantScheme, QuantizedModel};
use motionseg::train::{metrics_csv, split_dataset, train_with, TrainConfig};
use motionseg::viz;

pub use args::*;

pub const RUN_RECORD: &str = "run.txt";
const LOCK_FILE: &str = ".lock";

/// Parses `argv` (including the program name), merges the `--config` file
/// and runs the subcommand.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = merge_config(argv)?;
    let matches = command().try_get_matches_from(&argv)?;
    let cli = Cli::from_arg_matches(&matches)?;
    let (name, sub) = matches.subcommand().ok_or_else(|| anyhow!("no subcommand"))?;
    let record = run_record(&command(), name, sub);
    match cli.command {
        Command::Synth(a) => with_out(&a.common, &record, |out| cmd_synth(&a, out)),
        Command::Augment(a) => with_out(&a.common, &record, |out| cmd_augment(&a, out)),
        Command::Preprocess(a) => with_out(&a.common, &record, |out| cmd_preprocess(&a, out)),
        Command::Train(a) => with_out(&a.common, &record, |out| cmd_train(&a, out)),
        Command::Eval(a) => with_out(&a.common, &record, |out| cmd_eval(&a, out)),
        Command::Infer(a) => with_out(&a.common, &record, |out| cmd_infer(&a, out)),
        Command::Bench(a) => with_out(&a.common, &record, |out| cmd_bench(&a, out)),
        Command::Viz(a) => with_out(&a.common, &record, |out| cmd_viz(&a, out)),
    }
}

pub fn command() -> clap::Command {
    Cli::command().mut_subcommands(|s| s.args_override_self(true))
}

/// Inserts flags from the `--config` file directly after the subcommand
/// name, so that flags given on the command line (which come later) win.
fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate().skip(2) {
        if a == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    if strs.len() < 2 {
        return Ok(argv);
    }
    let sub_name = &strs[1];
    let cmd = command();
    let sub = cmd
        .find_subcommand(sub_name)
        .ok_or_else(|| anyhow!("unknown subcommand {sub_name:?}"))?;
    let text = fs::read_to_string(&path).with_context(|| format!("missing artifact: config file {path}"))?;
    let mut extra: Vec<OsString> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{path}:{}: expected key=value", n + 1))?;
        let key = k.trim().replace('_', "-");
        let v = v.trim();
        if key == "config" {
            continue;
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| anyhow!("{path}:{}: `{key}` is not a flag of `{sub_name}`", n + 1))?;
        if arg.get_action().takes_values() {
            extra.push(format!("--{key}").into());
            extra.push(v.into());
        } else if v.parse::<bool>().with_context(|| format!("{path}:{}: `{key}` expects true/false", n + 1))? {
            extra.push(format!("--{key}").into());
        }
    }
    let mut out = argv[..2].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

/// `key=value` lines for every resolved argument, sorted by key.
fn run_record(cmd: &clap::Command, name: &str, m: &ArgMatches) -> String {
    let Some(sub) = cmd.find_subcommand(name) else {
        return format!("subcommand={name}\n");
    };
    let mut lines: Vec<String> = m
        .ids()
        .filter(|id| sub.get_arguments().any(|a| a.get_id() == *id))
        .filter_map(|id| {
            let vals = m.get_raw(id.as_str())?;
            let joined = vals.map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>().join(",");
            Some(format!("{}={joined}", id.as_str()))
        })
        .collect();
    lines.sort();
    let mut s = format!("subcommand={name}\n");
    for l in lines {
        s.push_str(&l);
        s.push('\n');
    }
    s
}

struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Prepares the output directory, holds its lock for the duration of `f`
/// and writes the run record.
fn with_out(common: &Common, record: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let out = &common.out;
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .with_context(|| format!("cannot read output directory {}", out.display()))?
            .next()
            .is_some();
        if non_empty {
            if out.join(LOCK_FILE).exists() {
                bail!("output directory {} is locked by another run", out.display());
            }
            if !common.force {
                bail!("output directory {} is not empty; pass --force to replace it", out.display());
            }
            fs::remove_dir_all(out).with_context(|| format!("cannot clear {}", out.display()))?;
        }
    }
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let lock_path = out.join(LOCK_FILE);
    fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&lock_path)
        .with_context(|| format!("output directory {} is locked by another run", out.display()))?;
    let _lock = Lock(lock_path);
    fs::write(out.join(RUN_RECORD), record).context("writing run record")?;
    f(out)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing artifact: {what} not found at {}", path.display());
    }
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn label_map(path: &Option<PathBuf>) -> Result<LabelMap> {
    match path {
        Some(p) => {
            require(p, "label map")?;
            Ok(LabelMap::from_file(p)?)
        }
        None => Ok(LabelMap::semantic_kitti()),
    }
}

/// Seed of the `i`-th synthetic sequence.
pub fn sequence_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

pub fn cmd_synth(a: &SynthArgs, out: &Path) -> Result<()> {
    if a.motionless_sequences > a.sequences {
        bail!("--motionless-sequences exceeds --sequences");
    }
    for i in 0..a.sequences {
        let motionless = i >= a.sequences - a.motionless_sequences;
        let cfg = SceneConfig {
            frames: a.frames,
            moving_cars: if motionless { 0 } else { a.moving_cars },
            parked_cars: a.parked_cars,
            static_objects: a.static_objects,
            noise_sigma: a.noise,
            seed: sequence_seed(a.common.seed, i),
            ..SceneConfig::default()
        };
        let seq = generate_scene(&cfg)?;
        write_sequence(out, &format!("{i:02}"), &seq.frames, &seq.poses)?;
        log::info!("sequence {i:02}: {} frames", seq.frames.len());
    }
    Ok(())
}

pub fn cmd_augment(a: &AugmentArgs, out: &Path) -> Result<()> {
    require(&a.data.join("sequences"), "dataset")?;
    let map = label_map(&a.label_map)?;
    let ids = list_sequences(&a.data)?;
    for id in &ids {
        let seq = load_sequence(&a.data, id)?;
        let (clouds, poses): (Vec<PointCloud>, Vec<Pose>) = seq.into_iter().unzip();
        let params = AugmentParams {
            n_frames: a.n_frames,
            dx_range: (a.dx_min, a.dx_max),
            dy_range: (a.dy_min, a.dy_max),
            seed: a.common.seed ^ id.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)),
        };
        let aug = augment_sequence(&clouds, &params, &map)?;
        write_sequence(out, id, &aug.frames, &poses)?;
        write_runs(&sequence_dir(out, id).join(RUNS_FILE), &aug.runs)?;
        log::info!("sequence {id}: {} augmented runs", aug.runs.len());
    }
    Ok(())
}

fn grid_spec(name: &str) -> Result<GridSpec> {
    match name {
        "desk" => Ok(GridSpec::desk()),
        "paper" => Ok(GridSpec::paper()),
        other => bail!("unknown grid {other:?} (expected desk or paper)"),
    }
}

pub fn cmd_preprocess(a: &PreprocessArgs, out: &Path) -> Result<()> {
    require(&a.data.join("sequences"), "dataset")?;
    let spec = grid_spec(&a.grid)?;
    let mode: ResidualMode = a.residual.parse()?;
    let map = label_map(&a.label_map)?;
    let mut manifest = Vec::new();
    for id in list_sequences(&a.data)? {
        let seq = load_sequence(&a.data, &id)?;
        let frames: Vec<(Arc<PointCloud>, Pose)> = seq.into_iter().map(|(c, p)| (Arc::new(c), p)).collect();
        let runs_path = sequence_dir(&a.data, &id).join(RUNS_FILE);
        let windows = if runs_path.exists() {
            regroup_windows(&frames, &read_runs(&runs_path)?, &id)
        } else {
            build_windows_shared(&frames, &id)
        };
        let (mut kept, total) = (0, windows.len());
        for w in windows {
            let bev = build_bev_window_with(&w, &spec, mode, &map)?;
            if !a.no_filter && !w.augmented && bev.motion_points < a.threshold {
                continue;
            }
            save_window(&out.join(format!("{}.win", bev.id())), &bev, &spec)?;
            manifest.push(ManifestEntry {
                window_id: bev.id(),
                motion_points: bev.motion_points,
                augmented: bev.augmented,
            });
            kept += 1;
        }
        log::info!("sequence {id}: kept {kept} of {total} windows");
    }
    write_manifest(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(())
}

fn load_window_dir(dir: &Path) -> Result<(Vec<BevWindow>, GridSpec)> {
    require(&dir.join(MANIFEST_FILE), "window manifest")?;
    Ok(load_windows(dir)?)
}

fn model_config(m: &ModelArgs, spec: &GridSpec) -> Result<ModelConfig> {
    let variant: Variant = m.variant.as_deref().unwrap_or("multi_encoder_joint").parse()?;
    let mode: ResidualMode = m.residual.as_deref().unwrap_or("mul").parse()?;
    let mut cfg = match m.scale.as_str() {
        "desk" => ModelConfig::desk(variant, mode),
        "paper" => ModelConfig::paper(variant, mode),
        other => bail!("unknown scale {other:?} (expected desk or paper)"),
    };
    cfg.rows = spec.rows();
    cfg.cols = spec.cols();
    cfg.block_style = m.block_style.parse::<BlockStyle>()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs, out: &Path) -> Result<()> {
    let (windows, spec) = load_window_dir(&a.data)?;
    let (train_set, val_set) = split_dataset(windows, &a.holdout)?;
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        lr: a.lr,
        epsilon: a.epsilon,
        seed: a.common.seed,
        shuffle: !a.no_shuffle,
        model: model_config(&a.model, &spec)?,
    };
    log::info!("training on {} windows, validating on {}", train_set.len(), val_set.len());
    let outcome = train_with(&train_set, &val_set, &cfg, |_| {})?;
    save_checkpoint(out.join("best.ckpt"), &outcome.best, &outcome.best_meta)?;
    save_checkpoint(out.join("last.ckpt"), &outcome.last, &outcome.last_meta)?;
    write(&out.join("metrics.csv"), metrics_csv(&outcome.metrics))
}

fn load_model(path: &Path, m: Option<&ModelArgs>) -> Result<Model> {
    require(path, "checkpoint")?;
    let (model, _) = load_checkpoint(path)?;
    if let Some(m) = m {
        let cfg = model.config();
        if let Some(v) = &m.variant {
            if v.parse::<Variant>()? != cfg.variant {
                bail!(motionseg::Error::IncompatibleCheckpoint(format!(
                    "checkpoint variant is {}, requested {v}",
                    cfg.variant
                )));
            }
        }
        if let Some(r) = &m.residual {
            if r.parse::<ResidualMode>()? != cfg.residual_mode {
                bail!(motionseg::Error::IncompatibleCheckpoint(format!(
                    "checkpoint residual mode is {}, requested {r}",
                    cfg.residual_mode
                )));
            }
        }
    }
    Ok(model)
}

fn precisions(s: &str) -> Result<Vec<Precision>> {
    if s == "all" {
        return Ok(Precision::ALL.to_vec());
    }
    s.split(',').map(|p| Ok(p.trim().parse()?)).collect()
}

/// Builds the simulated-precision model; int8 is calibrated on the first
/// `k` windows of `calib`.
fn prepare(model: &Model, precision: Precision, calib: &[BevWindow], k: usize) -> Result<QuantizedModel> {
    let scheme = match precision {
        Precision::Fp32 => QuantScheme::fp32(),
        Precision::Fp16 => QuantScheme::fp16(),
        Precision::Int8 => QuantScheme::int8(calibrate_activations(model, calib, k)?),
    };
    Ok(QuantizedModel::new(model, scheme)?)
}

pub fn cmd_eval(a: &EvalArgs, out: &Path) -> Result<()> {
    let model = load_model(&a.checkpoint, Some(&a.model))?;
    let (windows, _) = load_window_dir(&a.data)?;
    let (calib, eval_set) = if a.split == "all" {
        (windows.clone(), windows)
    } else {
        let (train, val) = split_dataset(windows, &a.split)?;
        (if train.is_empty() { val.clone() } else { train }, val)
    };
    let mut rows = Vec::new();
    for p in precisions(&a.precision)? {
        let q = prepare(&model, p, &calib, a.calib_windows)?;
        let counts = evaluate_with(&eval_set, a.batch_size, |b| q.forward(b))?;
        log::info!("{p}: iou {:?}", counts.iou_moving());
        rows.push(EvalRow {
            variant: model.config().variant.to_string(),
            residual_mode: model.config().residual_mode.to_string(),
            precision: p.to_string(),
            counts,
        });
    }
    write(&out.join("eval.csv"), eval_csv(&rows))
}

fn single_precision(s: &str) -> Result<Precision> {
    Ok(s.parse()?)
}

pub fn cmd_infer(a: &InferArgs, out: &Path) -> Result<()> {
    let model = load_model(&a.checkpoint, None)?;
    let (windows, _) = load_window_dir(&a.data)?;
    let q = prepare(&model, single_precision(&a.precision)?, &windows, a.calib_windows)?;
    for w in &windows {
        let logits = q.forward(&[w])?;
        let mask = motionseg::model::logits_to_masks(&logits)?.remove(0);
        write(&out.join(format!("{}.pgm", w.id())), viz::mask_pgm(&mask))?;
    }
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs, out: &Path) -> Result<()> {
    let model = load_model(&a.checkpoint, None)?;
    let (windows, _) = load_window_dir(&a.data)?;
    let window = windows.first().ok_or_else(|| anyhow!("no windows in {}", a.data.display()))?;
    let p = single_precision(&a.precision)?;
    let q = prepare(&model, p, &windows, a.calib_windows)?;
    let report = benchmark_fn(p.as_str(), a.warmup, a.iters, || q.forward(&[window]).map(|_| ()))?;
    log::info!("mean {:.3} ms, p50 {:.3} ms, p99 {:.3} ms", report.mean_ms(), report.p50_ms(), report.p99_ms());
    write(&out.join("latency.csv"), report.to_csv())
}

pub fn cmd_viz(a: &VizArgs, out: &Path) -> Result<()> {
    let (windows, _) = load_window_dir(&a.data)?;
    let selected: Vec<&BevWindow> = match &a.window {
        Some(id) => {
            let w = windows
                .iter()
                .find(|w| &w.id() == id)
                .ok_or_else(|| anyhow!("missing artifact: window {id} not found in {}", a.data.display()))?;
            vec![w]
        }
        None => windows.iter().collect(),
    };
    let model = a.checkpoint.as_deref().map(|p| load_model(p, None)).transpose()?;
    for w in selected {
        let id = w.id();
        write(&out.join(format!("{id}_frames.ppm")), viz::frames_ppm(w))?;
        write(&out.join(format!("{id}_residual.pgm")), viz::residual_pgm(w))?;
        if let Some(label) = &w.label_mask {
            write(&out.join(format!("{id}_gt.pgm")), viz::mask_pgm(label))?;
        }
        if let Some(m) = &model {
            write(&out.join(format!("{id}_pred.pgm")), viz::mask_pgm(&m.predict(w)?))?;
        }
    }
    Ok(())
}

/// Default motion threshold, re-exported for the help text and tests.
pub const MOTION_THRESHOLD: usize = DEFAULT_MOTION_THRESHOLD;
