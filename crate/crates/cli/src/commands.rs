use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use mtslvr::audio::{apply_augmentation, read_wav, sample_rng, write_wav, AugmentationParams, MelFrontend, Waveform};
use mtslvr::fewshot::{evaluate, FeatureExtractor, LabeledClip};
use mtslvr::invariance::analyze;
use mtslvr::model::{BackboneConfig, HeadId, Model, Variant};
use mtslvr::objectives::{pretrain, Schedule, SslHeads, Trainer, ViewBatcher};
use mtslvr::synth::{noise_corpus, tone_corpus, SynthConfig};
use mtslvr::tensor::{Checkpoint, Group};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::load_manifest;
use crate::output::{write_atomic, write_bytes};

pub const DATA_ROOT_ENV: &str = "MTSLVR_DATA_ROOT";
const BACKBONE: &str = "backbone";
const HEADS: &str = "heads";

fn build_config(file: Option<&Path>, base: Option<RunConfig>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut cfg = match (file, base) {
        (Some(path), None) => RunConfig::from_file(path)?,
        (Some(path), Some(mut base)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            base.apply_text(&text)?;
            base
        }
        (None, base) => base.unwrap_or_default(),
    };
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn load_clips(manifest: &Path, sample_rate: u32) -> Result<Vec<LabeledClip>, CliError> {
    let root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
    let m = load_manifest(manifest, root.as_deref())?;
    info!(
        "manifest {}: {} clips in {} classes",
        manifest.display(),
        m.rows.len(),
        m.class_counts.len()
    );
    m.load_audio(sample_rate)
}

fn load_checkpoint(path: &Path, base_overrides: &[String]) -> Result<(Checkpoint, RunConfig, Model<f32>), CliError> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = build_config(
        None,
        Some(RunConfig::from_entries(ckpt.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))?),
        base_overrides,
    )?;
    let backbone = cfg.backbone()?;
    if ckpt.variant != backbone.variant.as_str() {
        return Err(CliError::Data(format!(
            "checkpoint holds a {} backbone but its config says {}",
            ckpt.variant, backbone.variant
        )));
    }
    let model = Model::from_checkpoint(backbone, &ckpt, BACKBONE)?;
    Ok((ckpt, cfg, model))
}

fn log_run(cfg: &RunConfig, seed_key: &str) {
    info!("config hash {} {seed_key} {}", cfg.hash(), cfg.get(seed_key));
}

pub struct PretrainOpts<'a> {
    pub config: Option<&'a Path>,
    pub data: &'a Path,
    pub out: &'a Path,
    pub loss_log: Option<&'a Path>,
    pub step_log: Option<&'a Path>,
    pub overrides: &'a [String],
}

pub fn pretrain_cmd(o: PretrainOpts<'_>) -> Result<(), CliError> {
    let cfg = build_config(o.config, None, o.overrides)?;
    log_run(&cfg, "seed");
    let seed = cfg.seed()?;
    let spec = cfg.spectrogram()?;
    let clips: Vec<Waveform> = load_clips(o.data, spec.sample_rate)?.into_iter().map(|c| c.audio).collect();
    let batcher = ViewBatcher::new(spec, cfg.crop_len()?, cfg.probs()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model: Model<f32> = Model::new(cfg.backbone()?, &mut rng)?;
    let heads = SslHeads::new(cfg.heads(model.head_dim())?, &mut rng);
    info!(
        "{} backbone: {} parameters ({} shared, {} contrastive, {} predictive)",
        model.variant(),
        model.total_params(),
        model.param_count(Group::Shared),
        model.param_count(Group::Contrastive),
        model.param_count(Group::Predictive)
    );
    let mut trainer = Trainer::new(model, heads, cfg.lambda()?, cfg.adam()?)?;
    let schedule = Schedule {
        epochs: cfg.epochs()?,
        batch_size: cfg.batch_size()?,
        max_steps: cfg.max_steps()?,
        seed,
    };
    let log = pretrain(&mut trainer, &batcher, &clips, schedule, |r| {
        if r.step % 10 == 0 {
            info!(
                "step {} epoch {}: contrastive {:.4} mlap {:.4} total {:.4}",
                r.step, r.epoch, r.loss.contrastive, r.loss.mlap, r.loss.total
            );
        }
    })?;
    let (model, heads) = trainer.into_parts();
    let mut ckpt = Checkpoint::new(model.variant().as_str(), cfg.entries());
    ckpt.push_store(BACKBONE, model.store());
    ckpt.push_store(HEADS, heads.store());
    write_atomic(o.out, |tmp| Ok(ckpt.save(tmp)?))?;
    let loss_path = o.loss_log.map(Path::to_path_buf).unwrap_or_else(|| sibling(o.out, "losses.csv"));
    let mut csv = Vec::new();
    log.write_epoch_csv(&mut csv)?;
    write_bytes(&loss_path, &csv)?;
    if let Some(p) = o.step_log {
        let mut csv = Vec::new();
        log.write_step_csv(&mut csv)?;
        write_bytes(p, &csv)?;
    }
    info!("wrote {} and {} ({} steps)", o.out.display(), loss_path.display(), log.steps.len());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{name}.{suffix}"))
}

#[derive(Serialize)]
struct HeadWeights {
    contrastive: f64,
    predictive: f64,
}

#[derive(Serialize)]
struct EvalJson {
    mean: f64,
    ci95: f64,
    tasks: usize,
    n_way: usize,
    k_shot: usize,
    queries: usize,
    seed: u64,
    head_weights: Option<HeadWeights>,
    degenerate_tasks: usize,
    accuracies: Vec<f64>,
    config_hash: String,
    config: BTreeMap<String, String>,
}

pub struct EvaluateOpts<'a> {
    pub ckpt: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    pub overrides: Vec<String>,
}

pub fn evaluate_cmd(o: EvaluateOpts<'_>) -> Result<String, CliError> {
    let (_, cfg, model) = load_checkpoint(o.ckpt, &o.overrides)?;
    log_run(&cfg, "eval.seed");
    let eval = cfg.eval()?;
    let frontend = MelFrontend::new(cfg.spectrogram()?)?;
    let extractor = FeatureExtractor::new(&frontend, cfg.segment_len()?)?;
    let clips = load_clips(o.data, frontend.config().sample_rate)?;
    let report = evaluate(&model, &extractor, &clips, &eval)?;
    if report.degenerate_tasks > 0 {
        log::warn!("{} tasks had constant support features", report.degenerate_tasks);
    }
    let json = EvalJson {
        mean: report.mean,
        ci95: report.ci95,
        tasks: report.tasks,
        n_way: eval.n_way,
        k_shot: eval.k_shot,
        queries: eval.queries,
        seed: eval.seed,
        head_weights: report.head_weights.map(|[c, p]| HeadWeights {
            contrastive: c,
            predictive: p,
        }),
        degenerate_tasks: report.degenerate_tasks,
        accuracies: report.accuracies,
        config_hash: cfg.hash(),
        config: cfg.entries().into_iter().collect(),
    };
    let text = serde_json::to_string_pretty(&json).map_err(|e| CliError::Data(e.to_string()))? + "\n";
    write_bytes(o.out, text.as_bytes())?;
    let summary = format!(
        "{}-way {}-shot over {} tasks: {:.2}% ± {:.2}%",
        eval.n_way,
        eval.k_shot,
        report.tasks,
        100.0 * report.mean,
        100.0 * report.ci95
    );
    info!("{summary}");
    Ok(summary)
}

pub struct InvarianceOpts<'a> {
    pub ckpt: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    pub overrides: Vec<String>,
}

pub fn invariance_cmd(o: InvarianceOpts<'_>) -> Result<String, CliError> {
    let (_, cfg, model) = load_checkpoint(o.ckpt, &o.overrides)?;
    log_run(&cfg, "invariance.seed");
    let frontend = MelFrontend::new(cfg.spectrogram()?)?;
    let clips = load_clips(o.data, frontend.config().sample_rate)?;
    let report = analyze(&model, &frontend, &clips, cfg.param_samples()?, cfg.invariance_seed()?)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_bytes(o.out, &csv)?;
    let summary = HeadId::BOTH
        .iter()
        .map(|&h| format!("{} {:.4}", h.as_str(), report.head_average(h)))
        .collect::<Vec<_>>()
        .join(", ");
    info!("average distance: {summary}");
    Ok(summary)
}

pub fn augment_preview(input: &Path, augs: &[String], out: &Path, seed: u64) -> Result<Vec<String>, CliError> {
    let mut wave = read_wav(input).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let mut rng = sample_rng(seed, 0);
    let mut applied = Vec::new();
    for spec in augs {
        let params = AugmentationParams::parse(spec, &mut rng)?;
        wave = apply_augmentation(&wave, &params, &mut rng)?;
        applied.push(params.to_string());
    }
    write_atomic(out, |tmp| Ok(write_wav(tmp, &wave)?))?;
    Ok(applied)
}

/// `(variant, total, ratio to Simple)` for every variant.
pub fn param_counts(preset: &str) -> Result<Vec<(Variant, usize, f64)>, CliError> {
    let build = |v: Variant| match preset {
        "desk" => Ok(BackboneConfig::desk(v)),
        "resnet18" => Ok(BackboneConfig::resnet18(v)),
        other => Err(CliError::Usage(format!("preset must be desk or resnet18, got `{other}`"))),
    };
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let model: Model<f32> = Model::new(build(v)?, &mut ChaCha8Rng::seed_from_u64(0))?;
        rows.push((v, model.total_params()));
    }
    let simple = rows[0].1 as f64;
    Ok(rows.into_iter().map(|(v, n)| (v, n, n as f64 / simple)).collect())
}

pub struct SynthOpts<'a> {
    pub out: &'a Path,
    pub noise_classes: Option<usize>,
    pub config: SynthConfig,
}

/// Writes `<label>/<id>.wav` files and `manifest.csv` under `out`.
pub fn synth_cmd(o: SynthOpts<'_>) -> Result<PathBuf, CliError> {
    let clips = match o.noise_classes {
        Some(n) => noise_corpus(n, &o.config)?,
        None => tone_corpus(&o.config)?,
    };
    let mut manifest = String::from("path,label,duration_s\n");
    for c in &clips {
        let rel = format!("{}/{}.wav", c.label, c.id);
        let path = o.out.join(&rel);
        write_atomic(&path, |tmp| Ok(write_wav(tmp, &c.audio)?))?;
        manifest.push_str(&format!("{rel},{},{}\n", c.label, c.audio.duration_s()));
    }
    let mpath = o.out.join("manifest.csv");
    write_bytes(&mpath, manifest.as_bytes())?;
    info!("wrote {} clips and {}", clips.len(), mpath.display());
    Ok(mpath)
}
