use std::path::{Path, PathBuf};
use std::process::ExitCode;

use geomotion_core::dataio::{load_checkpoint, write_probability_png, BinaryMask};
use geomotion_core::decoder::{refine, CommandRefiner, DefaultRefiner, IdentityRefiner, RefinementHook};
use geomotion_core::gradsuite;
use geomotion_core::metrics::{bench_runtime, evaluate_dataset, score_sequence, SegReport};
use geomotion_core::model::{Model, ModelConfig};
use geomotion_core::providers::{synthetic_tokens, write_bundle, ProviderSpec, TokenDims};
use geomotion_core::sequence::{load_dataset, save_sequence};
use geomotion_core::synthscenes::{generate_sequence, mix, SceneConfig};
use geomotion_core::trainer::{initial_model, prepare_all, train_from, Prepared, TrainConfig, TrainState};
use geomotion_core::{Error, Result, VERSION};
use serde::Serialize;
use serde_json::json;

use crate::config::load;
use crate::schemas::{BenchConfig, EvalConfig, GenConfig, InferConfig, RefineMode};
use crate::Common;

pub const MANIFEST: &str = "manifest.json";

/// `GEOMOTION_DETERMINISTIC=1` forces deterministic mode.
fn env_deterministic() -> bool {
    std::env::var("GEOMOTION_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn require<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("{what} is required")))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Config snapshot, seed and version; no timestamps, so identical runs
/// write identical manifests.
fn write_manifest(dir: &Path, command: &str, seed: Option<u64>, deterministic: bool, config: &impl Serialize) -> Result<()> {
    write_json(
        &dir.join(MANIFEST),
        &json!({
            "tool": "geomotion",
            "version": VERSION,
            "command": command,
            "seed": seed,
            "deterministic": deterministic,
            "config": config,
        }),
    )
}

fn provider_seed(p: &ProviderSpec) -> Option<u64> {
    match p {
        ProviderSpec::Synthetic { seed, .. } => Some(*seed),
        ProviderSpec::File { .. } => None,
    }
}

/// Model plus the provider recorded with it at training time.
fn load_model(dir: &Path) -> Result<(Model, Option<ProviderSpec>)> {
    let ckpt = load_checkpoint(dir)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let provider = ckpt
        .meta
        .get("train")
        .and_then(|t| t.get("provider"))
        .and_then(|p| serde_json::from_value(p.clone()).ok());
    Ok((model, provider))
}

pub fn gen(c: &Common) -> Result<ExitCode> {
    let cfg: GenConfig = load(c.config.as_deref(), &c.overrides())?;
    let out = require(&c.out, "--out")?;
    cfg.scene.validate()?;
    let dims = if cfg.tokens.enabled {
        let t = &cfg.tokens;
        Some(TokenDims::for_image(cfg.scene.height, cfg.scene.width, t.patch, t.channels, t.cam_dim)?)
    } else {
        None
    };
    mkdir(out)?;
    for i in 0..cfg.sequences {
        let seed = mix(&[cfg.seed, i as u64]);
        let syn = generate_sequence(&cfg.scene, seed)?;
        let name = format!("{}_{i:02}", cfg.prefix);
        let seq = syn.to_frame_sequence(&name);
        let dir = out.join(&name);
        save_sequence(&seq, &dir, Some(seed), Some(&syn.config))?;
        if let Some(dims) = &dims {
            let bundle = synthetic_tokens(&seq, cfg.tokens.noise, cfg.tokens.depth_cue_weight, cfg.seed, dims)?;
            write_bundle(&bundle, &dir)?;
        }
    }
    write_manifest(out, "gen", Some(cfg.seed), env_deterministic(), &cfg)?;
    println!("{}", json!({ "sequences": cfg.sequences, "out": out }));
    Ok(ExitCode::SUCCESS)
}

pub fn train(c: &Common) -> Result<ExitCode> {
    let mut cfg: TrainConfig = load(c.config.as_deref(), &c.overrides())?;
    let out = require(&c.out, "--out")?;
    cfg.deterministic |= env_deterministic();
    if cfg.checkpoint_dir.is_none() {
        cfg.checkpoint_dir = Some(out.join("checkpoints"));
    }
    cfg.validate()?;
    let train_dir = require(&cfg.train_dir, "train_dir")?;
    let train_set = prepare_all(&load_dataset(train_dir)?, &cfg)?;
    let val_set = match &cfg.val_dir {
        Some(d) => prepare_all(&load_dataset(d)?, &cfg)?,
        None => Vec::new(),
    };
    mkdir(out)?;
    write_manifest(out, "train", Some(cfg.seed), cfg.deterministic, &cfg)?;
    let state = TrainState::fresh(initial_model(&cfg)?, cfg.learning_rate);
    let (state, report) = train_from(state, &cfg, &train_set, &val_set)?;
    state.save(&cfg, out.join("model"))?;
    report.write_loss_csv(out.join("losses.csv"), !cfg.deterministic)?;
    report.write_eval_csv(out.join("evals.csv"))?;
    let mut summary = json!({
        "steps": report.steps(),
        "final_loss": report.losses.last(),
        "best_j_m": report.best_j(),
        "steps_to_target": report.steps_to_target,
        "final_eval": report.final_eval,
    });
    if !cfg.deterministic && !report.step_seconds.is_empty() {
        summary["seconds_per_step"] = json!(report.step_seconds.iter().sum::<f64>() / report.step_seconds.len() as f64);
    }
    write_json(&out.join("report.json"), &summary)?;
    println!(
        "{}",
        json!({ "steps": report.steps(), "final_loss": report.losses.last(), "best_j_m": report.best_j(), "model": out.join("model") })
    );
    Ok(ExitCode::SUCCESS)
}

/// Loads every sequence of `data_dir` at the model resolution.
fn prepare_dataset(data_dir: &Path, model: &ModelConfig, provider: &ProviderSpec) -> Result<Vec<Prepared>> {
    load_dataset(data_dir)?.iter().map(|s| Prepared::new(s, model, provider)).collect()
}

fn resolve_provider(configured: &Option<ProviderSpec>, recorded: Option<ProviderSpec>) -> ProviderSpec {
    configured.clone().or(recorded).unwrap_or_default()
}

pub fn eval(c: &Common) -> Result<ExitCode> {
    let cfg: EvalConfig = load(c.config.as_deref(), &c.overrides())?;
    let data_dir = require(&cfg.data_dir, "data_dir")?;
    let mut seed = None;
    let report = match &cfg.model {
        Some(path) => {
            let (model, recorded) = load_model(path)?;
            let provider = resolve_provider(&cfg.provider, recorded);
            seed = provider_seed(&provider);
            let mut scores = Vec::new();
            for p in prepare_dataset(data_dir, &model.config, &provider)? {
                let probs = model.predict_sequence(&p.seq, p.bundle.clone())?;
                let preds: Vec<BinaryMask> = probs.iter().map(|m| m.binarize(cfg.threshold)).collect();
                scores.push(score_sequence(&p.seq.name, &preds, p.masks()?, cfg.tolerance)?);
            }
            SegReport::from_sequences(scores)
        }
        None => evaluate_dataset(require(&cfg.pred_dir, "pred_dir (or model)")?, data_dir, cfg.threshold, cfg.tolerance)?,
    };
    if let Some(out) = &c.out {
        mkdir(out)?;
        report.write_csv(out.join("report.csv"))?;
        report.write_json(out.join("report.json"))?;
        write_manifest(out, "eval", seed, env_deterministic(), &cfg)?;
    }
    println!(
        "{}",
        json!({ "J_M": report.j_m, "F_M": report.f_m, "J&F": report.j_and_f, "J_R": report.j_r, "frames": report.frames })
    );
    Ok(ExitCode::SUCCESS)
}

pub fn infer(c: &Common, refine_cmd: Option<String>, tokens: Option<PathBuf>) -> Result<ExitCode> {
    let mut overrides = c.overrides();
    if let Some(cmd) = refine_cmd {
        overrides.push("refine=command".into());
        overrides.push(format!("refine_cmd={}", serde_json::to_string(&cmd)?));
    }
    if let Some(dir) = tokens {
        overrides.push(format!("provider={}", json!({ "kind": "file", "dir": dir })));
    }
    let cfg: InferConfig = load(c.config.as_deref(), &overrides)?;
    let out = require(&c.out, "--out")?;
    let data_dir = require(&cfg.data_dir, "data_dir")?;
    let (model, recorded) = load_model(require(&cfg.model, "model")?)?;
    let provider = resolve_provider(&cfg.provider, recorded);
    let hook: Box<dyn RefinementHook> = match cfg.refine {
        RefineMode::Default => Box::new(DefaultRefiner { threshold: cfg.threshold }),
        RefineMode::Identity => Box::new(IdentityRefiner),
        RefineMode::Command => Box::new(CommandRefiner { command: require(&cfg.refine_cmd, "refine_cmd")?.clone() }),
    };
    mkdir(out)?;
    let mut frames = 0;
    let prepared = prepare_dataset(data_dir, &model.config, &provider)?;
    for p in &prepared {
        let coarse = model.predict_sequence(&p.seq, p.bundle.clone())?;
        let masks = refine(&p.seq.frames, &coarse, hook.as_ref())?;
        let dir = out.join(&p.seq.name);
        mkdir(&dir)?;
        for (i, m) in masks.iter().enumerate() {
            write_probability_png(m.width(), m.height(), m.probs(), dir.join(format!("{i:05}.png")))?;
        }
        frames += masks.len();
    }
    write_manifest(out, "infer", provider_seed(&provider), env_deterministic(), &json!({ "infer": cfg, "provider": provider }))?;
    println!("{}", json!({ "sequences": prepared.len(), "frames": frames, "out": out }));
    Ok(ExitCode::SUCCESS)
}

pub fn bench(c: &Common) -> Result<ExitCode> {
    let cfg: BenchConfig = load(c.config.as_deref(), &c.overrides())?;
    let model = match &cfg.model {
        Some(p) => load_model(p)?.0,
        None => Model::init(ModelConfig::default(), cfg.seed)?,
    };
    let size = model.config.image_size;
    let scene = SceneConfig { height: size, width: size, frames: cfg.frames, ..SceneConfig::default() };
    let seq = generate_sequence(&scene, cfg.seed)?.to_frame_sequence("bench");
    let p = Prepared::new(&seq, &model.config, &ProviderSpec::default())?;
    let clip = p.clip(&(0..cfg.frames).collect::<Vec<_>>());
    let spf = bench_runtime(|| model.predict(std::slice::from_ref(&clip)).map(|_| ()), cfg.frames, cfg.repetitions)?;
    let result = json!({
        "seconds_per_frame": spf,
        "frames": cfg.frames,
        "repetitions": cfg.repetitions,
        "image_size": size,
        "version": VERSION,
    });
    if let Some(out) = &c.out {
        mkdir(out)?;
        write_json(&out.join("bench.json"), &result)?;
        write_manifest(out, "bench", Some(cfg.seed), env_deterministic(), &cfg)?;
    }
    println!("{result}");
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(out: Option<PathBuf>) -> Result<ExitCode> {
    let rows = gradsuite::run_all()?;
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    println!("{:width$}  {:>12}  {:>6}  result", "check", "max_rel_err", "coords");
    for r in &rows {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        println!("{:width$}  {:>12.3e}  {:>6}  {verdict}", r.name, r.max_rel_error, r.coords);
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed, tolerance {:e}", rows.len(), gradsuite::TOLERANCE);
    if let Some(out) = &out {
        mkdir(out)?;
        write_json(&out.join("gradcheck.json"), &rows)?;
        write_manifest(out, "gradcheck", None, env_deterministic(), &json!({ "epsilon": gradsuite::EPSILON, "tolerance": gradsuite::TOLERANCE }))?;
    }
    if failed > 0 {
        eprintln!("{}", json!({ "error": { "kind": "gradcheck", "message": format!("{failed} gradient checks failed") } }));
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
