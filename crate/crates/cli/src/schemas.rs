//! Per-command configuration types and their key documentation.

use std::path::PathBuf;

use geomotion_core::providers::ProviderSpec;
use geomotion_core::synthscenes::SceneConfig;
use geomotion_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{KeyDoc, Schema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenExport {
    pub enabled: bool,
    pub patch: usize,
    pub channels: usize,
    pub cam_dim: usize,
    pub noise: f64,
    pub depth_cue_weight: f64,
}

impl Default for TokenExport {
    fn default() -> Self {
        Self {
            enabled: false,
            patch: 8,
            channels: 8,
            cam_dim: 8,
            noise: 0.25,
            depth_cue_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub sequences: usize,
    pub prefix: String,
    pub scene: SceneConfig,
    pub tokens: TokenExport,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sequences: 8,
            prefix: "seq".into(),
            scene: SceneConfig::default(),
            tokens: TokenExport::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub data_dir: Option<PathBuf>,
    pub pred_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub provider: Option<ProviderSpec>,
    pub threshold: f32,
    pub tolerance: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            pred_dir: None,
            model: None,
            provider: None,
            threshold: 0.5,
            tolerance: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMode {
    #[default]
    Default,
    Identity,
    Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub data_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub provider: Option<ProviderSpec>,
    pub refine: RefineMode,
    pub refine_cmd: Option<String>,
    pub threshold: f32,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            model: None,
            provider: None,
            refine: RefineMode::Default,
            refine_cmd: None,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub model: Option<PathBuf>,
    pub seed: u64,
    pub frames: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: None,
            seed: 0,
            frames: 16,
            repetitions: 5,
        }
    }
}

macro_rules! docs {
    ($($k:literal => $d:literal,)*) => {
        &[$(KeyDoc { key: $k, doc: $d },)*]
    };
}

const SCENE_DOCS: &[KeyDoc] = docs! {
    "scene.height" => "Frame height in pixels.",
    "scene.width" => "Frame width in pixels.",
    "scene.frames" => "Frames per sequence (at least 2).",
    "scene.objects" => "Independently moving objects per sequence.",
    "scene.static_objects" => "Objects that move with the camera (visible, never in the motion mask).",
    "scene.shape" => "Object shapes: rectangle, disk or mixed.",
    "scene.object_size" => "Inclusive [min, max] object side or diameter in pixels.",
    "scene.velocity_min" => "Lower bound of per-object velocity [dx, dy] in pixels per frame.",
    "scene.velocity_max" => "Upper bound of per-object velocity [dx, dy].",
    "scene.camera_translation" => "Mean camera translation [dx, dy] per frame.",
    "scene.camera_jitter" => "Per-sequence uniform perturbation of the camera translation, per axis.",
    "scene.integer_motion" => "Round all motion to whole pixels.",
    "scene.texture_scale" => "Lattice spacing of the value-noise textures in pixels.",
    "scene.texture_seed" => "Offset mixed into texture seeds.",
    "scene.allow_occlusion" => "Let objects overlap each other.",
};

const GEN_DOCS: &[KeyDoc] = docs! {
    "seed" => "Base seed; sequence i uses a seed derived from (seed, i).",
    "sequences" => "Number of sequences to write.",
    "prefix" => "Sequence directory names are <prefix>_NN.",
    "tokens.enabled" => "Also write synthetic geometry tokens (GMT1) into each sequence directory.",
    "tokens.patch" => "Patch size of the written tokens.",
    "tokens.channels" => "Channel width C; geometry tokens carry 2C channels.",
    "tokens.cam_dim" => "Camera token width.",
    "tokens.noise" => "Standard deviation of Gaussian noise added to every token channel.",
    "tokens.depth_cue_weight" => "Scale of the object-presence cue in the low-level tokens.",
};

const TRAIN_DOCS: &[KeyDoc] = docs! {
    "model.image_size" => "Square input resolution; frames are center-cropped and resized to it.",
    "model.patch" => "Patch size P; the token grid is image_size / P on each side.",
    "model.channels" => "Channel width C; fused tokens and the decoder use 2C.",
    "model.flow_dim" => "Flow token width (even).",
    "model.cam_dim" => "Camera token width.",
    "model.decoder.layers" => "Self-attention layers in the motion decoder.",
    "model.decoder.heads" => "Attention heads (must divide 2C).",
    "model.decoder.ffn_mult" => "Feed-forward hidden width as a multiple of 2C.",
    "model.decoder.positional" => "Add spatial sinusoidal and learned temporal encodings.",
    "model.decoder.max_frames" => "Rows of the temporal encoding table (maximum clip length).",
    "model.toggles.cam" => "Feed camera tokens to the fusion MLP (zeros when off).",
    "model.toggles.flow" => "Feed flow tokens to the fusion MLP (zeros when off).",
    "model.toggles.shallow" => "Feed low-level geometry tokens to the fusion MLP (zeros when off).",
    "loss.lambda_focal" => "Weight of the focal term.",
    "loss.lambda_dice" => "Weight of the dice term.",
    "loss.alpha" => "Focal loss class balance for the moving class.",
    "loss.gamma" => "Focal loss focusing exponent.",
    "loss.dice_eps" => "Smoothing constant of the dice loss.",
    "provider.kind" => "Geometry token source: synthetic (from scene ground truth) or file.",
    "provider.noise" => "Synthetic provider: Gaussian noise standard deviation.",
    "provider.depth_cue_weight" => "Synthetic provider: scale of the object-presence cue.",
    "provider.seed" => "Synthetic provider: noise seed.",
    "provider.dir" => "File provider: directory holding <seq>/{geo_low,geo_high,cam}.gmt1.",
    "learning_rate" => "Adam step size.",
    "epochs" => "Passes over the training sequences (one sequence per step).",
    "frames_per_batch" => "Frames sampled per sequence per step.",
    "seed" => "Seed for initialisation and data order.",
    "train_dir" => "Training dataset directory (required).",
    "val_dir" => "Held-out dataset directory for periodic evaluation.",
    "init.mode" => "Parameter initialisation: random or checkpoint.",
    "init.path" => "Checkpoint directory to copy parameters from.",
    "init.prefixes" => "Parameter-name prefixes copied from the checkpoint.",
    "deterministic" => "Omit wall-clock timings from artifacts so reruns are byte-identical.",
    "grad_clip" => "Global gradient-norm limit; null disables clipping.",
    "eval_every" => "Held-out evaluation period in steps; 0 evaluates after each epoch only.",
    "max_steps" => "Hard cap on optimizer steps; null for none.",
    "stop_at_j" => "Stop once held-out J_M reaches this value; null for never.",
    "checkpoint_dir" => "Where per-epoch checkpoints go; defaults to <out>/checkpoints.",
    "threshold" => "Probability threshold for binarizing predictions during evaluation.",
};

const PROVIDER_OPTION_DOCS: &[KeyDoc] = docs! {
    "provider" => "Geometry token source; null uses the one recorded in the model checkpoint.",
    "provider.kind" => "synthetic or file.",
    "provider.noise" => "Synthetic provider: Gaussian noise standard deviation.",
    "provider.depth_cue_weight" => "Synthetic provider: scale of the object-presence cue.",
    "provider.seed" => "Synthetic provider: noise seed.",
    "provider.dir" => "File provider: directory holding <seq>/{geo_low,geo_high,cam}.gmt1.",
};

const EVAL_DOCS: &[KeyDoc] = docs! {
    "data_dir" => "Dataset with ground-truth masks (<seq>/masks/NNNNN.png).",
    "pred_dir" => "Predicted probability PNGs as <seq>/NNNNN.png; used when model is null.",
    "model" => "Checkpoint directory; when set, predictions are computed instead of read.",
    "threshold" => "Probability threshold for binarizing predictions.",
    "tolerance" => "Boundary match radius in pixels; null uses ceil(0.0075 * diagonal).",
};

const INFER_DOCS: &[KeyDoc] = docs! {
    "data_dir" => "Dataset to segment.",
    "model" => "Checkpoint directory (required).",
    "refine" => "Post-processing: default (upsample and binarize), identity or command.",
    "refine_cmd" => "Program for refine = command, called as <cmd> FRAMES_DIR COARSE_DIR OUT_DIR.",
    "threshold" => "Binarization threshold of the default refinement.",
};

const BENCH_DOCS: &[KeyDoc] = docs! {
    "model" => "Checkpoint directory; null benchmarks a freshly initialised default model.",
    "seed" => "Seed of the benchmark scene and of the fresh model.",
    "frames" => "Frames in the benchmark clip.",
    "repetitions" => "Timed repetitions; the median is reported.",
};

fn provider_variants() -> Vec<serde_json::Value> {
    vec![
        json!({ "provider": { "kind": "synthetic", "noise": 0.25, "depth_cue_weight": 1.0, "seed": 0 } }),
        json!({ "provider": { "kind": "file", "dir": "DIR" } }),
    ]
}

/// Schemas of the configurable subcommands.
pub fn all() -> Vec<(&'static str, Schema)> {
    vec![
        ("gen", Schema::new::<GenConfig>(vec![], &[GEN_DOCS, SCENE_DOCS])),
        (
            "train",
            Schema::new::<TrainConfig>(
                vec![
                    json!({ "provider": { "kind": "file", "dir": "DIR" } }),
                    json!({ "init": { "mode": "checkpoint", "path": "DIR", "prefixes": ["decoder."] } }),
                ],
                &[TRAIN_DOCS],
            ),
        ),
        ("eval", Schema::new::<EvalConfig>(provider_variants(), &[EVAL_DOCS, PROVIDER_OPTION_DOCS])),
        ("infer", Schema::new::<InferConfig>(provider_variants(), &[INFER_DOCS, PROVIDER_OPTION_DOCS])),
        ("bench", Schema::new::<BenchConfig>(vec![], &[BENCH_DOCS])),
    ]
}
