//! End-to-end network: flow encoder, fusion MLP and motion decoder sharing
//! one parameter store.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_checkpoint, save_checkpoint, Checkpoint, FlowField};
use crate::decoder::{self, DecoderConfig, MotionMask};
use crate::diffcore::{Bound, Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::flowenc::{self, flow_tensor, last_frame_flow};
use crate::fusion::{self, FusionToggles};
use crate::providers::{GeometryBundle, TokenDims};
use crate::sequence::FrameSequence;

pub const PARAM_PREFIX: &str = "param/";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input resolution in pixels.
    pub image_size: usize,
    pub patch: usize,
    /// Channel width `C`; geometry tokens and the decoder use `2C`.
    pub channels: usize,
    pub flow_dim: usize,
    pub cam_dim: usize,
    pub decoder: DecoderConfig,
    pub toggles: FusionToggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            channels: 8,
            flow_dim: 4,
            cam_dim: 8,
            decoder: DecoderConfig::default(),
            toggles: FusionToggles::ALL,
        }
    }
}

impl ModelConfig {
    pub fn token_dims(&self) -> Result<TokenDims> {
        TokenDims::for_image(self.image_size, self.image_size, self.patch, self.channels, self.cam_dim)
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch.max(1);
        (g, g)
    }

    pub fn width(&self) -> usize {
        2 * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        self.token_dims()?;
        if self.flow_dim < 2 || !self.flow_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("flow_dim must be even and >= 2, got {}", self.flow_dim)));
        }
        if self.cam_dim == 0 {
            return Err(Error::Config("cam_dim must be positive".into()));
        }
        self.decoder.validate(self.width())
    }
}

/// Tokens and per-frame flows (one per frame) of one clip.
#[derive(Debug, Clone)]
pub struct Clip {
    pub bundle: GeometryBundle,
    pub flows: Vec<FlowField>,
}

impl Clip {
    /// All frames of a sequence, extending the pairwise flows to every frame.
    pub fn whole(seq: &FrameSequence, bundle: GeometryBundle) -> Result<Self> {
        let flows = if seq.flows.len() == seq.len() { seq.flows.clone() } else { last_frame_flow(&seq.flows)? };
        Ok(Self { bundle, flows })
    }

    /// Frames `indices` of a sequence whose `flows` hold one entry per frame.
    pub fn select(bundle: &GeometryBundle, flows: &[FlowField], indices: &[usize]) -> Self {
        Self {
            bundle: bundle.select(indices),
            flows: indices.iter().map(|&i| flows[i].clone()).collect(),
        }
    }

    pub fn frames(&self) -> usize {
        self.flows.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

fn stack(tensors: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = tensors[0].shape();
    let mut shape = first.to_vec();
    shape[0] = tensors.iter().map(|t| t.shape()[0]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for t in tensors {
        if t.shape()[1..] != first[1..] {
            return Err(Error::shape("stacked tokens", first, t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

/// Builds `[frames, H, W]` motion probabilities for consecutive clips.
pub fn forward_graph<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, clips: &[Clip]) -> Result<Var> {
    if clips.is_empty() {
        return Err(Error::Data("no clips to process".into()));
    }
    let dims = cfg.token_dims()?;
    let grid = (dims.grid_h, dims.grid_w);
    for c in clips {
        if c.bundle.dims != dims {
            return Err(Error::shape("geometry token grid", dims, c.bundle.dims));
        }
        if c.bundle.frames() != c.frames() {
            return Err(Error::shape("clip flows", c.bundle.frames(), c.frames()));
        }
    }
    let seq_lens: Vec<usize> = clips.iter().map(Clip::frames).collect();
    let all_flows: Vec<FlowField> = clips.iter().flat_map(|c| c.flows.iter().cloned()).collect();
    let size = dims.image_size();
    let flow_in = g.constant(flow_tensor(&all_flows, size.0, size.1)?);
    let flow_tok = flowenc::encode_flow_graph(g, flow_in, p, grid)?;

    let gather = |f: fn(&GeometryBundle) -> &Tensor<f32>| -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<f32>> = clips.iter().map(|c| f(&c.bundle)).collect();
        Ok(stack(&parts)?.cast())
    };
    let low = g.constant(gather(|b| &b.geo_low)?);
    let high = g.constant(gather(|b| &b.geo_high)?);
    let cam = g.constant(gather(|b| &b.cam)?);
    let fused = fusion::aggregate_graph(g, low, high, flow_tok, cam, p, cfg.toggles)?;
    let logits = decoder::decode_graph(g, fused.tokens, p, &cfg.decoder, grid, &seq_lens)?;
    decoder::to_mask_graph(g, logits, grid, cfg.patch)
}

impl Model {
    /// Random initialisation; the same seed gives the same parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        flowenc::init_params(&mut params, config.flow_dim, &mut rng)?;
        fusion::init_params(&mut params, config.channels, config.flow_dim, config.cam_dim, &mut rng)?;
        decoder::init_params(&mut params, &config.decoder, config.width(), config.patch, &mut rng)?;
        Ok(Self { config, params })
    }

    /// Motion probabilities for each clip (attention stays within a clip).
    pub fn predict(&self, clips: &[Clip]) -> Result<Vec<Vec<MotionMask>>> {
        let mut g = Graph::new();
        let p = self.params.bind_constants(&mut g, "");
        let probs = forward_graph(&mut g, &p, &self.config, clips)?;
        let mut masks = MotionMask::split(g.value(probs))?.into_iter();
        Ok(clips.iter().map(|c| masks.by_ref().take(c.frames()).collect()).collect())
    }

    pub fn predict_sequence(&self, seq: &FrameSequence, bundle: GeometryBundle) -> Result<Vec<MotionMask>> {
        let clip = Clip::whole(seq, bundle)?;
        Ok(self.predict(std::slice::from_ref(&clip))?.remove(0))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            tensors: self.params.to_tensor_files(PARAM_PREFIX),
            meta: serde_json::json!({ "model": self.config, "version": crate::VERSION }),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            ckpt.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint has no model config".into()))?,
        )?;
        let params = ParamStore::from_checkpoint(ckpt, PARAM_PREFIX)?;
        let fresh = Model::init(config, 0)?;
        for (name, t) in fresh.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape(name, t.shape(), got.shape()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.to_checkpoint()?, dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(dir)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{provide, ProviderSpec};
    use crate::synthscenes::{generate_sequence, SceneConfig};

    fn toy() -> (Model, FrameSequence, GeometryBundle) {
        let model = Model::init(ModelConfig::default(), 0).unwrap();
        let seq = generate_sequence(&SceneConfig::default(), 0).unwrap().to_frame_sequence("s");
        let bundle = provide(&seq, &ProviderSpec::default(), &model.config.token_dims().unwrap()).unwrap();
        (model, seq, bundle)
    }

    #[test]
    fn predicts_one_mask_per_frame() {
        let (model, seq, bundle) = toy();
        let masks = model.predict_sequence(&seq, bundle).unwrap();
        assert_eq!(masks.len(), 8);
        assert_eq!((masks[0].width(), masks[0].height()), (64, 64));
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::init(ModelConfig::default(), 3).unwrap();
        assert_eq!(a, Model::init(ModelConfig::default(), 3).unwrap());
        assert_ne!(a, Model::init(ModelConfig::default(), 4).unwrap());
    }

    #[test]
    fn clips_are_independent() {
        let (model, seq, bundle) = toy();
        let clip = Clip::whole(&seq, bundle).unwrap();
        let a = Clip::select(&clip.bundle, &clip.flows, &[0, 1, 2]);
        let b = Clip::select(&clip.bundle, &clip.flows, &[5, 6]);
        let joint = model.predict(&[a.clone(), b.clone()]).unwrap();
        let alone = model.predict(&[b]).unwrap();
        for (x, y) in joint[1].iter().zip(&alone[0]) {
            for (p, q) in x.probs().iter().zip(y.probs()) {
                assert!((p - q).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (model, ..) = toy();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        assert_eq!(Model::load(dir.path()).unwrap(), model);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = ModelConfig { patch: 7, ..ModelConfig::default() };
        assert!(matches!(Model::init(cfg, 0), Err(Error::Config(_))));
        let cfg = ModelConfig { flow_dim: 3, ..ModelConfig::default() };
        assert!(Model::init(cfg, 0).is_err());
    }
}
