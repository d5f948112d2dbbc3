//! Motion decoder: positional encodings, pre-norm self-attention blocks over
//! every token of every frame in a sequence, a per-token linear head to
//! `P x P` logits, pixel-shuffle to full resolution and a sigmoid.

use std::path::Path;
use std::process::Command;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{read_probability_png, write_frame, write_probability_png, BinaryMask};
use crate::diffcore::init::{uniform, xavier_uniform};
use crate::diffcore::kernels::resize_taps;
use crate::diffcore::{Bound, Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub const TEMPORAL: &str = "decoder.temporal";
pub const HEAD_W: &str = "decoder.head.weight";
pub const HEAD_B: &str = "decoder.head.bias";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Add spatial sinusoidal and learned temporal encodings to the tokens.
    pub positional: bool,
    /// Rows of the temporal table; sequences may not exceed this length.
    pub max_frames: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            heads: 4,
            ffn_mult: 4,
            positional: true,
            max_frames: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.layers == 0 || self.ffn_mult == 0 || self.max_frames == 0 {
            return Err(Error::Config("decoder layers, ffn_mult and max_frames must be positive".into()));
        }
        if self.heads == 0 || !width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide decoder width {width}", self.heads)));
        }
        Ok(())
    }
}

fn block_name(i: usize, part: &str) -> String {
    format!("decoder.block{i}.{part}")
}

/// Adds decoder parameters for model width `width` and patch `patch`.
pub fn init_params<T: Real>(
    store: &mut ParamStore<T>,
    cfg: &DecoderConfig,
    width: usize,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate(width)?;
    let hidden = width * cfg.ffn_mult;
    store.insert(TEMPORAL, uniform(rng, &[cfg.max_frames, width], 0.02))?;
    for i in 0..cfg.layers {
        for ln in ["ln1", "ln2"] {
            store.insert(block_name(i, &format!("{ln}.gamma")), Tensor::full(&[width], T::one()))?;
            store.insert(block_name(i, &format!("{ln}.beta")), Tensor::zeros(&[width]))?;
        }
        for proj in ["q", "k", "v", "o"] {
            store.insert(block_name(i, &format!("attn.{proj}.weight")), xavier_uniform(rng, &[width, width], width, width))?;
            store.insert(block_name(i, &format!("attn.{proj}.bias")), Tensor::zeros(&[width]))?;
        }
        store.insert(block_name(i, "ffn.w1"), xavier_uniform(rng, &[width, hidden], width, hidden))?;
        store.insert(block_name(i, "ffn.b1"), Tensor::zeros(&[hidden]))?;
        store.insert(block_name(i, "ffn.w2"), xavier_uniform(rng, &[hidden, width], hidden, width))?;
        store.insert(block_name(i, "ffn.b2"), Tensor::zeros(&[width]))?;
    }
    store.insert("decoder.ln_f.gamma", Tensor::full(&[width], T::one()))?;
    store.insert("decoder.ln_f.beta", Tensor::zeros(&[width]))?;
    let pp = patch * patch;
    store.insert(HEAD_W, xavier_uniform(rng, &[width, pp], width, pp))?;
    store.insert(HEAD_B, Tensor::zeros(&[pp]))?;
    Ok(())
}

/// 2-D sinusoidal table `[h*w, width]`: the first half of the channels
/// encodes the row, the second half the column, as sin/cos pairs.
pub fn spatial_encoding<T: Real>(grid: (usize, usize), width: usize) -> Tensor<T> {
    let half = width / 2;
    let mut data = vec![T::zero(); grid.0 * grid.1 * width];
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let row = &mut data[(r * grid.1 + c) * width..(r * grid.1 + c + 1) * width];
            for (offset, pos) in [(0, r), (half, c)] {
                let pairs = half / 2;
                for i in 0..pairs {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    let a = pos as f64 * freq;
                    row[offset + 2 * i] = T::of(a.sin());
                    row[offset + 2 * i + 1] = T::of(a.cos());
                }
            }
        }
    }
    Tensor::new(vec![grid.0 * grid.1, width], data).expect("encoding shape")
}

/// `x: [N, hw, D]` holding consecutive sequences of `seq_lens` frames.
/// Returns per-token logits `[N, hw, P*P]`. Attention spans all frames of a
/// sequence and never crosses into another.
pub fn decode_graph<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &Bound,
    cfg: &DecoderConfig,
    grid: (usize, usize),
    seq_lens: &[usize],
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let hw = grid.0 * grid.1;
    if xs.len() != 3 || xs[1] != hw {
        return Err(Error::shape("decoder input", format!("[N, {hw}, D]"), &xs));
    }
    let (n, d) = (xs[0], xs[2]);
    if seq_lens.iter().sum::<usize>() != n || seq_lens.contains(&0) {
        return Err(Error::shape("decoder sequence lengths", n, seq_lens));
    }
    let model_width = g.shape(p.get(HEAD_W)?)[0];
    if d != model_width {
        return Err(Error::shape("decoder input width", model_width, d));
    }
    cfg.validate(d)?;

    let mut h = x;
    if cfg.positional {
        let spatial = g.constant(spatial_encoding(grid, d));
        h = g.add_broadcast(h, spatial)?;
        let mut rows = Vec::with_capacity(n);
        for &len in seq_lens {
            if len > cfg.max_frames {
                return Err(Error::Config(format!("sequence of {len} frames exceeds max_frames {}", cfg.max_frames)));
            }
            rows.extend(0..len);
        }
        let t = g.gather_rows(p.get(TEMPORAL)?, &rows)?;
        let t = g.reshape(t, &[n, 1, d])?;
        h = g.add_broadcast(h, t)?;
    }
    let mut h = g.reshape(h, &[n * hw, d])?;
    let mut segments = Vec::with_capacity(seq_lens.len());
    let mut start = 0;
    for &len in seq_lens {
        segments.push((start, len * hw));
        start += len * hw;
    }
    for i in 0..cfg.layers {
        let get = |part: &str| p.get(&block_name(i, part));
        let a = g.layer_norm(h, get("ln1.gamma")?, get("ln1.beta")?, LN_EPS)?;
        let q = g.linear(a, get("attn.q.weight")?, Some(get("attn.q.bias")?))?;
        let k = g.linear(a, get("attn.k.weight")?, Some(get("attn.k.bias")?))?;
        let v = g.linear(a, get("attn.v.weight")?, Some(get("attn.v.bias")?))?;
        let att = g.attention(q, k, v, cfg.heads, &segments)?;
        let o = g.linear(att, get("attn.o.weight")?, Some(get("attn.o.bias")?))?;
        h = g.add(h, o)?;
        let b = g.layer_norm(h, get("ln2.gamma")?, get("ln2.beta")?, LN_EPS)?;
        let f = g.linear(b, get("ffn.w1")?, Some(get("ffn.b1")?))?;
        let f = g.relu(f);
        let f = g.linear(f, get("ffn.w2")?, Some(get("ffn.b2")?))?;
        h = g.add(h, f)?;
    }
    let h = g.layer_norm(h, p.get("decoder.ln_f.gamma")?, p.get("decoder.ln_f.beta")?, LN_EPS)?;
    let logits = g.linear(h, p.get(HEAD_W)?, Some(p.get(HEAD_B)?))?;
    let pp = g.shape(logits)[1];
    g.reshape(logits, &[n, hw, pp])
}

/// Pixel-shuffles `[N, hw, P*P]` logits to `[N, H, W]` probabilities.
pub fn to_mask_graph<T: Real>(g: &mut Graph<T>, logits: Var, grid: (usize, usize), patch: usize) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[1] != grid.0 * grid.1 || s[2] != patch * patch {
        return Err(Error::shape(
            "mask logits",
            format!("[N, {}, {}]", grid.0 * grid.1, patch * patch),
            &s,
        ));
    }
    let n = s[0];
    let blocks = g.reshape(logits, &[n, grid.0, grid.1, patch, patch])?;
    let pixels = g.permute(blocks, &[0, 1, 3, 2, 4])?;
    let pixels = g.reshape(pixels, &[n, grid.0 * patch, grid.1 * patch])?;
    Ok(g.sigmoid(pixels))
}

pub fn decode(
    fused: &Tensor<f32>,
    params: &ParamStore<f32>,
    cfg: &DecoderConfig,
    grid: (usize, usize),
    seq_lens: &[usize],
) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let x = g.constant(fused.clone());
    let p = params.bind_constants(&mut g, "decoder.");
    let out = decode_graph(&mut g, x, &p, cfg, grid, seq_lens)?;
    Ok(g.value(out).clone())
}

pub fn to_mask(logits: &Tensor<f32>, grid: (usize, usize), patch: usize) -> Result<Vec<MotionMask>> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let probs = to_mask_graph(&mut g, l, grid, patch)?;
    MotionMask::split(g.value(probs))
}

/// Per-pixel motion probability for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMask {
    width: usize,
    height: usize,
    probs: Vec<f32>,
}

impl MotionMask {
    pub fn new(width: usize, height: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != width * height {
            return Err(Error::shape("motion mask", width * height, probs.len()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data("motion mask values must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, probs })
    }

    /// Splits `[N, H, W]` probabilities into one mask per frame.
    pub fn split(probs: &Tensor<f32>) -> Result<Vec<MotionMask>> {
        let s = probs.shape();
        if s.len() != 3 {
            return Err(Error::shape("probability stack", "[N, H, W]", s));
        }
        let per = s[1] * s[2];
        probs.data().chunks(per.max(1)).take(s[0]).map(|c| MotionMask::new(s[2], s[1], c.to_vec())).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    /// Strictly-greater-than threshold.
    pub fn binarize(&self, threshold: f32) -> BinaryMask {
        BinaryMask::from_probabilities(self.width, self.height, &self.probs, threshold).expect("mask size")
    }

    pub fn from_binary(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            probs: mask.values().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Bilinear resize (half-pixel centres).
    pub fn resize(&self, width: usize, height: usize) -> MotionMask {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let th = resize_taps(self.height, height);
        let tw = resize_taps(self.width, width);
        let mut probs = Vec::with_capacity(width * height);
        for ty in &th {
            for tx in &tw {
                let at = |y: usize, x: usize| self.probs[y * self.width + x] as f64;
                let v = ty.w0 * (tx.w0 * at(ty.i0, tx.i0) + tx.w1 * at(ty.i0, tx.i1))
                    + ty.w1 * (tx.w0 * at(ty.i1, tx.i0) + tx.w1 * at(ty.i1, tx.i1));
                probs.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        MotionMask { width, height, probs }
    }
}

/// Post-processing applied to coarse masks, given the frames they belong to.
pub trait RefinementHook {
    fn refine(&self, frames: &[RgbImage], masks: &[MotionMask]) -> Result<Vec<MotionMask>>;
}

/// Bilinear upsampling to frame resolution, then a threshold (0.5 by default).
#[derive(Debug, Clone, Copy)]
pub struct DefaultRefiner {
    pub threshold: f32,
}

impl Default for DefaultRefiner {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl RefinementHook for DefaultRefiner {
    fn refine(&self, frames: &[RgbImage], masks: &[MotionMask]) -> Result<Vec<MotionMask>> {
        Ok(masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let (w, h) = frames.get(i).map_or((m.width, m.height), |f| (f.width() as usize, f.height() as usize));
                MotionMask::from_binary(&m.resize(w, h).binarize(self.threshold))
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl RefinementHook for IdentityRefiner {
    fn refine(&self, _frames: &[RgbImage], masks: &[MotionMask]) -> Result<Vec<MotionMask>> {
        Ok(masks.to_vec())
    }
}

/// Runs `sh -c "<command> FRAMES_DIR MASKS_DIR OUT_DIR"`. Inputs are written
/// as `00000.png`, ...; the command must write one grayscale PNG per frame
/// under the same names into `OUT_DIR` (0 = static, 255 = moving).
#[derive(Debug, Clone)]
pub struct CommandRefiner {
    pub command: String,
}

impl RefinementHook for CommandRefiner {
    fn refine(&self, frames: &[RgbImage], masks: &[MotionMask]) -> Result<Vec<MotionMask>> {
        let work = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let dirs = ["frames", "coarse", "refined"].map(|d| work.path().join(d));
        for d in &dirs {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (i, f) in frames.iter().enumerate() {
            write_frame(f, dirs[0].join(format!("{i:05}.png")))?;
        }
        for (i, m) in masks.iter().enumerate() {
            write_probability_png(m.width, m.height, &m.probs, dirs[1].join(format!("{i:05}.png")))?;
        }
        let status = Command::new("sh")
            .arg("-c")
            .arg(format!("{} \"$@\"", self.command))
            .arg("refine")
            .args(&dirs)
            .status()
            .map_err(|e| Error::io(Path::new("sh"), e))?;
        if !status.success() {
            return Err(Error::Data(format!("refinement command exited with {status}")));
        }
        (0..masks.len())
            .map(|i| {
                let (w, h, p) = read_probability_png(dirs[2].join(format!("{i:05}.png")))?;
                MotionMask::new(w, h, p)
            })
            .collect()
    }
}

/// Applies `hook` and checks that it preserved count and, per frame, the
/// frame resolution (or the coarse resolution when no frame is given).
pub fn refine(frames: &[RgbImage], masks: &[MotionMask], hook: &dyn RefinementHook) -> Result<Vec<MotionMask>> {
    let out = hook.refine(frames, masks)?;
    if out.len() != masks.len() {
        return Err(Error::shape("refined masks", masks.len(), out.len()));
    }
    for (i, (r, m)) in out.iter().zip(masks).enumerate() {
        let want = frames.get(i).map_or((m.width, m.height), |f| (f.width() as usize, f.height() as usize));
        if (r.width, r.height) != want && (r.width, r.height) != (m.width, m.height) {
            return Err(Error::shape(format!("refined mask {i}"), want, (r.width, r.height)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check_coords, spread_coords};
    use crate::losses::{total_loss_graph, LossConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(width: usize, patch: usize, cfg: &DecoderConfig, seed: u64) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        init_params(&mut s, cfg, width, patch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    fn random(seed: u64, shape: &[usize]) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn toy_logit_shape() {
        let cfg = DecoderConfig::default();
        let p = params(16, 8, &cfg, 0);
        let out = decode(&random(1, &[2, 64, 16]), &p, &cfg, (8, 8), &[2]).unwrap();
        assert_eq!(out.shape(), &[2, 64, 64]);
        let masks = to_mask(&out, (8, 8), 8).unwrap();
        assert_eq!(masks.len(), 2);
        assert_eq!((masks[0].width(), masks[0].height()), (64, 64));
        assert!(masks.iter().all(|m| m.probs().iter().all(|p| (0.0..=1.0).contains(p))));
    }

    #[test]
    fn width_mismatch_is_error() {
        let cfg = DecoderConfig::default();
        let p = params(16, 8, &cfg, 0);
        assert!(decode(&random(1, &[2, 64, 8]), &p, &cfg, (8, 8), &[2]).is_err());
        assert!(decode(&random(1, &[2, 64, 16]), &p, &cfg, (8, 8), &[3]).is_err());
        let bad_heads = DecoderConfig { heads: 3, ..cfg };
        assert!(matches!(decode(&random(1, &[2, 64, 16]), &p, &bad_heads, (8, 8), &[2]), Err(Error::Config(_))));
    }

    #[test]
    fn sequences_in_one_batch_do_not_interact() {
        let cfg = DecoderConfig::default();
        let p = params(16, 4, &cfg, 2);
        let a = random(3, &[3, 16, 16]);
        let b = random(4, &[2, 16, 16]);
        let mut joint = a.data().to_vec();
        joint.extend_from_slice(b.data());
        let joint = Tensor::new(vec![5, 16, 16], joint).unwrap();
        let both = decode(&joint, &p, &cfg, (4, 4), &[3, 2]).unwrap();
        let la = decode(&a, &p, &cfg, (4, 4), &[3]).unwrap();
        let lb = decode(&b, &p, &cfg, (4, 4), &[2]).unwrap();
        let split = la.numel();
        let close = |x: &[f32], y: &[f32]| x.iter().zip(y).all(|(u, v)| (u - v).abs() <= 1e-5 * (1.0 + u.abs()));
        assert!(close(&both.data()[..split], la.data()));
        assert!(close(&both.data()[split..], lb.data()));
    }

    #[test]
    fn zero_head_gives_bias_logits() {
        let cfg = DecoderConfig { layers: 2, ..DecoderConfig::default() };
        let mut p = params(8, 2, &cfg, 5);
        p.get_mut(HEAD_W).unwrap().data_mut().fill(0.0);
        *p.get_mut(HEAD_B).unwrap() = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let out = decode(&random(6, &[2, 9, 8]), &p, &cfg, (3, 3), &[2]).unwrap();
        for tok in out.data().chunks(4) {
            assert_eq!(tok, &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn sigmoid_of_zero_logits() {
        let masks = to_mask(&Tensor::zeros(&[1, 4, 4]), (2, 2), 2).unwrap();
        assert!(masks[0].probs().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn large_logit_saturates_its_block() {
        let mut logits = Tensor::full(&[1, 64, 64], -30.0f32);
        for v in &mut logits.data_mut()[9 * 64..10 * 64] {
            *v = 30.0;
        }
        let m = &to_mask(&logits, (8, 8), 8).unwrap()[0];
        for y in 0..64 {
            for x in 0..64 {
                let inside = (8..16).contains(&y) && (8..16).contains(&x);
                let p = m.probs()[y * 64 + x];
                assert!(if inside { p > 1.0 - 1e-6 } else { p < 1e-12 }, "({x},{y}) {p}");
            }
        }
    }

    #[test]
    fn pixel_shuffle_layout() {
        let (gh, gw, pp) = (3, 4, 2);
        for r in 0..gh {
            for c in 0..gw {
                let mut logits = Tensor::full(&[1, gh * gw, pp * pp], -50.0f32);
                let at = (r * gw + c) * pp * pp;
                logits.data_mut()[at..at + pp * pp].fill(50.0);
                let m = &to_mask(&logits, (gh, gw), pp).unwrap()[0];
                for y in 0..gh * pp {
                    for x in 0..gw * pp {
                        let lit = m.probs()[y * gw * pp + x] > 0.5;
                        assert_eq!(lit, y / pp == r && x / pp == c);
                    }
                }
            }
        }
    }

    #[test]
    fn default_refiner_thresholds() {
        let binary = BinaryMask::new(3, 2, vec![0, 1, 1, 0, 0, 1]).unwrap();
        let m = MotionMask::from_binary(&binary);
        assert_eq!(refine(&[], std::slice::from_ref(&m), &DefaultRefiner::default()).unwrap()[0], m);
        let uniform = MotionMask::new(4, 4, vec![0.6; 16]).unwrap();
        let r = refine(&[], &[uniform], &DefaultRefiner::default()).unwrap();
        assert!(r[0].probs().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn default_refiner_upsamples_to_frame() {
        let coarse = MotionMask::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let frame = RgbImage::new(8, 8);
        let r = refine(&[frame], &[coarse], &DefaultRefiner::default()).unwrap();
        assert_eq!((r[0].width(), r[0].height()), (8, 8));
        assert_eq!(r[0].probs()[0], 1.0);
        assert_eq!(r[0].probs()[63], 0.0);
    }

    #[test]
    fn identity_refiner_is_bitwise() {
        let m = MotionMask::new(3, 1, vec![0.1, 0.7, 0.3]).unwrap();
        assert_eq!(refine(&[], std::slice::from_ref(&m), &IdentityRefiner).unwrap(), vec![m]);
    }

    #[test]
    fn command_refiner_roundtrip_and_shape_check() {
        let m = MotionMask::new(4, 2, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let frames = vec![RgbImage::new(4, 2)];
        let copy = CommandRefiner { command: "f() { cp \"$2\"/*.png \"$3\"/; }; f".into() };
        assert_eq!(refine(&frames, std::slice::from_ref(&m), &copy).unwrap(), vec![m.clone()]);
        let failing = CommandRefiner { command: "false".into() };
        assert!(refine(&frames, std::slice::from_ref(&m), &failing).is_err());

        struct Shrink;
        impl RefinementHook for Shrink {
            fn refine(&self, _: &[RgbImage], masks: &[MotionMask]) -> Result<Vec<MotionMask>> {
                Ok(masks.iter().map(|_| MotionMask::new(1, 1, vec![0.0]).unwrap()).collect())
            }
        }
        assert!(matches!(refine(&frames, &[m], &Shrink), Err(Error::Shape { .. })));
    }

    #[test]
    fn motion_mask_rejects_out_of_range() {
        assert!(MotionMask::new(2, 1, vec![0.5, 1.5]).is_err());
        assert!(MotionMask::new(2, 1, vec![0.5, f32::NAN]).is_err());
        assert!(MotionMask::new(2, 2, vec![0.5]).is_err());
    }

    #[test]
    fn end_to_end_decoder_gradients() {
        let cfg = DecoderConfig { layers: 2, heads: 2, ..DecoderConfig::default() };
        let (width, patch, grid) = (4, 2, (2, 2));
        let p64 = params(width, patch, &cfg, 7).cast::<f64>();
        let x = random(8, &[2, 4, width]).cast::<f64>();
        let gts = vec![
            BinaryMask::new(4, 4, vec![0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 0, 0, 0]).unwrap(),
            BinaryMask::new(4, 4, vec![0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap(),
        ];
        let loss_cfg = LossConfig::default();
        let names: Vec<String> = p64.names().cloned().collect();
        for name in names.iter().filter(|n| !n.ends_with("beta") && !n.ends_with("gamma")).take(12) {
            let point = p64.get(name).unwrap().clone();
            let f = |g: &mut Graph<f64>, v: Var| {
                let mut b = p64.bind_constants(g, "decoder.");
                b.set(name, v);
                let xv = g.constant(x.clone());
                let logits = decode_graph(g, xv, &b, &cfg, grid, &[2])?;
                let probs = to_mask_graph(g, logits, grid, patch)?;
                total_loss_graph(g, probs, &gts, &loss_cfg)
            };
            let err = grad_check_coords(f, &point, 1e-6, &spread_coords(point.numel(), 16)).unwrap();
            assert!(err < 1e-5, "{name}: {err}");
        }
    }
}
