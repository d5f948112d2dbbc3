//! Geometry-token providers. A provider yields, per frame, patch tokens for
//! low-level geometry, high-level geometry and camera pose; the rest of the
//! pipeline never looks behind this interface.
//!
//! The synthetic provider derives tokens from ground-truth scene state. The
//! file provider reads GMT1 tensors from `<dir>/<seq>/{geo_low,geo_high,cam}.gmt1`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{read_gmt, write_gmt, TensorFile};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::sequence::FrameSequence;
use crate::synthscenes::mix;

pub const GEO_LOW_FILE: &str = "geo_low.gmt1";
pub const GEO_HIGH_FILE: &str = "geo_high.gmt1";
pub const CAM_FILE: &str = "cam.gmt1";

/// Index of the motion-coherence cue in `geo_high`.
pub const COHERENCE_CHANNEL: usize = 0;
/// Side of the coarse sub-cell grid of coherence cues in `geo_high`.
pub const HIGH_GRID: usize = 2;
/// Index of the object-presence cue in `geo_low`.
pub const PRESENCE_CHANNEL: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProviderSpec {
    Synthetic {
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_depth_weight")]
        depth_cue_weight: f64,
        #[serde(default)]
        seed: u64,
    },
    File {
        dir: PathBuf,
    },
}

fn default_noise() -> f64 {
    0.25
}

fn default_depth_weight() -> f64 {
    1.0
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec::Synthetic {
            noise: default_noise(),
            depth_cue_weight: default_depth_weight(),
            seed: 0,
        }
    }
}

/// Token geometry shared by every modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenDims {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    /// Channel width `C`; geometry tokens carry `2C` channels.
    pub channels: usize,
    pub cam_dim: usize,
}

impl TokenDims {
    /// Derives the patch grid for an image, requiring exact tiling.
    pub fn for_image(height: usize, width: usize, patch: usize, channels: usize, cam_dim: usize) -> Result<Self> {
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "patch size {patch} does not tile a {height}x{width} image"
            )));
        }
        if channels == 0 {
            return Err(Error::Config("channel width C must be positive".into()));
        }
        Ok(Self {
            grid_h: height / patch,
            grid_w: width / patch,
            patch,
            channels,
            cam_dim,
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn geo_dim(&self) -> usize {
        2 * self.channels
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid_h * self.patch, self.grid_w * self.patch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryBundle {
    pub geo_low: Tensor<f32>,
    pub geo_high: Tensor<f32>,
    pub cam: Tensor<f32>,
    pub dims: TokenDims,
}

impl GeometryBundle {
    pub fn frames(&self) -> usize {
        self.geo_low.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.geo_low.shape().first().copied().unwrap_or(0);
        let hw = self.dims.tokens();
        let expect = [
            ("geo_low", &self.geo_low, self.dims.geo_dim()),
            ("geo_high", &self.geo_high, self.dims.geo_dim()),
            ("cam", &self.cam, self.dims.cam_dim),
        ];
        for (name, t, c) in expect {
            if t.shape() != [n, hw, c] {
                return Err(Error::shape(name, [n, hw, c], t.shape()));
            }
            if !t.is_finite() {
                return Err(Error::Data(format!("non-finite values in {name}")));
            }
        }
        Ok(())
    }

    /// Tokens of the selected frames, in the given order.
    pub fn select(&self, indices: &[usize]) -> GeometryBundle {
        let pick = |t: &Tensor<f32>| {
            let s = t.shape();
            let per = s[1] * s[2];
            let mut data = Vec::with_capacity(indices.len() * per);
            for &i in indices {
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
            Tensor::new(vec![indices.len(), s[1], s[2]], data).expect("selection shape")
        };
        GeometryBundle {
            geo_low: pick(&self.geo_low),
            geo_high: pick(&self.geo_high),
            cam: pick(&self.cam),
            dims: self.dims,
        }
    }
}

pub fn provide(seq: &FrameSequence, spec: &ProviderSpec, dims: &TokenDims) -> Result<GeometryBundle> {
    if (seq.height(), seq.width()) != dims.image_size() {
        return Err(Error::Config(format!(
            "grid {}x{} at patch {} does not match {}x{} frames",
            dims.grid_h,
            dims.grid_w,
            dims.patch,
            seq.height(),
            seq.width()
        )));
    }
    match spec {
        ProviderSpec::Synthetic {
            noise,
            depth_cue_weight,
            seed,
        } => synthetic_tokens(seq, *noise, *depth_cue_weight, *seed, dims),
        ProviderSpec::File { dir } => read_bundle(dir.join(&seq.name), seq.len(), dims),
    }
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn cell_bounds(patch: usize, cells: usize) -> Vec<usize> {
    (0..=cells).map(|i| i * patch / cells.max(1)).collect()
}

/// Largest `s` with `s * s <= budget`, capped at the patch size.
fn sub_grid(budget: usize, patch: usize) -> usize {
    let mut s = 0;
    while (s + 1) * (s + 1) <= budget && s < patch {
        s += 1;
    }
    s
}

/// Per-patch cue vectors: whole-patch fraction, then an `s x s` grid of
/// sub-cell fractions of `flag` over the patch at `(py, px)`.
fn fraction_cues(flag: impl Fn(usize, usize) -> bool, py: usize, px: usize, patch: usize, s: usize, out: &mut Vec<f32>) {
    let mut total = 0usize;
    let b = cell_bounds(patch, s);
    let mut cells = vec![0usize; s * s];
    for y in 0..patch {
        for x in 0..patch {
            if flag(py * patch + y, px * patch + x) {
                total += 1;
                if s > 0 {
                    let cy = b.partition_point(|&v| v <= y) - 1;
                    let cx = b.partition_point(|&v| v <= x) - 1;
                    cells[cy * s + cx] += 1;
                }
            }
        }
    }
    out.push(total as f32 / (patch * patch) as f32);
    for cy in 0..s {
        for cx in 0..s {
            let area = (b[cy + 1] - b[cy]) * (b[cx + 1] - b[cx]);
            out.push(cells[cy * s + cx] as f32 / area.max(1) as f32);
        }
    }
}

/// Backbone stand-in built from ground truth.
///
/// `geo_low`: mean RGB, luminance spread, then presence of any object,
/// moving or not (patch and sub-cell fractions, scaled by
/// `depth_cue_weight`). `geo_high`: fraction of patch pixels moving with the
/// camera in its first channel, then the same fraction over a coarse
/// `HIGH_GRID x HIGH_GRID` split of the patch, zeros elsewhere. `cam`: the frame's camera
/// translation at decreasing scales, repeated per patch. Every channel
/// receives `noise * N(0, 1)`.
pub fn synthetic_tokens(
    seq: &FrameSequence,
    noise: f64,
    depth_cue_weight: f64,
    seed: u64,
    dims: &TokenDims,
) -> Result<GeometryBundle> {
    let masks = seq
        .gt_masks
        .as_ref()
        .ok_or_else(|| Error::Data(format!("synthetic provider needs masks for `{}`", seq.name)))?;
    let camera = seq
        .camera
        .as_ref()
        .ok_or_else(|| Error::Data(format!("synthetic provider needs camera motion for `{}`", seq.name)))?;
    let (n, hw, geo, dc, p) = (seq.len(), dims.tokens(), dims.geo_dim(), dims.cam_dim, dims.patch);
    let width = seq.width();
    let low_grid = sub_grid(geo.saturating_sub(PRESENCE_CHANNEL + 1), p);
    let high_grid = sub_grid(geo.saturating_sub(COHERENCE_CHANNEL + 1), p).min(HIGH_GRID);

    let mut low = vec![0f32; n * hw * geo];
    let mut high = vec![0f32; n * hw * geo];
    let mut cam = vec![0f32; n * hw * dc];
    let mut cues = Vec::with_capacity(geo);
    for t in 0..n {
        let frame = &seq.frames[t];
        let mask = &masks[t];
        let surface = seq.surfaces.as_ref().map(|s| &s[t]);
        let present = |y: usize, x: usize| match surface {
            Some(s) => s[y * width + x] != 0,
            None => mask.get(x, y),
        };
        for py in 0..dims.grid_h {
            for px in 0..dims.grid_w {
                let tok = (t * hw + py * dims.grid_w + px) * geo;

                cues.clear();
                let mut sum = [0f64; 3];
                let mut lum = Vec::with_capacity(p * p);
                for y in 0..p {
                    for x in 0..p {
                        let c = frame.get_pixel((px * p + x) as u32, (py * p + y) as u32).0;
                        for k in 0..3 {
                            sum[k] += c[k] as f64;
                        }
                        lum.push((0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0);
                    }
                }
                let area = (p * p) as f64;
                cues.extend(sum.iter().map(|s| (s / area / 255.0) as f32));
                let mean = lum.iter().sum::<f64>() / area;
                cues.push((lum.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / area).sqrt() as f32);
                let start = cues.len();
                fraction_cues(present, py, px, p, low_grid, &mut cues);
                for v in &mut cues[start..] {
                    *v *= depth_cue_weight as f32;
                }
                for (dst, v) in low[tok..tok + geo].iter_mut().zip(&cues) {
                    *dst = *v;
                }

                cues.clear();
                fraction_cues(|y, x| !mask.get(x, y), py, px, p, high_grid, &mut cues);
                for (dst, v) in high[tok + COHERENCE_CHANNEL..tok + geo].iter_mut().zip(&cues) {
                    *dst = *v;
                }

                let ctok = (t * hw + py * dims.grid_w + px) * dc;
                for j in 0..dc {
                    let scale = 0.5 / (1.0 + (j / 2) as f64);
                    cam[ctok + j] = (camera[t][j % 2] * scale) as f32;
                }
            }
        }
    }
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, fnv(&seq.name)]));
        for buf in [&mut low, &mut high, &mut cam] {
            for v in buf.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += (noise * z) as f32;
            }
        }
    }
    let bundle = GeometryBundle {
        geo_low: Tensor::new(vec![n, hw, geo], low)?,
        geo_high: Tensor::new(vec![n, hw, geo], high)?,
        cam: Tensor::new(vec![n, hw, dc], cam)?,
        dims: *dims,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes the three token files into `dir`.
pub fn write_bundle(bundle: &GeometryBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (file, t) in [(GEO_LOW_FILE, &bundle.geo_low), (GEO_HIGH_FILE, &bundle.geo_high), (CAM_FILE, &bundle.cam)] {
        write_gmt(&TensorFile::new(t.shape().to_vec(), t.data().to_vec())?, dir.join(file))?;
    }
    Ok(())
}

/// Reads and validates the three token files of one sequence.
pub fn read_bundle(dir: impl AsRef<Path>, frames: usize, dims: &TokenDims) -> Result<GeometryBundle> {
    let dir = dir.as_ref();
    let load = |file: &str, c: usize| -> Result<Tensor<f32>> {
        let tf = read_gmt(dir.join(file))?;
        let expected = [frames, dims.tokens(), c];
        if tf.shape != expected {
            return Err(Error::shape(format!("{}", dir.join(file).display()), expected, &tf.shape));
        }
        if tf.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value in {}", dir.join(file).display())));
        }
        Tensor::new(tf.shape, tf.data)
    };
    Ok(GeometryBundle {
        geo_low: load(GEO_LOW_FILE, dims.geo_dim())?,
        geo_high: load(GEO_HIGH_FILE, dims.geo_dim())?,
        cam: load(CAM_FILE, dims.cam_dim)?,
        dims: *dims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::BinaryMask;
    use crate::synthscenes::{generate_sequence, SceneConfig};
    use image::RgbImage;

    fn toy_dims() -> TokenDims {
        TokenDims::for_image(64, 64, 8, 8, 8).unwrap()
    }

    fn seq_with_mask(mask: BinaryMask) -> FrameSequence {
        let (w, h) = (mask.width(), mask.height());
        FrameSequence {
            name: "m".into(),
            frames: vec![RgbImage::new(w as u32, h as u32); 2],
            flows: vec![crate::dataio::FlowField::zeros(w, h)],
            gt_masks: Some(vec![mask.clone(), mask]),
            camera: Some(vec![[1.0, -2.0]; 2]),
            surfaces: None,
        }
    }

    #[test]
    fn full_scale_shapes() {
        let d = TokenDims::for_image(518, 518, 14, 1024, 512).unwrap();
        assert_eq!((d.grid_h, d.grid_w, d.tokens(), d.geo_dim()), (37, 37, 1369, 2048));
        let mut mask = BinaryMask::empty(518, 518);
        mask.set(3, 3, true);
        let b = synthetic_tokens(&seq_with_mask(mask), 0.0, 1.0, 0, &d).unwrap();
        assert_eq!(b.geo_low.shape(), &[2, 1369, 2048]);
        assert_eq!(b.cam.shape(), &[2, 1369, 512]);
    }

    #[test]
    fn toy_shapes() {
        let syn = generate_sequence(&SceneConfig::default(), 0).unwrap();
        let b = provide(&syn.to_frame_sequence("a"), &ProviderSpec::default(), &toy_dims()).unwrap();
        assert_eq!(b.geo_low.shape(), &[8, 64, 16]);
        assert_eq!(b.geo_high.shape(), &[8, 64, 16]);
        assert_eq!(b.cam.shape(), &[8, 64, 8]);
    }

    #[test]
    fn grid_must_tile_image() {
        assert!(TokenDims::for_image(64, 60, 8, 8, 8).is_err());
    }

    #[test]
    fn coherence_cue_counts_pixels() {
        let d = toy_dims();
        let mut mask = BinaryMask::empty(64, 64);
        // Patch (0,0) fully moving; patch (0,1) left half moving.
        for y in 0..8 {
            for x in 0..12 {
                mask.set(x, y, true);
            }
        }
        let b = synthetic_tokens(&seq_with_mask(mask), 0.0, 1.0, 0, &d).unwrap();
        let geo = d.geo_dim();
        let at = |tok: usize| b.geo_high.data()[tok * geo + COHERENCE_CHANNEL];
        assert_eq!(at(0), 0.0);
        assert_eq!(at(1), 0.5);
        assert_eq!(at(2), 1.0);
        // Coarse sub-cells of patch (0,1): left column moving, right still.
        let cells = &b.geo_high.data()[geo + COHERENCE_CHANNEL + 1..geo + COHERENCE_CHANNEL + 1 + HIGH_GRID * HIGH_GRID];
        assert_eq!(cells, &[0.0, 1.0, 0.0, 1.0]);
        assert!(b.geo_high.data()[geo + COHERENCE_CHANNEL + 1 + HIGH_GRID * HIGH_GRID..2 * geo].iter().all(|&v| v == 0.0));
        // Presence falls back to the mask when no surface ids are present.
        assert_eq!(b.geo_low.data()[PRESENCE_CHANNEL], 1.0);
        assert_eq!(b.geo_low.data()[geo + PRESENCE_CHANNEL], 0.5);
        // Camera tokens repeat the translation on every patch.
        assert_eq!(&b.cam.data()[..4], &[0.5, -1.0, 0.25, -0.5]);
        assert_eq!(&b.cam.data()[8..12], &[0.5, -1.0, 0.25, -0.5]);
    }

    #[test]
    fn noise_free_coherence_recovers_masks() {
        let syn = generate_sequence(&SceneConfig::default(), 4).unwrap();
        let seq = syn.to_frame_sequence("n");
        let d = toy_dims();
        let spec = ProviderSpec::Synthetic { noise: 0.0, depth_cue_weight: 1.0, seed: 0 };
        let b = provide(&seq, &spec, &d).unwrap();
        let geo = d.geo_dim();
        for t in 0..seq.len() {
            for tok in 0..d.tokens() {
                let (py, px) = (tok / 8, tok % 8);
                let mut moving = 0;
                for y in 0..8 {
                    for x in 0..8 {
                        moving += seq.gt_masks.as_ref().unwrap()[t].get(px * 8 + x, py * 8 + y) as usize;
                    }
                }
                let c = b.geo_high.data()[(t * 64 + tok) * geo + COHERENCE_CHANNEL];
                assert_eq!(1.0 - c, moving as f32 / 64.0);
            }
        }
    }

    #[test]
    fn deterministic_noise() {
        let syn = generate_sequence(&SceneConfig::default(), 1).unwrap();
        let seq = syn.to_frame_sequence("x");
        let a = provide(&seq, &ProviderSpec::default(), &toy_dims()).unwrap();
        let b = provide(&seq, &ProviderSpec::default(), &toy_dims()).unwrap();
        assert_eq!(a, b);
        let other = ProviderSpec::Synthetic { noise: 0.25, depth_cue_weight: 1.0, seed: 1 };
        assert_ne!(a, provide(&seq, &other, &toy_dims()).unwrap());
    }

    #[test]
    fn file_provider_matches_written_bundle() {
        let syn = generate_sequence(&SceneConfig::default(), 2).unwrap();
        let seq = syn.to_frame_sequence("seq_a");
        let d = toy_dims();
        let b = provide(&seq, &ProviderSpec::default(), &d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&b, dir.path().join("seq_a")).unwrap();
        let spec = ProviderSpec::File { dir: dir.path().to_path_buf() };
        assert_eq!(provide(&seq, &spec, &d).unwrap(), b);

        let wrong = TokenDims { channels: 4, ..d };
        assert!(matches!(provide(&seq, &spec, &wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn file_provider_rejects_nan() {
        let syn = generate_sequence(&SceneConfig::default(), 2).unwrap();
        let seq = syn.to_frame_sequence("nan");
        let d = toy_dims();
        let mut b = provide(&seq, &ProviderSpec::default(), &d).unwrap();
        b.cam.data_mut()[5] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&b, dir.path().join("nan")).unwrap();
        let spec = ProviderSpec::File { dir: dir.path().to_path_buf() };
        assert!(matches!(provide(&seq, &spec, &d), Err(Error::Data(_))));
    }

    #[test]
    fn missing_ground_truth_is_data_error() {
        let syn = generate_sequence(&SceneConfig::default(), 2).unwrap();
        let mut seq = syn.to_frame_sequence("g");
        seq.gt_masks = None;
        assert!(matches!(provide(&seq, &ProviderSpec::default(), &toy_dims()), Err(Error::Data(_))));
    }
}
