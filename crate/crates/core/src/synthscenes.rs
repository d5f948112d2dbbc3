//! Deterministic synthetic dynamic scenes: textured rigid shapes translating
//! over a background that moves with a simulated camera. Ground-truth flow,
//! motion masks and surface ids are exact by construction.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{BinaryMask, FlowField};
use crate::error::{Error, Result};

/// Flow vectors closer than this to the camera translation count as static.
pub const MOTION_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Rectangle,
    Disk,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub objects: usize,
    /// Extra objects that move with the camera, so they are visible but not
    /// independently moving. Drawn behind the moving objects.
    pub static_objects: usize,
    pub shape: ShapeFamily,
    /// Inclusive range of object side length (rectangles) or diameter (disks).
    pub object_size: [f64; 2],
    pub velocity_min: [f64; 2],
    pub velocity_max: [f64; 2],
    pub camera_translation: [f64; 2],
    /// Per-sequence uniform perturbation of the camera translation, per axis.
    pub camera_jitter: f64,
    pub integer_motion: bool,
    /// Lattice spacing of the value-noise textures, in pixels.
    pub texture_scale: f64,
    pub texture_seed: u64,
    pub allow_occlusion: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 8,
            objects: 2,
            static_objects: 0,
            shape: ShapeFamily::Mixed,
            object_size: [12.0, 22.0],
            velocity_min: [-3.0, -3.0],
            velocity_max: [3.0, 3.0],
            camera_translation: [0.0, 0.0],
            camera_jitter: 2.0,
            integer_motion: true,
            texture_scale: 4.0,
            texture_seed: 0,
            allow_occlusion: true,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("scene needs at least 2 frames, got {}", self.frames)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene size must be positive".into()));
        }
        if self.object_size[0] <= 0.0 || self.object_size[0] > self.object_size[1] {
            return Err(Error::Config(format!("bad object size range {:?}", self.object_size)));
        }
        if self.object_size[1] > self.width.min(self.height) as f64 {
            return Err(Error::Config(format!(
                "object size {} exceeds the {}x{} frame",
                self.object_size[1], self.width, self.height
            )));
        }
        if (0..2).any(|a| self.velocity_min[a] > self.velocity_max[a]) {
            return Err(Error::Config("velocity_min exceeds velocity_max".into()));
        }
        if !(self.texture_scale > 0.0) || self.camera_jitter < 0.0 {
            return Err(Error::Config("texture_scale must be > 0 and camera_jitter >= 0".into()));
        }
        Ok(())
    }

    fn velocity_is_fixed(&self) -> bool {
        self.velocity_min == self.velocity_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectShape {
    Rectangle,
    Disk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub shape: ObjectShape,
    /// Width and height (equal to the diameter for disks).
    pub size: [f64; 2],
    /// Top-left corner at frame 0.
    pub origin: [f64; 2],
    pub velocity: [f64; 2],
    pub texture: u64,
}

impl ObjectTrack {
    fn position(&self, t: usize) -> [f64; 2] {
        [self.origin[0] + self.velocity[0] * t as f64, self.origin[1] + self.velocity[1] * t as f64]
    }

    /// Object-local coordinates of pixel `(x, y)` at frame `t`, if covered.
    fn local(&self, x: usize, y: usize, t: usize) -> Option<[f64; 2]> {
        let p = self.position(t);
        let l = [x as f64 - p[0], y as f64 - p[1]];
        let inside = match self.shape {
            ObjectShape::Rectangle => l[0] >= 0.0 && l[1] >= 0.0 && l[0] < self.size[0] && l[1] < self.size[1],
            ObjectShape::Disk => {
                let r = self.size[0] / 2.0;
                let (dx, dy) = (l[0] + 0.5 - r, l[1] + 0.5 - r);
                dx * dx + dy * dy <= r * r
            }
        };
        inside.then_some(l)
    }

    fn bbox(&self, t: usize) -> [f64; 4] {
        let p = self.position(t);
        [p[0], p[1], p[0] + self.size[0], p[1] + self.size[1]]
    }

    pub fn moves_independently(&self, camera: [f64; 2]) -> bool {
        differs(self.velocity, camera)
    }
}

fn differs(a: [f64; 2], b: [f64; 2]) -> bool {
    (a[0] - b[0]).abs() > MOTION_EPS || (a[1] - b[1]).abs() > MOTION_EPS
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub config: SceneConfig,
    pub seed: u64,
    pub frames: Vec<RgbImage>,
    /// `flows[t]` maps frame `t` to frame `t + 1`; the last entry is the
    /// motion into the (unrendered) frame after the sequence.
    pub flows: Vec<FlowField>,
    pub gt_masks: Vec<BinaryMask>,
    /// Per-frame camera translation in pixels/frame.
    pub camera: Vec<[f64; 2]>,
    /// Per-pixel id of the visible surface: 0 background, `k + 1` object `k`.
    pub surfaces: Vec<Vec<u8>>,
    pub objects: Vec<ObjectTrack>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit mix of several words.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x51_7cc1_b727_220a_u64, |acc, &w| splitmix(acc ^ w))
}

/// Value noise: 8-bit random lattice values, bilinearly interpolated.
#[derive(Debug, Clone, Copy)]
struct Texture {
    seed: u64,
    scale: f64,
}

impl Texture {
    fn lattice(&self, i: i64, j: i64, c: u64) -> f64 {
        (mix(&[self.seed, i as u64, j as u64, c]) >> 56) as f64
    }

    fn sample(&self, x: f64, y: f64) -> [u8; 3] {
        let (u, v) = (x / self.scale, y / self.scale);
        let (i, j) = (u.floor(), v.floor());
        let (fu, fv) = (u - i, v - j);
        let (i, j) = (i as i64, j as i64);
        let mut out = [0u8; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let c = c as u64;
            let top = self.lattice(i, j, c) * (1.0 - fu) + self.lattice(i + 1, j, c) * fu;
            let bot = self.lattice(i, j + 1, c) * (1.0 - fu) + self.lattice(i + 1, j + 1, c) * fu;
            *o = (top * (1.0 - fv) + bot * fv).round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

fn draw_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64, integer: bool) -> f64 {
    let v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    if integer {
        v.round()
    } else {
        v
    }
}

fn draw_velocity(cfg: &SceneConfig, rng: &mut ChaCha8Rng, camera: [f64; 2]) -> [f64; 2] {
    const ATTEMPTS: usize = 200;
    let mut velocity = [0.0; 2];
    for _ in 0..ATTEMPTS {
        velocity = [
            draw_range(rng, cfg.velocity_min[0], cfg.velocity_max[0], cfg.integer_motion),
            draw_range(rng, cfg.velocity_min[1], cfg.velocity_max[1], cfg.integer_motion),
        ];
        if cfg.velocity_is_fixed() || differs(velocity, camera) {
            break;
        }
    }
    velocity
}

/// One object with a random shape, size and placement; the velocity is
/// drawn (avoiding the camera translation) unless `fixed_velocity` is given.
fn sample_object(cfg: &SceneConfig, rng: &mut ChaCha8Rng, camera: [f64; 2], fixed_velocity: Option<[f64; 2]>) -> ObjectTrack {
    let span = (cfg.frames - 1) as f64;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let shape = match cfg.shape {
        ShapeFamily::Rectangle => ObjectShape::Rectangle,
        ShapeFamily::Disk => ObjectShape::Disk,
        ShapeFamily::Mixed if rng.random_bool(0.5) => ObjectShape::Rectangle,
        ShapeFamily::Mixed => ObjectShape::Disk,
    };
    let round = |v: f64| v.round().max(1.0);
    let size = match shape {
        ObjectShape::Rectangle => [
            round(draw_range(rng, cfg.object_size[0], cfg.object_size[1], false)),
            round(draw_range(rng, cfg.object_size[0], cfg.object_size[1], false)),
        ],
        ObjectShape::Disk => {
            let d = round(draw_range(rng, cfg.object_size[0], cfg.object_size[1], false));
            [d, d]
        }
    };
    let velocity = fixed_velocity.unwrap_or_else(|| draw_velocity(cfg, rng, camera));
    // Keep the object inside the frame for the whole sequence when possible.
    let mut origin = [0.0; 2];
    for a in 0..2 {
        let extent = if a == 0 { w } else { h };
        let travel = velocity[a] * span;
        let lo = (-travel).max(0.0);
        let hi = (extent - size[a] - travel).min(extent - size[a]);
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (0.0, extent - size[a]) };
        origin[a] = draw_range(rng, lo, hi, true);
    }
    ObjectTrack {
        shape,
        size,
        origin,
        velocity,
        texture: rng.random(),
    }
}

fn sample_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng, camera: [f64; 2]) -> Result<Vec<ObjectTrack>> {
    const ATTEMPTS: usize = 200;
    for _ in 0..ATTEMPTS {
        let mut objs: Vec<ObjectTrack> = Vec::with_capacity(cfg.objects + cfg.static_objects);
        for _ in 0..cfg.objects {
            objs.push(sample_object(cfg, rng, camera, None));
        }
        let statics: Vec<ObjectTrack> = (0..cfg.static_objects).map(|_| sample_object(cfg, rng, camera, Some(camera))).collect();
        objs.splice(0..0, statics);
        if cfg.allow_occlusion || !any_overlap(&objs, cfg.frames) {
            return Ok(objs);
        }
    }
    Err(Error::Config(format!(
        "could not place {} non-overlapping objects in {}x{}",
        cfg.objects + cfg.static_objects,
        cfg.width,
        cfg.height
    )))
}

fn any_overlap(objs: &[ObjectTrack], frames: usize) -> bool {
    (0..frames).any(|t| {
        objs.iter().enumerate().any(|(i, a)| {
            objs[i + 1..].iter().any(|b| {
                let (p, q) = (a.bbox(t), b.bbox(t));
                p[0] < q[2] && q[0] < p[2] && p[1] < q[3] && q[1] < p[3]
            })
        })
    })
}

/// Renders one sequence. Output is a pure function of `(config, seed)`.
pub fn generate_sequence(config: &SceneConfig, seed: u64) -> Result<SyntheticSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, config.texture_seed]));
    let camera = {
        let j = config.camera_jitter;
        let base = config.camera_translation;
        [
            draw_range(&mut rng, base[0] - j, base[0] + j, config.integer_motion && j > 0.0),
            draw_range(&mut rng, base[1] - j, base[1] + j, config.integer_motion && j > 0.0),
        ]
    };
    let objects = sample_objects(config, &mut rng, camera)?;
    let background = Texture {
        seed: mix(&[seed, config.texture_seed, 0xb9]),
        scale: config.texture_scale,
    };
    let textures: Vec<Texture> = objects
        .iter()
        .map(|o| Texture {
            seed: o.texture,
            scale: config.texture_scale,
        })
        .collect();

    let (w, h, n) = (config.width, config.height, config.frames);
    let mut frames = Vec::with_capacity(n);
    let mut flows = Vec::with_capacity(n);
    let mut gt_masks = Vec::with_capacity(n);
    let mut surfaces = Vec::with_capacity(n);
    for t in 0..n {
        let mut img = RgbImage::new(w as u32, h as u32);
        let mut flow = FlowField::uniform(w, h, camera[0] as f32, camera[1] as f32);
        let mut mask = BinaryMask::empty(w, h);
        let mut surface = vec![0u8; w * h];
        let shift = [camera[0] * t as f64, camera[1] * t as f64];
        for y in 0..h {
            for x in 0..w {
                let mut top = None;
                for (k, obj) in objects.iter().enumerate() {
                    if let Some(l) = obj.local(x, y, t) {
                        top = Some((k, l));
                    }
                }
                let rgb = match top {
                    Some((k, l)) => {
                        surface[y * w + x] = (k + 1) as u8;
                        let v = objects[k].velocity;
                        flow.set(x, y, v[0] as f32, v[1] as f32);
                        mask.set(x, y, differs(v, camera));
                        textures[k].sample(l[0], l[1])
                    }
                    None => background.sample(x as f64 - shift[0], y as f64 - shift[1]),
                };
                img.put_pixel(x as u32, y as u32, Rgb(rgb));
            }
        }
        frames.push(img);
        flows.push(flow);
        gt_masks.push(mask);
        surfaces.push(surface);
    }
    Ok(SyntheticSequence {
        config: config.clone(),
        seed,
        frames,
        flows,
        gt_masks,
        camera: vec![camera; n],
        surfaces,
        objects,
    })
}

/// Bilinear sample of one channel at continuous pixel coordinates; `None`
/// outside the support.
fn sample_channel(img: &RgbImage, x: f64, y: f64, c: usize) -> Option<f64> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if x < 0.0 || y < 0.0 || x > w - 1.0 || y > h - 1.0 {
        return None;
    }
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let p = |xx: u32, yy: u32| img.get_pixel(xx, yy).0[c] as f64;
    Some(
        (p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx) * (1.0 - fy)
            + (p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx) * fy,
    )
}

/// Pixels of the bilinear footprint at `(x, y)` that carry non-zero weight.
fn footprint(x: f64, y: f64, w: usize, h: usize) -> Vec<(usize, usize)> {
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = vec![(x0, y0)];
    if fx > 0.0 && x0 + 1 < w {
        out.push((x0 + 1, y0));
    }
    if fy > 0.0 && y0 + 1 < h {
        out.push((x0, y0 + 1));
        if fx > 0.0 && x0 + 1 < w {
            out.push((x0 + 1, y0 + 1));
        }
    }
    out
}

/// Mean absolute colour error (in `[0, 1]` units) between frame `t` and
/// frame `t + 1` warped back along `flows[t]`, over non-occluded pixels.
pub fn warp_consistency(seq: &SyntheticSequence) -> f64 {
    let (w, h) = (seq.config.width, seq.config.height);
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..seq.frames.len().saturating_sub(1) {
        let (cur, next) = (&seq.frames[t], &seq.frames[t + 1]);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = seq.flows[t].get(x, y);
                let (tx, ty) = (x as f64 + u as f64, y as f64 + v as f64);
                if tx < 0.0 || ty < 0.0 || tx > (w - 1) as f64 || ty > (h - 1) as f64 {
                    continue;
                }
                let id = seq.surfaces[t][y * w + x];
                if footprint(tx, ty, w, h).iter().any(|&(px, py)| seq.surfaces[t + 1][py * w + px] != id) {
                    continue;
                }
                for c in 0..3 {
                    let warped = sample_channel(next, tx, ty, c).expect("in-bounds sample");
                    total += (warped - cur.get_pixel(x as u32, y as u32).0[c] as f64).abs() / 255.0;
                }
                count += 3;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
