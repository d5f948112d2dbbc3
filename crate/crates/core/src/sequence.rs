//! Frame sequences as the pipeline consumes them, and the per-sequence
//! dataset directory layout:
//!
//! ```text
//! <seq>/frames/00000.png   RGB frames
//! <seq>/flows/00000.flo    N-1 forward flows (t -> t+1)
//! <seq>/masks/00000.png    ground-truth motion masks (optional)
//! <seq>/objects/00000.png  visible surface ids (optional, synthetic only)
//! <seq>/meta.json
//! ```

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataio::{read_flo, read_frame, read_gray_png, read_mask, write_flo, write_frame, write_mask, BinaryMask, FlowField};
use crate::error::{Error, Result};
use crate::synthscenes::{SceneConfig, SyntheticSequence};

#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub name: String,
    pub frames: Vec<RgbImage>,
    /// Forward flows between consecutive frames (`N - 1` entries).
    pub flows: Vec<FlowField>,
    pub gt_masks: Option<Vec<BinaryMask>>,
    pub camera: Option<Vec<[f64; 2]>>,
    pub surfaces: Option<Vec<Vec<u8>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub name: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub camera: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub scene: Option<SceneConfig>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width() as usize)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n < 2 {
            return Err(Error::Data(format!("sequence `{}` has {n} frames, need >= 2", self.name)));
        }
        let (w, h) = (self.width(), self.height());
        if self.frames.iter().any(|f| (f.width() as usize, f.height() as usize) != (w, h)) {
            return Err(Error::Data(format!("sequence `{}` has frames of mixed size", self.name)));
        }
        if self.flows.len() != n - 1 && self.flows.len() != n {
            return Err(Error::shape(format!("{}.flows", self.name), n - 1, self.flows.len()));
        }
        if self.flows.iter().any(|f| (f.width(), f.height()) != (w, h)) {
            return Err(Error::Data(format!("sequence `{}`: flow/frame size mismatch", self.name)));
        }
        if let Some(m) = &self.gt_masks {
            if m.len() != n || m.iter().any(|m| (m.width(), m.height()) != (w, h)) {
                return Err(Error::Data(format!("sequence `{}`: mask count or size mismatch", self.name)));
            }
        }
        if let Some(c) = &self.camera {
            if c.len() != n {
                return Err(Error::shape(format!("{}.camera", self.name), n, c.len()));
            }
        }
        if let Some(s) = &self.surfaces {
            if s.len() != n || s.iter().any(|s| s.len() != w * h) {
                return Err(Error::Data(format!("sequence `{}`: surface map mismatch", self.name)));
            }
        }
        Ok(())
    }

    /// Restricts the sequence to the given frame indices (flows follow their
    /// source frame, so `flows` must already hold one entry per frame).
    pub fn select(&self, indices: &[usize], flows: &[FlowField]) -> (Vec<RgbImage>, Vec<FlowField>, Option<Vec<BinaryMask>>) {
        let frames = indices.iter().map(|&i| self.frames[i].clone()).collect();
        let fl = indices.iter().map(|&i| flows[i].clone()).collect();
        let masks = self.gt_masks.as_ref().map(|m| indices.iter().map(|&i| m[i].clone()).collect());
        (frames, fl, masks)
    }
}

impl SyntheticSequence {
    /// Drops the flow that points past the last frame, matching what a real
    /// flow estimator provides.
    pub fn to_frame_sequence(&self, name: impl Into<String>) -> FrameSequence {
        let n = self.frames.len();
        FrameSequence {
            name: name.into(),
            frames: self.frames.clone(),
            flows: self.flows[..n - 1].to_vec(),
            gt_masks: Some(self.gt_masks.clone()),
            camera: Some(self.camera.clone()),
            surfaces: Some(self.surfaces.clone()),
        }
    }
}

fn indexed(dir: &Path, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{i:05}.{ext}"))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `seq` under `dir` (created if needed).
pub fn save_sequence(seq: &FrameSequence, dir: impl AsRef<Path>, seed: Option<u64>, scene: Option<&SceneConfig>) -> Result<()> {
    let dir = dir.as_ref();
    seq.validate()?;
    for sub in ["frames", "flows"] {
        mkdir(&dir.join(sub))?;
    }
    for (i, f) in seq.frames.iter().enumerate() {
        write_frame(f, indexed(&dir.join("frames"), i, "png"))?;
    }
    for (i, f) in seq.flows.iter().take(seq.len() - 1).enumerate() {
        write_flo(f, indexed(&dir.join("flows"), i, "flo"))?;
    }
    if let Some(masks) = &seq.gt_masks {
        mkdir(&dir.join("masks"))?;
        for (i, m) in masks.iter().enumerate() {
            write_mask(m, indexed(&dir.join("masks"), i, "png"))?;
        }
    }
    if let Some(surfaces) = &seq.surfaces {
        mkdir(&dir.join("objects"))?;
        for (i, s) in surfaces.iter().enumerate() {
            GrayImage::from_raw(seq.width() as u32, seq.height() as u32, s.clone())
                .expect("surface size")
                .save(indexed(&dir.join("objects"), i, "png"))?;
        }
    }
    let meta = SequenceMeta {
        name: seq.name.clone(),
        frames: seq.len(),
        width: seq.width(),
        height: seq.height(),
        camera: seq.camera.clone(),
        seed,
        scene: scene.cloned(),
    };
    let path = dir.join("meta.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

fn count_files(dir: &Path, ext: &str) -> Result<usize> {
    if !dir.is_dir() {
        return Ok(0);
    }
    let mut n = 0;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().extension().is_some_and(|e| e == ext) {
            n += 1;
        }
    }
    Ok(n)
}

pub fn load_meta(dir: impl AsRef<Path>) -> Result<SequenceMeta> {
    let path = dir.as_ref().join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_sequence(dir: impl AsRef<Path>) -> Result<FrameSequence> {
    let dir = dir.as_ref();
    let meta = load_meta(dir)?;
    let n = meta.frames;
    let frames = (0..n)
        .map(|i| read_frame(indexed(&dir.join("frames"), i, "png")))
        .collect::<Result<Vec<_>>>()?;
    let flow_count = count_files(&dir.join("flows"), "flo")?;
    let flows = (0..flow_count)
        .map(|i| read_flo(indexed(&dir.join("flows"), i, "flo")))
        .collect::<Result<Vec<_>>>()?;
    let gt_masks = if dir.join("masks").is_dir() {
        Some((0..n).map(|i| read_mask(indexed(&dir.join("masks"), i, "png"))).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let surfaces = if dir.join("objects").is_dir() {
        Some(
            (0..n)
                .map(|i| read_gray_png(indexed(&dir.join("objects"), i, "png")).map(|g| g.into_raw()))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let seq = FrameSequence {
        name: meta.name,
        frames,
        flows,
        gt_masks,
        camera: meta.camera,
        surfaces,
    };
    seq.validate()?;
    Ok(seq)
}

/// Sorted sub-directories of `root` that hold a `meta.json`.
pub fn list_sequences(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join("meta.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<FrameSequence>> {
    list_sequences(root)?.iter().map(load_sequence).collect()
}
