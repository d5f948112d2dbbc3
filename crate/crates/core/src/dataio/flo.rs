//! Middlebury `.flo` optical flow container.
//!
//! Layout: `f32` magic 202021.25, `i32` width, `i32` height, then
//! `height * width` interleaved `(u, v)` `f32` pairs in row-major order.
//! Every field is little-endian.

use std::path::Path;

use crate::error::{Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;
const HEADER_LEN: usize = 12;

/// Dense per-pixel displacement field, `(u, v)` interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    vectors: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, vectors: Vec<f32>) -> Result<Self> {
        if vectors.len() != width * height * 2 {
            return Err(Error::shape(
                "flow.vectors",
                width * height * 2,
                vectors.len(),
            ));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(Self {
            width,
            height,
            vectors,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::uniform(width, height, 0.0, 0.0)
    }

    pub fn uniform(width: usize, height: usize, u: f32, v: f32) -> Self {
        let mut vectors = Vec::with_capacity(width * height * 2);
        for _ in 0..width * height {
            vectors.push(u);
            vectors.push(v);
        }
        Self {
            width,
            height,
            vectors,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.vectors[i], self.vectors[i + 1])
    }

    pub fn set(&mut self, x: usize, y: usize, u: f32, v: f32) {
        let i = 2 * (y * self.width + x);
        self.vectors[i] = u;
        self.vectors[i + 1] = v;
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.vectors.len() * 4);
        out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
        if magic != FLO_MAGIC {
            return Err(Error::Format(format!(
                "bad .flo magic {magic}, expected {FLO_MAGIC}"
            )));
        }
        let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if width < 0 || height < 0 {
            return Err(Error::Format(format!(
                "negative .flo dimensions {width}x{height}"
            )));
        }
        let (width, height) = (width as usize, height as usize);
        let expected = HEADER_LEN as u64 + (width as u64) * (height as u64) * 8;
        if bytes.len() as u64 != expected {
            return Err(Error::Length {
                expected,
                found: bytes.len() as u64,
            });
        }
        let vectors = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FlowField::new(width, height, vectors)
    }
}

/// Writes `flow` to `path`, returning the number of bytes written.
pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = flow.to_bytes()?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FlowField::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_pixel_layout() {
        let flow = FlowField::new(2, 1, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let bytes = flow.to_bytes().unwrap();
        assert_eq!(bytes.len(), 28);
        assert_eq!(f32::from_le_bytes(bytes[0..4].try_into().unwrap()), 202021.25);
        assert_eq!(&bytes[0..4], b"PIEH");
        assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(i32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let tail: Vec<f32> = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(tail, vec![1.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn empty_field_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.flo");
        let n = write_flo(&FlowField::zeros(0, 0), &path).unwrap();
        assert_eq!(n, 12);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 12);
        assert_eq!(read_flo(&path).unwrap(), FlowField::zeros(0, 0));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.flo");
        let flow = FlowField::new(2, 1, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        write_flo(&flow, &path).unwrap();
        assert_eq!(read_flo(&path).unwrap(), flow);
    }

    #[test]
    fn zero_magic_is_format_error() {
        let mut bytes = FlowField::zeros(1, 1).to_bytes().unwrap();
        bytes[0..4].copy_from_slice(&0f32.to_le_bytes());
        assert!(matches!(FlowField::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_length_error() {
        // 28 bytes on disk but the header claims 3x1 pixels (12 + 3*8 = 36).
        let mut bytes = FlowField::zeros(2, 1).to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&3i32.to_le_bytes());
        assert_eq!(bytes.len(), 28);
        match FlowField::from_bytes(&bytes) {
            Err(Error::Length { expected, found }) => {
                assert_eq!((expected, found), (36, 28));
            }
            other => panic!("expected length error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(FlowField::new(1, 1, vec![f32::NAN, 0.0]).is_err());
        let mut f = FlowField::zeros(1, 1);
        f.vectors[0] = f32::INFINITY;
        assert!(matches!(f.to_bytes(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn hundred_random_fields_roundtrip_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let w = rng.random_range(0..12);
            let h = rng.random_range(0..12);
            let v: Vec<f32> = (0..w * h * 2).map(|_| rng.random_range(-50.0..50.0)).collect();
            let flow = FlowField::new(w, h, v).unwrap();
            let back = FlowField::from_bytes(&flow.to_bytes().unwrap()).unwrap();
            let a: Vec<u32> = flow.vectors().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.vectors().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    proptest! {
        #[test]
        fn bytes_roundtrip(w in 0usize..6, h in 0usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f32> = (0..w * h * 2).map(|_| rng.random::<f32>() * 100.0 - 50.0).collect();
            let flow = FlowField::new(w, h, v).unwrap();
            let bytes = flow.to_bytes().unwrap();
            prop_assert_eq!(bytes.len(), 12 + w * h * 8);
            prop_assert_eq!(FlowField::from_bytes(&bytes).unwrap(), flow);
        }
    }
}
