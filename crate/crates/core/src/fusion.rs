//! Feature aggregation: multi-level geometry tokens are concatenated and
//! projected (`4C -> 2C`, ReLU), then joined with flow and camera tokens and
//! projected again (`2C + D_flow + D_cam -> 2C`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::init::xavier_uniform;
use crate::diffcore::{Bound, Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::providers::GeometryBundle;

pub const GEO_W: &str = "fusion.geo.weight";
pub const GEO_B: &str = "fusion.geo.bias";
pub const OUT_W: &str = "fusion.out.weight";
pub const OUT_B: &str = "fusion.out.bias";

/// Which modalities reach the fusion MLP. A disabled modality is replaced by
/// zeros of the same shape, so parameter shapes never change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionToggles {
    #[serde(default = "on")]
    pub cam: bool,
    #[serde(default = "on")]
    pub flow: bool,
    /// Low-level (shallow) geometry tokens.
    #[serde(default = "on")]
    pub shallow: bool,
}

fn on() -> bool {
    true
}

impl Default for FusionToggles {
    fn default() -> Self {
        Self::ALL
    }
}

impl FusionToggles {
    pub const ALL: Self = Self {
        cam: true,
        flow: true,
        shallow: true,
    };
    pub const BASELINE: Self = Self {
        cam: false,
        flow: false,
        shallow: false,
    };
}

/// Adds the two fusion linears (zero biases) to `store`.
pub fn init_params<T: Real>(
    store: &mut ParamStore<T>,
    channels: usize,
    flow_dim: usize,
    cam_dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let (c2, c4) = (2 * channels, 4 * channels);
    let joint = c2 + flow_dim + cam_dim;
    store.insert(GEO_W, xavier_uniform(rng, &[c4, c2], c4, c2))?;
    store.insert(GEO_B, Tensor::zeros(&[c2]))?;
    store.insert(OUT_W, xavier_uniform(rng, &[joint, c2], joint, c2))?;
    store.insert(OUT_B, Tensor::zeros(&[c2]))?;
    Ok(())
}

/// Graph nodes produced by one aggregation, with the channel width after
/// each stage: geometry concat, first projection, joint concat, output.
#[derive(Debug, Clone, Copy)]
pub struct FusedVar {
    pub tokens: Var,
    pub widths: [usize; 4],
}

fn check3(g: &Graph<impl Real>, name: &str, v: Var, n: usize, hw: usize) -> Result<usize> {
    let s = g.shape(v);
    if s.len() != 3 || s[0] != n || s[1] != hw {
        return Err(Error::shape(name, format!("[{n}, {hw}, _]"), s));
    }
    Ok(s[2])
}

fn zeros_like<T: Real>(g: &mut Graph<T>, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    g.constant(Tensor::zeros(&shape))
}

/// Fuses `[N, hw, *]` token tensors; disabled modalities become zeros.
pub fn aggregate_graph<T: Real>(
    g: &mut Graph<T>,
    geo_low: Var,
    geo_high: Var,
    flow: Var,
    cam: Var,
    p: &Bound,
    toggles: FusionToggles,
) -> Result<FusedVar> {
    let hs = g.shape(geo_high).to_vec();
    if hs.len() != 3 {
        return Err(Error::shape("geo_high", "[N, hw, 2C]", &hs));
    }
    let (n, hw) = (hs[0], hs[1]);
    let low_w = check3(g, "geo_low", geo_low, n, hw)?;
    if low_w != hs[2] {
        return Err(Error::shape("geo_low", [n, hw, hs[2]], g.shape(geo_low)));
    }
    check3(g, "flow tokens", flow, n, hw)?;
    check3(g, "cam tokens", cam, n, hw)?;

    let low = if toggles.shallow { geo_low } else { zeros_like(g, geo_low) };
    let flow = if toggles.flow { flow } else { zeros_like(g, flow) };
    let cam = if toggles.cam { cam } else { zeros_like(g, cam) };

    let geo = g.concat_last(&[low, geo_high])?;
    let w0 = g.shape(geo)[2];
    let proj = g.linear(geo, p.get(GEO_W)?, Some(p.get(GEO_B)?))?;
    let proj = g.relu(proj);
    let w1 = g.shape(proj)[2];
    let joint = g.concat_last(&[proj, flow, cam])?;
    let w2 = g.shape(joint)[2];
    let out = g.linear(joint, p.get(OUT_W)?, Some(p.get(OUT_B)?))?;
    let w3 = g.shape(out)[2];
    Ok(FusedVar {
        tokens: out,
        widths: [w0, w1, w2, w3],
    })
}

/// Fused tokens `[N, hw, 2C]` plus the per-stage channel widths.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTokens {
    pub tokens: Tensor<f32>,
    pub widths: [usize; 4],
}

pub fn ablate(
    bundle: &GeometryBundle,
    flow: &Tensor<f32>,
    params: &ParamStore<f32>,
    toggles: FusionToggles,
) -> Result<FusedTokens> {
    let mut g = Graph::new();
    let low = g.constant(bundle.geo_low.clone());
    let high = g.constant(bundle.geo_high.clone());
    let fl = g.constant(flow.clone());
    let cam = g.constant(bundle.cam.clone());
    let p = params.bind_constants(&mut g, "fusion.");
    let f = aggregate_graph(&mut g, low, high, fl, cam, &p, toggles)?;
    Ok(FusedTokens {
        tokens: g.value(f.tokens).clone(),
        widths: f.widths,
    })
}

pub fn aggregate(bundle: &GeometryBundle, flow: &Tensor<f32>, params: &ParamStore<f32>) -> Result<FusedTokens> {
    ablate(bundle, flow, params, FusionToggles::ALL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check_coords, spread_coords};
    use crate::providers::TokenDims;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(n: usize, grid: usize, c: usize, df: usize, dc: usize, seed: u64) -> (GeometryBundle, Tensor<f32>, ParamStore<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = TokenDims { grid_h: grid, grid_w: grid, patch: 1, channels: c, cam_dim: dc };
        let hw = grid * grid;
        let bundle = GeometryBundle {
            geo_low: random(&mut rng, &[n, hw, 2 * c]),
            geo_high: random(&mut rng, &[n, hw, 2 * c]),
            cam: random(&mut rng, &[n, hw, dc]),
            dims,
        };
        let flow = random(&mut rng, &[n, hw, df]);
        let mut params = ParamStore::new();
        init_params(&mut params, c, df, dc, &mut rng).unwrap();
        (bundle, flow, params)
    }

    #[test]
    fn toy_width_chain() {
        let (b, f, p) = setup(2, 8, 8, 4, 8, 0);
        let out = aggregate(&b, &f, &p).unwrap();
        assert_eq!(out.widths, [32, 16, 28, 16]);
        assert_eq!(out.tokens.shape(), &[2, 64, 16]);
    }

    #[test]
    fn zero_inputs_zero_output() {
        let (mut b, mut f, p) = setup(1, 2, 4, 2, 4, 1);
        for t in [&mut b.geo_low, &mut b.geo_high, &mut b.cam, &mut f] {
            t.data_mut().fill(0.0);
        }
        let out = aggregate(&b, &f, &p).unwrap();
        assert!(out.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_toggles_on_is_aggregate() {
        let (b, f, p) = setup(2, 3, 4, 2, 4, 2);
        assert_eq!(ablate(&b, &f, &p, FusionToggles::ALL).unwrap(), aggregate(&b, &f, &p).unwrap());
    }

    #[test]
    fn disabled_modality_is_ignored() {
        let (b, f, p) = setup(2, 3, 4, 2, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let f2 = random(&mut rng, f.shape());
        let mut b2 = b.clone();
        b2.cam = random(&mut rng, b.cam.shape());
        b2.geo_low = random(&mut rng, b.geo_low.shape());
        let cases = [
            (FusionToggles { flow: false, ..FusionToggles::ALL }, &b, &f2),
            (FusionToggles::BASELINE, &b2, &f2),
        ];
        for (t, bb, ff) in cases {
            assert_eq!(ablate(&b, &f, &p, t).unwrap(), ablate(bb, ff, &p, t).unwrap());
        }
        assert_ne!(aggregate(&b, &f, &p).unwrap(), aggregate(&b, &f2, &p).unwrap());
    }

    #[test]
    fn mismatch_names_tensor() {
        let (b, f, p) = setup(2, 3, 4, 2, 4, 4);
        let bad = Tensor::zeros(&[2, 8, 2]);
        let err = aggregate(&b, &bad, &p).unwrap_err().to_string();
        assert!(err.contains("flow tokens"), "{err}");
        assert!(aggregate(&b, &f, &ParamStore::new()).is_err());
    }

    #[test]
    fn linear_map_gradients() {
        let (b, f, p) = setup(2, 2, 3, 2, 4, 5);
        let p64 = p.cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let wts = random(&mut rng, &[2, 4, 6]).cast::<f64>();
        for name in [GEO_W, GEO_B, OUT_W, OUT_B] {
            let mut point = p64.get(name).unwrap().clone();
            if name.ends_with("bias") {
                point.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * i as f64 - 0.1);
            }
            let f = |g: &mut Graph<f64>, v: Var| {
                let mut bound = p64.bind_constants(g, "fusion.");
                bound.set(name, v);
                let l = g.constant(b.geo_low.cast());
                let h = g.constant(b.geo_high.cast());
                let fl = g.constant(f.cast());
                let c = g.constant(b.cam.cast());
                let out = aggregate_graph(g, l, h, fl, c, &bound, FusionToggles::ALL)?;
                let w = g.constant(wts.clone());
                let prod = g.mul(out.tokens, w)?;
                Ok(g.sum(prod))
            };
            let err = grad_check_coords(f, &point, 1e-6, &spread_coords(point.numel(), 40)).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn output_shape_for_any_valid_input(n in 1usize..4, grid in 1usize..4, c in 1usize..5, df in 1usize..4, dc in 1usize..4, seed in 0u64..100) {
            let (b, f, p) = setup(n, grid, c, df, dc, seed);
            let out = aggregate(&b, &f, &p).unwrap();
            prop_assert_eq!(out.tokens.shape(), &[n, grid * grid, 2 * c]);
            prop_assert_eq!(out.widths, [4 * c, 2 * c, 2 * c + df + dc, 2 * c]);
        }

        #[test]
        fn permuting_tokens_permutes_output(seed in 0u64..200) {
            let (b, f, p) = setup(2, 3, 2, 2, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..9).collect();
            for i in (1..9).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let shuffle = |t: &Tensor<f32>| {
                let s = t.shape();
                let mut data = Vec::with_capacity(t.numel());
                for n in 0..s[0] {
                    for &j in &perm {
                        let at = (n * s[1] + j) * s[2];
                        data.extend_from_slice(&t.data()[at..at + s[2]]);
                    }
                }
                Tensor::new(s.to_vec(), data).unwrap()
            };
            let b2 = GeometryBundle {
                geo_low: shuffle(&b.geo_low),
                geo_high: shuffle(&b.geo_high),
                cam: shuffle(&b.cam),
                dims: b.dims,
            };
            let out = aggregate(&b, &f, &p).unwrap();
            let out2 = aggregate(&b2, &shuffle(&f), &p).unwrap();
            prop_assert_eq!(shuffle(&out.tokens), out2.tokens);
        }
    }
}
