//! Finite-difference verification of every differentiable op and of the
//! composite pieces of the network, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataio::{BinaryMask, FlowField};
use crate::decoder::DecoderConfig;
use crate::diffcore::{grad_check_coords, spread_coords, Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::flowenc::{flow_tensor, encode_flow_graph};
use crate::fusion::{aggregate_graph, FusionToggles};
use crate::losses::{total_loss_graph, DiceFrames, FocalFrames, LossConfig};
use crate::model::{forward_graph, Clip, Model, ModelConfig};
use crate::providers::{GeometryBundle, TokenDims};

pub const EPSILON: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
const MAX_COORDS: usize = 48;

#[derive(Debug, Clone, Serialize)]
pub struct GradRow {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub passed: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero (for ops with a kink there).
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn row(name: &str, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>, point: &Tensor<f64>) -> Result<GradRow> {
    let coords = spread_coords(point.numel(), MAX_COORDS);
    let err = grad_check_coords(f, point, EPSILON, &coords)?;
    Ok(GradRow {
        name: name.to_string(),
        max_rel_error: err,
        coords: coords.len(),
        passed: err < TOLERANCE,
    })
}

/// Reduces `y` to a scalar through fixed random weights so every output
/// element contributes a distinct sensitivity.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn toy_masks(frames: usize, w: usize, h: usize, seed: u64) -> Vec<BinaryMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|_| BinaryMask::new(w, h, (0..w * h).map(|_| rng.random_range(0..2u8)).collect()).expect("mask"))
        .collect()
}

/// Rows for the primitive graph ops.
pub fn op_rows() -> Result<Vec<GradRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rows = Vec::new();
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[5], -1.0, 1.0);

    let (w2, b2) = (w.clone(), b.clone());
    rows.push(row(
        "linear (input)",
        move |g, x| {
            let (w, b) = (g.constant(w2.clone()), g.constant(b2.clone()));
            let y = g.linear(x, w, Some(b))?;
            probe(g, y, 1)
        },
        &a,
    )?);
    let a2 = a.clone();
    rows.push(row(
        "linear (weight)",
        move |g, w| {
            let x = g.constant(a2.clone());
            let y = g.linear(x, w, None)?;
            probe(g, y, 2)
        },
        &w,
    )?);
    let other = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let o2 = other.clone();
    rows.push(row(
        "add",
        move |g, x| {
            let c = g.constant(o2.clone());
            let y = g.add(x, c)?;
            probe(g, y, 3)
        },
        &a,
    )?);
    let a3 = a.clone();
    rows.push(row(
        "add_broadcast (operand)",
        move |g, y| {
            let x = g.constant(a3.clone());
            let z = g.add_broadcast(x, y)?;
            probe(g, z, 4)
        },
        &rand_tensor(&mut rng, &[1, 4], -1.0, 1.0),
    )?);
    let o3 = other.clone();
    rows.push(row(
        "mul",
        move |g, x| {
            let c = g.constant(o3.clone());
            let y = g.mul(x, c)?;
            probe(g, y, 5)
        },
        &a,
    )?);
    rows.push(row(
        "scale",
        |g, x| {
            let y = g.scale(x, -1.7);
            probe(g, y, 6)
        },
        &a,
    )?);
    rows.push(row(
        "relu",
        |g, x| {
            let y = g.relu(x);
            probe(g, y, 7)
        },
        &off_zero(&mut rng, &[3, 4]),
    )?);
    rows.push(row(
        "sigmoid",
        |g, x| {
            let y = g.sigmoid(x);
            probe(g, y, 8)
        },
        &rand_tensor(&mut rng, &[3, 4], -3.0, 3.0),
    )?);
    rows.push(row(
        "softmax",
        |g, x| {
            let y = g.softmax(x);
            probe(g, y, 9)
        },
        &rand_tensor(&mut rng, &[3, 4], -2.0, 2.0),
    )?);
    let gamma = rand_tensor(&mut rng, &[4], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    let (g2, bt2) = (gamma.clone(), beta.clone());
    rows.push(row(
        "layer_norm (input)",
        move |g, x| {
            let (ga, be) = (g.constant(g2.clone()), g.constant(bt2.clone()));
            let y = g.layer_norm(x, ga, be, 1e-5)?;
            probe(g, y, 10)
        },
        &a,
    )?);
    let (a4, bt3) = (a.clone(), beta.clone());
    rows.push(row(
        "layer_norm (gain)",
        move |g, ga| {
            let x = g.constant(a4.clone());
            let be = g.constant(bt3.clone());
            let y = g.layer_norm(x, ga, be, 1e-5)?;
            probe(g, y, 11)
        },
        &gamma,
    )?);
    let kv = rand_tensor(&mut rng, &[6, 4], -1.0, 1.0);
    for (label, which) in [("attention (query)", 0), ("attention (key)", 1), ("attention (value)", 2)] {
        let kv2 = kv.clone();
        rows.push(row(
            label,
            move |g, x| {
                let c = g.constant(kv2.clone());
                let (q, k, v) = match which {
                    0 => (x, c, c),
                    1 => (c, x, c),
                    _ => (c, c, x),
                };
                let y = g.attention(q, k, v, 2, &[(0, 2), (2, 4)])?;
                probe(g, y, 12)
            },
            &rand_tensor(&mut rng, &[6, 4], -1.0, 1.0),
        )?);
    }
    let cw = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let cx = rand_tensor(&mut rng, &[2, 2, 5, 6], -1.0, 1.0);
    let cw2 = cw.clone();
    rows.push(row(
        "conv2d (input)",
        move |g, x| {
            let w = g.constant(cw2.clone());
            let y = g.conv2d(x, w, None)?;
            probe(g, y, 13)
        },
        &cx,
    )?);
    let cx2 = cx.clone();
    rows.push(row(
        "conv2d (weight)",
        move |g, w| {
            let x = g.constant(cx2.clone());
            let y = g.conv2d(x, w, None)?;
            probe(g, y, 14)
        },
        &cw,
    )?);
    rows.push(row(
        "resize_bilinear",
        |g, x| {
            let y = g.resize_bilinear(x, 3, 2)?;
            probe(g, y, 15)
        },
        &cx,
    )?);
    rows.push(row(
        "permute",
        |g, x| {
            let y = g.permute(x, &[2, 0, 3, 1])?;
            probe(g, y, 16)
        },
        &cx,
    )?);
    rows.push(row(
        "reshape",
        |g, x| {
            let y = g.reshape(x, &[4, 30])?;
            probe(g, y, 17)
        },
        &cx,
    )?);
    let o4 = other.clone();
    rows.push(row(
        "concat_last",
        move |g, x| {
            let c = g.constant(o4.clone());
            let y = g.concat_last(&[c, x, c])?;
            probe(g, y, 18)
        },
        &a,
    )?);
    rows.push(row(
        "gather_rows",
        |g, t| {
            let y = g.gather_rows(t, &[2, 0, 2, 1])?;
            probe(g, y, 19)
        },
        &a,
    )?);
    rows.push(row(
        "mean",
        |g, x| {
            let s = g.mul(x, x)?;
            Ok(g.mean(s))
        },
        &a,
    )?);
    Ok(rows)
}

/// Rows for the losses and the network components.
pub fn component_rows() -> Result<Vec<GradRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut rows = Vec::new();
    let masks = toy_masks(2, 4, 3, 5);
    let targets: Vec<Vec<u8>> = masks.iter().map(|m| m.values().to_vec()).collect();
    let probs = rand_tensor(&mut rng, &[2, 12], 0.05, 0.95);
    let cfg = LossConfig::default();

    let t1 = targets.clone();
    rows.push(row(
        "focal loss",
        move |g, p| {
            let l = g.frame_loss(p, Box::new(FocalFrames::<f64>::new(t1.clone(), cfg.alpha, cfg.gamma)))?;
            Ok(g.sum(l))
        },
        &probs,
    )?);
    let t2 = targets.clone();
    rows.push(row(
        "dice loss",
        move |g, p| {
            let l = g.frame_loss(p, Box::new(DiceFrames::<f64>::new(t2.clone(), cfg.dice_eps)))?;
            Ok(g.sum(l))
        },
        &probs,
    )?);

    // Fusion linears.
    let (n, hw, c, df, dc) = (2, 4, 3, 2, 4);
    let mut store = ParamStore::<f64>::new();
    crate::fusion::init_params(&mut store, c, df, dc, &mut rng)?;
    let inputs = [
        rand_tensor(&mut rng, &[n, hw, 2 * c], -1.0, 1.0),
        rand_tensor(&mut rng, &[n, hw, 2 * c], -1.0, 1.0),
        rand_tensor(&mut rng, &[n, hw, df], -1.0, 1.0),
        rand_tensor(&mut rng, &[n, hw, dc], -1.0, 1.0),
    ];
    for name in [crate::fusion::GEO_W, crate::fusion::GEO_B, crate::fusion::OUT_W, crate::fusion::OUT_B] {
        let (s, ins) = (store.clone(), inputs.clone());
        let mut point = store.get(name)?.clone();
        point.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        rows.push(row(
            &format!("fusion {name}"),
            move |g, v| {
                let mut b = s.bind_constants(g, "fusion.");
                b.set(name, v);
                let [l, h, f, cm] = ins.clone().map(|t| g.constant(t));
                let out = aggregate_graph(g, l, h, f, cm, &b, FusionToggles::ALL)?;
                probe(g, out.tokens, 20)
            },
            &point,
        )?);
    }

    // Flow CNN.
    let mut fstore = ParamStore::<f64>::new();
    crate::flowenc::init_params(&mut fstore, 4, &mut rng)?;
    let vectors: Vec<f32> = (0..2 * 8 * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let flow = FlowField::new(8, 8, vectors)?;
    let x: Tensor<f64> = flow_tensor(&[flow.clone(), flow], 8, 8)?;
    for name in [crate::flowenc::CONV1_W, crate::flowenc::CONV1_B, crate::flowenc::CONV2_W, crate::flowenc::CONV2_B] {
        let (s, x2) = (fstore.clone(), x.clone());
        let mut point = fstore.get(name)?.clone();
        point.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        rows.push(row(
            &format!("flow CNN {name}"),
            move |g, v| {
                let mut b = s.bind_constants(g, "flow.");
                b.set(name, v);
                let xv = g.constant(x2.clone());
                let tok = encode_flow_graph(g, xv, &b, (2, 2))?;
                probe(g, tok, 21)
            },
            &point,
        )?);
    }

    // One pre-norm attention block with its feed-forward layer.
    let dcfg = DecoderConfig { layers: 1, heads: 2, ..DecoderConfig::default() };
    let mut dstore = ParamStore::<f64>::new();
    crate::decoder::init_params(&mut dstore, &dcfg, 4, 1, &mut rng)?;
    let block_in = rand_tensor(&mut rng, &[6, 4], -1.0, 1.0);
    let block = |g: &mut Graph<f64>, x: Var, b: &crate::diffcore::Bound| -> Result<Var> {
        let get = |part: &str| b.get(&format!("decoder.block0.{part}"));
        let a = g.layer_norm(x, get("ln1.gamma")?, get("ln1.beta")?, crate::decoder::LN_EPS)?;
        let q = g.linear(a, get("attn.q.weight")?, Some(get("attn.q.bias")?))?;
        let k = g.linear(a, get("attn.k.weight")?, Some(get("attn.k.bias")?))?;
        let v = g.linear(a, get("attn.v.weight")?, Some(get("attn.v.bias")?))?;
        let att = g.attention(q, k, v, 2, &[(0, 6)])?;
        let o = g.linear(att, get("attn.o.weight")?, Some(get("attn.o.bias")?))?;
        let h = g.add(x, o)?;
        let n2 = g.layer_norm(h, get("ln2.gamma")?, get("ln2.beta")?, crate::decoder::LN_EPS)?;
        let f = g.linear(n2, get("ffn.w1")?, Some(get("ffn.b1")?))?;
        let f = g.relu(f);
        let f = g.linear(f, get("ffn.w2")?, Some(get("ffn.b2")?))?;
        g.add(h, f)
    };
    let s = dstore.clone();
    rows.push(row(
        "attention block (input)",
        move |g, x| {
            let b = s.bind_constants(g, "decoder.");
            let y = block(g, x, &b)?;
            probe(g, y, 22)
        },
        &block_in,
    )?);
    for name in ["decoder.block0.attn.q.weight", "decoder.block0.attn.v.weight", "decoder.block0.ffn.w1"] {
        let (s, bi) = (dstore.clone(), block_in.clone());
        rows.push(row(
            &format!("attention block {name}"),
            move |g, v| {
                let mut b = s.bind_constants(g, "decoder.");
                b.set(name, v);
                let x = g.constant(bi.clone());
                let y = block(g, x, &b)?;
                probe(g, y, 23)
            },
            dstore.get(name)?,
        )?);
    }

    // End-to-end toy loss through the whole model.
    let mcfg = ModelConfig {
        image_size: 8,
        patch: 4,
        channels: 2,
        flow_dim: 2,
        cam_dim: 2,
        decoder: DecoderConfig { layers: 2, heads: 2, ..DecoderConfig::default() },
        toggles: FusionToggles::ALL,
    };
    let model = Model::init(mcfg, 3)?;
    let p64 = model.params.cast::<f64>();
    let dims = TokenDims::for_image(8, 8, 4, 2, 2)?;
    let mut frng = ChaCha8Rng::seed_from_u64(4);
    let bundle = GeometryBundle {
        geo_low: rand_tensor(&mut frng, &[2, 4, 4], -1.0, 1.0).cast(),
        geo_high: rand_tensor(&mut frng, &[2, 4, 4], -1.0, 1.0).cast(),
        cam: rand_tensor(&mut frng, &[2, 4, 2], -1.0, 1.0).cast(),
        dims,
    };
    let flows: Vec<FlowField> = (0..2)
        .map(|_| FlowField::new(8, 8, (0..128).map(|_| frng.random_range(-1.0..1.0)).collect()).expect("flow"))
        .collect();
    let clip = Clip { bundle, flows };
    let gts = toy_masks(2, 8, 8, 6);
    for name in [
        crate::flowenc::CONV1_W,
        crate::fusion::GEO_W,
        crate::fusion::OUT_W,
        crate::decoder::TEMPORAL,
        "decoder.block0.attn.k.weight",
        "decoder.block1.ffn.w2",
        crate::decoder::HEAD_W,
        crate::decoder::HEAD_B,
    ] {
        let (s, c, m) = (p64.clone(), clip.clone(), gts.clone());
        rows.push(row(
            &format!("end-to-end loss {name}"),
            move |g, v| {
                let mut b = s.bind_constants(g, "");
                b.set(name, v);
                let probs = forward_graph(g, &b, &mcfg, std::slice::from_ref(&c))?;
                total_loss_graph(g, probs, &m, &LossConfig::default())
            },
            p64.get(name)?,
        )?);
    }
    Ok(rows)
}

/// Every registered check, primitives first.
pub fn run_all() -> Result<Vec<GradRow>> {
    let mut rows = op_rows()?;
    rows.extend(component_rows()?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_row_passes() {
        for r in run_all().unwrap() {
            assert!(r.passed, "{}: {}", r.name, r.max_rel_error);
        }
    }
}
