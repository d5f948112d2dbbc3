//! Flow encoder: a two-layer 3x3 CNN over (u, v) at full resolution,
//! bilinearly downsampled to the patch grid and flattened to tokens.

use rand::Rng;

use crate::dataio::FlowField;
use crate::diffcore::init::xavier_uniform;
use crate::diffcore::{Bound, Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const CONV1_W: &str = "flow.conv1.weight";
pub const CONV1_B: &str = "flow.conv1.bias";
pub const CONV2_W: &str = "flow.conv2.weight";
pub const CONV2_B: &str = "flow.conv2.bias";

/// Adds randomly initialised flow-CNN weights (zero biases) to `store`.
pub fn init_params<T: Real>(store: &mut ParamStore<T>, flow_dim: usize, rng: &mut impl Rng) -> Result<()> {
    if flow_dim < 2 || !flow_dim.is_multiple_of(2) {
        return Err(Error::Config(format!("flow token width must be even and >= 2, got {flow_dim}")));
    }
    let mid = flow_dim / 2;
    store.insert(CONV1_W, xavier_uniform(rng, &[mid, 2, 3, 3], 2 * 9, mid * 9))?;
    store.insert(CONV1_B, Tensor::zeros(&[mid]))?;
    store.insert(CONV2_W, xavier_uniform(rng, &[flow_dim, mid, 3, 3], mid * 9, flow_dim * 9))?;
    store.insert(CONV2_B, Tensor::zeros(&[flow_dim]))?;
    Ok(())
}

/// Extends `N - 1` pairwise flows to one per frame by repeating the last.
pub fn last_frame_flow(flows: &[FlowField]) -> Result<Vec<FlowField>> {
    let last = flows
        .last()
        .ok_or_else(|| Error::Data("need at least one flow (two frames) to encode motion".into()))?;
    let mut out = flows.to_vec();
    out.push(last.clone());
    Ok(out)
}

/// Stacks flows as `[N, 2, H, W]` (u plane, then v plane).
pub fn flow_tensor<T: Real>(flows: &[FlowField], height: usize, width: usize) -> Result<Tensor<T>> {
    let plane = height * width;
    let mut data = vec![T::zero(); flows.len() * 2 * plane];
    for (n, f) in flows.iter().enumerate() {
        if (f.height(), f.width()) != (height, width) {
            return Err(Error::shape("flow field", [height, width], [f.height(), f.width()]));
        }
        let base = n * 2 * plane;
        for (i, uv) in f.vectors().chunks_exact(2).enumerate() {
            data[base + i] = T::of(uv[0] as f64);
            data[base + plane + i] = T::of(uv[1] as f64);
        }
    }
    Tensor::new(vec![flows.len(), 2, height, width], data)
}

/// `flow: [N, 2, H, W]` to tokens `[N, h*w, D_flow]`.
pub fn encode_flow_graph<T: Real>(g: &mut Graph<T>, flow: Var, p: &Bound, grid: (usize, usize)) -> Result<Var> {
    let n = g.shape(flow)[0];
    let h1 = g.conv2d(flow, p.get(CONV1_W)?, Some(p.get(CONV1_B)?))?;
    let a1 = g.relu(h1);
    let h2 = g.conv2d(a1, p.get(CONV2_W)?, Some(p.get(CONV2_B)?))?;
    let d = g.shape(h2)[1];
    let down = g.resize_bilinear(h2, grid.0, grid.1)?;
    let tokens = g.permute(down, &[0, 2, 3, 1])?;
    g.reshape(tokens, &[n, grid.0 * grid.1, d])
}

/// Forward-only encoding with `f32` parameters.
pub fn encode_flow(flows: &[FlowField], params: &ParamStore<f32>, grid: (usize, usize)) -> Result<Tensor<f32>> {
    let first = flows.first().ok_or_else(|| Error::Data("no flows to encode".into()))?;
    let mut g = Graph::new();
    let x = g.constant(flow_tensor(flows, first.height(), first.width())?);
    let p = params.bind(&mut g, "flow.");
    let out = encode_flow_graph(&mut g, x, &p, grid)?;
    Ok(g.value(out).clone())
}
