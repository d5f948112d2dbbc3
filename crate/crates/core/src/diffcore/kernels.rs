//! Slice-level numeric kernels shared by the graph ops.

use super::tensor::Real;

fn check(a: usize, b: usize, out: usize, m: usize, k: usize, n: usize) {
    assert!(a >= m * k && b >= k * n && out >= m * n, "matmul operand too short");
}

/// `out[m, n] += a[m, k] * b[k, n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check(a.len(), b.len(), out.len(), m, k, n);
    T::gemm_acc(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out, (n as isize, 1));
}

/// `out[m, n] += a[m, k] * b[n, k]^T`
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check(a.len(), b.len(), out.len(), m, k, n);
    T::gemm_acc(m, k, n, a, (k as isize, 1), b, (1, k as isize), out, (n as isize, 1));
}

/// `out[k, n] += a[m, k]^T * b[m, n]`
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check(a.len(), b.len(), out.len(), k, m, n);
    T::gemm_acc(k, m, n, a, (1, k as isize), b, (n as isize, 1), out, (n as isize, 1));
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub k_h: usize,
    pub k_w: usize,
}

impl ConvDims {
    fn pad(&self) -> (isize, isize) {
        ((self.k_h / 2) as isize, (self.k_w / 2) as isize)
    }

    /// Valid output x-range for a horizontal tap offset `dx`.
    fn x_range(&self, dx: isize) -> (usize, usize) {
        let w = self.width as isize;
        let lo = (-dx).max(0);
        let hi = (w - dx).min(w);
        (lo as usize, hi.max(lo) as usize)
    }
}

/// Im2col buffer for output rows `[y0, y1)` of one image: rows are
/// `(ci, ky, kx)`, columns are output pixels.
fn im2col<T: Real>(x: &[T], d: &ConvDims, y0: usize, y1: usize, cols: &mut [T]) {
    let (ph, pw) = d.pad();
    let band = (y1 - y0) * d.width;
    let plane = d.height * d.width;
    cols[..d.c_in * d.k_h * d.k_w * band].fill(T::zero());
    for ci in 0..d.c_in {
        let xin = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..d.k_h {
            let dy = ky as isize - ph;
            for kx in 0..d.k_w {
                let dx = kx as isize - pw;
                let row = ((ci * d.k_h + ky) * d.k_w + kx) * band;
                let (x0, x1) = d.x_range(dx);
                for y in y0..y1 {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= d.height as isize || x0 >= x1 {
                        continue;
                    }
                    let dst = row + (y - y0) * d.width;
                    let src = (sy as usize * d.width) as isize + dx;
                    cols[dst + x0..dst + x1].copy_from_slice(&xin[(src + x0 as isize) as usize..(src + x1 as isize) as usize]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Real>(cols: &[T], d: &ConvDims, y0: usize, y1: usize, dx_img: &mut [T]) {
    let (ph, pw) = d.pad();
    let band = (y1 - y0) * d.width;
    let plane = d.height * d.width;
    for ci in 0..d.c_in {
        let dxi = &mut dx_img[ci * plane..(ci + 1) * plane];
        for ky in 0..d.k_h {
            let dy = ky as isize - ph;
            for kx in 0..d.k_w {
                let dx = kx as isize - pw;
                let row = ((ci * d.k_h + ky) * d.k_w + kx) * band;
                let (x0, x1) = d.x_range(dx);
                for y in y0..y1 {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= d.height as isize || x0 >= x1 {
                        continue;
                    }
                    let src = row + (y - y0) * d.width;
                    let dst = (sy as usize * d.width) as isize + dx;
                    let target = &mut dxi[(dst + x0 as isize) as usize..(dst + x1 as isize) as usize];
                    for (t, &g) in target.iter_mut().zip(&cols[src + x0..src + x1]) {
                        *t += g;
                    }
                }
            }
        }
    }
}

/// Output rows per im2col band, keeping the buffer near 4M scalars.
fn band_rows(d: &ConvDims) -> usize {
    let per_row = (d.c_in * d.k_h * d.k_w * d.width).max(1);
    ((4 << 20) / per_row).clamp(1, d.height.max(1))
}

/// Same-padded, stride-1 cross-correlation. `x: [B, Cin, H, W]`,
/// `w: [Cout, Cin, kh, kw]`, `out: [B, Cout, H, W]` (accumulated into).
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T], d: ConvDims) {
    let plane = d.height * d.width;
    let ckk = d.c_in * d.k_h * d.k_w;
    let rows = band_rows(&d);
    let mut cols = vec![T::zero(); ckk * rows * d.width];
    let mut tmp = vec![T::zero(); d.c_out * rows * d.width];
    for b in 0..d.batch {
        let xb = &x[b * d.c_in * plane..(b + 1) * d.c_in * plane];
        let ob = &mut out[b * d.c_out * plane..(b + 1) * d.c_out * plane];
        let mut y0 = 0;
        while y0 < d.height {
            let y1 = (y0 + rows).min(d.height);
            let band = (y1 - y0) * d.width;
            im2col(xb, &d, y0, y1, &mut cols);
            tmp[..d.c_out * band].fill(T::zero());
            matmul_acc(w, &cols[..ckk * band], &mut tmp[..d.c_out * band], d.c_out, ckk, band);
            for co in 0..d.c_out {
                let add = bias.map_or(T::zero(), |bs| bs[co]);
                let dst = &mut ob[co * plane + y0 * d.width..co * plane + y1 * d.width];
                for (o, &t) in dst.iter_mut().zip(&tmp[co * band..(co + 1) * band]) {
                    *o += t + add;
                }
            }
            y0 = y1;
        }
    }
}

/// Gradients of [`conv2d_forward`]. Each output slice is optional and
/// accumulated into.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
    d: ConvDims,
) {
    let plane = d.height * d.width;
    let ckk = d.c_in * d.k_h * d.k_w;
    let rows = band_rows(&d);
    let mut cols = vec![T::zero(); ckk * rows * d.width];
    let mut gband = vec![T::zero(); d.c_out * rows * d.width];
    for b in 0..d.batch {
        let xb = &x[b * d.c_in * plane..(b + 1) * d.c_in * plane];
        let gb = &dy[b * d.c_out * plane..(b + 1) * d.c_out * plane];
        if let Some(db) = db.as_deref_mut() {
            for co in 0..d.c_out {
                db[co] += gb[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
            }
        }
        let mut y0 = 0;
        while y0 < d.height {
            let y1 = (y0 + rows).min(d.height);
            let band = (y1 - y0) * d.width;
            for co in 0..d.c_out {
                gband[co * band..(co + 1) * band]
                    .copy_from_slice(&gb[co * plane + y0 * d.width..co * plane + y1 * d.width]);
            }
            let g = &gband[..d.c_out * band];
            if let Some(dw) = dw.as_deref_mut() {
                im2col(xb, &d, y0, y1, &mut cols);
                matmul_nt_acc(g, &cols[..ckk * band], dw, d.c_out, band, ckk);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let c = &mut cols[..ckk * band];
                c.fill(T::zero());
                matmul_tn_acc(w, g, c, d.c_out, ckk, band);
                col2im(c, &d, y0, y1, &mut dx[b * d.c_in * plane..(b + 1) * d.c_in * plane]);
            }
            y0 = y1;
        }
    }
}

/// One output coordinate of a linear resize: two source taps and weights.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Half-pixel-centre linear interpolation taps (`align_corners = false`).
pub fn resize_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l = s - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - l,
                w1: l,
            }
        })
        .collect()
}
