//! Array kernels behind the tape ops.
//!
//! Every output cell is produced by exactly one writer with a fixed
//! summation order, and the serial and parallel drivers run the same
//! per-chunk closure, so results are bitwise identical for any worker count.

use rayon::prelude::*;

use crate::threads;

/// Shape bookkeeping for a valid (no padding, stride 1) convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn for_each_chunk<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if threads::parallel_enabled() {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

pub(crate) fn for_each_chunk2<A, B, F>(
    a: &mut [A],
    b: &mut [B],
    chunk_a: usize,
    chunk_b: usize,
    f: F,
) where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    if threads::parallel_enabled() {
        a.par_chunks_mut(chunk_a)
            .zip(b.par_chunks_mut(chunk_b))
            .enumerate()
            .for_each(|(i, (ca, cb))| f(i, ca, cb));
    } else {
        a.chunks_mut(chunk_a)
            .zip(b.chunks_mut(chunk_b))
            .enumerate()
            .for_each(|(i, (ca, cb))| f(i, ca, cb));
    }
}

/// Dot product with a fixed 4-lane accumulation grouping.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (qa, qb) in ca.by_ref().zip(cb.by_ref()) {
        lanes[0] += qa[0] * qb[0];
        lanes[1] += qa[1] * qb[1];
        lanes[2] += qa[2] * qb[2];
        lanes[3] += qa[3] * qb[3];
    }
    let mut rest = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        rest += x * y;
    }
    (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]) + rest
}

pub(crate) fn sigmoid_scalar(p: f64) -> f64 {
    if p >= 0.0 {
        1.0 / (1.0 + (-p).exp())
    } else {
        let e = p.exp();
        e / (1.0 + e)
    }
}

const ELEMWISE_CHUNK: usize = 8192;

/// Elementwise `dst[i] = f(src[i])`, parallel over fixed-size chunks.
pub(crate) fn unary_map<F>(src: &[f64], dst: &mut [f64], f: F)
where
    F: Fn(f64) -> f64 + Sync + Send,
{
    debug_assert_eq!(src.len(), dst.len());
    let apply = |i: usize, chunk: &mut [f64]| {
        let s = &src[i * ELEMWISE_CHUNK..][..chunk.len()];
        for (d, v) in chunk.iter_mut().zip(s) {
            *d = f(*v);
        }
    };
    if threads::parallel_enabled() && src.len() > ELEMWISE_CHUNK {
        dst.par_chunks_mut(ELEMWISE_CHUNK)
            .enumerate()
            .for_each(|(i, c)| apply(i, c));
    } else {
        dst.chunks_mut(ELEMWISE_CHUNK)
            .enumerate()
            .for_each(|(i, c)| apply(i, c));
    }
}

/// Elementwise `dst[i] += f(a[i], b[i])`, parallel over fixed-size chunks.
pub(crate) fn zip2_accum<F>(dst: &mut [f64], a: &[f64], b: &[f64], f: F)
where
    F: Fn(f64, f64) -> f64 + Sync + Send,
{
    debug_assert_eq!(dst.len(), a.len());
    debug_assert_eq!(dst.len(), b.len());
    let apply = |i: usize, chunk: &mut [f64]| {
        let base = i * ELEMWISE_CHUNK;
        let sa = &a[base..][..chunk.len()];
        let sb = &b[base..][..chunk.len()];
        for ((d, x), y) in chunk.iter_mut().zip(sa).zip(sb) {
            *d += f(*x, *y);
        }
    };
    if threads::parallel_enabled() && dst.len() > ELEMWISE_CHUNK {
        dst.par_chunks_mut(ELEMWISE_CHUNK)
            .enumerate()
            .for_each(|(i, c)| apply(i, c));
    } else {
        dst.chunks_mut(ELEMWISE_CHUNK)
            .enumerate()
            .for_each(|(i, c)| apply(i, c));
    }
}

/// y[n,k,i,j] = b[k] + sum_{c,u,v} x[n,c,i+u,j+v] * w[k,c,u,v]
///
/// Output rows accumulate all kernel taps in one sweep so each row stays in
/// L1 instead of the whole plane being re-walked per tap.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims, y: &mut [f64]) {
    let in_plane = d.h * d.w;
    let out_plane = d.out_h * d.out_w;
    let x_sample = d.in_ch * in_plane;
    let w_filter = d.in_ch * d.k * d.k;
    for_each_chunk(y, out_plane, |nk, plane| {
        let n = nk / d.out_ch;
        let kf = nk % d.out_ch;
        let xs = &x[n * x_sample..][..x_sample];
        let wf = &w[kf * w_filter..][..w_filter];
        for i in 0..d.out_h {
            let yrow = &mut plane[i * d.out_w..][..d.out_w];
            yrow.fill(b[kf]);
            for c in 0..d.in_ch {
                let xp = &xs[c * in_plane..][..in_plane];
                for u in 0..d.k {
                    let xrow_full = &xp[(i + u) * d.w..][..d.w];
                    for v in 0..d.k {
                        let wv = wf[(c * d.k + u) * d.k + v];
                        let xrow = &xrow_full[v..][..d.out_w];
                        for (yv, xv) in yrow.iter_mut().zip(xrow) {
                            *yv += wv * xv;
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn conv2d_backward_x(g: &[f64], w: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let in_plane = d.h * d.w;
    let out_plane = d.out_h * d.out_w;
    let g_sample = d.out_ch * out_plane;
    let w_filter = d.in_ch * d.k * d.k;
    for_each_chunk(dx, in_plane, |nc, plane| {
        let n = nc / d.in_ch;
        let c = nc % d.in_ch;
        let gs = &g[n * g_sample..][..g_sample];
        for kf in 0..d.out_ch {
            let gp = &gs[kf * out_plane..][..out_plane];
            for u in 0..d.k {
                for v in 0..d.k {
                    let wv = w[kf * w_filter + (c * d.k + u) * d.k + v];
                    for i in 0..d.out_h {
                        let grow = &gp[i * d.out_w..][..d.out_w];
                        let xrow = &mut plane[(i + u) * d.w + v..][..d.out_w];
                        for (xv, gv) in xrow.iter_mut().zip(grow) {
                            *xv += wv * gv;
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn conv2d_backward_w(x: &[f64], g: &[f64], d: &ConvDims, dw: &mut [f64]) {
    let in_plane = d.h * d.w;
    let out_plane = d.out_h * d.out_w;
    let x_sample = d.in_ch * in_plane;
    let g_sample = d.out_ch * out_plane;
    let w_filter = d.in_ch * d.k * d.k;
    for_each_chunk(dw, w_filter, |kf, wgrad| {
        // Row-centric: each gradient row is read once per (c, u) tap pair
        // while all k*k running sums for a channel stay on the stack.
        let taps = d.k * d.k;
        let mut acc = vec![0.0f64; w_filter];
        for n in 0..d.batch {
            let xs = &x[n * x_sample..][..x_sample];
            let gp = &g[n * g_sample + kf * out_plane..][..out_plane];
            for c in 0..d.in_ch {
                let xp = &xs[c * in_plane..][..in_plane];
                let acc_c = &mut acc[c * taps..][..taps];
                for i in 0..d.out_h {
                    let grow = &gp[i * d.out_w..][..d.out_w];
                    for u in 0..d.k {
                        let xrow_full = &xp[(i + u) * d.w..][..d.w];
                        for v in 0..d.k {
                            acc_c[u * d.k + v] += dot(grow, &xrow_full[v..][..d.out_w]);
                        }
                    }
                }
            }
        }
        for (wg, a) in wgrad.iter_mut().zip(&acc) {
            *wg += a;
        }
    });
}

pub(crate) fn conv2d_backward_b(g: &[f64], d: &ConvDims, db: &mut [f64]) {
    let out_plane = d.out_h * d.out_w;
    let g_sample = d.out_ch * out_plane;
    for_each_chunk(db, 1, |kf, cell| {
        let mut acc = 0.0;
        for n in 0..d.batch {
            let gp = &g[n * g_sample + kf * out_plane..][..out_plane];
            let mut plane_sum = 0.0;
            for gv in gp {
                plane_sum += gv;
            }
            acc += plane_sum;
        }
        cell[0] += acc;
    });
}

/// y[n,j] = b[j] + sum_f x[n,f] * w[f,j]
pub(crate) fn dense_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    f_in: usize,
    f_out: usize,
    y: &mut [f64],
) {
    for_each_chunk(y, f_out, |n, yrow| {
        yrow.copy_from_slice(b);
        let xrow = &x[n * f_in..][..f_in];
        for (f, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[f * f_out..][..f_out];
            for (yv, wv) in yrow.iter_mut().zip(wrow) {
                *yv += xv * wv;
            }
        }
    });
}

pub(crate) fn dense_backward_x(g: &[f64], w: &[f64], f_in: usize, f_out: usize, dx: &mut [f64]) {
    for_each_chunk(dx, f_in, |n, dxrow| {
        let grow = &g[n * f_out..][..f_out];
        for (f, dxv) in dxrow.iter_mut().enumerate() {
            *dxv += dot(&w[f * f_out..][..f_out], grow);
        }
    });
}

pub(crate) fn dense_backward_w(
    x: &[f64],
    g: &[f64],
    batch: usize,
    f_in: usize,
    f_out: usize,
    dw: &mut [f64],
) {
    for_each_chunk(dw, f_out, |f, dwrow| {
        for n in 0..batch {
            let xv = x[n * f_in + f];
            if xv == 0.0 {
                continue;
            }
            let grow = &g[n * f_out..][..f_out];
            for (dwv, gv) in dwrow.iter_mut().zip(grow) {
                *dwv += xv * gv;
            }
        }
    });
}

/// out[j] += sum over rows of m[row, j]
pub(crate) fn col_sums(m: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for n in 0..rows {
        let row = &m[n * cols..][..cols];
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Row-wise numerically stable softmax.
pub(crate) fn softmax_rows(x: &[f64], cols: usize, y: &mut [f64]) {
    for_each_chunk(y, cols, |n, yrow| {
        let xrow = &x[n * cols..][..cols];
        let m = xrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (yv, &xv) in yrow.iter_mut().zip(xrow) {
            let e = (xv - m).exp();
            *yv = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for yv in yrow.iter_mut() {
            *yv *= inv;
        }
    });
}

/// Forward max-pool; records the flat input index of each window maximum
/// (first maximum in row-major scan order on ties).
#[allow(clippy::too_many_arguments)]
pub(crate) fn maxpool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    pool: usize,
    out_h: usize,
    out_w: usize,
    y: &mut [f64],
    argmax: &mut [usize],
) {
    let in_plane = h * w;
    let out_plane = out_h * out_w;
    let _ = planes;
    for_each_chunk2(y, argmax, out_plane, out_plane, |nc, yplane, aplane| {
        let base = nc * in_plane;
        let xplane = &x[base..][..in_plane];
        for io in 0..out_h {
            for jo in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for di in 0..pool {
                    let row = io * pool + di;
                    for dj in 0..pool {
                        let idx = row * w + jo * pool + dj;
                        let v = xplane[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                yplane[io * out_w + jo] = best;
                aplane[io * out_w + jo] = base + best_idx;
            }
        }
    });
}

/// Per-channel mean and population variance over (batch, spatial) positions.
pub(crate) fn channel_mean_var(
    x: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    let m = (batch * plane) as f64;
    for_each_chunk2(&mut mean, &mut var, 1, 1, |c, mc, vc| {
        let mut sum = 0.0;
        for n in 0..batch {
            let p = &x[(n * channels + c) * plane..][..plane];
            let mut s = 0.0;
            for v in p {
                s += v;
            }
            sum += s;
        }
        let mu = sum / m;
        let mut sq = 0.0;
        for n in 0..batch {
            let p = &x[(n * channels + c) * plane..][..plane];
            let mut s = 0.0;
            for v in p {
                let d = v - mu;
                s += d * d;
            }
            sq += s;
        }
        mc[0] = mu;
        vc[0] = sq / m;
    });
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..13).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..13).map(|i| 2.0 - (i as f64) * 0.7).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_scalar(500.0), 1.0);
        let tiny = sigmoid_scalar(-500.0);
        assert!(tiny.is_finite() && (0.0..1e-200).contains(&tiny));
        assert_eq!(sigmoid_scalar(0.0), 0.5);
    }
}
