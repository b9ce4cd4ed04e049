//! Value-level compute kernels behind the tape ops.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Output length for a same-padded strided window over `t` positions.
pub fn conv_out_len(t: usize, stride: usize) -> usize {
    (t + stride - 1) / stride
}

/// Left pad so output length is ceil(t/stride).
pub fn conv_pad_left(t: usize, k: usize, stride: usize) -> usize {
    let out = conv_out_len(t, stride);
    let total = ((out - 1) * stride + k).saturating_sub(t);
    total / 2
}

fn conv_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    if x.rank() != 3 || w.rank() != 3 {
        return Err(Error::Shape(format!(
            "conv1d expects input [B,T,Cin] and kernel [k,Cin,Cout], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (b, t, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, wci, co) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if ci != wci {
        return Err(Error::Shape(format!(
            "conv1d channel mismatch: input has {} channels, kernel expects {}",
            ci, wci
        )));
    }
    Ok((b, t, ci, k, co))
}

/// Valid kernel-offset range so that 0 <= ti*stride + dk - pl < t.
#[inline]
fn valid_dk(ti: usize, stride: usize, pl: usize, k: usize, t: usize) -> (usize, usize) {
    let base = ti * stride;
    let lo = pl.saturating_sub(base);
    let hi = (t + pl).saturating_sub(base).min(k);
    (lo, hi.max(lo))
}

/// Gather padded windows: col[(bi*to+ti), dk*ci+c] = x[bi, ti*stride+dk-pl, c].
fn im2col(xd: &[f64], b: usize, t: usize, ci: usize, k: usize, stride: usize, pl: usize, to: usize) -> Vec<f64> {
    let kci = k * ci;
    let mut col = vec![0.0; b * to * kci];
    for bi in 0..b {
        for ti in 0..to {
            let rbase = (bi * to + ti) * kci;
            let (dk_lo, dk_hi) = valid_dk(ti, stride, pl, k, t);
            for dk in dk_lo..dk_hi {
                let u = ti * stride + dk - pl;
                let xbase = (bi * t + u) * ci;
                col[rbase + dk * ci..rbase + (dk + 1) * ci].copy_from_slice(&xd[xbase..xbase + ci]);
            }
        }
    }
    col
}

/// Adjoint of im2col: scatter-add window gradients back to input positions.
fn col2im(dcol: &[f64], b: usize, t: usize, ci: usize, k: usize, stride: usize, pl: usize, to: usize) -> Vec<f64> {
    let kci = k * ci;
    let mut dx = vec![0.0; b * t * ci];
    for bi in 0..b {
        for ti in 0..to {
            let rbase = (bi * to + ti) * kci;
            let (dk_lo, dk_hi) = valid_dk(ti, stride, pl, k, t);
            for dk in dk_lo..dk_hi {
                let u = ti * stride + dk - pl;
                let xbase = (bi * t + u) * ci;
                let src = &dcol[rbase + dk * ci..rbase + (dk + 1) * ci];
                for (dv, &sv) in dx[xbase..xbase + ci].iter_mut().zip(src) {
                    *dv += sv;
                }
            }
        }
    }
    dx
}

/// y[rows, n] = a[rows, m] * w[m, n], 4-row register blocking.
fn rowmajor_matmul(a: &[f64], w: &[f64], rows: usize, m: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * n];
    let mut row = 0;
    while row + 4 <= rows {
        let (yb, _) = y[row * n..].split_at_mut(4 * n);
        let (y0, yr) = yb.split_at_mut(n);
        let (y1, yr) = yr.split_at_mut(n);
        let (y2, y3) = yr.split_at_mut(n);
        let a0 = &a[row * m..(row + 1) * m];
        let a1 = &a[(row + 1) * m..(row + 2) * m];
        let a2 = &a[(row + 2) * m..(row + 3) * m];
        let a3 = &a[(row + 3) * m..(row + 4) * m];
        for p in 0..m {
            let wrow = &w[p * n..(p + 1) * n];
            let (c0, c1, c2, c3) = (a0[p], a1[p], a2[p], a3[p]);
            for ((((v0, v1), v2), v3), &wv) in
                y0.iter_mut().zip(y1.iter_mut()).zip(y2.iter_mut()).zip(y3.iter_mut()).zip(wrow)
            {
                *v0 += c0 * wv;
                *v1 += c1 * wv;
                *v2 += c2 * wv;
                *v3 += c3 * wv;
            }
        }
        row += 4;
    }
    for r in row..rows {
        let yrow = &mut y[r * n..(r + 1) * n];
        let arow = &a[r * m..(r + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let wrow = &w[p * n..(p + 1) * n];
            for (yv, &wv) in yrow.iter_mut().zip(wrow) {
                *yv += av * wv;
            }
        }
    }
    y
}

/// dw[m, n] += a[rows, m]^T * g[rows, n], 4-row register blocking.
fn rowmajor_matmul_at(a: &[f64], g: &[f64], rows: usize, m: usize, n: usize) -> Vec<f64> {
    let mut dw = vec![0.0; m * n];
    let mut row = 0;
    while row + 4 <= rows {
        let g0 = &g[row * n..(row + 1) * n];
        let g1 = &g[(row + 1) * n..(row + 2) * n];
        let g2 = &g[(row + 2) * n..(row + 3) * n];
        let g3 = &g[(row + 3) * n..(row + 4) * n];
        let a0 = &a[row * m..(row + 1) * m];
        let a1 = &a[(row + 1) * m..(row + 2) * m];
        let a2 = &a[(row + 2) * m..(row + 3) * m];
        let a3 = &a[(row + 3) * m..(row + 4) * m];
        for p in 0..m {
            let dwrow = &mut dw[p * n..(p + 1) * n];
            let (c0, c1, c2, c3) = (a0[p], a1[p], a2[p], a3[p]);
            for ((((dv, &v0), &v1), &v2), &v3) in
                dwrow.iter_mut().zip(g0).zip(g1).zip(g2).zip(g3)
            {
                *dv += c0 * v0 + c1 * v1 + c2 * v2 + c3 * v3;
            }
        }
        row += 4;
    }
    for r in row..rows {
        let grow = &g[r * n..(r + 1) * n];
        let arow = &a[r * m..(r + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let dwrow = &mut dw[p * n..(p + 1) * n];
            for (dv, &gv) in dwrow.iter_mut().zip(grow) {
                *dv += av * gv;
            }
        }
    }
    dw
}

/// d[rows, m] = g[rows, n] * w[m, n]^T, 4-row blocking with shared w row loads.
fn rowmajor_matmul_bt(g: &[f64], w: &[f64], rows: usize, n: usize, m: usize) -> Vec<f64> {
    let mut d = vec![0.0; rows * m];
    let mut row = 0;
    while row + 4 <= rows {
        let g0 = &g[row * n..(row + 1) * n];
        let g1 = &g[(row + 1) * n..(row + 2) * n];
        let g2 = &g[(row + 2) * n..(row + 3) * n];
        let g3 = &g[(row + 3) * n..(row + 4) * n];
        for p in 0..m {
            let wrow = &w[p * n..(p + 1) * n];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for ((((&wv, &v0), &v1), &v2), &v3) in wrow.iter().zip(g0).zip(g1).zip(g2).zip(g3) {
                s0 += wv * v0;
                s1 += wv * v1;
                s2 += wv * v2;
                s3 += wv * v3;
            }
            d[row * m + p] = s0;
            d[(row + 1) * m + p] = s1;
            d[(row + 2) * m + p] = s2;
            d[(row + 3) * m + p] = s3;
        }
        row += 4;
    }
    for r in row..rows {
        let grow = &g[r * n..(r + 1) * n];
        for p in 0..m {
            let wrow = &w[p * n..(p + 1) * n];
            d[r * m + p] = grow.iter().zip(wrow).map(|(&gv, &wv)| gv * wv).sum();
        }
    }
    d
}

/// Transpose a row-major [r, c] buffer to [c, r].
fn transpose_buf(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut y = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            y[j * r + i] = a[i * c + j];
        }
    }
    y
}

/// Cross-correlation, zero same-padding: y[b,t,co] = sum x[b,t*s+dk-pl,ci] w[dk,ci,co].
pub fn conv_fwd(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, t, ci, k, co) = conv_dims(x, w)?;
    let to = conv_out_len(t, stride);
    let pl = conv_pad_left(t, k, stride);
    let col = im2col(x.data(), b, t, ci, k, stride, pl, to);
    // y[row, o] = dot(col[row, :], wT[o, :]) keeps the long k*ci axis innermost
    let wt = transpose_buf(w.data(), k * ci, co);
    let y = rowmajor_matmul_bt(&col, &wt, b * to, k * ci, co);
    Tensor::new(vec![b, to, co], y)
}

/// Adjoint of conv_fwd with respect to its input.
pub fn conv_grad_input(g: &Tensor, w: &Tensor, stride: usize, in_len: usize) -> Result<Tensor> {
    if g.rank() != 3 || w.rank() != 3 {
        return Err(Error::Shape("conv_grad_input expects rank-3 tensors".into()));
    }
    let (b, to, co) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (k, ci, wco) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if co != wco || to != conv_out_len(in_len, stride) {
        return Err(Error::Shape(format!(
            "conv_grad_input shapes inconsistent: grad {:?}, kernel {:?}, in_len {}",
            g.shape(),
            w.shape(),
            in_len
        )));
    }
    let pl = conv_pad_left(in_len, k, stride);
    // dcol[row, p] = sum_o g[row, o] * w[p, o]; with wT [co, k*ci] the inner
    // accumulation runs over the long k*ci axis
    let wt = transpose_buf(w.data(), k * ci, co);
    let dcol = rowmajor_matmul(g.data(), &wt, b * to, co, k * ci);
    let dx = col2im(&dcol, b, in_len, ci, k, stride, pl, to);
    Tensor::new(vec![b, in_len, ci], dx)
}

/// Adjoint of conv_fwd with respect to its kernel.
pub fn conv_grad_kernel(x: &Tensor, g: &Tensor, stride: usize, ksize: usize) -> Result<Tensor> {
    if x.rank() != 3 || g.rank() != 3 {
        return Err(Error::Shape("conv_grad_kernel expects rank-3 tensors".into()));
    }
    let (b, t, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (gb, to, co) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    if gb != b || to != conv_out_len(t, stride) {
        return Err(Error::Shape(format!(
            "conv_grad_kernel shapes inconsistent: input {:?}, grad {:?}",
            x.shape(),
            g.shape()
        )));
    }
    let pl = conv_pad_left(t, ksize, stride);
    let col = im2col(x.data(), b, t, ci, ksize, stride, pl, to);
    // accumulate dwT[o, p] += g[row, o] * col[row, p] (long k*ci inner axis),
    // then transpose back to [k, ci, co] layout
    let dwt = rowmajor_matmul_at(g.data(), &col, b * to, co, ksize * ci);
    let dw = transpose_buf(&dwt, co, ksize * ci);
    Tensor::new(vec![ksize, ci, co], dw)
}

/// Non-overlapping window means; a trailing partial window averages its actual length.
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Param("avg_pool1d kernel size must be >= 1".into()));
    }
    if x.rank() != 3 {
        return Err(Error::Shape("avg_pool1d expects input [B,T,C]".into()));
    }
    let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let to = (t + k - 1) / k;
    let mut y = vec![0.0; b * to * c];
    let xd = x.data();
    for bi in 0..b {
        for ti in 0..to {
            let lo = ti * k;
            let hi = (lo + k).min(t);
            let inv = 1.0 / (hi - lo) as f64;
            let ybase = (bi * to + ti) * c;
            for u in lo..hi {
                let xbase = (bi * t + u) * c;
                for ch in 0..c {
                    y[ybase + ch] += xd[xbase + ch] * inv;
                }
            }
        }
    }
    Tensor::new(vec![b, to, c], y)
}

/// Adjoint of avg_pool: spreads each pooled gradient evenly over its window.
pub fn avg_pool_back(g: &Tensor, k: usize, in_len: usize) -> Result<Tensor> {
    if g.rank() != 3 {
        return Err(Error::Shape("avg_pool_back expects rank-3 tensor".into()));
    }
    let (b, to, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    if to != (in_len + k - 1) / k {
        return Err(Error::Shape("avg_pool_back length inconsistent".into()));
    }
    let mut dx = vec![0.0; b * in_len * c];
    let gd = g.data();
    for bi in 0..b {
        for ti in 0..to {
            let lo = ti * k;
            let hi = (lo + k).min(in_len);
            let inv = 1.0 / (hi - lo) as f64;
            let gbase = (bi * to + ti) * c;
            for u in lo..hi {
                let xbase = (bi * in_len + u) * c;
                for ch in 0..c {
                    dx[xbase + ch] += gd[gbase + ch] * inv;
                }
            }
        }
    }
    Tensor::new(vec![b, in_len, c], dx)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Shape(format!(
            "matmul shape mismatch: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, kk) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let y = rowmajor_matmul(a.data(), b.data(), m, kk, n);
    Tensor::new(vec![m, n], y)
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::Shape("transpose expects a rank-2 tensor".into()));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            y[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(vec![n, m], y)
}

/// Sum one axis of a contiguous buffer described by `shape`, collapsing it to 1.
fn reduce_one_axis(data: &[f64], shape: &mut Vec<usize>, axis: usize) -> Vec<f64> {
    let (outer, dim, inner) = axis_split(shape, axis);
    let mut y = vec![0.0; outer * inner];
    for o in 0..outer {
        let ybase = o * inner;
        for d in 0..dim {
            let xbase = (o * dim + d) * inner;
            let xrow = &data[xbase..xbase + inner];
            let yrow = &mut y[ybase..ybase + inner];
            for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                *yv += xv;
            }
        }
    }
    shape[axis] = 1;
    y
}

/// Sum over `axes`, keeping reduced dimensions as extent 1.
pub fn reduce_sum(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let shape = x.shape();
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::Shape(format!("reduce axis {} out of range for {:?}", a, shape)));
        }
    }
    let mut cur_shape = shape.to_vec();
    let mut cur = x.data().to_vec();
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &a in &sorted {
        cur = reduce_one_axis(&cur, &mut cur_shape, a);
    }
    Tensor::new(cur_shape, cur)
}

/// Expand `x` to `target` shape, trailing-aligned, repeating broadcast axes.
pub fn broadcast_to(x: &Tensor, target: &[usize]) -> Result<Tensor> {
    if x.shape() == target {
        return Ok(x.clone());
    }
    if x.rank() > target.len() {
        return Err(Error::Shape(format!(
            "cannot broadcast {:?} to {:?}",
            x.shape(),
            target
        )));
    }
    let offset = target.len() - x.rank();
    for (i, &d) in x.shape().iter().enumerate() {
        if d != 1 && d != target[offset + i] {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} to {:?}",
                x.shape(),
                target
            )));
        }
    }
    // Expand axis by axis from the innermost so each step is either a block
    // copy or a constant splat over a contiguous run.
    let offset = target.len() - x.rank();
    let mut cur = x.data().to_vec();
    let mut cur_shape: Vec<usize> = std::iter::repeat(1)
        .take(offset)
        .chain(x.shape().iter().copied())
        .collect();
    for d in (0..target.len()).rev() {
        if cur_shape[d] == target[d] {
            continue;
        }
        let (outer, _, inner) = axis_split(&cur_shape, d);
        let reps = target[d];
        let mut next = Vec::with_capacity(outer * reps * inner);
        for o in 0..outer {
            let run = &cur[o * inner..(o + 1) * inner];
            for _ in 0..reps {
                next.extend_from_slice(run);
            }
        }
        cur = next;
        cur_shape[d] = reps;
    }
    Tensor::new(target.to_vec(), cur)
}

/// Split a shape at `axis` into (outer, dim, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, dim, inner)
}

pub fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(Error::Shape(format!(
            "slice [{}..{}) on axis {} of {:?}",
            start,
            start + len,
            axis,
            x.shape()
        )));
    }
    let (outer, dim, inner) = axis_split(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let mut y = Vec::with_capacity(outer * len * inner);
    let xd = x.data();
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        y.extend_from_slice(&xd[base..base + len * inner]);
    }
    Tensor::new(out_shape, y)
}

pub fn pad_zero_axis(x: &Tensor, axis: usize, before: usize, after: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Shape("pad axis out of range".into()));
    }
    let (outer, dim, inner) = axis_split(x.shape(), axis);
    let new_dim = before + dim + after;
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = new_dim;
    let mut y = vec![0.0; outer * new_dim * inner];
    let xd = x.data();
    for o in 0..outer {
        let src = o * dim * inner;
        let dst = (o * new_dim + before) * inner;
        y[dst..dst + dim * inner].copy_from_slice(&xd[src..src + dim * inner]);
    }
    Tensor::new(out_shape, y)
}

pub fn concat_axis(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Param("concat of zero tensors".into()));
    }
    let rank = parts[0].rank();
    if axis >= rank {
        return Err(Error::Shape("concat axis out of range".into()));
    }
    for p in parts {
        if p.rank() != rank {
            return Err(Error::Shape("concat rank mismatch".into()));
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != parts[0].shape()[d] {
                return Err(Error::Shape(format!(
                    "concat shape mismatch: {:?} vs {:?}",
                    p.shape(),
                    parts[0].shape()
                )));
            }
        }
    }
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = total;
    let (outer, _, inner) = axis_split(&out_shape, axis);
    let mut y = vec![0.0; outer * total * inner];
    let mut at = 0usize;
    for p in parts {
        let dim = p.shape()[axis];
        let pd = p.data();
        for o in 0..outer {
            let src = o * dim * inner;
            let dst = (o * total + at) * inner;
            y[dst..dst + dim * inner].copy_from_slice(&pd[src..src + dim * inner]);
        }
        at += dim;
    }
    Tensor::new(out_shape, y)
}
