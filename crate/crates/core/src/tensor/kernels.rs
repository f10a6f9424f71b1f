//! Loop kernels, plus convolution as patch matrices times a GEMM. Every
//! reduction runs in a fixed order on one thread, so results are
//! bit-reproducible.

use serde::{Deserialize, Serialize};

use super::{numel, Tensor};
use crate::error::{ensure, Error, Result};

/// Border handling for stride-1 "same" convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Padding {
    #[default]
    Zero,
    /// Periodic wrap-around; used where closed forms assume no border.
    Circular,
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out`, zero on broadcast or padded axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 || out[i + pad] == 1 {
            strides[i + pad] = if shape[i] == 1 { 0 } else { acc };
        }
        acc *= shape[i];
    }
    strides
}

/// Visit `out` row by row: `f(offset_a, offset_b, len, stride_a, stride_b)`.
fn walk2(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    if out.is_empty() {
        f(0, 0, 1, 0, 0);
        return;
    }
    if numel(out) == 0 {
        return;
    }
    let r = out.len();
    let last = out[r - 1];
    let mut idx = vec![0usize; r - 1];
    loop {
        let mut oa = 0;
        let mut ob = 0;
        for i in 0..r - 1 {
            oa += idx[i] * sa[i];
            ob += idx[i] * sb[i];
        }
        f(oa, ob, last, sa[r - 1], sb[r - 1]);
        let mut i = r - 1;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            idx[i] += 1;
            if idx[i] < out[i] {
                break;
            }
            idx[i] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = aligned_strides(a.shape(), &out);
    let sb = aligned_strides(b.shape(), &out);
    let (da, db) = (a.data(), b.data());
    let mut data = Vec::with_capacity(numel(&out));
    walk2(&out, &sa, &sb, |oa, ob, len, ta, tb| {
        for t in 0..len {
            data.push(f(da[oa + t * ta], db[ob + t * tb]));
        }
    });
    Ok(Tensor::from_parts(out, data))
}

fn check_reducible(src: &[usize], target: &[usize]) -> Result<()> {
    let ok = target.len() <= src.len()
        && target
            .iter()
            .zip(&src[src.len() - target.len()..])
            .all(|(&t, &s)| t == s || t == 1);
    if ok {
        Ok(())
    } else {
        Err(Error::Shape {
            op: "sum_to",
            lhs: src.to_vec(),
            rhs: target.to_vec(),
        })
    }
}

pub(crate) fn sum_to(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    if t.shape() == target {
        return Ok(t.clone());
    }
    check_reducible(t.shape(), target)?;
    let src = t.shape();
    let s_src = aligned_strides(src, src);
    let s_dst = aligned_strides(target, src);
    let mut out = vec![0.0; numel(target)];
    let d = t.data();
    walk2(src, &s_src, &s_dst, |oa, ob, len, ta, tb| {
        for k in 0..len {
            out[ob + k * tb] += d[oa + k * ta];
        }
    });
    Ok(Tensor::from_parts(target.to_vec(), out))
}

pub(crate) fn broadcast_to(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    if t.shape() == target {
        return Ok(t.clone());
    }
    let out = broadcast_shape(t.shape(), target)?;
    ensure!(out == target, "cannot broadcast {:?} to {:?}", t.shape(), target);
    let s = aligned_strides(t.shape(), target);
    let zeros = vec![0; target.len()];
    let d = t.data();
    let mut data = Vec::with_capacity(numel(target));
    walk2(target, &s, &zeros, |oa, _, len, ta, _| {
        for k in 0..len {
            data.push(d[oa + k * ta]);
        }
    });
    Ok(Tensor::from_parts(target.to_vec(), data))
}

pub(crate) fn check_conv(input: &[usize], weight: &[usize]) -> Result<()> {
    ensure!(
        input.len() == 4 && weight.len() == 4,
        "conv2d expects NCHW input and OCkk weight, got {:?} and {:?}",
        input,
        weight
    );
    ensure!(
        weight[2] == weight[3] && weight[2] % 2 == 1,
        "conv2d kernel must be square with odd extent, got {:?}",
        weight
    );
    if input[1] != weight[1] {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        });
    }
    Ok(())
}

/// Contiguous runs `(dst_start, src_start, len)` such that
/// `src = dst + shift` (mod `n` when circular), restricted to valid indices.
fn segments(n: usize, shift: isize, padding: Padding) -> ([(usize, usize, usize); 2], usize) {
    let mut segs = [(0, 0, 0); 2];
    match padding {
        Padding::Zero => {
            let lo = (-shift).max(0) as usize;
            let hi = (n as isize - shift).min(n as isize).max(0) as usize;
            if hi > lo {
                segs[0] = (lo, (lo as isize + shift) as usize, hi - lo);
                (segs, 1)
            } else {
                (segs, 0)
            }
        }
        Padding::Circular => {
            let s = shift.rem_euclid(n as isize) as usize;
            if s == 0 {
                segs[0] = (0, 0, n);
                return (segs, 1);
            }
            // dst in [0, n-s) reads src [s, n); dst in [n-s, n) reads src [0, s)
            segs[0] = (0, s, n - s);
            segs[1] = (n - s, 0, s);
            (segs, 2)
        }
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, every operand given as a
/// slice with `(row, col)` strides. `c` is row-major and contiguous.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), beta: f64, c: &mut [f64]) {
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.0.len() >= extent(m, k, a.1, a.2) && b.0.len() >= extent(k, n, b.1, b.2) && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch matrix of one example: row `(c, u, v)` holds channel `c` shifted by
/// `(u - p, v - p)`, one column per output pixel.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, padding: Padding, cols: &mut [f64]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for u in 0..k {
            let (rs, nr) = segments(h, u as isize - p, padding);
            for v in 0..k {
                let (cs, nc) = segments(w, v as isize - p, padding);
                let dst = &mut cols[((ci * k + u) * k + v) * hw..((ci * k + u) * k + v + 1) * hw];
                if padding == Padding::Zero {
                    zero_outside(dst, h, w, &rs[..nr], &cs[..nc]);
                }
                for &(r_dst, r_src, r_len) in &rs[..nr] {
                    for r in 0..r_len {
                        let (drow, srow) = ((r_dst + r) * w, (r_src + r) * w);
                        for &(c_dst, c_src, c_len) in &cs[..nc] {
                            dst[drow + c_dst..drow + c_dst + c_len].copy_from_slice(&src[srow + c_src..srow + c_src + c_len]);
                        }
                    }
                }
            }
        }
    }
}

/// Zero the entries of an `h x w` plane not covered by the (at most one)
/// row and column segment.
fn zero_outside(dst: &mut [f64], h: usize, w: usize, rs: &[(usize, usize, usize)], cs: &[(usize, usize, usize)]) {
    let (Some(&(r0, _, rl)), Some(&(c0, _, cl))) = (rs.first(), cs.first()) else {
        dst.fill(0.0);
        return;
    };
    dst[..r0 * w].fill(0.0);
    dst[(r0 + rl) * w..h * w].fill(0.0);
    for r in r0..r0 + rl {
        dst[r * w..r * w + c0].fill(0.0);
        dst[r * w + c0 + cl..(r + 1) * w].fill(0.0);
    }
}

/// Adjoint of [`im2col`]: scatter-add patch rows back onto the channels.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, padding: Padding, x: &mut [f64]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for u in 0..k {
            let (rs, nr) = segments(h, u as isize - p, padding);
            for v in 0..k {
                let (cs, nc) = segments(w, v as isize - p, padding);
                let src = &cols[((ci * k + u) * k + v) * hw..((ci * k + u) * k + v + 1) * hw];
                for &(r_dst, r_src, r_len) in &rs[..nr] {
                    for r in 0..r_len {
                        let (crow, xrow) = ((r_dst + r) * w, (r_src + r) * w);
                        for &(c_dst, c_src, c_len) in &cs[..nc] {
                            let d = &mut dst[xrow + c_src..xrow + c_src + c_len];
                            for (a, b) in d.iter_mut().zip(&src[crow + c_dst..crow + c_dst + c_len]) {
                                *a += b;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[n,o,i,j] = sum_{c,u,v} w[o,c,u,v] * x[n,c,i+u-p,j+v-p]`.
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, padding: Padding) -> Tensor {
    let [n, c, h, wd] = dims4(x.shape());
    let [o, _, k, _] = dims4(w.shape());
    let (hw, ckk) = (h * wd, c * k * k);
    let mut out = vec![0.0; n * o * hw];
    let mut cols = vec![0.0; ckk * hw];
    for ni in 0..n {
        let xs = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        let b = if k == 1 {
            xs
        } else {
            im2col(xs, c, h, wd, k, padding, &mut cols);
            &cols
        };
        let dst = &mut out[ni * o * hw..(ni + 1) * o * hw];
        gemm(o, ckk, hw, (w.data(), ckk as isize, 1), (b, hw as isize, 1), 0.0, dst);
    }
    Tensor::from_parts(vec![n, o, h, wd], out)
}

/// Adjoint of [`conv2d`] in its input: `gx[n,c] = sum_{o,u,v} w[o,c,u,v] * g[n,o, . - (u-p)]`.
pub(crate) fn conv2d_input_grad(g: &Tensor, w: &Tensor, padding: Padding) -> Tensor {
    let [n, o, h, wd] = dims4(g.shape());
    let [_, c, k, _] = dims4(w.shape());
    let (hw, ckk) = (h * wd, c * k * k);
    let mut out = vec![0.0; n * c * hw];
    let mut cols = vec![0.0; ckk * hw];
    for ni in 0..n {
        let gs = &g.data()[ni * o * hw..(ni + 1) * o * hw];
        let dst = &mut out[ni * c * hw..(ni + 1) * c * hw];
        let wt = (w.data(), 1, ckk as isize);
        if k == 1 {
            gemm(ckk, o, hw, wt, (gs, hw as isize, 1), 0.0, dst);
        } else {
            gemm(ckk, o, hw, wt, (gs, hw as isize, 1), 0.0, &mut cols);
            col2im(&cols, c, h, wd, k, padding, dst);
        }
    }
    Tensor::from_parts(vec![n, c, h, wd], out)
}

/// Adjoint of [`conv2d`] in its weight: `gw[o,c,u,v] = sum_{n,i,j} g[n,o,i,j] * x[n,c,i+u-p,j+v-p]`.
/// Examples are accumulated in index order.
pub(crate) fn conv2d_weight_grad(x: &Tensor, g: &Tensor, k: usize, padding: Padding) -> Tensor {
    let [n, c, h, wd] = dims4(x.shape());
    let o = g.shape()[1];
    let (hw, ckk) = (h * wd, c * k * k);
    let mut out = vec![0.0; o * ckk];
    let mut cols = vec![0.0; ckk * hw];
    for ni in 0..n {
        let xs = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        let b = if k == 1 {
            xs
        } else {
            im2col(xs, c, h, wd, k, padding, &mut cols);
            &cols
        };
        let gs = &g.data()[ni * o * hw..(ni + 1) * o * hw];
        let beta = if ni == 0 { 0.0 } else { 1.0 };
        gemm(o, hw, ckk, (gs, hw as isize, 1), (b, 1, hw as isize), beta, &mut out);
    }
    Tensor::from_parts(vec![o, c, k, k], out)
}

pub(crate) fn upsample_nearest(x: &Tensor, f: usize) -> Tensor {
    let [n, c, h, w] = dims4(x.shape());
    let (oh, ow) = (h * f, w * f);
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &d[plane * h * w..(plane + 1) * h * w];
        for i in 0..oh {
            let row = &src[(i / f) * w..(i / f + 1) * w];
            for j in 0..ow {
                out.push(row[j / f]);
            }
        }
    }
    Tensor::from_parts(vec![n, c, oh, ow], out)
}

/// Sum over non-overlapping `f x f` windows; adjoint of [`upsample_nearest`].
pub(crate) fn sum_pool(x: &Tensor, f: usize) -> Tensor {
    let [n, c, h, w] = dims4(x.shape());
    let (oh, ow) = (h / f, w / f);
    let d = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &d[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                dst[(i / f) * ow + j / f] += src[i * w + j];
            }
        }
    }
    Tensor::from_parts(vec![n, c, oh, ow], out)
}

pub(crate) fn dims4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circular_segments_cover_row() {
        for shift in -3isize..=3 {
            let (segs, n) = segments(5, shift, Padding::Circular);
            let mut seen = [false; 5];
            for &(d, s, len) in &segs[..n] {
                for t in 0..len {
                    assert_eq!(((d + t) as isize + shift).rem_euclid(5) as usize, s + t);
                    seen[d + t] = true;
                }
            }
            assert!(seen.iter().all(|&b| b));
        }
    }

    #[test]
    fn sum_to_reduces_leading_and_singleton_axes() {
        let t = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(sum_to(&t, &[1, 3]).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(sum_to(&t, &[2, 1]).unwrap().data(), &[6., 15.]);
        assert_eq!(sum_to(&t, &[3]).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(sum_to(&t, &[]).unwrap().data(), &[21.]);
        assert!(sum_to(&t, &[2, 2]).is_err());
    }

    #[test]
    fn broadcast_mismatch_is_an_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 3]);
        assert!(broadcast_binary(&a, &b, |x, y| x + y).is_err());
        let c = Tensor::ones(&[1, 3]);
        assert_eq!(broadcast_binary(&a, &c, |x, y| x + y).unwrap().shape(), &[2, 3]);
    }
}
