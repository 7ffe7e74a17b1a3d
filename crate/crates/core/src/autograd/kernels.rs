//! Raw forward/backward kernels on flat NCHW buffers.
//!
//! Batch samples are processed independently (and possibly in parallel);
//! cross-sample reductions always run in ascending sample order so results
//! are bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds one sample `[Cin, H, W]` into `[Cin·k·k, H·W]` with zero padding.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (h, w, k, pad) = (g.height, g.width, g.kernel, g.pad());
    let plane = g.plane();
    for ci in 0..g.in_channels {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, o) in out_row.iter_mut().enumerate() {
                        let sx = xo as isize + kx as isize - pad as isize;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[Cin·k·k, H·W]` back onto one sample, accumulating overlaps.
fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (h, w, k, pad) = (g.height, g.width, g.kernel, g.pad());
    let plane = g.plane();
    for ci in 0..g.in_channels {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dst_row[sx as usize] = dst_row[sx as usize] + src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.plane();
    let in_len = g.in_channels * plane;
    let out_len = g.out_channels * plane;
    let rows = g.col_rows();
    let mut out = vec![T::zero(); g.batch * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each(|(out_b, x_b)| {
            let mut col = vec![T::zero(); rows * plane];
            im2col(g, x_b, &mut col);
            for (co, chunk) in out_b.chunks_mut(plane).enumerate() {
                chunk.fill(bias[co]);
            }
            T::gemm(
                g.out_channels,
                rows,
                plane,
                weight,
                (rows, 1),
                &col,
                (plane, 1),
                T::one(),
                out_b,
                plane,
            );
        });
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Input and weight partials of one batch sample.
type SamplePartials<T> = (Option<Vec<T>>, Option<Vec<T>>);

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    weight: &[T],
    dout: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let plane = g.plane();
    let in_len = g.in_channels * plane;
    let out_len = g.out_channels * plane;
    let rows = g.col_rows();
    let w_len = g.out_channels * rows;
    let (want_x, want_w, want_b) = want;

    // Per-sample partials, reduced in sample order afterwards.
    let per_sample: Vec<SamplePartials<T>> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let dout_b = &dout[b * out_len..(b + 1) * out_len];
            let dx = want_x.then(|| {
                let mut dcol = vec![T::zero(); rows * plane];
                T::gemm(
                    rows,
                    g.out_channels,
                    plane,
                    weight,
                    (1, rows),
                    dout_b,
                    (plane, 1),
                    T::zero(),
                    &mut dcol,
                    plane,
                );
                let mut dx = vec![T::zero(); in_len];
                col2im(g, &dcol, &mut dx);
                dx
            });
            let dw = want_w.then(|| {
                let mut col = vec![T::zero(); rows * plane];
                im2col(g, &x[b * in_len..(b + 1) * in_len], &mut col);
                let mut dw = vec![T::zero(); w_len];
                T::gemm(
                    g.out_channels,
                    plane,
                    rows,
                    dout_b,
                    (plane, 1),
                    &col,
                    (1, plane),
                    T::zero(),
                    &mut dw,
                    rows,
                );
                dw
            });
            (dx, dw)
        })
        .collect();

    let input = want_x.then(|| {
        let mut dx = Vec::with_capacity(g.batch * in_len);
        for (part, _) in &per_sample {
            dx.extend_from_slice(part.as_ref().expect("computed above"));
        }
        dx
    });
    let weight = want_w.then(|| {
        let mut dw = vec![T::zero(); w_len];
        for (_, part) in &per_sample {
            for (acc, v) in dw.iter_mut().zip(part.as_ref().expect("computed above")) {
                *acc = *acc + *v;
            }
        }
        dw
    });
    let bias = want_b.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for b in 0..g.batch {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = b * out_len + co * plane;
                let s: T = dout[start..start + plane]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
                *acc = *acc + s;
            }
        }
        db
    });
    ConvGrads {
        input,
        weight,
        bias,
    }
}

/// 2×2 max pooling over `[planes, H, W]`. Returns pooled values and, per
/// output cell, the flat input index of the winning cell (first maximum in
/// row-major window order).
pub fn max_pool2_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let candidates = [
                    base + (2 * oy) * w + 2 * ox,
                    base + (2 * oy) * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = candidates[0];
                for &c in &candidates[1..] {
                    if x[c] > x[best] {
                        best = c;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn upsample2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / 2]);
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ow = 2 * w;
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let a = src[(2 * y) * ow + 2 * x];
                let b = src[(2 * y) * ow + 2 * x + 1];
                let c = src[(2 * y + 1) * ow + 2 * x];
                let d = src[(2 * y + 1) * ow + 2 * x + 1];
                dst[y * w + x] = ((a + b) + c) + d;
            }
        }
    }
    dx
}
