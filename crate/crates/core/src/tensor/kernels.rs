//! Forward/backward kernels for the NCHW image ops.

use super::{Real, Result, TensorError};
use crate::parallel;

/// Resolved geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (h, w, kh, kw) = (input[2], input[3], weight[2], weight[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        Ok(Self {
            batch: input[0],
            in_ch: input[1],
            h,
            w,
            out_ch: weight[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.oh, self.ow]
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_sample(&self) -> usize {
        self.in_ch * self.h * self.w
    }
}

/// Unfolds one sample into a `[C*kh*kw, OH*OW]` column matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * plane..][..plane];
                for oy in 0..g.oh {
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto one sample, accumulating overlaps.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * plane..][..plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    parallel::for_each_chunk_mut(&mut out, g.out_ch * plane, |b, ob| {
        let mut cols = vec![T::zero(); patch * plane];
        im2col(&x[b * g.in_sample()..(b + 1) * g.in_sample()], g, &mut cols);
        T::gemm(
            g.out_ch,
            patch,
            plane,
            T::one(),
            weight,
            (patch as isize, 1),
            &cols,
            (plane as isize, 1),
            T::zero(),
            ob,
        );
        if let Some(bias) = bias {
            for (k, row) in ob.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[k]);
            }
        }
    });
    out
}

/// Samples per gradient-reduction group. Depends only on the batch size so
/// the reduction order is independent of the thread count.
fn reduction_group(batch: usize) -> usize {
    batch.div_ceil(8).max(1)
}

/// Group index, its slice of `dx`, and the slot for its weight gradient.
type GroupSlot<'a, T> = (usize, &'a mut [T], &'a mut Option<Vec<T>>);

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Real>(x: &[T], weight: &[T], dy: &[T], g: &ConvGeom, need_dx: bool) -> ConvGrads<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let group = reduction_group(g.batch);
    let n_groups = g.batch.div_ceil(group);
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * g.in_sample()]);

    let work = |gi: usize, dx_chunk: Option<&mut [T]>| -> Vec<T> {
        let mut dw = vec![T::zero(); g.out_ch * patch];
        let mut cols = vec![T::zero(); patch * plane];
        let mut dcols = vec![T::zero(); if need_dx { patch * plane } else { 0 }];
        let mut dx_chunk = dx_chunk;
        for b in gi * group..((gi + 1) * group).min(g.batch) {
            let dy_b = &dy[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
            im2col(&x[b * g.in_sample()..(b + 1) * g.in_sample()], g, &mut cols);
            // dW += dY_b · cols^T
            T::gemm(
                g.out_ch,
                plane,
                patch,
                T::one(),
                dy_b,
                (plane as isize, 1),
                &cols,
                (1, plane as isize),
                T::one(),
                &mut dw,
            );
            if let Some(chunk) = dx_chunk.as_deref_mut() {
                // dcols = W^T · dY_b
                T::gemm(
                    patch,
                    g.out_ch,
                    plane,
                    T::one(),
                    weight,
                    (1, patch as isize),
                    dy_b,
                    (plane as isize, 1),
                    T::zero(),
                    &mut dcols,
                );
                let local = b - gi * group;
                col2im(
                    &dcols,
                    g,
                    &mut chunk[local * g.in_sample()..(local + 1) * g.in_sample()],
                );
            }
        }
        dw
    };

    let partials: Vec<Vec<T>> = match dx.as_mut() {
        Some(dx) => {
            let mut slots: Vec<Option<Vec<T>>> = (0..n_groups).map(|_| None).collect();
            let mut pieces: Vec<GroupSlot<'_, T>> = dx
                .chunks_mut(group * g.in_sample())
                .zip(slots.iter_mut())
                .enumerate()
                .map(|(i, (c, s))| (i, c, s))
                .collect();
            parallel::for_each_chunk_mut(&mut pieces, 1, |_, p| {
                let (gi, chunk, slot) = &mut p[0];
                **slot = Some(work(*gi, Some(chunk)));
            });
            slots.into_iter().map(|s| s.expect("filled")).collect()
        }
        None => parallel::map_range(n_groups, |gi| work(gi, None)),
    };

    let mut dw = vec![T::zero(); g.out_ch * patch];
    for p in &partials {
        dw.iter_mut().zip(p).for_each(|(a, &b)| *a += b);
    }
    let mut db = vec![T::zero(); g.out_ch];
    for b in 0..g.batch {
        for (k, acc) in db.iter_mut().enumerate() {
            let row = &dy[(b * g.out_ch + k) * plane..][..plane];
            *acc += row.iter().copied().sum::<T>();
        }
    }
    ConvGrads { dx, dw, db }
}

/// Geometry of a windowed max pool (padding counts as -inf).
#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub batch: usize,
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], window: usize, stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(TensorError::Invalid {
                op: "pool2d",
                msg: format!("expected NCHW input, got {input:?}"),
            });
        }
        if window == 0 || stride == 0 || pad >= window {
            return Err(TensorError::Invalid {
                op: "pool2d",
                msg: format!("invalid window {window} / stride {stride} / padding {pad}"),
            });
        }
        let (h, w) = (input[2], input[3]);
        if window > h + 2 * pad || window > w + 2 * pad {
            return Err(TensorError::Shape {
                op: "pool2d",
                lhs: input.to_vec(),
                rhs: vec![window, window],
            });
        }
        Ok(Self {
            batch: input[0],
            ch: input[1],
            h,
            w,
            window,
            stride,
            pad,
            oh: (h + 2 * pad - window) / stride + 1,
            ow: (w + 2 * pad - window) / stride + 1,
        })
    }
}

/// Returns pooled values and, per output, the flat input index of the max.
pub fn maxpool_forward<T: Real>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let planes = g.batch * g.ch;
    let out_plane = g.oh * g.ow;
    let results: Vec<(Vec<T>, Vec<usize>)> = parallel::map_range(planes, |p| {
        let base = p * g.h * g.w;
        let mut vals = Vec::with_capacity(out_plane);
        let mut idx = Vec::with_capacity(out_plane);
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = T::neg_infinity();
                let mut arg = usize::MAX;
                for i in 0..g.window {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for j in 0..g.window {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let k = base + iy as usize * g.w + ix as usize;
                        if arg == usize::MAX || x[k] > best {
                            best = x[k];
                            arg = k;
                        }
                    }
                }
                vals.push(best);
                idx.push(arg);
            }
        }
        (vals, idx)
    });
    let mut out = Vec::with_capacity(planes * out_plane);
    let mut arg = Vec::with_capacity(planes * out_plane);
    for (v, i) in results {
        out.extend(v);
        arg.extend(i);
    }
    (out, arg)
}
