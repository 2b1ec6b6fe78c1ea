//! Valid (unpadded) 2-D convolution via per-image im2col and GEMM.

use crate::{exec, gemm, Real};

/// Images handled per work chunk. Fixed so that the reduction order of
/// weight gradients does not depend on the execution mode.
const IMAGES_PER_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize) -> usize {
    if input < kernel {
        0
    } else {
        (input - kernel) / stride + 1
    }
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        conv_output_size(self.height, self.kernel, self.stride)
    }

    pub fn out_width(&self) -> usize {
        conv_output_size(self.width, self.kernel, self.stride)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_image_len(&self) -> usize {
        self.out_channels * self.positions()
    }
}

fn im2col<T: Real>(img: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow, k, s) = (g.out_height(), g.out_width(), g.kernel, g.stride);
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for y in 0..oh {
                    let src = &plane[(y * s + ki) * g.width + kj..];
                    let d = &mut dst[y * ow..(y + 1) * ow];
                    if s == 1 {
                        d.copy_from_slice(&src[..ow]);
                    } else {
                        for (x, v) in d.iter_mut().enumerate() {
                            *v = src[x * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeometry, img: &mut [T]) {
    let (oh, ow, k, s) = (g.out_height(), g.out_width(), g.kernel, g.stride);
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for y in 0..oh {
                    let base = (y * s + ki) * g.width + kj;
                    for x in 0..ow {
                        plane[base + x * s] += src[y * ow + x];
                    }
                }
            }
        }
    }
}

/// `x: [B, C, H, W]`, `w: [O, C, k, k]`, `b: [O]` → `[B, O, H', W']`.
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &ConvGeometry) -> Vec<T> {
    assert_eq!(x.len(), g.batch * g.image_len(), "conv input size");
    assert_eq!(w.len(), g.out_channels * g.patch_len(), "conv weight size");
    assert_eq!(b.len(), g.out_channels, "conv bias size");
    let (kk, p, out_len) = (g.patch_len(), g.positions(), g.out_image_len());
    let mut y = vec![T::zero(); g.batch * out_len];
    if y.is_empty() {
        return y;
    }
    exec::for_each_chunk_mut(&mut y, IMAGES_PER_CHUNK * out_len, |ci, chunk| {
        let mut cols = vec![T::zero(); kk * p];
        for (j, out) in chunk.chunks_mut(out_len).enumerate() {
            let n = ci * IMAGES_PER_CHUNK + j;
            im2col(&x[n * g.image_len()..(n + 1) * g.image_len()], g, &mut cols);
            for (o, row) in out.chunks_mut(p).enumerate() {
                row.fill(b[o]);
            }
            gemm(false, false, g.out_channels, p, kk, T::one(), w, &cols, T::one(), out);
        }
    });
    y
}

/// Gradients of [`conv2d_forward`]: `(dx, dw, db)`. `dx` is only computed
/// when `need_dx` is set.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeometry,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (kk, p, out_len, in_len) = (g.patch_len(), g.positions(), g.out_image_len(), g.image_len());
    assert_eq!(dy.len(), g.batch * out_len, "conv grad size");
    let n_chunks = g.batch.div_ceil(IMAGES_PER_CHUNK);

    let chunk_grads = |ci: usize, dx_chunk: Option<&mut [T]>| {
        let mut dw = vec![T::zero(); g.out_channels * kk];
        let mut db = vec![T::zero(); g.out_channels];
        let mut cols = vec![T::zero(); kk * p];
        let mut dcols = if need_dx { vec![T::zero(); kk * p] } else { Vec::new() };
        let start = ci * IMAGES_PER_CHUNK;
        let end = (start + IMAGES_PER_CHUNK).min(g.batch);
        let mut dx_chunk = dx_chunk;
        for n in start..end {
            let dyn_ = &dy[n * out_len..(n + 1) * out_len];
            im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols);
            gemm(false, true, g.out_channels, kk, p, T::one(), dyn_, &cols, T::one(), &mut dw);
            for (o, row) in dyn_.chunks(p).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
            if let Some(dxc) = dx_chunk.as_deref_mut() {
                gemm(true, false, kk, p, g.out_channels, T::one(), w, dyn_, T::zero(), &mut dcols);
                let j = n - start;
                col2im_add(&dcols, g, &mut dxc[j * in_len..(j + 1) * in_len]);
            }
        }
        (dw, db)
    };

    let (dx, partials) = if need_dx {
        let mut dx = vec![T::zero(); g.batch * in_len];
        let partials = exec::map_chunks_mut(&mut dx, IMAGES_PER_CHUNK * in_len, |ci, c| chunk_grads(ci, Some(c)));
        (Some(dx), partials)
    } else {
        (None, exec::map_indices(n_chunks, |ci| chunk_grads(ci, None)))
    };

    let mut dw = vec![T::zero(); g.out_channels * kk];
    let mut db = vec![T::zero(); g.out_channels];
    for (pw, pb) in partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
    (dx, dw, db)
}
