//! Batch image augmentations and the weak/strong two-way pipeline.
//!
//! Every primitive takes an immutable [`ImageBatch`] and returns a new one
//! with the same shape and values clamped to `[0, 1]`. Random parameters are
//! drawn from the caller's generator sequentially, image by image, before
//! any pixel work, so results depend only on the generator state and not on
//! the execution mode.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use spd_autograd::{exec, Tensor};

use crate::{Result, SpdError};

/// `[batch, 3·frames, height, width]` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Tensor<f32>,
}

impl ImageBatch {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 4 {
            return Err(SpdError::Shape(format!("image batch must be 4-D, got {shape:?}")));
        }
        if shape[1] == 0 || !shape[1].is_multiple_of(3) {
            return Err(SpdError::Shape(format!("channel count {} is not a positive multiple of 3", shape[1])));
        }
        if data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SpdError::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { data })
    }

    /// Stack 8-bit images (each `channels × size × size`), scaling by 1/255.
    pub fn from_u8_images<'a>(
        images: impl IntoIterator<Item = &'a [u8]>,
        channels: usize,
        size: usize,
    ) -> Result<Self> {
        let per = channels * size * size;
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            if img.len() != per {
                return Err(SpdError::Shape(format!("image has {} bytes, expected {per}", img.len())));
            }
            data.extend(img.iter().map(|&b| b as f32 / 255.0));
            n += 1;
        }
        Self::new(Tensor::new(&[n, channels, size, size], data)?)
    }

    pub fn batch(&self) -> usize {
        self.data.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.data.dim(1)
    }

    pub fn height(&self) -> usize {
        self.data.dim(2)
    }

    pub fn width(&self) -> usize {
        self.data.dim(3)
    }

    pub fn frames(&self) -> usize {
        self.channels() / 3
    }

    pub fn image_len(&self) -> usize {
        self.channels() * self.height() * self.width()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.data.data()[i * n..(i + 1) * n]
    }

    /// Pixel at `(image, channel, row, col)`.
    pub fn at(&self, i: usize, c: usize, r: usize, col: usize) -> f32 {
        self.image(i)[(c * self.height() + r) * self.width() + col]
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    /// New batch of the same shape, built image by image from `f(index, src, dst)`.
    fn map_images(&self, f: impl Fn(usize, &[f32], &mut [f32]) + Sync + Send) -> ImageBatch {
        let n = self.image_len();
        let mut out = Tensor::zeros(self.shape());
        exec::for_each_chunk_mut(out.data_mut(), n, |i, dst| f(i, self.image(i), dst));
        ImageBatch { data: out }
    }
}

/// Hue, saturation and value noise amplitudes for [`color_jitter`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterStrength {
    pub hue: f32,
    pub saturation: f32,
    pub value: f32,
}

impl Default for JitterStrength {
    fn default() -> Self {
        Self { hue: 0.1, saturation: 0.3, value: 0.3 }
    }
}

/// Configuration of the weak and strong augmentation branches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationSpec {
    pub pad_pixels: usize,
    pub grayscale_prob: f32,
    pub jitter: JitterStrength,
    /// Cutout side lengths as fractions of the image side, `(min, max)`.
    pub cutout_size: (f32, f32),
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self { pad_pixels: 4, grayscale_prob: 1.0, jitter: JitterStrength::default(), cutout_size: (0.1, 0.3) }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SpdError::InvalidArgument(m.into()));
        if !(0.0..=1.0).contains(&self.grayscale_prob) {
            return bad("grayscale_prob must be in [0, 1]");
        }
        let j = self.jitter;
        if j.hue < 0.0 || j.saturation < 0.0 || j.value < 0.0 {
            return bad("jitter strengths must be non-negative");
        }
        let (lo, hi) = self.cutout_size;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("cutout size range must satisfy 0 < min <= max <= 1");
        }
        Ok(())
    }
}

/// The four techniques the strong branch chooses from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StrongAugmentation {
    Grayscale,
    RandomConvolution,
    ColorJitter,
    CutoutColor,
}

impl StrongAugmentation {
    pub const ALL: [StrongAugmentation; 4] =
        [Self::Grayscale, Self::RandomConvolution, Self::ColorJitter, Self::CutoutColor];

    pub fn name(self) -> &'static str {
        match self {
            Self::Grayscale => "grayscale",
            Self::RandomConvolution => "random_convolution",
            Self::ColorJitter => "color_jitter",
            Self::CutoutColor => "cutout_color",
        }
    }
}

impl fmt::Display for StrongAugmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrongAugmentation {
    type Err = SpdError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| SpdError::InvalidArgument(format!("unknown strong augmentation {s:?}")))
    }
}

// ---------------------------------------------------------------- shift

/// Pad every side by `pad` with edge replication, then crop back to the
/// original size at a per-image offset drawn uniformly from `[0, 2·pad]²`.
pub fn random_shift<R: Rng + ?Sized>(batch: &ImageBatch, pad: usize, rng: &mut R) -> Result<ImageBatch> {
    check_pad(batch, pad)?;
    let offsets: Vec<(usize, usize)> =
        (0..batch.batch()).map(|_| (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad))).collect();
    shift_with_offsets(batch, pad, &offsets)
}

fn check_pad(batch: &ImageBatch, pad: usize) -> Result<()> {
    if pad >= batch.height().min(batch.width()) {
        return Err(SpdError::InvalidArgument(format!(
            "pad {pad} must be smaller than the image side {}",
            batch.height().min(batch.width())
        )));
    }
    Ok(())
}

/// [`random_shift`] with explicit `(row, col)` crop offsets, one per image.
pub fn shift_with_offsets(batch: &ImageBatch, pad: usize, offsets: &[(usize, usize)]) -> Result<ImageBatch> {
    check_pad(batch, pad)?;
    if offsets.len() != batch.batch() {
        return Err(SpdError::InvalidArgument("one offset per image required".into()));
    }
    if offsets.iter().any(|&(dy, dx)| dy > 2 * pad || dx > 2 * pad) {
        return Err(SpdError::InvalidArgument(format!("offsets must lie in [0, {}]", 2 * pad)));
    }
    let (c, h, w) = (batch.channels(), batch.height(), batch.width());
    let src_index = |i: usize, off: usize, len: usize| (i + off).saturating_sub(pad).min(len - 1);
    Ok(batch.map_images(|n, src, dst| {
        let (dy, dx) = offsets[n];
        for ch in 0..c {
            for r in 0..h {
                let sr = src_index(r, dy, h);
                let srow = &src[(ch * h + sr) * w..(ch * h + sr + 1) * w];
                let drow = &mut dst[(ch * h + r) * w..(ch * h + r + 1) * w];
                for (col, d) in drow.iter_mut().enumerate() {
                    *d = srow[src_index(col, dx, w)];
                }
            }
        }
    }))
}

// ---------------------------------------------------------------- grayscale

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Convert each image to grayscale independently with probability `prob`.
pub fn grayscale<R: Rng + ?Sized>(batch: &ImageBatch, prob: f32, rng: &mut R) -> ImageBatch {
    let mask: Vec<bool> = (0..batch.batch()).map(|_| rng.random::<f32>() < prob).collect();
    grayscale_mask(batch, &mask)
}

/// Grayscale exactly the images whose mask entry is set.
pub fn grayscale_mask(batch: &ImageBatch, mask: &[bool]) -> ImageBatch {
    assert_eq!(mask.len(), batch.batch(), "one mask entry per image");
    let plane = batch.height() * batch.width();
    batch.map_images(|n, src, dst| {
        dst.copy_from_slice(src);
        if !mask[n] {
            return;
        }
        for frame in dst.chunks_mut(3 * plane) {
            for p in 0..plane {
                let y = LUMA[0] * frame[p] + LUMA[1] * frame[plane + p] + LUMA[2] * frame[2 * plane + p];
                let y = y.clamp(0.0, 1.0);
                frame[p] = y;
                frame[plane + p] = y;
                frame[2 * plane + p] = y;
            }
        }
    })
}

// ---------------------------------------------------------------- random conv

/// `[out][in][ky][kx]` weights of a 3×3 RGB→RGB convolution.
pub type RgbKernel = [[[[f32; 3]; 3]; 3]; 3];

pub fn identity_kernel() -> RgbKernel {
    let mut k = [[[[0.0; 3]; 3]; 3]; 3];
    for (c, out) in k.iter_mut().enumerate() {
        out[c][1][1] = 1.0;
    }
    k
}

/// One Gaussian kernel (variance 2/fan-in) per call, applied to every frame
/// of every image.
pub fn random_convolution<R: Rng + ?Sized>(batch: &ImageBatch, rng: &mut R) -> ImageBatch {
    let normal = Normal::new(0.0f32, (2.0f32 / 27.0).sqrt()).unwrap();
    let mut k = [[[[0.0; 3]; 3]; 3]; 3];
    for v in k.iter_mut().flatten().flatten().flatten() {
        *v = normal.sample(rng);
    }
    convolve_rgb(batch, &k)
}

/// Same-size 3×3 convolution per frame with edge-replicated borders.
pub fn convolve_rgb(batch: &ImageBatch, kernel: &RgbKernel) -> ImageBatch {
    let (h, w) = (batch.height(), batch.width());
    let plane = h * w;
    batch.map_images(|_, src, dst| {
        for (sf, df) in src.chunks(3 * plane).zip(dst.chunks_mut(3 * plane)) {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = [0.0f32; 3];
                    for ky in 0..3 {
                        let sr = (r + ky).saturating_sub(1).min(h - 1);
                        for kx in 0..3 {
                            let sc = (c + kx).saturating_sub(1).min(w - 1);
                            for ci in 0..3 {
                                let v = sf[ci * plane + sr * w + sc];
                                for (o, a) in acc.iter_mut().enumerate() {
                                    *a += kernel[o][ci][ky][kx] * v;
                                }
                            }
                        }
                    }
                    for (o, a) in acc.iter().enumerate() {
                        df[o * plane + r * w + c] = a.clamp(0.0, 1.0);
                    }
                }
            }
        }
    })
}

// ---------------------------------------------------------------- color jitter

/// Additive HSV offsets for one image.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct HsvShift {
    pub hue: f32,
    pub saturation: f32,
    pub value: f32,
}

pub fn rgb_to_hsv(rgb: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max > 0.0 { delta / max } else { 0.0 };
    [h as f32, s as f32, max as f32]
}

pub fn hsv_to_rgb(hsv: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = hsv.map(f64::from);
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let rgb = match sector as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(|x| (x as f32).clamp(0.0, 1.0))
}

/// Per-image uniform HSV noise in `[-strength, strength]`; hue wraps,
/// saturation and value clamp.
pub fn color_jitter<R: Rng + ?Sized>(batch: &ImageBatch, strength: JitterStrength, rng: &mut R) -> ImageBatch {
    let mut draw = |s: f32| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
    let shifts: Vec<HsvShift> = (0..batch.batch())
        .map(|_| HsvShift {
            hue: draw(strength.hue),
            saturation: draw(strength.saturation),
            value: draw(strength.value),
        })
        .collect();
    jitter_hsv(batch, &shifts)
}

pub fn jitter_hsv(batch: &ImageBatch, shifts: &[HsvShift]) -> ImageBatch {
    assert_eq!(shifts.len(), batch.batch(), "one shift per image");
    let plane = batch.height() * batch.width();
    batch.map_images(|n, src, dst| {
        let sh = shifts[n];
        for (sf, df) in src.chunks(3 * plane).zip(dst.chunks_mut(3 * plane)) {
            for p in 0..plane {
                let [h, s, v] = rgb_to_hsv([sf[p], sf[plane + p], sf[2 * plane + p]]);
                let hsv =
                    [(h + sh.hue).rem_euclid(1.0), (s + sh.saturation).clamp(0.0, 1.0), (v + sh.value).clamp(0.0, 1.0)];
                let [r, g, b] = hsv_to_rgb(hsv);
                df[p] = r;
                df[plane + p] = g;
                df[2 * plane + p] = b;
            }
        }
    })
}

// ---------------------------------------------------------------- cutout

/// Axis-aligned occlusion: rows `top..top+height`, cols `left..left+width`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutout {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub color: [f32; 3],
}

/// One random-color rectangle per image, sides drawn from `size_range`
/// (fractions of the image side), placed uniformly inside the image.
pub fn cutout_color<R: Rng + ?Sized>(batch: &ImageBatch, size_range: (f32, f32), rng: &mut R) -> ImageBatch {
    let (h, w) = (batch.height(), batch.width());
    let (lo, hi) = size_range;
    let side = |rng: &mut R, len: usize| {
        let frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        ((frac * len as f32).round() as usize).min(len)
    };
    let rects: Vec<Cutout> = (0..batch.batch())
        .map(|_| {
            let ch = side(rng, h);
            let cw = side(rng, w);
            Cutout {
                top: rng.random_range(0..=h - ch),
                left: rng.random_range(0..=w - cw),
                height: ch,
                width: cw,
                color: [rng.random(), rng.random(), rng.random()],
            }
        })
        .collect();
    cutout_rects(batch, &rects)
}

pub fn cutout_rects(batch: &ImageBatch, rects: &[Cutout]) -> ImageBatch {
    assert_eq!(rects.len(), batch.batch(), "one rectangle per image");
    let (h, w) = (batch.height(), batch.width());
    let plane = h * w;
    batch.map_images(|n, src, dst| {
        dst.copy_from_slice(src);
        let rc = rects[n];
        let (r1, c1) = ((rc.top + rc.height).min(h), (rc.left + rc.width).min(w));
        for frame in dst.chunks_mut(3 * plane) {
            for (ch, &col) in rc.color.iter().enumerate() {
                let col = col.clamp(0.0, 1.0);
                for r in rc.top..r1 {
                    frame[ch * plane + r * w + rc.left..ch * plane + r * w + c1].fill(col);
                }
            }
        }
    })
}

// ---------------------------------------------------------------- two-way

/// Weak branch: random shift only.
pub fn augment_weak<R: Rng + ?Sized>(batch: &ImageBatch, spec: &AugmentationSpec, rng: &mut R) -> Result<ImageBatch> {
    random_shift(batch, spec.pad_pixels, rng)
}

/// Strong branch: random shift, then one technique chosen uniformly for the
/// whole minibatch. Returns the technique that was applied.
pub fn augment_strong<R: Rng + ?Sized>(
    batch: &ImageBatch,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<(ImageBatch, StrongAugmentation)> {
    let shifted = random_shift(batch, spec.pad_pixels, rng)?;
    let choice = StrongAugmentation::ALL[rng.random_range(0..StrongAugmentation::ALL.len())];
    Ok((apply_strong(&shifted, spec, choice, rng), choice))
}

/// Strong branch with the technique fixed by the caller.
pub fn augment_strong_with<R: Rng + ?Sized>(
    batch: &ImageBatch,
    spec: &AugmentationSpec,
    choice: StrongAugmentation,
    rng: &mut R,
) -> Result<ImageBatch> {
    let shifted = random_shift(batch, spec.pad_pixels, rng)?;
    Ok(apply_strong(&shifted, spec, choice, rng))
}

/// Apply one strong technique to every image of an already shifted batch.
pub fn apply_strong<R: Rng + ?Sized>(
    batch: &ImageBatch,
    spec: &AugmentationSpec,
    choice: StrongAugmentation,
    rng: &mut R,
) -> ImageBatch {
    match choice {
        StrongAugmentation::Grayscale => grayscale(batch, spec.grayscale_prob, rng),
        StrongAugmentation::RandomConvolution => random_convolution(batch, rng),
        StrongAugmentation::ColorJitter => color_jitter(batch, spec.jitter, rng),
        StrongAugmentation::CutoutColor => cutout_color(batch, spec.cutout_size, rng),
    }
}
