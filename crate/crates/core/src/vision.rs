//! Image preprocessing and the toy patch encoder that produces the global
//! visual feature `f_v`.
//!
//! Images are `height × width × 3` tensors with values in `[0, 1]` before
//! normalization. On disk they are binary PPM (`P6`, 8-bit).

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{LinearMap, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::transformer::TransformerBlockParams;

pub const CROP_SCALE: (f64, f64) = (0.05, 1.0);
pub const CROP_RATIO: (f64, f64) = (0.75, 1.33);
const CROP_ATTEMPTS: usize = 10;
const NORM_MEAN: f64 = 0.5;
const NORM_STD: f64 = 0.5;

/// `height × width × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 3 || s[2] != 3 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Usage(format!("image tensor must be H×W×3, got {s:?}")));
        }
        Ok(ImageTensor(tensor))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        ImageTensor(Tensor::new(vec![height, width, 3], data).expect("consistent shape"))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.0.data()[(y * self.width() + x) * 3 + c]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Crop rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Random area/aspect crop; falls back to a centered crop clamped to the
/// ratio bounds when ten draws fail.
pub fn sample_crop(height: usize, width: usize, rng: &mut Rng) -> CropBox {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (CROP_RATIO.0.ln(), CROP_RATIO.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.random_range(CROP_SCALE.0..=CROP_SCALE.1);
        let ratio = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w == 0 || h == 0 || w > width || h > height {
            continue;
        }
        let r = w as f64 / h as f64;
        let s = (w * h) as f64 / area;
        if r < CROP_RATIO.0 || r > CROP_RATIO.1 || s < CROP_SCALE.0 || s > CROP_SCALE.1 {
            continue;
        }
        let top = rng.random_range(0..=height - h);
        let left = rng.random_range(0..=width - w);
        return CropBox { top, left, height: h, width: w };
    }
    center_fallback(height, width)
}

fn center_fallback(height: usize, width: usize) -> CropBox {
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < CROP_RATIO.0 {
        (((width as f64 / CROP_RATIO.0).floor() as usize).clamp(1, height), width)
    } else if in_ratio > CROP_RATIO.1 {
        (height, ((height as f64 * CROP_RATIO.1).floor() as usize).clamp(1, width))
    } else {
        (height, width)
    };
    CropBox {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

/// Bilinear resampling of a crop to `out_h × out_w` (half-pixel centers, edge clamp).
pub fn resize_bilinear(img: &ImageTensor, crop: CropBox, out_h: usize, out_w: usize) -> ImageTensor {
    let sy = crop.height as f64 / out_h as f64;
    let sx = crop.width as f64 / out_w as f64;
    let axis = |o: usize, scale: f64, len: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (p.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|y| axis(y, sy, crop.height)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, sx, crop.width)).collect();
    ImageTensor::from_fn(out_h, out_w, |y, x, c| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let px = |yy: usize, xx: usize| img.at(crop.top + yy, crop.left + xx, c);
        let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
        let bottom = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Per-channel `(v - 0.5) / 0.5`.
pub fn normalize(img: ImageTensor) -> ImageTensor {
    let mut t = img.into_tensor();
    t.data_mut().iter_mut().for_each(|v| *v = (*v - NORM_MEAN) / NORM_STD);
    ImageTensor(t)
}

/// Training augmentation: seeded random crop, resize to `size²`, normalize.
pub fn preprocess_train(img: &ImageTensor, seed: u64, size: usize) -> Result<ImageTensor> {
    if img.height() < 2 || img.width() < 2 {
        return Err(Error::Usage("training images must be at least 2×2".into()));
    }
    let crop = sample_crop(img.height(), img.width(), &mut rng::seeded(seed));
    Ok(normalize(resize_bilinear(img, crop, size, size)))
}

/// Evaluation transform: shorter side to `size`, center `size²` crop, normalize.
pub fn preprocess_eval(img: &ImageTensor, size: usize) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let short = h.min(w) as f64;
    let (rh, rw) = if h <= w {
        (size, ((w as f64 * size as f64 / short).floor() as usize).max(size))
    } else {
        (((h as f64 * size as f64 / short).floor() as usize).max(size), size)
    };
    let resized = if (rh, rw) == (h, w) {
        img.clone()
    } else {
        let full = CropBox { top: 0, left: 0, height: h, width: w };
        resize_bilinear(img, full, rh, rw)
    };
    let crop = CropBox {
        top: (rh - size) / 2,
        left: (rw - size) / 2,
        height: size,
        width: size,
    };
    let patch = ImageTensor::from_fn(size, size, |y, x, c| resized.at(crop.top + y, crop.left + x, c));
    normalize(patch)
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::parse(path, 1, msg.to_string());
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if header[0] != "P6" {
        return Err(bad("only binary P6 PPM is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
    let (w, h, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("unsupported PPM dimensions or maxval"));
    }
    let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated PPM pixel data"))?;
    let data = body.iter().map(|&b| b as f64 / maxval as f64).collect();
    ImageTensor::new(Tensor::new(vec![h, w, 3], data)?)
}

pub fn write_ppm(img: &ImageTensor, path: &Path) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.tensor().data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub heads: usize,
    /// Samples carry a `1 × D` feature instead of an image.
    pub use_precomputed: bool,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            input_size: 224,
            patch_size: 32,
            layers: 2,
            heads: 1,
            use_precomputed: true,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "input_size {} not divisible by patch_size {}",
                self.input_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.input_size / self.patch_size;
        per_side * per_side
    }
}

/// What the visual branch consumes for one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum VisualInput {
    /// Preprocessed `input_size × input_size × 3` image.
    Image(ImageTensor),
    /// `1 × D` feature passed through unchanged.
    Feature(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionParams {
    pub patch_embed: LinearMap,
    pub class_slot: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<TransformerBlockParams>,
    pub config: VisionConfig,
    pub dim: usize,
}

impl VisionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, cfg: &VisionConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        Ok(VisionParams {
            patch_embed: LinearMap::new(store, &format!("{prefix}.patch_embed"), patch_dim, dim, rng)?,
            class_slot: store.add_uniform(format!("{prefix}.class_slot"), &[1, dim], dim, rng)?,
            positions: store.add_uniform(format!("{prefix}.positions"), &[cfg.num_patches() + 1, dim], dim, rng)?,
            blocks: (0..cfg.layers)
                .map(|i| TransformerBlockParams::new(store, &format!("{prefix}.block{i}"), dim, cfg.heads, rng))
                .collect::<Result<_>>()?,
            config: cfg.clone(),
            dim,
        })
    }
}

/// Row-major patches, each flattened in (y, x, channel) order.
pub fn patchify(img: &ImageTensor, patch: usize) -> Result<Tensor> {
    let (h, w) = (img.height(), img.width());
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Usage(format!("{h}×{w} image not divisible into {patch}-pixel patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w * 3);
    for py in 0..ph {
        for px in 0..pw {
            for y in 0..patch {
                for x in 0..patch {
                    for c in 0..3 {
                        data.push(img.at(py * patch + y, px * patch + x, c));
                    }
                }
            }
        }
    }
    Tensor::new(vec![ph * pw, patch * patch * 3], data)
}

/// Global visual feature `1 × D`.
///
/// Features pass through unchanged; images go through patch embedding, a
/// learned class slot and positions, then the self-attention blocks, and the
/// class-slot row is returned.
pub fn encode_image(tape: &mut Tape, params: Option<&VisionParams>, dim: usize, input: &VisualInput) -> Result<Var> {
    match input {
        VisualInput::Feature(f) => {
            if f.shape() != [1, dim] {
                return Err(Error::Usage(format!(
                    "precomputed visual feature has shape {:?}, expected [1, {dim}]",
                    f.shape()
                )));
            }
            Ok(tape.constant(f.clone()))
        }
        VisualInput::Image(img) => {
            let p = params.ok_or_else(|| Error::Usage("image input but the model has no vision encoder".into()))?;
            let size = p.config.input_size;
            if img.height() != size || img.width() != size {
                return Err(Error::Usage(format!(
                    "image is {}×{}, expected preprocessed {size}×{size}",
                    img.height(),
                    img.width()
                )));
            }
            let patches = tape.constant(patchify(img, p.config.patch_size)?);
            let tokens = p.patch_embed.forward(tape, patches)?;
            let slot = tape.param(p.class_slot);
            let x = tape.concat_rows(&[slot, tokens])?;
            let pos = tape.param(p.positions);
            let mut x = tape.add(x, pos)?;
            for b in &p.blocks {
                x = b.forward(tape, x, x, x)?;
            }
            tape.slice_rows(x, 0, 1)
        }
    }
}
