//! Mask-driven cropping: binary food mask -> minimal square -> fixed-size crop.

use foodwaste_tensor::{ops, ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::{binarize, UNet};

/// Classifier input size.
pub const TARGET_SIZE: usize = 224;

/// Square region in source coordinates; may extend past the image borders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SquareBBox {
    pub row: i64,
    pub col: i64,
    pub side: usize,
}

impl SquareBBox {
    pub fn contains(&self, r: i64, c: i64) -> bool {
        let s = self.side as i64;
        r >= self.row && r < self.row + s && c >= self.col && c < self.col + s
    }
}

fn mask_plane(mask: &Tensor<f32>) -> Result<(usize, usize, &[f32])> {
    let (c, h, w) = mask.dims3()?;
    if c != 1 {
        return Err(Error::Input(format!("mask must have one channel, got {c}")));
    }
    Ok((h, w, mask.data()))
}

/// Smallest square holding every foreground pixel, centred on the tight
/// rectangle along its shorter axis. `None` for an empty mask.
pub fn min_square_bbox(mask: &Tensor<f32>) -> Result<Option<SquareBBox>> {
    let (h, w, data) = mask_plane(mask)?;
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for c in 0..w {
            if data[r * w + c] != 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Ok(None);
    }
    let (rh, rw) = (r1 - r0 + 1, c1 - c0 + 1);
    let side = rh.max(rw);
    Ok(Some(SquareBBox {
        row: r0 as i64 - ((side - rh) / 2) as i64,
        col: c0 as i64 - ((side - rw) / 2) as i64,
        side,
    }))
}

/// Copies the square out of `image` (`[C, H, W]`), zero-filling outside it.
pub fn crop(image: &Tensor<f32>, bbox: SquareBBox) -> Result<Tensor<f32>> {
    let (ch, h, w) = image.dims3()?;
    let s = bbox.side as i64;
    let overlaps = bbox.side > 0 && bbox.row < h as i64 && bbox.col < w as i64 && bbox.row + s > 0 && bbox.col + s > 0;
    if !overlaps {
        return Err(Error::Input(format!("{bbox:?} does not overlap a {h}x{w} image")));
    }
    let side = bbox.side;
    let src = image.data();
    let mut out = vec![0f32; ch * side * side];
    let c_lo = bbox.col.max(0);
    let c_hi = (bbox.col + s).min(w as i64);
    let n = (c_hi - c_lo) as usize;
    let dst_c = (c_lo - bbox.col) as usize;
    for k in 0..ch {
        for dr in 0..side {
            let r = bbox.row + dr as i64;
            if r < 0 || r >= h as i64 {
                continue;
            }
            let s_off = k * h * w + r as usize * w + c_lo as usize;
            let d_off = k * side * side + dr * side + dst_c;
            out[d_off..d_off + n].copy_from_slice(&src[s_off..s_off + n]);
        }
    }
    Ok(Tensor::new(&[ch, side, side], out)?)
}

/// Corner-aligned bilinear resize of a square `[C, S, S]` image.
pub fn resize_bilinear(image: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    if target < 1 {
        return Err(Error::Config("resize target must be >= 1".into()));
    }
    image.dims3()?;
    Ok(ops::resize_bilinear(image, target, target)?)
}

/// Nearest-neighbour resampling of a `[1, h, w]` mask to `[1, out_h, out_w]`.
pub fn resize_nearest(mask: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (h, w, data) = mask_plane(mask)?;
    let pick = |i: usize, src: usize, dst: usize| ((2 * i + 1) * src / (2 * dst)).min(src - 1);
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let sr = pick(r, h, out_h);
        out.extend((0..out_w).map(|c| data[sr * w + pick(c, w, out_w)]));
    }
    Ok(Tensor::new(&[1, out_h, out_w], out)?)
}

/// Anything that turns a `[3, H, W]` image into a binary `[1, H, W]` mask.
pub trait MaskPredictor {
    fn predict_mask(&self, image: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<F> MaskPredictor for F
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
{
    fn predict_mask(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self(image)
    }
}

/// Runs a U-Net at its own resolution and maps the mask back.
pub struct UNetMasker<'a> {
    pub net: &'a UNet,
    pub params: &'a ParamSet<f32>,
    pub threshold: f32,
}

impl MaskPredictor for UNetMasker<'_> {
    fn predict_mask(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, h, w) = image.dims3()?;
        let s = self.net.config.input_size;
        let x = ops::resize_bilinear(image, s, s)?.reshape(&[1, 3, s, s])?;
        let probs = self.net.predict(self.params, &x)?.reshape(&[1, s, s])?;
        resize_nearest(&binarize(&probs, self.threshold), h, w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedPair {
    pub before: Tensor<f32>,
    pub after: Tensor<f32>,
    pub bbox: SquareBBox,
}

/// Elementwise maximum of two binary masks.
pub fn mask_union(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!("mask shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x.max(*y)).collect();
    Ok(Tensor::new(a.shape(), data)?)
}

/// Masks both images, crops both with the square around the union of the
/// masks and scales the crops to `target`. `None` when no food is found.
pub fn preprocess_pair(
    before: &Tensor<f32>,
    after: &Tensor<f32>,
    masker: &dyn MaskPredictor,
    target: usize,
) -> Result<Option<PreprocessedPair>> {
    if before.shape() != after.shape() {
        return Err(Error::Input(format!(
            "before {:?} and after {:?} differ in shape",
            before.shape(),
            after.shape()
        )));
    }
    let (c, _, _) = before.dims3()?;
    if c != 3 {
        return Err(Error::Input(format!("expected 3 channels, got {c}")));
    }
    let union = mask_union(&masker.predict_mask(before)?, &masker.predict_mask(after)?)?;
    let Some(bbox) = min_square_bbox(&union)? else {
        return Ok(None);
    };
    Ok(Some(PreprocessedPair {
        before: resize_bilinear(&crop(before, bbox)?, target)?,
        after: resize_bilinear(&crop(after, bbox)?, target)?,
        bbox,
    }))
}
