//! Token-selection masks and their PGM rendering.
//!
//! Masks cover the patch grid only. Whether the class token was attended is
//! kept alongside, since it has no place on the grid. Rendered images are
//! 8-bit binary PGM (P5) at image resolution: skipped patches 0, attended
//! patches 255.

use crate::error::{Error, Result};
use crate::model::{Mode, Model, CLS_INDEX};
use crate::numerics::Tensor;
use crate::selector::SelectionPlan;
use crate::training::{PIXEL_MEAN, PIXEL_STD};

pub const SKIPPED: u8 = 0;
pub const ATTENDED: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadMask {
    /// Row-major over the patch grid.
    pub attended: Vec<bool>,
    pub cls_attended: bool,
}

impl HeadMask {
    /// Attended tokens including the class token, i.e. the plan's K.
    pub fn count(&self) -> usize {
        self.attended.iter().filter(|&&a| a).count() + usize::from(self.cls_attended)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    pub layer: usize,
    pub heads: Vec<HeadMask>,
}

impl LayerMask {
    /// Patches attended by at least one head.
    pub fn union(&self) -> Vec<bool> {
        let n = self.heads.first().map_or(0, |h| h.attended.len());
        (0..n).map(|p| self.heads.iter().any(|h| h.attended[p])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    pub grid: usize,
    pub layers: Vec<LayerMask>,
}

impl SelectionMask {
    /// Token 0 is the class token; token `1 + p` is patch `p`.
    pub fn from_plans(plans: &[(usize, SelectionPlan)], grid: usize) -> Result<Self> {
        let tokens = grid * grid + 1;
        let layers = plans
            .iter()
            .map(|(layer, plan)| {
                if plan.tokens != tokens {
                    return Err(Error::dim(format!(
                        "layer {layer} plan covers {} tokens, grid {grid} needs {tokens}",
                        plan.tokens
                    )));
                }
                let heads = plan
                    .heads
                    .iter()
                    .map(|h| {
                        let mut attended = vec![false; tokens - 1];
                        let mut cls_attended = false;
                        for &t in &h.attended {
                            if t == CLS_INDEX {
                                cls_attended = true;
                            } else {
                                attended[t - 1] = true;
                            }
                        }
                        HeadMask { attended, cls_attended }
                    })
                    .collect();
                Ok(LayerMask { layer: *layer, heads })
            })
            .collect::<Result<_>>()?;
        Ok(SelectionMask { grid, layers })
    }
}

/// Encodes an 8-bit grayscale P5 image.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(Error::dim(format!("{width}×{height} image with {} pixels", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Expands a grid mask to `image_size²` pixels. With `under`, a `C×S×S`
/// normalized image, each pixel is the mean of the mask value and the
/// image's gray level.
pub fn render(mask: &[bool], grid: usize, patch_size: usize, under: Option<&Tensor>) -> Result<Vec<u8>> {
    if mask.len() != grid * grid {
        return Err(Error::dim(format!("mask of {} cells for a {grid}×{grid} grid", mask.len())));
    }
    let s = grid * patch_size;
    let gray = match under {
        None => None,
        Some(img) => {
            let &[c, h, w] = img.shape() else {
                return Err(Error::dim(format!("blend image must be C×S×S, got {:?}", img.shape())));
            };
            if h != s || w != s {
                return Err(Error::dim(format!("blend image is {h}×{w}, mask renders {s}×{s}")));
            }
            let d = img.data();
            Some(
                (0..s * s)
                    .map(|i| {
                        let mean = (0..c).map(|ch| d[ch * s * s + i] * PIXEL_STD + PIXEL_MEAN).sum::<f64>() / c as f64;
                        mean.clamp(0.0, 1.0) * 255.0
                    })
                    .collect::<Vec<f64>>(),
            )
        }
    };
    let mut px = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let m = if mask[(y / patch_size) * grid + x / patch_size] {
                ATTENDED
            } else {
                SKIPPED
            };
            px.push(match &gray {
                None => m,
                Some(g) => (0.5 * f64::from(m) + 0.5 * g[y * s + x]).round() as u8,
            });
        }
    }
    Ok(px)
}

/// One rendered mask file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    pub name: String,
    pub pgm: Vec<u8>,
}

/// Runs `image` through `model` and renders one mask per (selective layer,
/// head) plus a head-union mask per layer.
pub fn visualize(model: &Model, image: &Tensor, blend: bool) -> Result<(SelectionMask, Vec<MaskImage>)> {
    let config = &model.config;
    if config.tosa_layers.is_empty() {
        return Err(Error::Usage("the checkpoint has no ToSA layers to visualize".into()));
    }
    let inference = model.infer(image, Mode::Features)?;
    let mask = SelectionMask::from_plans(&inference.plans, config.grid())?;
    let under = blend.then_some(image);
    let s = config.image_size;
    let mut files = Vec::new();
    for lm in &mask.layers {
        for (h, hm) in lm.heads.iter().enumerate() {
            files.push(MaskImage {
                name: format!("layer{:02}_head{h}.pgm", lm.layer),
                pgm: encode_pgm(s, s, &render(&hm.attended, mask.grid, config.patch_size, under)?)?,
            });
        }
        files.push(MaskImage {
            name: format!("layer{:02}_union.pgm", lm.layer),
            pgm: encode_pgm(s, s, &render(&lm.union(), mask.grid, config.patch_size, under)?)?,
        });
    }
    Ok((mask, files))
}
