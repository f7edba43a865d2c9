//! Attention-guided region erasure: rectangles of random size centred on the
//! most attended pixels are overwritten with a constant.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gam::GamMap;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskConfig {
    /// Number of rectangles per image.
    pub n_mask: usize,
    /// Largest rectangle height, pixels.
    pub h_mask: usize,
    /// Largest rectangle width, pixels.
    pub w_mask: usize,
    /// Value written to every channel of an erased pixel.
    pub fill_value: f64,
}

impl MaskConfig {
    /// Three masks of up to a seventh of the image side.
    pub fn for_image(height: usize, width: usize) -> Self {
        Self {
            n_mask: 3,
            h_mask: height.div_ceil(7).max(1),
            w_mask: width.div_ceil(7).max(1),
            fill_value: 0.0,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.h_mask < 1 || self.h_mask > height || self.w_mask < 1 || self.w_mask > width {
            return Err(Error::Config(format!(
                "mask size {}x{} must lie within 1x1..{height}x{width}",
                self.h_mask, self.w_mask
            )));
        }
        if !self.fill_value.is_finite() {
            return Err(Error::Config("fill_value must be finite".into()));
        }
        Ok(())
    }
}

/// One erased rectangle.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskPlacement {
    pub center: (usize, usize),
    /// Sampled height `H_t` before clipping.
    pub height: usize,
    /// Sampled width `W_t` before clipping.
    pub width: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl MaskPlacement {
    /// Centre-anchored rectangle: `floor(h/2)` rows above the centre and
    /// `h - 1 - floor(h/2)` below (likewise for columns), clipped to the image.
    pub fn new(
        center: (usize, usize),
        height: usize,
        width: usize,
        image_height: usize,
        image_width: usize,
    ) -> Self {
        let span = |c: usize, len: usize, limit: usize| {
            let lo = c.saturating_sub(len / 2);
            let hi = (c + len - 1 - len / 2 + 1).min(limit);
            lo..hi
        };
        Self {
            center,
            height,
            width,
            rows: span(center.0, height, image_height),
            cols: span(center.1, width, image_width),
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rows.contains(&row) && self.cols.contains(&col)
    }
}

/// The `n` most attended pixels, largest first; equal values keep row-major order.
pub fn top_n_centers<T: Scalar>(gam: &GamMap<T>, n: usize) -> Result<Vec<(usize, usize)>> {
    let values = gam.values();
    if n > values.len() {
        return Err(Error::invalid(
            "top_n_centers",
            format!("asked for {n} centres from {} pixels", values.len()),
        ));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite attention"));
    let w = gam.width();
    Ok(order[..n].iter().map(|&i| (i / w, i % w)).collect())
}

/// `n` centres drawn uniformly over the image, for the random-erasure baseline.
pub fn random_centers(
    height: usize,
    width: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<(usize, usize)> {
    (0..n)
        .map(|_| (rng.gen_range(0..height), rng.gen_range(0..width)))
        .collect()
}

/// Erases a rectangle around each centre of a `[c, h, w]` image, returning a
/// new image and the placements in centre order.
pub fn apply_masks<T: Scalar>(
    image: &Tensor<T>,
    centers: &[(usize, usize)],
    cfg: &MaskConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Vec<MaskPlacement>)> {
    const OP: &str = "apply_masks";
    if image.ndim() != 3 {
        return Err(Error::shape(OP, format!("expected [c, h, w], got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    cfg.validate(h, w)?;
    if let Some(bad) = centers.iter().find(|&&(r, col)| r >= h || col >= w) {
        return Err(Error::invalid(OP, format!("centre {bad:?} outside {h}x{w} image")));
    }
    let mut out = image.clone();
    let fill = T::of(cfg.fill_value);
    let data = out.data_mut();
    let mut placements = Vec::with_capacity(centers.len());
    for &center in centers {
        let ht = rng.gen_range(1..=cfg.h_mask);
        let wt = rng.gen_range(1..=cfg.w_mask);
        let p = MaskPlacement::new(center, ht, wt, h, w);
        for ch in 0..c {
            for r in p.rows.clone() {
                let base = (ch * h + r) * w;
                data[base + p.cols.start..base + p.cols.end].fill(fill);
            }
        }
        placements.push(p);
    }
    Ok((out, placements))
}

/// Erases around the `min(n_mask, pixels)` most attended pixels of `gam`.
pub fn erase_top_n<T: Scalar>(
    image: &Tensor<T>,
    gam: &GamMap<T>,
    cfg: &MaskConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Vec<MaskPlacement>)> {
    let n = cfg.n_mask.min(gam.values().len());
    let centers = top_n_centers(gam, n)?;
    apply_masks(image, &centers, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unique_maximum_and_ties() {
        let mut v = vec![0.0f64; 64];
        v[5 * 8 + 7] = 3.0;
        let m = GamMap::new(8, 8, v).unwrap();
        assert_eq!(top_n_centers(&m, 1).unwrap(), vec![(5, 7)]);
        let flat = GamMap::new(4, 4, vec![1.0f64; 16]).unwrap();
        assert_eq!(top_n_centers(&flat, 2).unwrap(), vec![(0, 0), (0, 1)]);
        assert!(top_n_centers(&flat, 17).is_err());
    }

    #[test]
    fn clipping_at_corner() {
        let p = MaskPlacement::new((0, 0), 4, 4, 8, 8);
        assert_eq!((p.rows, p.cols), (0..2, 0..2));
        let p = MaskPlacement::new((7, 7), 4, 3, 8, 8);
        assert_eq!((p.rows, p.cols), (5..8, 6..8));
        let p = MaskPlacement::new((3, 3), 1, 1, 8, 8);
        assert_eq!((p.rows, p.cols), (3..4, 3..4));
    }

    #[test]
    fn unit_masks_erase_only_centres() {
        let img = Tensor::from_fn(vec![2, 5, 5], |i| i as f64 + 1.0);
        let cfg = MaskConfig {
            n_mask: 2,
            h_mask: 1,
            w_mask: 1,
            fill_value: -9.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = apply_masks(&img, &[(1, 2), (4, 0)], &cfg, &mut rng).unwrap();
        for ch in 0..2 {
            for r in 0..5 {
                for c in 0..5 {
                    let i = (ch * 5 + r) * 5 + c;
                    let erased = (r, c) == (1, 2) || (r, c) == (4, 0);
                    assert_eq!(out.data()[i] == -9.0, erased);
                    if !erased {
                        assert_eq!(out.data()[i], img.data()[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn defaults_scale_with_side() {
        let c = MaskConfig::for_image(64, 64);
        assert_eq!((c.n_mask, c.h_mask, c.w_mask, c.fill_value), (3, 10, 10, 0.0));
        assert!(MaskConfig { h_mask: 0, ..c.clone() }.validate(64, 64).is_err());
        assert!(MaskConfig { w_mask: 65, ..c }.validate(64, 64).is_err());
    }
}
