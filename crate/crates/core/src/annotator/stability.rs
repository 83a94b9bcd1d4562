use crate::error::{Error, Result};

/// Default number of jittered boxes.
pub const DEFAULT_JITTERS: usize = 4;
/// Default largest translation, as a fraction of the box diagonal.
pub const DEFAULT_MAGNITUDE: f64 = 0.05;
/// Default minimum stability for a mask to be kept.
pub const DEFAULT_STABILITY: f64 = 0.7;

/// Dense binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    /// Pixels whose centres lie inside the box (half-open on the far edges).
    pub fn from_box(bbox: [f64; 4], width: usize, height: usize) -> Self {
        let mut m = Mask::empty(width, height);
        for y in 0..height {
            let cy = y as f64 + 0.5;
            if cy < bbox[1] || cy >= bbox[3] {
                continue;
            }
            for x in 0..width {
                let cx = x as f64 + 0.5;
                if cx >= bbox[0] && cx < bbox[2] {
                    m.data[y * width + x] = true;
                }
            }
        }
        m
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Pixel IoU; two empty masks agree perfectly.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::contract(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Box-prompted segmenter.
pub trait MaskOracle {
    fn mask(&self, bbox: [f64; 4], width: usize, height: usize) -> Mask;
}

/// Segments exactly the box interior.
#[derive(Debug, Clone, Copy, Default)]
pub struct BoxInteriorOracle;

impl MaskOracle for BoxInteriorOracle {
    fn mask(&self, bbox: [f64; 4], width: usize, height: usize) -> Mask {
        Mask::from_box(bbox, width, height)
    }
}

impl<F: Fn([f64; 4], usize, usize) -> Mask> MaskOracle for F {
    fn mask(&self, bbox: [f64; 4], width: usize, height: usize) -> Mask {
        self(bbox, width, height)
    }
}

/// Translations `±f * (w, h)` of a box along its own diagonal.
///
/// Jitters come in symmetric pairs; pair `p` of `P` uses
/// `f = magnitude * (p + 1) / P`, so the largest shift is `magnitude` of the
/// diagonal. An odd count leaves the last pair with only its positive member.
pub fn jitter_offsets(bbox: [f64; 4], jitters: usize, magnitude: f64) -> Vec<[f64; 2]> {
    let (w, h) = (bbox[2] - bbox[0], bbox[3] - bbox[1]);
    let pairs = jitters.div_ceil(2);
    (0..jitters)
        .map(|i| {
            let f = magnitude * (i / 2 + 1) as f64 / pairs as f64;
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            [sign * f * w, sign * f * h]
        })
        .collect()
}

/// Mean IoU between the mask of `bbox` and the masks of its diagonal jitters.
pub fn jitter_stability(
    bbox: [f64; 4],
    oracle: &dyn MaskOracle,
    width: usize,
    height: usize,
    jitters: usize,
    magnitude: f64,
) -> Result<f64> {
    if jitters == 0 || !(magnitude > 0.0) {
        return Err(Error::contract("jitter_stability needs jitters >= 1 and magnitude > 0"));
    }
    let check = |m: &Mask| {
        if m.width != width || m.height != height || m.data.len() != width * height {
            Err(Error::contract(format!(
                "oracle returned a {}x{} mask for a {width}x{height} image",
                m.width, m.height
            )))
        } else {
            Ok(())
        }
    };
    let base = oracle.mask(bbox, width, height);
    check(&base)?;
    let mut total = 0.0;
    for [dx, dy] in jitter_offsets(bbox, jitters, magnitude) {
        let moved = [bbox[0] + dx, bbox[1] + dy, bbox[2] + dx, bbox[3] + dy];
        let m = oracle.mask(moved, width, height);
        check(&m)?;
        total += mask_iou(&base, &m)?;
    }
    Ok(total / jitters as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rasterizes_by_pixel_centre() {
        let m = Mask::from_box([1.0, 1.0, 3.0, 2.0], 4, 4);
        assert_eq!(m.count(), 2);
        assert!(m.data[5] && m.data[6]);
        assert_eq!(Mask::from_box([0.6, 0.6, 1.4, 1.4], 4, 4).count(), 0);
    }

    #[test]
    fn empty_masks_agree() {
        let e = Mask::empty(3, 3);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn offsets_are_symmetric_and_graded() {
        let o = jitter_offsets([0.0, 0.0, 10.0, 20.0], 4, 0.05);
        assert_eq!(o, vec![[0.25, 0.5], [-0.25, -0.5], [0.5, 1.0], [-0.5, -1.0]]);
    }

    #[test]
    fn wrong_mask_size_rejected() {
        let bad = |_: [f64; 4], _: usize, _: usize| Mask::empty(2, 2);
        assert!(matches!(
            jitter_stability([0.0, 0.0, 1.0, 1.0], &bad, 4, 4, 4, 0.05),
            Err(Error::Contract(_))
        ));
    }
}
