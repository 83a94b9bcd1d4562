use crate::error::{Error, Result};
use crate::tape::{SamplePoint, Tape, Var};
use crate::tensor::Scalar;

/// Normalized `[x0, y0, x1, y1]` boxes with the batch item each belongs to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionBoxSet {
    pub boxes: Vec<[f64; 4]>,
    pub image_index: Vec<usize>,
}

impl RegionBoxSet {
    pub fn new(boxes: Vec<[f64; 4]>, image_index: Vec<usize>) -> Result<Self> {
        let set = RegionBoxSet { boxes, image_index };
        set.validate(None)?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn push(&mut self, bbox: [f64; 4], image: usize) {
        self.boxes.push(bbox);
        self.image_index.push(image);
    }

    /// Checks box ordering and, when `batch` is given, image indices.
    pub fn validate(&self, batch: Option<usize>) -> Result<()> {
        if self.boxes.len() != self.image_index.len() {
            return Err(Error::contract("boxes and image_index lengths differ"));
        }
        for (i, (b, &img)) in self.boxes.iter().zip(&self.image_index).enumerate() {
            let [x0, y0, x1, y1] = *b;
            let ok = (0.0..=1.0).contains(&x0)
                && (0.0..=1.0).contains(&y0)
                && x1 <= 1.0
                && y1 <= 1.0
                && x0 < x1
                && y0 < y1;
            if !ok {
                return Err(Error::contract(format!("box {i} {b:?} is not 0 <= x0 < x1 <= 1, 0 <= y0 < y1 <= 1")));
            }
            if let Some(bsz) = batch {
                if img >= bsz {
                    return Err(Error::contract(format!("box {i} refers to image {img} of batch {bsz}")));
                }
            }
        }
        Ok(())
    }
}

/// The four quadrant-centre sampling points of one box on a `side x side` grid.
///
/// A normalized coordinate `u` maps to continuous grid coordinate `u * side - 0.5`.
pub fn quadrant_points(bbox: [f64; 4], batch: usize, side: usize) -> [SamplePoint; 4] {
    let [x0, y0, x1, y1] = bbox;
    let s = side as f64;
    let fx = |t: f64| (x0 + (x1 - x0) * t) * s - 0.5;
    let fy = |t: f64| (y0 + (y1 - y0) * t) * s - 0.5;
    let pt = |tx: f64, ty: f64| SamplePoint { batch, x: fx(tx), y: fy(ty) };
    [pt(0.25, 0.25), pt(0.75, 0.25), pt(0.25, 0.75), pt(0.75, 0.75)]
}

/// Pools one `d`-vector per box from `[B, n, D]` grid tokens: the mean of
/// bilinear samples at the box's four quadrant centres.
pub fn roi_align<T: Scalar>(tape: &mut Tape<T>, grid: Var, boxes: &RegionBoxSet) -> Result<Var> {
    let shape = tape.shape(grid).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("roi_align", format!("grid must be [b, n, d], got {shape:?}")));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::dim("roi_align", format!("{n} tokens do not form a square grid")));
    }
    boxes.validate(Some(b))?;
    if boxes.is_empty() {
        return Err(Error::contract("roi_align needs at least one box"));
    }
    let points: Vec<SamplePoint> = boxes
        .boxes
        .iter()
        .zip(&boxes.image_index)
        .flat_map(|(&bx, &img)| quadrant_points(bx, img, side))
        .collect();
    let g4 = tape.reshape(grid, &[b, side, side, d])?;
    let samples = tape.bilinear_sample(g4, &points)?;
    let samples = tape.reshape(samples, &[boxes.len(), 4, d])?;
    tape.mean_axis(samples, 1)
}
