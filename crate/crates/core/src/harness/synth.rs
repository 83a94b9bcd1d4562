//! Procedural scenes of coloured shapes with a fixed caption grammar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{COLORS, SHAPES};
use crate::annotator::{AnnotationRecord, Caption, Region};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
const MIN_SIDE: usize = 8;
const MAX_SIDE: usize = 13;
const LARGE_SIDE: usize = 11;

const RGB: [[f32; 3]; 6] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.60, 0.10, 0.80],
    [1.00, 0.55, 0.00],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Rendering style; `Shifted` uses a light background and rotated colour channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    #[default]
    Standard,
    Shifted,
}

/// Colour-shape pairs reserved for evaluation: one per colour and per shape.
pub fn held_out(color: usize, shape: usize) -> bool {
    color == shape
}

pub fn tag_text(color: usize, shape: usize) -> String {
    format!("{} {}", COLORS[color], SHAPES[shape])
}

/// Classification prompt for a tag.
pub fn tag_prompt(tag: &str) -> String {
    format!("a photo of a {tag}")
}

/// All 36 tags in colour-major order.
pub fn all_tags() -> Vec<String> {
    (0..COLORS.len())
        .flat_map(|c| (0..SHAPES.len()).map(move |s| tag_text(c, s)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    /// Tight pixel box `[x0, y0, x1, y1]`, exclusive upper bounds.
    pub bbox: [usize; 4],
}

impl SceneObject {
    pub fn tag(&self) -> String {
        tag_text(self.color, self.shape)
    }

    fn phrase(&self) -> String {
        format!("a {}", self.tag())
    }

    fn centre_x(&self) -> f64 {
        (self.bbox[0] + self.bbox[2]) as f64 / 2.0
    }

    /// Region captions; the first is canonical.
    pub fn captions(&self) -> Vec<String> {
        let (c, s) = (COLORS[self.color], SHAPES[self.shape]);
        let size = if self.bbox[2] - self.bbox[0] >= LARGE_SIDE { "large" } else { "small" };
        let side = if self.centre_x() < IMAGE_SIZE as f64 / 2.0 { "left" } else { "right" };
        vec![
            format!("a {c} {s}"),
            format!("the {c} {s}"),
            format!("a {s} that is {c}"),
            format!("a {size} {c} {s}"),
            format!("a {c} {s} on the {side}"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Vec<f32>,
    /// Ordered left to right.
    pub objects: Vec<SceneObject>,
}

impl SyntheticScene {
    /// Image captions; the first is canonical.
    pub fn captions(&self) -> Vec<String> {
        let phrases: Vec<String> = self.objects.iter().map(SceneObject::phrase).collect();
        let list = phrases.join(" and ");
        let relation = match phrases.len() {
            1 => format!("one {}", self.objects[0].tag()),
            _ => {
                let rest = phrases[1..].join(" and ");
                format!("{} to the left of {rest}", phrases[0])
            }
        };
        vec![
            list.clone(),
            format!("a photo of {list}"),
            format!("an image showing {list}"),
            format!("there is {list}"),
            format!("a picture containing {list}"),
            format!("a scene with {list}"),
            format!("the scene has {list}"),
            relation,
        ]
    }

    /// Sorted, deduplicated region tags.
    pub fn tags(&self) -> Vec<String> {
        let mut t: Vec<String> = self.objects.iter().map(SceneObject::tag).collect();
        t.sort();
        t.dedup();
        t
    }

    pub fn record(&self, image_id: String) -> AnnotationRecord {
        AnnotationRecord {
            image_id,
            width: IMAGE_SIZE as u32,
            height: IMAGE_SIZE as u32,
            image_tags: self.tags(),
            image_captions: self
                .captions()
                .into_iter()
                .map(|text| Caption {
                    text,
                    source: "synthetic".into(),
                    score: 1.0,
                })
                .collect(),
            regions: self
                .objects
                .iter()
                .map(|o| Region {
                    bbox: o.bbox.map(|v| v as f64),
                    tag: o.tag(),
                    confidence: 1.0,
                    captions: o.captions(),
                    stability: None,
                })
                .collect(),
        }
    }
}

/// Whether local coordinates `(u, v)` in `[-1, 1]^2` fall inside `shape`.
fn inside(shape: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match shape {
        0 => r2 <= 1.0,
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,
        2 => v <= 0.9 && u.abs() <= (v + 1.0) / 2.0,
        3 => u.abs() + v.abs() <= 1.0,
        4 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        _ => (0.42..=1.0).contains(&r2),
    }
}

/// Pixel mask of a shape of side `side` and its tight box relative to the square origin.
fn stamp(shape: usize, side: usize) -> (Vec<bool>, [usize; 4]) {
    let mut mask = vec![false; side * side];
    let (mut x0, mut y0, mut x1, mut y1) = (side, side, 0, 0);
    let half = side as f64 / 2.0;
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 + 0.5 - half) / half;
            let v = (y as f64 + 0.5 - half) / half;
            if inside(shape, u, v) {
                mask[y * side + x] = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (mask, [x0, y0, x1, y1])
}

fn overlaps(a: [usize; 4], b: [usize; 4]) -> bool {
    // One pixel of clearance between shapes.
    a[0] < b[2] + 1 && b[0] < a[2] + 1 && a[1] < b[3] + 1 && b[1] < a[3] + 1
}

fn pick_combo(rng: &mut ChaCha8Rng, split: Split, need_held_out: bool) -> (usize, usize) {
    loop {
        let c = rng.random_range(0..COLORS.len());
        let s = rng.random_range(0..SHAPES.len());
        let ok = match split {
            Split::Train => !held_out(c, s),
            Split::Eval => !need_held_out || held_out(c, s),
        };
        if ok {
            return (c, s);
        }
    }
}

fn render(rng: &mut ChaCha8Rng, split: Split, domain: Domain, max_regions: usize) -> SyntheticScene {
    let n = IMAGE_SIZE;
    let (base, spread) = match domain {
        Domain::Standard => (0.15, 0.2),
        Domain::Shifted => (0.7, 0.2),
    };
    let bg = base + spread * rng.random::<f32>();
    let mut image: Vec<f32> = (0..CHANNELS * n * n)
        .map(|_| bg + 0.06 * (rng.random::<f32>() - 0.5))
        .collect();
    let count = rng.random_range(1..=max_regions);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count && attempts < 200 {
        attempts += 1;
        let need_held_out = split == Split::Eval && objects.is_empty();
        let (color, shape) = pick_combo(rng, split, need_held_out);
        let side = rng.random_range(MIN_SIDE..=MAX_SIDE);
        let ox = rng.random_range(0..=n - side);
        let oy = rng.random_range(0..=n - side);
        let (mask, tight) = stamp(shape, side);
        let bbox = [ox + tight[0], oy + tight[1], ox + tight[2], oy + tight[3]];
        if objects.iter().any(|o| overlaps(o.bbox, bbox)) {
            continue;
        }
        let mut rgb = RGB[color];
        if domain == Domain::Shifted {
            rgb = [rgb[1], rgb[2], rgb[0]];
        }
        let jitter: [f32; 3] = std::array::from_fn(|_| 0.08 * (rng.random::<f32>() - 0.5));
        for y in 0..side {
            for x in 0..side {
                if mask[y * side + x] {
                    for ch in 0..CHANNELS {
                        image[(ch * n + oy + y) * n + ox + x] = (rgb[ch] + jitter[ch]).clamp(0.0, 1.0);
                    }
                }
            }
        }
        objects.push(SceneObject { color, shape, bbox });
    }
    objects.sort_by(|a, b| a.centre_x().total_cmp(&b.centre_x()).then(a.bbox[1].cmp(&b.bbox[1])));
    SyntheticScene { image, objects }
}

/// Deterministic scene stream. Scene `i` depends only on `(seed, split, domain, i)`.
#[derive(Debug, Clone)]
pub struct CorpusStream {
    seed: u64,
    split: Split,
    domain: Domain,
    max_regions: usize,
    next: usize,
    end: usize,
}

impl CorpusStream {
    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    /// Scene `i` of the stream, independent of iteration position.
    pub fn scene_at(&self, i: usize) -> SyntheticScene {
        let split_id = match self.split {
            Split::Train => 0u64,
            Split::Eval => 1,
        };
        let domain_id = match self.domain {
            Domain::Standard => 0u64,
            Domain::Shifted => 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((split_id | domain_id) << 40) | i as u64);
        render(&mut rng, self.split, self.domain, self.max_regions)
    }
}

impl Iterator for CorpusStream {
    type Item = (SyntheticScene, AnnotationRecord);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.end {
            return None;
        }
        let i = self.next;
        self.next += 1;
        let scene = self.scene_at(i);
        let prefix = match self.split {
            Split::Train => "train",
            Split::Eval => "eval",
        };
        let record = scene.record(format!("{prefix}-{i:06}"));
        Some((scene, record))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.end - self.next;
        (n, Some(n))
    }
}

impl ExactSizeIterator for CorpusStream {}

/// Stream of `n_images` scenes with 1 to `max_regions` shapes each.
///
/// Train scenes never contain a held-out pair; every eval scene contains at
/// least one.
pub fn gen_corpus(seed: u64, n_images: usize, max_regions: usize, split: Split) -> Result<CorpusStream> {
    if n_images == 0 {
        return Err(Error::contract("n_images must be at least 1"));
    }
    if !(1..=3).contains(&max_regions) {
        return Err(Error::contract(format!("max_regions {max_regions} outside 1..=3")));
    }
    Ok(CorpusStream {
        seed,
        split,
        domain: Domain::Standard,
        max_regions,
        next: 0,
        end: n_images,
    })
}
