use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::records::AnnotationRecord;

/// Region size classes by pixel area, half-open `[low, high)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AreaBucket {
    Tiny,
    Small,
    Medium,
    Large,
    Huge,
}

impl AreaBucket {
    pub const ALL: [AreaBucket; 5] = [
        AreaBucket::Tiny,
        AreaBucket::Small,
        AreaBucket::Medium,
        AreaBucket::Large,
        AreaBucket::Huge,
    ];

    pub fn of_area(area: f64) -> Self {
        if area < 400.0 {
            AreaBucket::Tiny
        } else if area < 1600.0 {
            AreaBucket::Small
        } else if area < 10_000.0 {
            AreaBucket::Medium
        } else if area < 40_000.0 {
            AreaBucket::Large
        } else {
            AreaBucket::Huge
        }
    }
}

/// Summary of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub images: u64,
    pub regions: u64,
    pub categories: u64,
    pub category_counts: BTreeMap<String, u64>,
    pub area_counts: BTreeMap<AreaBucket, u64>,
    /// Bucket shares of all regions; empty when there are no regions.
    pub area_proportions: BTreeMap<AreaBucket, f64>,
    pub mean_image_caption_tokens: f64,
    pub mean_region_caption_tokens: f64,
}

/// Integer tallies behind [`CorpusStats`]; merging is associative and commutative.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StatsAccumulator {
    images: u64,
    regions: u64,
    category_counts: BTreeMap<String, u64>,
    area_counts: BTreeMap<AreaBucket, u64>,
    image_caption_tokens: u64,
    image_captions: u64,
    region_caption_tokens: u64,
    region_captions: u64,
}

fn tokens(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl StatsAccumulator {
    pub fn add(&mut self, rec: &AnnotationRecord) {
        self.images += 1;
        for c in &rec.image_captions {
            self.image_captions += 1;
            self.image_caption_tokens += tokens(&c.text);
        }
        for r in &rec.regions {
            self.regions += 1;
            *self.category_counts.entry(r.tag.clone()).or_default() += 1;
            *self.area_counts.entry(AreaBucket::of_area(r.area())).or_default() += 1;
            for c in &r.captions {
                self.region_captions += 1;
                self.region_caption_tokens += tokens(c);
            }
        }
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        self.images += other.images;
        self.regions += other.regions;
        for (k, v) in &other.category_counts {
            *self.category_counts.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.area_counts {
            *self.area_counts.entry(*k).or_default() += v;
        }
        self.image_caption_tokens += other.image_caption_tokens;
        self.image_captions += other.image_captions;
        self.region_caption_tokens += other.region_caption_tokens;
        self.region_captions += other.region_captions;
    }

    pub fn finish(&self) -> CorpusStats {
        let mean = |t: u64, n: u64| if n == 0 { 0.0 } else { t as f64 / n as f64 };
        let mut area_counts = BTreeMap::new();
        let mut area_proportions = BTreeMap::new();
        for b in AreaBucket::ALL {
            let c = self.area_counts.get(&b).copied().unwrap_or(0);
            area_counts.insert(b, c);
            if self.regions > 0 {
                area_proportions.insert(b, c as f64 / self.regions as f64);
            }
        }
        CorpusStats {
            images: self.images,
            regions: self.regions,
            categories: self.category_counts.len() as u64,
            category_counts: self.category_counts.clone(),
            area_counts,
            area_proportions,
            mean_image_caption_tokens: mean(self.image_caption_tokens, self.image_captions),
            mean_region_caption_tokens: mean(self.region_caption_tokens, self.region_captions),
        }
    }
}

/// Single pass over a record stream.
pub fn compute_stats<'a>(records: impl IntoIterator<Item = &'a AnnotationRecord>) -> CorpusStats {
    let mut acc = StatsAccumulator::default();
    for r in records {
        acc.add(r);
    }
    acc.finish()
}
