use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caption {
    pub text: String,
    pub source: String,
    pub score: f64,
}

/// A detected region in pixel coordinates `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub tag: String,
    pub confidence: f64,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<f64>,
}

impl Region {
    pub fn area(&self) -> f64 {
        box_area(self.bbox)
    }
}

/// One image's annotations at image and region level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub image_tags: Vec<String>,
    pub image_captions: Vec<Caption>,
    pub regions: Vec<Region>,
}

pub fn box_area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        let id = &self.image_id;
        if self.image_captions.iter().any(|c| c.text.trim().is_empty()) {
            return Err(Error::contract(format!("{id}: empty image caption")));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, r) in self.regions.iter().enumerate() {
            let [x0, y0, x1, y1] = r.bbox;
            if !(x0 < x1 && y0 < y1) {
                return Err(Error::contract(format!("{id}: region {i} box {:?} is not ordered", r.bbox)));
            }
            if x0 < 0.0 || y0 < 0.0 || x1 > w || y1 > h {
                return Err(Error::contract(format!("{id}: region {i} box {:?} outside {w}x{h}", r.bbox)));
            }
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(Error::contract(format!("{id}: region {i} confidence {} outside [0, 1]", r.confidence)));
            }
            if r.captions.iter().any(|c| c.trim().is_empty()) {
                return Err(Error::contract(format!("{id}: region {i} has an empty caption")));
            }
        }
        Ok(())
    }
}

/// Reads and validates JSON-lines records; errors name the byte offset of the bad line.
pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in reader.split(b'\n') {
        let line = line?;
        let start = offset;
        offset += line.len() as u64 + 1;
        let text = std::str::from_utf8(&line).map_err(|e| Error::Format {
            offset: start,
            detail: format!("invalid utf-8: {e}"),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(text).map_err(|e| Error::Format {
            offset: start,
            detail: format!("bad annotation record: {e}"),
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<'a>(mut writer: impl Write, records: impl IntoIterator<Item = &'a AnnotationRecord>) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
