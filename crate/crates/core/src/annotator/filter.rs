use super::records::{box_area, Region};

/// Default minimum detector confidence.
pub const DEFAULT_CONFIDENCE: f64 = 0.3;
/// Default IoU above which a lower-confidence box is suppressed.
pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Keeps regions with `confidence >= threshold`, in order.
pub fn filter_by_confidence(regions: &[Region], threshold: f64) -> Vec<Region> {
    regions.iter().filter(|r| r.confidence >= threshold).cloned().collect()
}

/// Intersection over union of two `[x0, y0, x1, y1]` boxes; 0 when both are empty.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Class-agnostic greedy NMS.
///
/// Regions are visited by descending confidence (stable on ties); each kept
/// box suppresses every later box whose IoU with it exceeds `iou_threshold`.
/// Survivors are returned in visiting order.
pub fn nms_merge(regions: &[Region], iou_threshold: f64) -> Vec<Region> {
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.sort_by(|&a, &b| regions[b].confidence.total_cmp(&regions[a].confidence));
    let mut suppressed = vec![false; regions.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(regions[i].clone());
        for &j in &order[pos + 1..] {
            if !suppressed[j] && box_iou(regions[i].bbox, regions[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}
