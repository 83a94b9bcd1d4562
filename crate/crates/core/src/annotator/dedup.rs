use std::collections::HashSet;

/// Comparison key of a caption: lowercased, whitespace collapsed, trailing
/// punctuation removed.
pub fn normalize_caption(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Drops captions whose normalized key was already seen, keeping first occurrences.
pub fn dedup_captions(captions: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    captions
        .iter()
        .filter(|c| seen.insert(normalize_caption(c)))
        .cloned()
        .collect()
}
