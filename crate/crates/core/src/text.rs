//! Small text helpers shared by the mock embedder and the heuristic parsers.

/// Lowercased alphanumeric tokens. `SpO2` and `spo2` map to the same token.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Normalizes a disease or metric name for keyed lookup.
pub fn normalize_key(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Substring by character offsets `[start, end)`.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let begin = indices.by_ref().nth(start).unwrap_or(text.len());
    let finish = if end > start {
        indices.nth(end - start - 1).unwrap_or(text.len())
    } else {
        begin
    };
    &text[begin..finish]
}
