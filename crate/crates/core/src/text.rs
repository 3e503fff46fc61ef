//! Tokenization shared by the vocabulary, the feature encoder, the planner
//! and ROUGE.

/// Lowercased word tokens. Splits on anything that is not alphanumeric,
/// `#` or an inner apostrophe.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !(c.is_alphanumeric() || c == '#' || c == '\''))
        .map(|t| t.trim_matches('\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// The text between the first pair of double quotes, if any.
pub fn quoted_span(s: &str) -> Option<&str> {
    let start = s.find('"')? + 1;
    let len = s[start..].find('"')?;
    Some(&s[start..start + len])
}

/// Fraction of `tokens` that also occur in `reference` (0 when `tokens` is empty).
pub fn overlap_fraction(tokens: &[String], reference: &[String]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let hits = tokens.iter().filter(|t| reference.contains(t)).count();
    hits as f64 / tokens.len() as f64
}

/// Deterministic seed mixing (splitmix64 finalizer).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a string, used for seeding and feature hashing.
pub fn stable_hash(s: &str) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}
