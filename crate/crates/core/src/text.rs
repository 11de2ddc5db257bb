/// Lowercases, strips punctuation and splits on whitespace.
///
/// Punctuation is replaced by a space rather than deleted, so `"a,b"` yields
/// two words. Multiplicity is preserved.
pub fn normalize_and_tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text.to_lowercase().chars().map(|c| if c.is_alphanumeric() { c } else { ' ' }).collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}
