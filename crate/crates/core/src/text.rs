//! Text normalization primitives shared by label comparison, evidence
//! tracing, and metric tokenization.

/// Case-folds and trims a label. This is the comparison form for every
/// department, modality, and diagnosis label in the engine, and the
/// fallback form for synonym normalization misses.
pub fn fold_trim(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Case-folds and collapses every whitespace run to a single space.
/// Used when matching evidence excerpts against entry text, where line
/// wrapping must not break substring resolution.
pub fn normalize_ws(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_ws = false;
    for ch in text.trim().chars() {
        if ch.is_whitespace() {
            in_ws = true;
        } else {
            if in_ws && !out.is_empty() {
                out.push(' ');
            }
            in_ws = false;
            for low in ch.to_lowercase() {
                out.push(low);
            }
        }
    }
    out
}

/// Tokenization for the lexical metrics: case-fold, map punctuation to
/// spaces, split on whitespace. Alphanumeric characters are kept as-is so
/// dosages ("5mg") survive as single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut mapped = String::with_capacity(text.len());
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for low in ch.to_lowercase() {
                mapped.push(low);
            }
        } else {
            mapped.push(' ');
        }
    }
    mapped.split_whitespace().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_trim_folds_and_trims() {
        assert_eq!(fold_trim("  Rib Fracture "), "rib fracture");
        assert_eq!(fold_trim("ANEMIA"), "anemia");
        assert_eq!(fold_trim(""), "");
    }

    #[test]
    fn normalize_ws_collapses_runs() {
        assert_eq!(normalize_ws("Chest\n  X-Ray   shows"), "chest x-ray shows");
        assert_eq!(normalize_ws("   "), "");
    }

    #[test]
    fn tokenize_strips_punctuation() {
        assert_eq!(tokenize("Chest pain, acute!"), vec!["chest", "pain", "acute"]);
        assert_eq!(tokenize("dose: 5mg/day"), vec!["dose", "5mg", "day"]);
        assert!(tokenize("...").is_empty());
    }
}
