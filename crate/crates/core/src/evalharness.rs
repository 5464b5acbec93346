//! Evaluation metrics over final reports and gold annotations: synonym
//! normalization, ACC, CDR, DCA, department consistency, Entity-F1, BLEU,
//! and ROUGE-L.
//!
//! Everything here is pure and deterministic; per-case terms can be
//! computed in parallel and reduced by summation. Model-based scoring
//! (RaTEScore and friends) stays outside the core: plug one in through
//! [`EntityExtractor`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casefile::{DepartmentTaxonomy, Section};
use crate::text::{fold_trim, tokenize};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric input is empty")]
    EmptyInput,
    #[error("case {0:?} has no gold annotation for this metric")]
    MissingGold(String),
    #[error("synonym file {path}: {detail}")]
    SynonymFile { path: String, detail: String },
    #[error("variant {variant:?} appears in more than one synonym group")]
    DuplicateVariant { variant: String },
}

/// Medical synonym normalization table: maps the folded form of every
/// variant to its group's canonical label. Canonical labels are fixed
/// points of [`norm_term`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymTable {
    canonical: BTreeMap<String, String>,
}

impl SynonymTable {
    /// Builds a table from synonym groups; the first element of each group
    /// is the canonical label.
    pub fn from_groups<S: AsRef<str>>(groups: &[Vec<S>]) -> Result<Self, EvalError> {
        let mut canonical = BTreeMap::new();
        for group in groups {
            let Some(head) = group.first() else { continue };
            let canon = fold_trim(head.as_ref());
            if canon.is_empty() {
                continue;
            }
            for variant in group {
                let key = fold_trim(variant.as_ref());
                if key.is_empty() {
                    continue;
                }
                if let Some(existing) = canonical.get(&key) {
                    if existing != &canon {
                        return Err(EvalError::DuplicateVariant { variant: key });
                    }
                    continue;
                }
                canonical.insert(key, canon.clone());
            }
        }
        Ok(SynonymTable { canonical })
    }

    /// Loads a JSON file holding a list of synonym groups.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let raw = std::fs::read_to_string(path).map_err(|e| EvalError::SynonymFile {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let groups: Vec<Vec<String>> =
            serde_json::from_str(&raw).map_err(|e| EvalError::SynonymFile {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        Self::from_groups(&groups)
    }

    /// Every canonical label in the table, in sorted order. This doubles
    /// as the default entity inventory for the gazetteer extractor.
    pub fn canonical_labels(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.canonical.values().collect();
        set.into_iter().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }

    fn lookup(&self, key: &str) -> Option<&String> {
        self.canonical.get(key)
    }
}

/// Normalizes one term: table hit yields the canonical label, a miss
/// falls back to the case-folded, trimmed input. Idempotent.
pub fn norm_term(term: &str, table: &SynonymTable) -> String {
    let key = fold_trim(term);
    match table.lookup(&key) {
        Some(canon) => canon.clone(),
        None => key,
    }
}

/// ACC: fraction of cases whose normalized prediction equals the
/// normalized primary gold diagnosis.
pub fn accuracy(pairs: &[(String, String)], table: &SynonymTable) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hits = pairs
        .iter()
        .filter(|(pred, gold)| norm_term(pred, table) == norm_term(gold, table))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// CDR: mean of the per-case product of the guide and diagnosis
/// indicators.
pub fn cdr(per_case: &[(bool, bool)]) -> Result<f64, EvalError> {
    if per_case.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hits = per_case.iter().filter(|(guide, diagnosis)| *guide && *diagnosis).count();
    Ok(hits as f64 / per_case.len() as f64)
}

/// Per-case DCA indicator: the normalized predicted department appears
/// among the gold guide departments.
pub fn dca_indicator(
    pred_department: &str,
    gold_departments: &[String],
    table: &SynonymTable,
) -> bool {
    let pred = norm_term(pred_department, table);
    gold_departments.iter().any(|g| norm_term(g, table) == pred)
}

/// DCA averaged over cases. Every case must carry gold departments.
pub fn dca(
    cases: &[(String, Vec<String>)],
    table: &SynonymTable,
) -> Result<f64, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    for (pred, gold) in cases {
        if gold.is_empty() {
            return Err(EvalError::MissingGold(pred.clone()));
        }
    }
    let hits = cases
        .iter()
        .filter(|(pred, gold)| dca_indicator(pred, gold, table))
        .count();
    Ok(hits as f64 / cases.len() as f64)
}

/// Per-case department-consistency indicator: the predicted label exists
/// in the configured taxonomy at all.
pub fn c_dept_indicator(pred_department: &str, taxonomy: &DepartmentTaxonomy) -> bool {
    taxonomy.has_department(pred_department)
}

/// C_dept averaged over cases.
pub fn c_dept(preds: &[String], taxonomy: &DepartmentTaxonomy) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hits = preds.iter().filter(|p| c_dept_indicator(p, taxonomy)).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Pluggable entity extraction. Implementations return normalized entity
/// labels found in free text. This is the adapter seam for external
/// entity-aware scorers.
pub trait EntityExtractor {
    fn extract(&self, text: &str) -> BTreeSet<String>;
}

/// Default extractor: a deterministic gazetteer over the synonym table's
/// canonical labels. Matches case-insensitively at word boundaries,
/// longest match first, non-overlapping.
pub struct GazetteerExtractor {
    /// Sorted longest-first so the scan prefers maximal matches.
    labels: Vec<String>,
}

impl GazetteerExtractor {
    pub fn new(table: &SynonymTable) -> Self {
        let mut labels = table.canonical_labels();
        labels.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        GazetteerExtractor { labels }
    }
}

impl EntityExtractor for GazetteerExtractor {
    fn extract(&self, text: &str) -> BTreeSet<String> {
        let folded: Vec<char> = text.to_lowercase().chars().collect();
        let n = folded.len();
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < n {
            if !folded[i].is_alphanumeric() {
                i += 1;
                continue;
            }
            // Word boundary on the left: start of text or non-alphanumeric.
            if i > 0 && folded[i - 1].is_alphanumeric() {
                i += 1;
                continue;
            }
            let mut matched_len = 0;
            for label in &self.labels {
                let candidate: Vec<char> = label.chars().collect();
                let len = candidate.len();
                if i + len > n || folded[i..i + len] != candidate[..] {
                    continue;
                }
                // Word boundary on the right.
                if i + len < n && folded[i + len].is_alphanumeric() {
                    continue;
                }
                found.insert(label.clone());
                matched_len = len;
                break;
            }
            if matched_len > 0 {
                i += matched_len;
            } else {
                // Skip the rest of this word.
                while i < n && folded[i].is_alphanumeric() {
                    i += 1;
                }
            }
        }
        found
    }
}

/// Entity-F1 between the entity sets of two texts. Both empty scores 1.0,
/// exactly one empty scores 0.0.
pub fn entity_f1(pred_text: &str, gold_text: &str, extractor: &dyn EntityExtractor) -> f64 {
    let pred = extractor.extract(pred_text);
    let gold = extractor.extract(gold_text);
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        (false, false) => {}
    }
    let overlap = pred.intersection(&gold).count() as f64;
    let precision = overlap / pred.len() as f64;
    let recall = overlap / gold.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-4 with uniform weights, add-one smoothing on zero-match orders,
/// and the brevity penalty. Orders the candidate is too short to produce
/// count as neutral (precision 1.0). Tokenization: case-fold, punctuation
/// to spaces, whitespace split.
pub fn bleu(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let reference = tokenize(reference);
    if cand.is_empty() {
        return if reference.is_empty() { 1.0 } else { 0.0 };
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand_counts = ngram_counts(&cand, n);
        let total: usize = cand_counts.values().sum();
        if total == 0 {
            continue; // too short for this order: neutral term
        }
        let ref_counts = ngram_counts(&reference, n);
        let matched: usize = cand_counts
            .iter()
            .map(|(gram, count)| (*count).min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let precision = if matched == 0 {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += 0.25 * precision.ln();
    }
    let c = cand.len() as f64;
    let r = reference.len() as f64;
    let brevity = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    brevity * log_sum.exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for token_a in a {
        for (j, token_b) in b.iter().enumerate() {
            curr[j + 1] = if token_a == token_b {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// ROUGE-L: LCS-based F-measure with beta = 1, on the shared
/// tokenization.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let reference = tokenize(reference);
    match (cand.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        (false, false) => {}
    }
    let lcs = lcs_len(&cand, &reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / cand.len() as f64;
    let recall = lcs / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Per-section lexical scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SectionScores {
    pub bleu: f64,
    pub rouge_l: f64,
}

/// The aggregate metric report for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_cases: usize,
    pub acc: f64,
    pub cdr: f64,
    pub dca: f64,
    pub c_dept: f64,
    pub entity_f1: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub per_section: BTreeMap<Section, SectionScores>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> SynonymTable {
        SynonymTable::from_groups(&[
            vec!["myocardial infarction", "MI", "heart attack"],
            vec!["rib fracture", "fractured rib"],
            vec!["anemia", "anaemia"],
        ])
        .unwrap()
    }

    #[test]
    fn norm_hits_canonical() {
        assert_eq!(norm_term("MI", &table()), "myocardial infarction");
        assert_eq!(norm_term("Heart Attack", &table()), "myocardial infarction");
    }

    #[test]
    fn norm_miss_folds_and_trims() {
        assert_eq!(norm_term(" Anemia ", &SynonymTable::default()), "anemia");
    }

    #[test]
    fn norm_canonical_is_fixed_point() {
        let t = table();
        for canon in t.canonical_labels() {
            assert_eq!(norm_term(&canon, &t), canon);
        }
    }

    #[test]
    fn norm_is_idempotent() {
        let t = table();
        for term in ["MI", "fractured rib", "unknown thing", " Spaced  Label "] {
            let once = norm_term(term, &t);
            assert_eq!(norm_term(&once, &t), once);
        }
    }

    #[test]
    fn duplicate_variant_across_groups_rejected() {
        let err = SynonymTable::from_groups(&[
            vec!["anemia", "low hemoglobin"],
            vec!["iron deficiency", "low hemoglobin"],
        ])
        .unwrap_err();
        assert!(matches!(err, EvalError::DuplicateVariant { .. }));
    }

    #[test]
    fn accuracy_counts_normalized_matches() {
        let t = table();
        let pairs = vec![
            ("MI".to_string(), "myocardial infarction".to_string()),
            ("pneumonia".to_string(), "tuberculosis".to_string()),
        ];
        assert_eq!(accuracy(&pairs, &t).unwrap(), 0.5);
        assert!(matches!(accuracy(&[], &t), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn cdr_is_product_indicator() {
        assert_eq!(cdr(&[(true, true), (true, false)]).unwrap(), 0.5);
        assert_eq!(cdr(&[(false, true)]).unwrap(), 0.0);
        assert_eq!(cdr(&[(true, true), (true, true)]).unwrap(), 1.0);
    }

    #[test]
    fn dca_and_c_dept_indicators() {
        let t = table();
        assert!(dca_indicator("Cardiology", &["cardiology".into()], &t));
        assert!(!dca_indicator("neurology", &["cardiology".into()], &t));
        let cases = vec![
            ("cardiology".to_string(), vec!["cardiology".to_string()]),
            ("orthopedics".to_string(), vec!["orthopedics".to_string()]),
            ("respiratory".to_string(), vec!["respiratory".to_string()]),
            ("neurology".to_string(), vec!["hematology".to_string()]),
        ];
        assert_eq!(dca(&cases, &t).unwrap(), 0.75);

        let tax = crate::casefile::DepartmentTaxonomy {
            departments: vec!["cardiology".into(), "orthopedics".into()],
            modalities: vec!["lab".into()],
        };
        assert!(c_dept_indicator("Cardiology", &tax));
        assert!(!c_dept_indicator("made-up dept", &tax));
        assert_eq!(
            c_dept(&["cardiology".into(), "made-up".into()], &tax).unwrap(),
            0.5
        );
    }

    #[test]
    fn entity_f1_direct_set_arithmetic() {
        let t = SynonymTable::from_groups(&[
            vec!["anemia"],
            vec!["rib fracture"],
            vec!["pneumonia"],
        ])
        .unwrap();
        let extractor = GazetteerExtractor::new(&t);
        let f1 = entity_f1(
            "signs of anemia and rib fracture",
            "anemia with pneumonia",
            &extractor,
        );
        assert!((f1 - 0.5).abs() < 1e-12); // P = 0.5, R = 0.5
        assert_eq!(entity_f1("anemia", "anemia", &extractor), 1.0);
        assert_eq!(entity_f1("no entities here", "anemia", &extractor), 0.0);
        assert_eq!(entity_f1("nothing", "nothing relevant", &extractor), 1.0);
    }

    #[test]
    fn gazetteer_prefers_longest_match_and_respects_boundaries() {
        let t = SynonymTable::from_groups(&[
            vec!["lung hemorrhage"],
            vec!["hemorrhage"],
            vec!["flu"],
        ])
        .unwrap();
        let extractor = GazetteerExtractor::new(&t);
        let found = extractor.extract("CT shows lung hemorrhage.");
        assert!(found.contains("lung hemorrhage"));
        assert!(!found.contains("hemorrhage"));
        // "flu" must not match inside "fluid".
        assert!(extractor.extract("pleural fluid noted").is_empty());
        assert_eq!(extractor.extract("Flu season").len(), 1);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        assert!((bleu("a b c d e", "a b c d e") - 1.0).abs() < 1e-12);
        assert!((bleu("one two", "one two") - 1.0).abs() < 1e-12); // short identity
        assert!(bleu("x y z w v", "a b c d e") < 0.2); // smoothed floor
        assert!(bleu("x y z w v", "a b c d e") > 0.0);
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("x y", "a b"), 0.0);
        assert_eq!(rouge_l("", ""), 1.0);
        assert_eq!(rouge_l("a", ""), 0.0);
    }

    #[test]
    fn rouge_lcs_by_hand() {
        // LCS("a b c", "a c") = 2; P = 2/3, R = 1; F = 0.8.
        assert!((rouge_l("a b c", "a c") - 0.8).abs() < 1e-12);
    }

    #[test]
    fn bleu_tokenization_is_shared() {
        // Punctuation and case must not affect the score.
        assert!((bleu("A, b! C d E", "a b c d e") - 1.0).abs() < 1e-12);
    }
}
