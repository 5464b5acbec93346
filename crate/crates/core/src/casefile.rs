//! Clinical case data model and ingestion: cases, raw findings, gold
//! annotations, and the department/modality taxonomy.
//!
//! A dataset is one JSON document holding a list of case objects. All types
//! are immutable after construction and safe to share across concurrent
//! case runs.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::fold_trim;

/// The four structured report sections: Diagnostic Basis, Differential
/// Diagnosis, Therapeutic Principle, and Treatment Plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Section {
    DB,
    DD,
    TP,
    TX,
}

impl Section {
    pub const ALL: [Section; 4] = [Section::DB, Section::DD, Section::TP, Section::TX];
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Section::DB => "DB",
            Section::DD => "DD",
            Section::TP => "TP",
            Section::TX => "TX",
        };
        write!(f, "{s}")
    }
}

/// One raw examination finding attached to a case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFinding {
    pub finding_id: String,
    /// Examination modality tag (e.g. lab, imaging, pathology); must come
    /// from the configured modality taxonomy.
    pub modality: String,
    pub content: String,
}

/// Reference annotations for evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Acceptable department routings, in preference order.
    pub guide_departments: Vec<String>,
    /// Disease labels; the first entry is the primary diagnosis.
    pub diagnoses: Vec<String>,
    /// Reference text per report section.
    #[serde(default)]
    pub sections: std::collections::BTreeMap<Section, String>,
}

/// An unstructured clinical case: the input to a consultation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalCase {
    pub case_id: String,
    pub chief_complaint: String,
    #[serde(default)]
    pub medical_history: String,
    #[serde(default)]
    pub raw_findings: Vec<RawFinding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<GroundTruth>,
}

/// The configured universe of department and modality labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepartmentTaxonomy {
    pub departments: Vec<String>,
    pub modalities: Vec<String>,
}

impl DepartmentTaxonomy {
    pub fn load(path: &Path) -> Result<Self, CasefileError> {
        let raw = std::fs::read_to_string(path).map_err(|e| CasefileError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let tax: DepartmentTaxonomy =
            serde_json::from_str(&raw).map_err(|e| CasefileError::Parse {
                record: 0,
                detail: e.to_string(),
            })?;
        tax.validate()?;
        Ok(tax)
    }

    /// Labels must be non-empty and unique after case-folding.
    pub fn validate(&self) -> Result<(), CasefileError> {
        for (name, labels) in [("departments", &self.departments), ("modalities", &self.modalities)]
        {
            if labels.is_empty() {
                return Err(CasefileError::EmptyTaxonomy { field: name });
            }
            let mut seen = BTreeSet::new();
            for label in labels {
                if !seen.insert(fold_trim(label)) {
                    return Err(CasefileError::DuplicateLabel {
                        field: name,
                        label: label.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn has_department(&self, label: &str) -> bool {
        let key = fold_trim(label);
        self.departments.iter().any(|d| fold_trim(d) == key)
    }

    pub fn has_modality(&self, label: &str) -> bool {
        let key = fold_trim(label);
        self.modalities.iter().any(|m| fold_trim(m) == key)
    }
}

#[derive(Debug, Error)]
pub enum CasefileError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record {record}: {detail}")]
    Parse { record: usize, detail: String },
    #[error("duplicate case_id {0:?}")]
    DuplicateCaseId(String),
    #[error("case {case_id:?}: unknown {kind} label {label:?}")]
    UnknownLabel {
        case_id: String,
        kind: &'static str,
        label: String,
    },
    #[error("case {case_id:?} is invalid: {first}")]
    InvalidCase { case_id: String, first: String },
    #[error("taxonomy {field} list is empty")]
    EmptyTaxonomy { field: &'static str },
    #[error("taxonomy {field} contains duplicate label {label:?} after case-folding")]
    DuplicateLabel { field: &'static str, label: String },
}

/// One invariant violation found in a case. Violations are data, not
/// faults: a validation report never aborts the caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub detail: String,
}

/// Loads a dataset file: a JSON array of case objects, order preserved.
///
/// Fails on the first malformed record, duplicate case id, or gold label
/// absent from the taxonomy.
pub fn load_dataset(
    path: &Path,
    taxonomy: &DepartmentTaxonomy,
) -> Result<Vec<ClinicalCase>, CasefileError> {
    let raw = std::fs::read_to_string(path).map_err(|e| CasefileError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_dataset(&raw, taxonomy)
}

/// Parses dataset JSON. Split out from [`load_dataset`] so round-trip
/// checks can run without touching the filesystem.
pub fn parse_dataset(
    raw: &str,
    taxonomy: &DepartmentTaxonomy,
) -> Result<Vec<ClinicalCase>, CasefileError> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(raw).map_err(|e| CasefileError::Parse {
            record: 0,
            detail: format!("dataset is not a JSON array: {e}"),
        })?;
    let mut cases = Vec::with_capacity(values.len());
    let mut seen_ids = BTreeSet::new();
    for (index, value) in values.into_iter().enumerate() {
        let case: ClinicalCase =
            serde_json::from_value(value).map_err(|e| CasefileError::Parse {
                record: index,
                detail: e.to_string(),
            })?;
        if !seen_ids.insert(case.case_id.clone()) {
            return Err(CasefileError::DuplicateCaseId(case.case_id));
        }
        check_case(&case, taxonomy)?;
        cases.push(case);
    }
    Ok(cases)
}

/// Serializes a dataset back to the on-disk JSON form.
pub fn serialize_dataset(cases: &[ClinicalCase]) -> String {
    serde_json::to_string_pretty(cases).expect("case serialization is infallible")
}

fn check_case(case: &ClinicalCase, taxonomy: &DepartmentTaxonomy) -> Result<(), CasefileError> {
    if let Some(gold) = &case.gold {
        for dept in &gold.guide_departments {
            if !taxonomy.has_department(dept) {
                return Err(CasefileError::UnknownLabel {
                    case_id: case.case_id.clone(),
                    kind: "department",
                    label: dept.clone(),
                });
            }
        }
    }
    for finding in &case.raw_findings {
        if !taxonomy.has_modality(&finding.modality) {
            return Err(CasefileError::UnknownLabel {
                case_id: case.case_id.clone(),
                kind: "modality",
                label: finding.modality.clone(),
            });
        }
    }
    let violations = validate_case(case, taxonomy);
    if let Some(first) = violations.first() {
        return Err(CasefileError::InvalidCase {
            case_id: case.case_id.clone(),
            first: format!("{}: {}", first.field, first.detail),
        });
    }
    Ok(())
}

/// Checks every case invariant and reports each violation found. An empty
/// report means the case is valid.
pub fn validate_case(case: &ClinicalCase, taxonomy: &DepartmentTaxonomy) -> Vec<Violation> {
    let mut violations = Vec::new();
    if case.case_id.trim().is_empty() {
        violations.push(Violation {
            field: "case_id".into(),
            detail: "must be non-empty".into(),
        });
    }
    if case.chief_complaint.trim().is_empty() {
        violations.push(Violation {
            field: "chief_complaint".into(),
            detail: "must be non-empty".into(),
        });
    }
    let mut finding_ids = BTreeSet::new();
    for finding in &case.raw_findings {
        if !finding_ids.insert(fold_trim(&finding.finding_id)) {
            violations.push(Violation {
                field: "raw_findings.finding_id".into(),
                detail: format!("duplicate finding_id {:?}", finding.finding_id),
            });
        }
        if !taxonomy.has_modality(&finding.modality) {
            violations.push(Violation {
                field: "raw_findings.modality".into(),
                detail: format!("unknown modality {:?}", finding.modality),
            });
        }
    }
    if let Some(gold) = &case.gold {
        if gold.diagnoses.is_empty() {
            violations.push(Violation {
                field: "gold.diagnoses".into(),
                detail: "must be non-empty when gold is present".into(),
            });
        }
        for dept in &gold.guide_departments {
            if !taxonomy.has_department(dept) {
                violations.push(Violation {
                    field: "gold.guide_departments".into(),
                    detail: format!("unknown department {:?}", dept),
                });
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn taxonomy() -> DepartmentTaxonomy {
        DepartmentTaxonomy {
            departments: vec![
                "orthopedics".into(),
                "respiratory".into(),
                "hematology".into(),
                "cardiology".into(),
            ],
            modalities: vec!["imaging".into(), "lab".into(), "pathology".into()],
        }
    }

    fn case(id: &str) -> ClinicalCase {
        ClinicalCase {
            case_id: id.into(),
            chief_complaint: "chest pain after a fall".into(),
            medical_history: "previously healthy".into(),
            raw_findings: vec![RawFinding {
                finding_id: "f1".into(),
                modality: "imaging".into(),
                content: "chest x-ray, two views".into(),
            }],
            gold: None,
        }
    }

    #[test]
    fn load_preserves_order() {
        let json = serialize_dataset(&[case("c1"), case("c2")]);
        let cases = parse_dataset(&json, &taxonomy()).unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[0].case_id, "c1");
        assert_eq!(cases[1].case_id, "c2");
    }

    #[test]
    fn duplicate_case_id_rejected() {
        let json = serialize_dataset(&[case("c1"), case("c1")]);
        let err = parse_dataset(&json, &taxonomy()).unwrap_err();
        match err {
            CasefileError::DuplicateCaseId(id) => assert_eq!(id, "c1"),
            other => panic!("expected duplicate-id error, got {other}"),
        }
    }

    #[test]
    fn unknown_gold_department_rejected() {
        let mut c = case("c1");
        c.gold = Some(GroundTruth {
            guide_departments: vec!["astrology".into()],
            diagnoses: vec!["rib fracture".into()],
            sections: Default::default(),
        });
        let json = serialize_dataset(&[c]);
        let err = parse_dataset(&json, &taxonomy()).unwrap_err();
        match err {
            CasefileError::UnknownLabel { kind, label, .. } => {
                assert_eq!(kind, "department");
                assert_eq!(label, "astrology");
            }
            other => panic!("expected unknown-label error, got {other}"),
        }
    }

    #[test]
    fn unknown_modality_rejected() {
        let mut c = case("c1");
        c.raw_findings[0].modality = "phrenology".into();
        let json = serialize_dataset(&[c]);
        assert!(matches!(
            parse_dataset(&json, &taxonomy()),
            Err(CasefileError::UnknownLabel { kind: "modality", .. })
        ));
    }

    #[test]
    fn malformed_record_names_index() {
        let json = r#"[{"case_id":"ok","chief_complaint":"x"},{"chief_complaint":"missing id"}]"#;
        let err = parse_dataset(json, &taxonomy()).unwrap_err();
        match err {
            CasefileError::Parse { record, .. } => assert_eq!(record, 1),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn validate_flags_empty_complaint() {
        let mut c = case("c1");
        c.chief_complaint = "  ".into();
        let report = validate_case(&c, &taxonomy());
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].field, "chief_complaint");
    }

    #[test]
    fn validate_valid_case_is_empty() {
        assert!(validate_case(&case("c1"), &taxonomy()).is_empty());
    }

    #[test]
    fn validate_flags_duplicate_finding_ids() {
        let mut c = case("c1");
        c.raw_findings.push(RawFinding {
            finding_id: "F1".into(), // duplicate after case-folding
            modality: "lab".into(),
            content: "cbc".into(),
        });
        let report = validate_case(&c, &taxonomy());
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].field, "raw_findings.finding_id");
    }

    #[test]
    fn taxonomy_rejects_folded_duplicates() {
        let tax = DepartmentTaxonomy {
            departments: vec!["Cardiology".into(), "cardiology ".into()],
            modalities: vec!["lab".into()],
        };
        assert!(matches!(
            tax.validate(),
            Err(CasefileError::DuplicateLabel { field: "departments", .. })
        ));
    }

    #[test]
    fn empty_findings_signal_no_examinations() {
        let mut c = case("c1");
        c.raw_findings.clear();
        assert!(validate_case(&c, &taxonomy()).is_empty());
    }
}
