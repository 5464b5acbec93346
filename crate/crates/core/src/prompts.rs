//! Consultation prompt templates and deterministic text builders.
//!
//! The compiled-in defaults can be replaced per template id through the
//! gateway config file. Every builder is a pure function of its inputs so
//! request digests are stable across runs.

use std::collections::HashMap;

use crate::casefile::ClinicalCase;
use crate::gateway::{render, GatewayError, PromptTemplate};
use crate::roster::{AgentRole, AgentSpec, EvidenceBase, EvidenceOrigin};

/// Structured-output schema for specialist replies.
pub const IBIS_SCHEMA: &str = r#"Reply with exactly one fenced JSON block. Either {"abstain": true} or:
{"tuples": [{"position": "<disease name>", "argument": "<clinical rationale connecting position and evidence>", "evidence": [{"source": "<evidence entry id such as E2, or a named medical knowledge base>", "excerpt": "<verbatim quote from that source>"}], "proposed_causes": ["<disease this position causes>"], "comorbid_with": ["<co-occurring disease proposed in this consultation>"]}]}
A source matching E<number> cites the shared evidence base and its excerpt must be copied verbatim from that entry. Every tuple needs at least one evidence item."#;

/// Structured-output schema for the recruitment decision.
pub const RECRUITMENT_SCHEMA: &str = r#"Reply with exactly one fenced JSON block:
{"specialists": ["<agent_id>"], "examiners": ["<agent_id>"], "case_domains": ["<involved department, most relevant first>"], "rationale": "<one sentence>"}
Recruit at least one specialist. Use only agent ids from the catalog."#;

/// Structured-output schema for a model-based logic audit.
pub const AUDIT_SCHEMA: &str = r#"Reply with exactly one fenced JSON block:
{"logic_score": <number between 0 and 1>, "violations": [{"kind": "<short kind>", "detail": "<what is unsound>"}]}"#;

/// Structured-output schema for the final report sections.
pub const REPORT_SCHEMA: &str = r#"Reply with exactly one fenced JSON block:
{"DB": "<diagnostic basis>", "DD": "<differential diagnosis>", "TP": "<therapeutic principle>", "TX": "<treatment plan>"}"#;

/// The five consultation templates, keyed by role in the workflow.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub recruitment: PromptTemplate,
    pub examiner_report: PromptTemplate,
    pub specialist_ibis: PromptTemplate,
    pub logic_audit: PromptTemplate,
    pub report_sections: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            recruitment: PromptTemplate {
                template_id: "recruitment".into(),
                role_instructions: "You are the general practitioner leading a hospital consultation. \
                    Review the case and assemble the consultation team from the catalog: recruit every \
                    specialist whose department is plausibly involved and every examiner whose modality \
                    matches an available finding. List the involved departments most relevant first."
                    .into(),
                slots: vec!["case".into(), "catalog".into(), "schema".into()],
            },
            examiner_report: PromptTemplate {
                template_id: "examiner_report".into(),
                role_instructions: "You are an examination agent. Interpret the raw finding below and \
                    write a concise professional examination report. Describe objective findings only; \
                    do not diagnose."
                    .into(),
                slots: vec!["agent".into(), "case".into(), "finding".into()],
            },
            specialist_ibis: PromptTemplate {
                template_id: "specialist_ibis".into(),
                role_instructions: "You are a clinical specialist in a structured consultation. Propose \
                    diagnostic positions grounded strictly in the shared evidence base, cite entries by \
                    id with verbatim excerpts, and state causal and comorbid relations between proposed \
                    diseases. If the case falls outside your expertise, abstain."
                    .into(),
                slots: vec![
                    "agent".into(),
                    "case".into(),
                    "evidence".into(),
                    "feedback".into(),
                    "schema".into(),
                ],
            },
            logic_audit: PromptTemplate {
                template_id: "logic_audit".into(),
                role_instructions: "You are the general practitioner auditing one specialist's \
                    argumentation. Judge whether each argument is supported by its cited evidence and \
                    whether the proposed causal relations are clinically sound."
                    .into(),
                slots: vec!["agent".into(), "tuples".into(), "evidence".into(), "schema".into()],
            },
            report_sections: PromptTemplate {
                template_id: "report_sections".into(),
                role_instructions: "You are the general practitioner writing the final consultation \
                    report. Ground every statement in the winning diagnosis chain, its supporting \
                    arguments, and the cited evidence."
                    .into(),
                slots: vec![
                    "case".into(),
                    "chain".into(),
                    "arguments".into(),
                    "evidence".into(),
                    "schema".into(),
                ],
            },
        }
    }
}

impl TemplateSet {
    /// Replaces defaults with any overrides carrying a matching id.
    pub fn apply_overrides(&mut self, overrides: &[PromptTemplate]) {
        for tpl in overrides {
            match tpl.template_id.as_str() {
                "recruitment" => self.recruitment = tpl.clone(),
                "examiner_report" => self.examiner_report = tpl.clone(),
                "specialist_ibis" => self.specialist_ibis = tpl.clone(),
                "logic_audit" => self.logic_audit = tpl.clone(),
                "report_sections" => self.report_sections = tpl.clone(),
                other => log::warn!("ignoring unknown template override {other:?}"),
            }
        }
    }
}

fn bindings(pairs: &[(&str, &str)]) -> HashMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Flat text rendering of a case for prompts.
pub fn case_text(case: &ClinicalCase) -> String {
    let mut out = format!("Case {}\nChief complaint: {}\n", case.case_id, case.chief_complaint);
    if !case.medical_history.trim().is_empty() {
        out.push_str(&format!("Medical history: {}\n", case.medical_history));
    }
    if case.raw_findings.is_empty() {
        out.push_str("Raw findings: none recorded\n");
    } else {
        out.push_str("Raw findings:\n");
        for finding in &case.raw_findings {
            out.push_str(&format!(
                "- {} [{}]: {}\n",
                finding.finding_id, finding.modality, finding.content
            ));
        }
    }
    out
}

/// Roster catalog shown to the recruiting GP (GP itself excluded).
pub fn catalog_text(agents: &[AgentSpec]) -> String {
    let mut out = String::new();
    for agent in agents {
        match &agent.role {
            AgentRole::Gp => continue,
            AgentRole::Specialist(dept) => {
                out.push_str(&format!(
                    "- {}: specialist, department {} (domain: {})\n",
                    agent.agent_id,
                    dept,
                    agent.domain.join(", ")
                ));
            }
            AgentRole::Examiner(modality) => {
                out.push_str(&format!(
                    "- {}: examiner, modality {} (domain: {})\n",
                    agent.agent_id,
                    modality,
                    agent.domain.join(", ")
                ));
            }
        }
    }
    out
}

/// Numbered rendering of the evidence base for specialist prompts.
pub fn evidence_text(base: &EvidenceBase) -> String {
    let mut out = String::new();
    for entry in &base.entries {
        let origin = match &entry.origin {
            EvidenceOrigin::ClinicalRecord => "clinical_record".to_string(),
            EvidenceOrigin::ExamReport { agent_id, finding_id } => {
                format!("exam_report by {agent_id} on {finding_id}")
            }
        };
        out.push_str(&format!("{} ({}): {}\n", entry.entry_id, origin, entry.text));
    }
    out
}

/// One-line agent identity injected into per-agent prompts. Distinct
/// identities keep request digests distinct across agents sharing a
/// backend.
pub fn agent_identity(agent: &AgentSpec) -> String {
    match &agent.role {
        AgentRole::Gp => format!("You are {} (general practitioner).", agent.agent_id),
        AgentRole::Specialist(dept) => format!(
            "You are {} (specialist, department {}; domain: {}).",
            agent.agent_id,
            dept,
            agent.domain.join(", ")
        ),
        AgentRole::Examiner(modality) => format!(
            "You are {} (examiner, modality {}; domain: {}).",
            agent.agent_id,
            modality,
            agent.domain.join(", ")
        ),
    }
}

pub fn recruitment_prompt(
    templates: &TemplateSet,
    case: &ClinicalCase,
    agents: &[AgentSpec],
) -> Result<String, GatewayError> {
    render(
        &templates.recruitment,
        &bindings(&[
            ("case", &case_text(case)),
            ("catalog", &catalog_text(agents)),
            ("schema", RECRUITMENT_SCHEMA),
        ]),
    )
}

pub fn examiner_prompt(
    templates: &TemplateSet,
    examiner: &AgentSpec,
    case: &ClinicalCase,
    finding_id: &str,
    finding_text: &str,
) -> Result<String, GatewayError> {
    render(
        &templates.examiner_report,
        &bindings(&[
            ("agent", &agent_identity(examiner)),
            ("case", &case_text(case)),
            ("finding", &format!("{finding_id}: {finding_text}")),
        ]),
    )
}

pub fn specialist_prompt(
    templates: &TemplateSet,
    specialist: &AgentSpec,
    case: &ClinicalCase,
    evidence: &EvidenceBase,
    feedback: &str,
) -> Result<String, GatewayError> {
    render(
        &templates.specialist_ibis,
        &bindings(&[
            ("agent", &agent_identity(specialist)),
            ("case", &case_text(case)),
            ("evidence", &evidence_text(evidence)),
            ("feedback", feedback),
            ("schema", IBIS_SCHEMA),
        ]),
    )
}

pub fn audit_prompt(
    templates: &TemplateSet,
    audited: &AgentSpec,
    tuples_json: &str,
    evidence: &EvidenceBase,
) -> Result<String, GatewayError> {
    render(
        &templates.logic_audit,
        &bindings(&[
            ("agent", &format!("Audited agent: {}", audited.agent_id)),
            ("tuples", tuples_json),
            ("evidence", &evidence_text(evidence)),
            ("schema", AUDIT_SCHEMA),
        ]),
    )
}

pub fn report_prompt(
    templates: &TemplateSet,
    case: &ClinicalCase,
    chain_text: &str,
    arguments_text: &str,
    evidence: &EvidenceBase,
) -> Result<String, GatewayError> {
    render(
        &templates.report_sections,
        &bindings(&[
            ("case", &case_text(case)),
            ("chain", chain_text),
            ("arguments", arguments_text),
            ("evidence", &evidence_text(evidence)),
            ("schema", REPORT_SCHEMA),
        ]),
    )
}

/// Appended to the original prompt for the single structured retry.
pub fn format_reminder(error: &str) -> String {
    format!(
        "## reminder\nYour previous reply could not be parsed ({error}). \
         Reply again following the schema exactly, with one fenced JSON code block."
    )
}
