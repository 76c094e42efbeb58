//! Regular-expression payload inspection with first-match-wins rulesets.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use regex::bytes::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::xml::{escape_attr, node_path};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DpiVerdict {
    Deny,
    Permit,
}

impl DpiVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            DpiVerdict::Deny => "deny",
            DpiVerdict::Permit => "permit",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "deny" => Some(DpiVerdict::Deny),
            "permit" => Some(DpiVerdict::Permit),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DpiRule {
    pub dpi_id: u32,
    pub pattern: String,
    pub verdict: DpiVerdict,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub alert_on_match: bool,
}

impl DpiRule {
    pub fn deny(dpi_id: u32, pattern: impl Into<String>, description: impl Into<String>) -> Self {
        DpiRule {
            dpi_id,
            pattern: pattern.into(),
            verdict: DpiVerdict::Deny,
            description: description.into(),
            alert_on_match: true,
        }
    }

    pub fn permit(dpi_id: u32, pattern: impl Into<String>) -> Self {
        DpiRule {
            dpi_id,
            pattern: pattern.into(),
            verdict: DpiVerdict::Permit,
            description: String::new(),
            alert_on_match: false,
        }
    }

    pub fn to_xml(&self) -> String {
        let mut s = format!(
            r#"<rule id="{}" pattern="{}" verdict="{}" alert="{}""#,
            self.dpi_id,
            escape_attr(&self.pattern),
            self.verdict.as_str(),
            self.alert_on_match
        );
        if !self.description.is_empty() {
            let _ = write!(s, r#" description="{}""#, escape_attr(&self.description));
        }
        s.push_str("/>");
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DpiRuleset {
    pub rules: Vec<DpiRule>,
    pub default_verdict: DpiVerdict,
}

impl Default for DpiRuleset {
    fn default() -> Self {
        DpiRuleset { rules: Vec::new(), default_verdict: DpiVerdict::Permit }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DpiError {
    #[error("DPI rule {dpi_id}: pattern does not compile: {message}")]
    PatternCompile { dpi_id: u32, message: String },
    #[error("DPI rule id {0} appears twice in one ruleset")]
    DuplicateId(u32),
    #[error("ruleset XML at {path}: {message}")]
    Xml { path: String, message: String },
}

impl DpiRuleset {
    pub fn new(rules: Vec<DpiRule>, default_verdict: DpiVerdict) -> Self {
        DpiRuleset { rules, default_verdict }
    }

    pub fn compile(&self) -> Result<CompiledRuleset, DpiError> {
        let mut seen = BTreeSet::new();
        let mut compiled = Vec::with_capacity(self.rules.len());
        for rule in &self.rules {
            if !seen.insert(rule.dpi_id) {
                return Err(DpiError::DuplicateId(rule.dpi_id));
            }
            let re = compile_pattern(&rule.pattern)
                .map_err(|message| DpiError::PatternCompile { dpi_id: rule.dpi_id, message })?;
            compiled.push((rule.clone(), re));
        }
        Ok(CompiledRuleset { source: self.clone(), rules: compiled })
    }

    /// `<ruleset id=".." default="..">` interchange form.
    pub fn to_xml(&self, id: &str) -> String {
        let mut s = format!(
            r#"<ruleset id="{}" default="{}">"#,
            escape_attr(id),
            self.default_verdict.as_str()
        );
        for r in &self.rules {
            s.push_str(&r.to_xml());
        }
        s.push_str("</ruleset>");
        s
    }

    /// Parses a standalone `<ruleset>` fragment, returning its id.
    pub fn from_xml(text: &str) -> Result<(String, DpiRuleset), DpiError> {
        let doc = roxmltree::Document::parse(text)
            .map_err(|e| DpiError::Xml { path: "/".into(), message: e.to_string() })?;
        Self::from_node(doc.root_element())
    }

    pub fn from_node(node: roxmltree::Node<'_, '_>) -> Result<(String, DpiRuleset), DpiError> {
        let err = |n: roxmltree::Node<'_, '_>, message: String| DpiError::Xml { path: node_path(n), message };
        if node.tag_name().name() != "ruleset" {
            return Err(err(node, "expected <ruleset>".into()));
        }
        let id = node
            .attribute("id")
            .ok_or_else(|| err(node, "missing attribute id".into()))?
            .to_string();
        let default_verdict = match node.attribute("default") {
            None => DpiVerdict::Permit,
            Some(v) => DpiVerdict::parse(v).ok_or_else(|| err(node, format!("bad default {v:?}")))?,
        };
        let mut rules = Vec::new();
        for child in node.children().filter(|c| c.is_element()) {
            if child.tag_name().name() != "rule" {
                return Err(err(child, "unexpected element".into()));
            }
            let dpi_id = child
                .attribute("id")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(child, "missing or non-numeric id".into()))?;
            let pattern = child
                .attribute("pattern")
                .ok_or_else(|| err(child, "missing pattern".into()))?
                .to_string();
            let verdict = child
                .attribute("verdict")
                .and_then(DpiVerdict::parse)
                .ok_or_else(|| err(child, "verdict must be deny or permit".into()))?;
            let alert_on_match = match child.attribute("alert") {
                None => false,
                Some("true") | Some("1") => true,
                Some("false") | Some("0") => false,
                Some(v) => return Err(err(child, format!("bad alert flag {v:?}"))),
            };
            let description = child.attribute("description").unwrap_or_default().to_string();
            rules.push(DpiRule { dpi_id, pattern, verdict, description, alert_on_match });
        }
        Ok((id, DpiRuleset { rules, default_verdict }))
    }
}

fn compile_pattern(pattern: &str) -> Result<Regex, String> {
    RegexBuilder::new(pattern)
        .unicode(false)
        .build()
        .map_err(|e| e.to_string())
}

/// A ruleset with every pattern compiled, ready for scanning.
#[derive(Debug, Clone)]
pub struct CompiledRuleset {
    source: DpiRuleset,
    rules: Vec<(DpiRule, Regex)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanOutcome {
    pub verdict: DpiVerdict,
    pub matched: Option<u32>,
    pub rules_evaluated: usize,
}

impl CompiledRuleset {
    pub fn source(&self) -> &DpiRuleset {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rule(&self, dpi_id: u32) -> Option<&DpiRule> {
        self.rules.iter().map(|(r, _)| r).find(|r| r.dpi_id == dpi_id)
    }
}

/// Evaluates rules in order and stops at the first match.
pub fn dpi_scan(ruleset: &CompiledRuleset, payload: &[u8]) -> ScanOutcome {
    for (i, (rule, re)) in ruleset.rules.iter().enumerate() {
        if re.is_match(payload) {
            return ScanOutcome { verdict: rule.verdict, matched: Some(rule.dpi_id), rules_evaluated: i + 1 };
        }
    }
    ScanOutcome {
        verdict: ruleset.source.default_verdict,
        matched: None,
        rules_evaluated: ruleset.rules.len(),
    }
}

/// Pattern for the CVE-2014-6271 function-definition prefix `() { :; };`.
pub const SHELLSHOCK_PATTERN: &str = r"\(\)\s*\{\s*:;\s*\};";
