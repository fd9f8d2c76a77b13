//! Single-shot RTL prompt assembly from a JSON design description.
//!
//! Rendered layout:
//!
//! ```text
//! <header>
//!
//! module: <name>
//! ports:
//!  <port line>
//! explanation: <text>
//! notes:
//!  - <note>
//!
//! guidelines:
//!  - <line>
//! ```

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::vlex::{tokenize, TokenKind};

pub const SPEC_FORMAT_VERSION: u32 = 1;

/// Line prefixes the renderer owns. Free text may not start with them.
pub const RESERVED_KEYS: [&str; 5] = ["module:", "ports:", "explanation:", "notes:", "guidelines:"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    #[serde(default = "default_version")]
    pub format_version: u32,
    /// Free-form remark carried in the file; never rendered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub header: String,
    #[serde(default)]
    pub modules: Vec<ModuleSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub global_guidelines: Vec<String>,
}

fn default_version() -> u32 {
    SPEC_FORMAT_VERSION
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub name: String,
    pub explanation: String,
    /// Port declaration lines, rendered verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ports: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpecError {
    UnsupportedVersion { found: u32 },
    EmptyHeader,
    EmptyModuleName { index: usize },
    BadModuleName { name: String },
    DuplicateModule { name: String },
    EmptyExplanation { module: String },
    BadPort { module: String, line: String, reason: String },
    /// Text that the rendered layout cannot carry unambiguously.
    BadText { field: String, line: String, reason: String },
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecError::UnsupportedVersion { found } => {
                write!(f, "unsupported format_version {found} (expected {SPEC_FORMAT_VERSION})")
            }
            SpecError::EmptyHeader => f.write_str("header is empty"),
            SpecError::EmptyModuleName { index } => write!(f, "module #{index} has an empty name"),
            SpecError::BadModuleName { name } => write!(f, "`{name}` is not a plain identifier"),
            SpecError::DuplicateModule { name } => write!(f, "module `{name}` is listed more than once"),
            SpecError::EmptyExplanation { module } => write!(f, "module `{module}` has no explanation"),
            SpecError::BadPort { module, line, reason } => {
                write!(f, "module `{module}`: bad port line `{line}`: {reason}")
            }
            SpecError::BadText { field, line, reason } => write!(f, "{field}: `{line}`: {reason}"),
        }
    }
}

/// Every problem found in a spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvalidSpec(pub Vec<SpecError>);

impl fmt::Display for InvalidSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid design spec ({} problem(s))", self.0.len())?;
        for e in &self.0 {
            write!(f, "\n  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for InvalidSpec {}

impl DesignSpec {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}

fn is_identifier(s: &str) -> bool {
    let mut c = s.chars();
    matches!(c.next(), Some(ch) if ch.is_ascii_alphabetic() || ch == '_')
        && c.all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '$')
}

/// Checks one port declaration line; `None` when it is acceptable.
pub fn check_port_line(line: &str) -> Option<String> {
    if line.trim().is_empty() {
        return Some("empty line".into());
    }
    if line.contains('\n') {
        return Some("contains a line break".into());
    }
    let s = tokenize(line);
    if let Some(t) = s.tokens.iter().find(|t| t.kind == TokenKind::Corrupt) {
        return Some(format!("unlexable text `{}` at column {}", t.text, t.span.col));
    }
    let mut stack = Vec::new();
    for t in &s.tokens {
        if t.kind != TokenKind::Punct {
            continue;
        }
        match t.text.as_str() {
            "(" | "[" | "{" => stack.push(t.text.as_str()),
            ")" | "]" | "}" => {
                let want = match t.text.as_str() {
                    ")" => "(",
                    "]" => "[",
                    _ => "{",
                };
                if stack.pop() != Some(want) {
                    return Some(format!("unbalanced `{}` at column {}", t.text, t.span.col));
                }
            }
            _ => {}
        }
    }
    if let Some(open) = stack.last() {
        return Some(format!("unclosed `{open}`"));
    }
    let first = &s.tokens[0];
    if !(first.kind == TokenKind::Keyword
        && matches!(first.text.as_str(), "input" | "output" | "inout" | "ref"))
    {
        return Some(format!("expected a direction keyword, found `{}`", first.text));
    }
    let mut body = &s.tokens[1..];
    if body.last().is_some_and(|t| t.is(TokenKind::Punct, ",")) {
        body = &body[..body.len() - 1];
    }
    // name is the last identifier outside brackets
    let mut depth = 0;
    let mut name = None;
    for t in body {
        match (t.kind, t.text.as_str()) {
            (TokenKind::Punct, "(" | "[" | "{") => depth += 1,
            (TokenKind::Punct, ")" | "]" | "}") => depth -= 1,
            (TokenKind::Identifier, _) if depth == 0 => name = Some(t),
            (TokenKind::Punct, ";") => return Some("`;` inside a port list".into()),
            _ => {}
        }
    }
    if name.is_none() {
        return Some("no port name".into());
    }
    None
}

fn check_text(field: String, text: &str, errors: &mut Vec<SpecError>) {
    for line in text.lines() {
        let t = line.trim_start();
        if let Some(k) = RESERVED_KEYS.iter().find(|k| t.starts_with(*k)) {
            errors.push(SpecError::BadText {
                field: field.clone(),
                line: line.to_string(),
                reason: format!("starts with the reserved key `{k}`"),
            });
        } else if t.is_empty() {
            errors.push(SpecError::BadText {
                field: field.clone(),
                line: line.to_string(),
                reason: "blank line".into(),
            });
        }
    }
}

/// Collects every problem; never stops at the first.
pub fn validate_spec(spec: &DesignSpec) -> Result<(), InvalidSpec> {
    let mut errors = Vec::new();
    if spec.format_version != SPEC_FORMAT_VERSION {
        errors.push(SpecError::UnsupportedVersion {
            found: spec.format_version,
        });
    }
    if spec.header.trim().is_empty() {
        errors.push(SpecError::EmptyHeader);
    } else {
        check_text("header".into(), spec.header.trim(), &mut errors);
    }
    let mut seen = HashSet::new();
    for (i, m) in spec.modules.iter().enumerate() {
        if m.name.trim().is_empty() {
            errors.push(SpecError::EmptyModuleName { index: i });
        } else if !is_identifier(&m.name) || crate::vlex::is_keyword(&m.name) {
            errors.push(SpecError::BadModuleName { name: m.name.clone() });
        } else if !seen.insert(m.name.as_str()) {
            errors.push(SpecError::DuplicateModule { name: m.name.clone() });
        }
        if m.explanation.trim().is_empty() {
            errors.push(SpecError::EmptyExplanation { module: m.name.clone() });
        } else {
            check_text(format!("{}.explanation", m.name), m.explanation.trim(), &mut errors);
        }
        for line in m.ports.iter().flatten() {
            if let Some(reason) = check_port_line(line) {
                errors.push(SpecError::BadPort {
                    module: m.name.clone(),
                    line: line.clone(),
                    reason,
                });
            }
        }
        for note in m.notes.iter().flatten() {
            single_line(format!("{}.notes", m.name), note, &mut errors);
        }
    }
    for g in &spec.global_guidelines {
        single_line("global_guidelines".into(), g, &mut errors);
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(InvalidSpec(errors))
    }
}

fn single_line(field: String, text: &str, errors: &mut Vec<SpecError>) {
    if text.trim().is_empty() || text.contains('\n') {
        errors.push(SpecError::BadText {
            field,
            line: text.to_string(),
            reason: "must be one non-empty line".into(),
        });
    }
}

fn push_trimmed(out: &mut String, text: &str) {
    for line in text.trim().lines() {
        out.push_str(line.trim_end());
        out.push('\n');
    }
}

/// Renders a validated spec. Identical specs give identical bytes.
pub fn render_prompt(spec: &DesignSpec) -> Result<String, InvalidSpec> {
    validate_spec(spec)?;
    let mut out = String::new();
    push_trimmed(&mut out, &spec.header);
    for m in &spec.modules {
        out.push('\n');
        out.push_str("module: ");
        out.push_str(&m.name);
        out.push('\n');
        if let Some(ports) = &m.ports {
            out.push_str("ports:\n");
            for p in ports {
                out.push(' ');
                out.push_str(p.trim());
                out.push('\n');
            }
        }
        out.push_str("explanation: ");
        push_trimmed(&mut out, &m.explanation);
        if let Some(notes) = &m.notes {
            out.push_str("notes:\n");
            for n in notes {
                out.push_str(" - ");
                out.push_str(n.trim());
                out.push('\n');
            }
        }
    }
    if !spec.global_guidelines.is_empty() {
        out.push_str("\nguidelines:\n");
        for g in &spec.global_guidelines {
            out.push_str(" - ");
            out.push_str(g.trim());
            out.push('\n');
        }
    }
    Ok(out)
}
