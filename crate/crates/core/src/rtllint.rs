//! Failure-mode detectors for generated RTL.
//!
//! Everything here works on a shallow parse of the token stream: module
//! regions, port lists, declarations and identifier references. No
//! expression grammar, no elaboration. Parameterized ranges such as
//! `[WIDTH-1:0]` are kept as text and never evaluated, so range checks only
//! fire when both the declaration and the select use literal bounds.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::vlex::{module_chunks, tokenize, Span, TokenKind, VToken, VTokenStream};

/// Shortest suffix chain that is reported.
pub const SUFFIX_CHAIN_MIN: usize = 4;
/// Shortest run of repeated lines that is reported.
pub const REPEAT_MIN_LINES: usize = 3;
/// Two lines are "the same" above this similarity.
pub const REPEAT_SIMILARITY: f64 = 0.80;
/// Shortest block of declarations copied from another module.
pub const REDUNDANT_GROUP_MIN: usize = 3;
/// A line is garbage when more than this share of its tokens are operators.
pub const GARBAGE_RATIO: f64 = 0.5;
/// ...and at least this many of them.
pub const GARBAGE_MIN_TOKENS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    #[serde(rename = "redundant-decl")]
    RedundantDecl,
    #[serde(rename = "suffix-chain")]
    SuffixChain,
    #[serde(rename = "corrupt-output")]
    CorruptOutput,
    #[serde(rename = "range-violation")]
    RangeViolation,
    #[serde(rename = "unused-port")]
    UnusedPort,
    #[serde(rename = "repetition")]
    Repetition,
}

impl Rule {
    pub const ALL: [Rule; 6] = [
        Rule::RedundantDecl,
        Rule::SuffixChain,
        Rule::CorruptOutput,
        Rule::RangeViolation,
        Rule::UnusedPort,
        Rule::Repetition,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Rule::RedundantDecl => "redundant-decl",
            Rule::SuffixChain => "suffix-chain",
            Rule::CorruptOutput => "corrupt-output",
            Rule::RangeViolation => "range-violation",
            Rule::UnusedPort => "unused-port",
            Rule::Repetition => "repetition",
        }
    }

    pub fn severity(self) -> Severity {
        match self {
            Rule::CorruptOutput | Rule::RangeViolation => Severity::Error,
            _ => Severity::Warning,
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Warning => "warning",
            Severity::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintFinding {
    pub rule: Rule,
    pub severity: Severity,
    pub file: String,
    pub span: Span,
    pub message: String,
    pub evidence: Vec<String>,
}

impl fmt::Display for LintFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}: {}[{}]: {}",
            self.file, self.span.line, self.span.col, self.severity, self.rule, self.message
        )
    }
}

/// Thresholds, for embedding in reports.
pub fn thresholds() -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("suffix_chain_min", SUFFIX_CHAIN_MIN as f64),
        ("repeat_min_lines", REPEAT_MIN_LINES as f64),
        ("repeat_similarity", REPEAT_SIMILARITY),
        ("redundant_group_min", REDUNDANT_GROUP_MIN as f64),
        ("garbage_ratio", GARBAGE_RATIO),
        ("garbage_min_tokens", GARBAGE_MIN_TOKENS as f64),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Verilog,
    Prose,
}

impl SourceKind {
    /// `.v`, `.sv`, `.vh` and `.svh` are Verilog; anything else is prose.
    pub fn from_path(path: &str) -> Self {
        let ext = Path::new(path)
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("v" | "sv" | "vh" | "svh") => SourceKind::Verilog,
            _ => SourceKind::Prose,
        }
    }
}

// ---------------------------------------------------------------- parse

/// Literal `[msb:lsb]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LitRange {
    pub msb: i64,
    pub lsb: i64,
}

impl LitRange {
    pub fn width(&self) -> i64 {
        (self.msb - self.lsb).abs() + 1
    }

    pub fn contains(&self, bit: i64) -> bool {
        bit >= self.msb.min(self.lsb) && bit <= self.msb.max(self.lsb)
    }
}

impl fmt::Display for LitRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}:{}]", self.msb, self.lsb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Input,
    Output,
    Inout,
    Ref,
    /// Non-ANSI header entry whose body declaration was not found.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Port {
    pub name: String,
    pub direction: Direction,
    /// Declared range text, e.g. `[WIDTH-1:0]`.
    pub range_text: Option<String>,
    pub range: Option<LitRange>,
    /// Token index of the declaring identifier.
    pub token: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decl {
    pub name: String,
    pub range_text: Option<String>,
    pub range: Option<LitRange>,
    pub token: usize,
    /// Index into [`ShallowModule::statements`].
    pub statement: usize,
}

/// One declaration statement, `logic [3:0] a, b;`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeclStatement {
    /// Lexemes joined by single spaces; identical statements compare equal.
    pub key: String,
    pub tokens: Range<usize>,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShallowModule {
    pub name: String,
    /// Token range of the whole module.
    pub tokens: Range<usize>,
    /// Token range after the header `;`, excluding `endmodule`.
    pub body: Range<usize>,
    pub terminated: bool,
    pub ports: Vec<Port>,
    pub decls: Vec<Decl>,
    pub statements: Vec<DeclStatement>,
    /// Occurrences of each identifier, declaring occurrences excluded.
    pub refs: HashMap<String, usize>,
}

impl ShallowModule {
    pub fn range_of(&self, name: &str) -> Option<LitRange> {
        self.decls
            .iter()
            .find(|d| d.name == name)
            .and_then(|d| d.range)
            .or_else(|| self.ports.iter().find(|p| p.name == name).and_then(|p| p.range))
    }

    pub fn ref_count(&self, name: &str) -> usize {
        self.refs.get(name).copied().unwrap_or(0)
    }
}

const DECL_KEYWORDS: &[&str] = &[
    "logic", "wire", "reg", "bit", "byte", "int", "integer", "shortint", "longint", "tri", "uwire",
    "wand", "wor", "var", "genvar",
];

fn is_decl_keyword(t: &VToken) -> bool {
    t.kind == TokenKind::Keyword && DECL_KEYWORDS.contains(&t.text.as_str())
}

fn direction_of(t: &VToken) -> Option<Direction> {
    if t.kind != TokenKind::Keyword {
        return None;
    }
    match t.text.as_str() {
        "input" => Some(Direction::Input),
        "output" => Some(Direction::Output),
        "inout" => Some(Direction::Inout),
        "ref" => Some(Direction::Ref),
        _ => None,
    }
}

fn punct(t: &VToken, p: &str) -> bool {
    t.kind == TokenKind::Punct && t.text == p
}

/// Index one past the bracket closing the one at `open`.
fn skip_group(tokens: &[VToken], open: usize, end: usize) -> usize {
    let mut depth = 0i32;
    let mut i = open;
    while i < end {
        let t = &tokens[i];
        if t.kind == TokenKind::Punct {
            match t.text.as_str() {
                "(" | "[" | "{" => depth += 1,
                ")" | "]" | "}" => {
                    depth -= 1;
                    if depth == 0 {
                        return i + 1;
                    }
                }
                _ => {}
            }
        }
        i += 1;
    }
    end
}

/// Splits `lo..hi` on depth-0 commas.
fn split_commas(tokens: &[VToken], lo: usize, hi: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = lo;
    let mut i = lo;
    while i < hi {
        let t = &tokens[i];
        if t.kind == TokenKind::Punct && matches!(t.text.as_str(), "(" | "[" | "{") {
            i = skip_group(tokens, i, hi);
            continue;
        }
        if punct(t, ",") {
            out.push(start..i);
            start = i + 1;
        }
        i += 1;
    }
    out.push(start..hi);
    out
}

fn parse_int(t: &VToken) -> Option<i64> {
    if t.kind != TokenKind::Number {
        return None;
    }
    t.text.replace('_', "").parse().ok()
}

/// `[a:b]` with literal bounds starting at `open`.
fn literal_range(tokens: &[VToken], open: usize) -> Option<LitRange> {
    let g = tokens.get(open..open + 5)?;
    if punct(&g[0], "[") && punct(&g[2], ":") && punct(&g[4], "]") {
        Some(LitRange {
            msb: parse_int(&g[1])?,
            lsb: parse_int(&g[3])?,
        })
    } else {
        None
    }
}

fn joined(tokens: &[VToken]) -> String {
    tokens.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ").replace("[ ", "[").replace(" ]", "]")
}

/// Type keywords, signing and one packed range, then the declared names.
/// Returns (range text, literal range, index of first name token).
fn decl_prefix(tokens: &[VToken], mut i: usize, end: usize) -> (Option<String>, Option<LitRange>, usize) {
    while i < end
        && tokens[i].kind == TokenKind::Keyword
        && (is_decl_keyword(&tokens[i])
            || direction_of(&tokens[i]).is_some()
            || matches!(tokens[i].text.as_str(), "signed" | "unsigned"))
    {
        i += 1;
    }
    let mut range_text = None;
    let mut range = None;
    if i < end && punct(&tokens[i], "[") {
        let close = skip_group(tokens, i, end);
        range_text = Some(joined(&tokens[i..close]));
        range = literal_range(tokens, i).filter(|_| close == i + 5);
        i = close;
        // further packed dimensions are skipped
        while i < end && punct(&tokens[i], "[") {
            i = skip_group(tokens, i, end);
        }
    }
    (range_text, range, i)
}

fn parse_header_ports(tokens: &[VToken], lo: usize, hi: usize, ports: &mut Vec<Port>) {
    let mut dir: Option<Direction> = None;
    for item in split_commas(tokens, lo, hi) {
        if item.is_empty() {
            continue;
        }
        if let Some(d) = direction_of(&tokens[item.start]) {
            dir = Some(d);
        }
        let (range_text, range, first) = decl_prefix(tokens, item.start, item.end);
        // interface or user-defined types: the name is the last identifier
        // before any unpacked dimension
        let mut name_at = None;
        let mut i = first;
        while i < item.end {
            let t = &tokens[i];
            if punct(t, "[") || punct(t, "=") {
                break;
            }
            if t.kind == TokenKind::Identifier {
                name_at = Some(i);
            }
            i += 1;
        }
        let Some(at) = name_at else { continue };
        ports.push(Port {
            name: tokens[at].text.clone(),
            direction: dir.unwrap_or(Direction::Unknown),
            range_text,
            range,
            token: at,
        });
    }
}

fn at_statement_start(tokens: &[VToken], i: usize, body_start: usize) -> bool {
    if i == body_start {
        return true;
    }
    let p = &tokens[i - 1];
    punct(p, ";")
        || (p.kind == TokenKind::Keyword
            && matches!(p.text.as_str(), "begin" | "end" | "generate" | "endgenerate" | "else"))
}

pub fn parse_modules(stream: &VTokenStream) -> Vec<ShallowModule> {
    let tokens = &stream.tokens;
    module_chunks(tokens)
        .into_iter()
        .enumerate()
        .map(|(k, chunk)| parse_one(tokens, k, chunk))
        .collect()
}

fn parse_one(tokens: &[VToken], k: usize, chunk: crate::vlex::ModuleChunk) -> ShallowModule {
    let r = chunk.range.clone();
    let end = if chunk.terminated { r.end - 1 } else { r.end };
    let name = chunk.name.unwrap_or_else(|| format!("<unnamed:{k}>"));
    let mut i = r.start + 1;
    while i < end && tokens[i].kind != TokenKind::Identifier {
        i += 1;
    }
    i += 1;
    if i < end && punct(&tokens[i], "#") && i + 1 < end && punct(&tokens[i + 1], "(") {
        i = skip_group(tokens, i + 1, end);
    }
    let mut ports = Vec::new();
    if i < end && punct(&tokens[i], "(") {
        let close = skip_group(tokens, i, end);
        parse_header_ports(tokens, i + 1, close.saturating_sub(1).max(i + 1), &mut ports);
        i = close;
    }
    if i < end && punct(&tokens[i], ";") {
        i += 1;
    }
    let body = i.min(end)..end;

    let mut decls = Vec::new();
    let mut statements = Vec::new();
    let mut declaring: Vec<usize> = ports.iter().map(|p| p.token).collect();
    let mut j = body.start;
    while j < body.end {
        let t = &tokens[j];
        let dir = direction_of(t);
        if !(is_decl_keyword(t) || dir.is_some()) || !at_statement_start(tokens, j, body.start) {
            j += 1;
            continue;
        }
        let stop = (j..body.end).find(|&x| punct(&tokens[x], ";")).unwrap_or(body.end);
        let (range_text, range, first) = decl_prefix(tokens, j, stop);
        let mut names = Vec::new();
        for item in split_commas(tokens, first, stop) {
            let Some(at) = item.clone().find(|&x| tokens[x].kind == TokenKind::Identifier) else {
                continue;
            };
            if at != item.start {
                continue;
            }
            let n = tokens[at].text.clone();
            declaring.push(at);
            names.push(n.clone());
            match dir {
                // non-ANSI port body declaration
                Some(d) => {
                    if let Some(p) = ports.iter_mut().find(|p| p.name == n) {
                        p.direction = d;
                        p.range_text = range_text.clone();
                        p.range = range;
                    } else {
                        ports.push(Port {
                            name: n,
                            direction: d,
                            range_text: range_text.clone(),
                            range,
                            token: at,
                        });
                    }
                }
                None => decls.push(Decl {
                    name: n,
                    range_text: range_text.clone(),
                    range,
                    token: at,
                    statement: statements.len(),
                }),
            }
        }
        if dir.is_none() {
            statements.push(DeclStatement {
                key: joined(&tokens[j..(stop + 1).min(body.end)]),
                tokens: j..(stop + 1).min(body.end),
                names,
            });
        }
        j = stop + 1;
    }

    let mut refs: HashMap<String, usize> = HashMap::new();
    for x in r.start..end {
        let t = &tokens[x];
        if t.kind != TokenKind::Identifier || declaring.contains(&x) {
            continue;
        }
        if x > 0 && punct(&tokens[x - 1], ".") {
            continue;
        }
        *refs.entry(t.text.clone()).or_default() += 1;
    }

    ShallowModule {
        name,
        tokens: r,
        body,
        terminated: chunk.terminated,
        ports,
        decls,
        statements,
        refs,
    }
}

// ------------------------------------------------------------ detectors

/// One analyzed file.
pub struct LintUnit<'a> {
    pub file: &'a str,
    pub kind: SourceKind,
    pub source: &'a str,
    pub stream: VTokenStream,
    pub modules: Vec<ShallowModule>,
}

impl<'a> LintUnit<'a> {
    pub fn new(file: &'a str, source: &'a str, kind: SourceKind) -> Self {
        let (stream, modules) = match kind {
            SourceKind::Verilog => {
                let s = tokenize(source);
                let m = parse_modules(&s);
                (s, m)
            }
            SourceKind::Prose => (VTokenStream::default(), Vec::new()),
        };
        Self {
            file,
            kind,
            source,
            stream,
            modules,
        }
    }
}

fn span_over(tokens: &[VToken], r: Range<usize>) -> Span {
    let first = tokens[r.start].span;
    let last = tokens[r.end - 1].span;
    Span {
        len: last.end() - first.offset,
        ..first
    }
}

fn finding(rule: Rule, file: &str, span: Span, message: String, evidence: Vec<String>) -> LintFinding {
    LintFinding {
        rule,
        severity: rule.severity(),
        file: file.to_string(),
        span,
        message,
        evidence,
    }
}

/// Unused declarations, plus blocks of declarations copied between modules.
///
/// Unused checks skip modules without `endmodule`: a truncated body says
/// nothing about what the rest would have used.
pub fn detect_redundant_decls(units: &[LintUnit]) -> Vec<LintFinding> {
    let mut out = Vec::new();
    for u in units {
        for m in u.modules.iter().filter(|m| m.terminated) {
            for d in &m.decls {
                if m.ref_count(&d.name) == 0 {
                    out.push(finding(
                        Rule::RedundantDecl,
                        u.file,
                        u.stream.tokens[d.token].span,
                        format!("`{}` is declared in `{}` but never used", d.name, m.name),
                        vec![d.name.clone()],
                    ));
                }
            }
        }
    }

    let all: Vec<(&LintUnit, &ShallowModule)> = units
        .iter()
        .flat_map(|u| u.modules.iter().map(move |m| (u, m)))
        .collect();
    for (li, (u, later)) in all.iter().enumerate() {
        let n = later.statements.len();
        let mut marked = vec![false; n];
        let mut source: Vec<Option<&str>> = vec![None; n];
        for (_, earlier) in &all[..li] {
            let e = &earlier.statements;
            // common-run lengths ending at (i, j)
            let mut prev = vec![0usize; n + 1];
            for es in e {
                let mut cur = vec![0usize; n + 1];
                for j in 0..n {
                    if es.key == later.statements[j].key {
                        cur[j + 1] = prev[j] + 1;
                        if cur[j + 1] >= REDUNDANT_GROUP_MIN {
                            for x in j + 1 - cur[j + 1]..=j {
                                marked[x] = true;
                                source[x].get_or_insert(earlier.name.as_str());
                            }
                        }
                    }
                }
                prev = cur;
            }
        }
        let mut j = 0;
        while j < n {
            if !marked[j] {
                j += 1;
                continue;
            }
            let start = j;
            while j < n && marked[j] {
                j += 1;
            }
            let stmts = &later.statements[start..j];
            let span = span_over(
                &u.stream.tokens,
                stmts[0].tokens.start..stmts[stmts.len() - 1].tokens.end,
            );
            out.push(finding(
                Rule::RedundantDecl,
                u.file,
                span,
                format!(
                    "{} declaration lines in `{}` repeat a block from `{}`",
                    stmts.len(),
                    later.name,
                    source[start].unwrap_or("?")
                ),
                stmts.iter().map(|s| s.key.clone()).collect(),
            ));
        }
    }
    out
}

fn chain_parent(id: &str) -> Option<&str> {
    let cut = id.rfind('_')?;
    (cut > 0 && cut + 1 < id.len()).then(|| &id[..cut])
}

/// Identifier families where each name extends another by one `_word`.
pub fn detect_suffix_chains(unit: &LintUnit) -> Vec<LintFinding> {
    let mut first_seen: BTreeMap<&str, Span> = BTreeMap::new();
    for t in &unit.stream.tokens {
        if t.kind == TokenKind::Identifier {
            first_seen.entry(t.text.as_str()).or_insert(t.span);
        }
    }
    let mut depth: HashMap<&str, usize> = HashMap::new();
    fn depth_of<'a>(id: &'a str, set: &BTreeMap<&'a str, Span>, memo: &mut HashMap<&'a str, usize>) -> usize {
        if let Some(&d) = memo.get(id) {
            return d;
        }
        let d = match chain_parent(id).filter(|p| set.contains_key(p)) {
            Some(p) => 1 + depth_of(&id[..p.len()], set, memo),
            None => 1,
        };
        memo.insert(id, d);
        d
    }
    let ids: Vec<&str> = first_seen.keys().copied().collect();
    for id in &ids {
        depth_of(id, &first_seen, &mut depth);
    }
    fn root_of<'a>(mut id: &'a str, set: &BTreeMap<&'a str, Span>) -> &'a str {
        while let Some(p) = chain_parent(id).filter(|p| set.contains_key(p)) {
            id = p;
        }
        id
    }
    // deepest member per family; ties go to the lexicographically first
    let mut deepest: BTreeMap<&str, &str> = BTreeMap::new();
    for id in &ids {
        let root = root_of(id, &first_seen);
        let best = deepest.entry(root).or_insert(id);
        if depth[id] > depth[best] {
            *best = id;
        }
    }
    let mut out = Vec::new();
    for (root, leaf) in deepest {
        let len = depth[leaf];
        if len < SUFFIX_CHAIN_MIN {
            continue;
        }
        let mut chain = vec![leaf.to_string()];
        let mut cur = leaf;
        while let Some(p) = chain_parent(cur).filter(|p| first_seen.contains_key(p)) {
            chain.push(p.to_string());
            cur = p;
        }
        chain.reverse();
        out.push(finding(
            Rule::SuffixChain,
            unit.file,
            first_seen[leaf],
            format!("{len} identifiers extend `{root}` one suffix at a time, ending in `{leaf}`"),
            chain,
        ));
    }
    out
}

/// Corrupt token runs, and lines that are mostly operator debris.
pub fn detect_corrupt_regions(unit: &LintUnit) -> Vec<LintFinding> {
    let tokens = &unit.stream.tokens;
    let mut out = Vec::new();
    let mut by_line: BTreeMap<usize, Vec<&VToken>> = BTreeMap::new();
    for t in tokens {
        by_line.entry(t.span.line).or_default().push(t);
    }
    for (line, toks) in by_line {
        let corrupt: Vec<&&VToken> = toks.iter().filter(|t| t.kind == TokenKind::Corrupt).collect();
        if !corrupt.is_empty() {
            for t in corrupt {
                out.push(finding(
                    Rule::CorruptOutput,
                    unit.file,
                    t.span,
                    format!("{} byte(s) of unlexable output", t.span.len),
                    vec![t.text.clone()],
                ));
            }
            continue;
        }
        let junk = toks.iter().filter(|t| t.kind == TokenKind::Operator).count();
        if junk >= GARBAGE_MIN_TOKENS && junk as f64 > GARBAGE_RATIO * toks.len() as f64 {
            let span = Span {
                len: toks[toks.len() - 1].span.end() - toks[0].span.offset,
                ..toks[0].span
            };
            out.push(finding(
                Rule::CorruptOutput,
                unit.file,
                span,
                format!("line {line} is {junk} of {} tokens of operator debris", toks.len()),
                toks.iter().map(|t| t.text.clone()).collect(),
            ));
        }
    }
    out
}

/// Part-selects outside the declared range, and slices assigned to a
/// destination of a different width.
pub fn detect_range_violations(unit: &LintUnit) -> Vec<LintFinding> {
    let tokens = &unit.stream.tokens;
    let mut out = Vec::new();
    for m in &unit.modules {
        let declaring: Vec<usize> = m.decls.iter().map(|d| d.token).chain(m.ports.iter().map(|p| p.token)).collect();
        for k in m.body.clone() {
            let t = &tokens[k];
            if t.kind != TokenKind::Identifier || declaring.contains(&k) || (k > 0 && punct(&tokens[k - 1], ".")) {
                continue;
            }
            let Some(sel) = literal_range(tokens, k + 1) else { continue };
            let Some(decl) = m.range_of(&t.text) else { continue };
            let span = span_over(tokens, k..k + 6);
            let text = format!("{}{}", t.text, sel);
            if !decl.contains(sel.msb) || !decl.contains(sel.lsb) {
                out.push(finding(
                    Rule::RangeViolation,
                    unit.file,
                    span,
                    format!("part-select {text} is outside the declared range {decl} of `{}`", t.text),
                    vec![text.clone()],
                ));
            }
            // dest = x[a:b];
            let assigns = k >= 2
                && tokens[k - 2].kind == TokenKind::Identifier
                && tokens[k - 1].kind == TokenKind::Operator
                && matches!(tokens[k - 1].text.as_str(), "=" | "<=")
                && tokens.get(k + 6).is_some_and(|x| punct(x, ";"));
            if !assigns {
                continue;
            }
            let dest = &tokens[k - 2].text;
            if let Some(dr) = m.range_of(dest) {
                if dr.width() != sel.width() {
                    out.push(finding(
                        Rule::RangeViolation,
                        unit.file,
                        span_over(tokens, k - 2..k + 7),
                        format!(
                            "{}-bit slice {text} assigned to {}-bit `{dest}`",
                            sel.width(),
                            dr.width()
                        ),
                        vec![dest.clone(), text],
                    ));
                }
            }
        }
    }
    out
}

/// Ports never referenced in their module. Skipped for truncated modules.
pub fn detect_unused_ports(unit: &LintUnit) -> Vec<LintFinding> {
    let mut out = Vec::new();
    for m in unit.modules.iter().filter(|m| m.terminated) {
        for p in &m.ports {
            if m.ref_count(&p.name) == 0 {
                out.push(finding(
                    Rule::UnusedPort,
                    unit.file,
                    unit.stream.tokens[p.token].span,
                    format!("port `{}` of `{}` is never used", p.name, m.name),
                    vec![p.name.clone()],
                ));
            }
        }
    }
    out
}

fn normalize(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// `2·LCS / (|a| + |b|)` over bytes.
pub fn line_similarity(a: &str, b: &str) -> f64 {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    for &x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    2.0 * prev[b.len()] as f64 / (a.len() + b.len()) as f64
}

struct TextLine {
    line: usize,
    offset: usize,
    len: usize,
    norm: String,
}

fn prose_lines(text: &str) -> Vec<TextLine> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (i, raw) in text.split_inclusive('\n').enumerate() {
        let body = raw.trim_end_matches(['\n', '\r']);
        out.push(TextLine {
            line: i + 1,
            offset,
            len: body.len(),
            norm: normalize(body),
        });
        offset += raw.len();
    }
    out
}

fn comment_lines(stream: &VTokenStream) -> Vec<TextLine> {
    use crate::vlex::TriviaKind;
    let mut out = Vec::new();
    for t in &stream.trivia {
        let (strip_start, strip_end): (&str, &str) = match t.kind {
            TriviaKind::LineComment => ("//", ""),
            TriviaKind::BlockComment => ("/*", "*/"),
            TriviaKind::Whitespace => continue,
        };
        let mut offset = t.span.offset;
        for (i, raw) in t.text.split_inclusive('\n').enumerate() {
            let body = raw.trim_end_matches(['\n', '\r']);
            let stripped = body.trim().trim_start_matches(strip_start).trim_end_matches(strip_end);
            let stripped = stripped.trim().trim_start_matches('*');
            out.push(TextLine {
                line: t.span.line + i,
                offset,
                len: body.len(),
                norm: normalize(stripped),
            });
            offset += raw.len();
        }
    }
    out
}

fn repetition_runs(file: &str, lines: &[TextLine]) -> Vec<LintFinding> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let mut j = i + 1;
        if !lines[i].norm.is_empty() {
            while j < lines.len()
                && lines[j].line == lines[j - 1].line + 1
                && !lines[j].norm.is_empty()
                && (i..j).all(|k| line_similarity(&lines[k].norm, &lines[j].norm) > REPEAT_SIMILARITY)
            {
                j += 1;
            }
        }
        if j - i >= REPEAT_MIN_LINES {
            let (a, b) = (&lines[i], &lines[j - 1]);
            out.push(finding(
                Rule::Repetition,
                file,
                Span {
                    line: a.line,
                    col: 1,
                    offset: a.offset,
                    len: b.offset + b.len - a.offset,
                },
                format!("{} near-identical lines ({}..={})", j - i, a.line, b.line),
                lines[i..j].iter().map(|l| l.norm.clone()).collect(),
            ));
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

/// Runs of near-identical lines in prose, or in comments of Verilog files.
pub fn detect_repetition(unit: &LintUnit) -> Vec<LintFinding> {
    match unit.kind {
        SourceKind::Prose => repetition_runs(unit.file, &prose_lines(unit.source)),
        SourceKind::Verilog => repetition_runs(unit.file, &comment_lines(&unit.stream)),
    }
}

/// Runs every detector over a set of files. Cross-module redundancy looks
/// across all files; findings come back ordered by file, then position.
pub fn lint_units(units: &[LintUnit]) -> Vec<LintFinding> {
    let mut out = detect_redundant_decls(units);
    for u in units {
        out.extend(detect_repetition(u));
        if u.kind == SourceKind::Verilog {
            out.extend(detect_suffix_chains(u));
            out.extend(detect_corrupt_regions(u));
            out.extend(detect_range_violations(u));
            out.extend(detect_unused_ports(u));
        }
    }
    let order: HashMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.file, i)).collect();
    out.sort_by(|a, b| {
        (order[a.file.as_str()], a.span.offset, a.rule, a.span.len)
            .cmp(&(order[b.file.as_str()], b.span.offset, b.rule, b.span.len))
    });
    out
}

/// Convenience over [`lint_units`]; the kind of each file comes from its name.
pub fn lint_sources(files: &[(String, String)]) -> Vec<LintFinding> {
    let units: Vec<LintUnit> = files
        .iter()
        .map(|(name, src)| LintUnit::new(name, src, SourceKind::from_path(name)))
        .collect();
    lint_units(&units)
}

/// Findings per rule, every rule present.
pub fn count_by_rule(findings: &[LintFinding]) -> BTreeMap<Rule, usize> {
    let mut out: BTreeMap<Rule, usize> = Rule::ALL.into_iter().map(|r| (r, 0)).collect();
    for f in findings {
        *out.entry(f.rule).or_default() += 1;
    }
    out
}
