//! Verilog / SystemVerilog lexer.
//!
//! Lexing is total: every input byte ends up in exactly one token or one
//! piece of trivia (whitespace or comment). Bytes that fit no rule become
//! [`TokenKind::Corrupt`], and adjacent corrupt bytes form a single token.
//!
//! No preprocessing happens. `` `define `` and friends lex as identifiers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Keyword,
    Identifier,
    Number,
    BasedLiteral,
    Operator,
    Punct,
    String,
    Corrupt,
}

impl TokenKind {
    pub const ALL: [TokenKind; 8] = [
        TokenKind::Keyword,
        TokenKind::Identifier,
        TokenKind::Number,
        TokenKind::BasedLiteral,
        TokenKind::Operator,
        TokenKind::Punct,
        TokenKind::String,
        TokenKind::Corrupt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Keyword => "keyword",
            TokenKind::Identifier => "identifier",
            TokenKind::Number => "number",
            TokenKind::BasedLiteral => "based_literal",
            TokenKind::Operator => "operator",
            TokenKind::Punct => "punct",
            TokenKind::String => "string",
            TokenKind::Corrupt => "corrupt",
        }
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown token kind {s:?}"))
    }
}

/// Source location. `line` and `col` are 1-based; `col` counts bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub line: usize,
    pub col: usize,
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VToken {
    pub kind: TokenKind,
    pub text: String,
    pub span: Span,
}

impl VToken {
    pub fn is(&self, kind: TokenKind, text: &str) -> bool {
        self.kind == kind && self.text == text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriviaKind {
    Whitespace,
    LineComment,
    BlockComment,
}

/// Skipped input: whitespace and comments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trivia {
    pub kind: TriviaKind,
    pub text: String,
    pub span: Span,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VTokenStream {
    pub tokens: Vec<VToken>,
    pub trivia: Vec<Trivia>,
}

impl VTokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, VToken> {
        self.tokens.iter()
    }

    /// Concatenates tokens and trivia in source order.
    ///
    /// Byte-exact for any valid UTF-8 input. Invalid bytes were replaced by
    /// U+FFFD in corrupt lexemes, so they do not survive.
    pub fn reconstruct(&self) -> String {
        let mut pieces: Vec<(usize, &str)> = self
            .tokens
            .iter()
            .map(|t| (t.span.offset, t.text.as_str()))
            .chain(self.trivia.iter().map(|t| (t.span.offset, t.text.as_str())))
            .collect();
        pieces.sort_by_key(|p| p.0);
        pieces.into_iter().map(|p| p.1).collect()
    }

    /// One `kind<TAB>lexeme<TAB>line:col` line per token. Tabs, newlines and
    /// backslashes inside lexemes are escaped.
    pub fn to_golden(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(&format!(
                "{}\t{}\t{}:{}\n",
                t.kind,
                escape_lexeme(&t.text),
                t.span.line,
                t.span.col
            ));
        }
        out
    }
}

impl<'a> IntoIterator for &'a VTokenStream {
    type Item = &'a VToken;
    type IntoIter = std::slice::Iter<'a, VToken>;

    fn into_iter(self) -> Self::IntoIter {
        self.tokens.iter()
    }
}

pub fn escape_lexeme(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn tokenize(source: &str) -> VTokenStream {
    tokenize_bytes(source.as_bytes())
}

pub fn tokenize_bytes(source: &[u8]) -> VTokenStream {
    Lexer::new(source).run()
}

pub fn token_count(source: &str) -> usize {
    tokenize(source).len()
}

/// A `module ... endmodule` region of a token stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleChunk {
    /// First identifier after the `module` keyword, if any.
    pub name: Option<String>,
    /// Token index range, from the `module` keyword through `endmodule`.
    pub range: std::ops::Range<usize>,
    /// False when the region was cut short by another `module` or by EOF.
    pub terminated: bool,
}

/// Splits a token stream into module regions. Tokens outside every region
/// (directives, prose, stray declarations) belong to no chunk.
pub fn module_chunks(tokens: &[VToken]) -> Vec<ModuleChunk> {
    let opens = |t: &VToken| {
        t.kind == TokenKind::Keyword && (t.text == "module" || t.text == "macromodule")
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if !opens(&tokens[i]) {
            i += 1;
            continue;
        }
        let start = i;
        let name = tokens[i + 1..]
            .iter()
            .find(|t| !(t.kind == TokenKind::Keyword && matches!(t.text.as_str(), "static" | "automatic")))
            .filter(|t| t.kind == TokenKind::Identifier)
            .map(|t| t.text.clone());
        i += 1;
        let mut terminated = false;
        while i < tokens.len() {
            if tokens[i].is(TokenKind::Keyword, "endmodule") {
                terminated = true;
                i += 1;
                break;
            }
            if opens(&tokens[i]) {
                break;
            }
            i += 1;
        }
        out.push(ModuleChunk {
            name,
            range: start..i,
            terminated,
        });
    }
    out
}

// IEEE 1800-2017 reserved words, sorted for binary search.
const KEYWORDS: &[&str] = &[
    "accept_on", "alias", "always", "always_comb", "always_ff", "always_latch", "and", "assert",
    "assign", "assume", "automatic", "before", "begin", "bind", "bins", "binsof", "bit", "break",
    "buf", "bufif0", "bufif1", "byte", "case", "casex", "casez", "cell", "chandle", "checker",
    "class", "clocking", "cmos", "config", "const", "constraint", "context", "continue", "cover",
    "covergroup", "coverpoint", "cross", "deassign", "default", "defparam", "design", "disable",
    "dist", "do", "edge", "else", "end", "endcase", "endchecker", "endclass", "endclocking",
    "endconfig", "endfunction", "endgenerate", "endgroup", "endinterface", "endmodule",
    "endpackage", "endprimitive", "endprogram", "endproperty", "endsequence", "endspecify",
    "endtable", "endtask", "enum", "event", "eventually", "expect", "export", "extends", "extern",
    "final", "first_match", "for", "force", "foreach", "forever", "fork", "forkjoin", "function",
    "generate", "genvar", "global", "highz0", "highz1", "if", "iff", "ifnone", "ignore_bins",
    "illegal_bins", "implements", "implies", "import", "incdir", "include", "initial", "inout",
    "input", "inside", "instance", "int", "integer", "interconnect", "interface", "intersect",
    "join", "join_any", "join_none", "large", "let", "liblist", "library", "local", "localparam",
    "logic", "longint", "macromodule", "matches", "medium", "modport", "module", "nand",
    "negedge", "nettype", "new", "nexttime", "nmos", "nor", "noshowcancelled", "not", "notif0",
    "notif1", "null", "or", "output", "package", "packed", "parameter", "pmos", "posedge",
    "primitive", "priority", "program", "property", "protected", "pull0", "pull1", "pulldown",
    "pullup", "pulsestyle_ondetect", "pulsestyle_onevent", "pure", "rand", "randc", "randcase",
    "randsequence", "rcmos", "real", "realtime", "ref", "reg", "reject_on", "release", "repeat",
    "restrict", "return", "rnmos", "rpmos", "rtran", "rtranif0", "rtranif1", "s_always",
    "s_eventually", "s_nexttime", "s_until", "s_until_with", "scalared", "sequence", "shortint",
    "shortreal", "showcancelled", "signed", "small", "soft", "solve", "specify", "specparam",
    "static", "string", "strong", "strong0", "strong1", "struct", "super", "supply0", "supply1",
    "sync_accept_on", "sync_reject_on", "table", "tagged", "task", "this", "throughout", "time",
    "timeprecision", "timeunit", "tran", "tranif0", "tranif1", "tri", "tri0", "tri1", "triand",
    "trior", "trireg", "type", "typedef", "union", "unique", "unique0", "unsigned", "until",
    "until_with", "untyped", "use", "uwire", "var", "vectored", "virtual", "void", "wait",
    "wait_order", "wand", "weak", "weak0", "weak1", "while", "wildcard", "wire", "with", "within",
    "wor", "xnor", "xor",
];

pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.binary_search(&word).is_ok()
}

const OPS4: &[&str] = &["<<<=", ">>>="];
const OPS3: &[&str] = &[
    "===", "!==", "==?", "!=?", "<<<", ">>>", "<<=", ">>=", "->>", "|->", "|=>", "<->", "#-#",
    "#=#",
];
const OPS2: &[&str] = &[
    "==", "!=", "<=", ">=", "&&", "||", "**", "<<", ">>", "->", "++", "--", "+=", "-=", "*=", "/=",
    "%=", "&=", "|=", "^=", "~&", "~|", "~^", "^~", "::", "+:", "-:", "##", ":=", ".*",
];
const OPS1: &[u8] = b"+-*/%=<>!~&|^?'$";
const PUNCT: &[u8] = b"()[]{};,.:#@";

fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

fn is_ident_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'$'
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

fn is_based_digit(b: u8) -> bool {
    b.is_ascii_hexdigit() || matches!(b, b'x' | b'X' | b'z' | b'Z' | b'?' | b'_')
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
    out: VTokenStream,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a [u8]) -> Self {
        Self {
            src,
            pos: 0,
            line: 1,
            col: 1,
            out: VTokenStream::default(),
        }
    }

    fn peek(&self, ahead: usize) -> Option<u8> {
        self.src.get(self.pos + ahead).copied()
    }

    fn starts_with(&self, s: &str) -> bool {
        self.src[self.pos..].starts_with(s.as_bytes())
    }

    fn run(mut self) -> VTokenStream {
        while self.pos < self.src.len() {
            let n = self.scan();
            debug_assert!(n > 0);
        }
        self.out
    }

    /// Consumes one token or trivia item and returns its length.
    fn scan(&mut self) -> usize {
        let b = self.src[self.pos];
        if is_space(b) {
            let n = self.count_while(0, is_space);
            return self.emit_trivia(TriviaKind::Whitespace, n);
        }
        if self.starts_with("//") {
            let n = self.src[self.pos..]
                .iter()
                .position(|&c| c == b'\n')
                .unwrap_or(self.src.len() - self.pos);
            return self.emit_trivia(TriviaKind::LineComment, n);
        }
        if self.starts_with("/*") {
            return match find(&self.src[self.pos + 2..], b"*/") {
                Some(i) => self.emit_trivia(TriviaKind::BlockComment, i + 4),
                None => self.emit(TokenKind::Corrupt, self.src.len() - self.pos),
            };
        }
        if is_ident_start(b) {
            let n = self.count_while(1, is_ident_char);
            let word = &self.src[self.pos..self.pos + n];
            let kind = if is_keyword(std::str::from_utf8(word).expect("ascii")) {
                TokenKind::Keyword
            } else {
                TokenKind::Identifier
            };
            return self.emit(kind, n);
        }
        if b.is_ascii_digit() {
            return self.number();
        }
        match b {
            b'$' | b'`' if self.peek(1).is_some_and(is_ident_start) => {
                let n = self.count_while(1, is_ident_char);
                return self.emit(TokenKind::Identifier, n);
            }
            b'\\' => {
                let n = self.count_while(1, |c| c.is_ascii_graphic());
                let kind = if n > 1 { TokenKind::Identifier } else { TokenKind::Corrupt };
                return self.emit(kind, n);
            }
            b'\'' => {
                if let Some(n) = self.based_tail(0) {
                    return self.emit(TokenKind::BasedLiteral, n);
                }
                if self.peek(1).is_some_and(|c| matches!(c, b'0' | b'1' | b'x' | b'X' | b'z' | b'Z'))
                    && !self.peek(2).is_some_and(is_ident_char)
                {
                    return self.emit(TokenKind::BasedLiteral, 2);
                }
            }
            b'"' => return self.string(),
            b'@' if self.peek(1) == Some(b'@') => {
                let n = self.count_while(0, |c| c == b'@');
                return self.emit(TokenKind::Corrupt, n);
            }
            _ => {}
        }
        for table in [OPS4, OPS3, OPS2] {
            if let Some(op) = table.iter().find(|op| self.starts_with(op)) {
                return self.emit(TokenKind::Operator, op.len());
            }
        }
        if PUNCT.contains(&b) {
            return self.emit(TokenKind::Punct, 1);
        }
        if OPS1.contains(&b) {
            return self.emit(TokenKind::Operator, 1);
        }
        self.emit(TokenKind::Corrupt, utf8_len(&self.src[self.pos..]))
    }

    fn count_while(&self, skip: usize, pred: impl Fn(u8) -> bool) -> usize {
        skip + self.src[self.pos + skip..]
            .iter()
            .take_while(|&&c| pred(c))
            .count()
    }

    fn number(&mut self) -> usize {
        let mut n = self.count_while(0, |c| c.is_ascii_digit() || c == b'_');
        if let Some(tail) = self.based_tail(n) {
            return self.emit(TokenKind::BasedLiteral, n + tail);
        }
        let at = |i: usize| self.src.get(self.pos + i).copied();
        if at(n) == Some(b'.') && at(n + 1).is_some_and(|c| c.is_ascii_digit()) {
            n += 1;
            n += self.src[self.pos + n..]
                .iter()
                .take_while(|c| c.is_ascii_digit() || **c == b'_')
                .count();
        }
        if matches!(at(n), Some(b'e' | b'E')) {
            let sign = usize::from(matches!(at(n + 1), Some(b'+' | b'-')));
            if at(n + 1 + sign).is_some_and(|c| c.is_ascii_digit()) {
                n += 1 + sign;
                n += self.src[self.pos + n..]
                    .iter()
                    .take_while(|c| c.is_ascii_digit() || **c == b'_')
                    .count();
            }
        }
        self.emit(TokenKind::Number, n)
    }

    /// Length of `'[s]<base><digits>` starting `at` bytes ahead, if present.
    fn based_tail(&self, at: usize) -> Option<usize> {
        let rest = &self.src[self.pos + at..];
        if rest.first() != Some(&b'\'') {
            return None;
        }
        let mut i = 1;
        if matches!(rest.get(i), Some(b's' | b'S')) {
            i += 1;
        }
        if !matches!(
            rest.get(i),
            Some(b'b' | b'B' | b'o' | b'O' | b'd' | b'D' | b'h' | b'H')
        ) {
            return None;
        }
        i += 1;
        let digits = rest[i..].iter().take_while(|&&c| is_based_digit(c)).count();
        (digits > 0).then_some(i + digits)
    }

    fn string(&mut self) -> usize {
        let mut i = 1;
        while let Some(c) = self.peek(i) {
            match c {
                b'"' => return self.emit(TokenKind::String, i + 1),
                b'\\' if self.peek(i + 1).is_some() => i += 2,
                b'\n' => break,
                _ => i += 1,
            }
        }
        self.emit(TokenKind::Corrupt, i.min(self.src.len() - self.pos))
    }

    fn span(&self, len: usize) -> Span {
        Span {
            line: self.line,
            col: self.col,
            offset: self.pos,
            len,
        }
    }

    fn advance(&mut self, len: usize) {
        for &c in &self.src[self.pos..self.pos + len] {
            if c == b'\n' {
                self.line += 1;
                self.col = 1;
            } else {
                self.col += 1;
            }
        }
        self.pos += len;
    }

    fn text(&self, len: usize) -> String {
        String::from_utf8_lossy(&self.src[self.pos..self.pos + len]).into_owned()
    }

    fn emit(&mut self, kind: TokenKind, len: usize) -> usize {
        let span = self.span(len);
        let text = self.text(len);
        self.advance(len);
        if kind == TokenKind::Corrupt {
            if let Some(prev) = self.out.tokens.last_mut() {
                if prev.kind == TokenKind::Corrupt && prev.span.end() == span.offset {
                    prev.span.len += len;
                    prev.text.push_str(&text);
                    return len;
                }
            }
        }
        self.out.tokens.push(VToken { kind, text, span });
        len
    }

    fn emit_trivia(&mut self, kind: TriviaKind, len: usize) -> usize {
        let span = self.span(len);
        let text = self.text(len);
        self.advance(len);
        self.out.trivia.push(Trivia { kind, text, span });
        len
    }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Byte length of the UTF-8 sequence starting `s`, or 1 when it is invalid.
fn utf8_len(s: &[u8]) -> usize {
    let want = match s[0] {
        0xC2..=0xDF => 2,
        0xE0..=0xEF => 3,
        0xF0..=0xF4 => 4,
        _ => return 1,
    };
    match s.get(..want).map(std::str::from_utf8) {
        Some(Ok(_)) => want,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexemes(src: &str) -> Vec<(TokenKind, String)> {
        tokenize(src).tokens.into_iter().map(|t| (t.kind, t.text)).collect()
    }

    fn texts(src: &str) -> Vec<String> {
        tokenize(src).tokens.into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn keyword_table_is_sorted_and_complete() {
        assert!(KEYWORDS.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(KEYWORDS.len(), 248);
        assert!(is_keyword("always_ff") && is_keyword("logic") && !is_keyword("WIDTH"));
    }

    #[test]
    fn part_select_statement() {
        assert_eq!(
            texts("assign dest = inst[111:10];"),
            ["assign", "dest", "=", "inst", "[", "111", ":", "10", "]", ";"]
        );
    }

    #[test]
    fn declaration_with_expression_range() {
        let toks = lexemes("logic [WIDTH-1:0] a, b;");
        assert_eq!(toks.len(), 12);
        assert_eq!(toks[0], (TokenKind::Keyword, "logic".into()));
        assert_eq!(toks[2], (TokenKind::Identifier, "WIDTH".into()));
        assert_eq!(toks[3], (TokenKind::Operator, "-".into()));
        assert_eq!(toks[9], (TokenKind::Punct, ",".into()));
    }

    #[test]
    fn counts() {
        assert_eq!(token_count(""), 0);
        assert_eq!(token_count("module m; endmodule"), 4);
        assert_eq!(token_count("module /* c */ m;\n// x\n  endmodule"), 4);
    }

    #[test]
    fn based_literals_are_single_tokens() {
        for lit in ["16'h00FF", "'b1", "4'sb1010", "'0", "'1", "'x", "8'd255", "32'hDEAD_beef", "4'b10?z"] {
            assert_eq!(lexemes(lit), [(TokenKind::BasedLiteral, lit.to_string())], "{lit}");
        }
        assert_eq!(
            lexemes("x = '{a, b};")[2],
            (TokenKind::Operator, "'".to_string())
        );
        assert_eq!(texts("16'(x)"), ["16", "'", "(", "x", ")"]);
    }

    #[test]
    fn numbers() {
        assert_eq!(lexemes("1.5e-3"), [(TokenKind::Number, "1.5e-3".into())]);
        assert_eq!(texts("1_000"), ["1_000"]);
        assert_eq!(texts("10ns"), ["10", "ns"]);
    }

    #[test]
    fn maximal_munch_operators() {
        assert_eq!(
            texts("a <<<= b === c !== d <= e :: f +: g -: h ## i |-> j"),
            [
                "a", "<<<=", "b", "===", "c", "!==", "d", "<=", "e", "::", "f", "+:", "g", "-:", "h",
                "##", "i", "|->", "j"
            ]
        );
        assert_eq!(texts("------"), ["--", "--", "--"]);
        assert_eq!(texts("-----"), ["--", "--", "-"]);
    }

    #[test]
    fn identifiers_of_every_flavor() {
        let toks = lexemes("$clog2 `define \\bus[0] a$b _x");
        assert!(toks.iter().all(|t| t.0 == TokenKind::Identifier), "{toks:?}");
        assert_eq!(toks[2].1, "\\bus[0]");
    }

    #[test]
    fn strings() {
        assert_eq!(lexemes(r#""a \"q\" b""#), [(TokenKind::String, r#""a \"q\" b""#.into())]);
        let toks = lexemes("\"open\nx");
        assert_eq!(toks[0], (TokenKind::Corrupt, "\"open".into()));
        assert_eq!(toks[1], (TokenKind::Identifier, "x".into()));
    }

    #[test]
    fn corrupt_runs_coalesce() {
        let toks = tokenize("a @@@ b");
        assert_eq!(toks.tokens[1].kind, TokenKind::Corrupt);
        assert_eq!(toks.tokens[1].span.len, 3);
        assert_eq!(texts("x ¿¿ y"), ["x", "¿¿", "y"]);
        assert_eq!(texts("x ¿@@ y"), ["x", "¿@@", "y"]);
        assert_eq!(lexemes("@(posedge clk)")[0], (TokenKind::Punct, "@".into()));
        let toks = lexemes("a /* never closed\n b");
        assert_eq!(toks[1], (TokenKind::Corrupt, "/* never closed\n b".into()));
    }

    #[test]
    fn invalid_utf8_is_corrupt() {
        let s = tokenize_bytes(b"a \xff\xfe b");
        assert_eq!(s.tokens.len(), 3);
        assert_eq!(s.tokens[1].kind, TokenKind::Corrupt);
        assert_eq!(s.tokens[1].span.len, 2);
    }

    #[test]
    fn spans_track_lines_and_columns() {
        let s = tokenize("module m;\n  wire x;\n");
        let at: Vec<_> = s.tokens.iter().map(|t| (t.span.line, t.span.col)).collect();
        assert_eq!(at, [(1, 1), (1, 8), (1, 9), (2, 3), (2, 8), (2, 9)]);
        assert_eq!(s.tokens[3].span.offset, 12);
    }

    #[test]
    fn golden_lines_escape_control_characters() {
        let g = tokenize("a \"t\tb\"").to_golden();
        assert_eq!(g, "identifier\ta\t1:1\nstring\t\"t\\tb\"\t1:3\n");
    }

    #[test]
    fn module_chunks_handle_truncation() {
        let s = tokenize("`timescale 1ns/1ps\nmodule a; endmodule\nmodule b (x);\nwire y;\nmodule c");
        let chunks = module_chunks(&s.tokens);
        let names: Vec<_> = chunks.iter().map(|c| c.name.as_deref()).collect();
        assert_eq!(names, [Some("a"), Some("b"), Some("c")]);
        assert_eq!(chunks.iter().map(|c| c.terminated).collect::<Vec<_>>(), [true, false, false]);
        assert_eq!(s.tokens[chunks[0].range.start].text, "module");
        assert_eq!(s.tokens[chunks[0].range.end - 1].text, "endmodule");
        assert_eq!(chunks[1].range.end, chunks[2].range.start);
        assert!(module_chunks(&tokenize("wire x;").tokens).is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn lexeme() -> impl Strategy<Value = String> {
            prop_oneof![
                "[a-zA-Z_][a-zA-Z0-9_]{0,8}",
                "[0-9]{1,5}",
                "[0-9]{1,2}'[bhd][0-9a-f]{1,4}",
                prop::sample::select(vec![
                    "<=", "==", "::", "+:", "-", "+", "(", ")", "[", "]", ";", ",", ":", "@", "#",
                    "module", "endmodule", "assign", "logic", "\"str\"",
                ])
                .prop_map(str::to_string),
            ]
        }

        fn trivia() -> impl Strategy<Value = String> {
            prop::sample::select(vec![" ", "\n", "\t  ", "/* c */", " // note\n", "\r\n"])
                .prop_map(str::to_string)
        }

        proptest! {
            #[test]
            fn spans_tile_the_input(src in any::<String>()) {
                let s = tokenize(&src);
                let mut spans: Vec<Span> = s.tokens.iter().map(|t| t.span)
                    .chain(s.trivia.iter().map(|t| t.span)).collect();
                spans.sort();
                let mut at = 0;
                for sp in spans {
                    prop_assert_eq!(sp.offset, at);
                    prop_assert!(sp.len > 0);
                    at = sp.end();
                }
                prop_assert_eq!(at, src.len());
                prop_assert_eq!(s.reconstruct(), src);
            }

            #[test]
            fn arbitrary_bytes_are_covered(src in prop::collection::vec(any::<u8>(), 0..200)) {
                let s = tokenize_bytes(&src);
                let covered: usize = s.tokens.iter().map(|t| t.span.len)
                    .chain(s.trivia.iter().map(|t| t.span.len)).sum();
                prop_assert_eq!(covered, src.len());
            }

            #[test]
            fn reformatting_keeps_the_stream(
                parts in prop::collection::vec((lexeme(), trivia()), 0..40)
            ) {
                let plain: String = parts.iter().map(|(l, _)| format!("{l} ")).collect();
                let fancy: String = parts.iter().map(|(l, t)| format!("{l}{t}")).collect();
                prop_assert_eq!(lexemes(&plain), lexemes(&fancy));
                prop_assert_eq!(token_count(&plain), parts.len());
            }
        }
    }
}
