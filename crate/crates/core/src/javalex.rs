//! A small, total Java lexer.
//!
//! It is used for three things: deciding whether generated text ends in an
//! object dereference, splitting completions into tokens and identifiers for
//! the match metrics, and finding the brace that closes the method being
//! completed. Whitespace and comments are skipped; every other byte of the
//! input ends up in exactly one token.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Identifier,
    Keyword,
    IntLiteral,
    FloatLiteral,
    StringLiteral,
    CharLiteral,
    Operator,
    Punctuator,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JavaToken {
    pub kind: TokenKind,
    pub text: String,
    pub offset: usize,
    /// False for a string, char literal or text block cut off by end of input.
    pub terminated: bool,
}

impl JavaToken {
    pub fn end(&self) -> usize {
        self.offset + self.text.len()
    }

    pub fn is_op(&self, op: &str) -> bool {
        self.kind == TokenKind::Operator && self.text == op
    }

    pub fn is_punct(&self, p: &str) -> bool {
        self.kind == TokenKind::Punctuator && self.text == p
    }

    /// Same kind and text, ignoring position.
    pub fn same_as(&self, other: &JavaToken) -> bool {
        self.kind == other.kind && self.text == other.text
    }
}

/// Java 17 reserved words, plus the `true`/`false`/`null` literals. `var`,
/// `record`, `yield`, `sealed` and friends are contextual and lex as identifiers.
pub const KEYWORDS: &[&str] = &[
    "_", "abstract", "assert", "boolean", "break", "byte", "case", "catch", "char", "class",
    "const", "continue", "default", "do", "double", "else", "enum", "extends", "false", "final",
    "finally", "float", "for", "goto", "if", "implements", "import", "instanceof", "int",
    "interface", "long", "native", "new", "null", "package", "private", "protected", "public",
    "return", "short", "static", "strictfp", "super", "switch", "synchronized", "this", "throw",
    "throws", "transient", "true", "try", "void", "volatile", "while",
];

pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.binary_search(&word).is_ok()
}

// Longest first so the first hit is the maximal munch.
const OPERATORS: &[&str] = &[
    ">>>=", "<<=", ">>=", ">>>", "...", "->", "::", "++", "--", "&&", "||", "==", "!=", "<=",
    ">=", "+=", "-=", "*=", "/=", "&=", "|=", "^=", "%=", "<<", ">>", "=", ">", "<", "!", "~",
    "?", ":", "+", "-", "*", "/", "&", "|", "^", "%", ".",
];

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '$' || (!c.is_ascii() && c.is_alphabetic())
}

fn is_ident_part(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '$' || (!c.is_ascii() && c.is_alphanumeric())
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    out: Vec<JavaToken>,
}

impl<'a> Lexer<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn byte_at(&self, i: usize) -> Option<u8> {
        self.src.as_bytes().get(i).copied()
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn emit(&mut self, kind: TokenKind, start: usize, terminated: bool) {
        self.out.push(JavaToken {
            kind,
            text: self.src[start..self.pos].to_string(),
            offset: start,
            terminated,
        });
    }

    fn run(mut self) -> Vec<JavaToken> {
        while let Some(c) = self.peek() {
            let start = self.pos;
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else if self.rest().starts_with("//") {
                self.pos = self.rest().find('\n').map_or(self.src.len(), |i| self.pos + i);
            } else if self.rest().starts_with("/*") {
                self.pos = self.rest()[2..]
                    .find("*/")
                    .map_or(self.src.len(), |i| self.pos + 2 + i + 2);
            } else if is_ident_start(c) {
                self.word(start);
            } else if c.is_ascii_digit()
                || (c == '.' && self.byte_at(self.pos + 1).is_some_and(|b| b.is_ascii_digit()))
            {
                self.number(start);
            } else if self.rest().starts_with("\"\"\"") {
                self.pos += 3;
                let terminated = self.quoted("\"\"\"");
                self.emit(TokenKind::StringLiteral, start, terminated);
            } else if c == '"' {
                self.pos += 1;
                let terminated = self.quoted("\"");
                self.emit(TokenKind::StringLiteral, start, terminated);
            } else if c == '\'' {
                self.pos += 1;
                let terminated = self.quoted("'");
                self.emit(TokenKind::CharLiteral, start, terminated);
            } else if let Some(op) = OPERATORS.iter().find(|op| self.rest().starts_with(*op)) {
                self.pos += op.len();
                self.emit(TokenKind::Operator, start, true);
            } else {
                self.pos += c.len_utf8();
                self.emit(TokenKind::Punctuator, start, true);
            }
        }
        self.out
    }

    fn word(&mut self, start: usize) {
        while let Some(c) = self.peek() {
            if !is_ident_part(c) {
                break;
            }
            self.pos += c.len_utf8();
        }
        let kind = if is_keyword(&self.src[start..self.pos]) {
            TokenKind::Keyword
        } else {
            TokenKind::Identifier
        };
        self.emit(kind, start, true);
    }

    fn eat_while(&mut self, pred: impl Fn(u8) -> bool) {
        while self.byte_at(self.pos).is_some_and(&pred) {
            self.pos += 1;
        }
    }

    fn eat_if(&mut self, pred: impl Fn(u8) -> bool) -> bool {
        if self.byte_at(self.pos).is_some_and(pred) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn exponent(&mut self, marker: &[u8]) -> bool {
        let save = self.pos;
        if self.eat_if(|b| marker.contains(&b)) {
            self.eat_if(|b| b == b'+' || b == b'-');
            let digits_at = self.pos;
            self.eat_while(|b| b.is_ascii_digit() || b == b'_');
            if self.pos > digits_at {
                return true;
            }
        }
        self.pos = save;
        false
    }

    fn number(&mut self, start: usize) {
        let mut float = false;
        let radix_prefix = self.rest().get(..2).map(str::to_ascii_lowercase);
        match radix_prefix.as_deref() {
            Some("0x") => {
                self.pos += 2;
                self.eat_while(|b| b.is_ascii_hexdigit() || b == b'_');
                if self.eat_if(|b| b == b'.') {
                    float = true;
                    self.eat_while(|b| b.is_ascii_hexdigit() || b == b'_');
                }
                float |= self.exponent(b"pP");
            }
            Some("0b") => {
                self.pos += 2;
                self.eat_while(|b| b == b'0' || b == b'1' || b == b'_');
            }
            _ => {
                self.eat_while(|b| b.is_ascii_digit() || b == b'_');
                if self.eat_if(|b| b == b'.') {
                    float = true;
                    self.eat_while(|b| b.is_ascii_digit() || b == b'_');
                }
                float |= self.exponent(b"eE");
            }
        }
        if self.eat_if(|b| matches!(b, b'f' | b'F' | b'd' | b'D')) {
            float = true;
        } else if !float {
            self.eat_if(|b| b == b'l' || b == b'L');
        }
        let kind = if float {
            TokenKind::FloatLiteral
        } else {
            TokenKind::IntLiteral
        };
        self.emit(kind, start, true);
    }

    /// Consumes through the closing delimiter; returns false at end of input.
    fn quoted(&mut self, close: &str) -> bool {
        while let Some(c) = self.peek() {
            if c == '\\' {
                self.pos += 1;
                if let Some(esc) = self.peek() {
                    self.pos += esc.len_utf8();
                }
            } else if self.rest().starts_with(close) {
                self.pos += close.len();
                return true;
            } else {
                self.pos += c.len_utf8();
            }
        }
        false
    }
}

/// Tokenizes `source`. Never fails; unknown characters become one-character
/// punctuators and an unterminated literal runs to end of input.
pub fn lex(source: &str) -> Vec<JavaToken> {
    Lexer {
        src: source,
        pos: 0,
        out: Vec::new(),
    }
    .run()
}

/// Identifier token texts in order, keywords excluded.
pub fn identifiers(source: &str) -> Vec<String> {
    lex(source)
        .into_iter()
        .filter(|t| t.kind == TokenKind::Identifier)
        .map(|t| t.text)
        .collect()
}

/// Byte offset one past the `}` that closes `open_depth` currently-open braces.
pub fn method_close_offset(body_continuation: &str, open_depth: usize) -> Option<usize> {
    let mut depth = open_depth as i64;
    for tok in lex(body_continuation) {
        if tok.is_punct("{") {
            depth += 1;
        } else if tok.is_punct("}") {
            depth -= 1;
            if depth <= 0 {
                return Some(tok.end());
            }
        }
    }
    None
}

/// Net `{` minus `}` count over `source`, ignoring braces in literals and comments.
pub fn brace_depth(source: &str) -> i64 {
    lex(source).iter().fold(0, |d, t| {
        if t.is_punct("{") {
            d + 1
        } else if t.is_punct("}") {
            d - 1
        } else {
            d
        }
    })
}

/// Truncates `text` just past the method-closing brace, if there is one.
pub fn truncate_at_method_close(text: &str, open_depth: usize) -> &str {
    match method_close_offset(text, open_depth) {
        Some(end) => &text[..end],
        None => text,
    }
}

/// True when the last token of `tokens` is a `.` that dereferences an object:
/// an identifier, `this`, `super`, `class`, `)`, `]` or a string literal
/// precedes it.
pub fn is_dereference_dot(tokens: &[JavaToken], index: usize) -> bool {
    if !tokens[index].is_op(".") || index == 0 {
        return false;
    }
    let prev = &tokens[index - 1];
    match prev.kind {
        TokenKind::Identifier => true,
        TokenKind::Keyword => matches!(prev.text.as_str(), "this" | "super" | "class"),
        TokenKind::Punctuator => prev.text == ")" || prev.text == "]",
        TokenKind::StringLiteral => prev.terminated,
        _ => false,
    }
}

/// Byte offset of the `{` opening the body of the first method declared as `name`.
pub fn find_method_body(source: &str, name: &str) -> Option<usize> {
    let toks = lex(source);
    let mut i = 0;
    while i < toks.len() {
        if toks[i].kind == TokenKind::Identifier
            && toks[i].text == name
            && toks.get(i + 1).is_some_and(|t| t.is_punct("("))
            && (i == 0 || !toks[i - 1].is_op("."))
        {
            // Skip the balanced parameter list.
            let mut j = i + 1;
            let mut parens = 0i64;
            while j < toks.len() {
                if toks[j].is_punct("(") {
                    parens += 1;
                } else if toks[j].is_punct(")") {
                    parens -= 1;
                    if parens == 0 {
                        break;
                    }
                }
                j += 1;
            }
            j += 1;
            // Optional throws clause.
            if toks.get(j).is_some_and(|t| t.kind == TokenKind::Keyword && t.text == "throws") {
                j += 1;
                while toks
                    .get(j)
                    .is_some_and(|t| t.kind == TokenKind::Identifier || t.is_op(".") || t.is_punct(","))
                {
                    j += 1;
                }
            }
            if let Some(t) = toks.get(j) {
                if t.is_punct("{") {
                    return Some(t.offset);
                }
            }
        }
        i += 1;
    }
    None
}
