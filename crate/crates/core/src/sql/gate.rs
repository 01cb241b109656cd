//! Read-only statement gate.
//!
//! Statements are tokenized with SQLite's quoting rules: comments are
//! dropped and string literals and quoted identifiers become opaque tokens,
//! so the keyword scan only ever sees live SQL words.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::QueryMode;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GateError {
    #[error("no statement: no SELECT-like statement found in provider output")]
    NoStatement,
    #[error("empty statement")]
    Empty,
    #[error("unterminated {0}")]
    Unterminated(&'static str),
    #[error("multiple statements are not allowed")]
    MultiStatement,
    #[error("statement class forbidden: only SELECT queries may run (found {0:?})")]
    StatementClass(String),
    #[error("forbidden keyword {0:?}")]
    ForbiddenKeyword(String),
    #[error("projection must be * in row-retrieval mode")]
    ProjectionNotStar,
    #[error("query does not read from any table")]
    NoTable,
}

/// A validated single read-only SELECT.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlQuery {
    /// Statement text with any trailing semicolon removed.
    pub text: String,
    pub mode: QueryMode,
    /// First table named after FROM/JOIN.
    pub target_table: String,
    /// Every FROM/JOIN table that is not a CTE name.
    pub tables: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Tok {
    Word(String),
    Ident(String),
    Str,
    Num,
    LParen,
    RParen,
    Comma,
    Dot,
    Star,
    Semi,
    Other(char),
}

#[derive(Clone, Debug)]
pub(crate) struct Token {
    pub tok: Tok,
    pub start: usize,
}

impl Token {
    fn word(&self) -> Option<String> {
        match &self.tok {
            Tok::Word(w) => Some(w.to_ascii_uppercase()),
            _ => None,
        }
    }

    fn is_word(&self, kw: &str) -> bool {
        matches!(&self.tok, Tok::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    fn name(&self) -> Option<&str> {
        match &self.tok {
            Tok::Word(w) | Tok::Ident(w) => Some(w),
            _ => None,
        }
    }
}

/// Tokenize with SQLite lexical rules.
pub(crate) fn tokenize(sql: &str) -> Result<Vec<Token>, GateError> {
    let bytes = sql.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' | b'\x0c' => i += 1,
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i < bytes.len() && !(bytes[i] == b'*' && bytes.get(i + 1) == Some(&b'/')) {
                    i += 1;
                }
                // An unterminated block comment runs to end of input, as in SQLite.
                i = (i + 2).min(bytes.len());
            }
            b'\'' | b'"' | b'`' => {
                let (end, body) = quoted(sql, i, c, c)?;
                out.push(Token {
                    tok: if c == b'\'' { Tok::Str } else { Tok::Ident(body) },
                    start,
                });
                i = end;
            }
            b'[' => {
                let (end, body) = quoted(sql, i, b'[', b']')?;
                out.push(Token { tok: Tok::Ident(body), start });
                i = end;
            }
            b'(' | b')' | b',' | b'.' | b'*' | b';' => {
                let tok = match c {
                    b'(' => Tok::LParen,
                    b')' => Tok::RParen,
                    b',' => Tok::Comma,
                    b'.' if bytes.get(i + 1).is_some_and(u8::is_ascii_digit) => {
                        i += 1;
                        while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'.') {
                            i += 1;
                        }
                        out.push(Token { tok: Tok::Num, start });
                        continue;
                    }
                    b'.' => Tok::Dot,
                    b'*' => Tok::Star,
                    _ => Tok::Semi,
                };
                out.push(Token { tok, start });
                i += 1;
            }
            b'0'..=b'9' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'.') {
                    i += 1;
                }
                out.push(Token { tok: Tok::Num, start });
            }
            _ if c.is_ascii_alphabetic() || c == b'_' || c >= 0x80 => {
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'$' || bytes[i] >= 0x80)
                {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Word(sql[start..i].to_string()),
                    start,
                });
            }
            _ => {
                out.push(Token { tok: Tok::Other(c as char), start });
                i += 1;
            }
        }
    }
    Ok(out)
}

/// Scan a quoted run starting at `open_at`; a doubled closing quote escapes
/// itself. Returns the index past the closing quote and the unescaped body.
fn quoted(sql: &str, open_at: usize, _open: u8, close: u8) -> Result<(usize, String), GateError> {
    let bytes = sql.as_bytes();
    let mut i = open_at + 1;
    let mut body = Vec::new();
    while i < bytes.len() {
        if bytes[i] == close {
            if close != b']' && bytes.get(i + 1) == Some(&close) {
                body.push(close);
                i += 2;
                continue;
            }
            return Ok((i + 1, String::from_utf8_lossy(&body).into_owned()));
        }
        body.push(bytes[i]);
        i += 1;
    }
    Err(GateError::Unterminated(if close == b'\'' {
        "string literal"
    } else {
        "quoted identifier"
    }))
}

/// Words that never appear in a read-only SELECT.
const FORBIDDEN: &[&str] = &[
    "INSERT", "UPDATE", "DELETE", "DROP", "ALTER", "CREATE", "ATTACH", "DETACH", "PRAGMA", "VACUUM",
    "REINDEX", "ANALYZE", "TRUNCATE", "GRANT", "REVOKE", "MERGE", "UPSERT", "INTO", "BEGIN", "COMMIT",
    "ROLLBACK", "SAVEPOINT", "RELEASE", "EXEC", "EXECUTE", "CALL", "COPY", "LOAD_EXTENSION",
    "READFILE", "WRITEFILE", "FTS3_TOKENIZER",
];

fn forbidden_word(tokens: &[Token], i: usize) -> Option<String> {
    let word = tokens[i].word()?;
    if FORBIDDEN.contains(&word.as_str()) || word.starts_with("PRAGMA_") {
        return Some(word);
    }
    // `replace(x, a, b)` is a string function; `REPLACE INTO` is a write.
    if word == "REPLACE" && !matches!(tokens.get(i + 1).map(|t| &t.tok), Some(Tok::LParen)) {
        return Some(word);
    }
    None
}

/// Pull the first SQL statement out of provider output: strips code fences
/// and leading prose, stops at the first top-level `;` (kept) or, outside a
/// fence, at a blank line.
pub fn extract_sql(raw: &str) -> Result<String, GateError> {
    if raw.trim().is_empty() {
        return Err(GateError::NoStatement);
    }
    for block in fenced_blocks(raw) {
        if let Some(start) = statement_start(block) {
            return Ok(cut_statement(&block[start..], false));
        }
    }
    let start = statement_start(raw).ok_or(GateError::NoStatement)?;
    let stmt = cut_statement(&raw[start..], true);
    if stmt.is_empty() {
        return Err(GateError::NoStatement);
    }
    Ok(stmt)
}

fn fenced_blocks(raw: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = raw;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // Skip an info string such as "sql"; a one-line fence has none.
        let first_line = after.find('\n').map(|n| &after[..n]).unwrap_or(after);
        let is_info = first_line
            .trim()
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            && !first_line.trim().eq_ignore_ascii_case("select");
        let body_start = if is_info {
            after.find('\n').map(|n| n + 1).unwrap_or(after.len())
        } else {
            0
        };
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                blocks.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => {
                blocks.push(body);
                break;
            }
        }
    }
    blocks
}

/// Byte offset of the first plausible statement keyword. Upper-case
/// `SELECT`/`WITH` win over lower-case occurrences, which are often prose.
fn statement_start(text: &str) -> Option<usize> {
    let words = word_spans(text);
    let is_with_clause = |idx: usize| {
        // WITH [RECURSIVE] name [(...)] AS
        let next: Vec<&str> = words[idx + 1..].iter().take(3).map(|(_, w)| *w).collect();
        match next.as_slice() {
            [r, _, a, ..] if r.eq_ignore_ascii_case("RECURSIVE") => a.eq_ignore_ascii_case("AS"),
            [_, a, ..] => a.eq_ignore_ascii_case("AS"),
            _ => false,
        }
    };
    let pick = |case_sensitive: bool| {
        words.iter().enumerate().find_map(|(idx, (pos, w))| {
            let eq = |kw: &str| if case_sensitive { *w == kw } else { w.eq_ignore_ascii_case(kw) };
            (eq("SELECT") || (eq("WITH") && is_with_clause(idx))).then_some(*pos)
        })
    };
    pick(true).or_else(|| pick(false))
}

fn word_spans(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        let part = c.is_alphanumeric() || c == '_';
        match (part, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, &text[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out
}

/// Cut `text` (which starts at a statement keyword) at the first `;` outside
/// quotes, keeping it. Outside fences a blank line also ends the statement.
fn cut_statement(text: &str, stop_at_blank_line: bool) -> String {
    let bytes = text.as_bytes();
    let mut quote: Option<u8> = None;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => match c {
                b'\'' | b'"' | b'`' => quote = Some(c),
                b';' => return text[..=i].trim().to_string(),
                b'\n' if stop_at_blank_line => {
                    let rest = &text[i + 1..];
                    let line_end = rest.find('\n').unwrap_or(rest.len());
                    if rest[..line_end].trim().is_empty() {
                        return text[..i].trim().to_string();
                    }
                }
                _ => {}
            },
        }
        i += 1;
    }
    text.trim().to_string()
}

/// Check a statement against the read-only policy for `mode`.
pub fn validate_query(text: &str, mode: QueryMode) -> Result<SqlQuery, GateError> {
    let tokens = tokenize(text)?;
    let Some(first) = tokens.first() else {
        return Err(GateError::Empty);
    };
    if let Some(semi) = tokens.iter().position(|t| t.tok == Tok::Semi) {
        if semi + 1 != tokens.len() {
            return Err(GateError::MultiStatement);
        }
    }
    let body_tokens: &[Token] = match tokens.last() {
        Some(t) if t.tok == Tok::Semi => &tokens[..tokens.len() - 1],
        _ => &tokens,
    };
    if body_tokens.is_empty() {
        return Err(GateError::Empty);
    }
    if !(first.is_word("SELECT") || first.is_word("WITH")) {
        let found = match &first.tok {
            Tok::Word(w) => w.clone(),
            other => format!("{other:?}"),
        };
        return Err(GateError::StatementClass(found));
    }
    for i in 0..body_tokens.len() {
        if let Some(word) = forbidden_word(body_tokens, i) {
            return Err(GateError::ForbiddenKeyword(word));
        }
    }

    let main_select = main_select_index(body_tokens).ok_or(GateError::NoTable)?;
    if mode == QueryMode::RowRetrieval && !projection_is_star(body_tokens, main_select) {
        return Err(GateError::ProjectionNotStar);
    }
    let ctes = cte_names(body_tokens, main_select);
    let tables: Vec<String> = referenced_tables(body_tokens)
        .into_iter()
        .filter(|t| !ctes.iter().any(|c| c.eq_ignore_ascii_case(t)))
        .collect();
    let target_table = tables.first().cloned().ok_or(GateError::NoTable)?;

    let end = match tokens.last() {
        Some(t) if t.tok == Tok::Semi => t.start,
        _ => text.len(),
    };
    Ok(SqlQuery {
        text: text[..end].trim().to_string(),
        mode,
        target_table,
        tables,
    })
}

/// Index of the first SELECT at parenthesis depth 0.
fn main_select_index(tokens: &[Token]) -> Option<usize> {
    let mut depth = 0i32;
    for (i, t) in tokens.iter().enumerate() {
        match t.tok {
            Tok::LParen => depth += 1,
            Tok::RParen => depth -= 1,
            _ if depth == 0 && t.is_word("SELECT") => return Some(i),
            _ => {}
        }
    }
    None
}

/// `SELECT [DISTINCT|ALL] * FROM` or `SELECT [DISTINCT|ALL] t.* FROM`.
fn projection_is_star(tokens: &[Token], select: usize) -> bool {
    let mut i = select + 1;
    if tokens.get(i).is_some_and(|t| t.is_word("DISTINCT") || t.is_word("ALL")) {
        i += 1;
    }
    let mut depth = 0i32;
    let from = tokens[i..].iter().position(|t| {
        match t.tok {
            Tok::LParen => depth += 1,
            Tok::RParen => depth -= 1,
            _ => {}
        }
        depth == 0 && t.is_word("FROM")
    });
    let Some(from) = from else {
        return false;
    };
    let projection: Vec<&Tok> = tokens[i..i + from].iter().map(|t| &t.tok).collect();
    matches!(
        projection.as_slice(),
        [Tok::Star] | [Tok::Word(_) | Tok::Ident(_), Tok::Dot, Tok::Star]
    )
}

fn cte_names(tokens: &[Token], main_select: usize) -> Vec<String> {
    if !tokens.first().is_some_and(|t| t.is_word("WITH")) {
        return Vec::new();
    }
    let mut names = Vec::new();
    let mut depth = 0i32;
    for i in 0..main_select {
        match tokens[i].tok {
            Tok::LParen => depth += 1,
            Tok::RParen => depth -= 1,
            _ => {}
        }
        if depth != 0 || !tokens[i].is_word("AS") || i == 0 {
            continue;
        }
        // name AS ( ... )   or   name(col, ...) AS ( ... )
        let mut j = i - 1;
        if tokens[j].tok == Tok::RParen {
            let mut d = 0i32;
            loop {
                match tokens[j].tok {
                    Tok::RParen => d += 1,
                    Tok::LParen => d -= 1,
                    _ => {}
                }
                if d == 0 || j == 0 {
                    break;
                }
                j -= 1;
            }
            j = j.saturating_sub(1);
        }
        if let Some(name) = tokens[j].name() {
            names.push(name.to_string());
        }
    }
    names
}

/// `name` or `schema.name` at `i`; returns the table name and the index
/// after it.
fn table_ref(tokens: &[Token], i: usize) -> Option<(&str, usize)> {
    let name = tokens.get(i)?.name()?;
    match (tokens.get(i + 1).map(|t| &t.tok), tokens.get(i + 2).and_then(Token::name)) {
        (Some(Tok::Dot), Some(table)) => Some((table, i + 3)),
        _ => Some((name, i + 1)),
    }
}

/// Index just past the parenthesised group opening at `i`.
fn skip_group(tokens: &[Token], i: usize) -> usize {
    let mut depth = 0i32;
    for (j, t) in tokens.iter().enumerate().skip(i) {
        match t.tok {
            Tok::LParen => depth += 1,
            Tok::RParen => {
                depth -= 1;
                if depth == 0 {
                    return j + 1;
                }
            }
            _ => {}
        }
    }
    tokens.len()
}

/// Tables named after FROM or JOIN, including every item of a
/// comma-separated FROM list. Subqueries are scanned by their own FROM.
fn referenced_tables(tokens: &[Token]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut push = |name: &str| {
        if !out.iter().any(|o| o.eq_ignore_ascii_case(name)) {
            out.push(name.to_string());
        }
    };
    for (i, t) in tokens.iter().enumerate() {
        if !(t.is_word("FROM") || t.is_word("JOIN")) {
            continue;
        }
        let mut p = i + 1;
        loop {
            if tokens.get(p).is_some_and(|t| t.tok == Tok::LParen) {
                p = skip_group(tokens, p);
            } else if let Some((name, next)) = table_ref(tokens, p) {
                push(name);
                p = next;
            } else {
                break;
            }
            // Optional alias.
            if tokens.get(p).is_some_and(|t| t.is_word("AS")) {
                p += 1;
            }
            if tokens.get(p).is_some_and(|t| t.name().is_some() && !is_clause_word(t)) {
                p += 1;
            }
            if t.is_word("FROM") && tokens.get(p).is_some_and(|t| t.tok == Tok::Comma) {
                p += 1;
            } else {
                break;
            }
        }
    }
    out
}

/// Words that end a FROM item rather than alias it.
fn is_clause_word(t: &Token) -> bool {
    const CLAUSE: &[&str] = &[
        "WHERE", "GROUP", "HAVING", "ORDER", "LIMIT", "OFFSET", "JOIN", "INNER", "LEFT", "RIGHT", "FULL", "CROSS",
        "NATURAL", "OUTER", "ON", "USING", "UNION", "INTERSECT", "EXCEPT", "WINDOW", "INDEXED", "NOT",
    ];
    CLAUSE.iter().any(|w| t.is_word(w))
}
