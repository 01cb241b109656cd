//! Typed answers and the strict parser for provider answer text.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    Boolean,
    Category,
    Number,
    #[serde(alias = "list[category]")]
    ListCategory,
    #[serde(alias = "list[number]")]
    ListNumber,
}

impl AnswerType {
    pub const ALL: [AnswerType; 5] = [
        AnswerType::Boolean,
        AnswerType::Category,
        AnswerType::Number,
        AnswerType::ListCategory,
        AnswerType::ListNumber,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerType::Boolean => "boolean",
            AnswerType::Category => "category",
            AnswerType::Number => "number",
            AnswerType::ListCategory => "list_category",
            AnswerType::ListNumber => "list_number",
        }
    }
}

impl fmt::Display for AnswerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum AnswerValue {
    Boolean(bool),
    Number(f64),
    Category(String),
    ListCategory(Vec<String>),
    ListNumber(Vec<f64>),
}

impl AnswerValue {
    pub fn answer_type(&self) -> AnswerType {
        match self {
            AnswerValue::Boolean(_) => AnswerType::Boolean,
            AnswerValue::Number(_) => AnswerType::Number,
            AnswerValue::Category(_) => AnswerType::Category,
            AnswerValue::ListCategory(_) => AnswerType::ListCategory,
            AnswerValue::ListNumber(_) => AnswerType::ListNumber,
        }
    }

    /// Placeholder for questions that end without an answer: an empty list
    /// for list types, otherwise an empty category.
    pub fn empty_marker(expected: Option<AnswerType>) -> AnswerValue {
        match expected {
            Some(AnswerType::ListCategory) => AnswerValue::ListCategory(Vec::new()),
            Some(AnswerType::ListNumber) => AnswerValue::ListNumber(Vec::new()),
            _ => AnswerValue::Category(String::new()),
        }
    }

    pub fn is_empty_marker(&self) -> bool {
        match self {
            AnswerValue::Category(s) => s.is_empty(),
            AnswerValue::ListCategory(v) => v.is_empty(),
            AnswerValue::ListNumber(v) => v.is_empty(),
            _ => false,
        }
    }

    /// Canonical text form; [`parse_answer`] with the value's own type maps
    /// it back to the same value.
    pub fn canonical(&self) -> String {
        match self {
            AnswerValue::Boolean(true) => "True".into(),
            AnswerValue::Boolean(false) => "False".into(),
            AnswerValue::Number(x) => format_number(*x),
            AnswerValue::Category(s) => s.clone(),
            AnswerValue::ListCategory(items) => {
                let parts: Vec<String> = items.iter().map(|s| quote_item(s)).collect();
                format!("[{}]", parts.join(", "))
            }
            AnswerValue::ListNumber(items) => {
                let parts: Vec<String> = items.iter().map(|x| format_number(*x)).collect();
                format!("[{}]", parts.join(", "))
            }
        }
    }
}

impl fmt::Display for AnswerValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{x:.0}")
    } else {
        format!("{x}")
    }
}

fn quote_item(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        if c == '\\' || c == '\'' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('\'');
    out
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnswerParseError {
    #[error("empty answer")]
    Empty,
    #[error("cannot parse {raw:?} as any answer type")]
    Unparseable { raw: String },
    #[error("expected a {expected} answer, got {raw:?}")]
    VariantMismatch {
        expected: AnswerType,
        found: Option<AnswerType>,
        raw: String,
    },
}

/// The text after the last `Answer:` line marker, if the reply reasons
/// before answering.
fn final_answer_segment(raw: &str) -> &str {
    let mut segment = raw;
    let mut offset = 0;
    for line in raw.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if trimmed.get(..7).is_some_and(|w| w.eq_ignore_ascii_case("answer:")) {
            let start = offset + (line.len() - trimmed.len()) + 7;
            segment = &raw[start..];
        }
        offset += line.len();
    }
    segment
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for q in ['"', '\'', '`'] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return s[1..s.len() - 1].trim();
        }
    }
    s
}

fn parse_bool(s: &str) -> Option<bool> {
    if s.eq_ignore_ascii_case("true") {
        Some(true)
    } else if s.eq_ignore_ascii_case("false") {
        Some(false)
    } else {
        None
    }
}

fn is_grouped_thousands(s: &str) -> bool {
    let unsigned = s.strip_prefix(['-', '+']).unwrap_or(s);
    let int_part = unsigned.split('.').next().unwrap_or("");
    let frac_ok = unsigned
        .split_once('.')
        .map(|(_, f)| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
        .unwrap_or(true);
    let groups: Vec<&str> = int_part.split(',').collect();
    frac_ok
        && groups.len() > 1
        && (1..=3).contains(&groups[0].len())
        && groups.iter().all(|g| g.bytes().all(|b| b.is_ascii_digit()))
        && groups[1..].iter().all(|g| g.len() == 3)
}

/// Decimal number; thousands separators are stripped when grouped in threes.
pub fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    let cleaned = if is_grouped_thousands(s) {
        s.replace(',', "")
    } else {
        s.to_string()
    };
    let plausible = !cleaned.is_empty()
        && cleaned.bytes().any(|b| b.is_ascii_digit())
        && cleaned
            .bytes()
            .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E'));
    if !plausible {
        return None;
    }
    cleaned.parse::<f64>().ok().filter(|x| x.is_finite())
}

#[derive(Debug, PartialEq)]
struct ListItem {
    text: String,
    quoted: bool,
}

/// Parse `[a, 'b', "c"]`. Quoted items honour backslash escapes; bare items
/// are trimmed.
fn parse_list(s: &str) -> Option<Vec<ListItem>> {
    let inner = s.strip_prefix('[')?.strip_suffix(']')?;
    let chars: Vec<char> = inner.chars().collect();
    let mut items = Vec::new();
    let mut i = 0;
    let skip_ws = |i: &mut usize| {
        while *i < chars.len() && chars[*i].is_whitespace() {
            *i += 1;
        }
    };
    skip_ws(&mut i);
    if i == chars.len() {
        return Some(items);
    }
    loop {
        skip_ws(&mut i);
        if i < chars.len() && (chars[i] == '\'' || chars[i] == '"') {
            let q = chars[i];
            i += 1;
            let mut text = String::new();
            loop {
                let c = *chars.get(i)?;
                i += 1;
                if c == '\\' {
                    text.push(*chars.get(i)?);
                    i += 1;
                } else if c == q {
                    break;
                } else {
                    text.push(c);
                }
            }
            items.push(ListItem { text, quoted: true });
            skip_ws(&mut i);
        } else {
            let start = i;
            while i < chars.len() && chars[i] != ',' {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect::<String>().trim().to_string();
            if text.is_empty() {
                return None;
            }
            items.push(ListItem { text, quoted: false });
        }
        match chars.get(i) {
            None => return Some(items),
            Some(',') => i += 1,
            Some(_) => return None,
        }
    }
}

fn parse_as(s: &str, ty: AnswerType) -> Option<AnswerValue> {
    match ty {
        AnswerType::Boolean => parse_bool(s).map(AnswerValue::Boolean),
        AnswerType::Number => parse_number(s).map(AnswerValue::Number),
        AnswerType::Category => (!s.is_empty()).then(|| AnswerValue::Category(s.to_string())),
        AnswerType::ListCategory => parse_list(s)
            .map(|items| AnswerValue::ListCategory(items.into_iter().map(|i| i.text).collect())),
        AnswerType::ListNumber => parse_list(s)?
            .into_iter()
            .map(|i| parse_number(&i.text))
            .collect::<Option<Vec<f64>>>()
            .map(AnswerValue::ListNumber),
    }
}

fn infer(s: &str) -> Option<AnswerValue> {
    if let Some(b) = parse_bool(s) {
        return Some(AnswerValue::Boolean(b));
    }
    if let Some(x) = parse_number(s) {
        return Some(AnswerValue::Number(x));
    }
    if let Some(items) = parse_list(s) {
        let all_bare_numbers =
            !items.is_empty() && items.iter().all(|i| !i.quoted && parse_number(&i.text).is_some());
        return if all_bare_numbers {
            parse_as(s, AnswerType::ListNumber)
        } else {
            Some(AnswerValue::ListCategory(items.into_iter().map(|i| i.text).collect()))
        };
    }
    parse_as(s, AnswerType::Category)
}

/// Parse provider answer text. Whitespace and one pair of surrounding quotes
/// are stripped. With `expected`, the result must be of that type; booleans
/// accept only `True`/`False` (any case).
pub fn parse_answer(raw: &str, expected: Option<AnswerType>) -> Result<AnswerValue, AnswerParseError> {
    let text = strip_quotes(final_answer_segment(raw));
    if text.is_empty() {
        return Err(AnswerParseError::Empty);
    }
    match expected {
        None => infer(text).ok_or_else(|| AnswerParseError::Unparseable { raw: raw.to_string() }),
        Some(ty) => parse_as(text, ty).ok_or_else(|| AnswerParseError::VariantMismatch {
            expected: ty,
            found: infer(text).map(|v| v.answer_type()),
            raw: raw.to_string(),
        }),
    }
}
