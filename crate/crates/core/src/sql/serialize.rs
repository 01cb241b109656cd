//! Prompt-ready text rendering of query results.
//!
//! Format: a tab-separated header line, then one tab-separated line per row.
//! Tabs, newlines, carriage returns and backslashes inside cells are escaped
//! (`\t`, `\n`, `\r`, `\\`) so every line keeps the header's arity. An empty
//! result gets a `[0 rows]` marker line; a result with rows left out ends
//! with `[truncated: N of M rows shown]`.

use super::exec::QueryResult;

fn escape(cell: &str) -> String {
    let mut out = String::with_capacity(cell.len());
    for c in cell.chars() {
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

fn unescape(cell: &str) -> String {
    let mut out = String::with_capacity(cell.len());
    let mut chars = cell.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

fn truncation_marker(shown: usize, total: u64) -> String {
    format!("[truncated: {shown} of {total} rows shown]")
}

/// Render `result` in at most `max_bytes` bytes by dropping rows from the
/// end. The header line and marker are always emitted, so a budget smaller
/// than those two lines is exceeded.
pub fn serialize_result(result: &QueryResult, max_bytes: usize) -> String {
    let header: Vec<String> = result.headers.iter().map(|h| escape(h)).collect();
    let header = header.join("\t");
    if result.rows.is_empty() && result.total_rows == 0 {
        return format!("{header}\n[0 rows]");
    }
    let lines: Vec<String> = result
        .rows
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| escape(&v.to_string()))
                .collect::<Vec<_>>()
                .join("\t")
        })
        .collect();

    let total = result.total_rows.max(lines.len() as u64);
    let full_len = header.len() + lines.iter().map(|l| l.len() + 1).sum::<usize>();
    if lines.len() as u64 == total && full_len <= max_bytes {
        let mut out = header;
        for l in &lines {
            out.push('\n');
            out.push_str(l);
        }
        return out;
    }

    // Largest prefix of rows that fits together with the marker line.
    let mut shown = 0;
    let mut used = header.len();
    for (n, line) in lines.iter().enumerate() {
        let with_row = used + 1 + line.len();
        if with_row + 1 + truncation_marker(n + 1, total).len() > max_bytes {
            break;
        }
        used = with_row;
        shown = n + 1;
    }
    let mut out = header;
    for l in &lines[..shown] {
        out.push('\n');
        out.push_str(l);
    }
    out.push('\n');
    out.push_str(&truncation_marker(shown, total));
    out
}

/// Parse serialized text back into headers and (unescaped) row cells.
/// Returns `None` when a row's arity differs from the header's.
pub fn parse_serialized(text: &str) -> Option<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    if lines.is_empty() {
        return None;
    }
    let header: Vec<String> = lines.remove(0).split('\t').map(unescape).collect();
    if let Some(last) = lines.last() {
        if *last == "[0 rows]" || (last.starts_with("[truncated: ") && last.ends_with(" rows shown]")) {
            lines.pop();
        }
    }
    let mut rows = Vec::with_capacity(lines.len());
    for line in lines {
        let cells: Vec<String> = line.split('\t').map(unescape).collect();
        if cells.len() != header.len() {
            return None;
        }
        rows.push(cells);
    }
    Some((header, rows))
}
