//! Acceptance checks. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any check fails.
//!
//! `cargo test -p tabqa-cli --test acceptance`

mod support;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic;
use std::path::{Path, PathBuf};
use std::process::Output;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rusqlite::types::Value as SqlValue;
use rusqlite::{Connection, OpenFlags};
use serde_json::Value as Json;
use support::*;
use tabqa_core::bank::{EmbeddingVector, ExampleBank, ExamplePair, PatternTag, QueryMode};
use tabqa_core::bench::{run_bench, BenchOptions, Workspace};
use tabqa_core::llm::{FixtureMode, ScriptedProvider, TemplateId};
use tabqa_core::pipeline::{
    merge_results, parse_answer, AnswerType, AnswerValue, AttemptRecord, FinalStatus, QaOutcome,
    VerificationVerdict,
};
use tabqa_core::sql::{extract_sql, validate_query};

enum Verdict {
    Pass(String),
    Skip(String),
}

type Check = fn() -> Result<Verdict, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let checks: [(&str, Check); 8] = [
        ("sql gate safety", gate_fuzz),
        ("example selection oracle", selection_oracle),
        ("answer parsing round trip", answer_round_trip),
        ("merge semantics", merge_semantics),
        ("end-to-end replay", end_to_end_replay),
        ("lite sampling", lite_sampling),
        ("no mutation", no_mutation),
        ("live-mode smoke", live_smoke),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in checks {
        let result = panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(Verdict::Pass(detail)) => println!("PASS {name}: {detail}"),
            Ok(Verdict::Skip(detail)) => println!("SKIP {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- gate fuzz

const WRITES: &[&str] = &[
    "INSERT INTO t VALUES (1, 'a', 1.5, 1)",
    "INSERT OR REPLACE INTO t (a) VALUES (2)",
    "REPLACE INTO t (a, b) VALUES (3, 'c')",
    "UPDATE t SET b = 'x' WHERE a = 1",
    "UPDATE OR IGNORE t SET c = 0",
    "DELETE FROM t",
    "DELETE FROM t WHERE a IN (SELECT a FROM t)",
    "DROP TABLE t",
    "DROP TABLE IF EXISTS t",
    "DROP VIEW v",
    "CREATE TABLE x (a INTEGER)",
    "CREATE TABLE x AS SELECT * FROM t",
    "CREATE TEMP VIEW v AS SELECT * FROM t",
    "CREATE INDEX i ON t (a)",
    "CREATE TRIGGER tr AFTER INSERT ON t BEGIN DELETE FROM t; END",
    "ALTER TABLE t ADD COLUMN z TEXT",
    "ALTER TABLE t RENAME TO u",
    "ATTACH DATABASE 'other.db' AS other",
    "DETACH DATABASE other",
    "PRAGMA writable_schema = ON",
    "VACUUM",
    "REINDEX t",
    "BEGIN TRANSACTION",
    "SAVEPOINT s1",
];

/// Ways of smuggling a write past a keyword scan.
const WRAPPERS: &[fn(&str) -> String] = &[
    |w| w.to_string(),
    |w| format!("{w};"),
    |w| format!("SELECT * FROM t; {w}"),
    |w| format!("SELECT * FROM t;{w};"),
    |w| format!("/* SELECT * FROM t */ {w}"),
    |w| format!("-- SELECT * FROM t\n{w}"),
    |w| format!("WITH c AS (SELECT * FROM t) {w}"),
    |w| format!("SELECT * FROM t WHERE b = 'it''s'; {w}"),
    |w| format!("SELECT * FROM t WHERE b = ';'; {w}"),
    |w| format!("SELECT * FROM t /* ; */ ; {w} -- done"),
    |w| format!("SELECT * FROM t -- ;\n; {w}"),
    |w| format!("{w}; SELECT * FROM t"),
    |w| format!("SELECT \"b\" FROM t; {w}"),
    |w| format!("SELECT * FROM (SELECT * FROM t) AS s; {w} /* trailing */"),
    |w| format!("SELECT * FROM t WHERE a IN (SELECT a FROM t);\n\n{w}"),
    |w| format!("SELECT COUNT(*) FROM t WHERE b = \"x\"; {w}"),
];

fn random_case(s: &str, rng: &mut ChaCha8Rng) -> String {
    s.chars()
        .map(|c| if rng.gen_bool(0.5) { c.to_ascii_uppercase() } else { c.to_ascii_lowercase() })
        .collect()
}

/// Replace one inner space with a comment.
fn splice_comment(s: &str, rng: &mut ChaCha8Rng) -> String {
    let spaces: Vec<usize> = s.match_indices(' ').map(|(i, _)| i).collect();
    let Some(&at) = spaces.choose(rng) else {
        return s.to_string();
    };
    let comment = ["/**/", " /* select */ ", " -- note\n", "\n\t"][rng.gen_range(0..4)];
    format!("{}{comment}{}", &s[..at], &s[at + 1..])
}

fn malicious_corpus(rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out = Vec::new();
    for w in WRITES {
        for wrap in WRAPPERS {
            for variant in 0..4 {
                let w = match variant {
                    0 => w.to_ascii_uppercase(),
                    1 => w.to_ascii_lowercase(),
                    2 => random_case(w, rng),
                    _ => {
                        let cased = random_case(w, rng);
                        splice_comment(&cased, rng)
                    }
                };
                out.push(wrap(&w));
            }
        }
    }
    out
}

fn kw(rng: &mut ChaCha8Rng, word: &str) -> String {
    match rng.gen_range(0..3) {
        0 => word.to_ascii_uppercase(),
        1 => word.to_ascii_lowercase(),
        _ => random_case(word, rng),
    }
}

const TRAP_LITERALS: &[&str] = &[
    "drop table t",
    "it''s",
    "x; delete from t",
    "-- not a comment",
    "/* nope */",
    "INSERT",
    "replace into t",
    "update",
    "\"quoted\"",
];

fn condition(rng: &mut ChaCha8Rng) -> String {
    let lit = TRAP_LITERALS.choose(rng).unwrap();
    match rng.gen_range(0..10) {
        0 => format!("a > {}", rng.gen_range(-5..50)),
        1 => format!("b = '{lit}'"),
        2 => format!("b {} '%{lit}%'", kw(rng, "LIKE")),
        3 => format!("c {} 1.5 {} 7", kw(rng, "BETWEEN"), kw(rng, "AND")),
        4 => "d = 1".to_string(),
        5 => format!("b {} {} {}", kw(rng, "IS"), kw(rng, "NOT"), kw(rng, "NULL")),
        6 => format!("a {} (SELECT a FROM t WHERE c > {})", kw(rng, "IN"), rng.gen_range(0..9)),
        7 => format!("{} (SELECT 1 FROM t AS u WHERE u.a = t.a)", kw(rng, "EXISTS")),
        8 => format!("\"b\" <> '{lit}'"),
        _ => format!("replace(b, 'a', '{lit}') IS NOT NULL"),
    }
}

const VALUE_PROJECTIONS: &[&str] = &[
    "a",
    "b, c",
    "COUNT(*)",
    "AVG(c) AS avg_c",
    "MAX(a) - MIN(a)",
    "REPLACE(b, 'x', 'y')",
    "CASE WHEN d THEN 'yes' ELSE 'no' END AS flag",
    "COUNT(DISTINCT b)",
    "ROUND(c, 2)",
    "substr(b, 1, 3)",
    "\"b\"",
    "'update' AS note",
    "a AS \"delete\"",
    "t.a, t.b",
];

/// A random read-only SELECT over `t(a, b, c, d)` that fits `mode`.
fn valid_select(rng: &mut ChaCha8Rng, mode: QueryMode) -> String {
    let mut q = String::new();
    let cte = rng.gen_bool(0.15);
    if cte {
        q.push_str(&format!(
            "{} c1 {} ({} * {} t {} {}) ",
            kw(rng, "WITH"),
            kw(rng, "AS"),
            kw(rng, "SELECT"),
            kw(rng, "FROM"),
            kw(rng, "WHERE"),
            condition(rng)
        ));
    }
    if rng.gen_bool(0.1) {
        q.push_str("/* drop table t */ ");
    }
    q.push_str(&kw(rng, "SELECT"));
    q.push(' ');
    let grouped = mode == QueryMode::ValueTargeted && !cte && rng.gen_bool(0.2);
    let projection = match mode {
        QueryMode::RowRetrieval if cte => "*".to_string(),
        QueryMode::RowRetrieval => ["*", "*", "t.*"][rng.gen_range(0..3)].to_string(),
        QueryMode::ValueTargeted if grouped => format!("b, {}(*)", kw(rng, "COUNT")),
        QueryMode::ValueTargeted if cte => ["a", "COUNT(*)", "b, c", "SUM(c)"][rng.gen_range(0..4)].to_string(),
        QueryMode::ValueTargeted => VALUE_PROJECTIONS.choose(rng).unwrap().to_string(),
    };
    q.push_str(&projection);
    q.push_str(if rng.gen_bool(0.2) { "\n" } else { " " });
    q.push_str(&kw(rng, "FROM"));
    q.push_str(if cte { " c1" } else { " t" });
    // Bare column names would be ambiguous after a self-join.
    let joined = !cte && rng.gen_bool(0.1) && mode == QueryMode::RowRetrieval;
    if joined {
        q.push_str(&format!(" {} t AS u {} u.a = t.a", kw(rng, "JOIN"), kw(rng, "ON")));
    }
    if !cte && !joined && rng.gen_bool(0.7) {
        q.push_str(&format!(" {} {}", kw(rng, "WHERE"), condition(rng)));
        if rng.gen_bool(0.4) {
            let joiner = if rng.gen_bool(0.5) { "AND" } else { "OR" };
            q.push_str(&format!(" {} {}", kw(rng, joiner), condition(rng)));
        }
    }
    if grouped {
        q.push_str(&format!(" {} {} b", kw(rng, "GROUP"), kw(rng, "BY")));
        if rng.gen_bool(0.5) {
            q.push_str(&format!(" {} COUNT(*) > 1", kw(rng, "HAVING")));
        }
    }
    if rng.gen_bool(0.3) && !grouped && !joined {
        let dir = if rng.gen_bool(0.5) { "DESC" } else { "ASC" };
        q.push_str(&format!(" {} {} a {}", kw(rng, "ORDER"), kw(rng, "BY"), kw(rng, dir)));
    }
    if rng.gen_bool(0.3) {
        q.push_str(&format!(" {} {}", kw(rng, "LIMIT"), rng.gen_range(1..20)));
    }
    if rng.gen_bool(0.1) {
        q.push_str(" -- delete everything\n");
    }
    if rng.gen_bool(0.4) {
        q.push(';');
    }
    q
}

fn gate_fuzz() -> Result<Verdict, String> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a1e);
    let malicious = malicious_corpus(&mut rng);
    ensure(malicious.len() >= 1000, || format!("only {} malicious statements", malicious.len()))?;
    let mut false_accepts = Vec::new();
    for s in &malicious {
        for mode in [QueryMode::RowRetrieval, QueryMode::ValueTargeted] {
            if validate_query(s, mode).is_ok() {
                false_accepts.push(s.clone());
            }
        }
    }
    // The pipeline extracts a statement before gating it. Whatever survives
    // both steps must be a single read-only statement per the engine.
    let oracle = Connection::open_in_memory().map_err(|e| e.to_string())?;
    oracle
        .execute_batch("CREATE TABLE t (a INTEGER, b TEXT, c REAL, d BOOLEAN); CREATE VIEW v AS SELECT * FROM t;")
        .map_err(|e| e.to_string())?;
    let engine_read_only = |sql: &str| oracle.prepare(sql).map(|st| st.readonly()).unwrap_or(false);
    let mut extracted_unsafe = Vec::new();
    for s in &malicious {
        if let Ok(q) = extract_sql(s).and_then(|x| validate_query(&x, QueryMode::RowRetrieval)) {
            if !engine_read_only(&q.text) {
                extracted_unsafe.push(q.text);
            }
        }
    }

    let mut valid = 0usize;
    let mut accepted = 0usize;
    let mut rejected = Vec::new();
    for i in 0..2000 {
        let mode = if i % 2 == 0 { QueryMode::RowRetrieval } else { QueryMode::ValueTargeted };
        let s = valid_select(&mut rng, mode);
        if !engine_read_only(&s) {
            continue;
        }
        valid += 1;
        match validate_query(&s, mode) {
            Ok(_) => accepted += 1,
            Err(e) => rejected.push(format!("{s} ({e})")),
        }
    }
    let elapsed = started.elapsed();
    ensure(false_accepts.is_empty(), || {
        format!("{} false accepts, e.g. {:?}", false_accepts.len(), false_accepts[0])
    })?;
    ensure(extracted_unsafe.is_empty(), || {
        format!("extracted unsafe statement {:?}", extracted_unsafe[0])
    })?;
    ensure(valid >= 1000, || format!("only {valid} engine-valid SELECTs generated"))?;
    let rate = accepted as f64 / valid as f64;
    ensure(rate >= 0.99, || {
        format!("valid SELECT acceptance {rate:.4}; first rejection {:?}", rejected.first())
    })?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(Verdict::Pass(format!(
        "0/{} malicious accepted, {accepted}/{valid} valid SELECTs accepted ({:.2}%), {:.0} ms",
        malicious.len(),
        rate * 100.0,
        elapsed.as_secs_f64() * 1000.0
    )))
}

// ----------------------------------------------------------- selection

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

fn selection_oracle() -> Result<Verdict, String> {
    const DIM: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut vectors: Vec<Vec<f64>> = (0..25).map(|_| random_vec(&mut rng, DIM)).collect();
    // Exact duplicates force ties that only insertion order can break.
    vectors[7] = vectors[3].clone();
    vectors[19] = vectors[11].clone();
    vectors[24] = vectors[11].clone();
    let mut bank = ExampleBank::new();
    for (i, v) in vectors.iter().enumerate() {
        let pair = ExamplePair {
            question: format!("example {i}"),
            sql: format!("SELECT * FROM t WHERE a = {i}"),
            pattern_tag: PatternTag::ALL[i % PatternTag::ALL.len()],
            mode: QueryMode::RowRetrieval,
        };
        bank.add_example(pair, EmbeddingVector::new(v.clone()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    }
    let queries: Vec<Vec<f64>> = (0..200)
        .map(|i| if i % 10 == 0 { vectors[[3, 11, 7, 19, 0][i / 10 % 5]].clone() } else { random_vec(&mut rng, DIM) })
        .collect();

    let started = Instant::now();
    let mut mismatches = 0;
    let mut first = None;
    for (i, q) in queries.iter().enumerate() {
        let k = if i % 50 == 49 { 25 } else { 1 + i % 5 };
        let qv = EmbeddingVector::new(q.clone()).map_err(|e| e.to_string())?;
        let got: Vec<usize> = bank
            .select_examples(&qv, k, QueryMode::RowRetrieval)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|p| p.question["example ".len()..].parse().unwrap())
            .collect();
        let mut expected: Vec<(f64, usize)> = vectors.iter().enumerate().map(|(j, v)| (oracle_cosine(q, v), j)).collect();
        expected.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = expected.into_iter().take(k).map(|(_, j)| j).collect();
        if got != expected {
            mismatches += 1;
            first.get_or_insert(format!("query {i} k={k}: got {got:?}, expected {expected:?}"));
        }
    }
    let elapsed = started.elapsed();
    ensure(mismatches == 0, || format!("{mismatches} mismatches; {}", first.unwrap_or_default()))?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(Verdict::Pass(format!(
        "200/200 queries match brute force (3 tied duplicates), {:.1} ms",
        elapsed.as_secs_f64() * 1000.0
    )))
}

// ------------------------------------------------------------- answers

fn random_number(rng: &mut ChaCha8Rng) -> f64 {
    match rng.gen_range(0..5) {
        0 => rng.gen_range(-1_000_000i64..1_000_000) as f64,
        1 => rng.gen_range(-1e6..1e6),
        2 => rng.gen_range(-1e-6..1e-6),
        3 => rng.gen_range(-1e300..1e300),
        _ => (rng.gen_range(-10_000i64..10_000) as f64) / 100.0,
    }
}

const CATEGORY_INNER: &[char] = &[
    'a', 'Z', '3', ' ', '\'', '"', ',', '[', ']', '\\', '-', '.', '(', ')', 'é', '東', '_', ':',
];

/// Single-line text that starts and ends with an alphanumeric character.
fn random_category(rng: &mut ChaCha8Rng) -> String {
    let edge = |rng: &mut ChaCha8Rng| ['a', 'B', '7', 'é', 'Q'][rng.gen_range(0..5)];
    let mut s = String::new();
    s.push(edge(rng));
    if rng.gen_bool(0.2) {
        return s;
    }
    for _ in 0..rng.gen_range(0..12) {
        s.push(*CATEGORY_INNER.choose(rng).unwrap());
    }
    s.push(edge(rng));
    s
}

/// List items are arbitrary single-line text: quotes and backslashes are
/// escaped by the canonical form.
fn random_item(rng: &mut ChaCha8Rng) -> String {
    (0..rng.gen_range(0..8)).map(|_| *CATEGORY_INNER.choose(rng).unwrap()).collect()
}

fn random_answer(rng: &mut ChaCha8Rng) -> AnswerValue {
    match rng.gen_range(0..5) {
        0 => AnswerValue::Boolean(rng.gen_bool(0.5)),
        1 => AnswerValue::Number(random_number(rng)),
        2 => AnswerValue::Category(random_category(rng)),
        3 => AnswerValue::ListCategory((0..rng.gen_range(0..5)).map(|_| random_item(rng)).collect()),
        _ => AnswerValue::ListNumber((0..rng.gen_range(0..5)).map(|_| random_number(rng)).collect()),
    }
}

fn answer_round_trip() -> Result<Verdict, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    const N: usize = 10_000;
    for _ in 0..N {
        let v = random_answer(&mut rng);
        let text = v.canonical();
        let back = parse_answer(&text, Some(v.answer_type()));
        ensure(back.as_ref() == Ok(&v), || format!("{v:?} -> {text:?} -> {back:?}"))?;
    }
    let fixed: [(&str, Option<AnswerType>, AnswerValue); 5] = [
        ("True", None, AnswerValue::Boolean(true)),
        ("True", Some(AnswerType::Boolean), AnswerValue::Boolean(true)),
        ("['cat', 'dog']", None, AnswerValue::ListCategory(vec!["cat".into(), "dog".into()])),
        ("42", None, AnswerValue::Number(42.0)),
        ("3.25", Some(AnswerType::Number), AnswerValue::Number(3.25)),
    ];
    for (raw, ty, want) in fixed {
        let got = parse_answer(raw, ty);
        ensure(got.as_ref() == Ok(&want), || format!("{raw:?} parsed to {got:?}"))?;
    }
    Ok(Verdict::Pass(format!(
        "{N} random values round-trip; True, ['cat', 'dog'] and numerics parse to their variants"
    )))
}

// --------------------------------------------------------------- merge

fn synthetic_outcome(id: usize, flagged: bool, answer: &str, attempts: u32) -> QaOutcome {
    let mut records = Vec::new();
    for n in 1..=attempts {
        let mode = if n == 1 { QueryMode::RowRetrieval } else { QueryMode::ValueTargeted };
        let mut a = AttemptRecord::new(n, mode);
        if !(flagged && n == 1) {
            a.verdict = VerificationVerdict::accept("ok");
        }
        records.push(a);
    }
    QaOutcome {
        question_id: format!("q{id:03}"),
        dataset_id: "d".into(),
        table_name: "ds_d".into(),
        row_count: 1,
        question: format!("question {id}"),
        expected_type: Some(AnswerType::Category),
        attempts: records,
        final_answer: AnswerValue::Category(answer.into()),
        final_answer_text: answer.into(),
        final_status: if attempts > 1 {
            FinalStatus::ApprovedAfterReprocess
        } else if flagged {
            FinalStatus::Failed
        } else {
            FinalStatus::ApprovedFirstPass
        },
        attempt_count: attempts,
    }
}

fn merge_semantics() -> Result<Verdict, String> {
    const N: usize = 100;
    const TRIALS: usize = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut flagged_total = 0;
    for trial in 0..TRIALS {
        let p = rng.gen_range(0.0..1.0);
        let mut ids: Vec<usize> = (0..N).collect();
        ids.shuffle(&mut rng);
        let flags: Vec<bool> = (0..N).map(|_| rng.gen_bool(p)).collect();
        let first: Vec<QaOutcome> = ids
            .iter()
            .zip(&flags)
            .map(|(&id, &f)| synthetic_outcome(id, f, &format!("first {id}"), 1))
            .collect();
        let mut reprocessed: Vec<QaOutcome> = ids
            .iter()
            .zip(&flags)
            .filter(|(_, &f)| f)
            .map(|(&id, _)| synthetic_outcome(id, true, &format!("second {id}"), 2))
            .collect();
        reprocessed.shuffle(&mut rng);
        flagged_total += reprocessed.len();

        let merged = merge_results(first.clone(), reprocessed.clone()).map_err(|e| format!("trial {trial}: {e}"))?;
        ensure(merged.len() == N, || format!("trial {trial}: {} outcomes", merged.len()))?;
        for (i, (m, f)) in merged.iter().zip(&first).enumerate() {
            ensure(m.question_id == f.question_id, || format!("trial {trial}: order changed at {i}"))?;
            if flags[i] {
                let want = reprocessed.iter().find(|r| r.question_id == f.question_id).unwrap();
                ensure(m == want, || format!("trial {trial}: {} lost its reprocessed value", m.question_id))?;
            } else {
                ensure(m == f, || format!("trial {trial}: approved {} changed", m.question_id))?;
            }
        }
    }
    Ok(Verdict::Pass(format!(
        "{TRIALS} random partitions of {N} outcomes ({flagged_total} flagged in total) merge to one entry per id in input order"
    )))
}

// ---------------------------------------------------------- end to end

/// Every table's contents, read with a separate read-only connection.
fn db_contents(db: &Path) -> BTreeMap<String, Vec<Vec<SqlValue>>> {
    let conn = Connection::open_with_flags(db, OpenFlags::SQLITE_OPEN_READ_ONLY).unwrap();
    let mut stmt = conn
        .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%'")
        .unwrap();
    let names: Vec<String> = stmt.query_map([], |r| r.get(0)).unwrap().map(Result::unwrap).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let mut stmt = conn.prepare(&format!("SELECT * FROM \"{name}\" ORDER BY rowid")).unwrap();
        let width = stmt.column_count();
        let rows: Vec<Vec<SqlValue>> = stmt
            .query_map([], |r| (0..width).map(|i| r.get::<_, SqlValue>(i)).collect())
            .unwrap()
            .map(Result::unwrap)
            .collect();
        out.insert(name, rows);
    }
    out
}

fn read_trace(path: &Path) -> Vec<Json> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn expect_success(o: &Output, what: &str) -> Result<(), String> {
    ensure(o.status.success(), || {
        format!("{what} exited {:?}: {}", o.status.code(), stderr(o).trim())
    })
}

struct ReplayRun {
    stdout: String,
    out_dir: PathBuf,
    elapsed: Duration,
}

fn bench_replay(db: &Path, out_dir: PathBuf) -> Result<ReplayRun, String> {
    let started = Instant::now();
    let o = run(tabqa()
        .arg("--db")
        .arg(db)
        .arg("--out")
        .arg(&out_dir)
        .arg("bench")
        .arg(toy_questions())
        .arg(toy_gold())
        .arg("--replay")
        .arg(toy_fixtures()));
    let elapsed = started.elapsed();
    expect_success(&o, "bench --replay")?;
    Ok(ReplayRun {
        stdout: stdout(&o),
        out_dir,
        elapsed,
    })
}

fn ingest_toy(db: &Path) -> Result<(), String> {
    let o = run(tabqa().arg("--db").arg(db).arg("ingest").arg(toy_csv()).arg("--id").arg(TOY_DATASET));
    expect_success(&o, "ingest")
}

fn end_to_end_replay() -> Result<Verdict, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let db = tmp.path().join("toy.db");
    ingest_toy(&db)?;
    let a = bench_replay(&db, tmp.path().join("run1"))?;
    let b = bench_replay(&db, tmp.path().join("run2"))?;

    let bytes = |r: &ReplayRun, f: &str| std::fs::read(r.out_dir.join(f)).unwrap();
    ensure(bytes(&a, "trace.jsonl") == bytes(&b, "trace.jsonl"), || "traces differ between runs".into())?;
    ensure(bytes(&a, "predictions.txt") == bytes(&b, "predictions.txt"), || "predictions differ".into())?;
    ensure(a.stdout.contains("accuracy: 0.9000 (9/10)"), || format!("unexpected summary: {}", a.stdout))?;

    let summary: Json = serde_json::from_slice(&bytes(&a, "summary.json")).map_err(|e| e.to_string())?;
    let accuracy = summary["accuracy"].as_f64().unwrap_or(-1.0);
    ensure((accuracy - 0.9).abs() < 1e-12, || format!("summary accuracy {accuracy}"))?;

    let trace = read_trace(&a.out_dir.join("trace.jsonl"));
    let status = |i: usize| trace[i]["final_status"].as_str().unwrap_or("").to_string();
    let statuses: Vec<String> = (0..trace.len()).map(status).collect();
    let mut expected = vec!["approved_first_pass"; 7];
    expected.extend(["approved_after_reprocess", "approved_after_reprocess", "failed"]);
    ensure(statuses == expected, || format!("statuses {statuses:?}"))?;

    let types: std::collections::BTreeSet<&str> =
        trace.iter().filter_map(|t| t["expected_type"].as_str()).collect();
    ensure(types.len() == 5, || format!("answer types covered: {types:?}"))?;
    // The scenario each reprocessed question was built to exercise.
    ensure(trace[7]["attempts"][0]["sql_error"].is_string(), || "q08 first attempt has no SQL error".into())?;
    ensure(
        trace[8]["attempts"][0]["verdict"]["relevant"] == Json::Bool(false),
        || "q09 first attempt was not flagged as irrelevant".into(),
    )?;
    ensure(trace[9]["attempt_count"] == 2, || "q10 did not use both attempts".into())?;

    let slowest = a.elapsed.max(b.elapsed);
    ensure(slowest < Duration::from_secs(10), || format!("run took {slowest:?}"))?;
    Ok(Verdict::Pass(format!(
        "9/10 approved (7 first pass, 2 via reprocess), 1 failed, accuracy 0.9, identical traces, slowest run {:.0} ms",
        slowest.as_secs_f64() * 1000.0
    )))
}

// ---------------------------------------------------------------- lite

fn lite_sampling() -> Result<Verdict, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    std::fs::create_dir_all(&data).map_err(|e| e.to_string())?;
    let sizes = [("small", 5usize), ("edge", 21), ("mid", 100), ("wide", 250)];
    let mut questions = String::new();
    let mut gold = String::new();
    for (i, (name, rows)) in sizes.iter().enumerate() {
        write_wide_csv(&data.join(format!("{name}.csv")), *rows);
        questions.push_str(&format!(
            "{{\"id\": \"l{i}\", \"dataset\": \"{name}\", \"question\": \"How many rows does {name} have?\", \"type\": \"number\"}}\n"
        ));
        gold.push_str(&format!("{{\"id\": \"l{i}\", \"answer\": 0}}\n"));
    }
    let qpath = tmp.path().join("questions.jsonl");
    let gpath = tmp.path().join("gold.jsonl");
    std::fs::write(&qpath, questions).map_err(|e| e.to_string())?;
    std::fs::write(&gpath, gold).map_err(|e| e.to_string())?;

    // Record with a scripted model, then replay through the binary.
    let fixtures = tmp.path().join("fixtures");
    let record_db = tmp.path().join("record.db");
    let mut cfg = config(&record_db, FixtureMode::Record, Some(&fixtures));
    cfg.lite = true;
    let ws = Workspace::with_provider(cfg, Some(Arc::new(ScriptedProvider::new()))).map_err(|e| e.to_string())?;
    let opts = BenchOptions {
        strict: false,
        data_dir: Some(data.clone()),
    };
    run_bench(&ws, &qpath, &gpath, &tmp.path().join("record-out"), &opts).map_err(|e| e.to_string())?;

    let replay_db = tmp.path().join("replay.db");
    let out = tmp.path().join("replay-out");
    let o = run(tabqa()
        .arg("--db")
        .arg(&replay_db)
        .arg("--out")
        .arg(&out)
        .arg("bench")
        .arg(&qpath)
        .arg(&gpath)
        .arg("--replay")
        .arg(&fixtures)
        .arg("--lite")
        .arg("--data-dir")
        .arg(&data));
    expect_success(&o, "bench --lite --replay")?;

    let trace = read_trace(&out.join("trace.jsonl"));
    let mut seen = Vec::new();
    for (t, (name, rows)) in trace.iter().zip(sizes) {
        let want = rows.min(20) as u64;
        let row_count = t["row_count"].as_u64();
        // The fallback query is SELECT * over the table the prompt names, so
        // the executed result shows how many rows the model could see.
        let executed = t["attempts"][0]["result_total_rows"].as_u64();
        ensure(row_count == Some(want) && executed == Some(want), || {
            format!("{name}: row_count {row_count:?}, SELECT * returned {executed:?}, expected {want}")
        })?;
        seen.push(format!("{rows}->{want}"));
    }
    ensure(trace.len() == sizes.len(), || format!("{} trace lines", trace.len()))?;
    Ok(Verdict::Pass(format!("row counts under --lite: {}", seen.join(", "))))
}

// --------------------------------------------------------- no mutation

fn no_mutation() -> Result<Verdict, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;

    // The toy benchmark through the binary.
    let db = tmp.path().join("toy.db");
    ingest_toy(&db)?;
    let before = db_contents(&db);
    bench_replay(&db, tmp.path().join("out"))?;
    ensure(db_contents(&db) == before, || "toy benchmark changed the database".into())?;

    // A model that only ever emits writes.
    let adv_db = tmp.path().join("adversarial.db");
    let cfg = config(&adv_db, FixtureMode::Live, None);
    let table = {
        let store = tabqa_core::DatasetStore::open(&adv_db).map_err(|e| e.to_string())?;
        store.ingest(toy_csv(), TOY_DATASET).map_err(|e| e.to_string())?.table_name
    };
    let attacks = [
        format!("DELETE FROM {table}"),
        format!("SELECT * FROM {table}; DROP TABLE {table}"),
        format!("WITH d AS (SELECT * FROM {table}) DELETE FROM {table}"),
        format!("SELECT * FROM {table} /* ; */ ; UPDATE {table} SET age = 0"),
        "ATTACH DATABASE 'evil.db' AS evil".to_string(),
        "PRAGMA writable_schema = ON".to_string(),
        format!("SELECT * FROM {table} WHERE city = 'x'; INSERT INTO {table} DEFAULT VALUES; --'"),
        format!("```sql\nDROP TABLE {table};\n```"),
        format!("CREATE TABLE copy AS SELECT * FROM {table}"),
        format!("REPLACE INTO {table} (employee_id) VALUES (1)"),
    ];
    let mut script = ScriptedProvider::new()
        .fallback(TemplateId::SqlRowRetrieval, "DROP TABLE {table}")
        .fallback(TemplateId::SqlValueTargeted, "DELETE FROM {table} WHERE 1 = 1");
    let mut questions = String::new();
    let mut gold = String::new();
    for (i, attack) in attacks.iter().enumerate() {
        let q = format!("Adversarial question number {i}?");
        script = script
            .on(&q, TemplateId::SqlRowRetrieval, [attack.as_str()])
            .on(&q, TemplateId::SqlValueTargeted, [attack.as_str()]);
        questions.push_str(&format!("{{\"id\": \"a{i}\", \"dataset\": \"{TOY_DATASET}\", \"question\": \"{q}\"}}\n"));
        gold.push_str(&format!("{{\"id\": \"a{i}\", \"answer\": 0}}\n"));
    }
    let qpath = tmp.path().join("adv-questions.jsonl");
    let gpath = tmp.path().join("adv-gold.jsonl");
    std::fs::write(&qpath, questions).map_err(|e| e.to_string())?;
    std::fs::write(&gpath, gold).map_err(|e| e.to_string())?;

    let before = db_contents(&adv_db);
    let ws = Workspace::with_provider(cfg, Some(Arc::new(script))).map_err(|e| e.to_string())?;
    let run = run_bench(&ws, &qpath, &gpath, &tmp.path().join("adv-out"), &BenchOptions::default())
        .map_err(|e| e.to_string())?;
    drop(ws);
    ensure(run.summary.tables_unchanged, || "checksums changed during the adversarial run".into())?;
    ensure(db_contents(&adv_db) == before, || "adversarial run changed the database".into())?;
    let executed_writes = run
        .outcomes
        .iter()
        .flat_map(|o| &o.attempts)
        .filter(|a| a.result_total_rows.is_some() && a.sql.as_deref().is_some_and(|s| !s.to_ascii_uppercase().starts_with("SELECT")))
        .count();
    ensure(executed_writes == 0, || format!("{executed_writes} non-SELECT statements executed"))?;
    Ok(Verdict::Pass(format!(
        "toy benchmark and {} write attempts leave every table identical",
        attacks.len() * 2
    )))
}

// ---------------------------------------------------------- live smoke

/// Minimal OpenAI-compatible chat endpoint. SQL prompts get a row-retrieval
/// query, answer prompts get the number of result rows, and verification
/// prompts get ACCEPT. With `fail` every request gets a 500.
fn spawn_stub(fail: bool) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            std::thread::spawn(move || serve(stream, fail));
        }
    });
    format!("http://{addr}/v1")
}

fn serve(stream: TcpStream, fail: bool) {
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(read_half);
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut length = 0;
        let mut authorized = false;
        loop {
            let mut header = String::new();
            if reader.read_line(&mut header).unwrap_or(0) == 0 {
                return;
            }
            if header == "\r\n" {
                break;
            }
            let lower = header.to_ascii_lowercase();
            if let Some(v) = lower.strip_prefix("content-length:") {
                length = v.trim().parse().unwrap_or(0);
            }
            authorized |= lower.starts_with("authorization: bearer ");
        }
        let mut body = vec![0; length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let (status, payload) = if !authorized {
            ("401 Unauthorized", r#"{"error":"missing key"}"#.to_string())
        } else if fail {
            ("500 Internal Server Error", r#"{"error":"stub failure"}"#.to_string())
        } else {
            ("200 OK", stub_completion(&body))
        };
        let response = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
            payload.len()
        );
        if writer.write_all(response.as_bytes()).is_err() {
            return;
        }
    }
}

fn stub_completion(body: &[u8]) -> String {
    let request: Json = serde_json::from_slice(body).unwrap_or_default();
    let prompt = request["messages"]
        .as_array()
        .and_then(|m| m.last())
        .and_then(|m| m["content"].as_str())
        .unwrap_or("")
        .to_string();
    let last = prompt.trim_end().lines().last().unwrap_or("");
    let text = if last.starts_with("SQL:") {
        "SELECT * FROM ds_employees WHERE department = 'Finance'".to_string()
    } else if last.starts_with("Answer:") {
        let lines: Vec<&str> = prompt.lines().collect();
        let start = lines.iter().rposition(|l| l.starts_with("SQL Result:")).unwrap_or(0);
        let end = lines.len() - 1;
        let rows = lines[start + 1..end]
            .iter()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('['))
            .count();
        format!("Answer: {rows}")
    } else {
        "ACCEPT".to_string()
    };
    serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] }).to_string()
}

/// Finance headcount straight from the CSV.
fn finance_count() -> usize {
    let mut reader = csv::Reader::from_path(toy_csv()).unwrap();
    let dept = reader.headers().unwrap().iter().position(|h| h == "department").unwrap();
    reader
        .records()
        .filter(|r| r.as_ref().unwrap().get(dept) == Some("Finance"))
        .count()
}

fn stub_ask(tmp: &Path, base_url: &str, name: &str) -> Output {
    let db = tmp.join(format!("{name}.db"));
    let cfg = tmp.join(format!("{name}.toml"));
    std::fs::write(
        &cfg,
        format!("base_url = \"{base_url}\"\nmax_retries = 0\ntimeout_ms = 5000\ndb_path = \"{name}.db\"\n"),
    )
    .unwrap();
    let o = run(tabqa().arg("--db").arg(&db).arg("ingest").arg(toy_csv()).arg("--id").arg(TOY_DATASET));
    assert!(o.status.success(), "{}", stderr(&o));
    run(tabqa()
        .env("TABQA_API_KEY", "stub-key")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.join(format!("{name}-out")))
        .arg("ask")
        .arg(TOY_DATASET)
        .arg("How many employees work in the Finance department?")
        .arg("--type")
        .arg("number"))
}

fn not_a_crash(o: &Output) -> bool {
    o.status.code().is_some_and(|c| c != 101) && !stderr(o).contains("panicked")
}

fn live_smoke() -> Result<Verdict, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;

    let ok = stub_ask(tmp.path(), &spawn_stub(false), "stub-ok");
    expect_success(&ok, "ask against the stub endpoint")?;
    let answer = stdout(&ok).lines().next().unwrap_or("").to_string();
    ensure(answer == finance_count().to_string(), || {
        format!("stub answer {answer:?}, expected {}", finance_count())
    })?;

    let failing = stub_ask(tmp.path(), &spawn_stub(true), "stub-500");
    ensure(not_a_crash(&failing) && failing.status.code() == Some(4), || {
        format!("failing endpoint: exit {:?}, stderr {}", failing.status.code(), stderr(&failing))
    })?;
    ensure(stderr(&failing).contains("500"), || format!("unclassified error: {}", stderr(&failing)))?;

    // Nothing listens on a port we just released.
    let closed = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}/v1", l.local_addr().unwrap())
    };
    let refused = stub_ask(tmp.path(), &closed, "stub-closed");
    ensure(not_a_crash(&refused) && refused.status.code() == Some(4), || {
        format!("closed port: exit {:?}, stderr {}", refused.status.code(), stderr(&refused))
    })?;
    let local = format!("stub endpoint answered {answer}; HTTP 500 and refused connection exit 4 with a classified error");

    if std::env::var("TABQA_API_KEY").map_or(true, |k| k.trim().is_empty()) {
        return Ok(Verdict::Skip(format!("TABQA_API_KEY not set, live endpoint not contacted ({local})")));
    }
    let db = tmp.path().join("live.db");
    ingest_toy(&db)?;
    let live = run(std::process::Command::new(env!("CARGO_BIN_EXE_tabqa"))
        .arg("--db")
        .arg(&db)
        .arg("--out")
        .arg(tmp.path().join("live-out"))
        .arg("ask")
        .arg(TOY_DATASET)
        .arg("How many employees work in the Finance department?")
        .arg("--type")
        .arg("number"));
    ensure(not_a_crash(&live), || format!("live ask crashed: {}", stderr(&live)))?;
    let detail = match live.status.code() {
        Some(0) => format!("live answer {:?}", stdout(&live).lines().next().unwrap_or("")),
        Some(4) => format!("classified provider error: {}", stderr(&live).trim()),
        other => return Err(format!("live ask exited {other:?}: {}", stderr(&live))),
    };
    Ok(Verdict::Pass(format!("{detail}; {local}")))
}
