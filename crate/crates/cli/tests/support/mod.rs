//! Shared by the integration tests: the toy suite's paths and the scripted
//! provider its fixtures were recorded from.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tabqa_core::config::RunConfig;
use tabqa_core::llm::{FixtureMode, ScriptedProvider, TemplateId};

pub const TOY_DATASET: &str = "employees";

pub fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join("toy")
}

pub fn toy_csv() -> PathBuf {
    toy_dir().join("employees.csv")
}

pub fn toy_questions() -> PathBuf {
    toy_dir().join("questions.jsonl")
}

pub fn toy_gold() -> PathBuf {
    toy_dir().join("gold.jsonl")
}

pub fn toy_fixtures() -> PathBuf {
    toy_dir().join("fixtures")
}

pub fn tabqa() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tabqa"));
    cmd.env_remove("TABQA_API_KEY").env("RUST_LOG", "warn");
    cmd
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn tabqa")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn config(db: &Path, mode: FixtureMode, fixtures: Option<&Path>) -> RunConfig {
    RunConfig {
        db_path: db.to_path_buf(),
        mode,
        fixture_dir: fixtures.map(Path::to_path_buf),
        ..RunConfig::default()
    }
}

const Q01: &str = "Is there any employee in the Finance department who works remotely?";
const Q02: &str = "What is the average salary of employees in the Engineering department?";
const Q03: &str = "Which city does the employee with the highest rating live in?";
const Q04: &str = "What are the names of the three employees with the highest salaries, highest first?";
const Q05: &str = "What are the ages of the employees in the Sales department, from youngest to oldest?";
const Q06: &str = "How many employees were hired before 2015?";
const Q07: &str = "Are all employees in the Marketing department older than 30?";
const Q08: &str = "Which city has the most employees?";
const Q09: &str = "Which employees in the Support department have a rating of at least 4.0?";
const Q10: &str = "What is the total salary of remote employees hired after 2018?";

/// Model behaviour behind the toy fixtures.
///
/// q01-q07 pass on the first attempt. q08's first query names a column the
/// table does not have, so it recovers on the value-targeted attempt. q09's
/// first answer lists cities and the verifier rejects it as irrelevant; the
/// second attempt recovers. q10 fails twice: a prose answer first, then a
/// count the verifier rejects.
pub fn toy_script() -> ScriptedProvider {
    use TemplateId::*;
    ScriptedProvider::new()
        .on(Q01, SqlRowRetrieval, ["SELECT * FROM ds_employees WHERE department = 'Finance' AND remote = 1"])
        .on(Q01, FinalAnswer, ["True"])
        .on(Q01, Verification, ["ACCEPT"])
        .on(Q02, SqlRowRetrieval, ["```sql\nSELECT * FROM ds_employees WHERE department = 'Engineering';\n```"])
        .on(Q02, FinalAnswer, ["88150.46"])
        .on(Q02, Verification, ["ACCEPT"])
        .on(Q03, SqlRowRetrieval, ["SELECT * FROM ds_employees ORDER BY rating DESC LIMIT 1"])
        .on(Q03, FinalAnswer, ["Austin"])
        .on(Q03, Verification, ["The answer is a single city name, which fits the question."])
        .on(Q04, SqlRowRetrieval, ["SELECT * FROM ds_employees ORDER BY salary DESC LIMIT 3"])
        .on(Q04, FinalAnswer, ["['Umar Farouk', 'Bea Moreau', 'Pavel Horak']"])
        .on(Q04, Verification, ["ACCEPT"])
        .on(Q05, SqlRowRetrieval, ["SELECT * FROM ds_employees WHERE department = 'Sales' ORDER BY age"])
        .on(Q05, FinalAnswer, ["[41, 46, 46, 54, 57, 59]"])
        .on(Q05, Verification, ["ACCEPT"])
        .on(Q06, SqlRowRetrieval, ["SELECT * FROM ds_employees WHERE hire_date < '2015-01-01'"])
        .on(
            Q06,
            FinalAnswer,
            ["The rows are the employees hired before 2015-01-01.\nCounting them gives 17.\nAnswer: 17"],
        )
        .on(Q06, Verification, ["ACCEPT"])
        .on(Q07, SqlRowRetrieval, ["SELECT * FROM ds_employees WHERE department = 'Marketing' AND age <= 30"])
        .on(Q07, FinalAnswer, ["False"])
        .on(Q07, Verification, ["ACCEPT"])
        .on(
            Q08,
            SqlRowRetrieval,
            ["SELECT * FROM ds_employees WHERE office_city = (SELECT office_city FROM ds_employees GROUP BY office_city ORDER BY COUNT(*) DESC LIMIT 1)"],
        )
        .on(
            Q08,
            SqlValueTargeted,
            ["SELECT city, COUNT(*) AS employees FROM ds_employees GROUP BY city ORDER BY employees DESC LIMIT 1"],
        )
        .on(Q08, FinalAnswer, ["Austin"])
        .on(Q08, Verification, ["ACCEPT"])
        .on(Q09, SqlRowRetrieval, ["SELECT * FROM ds_employees WHERE department = 'Support' AND rating >= 4.0"])
        .on(
            Q09,
            SqlValueTargeted,
            ["SELECT \"Full_Name\" FROM ds_employees WHERE department = 'Support' AND rating >= 4.0 ORDER BY employee_id"],
        )
        .on(
            Q09,
            FinalAnswer,
            ["['Toronto', 'Toronto', 'Berlin']", "['Jonas Berg', 'Olga Novak', 'Tara Reid']"],
        )
        .on(
            Q09,
            Verification,
            ["REJECT: irrelevant the answer lists cities but the question asks which employees", "ACCEPT"],
        )
        .on(Q10, SqlRowRetrieval, ["SELECT * FROM ds_employees WHERE remote = 1 AND hire_date > '2018-12-31'"])
        .on(
            Q10,
            SqlValueTargeted,
            ["SELECT COUNT(*) FROM ds_employees WHERE remote = 1 AND hire_date > '2018-12-31'"],
        )
        .on(Q10, FinalAnswer, ["I could not find a total salary column in these rows.", "3"])
        .on(
            Q10,
            Verification,
            ["REJECT: irrelevant the answer counts employees instead of summing their salaries"],
        )
}

/// Write a CSV with `rows` rows of mixed column types.
pub fn write_wide_csv(path: &Path, rows: usize) {
    let mut body = String::from("id,label,score,active,day\n");
    for i in 0..rows {
        body.push_str(&format!(
            "{i},item {i},{}.5,{},2024-01-{:02}\n",
            i * 3 % 17,
            i % 2 == 0,
            i % 28 + 1
        ));
    }
    std::fs::write(path, body).unwrap();
}
