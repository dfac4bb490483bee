//! Emitted SQL is locked against files under `tests/golden/`. Set
//! `UPDATE_GOLDEN=1` to rewrite them after an intentional format change.

use cjt_core::engine::oracle_execute;
use cjt_core::sqlgen::script;
use cjt_sqlshim::golden::{cases, golden_dir, plan_case};
use cjt_sqlshim::Database;

#[test]
fn emitted_sql_matches_golden_files() {
    let dir = golden_dir();
    let cases = cases().unwrap();
    assert_eq!(cases.len(), 8);
    for (name, actual) in cases {
        let path = dir.join(name);
        if std::env::var_os("UPDATE_GOLDEN").is_some() || !path.exists() {
            std::fs::write(&path, &actual).unwrap();
        }
        let expected = std::fs::read_to_string(&path).unwrap();
        assert_eq!(actual, expected, "golden file {name} differs");
    }
}

#[test]
fn golden_plan_runs_and_agrees() {
    let (g, next, stmts) = plan_case().unwrap();
    assert_eq!(stmts.len(), 3);
    let mut db = Database::from_graph(&g).unwrap();
    let t = db.run_script(&script(&stmts)).unwrap().unwrap();
    let got = t.to_relation(next.aggregate.kind()).unwrap();
    assert_eq!(got, oracle_execute(&g, &next, 1 << 20).unwrap());
}
