use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Stdio};

use serde_json::Value;

fn cjt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cjt"))
}

fn stdout_json(out: &std::process::Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_error(out: &std::process::Output) -> (String, String) {
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    (v["error"]["code"].as_str().unwrap().to_string(), v["error"]["message"].as_str().unwrap().to_string())
}

#[test]
fn bench_chain_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = cjt()
        .args(["bench", "chain", "--r", "8", "--f", "10", "--d", "10", "--oracle-cap", "20000", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    let summary = stdout_json(&out);
    assert_eq!(summary["records"], 7);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("chain.json")).unwrap()).unwrap();
    assert_eq!(doc["suite"], "chain");
    assert_eq!(doc["params"]["r"], 8);
    let records = doc["records"].as_array().unwrap();
    assert_eq!(records.len(), 7);
    for (i, r) in records.iter().enumerate() {
        let o = r.as_object().unwrap();
        for k in ["r", "f", "d", "n", "factorized_max_rows", "factorized_messages"] {
            assert!(o[k].is_u64(), "{k} in {r}");
        }
        for k in ["naive_rows", "count", "ratio", "factorized_ms"] {
            assert!(o[k].is_f64(), "{k} in {r}");
        }
        assert!(o["naive_rows_measured"].is_u64() || o["naive_rows_measured"].is_null());
        assert_eq!(o["r"], i + 2);
        assert_eq!(o["count"], o["naive_rows"]);
    }
    assert!(records[1]["naive_rows_measured"].is_u64());
    assert!(records[6]["naive_rows_measured"].is_null());
    let csv = std::fs::read_to_string(dir.path().join("chain.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.starts_with("r,f,d,n,naive_rows,"));
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn load_reports_missing_csv() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("R.csv"), "A,B\na1,b1\n");
    write(
        &dir.path().join("graph.json"),
        r#"{"relations":[
            {"name":"R","csv":"R.csv","schema":{"attributes":[{"name":"A"},{"name":"B"}]}},
            {"name":"S","csv":"nowhere/S.csv","schema":{"attributes":[{"name":"B"},{"name":"C"}]}}]}"#,
    );
    let out = cjt().arg("load").arg(dir.path().join("graph.json")).output().unwrap();
    let (code, message) = stderr_error(&out);
    assert_eq!(code, "io_error");
    assert!(message.contains("nowhere/S.csv"), "{message}");

    write(&dir.path().join("S.csv"), "B,C\nb1,c1\nb1,c2\n");
    let fixed = std::fs::read_to_string(dir.path().join("graph.json")).unwrap().replace("nowhere/", "");
    write(&dir.path().join("graph.json"), &fixed);
    let v = stdout_json(&cjt().arg("load").arg(dir.path().join("graph.json")).output().unwrap());
    assert_eq!(v["relations"].as_array().unwrap().len(), 2);
    assert_eq!(v["edges"].as_array().unwrap().len(), 1);
}

#[test]
fn usage_errors_are_json() {
    let (code, _) = stderr_error(&cjt().args(["bench", "chain", "--r", "many"]).output().unwrap());
    assert_eq!(code, "usage");
    let (code, _) = stderr_error(&cjt().args(["bench", "chain", "--r-min", "1", "--out", "/tmp/unused"]).output().unwrap());
    assert_eq!(code, "invalid_parameter");
    assert!(cjt().arg("--help").output().unwrap().status.success());
}

#[test]
fn gen_load_sqlgen_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let v = stdout_json(&cjt().args(["gen", "--r", "3", "--f", "2", "--d", "3", "--out"]).arg(&data).output().unwrap());
    assert_eq!(v["relations"].as_array().unwrap().len(), 3);
    let graph = data.join("graph.json");
    let loaded = stdout_json(&cjt().arg("load").arg(&graph).output().unwrap());
    assert_eq!(loaded["bags"].as_array().unwrap().len(), 3);

    write(&dir.path().join("prev.json"), r#"{"group_by":["A1"]}"#);
    write(&dir.path().join("next.json"), r#"{"group_by":["A1"],"filters":[{"attr":"A4","op":"=","value":"1"}]}"#);
    let sql = dir.path().join("sql");
    let out = cjt()
        .arg("sqlgen")
        .arg("--graph")
        .arg(&graph)
        .arg("--query")
        .arg(dir.path().join("next.json"))
        .arg("--prev")
        .arg(dir.path().join("prev.json"))
        .args(["--prefix", "cache_", "--out"])
        .arg(&sql)
        .output()
        .unwrap();
    assert_eq!(stdout_json(&out)["files"].as_array().unwrap().len(), 4);
    for f in ["naive.sql", "upward.sql", "calibration.sql", "plan.sql"] {
        let text = std::fs::read_to_string(sql.join(f)).unwrap();
        assert!(text.ends_with(";\n"), "{f}");
    }
    let plan = std::fs::read_to_string(sql.join("plan.sql")).unwrap();
    assert!(plan.contains("cache_"));
    let calibration = std::fs::read_to_string(sql.join("calibration.sql")).unwrap();
    assert_eq!(calibration.matches("CREATE TABLE").count(), 4);

    let (code, _) = stderr_error(
        &cjt().arg("sqlgen").arg("--graph").arg(&graph).arg("--query").arg(dir.path().join("next.json")).args(["--prefix", "bad prefix", "--out"]).arg(&sql).output().unwrap(),
    );
    assert_eq!(code, "invalid_parameter");
}

#[test]
fn budget_report_plots_as_steps() {
    let dir = tempfile::tempdir().unwrap();
    stdout_json(&cjt().args(["bench", "budget", "--r", "6", "--out"]).arg(dir.path()).output().unwrap());
    let svg = dir.path().join("budget.svg");
    let v = stdout_json(&cjt().arg("plot").arg(dir.path().join("budget.json")).arg("--out").arg(&svg).output().unwrap());
    assert_eq!(v["points"], 11);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.contains("steelblue"));
    let (code, _) = stderr_error(&cjt().arg("plot").arg(dir.path().join("budget.json")).args(["--y", "nope", "--out"]).arg(&svg).output().unwrap());
    assert_eq!(code, "invalid_parameter");
}

#[test]
fn serve_on_ephemeral_port() {
    let mut child = cjt().args(["serve", "--port", "0"]).stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
    let v: Value = serde_json::from_str(&line).unwrap();
    let port = v["port"].as_u64().unwrap();
    assert_ne!(port, 0);
    let mut s = TcpStream::connect(("127.0.0.1", port as u16)).unwrap();
    s.write_all(b"POST /sessions HTTP/1.1\r\nHost: x\r\nContent-Length: 0\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("session_id"));
}
