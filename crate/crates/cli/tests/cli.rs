use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fx(rel: &str) -> String {
    root().join("fixtures").join(rel).display().to_string()
}

fn sinklab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sinklab"))
        .args(args)
        .env_remove("SINKLAB_API_KEY")
        .env_remove("SINKLAB_ENDPOINT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn tokenize_text_and_json() {
    let o = sinklab(&["tokenize", &fx("seeded/stray_at.v")]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("corrupt\t@@@\t5:19"));
    let o = sinklab(&["--emit", "json", "tokenize", &fx("seeded/stray_at.v")]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.as_array().unwrap().len() > 5);
}

#[test]
fn score_identical_is_perfect() {
    let o = sinklab(&["--emit", "csv", "score", "--ref", &fx("clean"), "--gen", &fx("clean")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("ref_tokens,fix_cost,success_pct,correct_pct"));
    assert!(lines.next().unwrap().ends_with(",0,100.0000,100.0000"));
}

#[test]
fn score_json_has_modules() {
    let o = sinklab(&[
        "--emit",
        "json",
        "score",
        "--ref",
        &fx("clean/instruction_decoder.v"),
        "--gen",
        &fx("listings/listing5_size_mismatch.v"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["modules"][0]["name"], "instruction_decoder");
    assert!(v["total"]["fix_cost"].as_u64().unwrap() >= 1);
}

#[test]
fn lint_json_fields() {
    let o = sinklab(&["--emit", "json", "lint", &fx("seeded/unused_carry.v")]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let f = &v[0];
    assert_eq!(f["rule"], "redundant-decl");
    assert_eq!(f["severity"], "warning");
    assert_eq!(f["line"], 6);
    assert!(f["col"].is_u64());
    assert!(f["message"].as_str().unwrap().contains("carry"));
}

#[test]
fn lint_clean_directory() {
    let o = sinklab(&["lint", &fx("clean")]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("0 finding(s)"));
}

#[test]
fn prompt_render_and_validation_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.txt");
    let o = sinklab(&["prompt", "render", "--spec", &fx("prompts/npu_spec.json"), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&out).unwrap().starts_with("Design and implement these modules"));

    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"header": "h", "modules": [{"name": "m", "explanation": "e", "ports": ["output logic [WIDTH-1:0 result"]}]}"#,
    )
    .unwrap();
    let o = sinklab(&["prompt", "render", "--spec", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("output logic [WIDTH-1:0 result"));
}

#[test]
fn missing_file_is_exit_2() {
    let o = sinklab(&["lint", "/definitely/not/here.v"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn replay_and_truncation() {
    let o = sinklab(&["replay", &fx("transcripts/sink.json")]);
    assert!(o.status.success());
    let t: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx("transcripts/sink.json")).unwrap()).unwrap();
    assert_eq!(o.stdout, t["completion"].as_str().unwrap().as_bytes());

    let dir = tempfile::tempdir().unwrap();
    let full = std::fs::read(fx("transcripts/sink.json")).unwrap();
    let cut = dir.path().join("cut.json");
    std::fs::write(&cut, &full[..1000]).unwrap();
    let o = sinklab(&["replay", cut.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("at byte 1000"), "{}", stderr(&o));
}

#[test]
fn llm_run_needs_credential() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    let o = sinklab(&[
        "llm",
        "run",
        "--endpoint",
        "http://127.0.0.1:9/v1/chat/completions",
        "--prompt-file",
        &fx("prompts/npu_spec.json"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("SINKLAB_API_KEY"));
    assert!(!out.exists());
}

/// Serves the given responses, one connection each, and returns the requests.
fn serve(script: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let h = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in script {
            let (mut s, _) = listener.accept().unwrap();
            let mut r = BufReader::new(s.try_clone().unwrap());
            let mut req = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                r.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                req.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut b = vec![0; len];
            r.read_exact(&mut b).unwrap();
            req.push_str(&String::from_utf8_lossy(&b));
            seen.push(req);
            write!(
                s,
                "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        seen
    });
    (url, h)
}

#[test]
fn llm_run_against_mock_with_retry() {
    let body = serde_json::json!({"choices": [{"message": {"content": "```verilog\nmodule m; endmodule\n```"}}]}).to_string();
    let (url, h) = serve(vec![(500, "down".into()), (200, body)]);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    let o = Command::new(env!("CARGO_BIN_EXE_sinklab"))
        .args([
            "llm",
            "run",
            "--spec",
            &fx("prompts/npu_spec.json"),
            "--out",
            out.to_str().unwrap(),
            "--policy",
            "sink:4,2044",
            "--retry-base",
            "0.01",
        ])
        .env("SINKLAB_API_KEY", "sk-test-secret")
        .env("SINKLAB_ENDPOINT", &url)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let reqs = h.join().unwrap();
    assert_eq!(reqs.len(), 2);
    assert!(reqs[1].contains("Design and implement these modules"));
    let saved = std::fs::read_to_string(&out).unwrap();
    assert!(!saved.contains("sk-test-secret"));
    let t: serde_json::Value = serde_json::from_str(&saved).unwrap();
    assert_eq!(t["attempts"], 2);
    assert_eq!(t["policy"], "sink:4,2044");
    assert_eq!(t["format_version"], 1);
}

#[test]
fn llm_run_unreachable_is_exit_2() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sinklab"))
        .args([
            "llm",
            "run",
            "--prompt-file",
            &fx("prompts/npu_spec.json"),
            "--out",
            dir.path().join("t.json").to_str().unwrap(),
            "--endpoint",
            &format!("http://127.0.0.1:{port}/x"),
            "--retry-base",
            "0",
        ])
        .env("SINKLAB_API_KEY", "k")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn report_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("r.csv");
    let args = |csv: &str| {
        vec![
            "report".to_string(),
            "--ref".into(),
            fx("clean"),
            "--transcript".into(),
            fx("transcripts/sink.json"),
            fx("transcripts/window.json"),
            "--out-csv".into(),
            csv.to_string(),
        ]
    };
    let a: Vec<String> = args(csv_path.to_str().unwrap());
    let o1 = sinklab(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o1.status.success(), "{}", stderr(&o1));
    let first = std::fs::read_to_string(&csv_path).unwrap();
    let o2 = sinklab(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o1.stdout, o2.stdout);
    assert_eq!(first, std::fs::read_to_string(&csv_path).unwrap());
    let mut rdr = csv::Reader::from_reader(first.as_bytes());
    assert_eq!(rdr.records().count(), 2);
}

#[test]
fn label_count_must_match() {
    let o = sinklab(&[
        "report",
        "--ref",
        &fx("clean"),
        "--transcript",
        &fx("transcripts/sink.json"),
        "--label",
        "a",
        "--label",
        "b",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_gen_ppl_small() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.tlm");
    let m = model.to_str().unwrap();
    let corpus = fx("corpus/king_lear.txt");
    let o = sinklab(&[
        "train", "--corpus", &corpus, "--out", m, "--layers", "1", "--d-model", "16", "--d-ff", "32", "--ctx",
        "16", "--steps", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tr = dir.path().join("g.json");
    let o = sinklab(&[
        "--emit",
        "json",
        "gen",
        "--model",
        m,
        "--prompt",
        "KING LEAR",
        "--policy",
        "sink:2,8",
        "--max-new",
        "20",
        "--transcript",
        tr.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["tokens"].as_array().unwrap().len(), 20);
    assert_eq!(v["retained_positions"].as_array().unwrap().len(), 10);
    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&tr).unwrap()).unwrap();
    assert_eq!(t["endpoint"], "local");

    let o = sinklab(&[
        "--emit", "csv", "ppl", "--model", m, "--text", &corpus, "--holdout", "300", "--recompute", "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 5);
    assert!(text.contains("\"sink:4,60\","));
    assert!(text.contains("recompute:16,"));

    // prompt longer than a sink cache
    let o = sinklab(&["gen", "--model", m, "--prompt", "KING LEAR", "--policy", "sink:prompt,4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = sinklab(&["gen", "--model", m, "--prompt", "KING LEAR", "--policy", "sink:2,2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sink"));
}
