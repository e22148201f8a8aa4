//! End-to-end runs of the `unidex` binary on the bundled text fixture.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::OnceLock;

use tempfile::TempDir;
use unidex_core::eval::{mrr_at_k, recall_at_k, RankedQuery};

fn unidex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unidex"))
        .args(args)
        .output()
        .expect("spawn unidex")
}

fn ok(args: &[&str]) -> String {
    let out = unidex(args);
    assert!(
        out.status.success(),
        "unidex {args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

/// Heads and an index trained once and shared by every test in this file.
struct Built {
    _dir: TempDir,
    touch: String,
    rank: String,
    index: String,
}

impl Built {
    fn path(&self, name: &str) -> String {
        Path::new(&self.index).with_file_name(name).to_string_lossy().into_owned()
    }

    fn engine_args(&self) -> Vec<&str> {
        vec!["--index", &self.index, "--touch", &self.touch, "--rank", &self.rank]
    }
}

const SMALL: [&str; 8] = ["--steps", "120", "--d-base", "64", "--dq", "8", "--seed", "1"];

fn built() -> &'static Built {
    static BUILT: OnceLock<Built> = OnceLock::new();
    BUILT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
        let (touch, rank, index) = (p("touch.udxq"), p("rank.udxq"), p("index.udxi"));
        let train = fixture("train.jsonl");
        for (mode, out) in [("touch", &touch), ("rank", &rank)] {
            let mut args = vec!["train", "--data", &train, "--mode", mode, "--out", out];
            args.extend(SMALL);
            ok(&args);
        }
        let corpus = fixture("corpus.jsonl");
        ok(&[
            "build-index",
            "--corpus",
            &corpus,
            "--checkpoint",
            &touch,
            "--rank",
            &rank,
            "--out",
            &index,
        ]);
        Built {
            _dir: dir,
            touch,
            rank,
            index,
        }
    })
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = unidex(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(unidex(&["search", "--bogus"]).status.code(), Some(2));
}

#[test]
fn invalid_config_exits_2_before_reading_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.udxq");
    let out = out.to_str().unwrap();
    let run = |extra: &[&str]| {
        let mut args = vec!["train", "--data", "/nonexistent/train.jsonl", "--mode", "touch", "--out", out];
        args.extend(extra);
        unidex(&args)
    };
    for bad in [&["--dq", "70"][..], &["--k", "1"], &["--tau", "0"], &["--batch-size", "0"], &["--d-base", "4"]] {
        let o = run(bad);
        assert_eq!(o.status.code(), Some(2), "{bad:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    // A valid config with a missing file is an operational failure.
    assert_eq!(run(&[]).status.code(), Some(1));
    assert!(!Path::new(out).exists());
}

#[test]
fn wrong_checkpoint_kind_is_a_config_error() {
    let b = built();
    let out = b.path("wrong.udxi");
    let o = unidex(&[
        "build-index",
        "--corpus",
        &fixture("corpus.jsonl"),
        "--checkpoint",
        &b.rank,
        "--out",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_loss_history() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.udxq");
    let csv = dir.path().join("loss.csv");
    let train = fixture("train.jsonl");
    let mut args = vec![
        "train",
        "--data",
        &train,
        "--mode",
        "touch",
        "--out",
        out.to_str().unwrap(),
        "--loss-csv",
        csv.to_str().unwrap(),
    ];
    args.extend(["--steps", "20", "--d-base", "32", "--dq", "6"]);
    ok(&args);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,total,infonce,match,reg,distill"));
    assert_eq!(lines.count(), 20);
}

#[test]
fn search_prints_sorted_hits() {
    let b = built();
    let mut args = vec!["search", "--query", "tohane rujuto besasa", "--top-k", "7"];
    args.extend(b.engine_args());
    let text = ok(&args);
    let hits: Vec<(String, f64)> = text
        .lines()
        .map(|l| {
            let (id, score) = l.split_once('\t').expect("id<TAB>score");
            (id.to_string(), score.parse().unwrap())
        })
        .collect();
    assert!(!hits.is_empty() && hits.len() <= 7);
    for w in hits.windows(2) {
        assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0), "{w:?}");
    }

    args.push("--json");
    let json: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    let ids: Vec<&str> = json["hits"].as_array().unwrap().iter().map(|h| h["id"].as_str().unwrap()).collect();
    assert_eq!(ids, hits.iter().map(|h| h.0.as_str()).collect::<Vec<_>>());
    assert!(json["touched"].as_u64().unwrap() >= hits.len() as u64);
}

#[test]
fn max_candidates_truncates() {
    let b = built();
    let mut args = vec!["search", "--json", "--query", "tohane rujuto besasa", "--max-candidates", "1"];
    args.extend(b.engine_args());
    let json: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    assert!(json["hits"].as_array().unwrap().len() <= 1);
    assert_eq!(json["truncated"], json["touched"].as_u64().unwrap() > 1);
}

#[test]
fn evaluate_report_matches_dumped_rankings() {
    let b = built();
    let (csv, dump) = (b.path("eval.csv"), b.path("rankings.jsonl"));
    let test = fixture("test.jsonl");
    let mut args = vec!["evaluate", "--test", &test, "--k", "1,10", "--out", &csv, "--rankings", &dump];
    args.extend(b.engine_args());
    ok(&args);

    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("query_count,avg_retrieved,recall@1,recall@10,mrr@1,mrr@10"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();

    // Recompute every column from the dumped rankings.
    let rankings: Vec<RankedQuery> = std::fs::read_to_string(&dump)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rankings.len(), 32);
    let n = rankings.len() as f64;
    let mean = |f: &dyn Fn(&RankedQuery) -> f64| rankings.iter().map(f).sum::<f64>() / n;
    let rel = |r: &RankedQuery| r.relevant_ids.iter().cloned().collect::<HashSet<_>>();
    let expected = [
        n,
        mean(&|r| r.retrieved as f64),
        mean(&|r| recall_at_k(&r.ranked_ids, &rel(r), 1).unwrap()),
        mean(&|r| recall_at_k(&r.ranked_ids, &rel(r), 10).unwrap()),
        mean(&|r| mrr_at_k(&r.ranked_ids, &rel(r), 1).unwrap()),
        mean(&|r| mrr_at_k(&r.ranked_ids, &rel(r), 10).unwrap()),
    ];
    for (got, want) in row.iter().zip(expected) {
        assert!((got - want).abs() < 1e-12, "{row:?} vs {expected:?}");
    }
}

#[test]
fn index_stats_reports_query_log() {
    let b = built();
    let text = ok(&["index-stats", "--index", &b.index, "--query-log", &fixture("corpus.jsonl"), "--checkpoint", &b.touch]);
    let stats: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(stats["num_docs"], 160);
    // Every document retrieves at least itself.
    assert!(stats["avg_retrieved_per_query"].as_f64().unwrap() >= 1.0);
    let plain: serde_json::Value = serde_json::from_str(&ok(&["index-stats", "--index", &b.index])).unwrap();
    assert_eq!(plain["total_postings"], stats["total_postings"]);
}

#[test]
fn index_from_exported_embeddings_is_identical() {
    let b = built();
    let (emb, ix) = (b.path("docs.udxe"), b.path("from-emb.udxi"));
    let corpus = fixture("corpus.jsonl");
    ok(&["export-embeddings", "--corpus", &corpus, "--checkpoint", &b.touch, "--role", "document", "--out", &emb]);
    ok(&["build-index", "--embeddings", &emb, "--checkpoint", &b.touch, "--out", &ix]);
    let direct = b.path("direct.udxi");
    ok(&["build-index", "--corpus", &corpus, "--checkpoint", &b.touch, "--out", &direct]);
    assert_eq!(std::fs::read(&ix).unwrap(), std::fs::read(&direct).unwrap());

    let bad = unidex(&["export-embeddings", "--corpus", &corpus, "--checkpoint", &b.touch, "--role", "rank-document", "--out", &emb]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn index_from_another_head_is_rejected() {
    let b = built();
    let other = b.path("other.udxq");
    let train = fixture("train.jsonl");
    let mut args = vec!["train", "--data", &train, "--mode", "touch", "--out", &other];
    args.extend(["--steps", "5", "--d-base", "64", "--dq", "8", "--seed", "2"]);
    ok(&args);
    let o = unidex(&["search", "--index", &b.index, "--touch", &other, "--rank", &b.rank, "--query", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
}

#[test]
fn ablate_writes_one_row_per_setting_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate.csv");
    ok(&[
        "ablate",
        "--axis",
        "sid-count-doc",
        "--values",
        "4,8",
        "--seeds",
        "1,2",
        "--steps",
        "5",
        "--rank-steps",
        "5",
        "--clusters",
        "3",
        "--topics-per-cluster",
        "2",
        "--docs-per-topic",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("sid-count-doc,4,1,"));
    assert!(rows[3].starts_with("sid-count-doc,8,2,"));
    let bad = unidex(&["ablate", "--axis", "nope", "--values", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(b: &Built) -> Server {
    let mut args = vec!["serve", "--bind", "127.0.0.1:0"];
    args.extend(b.engine_args());
    let mut child = Command::new(env!("CARGO_BIN_EXE_unidex"))
        .args(&args)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("service exited").unwrap();
        if let Some(a) = line.strip_prefix("listening on ") {
            break a.to_string();
        }
    };
    std::thread::spawn(move || lines.for_each(drop));
    Server { child, addr }
}

fn request(addr: &str, head: &str, body: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "{head} HTTP/1.1\r\nHost: x\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let (status_line, rest) = raw.split_once("\r\n\r\n").unwrap();
    let status = status_line.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, rest.to_string())
}

#[test]
fn service_endpoints_and_rejections() {
    let b = built();
    let server = serve(b);
    let addr = server.addr.as_str();
    assert_eq!(request(addr, "GET /healthz", ""), (200, "ok".to_string()));

    let (status, body) = request(addr, "GET /v1/stats", "");
    assert_eq!(status, 200);
    let stats: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(stats["num_docs"], 160);

    for bad in ["", "not json", "{\"query\": 3}", "{\"top_k\": 5}", "{\"query\": \"x\", \"top_k\": 0}", "{\"query\": \"x\", \"extra\": 1}"] {
        let (status, body) = request(addr, "POST /v1/search", bad);
        assert_eq!(status, 400, "{bad:?} -> {body}");
        assert!(serde_json::from_str::<serde_json::Value>(&body).unwrap()["error"].is_string());
    }

    let (status, body) = request(addr, "POST /v1/search", "{\"query\": \"tohane rujuto besasa\", \"top_k\": 3}");
    assert_eq!(status, 200);
    let reply: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert!(reply["hits"].as_array().unwrap().len() <= 3);
    assert!(reply["latency_ms"].as_f64().unwrap() >= 0.0);

    assert_eq!(request(addr, "GET /v1/nothing", "").0, 404);
}

#[test]
fn rank_sidecar_defaults_next_to_index() {
    let b = built();
    let mut sidecar = PathBuf::from(&b.index).into_os_string();
    sidecar.push(".rank.udxe");
    assert!(Path::new(&sidecar).exists());
    let mut args = vec!["search", "--query", "x", "--rank-embeddings", "/nonexistent.udxe"];
    args.extend(b.engine_args());
    assert_eq!(unidex(&args).status.code(), Some(1));
}
