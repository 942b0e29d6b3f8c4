//! The review API over a real socket.

use std::path::PathBuf;
use std::sync::Arc;

use relqa_core::bench::{save_pool, BenchmarkCandidate, GtLabel, Subset};
use relqa_core::review::ReviewStatus;
use relqa_review::{serve_on, AppState, ServiceConfig};
use serde_json::{json, Value};

struct Server {
    base: String,
    agent: ureq::Agent,
    _dir: tempfile::TempDir,
    dir: PathBuf,
}

fn pool() -> Vec<BenchmarkCandidate> {
    let mut out = Vec::new();
    for (subset, n) in [
        (Subset::Positive, 20),
        (Subset::Category, 12),
        (Subset::Attribute, 12),
        (Subset::Relation, 12),
        (Subset::Unclassified, 4),
    ] {
        for i in 0..n {
            out.push(BenchmarkCandidate {
                candidate_id: format!("{subset}-{i:02}"),
                image_id: format!("img_{:04}", i % 12 + 1),
                question: format!("Question {i} about {subset}?"),
                answer: if subset == Subset::Positive { "Yes.".into() } else { "No.".into() },
                gt_label: if subset == Subset::Positive { GtLabel::Yes } else { GtLabel::No },
                proposed_subset: subset,
                review_status: ReviewStatus::Pending,
            });
        }
    }
    out
}

fn start() -> Server {
    let dir = tempfile::tempdir().unwrap();
    let pool_path = dir.path().join("pool.jsonl");
    save_pool(&pool_path, &pool()).unwrap();
    let cfg = ServiceConfig {
        pool_path,
        images_root: PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/images"),
        benchmark_path: dir.path().join("bench.jsonl"),
        bench_name: "bench".into(),
        cors_origin: None,
    };
    let state = Arc::new(AppState::open(cfg).unwrap());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            serve_on(listener, state).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    Server {
        base: format!("http://{addr}"),
        agent,
        dir: dir.path().to_path_buf(),
        _dir: dir,
    }
}

impl Server {
    fn get(&self, path: &str) -> (u16, Value) {
        let mut r = self.agent.get(&format!("{}{path}", self.base)).call().unwrap();
        let status = r.status().as_u16();
        (status, serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap())
    }

    fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let mut r = self
            .agent
            .post(&format!("{}{path}", self.base))
            .header("Content-Type", "application/json")
            .send(body.to_string())
            .unwrap();
        let status = r.status().as_u16();
        (status, serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap())
    }

    fn decide(&self, id: &str, action: &str) -> (u16, Value) {
        self.post("/decisions", json!({"candidate_id": id, "action": action, "reviewer": "t"}))
    }
}

#[test]
fn subsets_and_pages() {
    let s = start();
    assert_eq!(
        s.get("/subsets").1,
        json!(["positive", "category", "attribute", "relation", "unclassified"])
    );
    let (status, page) = s.get("/subsets/category/candidates?offset=0&limit=50");
    assert_eq!(status, 200);
    assert_eq!(page["total"], 12);
    let cands = page["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 12);
    assert_eq!(cands[0]["image_url"], "/images/img_0001");
    assert_eq!(cands[0]["status"], "pending");
    let (_, page) = s.get("/subsets/positive/candidates?offset=15&limit=10");
    assert_eq!(page["candidates"].as_array().unwrap().len(), 5);
    assert_eq!(s.get("/subsets/bogus/candidates").0, 404);
}

#[test]
fn decisions_are_idempotent_and_last_write_wins() {
    let s = start();
    let (status, first) = s.decide("category-00", "reject");
    assert_eq!(status, 200);
    assert_eq!(first, json!({"candidate_id": "category-00", "status": "rejected", "changed": true}));
    let (_, second) = s.decide("category-00", "reject");
    assert_eq!(second["changed"], false);
    assert_eq!(second["status"], "rejected");

    let (_, page) = s.get("/subsets/category/candidates");
    assert_eq!(page["total"], 11);
    let (_, page) = s.get("/subsets/category/candidates?include_rejected=true");
    assert_eq!(page["total"], 12);

    s.decide("category-01", "keep");
    s.decide("category-01", "reject");
    let (_, p) = s.get("/progress");
    assert_eq!(p["category"], json!({"total": 12, "kept": 0, "rejected": 2, "pending": 10}));

    let log = std::fs::read_to_string(s.dir.join("pool.decisions.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let (status, body) = s.decide("nope", "keep");
    assert_eq!(status, 404);
    assert_eq!(body["error"], "unknown_candidate");
    assert_eq!(std::fs::read_to_string(s.dir.join("pool.decisions.jsonl")).unwrap(), log);
}

#[test]
fn finalize_gates_on_kept_counts() {
    let s = start();
    let (status, body) = s.post("/finalize", json!({"n_per_subset": 5, "n_positive": 15, "seed": 7}));
    assert_eq!(status, 409);
    assert_eq!(body["error"], "insufficient_pool");
    assert_eq!(body["have"], 0);

    for (subset, n) in [("positive", 20), ("category", 12), ("attribute", 12), ("relation", 12)] {
        for i in 0..n {
            s.decide(&format!("{subset}-{i:02}"), if i < 2 { "reject" } else { "keep" });
        }
    }
    let (status, body) = s.post("/finalize", json!({"n_per_subset": 5, "n_positive": 15, "seed": 7}));
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["items"], 30);
    let text = std::fs::read_to_string(body["path"].as_str().unwrap()).unwrap();
    let ids: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["item_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids.len(), 30);
    assert!(ids.iter().all(|id| !id.ends_with("-00") && !id.ends_with("-01")));
}

#[test]
fn images_and_placeholders() {
    let s = start();
    let r = s.agent.get(&format!("{}/images/img_0001", s.base)).call().unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(r.headers()["content-type"], "image/png");
    assert!(r.headers().get("x-placeholder").is_none());
    let r = s.agent.get(&format!("{}/images/img_0012", s.base)).call().unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(r.headers()["x-placeholder"], "true");
    let r = s.agent.get(&format!("{}/images/..%2F..%2FCargo.toml", s.base)).call().unwrap();
    assert_eq!(r.headers()["x-placeholder"], "true");
}

#[test]
fn cors_header_present() {
    let s = start();
    let r = s
        .agent
        .get(&format!("{}/progress", s.base))
        .header("Origin", "http://localhost:5173")
        .call()
        .unwrap();
    assert_eq!(r.headers()["access-control-allow-origin"], "*");
}

#[test]
fn concurrent_decisions_write_whole_lines() {
    let s = Arc::new(start());
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let s = Arc::clone(&s);
            std::thread::spawn(move || {
                for i in 0..50 {
                    let id = format!("positive-{:02}", (t * 50 + i) % 20);
                    let (status, _) = s.decide(&id, if (t + i) % 2 == 0 { "keep" } else { "reject" });
                    assert_eq!(status, 200);
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let log = std::fs::read_to_string(s.dir.join("pool.decisions.jsonl")).unwrap();
    for line in log.lines() {
        serde_json::from_str::<Value>(line).expect("whole line");
    }
    let (_, p) = s.get("/progress");
    let pos = &p["positive"];
    assert_eq!(pos["total"], 20);
    assert_eq!(
        pos["kept"].as_u64().unwrap() + pos["rejected"].as_u64().unwrap() + pos["pending"].as_u64().unwrap(),
        20
    );
}
