use std::net::SocketAddr;
use std::time::Duration;

use serde_json::{json, Value};

async fn start() -> String {
    let (addr, _) = droplab_service::spawn(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    format!("http://{addr}")
}

async fn finished(http: &reqwest::Client, base: &str, id: &str) -> Value {
    for _ in 0..600 {
        let rec: Value = http.get(format!("{base}/v1/jobs/{id}")).send().await.unwrap().json().await.unwrap();
        if rec["state"] == "succeeded" || rec["state"] == "failed" {
            return rec;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {id} did not finish");
}

#[tokio::test]
async fn health_reports_ok() {
    let base = start().await;
    let v: Value = reqwest::get(format!("{base}/health")).await.unwrap().json().await.unwrap();
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn dithering_job_runs_to_completion() {
    let base = start().await;
    let http = reqwest::Client::new();
    let resp = http
        .post(format!("{base}/v1/jobs"))
        .json(&json!({"command": "dithering", "max_ring": 3, "trials": 5000, "seed": 2}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 202);
    let id = resp.json::<Value>().await.unwrap()["id"].as_str().unwrap().to_string();
    let rec = finished(&http, &base, &id).await;
    assert_eq!(rec["state"], "succeeded", "{rec}");
    assert_eq!(rec["command"], "dithering");
    let curve = rec["result"]["curve"].as_array().unwrap();
    assert_eq!(curve.len(), 3);
    assert!((curve[0].as_f64().unwrap() - 6.0 / 7.0).abs() < 0.03);

    let all: Vec<Value> = http.get(format!("{base}/v1/jobs")).send().await.unwrap().json().await.unwrap();
    assert_eq!(all.len(), 1);
    assert_eq!(all[0]["id"], id.as_str());
}

#[tokio::test]
async fn failing_job_carries_error_code() {
    let base = start().await;
    let http = reqwest::Client::new();
    let id: Value = http
        .post(format!("{base}/v1/jobs"))
        .json(&json!({"command": "compare", "runs": ["/nonexistent/run"]}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let rec = finished(&http, &base, id["id"].as_str().unwrap()).await;
    assert_eq!(rec["state"], "failed");
    assert_eq!(rec["error"]["code"], "insufficient_data");
    assert!(rec.get("result").is_none());
}

#[tokio::test]
async fn malformed_requests_get_json_errors() {
    let base = start().await;
    let http = reqwest::Client::new();

    let r = http.post(format!("{base}/v1/jobs")).json(&json!({"command": "launch"})).send().await.unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().await.unwrap()["error"]["code"], "bad_request");

    let r = http
        .post(format!("{base}/v1/jobs"))
        .json(&json!({"command": "train", "config": {"sim": {"fleet_size": 3, "bogus": 1}}}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);

    let r = http.get(format!("{base}/v1/jobs/not-a-uuid")).send().await.unwrap();
    assert_eq!(r.status(), 400);

    let r = http.get(format!("{base}/v1/jobs/00000000-0000-4000-8000-000000000000")).send().await.unwrap();
    assert_eq!(r.status(), 404);
    assert_eq!(r.json::<Value>().await.unwrap()["error"]["code"], "not_found");

    let r = http.get(format!("{base}/nowhere")).send().await.unwrap();
    assert_eq!(r.status(), 404);
}
