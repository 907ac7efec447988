use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use kgprompt_core::bandit::ArmId;
use kgprompt_core::llm::{
    simulate_oracle, Gateway, HttpClient, LlmClient, LlmRequest, ProviderConfig, ProviderKind, ResponseCache,
    SimHint, SimOracleConfig,
};
use kgprompt_core::Error;

struct Seen {
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` per connection, in order, and records
/// each request. With `hold`, every response waits that long.
struct Server {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
    connections: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Seen {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut headers = HashMap::new();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    loop {
        line.clear();
        reader.read_line(&mut line).unwrap();
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    let len: usize = headers.get("content-length").map_or(0, |v| v.parse().unwrap());
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    Seen {
        auth: headers.get("authorization").cloned(),
        body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
    }
}

fn spawn_server(script: Vec<(u16, String)>, hold: Duration) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let connections = Arc::new(AtomicUsize::new(0));
    let live = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let script = Arc::new(Mutex::new(script.into_iter()));
    {
        let (seen, connections, peak) = (seen.clone(), connections.clone(), peak.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                connections.fetch_add(1, Ordering::SeqCst);
                let (seen, live, peak, script) = (seen.clone(), live.clone(), peak.clone(), script.clone());
                thread::spawn(move || {
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    let req = read_request(&mut stream);
                    seen.lock().unwrap().push(req);
                    let (status, body) = script.lock().unwrap().next().unwrap_or((500, "exhausted".into()));
                    thread::sleep(hold);
                    live.fetch_sub(1, Ordering::SeqCst);
                    let reply = format!(
                        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                        body.len()
                    );
                    let _ = stream.write_all(reply.as_bytes());
                });
            }
        });
    }
    Server {
        url,
        seen,
        connections,
        peak,
    }
}

fn ok_body(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn http_config(url: &str, key_env: &str) -> ProviderConfig {
    ProviderConfig {
        kind: ProviderKind::Http,
        endpoint: Some(url.to_string()),
        model: Some("test-model".into()),
        api_key_env: key_env.into(),
        retry_base_ms: 50,
        max_retries: 3,
        timeout_secs: 5.0,
        ..ProviderConfig::default()
    }
}

#[test]
fn retries_server_errors_with_backoff() {
    std::env::set_var("KG_TEST_KEY_RETRY", "secret-1");
    let server = spawn_server(
        vec![(500, "boom".into()), (429, "slow down".into()), (200, ok_body("(B)"))],
        Duration::ZERO,
    );
    let client = HttpClient::new(&http_config(&server.url, "KG_TEST_KEY_RETRY")).unwrap();
    let start = Instant::now();
    let reply = client.complete(&LlmRequest::new("Question: which?")).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(reply.text, "(B)");
    // two retries: at least base + 2*base
    assert!(elapsed >= Duration::from_millis(150), "{elapsed:?}");
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    for s in seen.iter() {
        assert_eq!(s.auth.as_deref(), Some("Bearer secret-1"));
        assert_eq!(s.body["model"], "test-model");
        assert_eq!(s.body["temperature"], 0.0);
        assert_eq!(s.body["messages"][0]["role"], "user");
        assert_eq!(s.body["messages"][0]["content"], "Question: which?");
    }
}

#[test]
fn gives_up_after_max_retries() {
    std::env::set_var("KG_TEST_KEY_GIVEUP", "k");
    let server = spawn_server(vec![(503, "down".into()); 10], Duration::ZERO);
    let client = HttpClient::new(&http_config(&server.url, "KG_TEST_KEY_GIVEUP")).unwrap();
    match client.complete(&LlmRequest::new("p")) {
        Err(Error::Llm { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("expected exhausted retries, got {other:?}"),
    }
    assert_eq!(server.seen.lock().unwrap().len(), 4);
}

#[test]
fn client_errors_and_bad_bodies_are_not_retried() {
    std::env::set_var("KG_TEST_KEY_FATAL", "k");
    let server = spawn_server(vec![(400, "bad request".into())], Duration::ZERO);
    let client = HttpClient::new(&http_config(&server.url, "KG_TEST_KEY_FATAL")).unwrap();
    assert!(matches!(client.complete(&LlmRequest::new("p")), Err(Error::Llm { attempts: 1, .. })));
    assert_eq!(server.seen.lock().unwrap().len(), 1);

    let server = spawn_server(vec![(200, r#"{"choices": []}"#.into())], Duration::ZERO);
    let client = HttpClient::new(&http_config(&server.url, "KG_TEST_KEY_FATAL")).unwrap();
    assert!(matches!(client.complete(&LlmRequest::new("p")), Err(Error::MalformedResponse(_))));
}

#[test]
fn missing_key_fails_before_any_connection() {
    let server = spawn_server(vec![(200, ok_body("(A)"))], Duration::ZERO);
    let cfg = http_config(&server.url, "KG_TEST_KEY_DEFINITELY_UNSET");
    assert!(matches!(HttpClient::new(&cfg), Err(Error::Config(_))));
    assert!(matches!(Gateway::from_config(&cfg, None), Err(Error::Config(_))));
    thread::sleep(Duration::from_millis(50));
    assert_eq!(server.connections.load(Ordering::SeqCst), 0);
}

#[test]
fn concurrent_requests_respect_the_cap() {
    std::env::set_var("KG_TEST_KEY_CAP", "k");
    let server = spawn_server(vec![(200, ok_body("(A)")); 12], Duration::from_millis(40));
    let mut cfg = http_config(&server.url, "KG_TEST_KEY_CAP");
    cfg.max_concurrent = 2;
    let client = Arc::new(HttpClient::new(&cfg).unwrap());
    let handles: Vec<_> = (0..12)
        .map(|i| {
            let c = client.clone();
            thread::spawn(move || c.complete(&LlmRequest::new(format!("p{i}"))).unwrap())
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap().text, "(A)");
    }
    assert!(server.peak.load(Ordering::SeqCst) <= 2);
    assert!(client.limiter().peak() <= 2);
}

#[test]
fn gateway_cache_answers_repeats_without_a_call() {
    std::env::set_var("KG_TEST_KEY_CACHE", "k");
    let server = spawn_server(vec![(200, ok_body("(C)")), (200, ok_body("(D)"))], Duration::ZERO);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let gw = Gateway::from_config(&http_config(&server.url, "KG_TEST_KEY_CACHE"), None)
        .unwrap()
        .with_cache_file(&path)
        .unwrap();
    assert_eq!(gw.complete(&LlmRequest::new("same")).unwrap().text, "(C)");
    assert_eq!(gw.complete(&LlmRequest::new("same")).unwrap().text, "(C)");
    assert_eq!(server.seen.lock().unwrap().len(), 1);
    let reopened = ResponseCache::open(&path).unwrap();
    assert_eq!(reopened.get("test-model", "same").as_deref(), Some("(C)"));
    assert_eq!(reopened.get("other-model", "same"), None);
}

fn hint(id: &str, arm: Option<usize>, fact: Option<&str>) -> SimHint {
    SimHint {
        example_id: id.into(),
        labels: ["A", "B", "C", "D", "E"].map(String::from).to_vec(),
        gold_label: "A".into(),
        gold_fact: fact.map(String::from),
        arm: arm.map(ArmId),
    }
}

#[test]
fn wrong_answers_are_uniform_over_non_gold() {
    let cfg = SimOracleConfig::fact_match(11);
    let mut counts: HashMap<String, usize> = HashMap::new();
    let n = 10_000;
    for i in 0..n {
        let reply = simulate_oracle(&cfg, "no facts here", &hint(&format!("q{i}"), Some(0), Some("(x, r, y)"))).unwrap();
        *counts.entry(reply).or_default() += 1;
    }
    assert!(!counts.contains_key("(A)"));
    assert_eq!(counts.len(), 4);
    let expected = n as f64 / 4.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 3 degrees of freedom; 16.27 is the 0.999 quantile
    assert!(chi2 < 16.27, "chi-square {chi2} for {counts:?}");
}

#[test]
fn sim_replies_are_deterministic_and_seeded() {
    let cfg = SimOracleConfig::per_arm(vec![0.5; 6], 3);
    let other = SimOracleConfig::per_arm(vec![0.5; 6], 4);
    let mut differs = 0;
    for i in 0..200 {
        let h = hint(&format!("q{i}"), Some(i % 6), None);
        let a = simulate_oracle(&cfg, "p", &h).unwrap();
        assert_eq!(a, simulate_oracle(&cfg, "p", &h).unwrap());
        differs += (a != simulate_oracle(&other, "p", &h).unwrap()) as usize;
    }
    assert!(differs > 0);
}

#[test]
fn bernoulli_rate_matches_probability() {
    let cfg = SimOracleConfig::per_arm(vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.8], 5);
    let n = 4000;
    for (arm, p) in [0.2, 0.3, 0.4, 0.5, 0.6, 0.8].into_iter().enumerate() {
        let hits = (0..n)
            .filter(|i| simulate_oracle(&cfg, "p", &hint(&format!("q{i}"), Some(arm), None)).unwrap() == "(A)")
            .count();
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        let rate = hits as f64 / n as f64;
        assert!((rate - p).abs() < 4.0 * sd, "arm {arm}: {rate} vs {p}");
    }
}
