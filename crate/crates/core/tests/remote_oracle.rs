use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use corrattack_core::image::{Image, Shape};
use corrattack_core::oracle::{
    CountingOracle, LinearModel, LogitsModel, LogitsOracle, LogitsRequest, RemoteModel, RetryPolicy,
};
use corrattack_core::Error;

type Handler = dyn Fn(&str, &str, &str) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server: one request per connection, `Connection: close`.
struct MockServer {
    url: String,
    hits: Arc<AtomicUsize>,
}

impl MockServer {
    fn start(handler: Box<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).is_err() {
                    continue;
                }
                let mut parts = line.split_whitespace();
                let method = parts.next().unwrap_or("").to_string();
                let path = parts.next().unwrap_or("").to_string();
                let mut length = 0usize;
                loop {
                    let mut header = String::new();
                    reader.read_line(&mut header).unwrap();
                    let header = header.trim_end();
                    if header.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = header.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0u8; length];
                reader.read_exact(&mut body).unwrap();
                counter.fetch_add(1, Ordering::SeqCst);
                let (status, reply) = handler(&method, &path, &String::from_utf8_lossy(&body));
                let response = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        Self { url, hits }
    }

    fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

const HEALTH: &str = r#"{"status":"ok","model":"linear-echo","classes":10}"#;

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        base_delay: Duration::from_millis(5),
        timeout: Duration::from_secs(5),
    }
}

fn echo_server(model: LinearModel) -> MockServer {
    MockServer::start(Box::new(move |method, path, body| match (method, path) {
        ("GET", "/v1/health") => (200, HEALTH.to_string()),
        ("POST", "/v1/logits") => {
            let Ok(req) = serde_json::from_str::<LogitsRequest>(body) else {
                return (400, r#"{"error":"bad json"}"#.into());
            };
            let shape = Shape::new(req.shape[0], req.shape[1], req.shape[2]);
            match Image::new(shape, req.pixels).and_then(|x| model.logits_of(&x)) {
                Ok(logits) => (200, serde_json::json!({ "logits": logits }).to_string()),
                Err(e) => (400, serde_json::json!({ "error": e.to_string() }).to_string()),
            }
        }
        _ => (404, "{}".into()),
    }))
}

#[test]
fn round_trip_matches_in_process_model() {
    let model = LinearModel::benchmark();
    let server = echo_server(model.clone());
    let remote = RemoteModel::connect_with(&server.url, fast_retry()).unwrap();
    assert_eq!(remote.health().classes, 10);
    assert_eq!(remote.health().model, "linear-echo");

    let mut oracle = CountingOracle::new(remote);
    for seed in 0..5u32 {
        let x = Image::new(model.shape, (0..model.shape.len()).map(|p| ((p as u32 * 31 + seed * 7) % 256) as f64 / 255.0).collect()).unwrap();
        let got = oracle.query(&x).unwrap();
        let want = model.logits_of(&x).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-4, "{g} vs {w}");
        }
    }
    assert_eq!(oracle.queries_used(), 5);
}

#[test]
fn wrong_shape_is_a_protocol_error_without_retries() {
    let server = echo_server(LinearModel::benchmark());
    let mut remote = RemoteModel::connect_with(&server.url, fast_retry()).unwrap();
    let before = server.hits();
    let err = remote.logits(&Image::filled(Shape::new(1, 8, 8), 0.5)).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err:?}");
    assert_eq!(server.hits() - before, 1);
}

#[test]
fn persistent_server_errors_become_unavailable_after_three_tries() {
    let server = MockServer::start(Box::new(|_, path, _| match path {
        "/v1/health" => (200, HEALTH.to_string()),
        _ => (503, r#"{"error":"loading"}"#.into()),
    }));
    let remote = RemoteModel::connect_with(&server.url, fast_retry()).unwrap();
    let mut oracle = CountingOracle::new(remote);
    let before = server.hits();
    let err = oracle.query(&Image::filled(Shape::new(3, 32, 32), 0.5)).unwrap_err();
    assert!(matches!(err, Error::OracleUnavailable(_)), "{err:?}");
    assert_eq!(server.hits() - before, 3);
    assert_eq!(oracle.queries_used(), 0);
}

#[test]
fn transient_failure_is_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let seen = calls.clone();
    let server = MockServer::start(Box::new(move |_, path, _| match path {
        "/v1/health" => (200, HEALTH.to_string()),
        _ if seen.fetch_add(1, Ordering::SeqCst) == 0 => (500, "{}".into()),
        _ => (200, r#"{"logits":[0,1,2,3,4,5,6,7,8,9]}"#.into()),
    }));
    let mut remote = RemoteModel::connect_with(&server.url, fast_retry()).unwrap();
    let logits = remote.logits(&Image::filled(Shape::new(3, 32, 32), 0.5)).unwrap();
    assert_eq!(logits[9], 9.0);
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}

#[test]
fn malformed_bodies_are_protocol_errors() {
    for body in [r#"{"nope":1}"#, "not json", r#"{"logits":[1e999]}"#] {
        let reply = body.to_string();
        let server = MockServer::start(Box::new(move |_, path, _| match path {
            "/v1/health" => (200, HEALTH.to_string()),
            _ => (200, reply.clone()),
        }));
        let mut remote = RemoteModel::connect_with(&server.url, fast_retry()).unwrap();
        let err = remote.logits(&Image::filled(Shape::new(3, 32, 32), 0.5)).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{body}: {err:?}");
    }
}

#[test]
fn unhealthy_or_unreachable_servers_are_rejected() {
    let server = MockServer::start(Box::new(|_, _, _| (200, r#"{"status":"ok","model":"m","classes":1}"#.into())));
    assert!(matches!(RemoteModel::connect_with(&server.url, fast_retry()), Err(Error::Protocol(_))));

    let server = MockServer::start(Box::new(|_, _, _| (503, "{}".into())));
    assert!(matches!(RemoteModel::connect_with(&server.url, fast_retry()), Err(Error::OracleUnavailable(_))));

    let closed = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let err = RemoteModel::connect_with(&format!("http://{closed}"), fast_retry()).unwrap_err();
    assert!(matches!(err, Error::OracleUnavailable(_)), "{err:?}");
}
