//! The remote client against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use sophia_core::backends::{Backend, BackendError, GenRequest, RemoteBackend, RemoteConfig};

const OK_BODY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"The final answer is \\boxed{4}."}}],"usage":{"completion_tokens":7}}"#;

struct MockServer {
    url: String,
    bodies: Arc<Mutex<Vec<String>>>,
    headers: Arc<Mutex<Vec<String>>>,
}

/// Serves one scripted `(status, body)` reply per connection, in order, and
/// records every request body.
fn serve(script: Vec<(u16, &'static str)>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let headers = Arc::new(Mutex::new(Vec::new()));
    let (b, h) = (bodies.clone(), headers.clone());
    thread::spawn(move || {
        for (status, reply) in script {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream);
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                h.lock().unwrap().push(line.trim_end().to_string());
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            b.lock().unwrap().push(String::from_utf8(body).unwrap());
            let mut stream = reader.into_inner();
            let response = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    MockServer { url, bodies, headers }
}

fn client(url: &str, max_attempts: u32) -> RemoteBackend {
    let mut config = RemoteConfig::new(url, "mock-model");
    config.max_attempts = max_attempts;
    config.initial_backoff = Duration::from_millis(1);
    config.timeout = Duration::from_secs(10);
    config.api_key = Some("secret-token".into());
    RemoteBackend::new(config)
}

fn request() -> GenRequest {
    GenRequest {
        system_prompt: "sys".into(),
        user_prompt: "What is 2 + 2?".into(),
        image_ref: None,
        model: None,
        temperature: 1.0,
        max_tokens: 64,
        seed: 3,
    }
}

#[test]
fn success_returns_content_and_token_count() {
    let server = serve(vec![(200, OK_BODY)]);
    let out = client(&server.url, 3).generate(&request()).unwrap();
    assert_eq!(out.text, "The final answer is \\boxed{4}.");
    assert_eq!(out.token_count, Some(7));
    assert_eq!(out.backend_id, "remote:mock-model");
    let headers = server.headers.lock().unwrap();
    assert!(headers
        .iter()
        .any(|h| h.eq_ignore_ascii_case("authorization: bearer secret-token")));
}

#[test]
fn retries_transient_failures_with_identical_bodies() {
    let server = serve(vec![(503, "busy"), (429, "slow down"), (200, OK_BODY)]);
    let out = client(&server.url, 3).generate(&request()).unwrap();
    assert_eq!(out.token_count, Some(7));
    let bodies = server.bodies.lock().unwrap();
    assert_eq!(bodies.len(), 3);
    assert!(bodies.iter().all(|b| b == &bodies[0]));
}

#[test]
fn gives_up_after_three_attempts() {
    let server = serve(vec![(500, "a"), (502, "b"), (503, "c"), (200, OK_BODY)]);
    let err = client(&server.url, 3).generate(&request()).unwrap_err();
    match err {
        BackendError::RetriesExhausted { attempts, last } => {
            assert_eq!(attempts, 3);
            assert!(matches!(*last, BackendError::Status { status: 503, .. }));
        }
        other => panic!("expected RetriesExhausted, got {other:?}"),
    }
    assert_eq!(server.bodies.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = serve(vec![(400, "bad request"), (200, OK_BODY)]);
    let err = client(&server.url, 3).generate(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 400, ref body } if body == "bad request"));
    assert_eq!(server.bodies.lock().unwrap().len(), 1);
}

#[test]
fn malformed_bodies_are_not_retried() {
    let server = serve(vec![(200, "{\"choices\": []}"), (200, OK_BODY)]);
    let err = client(&server.url, 3).generate(&request()).unwrap_err();
    assert!(matches!(err, BackendError::MalformedBody(_)));
    assert_eq!(server.bodies.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint_is_a_connection_error() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let url = format!("http://127.0.0.1:{port}/v1/chat/completions");
    let err = client(&url, 1).generate(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Connection(_)), "{err:?}");

    let err = client(&url, 3).generate(&request()).unwrap_err();
    assert!(
        matches!(err, BackendError::RetriesExhausted { attempts: 3, ref last } if matches!(**last, BackendError::Connection(_))),
        "{err:?}"
    );
}
