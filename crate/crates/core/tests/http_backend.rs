use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use guideopt::gateway::{Backend, BackendError, ChatMessage, DecodeConfig, HttpBackend, HttpConfig, RetryPolicy};

/// Serves one canned `(status, body)` per connection and records each
/// request body.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(String::from_utf8(buf).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn backend(url: &str) -> HttpBackend {
    HttpBackend::with_api_key(
        HttpConfig {
            base_url: url.into(),
            model: "test-model".into(),
            api_key_env: "UNUSED".into(),
            timeout_secs: 5,
            rate_limit: None,
        },
        Some("secret".into()),
    )
    .unwrap()
    .with_retry(RetryPolicy::immediate(3))
}

fn ok_body(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen, handle) = serve(vec![
        (500, "{}".into()),
        (500, "{}".into()),
        (200, ok_body(r#"{"label": "joy"}"#)),
    ]);
    let b = backend(&url);
    let out = b
        .complete(&[ChatMessage::user("hi")], &DecodeConfig::greedy())
        .unwrap();
    handle.join().unwrap();
    assert_eq!(out.text, r#"{"label": "joy"}"#);
    assert_eq!(out.attempts, 3);
    let bodies = seen.lock().unwrap();
    assert_eq!(bodies.len(), 3);
    let req: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(req["model"], "test-model");
    assert_eq!(req["messages"][0]["content"], "hi");
    assert_eq!(req["temperature"], 0.0);
}

#[test]
fn gives_up_after_max_attempts() {
    let (url, _, handle) = serve(vec![(503, "{}".into()), (503, "{}".into()), (503, "{}".into())]);
    let err = backend(&url)
        .complete(&[ChatMessage::user("hi")], &DecodeConfig::greedy())
        .unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::Transport { attempts: 3, .. }), "{err:?}");
}

#[test]
fn auth_failure_is_not_retried() {
    let (url, seen, handle) = serve(vec![(401, "{}".into())]);
    let err = backend(&url)
        .complete(&[ChatMessage::user("hi")], &DecodeConfig::greedy())
        .unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::Auth { status: 401 }));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body_is_reported() {
    let (url, _, handle) = serve(vec![(200, r#"{"nope": 1}"#.into())]);
    let err = backend(&url)
        .complete(&[ChatMessage::user("hi")], &DecodeConfig::greedy())
        .unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::MalformedResponse(_)));
}
