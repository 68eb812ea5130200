//! Wire-contract tests against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

use ralbench::generate::{Backend, Generator, HttpChat, HttpChatConfig};
use ralbench::retrieve::{embed_all, EmbedOptions, ProviderRegistry, ProviderSpec};
use ralbench::Error;

struct Request {
    headers: Vec<String>,
    body: Value,
}

/// Serves `script` responses in order, one per connection, then stops.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Request>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in script {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Request {
                headers,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen, handle)
}

fn chat(endpoint: &str, retries: u32) -> HttpChatConfig {
    HttpChatConfig {
        endpoint: endpoint.to_string(),
        model: "m1".into(),
        temperature: 0.0,
        max_tokens: 16,
        api_key_env: None,
        max_retries: retries,
        backoff_ms: 1,
        timeout_secs: 5,
    }
}

#[test]
fn chat_request_shape_and_bearer_key() {
    let (url, seen, h) = serve(vec![(200, r#"{"text":"True"}"#.into())]);
    std::env::set_var("RALBENCH_TEST_CHAT_KEY", "sk-test");
    let mut cfg = chat(&url, 0);
    cfg.api_key_env = Some("RALBENCH_TEST_CHAT_KEY".into());
    let b = HttpChat::new(cfg).unwrap();
    assert_eq!(b.complete("hello").unwrap(), "True");
    h.join().unwrap();
    let reqs = seen.lock().unwrap();
    assert_eq!(
        reqs[0].body,
        json!({"model": "m1", "prompt": "hello", "temperature": 0.0, "max_tokens": 16})
    );
    assert!(reqs[0]
        .headers
        .iter()
        .any(|h| h.eq_ignore_ascii_case("authorization: Bearer sk-test")));
}

#[test]
fn retries_transient_errors_then_succeeds() {
    let (url, seen, h) = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, r#"{"text":"ok"}"#.into()),
    ]);
    let b = HttpChat::new(chat(&url, 3)).unwrap();
    assert_eq!(b.complete("p").unwrap(), "ok");
    h.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_retry_limit() {
    let (url, seen, h) = serve(vec![(500, "{}".into()), (500, "{}".into())]);
    let b = HttpChat::new(chat(&url, 1)).unwrap();
    assert!(matches!(b.complete("p"), Err(Error::Backend { .. })));
    h.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn client_errors_and_bad_bodies_are_fatal() {
    let (url, seen, h) = serve(vec![(400, "{}".into())]);
    let b = HttpChat::new(chat(&url, 3)).unwrap();
    assert!(b.complete("p").is_err());
    h.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 1);

    let (url, _, h) = serve(vec![(200, r#"{"answer":"x"}"#.into())]);
    let b = HttpChat::new(chat(&url, 3)).unwrap();
    assert!(b.complete("p").is_err());
    h.join().unwrap();
}

#[test]
fn cached_generation_skips_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let (url, seen, h) = serve(vec![(200, r#"{"text":"False"}"#.into())]);
    let g = Generator::new(Arc::new(HttpChat::new(chat(&url, 0)).unwrap()), Some(dir.path()));
    assert_eq!(g.generate("same prompt").unwrap().text, "False");
    h.join().unwrap();
    // the server is gone; a second call must come from the cache
    let again = g.generate("same prompt").unwrap();
    assert!(again.cache_hit);
    assert_eq!(again.text, "False");
    assert_eq!(g.backend_calls(), 1);
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn embedding_wire_contract_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (url, seen, h) = serve(vec![(200, r#"{"vectors":[[1.0,0.0],[0.5,0.25]]}"#.into())]);
    let p = ProviderRegistry::builtin()
        .build(
            &ProviderSpec::new("http", json!({"endpoint": url, "model": "e1", "dim": 2})),
            std::path::Path::new("."),
        )
        .unwrap();
    let texts = vec!["a".to_string(), "b".to_string()];
    let ids = vec!["1".to_string(), "2".to_string()];
    let opts = EmbedOptions {
        cache_dir: Some(dir.path().to_path_buf()),
        ..EmbedOptions::default()
    };
    let out = embed_all(p.as_ref(), &texts, &ids, &opts).unwrap();
    h.join().unwrap();
    assert_eq!(out.vectors, vec![vec![1.0, 0.0], vec![0.5, 0.25]]);
    assert_eq!(seen.lock().unwrap()[0].body, json!({"model": "e1", "texts": ["a", "b"]}));

    let warm = embed_all(p.as_ref(), &texts, &ids, &opts).unwrap();
    assert_eq!(warm.provider_calls, 0);
    assert_eq!(warm.vectors, out.vectors);
}

#[test]
fn embedding_dimension_mismatch_names_instance() {
    let (url, _, h) = serve(vec![(200, r#"{"vectors":[[1.0,0.0,3.0]]}"#.into())]);
    let p = ProviderRegistry::builtin()
        .build(
            &ProviderSpec::new("http", json!({"endpoint": url, "model": "e1", "dim": 2})),
            std::path::Path::new("."),
        )
        .unwrap();
    assert_eq!(p.dim(), Some(2));
    let err = embed_all(p.as_ref(), &["x".to_string()], &["doc-7".to_string()], &EmbedOptions::default());
    h.join().unwrap();
    let msg = err.unwrap_err().to_string();
    assert!(msg.contains("doc-7") || msg.contains("dimension"), "{msg}");
}
