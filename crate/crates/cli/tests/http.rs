mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;

use mulcpred_cli::server;
use serde_json::Value;

fn request(addr: &str, method: &str, path: &str, body: &str) -> (u16, String, Vec<u8>) {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
    let head = String::from_utf8_lossy(&raw[..split]).to_string();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    let content_type = head
        .lines()
        .find_map(|l| l.strip_prefix("Content-Type: "))
        .unwrap_or_default()
        .to_string();
    (status, content_type, raw[split + 4..].to_vec())
}

#[test]
fn serves_routes_over_http() {
    let f = common::fixture();
    let session = Arc::new(common::session(&f));
    let srv = Arc::new(server::bind("127.0.0.1:0").unwrap());
    let addr = srv.server_addr().to_ip().unwrap().to_string();
    let worker = {
        let srv = srv.clone();
        thread::spawn(move || server::run(srv, session, 2))
    };

    let (status, ctype, body) = request(&addr, "GET", "/health", "");
    assert_eq!(status, 200);
    assert!(ctype.starts_with("application/json"));
    let health: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(health["model_loaded"], Value::Bool(true));

    let (status, ctype, body) = request(&addr, "GET", "/concepts/ego:0/heatmap/0/0", "");
    assert_eq!((status, ctype.as_str()), (200, "image/png"));
    assert_eq!(&body[..4], b"\x89PNG");

    let (status, _, body) = request(&addr, "POST", "/prune", r#"{"keep":["nonexistent"]}"#);
    assert_eq!(status, 400);
    assert!(String::from_utf8_lossy(&body).contains("nonexistent"));

    let (status, _, _) = request(&addr, "POST", "/prune", r#"{"keep":["ego:0"]}"#);
    assert_eq!(status, 200);
    let (status, _, body) = request(&addr, "GET", "/metrics?dataset=test", "");
    assert_eq!(status, 200);
    let metrics: Value = serde_json::from_slice(&body).unwrap();
    assert!(metrics["report"]["acc"].as_f64().unwrap() >= 0.0);
    assert_eq!(request(&addr, "GET", "/missing", "").0, 404);

    srv.unblock();
    srv.unblock();
    worker.join().unwrap();
}
