use std::io::Read;
use std::sync::Arc;
use std::thread;

use tiny_http::{Header, Server};

use crate::service::Session;
use crate::{CliError, CliResult};

const MAX_BODY: u64 = 1 << 20;

pub fn bind(addr: &str) -> CliResult<Server> {
    Server::http(addr).map_err(|e| CliError::Runtime(format!("cannot bind {addr}: {e}")))
}

/// Serves requests on `workers` threads until the server is dropped or
/// unblocked.
pub fn run(server: Arc<Server>, session: Arc<Session>, workers: usize) {
    let handles: Vec<_> = (0..workers.max(1))
        .map(|_| {
            let server = server.clone();
            let session = session.clone();
            thread::spawn(move || {
                for mut request in server.incoming_requests() {
                    let mut body = Vec::new();
                    let read = request.as_reader().take(MAX_BODY).read_to_end(&mut body);
                    let response = match read {
                        Ok(_) => session.handle(request.method().as_str(), request.url(), &body),
                        Err(e) => crate::service::Response::error(400, format!("reading body: {e}")),
                    };
                    log::debug!("{} {} -> {}", request.method(), request.url(), response.status);
                    let header = Header::from_bytes("Content-Type", response.content_type).expect("static header");
                    let reply = tiny_http::Response::from_data(response.body)
                        .with_status_code(response.status)
                        .with_header(header);
                    if let Err(e) = request.respond(reply) {
                        log::warn!("failed to send response: {e}");
                    }
                }
            })
        })
        .collect();
    for h in handles {
        let _ = h.join();
    }
}
