//! Minimal in-process chat-completions stub for tests and fixture
//! recording. Speaks just enough HTTP/1.1 for the blocking client:
//! reads one POST, hands the extracted prompt to a script closure, and
//! writes the scripted response.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

/// What the script wants the stub to do for one request.
pub enum StubReply {
    /// 200 with a chat-completion body wrapping this content.
    Content(String),
    /// A bare status code with a plain-text body.
    Status(u16, String),
    /// Sleep before answering 200; long sleeps trigger client timeouts.
    Delayed(Duration, String),
}

pub struct StubServer {
    addr: String,
    hits: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Starts a stub whose `script` maps each incoming prompt to a reply.
    pub fn start<F>(script: F) -> StubServer
    where
        F: Fn(&str) -> StubReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub listener");
        let addr = format!("http://{}", listener.local_addr().expect("stub addr"));
        listener.set_nonblocking(true).expect("nonblocking listener");
        let hits = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let thread_hits = Arc::clone(&hits);
        let thread_stop = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            while !thread_stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        thread_hits.fetch_add(1, Ordering::SeqCst);
                        handle_connection(stream, &script);
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    Err(_) => break,
                }
            }
        });
        StubServer { addr, hits, stop, handle: Some(handle) }
    }

    /// Endpoint URL to put into a `BackendConfig`.
    pub fn endpoint(&self) -> String {
        self.addr.clone()
    }

    /// Number of requests accepted so far.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection<F>(mut stream: TcpStream, script: &F)
where
    F: Fn(&str) -> StubReply,
{
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let request = match read_request(&mut stream) {
        Some(r) => r,
        None => return,
    };
    let prompt = extract_prompt(&request).unwrap_or_default();
    match script(&prompt) {
        StubReply::Content(content) => write_completion(&mut stream, &content),
        StubReply::Status(code, body) => write_status(&mut stream, code, &body),
        StubReply::Delayed(delay, content) => {
            std::thread::sleep(delay);
            write_completion(&mut stream, &content);
        }
    }
}

/// Reads headers plus a Content-Length body. Returns the body text.
fn read_request(stream: &mut TcpStream) -> Option<String> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        match stream.read(&mut chunk) {
            Ok(0) => return None,
            Ok(n) => {
                buf.extend_from_slice(&chunk[..n]);
                if let Some(pos) = find_header_end(&buf) {
                    break pos;
                }
                if buf.len() > 1 << 20 {
                    return None;
                }
            }
            Err(_) => return None,
        }
    };
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length = headers
        .lines()
        .find_map(|line| {
            let (name, value) = line.split_once(':')?;
            if name.trim().eq_ignore_ascii_case("content-length") {
                value.trim().parse::<usize>().ok()
            } else {
                None
            }
        })
        .unwrap_or(0);
    let mut body = buf[header_end + 4..].to_vec();
    while body.len() < content_length {
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => body.extend_from_slice(&chunk[..n]),
            Err(_) => return None,
        }
    }
    Some(String::from_utf8_lossy(&body).to_string())
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

fn extract_prompt(body: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_str(body).ok()?;
    let messages = value.get("messages")?.as_array()?;
    let last = messages.last()?;
    Some(last.get("content")?.as_str()?.to_string())
}

fn write_completion(stream: &mut TcpStream, content: &str) {
    let body = serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": content}}]
    })
    .to_string();
    let response = format!(
        "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
        body.len(),
        body
    );
    let _ = stream.write_all(response.as_bytes());
}

fn write_status(stream: &mut TcpStream, code: u16, body: &str) {
    let reason = match code {
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Error",
    };
    let response = format!(
        "HTTP/1.1 {code} {reason}\r\ncontent-type: text/plain\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
        body.len(),
        body
    );
    let _ = stream.write_all(response.as_bytes());
}
