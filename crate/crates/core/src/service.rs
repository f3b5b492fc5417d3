//! Minimal blocking HTTP/1.1 service exposing the caption pipeline.
//!
//! Two endpoints: `POST /v1/caption` accepting a PNG body or a JSON
//! `{"image_base64": ...}` payload, and `GET /v1/health`. Requests are
//! handled on their own threads; the pipeline is frozen after load so no
//! locking is needed. Responses close the connection.

use std::io::{BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use base64::Engine;
use serde::Deserialize;
use thiserror::Error;

use crate::pipeline::Pipeline;
use crate::png_io::decode_png;

const MAX_HEAD_BYTES: usize = 16 * 1024;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("bind failed: {0}")]
    Bind(std::io::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Running service; shuts down when dropped.
pub struct ServiceHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if self.join.is_some() {
            self.stop();
        }
    }
}

/// Bind and serve until the handle is shut down. `addr` may use port 0 to
/// pick an ephemeral port; the bound address is on the handle.
pub fn serve(pipeline: Arc<Pipeline>, addr: impl ToSocketAddrs) -> Result<ServiceHandle, ServiceError> {
    let listener = TcpListener::bind(addr).map_err(ServiceError::Bind)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    let join = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let pipeline = pipeline.clone();
            std::thread::spawn(move || {
                let _ = handle_connection(stream, &pipeline);
            });
        }
    });
    Ok(ServiceHandle {
        addr,
        shutdown,
        join: Some(join),
    })
}

struct Request {
    method: String,
    path: String,
    content_type: String,
    body: Vec<u8>,
}

#[derive(Deserialize)]
struct Base64Payload {
    image_base64: String,
}

fn handle_connection(stream: TcpStream, pipeline: &Pipeline) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream);
    let request = match read_request(&mut reader, pipeline.config.max_body_bytes) {
        Ok(request) => request,
        Err(status) => {
            let mut stream = reader.into_inner();
            return write_json(
                &mut stream,
                status,
                &serde_json::json!({"error": status_text(status)}),
            );
        }
    };
    let mut stream = reader.into_inner();
    match (request.method.as_str(), request.path.as_str()) {
        ("GET", "/v1/health") => write_json(&mut stream, 200, &pipeline.health()),
        ("POST", "/v1/caption") => {
            let png_bytes = if request.content_type.starts_with("application/json") {
                match serde_json::from_slice::<Base64Payload>(&request.body)
                    .ok()
                    .and_then(|p| {
                        base64::engine::general_purpose::STANDARD
                            .decode(p.image_base64)
                            .ok()
                    }) {
                    Some(bytes) => bytes,
                    None => {
                        return write_json(
                            &mut stream,
                            400,
                            &serde_json::json!({"error": "body is not valid JSON with image_base64"}),
                        );
                    }
                }
            } else {
                request.body
            };
            let image = match decode_png::<crate::F>(&png_bytes) {
                Ok(image) => image,
                Err(e) => {
                    return write_json(
                        &mut stream,
                        400,
                        &serde_json::json!({"error": format!("malformed image: {e}")}),
                    );
                }
            };
            match pipeline.caption_image(&image) {
                Ok(result) => {
                    let value = serde_json::to_value(&result).unwrap_or_default();
                    write_json(&mut stream, 200, &value)
                }
                Err(e) => write_json(
                    &mut stream,
                    500,
                    &serde_json::json!({"error": e.to_string()}),
                ),
            }
        }
        ("GET" | "POST", _) => write_json(
            &mut stream,
            404,
            &serde_json::json!({"error": "unknown path"}),
        ),
        _ => write_json(
            &mut stream,
            405,
            &serde_json::json!({"error": "method not allowed"}),
        ),
    }
}

/// Read and parse one request; returns an HTTP status code on failure.
fn read_request(reader: &mut BufReader<TcpStream>, max_body: usize) -> Result<Request, u16> {
    let mut head = Vec::new();
    let mut byte = [0u8; 1];
    while !head.ends_with(b"\r\n\r\n") {
        if head.len() > MAX_HEAD_BYTES {
            return Err(431);
        }
        match reader.read(&mut byte) {
            Ok(0) => return Err(400),
            Ok(_) => head.push(byte[0]),
            Err(_) => return Err(400),
        }
    }
    let head = String::from_utf8_lossy(&head);
    let mut lines = head.split("\r\n");
    let request_line = lines.next().unwrap_or_default();
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    if method.is_empty() || path.is_empty() {
        return Err(400);
    }
    let mut content_length = 0usize;
    let mut content_type = String::new();
    for line in lines {
        let Some((name, value)) = line.split_once(':') else {
            continue;
        };
        let value = value.trim();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => {
                content_length = value.parse().map_err(|_| 400u16)?;
            }
            "content-type" => {
                content_type = value.to_ascii_lowercase();
            }
            _ => {}
        }
    }
    if content_length > max_body {
        return Err(413);
    }
    let mut body = vec![0u8; content_length];
    if content_length > 0 {
        reader.read_exact(&mut body).map_err(|_| 400u16)?;
    }
    Ok(Request {
        method,
        path,
        content_type,
        body,
    })
}

fn status_text(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        413 => "Payload Too Large",
        431 => "Request Header Fields Too Large",
        500 => "Internal Server Error",
        _ => "Error",
    }
}

fn write_json(stream: &mut TcpStream, status: u16, body: &serde_json::Value) -> std::io::Result<()> {
    let payload = serde_json::to_vec(body).unwrap_or_else(|_| b"{}".to_vec());
    let head = format!(
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        status,
        status_text(status),
        payload.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(&payload)?;
    stream.flush()
}
