// SPDX-License-Identifier: Apache-2.0

//! TCP transport: length-prefixed JSON frames, one rpc per
//! request/response pair, thread-per-connection servers.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::{ControlError, ControlMessage, Envelope, RequestHandler};

/// Frames above this are treated as corruption, not payload.
const MAX_FRAME: u32 = 16 * 1024 * 1024;

pub fn write_frame(stream: &mut TcpStream, env: &Envelope) -> Result<(), ControlError> {
    let body = serde_json::to_vec(env).map_err(|e| ControlError::Codec(e.to_string()))?;
    let len = u32::try_from(body.len()).map_err(|_| ControlError::Codec("frame too large".into()))?;
    stream.write_all(&len.to_be_bytes())?;
    stream.write_all(&body)?;
    Ok(())
}

pub fn read_frame(stream: &mut TcpStream) -> Result<Envelope, ControlError> {
    let mut len_buf = [0u8; 4];
    stream.read_exact(&mut len_buf)?;
    let len = u32::from_be_bytes(len_buf);
    if len > MAX_FRAME {
        return Err(ControlError::Codec(format!("frame of {len} bytes refused")));
    }
    let mut body = vec![0u8; len as usize];
    stream.read_exact(&mut body)?;
    serde_json::from_slice(&body).map_err(|e| ControlError::Codec(e.to_string()))
}

/// A running rpc server; dropping the handle stops accepting.
pub struct Server {
    pub local_addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl Server {
    /// Bind and serve `handler` on `addr` ("127.0.0.1:0" for ephemeral).
    pub fn spawn(
        addr: &str,
        handler: Arc<Mutex<dyn RequestHandler>>,
    ) -> Result<Server, ControlError> {
        let listener = TcpListener::bind(addr)?;
        let local_addr = listener.local_addr()?;
        // Polling accept so the stop flag is honored promptly.
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let accept_thread = std::thread::spawn(move || {
            let mut conns: Vec<JoinHandle<()>> = Vec::new();
            while !stop2.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let h = handler.clone();
                        conns.push(std::thread::spawn(move || serve_conn(stream, h)));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    Err(_) => break,
                }
            }
            for c in conns {
                let _ = c.join();
            }
        });
        Ok(Server {
            local_addr,
            stop,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

fn serve_conn(mut stream: TcpStream, handler: Arc<Mutex<dyn RequestHandler>>) {
    let _ = stream.set_nodelay(true);
    loop {
        let env = match read_frame(&mut stream) {
            Ok(e) => e,
            Err(_) => return, // peer closed or sent garbage
        };
        let sender = env.sender.clone();
        let seq = env.seq;
        let reply = handler.lock().expect("handler poisoned").handle(env);
        let reply_env = Envelope {
            sender,
            seq,
            message: reply,
        };
        if write_frame(&mut stream, &reply_env).is_err() {
            return;
        }
    }
}

/// One rpc over a fresh connection. A connect or read failure maps to
/// `PeerDown`; a slow peer to `Timeout`.
pub fn rpc(addr: &str, env: &Envelope, timeout_ms: u64) -> Result<ControlMessage, ControlError> {
    let timeout = Duration::from_millis(timeout_ms);
    let sock_addr = addr
        .to_socket_addrs()
        .map_err(|_| ControlError::PeerDown(addr.to_owned()))?
        .next()
        .ok_or_else(|| ControlError::PeerDown(addr.to_owned()))?;
    let mut stream = TcpStream::connect_timeout(&sock_addr, timeout)
        .map_err(|_| ControlError::PeerDown(addr.to_owned()))?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let _ = stream.set_nodelay(true);
    write_frame(&mut stream, env).map_err(|_| ControlError::PeerDown(addr.to_owned()))?;
    match read_frame(&mut stream) {
        Ok(reply) => Ok(reply.message),
        Err(ControlError::Io(e))
            if e.kind() == std::io::ErrorKind::WouldBlock
                || e.kind() == std::io::ErrorKind::TimedOut =>
        {
            Err(ControlError::Timeout(timeout_ms))
        }
        Err(_) => Err(ControlError::PeerDown(addr.to_owned())),
    }
}
