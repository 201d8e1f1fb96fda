//! TCP stream transport and a thread-per-connection server loop.

use std::collections::VecDeque;
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::{encode_frame, Frame, FrameDecoder, FrameHandler, TransportAdapter, TransportError};

const READ_CHUNK: usize = 64 * 1024;

pub struct StreamTransport {
    stream: TcpStream,
    decoder: FrameDecoder,
    ready: VecDeque<Frame>,
    scratch: Vec<u8>,
}

impl StreamTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        Ok(Self::from_stream(TcpStream::connect(addr)?))
    }

    pub fn connect_timeout(addr: &SocketAddr, timeout: Duration) -> Result<Self, TransportError> {
        Ok(Self::from_stream(TcpStream::connect_timeout(addr, timeout)?))
    }

    pub fn from_stream(stream: TcpStream) -> Self {
        let _ = stream.set_nodelay(true);
        StreamTransport {
            stream,
            decoder: FrameDecoder::new(),
            ready: VecDeque::new(),
            scratch: vec![0; READ_CHUNK],
        }
    }

    pub fn peer_addr(&self) -> Option<SocketAddr> {
        self.stream.peer_addr().ok()
    }
}

impl TransportAdapter for StreamTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        let bytes = encode_frame(frame)?;
        self.stream.write_all(&bytes)?;
        Ok(())
    }

    fn receive(&mut self, timeout: Option<Duration>) -> Result<Frame, TransportError> {
        self.stream.set_read_timeout(timeout.filter(|t| !t.is_zero()))?;
        loop {
            if let Some(frame) = self.ready.pop_front() {
                return Ok(frame);
            }
            let n = match self.stream.read(&mut self.scratch) {
                Ok(0) => return Err(TransportError::Closed),
                Ok(n) => n,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Err(TransportError::Timeout)
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            let frames = self.decoder.push(&self.scratch[..n])?;
            self.ready.extend(frames);
        }
    }
}

/// Serves one connection until the peer closes it or sends bytes that do not
/// frame. Codec errors end the connection without a reply.
pub fn serve_connection<H: FrameHandler + ?Sized>(
    mut stream: TcpStream,
    handler: &H,
) -> Result<(), TransportError> {
    let _ = stream.set_nodelay(true);
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; READ_CHUNK];
    loop {
        let n = match stream.read(&mut buf) {
            Ok(0) => return Ok(()),
            Ok(n) => n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        };
        for frame in decoder.push(&buf[..n])? {
            if let Some(reply) = handler.handle(frame) {
                stream.write_all(&encode_frame(&reply)?)?;
            }
        }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections. Open connections finish on their own.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the accept loop exits.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_accepting();
        }
    }
}

/// Accepts connections on `listener`, one thread each.
pub fn spawn_server<H>(listener: TcpListener, handler: Arc<H>) -> std::io::Result<ServerHandle>
where
    H: FrameHandler + 'static,
{
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = Arc::clone(&stop);
    let thread = std::thread::Builder::new()
        .name("lacp-accept".into())
        .spawn(move || {
            for conn in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let stream = match conn {
                    Ok(s) => s,
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        continue;
                    }
                };
                let handler = Arc::clone(&handler);
                let peer = stream.peer_addr().ok();
                let spawned = std::thread::Builder::new()
                    .name("lacp-conn".into())
                    .spawn(move || {
                        if let Err(e) = serve_connection(stream, &*handler) {
                            log::info!("connection {peer:?} closed: {e}");
                        }
                    });
                if let Err(e) = spawned {
                    log::warn!("could not spawn connection thread: {e}");
                }
            }
        })?;
    Ok(ServerHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}
