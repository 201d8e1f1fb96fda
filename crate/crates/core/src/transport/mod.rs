//! Transport layer: frames over any ordered byte stream.

mod frame;
mod loopback;
mod stream;

use std::time::Duration;

use thiserror::Error;

pub use frame::{
    decode_frames, encode_frame, encode_frame_into, Frame, FrameClass, FrameDecoder, FrameError,
    HEADER_LEN, MAGIC, MAX_BODY_LEN, VERSION,
};
pub use loopback::{loopback_pair, ChannelTransport, HandlerLoopback, LoopbackFaults};
pub use stream::{serve_connection, spawn_server, ServerHandle, StreamTransport};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("framing: {0}")]
    Frame(#[from] FrameError),
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("connection closed")]
    Closed,
}

/// Whole frames, in order, over one connection.
pub trait TransportAdapter {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError>;

    /// Waits up to `timeout` (forever when `None`) for the next frame.
    fn receive(&mut self, timeout: Option<Duration>) -> Result<Frame, TransportError>;
}

impl<T: TransportAdapter + ?Sized> TransportAdapter for Box<T> {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        (**self).send(frame)
    }

    fn receive(&mut self, timeout: Option<Duration>) -> Result<Frame, TransportError> {
        (**self).receive(timeout)
    }
}

/// Server side of a connection: one request frame in, at most one frame out.
pub trait FrameHandler: Send + Sync {
    fn handle(&self, frame: Frame) -> Option<Frame>;
}

impl<H: FrameHandler + ?Sized> FrameHandler for std::sync::Arc<H> {
    fn handle(&self, frame: Frame) -> Option<Frame> {
        (**self).handle(frame)
    }
}

/// Echoes request bodies back unverified. The benchmark baseline.
#[derive(Debug, Default, Clone, Copy)]
pub struct EchoHandler;

impl FrameHandler for EchoHandler {
    fn handle(&self, frame: Frame) -> Option<Frame> {
        Some(Frame::new(FrameClass::Response, frame.body))
    }
}
