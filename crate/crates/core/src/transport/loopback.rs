//! In-process transports.

use std::collections::{BTreeSet, VecDeque};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::{encode_frame, Frame, FrameDecoder, FrameHandler, TransportAdapter, TransportError};

/// One end of an in-memory byte pipe. Bytes go through the real codec.
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    decoder: FrameDecoder,
    ready: VecDeque<Frame>,
}

pub fn loopback_pair() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    let end = |tx, rx| ChannelTransport {
        tx,
        rx,
        decoder: FrameDecoder::new(),
        ready: VecDeque::new(),
    };
    (end(a_tx, a_rx), end(b_tx, b_rx))
}

impl ChannelTransport {
    /// Sends raw bytes, bypassing the encoder.
    pub fn send_raw(&mut self, bytes: Vec<u8>) -> Result<(), TransportError> {
        self.tx.send(bytes).map_err(|_| TransportError::Closed)
    }
}

impl TransportAdapter for ChannelTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        let bytes = encode_frame(frame)?;
        self.send_raw(bytes)
    }

    fn receive(&mut self, timeout: Option<Duration>) -> Result<Frame, TransportError> {
        loop {
            if let Some(frame) = self.ready.pop_front() {
                return Ok(frame);
            }
            let chunk = match timeout {
                Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                    RecvTimeoutError::Timeout => TransportError::Timeout,
                    RecvTimeoutError::Disconnected => TransportError::Closed,
                })?,
                None => self.rx.recv().map_err(|_| TransportError::Closed)?,
            };
            self.ready.extend(self.decoder.push(&chunk)?);
        }
    }
}

/// Which exchanges a [`HandlerLoopback`] should disturb, by 0-based send index.
#[derive(Debug, Clone, Default)]
pub struct LoopbackFaults {
    pub drop_request: BTreeSet<usize>,
    pub drop_response: BTreeSet<usize>,
    /// Deliver the request to the handler twice; only the first reply returns.
    pub duplicate_request: BTreeSet<usize>,
}

impl LoopbackFaults {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn drop_response_of(mut self, index: usize) -> Self {
        self.drop_response.insert(index);
        self
    }

    pub fn drop_request_of(mut self, index: usize) -> Self {
        self.drop_request.insert(index);
        self
    }

    pub fn duplicate_request_of(mut self, index: usize) -> Self {
        self.duplicate_request.insert(index);
        self
    }
}

/// Client-side transport that hands each frame straight to a server-side
/// handler on the calling thread. A missing reply surfaces as
/// [`TransportError::Timeout`] without waiting, since nothing else could
/// produce it.
pub struct HandlerLoopback<H> {
    handler: H,
    faults: LoopbackFaults,
    sent: usize,
    server_decoder: FrameDecoder,
    client_decoder: FrameDecoder,
    inbound: VecDeque<Frame>,
}

impl<H: FrameHandler> HandlerLoopback<H> {
    pub fn new(handler: H) -> Self {
        Self::with_faults(handler, LoopbackFaults::none())
    }

    pub fn with_faults(handler: H, faults: LoopbackFaults) -> Self {
        HandlerLoopback {
            handler,
            faults,
            sent: 0,
            server_decoder: FrameDecoder::new(),
            client_decoder: FrameDecoder::new(),
            inbound: VecDeque::new(),
        }
    }

    pub fn handler(&self) -> &H {
        &self.handler
    }

    pub fn sent(&self) -> usize {
        self.sent
    }

    /// Pushes raw bytes at the server side and returns the decoded reply frames.
    pub fn exchange_raw(&mut self, bytes: &[u8]) -> Result<Vec<Frame>, TransportError> {
        let requests = self.server_decoder.push(bytes)?;
        let mut replies = Vec::new();
        for request in requests {
            if let Some(reply) = self.handler.handle(request) {
                let wire = encode_frame(&reply)?;
                replies.extend(self.client_decoder.push(&wire)?);
            }
        }
        Ok(replies)
    }
}

impl<H: FrameHandler> TransportAdapter for HandlerLoopback<H> {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        let index = self.sent;
        self.sent += 1;
        let wire = encode_frame(frame)?;
        if self.faults.drop_request.contains(&index) {
            return Ok(());
        }
        let replies = self.exchange_raw(&wire)?;
        if self.faults.duplicate_request.contains(&index) {
            self.exchange_raw(&wire)?;
        }
        if !self.faults.drop_response.contains(&index) {
            self.inbound.extend(replies);
        }
        Ok(())
    }

    fn receive(&mut self, _timeout: Option<Duration>) -> Result<Frame, TransportError> {
        self.inbound.pop_front().ok_or(TransportError::Timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{EchoHandler, FrameClass};
    use super::*;

    #[test]
    fn channel_pair_carries_frames_in_order() {
        let (mut a, mut b) = loopback_pair();
        for i in 0..3u8 {
            a.send(&Frame::new(FrameClass::Request, vec![i])).unwrap();
        }
        for i in 0..3u8 {
            assert_eq!(b.receive(None).unwrap().body, vec![i]);
        }
        assert!(matches!(
            b.receive(Some(Duration::from_millis(5))),
            Err(TransportError::Timeout)
        ));
        drop(a);
        assert!(matches!(b.receive(None), Err(TransportError::Closed)));
    }

    #[test]
    fn channel_reassembles_split_writes() {
        let (mut a, mut b) = loopback_pair();
        let wire = encode_frame(&Frame::new(FrameClass::Request, b"split".to_vec())).unwrap();
        let (x, y) = wire.split_at(7);
        a.send_raw(x.to_vec()).unwrap();
        a.send_raw(y.to_vec()).unwrap();
        assert_eq!(b.receive(None).unwrap().body, b"split");
    }

    #[test]
    fn handler_loopback_echo_and_drop() {
        let mut t = HandlerLoopback::with_faults(EchoHandler, LoopbackFaults::none().drop_response_of(1));
        t.send(&Frame::new(FrameClass::Request, b"one".to_vec())).unwrap();
        assert_eq!(t.receive(None).unwrap().body, b"one");
        t.send(&Frame::new(FrameClass::Request, b"two".to_vec())).unwrap();
        assert!(matches!(t.receive(None), Err(TransportError::Timeout)));
    }
}
