//! Frame transports: an in-process channel pair and TCP framing.
//!
//! Both move whole encoded frames, so every byte a worker sees is
//! independent of the transport; protocol logic above this layer never
//! branches on which one is in use.

use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::time::Duration;

use crate::{Error, Result};

use super::wire::MAGIC;

/// A bidirectional, ordered frame pipe between one source and the server.
pub trait Channel: Send {
    /// Sends one encoded frame.
    fn send(&mut self, frame: &[u8]) -> Result<()>;

    /// Receives one encoded frame, waiting at most `timeout` when given.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>>;
}

/// In-process channel endpoint backed by a pair of queues.
pub struct InProcessChannel {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
}

/// Two connected in-process endpoints.
pub fn in_process_pair() -> (InProcessChannel, InProcessChannel) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    (
        InProcessChannel { tx: tx_a, rx: rx_a },
        InProcessChannel { tx: tx_b, rx: rx_b },
    )
}

impl Channel for InProcessChannel {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.tx
            .send(frame.to_vec())
            .map_err(|_| Error::Protocol("peer endpoint closed".into()))
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>> {
        match timeout {
            None => self
                .rx
                .recv()
                .map_err(|_| Error::Protocol("peer endpoint closed".into())),
            Some(limit) => self.rx.recv_timeout(limit).map_err(|e| match e {
                mpsc::RecvTimeoutError::Timeout => {
                    Error::Protocol("timed out waiting for a frame".into())
                }
                mpsc::RecvTimeoutError::Disconnected => {
                    Error::Protocol("peer endpoint closed".into())
                }
            }),
        }
    }
}

/// TCP channel endpoint; frames are written verbatim and reassembled from
/// the 9-byte header on read.
pub struct TcpChannel {
    stream: TcpStream,
}

impl TcpChannel {
    pub fn new(stream: TcpStream) -> Self {
        TcpChannel { stream }
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        Ok(TcpChannel {
            stream: TcpStream::connect(addr)?,
        })
    }
}

impl Channel for TcpChannel {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.stream.write_all(frame)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>> {
        self.stream.set_read_timeout(timeout)?;
        let mut header = [0u8; 9];
        self.stream.read_exact(&mut header)?;
        if header[..4] != MAGIC {
            return Err(Error::Protocol(format!(
                "bad frame magic {:02x?}",
                &header[..4]
            )));
        }
        let len = u32::from_le_bytes(header[5..9].try_into().expect("4 bytes")) as usize;
        let mut frame = vec![0u8; 9 + len];
        frame[..9].copy_from_slice(&header);
        self.stream.read_exact(&mut frame[9..])?;
        Ok(frame)
    }
}
