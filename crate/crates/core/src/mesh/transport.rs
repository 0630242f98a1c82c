//! Byte-stream transports: TCP for deployments, in-memory pipes for
//! single-process runs. Both carry the same frames.

use std::collections::HashMap;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

pub type Reader = Box<dyn Read + Send>;
pub type Writer = Box<dyn Write + Send>;

pub struct Duplex {
    pub reader: Reader,
    pub writer: Writer,
    pub peer: String,
}

pub trait Listener: Send {
    /// Waits up to `timeout` for one inbound connection.
    fn accept_timeout(&self, timeout: Duration) -> Result<Option<Duplex>>;
}

pub trait Network: Send + Sync {
    fn listen(&self, addr: &str) -> Result<Box<dyn Listener>>;
    /// One connection attempt.
    fn connect(&self, addr: &str) -> Result<Duplex>;
}

/// Retries refused connections until `patience` runs out; peers may start in
/// any order.
pub fn connect_with_retry(net: &dyn Network, addr: &str, patience: Duration) -> Result<Duplex> {
    let deadline = Instant::now() + patience;
    loop {
        match net.connect(addr) {
            Ok(d) => return Ok(d),
            Err(Error::Io(e))
                if matches!(
                    e.kind(),
                    ErrorKind::ConnectionRefused | ErrorKind::NotFound | ErrorKind::ConnectionReset
                ) && Instant::now() < deadline =>
            {
                thread::sleep(Duration::from_millis(20));
            }
            Err(Error::Io(e)) => {
                return Err(Error::Io(io::Error::new(
                    e.kind(),
                    format!("cannot reach {addr}: {e}"),
                )))
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TcpNetwork;

struct TcpWriter(TcpStream);

impl Write for TcpWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()
    }
}

impl Drop for TcpWriter {
    fn drop(&mut self) {
        // Also wakes our own reader thread.
        let _ = self.0.shutdown(Shutdown::Both);
    }
}

fn tcp_duplex(stream: TcpStream) -> Result<Duplex> {
    stream.set_nodelay(true)?;
    let peer = stream
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "?".into());
    let reader = stream.try_clone()?;
    Ok(Duplex {
        reader: Box::new(reader),
        writer: Box::new(TcpWriter(stream)),
        peer,
    })
}

struct TcpListenerHandle(TcpListener);

impl Listener for TcpListenerHandle {
    fn accept_timeout(&self, timeout: Duration) -> Result<Option<Duplex>> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.0.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    return tcp_duplex(stream).map(Some);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Ok(None);
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Network for TcpNetwork {
    fn listen(&self, addr: &str) -> Result<Box<dyn Listener>> {
        let l = TcpListener::bind(addr)
            .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("cannot bind {addr}: {e}"))))?;
        l.set_nonblocking(true)?;
        Ok(Box::new(TcpListenerHandle(l)))
    }

    fn connect(&self, addr: &str) -> Result<Duplex> {
        tcp_duplex(TcpStream::connect(addr)?)
    }
}

/// Every chunk written through an in-memory network, tagged with the
/// destination address of the connection it travelled on.
pub type Capture = Arc<Mutex<Vec<(String, Vec<u8>)>>>;

struct PipeReader {
    rx: Receiver<Vec<u8>>,
    buf: Vec<u8>,
    pos: usize,
}

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if self.pos == self.buf.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.buf = chunk;
                    self.pos = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

struct PipeWriter {
    tx: Sender<Vec<u8>>,
    capture: Option<(Capture, String)>,
}

impl Write for PipeWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if let Some((cap, label)) = &self.capture {
            cap.lock().unwrap().push((label.clone(), buf.to_vec()));
        }
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(ErrorKind::BrokenPipe, "peer closed"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

type Registry = Arc<Mutex<HashMap<String, Sender<Duplex>>>>;

/// Process-local network keyed by address strings.
#[derive(Clone, Default)]
pub struct MemNetwork {
    listeners: Registry,
    capture: Option<Capture>,
}

impl MemNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records every byte written on any connection.
    pub fn with_capture() -> (Self, Capture) {
        let cap: Capture = Arc::default();
        (
            Self {
                listeners: Arc::default(),
                capture: Some(cap.clone()),
            },
            cap,
        )
    }

    fn pipe(&self, label: &str) -> (PipeWriter, PipeReader) {
        let (tx, rx) = mpsc::channel();
        (
            PipeWriter {
                tx,
                capture: self.capture.clone().map(|c| (c, label.to_string())),
            },
            PipeReader {
                rx,
                buf: Vec::new(),
                pos: 0,
            },
        )
    }
}

struct MemListener {
    addr: String,
    rx: Receiver<Duplex>,
    registry: Registry,
}

impl Listener for MemListener {
    fn accept_timeout(&self, timeout: Duration) -> Result<Option<Duplex>> {
        match self.rx.recv_timeout(timeout) {
            Ok(d) => Ok(Some(d)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Closed),
        }
    }
}

impl Drop for MemListener {
    fn drop(&mut self) {
        self.registry.lock().unwrap().remove(&self.addr);
    }
}

impl Network for MemNetwork {
    fn listen(&self, addr: &str) -> Result<Box<dyn Listener>> {
        let mut reg = self.listeners.lock().unwrap();
        if reg.contains_key(addr) {
            return Err(Error::Io(io::Error::new(
                ErrorKind::AddrInUse,
                format!("{addr} already bound"),
            )));
        }
        let (tx, rx) = mpsc::channel();
        reg.insert(addr.to_string(), tx);
        Ok(Box::new(MemListener {
            addr: addr.to_string(),
            rx,
            registry: self.listeners.clone(),
        }))
    }

    fn connect(&self, addr: &str) -> Result<Duplex> {
        let acceptor = self
            .listeners
            .lock()
            .unwrap()
            .get(addr)
            .cloned()
            .ok_or_else(|| {
                Error::Io(io::Error::new(ErrorKind::ConnectionRefused, "no listener"))
            })?;
        let (to_server, server_in) = self.pipe(addr);
        let (to_client, client_in) = self.pipe(&format!("reply:{addr}"));
        acceptor
            .send(Duplex {
                reader: Box::new(server_in),
                writer: Box::new(to_client),
                peer: "mem-client".into(),
            })
            .map_err(|_| Error::Io(io::Error::new(ErrorKind::ConnectionRefused, "listener gone")))?;
        Ok(Duplex {
            reader: Box::new(client_in),
            writer: Box::new(to_server),
            peer: addr.to_string(),
        })
    }
}
