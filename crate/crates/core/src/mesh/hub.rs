//! Per-node event loop plumbing: reader threads feed one channel, writes go
//! out on the owning thread.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, trace};

use super::transport::{Duplex, Listener, Reader, Writer};
use super::wire::{decode_body, read_frame, write_frame, WireMessage};
use crate::error::{Error, Result};

pub type ConnId = usize;

pub enum Event {
    Accepted {
        conn: ConnId,
        writer: Writer,
        peer: String,
    },
    /// A decoded message and the exact body bytes it arrived as.
    Message {
        conn: ConnId,
        msg: WireMessage,
        raw: Vec<u8>,
    },
    Closed {
        conn: ConnId,
        error: Option<Error>,
    },
}

pub struct Hub {
    name: String,
    tx: Sender<Event>,
    rx: Receiver<Event>,
    writers: HashMap<ConnId, Writer>,
    backlog: VecDeque<Event>,
    next_id: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    max_frame: usize,
}

fn spawn_reader(name: String, conn: ConnId, mut reader: Reader, tx: Sender<Event>, max_frame: usize) {
    thread::Builder::new()
        .name(format!("{name}-rx{conn}"))
        .spawn(move || loop {
            let event = match read_frame(&mut reader, max_frame) {
                Ok(Some(raw)) => match decode_body(&raw) {
                    Ok(msg) => Event::Message { conn, msg, raw },
                    Err(e) => Event::Closed { conn, error: Some(e) },
                },
                Ok(None) => Event::Closed { conn, error: None },
                Err(e) => Event::Closed { conn, error: Some(e) },
            };
            let last = matches!(event, Event::Closed { .. });
            if tx.send(event).is_err() || last {
                return;
            }
        })
        .expect("spawn reader thread");
}

impl Hub {
    pub fn new(name: impl Into<String>, max_frame: usize) -> Self {
        let (tx, rx) = mpsc::channel();
        Self {
            name: name.into(),
            tx,
            rx,
            writers: HashMap::new(),
            backlog: VecDeque::new(),
            next_id: Arc::new(AtomicUsize::new(0)),
            stop: Arc::new(AtomicBool::new(false)),
            max_frame,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Starts servicing an outbound connection.
    pub fn attach(&mut self, duplex: Duplex) -> ConnId {
        let conn = self.next_id.fetch_add(1, Ordering::SeqCst);
        spawn_reader(self.name.clone(), conn, duplex.reader, self.tx.clone(), self.max_frame);
        self.writers.insert(conn, duplex.writer);
        conn
    }

    /// Accepts inbound connections until the hub is dropped.
    pub fn serve(&self, listener: Box<dyn Listener>) {
        let tx = self.tx.clone();
        let ids = self.next_id.clone();
        let stop = self.stop.clone();
        let name = self.name.clone();
        let max_frame = self.max_frame;
        thread::Builder::new()
            .name(format!("{name}-accept"))
            .spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match listener.accept_timeout(Duration::from_millis(50)) {
                        Ok(Some(d)) => {
                            let conn = ids.fetch_add(1, Ordering::SeqCst);
                            if tx
                                .send(Event::Accepted {
                                    conn,
                                    writer: d.writer,
                                    peer: d.peer,
                                })
                                .is_err()
                            {
                                return;
                            }
                            spawn_reader(name.clone(), conn, d.reader, tx.clone(), max_frame);
                        }
                        Ok(None) => {}
                        Err(e) => {
                            debug!("{name}: listener stopped: {e}");
                            return;
                        }
                    }
                }
            })
            .expect("spawn accept thread");
    }

    pub fn send(&mut self, conn: ConnId, msg: &WireMessage) -> Result<()> {
        let w = self.writers.get_mut(&conn).ok_or(Error::Closed)?;
        trace!("{} -> conn {conn}: {}", self.name, msg.kind());
        write_frame(w, msg)
    }

    /// Best-effort send used on teardown paths.
    pub fn send_quietly(&mut self, conn: ConnId, msg: &WireMessage) {
        if let Err(e) = self.send(conn, msg) {
            debug!("{}: send to conn {conn} failed: {e}", self.name);
        }
    }

    pub fn close(&mut self, conn: ConnId) {
        self.writers.remove(&conn);
    }

    fn absorb(&mut self, event: Event) -> Option<Event> {
        match event {
            Event::Accepted { conn, writer, peer } => {
                debug!("{}: accepted conn {conn} from {peer}", self.name);
                self.writers.insert(conn, writer);
                None
            }
            other => Some(other),
        }
    }

    /// Next message or close notification, waiting at most `timeout`.
    pub fn next(&mut self, timeout: Duration) -> Result<Option<Event>> {
        if let Some(e) = self.backlog.pop_front() {
            return Ok(Some(e));
        }
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(left) {
                Ok(e) => {
                    if let Some(e) = self.absorb(e) {
                        return Ok(Some(e));
                    }
                }
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => return Err(Error::Closed),
            }
        }
    }

    /// Waits for the next message on `conn`, parking other traffic.
    pub fn next_from(&mut self, conn: ConnId, timeout: Duration) -> Result<WireMessage> {
        if let Some(pos) = self.backlog.iter().position(|e| event_conn(e) == conn) {
            return into_message(self.backlog.remove(pos).unwrap());
        }
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let e = match self.rx.recv_timeout(left) {
                Ok(e) => e,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::Timeout(format!("{}: no reply on conn {conn}", self.name)))
                }
                Err(RecvTimeoutError::Disconnected) => return Err(Error::Closed),
            };
            let Some(e) = self.absorb(e) else { continue };
            if event_conn(&e) == conn {
                return into_message(e);
            }
            self.backlog.push_back(e);
        }
    }

    pub fn connections(&self) -> Vec<ConnId> {
        let mut ids: Vec<ConnId> = self.writers.keys().copied().collect();
        ids.sort_unstable();
        ids
    }
}

impl Drop for Hub {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

fn event_conn(e: &Event) -> ConnId {
    match e {
        Event::Accepted { conn, .. } | Event::Message { conn, .. } | Event::Closed { conn, .. } => *conn,
    }
}

fn into_message(e: Event) -> Result<WireMessage> {
    match e {
        Event::Message {
            msg: WireMessage::Error { reason },
            ..
        } => Err(Error::protocol(format!("peer reported: {reason}"))),
        Event::Message { msg, .. } => Ok(msg),
        Event::Closed { error: Some(e), .. } => Err(e),
        Event::Closed { error: None, .. } => Err(Error::Closed),
        Event::Accepted { .. } => unreachable!("accept events are absorbed"),
    }
}
