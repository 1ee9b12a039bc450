//! Length-prefixed frames over TCP.
//!
//! The server dials each silo; one reader thread per connection feeds a
//! shared channel that [`TcpLink::recv_until`] drains with a timeout.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::silo::{SiloConnection, SiloService};
use super::{read_frame, write_frame, Inbound, Link, ProtocolError};
use crate::clock::{Clock, SystemClock};

pub struct TcpLink {
    writers: HashMap<String, BufWriter<TcpStream>>,
    rx: Receiver<Inbound>,
    // Keeps the channel open after every reader has exited.
    _tx: Sender<Inbound>,
    clock: SystemClock,
}

impl TcpLink {
    /// Dials every `(client_id, address)`. Unreachable peers are returned
    /// alongside the link and behave as non-responders.
    pub fn connect(
        peers: &[(String, String)],
        connect_timeout: Duration,
    ) -> (Self, Vec<(String, io::Error)>) {
        let (tx, rx) = mpsc::channel();
        let mut writers = HashMap::new();
        let mut failures = Vec::new();
        for (id, addr) in peers {
            match dial(addr, connect_timeout) {
                Ok(stream) => match stream.try_clone() {
                    Ok(read_half) => {
                        spawn_reader(id.clone(), read_half, tx.clone());
                        writers.insert(id.clone(), BufWriter::new(stream));
                    }
                    Err(e) => failures.push((id.clone(), e)),
                },
                Err(e) => {
                    tracing::warn!(client = %id, %addr, error = %e, "cannot connect to silo");
                    failures.push((id.clone(), e));
                }
            }
        }
        let link = Self {
            writers,
            rx,
            _tx: tx,
            clock: SystemClock::new(),
        };
        (link, failures)
    }
}

fn dial(addr: &str, timeout: Duration) -> io::Result<TcpStream> {
    let mut last = io::Error::new(io::ErrorKind::NotFound, "address resolved to nothing");
    for sa in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&sa, timeout) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn spawn_reader(peer: String, stream: TcpStream, tx: Sender<Inbound>) {
    thread::spawn(move || {
        let mut reader = BufReader::new(stream);
        loop {
            match read_frame(&mut reader) {
                Ok(Some(bytes)) => {
                    if tx.send(Inbound { from: peer.clone(), bytes }).is_err() {
                        return;
                    }
                }
                Ok(None) => return,
                Err(e) => {
                    tracing::warn!(peer = %peer, error = %e, "connection closed");
                    return;
                }
            }
        }
    });
}

impl Link for TcpLink {
    fn send(&mut self, to: &str, bytes: &[u8]) -> Result<(), ProtocolError> {
        let w = self
            .writers
            .get_mut(to)
            .ok_or_else(|| ProtocolError::Transport(format!("no connection to {to}")))?;
        write_frame(w, bytes).map_err(|e| ProtocolError::Transport(e.to_string()))
    }

    fn recv_until(&mut self, deadline_ms: u64) -> Option<Inbound> {
        let now = self.clock.now_ms();
        if now >= deadline_ms {
            return self.rx.try_recv().ok();
        }
        self.rx.recv_timeout(Duration::from_millis(deadline_ms - now)).ok()
    }

    fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }
}

/// Serves frames on one connection until the peer hangs up.
pub fn serve_connection(stream: TcpStream, mut conn: SiloConnection) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(frame) = read_frame(&mut reader)? {
        for out in conn.handle(&frame) {
            write_frame(&mut writer, &out)?;
        }
    }
    Ok(())
}

/// A running silo listener; each accepted connection gets its own thread
/// and connection state.
pub struct SiloListener {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl SiloListener {
    pub fn spawn(listener: TcpListener, service: Arc<SiloService>) -> io::Result<Self> {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let stream = match stream {
                    Ok(s) => s,
                    Err(e) => {
                        tracing::warn!(error = %e, "accept failed");
                        continue;
                    }
                };
                let conn = service.connection(ChaCha20Rng::from_entropy());
                let client = service.client_id().to_string();
                thread::spawn(move || {
                    if let Err(e) = serve_connection(stream, conn) {
                        tracing::warn!(client = %client, error = %e, "connection ended");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the listener stops.
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting new connections. Open connections run until their
    /// peer hangs up.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Ok(s) = TcpStream::connect(self.addr) {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
