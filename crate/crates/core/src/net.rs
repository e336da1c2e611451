//! TCP transport for live runs: a base-station server and a vehicle client
//! speaking the same wire frames as the simulator.
//!
//! Concurrency model: each connection gets a reader thread that forwards
//! frames into one mpsc queue; a single service thread owns the station
//! state, so registry, escrow, and audit mutations stay serialized. Replies
//! travel back through per-connection writer handles. Audit records flush
//! per line, so an interrupted process always leaves a valid log prefix.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::addressing::AddressPool;
use crate::domain::{HazardReport, VehicleId};
use crate::keyfile::KeyRecord;
use crate::obu::{Obu, ReportOutcome};
use crate::policy::PolicyTable;
use crate::rsu::{AuditLog, ClientRecord, Rsu, RsuConfig};
use crate::wire::{FRAME_HEADER_LEN, MAX_BODY_LEN};

/// Default TCP port for the live wire protocol.
pub const DEFAULT_PORT: u16 = 5600;

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("system clock after the epoch")
        .as_millis() as u64
}

/// Reads one length-prefixed frame off a stream. The header is fixed-width,
/// so a short read is either clean EOF (None) or an error.
pub fn read_frame(stream: &mut TcpStream) -> std::io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let mut filled = 0;
    while filled < header.len() {
        match stream.read(&mut header[filled..]) {
            Ok(0) => {
                return if filled == 0 {
                    Ok(None)
                } else {
                    Err(std::io::Error::new(
                        std::io::ErrorKind::UnexpectedEof,
                        "eof mid-header",
                    ))
                };
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let length = u32::from_be_bytes(header[4..8].try_into().unwrap()) as usize;
    if length > MAX_BODY_LEN {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "frame body over the cap",
        ));
    }
    let mut frame = vec![0u8; FRAME_HEADER_LEN + length];
    frame[..FRAME_HEADER_LEN].copy_from_slice(&header);
    stream.read_exact(&mut frame[FRAME_HEADER_LEN..])?;
    Ok(Some(frame))
}

pub fn write_frame(stream: &mut TcpStream, frame: &[u8]) -> std::io::Result<()> {
    stream.write_all(frame)?;
    stream.flush()
}

enum ServiceMsg {
    Inbound { conn: u64, frame: Vec<u8> },
    Connected { conn: u64, writer: TcpStream },
    Disconnected { conn: u64 },
    Shutdown,
}

/// Options for [`rsu_serve`].
pub struct RsuServeOptions {
    pub port: u16,
    pub records: Vec<KeyRecord>,
    pub policy: PolicyTable,
    pub config: RsuConfig,
    pub addr_pool: AddressPool,
    pub audit_path: Option<PathBuf>,
}

/// Handle to a running base-station server.
pub struct RsuServer {
    local_addr: SocketAddr,
    tx: mpsc::Sender<ServiceMsg>,
    stop: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
    service_thread: Option<std::thread::JoinHandle<Rsu>>,
    registry_snapshot: Arc<Mutex<Vec<ClientRecord>>>,
}

impl RsuServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Immutable snapshot of the current client list, safe to read while
    /// the service runs.
    pub fn registry(&self) -> Vec<ClientRecord> {
        self.registry_snapshot
            .lock()
            .expect("snapshot lock")
            .clone()
    }

    /// Stops the server, joins all threads, and returns the station state
    /// (registry, audit evidence, escrow). The audit file (if any) has been
    /// flushed per record all along.
    pub fn shutdown(mut self) -> Rsu {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.tx.send(ServiceMsg::Shutdown);
        // Unblock accept with a throwaway connection.
        let _ = TcpStream::connect(self.local_addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
        self.service_thread
            .take()
            .expect("service thread present")
            .join()
            .expect("service thread exits cleanly")
    }
}

/// Starts a live base station on `port` (0 picks a free port).
pub fn rsu_serve(options: RsuServeOptions) -> std::io::Result<RsuServer> {
    let listener = TcpListener::bind(("127.0.0.1", options.port))?;
    let local_addr = listener.local_addr()?;
    let audit = match &options.audit_path {
        Some(path) => AuditLog::with_file(path)?,
        None => AuditLog::new(),
    };
    let rsu = Rsu::new(
        options.config,
        options.policy,
        &options.records,
        options.addr_pool,
        audit,
        ChaCha20Rng::from_entropy(),
    )
    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;

    let (tx, rx) = mpsc::channel::<ServiceMsg>();
    let stop = Arc::new(AtomicBool::new(false));
    let registry_snapshot = Arc::new(Mutex::new(Vec::new()));

    let service_stop = stop.clone();
    let service_snapshot = registry_snapshot.clone();
    let service_thread =
        std::thread::spawn(move || run_service(rsu, rx, service_stop, service_snapshot));

    let accept_tx = tx.clone();
    let accept_stop = stop.clone();
    let accept_thread = std::thread::spawn(move || {
        let mut next_conn: u64 = 0;
        for stream in listener.incoming() {
            if accept_stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let conn = next_conn;
            next_conn += 1;
            let writer = match stream.try_clone() {
                Ok(w) => w,
                Err(_) => continue,
            };
            if accept_tx
                .send(ServiceMsg::Connected { conn, writer })
                .is_err()
            {
                break;
            }
            let reader_tx = accept_tx.clone();
            let mut reader = stream;
            std::thread::spawn(move || {
                loop {
                    match read_frame(&mut reader) {
                        Ok(Some(frame)) => {
                            if reader_tx.send(ServiceMsg::Inbound { conn, frame }).is_err() {
                                break;
                            }
                        }
                        Ok(None) | Err(_) => break,
                    }
                }
                let _ = reader_tx.send(ServiceMsg::Disconnected { conn });
            });
        }
    });

    Ok(RsuServer {
        local_addr,
        tx,
        stop,
        accept_thread: Some(accept_thread),
        service_thread: Some(service_thread),
        registry_snapshot,
    })
}

fn run_service(
    mut rsu: Rsu,
    rx: mpsc::Receiver<ServiceMsg>,
    stop: Arc<AtomicBool>,
    snapshot: Arc<Mutex<Vec<ClientRecord>>>,
) -> Rsu {
    let mut writers: HashMap<u64, TcpStream> = HashMap::new();
    loop {
        match rx.recv_timeout(Duration::from_millis(200)) {
            Ok(ServiceMsg::Connected { conn, writer }) => {
                writers.insert(conn, writer);
            }
            Ok(ServiceMsg::Disconnected { conn }) => {
                writers.remove(&conn);
                rsu.on_disconnect(&conn.to_string());
            }
            Ok(ServiceMsg::Inbound { conn, frame }) => {
                let now = unix_ms();
                let replies = rsu.handle_frame(&conn.to_string(), &frame, now);
                for out in replies {
                    if let Ok(id) = out.to.parse::<u64>() {
                        if let Some(writer) = writers.get_mut(&id) {
                            let _ = write_frame(writer, &out.bytes);
                        }
                    }
                }
                for out in rsu.flush_broadcasts(now) {
                    if let Ok(id) = out.to.parse::<u64>() {
                        if let Some(writer) = writers.get_mut(&id) {
                            let _ = write_frame(writer, &out.bytes);
                        }
                    }
                }
                if rsu.take_registry_dirty() {
                    for out in rsu.send_peer_lists(now) {
                        if let Ok(id) = out.to.parse::<u64>() {
                            if let Some(writer) = writers.get_mut(&id) {
                                let _ = write_frame(writer, &out.bytes);
                            }
                        }
                    }
                    *snapshot.lock().expect("snapshot lock") = rsu.list_clients();
                }
                rsu.take_events();
            }
            Ok(ServiceMsg::Shutdown) => break,
            Err(mpsc::RecvTimeoutError::Timeout) => {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                if !rsu.expire_stale_clients(unix_ms()).is_empty() {
                    rsu.take_registry_dirty();
                    *snapshot.lock().expect("snapshot lock") = rsu.list_clients();
                }
                rsu.take_events();
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
    rsu
}

/// Options for [`obu_join`].
pub struct ObuJoinOptions {
    pub host: String,
    pub port: u16,
    pub record: KeyRecord,
    pub license: String,
    pub name: String,
    pub speed_mps: f64,
}

/// Errors a live client can report.
#[derive(Debug, thiserror::Error)]
pub enum ObuJoinError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("authentication rejected")]
    BadCredentials,
    #[error("registration did not complete in time")]
    Timeout,
}

/// Handle to a running vehicle client.
pub struct ObuClient {
    obu: Arc<Mutex<Obu>>,
    stream: TcpStream,
    stop: Arc<AtomicBool>,
    reader_thread: Option<std::thread::JoinHandle<()>>,
    vehicle_id: VehicleId,
}

impl ObuClient {
    pub fn vehicle_id(&self) -> &VehicleId {
        &self.vehicle_id
    }

    pub fn is_registered(&self) -> bool {
        self.obu.lock().expect("client lock").is_registered()
    }

    pub fn address(&self) -> Option<String> {
        self.obu
            .lock()
            .expect("client lock")
            .address()
            .map(String::from)
    }

    pub fn hazards_json(&self) -> String {
        self.obu.lock().expect("client lock").hazards_json()
    }

    pub fn hazard_count(&self) -> usize {
        self.obu.lock().expect("client lock").hazards().len()
    }

    /// Seals and transmits a hazard report.
    pub fn report_hazard(&mut self, report: HazardReport) -> std::io::Result<bool> {
        let outcome = {
            let mut obu = self.obu.lock().expect("client lock");
            obu.report_hazard(report, unix_ms())
        };
        match outcome {
            ReportOutcome::Sent(frame) => {
                write_frame(&mut self.stream, &frame)?;
                Ok(true)
            }
            ReportOutcome::QueuedOffline => Ok(false),
        }
    }

    /// Sends a beacon now (the live loop also beacons on the cadence).
    pub fn beacon(&mut self) -> std::io::Result<()> {
        let frame = {
            let mut obu = self.obu.lock().expect("client lock");
            if !obu.is_registered() {
                return Ok(());
            }
            let frames = obu.tick(unix_ms());
            frames.into_iter().next()
        };
        if let Some(frame) = frame {
            write_frame(&mut self.stream, &frame)?;
        }
        Ok(())
    }

    /// Disconnects cleanly.
    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
        if let Some(t) = self.reader_thread.take() {
            let _ = t.join();
        }
        Ok(())
    }
}

/// Connects, authenticates, and registers a vehicle against a live station.
/// Returns once REGISTERED or fails within the timeout.
pub fn obu_join(options: ObuJoinOptions) -> Result<ObuClient, ObuJoinError> {
    let vehicle_id = options.record.id.clone();
    let mut obu = Obu::new(
        options.record,
        options.license,
        options.name,
        ChaCha20Rng::from_entropy(),
    );
    obu.set_kinematics(options.speed_mps, [0.0, 0.0]);
    let mut stream = TcpStream::connect((options.host.as_str(), options.port))?;
    stream.set_nodelay(true).ok();

    for frame in obu.on_enter_range(unix_ms()) {
        write_frame(&mut stream, &frame)?;
    }
    let obu = Arc::new(Mutex::new(obu));
    let stop = Arc::new(AtomicBool::new(false));

    let reader_obu = obu.clone();
    let reader_stop = stop.clone();
    let mut reader_stream = stream.try_clone()?;
    let mut writer_stream = stream.try_clone()?;
    let reader_thread = std::thread::spawn(move || loop {
        if reader_stop.load(Ordering::SeqCst) {
            break;
        }
        match read_frame(&mut reader_stream) {
            Ok(Some(frame)) => {
                let responses = {
                    let mut obu = reader_obu.lock().expect("client lock");
                    obu.handle_frame(&frame, unix_ms())
                };
                for response in responses {
                    if write_frame(&mut writer_stream, &response).is_err() {
                        return;
                    }
                }
            }
            Ok(None) | Err(_) => break,
        }
    });

    // Wait for registration (or credential rejection).
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    loop {
        {
            let guard = obu.lock().expect("client lock");
            if guard.is_registered() {
                break;
            }
            if guard.credentials_rejected() {
                stop.store(true, Ordering::SeqCst);
                let _ = stream.shutdown(std::net::Shutdown::Both);
                let _ = reader_thread.join();
                return Err(ObuJoinError::BadCredentials);
            }
        }
        if std::time::Instant::now() > deadline {
            stop.store(true, Ordering::SeqCst);
            let _ = stream.shutdown(std::net::Shutdown::Both);
            let _ = reader_thread.join();
            return Err(ObuJoinError::Timeout);
        }
        std::thread::sleep(Duration::from_millis(10));
    }

    Ok(ObuClient {
        obu,
        stream,
        stop,
        reader_thread: Some(reader_thread),
        vehicle_id,
    })
}

/// Live client loop for the CLI: beacons until the process is interrupted.
pub fn obu_beacon_loop(
    client: &mut ObuClient,
    interval: Duration,
    rounds: Option<u64>,
) -> std::io::Result<()> {
    let mut sent = 0u64;
    loop {
        if let Some(max) = rounds {
            if sent >= max {
                return Ok(());
            }
        }
        client.beacon()?;
        sent += 1;
        std::thread::sleep(interval);
    }
}
