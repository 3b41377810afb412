//! WebSocket gateway: streams snapshots to viewers and turns the steering client's
//! messages into engine events.
//!
//! Each message is one JSON text frame of the form `{"type": ..., "payload": ...}`.
//! The first client to send `hello` owns steering; later clients are read-only.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam::channel::{unbounded, Sender};
use crossbeam::queue::ArrayQueue;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tungstenite::{Message, WebSocket};

use crate::control::Gains;
use crate::sim::{ChannelSource, Engine, RunOptions, RunSummary, Scenario, SimError, SimSnapshot, SteerAction, LIVE_EMIT_EVERY};

/// Outbound snapshots buffered per session before the oldest are dropped.
pub const SESSION_QUEUE: usize = 64;
const POLL: Duration = Duration::from_millis(5);
const WRITE_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerHello {
    pub digest: String,
    /// Whether this session may steer.
    pub steering: bool,
    pub dt: f64,
    pub emit_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "lowercase")]
pub enum WireMessage {
    State(Box<SimSnapshot>),
    /// Heading change in radians.
    Steer { delta: f64 },
    /// Absolute commanded speed in m/s.
    Speed { v_cmd: f64 },
    Gains(Gains),
    Pause,
    Resume,
    Reset,
    /// Empty from clients; the server's reply carries [`ServerHello`].
    Hello(Option<ServerHello>),
    Error { message: String },
}

impl WireMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }

    /// Parses one frame. A missing `payload` is read as `null`.
    pub fn parse(text: &str) -> Result<WireMessage, String> {
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("malformed JSON: {e}"))?;
        let obj = value.as_object_mut().ok_or("message must be a JSON object")?;
        let kind = obj.get("type").and_then(|t| t.as_str()).ok_or("message lacks a string `type`")?.to_owned();
        if !obj.contains_key("payload") && !matches!(kind.as_str(), "pause" | "resume" | "reset") {
            obj.insert("payload".into(), serde_json::Value::Null);
        }
        serde_json::from_value(value).map_err(|e| format!("bad `{kind}` message: {e}"))
    }

    /// The engine action a client message requests, if any.
    pub fn action(&self) -> Option<SteerAction> {
        match *self {
            WireMessage::Steer { delta } => Some(SteerAction::HeadingDelta(delta)),
            WireMessage::Speed { v_cmd } => Some(SteerAction::SetSpeed(v_cmd)),
            WireMessage::Gains(g) => Some(SteerAction::SetGains(g)),
            WireMessage::Pause => Some(SteerAction::Pause),
            WireMessage::Resume => Some(SteerAction::Resume),
            WireMessage::Reset => Some(SteerAction::Reset),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Scenario(#[from] SimError),
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub real_time: bool,
    pub emit_every: u64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { real_time: true, emit_every: LIVE_EMIT_EVERY }
    }
}

struct Hub {
    hello: ServerHello,
    latest: Mutex<Arc<str>>,
    sessions: Mutex<Vec<Arc<ArrayQueue<Arc<str>>>>>,
    owner: Mutex<Option<u64>>,
    events: Sender<SteerAction>,
    engine_done: AtomicBool,
    last_k: AtomicU64,
    stop: Arc<AtomicBool>,
}

impl Hub {
    fn broadcast(&self, snapshot: &SimSnapshot) {
        let text: Arc<str> = WireMessage::State(Box::new(snapshot.clone())).to_json().into();
        self.last_k.store(snapshot.k, Ordering::Relaxed);
        *self.latest.lock().unwrap() = text.clone();
        for q in self.sessions.lock().unwrap().iter() {
            q.force_push(text.clone());
        }
    }
}

/// A running gateway. Dropping the handle without calling [`ServeHandle::shutdown`]
/// leaves the server threads running.
pub struct ServeHandle {
    addr: SocketAddr,
    hub: Arc<Hub>,
    acceptor: JoinHandle<()>,
    engine: JoinHandle<Result<RunSummary, SimError>>,
}

impl ServeHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Index of the most recently emitted step.
    pub fn last_emitted_step(&self) -> u64 {
        self.hub.last_k.load(Ordering::Relaxed)
    }

    pub fn engine_finished(&self) -> bool {
        self.hub.engine_done.load(Ordering::Relaxed)
    }

    /// Blocks until the acceptor exits, which only happens after shutdown.
    pub fn join(self) -> Result<RunSummary, SimError> {
        let _ = self.acceptor.join();
        self.engine.join().expect("engine thread panicked")
    }

    pub fn shutdown(self) -> Result<RunSummary, SimError> {
        self.hub.stop.store(true, Ordering::Relaxed);
        self.join()
    }
}

pub fn serve(scenario: Scenario, bind: &str) -> Result<ServeHandle, GatewayError> {
    serve_with(scenario, bind, ServeOptions::default())
}

/// Starts the engine paused and accepts WebSocket clients on `bind`.
pub fn serve_with(scenario: Scenario, bind: &str, options: ServeOptions) -> Result<ServeHandle, GatewayError> {
    let dt = scenario.dt;
    let mut engine = Engine::new(scenario)?;
    let bind_err = |source| GatewayError::Bind { addr: bind.to_string(), source };
    let addr = bind
        .to_socket_addrs()
        .map_err(bind_err)?
        .next()
        .ok_or_else(|| bind_err(std::io::Error::new(ErrorKind::InvalidInput, "no address")))?;
    let listener = TcpListener::bind(addr).map_err(bind_err)?;
    listener.set_nonblocking(true).map_err(bind_err)?;
    let addr = listener.local_addr().map_err(bind_err)?;

    let (tx, rx) = unbounded();
    let stop = Arc::new(AtomicBool::new(false));
    let initial: Arc<str> = WireMessage::State(Box::new(engine.snapshot())).to_json().into();
    let hub = Arc::new(Hub {
        hello: ServerHello { digest: engine.digest().to_string(), steering: false, dt, emit_every: options.emit_every },
        latest: Mutex::new(initial),
        sessions: Mutex::new(Vec::new()),
        owner: Mutex::new(None),
        events: tx,
        engine_done: AtomicBool::new(false),
        last_k: AtomicU64::new(0),
        stop: stop.clone(),
    });

    let engine_hub = hub.clone();
    let engine = std::thread::spawn(move || {
        let mut source = ChannelSource::new(rx, engine_hub.stop.clone());
        let mut sink = |s: &SimSnapshot| engine_hub.broadcast(s);
        let run = RunOptions { start_paused: true, real_time: options.real_time, emit_every: Some(options.emit_every) };
        let result = engine.run(&mut sink, Some(&mut source), &run);
        engine_hub.engine_done.store(true, Ordering::Relaxed);
        result
    });

    let accept_hub = hub.clone();
    let acceptor = std::thread::spawn(move || {
        let mut sessions = Vec::new();
        let mut next_id = 0u64;
        while !accept_hub.stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let hub = accept_hub.clone();
                    let id = next_id;
                    next_id += 1;
                    sessions.push(std::thread::spawn(move || session(stream, id, hub)));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
                Err(_) => std::thread::sleep(POLL),
            }
            sessions.retain(|h: &JoinHandle<()>| !h.is_finished());
        }
        for h in sessions {
            let _ = h.join();
        }
    });

    Ok(ServeHandle { addr, hub, acceptor, engine })
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn session(stream: TcpStream, id: u64, hub: Arc<Hub>) {
    if stream.set_nonblocking(false).is_err() {
        return;
    }
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(_) => return,
    };
    if ws.get_ref().set_read_timeout(Some(POLL)).is_err() || ws.get_ref().set_write_timeout(Some(WRITE_TIMEOUT)).is_err() {
        return;
    }
    let queue: Arc<ArrayQueue<Arc<str>>> = Arc::new(ArrayQueue::new(SESSION_QUEUE));
    let mut registered = false;
    let send = |ws: &mut WebSocket<TcpStream>, text: String| ws.send(Message::text(text)).is_ok();

    while !hub.stop.load(Ordering::Relaxed) {
        while let Some(text) = queue.pop() {
            if !send(&mut ws, text.to_string()) {
                return;
            }
        }
        let msg = match ws.read() {
            Ok(m) => m,
            Err(e) if is_timeout(&e) => continue,
            Err(_) => break,
        };
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match WireMessage::parse(&text) {
            Err(message) => Some(WireMessage::Error { message }),
            Ok(WireMessage::Hello(_)) => {
                let steering = {
                    let mut owner = hub.owner.lock().unwrap();
                    *owner.get_or_insert(id) == id
                };
                let hello = WireMessage::Hello(Some(ServerHello { steering, ..hub.hello.clone() }));
                let latest = hub.latest.lock().unwrap().to_string();
                if !send(&mut ws, hello.to_json()) || !send(&mut ws, latest) {
                    return;
                }
                if !registered {
                    hub.sessions.lock().unwrap().push(queue.clone());
                    registered = true;
                }
                None
            }
            Ok(msg) => match msg.action() {
                None => Some(WireMessage::Error { message: "servers only accept control messages and hello".into() }),
                Some(_) if *hub.owner.lock().unwrap() != Some(id) => {
                    Some(WireMessage::Error { message: "this session is read-only; send hello first or wait for the steering client".into() })
                }
                Some(action) => match action.validate() {
                    Err(message) => Some(WireMessage::Error { message }),
                    Ok(()) if hub.engine_done.load(Ordering::Relaxed) => {
                        Some(WireMessage::Error { message: "the simulation has ended".into() })
                    }
                    Ok(()) => hub
                        .events
                        .send(action)
                        .err()
                        .map(|_| WireMessage::Error { message: "the simulation has ended".into() }),
                },
            },
        };
        if let Some(r) = reply {
            if !send(&mut ws, r.to_json()) {
                break;
            }
        }
    }
    hub.sessions.lock().unwrap().retain(|q| !Arc::ptr_eq(q, &queue));
    let _ = ws.close(None);
    let _ = ws.flush();
}
