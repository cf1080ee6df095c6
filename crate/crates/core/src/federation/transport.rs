//! Server/SU message transports.
//!
//! Both transports run every SU on its own thread holding its private data;
//! only [`ModelBroadcast`] and [`GradientUpload`] messages cross the boundary.

use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::debug;

use super::message::{
    deserialize_message, serialize_message, GradientUpload, Message, ModelBroadcast,
};
use super::{local_rng, local_training, LocalConfig, SecondaryUser};
use crate::error::{Error, Result};

/// Largest accepted socket frame.
pub const MAX_FRAME: usize = 1 << 30;

/// Delivers one broadcast to every SU and collects one upload from each.
pub trait Transport {
    fn su_ids(&self) -> Vec<u32>;

    /// Fails with [`Error::Transport`] if any SU has not answered within `timeout`.
    fn exchange(
        &mut self,
        broadcast: &ModelBroadcast,
        timeout: Duration,
    ) -> Result<Vec<GradientUpload>>;
}

fn serve(su: &SecondaryUser, config: &LocalConfig, b: &ModelBroadcast) -> Result<GradientUpload> {
    let mut rng = local_rng(config.seed, su.id, b.round);
    local_training(su.id, b, &su.data, config, &mut rng)
}

fn check_ids(users: &[SecondaryUser]) -> Result<Vec<u32>> {
    let mut ids: Vec<u32> = users.iter().map(|u| u.id).collect();
    ids.sort_unstable();
    if ids.is_empty() {
        return Err(Error::invalid("federation needs at least one SU"));
    }
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("SU ids must be unique"));
    }
    if let Some(u) = users.iter().find(|u| u.data.is_empty()) {
        return Err(Error::invalid(format!(
            "SU {} has no adaptation samples",
            u.id
        )));
    }
    Ok(ids)
}

struct Job {
    attempt: u64,
    broadcast: Arc<ModelBroadcast>,
}

struct Reply {
    attempt: u64,
    su_id: u32,
    result: std::result::Result<GradientUpload, String>,
}

/// SU threads fed through channels.
pub struct InProcessTransport {
    ids: Vec<u32>,
    jobs: Vec<Sender<Job>>,
    replies: Receiver<Reply>,
    workers: Vec<JoinHandle<()>>,
    attempt: u64,
}

impl InProcessTransport {
    pub fn spawn(users: Vec<SecondaryUser>, config: LocalConfig) -> Result<Self> {
        let ids = check_ids(&users)?;
        let (reply_tx, replies) = mpsc::channel();
        let mut jobs = Vec::with_capacity(users.len());
        let mut workers = Vec::with_capacity(users.len());
        for su in users {
            let (tx, rx) = mpsc::channel::<Job>();
            let reply_tx = reply_tx.clone();
            workers.push(thread::spawn(move || {
                for job in rx {
                    let result = serve(&su, &config, &job.broadcast).map_err(|e| e.to_string());
                    let reply = Reply {
                        attempt: job.attempt,
                        su_id: su.id,
                        result,
                    };
                    if reply_tx.send(reply).is_err() {
                        break;
                    }
                }
            }));
            jobs.push(tx);
        }
        Ok(Self {
            ids,
            jobs,
            replies,
            workers,
            attempt: 0,
        })
    }
}

impl Transport for InProcessTransport {
    fn su_ids(&self) -> Vec<u32> {
        self.ids.clone()
    }

    fn exchange(
        &mut self,
        broadcast: &ModelBroadcast,
        timeout: Duration,
    ) -> Result<Vec<GradientUpload>> {
        self.attempt += 1;
        let shared = Arc::new(broadcast.clone());
        for tx in &self.jobs {
            tx.send(Job {
                attempt: self.attempt,
                broadcast: Arc::clone(&shared),
            })
            .map_err(|_| Error::Transport("SU worker has exited".into()))?;
        }
        let deadline = Instant::now() + timeout;
        let mut uploads: Vec<GradientUpload> = Vec::with_capacity(self.ids.len());
        while uploads.len() < self.ids.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            let reply = match self.replies.recv_timeout(left) {
                Ok(r) => r,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::Transport(format!(
                        "round {}: {} of {} uploads before timeout",
                        broadcast.round,
                        uploads.len(),
                        self.ids.len()
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Transport("SU workers disconnected".into()))
                }
            };
            if reply.attempt != self.attempt {
                debug!("discarding stale reply from SU {}", reply.su_id);
                continue;
            }
            match reply.result {
                Ok(u) => uploads.push(u),
                Err(e) => return Err(Error::Transport(format!("SU {}: {e}", reply.su_id))),
            }
        }
        Ok(uploads)
    }
}

impl Drop for InProcessTransport {
    fn drop(&mut self) {
        self.jobs.clear();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Length-prefixed frames over a stream socket with partial-read buffering,
/// so a timeout never desynchronises the framing.
struct FramedStream {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl FramedStream {
    fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            buf: Vec::new(),
        })
    }

    fn write_frame(&mut self, payload: &[u8]) -> Result<()> {
        let len = u32::try_from(payload.len())
            .ok()
            .filter(|&l| l as usize <= MAX_FRAME)
            .ok_or_else(|| Error::Transport("frame too large".into()))?;
        self.stream.write_all(&len.to_le_bytes())?;
        self.stream.write_all(payload)?;
        self.stream.flush()?;
        Ok(())
    }

    fn take_frame(&mut self) -> Result<Option<Vec<u8>>> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes(self.buf[..4].try_into().expect("4 bytes")) as usize;
        if len > MAX_FRAME {
            return Err(Error::Transport(format!(
                "incoming frame of {len} bytes exceeds the limit"
            )));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let frame = self.buf[4..4 + len].to_vec();
        self.buf.drain(..4 + len);
        Ok(Some(frame))
    }

    /// Next frame, `Ok(None)` on timeout. `deadline = None` blocks.
    fn read_frame(&mut self, deadline: Option<Instant>) -> Result<Option<Vec<u8>>> {
        let mut chunk = [0u8; 64 * 1024];
        loop {
            if let Some(f) = self.take_frame()? {
                return Ok(Some(f));
            }
            match deadline {
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Ok(None);
                    }
                    self.stream.set_read_timeout(Some(left))?;
                }
                None => self.stream.set_read_timeout(None)?,
            }
            match self.stream.read(&mut chunk) {
                Ok(0) => return Err(Error::Transport("connection closed by peer".into())),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Ok(None)
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

fn su_socket_loop(su: SecondaryUser, config: LocalConfig, mut conn: FramedStream) {
    loop {
        let frame = match conn.read_frame(None) {
            Ok(Some(f)) => f,
            _ => return,
        };
        let reply = match deserialize_message(&frame) {
            Ok(Message::Broadcast(b)) => serve(&su, &config, &b),
            Ok(Message::Upload(_)) => Err(Error::ProtocolViolation("SU received an upload".into())),
            Err(e) => Err(e),
        };
        match reply {
            Ok(u) => {
                if conn
                    .write_frame(&serialize_message(&Message::Upload(u)))
                    .is_err()
                {
                    return;
                }
            }
            Err(e) => {
                log::error!("SU {} stopping: {e}", su.id);
                return;
            }
        }
    }
}

/// SU threads connected to the server over loopback TCP. Weights travel as float32.
pub struct SocketTransport {
    ids: Vec<u32>,
    conns: Vec<FramedStream>,
    workers: Vec<JoinHandle<()>>,
}

impl SocketTransport {
    pub fn spawn_local(users: Vec<SecondaryUser>, config: LocalConfig) -> Result<Self> {
        check_ids(&users)?;
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let mut conns = Vec::with_capacity(users.len());
        let mut workers = Vec::with_capacity(users.len());
        let mut ids = Vec::with_capacity(users.len());
        for su in users {
            ids.push(su.id);
            let client = TcpStream::connect(addr)?;
            let (server_side, _) = listener.accept()?;
            let client = FramedStream::new(client)?;
            workers.push(thread::spawn(move || su_socket_loop(su, config, client)));
            conns.push(FramedStream::new(server_side)?);
        }
        Ok(Self {
            ids,
            conns,
            workers,
        })
    }
}

impl Transport for SocketTransport {
    fn su_ids(&self) -> Vec<u32> {
        self.ids.clone()
    }

    fn exchange(
        &mut self,
        broadcast: &ModelBroadcast,
        timeout: Duration,
    ) -> Result<Vec<GradientUpload>> {
        let bytes = serialize_message(&Message::Broadcast(broadcast.clone()));
        for c in &mut self.conns {
            c.write_frame(&bytes)?;
        }
        let deadline = Instant::now() + timeout;
        let mut uploads = Vec::with_capacity(self.conns.len());
        for (c, &id) in self.conns.iter_mut().zip(&self.ids) {
            loop {
                let frame = c.read_frame(Some(deadline))?.ok_or_else(|| {
                    Error::Transport(format!("round {}: SU {id} timed out", broadcast.round))
                })?;
                match deserialize_message(&frame)? {
                    Message::Upload(u) if u.round < broadcast.round => {
                        debug!("discarding stale upload from SU {id} for round {}", u.round);
                    }
                    Message::Upload(u) if u.round == broadcast.round && u.su_id == id => {
                        uploads.push(u);
                        break;
                    }
                    Message::Upload(u) => {
                        return Err(Error::ProtocolViolation(format!(
                            "connection of SU {id} delivered SU {} round {}",
                            u.su_id, u.round
                        )))
                    }
                    Message::Broadcast(_) => {
                        return Err(Error::ProtocolViolation(
                            "server received a broadcast".into(),
                        ))
                    }
                }
            }
        }
        Ok(uploads)
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        for c in &self.conns {
            let _ = c.stream.shutdown(Shutdown::Both);
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_model::OccupancyVector;
    use crate::tensornet::{
        init_weights, DropoutRates, LabeledDataset, Padding, Sample, Tensor, WssNetSpec,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelBroadcast, Vec<SecondaryUser>, LocalConfig) {
        let spec = WssNetSpec {
            subbands: 5,
            snapshots: 5,
            conv1_kernels: 2,
            conv2_kernels: 1,
            hidden_units: 3,
            padding: Padding::Valid,
            dropout: DropoutRates::default(),
        };
        let w = init_weights(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let users = (0..3)
            .map(|id| SecondaryUser {
                id,
                data: LabeledDataset::new(
                    (0..4)
                        .map(|_| Sample {
                            feature: Tensor::new(
                                vec![5, 5, 2],
                                (0..50).map(|_| rng.random_range(-1.0..1.0)).collect(),
                            )
                            .unwrap(),
                            label: OccupancyVector::from_bits(
                                (0..5).map(|_| rng.random_bool(0.5)).collect(),
                            ),
                        })
                        .collect(),
                )
                .unwrap(),
            })
            .collect();
        let cfg = LocalConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 0.1,
            seed: 9,
        };
        (
            ModelBroadcast {
                round: 0,
                weights: w,
            },
            users,
            cfg,
        )
    }

    #[test]
    fn transports_agree_with_direct_calls() {
        let (b, users, cfg) = setup();
        let expected: Vec<GradientUpload> =
            users.iter().map(|u| serve(u, &cfg, &b).unwrap()).collect();
        let mut inproc = InProcessTransport::spawn(users.clone(), cfg).unwrap();
        let mut got = inproc.exchange(&b, Duration::from_secs(30)).unwrap();
        got.sort_by_key(|u| u.su_id);
        assert_eq!(got, expected);
        let mut sock = SocketTransport::spawn_local(users, cfg).unwrap();
        let got = sock.exchange(&b, Duration::from_secs(30)).unwrap();
        assert_eq!(got, expected);
    }

    #[test]
    fn timeout_then_recovery() {
        let (b, users, cfg) = setup();
        let mut inproc = InProcessTransport::spawn(users.clone(), cfg).unwrap();
        assert!(matches!(
            inproc.exchange(&b, Duration::ZERO),
            Err(Error::Transport(_))
        ));
        assert_eq!(
            inproc.exchange(&b, Duration::from_secs(30)).unwrap().len(),
            3
        );

        let mut sock = SocketTransport::spawn_local(users, cfg).unwrap();
        assert!(matches!(
            sock.exchange(&b, Duration::ZERO),
            Err(Error::Transport(_))
        ));
        let next = ModelBroadcast { round: 1, ..b };
        let got = sock.exchange(&next, Duration::from_secs(30)).unwrap();
        assert!(got.iter().all(|u| u.round == 1));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let (_, mut users, cfg) = setup();
        users[1].id = 0;
        assert!(InProcessTransport::spawn(users, cfg).is_err());
    }
}
