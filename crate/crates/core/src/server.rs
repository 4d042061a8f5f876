//! Neighbourhood server: the coordinator that owns the logical structure and
//! the ownership map but never field data.
//!
//! Requests and responses travel as versioned little-endian binary records
//! (see `docs/server-protocol.md`). The server handles one request at a time.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::dgrid::DGridSpec;
use crate::error::{Error, Result};
use crate::partition::{comm_pattern, CommPattern, PartitionMap};
use crate::topology::{GridId, Topology};

pub const MAGIC: [u8; 4] = *b"NBSV";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Request {
    QueryOwner { grid: GridId },
    RequestMigrate { grid: GridId, to: u32 },
    FetchPattern { rank: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Response {
    Owner { grid: GridId, rank: u32, generation: u64 },
    Migrated { grid: GridId, from: u32, to: u32, generation: u64 },
    Pattern { rank: u32, generation: u64, grids: Vec<GridId>, volumes: Vec<u64> },
    Error { code: u16, message: String },
}

pub mod code {
    pub const UNKNOWN_GRID: u16 = 1;
    pub const UNKNOWN_RANK: u16 = 2;
    pub const MALFORMED: u16 = 3;
    pub const INTERNAL: u16 = 4;
}

const K_QUERY_OWNER: u16 = 0x0001;
const K_REQUEST_MIGRATE: u16 = 0x0002;
const K_FETCH_PATTERN: u16 = 0x0003;
const K_OWNER: u16 = 0x8001;
const K_MIGRATED: u16 = 0x8002;
const K_PATTERN: u16 = 0x8003;
const K_ERROR: u16 = 0xFFFF;

fn header(kind: u16) -> Vec<u8> {
    let mut b = Vec::with_capacity(32);
    b.extend_from_slice(&MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&kind.to_le_bytes());
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Protocol(format!("record truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Protocol(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn open(buf: &[u8]) -> Result<(u16, Reader<'_>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Protocol("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Protocol(format!("unsupported version {version}")));
    }
    let kind = r.u16()?;
    Ok((kind, r))
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Request::QueryOwner { grid } => {
                let mut b = header(K_QUERY_OWNER);
                b.extend_from_slice(&grid.0.to_le_bytes());
                b
            }
            Request::RequestMigrate { grid, to } => {
                let mut b = header(K_REQUEST_MIGRATE);
                b.extend_from_slice(&grid.0.to_le_bytes());
                b.extend_from_slice(&to.to_le_bytes());
                b
            }
            Request::FetchPattern { rank } => {
                let mut b = header(K_FETCH_PATTERN);
                b.extend_from_slice(&rank.to_le_bytes());
                b
            }
        }
    }

    pub fn decode(buf: &[u8]) -> Result<Request> {
        let (kind, mut r) = open(buf)?;
        let req = match kind {
            K_QUERY_OWNER => Request::QueryOwner { grid: GridId(r.u32()?) },
            K_REQUEST_MIGRATE => Request::RequestMigrate {
                grid: GridId(r.u32()?),
                to: r.u32()?,
            },
            K_FETCH_PATTERN => Request::FetchPattern { rank: r.u32()? },
            k => return Err(Error::Protocol(format!("unknown request kind {k:#06x}"))),
        };
        r.finish()?;
        Ok(req)
    }
}

impl Response {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Response::Owner { grid, rank, generation } => {
                let mut b = header(K_OWNER);
                b.extend_from_slice(&grid.0.to_le_bytes());
                b.extend_from_slice(&rank.to_le_bytes());
                b.extend_from_slice(&generation.to_le_bytes());
                b
            }
            Response::Migrated { grid, from, to, generation } => {
                let mut b = header(K_MIGRATED);
                b.extend_from_slice(&grid.0.to_le_bytes());
                b.extend_from_slice(&from.to_le_bytes());
                b.extend_from_slice(&to.to_le_bytes());
                b.extend_from_slice(&generation.to_le_bytes());
                b
            }
            Response::Pattern { rank, generation, grids, volumes } => {
                let mut b = header(K_PATTERN);
                b.extend_from_slice(&rank.to_le_bytes());
                b.extend_from_slice(&generation.to_le_bytes());
                b.extend_from_slice(&(grids.len() as u32).to_le_bytes());
                for g in grids {
                    b.extend_from_slice(&g.0.to_le_bytes());
                }
                b.extend_from_slice(&(volumes.len() as u32).to_le_bytes());
                for v in volumes {
                    b.extend_from_slice(&v.to_le_bytes());
                }
                b
            }
            Response::Error { code, message } => {
                let mut b = header(K_ERROR);
                b.extend_from_slice(&code.to_le_bytes());
                b.extend_from_slice(&(message.len() as u32).to_le_bytes());
                b.extend_from_slice(message.as_bytes());
                b
            }
        }
    }

    pub fn decode(buf: &[u8]) -> Result<Response> {
        let (kind, mut r) = open(buf)?;
        let resp = match kind {
            K_OWNER => Response::Owner {
                grid: GridId(r.u32()?),
                rank: r.u32()?,
                generation: r.u64()?,
            },
            K_MIGRATED => Response::Migrated {
                grid: GridId(r.u32()?),
                from: r.u32()?,
                to: r.u32()?,
                generation: r.u64()?,
            },
            K_PATTERN => {
                let rank = r.u32()?;
                let generation = r.u64()?;
                let n = r.u32()? as usize;
                let grids = (0..n).map(|_| r.u32().map(GridId)).collect::<Result<_>>()?;
                let m = r.u32()? as usize;
                let volumes = (0..m).map(|_| r.u64()).collect::<Result<_>>()?;
                Response::Pattern {
                    rank,
                    generation,
                    grids,
                    volumes,
                }
            }
            K_ERROR => {
                let code = r.u16()?;
                let n = r.u32()? as usize;
                let message = String::from_utf8(r.take(n)?.to_vec())
                    .map_err(|e| Error::Protocol(format!("error message not utf-8: {e}")))?;
                Response::Error { code, message }
            }
            k => return Err(Error::Protocol(format!("unknown response kind {k:#06x}"))),
        };
        r.finish()?;
        Ok(resp)
    }
}

/// Coordinator state: topology, ownership and cached communication pattern.
pub struct ServerState {
    topo: Arc<Topology>,
    spec: DGridSpec,
    map: PartitionMap,
    pattern: Option<(u64, CommPattern)>,
}

impl ServerState {
    pub fn new(topo: Arc<Topology>, spec: DGridSpec, map: PartitionMap) -> Self {
        ServerState {
            topo,
            spec,
            map,
            pattern: None,
        }
    }

    pub fn map(&self) -> &PartitionMap {
        &self.map
    }

    pub fn handle(&mut self, req: &Request) -> Response {
        match self.try_handle(req) {
            Ok(r) => r,
            Err(e) => {
                let code = match e {
                    Error::UnknownGrid(_) => code::UNKNOWN_GRID,
                    Error::UnknownRank { .. } => code::UNKNOWN_RANK,
                    _ => code::INTERNAL,
                };
                Response::Error {
                    code,
                    message: e.to_string(),
                }
            }
        }
    }

    fn try_handle(&mut self, req: &Request) -> Result<Response> {
        Ok(match *req {
            Request::QueryOwner { grid } => Response::Owner {
                grid,
                rank: self.map.owner(grid)? as u32,
                generation: self.map.generation(),
            },
            Request::RequestMigrate { grid, to } => {
                let from = self.map.owner(grid)? as u32;
                self.map = self.map.migrate(grid, to as usize)?;
                Response::Migrated {
                    grid,
                    from,
                    to,
                    generation: self.map.generation(),
                }
            }
            Request::FetchPattern { rank } => {
                let rank_us = rank as usize;
                if rank_us >= self.map.workers() {
                    return Err(Error::UnknownRank {
                        rank: rank_us,
                        workers: self.map.workers(),
                    });
                }
                let gen = self.map.generation();
                if self.pattern.as_ref().map(|(g, _)| *g) != Some(gen) {
                    self.pattern = Some((gen, comm_pattern(&self.topo, &self.map, &self.spec)?));
                }
                let pattern = &self.pattern.as_ref().unwrap().1;
                Response::Pattern {
                    rank,
                    generation: gen,
                    grids: self.map.grids_of(rank_us).to_vec(),
                    volumes: pattern.volumes[rank_us].iter().map(|&v| v as u64).collect(),
                }
            }
        })
    }
}

/// Counters observed on the server's inbound link.
#[derive(Debug, Default)]
pub struct ServerStats {
    pub requests: AtomicU64,
    pub bytes_in: AtomicU64,
    /// Bytes of field payload ever addressed to the server.
    pub field_bytes_in: AtomicU64,
}

type Envelope = (Vec<u8>, Sender<Vec<u8>>);

/// Client side of the server link; cheap to clone.
#[derive(Clone)]
pub struct ServerHandle {
    tx: Sender<Envelope>,
    stats: Arc<ServerStats>,
}

impl ServerHandle {
    pub fn request(&self, req: &Request) -> Result<Response> {
        self.send_raw(req.encode())
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    /// Sends raw bytes; used to probe the server's handling of foreign records.
    pub fn send_raw(&self, bytes: Vec<u8>) -> Result<Response> {
        let (reply_tx, reply_rx) = channel();
        self.tx
            .send((bytes, reply_tx))
            .map_err(|_| Error::Protocol("neighbourhood server is gone".into()))?;
        let bytes = reply_rx
            .recv()
            .map_err(|_| Error::Protocol("neighbourhood server dropped the request".into()))?;
        Response::decode(&bytes)
    }
}

/// Running server thread.
pub struct Server {
    handle: ServerHandle,
    thread: Option<JoinHandle<PartitionMap>>,
}

impl Server {
    pub fn spawn(state: ServerState) -> Server {
        let (tx, rx) = channel::<Envelope>();
        let stats = Arc::new(ServerStats::default());
        let thread_stats = Arc::clone(&stats);
        let thread = std::thread::Builder::new()
            .name("neighbourhood-server".into())
            .spawn(move || {
                let mut state = state;
                while let Ok((bytes, reply)) = rx.recv() {
                    thread_stats.requests.fetch_add(1, Ordering::Relaxed);
                    thread_stats.bytes_in.fetch_add(bytes.len() as u64, Ordering::Relaxed);
                    let resp = match Request::decode(&bytes) {
                        Ok(req) => state.handle(&req),
                        Err(e) => {
                            // Anything that is not a protocol record counts as stray payload.
                            thread_stats.field_bytes_in.fetch_add(bytes.len() as u64, Ordering::Relaxed);
                            Response::Error {
                                code: code::MALFORMED,
                                message: e.to_string(),
                            }
                        }
                    };
                    let _ = reply.send(resp.encode());
                }
                state.map
            })
            .expect("spawn neighbourhood server");
        Server {
            handle: ServerHandle { tx, stats },
            thread: Some(thread),
        }
    }

    pub fn handle(&self) -> ServerHandle {
        self.handle.clone()
    }

    pub fn handle_ref(&self) -> &ServerHandle {
        &self.handle
    }

    /// Stops the server once every handle is dropped and returns its final map.
    pub fn shutdown(mut self) -> Option<PartitionMap> {
        let thread = self.thread.take()?;
        drop(self);
        thread.join().ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::assign;
    use crate::topology::RefinementSpec;

    #[test]
    fn records_round_trip() {
        let reqs = [
            Request::QueryOwner { grid: GridId(7) },
            Request::RequestMigrate { grid: GridId(3), to: 2 },
            Request::FetchPattern { rank: 1 },
        ];
        for r in reqs {
            assert_eq!(Request::decode(&r.encode()).unwrap(), r);
        }
        let resps = [
            Response::Owner { grid: GridId(1), rank: 2, generation: 3 },
            Response::Migrated { grid: GridId(1), from: 0, to: 1, generation: 9 },
            Response::Pattern { rank: 0, generation: 1, grids: vec![GridId(4), GridId(5)], volumes: vec![10, 20] },
            Response::Error { code: code::UNKNOWN_GRID, message: "nope".into() },
        ];
        for r in resps {
            assert_eq!(Response::decode(&r.encode()).unwrap(), r);
        }
    }

    #[test]
    fn layout_is_fixed() {
        let b = Request::RequestMigrate { grid: GridId(0x0102_0304), to: 5 }.encode();
        assert_eq!(b, vec![b'N', b'B', b'S', b'V', 1, 0, 2, 0, 4, 3, 2, 1, 5, 0, 0, 0]);
    }

    #[test]
    fn rejects_bad_records() {
        let mut b = Request::QueryOwner { grid: GridId(1) }.encode();
        b[4] = 9;
        assert!(Request::decode(&b).is_err());
        assert!(Request::decode(b"NBSV").is_err());
        let mut b = Request::QueryOwner { grid: GridId(1) }.encode();
        b.push(0);
        assert!(Request::decode(&b).is_err());
    }

    #[test]
    fn serves_owner_and_migration() {
        let topo = Arc::new(Topology::build_uniform(RefinementSpec::cubic(3), 1).unwrap());
        let map = assign(&topo, 2).unwrap();
        let spec = DGridSpec { size: [4; 3], spacing: [1.0; 3] };
        let server = Server::spawn(ServerState::new(Arc::clone(&topo), spec, map));
        let h = server.handle();
        let g = topo.at_depth(1)[0];
        assert!(matches!(h.request(&Request::QueryOwner { grid: g }).unwrap(), Response::Owner { rank: 0, generation: 0, .. }));
        let r = h.request(&Request::RequestMigrate { grid: g, to: 1 }).unwrap();
        assert_eq!(r, Response::Migrated { grid: g, from: 0, to: 1, generation: 1 });
        assert!(matches!(h.request(&Request::QueryOwner { grid: g }).unwrap(), Response::Owner { rank: 1, .. }));
        match h.request(&Request::QueryOwner { grid: GridId(999) }).unwrap() {
            Response::Error { code, .. } => assert_eq!(code, code::UNKNOWN_GRID),
            other => panic!("{other:?}"),
        }
        match h.request(&Request::FetchPattern { rank: 1 }).unwrap() {
            Response::Pattern { grids, volumes, .. } => {
                assert!(grids.contains(&g));
                assert_eq!(volumes.len(), 2);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(h.stats().requests.load(Ordering::Relaxed), 5);
        drop(h);
        let final_map = server.shutdown().unwrap();
        assert_eq!(final_map.owner(g).unwrap(), 1);
    }
}
