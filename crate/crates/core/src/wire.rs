//! Binary protocol shared by the storage server and the key manager.
//!
//! Frame: `len:u32 || type:u8 || payload`, where `len` counts the payload
//! only. All integers are big-endian. Responses set the high bit of the
//! request type; `0x7F` carries an error as `code:u16 || message`.
//!
//! Blob messages (recipe, stub, state, user) start with an op byte, 0 for
//! put and 1 for get, and the response echoes it.

use std::io::{self, Read, Write};
use std::sync::Mutex;

use num_bigint::BigUint;

use crate::chunker::Fingerprint;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::keygen::{to_fixed_be, KeyManager, ManagerPublicKey};
use crate::recipe::FileId;
use crate::service::{KeyService, PutAck, StoreService, StoreStats};

pub const DEDUP_QUERY: u8 = 0x01;
pub const PUT_PACKAGES: u8 = 0x02;
pub const GET_PACKAGES: u8 = 0x03;
pub const RECIPE: u8 = 0x04;
pub const STUB_FILE: u8 = 0x05;
pub const KEY_STATE: u8 = 0x06;
pub const USER_KEY: u8 = 0x07;
pub const STATS: u8 = 0x08;
pub const KEYGEN: u8 = 0x10;
pub const MANAGER_KEY: u8 = 0x11;
pub const ERROR: u8 = 0x7F;
pub const RESPONSE_BIT: u8 = 0x80;

const OP_PUT: u8 = 0;
const OP_GET: u8 = 1;
/// `expected` / `version` value meaning "none" or "current".
const NO_VERSION: u32 = u32::MAX;

/// Largest accepted payload.
pub const MAX_FRAME: usize = 256 << 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Request {
    DedupQuery(Vec<Fingerprint>),
    PutPackages(Vec<(Fingerprint, Vec<u8>)>),
    GetPackages(Vec<Fingerprint>),
    PutRecipe { id: FileId, blob: Vec<u8> },
    GetRecipe { id: FileId },
    PutStub { id: FileId, expected: Option<u32>, version: u32, blob: Vec<u8> },
    GetStub { id: FileId, version: Option<u32> },
    PutState { id: FileId, expected: Option<u32>, blob: Vec<u8> },
    GetState { id: FileId },
    PutUser { user: String, record: Vec<u8> },
    GetUser { user: String },
    Stats,
    /// Blinded values, each encoded at `width` bytes.
    Keygen { width: usize, values: Vec<BigUint> },
    ManagerKey,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Response {
    Presence(Vec<bool>),
    Stored(PutAck),
    Packages(Vec<Vec<u8>>),
    RecipeStored,
    Recipe(Vec<u8>),
    StubStored,
    Stub { version: u32, blob: Vec<u8> },
    StateStored,
    State(Vec<u8>),
    UserStored,
    User(Vec<u8>),
    Stats(StoreStats),
    Signed { width: usize, values: Vec<BigUint> },
    ManagerKey(ManagerPublicKey),
    Error { code: u16, message: String },
}

fn opt_version(v: Option<u32>) -> u32 {
    v.unwrap_or(NO_VERSION)
}

fn version_opt(v: u32) -> Option<u32> {
    (v != NO_VERSION).then_some(v)
}

fn put_fps(w: &mut Writer, fps: &[Fingerprint]) {
    w.u32(fps.len() as u32);
    for fp in fps {
        w.bytes(fp.as_bytes());
    }
}

fn get_fps(r: &mut Reader<'_>) -> Result<Vec<Fingerprint>> {
    let n = r.u32()? as usize;
    if r.remaining() < n.saturating_mul(32) {
        return Err(Error::malformed("fingerprint list truncated"));
    }
    (0..n).map(|_| Ok(Fingerprint(r.array()?))).collect()
}

fn put_values(w: &mut Writer, width: usize, values: &[BigUint]) {
    w.u32(values.len() as u32);
    for v in values {
        w.bytes(&to_fixed_be(v, width));
    }
}

/// The value width is implied by the payload length.
fn get_values(r: &mut Reader<'_>) -> Result<(usize, Vec<BigUint>)> {
    let n = r.u32()? as usize;
    if n == 0 {
        return Ok((0, Vec::new()));
    }
    if r.remaining() % n != 0 {
        return Err(Error::malformed("keygen payload is not a whole number of values"));
    }
    let width = r.remaining() / n;
    let values = (0..n).map(|_| Ok(BigUint::from_bytes_be(r.take(width)?))).collect::<Result<_>>()?;
    Ok((width, values))
}

fn get_id(r: &mut Reader<'_>) -> Result<FileId> {
    Ok(FileId(r.array()?))
}

fn op(r: &mut Reader<'_>) -> Result<u8> {
    match r.u8()? {
        o @ (OP_PUT | OP_GET) => Ok(o),
        o => Err(Error::Protocol(format!("unknown blob op {o}"))),
    }
}

impl Request {
    pub fn encode(&self) -> (u8, Vec<u8>) {
        let mut w = Writer::new();
        let ty = match self {
            Request::DedupQuery(fps) => {
                put_fps(&mut w, fps);
                DEDUP_QUERY
            }
            Request::PutPackages(items) => {
                w.u32(items.len() as u32);
                for (fp, bytes) in items {
                    w.bytes(fp.as_bytes());
                    w.bytes32(bytes);
                }
                PUT_PACKAGES
            }
            Request::GetPackages(fps) => {
                put_fps(&mut w, fps);
                GET_PACKAGES
            }
            Request::PutRecipe { id, blob } => {
                w.u8(OP_PUT);
                w.bytes(&id.0);
                w.bytes(blob);
                RECIPE
            }
            Request::GetRecipe { id } => {
                w.u8(OP_GET);
                w.bytes(&id.0);
                RECIPE
            }
            Request::PutStub {
                id,
                expected,
                version,
                blob,
            } => {
                w.u8(OP_PUT);
                w.bytes(&id.0);
                w.u32(opt_version(*expected));
                w.u32(*version);
                w.bytes(blob);
                STUB_FILE
            }
            Request::GetStub { id, version } => {
                w.u8(OP_GET);
                w.bytes(&id.0);
                w.u32(opt_version(*version));
                STUB_FILE
            }
            Request::PutState { id, expected, blob } => {
                w.u8(OP_PUT);
                w.bytes(&id.0);
                w.u32(opt_version(*expected));
                w.bytes(blob);
                KEY_STATE
            }
            Request::GetState { id } => {
                w.u8(OP_GET);
                w.bytes(&id.0);
                KEY_STATE
            }
            Request::PutUser { user, record } => {
                w.u8(OP_PUT);
                w.str16(user);
                w.bytes(record);
                USER_KEY
            }
            Request::GetUser { user } => {
                w.u8(OP_GET);
                w.str16(user);
                USER_KEY
            }
            Request::Stats => STATS,
            Request::Keygen { width, values } => {
                put_values(&mut w, *width, values);
                KEYGEN
            }
            Request::ManagerKey => MANAGER_KEY,
        };
        (ty, w.finish())
    }

    pub fn decode(ty: u8, payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let req = match ty {
            DEDUP_QUERY => Request::DedupQuery(get_fps(&mut r)?),
            PUT_PACKAGES => {
                let n = r.u32()? as usize;
                let mut items = Vec::with_capacity(n.min(r.remaining() / 36));
                for _ in 0..n {
                    let fp = Fingerprint(r.array()?);
                    items.push((fp, r.bytes32()?.to_vec()));
                }
                Request::PutPackages(items)
            }
            GET_PACKAGES => Request::GetPackages(get_fps(&mut r)?),
            RECIPE => match op(&mut r)? {
                OP_PUT => Request::PutRecipe {
                    id: get_id(&mut r)?,
                    blob: r.rest().to_vec(),
                },
                _ => Request::GetRecipe { id: get_id(&mut r)? },
            },
            STUB_FILE => match op(&mut r)? {
                OP_PUT => Request::PutStub {
                    id: get_id(&mut r)?,
                    expected: version_opt(r.u32()?),
                    version: r.u32()?,
                    blob: r.rest().to_vec(),
                },
                _ => Request::GetStub {
                    id: get_id(&mut r)?,
                    version: version_opt(r.u32()?),
                },
            },
            KEY_STATE => match op(&mut r)? {
                OP_PUT => Request::PutState {
                    id: get_id(&mut r)?,
                    expected: version_opt(r.u32()?),
                    blob: r.rest().to_vec(),
                },
                _ => Request::GetState { id: get_id(&mut r)? },
            },
            USER_KEY => match op(&mut r)? {
                OP_PUT => Request::PutUser {
                    user: r.str16()?,
                    record: r.rest().to_vec(),
                },
                _ => Request::GetUser { user: r.str16()? },
            },
            STATS => Request::Stats,
            KEYGEN => {
                let (width, values) = get_values(&mut r)?;
                Request::Keygen { width, values }
            }
            MANAGER_KEY => Request::ManagerKey,
            other => return Err(Error::Protocol(format!("unknown request type {other:#04x}"))),
        };
        r.finish()?;
        Ok(req)
    }
}

/// Text carried in an error frame; variants with a payload send just that.
fn error_message(e: &Error) -> String {
    match e {
        Error::UnknownUser(s)
        | Error::NotFound(s)
        | Error::AlreadyExists(s)
        | Error::InvalidConfig(s)
        | Error::Malformed(s)
        | Error::Protocol(s)
        | Error::StorageUnavailable(s)
        | Error::Transport(s) => s.clone(),
        Error::TraceParse { message, .. } => message.clone(),
        other => other.to_string(),
    }
}

impl Response {
    pub fn error(e: &Error) -> Self {
        Response::Error {
            code: e.code(),
            message: error_message(e),
        }
    }

    pub fn encode(&self) -> (u8, Vec<u8>) {
        let mut w = Writer::new();
        let ty = match self {
            Response::Presence(bits) => {
                w.u32(bits.len() as u32);
                let mut bytes = vec![0u8; bits.len().div_ceil(8)];
                for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
                    bytes[i / 8] |= 0x80 >> (i % 8);
                }
                w.bytes(&bytes);
                DEDUP_QUERY
            }
            Response::Stored(ack) => {
                w.u32(ack.new_packages);
                w.u64(ack.new_bytes);
                PUT_PACKAGES
            }
            Response::Packages(items) => {
                w.u32(items.len() as u32);
                for p in items {
                    w.bytes32(p);
                }
                GET_PACKAGES
            }
            Response::RecipeStored => {
                w.u8(OP_PUT);
                RECIPE
            }
            Response::Recipe(blob) => {
                w.u8(OP_GET);
                w.bytes(blob);
                RECIPE
            }
            Response::StubStored => {
                w.u8(OP_PUT);
                STUB_FILE
            }
            Response::Stub { version, blob } => {
                w.u8(OP_GET);
                w.u32(*version);
                w.bytes(blob);
                STUB_FILE
            }
            Response::StateStored => {
                w.u8(OP_PUT);
                KEY_STATE
            }
            Response::State(blob) => {
                w.u8(OP_GET);
                w.bytes(blob);
                KEY_STATE
            }
            Response::UserStored => {
                w.u8(OP_PUT);
                USER_KEY
            }
            Response::User(blob) => {
                w.u8(OP_GET);
                w.bytes(blob);
                USER_KEY
            }
            Response::Stats(s) => {
                for v in [s.logical_bytes, s.physical_bytes, s.stub_bytes, s.containers, s.index_entries] {
                    w.u64(v);
                }
                STATS
            }
            Response::Signed { width, values } => {
                put_values(&mut w, *width, values);
                KEYGEN
            }
            Response::ManagerKey(pk) => {
                w.bytes16(&pk.n.to_bytes_be());
                w.bytes16(&pk.e.to_bytes_be());
                MANAGER_KEY
            }
            Response::Error { code, message } => {
                w.u16(*code);
                w.bytes(message.as_bytes());
                return (ERROR, w.finish());
            }
        };
        (ty | RESPONSE_BIT, w.finish())
    }

    pub fn decode(ty: u8, payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        if ty == ERROR {
            let code = r.u16()?;
            let message = String::from_utf8_lossy(r.rest()).into_owned();
            return Ok(Response::Error { code, message });
        }
        if ty & RESPONSE_BIT == 0 {
            return Err(Error::Protocol(format!("expected a response, got type {ty:#04x}")));
        }
        let resp = match ty & !RESPONSE_BIT {
            DEDUP_QUERY => {
                let n = r.u32()? as usize;
                let bytes = r.take(n.div_ceil(8))?;
                Response::Presence((0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect())
            }
            PUT_PACKAGES => Response::Stored(PutAck {
                new_packages: r.u32()?,
                new_bytes: r.u64()?,
            }),
            GET_PACKAGES => {
                let n = r.u32()? as usize;
                let mut items = Vec::with_capacity(n.min(r.remaining() / 4));
                for _ in 0..n {
                    items.push(r.bytes32()?.to_vec());
                }
                Response::Packages(items)
            }
            RECIPE => match op(&mut r)? {
                OP_PUT => Response::RecipeStored,
                _ => Response::Recipe(r.rest().to_vec()),
            },
            STUB_FILE => match op(&mut r)? {
                OP_PUT => Response::StubStored,
                _ => Response::Stub {
                    version: r.u32()?,
                    blob: r.rest().to_vec(),
                },
            },
            KEY_STATE => match op(&mut r)? {
                OP_PUT => Response::StateStored,
                _ => Response::State(r.rest().to_vec()),
            },
            USER_KEY => match op(&mut r)? {
                OP_PUT => Response::UserStored,
                _ => Response::User(r.rest().to_vec()),
            },
            STATS => Response::Stats(StoreStats {
                logical_bytes: r.u64()?,
                physical_bytes: r.u64()?,
                stub_bytes: r.u64()?,
                containers: r.u64()?,
                index_entries: r.u64()?,
            }),
            KEYGEN => {
                let (width, values) = get_values(&mut r)?;
                Response::Signed { width, values }
            }
            MANAGER_KEY => Response::ManagerKey(ManagerPublicKey {
                n: BigUint::from_bytes_be(r.bytes16()?),
                e: BigUint::from_bytes_be(r.bytes16()?),
            }),
            other => return Err(Error::Protocol(format!("unknown response type {other:#04x}"))),
        };
        r.finish()?;
        Ok(resp)
    }

    /// Turns an error frame back into an error.
    pub fn into_result(self) -> Result<Response> {
        match self {
            Response::Error { code, message } => Err(Error::from_code(code, message)),
            other => Ok(other),
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, ty: u8, payload: &[u8]) -> io::Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    let mut header = [0u8; 5];
    header[..4].copy_from_slice(&(payload.len() as u32).to_be_bytes());
    header[4] = ty;
    w.write_all(&header)?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a header.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<(u8, Vec<u8>)>> {
    let mut header = [0u8; 5];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Transport("connection closed mid-header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Transport(format!("connection closed mid-frame: {e}")))?;
    Ok(Some((header[4], payload)))
}

/// Serves a decoded request against a store.
pub fn handle_store<S: StoreService + ?Sized>(svc: &S, req: Request) -> Response {
    let out = match req {
        Request::DedupQuery(fps) => svc.dedup_query(&fps).map(Response::Presence),
        Request::PutPackages(items) => svc.put_packages(&items).map(Response::Stored),
        Request::GetPackages(fps) => svc.get_packages(&fps).map(Response::Packages),
        Request::PutRecipe { id, blob } => svc.put_recipe(&id, &blob).map(|_| Response::RecipeStored),
        Request::GetRecipe { id } => svc.get_recipe(&id).map(Response::Recipe),
        Request::PutStub {
            id,
            expected,
            version,
            blob,
        } => svc.put_stub(&id, expected, version, &blob).map(|_| Response::StubStored),
        Request::GetStub { id, version } => svc
            .get_stub(&id, version)
            .map(|(version, blob)| Response::Stub { version, blob }),
        Request::PutState { id, expected, blob } => svc.put_state(&id, expected, &blob).map(|_| Response::StateStored),
        Request::GetState { id } => svc.get_state(&id).map(Response::State),
        Request::PutUser { user, record } => svc.put_user(&user, &record).map(|_| Response::UserStored),
        Request::GetUser { user } => svc.get_user(&user).map(Response::User),
        Request::Stats => svc.stats().map(Response::Stats),
        Request::Keygen { .. } | Request::ManagerKey => {
            Err(Error::Protocol("key generation is served by the key manager".into()))
        }
    };
    out.unwrap_or_else(|e| Response::error(&e))
}

/// Serves a decoded request against the key manager on behalf of `client`.
pub fn handle_keygen(mgr: &KeyManager, client: &str, req: Request) -> Response {
    let width = mgr.public_key().modulus_len();
    let out = match req {
        Request::Keygen { width: w, values } => {
            if !values.is_empty() && w != width {
                Err(Error::Protocol(format!("keygen values are {w} bytes, expected {width}")))
            } else {
                mgr.sign_batch(client, &values)
                    .map(|values| Response::Signed { width, values })
            }
        }
        Request::ManagerKey => Ok(Response::ManagerKey(mgr.public_key().clone())),
        _ => Err(Error::Protocol("the key manager only serves key generation".into())),
    };
    out.unwrap_or_else(|e| Response::error(&e))
}

/// Something that carries one request frame and returns one response frame.
pub trait Transport: Send + Sync {
    fn exchange(&self, ty: u8, payload: &[u8]) -> Result<(u8, Vec<u8>)>;
}

/// Sends a request and decodes its response, surfacing error frames.
pub fn call<T: Transport + ?Sized>(t: &T, req: &Request) -> Result<Response> {
    let (ty, payload) = req.encode();
    let (rty, rpayload) = t.exchange(ty, &payload)?;
    Response::decode(rty, &rpayload)?.into_result()
}

fn unexpected(resp: Response) -> Error {
    Error::Protocol(format!("unexpected response {:?}", std::mem::discriminant(&resp)))
}

/// Store client speaking the wire protocol over any transport.
#[derive(Debug)]
pub struct WireStore<T> {
    transport: T,
}

impl<T: Transport> WireStore<T> {
    pub fn new(transport: T) -> Self {
        WireStore { transport }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn call(&self, req: Request) -> Result<Response> {
        call(&self.transport, &req)
    }
}

impl<T: Transport> StoreService for WireStore<T> {
    fn dedup_query(&self, fps: &[Fingerprint]) -> Result<Vec<bool>> {
        match self.call(Request::DedupQuery(fps.to_vec()))? {
            Response::Presence(bits) if bits.len() == fps.len() => Ok(bits),
            other => Err(unexpected(other)),
        }
    }

    fn put_packages(&self, items: &[(Fingerprint, Vec<u8>)]) -> Result<PutAck> {
        match self.call(Request::PutPackages(items.to_vec()))? {
            Response::Stored(ack) => Ok(ack),
            other => Err(unexpected(other)),
        }
    }

    fn get_packages(&self, fps: &[Fingerprint]) -> Result<Vec<Vec<u8>>> {
        match self.call(Request::GetPackages(fps.to_vec()))? {
            Response::Packages(p) if p.len() == fps.len() => Ok(p),
            other => Err(unexpected(other)),
        }
    }

    fn put_recipe(&self, id: &FileId, recipe: &[u8]) -> Result<()> {
        match self.call(Request::PutRecipe {
            id: *id,
            blob: recipe.to_vec(),
        })? {
            Response::RecipeStored => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    fn get_recipe(&self, id: &FileId) -> Result<Vec<u8>> {
        match self.call(Request::GetRecipe { id: *id })? {
            Response::Recipe(b) => Ok(b),
            other => Err(unexpected(other)),
        }
    }

    fn put_stub(&self, id: &FileId, expected: Option<u32>, version: u32, blob: &[u8]) -> Result<()> {
        match self.call(Request::PutStub {
            id: *id,
            expected,
            version,
            blob: blob.to_vec(),
        })? {
            Response::StubStored => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    fn get_stub(&self, id: &FileId, version: Option<u32>) -> Result<(u32, Vec<u8>)> {
        match self.call(Request::GetStub { id: *id, version })? {
            Response::Stub { version, blob } => Ok((version, blob)),
            other => Err(unexpected(other)),
        }
    }

    fn put_state(&self, id: &FileId, expected: Option<u32>, blob: &[u8]) -> Result<()> {
        match self.call(Request::PutState {
            id: *id,
            expected,
            blob: blob.to_vec(),
        })? {
            Response::StateStored => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    fn get_state(&self, id: &FileId) -> Result<Vec<u8>> {
        match self.call(Request::GetState { id: *id })? {
            Response::State(b) => Ok(b),
            other => Err(unexpected(other)),
        }
    }

    fn put_user(&self, user: &str, record: &[u8]) -> Result<()> {
        match self.call(Request::PutUser {
            user: user.to_owned(),
            record: record.to_vec(),
        })? {
            Response::UserStored => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    fn get_user(&self, user: &str) -> Result<Vec<u8>> {
        match self.call(Request::GetUser { user: user.to_owned() })? {
            Response::User(b) => Ok(b),
            other => Err(unexpected(other)),
        }
    }

    fn stats(&self) -> Result<StoreStats> {
        match self.call(Request::Stats)? {
            Response::Stats(s) => Ok(s),
            other => Err(unexpected(other)),
        }
    }
}

/// Key manager client over any transport. The public key is fetched once.
#[derive(Debug)]
pub struct WireKeys<T> {
    transport: T,
    public: ManagerPublicKey,
    batch_cap: usize,
}

impl<T: Transport> WireKeys<T> {
    pub fn connect(transport: T, batch_cap: usize) -> Result<Self> {
        let public = match call(&transport, &Request::ManagerKey)? {
            Response::ManagerKey(pk) => pk,
            other => return Err(unexpected(other)),
        };
        Ok(WireKeys {
            transport,
            public,
            batch_cap,
        })
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }
}

impl<T: Transport> KeyService for WireKeys<T> {
    fn public_key(&self) -> Result<ManagerPublicKey> {
        Ok(self.public.clone())
    }

    fn sign(&self, blinded: &[BigUint]) -> Result<Vec<BigUint>> {
        let req = Request::Keygen {
            width: self.public.modulus_len(),
            values: blinded.to_vec(),
        };
        match call(&self.transport, &req)? {
            Response::Signed { values, .. } if values.len() == blinded.len() => Ok(values),
            other => Err(unexpected(other)),
        }
    }

    fn batch_cap(&self) -> usize {
        self.batch_cap
    }
}

/// One persistent TCP connection, re-established after a failure.
#[derive(Debug)]
pub struct TcpTransport {
    addr: String,
    conn: Mutex<Option<std::net::TcpStream>>,
}

impl TcpTransport {
    pub fn new(addr: impl Into<String>) -> Self {
        TcpTransport {
            addr: addr.into(),
            conn: Mutex::new(None),
        }
    }

    /// Connects eagerly so that an unreachable peer fails early.
    pub fn connect(addr: impl Into<String>) -> Result<Self> {
        let t = TcpTransport::new(addr);
        *t.conn.lock().expect("connection poisoned") = Some(t.dial()?);
        Ok(t)
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn dial(&self) -> Result<std::net::TcpStream> {
        let s = std::net::TcpStream::connect(&self.addr)
            .map_err(|e| Error::Transport(format!("connect {}: {e}", self.addr)))?;
        s.set_nodelay(true).ok();
        Ok(s)
    }
}

impl Transport for TcpTransport {
    fn exchange(&self, ty: u8, payload: &[u8]) -> Result<(u8, Vec<u8>)> {
        let mut guard = self.conn.lock().expect("connection poisoned");
        if guard.is_none() {
            *guard = Some(self.dial()?);
        }
        let stream = guard.as_mut().expect("dialed above");
        let result = write_frame(stream, ty, payload)
            .map_err(|e| Error::Transport(format!("send to {}: {e}", self.addr)))
            .and_then(|_| read_frame(stream))
            .and_then(|frame| frame.ok_or_else(|| Error::Transport(format!("{} closed the connection", self.addr))));
        if result.is_err() {
            *guard = None;
        }
        result.map_err(|e| match e {
            Error::Io(io) => Error::Transport(format!("{}: {io}", self.addr)),
            other => other,
        })
    }
}

/// In-process transport that round-trips every message through its byte
/// encoding and keeps a copy of each request frame.
#[derive(Debug)]
pub struct Loopback<S> {
    service: S,
    captured: Mutex<Vec<(u8, Vec<u8>)>>,
}

impl<S> Loopback<S> {
    pub fn new(service: S) -> Self {
        Loopback {
            service,
            captured: Mutex::new(Vec::new()),
        }
    }

    /// Request frames sent so far.
    pub fn captured(&self) -> Vec<(u8, Vec<u8>)> {
        self.captured.lock().expect("capture poisoned").clone()
    }

    fn record(&self, ty: u8, payload: &[u8]) {
        self.captured.lock().expect("capture poisoned").push((ty, payload.to_vec()));
    }
}

impl<S: StoreService> Transport for Loopback<S> {
    fn exchange(&self, ty: u8, payload: &[u8]) -> Result<(u8, Vec<u8>)> {
        self.record(ty, payload);
        let resp = match Request::decode(ty, payload) {
            Ok(req) => handle_store(&self.service, req),
            Err(e) => Response::error(&e),
        };
        Ok(resp.encode())
    }
}

/// Loopback transport for a key manager.
#[derive(Debug)]
pub struct KeyLoopback {
    manager: std::sync::Arc<KeyManager>,
    client: String,
    inner: Loopback<()>,
}

impl KeyLoopback {
    pub fn new(manager: std::sync::Arc<KeyManager>, client: impl Into<String>) -> Self {
        KeyLoopback {
            manager,
            client: client.into(),
            inner: Loopback::new(()),
        }
    }

    pub fn captured(&self) -> Vec<(u8, Vec<u8>)> {
        self.inner.captured()
    }
}

impl Transport for KeyLoopback {
    fn exchange(&self, ty: u8, payload: &[u8]) -> Result<(u8, Vec<u8>)> {
        self.inner.record(ty, payload);
        let resp = match Request::decode(ty, payload) {
            Ok(req) => handle_keygen(&self.manager, &self.client, req),
            Err(e) => Response::error(&e),
        };
        Ok(resp.encode())
    }
}
