//! Fixed-newstyle NBD server exporting the card as a single block device.
//!
//! One client at a time may enter the transmission phase. It holds the card
//! for the gateway for as long as it stays connected; if the idle watchdog
//! takes the card back, the next request waits for it again.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, info, warn};
use netsd_core::sd::BLOCK_LEN;
use netsd_core::{HostError, HostSession};

use crate::state::{GatewayState, RagSession};

pub const NBDMAGIC: &[u8; 8] = b"NBDMAGIC";
pub const IHAVEOPT: u64 = 0x4948_4156_454F_5054;
pub const OPT_REPLY_MAGIC: u64 = 0x0003_e889_0455_65a9;
pub const REQUEST_MAGIC: u32 = 0x2560_9513;
pub const SIMPLE_REPLY_MAGIC: u32 = 0x6744_6698;

pub const FLAG_FIXED_NEWSTYLE: u16 = 1;
pub const FLAG_NO_ZEROES: u16 = 2;

pub const OPT_EXPORT_NAME: u32 = 1;
pub const OPT_ABORT: u32 = 2;
pub const OPT_LIST: u32 = 3;
pub const OPT_INFO: u32 = 6;
pub const OPT_GO: u32 = 7;
pub const OPT_STRUCTURED_REPLY: u32 = 8;

pub const REP_ACK: u32 = 1;
pub const REP_SERVER: u32 = 2;
pub const REP_INFO: u32 = 3;
const REP_ERR: u32 = 1 << 31;
pub const REP_ERR_UNSUP: u32 = REP_ERR | 1;
pub const REP_ERR_POLICY: u32 = REP_ERR | 2;
pub const REP_ERR_INVALID: u32 = REP_ERR | 3;
pub const REP_ERR_UNKNOWN: u32 = REP_ERR | 6;

pub const INFO_EXPORT: u16 = 0;
pub const INFO_BLOCK_SIZE: u16 = 3;

pub const TFLAG_HAS_FLAGS: u16 = 1;
pub const TFLAG_SEND_FLUSH: u16 = 1 << 2;

pub const CMD_READ: u16 = 0;
pub const CMD_WRITE: u16 = 1;
pub const CMD_DISC: u16 = 2;
pub const CMD_FLUSH: u16 = 3;

pub const EIO: u32 = 5;
pub const EINVAL: u32 = 22;

/// Largest request payload accepted.
pub const MAX_REQUEST: u32 = 32 << 20;
/// Names the export answers to. The empty name selects the default export.
pub const EXPORT_NAMES: [&str; 2] = ["", "netsd"];
const MAX_OPTION_LEN: u32 = 64 * 1024;

fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_be_bytes(b))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_be_bytes(b))
}

fn protocol(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

fn option_reply(w: &mut impl Write, opt: u32, kind: u32, data: &[u8]) -> io::Result<()> {
    w.write_all(&OPT_REPLY_MAGIC.to_be_bytes())?;
    w.write_all(&opt.to_be_bytes())?;
    w.write_all(&kind.to_be_bytes())?;
    w.write_all(&(data.len() as u32).to_be_bytes())?;
    w.write_all(data)
}

fn simple_reply(w: &mut impl Write, error: u32, handle: u64, data: &[u8]) -> io::Result<()> {
    w.write_all(&SIMPLE_REPLY_MAGIC.to_be_bytes())?;
    w.write_all(&error.to_be_bytes())?;
    w.write_all(&handle.to_be_bytes())?;
    w.write_all(data)?;
    w.flush()
}

/// Reads `len` bytes at byte `offset`, widening to whole blocks.
pub fn read_bytes(host: &mut HostSession, offset: u64, len: usize) -> Result<Vec<u8>, HostError> {
    if len == 0 {
        return Ok(Vec::new());
    }
    let bl = BLOCK_LEN as u64;
    let first = offset / bl;
    let end = (offset + len as u64).div_ceil(bl);
    let chunk = host.config().max_command_bytes;
    let data = host.read(first, end - first, chunk)?;
    let skip = (offset - first * bl) as usize;
    Ok(data[skip..skip + len].to_vec())
}

/// Writes `data` at byte `offset`, merging partial edge blocks with what is on the card.
pub fn write_bytes(host: &mut HostSession, offset: u64, data: &[u8]) -> Result<(), HostError> {
    if data.is_empty() {
        return Ok(());
    }
    let bl = BLOCK_LEN as u64;
    let first = offset / bl;
    let end_byte = offset + data.len() as u64;
    let end = end_byte.div_ceil(bl);
    let chunk = host.config().max_command_bytes;
    let head = (offset - first * bl) as usize;
    if head == 0 && end_byte % bl == 0 {
        return host.write(first, data, chunk);
    }
    let mut buf = vec![0u8; ((end - first) * bl) as usize];
    if head != 0 {
        buf[..BLOCK_LEN].copy_from_slice(&host.read(first, 1, BLOCK_LEN)?);
    }
    if end_byte % bl != 0 && (end - 1 != first || head == 0) {
        let at = buf.len() - BLOCK_LEN;
        buf[at..].copy_from_slice(&host.read(end - 1, 1, BLOCK_LEN)?);
    }
    buf[head..head + data.len()].copy_from_slice(data);
    host.write(first, &buf, chunk)
}

fn errno(e: &HostError) -> u32 {
    match e {
        HostError::AddressError { .. } => EINVAL,
        _ => EIO,
    }
}

/// Accepts connections until `stop` is set.
pub struct NbdServer {
    state: Arc<GatewayState>,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<HashMap<u64, TcpStream>>>,
    next_conn: AtomicU64,
}

impl NbdServer {
    pub fn new(state: Arc<GatewayState>, stop: Arc<AtomicBool>) -> Arc<Self> {
        Arc::new(NbdServer {
            state,
            stop,
            conns: Arc::default(),
            next_conn: AtomicU64::new(1),
        })
    }

    pub fn serve(self: &Arc<Self>, listener: TcpListener) -> io::Result<()> {
        listener.set_nonblocking(true)?;
        let mut workers = Vec::new();
        while !self.stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((sock, peer)) => {
                    sock.set_nonblocking(false)?;
                    let _ = sock.set_nodelay(true);
                    let id = self.next_conn.fetch_add(1, Ordering::SeqCst);
                    info!("nbd: connection {id} from {peer}");
                    if let Ok(clone) = sock.try_clone() {
                        self.conns.lock().unwrap_or_else(|e| e.into_inner()).insert(id, clone);
                    }
                    let me = Arc::clone(self);
                    workers.push(thread::spawn(move || {
                        if let Err(e) = me.handle(sock, id) {
                            debug!("nbd: connection {id} ended: {e}");
                        }
                        me.state.release_nbd(id);
                        me.conns.lock().unwrap_or_else(|e| e.into_inner()).remove(&id);
                    }));
                    workers.retain(|w| !w.is_finished());
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    warn!("nbd: accept failed: {e}");
                    thread::sleep(Duration::from_millis(10));
                }
            }
        }
        for s in self.conns.lock().unwrap_or_else(|e| e.into_inner()).values() {
            let _ = s.shutdown(Shutdown::Both);
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }

    fn handle(&self, sock: TcpStream, id: u64) -> io::Result<()> {
        let mut r = BufReader::new(sock.try_clone()?);
        let mut w = BufWriter::new(sock);
        w.write_all(NBDMAGIC)?;
        w.write_all(&IHAVEOPT.to_be_bytes())?;
        w.write_all(&(FLAG_FIXED_NEWSTYLE | FLAG_NO_ZEROES).to_be_bytes())?;
        w.flush()?;
        let client_flags = read_u32(&mut r)?;
        if client_flags & !u32::from(FLAG_FIXED_NEWSTYLE | FLAG_NO_ZEROES) != 0 {
            return Err(protocol("unknown client flags"));
        }
        let no_zeroes = client_flags & u32::from(FLAG_NO_ZEROES) != 0;

        let session = loop {
            if read_u64(&mut r)? != IHAVEOPT {
                return Err(protocol("bad option magic"));
            }
            let opt = read_u32(&mut r)?;
            let len = read_u32(&mut r)?;
            if len > MAX_OPTION_LEN {
                return Err(protocol("option too long"));
            }
            let mut data = vec![0; len as usize];
            r.read_exact(&mut data)?;
            match opt {
                OPT_EXPORT_NAME => {
                    let name = String::from_utf8_lossy(&data);
                    if !EXPORT_NAMES.contains(&name.as_ref()) {
                        return Err(protocol("unknown export"));
                    }
                    // This option has no error reply; refusing means hanging up.
                    let session = self.claim(id).map_err(|m| protocol(&m))?;
                    w.write_all(&self.state.capacity.to_be_bytes())?;
                    w.write_all(&(TFLAG_HAS_FLAGS | TFLAG_SEND_FLUSH).to_be_bytes())?;
                    if !no_zeroes {
                        w.write_all(&[0; 124])?;
                    }
                    w.flush()?;
                    break session;
                }
                OPT_GO | OPT_INFO => {
                    let Some(name) = parse_info_request(&data) else {
                        option_reply(&mut w, opt, REP_ERR_INVALID, b"malformed request")?;
                        w.flush()?;
                        continue;
                    };
                    if !EXPORT_NAMES.contains(&name.as_str()) {
                        option_reply(&mut w, opt, REP_ERR_UNKNOWN, b"no such export")?;
                        w.flush()?;
                        continue;
                    }
                    let session = if opt == OPT_GO {
                        match self.claim(id) {
                            Ok(s) => Some(s),
                            Err(m) => {
                                option_reply(&mut w, opt, REP_ERR_POLICY, m.as_bytes())?;
                                w.flush()?;
                                continue;
                            }
                        }
                    } else {
                        None
                    };
                    let mut export = INFO_EXPORT.to_be_bytes().to_vec();
                    export.extend_from_slice(&self.state.capacity.to_be_bytes());
                    export.extend_from_slice(&(TFLAG_HAS_FLAGS | TFLAG_SEND_FLUSH).to_be_bytes());
                    option_reply(&mut w, opt, REP_INFO, &export)?;
                    let mut sizes = INFO_BLOCK_SIZE.to_be_bytes().to_vec();
                    for v in [1u32, BLOCK_LEN as u32, MAX_REQUEST] {
                        sizes.extend_from_slice(&v.to_be_bytes());
                    }
                    option_reply(&mut w, opt, REP_INFO, &sizes)?;
                    option_reply(&mut w, opt, REP_ACK, &[])?;
                    w.flush()?;
                    if let Some(s) = session {
                        break s;
                    }
                }
                OPT_ABORT => {
                    option_reply(&mut w, opt, REP_ACK, &[])?;
                    w.flush()?;
                    return Ok(());
                }
                OPT_LIST => {
                    let name = EXPORT_NAMES[1].as_bytes();
                    let mut entry = (name.len() as u32).to_be_bytes().to_vec();
                    entry.extend_from_slice(name);
                    option_reply(&mut w, opt, REP_SERVER, &entry)?;
                    option_reply(&mut w, opt, REP_ACK, &[])?;
                    w.flush()?;
                }
                _ => {
                    // Structured replies among them: only simple replies are implemented.
                    let _ = OPT_STRUCTURED_REPLY;
                    option_reply(&mut w, opt, REP_ERR_UNSUP, &[])?;
                    w.flush()?;
                }
            }
        };
        info!("nbd: connection {id} entered transmission");
        let result = self.transmit(&mut r, &mut w, session, id);
        self.state.release_nbd(id);
        result
    }

    /// Takes the NBD slot and the card for connection `id`.
    fn claim(&self, id: u64) -> Result<RagSession, String> {
        if !self.state.claim_nbd(id) {
            return Err("another client is already connected".into());
        }
        match self.state.rag_session(&format!("nbd#{id}")) {
            Ok(s) => Ok(s),
            Err(e) => {
                self.state.release_nbd(id);
                Err(format!("card unavailable: {e}"))
            }
        }
    }

    fn transmit(&self, r: &mut impl Read, w: &mut impl Write, session: RagSession, id: u64) -> io::Result<()> {
        let mut session = Some(session);
        let size = self.state.capacity;
        loop {
            let magic = match read_u32(r) {
                Ok(m) => m,
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
                Err(e) => return Err(e),
            };
            if magic != REQUEST_MAGIC {
                return Err(protocol("bad request magic"));
            }
            let _flags = read_u16(r)?;
            let kind = read_u16(r)?;
            let handle = read_u64(r)?;
            let offset = read_u64(r)?;
            let len = read_u32(r)?;
            let in_range = offset.checked_add(u64::from(len)).is_some_and(|end| end <= size);

            if kind == CMD_DISC {
                return Ok(());
            }
            let mut payload = Vec::new();
            if kind == CMD_WRITE {
                if len > MAX_REQUEST {
                    return Err(protocol("write request too large"));
                }
                payload.resize(len as usize, 0);
                r.read_exact(&mut payload)?;
            }
            if !matches!(kind, CMD_READ | CMD_WRITE | CMD_FLUSH) || len > MAX_REQUEST || !in_range {
                simple_reply(w, EINVAL, handle, &[])?;
                continue;
            }

            let s = match self.ensure_session(&mut session, id) {
                Ok(s) => s,
                Err(e) => {
                    warn!("nbd: connection {id} lost the card: {e}");
                    simple_reply(w, EIO, handle, &[])?;
                    continue;
                }
            };
            s.lease.touch();
            match kind {
                CMD_READ => match read_bytes(&mut s.host, offset, len as usize) {
                    Ok(data) => simple_reply(w, 0, handle, &data)?,
                    Err(e) => simple_reply(w, errno(&e), handle, &[])?,
                },
                CMD_WRITE => {
                    let err = write_bytes(&mut s.host, offset, &payload).err();
                    simple_reply(w, err.as_ref().map_or(0, errno), handle, &[])?;
                }
                _ => {
                    let err = if self.state.flush().is_ok() { 0 } else { EIO };
                    simple_reply(w, err, handle, &[])?;
                }
            }
            s.lease.touch();
        }
    }

    /// The session, re-acquired if the watchdog ended the previous lease.
    fn ensure_session<'a>(
        &self,
        session: &'a mut Option<RagSession>,
        id: u64,
    ) -> Result<&'a mut RagSession, HostError> {
        if session.as_ref().is_some_and(|s| !s.lease.is_valid()) {
            *session = None;
        }
        if session.is_none() {
            *session = Some(self.state.rag_session(&format!("nbd#{id}"))?);
        }
        Ok(session.as_mut().expect("just set"))
    }
}

/// Export name of an INFO or GO request.
fn parse_info_request(data: &[u8]) -> Option<String> {
    let name_len = u32::from_be_bytes(data.get(..4)?.try_into().ok()?) as usize;
    let name = data.get(4..4 + name_len)?;
    let rest = data.get(4 + name_len..)?;
    let n = u16::from_be_bytes(rest.get(..2)?.try_into().ok()?) as usize;
    if rest.len() != 2 + 2 * n {
        return None;
    }
    String::from_utf8(name.to_vec()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn info_request_parsing() {
        let mut d = 5u32.to_be_bytes().to_vec();
        d.extend_from_slice(b"netsd");
        d.extend_from_slice(&1u16.to_be_bytes());
        d.extend_from_slice(&INFO_BLOCK_SIZE.to_be_bytes());
        assert_eq!(parse_info_request(&d).as_deref(), Some("netsd"));
        assert_eq!(parse_info_request(&d[..d.len() - 1]), None);
        assert_eq!(parse_info_request(&[0, 0, 0, 9]), None);
        let empty = [0, 0, 0, 0, 0, 0];
        assert_eq!(parse_info_request(&empty).as_deref(), Some(""));
    }

    #[test]
    fn magics_match_protocol_text() {
        assert_eq!(&IHAVEOPT.to_be_bytes(), b"IHAVEOPT");
        assert_eq!(OPT_REPLY_MAGIC, 0x3e889045565a9);
    }
}
