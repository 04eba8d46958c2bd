//! The untrusted server: a label → ciphertext store with batched get/put,
//! file persistence, and a length-prefixed wire protocol so the proxy and
//! server can run in-process or over TCP behind the same interface.
//!
//! Every batch the server handles is stamped into the shared access trace,
//! which is exactly the adversary's view.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::crypto::BucketLabel;
use crate::error::{Error, Result};
use crate::leakage::{TraceOp, TraceSink};

/// One stored pair. All ciphertexts in a store have equal length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreEntry {
    pub label: BucketLabel,
    pub ciphertext: Vec<u8>,
}

/// Label → ciphertext store interface shared by the in-process and TCP
/// transports.
pub trait KvBackend {
    /// Fetches ciphertexts in request order. Every label must be present.
    fn get_batch(&self, labels: &[BucketLabel]) -> Result<Vec<Vec<u8>>>;
    /// Upserts entries as one batch.
    fn put_batch(&self, entries: Vec<StoreEntry>) -> Result<()>;
    /// Removes labels as one batch (epoch turnover after a rebuild);
    /// absent labels are ignored.
    fn remove_batch(&self, labels: &[BucketLabel]) -> Result<()>;
    /// Number of stored entries.
    fn entry_count(&self) -> usize;
}

/// In-memory backend; batches are atomic under an internal lock and every
/// batch is recorded to the trace sink with a monotone slot counter.
pub struct MemoryBackend {
    map: Mutex<HashMap<BucketLabel, Vec<u8>>>,
    sink: TraceSink,
    slot: AtomicU64,
}

impl MemoryBackend {
    pub fn new(sink: TraceSink) -> Self {
        Self {
            map: Mutex::new(HashMap::new()),
            sink,
            slot: AtomicU64::new(0),
        }
    }

    pub fn sink(&self) -> &TraceSink {
        &self.sink
    }

    fn next_slot(&self) -> u64 {
        self.slot.fetch_add(1, Ordering::Relaxed)
    }

    /// Total ciphertext payload bytes currently stored.
    pub fn payload_bytes(&self) -> usize {
        self.map.lock().unwrap().values().map(Vec::len).sum()
    }

    /// Writes the full store: magic, version, ciphertext length, entry
    /// count, then packed `label ‖ ciphertext` entries.
    pub fn persist(&self, path: &Path) -> Result<()> {
        let map = self.map.lock().unwrap();
        let ct_len = map.values().next().map_or(0, Vec::len);
        if map.values().any(|c| c.len() != ct_len) {
            return Err(Error::Persistence(
                "store holds ciphertexts of unequal length".into(),
            ));
        }
        let mut out = Vec::with_capacity(18 + map.len() * (16 + ct_len));
        out.extend_from_slice(b"SWKV");
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&(ct_len as u32).to_le_bytes());
        out.extend_from_slice(&(map.len() as u64).to_le_bytes());
        // Deterministic on-disk order regardless of hash-map iteration.
        let mut entries: Vec<(&BucketLabel, &Vec<u8>)> = map.iter().collect();
        entries.sort_by_key(|(l, _)| **l);
        for (label, ct) in entries {
            out.extend_from_slice(&label.0);
            out.extend_from_slice(ct);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Loads a persisted store, replacing current contents.
    pub fn restore(&self, path: &Path) -> Result<()> {
        let buf = std::fs::read(path)?;
        let fail = |m: &str| Error::Persistence(format!("{}: {m}", path.display()));
        if buf.len() < 18 || &buf[0..4] != b"SWKV" {
            return Err(fail("bad magic"));
        }
        let version = u16::from_le_bytes(buf[4..6].try_into().unwrap());
        if version != 1 {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let ct_len = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(buf[10..18].try_into().unwrap()) as usize;
        let entry_len = 16 + ct_len;
        if buf.len() != 18 + count * entry_len {
            return Err(fail("truncated entry section"));
        }
        let mut map = HashMap::with_capacity(count);
        for i in 0..count {
            let off = 18 + i * entry_len;
            let label = BucketLabel(buf[off..off + 16].try_into().unwrap());
            map.insert(label, buf[off + 16..off + entry_len].to_vec());
        }
        *self.map.lock().unwrap() = map;
        Ok(())
    }
}

impl KvBackend for Box<dyn KvBackend> {
    fn get_batch(&self, labels: &[BucketLabel]) -> Result<Vec<Vec<u8>>> {
        (**self).get_batch(labels)
    }
    fn put_batch(&self, entries: Vec<StoreEntry>) -> Result<()> {
        (**self).put_batch(entries)
    }
    fn remove_batch(&self, labels: &[BucketLabel]) -> Result<()> {
        (**self).remove_batch(labels)
    }
    fn entry_count(&self) -> usize {
        (**self).entry_count()
    }
}

impl KvBackend for MemoryBackend {
    fn get_batch(&self, labels: &[BucketLabel]) -> Result<Vec<Vec<u8>>> {
        let map = self.map.lock().unwrap();
        let mut out = Vec::with_capacity(labels.len());
        for label in labels {
            out.push(map.get(label).cloned().ok_or(Error::MissingLabel)?);
        }
        self.sink.record_batch(self.next_slot(), labels, TraceOp::Read);
        Ok(out)
    }

    fn put_batch(&self, entries: Vec<StoreEntry>) -> Result<()> {
        let labels: Vec<BucketLabel> = entries.iter().map(|e| e.label).collect();
        let mut map = self.map.lock().unwrap();
        for e in entries {
            map.insert(e.label, e.ciphertext);
        }
        self.sink.record_batch(self.next_slot(), &labels, TraceOp::Write);
        Ok(())
    }

    fn remove_batch(&self, labels: &[BucketLabel]) -> Result<()> {
        let mut map = self.map.lock().unwrap();
        for label in labels {
            map.remove(label);
        }
        self.sink.record_batch(self.next_slot(), labels, TraceOp::Write);
        Ok(())
    }

    fn entry_count(&self) -> usize {
        self.map.lock().unwrap().len()
    }
}

/// Memory backend that rewrites its file after every mutating batch and
/// restores from it on open.
pub struct FileBackend {
    inner: MemoryBackend,
    path: PathBuf,
}

impl FileBackend {
    pub fn open(path: PathBuf, sink: TraceSink) -> Result<Self> {
        let inner = MemoryBackend::new(sink);
        if path.exists() {
            inner.restore(&path)?;
        }
        Ok(Self { inner, path })
    }

    pub fn inner(&self) -> &MemoryBackend {
        &self.inner
    }
}

impl KvBackend for FileBackend {
    fn get_batch(&self, labels: &[BucketLabel]) -> Result<Vec<Vec<u8>>> {
        self.inner.get_batch(labels)
    }

    fn put_batch(&self, entries: Vec<StoreEntry>) -> Result<()> {
        self.inner.put_batch(entries)?;
        self.inner.persist(&self.path)
    }

    fn remove_batch(&self, labels: &[BucketLabel]) -> Result<()> {
        self.inner.remove_batch(labels)?;
        self.inner.persist(&self.path)
    }

    fn entry_count(&self) -> usize {
        self.inner.entry_count()
    }
}

// Wire protocol. All integers little-endian.
// Frame: [len: u32][opcode: u8][payload]; `len` counts opcode + payload.
const OP_GET_BATCH: u8 = 0x01;
const OP_PUT_BATCH: u8 = 0x02;
// Artifact extension beyond the specified frames: batched label removal,
// needed so remote stores support epoch turnover like in-process ones.
const OP_REMOVE_BATCH: u8 = 0x03;
const OP_GET_REPLY: u8 = 0x81;
const OP_OK: u8 = 0x82;
const OP_ERROR: u8 = 0x7F;

const ERR_MISSING_LABEL: u8 = 1;
const ERR_MALFORMED: u8 = 2;

fn write_frame(w: &mut impl Write, opcode: u8, payload: &[u8]) -> Result<()> {
    let len = (payload.len() + 1) as u32;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&[opcode])?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

fn read_frame(r: &mut impl Read) -> Result<(u8, Vec<u8>)> {
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)?;
    let len = u32::from_le_bytes(len_buf) as usize;
    if len == 0 {
        return Err(Error::Protocol("zero-length frame".into()));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let opcode = body[0];
    body.drain(..1);
    Ok((opcode, body))
}

fn parse_labels(payload: &[u8]) -> Result<Vec<BucketLabel>> {
    if payload.len() < 4 {
        return Err(Error::Protocol("short label batch".into()));
    }
    let count = u32::from_le_bytes(payload[0..4].try_into().unwrap()) as usize;
    if payload.len() != 4 + count * 16 {
        return Err(Error::Protocol("label batch length mismatch".into()));
    }
    Ok((0..count)
        .map(|i| BucketLabel(payload[4 + i * 16..20 + i * 16].try_into().unwrap()))
        .collect())
}

fn encode_labels(labels: &[BucketLabel]) -> Vec<u8> {
    let mut p = Vec::with_capacity(4 + labels.len() * 16);
    p.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for l in labels {
        p.extend_from_slice(&l.0);
    }
    p
}

/// Serves one connection until EOF. Run per accepted socket.
pub fn serve_connection(stream: TcpStream, backend: &impl KvBackend) -> Result<()> {
    let mut reader = std::io::BufReader::new(stream.try_clone()?);
    let mut writer = std::io::BufWriter::new(stream);
    loop {
        let (opcode, payload) = match read_frame(&mut reader) {
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            other => other?,
        };
        match opcode {
            OP_GET_BATCH => match parse_labels(&payload).and_then(|l| backend.get_batch(&l)) {
                Ok(cts) => {
                    let mut p = Vec::new();
                    p.extend_from_slice(&(cts.len() as u32).to_le_bytes());
                    for ct in cts {
                        p.extend_from_slice(&ct);
                    }
                    write_frame(&mut writer, OP_GET_REPLY, &p)?;
                }
                Err(Error::MissingLabel) => {
                    write_frame(&mut writer, OP_ERROR, &[ERR_MISSING_LABEL])?
                }
                Err(_) => write_frame(&mut writer, OP_ERROR, &[ERR_MALFORMED])?,
            },
            OP_PUT_BATCH => {
                let parsed = (|| -> Result<Vec<StoreEntry>> {
                    if payload.len() < 4 {
                        return Err(Error::Protocol("short put batch".into()));
                    }
                    let count = u32::from_le_bytes(payload[0..4].try_into().unwrap()) as usize;
                    let mut entries = Vec::with_capacity(count);
                    let mut off = 4;
                    for _ in 0..count {
                        if payload.len() < off + 20 {
                            return Err(Error::Protocol("truncated put entry".into()));
                        }
                        let label =
                            BucketLabel(payload[off..off + 16].try_into().unwrap());
                        let ct_len = u32::from_le_bytes(
                            payload[off + 16..off + 20].try_into().unwrap(),
                        ) as usize;
                        off += 20;
                        if payload.len() < off + ct_len {
                            return Err(Error::Protocol("truncated ciphertext".into()));
                        }
                        entries.push(StoreEntry {
                            label,
                            ciphertext: payload[off..off + ct_len].to_vec(),
                        });
                        off += ct_len;
                    }
                    if off != payload.len() {
                        return Err(Error::Protocol("trailing bytes in put batch".into()));
                    }
                    Ok(entries)
                })();
                match parsed.and_then(|e| backend.put_batch(e)) {
                    Ok(()) => write_frame(&mut writer, OP_OK, &[])?,
                    Err(_) => write_frame(&mut writer, OP_ERROR, &[ERR_MALFORMED])?,
                }
            }
            OP_REMOVE_BATCH => {
                match parse_labels(&payload).and_then(|l| backend.remove_batch(&l)) {
                    Ok(()) => write_frame(&mut writer, OP_OK, &[])?,
                    Err(_) => write_frame(&mut writer, OP_ERROR, &[ERR_MALFORMED])?,
                }
            }
            _ => write_frame(&mut writer, OP_ERROR, &[ERR_MALFORMED])?,
        }
    }
}

/// Accepts connections until the listener errors; serves each sequentially.
pub fn serve(listener: TcpListener, backend: &impl KvBackend) -> Result<()> {
    for stream in listener.incoming() {
        serve_connection(stream?, backend)?;
    }
    Ok(())
}

/// Client-side backend speaking the wire protocol over one TCP connection.
pub struct TcpBackend {
    stream: Mutex<TcpStream>,
    ciphertext_len: usize,
    entries: AtomicU64,
}

impl TcpBackend {
    /// Connects to a server. `ciphertext_len` fixes how reply payloads are
    /// split (every ciphertext in a store has the same length).
    pub fn connect(addr: &str, ciphertext_len: usize) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream: Mutex::new(stream),
            ciphertext_len,
            entries: AtomicU64::new(0),
        })
    }

    fn round_trip(&self, opcode: u8, payload: &[u8]) -> Result<(u8, Vec<u8>)> {
        let mut stream = self.stream.lock().unwrap();
        write_frame(&mut *stream, opcode, payload)?;
        let (op, body) = read_frame(&mut *stream)?;
        if op == OP_ERROR {
            return match body.first() {
                Some(&ERR_MISSING_LABEL) => Err(Error::MissingLabel),
                _ => Err(Error::Protocol("server reported malformed request".into())),
            };
        }
        Ok((op, body))
    }
}

impl KvBackend for TcpBackend {
    fn get_batch(&self, labels: &[BucketLabel]) -> Result<Vec<Vec<u8>>> {
        let (op, body) = self.round_trip(OP_GET_BATCH, &encode_labels(labels))?;
        if op != OP_GET_REPLY || body.len() < 4 {
            return Err(Error::Protocol(format!("unexpected reply opcode {op:#x}")));
        }
        let count = u32::from_le_bytes(body[0..4].try_into().unwrap()) as usize;
        if body.len() != 4 + count * self.ciphertext_len || count != labels.len() {
            return Err(Error::Protocol("reply batch shape mismatch".into()));
        }
        Ok(body[4..]
            .chunks(self.ciphertext_len)
            .map(|c| c.to_vec())
            .collect())
    }

    fn put_batch(&self, entries: Vec<StoreEntry>) -> Result<()> {
        let mut p = Vec::new();
        p.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let n = entries.len() as u64;
        for e in &entries {
            p.extend_from_slice(&e.label.0);
            p.extend_from_slice(&(e.ciphertext.len() as u32).to_le_bytes());
            p.extend_from_slice(&e.ciphertext);
        }
        let (op, _) = self.round_trip(OP_PUT_BATCH, &p)?;
        if op != OP_OK {
            return Err(Error::Protocol(format!("unexpected reply opcode {op:#x}")));
        }
        self.entries.fetch_add(n, Ordering::Relaxed);
        Ok(())
    }

    fn remove_batch(&self, labels: &[BucketLabel]) -> Result<()> {
        let (op, _) = self.round_trip(OP_REMOVE_BATCH, &encode_labels(labels))?;
        if op != OP_OK {
            return Err(Error::Protocol(format!("unexpected reply opcode {op:#x}")));
        }
        Ok(())
    }

    fn entry_count(&self) -> usize {
        // Upper bound from local accounting; exact counts live server-side.
        self.entries.load(Ordering::Relaxed) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(i: u8) -> BucketLabel {
        BucketLabel([i; 16])
    }

    fn entry(i: u8, len: usize) -> StoreEntry {
        StoreEntry {
            label: label(i),
            ciphertext: vec![i ^ 0x5a; len],
        }
    }

    #[test]
    fn put_then_get_round_trip() {
        let b = MemoryBackend::new(TraceSink::new());
        b.put_batch(vec![entry(1, 32), entry(2, 32)]).unwrap();
        let got = b.get_batch(&[label(2), label(1)]).unwrap();
        assert_eq!(got[0], vec![2 ^ 0x5a; 32]);
        assert_eq!(got[1], vec![1 ^ 0x5a; 32]);
    }

    #[test]
    fn get_preserves_order_across_batch() {
        let b = MemoryBackend::new(TraceSink::new());
        b.put_batch((0..5).map(|i| entry(i, 8)).collect()).unwrap();
        let labels: Vec<BucketLabel> = [4u8, 0, 3, 1, 2].iter().map(|&i| label(i)).collect();
        let got = b.get_batch(&labels).unwrap();
        assert_eq!(got.len(), 5);
        for (ct, l) in got.iter().zip([4u8, 0, 3, 1, 2]) {
            assert_eq!(ct, &vec![l ^ 0x5a; 8]);
        }
    }

    #[test]
    fn unknown_label_is_an_error() {
        let b = MemoryBackend::new(TraceSink::new());
        b.put_batch(vec![entry(1, 8)]).unwrap();
        assert!(matches!(
            b.get_batch(&[label(9)]),
            Err(Error::MissingLabel)
        ));
    }

    #[test]
    fn every_batch_lands_in_the_trace_once() {
        let sink = TraceSink::new();
        let b = MemoryBackend::new(sink.clone());
        b.put_batch(vec![entry(1, 8), entry(2, 8)]).unwrap();
        b.get_batch(&[label(1)]).unwrap();
        b.remove_batch(&[label(2)]).unwrap();
        let trace = sink.snapshot();
        assert_eq!(trace.events.len(), 4);
        assert!(trace.events.windows(2).all(|w| w[0].slot <= w[1].slot));
        assert_eq!(trace.read_labels(), vec![label(1)]);
    }

    #[test]
    fn persistence_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("veilstore-kv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("store.kv");
        let b = MemoryBackend::new(TraceSink::new());
        b.put_batch((0..20).map(|i| entry(i, 64)).collect()).unwrap();
        b.persist(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        assert_eq!(&first[0..4], b"SWKV");

        let b2 = MemoryBackend::new(TraceSink::new());
        b2.restore(&path).unwrap();
        assert_eq!(b2.entry_count(), 20);
        assert_eq!(
            b2.get_batch(&[label(7)]).unwrap()[0],
            vec![7 ^ 0x5a; 64]
        );
        b2.persist(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn file_backend_survives_reopen() {
        let dir = std::env::temp_dir().join(format!("veilstore-fb-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("file-backend.kv");
        let _ = std::fs::remove_file(&path);
        {
            let b = FileBackend::open(path.clone(), TraceSink::new()).unwrap();
            b.put_batch(vec![entry(3, 16)]).unwrap();
        }
        let b = FileBackend::open(path.clone(), TraceSink::new()).unwrap();
        assert_eq!(b.entry_count(), 1);
        assert_eq!(b.get_batch(&[label(3)]).unwrap()[0], vec![3 ^ 0x5a; 16]);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn tcp_transport_matches_in_process() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server_sink = TraceSink::new();
        let server_backend = MemoryBackend::new(server_sink.clone());
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            serve_connection(stream, &server_backend).unwrap();
        });

        let local = MemoryBackend::new(TraceSink::new());
        let remote = TcpBackend::connect(&addr, 32).unwrap();
        for backend in [&local as &dyn KvBackend, &remote as &dyn KvBackend] {
            backend
                .put_batch((0..8).map(|i| entry(i, 32)).collect())
                .unwrap();
            backend.remove_batch(&[label(7)]).unwrap();
        }
        let labels: Vec<BucketLabel> = (0..7).map(label).collect();
        let via_tcp = remote.get_batch(&labels).unwrap();
        let via_mem = local.get_batch(&labels).unwrap();
        assert_eq!(via_tcp, via_mem);
        assert!(matches!(
            remote.get_batch(&[label(7)]),
            Err(Error::MissingLabel)
        ));
        drop(remote);
        handle.join().unwrap();

        // The server-side trace matches the in-process trace event for event
        // (ignoring the failed probe, which the local backend never saw).
        let server_trace = server_sink.snapshot();
        let local_trace = local.sink().snapshot();
        assert_eq!(
            &server_trace.events[..local_trace.events.len()],
            &local_trace.events[..]
        );
    }
}
