//! Binary file formats. All integers and floats are little endian.
//!
//! Library file:
//!
//! ```text
//! "ILTS" | version u32 | family u8 | n_systems u32 | n_inits u32 | length u32 | d u32 | seed u64
//! systems:   n_systems × d × d  f64, row-major
//! sequences: n_systems × n_inits × length × d  f32, system-major
//! ```
//!
//! Trace file (training batches and evaluation datasets):
//!
//! ```text
//! "ILTT" | version u32 | meta_len u32 | meta (JSON) | n_traces u32
//! per trace: len u32, then per token:
//!     tag u8 (0 start, 1 open, 2 close, 3 obs) | pair u8 | slot u8 | system u32 | init u32 | step u32
//!     payload 5 × f64
//! crc32 u32 over every preceding byte
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::datagen::{InterleavedTrace, ObsRef, TokenKind, TraceLibrary};
use crate::dynsys::{Family, State, SystemMatrix, STATE_DIM};
use crate::error::FormatError;

pub const LIBRARY_MAGIC: &[u8; 4] = b"ILTS";
pub const LIBRARY_VERSION: u32 = 1;
pub const TRACES_MAGIC: &[u8; 4] = b"ILTT";
pub const TRACES_VERSION: u32 = 1;

const LIBRARY_HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4 + 4 + 4 + 8;

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn tmp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn write_library(path: &Path, lib: &TraceLibrary) -> Result<(), FormatError> {
    let tmp = tmp_path(path);
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(LIBRARY_MAGIC)?;
        w.write_all(&LIBRARY_VERSION.to_le_bytes())?;
        w.write_all(&[lib.family.as_u8()])?;
        w.write_all(&(lib.n_systems() as u32).to_le_bytes())?;
        w.write_all(&(lib.n_inits() as u32).to_le_bytes())?;
        w.write_all(&(lib.length as u32).to_le_bytes())?;
        w.write_all(&(STATE_DIM as u32).to_le_bytes())?;
        w.write_all(&lib.seed.to_le_bytes())?;
        for u in lib.systems() {
            for row in u.rows() {
                for v in row {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        let mut buf = Vec::with_capacity(lib.length * STATE_DIM * 4);
        for s in 0..lib.n_systems() {
            for i in 0..lib.n_inits() {
                buf.clear();
                for x in lib.states(s, i, 0, lib.length) {
                    for v in x {
                        buf.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                w.write_all(&buf)?;
            }
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

/// Read a library file. Sequences are regenerated from the stored systems and
/// first states, and every stored f32 value is checked against the
/// regenerated one.
pub fn read_library(path: &Path) -> Result<TraceLibrary, FormatError> {
    let mut f = fs::File::open(path)?;
    let mut head = [0u8; LIBRARY_HEADER_LEN];
    f.read_exact(&mut head).map_err(|_| FormatError::Corrupt("truncated header".into()))?;
    if &head[..4] != LIBRARY_MAGIC {
        return Err(FormatError::BadMagic { expected: "ILTS" });
    }
    let version = le_u32(&head[4..8]);
    if version != LIBRARY_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let family = Family::from_u8(head[8]).ok_or_else(|| FormatError::Corrupt(format!("family tag {}", head[8])))?;
    let n_systems = le_u32(&head[9..13]) as usize;
    let n_inits = le_u32(&head[13..17]) as usize;
    let length = le_u32(&head[17..21]) as usize;
    let d = le_u32(&head[21..25]) as usize;
    let seed = u64::from_le_bytes(head[25..33].try_into().expect("8 bytes"));
    if d != STATE_DIM {
        return Err(FormatError::Corrupt(format!("state dimension {d}, expected {STATE_DIM}")));
    }
    if n_systems == 0 || n_inits == 0 || length == 0 {
        return Err(FormatError::Corrupt("empty library".into()));
    }

    let mut sys_bytes = vec![0u8; n_systems * d * d * 8];
    f.read_exact(&mut sys_bytes).map_err(|_| FormatError::Corrupt("truncated systems".into()))?;
    let systems: Vec<SystemMatrix> = sys_bytes
        .chunks_exact(d * d * 8)
        .map(|c| {
            let mut rows = [[0.0; STATE_DIM]; STATE_DIM];
            for (k, v) in c.chunks_exact(8).enumerate() {
                rows[k / d][k % d] = f64::from_le_bytes(v.try_into().expect("8 bytes"));
            }
            SystemMatrix::from_rows(rows, family)
        })
        .collect();

    let seq_len = length * d * 4;
    let mut seq = vec![0u8; seq_len];
    let mut initial: Vec<State> = Vec::with_capacity(n_systems * n_inits);
    let mut stored: Vec<f32> = Vec::with_capacity(length * d);
    for s in 0..n_systems {
        for _ in 0..n_inits {
            f.read_exact(&mut seq).map_err(|_| FormatError::Corrupt("truncated sequences".into()))?;
            stored.clear();
            stored.extend(seq.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))));
            let mut x = [0.0; STATE_DIM];
            for (dst, v) in x.iter_mut().zip(&stored[..d]) {
                *dst = *v as f64;
            }
            // Regenerate and compare.
            let mut cur = x;
            for t in 0..length {
                if t > 0 {
                    cur = systems[s].apply(&cur);
                }
                for j in 0..d {
                    if (cur[j] as f32).to_bits() != stored[t * d + j].to_bits() {
                        return Err(FormatError::Corrupt(format!(
                            "sequence for system {s} disagrees with its generator at step {t}"
                        )));
                    }
                }
            }
            initial.push(x);
        }
    }
    let mut rest = [0u8; 1];
    if f.read(&mut rest)? != 0 {
        return Err(FormatError::Corrupt("trailing bytes".into()));
    }
    Ok(TraceLibrary::from_parts(family, seed, length, systems, initial, n_inits))
}

fn token_tag(kind: &TokenKind) -> (u8, u8, ObsRef) {
    let zero = ObsRef {
        slot: 0,
        system: 0,
        init: 0,
        step: 0,
    };
    match *kind {
        TokenKind::Start => (0, 0, zero),
        TokenKind::Open(p) => (1, p, zero),
        TokenKind::Close(p) => (2, p, zero),
        TokenKind::Obs(o) => (3, 0, o),
    }
}

/// Serialize traces with a JSON metadata block (dataset config, OOD kind, …).
pub fn encode_traces(meta: &serde_json::Value, traces: &[InterleavedTrace]) -> Vec<u8> {
    let meta = serde_json::to_vec(meta).expect("JSON values always serialize");
    let tokens: usize = traces.iter().map(InterleavedTrace::len).sum();
    let mut buf = Vec::with_capacity(16 + meta.len() + 4 * traces.len() + tokens * 55 + 4);
    buf.extend_from_slice(TRACES_MAGIC);
    buf.extend_from_slice(&TRACES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(traces.len() as u32).to_le_bytes());
    for t in traces {
        buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for (kind, x) in t.kinds.iter().zip(&t.payloads) {
            let (tag, pair, o) = token_tag(kind);
            buf.extend_from_slice(&[tag, pair, o.slot]);
            buf.extend_from_slice(&o.system.to_le_bytes());
            buf.extend_from_slice(&o.init.to_le_bytes());
            buf.extend_from_slice(&o.step.to_le_bytes());
            for v in x {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode_traces(bytes: &[u8]) -> Result<(serde_json::Value, Vec<InterleavedTrace>), FormatError> {
    if bytes.len() < 16 {
        return Err(FormatError::Corrupt("file too short".into()));
    }
    if &bytes[..4] != TRACES_MAGIC {
        return Err(FormatError::BadMagic { expected: "ILTT" });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != le_u32(tail) {
        return Err(FormatError::Corrupt("checksum mismatch".into()));
    }
    let version = le_u32(&body[4..8]);
    if version != TRACES_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8], FormatError> {
        let s = body
            .get(pos..pos + n)
            .ok_or_else(|| FormatError::Corrupt("unexpected end of data".into()))?;
        pos += n;
        Ok(s)
    };
    let meta_len = le_u32(take(4)?) as usize;
    let meta: serde_json::Value =
        serde_json::from_slice(take(meta_len)?).map_err(|e| FormatError::Corrupt(e.to_string()))?;
    let n = le_u32(take(4)?) as usize;
    let mut traces = Vec::with_capacity(n);
    for _ in 0..n {
        let len = le_u32(take(4)?) as usize;
        let mut t = InterleavedTrace {
            kinds: Vec::with_capacity(len),
            payloads: Vec::with_capacity(len),
        };
        for _ in 0..len {
            let rec = take(15 + 8 * STATE_DIM)?;
            let (tag, pair, slot) = (rec[0], rec[1], rec[2]);
            let o = ObsRef {
                slot,
                system: le_u32(&rec[3..7]),
                init: le_u32(&rec[7..11]),
                step: le_u32(&rec[11..15]),
            };
            let mut x = [0.0; STATE_DIM];
            for (j, v) in x.iter_mut().enumerate() {
                let off = 15 + 8 * j;
                *v = f64::from_le_bytes(rec[off..off + 8].try_into().expect("8 bytes"));
            }
            let kind = match tag {
                0 => TokenKind::Start,
                1 => TokenKind::Open(pair),
                2 => TokenKind::Close(pair),
                3 => TokenKind::Obs(o),
                other => return Err(FormatError::Corrupt(format!("token tag {other}"))),
            };
            t.kinds.push(kind);
            t.payloads.push(x);
        }
        traces.push(t);
    }
    if pos != body.len() {
        return Err(FormatError::Corrupt("trailing bytes".into()));
    }
    Ok((meta, traces))
}

pub fn write_traces(path: &Path, meta: &serde_json::Value, traces: &[InterleavedTrace]) -> Result<(), FormatError> {
    write_atomic(path, &encode_traces(meta, traces))?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<(serde_json::Value, Vec<InterleavedTrace>), FormatError> {
    decode_traces(&fs::read(path)?)
}
