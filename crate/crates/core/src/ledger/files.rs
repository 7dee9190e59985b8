use std::fs;
use std::io;
use std::ops::Range;
use std::path::Path;

use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::SUITE;

use super::LedgerEntry;

pub const FILE_MAGIC: &[u8; 8] = b"LEDGER\0\x01";
pub const FILE_VERSION: u32 = 1;

pub fn chunk_file_name(first: u64, last: u64) -> String {
    format!("{first}-{last}.ledger")
}

/// One ledger file: a header followed by length-prefixed entry frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub first: u64,
    pub last: u64,
    pub bytes: Vec<u8>,
}

impl Chunk {
    pub fn from_entries(entries: &[&LedgerEntry]) -> Chunk {
        let mut w = Writer::new();
        w.raw(FILE_MAGIC).u32(FILE_VERSION).bytes(SUITE.as_bytes());
        for e in entries {
            w.bytes(&e.encode());
        }
        Chunk {
            first: entries.first().map_or(0, |e| e.txid.seqno),
            last: entries.last().map_or(0, |e| e.txid.seqno),
            bytes: w.finish(),
        }
    }

    pub fn file_name(&self) -> String {
        chunk_file_name(self.first, self.last)
    }
}

/// Result of parsing one chunk: every frame decoded before the first
/// error, with the byte range each occupies.
#[derive(Debug, Default)]
pub struct ParsedChunk {
    pub entries: Vec<(LedgerEntry, Range<usize>)>,
    pub error: Option<DecodeError>,
}

pub fn parse_chunk(bytes: &[u8]) -> ParsedChunk {
    let mut out = ParsedChunk::default();
    let mut r = Reader::new(bytes);
    let header = (|| {
        if r.raw(FILE_MAGIC.len())? != FILE_MAGIC {
            return Err(r.error("bad magic"));
        }
        if r.u32()? != FILE_VERSION {
            return Err(r.error("unsupported version"));
        }
        if r.string()? != SUITE {
            return Err(r.error("unsupported algorithm suite"));
        }
        Ok(())
    })();
    if let Err(e) = header {
        out.error = Some(e);
        return out;
    }
    while r.remaining() > 0 {
        let start = r.position();
        let frame = match r.bytes() {
            Ok(f) => f,
            Err(e) => {
                out.error = Some(e);
                return out;
            }
        };
        match LedgerEntry::decode(frame) {
            // canonical form only: anything that re-encodes differently is rejected
            Ok(e) if e.encode() == frame => out.entries.push((e, start..r.position())),
            Ok(_) => {
                out.error = Some(DecodeError {
                    offset: start,
                    reason: "non-canonical entry".into(),
                });
                return out;
            }
            Err(mut e) => {
                e.offset += start + 4;
                out.error = Some(e);
                return out;
            }
        }
    }
    out
}

pub fn write_chunks(dir: &Path, chunks: &[Chunk]) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for c in chunks {
        fs::write(dir.join(c.file_name()), &c.bytes)?;
    }
    Ok(())
}

/// Reads `<first>-<last>.ledger` files from `dir`, ordered by first seqno.
pub fn read_dir_chunks(dir: &Path) -> io::Result<Vec<(String, u64, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(".ledger") else {
            continue;
        };
        let Some(first) = stem.split_once('-').and_then(|(a, _)| a.parse::<u64>().ok()) else {
            continue;
        };
        out.push((name, first, fs::read(entry.path())?));
    }
    out.sort_by_key(|(_, first, _)| *first);
    Ok(out)
}
