//! JSONL and compact binary dataset formats.
//!
//! JSONL: one `{"domain": int, "item_id": str, "embedding": [f64, ...]}` per
//! line. Floats are written in shortest round-trip form, so save → load is
//! bit-exact.
//!
//! Binary (`UTOK` v1, little-endian): magic, `u32` version, `u32` K, `u32` d,
//! `u64` count, then per record `u32` domain, `u16` id length, id bytes and
//! `d` IEEE-754 doubles.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"UTOK";
const BINARY_VERSION: u32 = 1;

#[derive(Serialize)]
struct LineOut<'a> {
    domain: i64,
    item_id: &'a str,
    embedding: &'a [f64],
}

#[derive(Deserialize)]
struct LineIn {
    domain: i64,
    item_id: String,
    embedding: Vec<f64>,
}

pub fn write_jsonl<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    for r in ds.records() {
        let line = LineOut {
            domain: ds.domain_labels()[r.domain],
            item_id: &r.item_id,
            embedding: &r.embedding,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl writer>", e))?;
    }
    Ok(())
}

pub fn save_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(ds, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses JSONL from any reader. Blank lines are skipped.
pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut items = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<jsonl reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LineIn = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: line_no,
            message: e.to_string(),
        })?;
        match dim {
            None if rec.embedding.is_empty() => {
                return Err(Error::Format {
                    line: line_no,
                    message: "empty embedding".into(),
                })
            }
            None => dim = Some(rec.embedding.len()),
            Some(d) if d != rec.embedding.len() => {
                return Err(Error::Format {
                    line: line_no,
                    message: format!("embedding has length {}, expected {d}", rec.embedding.len()),
                })
            }
            Some(_) => {}
        }
        if rec.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                line: line_no,
                message: "non-finite embedding value".into(),
            });
        }
        items.push((rec.domain, rec.item_id, rec.embedding));
    }
    if items.is_empty() {
        return Err(Error::Format {
            line: 0,
            message: "no records".into(),
        });
    }
    Dataset::from_labeled(items)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file))
}

pub fn save_binary(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.num_domains() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for r in ds.records() {
        let label = ds.domain_labels()[r.domain];
        let label = u32::try_from(label)
            .map_err(|_| Error::InvalidArgument(format!("domain label {label} does not fit in u32")))?;
        let id = r.item_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::InvalidArgument(format!("item id `{}` is too long", r.item_id)))?;
        buf.extend_from_slice(&label.to_le_bytes());
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id);
        for v in &r.embedding {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            line: 0,
            message: format!("truncated binary dataset at byte {}", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Format { line: 0, message };

    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("missing UTOK magic".into()));
    }
    let version = c.u32()?;
    if version != BINARY_VERSION {
        return Err(bad(format!("unsupported binary version {version}")));
    }
    let k = c.u32()? as usize;
    let d = c.u32()? as usize;
    let count = c.u64()? as usize;
    let mut items = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let domain = c.u32()? as i64;
        let id_len = c.u16()? as usize;
        let id = std::str::from_utf8(c.take(id_len)?)
            .map_err(|e| bad(format!("item id is not UTF-8: {e}")))?
            .to_owned();
        let embedding = (0..d).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        items.push((domain, id, embedding));
    }
    if c.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let ds = Dataset::from_labeled(items)?;
    if ds.num_domains() != k || ds.dim() != d {
        return Err(bad(format!(
            "header says K={k}, d={d} but records give K={}, d={}",
            ds.num_domains(),
            ds.dim()
        )));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticConfig};

    #[test]
    fn two_lines_two_domains() {
        let text = "{\"domain\":0,\"item_id\":\"a\",\"embedding\":[1,2,3]}\n\
                    {\"domain\":1,\"item_id\":\"b\",\"embedding\":[0.5,0,-1]}\n";
        let ds = parse_jsonl(text.as_bytes()).unwrap();
        assert_eq!(ds.num_domains(), 2);
        assert_eq!(ds.dim(), 3);
    }

    #[test]
    fn ragged_line_reported() {
        let text = "{\"domain\":0,\"item_id\":\"a\",\"embedding\":[1,2,3]}\n\
                    {\"domain\":0,\"item_id\":\"b\",\"embedding\":[1,2,3,4]}\n";
        match parse_jsonl(text.as_bytes()).unwrap_err() {
            Error::Format { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("length 4"), "{message}");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert!(parse_jsonl("".as_bytes()).is_err());
        assert!(parse_jsonl("\n\n".as_bytes()).is_err());
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "{\"domain\":0,\"item_id\":\"a\",\"embedding\":[1]}\nnot json\n";
        assert!(matches!(parse_jsonl(text.as_bytes()), Err(Error::Format { line: 2, .. })));
    }

    #[test]
    fn jsonl_and_binary_round_trip_bit_exact() {
        let ds = gen_synthetic(&SyntheticConfig {
            domains: 3,
            items_per_domain: 17,
            dim: 12,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let jp = dir.path().join("ds.jsonl");
        save_jsonl(&ds, &jp).unwrap();
        let back = load_jsonl(&jp).unwrap();
        assert_eq!(back, ds);

        let bp = dir.path().join("ds.utok");
        save_binary(&ds, &bp).unwrap();
        assert_eq!(load_binary(&bp).unwrap(), ds);
        let raw = std::fs::read(&bp).unwrap();
        assert_eq!(&raw[..4], b"UTOK");
        assert_eq!(u32::from_le_bytes(raw[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn truncated_binary_rejected() {
        let ds = gen_synthetic(&SyntheticConfig {
            domains: 1,
            items_per_domain: 2,
            dim: 4,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.utok");
        save_binary(&ds, &p).unwrap();
        let raw = std::fs::read(&p).unwrap();
        std::fs::write(&p, &raw[..raw.len() - 3]).unwrap();
        assert!(load_binary(&p).is_err());
    }
}
