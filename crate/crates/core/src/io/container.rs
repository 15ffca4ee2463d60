//! Shared file layout: a line-oriented `key=value` manifest ending in a
//! `payload` line, then the binary blocks back to back.
//!
//! ```text
//! format=xrmbt-sequence
//! version=1
//! ...
//! block=points 235200
//! crc32=1a2b3c4d
//! payload
//! <bytes>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub fields: Vec<(String, String)>,
    pub blocks: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn new(format: &str, version: u32) -> Self {
        let mut c = Self::default();
        c.set("format", format);
        c.set("version", version);
        c
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.fields.push((key.to_string(), value.to_string()));
    }

    pub fn block(&mut self, name: &str, bytes: Vec<u8>) {
        self.blocks.push((name.to_string(), bytes));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = crc32fast::Hasher::new();
        for (_, b) in &self.blocks {
            h.update(b);
        }
        let mut out = String::new();
        for (k, v) in &self.fields {
            out.push_str(&format!("{k}={v}\n"));
        }
        for (name, b) in &self.blocks {
            out.push_str(&format!("block={name} {}\n", b.len()));
        }
        out.push_str(&format!("crc32={:08x}\npayload\n", h.finalize()));
        let mut bytes = out.into_bytes();
        for (_, b) in &self.blocks {
            bytes.extend_from_slice(b);
        }
        bytes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Parses and validates format name, version and checksum.
    pub fn from_bytes(bytes: &[u8], path: &Path, format: &str, version: u32) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut c = Container::default();
        let mut sizes = Vec::new();
        let mut crc = None;
        let mut pos = 0;
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("manifest is not terminated by a payload line".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| bad("manifest is not UTF-8".into()))?;
            pos += end + 1;
            if line == "payload" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("manifest line `{line}` is not key=value")))?;
            match k {
                "block" => {
                    let (name, n) = v
                        .split_once(' ')
                        .ok_or_else(|| bad(format!("bad block line `{line}`")))?;
                    let n: usize = n.parse().map_err(|_| bad(format!("bad block size `{n}`")))?;
                    sizes.push((name.to_string(), n));
                }
                "crc32" => {
                    crc = Some(u32::from_str_radix(v, 16).map_err(|_| bad(format!("bad crc32 `{v}`")))?);
                }
                _ => c.set(k, v),
            }
        }
        match c.get("format") {
            Some(f) if f == format => {}
            other => return Err(bad(format!("expected format {format}, found {other:?}"))),
        }
        let found: u32 = c
            .get("version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing or malformed version".into()))?;
        if found != version {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                found,
                expected: version,
            });
        }
        let expected = crc.ok_or_else(|| bad("missing crc32".into()))?;
        let total: usize = sizes.iter().map(|(_, n)| n).sum();
        let payload = &bytes[pos..];
        if payload.len() != total {
            return Err(bad(format!(
                "payload holds {} bytes, manifest declares {total}",
                payload.len()
            )));
        }
        let actual = crc32fast::hash(payload);
        if actual != expected {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                expected,
                actual,
            });
        }
        let mut off = 0;
        for (name, n) in sizes {
            c.block(&name, payload[off..off + n].to_vec());
            off += n;
        }
        Ok(c)
    }

    pub fn load(path: &Path, format: &str, version: u32) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path, format, version)
    }

    pub fn field<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let v = self.get(key).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("missing field `{key}`"),
        })?;
        v.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            msg: format!("malformed field `{key}={v}`"),
        })
    }

    pub fn take_block(&mut self, name: &str, path: &Path) -> Result<Vec<u8>> {
        let i = self
            .blocks
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                msg: format!("missing block `{name}`"),
            })?;
        Ok(self.blocks.remove(i).1)
    }
}

pub fn f32_bytes(v: impl IntoIterator<Item = f32>) -> Vec<u8> {
    v.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn bytes_f32(b: &[u8], expect: usize, path: &Path, what: &str) -> Result<Vec<f32>> {
    if b.len() != expect * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("block `{what}` holds {} bytes, expected {}", b.len(), expect * 4),
        });
    }
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut c = Container::new("test", 3);
        c.set("n", 2);
        c.block("a", f32_bytes([1.0, -2.5]));
        c.block("b", vec![7, 8, 9]);
        let bytes = c.to_bytes();
        let p = Path::new("mem");
        let back = Container::from_bytes(&bytes, p, "test", 3).unwrap();
        assert_eq!(back, c);

        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 1;
        assert!(matches!(Container::from_bytes(&bad, p, "test", 3), Err(Error::Checksum { .. })));
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 2], p, "test", 3),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            Container::from_bytes(&bytes, p, "test", 4),
            Err(Error::SchemaVersion { found: 3, .. })
        ));
        assert!(Container::from_bytes(&bytes, p, "other", 3).is_err());
    }
}
