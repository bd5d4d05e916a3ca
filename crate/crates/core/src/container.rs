//! Shared binary container for checkpoints and datasets:
//! 8-byte magic, u64 header length, JSON header, tensor blocks, SHA-256 trailer
//! over everything before it.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::serialize::{read_raw, write_raw};

pub const DIGEST_LEN: usize = 32;

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn encode(magic: &[u8; 8], header: &serde_json::Value, blocks: &[(&[usize], &[f64])]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.write_all(magic)?;
    let head = serde_json::to_vec(header)?;
    buf.write_all(&(head.len() as u64).to_le_bytes())?;
    buf.write_all(&head)?;
    for (shape, data) in blocks {
        write_raw(&mut buf, shape, data)?;
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub struct Decoded {
    pub header: serde_json::Value,
    pub blocks: Vec<(Vec<usize>, Vec<f64>)>,
}

pub fn decode(magic: &[u8; 8], bytes: &[u8], expected_blocks: impl Fn(&serde_json::Value) -> Result<usize>) -> Result<Decoded> {
    if bytes.len() < 16 + DIGEST_LEN {
        return Err(Error::Format("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let found = hex::encode(Sha256::digest(body));
    let expected = hex::encode(trailer);
    if found != expected {
        return Err(Error::Digest { expected, found });
    }
    if &body[..8] != magic {
        return Err(Error::Format(format!("bad magic {:?}", &body[..8])));
    }
    let mut r = Cursor::new(&body[8..]);
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| Error::Format("truncated header length".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > body.len() {
        return Err(Error::Format("header length exceeds file".into()));
    }
    let mut head = vec![0u8; len];
    r.read_exact(&mut head).map_err(|_| Error::Format("truncated header".into()))?;
    let header: serde_json::Value = serde_json::from_slice(&head)?;
    let n = expected_blocks(&header)?;
    let mut blocks = Vec::with_capacity(n);
    for _ in 0..n {
        blocks.push(read_raw(&mut r)?);
    }
    if (r.position() as usize) != body.len() - 8 {
        return Err(Error::Format("trailing bytes after tensor blocks".into()));
    }
    Ok(Decoded { header, blocks })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const MAGIC: &[u8; 8] = b"TESTCNTR";

    fn count(h: &serde_json::Value) -> Result<usize> {
        Ok(h["n"].as_u64().unwrap() as usize)
    }

    #[test]
    fn round_trip_and_corruption() {
        let bytes = encode(MAGIC, &json!({"n": 2}), &[(&[2], &[1.0, 2.0]), (&[1, 1], &[3.5])]).unwrap();
        let d = decode(MAGIC, &bytes, count).unwrap();
        assert_eq!(d.blocks[1], (vec![1, 1], vec![3.5]));
        let again = encode(MAGIC, &d.header, &[(&d.blocks[0].0, &d.blocks[0].1), (&d.blocks[1].0, &d.blocks[1].1)]).unwrap();
        assert_eq!(again, bytes);
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(matches!(decode(MAGIC, &bad, count), Err(Error::Digest { .. })));
        assert!(decode(b"OTHERMAG", &bytes, count).is_err());
        assert!(decode(MAGIC, &bytes[..10], count).is_err());
    }

    #[test]
    fn digest_is_stable() {
        let a = json_digest(&json!({"a": 1, "b": [1, 2]})).unwrap();
        assert_eq!(a, json_digest(&json!({"a": 1, "b": [1, 2]})).unwrap());
        assert_ne!(a, json_digest(&json!({"a": 2, "b": [1, 2]})).unwrap());
        assert_eq!(a.len(), 64);
    }
}
