//! Binary envmap container: magic `ENVM`, `u32` height, `u32` width, then
//! `H * W * 3` little-endian `f32` values in row-major RGB order.

use std::fs;
use std::path::Path;

use super::EnvMap;
use crate::error::{Error, Result};

pub const ENVMAP_MAGIC: &[u8; 4] = b"ENVM";

pub fn encode_envmap(env: &EnvMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + env.data().len() * 4);
    out.extend_from_slice(ENVMAP_MAGIC);
    out.extend_from_slice(&(env.height() as u32).to_le_bytes());
    out.extend_from_slice(&(env.width() as u32).to_le_bytes());
    for v in env.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_envmap(bytes: &[u8]) -> Result<EnvMap> {
    let bad = |detail: String| Error::Format { what: "envmap", detail };
    if bytes.len() < 12 || &bytes[..4] != ENVMAP_MAGIC {
        return Err(bad("missing ENVM header".into()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + h * w * 12;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for {h}x{w}, found {}", bytes.len())));
    }
    let data = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    EnvMap::new(h, w, data)
}

pub fn write_envmap(env: &EnvMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_envmap(env)).map_err(|e| Error::io(path, e))
}

pub fn read_envmap(path: impl AsRef<Path>) -> Result<EnvMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_envmap(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let env = EnvMap::constant(2, [1.0, 2.0, 3.0]);
        let bytes = encode_envmap(&env);
        assert_eq!(&bytes[..4], b"ENVM");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &4u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 2 * 4 * 3 * 4);
        assert_eq!(decode_envmap(&bytes).unwrap(), env);
    }

    #[test]
    fn rejects_truncated_files() {
        let bytes = encode_envmap(&EnvMap::constant(2, [1.0; 3]));
        assert!(decode_envmap(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_envmap(b"NOPE").is_err());
    }
}
