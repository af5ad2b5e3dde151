//! WSMF binary matrix files.
//!
//! Layout (little-endian): magic `WSMF`, `u32` version (= 1), `u32` rows,
//! `u32` cols, then `rows * cols` `f32` values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WSMF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Encode a matrix into WSMF bytes. Values are narrowed to `f32`.
pub fn encode(m: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Decode WSMF bytes. `path` is only used for error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let bad = |reason: &str| Error::BadFeatureFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let version = word(4);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = HEADER_LEN + rows * cols * 4;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "body length {} does not match {rows}x{cols}",
            bytes.len() - HEADER_LEN
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(&e.to_string()))
}

pub fn read(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes, path)
}

pub fn write(path: &Path, m: &Array2<f64>) -> Result<()> {
    write_atomic(path, &encode(m))
}

/// Write `bytes` to a temporary sibling and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Round every entry to `f32` precision, matching what a WSMF round trip yields.
pub fn quantize(m: &mut Array2<f64>) {
    m.mapv_inplace(|v| v as f32 as f64);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_layout() {
        let m = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let bytes = encode(&m);
        assert_eq!(&bytes[0..4], b"WSMF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1.0);
        // row-major: second value is m[0][1]
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2.0);
        assert_eq!(bytes.len(), 16 + 6 * 4);
    }

    #[test]
    fn decode_rejects_bad_magic_and_truncation() {
        let m = array![[1.0]];
        let mut bytes = encode(&m);
        let p = Path::new("x.wsmf");
        assert!(decode(&bytes[..10], p).is_err());
        bytes.pop();
        assert!(decode(&bytes, p).is_err());
        let mut bytes = encode(&m);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, p), Err(Error::BadFeatureFile { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/m.wsmf");
        let m = array![[0.5, -1.25], [3.0, 1e-3]];
        write(&p, &m).unwrap();
        let back = read(&p).unwrap();
        let mut q = m.clone();
        quantize(&mut q);
        assert_eq!(back, q);
        assert!(matches!(
            read(&dir.path().join("nope.wsmf")),
            Err(Error::MissingFile(_))
        ));
    }
}
