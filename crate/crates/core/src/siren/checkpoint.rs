//! Binary checkpoint: `b"SIRN"`, u32 version, u32 layer count, u32 per
//! layer width, f64 ω₀, then f32 parameters layer by layer (weights
//! row-major, then bias). All little-endian.

use std::fs;
use std::path::Path;

use super::real::Real;
use super::{SirenError, SirenNetwork};

const MAGIC: &[u8; 4] = b"SIRN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Real>(net: &SirenNetwork<T>, path: &Path) -> Result<(), SirenError> {
    let dims = net.layer_dims();
    let mut buf = Vec::with_capacity(24 + 4 * dims.len() + 4 * net.n_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&net.omega0().to_le_bytes());
    for p in net.params() {
        buf.extend_from_slice(&(p.to_f64_lossy() as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|source| SirenError::Io { path: path.to_path_buf(), source })
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<SirenNetwork<T>, SirenError> {
    let bytes = fs::read(path).map_err(|source| SirenError::Io { path: path.to_path_buf(), source })?;
    let bad = |reason: String| SirenError::BadCheckpoint { path: path.to_path_buf(), reason };
    let mut cursor = Cursor { bytes: &bytes, pos: 0 };
    if cursor.take(4).ok_or_else(|| bad("truncated header".into()))? != MAGIC {
        return Err(bad("not a network checkpoint".into()));
    }
    let version = cursor.u32().ok_or_else(|| bad("truncated header".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n_layers = cursor.u32().ok_or_else(|| bad("truncated header".into()))? as usize;
    if n_layers > 1024 {
        return Err(bad(format!("implausible layer count {n_layers}")));
    }
    let dims = (0..n_layers)
        .map(|_| cursor.u32().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("truncated layer dimensions".into()))?;
    let omega0 = cursor.f64().ok_or_else(|| bad("truncated header".into()))?;
    let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let remaining = bytes.len() - cursor.pos;
    if remaining != 4 * expected {
        return Err(bad(format!("expected {expected} parameters, found {} bytes", remaining)));
    }
    let params = bytes[cursor.pos..]
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    SirenNetwork::from_params(&dims, omega0, params).map_err(|e| bad(e.to_string()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_in_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let net = SirenNetwork::<f32>::init(&[3, 32, 16, 1], 10.0, 11).unwrap();
        write_checkpoint(&net, &path).unwrap();
        let back: SirenNetwork<f32> = read_checkpoint(&path).unwrap();
        assert_eq!(back, net);
        let len = fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, 4 + 4 + 4 + 4 * 4 + 8 + 4 * net.n_params());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let net = SirenNetwork::<f32>::init(&[3, 8, 1], 10.0, 0).unwrap();
        write_checkpoint(&net, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_checkpoint::<f32>(&path), Err(SirenError::BadCheckpoint { .. })));

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        fs::write(&path, &wrong).unwrap();
        assert!(matches!(read_checkpoint::<f32>(&path), Err(SirenError::BadCheckpoint { .. })));

        let mut wrong = bytes.clone();
        wrong[4] = 9;
        fs::write(&path, &wrong).unwrap();
        let err = read_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");

        assert!(matches!(read_checkpoint::<f32>(&dir.path().join("missing.bin")), Err(SirenError::Io { .. })));
    }
}
