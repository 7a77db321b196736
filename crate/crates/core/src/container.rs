//! Versioned binary files: 8-byte magic, `u32` version, `u64` header length,
//! a JSON header, then raw little-endian `f64` values to the end of the file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write<H: Serialize>(path: &Path, magic: &[u8; 8], version: u32, header: &H, values: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(magic)?;
    put(&version.to_le_bytes())?;
    put(&(json.len() as u64).to_le_bytes())?;
    put(&json)?;
    for v in values {
        put(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 8], version: u32) -> Result<(H, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let name = path.display();
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(Error::Format(format!("{name}: not a {} file", String::from_utf8_lossy(magic))));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if found != version {
        return Err(Error::Format(format!("{name}: version {found}, expected {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes
        .get(20..20 + len)
        .ok_or_else(|| Error::Format(format!("{name}: truncated header")))?;
    let header = serde_json::from_slice(body)?;
    let rest = &bytes[20 + len..];
    if rest.len() % 8 != 0 {
        return Err(Error::Format(format!("{name}: trailing {} bytes", rest.len() % 8)));
    }
    let values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let values = [1.5, -0.0, f64::MIN_POSITIVE, 1e300];
        write(&path, b"TESTFILE", 3, &vec!["a", "b"], &values).unwrap();
        let (h, v): (Vec<String>, Vec<f64>) = read(&path, b"TESTFILE", 3).unwrap();
        assert_eq!(h, ["a", "b"]);
        assert_eq!(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), values.map(f64::to_bits));
        assert!(read::<Vec<String>>(&path, b"TESTFILE", 4).is_err());
        assert!(read::<Vec<String>>(&path, b"OTHERFIL", 3).is_err());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read::<Vec<String>>(&path, b"TESTFILE", 3).is_err());
    }
}
