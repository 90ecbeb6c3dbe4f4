use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Params;
use crate::error::{Error, Result};

/// Parameter checkpoint: one JSON header line listing (name, shape, offset)
/// per parameter, followed by the flat little-endian f64 payload. Offsets
/// count f64 elements from the start of the payload.
#[derive(Debug, Serialize, Deserialize)]
struct Header {
    params: Vec<HeaderEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn save_params(params: &Params, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0usize;
    for id in params.ids() {
        entries.push(HeaderEntry {
            name: params.name(id).to_string(),
            shape: params.shape(id).to_vec(),
            offset,
        });
        offset += params.value(id).len();
    }
    let header = serde_json::to_string(&Header { params: entries })
        .map_err(|e| Error::load(path.display().to_string(), e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(header.as_bytes())?;
    w.write_all(b"\n")?;
    for id in params.ids() {
        for v in params.value(id) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Params> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|_| Error::load(path.display().to_string(), "truncated header"))?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::load(path.display().to_string(), format!("bad header: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::load(
            path.display().to_string(),
            "payload is not a whole number of f64 values",
        ));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = Params::new();
    for e in &header.params {
        let len: usize = e.shape.iter().product();
        let end = e.offset + len;
        if end > floats.len() {
            return Err(Error::load(
                path.display().to_string(),
                format!("parameter `{}` extends past payload ({end} > {})", e.name, floats.len()),
            ));
        }
        params.register(e.name.clone(), e.shape.clone(), floats[e.offset..end].to_vec());
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_preserves_bits() {
        let mut rng = Rng::new(1);
        let mut params = Params::new();
        let mut v1 = vec![0.0; 12];
        let mut v2 = vec![0.0; 5];
        rng.fill_normal(&mut v1);
        rng.fill_normal(&mut v2);
        params.register("layer.w", vec![3, 4], v1.clone());
        params.register("layer.b", vec![5], v2.clone());

        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save_params(&params, &path).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back.len(), 2);
        let id0 = back.ids().next().unwrap();
        assert_eq!(back.name(id0), "layer.w");
        assert_eq!(back.shape(id0), &[3, 4]);
        assert_eq!(back.value(id0), &v1[..]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = std::env::temp_dir().join(format!("ckpt_trunc_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(
            &path,
            b"{\"params\":[{\"name\":\"w\",\"shape\":[4],\"offset\":0}]}\n\x00\x00",
        )
        .unwrap();
        assert!(load_params(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
