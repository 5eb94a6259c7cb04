//! Binary file formats: TNS1 tensor blobs, VOL1 volumes, PGM slices, and the
//! checkpoint container (JSON manifest + concatenated TNS1 blobs).
//!
//! TNS1: magic "TNS1", u32 rank, u32 extents, f32 little-endian row-major.
//! VOL1: magic "VOL1", u32 count-of-extents, u32 extents (C,D,H,W), f32
//! little-endian row-major payload, CRC-32 trailer over everything before it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const TNS1_MAGIC: &[u8; 4] = b"TNS1";
const VOL1_MAGIC: &[u8; 4] = b"VOL1";

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn read_u32(bytes: &[u8], off: &mut usize, path: &str) -> Result<u32> {
    let end = *off + 4;
    if end > bytes.len() {
        return Err(Error::Format { path: path.into(), detail: "truncated".into() });
    }
    let v = u32::from_le_bytes(bytes[*off..end].try_into().expect("length checked"));
    *off = end;
    Ok(v)
}

/// Serialize a tensor as a TNS1 blob.
pub fn tns1_to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    buf.extend_from_slice(TNS1_MAGIC);
    push_u32(&mut buf, t.rank() as u32);
    for &e in t.shape() {
        push_u32(&mut buf, e as u32);
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parse one TNS1 blob starting at `off`; advances `off` past it.
pub fn tns1_from_bytes(bytes: &[u8], off: &mut usize, path: &str) -> Result<Tensor<f32>> {
    if bytes.len() < *off + 4 || &bytes[*off..*off + 4] != TNS1_MAGIC {
        return Err(Error::Format { path: path.into(), detail: "bad TNS1 magic".into() });
    }
    *off += 4;
    let rank = read_u32(bytes, off, path)? as usize;
    if rank > 8 {
        return Err(Error::Format { path: path.into(), detail: format!("implausible rank {}", rank) });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(bytes, off, path)? as usize);
    }
    let n: usize = shape.iter().product();
    let end = *off + 4 * n;
    if end > bytes.len() {
        return Err(Error::Format { path: path.into(), detail: "truncated payload".into() });
    }
    let mut data = Vec::with_capacity(n);
    for chunk in bytes[*off..end].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().expect("chunk of 4")));
    }
    *off = end;
    Tensor::new(shape, data)
}

/// Write a volume file (VOL1 with CRC-32 trailer).
pub fn write_vol1(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.len());
    buf.extend_from_slice(VOL1_MAGIC);
    push_u32(&mut buf, t.rank() as u32);
    for &e in t.shape() {
        push_u32(&mut buf, e as u32);
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32(&buf);
    push_u32(&mut buf, crc);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read and CRC-check a volume file.
pub fn read_vol1(path: &Path) -> Result<Tensor<f32>> {
    let pstr = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != VOL1_MAGIC {
        return Err(Error::Format { path: pstr, detail: "bad VOL1 magic".into() });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored =
        u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("trailer of 4"));
    if crc32(body) != stored {
        return Err(Error::Format { path: pstr, detail: "CRC mismatch".into() });
    }
    let mut off = 4usize;
    let rank = read_u32(body, &mut off, &pstr)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(body, &mut off, &pstr)? as usize);
    }
    let n: usize = shape.iter().product();
    if off + 4 * n != body.len() {
        return Err(Error::Format { path: pstr, detail: "payload length mismatch".into() });
    }
    let mut data = Vec::with_capacity(n);
    for chunk in body[off..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().expect("chunk of 4")));
    }
    Tensor::new(shape, data)
}

/// Container with a JSON manifest followed by concatenated TNS1 blobs:
/// u64 LE manifest length, manifest bytes, blob area. Offsets recorded in the
/// manifest are relative to the start of the blob area.
pub fn write_blob_container(path: &Path, manifest: &serde_json::Value, blobs: &[Tensor<f32>]) -> Result<()> {
    let mut blob_area = Vec::new();
    let mut offsets = Vec::with_capacity(blobs.len());
    for t in blobs {
        offsets.push(blob_area.len() as u64);
        blob_area.extend_from_slice(&tns1_to_bytes(t));
    }
    let mut manifest = manifest.clone();
    manifest["blob_offsets"] = serde_json::json!(offsets);
    let mbytes = serde_json::to_vec(&manifest)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&(mbytes.len() as u64).to_le_bytes())?;
    f.write_all(&mbytes)?;
    f.write_all(&blob_area)?;
    Ok(())
}

/// Read back a blob container: (manifest, blobs in manifest order).
pub fn read_blob_container(path: &Path) -> Result<(serde_json::Value, Vec<Tensor<f32>>)> {
    let pstr = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Format { path: pstr, detail: "truncated header".into() });
    }
    let mlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if 8 + mlen > bytes.len() {
        return Err(Error::Format { path: pstr, detail: "manifest overruns file".into() });
    }
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[8..8 + mlen])?;
    let blob_area = &bytes[8 + mlen..];
    let offsets: Vec<u64> = manifest
        .get("blob_offsets")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| Error::Format { path: pstr.clone(), detail: "missing blob_offsets".into() })?;
    let mut blobs = Vec::with_capacity(offsets.len());
    for &o in &offsets {
        let mut off = o as usize;
        blobs.push(tns1_from_bytes(blob_area, &mut off, &pstr)?);
    }
    Ok((manifest, blobs))
}

/// Write an 8-bit binary PGM (P5) image.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape("write_pgm", format!("{}x{} vs {} pixels", width, height, pixels.len())));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", width, height)?;
    f.write_all(pixels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32_known_vector() {
        // standard check value for "123456789"
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn tns1_round_trip() {
        let t = Tensor::<f32>::from_fn(vec![2, 3, 1], |i| i as f32 * 0.5 - 1.0);
        let bytes = tns1_to_bytes(&t);
        assert_eq!(&bytes[..4], b"TNS1");
        let mut off = 0;
        let back = tns1_from_bytes(&bytes, &mut off, "mem").unwrap();
        assert_eq!(off, bytes.len());
        assert_eq!(back, t);
    }

    #[test]
    fn vol1_round_trip_and_crc_guard() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vol");
        let t = Tensor::<f32>::from_fn(vec![1, 2, 2, 2], |i| (i as f32).sin());
        write_vol1(&p, &t).unwrap();
        assert_eq!(read_vol1(&p).unwrap(), t);
        // corrupt one payload byte
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[20] ^= 0xFF;
        std::fs::write(&p, &bytes).unwrap();
        let err = read_vol1(&p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn blob_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let a = Tensor::<f32>::from_fn(vec![3], |i| i as f32);
        let b = Tensor::<f32>::from_fn(vec![2, 2], |i| -(i as f32));
        let manifest = serde_json::json!({"kind": "test", "names": ["a", "b"]});
        write_blob_container(&p, &manifest, &[a.clone(), b.clone()]).unwrap();
        let (m, blobs) = read_blob_container(&p).unwrap();
        assert_eq!(m["kind"], "test");
        assert_eq!(blobs, vec![a, b]);
    }
}
