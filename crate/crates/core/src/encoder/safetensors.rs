//! Minimal reader/writer for the safetensors container: an 8-byte
//! little-endian header length, a JSON header mapping tensor names to
//! dtype/shape/byte offsets, then the raw data.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::EncoderError;

/// Tensor converted to f32, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

const EXPECTED: &str = "safetensors container";

pub(crate) fn parse(bytes: &[u8]) -> Result<HashMap<String, Tensor>, EncoderError> {
    if bytes.len() < 8 {
        return Err(EncoderError::format(EXPECTED, format!("{} bytes", bytes.len())));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if header_len > bytes.len() - 8 {
        return Err(EncoderError::format(
            EXPECTED,
            format!("header length {header_len} beyond file of {} bytes", bytes.len()),
        ));
    }
    let header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| EncoderError::format(EXPECTED, format!("unreadable header: {e}")))?;
    let data = &bytes[8 + header_len..];

    let mut tensors = HashMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let entry: Entry = serde_json::from_value(value)
            .map_err(|e| EncoderError::format(EXPECTED, format!("bad entry {name}: {e}")))?;
        let [start, end] = entry.data_offsets;
        if start > end || end > data.len() {
            return Err(EncoderError::format(
                EXPECTED,
                format!("offsets {start}..{end} of {name} outside data of {} bytes", data.len()),
            ));
        }
        let raw = &data[start..end];
        let numel: usize = entry.shape.iter().product();
        let values = decode(&entry.dtype, raw, &name)?;
        if values.len() != numel {
            return Err(EncoderError::format(
                format!("{numel} elements for {name}"),
                format!("{}", values.len()),
            ));
        }
        tensors.insert(
            name,
            Tensor {
                shape: entry.shape,
                data: values,
            },
        );
    }
    Ok(tensors)
}

fn decode(dtype: &str, raw: &[u8], name: &str) -> Result<Vec<f32>, EncoderError> {
    let width = match dtype {
        "F32" => 4,
        "F64" => 8,
        "F16" | "BF16" => 2,
        other => {
            return Err(EncoderError::format(
                "F32/F64/F16/BF16 tensor",
                format!("{other} for {name}"),
            ))
        }
    };
    if !raw.len().is_multiple_of(width) {
        return Err(EncoderError::format(
            format!("multiple of {width} bytes for {name}"),
            raw.len().to_string(),
        ));
    }
    let out = match dtype {
        "F32" => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        "F64" => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect(),
        "BF16" => raw
            .chunks_exact(2)
            .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16))
            .collect(),
        _ => raw
            .chunks_exact(2)
            .map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
    };
    Ok(out)
}

fn f16_to_f32(h: u16) -> f32 {
    let sign = ((h >> 15) as u32) << 31;
    let exp = ((h >> 10) & 0x1f) as u32;
    let frac = (h & 0x3ff) as u32;
    let bits = match (exp, frac) {
        (0, 0) => sign,
        (0, _) => {
            // subnormal: value = frac * 2^-24
            let v = frac as f32 * (1.0 / (1 << 24) as f32);
            return if sign != 0 { -v } else { v };
        }
        (0x1f, 0) => sign | 0x7f80_0000,
        (0x1f, _) => sign | 0x7fc0_0000,
        _ => sign | ((exp + 112) << 23) | (frac << 13),
    };
    f32::from_bits(bits)
}

/// Writes f32 tensors in name order.
pub fn write_safetensors<W: Write>(tensors: &BTreeMap<String, Tensor>, mut out: W) -> std::io::Result<()> {
    let mut header = serde_json::Map::new();
    let mut offset = 0;
    for (name, t) in tensors {
        let len = t.data.len() * 4;
        let entry = Entry {
            dtype: "F32".into(),
            shape: t.shape.clone(),
            data_offsets: [offset, offset + len],
        };
        header.insert(name.clone(), serde_json::to_value(entry).expect("serializable"));
        offset += len;
    }
    let mut header = serde_json::to_vec(&header).expect("serializable");
    while !header.len().is_multiple_of(8) {
        header.push(b' ');
    }
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for t in tensors.values() {
        for v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut map = BTreeMap::new();
        map.insert(
            "a".to_string(),
            Tensor {
                shape: vec![2, 2],
                data: vec![1.0, -2.0, 3.5, 0.0],
            },
        );
        map.insert(
            "b".to_string(),
            Tensor {
                shape: vec![3],
                data: vec![0.25, 1e-7, -1e7],
            },
        );
        let mut buf = Vec::new();
        write_safetensors(&map, &mut buf).unwrap();
        let parsed = parse(&buf).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed["a"], map["a"]);
        assert_eq!(parsed["b"], map["b"]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(parse(b"abc"), Err(EncoderError::FormatMismatch { .. })));
        let mut bad = u64::MAX.to_le_bytes().to_vec();
        bad.extend_from_slice(b"{}");
        assert!(matches!(parse(&bad), Err(EncoderError::FormatMismatch { .. })));
        let mut bad = 4u64.to_le_bytes().to_vec();
        bad.extend_from_slice(b"nope");
        assert!(matches!(parse(&bad), Err(EncoderError::FormatMismatch { .. })));
    }

    #[test]
    fn half_precision() {
        assert_eq!(f16_to_f32(0x3c00), 1.0);
        assert_eq!(f16_to_f32(0xc000), -2.0);
        assert_eq!(f16_to_f32(0x0001), 2f32.powi(-24));
        assert!(f16_to_f32(0x7c00).is_infinite());
    }
}
