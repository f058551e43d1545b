//! The subset of the NumPy `.npy` format used for keypoint files.
//!
//! Reads versions 1.0 and 2.0 with a little-endian `f4` or `f8` payload in
//! C order and shape `(21, 3)`. Writes version 1.0 `<f8` with the same
//! 64-byte-aligned header NumPy produces, so a NumPy-written float64 file
//! round-trips byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{HandKeypoints, NUM_KEYPOINTS};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F4,
    F8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }
}

struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

pub fn load_keypoints(path: impl AsRef<Path>) -> Result<HandKeypoints> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_keypoints(&bytes)
}

pub fn decode_keypoints(bytes: &[u8]) -> Result<HandKeypoints> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::format("magic", "missing \\x93NUMPY prefix"));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match (major, minor) {
        (1, 0) => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        (2, 0) => {
            if bytes.len() < 12 {
                return Err(Error::format("header", "truncated v2 length field"));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        _ => {
            return Err(Error::format(
                "version",
                format!("unsupported version {major}.{minor}"),
            ))
        }
    };
    let data_start = header_start + header_len;
    if bytes.len() < data_start {
        return Err(Error::format("header", "file shorter than declared header"));
    }
    let text = std::str::from_utf8(&bytes[header_start..data_start])
        .map_err(|_| Error::format("header", "header is not ASCII"))?;
    let header = parse_header(text)?;
    if header.shape != [NUM_KEYPOINTS, 3] {
        return Err(Error::format(
            "shape",
            format!("expected (21, 3), found {:?}", header.shape),
        ));
    }
    let payload = &bytes[data_start..];
    let expected = NUM_KEYPOINTS * 3 * header.dtype.size();
    if payload.len() != expected {
        return Err(Error::format(
            "data",
            format!("expected {expected} payload bytes, found {}", payload.len()),
        ));
    }
    let values: Vec<f64> = match header.dtype {
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    HandKeypoints::from_flat(&values)
}

pub fn encode_keypoints(h: &HandKeypoints) -> Vec<u8> {
    let dict = "{'descr': '<f8', 'fortran_order': False, 'shape': (21, 3), }";
    // magic(6) + version(2) + len(2) + dict + padding + '\n' is a multiple of ALIGN.
    let unpadded = 10 + dict.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    let header_len = dict.len() + padding + 1;

    let mut out = Vec::with_capacity(10 + header_len + NUM_KEYPOINTS * 3 * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', padding));
    out.push(b'\n');
    for v in h.points().iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_keypoints(path: impl AsRef<Path>, h: &HandKeypoints) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_keypoints(h)).map_err(|e| Error::io(path, e))
}

fn parse_header(text: &str) -> Result<Header> {
    let body = text.trim_end_matches(['\n', ' ', '\0']).trim();
    let body = body
        .strip_prefix('{')
        .and_then(|b| b.strip_suffix('}'))
        .ok_or_else(|| Error::format("header", "not a dict literal"))?;

    let descr = dict_value(body, "descr")?;
    let dtype = match descr.trim_matches(|c| c == '\'' || c == '"') {
        "<f8" => Dtype::F8,
        "<f4" => Dtype::F4,
        other => {
            return Err(Error::format(
                "descr",
                format!("only '<f4' and '<f8' are supported, found '{other}'"),
            ))
        }
    };

    match dict_value(body, "fortran_order")? {
        "False" => {}
        other => {
            return Err(Error::format(
                "fortran_order",
                format!("only C order is supported, found {other}"),
            ))
        }
    }

    let shape_text = dict_value(body, "shape")?;
    let inner = shape_text
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::format("shape", format!("not a tuple: {shape_text}")))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::format("shape", format!("bad dimension '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Header { dtype, shape })
}

/// Value text of `'key': value` inside a flat dict body. Tuples are returned
/// with their parentheses.
fn dict_value<'a>(body: &'a str, key: &'static str) -> Result<&'a str> {
    let field = key;
    let needle_single = format!("'{key}'");
    let needle_double = format!("\"{key}\"");
    let start = body
        .find(&needle_single)
        .map(|i| i + needle_single.len())
        .or_else(|| body.find(&needle_double).map(|i| i + needle_double.len()))
        .ok_or_else(|| Error::format(field, "key missing from header"))?;
    let rest = body[start..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| Error::format(field, "expected ':' after key"))?
        .trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else {
        rest.find(',').or(Some(rest.len()))
    }
    .ok_or_else(|| Error::format(field, "unterminated value"))?;
    Ok(rest[..end].trim())
}
