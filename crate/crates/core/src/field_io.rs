//! Single fields as NumPy `.npy` files (format 1.0, C order, 2-D).
//!
//! Writing always produces `<f8`; reading accepts `<f8` and `<f4`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid_field::Field;

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

pub fn write_npy(field: &Field, path: &Path) -> Result<()> {
    let n = field.n();
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({n}, {n}), }}");
    // magic(6) + version(2) + len(2) + header + '\n' must be a multiple of 64
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + field.len() * 8);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in field.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

fn header_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let start = header.find(&format!("'{key}'"))? + key.len() + 2;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    if let Some(tuple) = rest.strip_prefix('(') {
        return Some(&tuple[..tuple.find(')')?]);
    }
    let end = rest.find([',', '}']).unwrap_or(rest.len());
    Some(rest[..end].trim())
}

pub fn read_npy(path: &Path) -> Result<Field> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let fail = |offset: u64, message: &str| Error::Format { offset, message: message.into() };
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(fail(0, "not an .npy file"));
    }
    let (header_len, body) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize, 12),
        _ => return Err(fail(6, "unsupported .npy version")),
    };
    let header = bytes
        .get(body..body + header_len)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| fail(body as u64, "truncated or non-UTF-8 header"))?;
    let data = &bytes[body + header_len..];

    let descr = header_value(header, "descr").ok_or_else(|| fail(body as u64, "header lacks descr"))?;
    let width = match descr.trim_matches('\'') {
        "<f8" => 8,
        "<f4" => 4,
        other => return Err(fail(body as u64, &format!("unsupported dtype {other}"))),
    };
    if header_value(header, "fortran_order") != Some("False") {
        return Err(fail(body as u64, "only C-order arrays are supported"));
    }
    let shape: Vec<usize> = header_value(header, "shape")
        .ok_or_else(|| fail(body as u64, "header lacks shape"))?
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| fail(body as u64, "bad shape entry")))
        .collect::<Result<_>>()?;
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::InvalidGrid(format!("expected a square 2-D array, got shape {shape:?}")));
    }
    let n = shape[0];
    if data.len() != n * n * width {
        return Err(fail((body + header_len) as u64, "payload length does not match shape"));
    }
    let values = if width == 8 {
        data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
    } else {
        data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
    };
    Field::from_vec(n, values)
}
