//! Minimal NPY (NumPy array file) reader — just enough to ingest scene
//! exports: little-endian `f4`/`f8`/`i2`/`i4`/`u1`/`u2`, C or Fortran
//! order, 2-D or 3-D.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ShapeBuilder};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NpyDtype {
    F4,
    F8,
    I2,
    I4,
    U1,
    U2,
}

impl NpyDtype {
    fn width(self) -> usize {
        match self {
            NpyDtype::U1 => 1,
            NpyDtype::I2 | NpyDtype::U2 => 2,
            NpyDtype::F4 | NpyDtype::I4 => 4,
            NpyDtype::F8 => 8,
        }
    }
}

struct NpyHeader {
    dtype: NpyDtype,
    fortran: bool,
    shape: Vec<usize>,
    data_offset: usize,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Npy {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<NpyHeader> {
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad(path, "missing NPY magic"));
    }
    let major = bytes[6];
    let header_len: usize;
    let header_start: usize;
    match major {
        1 => {
            header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
            header_start = 10;
        }
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(bad(path, "truncated header length"));
            }
            header_len =
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
            header_start = 12;
        }
        v => return Err(bad(path, format!("unsupported NPY version {}", v))),
    }
    let end = header_start + header_len;
    if bytes.len() < end {
        return Err(bad(path, "truncated header"));
    }
    let header = std::str::from_utf8(&bytes[header_start..end])
        .map_err(|_| bad(path, "header is not UTF-8"))?;

    let descr = extract_str_field(header, "descr")
        .ok_or_else(|| bad(path, "header missing 'descr'"))?;
    let dtype = match descr.trim_start_matches(['<', '|', '=']) {
        "f4" => NpyDtype::F4,
        "f8" => NpyDtype::F8,
        "i2" => NpyDtype::I2,
        "i4" => NpyDtype::I4,
        "u1" => NpyDtype::U1,
        "u2" => NpyDtype::U2,
        other => return Err(bad(path, format!("unsupported dtype '{}'", other))),
    };
    if descr.starts_with('>') {
        return Err(bad(path, "big-endian arrays are not supported"));
    }

    let fortran = header
        .split("'fortran_order'")
        .nth(1)
        .map(|rest| rest.trim_start().trim_start_matches(':').trim_start())
        .map(|rest| rest.starts_with("True"))
        .ok_or_else(|| bad(path, "header missing 'fortran_order'"))?;

    let shape_src = header
        .split("'shape'")
        .nth(1)
        .and_then(|rest| rest.split('(').nth(1))
        .and_then(|rest| rest.split(')').next())
        .ok_or_else(|| bad(path, "header missing 'shape'"))?;
    let mut shape = Vec::new();
    for tok in shape_src.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        shape.push(
            tok.parse::<usize>()
                .map_err(|_| bad(path, format!("bad shape token '{}'", tok)))?,
        );
    }

    Ok(NpyHeader {
        dtype,
        fortran,
        shape,
        data_offset: end,
    })
}

fn extract_str_field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let rest = header.split(&format!("'{}'", key)).nth(1)?;
    let rest = rest.trim_start().strip_prefix(':')?.trim_start();
    let quote = rest.chars().next()?;
    if quote != '\'' && quote != '"' {
        return None;
    }
    rest[1..].split(quote).next()
}

fn read_values_as_f64(path: &Path, dtype: NpyDtype, raw: &[u8]) -> Result<Vec<f64>> {
    let w = dtype.width();
    if raw.len() % w != 0 {
        return Err(bad(path, "payload size is not a multiple of the item size"));
    }
    let vals = raw
        .chunks_exact(w)
        .map(|c| match dtype {
            NpyDtype::F4 => f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            NpyDtype::F8 => f64::from_le_bytes([
                c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
            ]),
            NpyDtype::I2 => f64::from(i16::from_le_bytes([c[0], c[1]])),
            NpyDtype::I4 => f64::from(i32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            NpyDtype::U1 => f64::from(c[0]),
            NpyDtype::U2 => f64::from(u16::from_le_bytes([c[0], c[1]])),
        })
        .collect();
    Ok(vals)
}

fn load_nd(path: &Path, want_dims: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &bytes)?;
    if header.shape.len() != want_dims {
        return Err(bad(
            path,
            format!(
                "expected a {}-D array, got shape {:?}",
                want_dims, header.shape
            ),
        ));
    }
    let count: usize = header.shape.iter().product();
    let need = count * header.dtype.width();
    let raw = &bytes[header.data_offset..];
    if raw.len() < need {
        return Err(bad(
            path,
            format!("payload too short: need {} bytes, have {}", need, raw.len()),
        ));
    }
    let vals = read_values_as_f64(path, header.dtype, &raw[..need])?;
    let vals = if header.fortran {
        to_c_order(&header.shape, vals)
    } else {
        vals
    };
    Ok((header.shape, vals))
}

fn to_c_order(shape: &[usize], vals: Vec<f64>) -> Vec<f64> {
    match shape.len() {
        2 => {
            let (h, w) = (shape[0], shape[1]);
            let arr = ndarray::Array2::from_shape_vec((h, w).f(), vals).expect("size checked");
            let standard = arr.as_standard_layout();
            standard.iter().copied().collect()
        }
        3 => {
            let (a, b, c) = (shape[0], shape[1], shape[2]);
            let arr =
                ndarray::Array3::from_shape_vec((a, b, c).f(), vals).expect("size checked");
            let standard = arr.as_standard_layout();
            standard.iter().copied().collect()
        }
        _ => vals,
    }
}

/// Load a 3-D NPY array as f32 (row, col, band).
pub fn load_npy_3d_f32(path: &Path) -> Result<Array3<f32>> {
    let (shape, vals) = load_nd(path, 3)?;
    let data: Vec<f32> = vals.into_iter().map(|v| v as f32).collect();
    Ok(Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
        .expect("size checked"))
}

/// Load a 2-D NPY array as non-negative integer labels.
pub fn load_npy_2d_labels(path: &Path) -> Result<Array2<u16>> {
    let (shape, vals) = load_nd(path, 2)?;
    let mut labels = Vec::with_capacity(vals.len());
    for v in vals {
        if v < 0.0 || v > f64::from(u16::MAX) || v.fract() != 0.0 {
            return Err(bad(path, format!("label value {} is not a small non-negative integer", v)));
        }
        labels.push(v as u16);
    }
    Ok(Array2::from_shape_vec((shape[0], shape[1]), labels).expect("size checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_npy(path: &Path, descr: &str, fortran: bool, shape: &[usize], payload: &[u8]) {
        let shape_str = match shape.len() {
            1 => format!("({},)", shape[0]),
            _ => format!(
                "({})",
                shape
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        };
        let mut header = format!(
            "{{'descr': '{}', 'fortran_order': {}, 'shape': {}, }}",
            descr,
            if fortran { "True" } else { "False" },
            shape_str
        );
        let base = 10 + header.len();
        let pad = (64 - (base + 1) % 64) % 64;
        header.push_str(&" ".repeat(pad));
        header.push('\n');
        let mut f = fs::File::create(path).unwrap();
        f.write_all(b"\x93NUMPY\x01\x00").unwrap();
        f.write_all(&(header.len() as u16).to_le_bytes()).unwrap();
        f.write_all(header.as_bytes()).unwrap();
        f.write_all(payload).unwrap();
    }

    #[test]
    fn reads_c_order_f4() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let vals: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_npy(&path, "<f4", false, &[2, 3, 4], &bytes);
        let arr = load_npy_3d_f32(&path).unwrap();
        assert_eq!(arr.shape(), &[2, 3, 4]);
        assert_eq!(arr[[1, 2, 3]], 23.0);
        assert_eq!(arr[[0, 1, 0]], 4.0);
    }

    #[test]
    fn reads_fortran_order_f8() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npy");
        // Fortran order: first axis varies fastest.
        let (h, w, b) = (2usize, 2usize, 2usize);
        let mut vals = vec![0.0f64; h * w * b];
        for r in 0..h {
            for c in 0..w {
                for k in 0..b {
                    let fortran_idx = r + c * h + k * h * w;
                    vals[fortran_idx] = (r * 100 + c * 10 + k) as f64;
                }
            }
        }
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_npy(&path, "<f8", true, &[2, 2, 2], &bytes);
        let arr = load_npy_3d_f32(&path).unwrap();
        assert_eq!(arr[[1, 0, 1]], 101.0);
        assert_eq!(arr[[0, 1, 0]], 10.0);
    }

    #[test]
    fn reads_u1_labels_and_rejects_negatives() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.npy");
        write_npy(&path, "|u1", false, &[2, 2], &[0, 1, 2, 3]);
        let labels = load_npy_2d_labels(&path).unwrap();
        assert_eq!(labels[[1, 1]], 3);

        let path2 = dir.path().join("neg.npy");
        let bytes: Vec<u8> = [-1i16, 0, 1, 2].iter().flat_map(|v| v.to_le_bytes()).collect();
        write_npy(&path2, "<i2", false, &[2, 2], &bytes);
        assert!(load_npy_2d_labels(&path2).is_err());
    }

    #[test]
    fn rejects_wrong_rank_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.npy");
        write_npy(&path, "<f4", false, &[4, 4], &[0u8; 64]);
        assert!(load_npy_3d_f32(&path).is_err());

        let garbage = dir.path().join("junk.npy");
        fs::write(&garbage, b"not an npy file").unwrap();
        assert!(load_npy_3d_f32(&garbage).is_err());
        assert!(load_npy_2d_labels(&garbage).is_err());
    }
}
