//! NPY v1.0 tensor files: little-endian f32/f64/u8, C order only.
//!
//! The writer emits exactly the v1.0 layout (magic, header dict padded so
//! the payload starts 64-byte aligned); the reader rejects anything the
//! format contract excludes — big-endian payloads, Fortran order, other
//! dtypes — with structured errors. uint8 payloads ingest as f32 in [0,1]
//! by dividing by 255.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{DType, Tensor};

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("not an NPY file (bad magic)")]
    BadMagic,
    #[error("unsupported NPY version {0}.{1} (only 1.0 is handled)")]
    UnsupportedVersion(u8, u8),
    #[error("big-endian dtype {0:?} rejected: this toolkit reads little-endian files only")]
    BigEndian(String),
    #[error("unsupported dtype {0:?} (supported: <f4, <f8, |u1)")]
    UnsupportedDtype(String),
    #[error("Fortran-order files are not supported (C order required)")]
    FortranOrder,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = NpyError> = std::result::Result<T, E>;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

fn descr(dtype: DType) -> &'static str {
    match dtype {
        DType::F32 => "<f4",
        DType::F64 => "<f8",
    }
}

/// Writes a tensor as NPY v1.0. f32 and f64 round-trip bit-exactly.
pub fn save_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let shape_str = match tensor.shape() {
        [single] => format!("({single},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        descr(tensor.dtype()),
        shape_str
    );
    // magic(6) + version(2) + header_len(2) + dict + padding + '\n',
    // padded so the total is a multiple of 64.
    let unpadded = 10 + dict.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    let header_len = (dict.len() + padding + 1) as u16;

    let mut buf = Vec::with_capacity(10 + header_len as usize + tensor.numel() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[1u8, 0u8]);
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(dict.as_bytes());
    buf.extend(std::iter::repeat_n(b' ', padding));
    buf.push(b'\n');
    match tensor.dtype() {
        DType::F32 => {
            for v in tensor.as_f32_slice().expect("dtype checked") {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F64 => {
            for v in tensor.as_f64_slice().expect("dtype checked") {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    std::fs::write(path, buf).map_err(|source| NpyError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn header_field<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pos = header
        .find(key)
        .ok_or_else(|| NpyError::BadHeader(format!("missing key {key}")))?;
    let rest = header[pos + key.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| NpyError::BadHeader(format!("no value for {key}")))?;
    Ok(rest.trim_start())
}

/// Loads an NPY v1.0 file. uint8 data maps to f32 in [0,1] by /255.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path).map_err(|source| NpyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|source| NpyError::Io {
            path: path.display().to_string(),
            source,
        })?;
    load_tensor_from_bytes(&bytes)
}

pub fn load_tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(NpyError::UnsupportedVersion(major, minor));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + header_len {
        return Err(NpyError::Truncated {
            expected: 10 + header_len,
            found: bytes.len(),
        });
    }
    let header = std::str::from_utf8(&bytes[10..10 + header_len])
        .map_err(|_| NpyError::BadHeader("header is not UTF-8".into()))?;

    // descr
    let descr_rest = header_field(header, "'descr'")?;
    let quote_end = descr_rest[1..]
        .find('\'')
        .ok_or_else(|| NpyError::BadHeader("unterminated descr".into()))?;
    let descr_val = &descr_rest[1..1 + quote_end];
    // fortran_order
    let order_rest = header_field(header, "'fortran_order'")?;
    if order_rest.starts_with("True") {
        return Err(NpyError::FortranOrder);
    }
    if !order_rest.starts_with("False") {
        return Err(NpyError::BadHeader("unreadable fortran_order".into()));
    }
    // shape
    let shape_rest = header_field(header, "'shape'")?;
    let close = shape_rest
        .find(')')
        .ok_or_else(|| NpyError::BadHeader("unterminated shape tuple".into()))?;
    let inner = shape_rest[1..close].trim();
    let mut shape: Vec<usize> = Vec::new();
    for part in inner.split(',') {
        let p = part.trim();
        if p.is_empty() {
            continue;
        }
        shape.push(
            p.parse()
                .map_err(|_| NpyError::BadHeader(format!("bad shape entry {p:?}")))?,
        );
    }
    if shape.is_empty() {
        return Err(NpyError::BadHeader(
            "scalar (rank-0) files not supported".into(),
        ));
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[10 + header_len..];

    if descr_val.starts_with('>') {
        return Err(NpyError::BigEndian(descr_val.to_string()));
    }
    match descr_val {
        "<f4" => {
            let expected = count * 4;
            if payload.len() < expected {
                return Err(NpyError::Truncated {
                    expected,
                    found: payload.len(),
                });
            }
            let data: Vec<f32> = payload[..expected]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Tensor::from_f32(data, &shape))
        }
        "<f8" => {
            let expected = count * 8;
            if payload.len() < expected {
                return Err(NpyError::Truncated {
                    expected,
                    found: payload.len(),
                });
            }
            let data: Vec<f64> = payload[..expected]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            Ok(Tensor::from_f64(data, &shape))
        }
        "|u1" | "<u1" => {
            if payload.len() < count {
                return Err(NpyError::Truncated {
                    expected: count,
                    found: payload.len(),
                });
            }
            let data: Vec<f32> = payload[..count].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(Tensor::from_f32(data, &shape))
        }
        other => Err(NpyError::UnsupportedDtype(other.to_string())),
    }
}

/// Writes one frame as a binary 8-bit PGM (P5), clamping to [0,1].
pub fn save_pgm(path: impl AsRef<Path>, frame: &Tensor) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(frame.rank(), 2, "PGM dump expects a single [h,w] frame");
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let mut out = Vec::with_capacity(32 + h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for v in frame.to_f64_vec() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut f = std::fs::File::create(path).map_err(|source| NpyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(&out).map_err(|source| NpyError::Io {
        path: path.display().to_string(),
        source,
    })
}
