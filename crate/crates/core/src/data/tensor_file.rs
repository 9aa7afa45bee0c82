//! Minimal binary tensor container.
//!
//! Layout: `b"DTEN"`, version byte, dtype byte (1 = f32, 2 = u8), rank byte,
//! `rank` little-endian `u32` dims, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{DtsError, Result};

pub const MAGIC: &[u8; 4] = b"DTEN";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
}

impl TensorData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::U8(a) => a.shape(),
        }
    }

    pub fn into_f32(self) -> Result<ArrayD<f32>> {
        match self {
            TensorData::F32(a) => Ok(a),
            TensorData::U8(_) => Err(DtsError::Format(
                "expected a float32 tensor, found uint8".into(),
            )),
        }
    }

    pub fn into_u8(self) -> Result<ArrayD<u8>> {
        match self {
            TensorData::U8(a) => Ok(a),
            TensorData::F32(_) => Err(DtsError::Format(
                "expected a uint8 tensor, found float32".into(),
            )),
        }
    }
}

fn dtype_size(code: u8) -> Result<usize> {
    match code {
        1 => Ok(4),
        2 => Ok(1),
        other => Err(DtsError::Format(format!("unknown dtype code {other}"))),
    }
}

pub fn encode(t: &TensorData) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(DtsError::Format(format!(
            "rank {} does not fit the header",
            shape.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.dtype_code());
    out.push(shape.len() as u8);
    for &d in shape {
        let d =
            u32::try_from(d).map_err(|_| DtsError::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t {
        TensorData::F32(a) => out.extend(a.iter().flat_map(|v| v.to_le_bytes())),
        TensorData::U8(a) => out.extend(a.iter().copied()),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TensorData> {
    if bytes.len() < 7 {
        return Err(DtsError::Format(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(DtsError::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(DtsError::Format(format!(
            "unsupported version {}",
            bytes[4]
        )));
    }
    let code = bytes[5];
    let size = dtype_size(code)?;
    let ndim = bytes[6] as usize;
    let header = 7 + 4 * ndim;
    if bytes.len() < header {
        return Err(DtsError::Format("truncated shape header".into()));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != n * size {
        return Err(DtsError::Format(format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            n * size
        )));
    }
    let shape = IxDyn(&shape);
    let err = |e: ndarray::ShapeError| DtsError::Format(e.to_string());
    Ok(match code {
        1 => {
            let v = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TensorData::F32(ArrayD::from_shape_vec(shape, v).map_err(err)?)
        }
        _ => TensorData::U8(ArrayD::from_shape_vec(shape, payload.to_vec()).map_err(err)?),
    })
}

pub fn write_tensor(path: &Path, t: &TensorData) -> Result<()> {
    fs::write(path, encode(t)?).map_err(|e| DtsError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<TensorData> {
    let bytes = fs::read(path).map_err(|e| DtsError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        DtsError::Format(m) => DtsError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads a float32 tensor of shape `(H, W)` or `(1, H, W)` as an image.
pub fn read_image(path: &Path) -> Result<ndarray::Array2<f32>> {
    let a = read_tensor(path)?.into_f32()?;
    let a = match a.ndim() {
        3 if a.shape()[0] == 1 => a.index_axis_move(ndarray::Axis(0), 0),
        _ => a,
    };
    a.into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| DtsError::Format(format!("{}: expected an (H, W) image", path.display())))
}

/// Binary greyscale PGM (`P5`) for quick inspection.
pub fn write_pgm(path: &Path, pixels: ndarray::ArrayView2<u8>) -> Result<()> {
    let (h, w) = pixels.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter().copied());
    fs::write(path, out).map_err(|e| DtsError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;

    #[test]
    fn read_image_accepts_a_leading_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dten");
        let a = Array::from_shape_fn(IxDyn(&[1, 2, 3]), |i| (i[1] * 3 + i[2]) as f32);
        write_tensor(&path, &TensorData::F32(a)).unwrap();
        assert_eq!(read_image(&path).unwrap()[[1, 2]], 5.0);
        let bad = Array::zeros(IxDyn(&[2, 2, 3]));
        write_tensor(&path, &TensorData::F32(bad)).unwrap();
        assert!(read_image(&path).is_err());
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let a = Array::from_shape_fn(IxDyn(&[3, 4, 5]), |i| {
            (i[0] * 20 + i[1] * 5 + i[2]) as f32 * -0.37
        });
        let t = TensorData::F32(a);
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        assert_eq!(back, t);
    }

    #[test]
    fn payload_length_for_2x3_f32() {
        let t = TensorData::F32(ArrayD::zeros(IxDyn(&[2, 3])));
        let bytes = encode(&t).unwrap();
        assert_eq!(bytes.len() - (7 + 2 * 4), 24);
    }

    #[test]
    fn corrupt_headers_rejected() {
        let t = TensorData::U8(ArrayD::zeros(IxDyn(&[2, 2])));
        let good = encode(&t).unwrap();
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bad), Err(DtsError::Format(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(DtsError::Format(_))));
        let mut bad = good.clone();
        bad[5] = 7;
        assert!(matches!(decode(&bad), Err(DtsError::Format(_))));
        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(DtsError::Format(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.dten");
        let t = TensorData::U8(Array::from_shape_fn(IxDyn(&[4, 3]), |i| {
            (i[0] * 3 + i[1]) as u8
        }));
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    proptest! {
        #[test]
        fn any_f32_payload_round_trips(
            shape in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let bits: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2_654_435_761).wrapping_add(i as u32))).collect();
            let t = TensorData::F32(ArrayD::from_shape_vec(IxDyn(&shape), bits).unwrap());
            let bytes = encode(&t).unwrap();
            prop_assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
        }

        #[test]
        fn any_u8_payload_round_trips(data in proptest::collection::vec(any::<u8>(), 0..64)) {
            let t = TensorData::U8(ArrayD::from_shape_vec(IxDyn(&[data.len()]), data).unwrap());
            prop_assert_eq!(decode(&encode(&t).unwrap()).unwrap(), t);
        }
    }
}
