//! `PMGL` binary checkpoints for [`Mlp`] parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PMGL" | version u32 | layer count u32 |
//!   per layer: rows u32 | cols u32 | activation u8 | weights f64[rows*cols] | bias f64[rows]
//! ```

use std::io::{Read, Write};

use super::array::DenseArray;
use super::mlp::{Activation, Layer, Mlp};
use super::EngineError;

pub const MAGIC: &[u8; 4] = b"PMGL";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mlp: &Mlp, mut w: W) -> Result<(), EngineError> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(mlp.layers().len() as u32).to_le_bytes())?;
    for layer in mlp.layers() {
        w.write_all(&(layer.output_dim() as u32).to_le_bytes())?;
        w.write_all(&(layer.input_dim() as u32).to_le_bytes())?;
        w.write_all(&[layer.activation.tag()])?;
        for v in layer.weight.data().iter().chain(layer.bias.data()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, EngineError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, EngineError> {
    let mut buf = [0u8; 8];
    (0..n)
        .map(|_| {
            r.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        })
        .collect()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Mlp, EngineError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EngineError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(EngineError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let activation = Activation::from_tag(tag[0])
            .ok_or_else(|| EngineError::Checkpoint(format!("unknown activation tag {}", tag[0])))?;
        let weight = DenseArray::matrix(rows, cols, read_f64s(&mut r, rows * cols)?)?;
        let bias = DenseArray::new(vec![rows], read_f64s(&mut r, rows)?)?;
        layers.push(Layer {
            weight,
            bias,
            activation,
        });
    }
    Mlp::from_layers(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Mlp {
        Mlp::random(&[3, 5, 2], &[Activation::SmoothRelu, Activation::Identity], 9).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mlp = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mlp, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"PMGL");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        let expected_len = 12 + (9 + 8 * (15 + 5)) + (9 + 8 * (10 + 2));
        assert_eq!(buf.len(), expected_len);
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), mlp);
    }

    #[test]
    fn rejects_unknown_version_and_magic() {
        let mut buf = Vec::new();
        write_checkpoint(&sample(), &mut buf).unwrap();
        let mut bumped = buf.clone();
        bumped[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(bumped.as_slice()),
            Err(EngineError::Checkpoint(_))
        ));
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(bad_magic.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
