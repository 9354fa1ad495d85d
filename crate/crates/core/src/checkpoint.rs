//! Model checkpoint file format.
//!
//! Layout, all little-endian:
//!   magic "MSTRCKPT" (8 bytes)
//!   format version u16 (currently 1)
//!   config: input_dim, model_dim, fractal_p, scale_levels, heads, blocks,
//!           num_classes, d_ff, fc1_dim, fc2_dim (u32 each),
//!           use_positional u8, variant u8 (0 = mstr, 1 = vanilla),
//!           dropout_rate f32
//!   then every parameter tensor in `ModelParams` flat order, each as
//!   rows u32, cols u32, rows*cols f32 values row-major.
//!
//! Checkpoints always store 32-bit floats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelParams, MstrConfig, Variant};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSTRCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(path: &Path, config: &MstrConfig, params: &ModelParams<f32>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        config.input_dim,
        config.model_dim,
        config.fractal_p,
        config.scale_levels,
        config.heads,
        config.blocks,
        config.num_classes,
        config.d_ff,
        config.fc1_dim,
        config.fc2_dim,
    ] {
        let v = u32::try_from(v)
            .map_err(|_| Error::config(format!("config value {v} exceeds u32 range")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(config.use_positional as u8);
    buf.push(match config.variant {
        Variant::Mstr => 0,
        Variant::Vanilla => 1,
    });
    buf.extend_from_slice(&(config.dropout_rate as f32).to_le_bytes());

    for t in params.flat() {
        let rows = u32::try_from(t.rows())
            .map_err(|_| Error::config("tensor rows exceed u32 range".to_string()))?;
        let cols = u32::try_from(t.cols())
            .map_err(|_| Error::config("tensor cols exceed u32 range".to_string()))?;
        buf.extend_from_slice(&rows.to_le_bytes());
        buf.extend_from_slice(&cols.to_le_bytes());
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::format(
                self.offset as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            ));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn read_u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn read_u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn read_f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<(MstrConfig, ModelParams<f32>)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, offset: 0 };

    let magic = cur.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}, expected \"MSTRCKPT\"")));
    }
    let version = cur.read_u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            8,
            format!("unsupported checkpoint version {version}"),
        ));
    }

    let mut dims = [0usize; 10];
    for d in dims.iter_mut() {
        *d = cur.read_u32("config field")? as usize;
    }
    let use_positional = cur.read_u8("use_positional flag")? != 0;
    let variant_offset = cur.offset;
    let variant = match cur.read_u8("variant tag")? {
        0 => Variant::Mstr,
        1 => Variant::Vanilla,
        other => {
            return Err(Error::format(
                variant_offset as u64,
                format!("unknown variant tag {other}"),
            ))
        }
    };
    let dropout_rate = cur.read_f32("dropout_rate")? as f64;

    let config = MstrConfig {
        input_dim: dims[0],
        model_dim: dims[1],
        fractal_p: dims[2],
        scale_levels: dims[3],
        heads: dims[4],
        blocks: dims[5],
        num_classes: dims[6],
        d_ff: dims[7],
        fc1_dim: dims[8],
        fc2_dim: dims[9],
        use_positional,
        dropout_rate,
        variant,
    };
    config.validate()?;

    let shapes = ModelParams::<f32>::expected_shapes(&config);
    let mut tensors = Vec::with_capacity(shapes.len());
    for &(er, ec) in &shapes {
        let header_offset = cur.offset as u64;
        let rows = cur.read_u32("tensor rows")? as usize;
        let cols = cur.read_u32("tensor cols")? as usize;
        if (rows, cols) != (er, ec) {
            return Err(Error::format(
                header_offset,
                format!("tensor shape {rows}x{cols} does not match expected {er}x{ec}"),
            ));
        }
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format(header_offset, "tensor size overflows".to_string()))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(cur.read_f32("tensor payload")?);
        }
        tensors.push(Tensor::new(rows, cols, data)?);
    }
    if cur.offset != bytes.len() {
        return Err(Error::format(
            cur.offset as u64,
            format!("{} trailing bytes after parameters", bytes.len() - cur.offset),
        ));
    }
    let params = ModelParams::from_flat(&config, tensors)?;
    Ok((config, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn test_config() -> MstrConfig {
        let mut c = MstrConfig::new(5, 8, 3);
        c.scale_levels = 2;
        c.heads = 2;
        c.blocks = 2;
        c
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = test_config();
        let params = init_params::<f32>(&cfg, 5).unwrap();

        write_checkpoint(&path, &cfg, &params).unwrap();
        let first = std::fs::read(&path).unwrap();
        let (cfg2, params2) = read_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        for (a, b) in params.flat().iter().zip(params2.flat()) {
            assert!(a.bit_eq(b));
        }

        let path2 = dir.path().join("model2.ckpt");
        write_checkpoint(&path2, &cfg2, &params2).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC rest of file").unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = test_config();
        let params = init_params::<f32>(&cfg, 5).unwrap();
        write_checkpoint(&path, &cfg, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = test_config();
        let params = init_params::<f32>(&cfg, 5).unwrap();
        write_checkpoint(&path, &cfg, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&path, bytes).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
