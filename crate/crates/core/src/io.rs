//! On-disk formats.
//!
//! * `TNS1` tensors: magic, `u32` rank, `u32` dims, then `f64` values in
//!   row-major order, all little-endian. Images are rank 3 `[C, H, W]`.
//! * Label masks: binary PGM (`P5`) with `maxval = C - 1`.
//! * `MSEN` checkpoints: magic, `u32` format version, `u32` layer count,
//!   `(u32 in, u32 out, u32 kernel)` per layer, `u64` init seed, `u64`
//!   parameter count, then the `f64` parameters, all little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::model::{ArchDescriptor, ConvLayer, ImageTensor, ModelParams};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNS1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSEN";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.buf.len() {
            return Err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_tensor(dims: &[usize], values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 8 * values.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<(Vec<usize>, Vec<f64>), String> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TENSOR_MAGIC {
        return Err("bad magic, expected TNS1".into());
    }
    let rank = r.u32()? as usize;
    let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("dims overflow")?;
    let values = r.f64s(count)?;
    r.finish()?;
    Ok((dims, values))
}

pub fn write_image(path: &Path, image: &ImageTensor) -> Result<()> {
    let dims = [image.channels(), image.height(), image.width()];
    write_file(path, &encode_tensor(&dims, image.values()))
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let (dims, values) = decode_tensor(&read_file(path)?).map_err(|e| Error::format(path, e))?;
    if dims.len() != 3 {
        return Err(Error::format(path, format!("image tensor must be rank 3, got {}", dims.len())));
    }
    ImageTensor::new(dims[2], dims[1], dims[0], values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn encode_pgm(mask: &LabelMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", mask.width(), mask.height(), mask.num_classes() - 1).into_bytes();
    out.extend_from_slice(mask.labels());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<LabelMask, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?.to_string());
    }
    if fields[0] != "P5" {
        return Err(format!("expected P5, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header number {s:?}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if !(1..=255).contains(&maxval) {
        return Err(format!("maxval {maxval} unsupported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if bytes.len() < pos || bytes.len() - pos != w * h {
        return Err(format!("expected {} raster bytes", w * h));
    }
    LabelMask::new(w, h, maxval + 1, bytes[pos..].to_vec()).map_err(|e| e.to_string())
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    write_file(path, &encode_pgm(mask))
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    decode_pgm(&read_file(path)?).map_err(|e| Error::format(path, e))
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let layers = params.arch().layers();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        for v in [l.in_channels, l.out_channels, l.kernel] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&params.seed().to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<ModelParams, String> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("bad magic, expected MSEN".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        layers.push(ConvLayer {
            in_channels: r.u32()? as usize,
            out_channels: r.u32()? as usize,
            kernel: r.u32()? as usize,
        });
    }
    let arch = ArchDescriptor::new(layers).map_err(|e| e.to_string())?;
    let seed = r.u64()?;
    let count = r.u64()? as usize;
    if count != arch.param_count() {
        return Err(format!("{count} parameters stored, architecture needs {}", arch.param_count()));
    }
    let values = r.f64s(count)?;
    r.finish()?;
    ModelParams::new(arch, values, seed).map_err(|e| e.to_string())
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    write_file(path, &encode_checkpoint(params))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&read_file(path)?).map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use proptest::prelude::*;

    #[test]
    fn pgm_header_is_exact() {
        let m = LabelMask::new(3, 2, 2, vec![0, 1, 1, 0, 0, 1]).unwrap();
        let bytes = encode_pgm(&m);
        assert_eq!(&bytes[..11], b"P5\n3 2\n1\n\x00\x01");
        assert_eq!(decode_pgm(&bytes).unwrap(), m);
    }

    #[test]
    fn pgm_with_comment_and_bad_inputs() {
        let bytes = b"P5\n# made by hand\n2 1\n2\n\x02\x00";
        let m = decode_pgm(bytes).unwrap();
        assert_eq!(m.num_classes(), 3);
        assert_eq!(m.labels(), &[2, 0]);
        assert!(decode_pgm(b"P2\n1 1\n1\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n1\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n1\n\x03").is_err());
    }

    #[test]
    fn checkpoint_layout() {
        let arch = ArchDescriptor::reference(1, 2).unwrap();
        let p = init_params(&arch, 42);
        let bytes = encode_checkpoint(&p);
        assert_eq!(&bytes[..4], b"MSEN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 4 + 4 + 4 + 3 * 12 + 8 + 8 + 8 * p.len());
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_checkpoint(&bad).is_err());
    }

    #[test]
    fn tensor_rejects_garbage() {
        assert!(decode_tensor(b"TNS2\0\0\0\0").is_err());
        let mut b = encode_tensor(&[2], &[1.0, 2.0]);
        b.push(0);
        assert!(decode_tensor(&b).is_err());
    }

    proptest! {
        #[test]
        fn tensor_roundtrip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let values: Vec<f64> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) % 1000) as f64 / 7.0).collect();
            let (d, v) = decode_tensor(&encode_tensor(&dims, &values)).unwrap();
            prop_assert_eq!(d, dims);
            prop_assert_eq!(v, values);
        }

        #[test]
        fn pgm_roundtrip(w in 1usize..12, h in 1usize..12, c in 2usize..6, seed in any::<u64>()) {
            let labels = (0..w * h).map(|i| ((seed >> (i % 60)) as usize % c) as u8).collect();
            let m = LabelMask::new(w, h, c, labels).unwrap();
            prop_assert_eq!(decode_pgm(&encode_pgm(&m)).unwrap(), m);
        }
    }
}
