//! Binary checkpoints: a 4-byte magic, a little-endian `u16` version, `u32`
//! dims, `u64` seeds and row-major little-endian `f64` arrays. Fixed random
//! matrices are regenerated from their seeds, never stored.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::base::{BaseDims, BaseNet};
use crate::error::{Error, Result};
use crate::model::{RopustDims, RopustParams};

pub const VERSION: u16 = 1;
const ROPUST_MAGIC: &[u8; 4] = b"RPST";
const BASE_MAGIC: &[u8; 4] = b"BASE";

struct Writer(Vec<u8>);

impl Writer {
    fn header(magic: &[u8; 4]) -> Self {
        let mut out = magic.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        Self(out)
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v =
            u32::try_from(v).map_err(|_| Error::invalid(format!("dimension {v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) {
        for v in vals {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Parse {
                source_name: self.name.to_string(),
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            })?;
        self.pos += n;
        Ok(chunk)
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(Error::Parse {
                source_name: self.name.to_string(),
                offset: 0,
                msg: format!("bad magic {m:?}, expected {magic:?}"),
            });
        }
        let v = u16::from_le_bytes(self.take(2, "version")?.try_into().expect("2 bytes"));
        if v != VERSION {
            return Err(Error::SchemaVersion {
                found: u32::from(v),
                expected: u32::from(VERSION),
            });
        }
        Ok(())
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::invalid("array too large"))?,
            what,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
        let v = self.f64s(rows * cols, what)?;
        Ok(Array2::from_shape_vec((rows, cols), v).expect("sized above"))
    }
    fn vector(&mut self, n: usize, what: &str) -> Result<Array1<f64>> {
        Ok(Array1::from(self.f64s(n, what)?))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Parse {
                source_name: self.name.to_string(),
                offset: self.pos,
                msg: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub fn encode_ropust(p: &RopustParams) -> Result<Vec<u8>> {
    let mut w = Writer::header(ROPUST_MAGIC);
    let d = p.dims;
    for v in [d.feature, d.opu_in, d.opu_out, d.classes] {
        w.u32(v)?;
    }
    w.u64(p.seed_r);
    w.u64(p.seed_b);
    w.f64s(p.w1.iter());
    w.f64s(p.b1.iter());
    w.f64s(p.w3.iter());
    w.f64s(p.b3.iter());
    Ok(w.0)
}

pub fn decode_ropust(bytes: &[u8], name: &str) -> Result<RopustParams> {
    let mut r = Reader {
        bytes,
        pos: 0,
        name,
    };
    r.header(ROPUST_MAGIC)?;
    let dims = RopustDims {
        feature: r.u32("feature dim")?,
        opu_in: r.u32("opu input dim")?,
        opu_out: r.u32("opu output dim")?,
        classes: r.u32("class count")?,
    };
    dims.validate()?;
    let seed_r = r.u64("R seed")?;
    let seed_b = r.u64("B seed")?;
    let w1 = r.matrix(dims.opu_in, dims.feature, "W1")?;
    let b1 = r.vector(dims.opu_in, "b1")?;
    let w3 = r.matrix(dims.classes, dims.opu_out, "W3")?;
    let b3 = r.vector(dims.classes, "b3")?;
    r.finish()?;
    Ok(RopustParams {
        dims,
        w1,
        b1,
        w3,
        b3,
        r: RopustParams::surrogate(dims, seed_r),
        feedback: RopustParams::feedback_matrix(dims, seed_b),
        seed_r,
        seed_b,
    })
}

pub fn encode_base(net: &BaseNet) -> Result<Vec<u8>> {
    let mut w = Writer::header(BASE_MAGIC);
    let d = net.dims;
    for v in [d.input, d.hidden, d.feature, d.classes] {
        w.u32(v)?;
    }
    for layer in [&net.stack.l1, &net.stack.l2, &net.head.layer] {
        w.f64s(layer.w.iter());
        w.f64s(layer.b.iter());
    }
    Ok(w.0)
}

pub fn decode_base(bytes: &[u8], name: &str) -> Result<BaseNet> {
    let mut r = Reader {
        bytes,
        pos: 0,
        name,
    };
    r.header(BASE_MAGIC)?;
    let dims = BaseDims {
        input: r.u32("input dim")?,
        hidden: r.u32("hidden dim")?,
        feature: r.u32("feature dim")?,
        classes: r.u32("class count")?,
    };
    let mut net = BaseNet::new(dims, 0)?;
    for (layer, what) in [
        (&mut net.stack.l1, "layer 1"),
        (&mut net.stack.l2, "layer 2"),
        (&mut net.head.layer, "head"),
    ] {
        let (rows, cols) = layer.w.dim();
        layer.w = r.matrix(rows, cols, what)?;
        layer.b = r.vector(rows, what)?;
    }
    r.finish()?;
    Ok(net)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_ropust(path: &Path, p: &RopustParams) -> Result<()> {
    write(path, &encode_ropust(p)?)
}

pub fn load_ropust(path: &Path) -> Result<RopustParams> {
    decode_ropust(&read(path)?, &path.display().to_string())
}

pub fn save_base(path: &Path, net: &BaseNet) -> Result<()> {
    write(path, &encode_base(net)?)
}

pub fn load_base(path: &Path) -> Result<BaseNet> {
    decode_base(&read(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ropust_round_trip_is_exact() {
        let dims = RopustDims {
            feature: 5,
            opu_in: 4,
            opu_out: 7,
            classes: 3,
        };
        let mut p = RopustParams::new(dims, 1, 2, 3).unwrap();
        p.b1[2] = -0.25;
        p.b3[0] = 1e-300;
        let bytes = encode_ropust(&p).unwrap();
        assert_eq!(&bytes[..4], b"RPST");
        assert_eq!(bytes.len(), 4 + 2 + 16 + 16 + 8 * (20 + 4 + 21 + 3));
        assert_eq!(decode_ropust(&bytes, "mem").unwrap(), p);
    }

    #[test]
    fn base_round_trip_is_exact() {
        let net = BaseNet::new(
            BaseDims {
                input: 6,
                hidden: 5,
                feature: 4,
                classes: 3,
            },
            9,
        )
        .unwrap();
        let bytes = encode_base(&net).unwrap();
        assert_eq!(decode_base(&bytes, "mem").unwrap(), net);
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let dims = RopustDims {
            feature: 2,
            opu_in: 2,
            opu_out: 2,
            classes: 2,
        };
        let bytes = encode_ropust(&RopustParams::new(dims, 1, 2, 3).unwrap()).unwrap();
        assert!(matches!(
            decode_ropust(&bytes[..bytes.len() - 1], "mem"),
            Err(Error::Parse { .. })
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_ropust(&v2, "mem"),
            Err(Error::SchemaVersion { found: 2, .. })
        ));
    }
}
