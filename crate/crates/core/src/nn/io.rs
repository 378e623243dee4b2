//! Binary network checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   8 bytes  "IPONET\0\0"
//! version u32      currently 1
//! widths  u32 count, then u32 per layer width
//! act     u8 tag (0 = leaky-relu, 1 = tanh), f64 slope (0 for tanh)
//! params  u64 count, then f64 per parameter in canonical flattening order
//! ```

use super::mlp::{Activation, Mlp, MlpSpec};
use super::NnError;

pub const NET_MAGIC: &[u8; 8] = b"IPONET\0\0";
pub const NET_VERSION: u32 = 1;

pub fn encode_mlp(net: &Mlp, out: &mut Vec<u8>) {
    out.extend_from_slice(NET_MAGIC);
    out.extend_from_slice(&NET_VERSION.to_le_bytes());
    let spec = net.spec();
    out.extend_from_slice(&(spec.layer_widths.len() as u32).to_le_bytes());
    for &w in &spec.layer_widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    let (tag, slope) = match spec.activation {
        Activation::LeakyRelu(s) => (0u8, s),
        Activation::Tanh => (1u8, 0.0),
    };
    out.push(tag);
    out.extend_from_slice(&slope.to_le_bytes());
    write_f64s(out, &net.flatten());
}

pub fn decode_mlp(r: &mut Reader<'_>) -> Result<Mlp, NnError> {
    let magic = r.take(8)?;
    if magic != NET_MAGIC {
        return Err(NnError::Checkpoint("bad network magic".into()));
    }
    let version = r.u32()?;
    if version != NET_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported network version {version}")));
    }
    let n = r.u32()? as usize;
    if n > 64 {
        return Err(NnError::Checkpoint(format!("implausible layer count {n}")));
    }
    let widths = (0..n)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let tag = r.u8()?;
    let slope = r.f64()?;
    let activation = match tag {
        0 => Activation::LeakyRelu(slope),
        1 => Activation::Tanh,
        t => return Err(NnError::Checkpoint(format!("unknown activation tag {t}"))),
    };
    let spec = MlpSpec {
        layer_widths: widths,
        activation,
    };
    spec.validate()?;
    let params = read_f64s(r)?;
    let mut net = Mlp::zeros(spec);
    net.unflatten(&params)?;
    Ok(net)
}

pub fn write_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn read_f64s(r: &mut Reader<'_>) -> Result<Vec<f64>, NnError> {
    let n = r.u64()? as usize;
    if n.saturating_mul(8) > r.remaining() {
        return Err(NnError::Checkpoint("truncated float array".into()));
    }
    (0..n).map(|_| r.f64()).collect()
}

/// Cursor over a byte slice with little-endian primitive reads.
pub struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.remaining() < n {
            return Err(NnError::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
