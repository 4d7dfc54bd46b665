//! Binary CSI trace export.
//!
//! Layout (little endian): `b"CSIT"`, version `u32`, `M u32`, `L u32`,
//! `num_slots u32`, then for every slot the `M x L` matrix row-major with
//! interleaved `f64` real/imaginary parts.

use std::io::{Read, Write};

use num_complex::Complex64;

use super::{ChannelState, ComplexMatrix};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CSIT";
pub const VERSION: u32 = 1;

pub fn write_trace<W: Write>(mut out: W, trace: &[ChannelState]) -> Result<()> {
    let first = trace
        .first()
        .ok_or_else(|| Error::Format("empty trace".into()))?;
    let (m, l) = (first.true_csi.rows(), first.true_csi.cols());
    let mut buf = Vec::with_capacity(20 + trace.len() * m * l * 16);
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, m as u32, l as u32, trace.len() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in trace {
        if s.true_csi.rows() != m || s.true_csi.cols() != l {
            return Err(Error::Shape("trace slots differ in dimensions".into()));
        }
        for z in s.true_csi.as_slice() {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::Format(format!("write failed: {e}")))
}

/// Reads the raw matrices back. Max rates are recomputed from `tx_power` and
/// `noise_variance` since the file stores only CSI.
pub fn read_trace<R: Read>(
    mut input: R,
    tx_power: f64,
    noise_variance: f64,
) -> Result<Vec<ChannelState>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing CSIT magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported CSIT version {version}")));
    }
    let (m, l, slots) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let per_slot = m * l * 16;
    if bytes.len() != 20 + slots * per_slot {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            slots * per_slot,
            bytes.len() - 20
        )));
    }
    let f = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    (0..slots)
        .map(|t| {
            let base = 20 + t * per_slot;
            let data = (0..m * l)
                .map(|k| Complex64::new(f(base + 16 * k), f(base + 16 * k + 8)))
                .collect();
            let csi = ComplexMatrix::from_vec(m, l, data)?;
            Ok(ChannelState::new(t, csi, tx_power, noise_variance))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_csi_trace, ChannelConfig};

    #[test]
    fn roundtrip_and_corruption() {
        let cfg = ChannelConfig { num_antennas: 3, num_users: 2, seed: 1, ..Default::default() };
        let trace = generate_csi_trace(&cfg, 4).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        assert_eq!(buf.len(), 20 + 4 * 3 * 2 * 16);
        let back = read_trace(&buf[..], cfg.tx_power, cfg.noise_variance).unwrap();
        assert_eq!(back, trace);

        assert!(read_trace(&buf[..buf.len() - 1], 1.0, 1.0).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_trace(&bad[..], 1.0, 1.0).is_err());
    }
}
