//! Little-endian, versioned checkpoint (`TKTS`) and mask (`TKMS`) files.
//!
//! Both start with the 4-byte magic, a `u32` format version and the shape
//! header; all integers and floats are little-endian.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::{write_atomic, ReportError, Result};
use crate::network::{BatchNorm, Layer, LayerDims, MaskSet, ParamSet};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TKTS";
pub const MASK_MAGIC: [u8; 4] = *b"TKMS";
pub const FORMAT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            ReportError::Truncated {
                offset: self.pos,
                needed: n,
            },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn size(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(ReportError::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn preamble(&mut self, magic: [u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != magic {
            return Err(ReportError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(ReportError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(ReportError::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("size fits in u32").to_le_bytes());
}

fn put_f32s<'a>(buf: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f32>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Header: magic, version, number of layer sizes, the sizes. Then for each
/// weight layer: weights (row-major `n_in x n_out`), biases, and for hidden
/// layers `gamma`, `beta`, running mean, running variance.
pub fn encode_checkpoint(params: &ParamSet<f32>) -> Vec<u8> {
    let dims = params.dims();
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut buf, dims.sizes().len());
    for &n in dims.sizes() {
        put_u32(&mut buf, n);
    }
    for layer in &params.layers {
        put_f32s(&mut buf, layer.weights.iter());
        put_f32s(&mut buf, layer.biases.iter());
        if let Some(bn) = &layer.norm {
            put_f32s(&mut buf, bn.gamma.iter());
            put_f32s(&mut buf, bn.beta.iter());
            put_f32s(&mut buf, bn.running_mean.iter());
            put_f32s(&mut buf, bn.running_var.iter());
        }
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet<f32>> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.preamble(CHECKPOINT_MAGIC)?;
    let count = cur.size()?;
    let sizes = (0..count).map(|_| cur.size()).collect::<Result<Vec<_>>>()?;
    let dims = LayerDims::new(sizes)?;
    let n_layers = dims.n_layers();
    let mut layers = Vec::with_capacity(n_layers);
    for l in 1..=n_layers {
        let (n_in, n_out) = dims.layer_shape(l);
        let weights = Array2::from_shape_vec((n_in, n_out), cur.f32s(n_in * n_out)?)
            .expect("length checked");
        let biases = Array1::from(cur.f32s(n_out)?);
        let norm = if l < n_layers {
            Some(BatchNorm {
                gamma: Array1::from(cur.f32s(n_out)?),
                beta: Array1::from(cur.f32s(n_out)?),
                running_mean: Array1::from(cur.f32s(n_out)?),
                running_var: Array1::from(cur.f32s(n_out)?),
            })
        } else {
            None
        };
        layers.push(Layer {
            weights,
            biases,
            norm,
        });
    }
    cur.finish()?;
    Ok(ParamSet { layers })
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamSet<f32>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet<f32>> {
    decode_checkpoint(&super::read(path.as_ref())?)
}

/// Header: magic, version, layer count, `(rows, cols)` per layer, the
/// surviving count of each layer as `u64`. Then each layer's mask bits,
/// row-major, least-significant bit first, padded to a whole byte.
pub fn encode_masks(masks: &MaskSet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MASK_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut buf, masks.layers.len());
    for m in &masks.layers {
        put_u32(&mut buf, m.nrows());
        put_u32(&mut buf, m.ncols());
    }
    for count in masks.surviving() {
        buf.extend_from_slice(&(count as u64).to_le_bytes());
    }
    for m in &masks.layers {
        let mut packed = vec![0u8; m.len().div_ceil(8)];
        for (k, _) in m.iter().enumerate().filter(|(_, &b)| b) {
            packed[k / 8] |= 1 << (k % 8);
        }
        buf.extend_from_slice(&packed);
    }
    buf
}

pub fn decode_masks(bytes: &[u8]) -> Result<MaskSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.preamble(MASK_MAGIC)?;
    let count = cur.size()?;
    let shapes = (0..count)
        .map(|_| Ok((cur.size()?, cur.size()?)))
        .collect::<Result<Vec<_>>>()?;
    let popcounts = (0..count).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(count);
    for (k, &(rows, cols)) in shapes.iter().enumerate() {
        let n = rows
            .checked_mul(cols)
            .ok_or(ReportError::Format("size overflow".into()))?;
        let packed = cur.take(n.div_ceil(8))?;
        let m = Array2::from_shape_fn((rows, cols), |(i, j)| {
            let b = i * cols + j;
            packed[b / 8] >> (b % 8) & 1 == 1
        });
        let alive = m.iter().filter(|&&b| b).count() as u64;
        if alive != popcounts[k] {
            return Err(ReportError::Integrity(format!(
                "layer {} holds {alive} surviving weights, header says {}",
                k + 1,
                popcounts[k]
            )));
        }
        layers.push(m);
    }
    cur.finish()?;
    Ok(MaskSet { layers })
}

pub fn save_masks(path: impl AsRef<Path>, masks: &MaskSet) -> Result<()> {
    write_atomic(path.as_ref(), &encode_masks(masks))
}

pub fn load_masks(path: impl AsRef<Path>) -> Result<MaskSet> {
    decode_masks(&super::read(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;
    use crate::pruner::random_prune;
    use proptest::prelude::*;

    #[test]
    fn checkpoint_size() {
        let d = LayerDims::new(vec![4, 3, 2]).unwrap();
        let p: ParamSet<f32> = init_params(&d, 0);
        let bytes = encode_checkpoint(&p);
        let header = 4 + 4 + 4 + 3 * 4;
        let floats = (4 * 3 + 3 + 4 * 3) + (3 * 2 + 2);
        assert_eq!(bytes.len(), header + 4 * floats);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);
    }

    #[test]
    fn checkpoint_rejections() {
        let d = LayerDims::new(vec![4, 3, 2]).unwrap();
        let mut bytes = encode_checkpoint(&init_params(&d, 0));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(ReportError::Truncated { .. })
        ));
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint(&bytes), Err(ReportError::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(ReportError::Format(_))));
        let masks = encode_masks(&MaskSet::full(&d));
        assert!(decode_checkpoint(&masks).is_err());
    }

    #[test]
    fn all_ones_packing() {
        let m = MaskSet {
            layers: vec![Array2::from_elem((8, 8), true)],
        };
        let bytes = encode_masks(&m);
        let payload = &bytes[bytes.len() - 8..];
        assert_eq!(payload, &[0xFF; 8]);
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 8 + 8);
    }

    #[test]
    fn lsb_first_and_padding() {
        let mut m = Array2::from_elem((1, 3), false);
        m[[0, 0]] = true;
        let mut m2 = Array2::from_elem((3, 3), false);
        m2[[2, 2]] = true;
        let bytes = encode_masks(&MaskSet { layers: vec![m, m2] });
        assert_eq!(&bytes[bytes.len() - 3..], &[0b0000_0001, 0, 0b0000_0001]);
    }

    #[test]
    fn popcount_mismatch() {
        let d = LayerDims::new(vec![4, 3, 2]).unwrap();
        let mut bytes = encode_masks(&MaskSet::full(&d));
        // popcount of layer 1 sits right after the one shape pair
        let at = 4 + 4 + 4 + 8;
        bytes[at] = 11;
        assert!(matches!(decode_masks(&bytes), Err(ReportError::Integrity(_))));
    }

    proptest! {
        #[test]
        fn round_trips(sizes in proptest::collection::vec(1usize..12, 3..6), seed in any::<u64>(), f in 0.01f64..0.99) {
            let d = LayerDims::new(sizes).unwrap();
            let mut p: ParamSet<f32> = init_params(&d, seed);
            p.layers[0].weights[[0, 0]] = f32::MIN_POSITIVE / 2.0;
            p.layers[0].biases[0] = -0.0;
            let decoded = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
            prop_assert_eq!(encode_checkpoint(&decoded), encode_checkpoint(&p));
            let layers: Vec<usize> = (1..=d.n_hidden()).collect();
            let m = random_prune(&MaskSet::full(&d), f, seed, &layers).unwrap();
            prop_assert_eq!(decode_masks(&encode_masks(&m)).unwrap(), m);
        }
    }
}
