//! Dense f64 tensors and the `.dlt` on-disk format.
//!
//! Tensors are row-major, shape-explicit, and always finite — every
//! constructor and the `.dlt` decoder reject NaN/Inf up front so the
//! numeric core never has to re-check. Gradient buffers live directly on
//! the tensor for parameters (`requires_grad`), mirroring how the graph
//! hands accumulated gradients back after a backward pass.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::path::Path;

/// `.dlt` layout: magic, u32 LE rank, rank x u32 LE extents, row-major
/// f64 LE values.
const DLT_MAGIC: &[u8; 4] = b"DLT1";
const DLT_MAX_RANK: u32 = 8;
const DLT_MAX_ELEMS: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    /// Present iff `requires_grad`; same length as `data`.
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor new",
                format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor new"));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    /// Trainable parameter: carries a zeroed gradient buffer from birth.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        t.grad = Some(vec![0.0; t.data.len()]);
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values. The caller keeps them finite; the graph
    /// re-checks at its own boundaries.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self.grad.as_mut().expect("accumulate_grad on non-parameter tensor");
        debug_assert_eq!(g.len(), delta.len());
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Stack same-shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack", "empty input"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Slice out index `i` along the leading axis.
    pub fn unstack(&self, i: usize) -> Result<Tensor> {
        if self.shape.is_empty() || i >= self.shape[0] {
            return Err(Error::invalid(
                "unstack",
                format!("index {} for shape {:?}", i, self.shape),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let data = self.data[i * inner..(i + 1) * inner].to_vec();
        Tensor::new(self.shape[1..].to_vec(), data)
    }

    // ─── .dlt encoding ──────────────────────────────────────────────────

    pub fn encode_dlt(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(DLT_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decode one tensor from the front of `bytes`; returns bytes consumed.
    pub fn decode_dlt(bytes: &[u8]) -> Result<(Tensor, usize)> {
        let fail = |detail: String| Error::Format { what: "dlt", detail };
        if bytes.len() < 8 {
            return Err(fail("truncated header".into()));
        }
        if &bytes[..4] != DLT_MAGIC {
            return Err(fail(format!("bad magic {:?}", &bytes[..4])));
        }
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if rank > DLT_MAX_RANK {
            return Err(fail(format!("rank {rank} exceeds limit {DLT_MAX_RANK}")));
        }
        let header = 8 + 4 * rank as usize;
        if bytes.len() < header {
            return Err(fail("truncated extents".into()));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for i in 0..rank as usize {
            let at = 8 + 4 * i;
            let e = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            shape.push(e as usize);
        }
        let numel: u64 = shape.iter().map(|&e| e as u64).product();
        if numel > DLT_MAX_ELEMS {
            return Err(fail(format!("element count {numel} exceeds limit")));
        }
        let total = header + 8 * numel as usize;
        if bytes.len() < total {
            return Err(fail(format!(
                "truncated values: need {total} bytes, have {}",
                bytes.len()
            )));
        }
        let mut data = Vec::with_capacity(numel as usize);
        for i in 0..numel as usize {
            let at = header + 8 * i;
            data.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(fail("non-finite value".into()));
        }
        Ok((Tensor { shape, data, requires_grad: false, grad: None }, total))
    }

    /// Convert into a trainable parameter (idempotent): sets
    /// `requires_grad` and attaches a zeroed gradient buffer. Used when
    /// rehydrating model weights from a checkpoint, where the `.dlt`
    /// decoder hands back plain tensors.
    pub fn into_param(mut self) -> Tensor {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.requires_grad = true;
        self
    }

    pub fn write_dlt(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_dlt())?;
        Ok(())
    }

    pub fn read_dlt(path: &Path) -> Result<Tensor> {
        let bytes = std::fs::read(path)?;
        let (t, used) = Tensor::decode_dlt(&bytes)?;
        if used != bytes.len() {
            return Err(Error::Format {
                what: "dlt",
                detail: format!("{} trailing bytes", bytes.len() - used),
            });
        }
        Ok(t)
    }

    /// SHA-256 of the canonical `.dlt` encoding, as lowercase hex.
    pub fn digest(&self) -> String {
        sha256_hex(&self.encode_dlt())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn param_carries_zeroed_grad() {
        let t = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(t.requires_grad());
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_accumulates_and_zeros() {
        let mut t = Tensor::param(vec![2], vec![0.0, 0.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, -1.0]);
        assert_eq!(t.grad().unwrap(), &[1.5, 1.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn stack_and_unstack_round_trip() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.unstack(0).unwrap().data(), a.data());
        assert_eq!(s.unstack(1).unwrap().data(), b.data());
        assert!(s.unstack(2).is_err());
    }

    #[test]
    fn dlt_round_trip_is_bit_exact() {
        // Values chosen to exercise sign, subnormal-adjacent, and many digits.
        let vals = vec![
            0.1,
            -3.9999999999999996,
            1e-300,
            -1e300,
            std::f64::consts::PI,
            0.0,
            -0.0,
        ];
        let t = Tensor::new(vec![7], vals.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dlt");
        t.write_dlt(&path).unwrap();
        let back = Tensor::read_dlt(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(&vals) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dlt_rejects_bad_magic_truncation_and_trailing() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let good = t.encode_dlt();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(Tensor::decode_dlt(&bad_magic).is_err());

        assert!(Tensor::decode_dlt(&good[..good.len() - 1]).is_err());
        assert!(Tensor::decode_dlt(&good[..6]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trail.dlt");
        let mut with_trailing = good.clone();
        with_trailing.push(0);
        std::fs::write(&path, &with_trailing).unwrap();
        assert!(Tensor::read_dlt(&path).is_err());
    }

    #[test]
    fn dlt_rejects_absurd_rank() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DLT1");
        bytes.extend_from_slice(&100u32.to_le_bytes());
        assert!(Tensor::decode_dlt(&bytes).is_err());
    }

    #[test]
    fn digest_is_stable_and_value_sensitive() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::new(vec![2], vec![1.0, 2.0000000001]).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
