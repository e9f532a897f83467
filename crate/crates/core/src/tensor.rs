//! Dense row-major `f64` tensors, weight initializers, and the tensor blob
//! format used by checkpoints.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// A dense tensor of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let len = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                want,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows of a matrix (first dimension for rank >= 1).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a matrix.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix");
        self.shape[1]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard deviation of the entries (population form, `n` denominator).
    pub fn entry_std(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        var.sqrt()
    }

    /// Write the tensor blob: `u32` rank, `u32` dims, then the `f64` payload.
    /// All fields little-endian.
    pub fn write_blob<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read a blob written by [`Tensor::write_blob`].
    pub fn read_blob<R: Read>(r: &mut R) -> Result<Self> {
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::InvalidShape(format!("blob rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        check_shape(&shape)?;
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut f64buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut f64buf)?;
            data.push(f64::from_le_bytes(f64buf));
        }
        Ok(Tensor { shape, data })
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("empty shape".into()));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape(format!(
            "zero-sized dimension in {shape:?}"
        )));
    }
    Ok(())
}

/// Weight initialization families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// Uniform on `[-sqrt(6/fan_in), +sqrt(6/fan_in)]`.
    UniformHe,
    /// Normal with std `sqrt(2/(fan_in+fan_out))`.
    NormalGlorot,
}

/// A fully specified initializer: family plus the fan parameters of the
/// tensor it initializes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub kind: InitKind,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl InitSpec {
    pub fn new(kind: InitKind, fan_in: usize, fan_out: usize) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::InvalidShape(format!(
                "fan_in/fan_out must be >= 1, got ({fan_in}, {fan_out})"
            )));
        }
        Ok(InitSpec { kind, fan_in, fan_out })
    }
}

/// Sample a fresh tensor from the initializer. Deterministic given the
/// stream state; entries are drawn in row-major order.
pub fn init_tensor(shape: &[usize], spec: &InitSpec, rng: &mut StreamRng) -> Result<Tensor> {
    check_shape(shape)?;
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    match spec.kind {
        InitKind::UniformHe => {
            let bound = (6.0 / spec.fan_in as f64).sqrt();
            for _ in 0..len {
                data.push(rng.random_range(-bound..=bound));
            }
        }
        InitKind::NormalGlorot => {
            let std = (2.0 / (spec.fan_in + spec.fan_out) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("std is positive and finite");
            for _ in 0..len {
                data.push(dist.sample(rng));
            }
        }
    }
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_under_stream_reset() {
        let spec = InitSpec::new(InitKind::UniformHe, 2, 2).unwrap();
        let mut rng = StreamRng::derive(3, "init", &[0]);
        let a = init_tensor(&[2, 2], &spec, &mut rng).unwrap();
        let mut rng = StreamRng::derive(3, "init", &[0]);
        let b = init_tensor(&[2, 2], &spec, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_he_respects_support() {
        let spec = InitSpec::new(InitKind::UniformHe, 4, 4).unwrap();
        let mut rng = StreamRng::derive(5, "init", &[1]);
        let t = init_tensor(&[40, 25], &spec, &mut rng).unwrap();
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(t.data().iter().all(|&v| v >= -bound && v <= bound));
    }

    #[test]
    fn normal_glorot_std_matches_monte_carlo() {
        // 1e5 samples with fan_in = fan_out = 50: sample std within 5% of
        // sqrt(2/100).
        let spec = InitSpec::new(InitKind::NormalGlorot, 50, 50).unwrap();
        let mut rng = StreamRng::derive(9, "init", &[2]);
        let t = init_tensor(&[100_000], &spec, &mut rng).unwrap();
        let target = (2.0f64 / 100.0).sqrt();
        let s = t.entry_std();
        assert!(
            (s - target).abs() / target < 0.05,
            "sample std {s} too far from {target}"
        );
    }

    #[test]
    fn zero_dimension_rejected() {
        let spec = InitSpec::new(InitKind::UniformHe, 1, 1).unwrap();
        let mut rng = StreamRng::derive(0, "init", &[]);
        assert!(matches!(
            init_tensor(&[2, 0], &spec, &mut rng),
            Err(Error::InvalidShape(_))
        ));
        assert!(Tensor::zeros(&[0]).is_err());
    }

    #[test]
    fn blob_round_trip_is_bitwise() {
        let mut rng = StreamRng::derive(1, "blob", &[]);
        let spec = InitSpec::new(InitKind::NormalGlorot, 3, 5).unwrap();
        let t = init_tensor(&[3, 5], &spec, &mut rng).unwrap();
        let mut buf = Vec::new();
        t.write_blob(&mut buf).unwrap();
        // header: rank + 2 dims, then payload
        assert_eq!(buf.len(), 4 + 8 + 15 * 8);
        let back = Tensor::read_blob(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
        assert!(t
            .data()
            .iter()
            .zip(back.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_blob_errors() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        t.write_blob(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Tensor::read_blob(&mut buf.as_slice()).is_err());
    }
}
