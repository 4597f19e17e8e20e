//! Software model of the optical random-projection co-processor.
//!
//! The device computes `y = |U x|^2` for a binary input `x` and a fixed
//! complex Gaussian transmission matrix `U`, with 8-bit output quantization.
//! A handle exposes the forward map only. Ground-truth access to `U` exists
//! for lab handles (feature `lab`), which back the ablations, the retrieval
//! attack and oracle tests; a default handle is sealed and every path that
//! would reveal `U` fails with [`Error::CapabilityDisabled`].
//!
//! Entry law: real and imaginary parts are i.i.d. `N(0, 1/(2 cols))`, so
//! `E|U_mn|^2 = 1/cols` and `E[y_m] = k/cols` for an input with `k` ones.
//! Row `m` is drawn from the ChaCha8 stream `(seed, m)`, column by column,
//! real part first. Arithmetic is IEEE-754 binary64 throughout; outputs are
//! bit-reproducible on a given target for identical seed, dims and input.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::stream_rng;

/// Dense complex matrix stored as separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    re: Array2<f64>,
    im: Array2<f64>,
}

impl ComplexMatrix {
    pub fn from_parts(re: Array2<f64>, im: Array2<f64>) -> Result<Self> {
        if re.dim() != im.dim() {
            return Err(Error::invalid(format!(
                "real part {:?} and imaginary part {:?} differ in shape",
                re.dim(),
                im.dim()
            )));
        }
        Ok(Self { re, im })
    }

    /// Complex Gaussian matrix with the transmission-matrix law.
    pub(crate) fn gaussian(rows: usize, cols: usize, seed: u64) -> Self {
        let std = (1.0 / (2.0 * cols as f64)).sqrt();
        let mut re = Array2::zeros((rows, cols));
        let mut im = Array2::zeros((rows, cols));
        for r in 0..rows {
            let mut rng = stream_rng(seed, r as u64);
            for c in 0..cols {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                re[[r, c]] = std * a;
                im[[r, c]] = std * b;
            }
        }
        Self { re, im }
    }

    pub fn rows(&self) -> usize {
        self.re.nrows()
    }

    pub fn cols(&self) -> usize {
        self.re.ncols()
    }

    pub fn re(&self) -> &Array2<f64> {
        &self.re
    }

    pub fn im(&self) -> &Array2<f64> {
        &self.im
    }

    pub fn entry(&self, row: usize, col: usize) -> Complex64 {
        Complex64::new(self.re[[row, col]], self.im[[row, col]])
    }

    /// `Z = H U^T` for real inputs `H` (one sample per row); returns the
    /// real and imaginary planes of `Z`.
    pub fn project(&self, h: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        check_dim("projection input width", self.cols(), h.ncols())?;
        Ok((h.dot(&self.re.t()), h.dot(&self.im.t())))
    }

    /// `|H U^T|^2` elementwise.
    pub fn intensity(&self, h: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (zr, zi) = self.project(h)?;
        Ok(&zr * &zr + &zi * &zi)
    }
}

/// The ground-truth matrix of a handle together with its generation seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMatrix {
    seed: u64,
    matrix: ComplexMatrix,
}

impl TransmissionMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entry(&self, row: usize, col: usize) -> Complex64 {
        self.matrix.entry(row, col)
    }

    pub fn as_complex(&self) -> &ComplexMatrix {
        &self.matrix
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationSpec {
    pub in_bits: u32,
    pub out_bits: u32,
    /// Saturation level `s`; `None` until calibrated.
    pub out_scale: Option<f64>,
}

impl Default for QuantizationSpec {
    fn default() -> Self {
        Self {
            in_bits: 1,
            out_bits: 8,
            out_scale: None,
        }
    }
}

impl QuantizationSpec {
    pub fn levels(&self) -> f64 {
        ((1u64 << self.out_bits) - 1) as f64
    }

    /// Integer code of `y` in `0..=levels`.
    pub fn code(&self, y: f64) -> Option<u32> {
        let s = self.out_scale?;
        Some((y.clamp(0.0, s) / s * self.levels()).round() as u32)
    }

    /// Quantize-dequantize; identity when uncalibrated.
    pub fn apply(&self, y: f64) -> f64 {
        match self.out_scale {
            Some(s) => (y.clamp(0.0, s) / s * self.levels()).round() * s / self.levels(),
            None => y,
        }
    }
}

/// Serializable state of a handle. The matrix itself is never persisted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpuCheckpoint {
    pub seed: u64,
    pub input_dim: usize,
    pub output_dim: usize,
    pub out_scale: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OpuHandle {
    tm: TransmissionMatrix,
    quant: QuantizationSpec,
    unsealable: bool,
}

/// Creates a sealed handle.
pub fn opu_new(input_dim: usize, output_dim: usize, seed: u64) -> Result<OpuHandle> {
    OpuHandle::build(input_dim, output_dim, seed, false)
}

impl OpuHandle {
    fn build(input_dim: usize, output_dim: usize, seed: u64, unsealable: bool) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::invalid(format!(
                "OPU dimensions must be positive, got input {input_dim}, output {output_dim}"
            )));
        }
        Ok(Self {
            tm: TransmissionMatrix {
                seed,
                matrix: ComplexMatrix::gaussian(output_dim, input_dim, seed),
            },
            quant: QuantizationSpec::default(),
            unsealable,
        })
    }

    /// Unsealable handle with the same seed-determined matrix as [`opu_new`].
    #[cfg(feature = "lab")]
    pub fn new_lab(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        Self::build(input_dim, output_dim, seed, true)
    }

    /// Unsealable handle wrapping an explicit matrix.
    #[cfg(feature = "lab")]
    pub fn from_matrix(matrix: ComplexMatrix) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::invalid("OPU dimensions must be positive"));
        }
        Ok(Self {
            tm: TransmissionMatrix { seed: 0, matrix },
            quant: QuantizationSpec::default(),
            unsealable: true,
        })
    }

    pub fn restore(ck: &OpuCheckpoint) -> Result<Self> {
        let mut h = opu_new(ck.input_dim, ck.output_dim, ck.seed)?;
        h.set_scale(ck.out_scale)?;
        Ok(h)
    }

    #[cfg(feature = "lab")]
    pub fn restore_lab(ck: &OpuCheckpoint) -> Result<Self> {
        let mut h = Self::new_lab(ck.input_dim, ck.output_dim, ck.seed)?;
        h.set_scale(ck.out_scale)?;
        Ok(h)
    }

    fn set_scale(&mut self, scale: Option<f64>) -> Result<()> {
        if let Some(s) = scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!(
                    "out_scale must be positive, got {s}"
                )));
            }
        }
        self.quant.out_scale = scale;
        Ok(())
    }

    pub fn checkpoint(&self) -> OpuCheckpoint {
        OpuCheckpoint {
            seed: self.tm.seed,
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            out_scale: self.quant.out_scale,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.tm.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.tm.rows()
    }

    pub fn quantization(&self) -> &QuantizationSpec {
        &self.quant
    }

    pub fn is_calibrated(&self) -> bool {
        self.quant.out_scale.is_some()
    }

    pub fn is_unsealable(&self) -> bool {
        self.unsealable
    }

    fn check_binary(x: ArrayView2<f64>) -> Result<()> {
        if let Some((idx, v)) = x.indexed_iter().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!(
                "OPU input must be binary, found {v} at {idx:?}"
            )));
        }
        Ok(())
    }

    fn raw_forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("OPU input length", self.input_dim(), x.ncols())?;
        Self::check_binary(x)?;
        self.tm.matrix.intensity(x)
    }

    /// `y = |U x|^2`, quantized when calibrated.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let batch = x.insert_axis(Axis(0));
        Ok(self.forward_batch(batch)?.row(0).to_owned())
    }

    /// Row-wise forward over a batch with one sample per row.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut y = self.raw_forward(x)?;
        if self.quant.out_scale.is_some() {
            let q = self.quant;
            y.mapv_inplace(|v| q.apply(v));
        }
        Ok(y)
    }

    /// Sets the output scale to the 99.5th percentile (nearest rank) of the
    /// unquantized outputs over `samples`.
    pub fn calibrate(&mut self, samples: ArrayView2<f64>) -> Result<QuantizationSpec> {
        if samples.nrows() == 0 {
            return Err(Error::invalid("calibration batch is empty"));
        }
        let y = self.raw_forward(samples)?;
        let mut values: Vec<f64> = y.into_iter().collect();
        let rank = ((0.995 * values.len() as f64).ceil() as usize).clamp(1, values.len());
        let (_, s, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
        let s = *s;
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!(
                "calibration failed: percentile output level is {s}, need > 0"
            )));
        }
        self.quant.out_scale = Some(s);
        Ok(self.quant)
    }

    /// Ground-truth matrix; only lab handles can be unsealed.
    pub fn unseal_for_test(&self) -> Result<&TransmissionMatrix> {
        if self.unsealable {
            Ok(&self.tm)
        } else {
            Err(Error::CapabilityDisabled(
                "transmission matrix access requires a lab OPU handle",
            ))
        }
    }

    pub(crate) fn lab_matrix(&self, purpose: &'static str) -> Result<&ComplexMatrix> {
        if self.unsealable {
            Ok(&self.tm.matrix)
        } else {
            Err(Error::CapabilityDisabled(purpose))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(opu_new(0, 3, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(opu_new(3, 0, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn paper_dims_shape() {
        let h = opu_new(512, 8000, 3).unwrap();
        assert_eq!((h.output_dim(), h.input_dim()), (8000, 512));
    }

    #[test]
    fn same_seed_same_outputs() {
        let a = opu_new(1, 1, 99).unwrap();
        let b = opu_new(1, 1, 99).unwrap();
        let x = array![1.0];
        assert_eq!(a.forward(x.view()).unwrap(), b.forward(x.view()).unwrap());
        let c = opu_new(1, 1, 100).unwrap();
        assert_ne!(a.forward(x.view()).unwrap(), c.forward(x.view()).unwrap());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let h = opu_new(6, 10, 5).unwrap();
        let y = h.forward(Array1::zeros(6).view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_binary_and_bad_length() {
        let h = opu_new(3, 4, 5).unwrap();
        assert!(matches!(
            h.forward(array![1.0, 0.5, 0.0].view()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            h.forward(array![1.0, 0.0].view()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn calibration_rejects_degenerate_batches() {
        let mut h = opu_new(4, 8, 1).unwrap();
        assert!(matches!(
            h.calibrate(Array2::zeros((0, 4)).view()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            h.calibrate(Array2::zeros((5, 4)).view()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(!h.is_calibrated());
    }

    #[test]
    fn one_sample_calibration_uses_the_max() {
        // nearest-rank 99.5th percentile of <= 200 values is the maximum
        let mut h = opu_new(5, 16, 2).unwrap();
        let x = array![[1.0, 0.0, 1.0, 1.0, 0.0]];
        let raw = h.forward_batch(x.view()).unwrap();
        let max = raw.fold(0.0f64, |m, &v| m.max(v));
        let spec = h.calibrate(x.view()).unwrap();
        assert_eq!(spec.out_scale, Some(max));
    }

    #[test]
    fn quantization_is_idempotent() {
        let q = QuantizationSpec {
            out_scale: Some(3.7),
            ..Default::default()
        };
        for i in 0..1000 {
            let y = i as f64 * 0.0051;
            let once = q.apply(y);
            assert_eq!(q.apply(once), once);
            assert!((0.0..=3.7).contains(&once));
            assert!(q.code(y).unwrap() <= 255);
        }
    }

    #[test]
    fn sealed_handle_refuses_unseal() {
        let h = opu_new(3, 3, 0).unwrap();
        assert!(matches!(
            h.unseal_for_test(),
            Err(Error::CapabilityDisabled(_))
        ));
    }

    #[test]
    fn checkpoint_restores_forward() {
        let mut h = opu_new(4, 7, 21).unwrap();
        let batch = array![[1.0, 1.0, 0.0, 1.0], [0.0, 1.0, 1.0, 1.0]];
        h.calibrate(batch.view()).unwrap();
        let r = OpuHandle::restore(&h.checkpoint()).unwrap();
        assert_eq!(
            h.forward_batch(batch.view()).unwrap(),
            r.forward_batch(batch.view()).unwrap()
        );
    }

    #[test]
    fn handles_are_shareable() {
        fn assert_sync<T: Send + Sync>() {}
        assert_sync::<OpuHandle>();
    }
}
