//! Max–min dynamic activation quantizer.
//!
//! Scale and zero point are refit from each input's own min/max at call time:
//!
//! ```text
//! s     = (max(x) − min(x)) / (2^b − 1)
//! z     = round(−min(x) / s)
//! x_int = clamp(round(x / s) + z, 0, 2^b − 1)
//! Q(x)  = s · (x_int − z)
//! ```
//!
//! `round` is either floor (the variant the error bound is proved for) or
//! round-half-away-from-zero. A constant input has zero range; it gets
//! `s = 0` and passes through unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    Floor,
    Nearest,
}

impl Rounding {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Rounding::Floor => v.floor(),
            Rounding::Nearest => v.round(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    TensorWise,
    /// One `(s, z)` pair per index along `axis`.
    ChannelWise { axis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub granularity: Granularity,
    pub rounding: Rounding,
    /// Quantizer inputs whose range is below this are treated as 0-bit: the
    /// caller skips the computation and contributes zero.
    pub skip_threshold: f64,
}

impl QuantConfig {
    pub fn new(bits: u32) -> Self {
        Self {
            bits,
            granularity: Granularity::TensorWise,
            rounding: Rounding::Nearest,
            skip_threshold: 0.0,
        }
    }

    pub fn floor(bits: u32) -> Self {
        Self::new(bits).with_rounding(Rounding::Floor)
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn channel_wise(self, axis: usize) -> Self {
        self.with_granularity(Granularity::ChannelWise { axis })
    }

    pub fn with_skip_threshold(mut self, threshold: f64) -> Self {
        self.skip_threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits > MAX_BITS {
            return Err(Error::Config(format!(
                "bit-width {} exceeds {MAX_BITS}",
                self.bits
            )));
        }
        if !(self.skip_threshold >= 0.0) {
            return Err(Error::Config(format!(
                "skip threshold must be nonnegative, got {}",
                self.skip_threshold
            )));
        }
        Ok(())
    }

    /// Largest integer code, `2^b − 1`.
    pub fn levels(&self) -> u32 {
        levels(self.bits)
    }
}

fn levels(bits: u32) -> u32 {
    (1u32 << bits) - 1
}

/// Affine parameters of one slice (the whole tensor when tensor-wise).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SliceParams {
    Affine { scale: f64, zero_point: i64 },
    /// Zero range: the slice is a constant and reconstructs exactly.
    Constant(f64),
}

impl SliceParams {
    pub fn scale(&self) -> f64 {
        match *self {
            SliceParams::Affine { scale, .. } => scale,
            SliceParams::Constant(_) => 0.0,
        }
    }

    pub fn zero_point(&self) -> i64 {
        match *self {
            SliceParams::Affine { zero_point, .. } => zero_point,
            SliceParams::Constant(_) => 0,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, SliceParams::Constant(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub bits: u32,
    pub granularity: Granularity,
    pub slices: Vec<SliceParams>,
}

impl QuantParams {
    /// Scale of a tensor-wise fit (the first slice otherwise).
    pub fn scale(&self) -> f64 {
        self.slices[0].scale()
    }

    pub fn zero_point(&self) -> i64 {
        self.slices[0].zero_point()
    }

    pub fn is_degenerate(&self) -> bool {
        self.slices.iter().all(SliceParams::is_degenerate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub ints: Vec<i32>,
    pub params: QuantParams,
}

/// Maps each flat index to its slice under a granularity.
#[derive(Debug, Clone, Copy)]
struct SliceIndex {
    inner: usize,
    extent: usize,
}

impl SliceIndex {
    fn new(shape: &[usize], granularity: Granularity) -> Result<Self> {
        match granularity {
            Granularity::TensorWise => Ok(Self {
                inner: 1,
                extent: 1,
            }),
            Granularity::ChannelWise { axis } => {
                if axis >= shape.len() {
                    return Err(Error::Shape(format!(
                        "channel axis {axis} out of range for shape {shape:?}"
                    )));
                }
                Ok(Self {
                    inner: shape[axis + 1..].iter().product(),
                    extent: shape[axis],
                })
            }
        }
    }

    #[inline]
    fn of(&self, flat: usize) -> usize {
        (flat / self.inner) % self.extent
    }
}

pub fn fit_params(x: &Tensor, cfg: &QuantConfig) -> Result<QuantParams> {
    cfg.validate()?;
    if cfg.bits == 0 {
        return Err(Error::Config(
            "0-bit quantization has no parameters; the caller must skip".into(),
        ));
    }
    if x.is_empty() {
        return Err(Error::Shape("cannot fit quantizer on an empty tensor".into()));
    }
    let index = SliceIndex::new(x.shape(), cfg.granularity)?;
    let mut lo = vec![f64::INFINITY; index.extent];
    let mut hi = vec![f64::NEG_INFINITY; index.extent];
    for (i, &v) in x.data().iter().enumerate() {
        let c = index.of(i);
        lo[c] = lo[c].min(v);
        hi[c] = hi[c].max(v);
    }
    let top = f64::from(levels(cfg.bits));
    let slices = lo
        .into_iter()
        .zip(hi)
        .map(|(min, max)| {
            let range = max - min;
            if range == 0.0 {
                SliceParams::Constant(min)
            } else {
                let scale = range / top;
                let zero_point = cfg.rounding.apply(-min / scale) as i64;
                SliceParams::Affine { scale, zero_point }
            }
        })
        .collect();
    Ok(QuantParams {
        bits: cfg.bits,
        granularity: cfg.granularity,
        slices,
    })
}

/// Integer codes before the clamp, `round(x / s) + z` per element. Constant
/// slices map to their zero point.
pub fn pre_clamp_codes(x: &Tensor, p: &QuantParams, rounding: Rounding) -> Result<Vec<i64>> {
    let index = SliceIndex::new(x.shape(), p.granularity)?;
    if index.extent != p.slices.len() {
        return Err(Error::Shape(format!(
            "params fit for {} slices, tensor has {}",
            p.slices.len(),
            index.extent
        )));
    }
    Ok(x.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| match p.slices[index.of(i)] {
            SliceParams::Affine { scale, zero_point } => {
                rounding.apply(v / scale) as i64 + zero_point
            }
            SliceParams::Constant(_) => 0,
        })
        .collect())
}

pub fn quantize(x: &Tensor, p: &QuantParams, rounding: Rounding) -> Result<QuantizedTensor> {
    let top = i64::from(levels(p.bits));
    let ints = pre_clamp_codes(x, p, rounding)?
        .into_iter()
        .map(|code| code.clamp(0, top) as i32)
        .collect();
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        ints,
        params: p.clone(),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let index = SliceIndex::new(&q.shape, q.params.granularity)
        .expect("quantized tensor carries a validated granularity");
    Tensor::from_fn(&q.shape, |i| match q.params.slices[index.of(i)] {
        SliceParams::Affine { scale, zero_point } => {
            scale * (i64::from(q.ints[i]) - zero_point) as f64
        }
        SliceParams::Constant(c) => c,
    })
}

/// Dynamic round trip `dequantize(quantize(x, fit_params(x)))`.
pub fn fake_quant(x: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    let p = fit_params(x, cfg)?;
    Ok(dequantize(&quantize(x, &p, cfg.rounding)?))
}

/// Analytical bound on `‖x − Q(x)‖₂²` for a tensor-wise fit:
/// `range² · d / (2^b − 1)²` with floor rounding, a quarter of that with
/// nearest rounding.
pub fn error_bound(x: &Tensor, bits: u32, rounding: Rounding) -> f64 {
    assert!(bits >= 1, "error bound needs at least one bit");
    let s = x.range() / f64::from(levels(bits));
    let bound = s * s * x.len() as f64;
    match rounding {
        Rounding::Floor => bound,
        Rounding::Nearest => bound / 4.0,
    }
}

/// Measured contraction `‖x − q‖₂² / ‖x‖₂²`, zero for a zero input.
pub fn contraction(x: &Tensor, qx: &Tensor) -> Result<f64> {
    let denom = x.sum_sq();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(x.sub(qx)?.sum_sq() / denom)
}

/// Smallest bit-width `b̂ ≥ log₂(√(4d/c) + 1)`, which guarantees
/// `‖x − Q(x)‖² ≤ c‖x‖²` for every `x ∈ ℝ^d` under floor rounding.
pub fn bits_for_contraction(d: usize, c: f64) -> u32 {
    assert!(c > 0.0 && d > 0);
    let need = ((4.0 * d as f64 / c).sqrt() + 1.0).log2();
    need.ceil() as u32
}

/// Something that maps an activation to its quantized reconstruction.
///
/// [`QuantConfig`] is the real dynamic quantizer; [`Identity`] is the
/// lossless stand-in used to check that the modulated reformulation is exact.
pub trait Quantizer {
    fn fake_quant(&self, x: &Tensor) -> Result<Tensor>;

    /// Whether a quantizer input with this range should be treated as 0-bit.
    fn should_skip(&self, _range: f64) -> bool {
        false
    }

    /// Activation bit-width used for Bops accounting.
    fn act_bits(&self) -> u32;
}

impl Quantizer for QuantConfig {
    fn fake_quant(&self, x: &Tensor) -> Result<Tensor> {
        fake_quant(x, self)
    }

    fn should_skip(&self, range: f64) -> bool {
        self.bits == 0 || range < self.skip_threshold
    }

    fn act_bits(&self) -> u32 {
        self.bits
    }
}

/// Lossless quantizer: `Q(x) = x`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Identity;

impl Quantizer for Identity {
    fn fake_quant(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn act_bits(&self) -> u32 {
        32
    }
}

impl<Q: Quantizer + ?Sized> Quantizer for &Q {
    fn fake_quant(&self, x: &Tensor) -> Result<Tensor> {
        (**self).fake_quant(x)
    }

    fn should_skip(&self, range: f64) -> bool {
        (**self).should_skip(range)
    }

    fn act_bits(&self) -> u32 {
        (**self).act_bits()
    }
}

impl<Q: Quantizer + ?Sized> Quantizer for Box<Q> {
    fn fake_quant(&self, x: &Tensor) -> Result<Tensor> {
        (**self).fake_quant(x)
    }

    fn should_skip(&self, range: f64) -> bool {
        (**self).should_skip(range)
    }

    fn act_bits(&self) -> u32 {
        (**self).act_bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn v(xs: &[f64]) -> Tensor {
        Tensor::vector(xs.to_vec()).unwrap()
    }

    #[test]
    fn fit_unit_range_one_bit() {
        let p = fit_params(&v(&[0.0, 1.0]), &QuantConfig::floor(1)).unwrap();
        assert_eq!(p.scale(), 1.0);
        assert_eq!(p.zero_point(), 0);
    }

    #[test]
    fn quantize_two_bit_floor_example() {
        let x = v(&[0.0, 0.3, 0.7, 1.0]);
        let cfg = QuantConfig::floor(2);
        let p = fit_params(&x, &cfg).unwrap();
        assert!((p.scale() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.zero_point(), 0);
        let q = quantize(&x, &p, Rounding::Floor).unwrap();
        // ⌊0.9⌋ = 0, ⌊2.1⌋ = 2, ⌊3.0⌋ = 3 (1.0 / (1/3) is exactly 3 in f64).
        assert_eq!(q.ints, vec![0, 0, 2, 3]);
        let d = dequantize(&q);
        let expect = [0.0, 0.0, 2.0 / 3.0, 1.0];
        for (a, b) in d.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_input_is_degenerate_and_exact() {
        let x = v(&[5.0, 5.0, 5.0]);
        let p = fit_params(&x, &QuantConfig::floor(3)).unwrap();
        assert!(p.is_degenerate());
        assert_eq!(p.scale(), 0.0);
        assert_eq!(p.zero_point(), 0);
        let q = quantize(&x, &p, Rounding::Floor).unwrap();
        assert_eq!(q.ints, vec![0, 0, 0]);
        assert_eq!(dequantize(&q), x);
        assert_eq!(fake_quant(&x, &QuantConfig::new(2)).unwrap(), x);
        assert_eq!(error_bound(&x, 4, Rounding::Floor), 0.0);
    }

    #[test]
    fn out_of_range_values_saturate() {
        let p = fit_params(&v(&[0.0, 1.0]), &QuantConfig::floor(2)).unwrap();
        let q = quantize(&v(&[-1.0, 2.0]), &p, Rounding::Floor).unwrap();
        assert_eq!(q.ints, vec![0, 3]);
    }

    #[test]
    fn dequantize_endpoint_with_top_zero_point() {
        let p = QuantParams {
            bits: 3,
            granularity: Granularity::TensorWise,
            slices: vec![SliceParams::Affine {
                scale: 0.5,
                zero_point: 7,
            }],
        };
        let q = QuantizedTensor {
            shape: vec![1],
            ints: vec![0],
            params: p,
        };
        assert_eq!(dequantize(&q).data(), &[-3.5]);
    }

    #[test]
    fn sixteen_bit_round_trip_within_one_step() {
        let mut rng = RngState::new(1);
        let x = Tensor::randn(&[257], &mut rng);
        let cfg = QuantConfig::floor(16);
        let s = fit_params(&x, &cfg).unwrap().scale();
        let r = fake_quant(&x, &cfg).unwrap();
        assert!(x.max_abs_diff(&r).unwrap() <= s);
        assert!(crate::tensor::relative_l2(&r, &x).unwrap() <= 1e-3);
    }

    #[test]
    fn error_bound_formula() {
        let x = Tensor::rand_uniform(&[10], 0.0, 1.0, &mut RngState::new(3));
        let x = Tensor::vector(
            x.data().iter().copied().chain([0.0, 1.0]).collect(),
        )
        .unwrap();
        assert!((error_bound(&x, 1, Rounding::Floor) - 12.0).abs() < 1e-12);
        let mut data = vec![0.5; 100];
        data[0] = -1.0;
        data[1] = 1.0;
        let x = Tensor::vector(data).unwrap();
        assert!((error_bound(&x, 3, Rounding::Floor) - 400.0 / 49.0).abs() < 1e-12);
        assert!((error_bound(&x, 3, Rounding::Nearest) - 100.0 / 49.0).abs() < 1e-12);
    }

    #[test]
    fn channel_wise_fits_each_column() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 20.0]]).unwrap();
        let p = fit_params(&x, &QuantConfig::floor(1).channel_wise(1)).unwrap();
        assert_eq!(p.slices.len(), 2);
        assert_eq!(p.slices[0].scale(), 1.0);
        assert_eq!(p.slices[1].scale(), 20.0);
        // Both columns sit exactly on their own 1-bit grid.
        assert_eq!(fake_quant(&x, &QuantConfig::floor(1).channel_wise(1)).unwrap(), x);
        assert!(fit_params(&x, &QuantConfig::floor(1).channel_wise(2)).is_err());
    }

    #[test]
    fn zero_bits_is_rejected_by_fit_but_skips() {
        let cfg = QuantConfig::new(0);
        assert!(fit_params(&v(&[0.0, 1.0]), &cfg).is_err());
        assert!(cfg.should_skip(123.0));
        assert!(!QuantConfig::new(4).should_skip(0.0));
        assert!(QuantConfig::new(4).with_skip_threshold(0.5).should_skip(0.1));
        assert!(QuantConfig::new(17).validate().is_err());
    }

    #[test]
    fn corollary_bit_width() {
        // √(4·64/0.25) = 32, log₂ 33 ≈ 5.04.
        assert_eq!(bits_for_contraction(64, 0.25), 6);
        assert_eq!(bits_for_contraction(16, 0.25), 5);
        assert_eq!(bits_for_contraction(256, 0.25), 7);
    }

    #[test]
    fn floor_codes_can_dip_to_minus_one_at_the_minimum() {
        // min/s = -0.5 ⇒ z = ⌊0.5⌋ = 0 but ⌊-0.5⌋ + z = -1: the lowest cell is
        // clamped up. The per-element error still stays within s.
        let x = v(&[-1.0, 1.0]);
        let cfg = QuantConfig::floor(1);
        let p = fit_params(&x, &cfg).unwrap();
        let codes = pre_clamp_codes(&x, &p, Rounding::Floor).unwrap();
        assert_eq!(codes, vec![-1, 0]);
        let r = fake_quant(&x, &cfg).unwrap();
        assert!(x.max_abs_diff(&r).unwrap() <= p.scale());
    }
}
