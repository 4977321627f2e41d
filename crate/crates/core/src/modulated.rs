//! Quantized execution paths for a dense layer across sampler steps.
//!
//! Three ways to evaluate `o_t = a_t·W + b` with a low-bit activation:
//!
//! * **direct** quantizes the raw activation every step, independently;
//! * **modulated** quantizes the temporal difference `a_t − a_{t+1}` and adds
//!   the transformed residual to the previous output estimate;
//! * **error-compensated** tracks `â_t`, the activation that has actually
//!   been realized through quantization, and quantizes `a_t − â_{t+1}`
//!   instead. The quantization error of one step is folded into the next
//!   step's input, so it never piles up.
//!
//! The bias enters once, at warm-up, and cancels out of every difference.
//! The residual paths only ever apply the bias-free linear part.

use crate::error::{Error, Result};
use crate::quant::{contraction, Quantizer};
use crate::tensor::Tensor;

/// Dense layer `o = a·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearLayer {
    pub fn new(weights: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (_, out) = weights.dims2()?;
        if let Some(b) = &bias {
            if b.shape() != [out] {
                return Err(Error::Dimension {
                    op: "bias",
                    left: weights.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
        }
        if !weights.is_finite() || bias.as_ref().is_some_and(|b| !b.is_finite()) {
            return Err(Error::Config("layer parameters must be finite".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Bias-free part, `a·W`.
    pub fn linear(&self, a: &Tensor) -> Result<Tensor> {
        a.matmul(&self.weights)
    }

    pub fn apply_bias(&self, o: Tensor) -> Result<Tensor> {
        match &self.bias {
            Some(b) => o.add_row(b),
            None => Ok(o),
        }
    }

    pub fn forward(&self, a: &Tensor) -> Result<Tensor> {
        self.apply_bias(self.linear(a)?)
    }

    /// Multiply-accumulates for a batch of `batch` rows.
    pub fn macs(&self, batch: usize) -> u64 {
        (batch * self.in_dim() * self.out_dim()) as u64
    }
}

/// Per-step tallies of the non-matmul work a path performs.
///
/// The counts model an integer kernel: every quantized matmul is followed by
/// one dequantization of its output, and any quantized tensor that is also
/// kept in floating point (the error-compensated `â` update) costs one more.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub matmuls: u64,
    pub additions: u64,
    pub quantizations: u64,
    pub dequantizations: u64,
}

impl std::ops::AddAssign for OpCounts {
    fn add_assign(&mut self, o: Self) {
        self.matmuls += o.matmuls;
        self.additions += o.additions;
        self.quantizations += o.quantizations;
        self.dequantizations += o.dequantizations;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepDiagnostics {
    /// `max − min` of the quantizer input.
    pub residual_range: f64,
    /// `‖input − Q(input)‖₂` of the quantizer input.
    pub quant_error_l2: f64,
    /// `‖input − Q(input)‖₂² / ‖input‖₂²`.
    pub contraction: f64,
    pub skipped: bool,
    pub macs: u64,
    /// Activation bit-width the matmul ran at (32 for full precision).
    pub act_bits: u32,
    pub ops: OpCounts,
}

impl StepDiagnostics {
    /// `MACs · b_w · b_a`, zero when the step was skipped.
    pub fn bops(&self, weight_bits: u32) -> u64 {
        if self.skipped {
            0
        } else {
            self.macs * u64::from(weight_bits) * u64::from(self.act_bits)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerMode {
    Direct,
    Modulated,
    ErrorCompensated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Warmup {
    /// `â_T = a_T`, `ô_T = 𝒜(a_T)` in full precision.
    FullPrecision,
    /// Feed `a_T` through the error-compensated update `k` times starting from
    /// `â = 0`. The gap `a_T − â` shrinks by the quantizer's contraction on
    /// every pass; `k = 1` gives `â_T = Q(a_T)`.
    Repeated(usize),
}

pub fn forward_full(layer: &LinearLayer, a: &Tensor) -> Result<(Tensor, StepDiagnostics)> {
    let o = layer.forward(a)?;
    let diag = StepDiagnostics {
        residual_range: a.range(),
        macs: layer.macs(a.shape()[0]),
        act_bits: 32,
        ops: OpCounts {
            matmuls: 1,
            additions: u64::from(layer.bias.is_some()),
            ..OpCounts::default()
        },
        ..StepDiagnostics::default()
    };
    Ok((o, diag))
}

/// `o = Q(a)·W + b`: the activation goes straight into the quantizer.
pub fn forward_direct<Q: Quantizer>(
    layer: &LinearLayer,
    a: &Tensor,
    quantizer: &Q,
) -> Result<(Tensor, StepDiagnostics)> {
    let range = a.range();
    let mut diag = StepDiagnostics {
        residual_range: range,
        macs: layer.macs(a.shape()[0]),
        act_bits: quantizer.act_bits(),
        ..StepDiagnostics::default()
    };
    let has_bias = u64::from(layer.bias.is_some());
    if quantizer.should_skip(range) {
        diag.skipped = true;
        diag.quant_error_l2 = a.norm_l2();
        diag.contraction = if a.sum_sq() > 0.0 { 1.0 } else { 0.0 };
        diag.ops.additions = has_bias;
        let zero = Tensor::zeros(&[a.shape()[0], layer.out_dim()]);
        return Ok((layer.apply_bias(zero)?, diag));
    }
    let qa = quantizer.fake_quant(a)?;
    diag.quant_error_l2 = a.sub(&qa)?.norm_l2();
    diag.contraction = contraction(a, &qa)?;
    diag.ops = OpCounts {
        matmuls: 1,
        additions: has_bias,
        quantizations: 1,
        dequantizations: 1,
    };
    Ok((layer.forward(&qa)?, diag))
}

/// Carried state of one layer along one sampling trajectory.
#[derive(Debug, Clone)]
pub struct ModulatedLayerState<Q> {
    mode: LayerMode,
    quantizer: Q,
    /// `â_{t+1}`: realized activation (error-compensated mode).
    a_hat: Option<Tensor>,
    /// `ô_{t+1}`: output estimate (error-compensated mode).
    o_hat: Option<Tensor>,
    /// Raw previous activation `a_{t+1}` (modulated mode).
    a_prev: Option<Tensor>,
    /// `õ_{t+1}`: output estimate (modulated mode).
    o_tilde: Option<Tensor>,
    step_count: usize,
}

impl<Q: Quantizer> ModulatedLayerState<Q> {
    pub fn new(mode: LayerMode, quantizer: Q) -> Self {
        Self {
            mode,
            quantizer,
            a_hat: None,
            o_hat: None,
            a_prev: None,
            o_tilde: None,
            step_count: 0,
        }
    }

    pub fn mode(&self) -> LayerMode {
        self.mode
    }

    pub fn quantizer(&self) -> &Q {
        &self.quantizer
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn a_hat(&self) -> Option<&Tensor> {
        self.a_hat.as_ref()
    }

    pub fn o_hat(&self) -> Option<&Tensor> {
        self.o_hat.as_ref()
    }

    pub fn o_tilde(&self) -> Option<&Tensor> {
        self.o_tilde.as_ref()
    }

    pub fn a_prev(&self) -> Option<&Tensor> {
        self.a_prev.as_ref()
    }

    pub fn is_warm(&self) -> bool {
        match self.mode {
            LayerMode::Direct => true,
            LayerMode::Modulated => self.o_tilde.is_some(),
            LayerMode::ErrorCompensated => self.o_hat.is_some(),
        }
    }

    pub fn reset(&mut self) {
        self.a_hat = None;
        self.o_hat = None;
        self.a_prev = None;
        self.o_tilde = None;
        self.step_count = 0;
    }

    /// Tensors currently held between steps.
    pub fn stored_tensors(&self) -> usize {
        [&self.a_hat, &self.o_hat, &self.a_prev, &self.o_tilde]
            .iter()
            .filter(|t| t.is_some())
            .count()
    }

    /// Bytes held between steps (8 per stored element).
    pub fn state_bytes(&self) -> usize {
        [&self.a_hat, &self.o_hat, &self.a_prev, &self.o_tilde]
            .iter()
            .filter_map(|t| t.as_ref())
            .map(|t| 8 * t.len())
            .sum()
    }

    /// Establishes the state at the first sampler step and returns `o_T`.
    pub fn warmup(
        &mut self,
        layer: &LinearLayer,
        a: &Tensor,
        warmup: Warmup,
    ) -> Result<(Tensor, StepDiagnostics)> {
        if self.step_count != 0 {
            return Err(Error::State("warm-up called on a used state; reset first".into()));
        }
        if self.mode == LayerMode::Direct {
            return Err(Error::State("direct mode carries no state to warm up".into()));
        }
        let (a_hat, o_hat, diag) = match warmup {
            Warmup::FullPrecision => {
                let (o, diag) = forward_full(layer, a)?;
                (a.clone(), o, diag)
            }
            Warmup::Repeated(k) => {
                if k == 0 {
                    return Err(Error::Config("repeated warm-up needs k >= 1".into()));
                }
                let batch = a.shape()[0];
                let mut a_hat = Tensor::zeros(a.shape());
                let mut o_hat = layer.apply_bias(Tensor::zeros(&[batch, layer.out_dim()]))?;
                let mut total = OpCounts::default();
                let mut diag = StepDiagnostics::default();
                for _ in 0..k {
                    diag = self.compensated_update(layer, a, &mut a_hat, &mut o_hat)?;
                    total += diag.ops;
                }
                diag.ops = total;
                (a_hat, o_hat, diag)
            }
        };
        match self.mode {
            LayerMode::ErrorCompensated => {
                self.a_hat = Some(a_hat);
                self.o_hat = Some(o_hat.clone());
            }
            LayerMode::Modulated => {
                self.a_prev = Some(a.clone());
                self.o_tilde = Some(o_hat.clone());
            }
            LayerMode::Direct => unreachable!(),
        }
        self.step_count = 1;
        Ok((o_hat, diag))
    }

    /// `õ_t = 𝒜(Q(a_t − a_{t+1})) + õ_{t+1}`.
    pub fn forward_modulated(
        &mut self,
        layer: &LinearLayer,
        a: &Tensor,
    ) -> Result<(Tensor, StepDiagnostics)> {
        self.expect_mode(LayerMode::Modulated)?;
        let (Some(prev), Some(o_prev)) = (self.a_prev.as_ref(), self.o_tilde.as_ref()) else {
            return Err(Error::State("modulated layer used before warm-up".into()));
        };
        let residual = a.sub(prev)?;
        let range = residual.range();
        let mut diag = StepDiagnostics {
            residual_range: range,
            macs: layer.macs(a.shape()[0]),
            act_bits: self.quantizer.act_bits(),
            ops: OpCounts {
                additions: 1,
                ..OpCounts::default()
            },
            ..StepDiagnostics::default()
        };
        let o = if self.quantizer.should_skip(range) {
            diag.skipped = true;
            diag.quant_error_l2 = residual.norm_l2();
            diag.contraction = if residual.sum_sq() > 0.0 { 1.0 } else { 0.0 };
            o_prev.clone()
        } else {
            let r = self.quantizer.fake_quant(&residual)?;
            diag.quant_error_l2 = residual.sub(&r)?.norm_l2();
            diag.contraction = contraction(&residual, &r)?;
            diag.ops.matmuls += 1;
            diag.ops.quantizations += 1;
            diag.ops.dequantizations += 1;
            diag.ops.additions += 1;
            layer.linear(&r)?.add(o_prev)?
        };
        self.a_prev = Some(a.clone());
        self.o_tilde = Some(o.clone());
        self.step_count += 1;
        Ok((o, diag))
    }

    /// `r = Q(a_t − â_{t+1})`, `â_t = r + â_{t+1}`, `ô_t = 𝒜(r) + ô_{t+1}`.
    pub fn forward_ec(&mut self, layer: &LinearLayer, a: &Tensor) -> Result<(Tensor, StepDiagnostics)> {
        self.expect_mode(LayerMode::ErrorCompensated)?;
        let (Some(mut a_hat), Some(mut o_hat)) = (self.a_hat.take(), self.o_hat.take()) else {
            return Err(Error::State("error-compensated layer used before warm-up".into()));
        };
        let diag = self.compensated_update(layer, a, &mut a_hat, &mut o_hat);
        let out = o_hat.clone();
        self.a_hat = Some(a_hat);
        self.o_hat = Some(o_hat);
        let diag = diag?;
        self.step_count += 1;
        Ok((out, diag))
    }

    /// Runs whichever path the state's mode selects. Unwarmed modulated
    /// states are warmed with [`Warmup::FullPrecision`].
    pub fn forward(&mut self, layer: &LinearLayer, a: &Tensor) -> Result<(Tensor, StepDiagnostics)> {
        match self.mode {
            LayerMode::Direct => {
                self.step_count += 1;
                forward_direct(layer, a, &self.quantizer)
            }
            _ if !self.is_warm() => self.warmup(layer, a, Warmup::FullPrecision),
            LayerMode::Modulated => self.forward_modulated(layer, a),
            LayerMode::ErrorCompensated => self.forward_ec(layer, a),
        }
    }

    fn expect_mode(&self, mode: LayerMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::State(format!(
                "state is in {:?} mode, {mode:?} step requested",
                self.mode
            )));
        }
        Ok(())
    }

    fn compensated_update(
        &self,
        layer: &LinearLayer,
        a: &Tensor,
        a_hat: &mut Tensor,
        o_hat: &mut Tensor,
    ) -> Result<StepDiagnostics> {
        let residual = a.sub(a_hat)?;
        let range = residual.range();
        let mut diag = StepDiagnostics {
            residual_range: range,
            macs: layer.macs(a.shape()[0]),
            act_bits: self.quantizer.act_bits(),
            ops: OpCounts {
                additions: 1,
                ..OpCounts::default()
            },
            ..StepDiagnostics::default()
        };
        if self.quantizer.should_skip(range) {
            diag.skipped = true;
            diag.quant_error_l2 = residual.norm_l2();
            diag.contraction = if residual.sum_sq() > 0.0 { 1.0 } else { 0.0 };
            return Ok(diag);
        }
        let r = self.quantizer.fake_quant(&residual)?;
        diag.quant_error_l2 = residual.sub(&r)?.norm_l2();
        diag.contraction = contraction(&residual, &r)?;
        let next_o = layer.linear(&r)?.add(o_hat)?;
        *a_hat = r.add(a_hat)?;
        *o_hat = next_o;
        diag.ops.matmuls += 1;
        diag.ops.quantizations += 1;
        diag.ops.dequantizations += 2;
        diag.ops.additions += 2;
        Ok(diag)
    }
}
