//! Randomized property suites for the quantizer bounds and the modulated
//! layer identities. Every suite takes a [`Backend`], so the same checks can
//! be pointed at a deliberately broken quantizer to confirm they bite.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::analysis::drift;
use crate::diffusion::{
    run_reverse, sample, Activation, DenoiserNetwork, DiffusionSchedule,
    QuantMode, SampleSpec, SamplerKind,
};
use crate::error::Result;
use crate::modulated::{LayerMode, ModulatedLayerState, Warmup};
use crate::quant::{
    bits_for_contraction, contraction, dequantize, fit_params, quantize, Identity, QuantConfig,
    Quantizer, Rounding,
};
use crate::rng::RngState;
use crate::tensor::{operator_norm, Tensor};

/// A fake-quantization implementation under test.
#[derive(Clone, Copy)]
pub struct Backend {
    pub name: &'static str,
    pub fake_quant: fn(&Tensor, &QuantConfig) -> Result<Tensor>,
}

impl fmt::Debug for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backend").field("name", &self.name).finish()
    }
}

pub const REFERENCE: Backend = Backend {
    name: "reference",
    fake_quant: crate::quant::fake_quant,
};

/// Mutant that clamps codes to `2^b − 2` instead of `2^b − 1`.
pub const OFF_BY_ONE_CLAMP: Backend = Backend {
    name: "off-by-one-clamp",
    fake_quant: off_by_one_clamp,
};

fn off_by_one_clamp(x: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    let p = fit_params(x, cfg)?;
    let mut q = quantize(x, &p, cfg.rounding)?;
    let top = cfg.levels() as i32 - 1;
    for v in &mut q.ints {
        *v = (*v).min(top);
    }
    Ok(dequantize(&q))
}

/// A [`QuantConfig`] routed through a backend.
#[derive(Debug, Clone, Copy)]
pub struct BackendQuantizer {
    pub cfg: QuantConfig,
    pub backend: Backend,
}

impl Quantizer for BackendQuantizer {
    fn fake_quant(&self, x: &Tensor) -> Result<Tensor> {
        (self.backend.fake_quant)(x, &self.cfg)
    }

    fn should_skip(&self, range: f64) -> bool {
        self.cfg.should_skip(range)
    }

    fn act_bits(&self) -> u32 {
        self.cfg.bits
    }
}

/// Outcome of one property over all its trials.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// Largest observed `lhs / rhs` (or error / tolerance).
    pub worst: f64,
    /// Seed or trial index of the first violation.
    pub counterexample: Option<u64>,
}

impl PropertyResult {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            trials: 0,
            violations: 0,
            worst: 0.0,
            counterexample: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0 && self.trials > 0
    }

    /// Records one check whose measured `ratio` must not exceed 1.
    pub fn record(&mut self, ratio: f64, id: u64) {
        self.trials += 1;
        if ratio.is_nan() || ratio > 1.0 {
            self.violations += 1;
            self.counterexample.get_or_insert(id);
        }
        if ratio > self.worst || ratio.is_nan() {
            self.worst = ratio;
        }
    }
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}/{} violations, worst ratio {:.4}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.violations,
            self.trials,
            self.worst
        )?;
        if let Some(id) = self.counterexample {
            write!(f, ", first counterexample seed {id}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    Uniform,
    Gaussian,
    LogNormal,
}

const DISTRIBUTIONS: [Distribution; 3] = [
    Distribution::Uniform,
    Distribution::Gaussian,
    Distribution::LogNormal,
];

/// Random vector with randomized location and scale.
pub fn random_input(dist: Distribution, d: usize, rng: &mut RngState) -> Tensor {
    let loc = rng.uniform_range(-5.0, 5.0);
    let scale = 10f64.powf(rng.uniform_range(-3.0, 2.0));
    let data = (0..d)
        .map(|_| match dist {
            Distribution::Uniform => loc + scale * rng.uniform_range(-1.0, 1.0),
            Distribution::Gaussian => loc + scale * rng.normal(),
            Distribution::LogNormal => scale * rng.normal().exp(),
        })
        .collect();
    Tensor::new(vec![d], data).expect("positive length")
}

// Relative slack for floating-point evaluation of the bounds themselves.
const FP_SLACK: f64 = 1e-9;

/// `‖x − Q(x)‖² ≤ s²d` (floor) and `≤ s²d/4` (nearest), plus the per-element
/// forms `|x_i − Q(x)_i| ≤ s` and `≤ s/2`, over `trials` random draws with
/// `d ∈ [4, 1024]` and `b ∈ [1, 8]`.
pub fn quant_error_suite(backend: Backend, trials: usize, seed: u64) -> Result<Vec<PropertyResult>> {
    let root = RngState::new(seed);
    let mut total = [
        PropertyResult::new("quant_error_bound_floor"),
        PropertyResult::new("quant_error_bound_nearest"),
    ];
    let mut element = [
        PropertyResult::new("quant_error_per_element_floor"),
        PropertyResult::new("quant_error_per_element_nearest"),
    ];
    for trial in 0..trials as u64 {
        let mut rng = root.fork(trial);
        let dist = DISTRIBUTIONS[(trial % 3) as usize];
        let d = rng.int_range(4, 1024) as usize;
        let bits = rng.int_range(1, 8) as u32;
        let x = random_input(dist, d, &mut rng);
        let s = x.range() / f64::from((1u32 << bits) - 1);
        for (i, rounding) in [Rounding::Floor, Rounding::Nearest].into_iter().enumerate() {
            let cfg = QuantConfig::new(bits).with_rounding(rounding);
            let q = (backend.fake_quant)(&x, &cfg)?;
            let err = x.sub(&q)?;
            let per = if rounding == Rounding::Floor { s } else { s / 2.0 };
            let bound = per * per * d as f64;
            let ratio = |lhs: f64, rhs: f64| {
                if rhs == 0.0 {
                    if lhs == 0.0 { 0.0 } else { f64::INFINITY }
                } else {
                    lhs / (rhs * (1.0 + FP_SLACK))
                }
            };
            total[i].record(ratio(err.sum_sq(), bound), trial);
            element[i].record(ratio(err.max_abs(), per), trial);
        }
    }
    Ok(total.into_iter().chain(element).collect())
}

/// For each `d`, checks that `b̂ = ⌈log₂(√(4d/c) + 1)⌉` floor-mode bits keep
/// the measured contraction at or below `c`.
pub fn corollary_suite(
    backend: Backend,
    c: f64,
    dims: &[usize],
    inputs: usize,
    seed: u64,
) -> Result<Vec<PropertyResult>> {
    let root = RngState::new(seed);
    let mut out = Vec::with_capacity(dims.len());
    for &d in dims {
        let bits = bits_for_contraction(d, c);
        let mut res = PropertyResult::new(format!("contraction_d{d}_b{bits}_c{c}"));
        for i in 0..inputs as u64 {
            let mut rng = root.fork(d as u64 * 1_000_003 + i);
            let x = random_input(DISTRIBUTIONS[(i % 3) as usize], d, &mut rng);
            let q = (backend.fake_quant)(&x, &QuantConfig::floor(bits))?;
            res.record(contraction(&x, &q)? / (c * (1.0 + FP_SLACK)), i);
        }
        out.push(res);
    }
    Ok(out)
}

/// Settings for the trajectory-level suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySuite {
    pub steps: usize,
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub bits: Vec<u32>,
    pub sampler: SamplerKind,
    /// Relative tolerance of the identity-quantizer reformulation check.
    pub reformulation_tol: f64,
    /// Relative tolerance of `ô_t = 𝒜(â_t) + bias`.
    pub output_identity_tol: f64,
    /// Absolute tolerance of `a_t − â_t = e_t`.
    pub error_identity_tol: f64,
    /// Relative slack on the power-iteration operator norm.
    pub norm_slack: f64,
}

impl Default for TrajectorySuite {
    fn default() -> Self {
        Self {
            steps: 100,
            samples: 16,
            seeds: (0..20).collect(),
            bits: vec![2, 3, 4, 6, 8],
            sampler: SamplerKind::Ddim,
            reformulation_tol: 1e-5,
            output_identity_tol: 1e-9,
            error_identity_tol: 1e-10,
            norm_slack: 1e-6,
        }
    }
}

/// The untrained default-architecture denoiser the suites fall back to.
pub fn default_network(seed: u64) -> Result<DenoiserNetwork> {
    let mut rng = RngState::new(seed).fork(0);
    DenoiserNetwork::init(2, 16, &[128, 128], Activation::Silu, &mut rng)
}

/// With a lossless quantizer the modulated and error-compensated paths must
/// reproduce full-precision sampling at every step.
pub fn reformulation_suite(
    net: &DenoiserNetwork,
    sched: &DiffusionSchedule,
    suite: &TrajectorySuite,
) -> Result<Vec<PropertyResult>> {
    let mut out = Vec::new();
    for mode in [QuantMode::Modulated, QuantMode::Ec] {
        let mut res = PropertyResult::new(format!("reformulation_exact_{}", mode.name()));
        for &seed in &suite.seeds {
            let rng = RngState::new(seed);
            let fp = sample(net, sched, &SampleSpec::new(suite.sampler, QuantMode::Fp, suite.samples), &Identity, rng)?;
            let q = sample(net, sched, &SampleSpec::new(suite.sampler, mode, suite.samples), &Identity, rng)?;
            for (a, b) in fp.steps.iter().zip(&q.steps) {
                for (la, lb) in a.layers.iter().zip(&b.layers) {
                    res.record(drift(&lb.output, &la.output)? / suite.reformulation_tol, seed);
                }
            }
            for (a, b) in fp.states.iter().zip(&q.states) {
                res.record(drift(b, a)? / suite.reformulation_tol, seed);
            }
        }
        out.push(res);
    }
    Ok(out)
}

fn layer_norms(net: &DenoiserNetwork) -> Result<Vec<f64>> {
    net.layers
        .iter()
        .map(|l| operator_norm(&l.weights, 1e-12, 100_000))
        .collect()
}

/// Error-compensated structural identities and the per-step bound
/// `‖𝒜(a_t) − ô_t‖ ≤ √c_t·‖𝒜‖₂·‖a_t − â_{t+1}‖`, checked at every layer, step,
/// seed and bit-width.
pub fn ec_suite(
    net: &DenoiserNetwork,
    sched: &DiffusionSchedule,
    suite: &TrajectorySuite,
    backend: Backend,
) -> Result<Vec<PropertyResult>> {
    let norms = layer_norms(net)?;
    let mut out_id = PropertyResult::new("ec_output_identity");
    let mut err_id = PropertyResult::new("ec_error_identity");
    let mut bound = PropertyResult::new("ec_step_bound");
    for &bits in &suite.bits {
        let q = BackendQuantizer {
            cfg: QuantConfig::new(bits).channel_wise(1),
            backend,
        };
        for &seed in &suite.seeds {
            let mut states: Vec<_> = net
                .layers
                .iter()
                .map(|_| ModulatedLayerState::new(LayerMode::ErrorCompensated, q))
                .collect();
            run_reverse(net, sched, suite.sampler, suite.samples, RngState::new(seed), |k, i, layer, a| {
                let state = &mut states[i];
                if k == 0 {
                    return state.warmup(layer, a, Warmup::FullPrecision);
                }
                let prev = state.a_hat().expect("warm state").clone();
                let residual = a.sub(&prev)?;
                let (o, diag) = state.forward_ec(layer, a)?;
                let a_hat = state.a_hat().expect("warm state");

                out_id.record(drift(&o, &layer.forward(a_hat)?)? / suite.output_identity_tol, seed);

                let e = residual.sub(&q.fake_quant(&residual)?)?;
                let gap = a.sub(a_hat)?.max_abs_diff(&e)?;
                err_id.record(gap / suite.error_identity_tol, seed);

                let lhs = layer.forward(a)?.sub(&o)?.norm_l2();
                let rhs = diag.contraction.sqrt() * norms[i] * (1.0 + suite.norm_slack) * residual.norm_l2();
                bound.record(ratio_or_zero(lhs, rhs * (1.0 + FP_SLACK)), seed);
                Ok((o, diag))
            })?;
        }
    }
    Ok(vec![out_id, err_id, bound])
}

fn ratio_or_zero(lhs: f64, rhs: f64) -> f64 {
    if rhs > 0.0 {
        lhs / rhs
    } else if lhs <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Without compensation the output error obeys
/// `‖𝒜(a_t) − õ_t‖² ≤ B_t`, `B_t = 2c_t‖𝒜‖²‖a_t − a_{t+1}‖² + 2B_{t+1}`,
/// `B_T = 0`.
pub fn modulated_suite(
    net: &DenoiserNetwork,
    sched: &DiffusionSchedule,
    suite: &TrajectorySuite,
    backend: Backend,
) -> Result<Vec<PropertyResult>> {
    let norms = layer_norms(net)?;
    let mut res = PropertyResult::new("modulated_error_recursion");
    for &bits in &suite.bits {
        let q = BackendQuantizer {
            cfg: QuantConfig::new(bits).channel_wise(1),
            backend,
        };
        for &seed in &suite.seeds {
            let mut states: Vec<_> = net
                .layers
                .iter()
                .map(|_| ModulatedLayerState::new(LayerMode::Modulated, q))
                .collect();
            let mut budget = vec![0.0f64; net.layers.len()];
            run_reverse(net, sched, suite.sampler, suite.samples, RngState::new(seed), |k, i, layer, a| {
                let state = &mut states[i];
                if k == 0 {
                    return state.warmup(layer, a, Warmup::FullPrecision);
                }
                let delta = a.sub(state.a_prev().expect("warm state"))?;
                let (o, diag) = state.forward_modulated(layer, a)?;
                let norm = norms[i] * (1.0 + suite.norm_slack);
                budget[i] = 2.0 * diag.contraction * norm * norm * delta.sum_sq() + 2.0 * budget[i];
                let lhs = layer.forward(a)?.sub(&o)?.sum_sq();
                res.record(ratio_or_zero(lhs, budget[i] * (1.0 + FP_SLACK)), seed);
                Ok((o, diag))
            })?;
        }
    }
    Ok(vec![res])
}

/// Everything `verify` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub quant_trials: usize,
    pub corollary_c: f64,
    pub corollary_dims: Vec<usize>,
    pub corollary_inputs: usize,
    pub trajectories: TrajectorySuite,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            quant_trials: 10_000,
            corollary_c: 0.25,
            corollary_dims: vec![16, 64, 256],
            corollary_inputs: 1_000,
            trajectories: TrajectorySuite::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(PropertyResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.passed())
    }
}

/// Runs every suite against `backend`, with trajectories drawn from `net`.
pub fn run_all(cfg: &VerifyConfig, backend: Backend, net: &DenoiserNetwork) -> Result<VerifyReport> {
    let sched = crate::diffusion::make_schedule(cfg.trajectories.steps, 1e-4, 0.02, cfg.trajectories.sampler)?;
    let mut results = quant_error_suite(backend, cfg.quant_trials, cfg.seed)?;
    results.extend(corollary_suite(backend, cfg.corollary_c, &cfg.corollary_dims, cfg.corollary_inputs, cfg.seed)?);
    results.extend(reformulation_suite(net, &sched, &cfg.trajectories)?);
    results.extend(ec_suite(net, &sched, &cfg.trajectories, backend)?);
    results.extend(modulated_suite(net, &sched, &cfg.trajectories, backend)?);
    Ok(VerifyReport { results })
}
