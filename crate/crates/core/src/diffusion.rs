//! Toy diffusion pipeline: linear β schedule, DDPM and DDIM reverse steps,
//! and an MLP noise predictor whose dense layers can run through any of the
//! quantized paths in [`crate::modulated`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modulated::{
    forward_direct, forward_full, LayerMode, LinearLayer, ModulatedLayerState, StepDiagnostics,
    Warmup,
};
use crate::quant::Quantizer;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

/// `β_t`, `ᾱ_t = Π_{i≤t}(1 − β_i)` and `σ_t` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: SamplerKind,
) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    let sigma = match kind {
        SamplerKind::Ddpm => beta.iter().map(|b| b.sqrt()).collect(),
        SamplerKind::Ddim => vec![0.0; steps],
    };
    Ok(DiffusionSchedule {
        steps,
        beta,
        alpha_bar,
        sigma,
    })
}

impl DiffusionSchedule {
    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::TimeStep {
                t,
                steps: self.steps,
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Forward-process draw `x_t = √ᾱ_t·x₀ + √(1 − ᾱ_t)·ε`.
    pub fn noise(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check(t)?;
        let ab = self.alpha_bar(t);
        x0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))
    }
}

/// One DDPM reverse step on a scalar.
pub fn ddpm_update(x: f64, eps: f64, beta: f64, alpha_bar: f64, sigma: f64, z: f64) -> f64 {
    (x - beta / (1.0 - alpha_bar).sqrt() * eps) / (1.0 - beta).sqrt() + sigma * z
}

/// One deterministic DDIM step on a scalar: predict `x₀`, then re-noise to
/// level `ᾱ_{t−1}` along the same `ε`.
pub fn ddim_update(x: f64, eps: f64, alpha_bar: f64, alpha_bar_prev: f64) -> f64 {
    let x0 = (x - (1.0 - alpha_bar).sqrt() * eps) / alpha_bar.sqrt();
    alpha_bar_prev.sqrt() * x0 + (1.0 - alpha_bar_prev).sqrt() * eps
}

pub fn ddpm_step(
    x: &Tensor,
    eps: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
    z: &Tensor,
) -> Result<Tensor> {
    sched.check(t)?;
    let (b, ab, s) = (sched.beta(t), sched.alpha_bar(t), sched.sigma(t));
    let partial = x.zip_map(eps, "ddpm_step", |x, e| ddpm_update(x, e, b, ab, 0.0, 0.0))?;
    partial.zip_map(z, "ddpm_step", |p, z| p + s * z)
}

pub fn ddim_step(x: &Tensor, eps: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check(t)?;
    let (ab, prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    x.zip_map(eps, "ddim_step", |x, e| ddim_update(x, e, ab, prev))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Silu => v / (1.0 + (-v).exp()),
            Activation::Identity => v,
        }
    }

    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-v).exp());
                s * (1.0 + v * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Sinusoidal features of the step index: `sin(t·ω_i)` then `cos(t·ω_i)`,
/// `ω_i = 10000^(−i / (width/2))`.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// MLP noise predictor `ε_θ(x_t, t)` over `[x_t ‖ emb(t)]`. The nonlinearity
/// follows every layer but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNetwork {
    pub layers: Vec<LinearLayer>,
    pub activation: Activation,
    pub embed_width: usize,
    pub data_dim: usize,
}

/// Per-layer record of one network evaluation.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: Tensor,
    pub output: Tensor,
    pub diag: StepDiagnostics,
}

impl DenoiserNetwork {
    pub fn new(
        layers: Vec<LinearLayer>,
        activation: Activation,
        embed_width: usize,
        data_dim: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        if !embed_width.is_multiple_of(2) {
            return Err(Error::Config(format!("embedding width {embed_width} must be even")));
        }
        if layers[0].in_dim() != data_dim + embed_width {
            return Err(Error::Config(format!(
                "first layer takes {} inputs, expected {data_dim} + {embed_width}",
                layers[0].in_dim()
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Config(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        if layers.last().map(LinearLayer::out_dim) != Some(data_dim) {
            return Err(Error::Config("last layer must output the data dimension".into()));
        }
        Ok(Self {
            layers,
            activation,
            embed_width,
            data_dim,
        })
    }

    /// Seeded initialization: weights `N(0, 1) / √fan_in`, zero biases.
    /// `hidden` lists the hidden widths.
    pub fn init(
        data_dim: usize,
        embed_width: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut dims = vec![data_dim + embed_width];
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let scale = 1.0 / (w[0] as f64).sqrt();
                let weights = Tensor::randn(&[w[0], w[1]], rng).scale(scale);
                LinearLayer::new(weights, Some(Tensor::zeros(&[w[1]])))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, activation, embed_width, data_dim)
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].in_dim()];
        d.extend(self.layers.iter().map(LinearLayer::out_dim));
        d
    }

    /// Default layer for drift measurements.
    pub fn middle_layer(&self) -> usize {
        self.layers.len() / 2
    }

    /// `[x ‖ emb(t)]` for a batch `x: [n × data_dim]`.
    pub fn input(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let n = x.shape().first().copied().unwrap_or(0);
        self.input_at(x, &vec![t; n])
    }

    /// Like [`Self::input`] with a separate step index per row.
    pub fn input_at(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d != self.data_dim || ts.len() != n {
            return Err(Error::Dimension {
                op: "denoiser input",
                left: x.shape().to_vec(),
                right: vec![ts.len(), self.data_dim],
            });
        }
        if self.embed_width == 0 {
            return Ok(x.clone());
        }
        let emb: Vec<f64> = ts
            .iter()
            .flat_map(|&t| time_embedding(t, self.embed_width))
            .collect();
        x.concat_cols(&Tensor::new(vec![n, self.embed_width], emb)?)
    }

    /// Evaluates the network, delegating every dense layer to `run_layer`.
    pub fn forward_with<F>(&self, x: &Tensor, t: usize, mut run_layer: F) -> Result<(Tensor, Vec<LayerTrace>)>
    where
        F: FnMut(usize, &LinearLayer, &Tensor) -> Result<(Tensor, StepDiagnostics)>,
    {
        let mut a = self.input(x, t)?;
        let mut traces = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (o, diag) = run_layer(i, layer, &a)?;
            let next = if i < last {
                let act = self.activation;
                o.map(|v| act.apply(v))
            } else {
                o.clone()
            };
            traces.push(LayerTrace {
                input: a,
                output: o,
                diag,
            });
            a = next;
        }
        Ok((a, traces))
    }

    /// Full-precision `ε_θ(x, t)`.
    pub fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        Ok(self.forward_with(x, t, |_, l, a| forward_full(l, a))?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Fp,
    Direct,
    Modulated,
    Ec,
}

impl QuantMode {
    pub fn name(self) -> &'static str {
        match self {
            QuantMode::Fp => "fp",
            QuantMode::Direct => "direct",
            QuantMode::Modulated => "modulated",
            QuantMode::Ec => "ec",
        }
    }
}

impl std::str::FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp" => Ok(QuantMode::Fp),
            "direct" => Ok(QuantMode::Direct),
            "modulated" | "noec" | "no-ec" => Ok(QuantMode::Modulated),
            "ec" => Ok(QuantMode::Ec),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSpec {
    pub sampler: SamplerKind,
    pub mode: QuantMode,
    pub samples: usize,
    pub warmup: Warmup,
}

impl SampleSpec {
    pub fn new(sampler: SamplerKind, mode: QuantMode, samples: usize) -> Self {
        Self {
            sampler,
            mode,
            samples,
            warmup: Warmup::FullPrecision,
        }
    }
}

/// Network evaluation at one reverse step.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub t: usize,
    pub layers: Vec<LayerTrace>,
}

/// `states[k]` is `x_{T−k}`; `steps[k]` is the evaluation that produced
/// `states[k + 1]`.
#[derive(Debug, Clone)]
pub struct SampleTrajectory {
    pub states: Vec<Tensor>,
    pub steps: Vec<StepTrace>,
}

impl SampleTrajectory {
    pub fn final_state(&self) -> &Tensor {
        self.states.last().expect("trajectory holds x_T")
    }
}

/// Reverse process from `x_T ~ N(0, I)`, with every dense layer evaluated by
/// `run_layer(step_index, layer_index, layer, input)`.
///
/// Noise is drawn from `rng` in a fixed order (`x_T` first, then one `z` per
/// DDPM step with `t > 1`) regardless of how layers are run, so runs sharing a
/// seed are paired draw for draw.
pub fn run_reverse<F>(
    net: &DenoiserNetwork,
    sched: &DiffusionSchedule,
    sampler: SamplerKind,
    samples: usize,
    mut rng: RngState,
    mut run_layer: F,
) -> Result<SampleTrajectory>
where
    F: FnMut(usize, usize, &LinearLayer, &Tensor) -> Result<(Tensor, StepDiagnostics)>,
{
    if samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let shape = [samples, net.data_dim];
    let mut x = Tensor::randn(&shape, &mut rng);
    let mut states = vec![x.clone()];
    let mut steps = Vec::with_capacity(sched.steps);
    for (k, t) in (1..=sched.steps).rev().enumerate() {
        let (eps, layers) = net.forward_with(&x, t, |i, l, a| run_layer(k, i, l, a))?;
        x = match sampler {
            SamplerKind::Ddim => ddim_step(&x, &eps, t, sched)?,
            SamplerKind::Ddpm => {
                let z = if t > 1 {
                    Tensor::randn(&shape, &mut rng)
                } else {
                    Tensor::zeros(&shape)
                };
                ddpm_step(&x, &eps, t, sched, &z)?
            }
        };
        if !x.is_finite() {
            return Err(Error::Config(format!("sampler produced non-finite values at t={t}")));
        }
        states.push(x.clone());
        steps.push(StepTrace { t, layers });
    }
    Ok(SampleTrajectory { states, steps })
}

/// Samples with every dense layer quantized per `spec.mode`. Modulated and
/// error-compensated layers each own a [`ModulatedLayerState`] and warm up at
/// `t = T`.
pub fn sample<Q: Quantizer + Clone>(
    net: &DenoiserNetwork,
    sched: &DiffusionSchedule,
    spec: &SampleSpec,
    quantizer: &Q,
    rng: RngState,
) -> Result<SampleTrajectory> {
    let layer_mode = match spec.mode {
        QuantMode::Fp => None,
        QuantMode::Direct => Some(LayerMode::Direct),
        QuantMode::Modulated => Some(LayerMode::Modulated),
        QuantMode::Ec => Some(LayerMode::ErrorCompensated),
    };
    let Some(layer_mode) = layer_mode else {
        return run_reverse(net, sched, spec.sampler, spec.samples, rng, |_, _, l, a| {
            forward_full(l, a)
        });
    };
    let mut states: Vec<_> = net
        .layers
        .iter()
        .map(|_| ModulatedLayerState::new(layer_mode, quantizer.clone()))
        .collect();
    let warmup = spec.warmup;
    run_reverse(net, sched, spec.sampler, spec.samples, rng, |k, i, l, a| {
        let state = &mut states[i];
        match layer_mode {
            LayerMode::Direct => forward_direct(l, a, quantizer),
            _ if k == 0 => state.warmup(l, a, warmup),
            _ => state.forward(l, a),
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: String,
    pub bias: Option<String>,
}

/// JSON sidecar describing a saved denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub data_dim: usize,
    pub embed_width: usize,
    pub activation: Activation,
    pub layers: Vec<LayerManifest>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` plus one MDTN file per weight and bias tensor.
pub fn save_bundle(net: &DenoiserNetwork, dir: &Path) -> Result<BundleManifest> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let weights = format!("layer{i}.weight.mdtn");
        fs::write(dir.join(&weights), layer.weights.to_mdtn_bytes())?;
        let bias = match &layer.bias {
            Some(b) => {
                let name = format!("layer{i}.bias.mdtn");
                fs::write(dir.join(&name), b.to_mdtn_bytes())?;
                Some(name)
            }
            None => None,
        };
        layers.push(LayerManifest {
            in_dim: layer.in_dim(),
            out_dim: layer.out_dim(),
            weights,
            bias,
        });
    }
    let manifest = BundleManifest {
        format_version: 1,
        data_dim: net.data_dim,
        embed_width: net.embed_width,
        activation: net.activation,
        layers,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn load_bundle(dir: &Path) -> Result<DenoiserNetwork> {
    let manifest: BundleManifest =
        serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != 1 {
        return Err(Error::Format(format!(
            "unsupported bundle version {}",
            manifest.format_version
        )));
    }
    let read = |name: &str| -> Result<Tensor> {
        Tensor::read_mdtn(fs::File::open(dir.join(name))?)
    };
    let layers = manifest
        .layers
        .iter()
        .map(|lm| {
            let weights = read(&lm.weights)?;
            if weights.shape() != [lm.in_dim, lm.out_dim] {
                return Err(Error::Format(format!(
                    "{} has shape {:?}, manifest says [{}, {}]",
                    lm.weights,
                    weights.shape(),
                    lm.in_dim,
                    lm.out_dim
                )));
            }
            let bias = lm.bias.as_deref().map(read).transpose()?;
            LinearLayer::new(weights, bias)
        })
        .collect::<Result<Vec<_>>>()?;
    DenoiserNetwork::new(layers, manifest.activation, manifest.embed_width, manifest.data_dim)
}
