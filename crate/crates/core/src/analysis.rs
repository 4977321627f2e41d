//! Measurements over recorded trajectories: feature drift against a
//! full-precision reference, activation ranges, the cache-reuse baseline and
//! Bops accounting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffusion::{run_reverse, DenoiserNetwork, DiffusionSchedule, SampleTrajectory, SamplerKind};
use crate::error::{Error, Result};
use crate::modulated::{forward_full, StepDiagnostics};
use crate::rng::RngState;
use crate::tensor::{relative_l2, Tensor};

/// `‖q − reference‖ / ‖reference‖`, with two all-zero tensors counted as
/// zero drift.
pub fn drift(q: &Tensor, reference: &Tensor) -> Result<f64> {
    match relative_l2(q, reference) {
        Err(Error::DegenerateReference) if q.sum_sq() == 0.0 => Ok(0.0),
        other => other,
    }
}

/// Which recorded tensor of a layer to compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// The activation `a` entering the layer.
    #[default]
    Input,
    Output,
}

fn check_paired(fp: &SampleTrajectory, q: &SampleTrajectory) -> Result<()> {
    if fp.steps.len() != q.steps.len() || fp.states.len() != q.states.len() {
        return Err(Error::Shape(format!(
            "trajectories differ in length: {} vs {} steps",
            fp.steps.len(),
            q.steps.len()
        )));
    }
    Ok(())
}

/// Per-step drift of one layer's input or output. `layer = None` picks the
/// middle layer.
pub fn feature_drift(
    fp: &SampleTrajectory,
    q: &SampleTrajectory,
    layer: Option<usize>,
    site: Site,
) -> Result<Vec<f64>> {
    check_paired(fp, q)?;
    let mut out = Vec::with_capacity(fp.steps.len());
    for (a, b) in fp.steps.iter().zip(&q.steps) {
        let li = layer.unwrap_or(a.layers.len() / 2);
        let (Some(ra), Some(rb)) = (a.layers.get(li), b.layers.get(li)) else {
            return Err(Error::Shape(format!("no layer {li} in trajectory")));
        };
        out.push(match site {
            Site::Input => drift(&rb.input, &ra.input)?,
            Site::Output => drift(&rb.output, &ra.output)?,
        });
    }
    Ok(out)
}

/// Least-squares slope of `series` against its index.
pub fn trend_slope(series: &[f64]) -> f64 {
    let n = series.len() as f64;
    if series.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = series.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in series.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Relative ℓ2 between the two generated samples `x₀`.
pub fn final_state_error(fp: &SampleTrajectory, q: &SampleTrajectory) -> Result<f64> {
    check_paired(fp, q)?;
    drift(q.final_state(), fp.final_state())
}

/// Reuse schedule for the cache baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReuseInterval {
    /// Recompute on steps `k ≡ 0 (mod N)`, counting from `t = T`.
    Every(usize),
    /// Compute once at `t = T` and reuse forever.
    Never,
}

/// Sampling where the selected layers (all when `layers` is `None`) return
/// their cached output between refreshes instead of recomputing.
pub fn cache_reuse_sample(
    net: &DenoiserNetwork,
    sched: &DiffusionSchedule,
    sampler: SamplerKind,
    samples: usize,
    interval: ReuseInterval,
    layers: Option<&[usize]>,
    rng: RngState,
) -> Result<SampleTrajectory> {
    if interval == ReuseInterval::Every(0) {
        return Err(Error::Config("reuse interval must be at least 1".into()));
    }
    let mut cache: Vec<Option<Tensor>> = vec![None; net.layers.len()];
    run_reverse(net, sched, sampler, samples, rng, |k, i, layer, a| {
        let selected = layers.is_none_or(|ls| ls.contains(&i));
        let refresh = match interval {
            ReuseInterval::Every(n) => k % n == 0,
            ReuseInterval::Never => k == 0,
        };
        match &cache[i] {
            Some(o) if selected && !refresh => {
                let diag = StepDiagnostics {
                    skipped: true,
                    act_bits: 32,
                    macs: layer.macs(a.shape()[0]),
                    ..StepDiagnostics::default()
                };
                Ok((o.clone(), diag))
            }
            _ => {
                let (o, diag) = forward_full(layer, a)?;
                cache[i] = Some(o.clone());
                Ok((o, diag))
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeEntry {
    pub t: usize,
    pub layer: usize,
    pub min: f64,
    pub max: f64,
    pub range: f64,
    /// Range of `a_t − a_{t+1}`; absent at `t = T`.
    pub diff_range: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRangeSummary {
    pub layer: usize,
    pub median_range: f64,
    pub median_diff_range: f64,
    /// `median_range / median_diff_range`.
    pub ratio: f64,
    pub q05_range: f64,
    pub q95_range: f64,
    pub q05_diff_range: f64,
    pub q95_diff_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub entries: Vec<RangeEntry>,
    pub layers: Vec<LayerRangeSummary>,
}

/// Linear-interpolated quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Ranges of every layer input per step, and of its change since the
/// previous step.
pub fn activation_stats(traj: &SampleTrajectory) -> Result<ActivationStats> {
    let n_layers = traj.steps.first().map_or(0, |s| s.layers.len());
    let mut entries = Vec::new();
    for (k, step) in traj.steps.iter().enumerate() {
        for (li, rec) in step.layers.iter().enumerate() {
            let diff_range = match k {
                0 => None,
                _ => Some(rec.input.sub(&traj.steps[k - 1].layers[li].input)?.range()),
            };
            entries.push(RangeEntry {
                t: step.t,
                layer: li,
                min: rec.input.min(),
                max: rec.input.max(),
                range: rec.input.range(),
                diff_range,
            });
        }
    }
    let layers = (0..n_layers)
        .map(|li| {
            let ranges: Vec<f64> = entries.iter().filter(|e| e.layer == li).map(|e| e.range).collect();
            let diffs: Vec<f64> = entries
                .iter()
                .filter(|e| e.layer == li)
                .filter_map(|e| e.diff_range)
                .collect();
            let (mr, md) = (median(&ranges), median(&diffs));
            LayerRangeSummary {
                layer: li,
                median_range: mr,
                median_diff_range: md,
                ratio: mr / md,
                q05_range: quantile(&ranges, 0.05),
                q95_range: quantile(&ranges, 0.95),
                q05_diff_range: quantile(&diffs, 0.05),
                q95_diff_range: quantile(&diffs, 0.95),
            }
        })
        .collect();
    Ok(ActivationStats { entries, layers })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BopsModel {
    pub macs_per_layer: Vec<u64>,
    pub weight_bits: u32,
    pub act_bits: u32,
}

impl BopsModel {
    /// MAC counts `in·out·batch` for a chain of dense layers with widths
    /// `dims`.
    pub fn from_dims(dims: &[usize], batch: usize, weight_bits: u32, act_bits: u32) -> Self {
        let macs_per_layer = dims
            .windows(2)
            .map(|w| (w[0] * w[1] * batch) as u64)
            .collect();
        Self {
            macs_per_layer,
            weight_bits,
            act_bits,
        }
    }
}

/// `Σ macs · b_w · b_a`.
pub fn bops_count(model: &BopsModel) -> u64 {
    let per_mac = u64::from(model.weight_bits) * u64::from(model.act_bits);
    model.macs_per_layer.iter().map(|m| m * per_mac).sum()
}

/// One CSV row: a (step, layer) cell of a paired run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub mode: String,
    pub b_w: u32,
    pub b_a: u32,
    pub step: usize,
    pub layer: usize,
    pub drift: f64,
    pub act_range: f64,
    /// Empty at `t = T`.
    pub diff_range: Option<f64>,
    pub quant_err: f64,
    pub skipped: bool,
    pub bops: u64,
}

/// Labels attached to every row of one paired run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLabel {
    pub seed: u64,
    pub mode: String,
    pub weight_bits: u32,
    pub act_bits: u32,
}

/// Rows for every (step, layer) of `q`, with activation drift against `fp`.
pub fn metrics(fp: &SampleTrajectory, q: &SampleTrajectory, label: &RunLabel) -> Result<Vec<MetricsRecord>> {
    check_paired(fp, q)?;
    let mut rows = Vec::new();
    for (k, (a, b)) in fp.steps.iter().zip(&q.steps).enumerate() {
        for (li, (ra, rb)) in a.layers.iter().zip(&b.layers).enumerate() {
            let diff_range = match k {
                0 => None,
                _ => Some(rb.input.sub(&q.steps[k - 1].layers[li].input)?.range()),
            };
            rows.push(MetricsRecord {
                seed: label.seed,
                mode: label.mode.clone(),
                b_w: label.weight_bits,
                b_a: label.act_bits,
                step: b.t,
                layer: li,
                drift: drift(&rb.input, &ra.input)?,
                act_range: rb.input.range(),
                diff_range,
                quant_err: rb.diag.quant_error_l2,
                skipped: rb.diag.skipped,
                bops: rb.diag.bops(label.weight_bits),
            });
        }
    }
    Ok(rows)
}

/// Header plus one line per record, LF terminated.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(true)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "seed", "mode", "b_w", "b_a", "step", "layer", "drift", "act_range", "diff_range",
            "quant_err", "skipped", "bops",
        ])?;
    }
    w.flush()?;
    Ok(())
}
