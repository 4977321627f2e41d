//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to the
//! unbuffered stderr handle so the summary shows up even when output capture
//! is on.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use modiff::analysis::{
    activation_stats, bops_count, cache_reuse_sample, feature_drift, final_state_error, median,
    trend_slope, BopsModel, ReuseInterval, Site,
};
use modiff::diffusion::{
    make_schedule, sample, DenoiserNetwork, DiffusionSchedule, QuantMode, SampleSpec, SamplerKind,
};
use modiff::modulated::{forward_direct, LayerMode, ModulatedLayerState, Warmup};
use modiff::train::{gradient_check, train_denoiser, Dataset, TrainConfig};
use modiff::verify::{
    corollary_suite, ec_suite, reformulation_suite, quant_error_suite, PropertyResult,
    TrajectorySuite, REFERENCE,
};
use modiff::{Identity, QuantConfig, RngState, Tensor};

fn report(id: u32, ok: bool, detail: &str) {
    let line = format!(
        "acceptance criterion {id:>2}: {} | {detail}\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn summarize(results: &[PropertyResult]) -> String {
    results
        .iter()
        .map(|r| format!("{} {}/{} (worst {:.3e})", r.name, r.violations, r.trials, r.worst))
        .collect::<Vec<_>>()
        .join("; ")
}

struct Trained {
    net: DenoiserNetwork,
    initial_loss: f64,
    final_loss: f64,
}

fn trained() -> &'static Trained {
    static MODEL: OnceLock<Trained> = OnceLock::new();
    MODEL.get_or_init(|| {
        let train_sched = make_schedule(100, 1e-4, 0.02, SamplerKind::Ddpm).unwrap();
        let (net, r) = train_denoiser(&TrainConfig::reference(), &train_sched).unwrap();
        Trained {
            net,
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
        }
    })
}

fn ddim() -> DiffusionSchedule {
    make_schedule(100, 1e-4, 0.02, SamplerKind::Ddim).unwrap()
}

const SEEDS: u64 = 20;
const SAMPLES: usize = 64;

#[test]
fn reference_model_trains() {
    let t = trained();
    let ratio = t.final_loss / t.initial_loss;
    let ok = ratio < 0.5;
    report(0, ok, &format!(
        "reference model trained: held-out loss {:.4} -> {:.4} (ratio {ratio:.3}, need < 0.5)",
        t.initial_loss, t.final_loss
    ));
    assert!(ok);
}

#[test]
fn criterion_01_quant_error_bound() {
    let start = Instant::now();
    let results = quant_error_suite(REFERENCE, 10_000, 0).unwrap();
    let elapsed = start.elapsed();
    let ok = results.iter().all(PropertyResult::passed) && elapsed < Duration::from_secs(30);
    report(1, ok, &format!("{} in {elapsed:.2?}", summarize(&results)));
    assert!(ok);
}

#[test]
fn criterion_02_reformulation_exact() {
    let net = &trained().net;
    let start = Instant::now();
    let suite = TrajectorySuite {
        samples: SAMPLES,
        ..TrajectorySuite::default()
    };
    let results = reformulation_suite(net, &ddim(), &suite).unwrap();
    let elapsed = start.elapsed();
    let ok = results.iter().all(PropertyResult::passed) && elapsed < Duration::from_secs(10);
    report(2, ok, &format!("tol 1e-5, T=100, 20 seeds: {} in {elapsed:.2?}", summarize(&results)));
    assert!(ok);
}

fn ec_results() -> &'static Vec<PropertyResult> {
    static RESULTS: OnceLock<Vec<PropertyResult>> = OnceLock::new();
    RESULTS.get_or_init(|| {
        let suite = TrajectorySuite {
            samples: SAMPLES,
            ..TrajectorySuite::default()
        };
        ec_suite(&trained().net, &ddim(), &suite, REFERENCE).unwrap()
    })
}

#[test]
fn criterion_03_ec_identities() {
    let results: Vec<_> = ec_results()
        .iter()
        .filter(|r| r.name.ends_with("identity"))
        .cloned()
        .collect();
    let ok = results.len() == 2 && results.iter().all(PropertyResult::passed);
    report(3, ok, &format!("b in {{2,3,4,6,8}}, 20 seeds, ratios are error/tolerance: {}", summarize(&results)));
    assert!(ok);
}

#[test]
fn criterion_04_ec_step_bound() {
    let results: Vec<_> = ec_results()
        .iter()
        .filter(|r| r.name == "ec_step_bound")
        .cloned()
        .collect();
    let ok = results.len() == 1 && results[0].passed();
    report(4, ok, &format!("operator-norm slack 1e-6: {}", summarize(&results)));
    assert!(ok);
}

#[test]
fn criterion_05_error_ordering() {
    let t = trained();
    let start = Instant::now();
    let sched = ddim();
    let spec = |mode| SampleSpec::new(SamplerKind::Ddim, mode, SAMPLES);
    let fps: Vec<_> = (0..SEEDS)
        .map(|s| sample(&t.net, &sched, &spec(QuantMode::Fp), &Identity, RngState::new(s)).unwrap())
        .collect();
    let mut ok = true;
    let mut details = Vec::new();
    for bits in [3u32, 4, 6] {
        let q = QuantConfig::new(bits).channel_wise(1);
        let (mut ordered, mut ordered_out, mut ordered_x0) = (0, 0, 0);
        let mut mean_series = vec![0.0; sched.steps];
        let mut medians = [Vec::new(), Vec::new(), Vec::new()];
        for seed in 0..SEEDS {
            let fp = &fps[seed as usize];
            let mut act = [0.0; 3];
            let mut out = [0.0; 3];
            let mut x0 = [0.0; 3];
            for (i, mode) in [QuantMode::Ec, QuantMode::Modulated, QuantMode::Direct].into_iter().enumerate() {
                let run = sample(&t.net, &sched, &spec(mode), &q, RngState::new(seed)).unwrap();
                let series = feature_drift(fp, &run, None, Site::Input).unwrap();
                act[i] = *series.last().unwrap();
                out[i] = *feature_drift(fp, &run, None, Site::Output).unwrap().last().unwrap();
                x0[i] = final_state_error(fp, &run).unwrap();
                medians[i].push(act[i]);
                if mode == QuantMode::Modulated {
                    for (m, v) in mean_series.iter_mut().zip(&series) {
                        *m += v / SEEDS as f64;
                    }
                }
            }
            let chain = |v: [f64; 3]| v[0] <= v[1] && v[1] <= v[2];
            ordered += usize::from(chain(act));
            ordered_out += usize::from(chain(out));
            ordered_x0 += usize::from(chain(x0));
        }
        let slope = trend_slope(&mean_series);
        let pass = ordered * 100 >= 95 * SEEDS as usize && slope >= 0.0;
        ok &= pass;
        details.push(format!(
            "b={bits}: EC<=noEC<=Direct {ordered}/{SEEDS} (median drift {:.2e} / {:.2e} / {:.2e}), noEC slope {slope:.2e}; \
             [info] same order on layer output {ordered_out}/{SEEDS}, on x0 {ordered_x0}/{SEEDS}",
            median(&medians[0]),
            median(&medians[1]),
            median(&medians[2])
        ));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(120);
    report(5, ok, &format!("{} in {elapsed:.2?}", details.join(" | ")));
    assert!(ok);
}

#[test]
fn criterion_06_difference_concentration() {
    let t = trained();
    let fp = sample(&t.net, &ddim(), &SampleSpec::new(SamplerKind::Ddim, QuantMode::Fp, SAMPLES), &Identity, RngState::new(0)).unwrap();
    let stats = activation_stats(&fp).unwrap();
    let ok = stats.layers.iter().all(|l| l.median_diff_range < l.median_range);
    let ratios: Vec<_> = stats
        .layers
        .iter()
        .map(|l| format!("layer {} {:.3}/{:.3} = {:.2}x", l.layer, l.median_range, l.median_diff_range, l.ratio))
        .collect();
    report(6, ok, &format!(
        "median range(a_t) / median range(a_t - a_t+1): {} (the '>10x' figure reported for large models is logged, not asserted)",
        ratios.join(", ")
    ));
    assert!(ok);
}

#[test]
fn criterion_07_cache_accumulation() {
    let t = trained();
    let sched = ddim();
    let intervals = [1usize, 2, 3, 5];
    let mut x0_medians = Vec::new();
    let mut feature_medians = Vec::new();
    let mut exact_at_one = true;
    for &n in &intervals {
        let (mut x0, mut feat) = (Vec::new(), Vec::new());
        for seed in 0..SEEDS {
            let rng = RngState::new(seed);
            let fp = sample(&t.net, &sched, &SampleSpec::new(SamplerKind::Ddim, QuantMode::Fp, SAMPLES), &Identity, rng).unwrap();
            let c = cache_reuse_sample(&t.net, &sched, SamplerKind::Ddim, SAMPLES, ReuseInterval::Every(n), None, rng).unwrap();
            let e = final_state_error(&fp, &c).unwrap();
            let f = *feature_drift(&fp, &c, None, Site::Input).unwrap().last().unwrap();
            if n == 1 {
                exact_at_one &= e == 0.0 && f == 0.0;
            }
            x0.push(e);
            feat.push(f);
        }
        x0_medians.push(median(&x0));
        feature_medians.push(median(&feat));
    }
    let monotone = x0_medians.windows(2).all(|w| w[0] <= w[1]);
    let ok = monotone && exact_at_one;
    let fmt = |v: &[f64]| {
        intervals
            .iter()
            .zip(v)
            .map(|(n, d)| format!("N={n}: {d:.3e}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    report(7, ok, &format!(
        "median final-sample drift {}; N=1 exact: {exact_at_one}; [info] final-step middle activation drift {}",
        fmt(&x0_medians),
        fmt(&feature_medians)
    ));
    assert!(ok);
}

#[test]
fn criterion_08_bops_ratios() {
    let dims = trained().net.dims();
    let b = |w, a| bops_count(&BopsModel::from_dims(&dims, SAMPLES, w, a)) as f64;
    let rows = [
        ("8/8 vs 8/32", b(8, 8) / b(8, 32), 409.0 / 1636.0),
        ("8/4 vs 8/8", b(8, 4) / b(8, 8), 205.0 / 409.0),
        ("8/3 vs 8/8", b(8, 3) / b(8, 8), 153.0 / 409.0),
    ];
    let ok = rows.iter().all(|(_, got, expected)| ((got - expected) / expected).abs() <= 0.005);
    let text: Vec<_> = rows
        .iter()
        .map(|(name, got, expected)| format!("{name} {got:.4} vs {expected:.4} ({:+.2}%)", 100.0 * (got - expected) / expected))
        .collect();
    report(8, ok, &text.join(", "));
    assert!(ok);
}

#[test]
fn criterion_09_corollary_bits() {
    let results = corollary_suite(REFERENCE, 0.25, &[16, 64, 256], 1_000, 0).unwrap();
    let ok = results.iter().all(PropertyResult::passed);
    report(9, ok, &format!("floor mode, ratios are contraction/c: {}", summarize(&results)));
    assert!(ok);
}

#[test]
fn criterion_10_gradient_check() {
    let sched = make_schedule(100, 1e-4, 0.02, SamplerKind::Ddpm).unwrap();
    let mut rng = RngState::new(10);
    let mut net = DenoiserNetwork::init(2, 4, &[8, 8], modiff::diffusion::Activation::Silu, &mut rng).unwrap();
    for l in &mut net.layers {
        let b = Tensor::randn(&[l.out_dim()], &mut rng).scale(0.1);
        *l = modiff::LinearLayer::new(l.weights.clone(), Some(b)).unwrap();
    }
    let x0 = Dataset::gaussian_mixture(2, 1.0, 0.1).sample(32, &mut rng);
    let r = gradient_check(&net, &x0, &sched, 100, 1e-5, &mut rng).unwrap();
    let ok = r.checked == 100 && r.max_rel_err <= 1e-4;
    report(10, ok, &format!(
        "{} coordinates at h=1e-5, max relative gap {:.2e} (layer {})",
        r.checked, r.max_rel_err, r.worst_layer
    ));
    assert!(ok);
}

#[test]
fn criterion_11_overhead_accounting() {
    let t = trained();
    let q = QuantConfig::new(4).channel_wise(1);
    let sched = ddim();
    let ec = sample(&t.net, &sched, &SampleSpec::new(SamplerKind::Ddim, QuantMode::Ec, 8), &q, RngState::new(0)).unwrap();
    let mut exact = true;
    let mut cells = 0;
    for step in ec.steps.iter().skip(1) {
        for (i, rec) in step.layers.iter().enumerate() {
            let (_, direct) = forward_direct(&t.net.layers[i], &rec.input, &q).unwrap();
            let (e, d) = (rec.diag.ops, direct.ops);
            exact &= e.additions == d.additions + 2
                && e.dequantizations == d.dequantizations + 1
                && e.matmuls == d.matmuls
                && e.quantizations == d.quantizations;
            cells += 1;
        }
    }
    let mut memory_ok = true;
    let mut bytes = Vec::new();
    let a0 = &ec.steps[0].layers;
    let a1 = &ec.steps[1].layers;
    for (i, layer) in t.net.layers.iter().enumerate() {
        let mut state = ModulatedLayerState::new(LayerMode::ErrorCompensated, q);
        state.warmup(layer, &a0[i].input, Warmup::FullPrecision).unwrap();
        state.forward(layer, &a1[i].input).unwrap();
        let expect = 8 * 8 * (layer.in_dim() + layer.out_dim());
        memory_ok &= state.stored_tensors() == 2 && state.state_bytes() == expect;
        bytes.push(state.state_bytes());
    }
    let ok = exact && memory_ok && cells > 0;
    report(11, ok, &format!(
        "EC - Direct = +2 additions, +1 dequantization on {cells} layer-steps: {exact}; 2 stored tensors per layer: {memory_ok} (bytes per layer at batch 8: {bytes:?})"
    ));
    assert!(ok);
}
