use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use modiff::analysis::{
    activation_stats, bops_count, metrics, write_metrics_csv, BopsModel, MetricsRecord, RunLabel,
};
use modiff::diffusion::{
    load_bundle, make_schedule, sample, save_bundle, DenoiserNetwork, DiffusionSchedule, QuantMode,
    SampleSpec, SamplerKind,
};
use modiff::train::train_denoiser;
use modiff::verify::{default_network, run_all, OFF_BY_ONE_CLAMP, REFERENCE};
use modiff::QuantConfig;

use crate::config::ExperimentConfig;
use crate::CliError;

fn schedule(cfg: &ExperimentConfig, kind: SamplerKind) -> Result<DiffusionSchedule, CliError> {
    let s = &cfg.schedule;
    Ok(make_schedule(s.steps, s.beta_start, s.beta_end, kind)?)
}

fn require_bundle(path: Option<&Path>) -> Result<DenoiserNetwork, CliError> {
    let Some(dir) = path else {
        return Err(CliError::config("no weight bundle given (use --bundle or \"bundle\")"));
    };
    if !dir.join(modiff::diffusion::MANIFEST_FILE).is_file() {
        return Err(CliError::config(format!(
            "weight bundle {} not found",
            dir.display()
        )));
    }
    Ok(load_bundle(dir)?)
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, bytes)?;
        }
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = out.unwrap_or_else(|| cfg.train_out.clone());
    // Training always draws t over the DDPM forward process; the sampler kind
    // only changes σ, which the objective does not use.
    let sched = schedule(cfg, SamplerKind::Ddpm)?;
    let (net, report) = train_denoiser(&cfg.train, &sched)?;
    let manifest = save_bundle(&net, &out)?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    fs::write(out.join("train_report.json"), json)?;
    let dims: Vec<String> = net.dims().iter().map(ToString::to_string).collect();
    println!(
        "trained {} epochs: held-out loss {:.6} -> {:.6}",
        cfg.train.epochs, report.initial_loss, report.final_loss
    );
    println!(
        "wrote {} ({} layers, dims {})",
        out.display(),
        manifest.layers.len(),
        dims.join("-")
    );
    Ok(())
}

pub struct SweepArgs {
    pub seeds: Vec<u64>,
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

pub fn sweep(cfg: &ExperimentConfig, args: SweepArgs) -> Result<(), CliError> {
    let sw = &cfg.sweep;
    if args.seeds.is_empty() || sw.modes.is_empty() || sw.bits.is_empty() {
        return Err(CliError::config("sweep needs nonempty seeds, modes and bits"));
    }
    let net = require_bundle(args.bundle.as_deref().or(cfg.bundle.as_deref()))?;
    let sched = schedule(cfg, sw.sampler)?;
    let quantizer = |bits: u32| {
        QuantConfig::new(bits)
            .with_rounding(sw.rounding)
            .with_granularity(sw.granularity)
            .with_skip_threshold(sw.skip_threshold)
    };
    for &b in &sw.bits {
        quantizer(b).validate()?;
    }
    let cells: Vec<(usize, QuantMode, u32)> = (0..args.seeds.len())
        .flat_map(|si| {
            sw.modes
                .iter()
                .flat_map(move |&m| sw.bits.iter().map(move |&b| (si, m, b)))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::config(format!("cannot start worker pool: {e}")))?;
    let rows: Vec<Vec<MetricsRecord>> = pool.install(|| {
        let refs = args
            .seeds
            .par_iter()
            .map(|&seed| {
                let spec = SampleSpec::new(sw.sampler, QuantMode::Fp, sw.samples);
                sample(&net, &sched, &spec, &quantizer(8), modiff::RngState::new(seed))
            })
            .collect::<modiff::Result<Vec<_>>>()?;
        cells
            .par_iter()
            .map(|&(si, mode, bits)| {
                let seed = args.seeds[si];
                let spec = SampleSpec::new(sw.sampler, mode, sw.samples);
                let run = sample(&net, &sched, &spec, &quantizer(bits), modiff::RngState::new(seed))?;
                let label = RunLabel {
                    seed,
                    mode: mode.name().to_string(),
                    weight_bits: sw.weight_bits,
                    act_bits: bits,
                };
                metrics(&refs[si], &run, &label)
            })
            .collect::<modiff::Result<Vec<_>>>()
    })?;
    let rows: Vec<MetricsRecord> = rows.into_iter().flatten().collect();
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &rows)?;
    write_output(args.out.as_deref().or(sw.out.as_deref()), &buf)?;
    eprintln!(
        "sweep: {} cells, {} rows",
        cells.len(),
        rows.len()
    );
    Ok(())
}

pub fn verify(
    cfg: &ExperimentConfig,
    bundle: Option<PathBuf>,
    fault: Option<&str>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let backend = match fault {
        None => REFERENCE,
        Some("off-by-one-clamp") => OFF_BY_ONE_CLAMP,
        Some(other) => return Err(CliError::config(format!("unknown fault {other:?}"))),
    };
    let net = match bundle.as_deref().or(cfg.bundle.as_deref()) {
        Some(dir) => require_bundle(Some(dir))?,
        None => default_network(cfg.seed)?,
    };
    let report = run_all(&cfg.verify, backend, &net)?;
    let mut text = String::new();
    for r in &report.results {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    if let Some(p) = out.as_deref() {
        write_output(Some(p), text.as_bytes())?;
    }
    print!("{text}");
    if report.all_passed() {
        println!("all {} properties hold", report.results.len());
        Ok(())
    } else {
        let failed: Vec<String> = report
            .failures()
            .map(|r| match r.counterexample {
                Some(seed) => format!("{} (counterexample seed {seed})", r.name),
                None => format!("{} (no trials)", r.name),
            })
            .collect();
        Err(CliError::failure(format!("verification failed: {}", failed.join(", "))))
    }
}

pub fn stats(cfg: &ExperimentConfig, bundle: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    let net = require_bundle(bundle.as_deref().or(cfg.bundle.as_deref()))?;
    let st = &cfg.stats;
    let sched = schedule(cfg, st.sampler)?;
    let spec = SampleSpec::new(st.sampler, QuantMode::Fp, st.samples);
    let traj = sample(&net, &sched, &spec, &modiff::Identity, modiff::RngState::new(cfg.seed))?;
    let stats = activation_stats(&traj)?;
    println!("layer  median range  median diff range  ratio");
    for l in &stats.layers {
        println!(
            "{:>5}  {:>12.6}  {:>17.6}  {:>5.2}",
            l.layer, l.median_range, l.median_diff_range, l.ratio
        );
    }
    if let Some(p) = out.as_deref().or(st.out.as_deref()) {
        let mut json = serde_json::to_string_pretty(&stats).expect("stats serialize");
        json.push('\n');
        write_output(Some(p), json.as_bytes())?;
    }
    Ok(())
}

/// `W/A` pairs such as `8/32`.
pub fn parse_bit_pairs(text: &str) -> Result<Vec<(u32, u32)>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let bad = || CliError::config(format!("invalid W/A pair {pair:?}"));
            let (w, a) = pair.split_once('/').ok_or_else(bad)?;
            let w: u32 = w.trim().parse().map_err(|_| bad())?;
            let a: u32 = a.trim().parse().map_err(|_| bad())?;
            if w == 0 || a == 0 {
                return Err(bad());
            }
            Ok((w, a))
        })
        .collect()
}

pub fn bops(dims: &[usize], batch: usize, pairs: &[(u32, u32)]) -> Result<(), CliError> {
    if dims.len() < 2 || dims.contains(&0) || batch == 0 || pairs.is_empty() {
        return Err(CliError::config("bops needs at least two positive dims, batch >= 1 and one W/A pair"));
    }
    let counts: Vec<u64> = pairs
        .iter()
        .map(|&(w, a)| bops_count(&BopsModel::from_dims(dims, batch, w, a)))
        .collect();
    println!("W/A    bops  ratio");
    for (&(w, a), &c) in pairs.iter().zip(&counts) {
        println!("{w}/{a}  {c}  {:.4}", c as f64 / counts[0] as f64);
    }
    Ok(())
}
