//! Latency and throughput measurement plus per-image energy and efficiency.
//!
//! `E_img = 1000 · P̄ · Σtᵢ / (N·B)` in millijoules per image and
//! `η = Acc / E_img`. Power comes from a [`PowerProvider`] instead of
//! hardware sensors; accuracy is supplied by the caller.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{random_input, Model};
use crate::scalar::Scalar;

/// Source of the mean power `P̄` over a measurement window.
#[derive(Clone, Debug, PartialEq)]
pub enum PowerProvider {
    Constant(f64),
    /// `(seconds, watts)` samples with strictly increasing timestamps.
    Trace(Vec<(f64, f64)>),
}

impl PowerProvider {
    pub fn constant(watts: f64) -> Result<Self> {
        if !(watts.is_finite() && watts > 0.0) {
            return Err(Error::Bench(format!("power must be positive, got {watts}")));
        }
        Ok(Self::Constant(watts))
    }

    pub fn trace(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Bench("power trace is empty".into()));
        }
        for (i, &(t, w)) in samples.iter().enumerate() {
            if !t.is_finite() || !(w.is_finite() && w > 0.0) {
                return Err(Error::Bench(format!("trace sample {i} ({t}, {w}) is invalid")));
            }
            if i > 0 && t <= samples[i - 1].0 {
                return Err(Error::Bench(format!("trace timestamps must increase strictly at sample {i}")));
            }
        }
        Ok(Self::Trace(samples))
    }

    /// Parses `seconds<TAB>watts` lines. Blank lines are skipped.
    pub fn parse_trace(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Bench(format!("trace line {}: expected `seconds<TAB>watts`, got {line:?}", n + 1));
            let (t, w) = line.split_once('\t').ok_or_else(bad)?;
            let t: f64 = t.trim().parse().map_err(|_| bad())?;
            let w: f64 = w.trim().parse().map_err(|_| bad())?;
            samples.push((t, w));
        }
        Self::trace(samples)
    }

    pub fn load_trace(path: &Path) -> Result<Self> {
        Self::parse_trace(&std::fs::read_to_string(path)?)
    }

    /// Short label recorded in reports.
    pub fn describe(&self) -> String {
        match self {
            Self::Constant(w) => format!("constant:{w}"),
            Self::Trace(s) => format!("trace:{} samples", s.len()),
        }
    }

    /// Mean power over a window of `seconds` starting at the first sample,
    /// and whether the trace had to be replayed cyclically to cover it.
    ///
    /// The trace is linearly interpolated between samples and averaged with
    /// the trapezoidal rule.
    pub fn mean_power(&self, seconds: f64) -> Result<(f64, bool)> {
        let samples = match self {
            Self::Constant(w) => return Ok((*w, false)),
            Self::Trace(s) => s,
        };
        if !(seconds.is_finite() && seconds > 0.0) {
            return Err(Error::Bench(format!("measurement window must be positive, got {seconds}")));
        }
        let t0 = samples[0].0;
        let span = samples[samples.len() - 1].0 - t0;
        if samples.len() == 1 {
            return Ok((samples[0].1, true));
        }
        // Energy from the trace start to `s` seconds in, for `s ≤ span`.
        let partial = |s: f64| -> f64 {
            let mut acc = 0.0;
            for pair in samples.windows(2) {
                let ((ta, wa), (tb, wb)) = (pair[0], pair[1]);
                let (a, b) = (ta - t0, tb - t0);
                if a >= s {
                    break;
                }
                let end = b.min(s);
                let w_end = wa + (wb - wa) * (end - a) / (b - a);
                acc += 0.5 * (wa + w_end) * (end - a);
            }
            acc
        };
        let full_cycles = (seconds / span).floor();
        let remainder = seconds - full_cycles * span;
        let energy = full_cycles * partial(span) + partial(remainder);
        Ok((energy / seconds, seconds > span))
    }
}

/// How long the measured loop runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stop {
    Iterations(usize),
    Seconds(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub warmup: usize,
    pub stop: Stop,
    /// Top-1 accuracy in percent, measured elsewhere.
    pub accuracy: f64,
    /// Where [`Self::accuracy`] came from.
    pub accuracy_source: String,
    /// Run on a single worker thread so outputs are bit-reproducible.
    pub deterministic: bool,
    pub input_seed: u64,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Bench("batch size must be at least 1".into()));
        }
        match self.stop {
            Stop::Iterations(0) => Err(Error::Bench("need at least one measured iteration".into())),
            Stop::Seconds(s) if !(s.is_finite() && s > 0.0) => {
                Err(Error::Bench(format!("duration must be positive, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchMetadata {
    pub variant: String,
    pub mode: String,
    pub attention: String,
    pub config_hash: String,
    pub batch_size: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub latency_mean: f64,
    pub latency_median: f64,
    pub accuracy: f64,
    pub accuracy_source: String,
    pub power_source: String,
    pub trace_wrapped: bool,
    pub deterministic: bool,
    /// SHA-256 of the little-endian bytes of the last batch's scores.
    pub output_digest: String,
}

/// One benchmark run. Latencies are seconds per batch, throughput images
/// per second, power watts, energy millijoules per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub latencies: Vec<f64>,
    pub throughput: f64,
    pub mean_power: f64,
    pub e_img: f64,
    pub eta: f64,
    pub metadata: BenchMetadata,
}

fn check_latencies(latencies: &[f64]) -> Result<()> {
    if latencies.is_empty() {
        return Err(Error::Bench("no latencies recorded".into()));
    }
    if let Some(t) = latencies.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::Bench(format!("latency {t} is not positive")));
    }
    Ok(())
}

/// Images per second: `N·B / Σtᵢ`.
pub fn throughput(latencies: &[f64], batch_size: usize) -> Result<f64> {
    check_latencies(latencies)?;
    if batch_size == 0 {
        return Err(Error::Bench("batch size must be at least 1".into()));
    }
    Ok((latencies.len() * batch_size) as f64 / latencies.iter().sum::<f64>())
}

/// `1000 · P̄ / throughput`, in millijoules per image.
pub fn energy_per_image(mean_power: f64, throughput: f64) -> Result<f64> {
    if !(mean_power.is_finite() && mean_power > 0.0) {
        return Err(Error::Bench(format!("mean power must be positive, got {mean_power}")));
    }
    if !(throughput.is_finite() && throughput > 0.0) {
        return Err(Error::Bench(format!("throughput must be positive, got {throughput}")));
    }
    Ok(1000.0 * mean_power / throughput)
}

/// `1000 · P̄ · Σtᵢ / (N·B)`, in millijoules per image.
pub fn compute_energy(latencies: &[f64], batch_size: usize, mean_power: f64) -> Result<f64> {
    energy_per_image(mean_power, throughput(latencies, batch_size)?)
}

/// `Acc / E_img`.
pub fn compute_eta(accuracy: f64, e_img: f64) -> Result<f64> {
    if !(e_img.is_finite() && e_img > 0.0) {
        return Err(Error::Bench(format!("energy per image must be positive, got {e_img}")));
    }
    Ok(accuracy / e_img)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// SHA-256 of the model config and bench config, as JSON.
pub fn config_hash<T: Scalar>(model: &Model<T>, config: &BenchConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model.config())?);
    h.update(model.mode().as_str().as_bytes());
    h.update(serde_json::to_vec(config)?);
    Ok(hex(&h.finalize()))
}

fn measure<T: Scalar>(model: &Model<T>, config: &BenchConfig) -> Result<(Vec<f64>, String)> {
    let r = model.config().input_resolution;
    let x = random_input::<T>([config.batch_size, 3, r, r], config.input_seed);
    for _ in 0..config.warmup {
        model.forward(&x)?;
    }
    let mut latencies = Vec::new();
    let mut elapsed = Duration::ZERO;
    let last = loop {
        let start = Instant::now();
        let y = model.forward(&x)?;
        let dt = start.elapsed();
        latencies.push(dt.as_secs_f64().max(f64::MIN_POSITIVE));
        elapsed += dt;
        let done = match config.stop {
            Stop::Iterations(n) => latencies.len() >= n,
            Stop::Seconds(s) => elapsed.as_secs_f64() >= s,
        };
        if done {
            break y;
        }
    };
    let bytes: Vec<u8> = last
        .data()
        .iter()
        .flat_map(|v| (v.to_f64_lossy() as f32).to_le_bytes())
        .collect();
    Ok((latencies, hex(&Sha256::digest(&bytes))))
}

/// Warmup, then the timed loop around full forward calls, then the energy
/// arithmetic.
pub fn run_bench<T: Scalar>(model: &Model<T>, config: &BenchConfig, provider: &PowerProvider) -> Result<BenchReport> {
    config.validate()?;
    let (latencies, output_digest) = if config.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Bench(format!("thread pool: {e}")))?;
        pool.install(|| measure(model, config))?
    } else {
        measure(model, config)?
    };
    let total: f64 = latencies.iter().sum();
    let (mean_power, trace_wrapped) = provider.mean_power(total)?;
    let thr = throughput(&latencies, config.batch_size)?;
    let e_img = energy_per_image(mean_power, thr)?;
    let eta = compute_eta(config.accuracy, e_img)?;
    let metadata = BenchMetadata {
        variant: model.config().variant.clone(),
        mode: model.mode().as_str().into(),
        attention: format!("{:?}", model.config().attention).to_lowercase(),
        config_hash: config_hash(model, config)?,
        batch_size: config.batch_size,
        warmup: config.warmup,
        iterations: latencies.len(),
        latency_mean: total / latencies.len() as f64,
        latency_median: median(&latencies),
        accuracy: config.accuracy,
        accuracy_source: config.accuracy_source.clone(),
        power_source: provider.describe(),
        trace_wrapped,
        deterministic: config.deterministic,
        output_digest,
    };
    Ok(BenchReport {
        latencies,
        throughput: thr,
        mean_power,
        e_img,
        eta,
        metadata,
    })
}
