use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::CsiSample;
use crate::Result;

/// Fewest timed repetitions [`bench_timing`] will run.
pub const MIN_REPETITIONS: usize = 5;

/// Per-sample latency over repeated passes, in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub method: String,
    pub instances: usize,
    pub repetitions: usize,
    pub median_s: f64,
    pub mean_s: f64,
    pub std_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub hardware: String,
}

/// Best-effort description of the machine the timings came from.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "{cpu}; {threads} threads; {}-{}",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

/// Times `run` over every instance. One untimed warm-up pass precedes at
/// least [`MIN_REPETITIONS`] timed passes; each pass yields one mean
/// per-sample latency.
pub fn bench_timing<F>(method: &str, mut run: F, instances: &[CsiSample], repetitions: usize) -> Result<TimingStats>
where
    F: FnMut(&CsiSample) -> Result<()>,
{
    if instances.is_empty() {
        return Err(crate::Error::arg("benchmark needs at least one instance"));
    }
    for s in instances {
        run(s)?;
    }
    let reps = repetitions.max(MIN_REPETITIONS);
    let mut per_sample = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        for s in instances {
            run(s)?;
        }
        per_sample.push(t0.elapsed().as_secs_f64() / instances.len() as f64);
    }
    let mean = per_sample.iter().sum::<f64>() / reps as f64;
    let var = per_sample.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let mut sorted = per_sample.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 {
        sorted[reps / 2]
    } else {
        0.5 * (sorted[reps / 2 - 1] + sorted[reps / 2])
    };
    Ok(TimingStats {
        method: method.into(),
        instances: instances.len(),
        repetitions: reps,
        median_s: median,
        mean_s: mean,
        std_s: var.sqrt(),
        min_s: sorted[0],
        max_s: sorted[reps - 1],
        hardware: hardware_descriptor(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::TensorC;

    #[test]
    fn warm_up_is_excluded_and_repetitions_floor() {
        let s = vec![CsiSample::new(TensorC::zeros(&[2, 2]), 1, 1, 2, 2).unwrap(); 3];
        let mut calls = 0;
        let stats = bench_timing(
            "noop",
            |_| {
                calls += 1;
                Ok(())
            },
            &s,
            2,
        )
        .unwrap();
        assert_eq!(stats.repetitions, MIN_REPETITIONS);
        assert_eq!(calls, 3 * (MIN_REPETITIONS + 1));
        assert!(stats.min_s <= stats.median_s && stats.median_s <= stats.max_s);
        assert!(stats.std_s >= 0.0);
        assert!(!stats.hardware.is_empty());
    }
}
