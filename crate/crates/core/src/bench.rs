//! Inference latency trials and efficiency ratios.
//!
//! Timings are summarized by their mean and sample standard deviation
//! (`n − 1` denominator).

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{logits_batch, ModelError, WeightBundle};
use crate::tensor::{ExecMode, Tensor};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("at least one trial is required")]
    NoTrials,
    #[error("runtime must be positive, got {0} ms")]
    NonPositiveRuntime(f64),
    #[error("precision must lie in [0, 1], got {0}")]
    PrecisionRange(f64),
    #[error("report is inconsistent: {0}")]
    Inconsistent(String),
    #[error("cannot parse report: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Native,
    Browser,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Native => "native",
            Backend::Browser => "browser",
        })
    }
}

/// Mean and sample standard deviation; the deviation is `None` for a single
/// trial.
pub fn trial_stats(trials: &[f64]) -> Result<(f64, Option<f64>), BenchError> {
    if trials.is_empty() {
        return Err(BenchError::NoTrials);
    }
    let n = trials.len() as f64;
    let mean = trials.iter().sum::<f64>() / n;
    let std = (trials.len() >= 2).then(|| {
        let ss: f64 = trials.iter().map(|t| (t - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    Ok((mean, std))
}

/// Precision divided by the mean runtime in seconds.
pub fn perf_ratio(precision: f64, mean_runtime_ms: f64) -> Result<f64, BenchError> {
    if !(0.0..=1.0).contains(&precision) {
        return Err(BenchError::PrecisionRange(precision));
    }
    if !(mean_runtime_ms > 0.0) {
        return Err(BenchError::NonPositiveRuntime(mean_runtime_ms));
    }
    Ok(precision / (mean_runtime_ms / 1000.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub model: String,
    /// Combination of source codes the weights were trained on, e.g. `a+b+c`.
    pub trainsets: String,
    pub trials_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: Option<f64>,
    /// `[channels, height, width]` of one input image.
    pub input: [usize; 3],
    pub threads: usize,
    pub backend: Backend,
    /// Trainable parameters.
    pub params: u64,
    /// FLOPs of one forward pass.
    pub flops: u64,
    pub perf_ratio: Option<f64>,
}

impl BenchmarkReport {
    /// Builds a report around measured (or recorded) trial timings.
    pub fn from_trials(
        bundle: &WeightBundle,
        trainsets: &str,
        trials_ms: Vec<f64>,
        input: [usize; 3],
        threads: usize,
        backend: Backend,
    ) -> Result<Self, BenchError> {
        let (mean_ms, std_ms) = trial_stats(&trials_ms)?;
        let cfg = bundle.config();
        Ok(Self {
            model: cfg.name.clone(),
            trainsets: trainsets.to_string(),
            trials_ms,
            mean_ms,
            std_ms,
            input,
            threads,
            backend,
            params: cfg.count_params()?.trainable,
            flops: cfg.count_flops(input[1], input[2])?.total(),
            perf_ratio: None,
        })
    }

    pub fn with_precision(mut self, precision: f64) -> Result<Self, BenchError> {
        self.perf_ratio = Some(perf_ratio(precision, self.mean_ms)?);
        Ok(self)
    }

    /// Checks that the summary fields agree with the trials.
    pub fn validate(&self) -> Result<(), BenchError> {
        let (mean, std) = trial_stats(&self.trials_ms)?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
        let std_ok = match (std, self.std_ms) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        if !close(mean, self.mean_ms) || !std_ok {
            return Err(BenchError::Inconsistent(format!(
                "trials give {mean} ± {std:?}, report says {} ± {:?}",
                self.mean_ms, self.std_ms
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let r: Self = serde_json::from_str(text).map_err(|e| BenchError::Parse(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    /// `mean ± std ms` with one decimal each, or just `mean ms` for a single
    /// trial.
    pub fn summary(&self) -> String {
        match self.std_ms {
            Some(std) => format!("{:.1} ± {:.1} ms", self.mean_ms, std),
            None => format!("{:.1} ms", self.mean_ms),
        }
    }

    /// Header and separator lines for [`BenchmarkReport::markdown_row`] with
    /// `trials` trial columns.
    pub fn markdown_header(trials: usize) -> String {
        let mut cols = vec!["Classifier".to_string(), "Trainsets".to_string()];
        cols.extend((1..=trials).map(|i| format!("Trial {i}")));
        cols.push("Average".into());
        let sep = vec!["---"; cols.len()];
        format!("| {} |\n| {} |", cols.join(" | "), sep.join(" | "))
    }

    pub fn markdown_row(&self) -> String {
        let mut cols = vec![self.model.clone(), self.trainsets.clone()];
        cols.extend(self.trials_ms.iter().map(|t| format!("{t:.0} ms")));
        cols.push(self.summary());
        format!("| {} |", cols.join(" | "))
    }
}

/// Runs `f` once untimed, then `trials` timed times, returning milliseconds.
pub fn time_trials<E>(trials: usize, mut f: impl FnMut() -> Result<(), E>) -> Result<Vec<f64>, E> {
    f()?;
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        f()?;
        out.push(start.elapsed().as_secs_f64() * 1000.0);
    }
    Ok(out)
}

/// Times the forward pass of `bundle` on one `(3, H, W)` image after a
/// warm-up run, on the current rayon pool.
pub fn time_inference(
    bundle: &WeightBundle,
    input: &Tensor,
    trials: usize,
    mode: ExecMode,
) -> Result<BenchmarkReport, BenchError> {
    if trials == 0 {
        return Err(BenchError::NoTrials);
    }
    let (c, h, w) = input.chw().map_err(ModelError::from)?;
    let times = time_trials(trials, || logits_batch(bundle, input, mode).map(|_| ()))?;
    BenchmarkReport::from_trials(bundle, "", times, [c, h, w], rayon::current_num_threads(), Backend::Native)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_mela_d;

    /// Rows of published browser timings: trials and the printed summary.
    const PUBLISHED: [([f64; 3], &str); 6] = [
        ([682.0, 654.0, 621.0], "652.3 ± 30.5 ms"),
        ([9125.0, 6129.0, 7177.0], "7477.0 ± 1520.4 ms"),
        ([22204.0, 21987.0, 20683.0], "21624.7 ± 822.7 ms"),
        ([1791.0, 1438.0, 1663.0], "1630.7 ± 178.7 ms"),
        ([12065.0, 9328.0, 12017.0], "11136.7 ± 1566.5 ms"),
        ([7264.0, 7546.0, 7669.0], "7493.0 ± 207.6 ms"),
    ];

    fn report(trials: Vec<f64>) -> BenchmarkReport {
        let bundle = WeightBundle::zeros(default_mela_d(8)).unwrap();
        BenchmarkReport::from_trials(&bundle, "a+b", trials, [3, 150, 150], 4, Backend::Native).unwrap()
    }

    #[test]
    fn published_rows_use_sample_deviation() {
        for (trials, printed) in PUBLISHED {
            assert_eq!(report(trials.to_vec()).summary(), printed);
        }
    }

    #[test]
    fn single_trial_has_no_deviation() {
        let r = report(vec![412.25]);
        assert_eq!((r.mean_ms, r.std_ms), (412.25, None));
        assert_eq!(r.summary(), "412.2 ms");
        assert!(!r.markdown_row().contains('±'));
        assert!(matches!(trial_stats(&[]), Err(BenchError::NoTrials)));
    }

    #[test]
    fn ratio_examples() {
        assert!((perf_ratio(0.761, 1630.7).unwrap() - 0.46667).abs() < 1e-4);
        assert!((perf_ratio(0.888, 652.3).unwrap() - 1.3613).abs() < 1e-3);
        assert_eq!(perf_ratio(0.42, 1000.0).unwrap(), 0.42);
        assert!(matches!(perf_ratio(0.5, 0.0), Err(BenchError::NonPositiveRuntime(_))));
        assert!(matches!(perf_ratio(1.5, 10.0), Err(BenchError::PrecisionRange(_))));
    }

    #[test]
    fn json_round_trip_and_schema() {
        let r = report(vec![682.0, 654.0, 621.0]).with_precision(0.888).unwrap();
        let text = r.to_json();
        assert_eq!(BenchmarkReport::from_json(&text).unwrap(), r);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in [
            "model", "trainsets", "trials_ms", "mean_ms", "std_ms", "input", "threads", "backend", "params",
            "flops", "perf_ratio",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["backend"], "native");
        assert_eq!(v["input"], serde_json::json!([3, 150, 150]));
    }

    #[test]
    fn tampered_report_is_rejected() {
        let mut r = report(vec![1.0, 2.0, 3.0]);
        r.mean_ms = 5.0;
        assert!(matches!(BenchmarkReport::from_json(&r.to_json()), Err(BenchError::Inconsistent(_))));
    }

    #[test]
    fn markdown_layout() {
        let r = report(vec![682.0, 654.0, 621.0]);
        assert_eq!(r.markdown_row(), "| mela-d-c8 | a+b | 682 ms | 654 ms | 621 ms | 652.3 ± 30.5 ms |");
        assert!(BenchmarkReport::markdown_header(3).starts_with("| Classifier | Trainsets | Trial 1 |"));
    }

    #[test]
    fn timing_runs_warm_up_plus_trials() {
        let mut calls = 0;
        let t = time_trials(3, || {
            calls += 1;
            Ok::<_, ()>(())
        })
        .unwrap();
        assert_eq!((t.len(), calls), (3, 4));
        let bundle = WeightBundle::zeros(default_mela_d(4)).unwrap();
        let r = time_inference(&bundle, &Tensor::zeros(&[3, 20, 20]), 2, ExecMode::Deterministic).unwrap();
        assert_eq!(r.trials_ms.len(), 2);
        assert_eq!(r.input, [3, 20, 20]);
        r.validate().unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mean_within_range(trials in prop::collection::vec(0.1f64..1e5, 1..12)) {
                let (mean, std) = trial_stats(&trials).unwrap();
                let lo = trials.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = trials.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(mean >= lo - 1e-9 && mean <= hi + 1e-9);
                prop_assert!(std.unwrap_or(0.0) >= 0.0);
            }

            #[test]
            fn ratio_monotone(p in 0.01f64..0.99, t in 1.0f64..1e4, dt in 0.5f64..100.0, dp in 0.001f64..0.01) {
                prop_assert!(perf_ratio(p, t + dt).unwrap() < perf_ratio(p, t).unwrap());
                prop_assert!(perf_ratio(p + dp, t).unwrap() > perf_ratio(p, t).unwrap());
            }
        }
    }
}
