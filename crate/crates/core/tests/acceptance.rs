//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Runs as a plain binary (`harness = false`) so the lines always show.

mod common;

use std::time::Instant;

use common::checks::{conv_oracle_max_error, gradient_checks, FD_STEP};
use common::{random_tensor, rng};
use melad::bench::{time_inference, trial_stats};
use melad::model::{
    decode_weights, encode_weights, forward_with, measure_receptive_field, preset, BundleError,
    WeightBundle, PRESETS,
};
use melad::train::{init_weights, synthetic_dataset, train_with, AugmentPolicy, TrainConfig, TrainOutcome};
use melad::{ExecMode, Tensor};
use serde_json::Value;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")
}

/// A random 150×150 image with values in `[0, 1)`.
fn image_like(seed: u64) -> Tensor {
    let mut t = random_tensor(&mut rng(seed), &[3, 150, 150]);
    t.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.5 * *v);
    t
}

fn cores() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn conv_oracle() -> Outcome {
    let start = Instant::now();
    let err = conv_oracle_max_error(2024, 200);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        err <= 1e-5 && secs < 10.0,
        format!("200 cases, max abs error {err:.2e} (limit 1e-5), {secs:.2} s (limit 10 s)"),
    )
}

fn gradients() -> Outcome {
    let checks = gradient_checks(11);
    let (name, worst) = checks
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .expect("checks");
    let failed: Vec<&str> = checks.iter().filter(|c| c.1 > 1e-4).map(|c| c.0.as_str()).collect();
    outcome(
        failed.is_empty(),
        format!(
            "{} checks at step {FD_STEP:e}, worst relative error {worst:.2e} ({name}), limit 1e-4{}",
            checks.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failed.join("; "))
            }
        ),
    )
}

/// Trainable and total parameters summed straight from the config JSON: a
/// conv holds `k²·in·out` weights plus `out` biases, and a batch norm holds
/// two trainable and two running vectors sized by the conv before it.
fn summed_from_json(text: &str) -> (u64, u64) {
    let v: Value = serde_json::from_str(text).expect("config JSON");
    let (mut trainable, mut running, mut last_out) = (0u64, 0u64, 0u64);
    for layer in v["layers"].as_array().expect("layers") {
        let n = |key: &str| layer[key].as_u64().expect(key);
        match layer["kind"].as_str().expect("kind") {
            "conv" => {
                let out = n("out_ch");
                trainable += n("kernel_size").pow(2) * n("in_ch") * out;
                if layer["bias"].as_bool().expect("bias") {
                    trainable += out;
                }
                last_out = out;
            }
            "batchnorm" => {
                trainable += 2 * last_out;
                running += 2 * last_out;
            }
            _ => {}
        }
    }
    (trainable, trainable + running)
}

fn params() -> Outcome {
    let mela = preset("mela-d").unwrap().count_params().unwrap();
    let resnet = preset("resnet50-reference").unwrap().count_params().unwrap();
    let (oracle_mela, _) = summed_from_json(include_str!("../assets/mela-d.json"));
    let (_, oracle_resnet) = summed_from_json(include_str!("../assets/resnet50-reference.json"));
    let ratio = resnet.total() as f64 / mela.trainable as f64;
    outcome(
        mela.trainable == 891_138
            && oracle_mela == 891_138
            && resnet.total() == 25_636_712
            && oracle_resnet == 25_636_712
            && ratio >= 24.0,
        format!(
            "mela-d trainable {} (summed {oracle_mela}), reference total {} (summed {oracle_resnet}), ratio {ratio:.2} (limit 24.0)",
            mela.trainable,
            resnet.total()
        ),
    )
}

fn table_statistics() -> Outcome {
    const ROWS: [([f64; 3], f64, f64); 6] = [
        ([682.0, 654.0, 621.0], 652.3, 30.5),
        ([9125.0, 6129.0, 7177.0], 7477.0, 1520.4),
        ([22204.0, 21987.0, 20683.0], 21624.7, 822.7),
        ([1791.0, 1438.0, 1663.0], 1630.7, 178.7),
        ([12065.0, 9328.0, 12017.0], 11136.7, 1566.5),
        ([7264.0, 7546.0, 7669.0], 7493.0, 207.6),
    ];
    let mut matched = 0;
    let mut shown = Vec::new();
    for (trials, mean, std) in ROWS {
        let (m, s) = trial_stats(&trials).unwrap();
        let s = s.unwrap();
        if format!("{m:.1}") == format!("{mean:.1}") && format!("{s:.1}") == format!("{std:.1}") {
            matched += 1;
        }
        shown.push(format!("{m:.1} ± {s:.1}"));
    }
    outcome(matched == ROWS.len(), format!("{matched}/6 rows match: {}", shown.join(", ")))
}

fn receptive_field() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for name in PRESETS {
        let cfg = preset(name).unwrap();
        if cfg.validate_executable().is_err() {
            parts.push(format!("{name} count-only, skipped"));
            continue;
        }
        let (closed, measured) = (cfg.receptive_field(), measure_receptive_field(&cfg).unwrap());
        pass &= closed == measured;
        parts.push(format!("{name} closed form {closed}, impulse {measured}"));
    }
    pass &= preset("mela-d").unwrap().receptive_field() == 37;
    outcome(pass, parts.join("; "))
}

fn same_run(a: &TrainOutcome, b: &TrainOutcome) -> bool {
    a.history == b.history && encode_weights(&a.bundle) == encode_weights(&b.bundle)
}

fn synthetic_learning() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let manifest = synthetic_dataset(7, 500, 64, dir.path()).unwrap();
    let gen_secs = start.elapsed().as_secs_f64();
    let arch = preset("mela-d-lite").unwrap();
    let cfg = TrainConfig {
        seed: 7,
        input_size: Some(64),
        ..TrainConfig::default()
    };
    let threads = rayon::current_num_threads();
    let start = Instant::now();
    let mut reached: Option<(usize, f64)> = None;
    let first = train_with(&arch, &manifest, &cfg, ExecMode::Deterministic, &mut |e| {
        println!("    epoch {:2}: loss {:.4}, accuracy {:.4}", e.epoch, e.loss, e.accuracy);
        if reached.is_none() && e.accuracy >= 0.95 {
            reached = Some((e.epoch, start.elapsed().as_secs_f64()));
        }
    })
    .unwrap();
    let full_secs = start.elapsed().as_secs_f64();
    let rerun_threads = threads + 1;
    let second = pool(rerun_threads)
        .install(|| train_with(&arch, &manifest, &cfg, ExecMode::Deterministic, &mut |_| {}))
        .unwrap();
    let identical = same_run(&first, &second);
    let final_acc = first.history.last().unwrap().accuracy;
    let (timing, in_budget) = match reached {
        Some((epoch, secs)) => (format!("95% at epoch {epoch} after {secs:.0} s"), secs < 600.0),
        None => ("95% not reached".to_string(), false),
    };
    outcome(
        reached.is_some() && in_budget && identical,
        format!(
            "lr={} batch={} epochs={}; {timing} (limit 600 s); final accuracy {final_acc:.4}; \
             full run {full_secs:.0} s on {threads} thread(s), {} core(s); data generation {gen_secs:.1} s; \
             rerun on {rerun_threads} threads {}",
            cfg.learning_rate,
            cfg.batch_size,
            cfg.epochs,
            cores(),
            if identical { "bit-identical" } else { "DIFFERS" }
        ),
    )
}

fn latency() -> Outcome {
    let input = image_like(3);
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, limit_ms) in [("mela-d-lite", 300.0), ("mela-d", 3000.0)] {
        let bundle = init_weights(&preset(name).unwrap(), 1).unwrap();
        let report = pool(8).install(|| time_inference(&bundle, &input, 5, ExecMode::Fast)).unwrap();
        pass &= report.mean_ms <= limit_ms;
        parts.push(format!(
            "{name} {} (limit {limit_ms:.0} ms, backend {}, {} threads)",
            report.summary(),
            report.backend,
            report.threads
        ));
    }
    parts.push(format!("{} core(s) available", cores()));
    outcome(pass, parts.join("; "))
}

fn determinism() -> Outcome {
    let bundle = init_weights(&preset("mela-d-lite").unwrap(), 5).unwrap();
    let image = image_like(8);
    let predict = |threads| {
        pool(threads).install(|| forward_with(&bundle, &image, ExecMode::Deterministic).unwrap())
    };
    let reference = predict(1);
    let predictions_match = [1, 2, 4, 7].iter().all(|&t| predict(t) == reference);

    let dir = tempfile::tempdir().unwrap();
    let manifest = synthetic_dataset(21, 24, 32, dir.path()).unwrap();
    let cfg = TrainConfig {
        seed: 3,
        epochs: 2,
        batch_size: 8,
        input_size: Some(32),
        augment_policy: AugmentPolicy::All,
        ..TrainConfig::default()
    };
    let arch = preset("mela-d-lite").unwrap();
    let train = |threads| {
        pool(threads)
            .install(|| train_with(&arch, &manifest, &cfg, ExecMode::Deterministic, &mut |_| {}))
            .unwrap()
    };
    let base = train(1);
    let training_matches = [1, 3, 4].iter().all(|&t| same_run(&train(t), &base));
    let weight_file = dir.path().join("w.meld");
    melad::model::save_weights(&base.bundle, &weight_file).unwrap();
    let file_matches = std::fs::read(&weight_file).unwrap() == encode_weights(&train(2).bundle);
    outcome(
        predictions_match && training_matches && file_matches,
        format!(
            "prediction over 1/2/4/7 threads {}; history and weights over 1/3/4 threads {}; weight file {}",
            if predictions_match { "identical" } else { "DIFFERS" },
            if training_matches { "identical" } else { "DIFFER" },
            if file_matches { "identical" } else { "DIFFERS" }
        ),
    )
}

fn format_robustness() -> Outcome {
    let bundle: WeightBundle = init_weights(&preset("mela-d-lite").unwrap(), 9).unwrap();
    let bytes = encode_weights(&bundle);
    let back = decode_weights(&bytes).unwrap();
    let round_trip = back == bundle && encode_weights(&back) == bytes;

    let mut bad_magic = bytes.clone();
    bad_magic[1] ^= 0xff;
    let mut bad_sum = bytes.clone();
    let mid = bytes.len() / 2;
    bad_sum[mid] ^= 0x01;
    let truncated = &bytes[..bytes.len() - 7];
    let errors = [
        decode_weights(&bad_magic).err(),
        decode_weights(&bad_sum).err(),
        decode_weights(truncated).err(),
    ];
    let distinct = matches!(errors[0], Some(BundleError::BadMagic))
        && matches!(errors[1], Some(BundleError::ChecksumMismatch { .. }))
        && matches!(errors[2], Some(BundleError::Truncated { .. }));
    let shown: Vec<String> = errors
        .iter()
        .map(|e| e.as_ref().map_or("accepted".into(), |e| e.to_string()))
        .collect();
    outcome(
        round_trip && distinct,
        format!(
            "round trip {}; {}",
            if round_trip { "identical" } else { "DIFFERS" },
            shown.join(" / ")
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("dilated conv matches direct summation", conv_oracle),
        ("backward passes match central differences", gradients),
        ("parameter counts and ratio", params),
        ("published timing statistics", table_statistics),
        ("receptive field", receptive_field),
        ("synthetic learning", synthetic_learning),
        ("native latency at 150x150", latency),
        ("determinism across runs and thread counts", determinism),
        ("weight file robustness", format_robustness),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        failures += usize::from(!result.pass);
        println!(
            "criterion {} {}: {} ({:.1} s) {}",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            name,
            start.elapsed().as_secs_f64(),
            result.detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
