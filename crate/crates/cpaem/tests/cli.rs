//! End-to-end tests of the `cpaem` binary: every subcommand, the sidecar
//! replay loop, and the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn cpaem(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpaem"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();

    // gen-net is deterministic in the seed and reload round-trips.
    let out = cpaem(dir, &["gen-net", "1-6-2 relu", "--out", "m.json", "--seed", "7"]);
    assert_ok(&out, "gen-net");
    assert!(dir.join("m.json").exists());
    assert!(dir.join("m.run.json").exists(), "sidecar written");
    let first = std::fs::read_to_string(dir.join("m.json")).unwrap();
    assert_ok(&cpaem(dir, &["gen-net", "1-6-2 relu", "--out", "m2.json", "--seed", "7"]), "gen-net again");
    assert_eq!(
        first,
        std::fs::read_to_string(dir.join("m2.json")).unwrap(),
        "same seed, same file"
    );

    // Bad specs are usage errors: exit 1.
    let out = cpaem(dir, &["gen-net", "1-x-2 relu", "--out", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));

    // gen-data circle: 100×2 rows.
    let out = cpaem(dir, &["gen-data", "circle", "--n", "100", "--out", "circle.csv", "--seed", "3"]);
    assert_ok(&out, "gen-data circle");
    let text = std::fs::read_to_string(dir.join("circle.csv")).unwrap();
    assert_eq!(text.lines().count(), 100);
    assert!(text.lines().all(|l| l.split(',').count() == 2));

    // n = 0 is a usage error.
    let out = cpaem(dir, &["gen-data", "circle", "--n", "0", "--out", "never.csv"]);
    assert_eq!(out.status.code(), Some(1));

    // from-model without --model is a usage error.
    let out = cpaem(dir, &["gen-data", "from-model", "--n", "5", "--out", "never.csv"]);
    assert_eq!(out.status.code(), Some(1));

    // gen-data from-model works with a model file.
    let out = cpaem(dir, &["gen-data", "from-model", "--n", "20", "--model", "m.json", "--out", "model_data.csv", "--seed", "5"]);
    assert_ok(&out, "gen-data from-model");

    // partition: valid JSON array covering the expected structure.
    let out = cpaem(dir, &["partition", "--model", "m.json", "--out", "regions.json"]);
    assert_ok(&out, "partition");
    let regions: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("regions.json")).unwrap()).unwrap();
    let regions = regions.as_array().unwrap();
    assert!(!regions.is_empty());
    for r in regions {
        assert!(r["code"].is_array());
        assert!(r["vertices"].is_array());
        assert!(r["affine"]["a"].is_array());
        assert!(r["affine"]["b"].is_array());
        assert!(r["clipped"].is_boolean());
    }

    // marginal over model-plausible data: one log p(x) per row, all finite.
    let out = cpaem(dir, &["marginal", "--model", "m.json", "--data", "model_data.csv", "--out", "logp.csv"]);
    assert_ok(&out, "marginal");
    let logp = std::fs::read_to_string(dir.join("logp.csv")).unwrap();
    assert_eq!(logp.lines().count(), 20);
    assert!(logp
        .lines()
        .all(|l| l.parse::<f64>().map(f64::is_finite).unwrap_or(false)));
    let tail_note = String::from_utf8_lossy(&out.stderr);
    assert!(
        tail_note.contains("tail mass"),
        "truncation bound is reported: {tail_note}"
    );

    // marginal on a grid.
    let out = cpaem(dir, &["marginal", "--model", "m.json", "--grid", "-2,2,11", "--out", "grid.csv"]);
    assert_ok(&out, "marginal grid");
    assert_eq!(
        std::fs::read_to_string(dir.join("grid.csv")).unwrap().lines().count(),
        121,
        "11×11 grid for D = 2"
    );

    // posterior report + latent grid.
    let out = cpaem(dir, &["posterior", "--model", "m.json", "--x", "0.4,-0.3", "--grid-out", "dens.csv", "--grid-n", "101"]);
    assert_ok(&out, "posterior");
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(report.contains("log_marginal"));
    assert!(report.contains("map_latent"));
    let masses: f64 = report
        .lines()
        .filter(|l| l.starts_with(['+', '-']))
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((masses - 1.0).abs() < 1e-9, "region masses sum to {masses}");
    assert_eq!(
        std::fs::read_to_string(dir.join("dens.csv")).unwrap().lines().count(),
        101
    );

    // train-em: monotone trace, fitted model loads.
    let out = cpaem(dir, &[
        "train-em", "--model", "m.json", "--data", "circle.csv", "--out", "fitted.json",
        "--trace", "nll.csv", "--iters", "3",
    ]);
    assert_ok(&out, "train-em");
    let trace = std::fs::read_to_string(dir.join("nll.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next().unwrap(), "iteration,nll,card_omega,wall_ms");
    let nlls: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(nlls.len() >= 2);
    assert!(nlls.windows(2).all(|w| w[1] <= w[0] + 1e-8), "{nlls:?}");

    // Replaying the train-em sidecar reproduces the NLL trace exactly.
    let nll_first = trace.clone();
    let out = cpaem(dir, &["replay", "fitted.run.json"]);
    assert_ok(&out, "replay");
    let nll_again = std::fs::read_to_string(dir.join("nll.csv")).unwrap();
    let col = |t: &str| -> Vec<String> {
        t.lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().to_string())
            .collect()
    };
    assert_eq!(col(&nll_first), col(&nll_again), "NLL column is bit-stable");

    // oracle-check passes on all four quantities (small n keeps it quick).
    for what in ["marginal", "posterior", "moments"] {
        let out = cpaem(dir, &[
            "oracle-check", "--model", "m.json", "--x", "0.4,-0.3", "--what", what,
            "--n", "200000", "--seed", "11",
        ]);
        assert_ok(&out, &format!("oracle-check {what}"));
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("overall PASS"), "{what}: {text}");
    }
    let out = cpaem(dir, &[
        "oracle-check", "--model", "m.json", "--what", "mass", "--n", "200000", "--seed", "11",
    ]);
    assert_ok(&out, "oracle-check mass");

    // oracle-check estimates are bit-identical across reruns.
    let run = || {
        let out = cpaem(dir, &[
            "oracle-check", "--model", "m.json", "--x", "0.4,-0.3", "--what", "marginal",
            "--n", "100000", "--seed", "13",
        ]);
        assert_ok(&out, "oracle-check rerun");
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    assert_eq!(run(), run(), "oracle output is deterministic");

    // Missing input file: usage error.
    let out = cpaem(dir, &["partition", "--model", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));

    // Unknown flags: usage error.
    let out = cpaem(dir, &["partition", "--model", "m.json", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));

    // Region cap: resource error (exit 3).
    let out = cpaem(dir, &["partition", "--model", "m.json", "--max-regions", "1"]);
    assert_eq!(out.status.code(), Some(3));

    // --help exits 0.
    let out = cpaem(dir, &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}
