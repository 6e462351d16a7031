mod common;

use muse::harness::selftest::run_selftest;
use muse::harness::{
    ablation_run, causal_bench, decode_qkv, encode_qkv, error_sweep, generate, load_qkv, load_qkv_any, save_qkv,
    scaling_bench, QkvFile, ReportFormat, WorkloadSpec,
};
use muse::{attend, inertia, kmeans, muse_acausal, rel_sq_error, MuseConfig, MuseError, Rng};

#[test]
fn qkv_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = WorkloadSpec::isotropic(2, 3, 17, 5, 4);
    let wide = generate::<f64>(&spec).unwrap();
    let narrow = generate::<f32>(&spec).unwrap();
    let (p64, p32) = (dir.path().join("a.qkv"), dir.path().join("b.qkv"));
    save_qkv(&p64, &wide).unwrap();
    save_qkv(&p32, &narrow).unwrap();
    assert_eq!(load_qkv::<f64>(&p64).unwrap(), wide);
    assert_eq!(load_qkv::<f32>(&p32).unwrap(), narrow);
    assert!(matches!(load_qkv_any(&p32).unwrap(), QkvFile::F32(_)));
    assert_eq!(std::fs::metadata(&p64).unwrap().len() as usize, 32 + 3 * 2 * 3 * 17 * 5 * 8);

    let from_file = generate::<f64>(&WorkloadSpec::file(&p64)).unwrap();
    assert_eq!(from_file, wide);
}

#[test]
fn corrupted_files_are_rejected() {
    let spec = WorkloadSpec::isotropic(1, 1, 4, 2, 1);
    let bytes = encode_qkv(&generate::<f32>(&spec).unwrap()).unwrap();

    let err = decode_qkv(&bytes[..bytes.len() - 3]).unwrap_err();
    assert_eq!(
        err.to_string(),
        format!("truncated payload: expected {} bytes, found {}", bytes.len(), bytes.len() - 3)
    );

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(decode_qkv(&bad).unwrap_err().to_string(), "not a MUSEQKV file");

    let mut bad = bytes.clone();
    bad[8] = 2;
    assert!(matches!(decode_qkv(&bad), Err(MuseError::UnsupportedVersion(2))));

    let mut bad = bytes.clone();
    bad[12] = 7;
    assert!(matches!(decode_qkv(&bad), Err(MuseError::UnknownDtype(7))));

    let mut bad = bytes.clone();
    bad[32..36].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(decode_qkv(&bad), Err(MuseError::NonFinitePayload(0))));

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_qkv(&long), Err(MuseError::TrailingBytes { .. })));
}

#[test]
fn generation_is_deterministic() {
    for spec in [WorkloadSpec::isotropic(2, 2, 64, 8, 3), WorkloadSpec::mixture(256, 8, 4, 0.2, 3)] {
        let a = generate::<f64>(&spec).unwrap();
        let b = generate::<f64>(&spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate::<f64>(&spec.with_seed(4)).unwrap());
    }
}

#[test]
fn vanishing_spread_is_exact() {
    for seed in 0..3 {
        let spec = WorkloadSpec::mixture(512, 8, 8, 1e-30, seed);
        let data = generate::<f64>(&spec).unwrap();
        let cfg = MuseConfig::new(8).with_iters(3).with_seed(seed);
        let exact = attend(&data.q, &data.k, &data.v, None, cfg.scale_for(8)).unwrap();
        let err = rel_sq_error(&exact, &muse_acausal(&data.q, &data.k, &data.v, &cfg).unwrap()).unwrap();
        assert!(err <= 1e-8, "{err}");
    }
}

#[test]
fn kmeans_recovers_overlapping_mixture_inertia() {
    // spread equal to the centroid scale; see the notes in README on
    // well-separated components
    let spread = 1.0;
    let ratios: Vec<f64> = (0..5u64)
        .map(|s| {
            let spec = WorkloadSpec::mixture(1024, 16, 16, spread, 100 + s);
            let data = generate::<f64>(&spec).unwrap();
            let cl = kmeans(data.k.data(), 16, 16, 5, 1.5, &mut Rng::new(s)).unwrap();
            inertia(data.k.data(), &cl) / (1024.0 * 16.0 * spread * spread)
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / 5.0;
    assert!((mean - 1.0).abs() <= 0.1, "{ratios:?}");
}

#[test]
fn reports_are_reproducible() {
    let spec = WorkloadSpec::mixture(256, 8, 4, 0.2, 5);
    let grid = [MuseConfig::new(8), MuseConfig::new(16)];
    let a = error_sweep::<f64>(&spec, &grid, 2).unwrap();
    let b = error_sweep::<f64>(&spec, &grid, 2).unwrap();
    let strip = |r: &muse::harness::ExperimentReport| r.without_timing().to_json().unwrap();
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.rows.len(), 4);
    assert_eq!(a.aggregates.len(), 2);
    assert!(a.notes.iter().any(|n| n.contains("forward-only")));

    let csv = a.render(ReportFormat::Csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + a.rows.len());
    assert!(csv.lines().next().unwrap().starts_with("label,"));
    let parsed: serde_json::Value = serde_json::from_str(&a.to_json().unwrap()).unwrap();
    assert_eq!(parsed["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn ablation_report_has_verdicts() {
    let spec = WorkloadSpec::mixture(256, 8, 4, 0.15, 6);
    let r = ablation_run::<f64>(&spec, &MuseConfig::new(16), 3).unwrap();
    assert_eq!(r.rows.len(), 12);
    assert_eq!(r.verdicts.len(), 3);
    for v in &r.verdicts {
        assert_eq!(v.ordered, v.full < v.no_dipole && v.no_dipole < v.single_query_cluster && v.single_query_cluster < v.no_monopole);
    }
}

#[test]
fn scaling_bench_shape() {
    let spec = WorkloadSpec::isotropic(1, 2, 64, 8, 1);
    let r = scaling_bench::<f32>(&spec, &MuseConfig::new(8), &[64, 128, 256], 4096, 2).unwrap();
    assert_eq!(r.rows.len(), 6);
    assert_eq!(r.rows[0].batch, 32);
    assert_eq!(r.rows[5].batch, 8);
    assert!(r.rows.iter().all(|row| row.tokens_processed == 4096));
    assert!(scaling_bench::<f32>(&spec, &MuseConfig::new(8), &[96], 4096, 1).is_err());
}

#[test]
fn causal_bench_reports_degenerate_plans() {
    let spec = WorkloadSpec::isotropic(1, 1, 256, 8, 1);
    let r = causal_bench::<f64>(&spec, &MuseConfig::new(16), 256, 1).unwrap();
    assert!(r.notes.iter().any(|n| n == "exact path (no MuSe blocks)"));
    assert_eq!(r.rows[1].rel_sq_error, 0.0);
    let r = causal_bench::<f64>(&spec, &MuseConfig::new(16), 64, 1).unwrap();
    assert!(!r.notes.iter().any(|n| n.contains("no MuSe")));
    assert_eq!(r.rows[1].tokens_processed, 128 * 2);
}

#[test]
fn selftest_passes_in_both_precisions() {
    for check in run_selftest::<f64>(1).unwrap().into_iter().chain(run_selftest::<f32>(1).unwrap()) {
        assert!(check.passed, "{}: {}", check.name, check.detail);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(generate::<f64>(&WorkloadSpec::mixture(8, 4, 9, 0.1, 0)).is_err());
    assert!(generate::<f64>(&WorkloadSpec::mixture(8, 4, 2, 0.0, 0)).is_err());
    assert!(generate::<f64>(&WorkloadSpec::isotropic(0, 1, 8, 4, 0)).is_err());
    assert!(error_sweep::<f64>(&WorkloadSpec::isotropic(1, 1, 8, 4, 0), &[], 1).is_err());
}
