use std::path::Path;

use pivot_lab::data::SplitCounts;
use pivot_lab::eval::EvalReport;
use pivot_lab::pipeline::Method;
use pivot_lab_cli::sweep::aggregate;
use pivot_lab_cli::{report_diff, run, sweep, EvalConfig, GridConfig, RunConfig};

/// Smaller than the smoke preset so that a dozen cells stay cheap.
fn micro() -> RunConfig {
    let mut cfg = RunConfig::smoke();
    cfg.data.counts = SplitCounts {
        stage1_align: 64,
        stage1_pretrain: 96,
        stage2_pt: 64,
        eval: 40,
        probe: 40,
    };
    cfg.align.as_mut().unwrap().steps = Some(10);
    cfg.pretrain.as_mut().unwrap().steps = Some(20);
    cfg.posttrain.as_mut().unwrap().steps = Some(10);
    cfg.eval = EvalConfig {
        max_new_tokens: 8,
        segmentation: None,
        alignment: None,
        attribution: None,
        ..Default::default()
    };
    cfg
}

fn report(seed: u64, values: &[(&str, &str, f64)]) -> EvalReport {
    let mut r = EvalReport::new(seed, "h");
    for &(name, domain, value) in values {
        r.push(name, domain, value);
    }
    r
}

#[test]
fn unknown_config_field_is_rejected_by_name() {
    let mut v = serde_json::to_value(RunConfig::smoke()).unwrap();
    v["eval"]["max_new_tokenz"] = 3.into();
    let err = RunConfig::from_json(&v.to_string())
        .unwrap_err()
        .to_string();
    assert!(err.contains("max_new_tokenz"), "{err}");

    let mut v = serde_json::to_value(RunConfig::smoke()).unwrap();
    v["model"]["lm"]["dim"] = 7.into();
    assert!(RunConfig::from_json(&v.to_string()).is_err());

    let round = RunConfig::from_json(&serde_json::to_string(&RunConfig::smoke()).unwrap()).unwrap();
    assert_eq!(round, RunConfig::smoke());
}

#[test]
fn config_hash_ignores_seed_and_workers_only() {
    let a = micro();
    let mut b = a.clone();
    b.seed = 9;
    b.workers = 3;
    assert_eq!(a.config_hash(), b.config_hash());
    b.posttrain.as_mut().unwrap().lr = Some(2e-4);
    assert_ne!(a.config_hash(), b.config_hash());
}

#[test]
fn rerun_reproduces_metrics_csv_and_logs_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = micro();
    let a = run(&cfg, &tmp.path().join("a")).unwrap();
    let b = run(&cfg, &tmp.path().join("b")).unwrap();
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&a.dir), read(&b.dir));
    assert!(a.dir.join("checkpoint").is_dir());
    assert!(!tmp
        .path()
        .join("a")
        .join(".partial")
        .join(a.dir.file_name().unwrap())
        .exists());

    let log: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.dir.join("run_log.json")).unwrap()).unwrap();
    let resolved: RunConfig = serde_json::from_value(log["resolved_config"].clone()).unwrap();
    assert_eq!(resolved, cfg.resolved());
    assert_eq!(log["config_hash"], cfg.config_hash());
}

#[test]
fn failed_run_is_quarantined() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, ()) = pivot_lab_cli::engine::with_staging(tmp.path(), "ok", |d| {
        std::fs::write(d.join("x"), "1")?;
        Ok(())
    })
    .unwrap();
    assert_eq!(dir, tmp.path().join("ok"));
    assert!(dir.join("x").exists());

    let err = pivot_lab_cli::engine::with_staging(tmp.path(), "bad", |d| -> anyhow::Result<()> {
        std::fs::write(d.join("partial"), "1")?;
        anyhow::bail!("boom")
    })
    .unwrap_err();
    assert!(format!("{err:#}").contains("boom"));
    assert!(tmp
        .path()
        .join("quarantine")
        .join("bad")
        .join("partial")
        .exists());
    assert!(!tmp.path().join("bad").exists());
    assert!(!tmp.path().join(".partial").join("bad").exists());
}

#[test]
fn diff_of_self_is_zero_and_antisymmetric() {
    let a = vec![
        report(
            0,
            &[("vqa_accuracy", "all", 0.5), ("linear_probe", "all", 0.7)],
        ),
        report(
            1,
            &[("vqa_accuracy", "all", 0.3), ("linear_probe", "all", 0.9)],
        ),
    ];
    let b = vec![
        report(
            1,
            &[("vqa_accuracy", "all", 0.6), ("linear_probe", "all", 0.8)],
        ),
        report(
            2,
            &[("vqa_accuracy", "all", 0.1), ("linear_probe", "all", 0.1)],
        ),
        report(
            0,
            &[("vqa_accuracy", "all", 0.7), ("linear_probe", "all", 0.7)],
        ),
    ];
    for d in report_diff(&a, &a).unwrap() {
        assert_eq!(d.delta, 0.0);
        assert_eq!(d.paired_seeds, 2);
    }
    let ab = report_diff(&a, &b).unwrap();
    let ba = report_diff(&b, &a).unwrap();
    for (x, y) in ab.iter().zip(&ba) {
        assert_eq!(x.delta, -y.delta);
    }
    // Seeds 0 and 1 pair up; seed 2 has no partner.
    let get = |name: &str| ab.iter().find(|d| d.name == name).unwrap();
    assert!((get("vqa_accuracy").delta - 0.25).abs() < 1e-12);
    assert!((get("linear_probe").delta - (-0.05)).abs() < 1e-12);
    assert_eq!(get("vqa_accuracy").paired_seeds, 2);
}

#[test]
fn diff_rejects_mismatched_schemas() {
    let a = vec![report(0, &[("vqa_accuracy", "all", 0.5)])];
    let b = vec![report(0, &[("linear_probe", "all", 0.5)])];
    assert!(report_diff(&a, &b).is_err());
    let c = vec![report(5, &[("vqa_accuracy", "all", 0.5)])];
    assert!(report_diff(&a, &c).is_err());
    let dup = vec![
        report(0, &[("vqa_accuracy", "all", 0.5)]),
        report(0, &[("vqa_accuracy", "all", 0.4)]),
    ];
    assert!(report_diff(&dup, &a).is_err());
}

fn grid(order_seed: Option<u64>, workers: usize) -> GridConfig {
    GridConfig {
        base: micro(),
        methods: vec![Method::Sft, Method::Dpo],
        encoder_presets: Vec::new(),
        lm_presets: Vec::new(),
        posttrain_counts: vec![32, 64],
        shift_ratios: Vec::new(),
        seeds: vec![0, 1, 2],
        method_overrides: Default::default(),
        workers,
        order_seed,
    }
}

#[test]
fn sweep_aggregates_every_cell_and_ignores_order() {
    let tmp = tempfile::tempdir().unwrap();
    let g = grid(None, 2);
    assert_eq!(g.cells().len(), 12);
    let a = sweep(&g, &tmp.path().join("a")).unwrap();
    assert!(a.warnings.is_empty(), "{:?}", a.warnings);
    assert_eq!(a.reports.len(), 12);

    let metrics: std::collections::BTreeSet<_> = a
        .rows
        .iter()
        .map(|r| (r.metric.clone(), r.domain.clone()))
        .collect();
    for (m, d) in &metrics {
        let rows: Vec<_> = a
            .rows
            .iter()
            .filter(|r| &r.metric == m && &r.domain == d)
            .collect();
        assert_eq!(rows.iter().filter(|r| r.kind == "raw").count(), 12);
        let means: Vec<_> = rows.iter().filter(|r| r.kind == "mean").collect();
        assert_eq!(means.len(), 4);
        for mean in means {
            let raw: Vec<f64> = rows
                .iter()
                .filter(|r| {
                    r.kind == "raw"
                        && r.method == mean.method
                        && r.posttrain_count == mean.posttrain_count
                })
                .map(|r| r.value)
                .collect();
            assert_eq!(mean.n, 3);
            let mu = raw.iter().sum::<f64>() / 3.0;
            let sd = (raw.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 2.0).sqrt();
            assert!((mean.value - mu).abs() < 1e-12);
            assert!((mean.sd - sd).abs() < 1e-12);
        }
    }

    let b = sweep(&grid(Some(99), 1), &tmp.path().join("b")).unwrap();
    assert_eq!(
        std::fs::read(&a.csv).unwrap(),
        std::fs::read(&b.csv).unwrap()
    );

    // Aggregation alone is order-independent too.
    let mut shuffled = a.reports.clone();
    shuffled.reverse();
    assert_eq!(aggregate(&shuffled), aggregate(&a.reports));

    assert!(!a.plots.is_empty());
    for p in &a.plots {
        let svg = std::fs::read_to_string(p).unwrap();
        assert!(
            svg.starts_with("<svg") || svg.starts_with("<?xml"),
            "{}",
            p.display()
        );
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<svg").count(), 1);
        assert_eq!(svg.matches('<').count(), svg.matches('>').count());
    }
}

#[test]
fn sweep_warns_on_failed_cell_and_keeps_going() {
    let tmp = tempfile::tempdir().unwrap();
    let mut g = grid(None, 1);
    g.posttrain_counts = vec![32];
    g.seeds = vec![0];
    // A huge learning rate overflows the DPO cell's weights on the first update.
    g.method_overrides.insert(
        Method::Dpo,
        pivot_lab_cli::sweep::MethodOverride {
            lr: Some(1e300),
            ..Default::default()
        },
    );
    let out = sweep(&g, tmp.path()).unwrap();
    assert_eq!(out.reports.len(), 1);
    assert_eq!(out.reports[0].0.method, Method::Sft);
    assert!(
        out.warnings.iter().any(|w| w.contains("dpo")),
        "{:?}",
        out.warnings
    );
    assert!(tmp.path().join("cells").join("quarantine").is_dir());
}
