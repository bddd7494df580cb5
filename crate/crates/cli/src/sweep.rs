use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use pivot_lab::data::{build_dataset, Dataset};
use pivot_lab::eval::EvalReport;
use pivot_lab::model::{EncoderConfig, LmConfig};
use pivot_lab::pipeline::{load_checkpoint, save_checkpoint, Method, TrainLog};

use crate::config::RunConfig;
use crate::engine::{run_stage1, run_with, Stage1Output};
use crate::plot::{line_chart, Series};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodOverride {
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub beta: Option<f64>,
}

/// A grid over post-training method and scale axes. Empty axes keep the base value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub base: RunConfig,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub encoder_presets: Vec<String>,
    #[serde(default)]
    pub lm_presets: Vec<String>,
    #[serde(default)]
    pub posttrain_counts: Vec<usize>,
    #[serde(default)]
    pub shift_ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub method_overrides: BTreeMap<Method, MethodOverride>,
    /// Cells running at once.
    #[serde(default = "one")]
    pub workers: usize,
    /// Shuffles execution order; results do not depend on it.
    #[serde(default)]
    pub order_seed: Option<u64>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub encoder: Option<String>,
    pub lm: Option<String>,
    pub posttrain_count: Option<usize>,
    pub shift_ratio: Option<f64>,
    pub seed: u64,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref()
        .map_or_else(|| "base".to_string(), ToString::to_string)
}

impl Cell {
    /// Every axis value except the seed, as strings.
    fn group(&self) -> [String; 5] {
        [
            self.method.name().to_string(),
            opt(&self.encoder),
            opt(&self.lm),
            opt(&self.posttrain_count),
            opt(&self.shift_ratio),
        ]
    }
}

fn options<T: Clone>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().cloned().map(Some).collect()
    }
}

impl GridConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let grid: Self =
            serde_json::from_str(text).map_err(|e| anyhow::anyhow!("invalid grid config: {e}"))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.base.validate()?;
        if self.base.posttrain.is_none() {
            anyhow::bail!("base.posttrain is required for a method sweep");
        }
        if self.methods.is_empty() || self.seeds.is_empty() {
            anyhow::bail!("methods and seeds must be non-empty");
        }
        if BTreeSet::from_iter(&self.seeds).len() != self.seeds.len() {
            anyhow::bail!("seeds must be distinct");
        }
        for p in &self.encoder_presets {
            EncoderConfig::preset_depth(p)?;
        }
        for p in &self.lm_presets {
            LmConfig::preset_depth(p)?;
        }
        if self.workers == 0 {
            anyhow::bail!("workers must be at least 1");
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for encoder in options(&self.encoder_presets) {
                for lm in options(&self.lm_presets) {
                    for posttrain_count in options(&self.posttrain_counts) {
                        for shift_ratio in options(&self.shift_ratios) {
                            for &seed in &self.seeds {
                                out.push(Cell {
                                    method,
                                    encoder: encoder.clone(),
                                    lm: lm.clone(),
                                    posttrain_count,
                                    shift_ratio,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn cell_config(&self, cell: &Cell) -> anyhow::Result<RunConfig> {
        let mut cfg = self.base.clone();
        cfg.seed = cell.seed;
        cfg.workers = 1;
        if let Some(p) = &cell.encoder {
            let depth = EncoderConfig::preset_depth(p)?;
            cfg.model.encoders.iter_mut().for_each(|e| e.depth = depth);
        }
        if let Some(p) = &cell.lm {
            cfg.model.lm.depth = LmConfig::preset_depth(p)?;
        }
        if let Some(n) = cell.posttrain_count {
            cfg.data.counts.stage2_pt = n;
        }
        if let Some(r) = cell.shift_ratio {
            cfg.data.shift_ratio = r;
        }
        let pt = cfg
            .posttrain
            .as_mut()
            .context("base.posttrain is required")?;
        pt.method = Some(cell.method);
        if let Some(o) = self.method_overrides.get(&cell.method) {
            pt.lr = o.lr.or(pt.lr);
            pt.steps = o.steps.or(pt.steps);
            if let Some(b) = o.beta {
                pt.beta = b;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the aggregate table: a single run (`seed` set) or the
/// mean and sample deviation over a cell's seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub kind: String,
    pub method: String,
    pub encoder: String,
    pub lm: String,
    pub posttrain_count: String,
    pub shift_ratio: String,
    pub seed: String,
    pub metric: String,
    pub domain: String,
    pub value: f64,
    pub sd: f64,
    pub n: usize,
}

pub struct SweepOutcome {
    pub reports: Vec<(Cell, EvalReport)>,
    pub rows: Vec<AggregateRow>,
    pub csv: PathBuf,
    pub plots: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Runs `jobs` on up to `workers` threads; each result lands in its job's slot.
fn parallel<T: Sync, R: Send>(jobs: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let r = f(job);
                slots.lock().expect("slot lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn stage1_cached(cfg: &RunConfig, ds: &Dataset, root: &Path) -> anyhow::Result<Stage1Output> {
    let dir = root
        .join("stage1")
        .join(format!("{}-s{}", cfg.stage1_hash(), cfg.seed));
    let logs_path = dir.join("logs.json");
    if logs_path.exists() {
        if let Ok(checkpoint) = load_checkpoint(&dir.join("checkpoint")) {
            let logs: Vec<TrainLog> = serde_json::from_slice(&std::fs::read(&logs_path)?)?;
            return Ok(Stage1Output { checkpoint, logs });
        }
    }
    let out = run_stage1(&cfg.resolved(), ds)?;
    save_checkpoint(&dir.join("checkpoint"), &out.checkpoint)?;
    std::fs::write(&logs_path, serde_json::to_vec(&out.logs)?)?;
    Ok(out)
}

/// Runs every cell, sharing Stage 1 between cells that differ only in
/// post-training axes, then writes `aggregate.csv` and one SVG per metric.
pub fn sweep(grid: &GridConfig, root: &Path) -> anyhow::Result<SweepOutcome> {
    grid.validate()?;
    let mut cells = grid.cells();
    let configs: Vec<RunConfig> = cells
        .iter()
        .map(|c| grid.cell_config(c))
        .collect::<anyhow::Result<_>>()?;
    let mut order: Vec<usize> = (0..cells.len()).collect();
    if let Some(s) = grid.order_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }

    // One Stage-1 run per distinct (stage-1 configuration, seed).
    let mut keys: Vec<(String, u64, usize)> = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        let key = (cfg.stage1_hash(), cfg.seed);
        if !keys
            .iter()
            .any(|k| (k.0.as_str(), k.1) == (key.0.as_str(), key.1))
        {
            keys.push((key.0, key.1, i));
        }
    }
    let stage1: Vec<anyhow::Result<Stage1Output>> = parallel(&keys, grid.workers, |(_, _, i)| {
        let cfg = &configs[*i];
        let ds = build_dataset(&cfg.data, 1)?;
        stage1_cached(cfg, &ds, root)
    });
    let stage1_of = |cfg: &RunConfig| {
        let pos = keys
            .iter()
            .position(|k| k.0 == cfg.stage1_hash() && k.1 == cfg.seed)
            .expect("key registered");
        &stage1[pos]
    };

    let cells_root = root.join("cells");
    let results: Vec<anyhow::Result<EvalReport>> = {
        let ordered: Vec<usize> = order.clone();
        let out = parallel(&ordered, grid.workers, |&i| {
            let cfg = &configs[i];
            let shared = stage1_of(cfg)
                .as_ref()
                .map_err(|e| anyhow::anyhow!("stage 1 failed: {e:#}"))?;
            let ds = build_dataset(&cfg.data, 1)?;
            Ok(run_with(cfg, &cells_root, Some((&ds, shared)))?.report)
        });
        let mut slots: Vec<Option<anyhow::Result<EvalReport>>> =
            (0..cells.len()).map(|_| None).collect();
        for (i, r) in ordered.into_iter().zip(out) {
            slots[i] = Some(r);
        }
        slots
            .into_iter()
            .map(|s| s.expect("every cell ran"))
            .collect()
    };

    let mut reports = Vec::new();
    let mut warnings = Vec::new();
    for (cell, r) in cells.drain(..).zip(results) {
        match r {
            Ok(report) => reports.push((cell, report)),
            Err(e) => warnings.push(format!(
                "cell {:?} seed {} missing: {e:#}",
                cell.group(),
                cell.seed
            )),
        }
    }
    if reports.is_empty() {
        anyhow::bail!("every cell failed: {}", warnings.join("; "));
    }
    let rows = aggregate(&reports);
    std::fs::create_dir_all(root)?;
    let csv = root.join("aggregate.csv");
    write_rows(&csv, &rows)?;
    let plots = write_plots(grid, &rows, &root.join("plots"))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(SweepOutcome {
        reports,
        rows,
        csv,
        plots,
        warnings,
    })
}

/// Raw rows sorted by cell then seed, followed by per-cell summaries.
/// The output depends only on the set of reports, not their order.
pub fn aggregate(reports: &[(Cell, EvalReport)]) -> Vec<AggregateRow> {
    type GroupKey = ([String; 5], String, String);
    let mut groups: BTreeMap<GroupKey, BTreeMap<u64, f64>> = BTreeMap::new();
    for (cell, report) in reports {
        for m in &report.metrics {
            groups
                .entry((cell.group(), m.name.clone(), m.domain.clone()))
                .or_default()
                .insert(cell.seed, m.value);
        }
    }
    let row = |g: &[String; 5],
               metric: &str,
               domain: &str,
               kind: &str,
               seed: String,
               value: f64,
               sd: f64,
               n: usize| AggregateRow {
        kind: kind.to_string(),
        method: g[0].clone(),
        encoder: g[1].clone(),
        lm: g[2].clone(),
        posttrain_count: g[3].clone(),
        shift_ratio: g[4].clone(),
        seed,
        metric: metric.to_string(),
        domain: domain.to_string(),
        value,
        sd,
        n,
    };
    let mut raw = Vec::new();
    let mut agg = Vec::new();
    for ((g, metric, domain), by_seed) in &groups {
        for (seed, v) in by_seed {
            raw.push(row(g, metric, domain, "raw", seed.to_string(), *v, 0.0, 1));
        }
        let values: Vec<f64> = by_seed.values().copied().collect();
        let (mean, sd) = mean_sd(&values);
        agg.push(row(
            g,
            metric,
            domain,
            "mean",
            String::new(),
            mean,
            sd,
            values.len(),
        ));
    }
    raw.extend(agg);
    raw
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_rows(path: &Path, rows: &[AggregateRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One chart per (metric, domain): the metric against the first axis
/// with several values, one series per remaining combination of axes.
fn write_plots(
    grid: &GridConfig,
    rows: &[AggregateRow],
    dir: &Path,
) -> anyhow::Result<Vec<PathBuf>> {
    let axis = [
        ("posttrain samples", 3, grid.posttrain_counts.len()),
        ("shift ratio", 4, grid.shift_ratios.len()),
        ("encoder preset", 1, grid.encoder_presets.len()),
        ("lm preset", 2, grid.lm_presets.len()),
    ]
    .into_iter()
    .find(|a| a.2 > 1);
    std::fs::create_dir_all(dir)?;
    let field = |r: &AggregateRow, i: usize| -> String {
        [
            &r.method,
            &r.encoder,
            &r.lm,
            &r.posttrain_count,
            &r.shift_ratio,
        ][i]
            .clone()
    };
    let means: Vec<&AggregateRow> = rows.iter().filter(|r| r.kind == "mean").collect();
    let charts: BTreeSet<(String, String)> = means
        .iter()
        .map(|r| (r.metric.clone(), r.domain.clone()))
        .collect();
    let mut out = Vec::new();
    for (metric, domain) in charts {
        let sel: Vec<&&AggregateRow> = means
            .iter()
            .filter(|r| r.metric == metric && r.domain == domain)
            .collect();
        let (x_label, x_idx) = axis.map_or(("method", 0), |a| (a.0, a.1));
        let mut ticks: Vec<String> = Vec::new();
        for r in &sel {
            let t = field(r, x_idx);
            if !ticks.contains(&t) {
                ticks.push(t);
            }
        }
        if axis.is_some() {
            ticks.sort_by(|a, b| match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(x), Ok(y)) => x.total_cmp(&y),
                _ => a.cmp(b),
            });
        }
        let mut series: BTreeMap<String, Vec<(usize, f64, f64)>> = BTreeMap::new();
        for r in &sel {
            let label: Vec<String> = (0..5)
                .filter(|&i| i != x_idx)
                .map(|i| field(r, i))
                .filter(|v| v != "base")
                .collect();
            let label = if label.is_empty() {
                "all".to_string()
            } else {
                label.join(" ")
            };
            let xi = ticks
                .iter()
                .position(|t| *t == field(r, x_idx))
                .expect("tick");
            series.entry(label).or_default().push((xi, r.value, r.sd));
        }
        let series: Vec<Series> = series
            .into_iter()
            .map(|(label, mut points)| {
                points.sort_by_key(|p| p.0);
                Series { label, points }
            })
            .collect();
        let svg = line_chart(
            &format!("{metric} ({domain})"),
            x_label,
            &ticks,
            &metric,
            &series,
        );
        let path = dir.join(format!("{metric}-{domain}.svg"));
        std::fs::write(&path, svg)?;
        out.push(path);
    }
    Ok(out)
}
