use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use pivot_lab::eval::EvalReport;

/// `b − a` for one metric, averaged over the seeds both sides share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub name: String,
    pub domain: String,
    pub delta: f64,
    pub paired_seeds: usize,
}

type Key = (String, String);

fn by_seed(
    reports: &[EvalReport],
) -> anyhow::Result<(BTreeMap<u64, BTreeMap<Key, f64>>, BTreeSet<Key>)> {
    let mut out = BTreeMap::new();
    let mut schema: Option<BTreeSet<Key>> = None;
    for r in reports {
        let metrics: BTreeMap<Key, f64> = r
            .metrics
            .iter()
            .map(|m| ((m.name.clone(), m.domain.clone()), m.value))
            .collect();
        let keys: BTreeSet<Key> = metrics.keys().cloned().collect();
        match &schema {
            Some(s) if *s != keys => {
                anyhow::bail!("reports within one side have different metrics")
            }
            Some(_) => {}
            None => schema = Some(keys),
        }
        if out.insert(r.seed, metrics).is_some() {
            anyhow::bail!("two reports share seed {}", r.seed);
        }
    }
    Ok((out, schema.unwrap_or_default()))
}

/// Per-metric signed deltas from `a` to `b`, pairing reports by seed.
pub fn report_diff(a: &[EvalReport], b: &[EvalReport]) -> anyhow::Result<Vec<MetricDelta>> {
    let (sa, keys_a) = by_seed(a)?;
    let (sb, keys_b) = by_seed(b)?;
    if keys_a != keys_b {
        let only_a: Vec<_> = keys_a.difference(&keys_b).collect();
        let only_b: Vec<_> = keys_b.difference(&keys_a).collect();
        anyhow::bail!("metric schemas differ: only in first {only_a:?}, only in second {only_b:?}");
    }
    let seeds: Vec<u64> = sa.keys().filter(|s| sb.contains_key(s)).copied().collect();
    if seeds.is_empty() {
        anyhow::bail!("the two sides share no seed");
    }
    Ok(keys_a
        .into_iter()
        .map(|key| {
            let delta =
                seeds.iter().map(|s| sb[s][&key] - sa[s][&key]).sum::<f64>() / seeds.len() as f64;
            MetricDelta {
                name: key.0,
                domain: key.1,
                delta,
                paired_seeds: seeds.len(),
            }
        })
        .collect())
}

/// Fixed-width table, one delta per line.
pub fn format_deltas(deltas: &[MetricDelta]) -> String {
    let mut out = format!("{:<26} {:<16} {:>10}\n", "metric", "domain", "delta");
    for d in deltas {
        out.push_str(&format!(
            "{:<26} {:<16} {:>+10.4}\n",
            d.name, d.domain, d.delta
        ));
    }
    out
}
