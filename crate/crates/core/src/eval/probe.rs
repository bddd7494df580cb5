use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{argmax, component_rng, VisionEncoder};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Nearest class mean.
    Prototype,
    /// L2-regularized softmax regression fitted by gradient descent.
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearProbeConfig {
    pub heldout_frac: f64,
    pub mode: ProbeMode,
    pub seed: u64,
    pub l2: f64,
    pub lr: f64,
    pub iterations: usize,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            heldout_frac: 0.3,
            mode: ProbeMode::Logistic,
            seed: 0,
            l2: 1e-3,
            lr: 0.5,
            iterations: 300,
        }
    }
}

/// Per-class shuffle, then the first `round(frac · count)` of each class are held out.
fn stratified_split(labels: &[usize], frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::InvalidArgument(
            "a probe needs at least two classes".into(),
        ));
    }
    let mut rng = component_rng(seed, 7);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let k = (frac * idx.len() as f64).round() as usize;
        if k >= idx.len() {
            return Err(Error::InvalidArgument(format!(
                "class {class} is absent from the training split"
            )));
        }
        held.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    Ok((train, held))
}

/// Per-dimension mean and standard deviation over `rows`, with a floor on the deviation.
fn standardizer(x: &Tensor, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for &r in rows {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for &r in rows {
        for ((s, v), m) in sd.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    (mean, sd.into_iter().map(|s| s.sqrt().max(1e-8)).collect())
}

fn nearest_prototype(
    x: &Tensor,
    labels: &[usize],
    train: &[usize],
    classes: usize,
) -> Vec<Vec<f64>> {
    let d = x.cols();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for &r in train {
        counts[labels[r]] += 1;
        for (s, v) in sums[labels[r]].iter_mut().zip(x.row(r)) {
            *s += v;
        }
    }
    for (s, c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= (*c).max(1) as f64);
    }
    sums
}

fn softmax_regression(
    z: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    cfg: &LinearProbeConfig,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = z.first().map_or(0, Vec::len);
    let n = z.len() as f64;
    let mut w = vec![vec![0.0; classes]; d];
    let mut b = vec![0.0; classes];
    for _ in 0..cfg.iterations {
        let mut gw = vec![vec![0.0; classes]; d];
        let mut gb = vec![0.0; classes];
        for (row, &y) in z.iter().zip(labels) {
            let mut logits = b.clone();
            for (xi, wi) in row.iter().zip(&w) {
                for (l, wv) in logits.iter_mut().zip(wi) {
                    *l += xi * wv;
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exp.iter().sum();
            for c in 0..classes {
                let err = exp[c] / total - if c == y { 1.0 } else { 0.0 };
                gb[c] += err / n;
                for (gwi, xi) in gw.iter_mut().zip(row) {
                    gwi[c] += err * xi / n;
                }
            }
        }
        for (wi, gwi) in w.iter_mut().zip(&gw) {
            for (wv, g) in wi.iter_mut().zip(gwi) {
                *wv -= cfg.lr * (g + cfg.l2 * *wv);
            }
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= cfg.lr * g;
        }
    }
    (w, b)
}

/// Held-out accuracy of a linear classifier on frozen features.
pub fn linear_probe(features: &Tensor, labels: &[usize], cfg: &LinearProbeConfig) -> Result<f64> {
    if features.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite { op: "linear_probe" });
    }
    let (train, held) = stratified_split(labels, cfg.heldout_frac, cfg.seed)?;
    if held.is_empty() {
        return Err(Error::InvalidArgument("the held-out split is empty".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let (mean, sd) = standardizer(features, &train);
    let z = |r: usize| -> Vec<f64> {
        features
            .row(r)
            .iter()
            .zip(&mean)
            .zip(&sd)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let predict: Box<dyn Fn(&[f64]) -> usize> = match cfg.mode {
        ProbeMode::Prototype => {
            let zt = Tensor::from_rows(&train.iter().map(|&r| z(r)).collect::<Vec<_>>())?;
            let train_labels: Vec<usize> = train.iter().map(|&r| labels[r]).collect();
            let all: Vec<usize> = (0..train.len()).collect();
            let protos = nearest_prototype(&zt, &train_labels, &all, classes);
            Box::new(move |x: &[f64]| {
                let neg_dist: Vec<f64> = protos
                    .iter()
                    .map(|p| -p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .collect();
                argmax(&neg_dist)
            })
        }
        ProbeMode::Logistic => {
            let zs: Vec<Vec<f64>> = train.iter().map(|&r| z(r)).collect();
            let ys: Vec<usize> = train.iter().map(|&r| labels[r]).collect();
            let (w, b) = softmax_regression(&zs, &ys, classes, cfg);
            Box::new(move |x: &[f64]| {
                let mut logits = b.clone();
                for (xi, wi) in x.iter().zip(&w) {
                    for (l, wv) in logits.iter_mut().zip(wi) {
                        *l += xi * wv;
                    }
                }
                argmax(&logits)
            })
        }
    };
    let correct = held
        .iter()
        .filter(|&&r| predict(&z(r)) == labels[r])
        .count();
    Ok(correct as f64 / held.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub batch_size: usize,
    pub val_frac: f64,
    pub seeds: Vec<u64>,
}

impl Default for SegmentationProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            hidden: 32,
            batch_size: 64,
            val_frac: 0.3,
            seeds: (0..6).collect(),
        }
    }
}

/// Mean over seeds of the per-class patch recall, averaged over the
/// non-background classes present in the validation patches.
///
/// `patch_features[i]` is `[patches × d]` for image `i`; `masks[i]` holds
/// one class per patch, 0 being background. The MLP is trained with a
/// class-balanced loss: the mean over classes of each class's mean
/// cross-entropy.
pub fn segmentation_probe_features(
    patch_features: &[Tensor],
    masks: &[Vec<u8>],
    classes: usize,
    cfg: &SegmentationProbeConfig,
) -> Result<f64> {
    if patch_features.len() != masks.len() || patch_features.is_empty() {
        return Err(Error::Dimension("one mask per feature map required".into()));
    }
    for (f, m) in patch_features.iter().zip(masks) {
        if f.rows() != m.len() {
            return Err(Error::Dimension(format!(
                "{} patches but {} mask entries",
                f.rows(),
                m.len()
            )));
        }
        if let Some(&c) = m.iter().find(|&&c| c as usize >= classes) {
            return Err(Error::InvalidArgument(format!(
                "mask class {c} outside 0..{classes}"
            )));
        }
    }
    if masks.iter().flatten().all(|&c| c == 0) {
        return Err(Error::InvalidArgument("every patch is background".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Config(
            "segmentation probe needs at least one seed".into(),
        ));
    }
    let mut total = 0.0;
    for &seed in &cfg.seeds {
        total += segmentation_run(patch_features, masks, classes, cfg, seed)?;
    }
    Ok(total / cfg.seeds.len() as f64)
}

fn segmentation_run(
    feats: &[Tensor],
    masks: &[Vec<u8>],
    classes: usize,
    cfg: &SegmentationProbeConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = component_rng(seed, 11);
    let mut images: Vec<usize> = (0..feats.len()).collect();
    images.shuffle(&mut rng);
    let n_val =
        ((cfg.val_frac * images.len() as f64).round() as usize).clamp(1, images.len().max(2) - 1);
    let (val_imgs, train_imgs) = images.split_at(n_val.min(images.len()));
    let patches = |imgs: &[usize]| -> Vec<(Vec<f64>, usize)> {
        imgs.iter()
            .flat_map(|&i| {
                (0..feats[i].rows()).map(move |p| (feats[i].row(p).to_vec(), masks[i][p] as usize))
            })
            .collect()
    };
    let train = patches(train_imgs);
    let val = patches(val_imgs);
    if train.is_empty() {
        return Err(Error::InvalidArgument(
            "segmentation probe has no training patches".into(),
        ));
    }

    let d = train[0].0.len();
    let rows: Vec<usize> = (0..train.len()).collect();
    let xt = Tensor::from_rows(&train.iter().map(|p| p.0.clone()).collect::<Vec<_>>())?;
    let (mean, sd) = standardizer(&xt, &rows);
    let norm = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&mean)
            .zip(&sd)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };

    let mut params = ParamStore::new();
    params.insert(
        "fc.w",
        Tensor::randn(&[d, cfg.hidden], (1.0 / d as f64).sqrt(), &mut rng),
    );
    params.insert("fc.b", Tensor::zeros(&[1, cfg.hidden]));
    params.insert(
        "out.w",
        Tensor::randn(
            &[cfg.hidden, classes],
            (1.0 / cfg.hidden as f64).sqrt(),
            &mut rng,
        ),
    );
    params.insert("out.b", Tensor::zeros(&[1, classes]));
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));

    let forward =
        |g: &mut Graph, b: &crate::params::Bound, x: Tensor| -> Result<crate::graph::Var> {
            let x = g.constant(x);
            let h = g.matmul(x, b.var("fc.w"))?;
            let h = g.add_row(h, b.var("fc.b"))?;
            let h = g.gelu(h)?;
            let o = g.matmul(h, b.var("out.w"))?;
            g.add_row(o, b.var("out.b"))
        };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x =
                Tensor::from_rows(&chunk.iter().map(|&i| norm(&train[i].0)).collect::<Vec<_>>())?;
            let targets: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let mut g = Graph::new();
            let b = params.bind(&mut g, false);
            let logits = forward(&mut g, &b, x)?;
            let mut per_class = Vec::new();
            for c in 0..classes {
                let mask: Vec<f64> = targets
                    .iter()
                    .map(|&t| if t == c { 1.0 } else { 0.0 })
                    .collect();
                if mask.iter().any(|&m| m > 0.0) {
                    per_class.push(g.softmax_cross_entropy(logits, &targets, &mask)?);
                }
            }
            let sum = g.add_n(&per_class)?;
            let loss = g.scale(sum, 1.0 / per_class.len() as f64)?;
            let grads = g.backward(loss)?;
            let mut gm = crate::params::GradMap::new();
            b.collect_grads(&g, &grads, "", &mut gm);
            adam.step(&mut params, &gm)?;
        }
    }

    let mut hits = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    if !val.is_empty() {
        let x = Tensor::from_rows(&val.iter().map(|p| norm(&p.0)).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let b = params.bind(&mut g, true);
        let logits = forward(&mut g, &b, x)?;
        let out = g.value(logits);
        for (r, (_, y)) in val.iter().enumerate() {
            seen[*y] += 1;
            if argmax(out.row(r)) == *y {
                hits[*y] += 1;
            }
        }
    }
    let recalls: Vec<f64> = (1..classes)
        .filter(|&c| seen[c] > 0)
        .map(|c| hits[c] as f64 / seen[c] as f64)
        .collect();
    if recalls.is_empty() {
        return Err(Error::InvalidArgument(
            "validation patches contain no foreground class".into(),
        ));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Patch features of a frozen encoder for each image, then the probe.
pub fn segmentation_probe(
    encoder: &VisionEncoder,
    images: &[&crate::image::Image],
    masks: &[Vec<u8>],
    classes: usize,
    cfg: &SegmentationProbeConfig,
) -> Result<f64> {
    let feats = images
        .iter()
        .map(|im| encoder.features(im))
        .collect::<Result<Vec<_>>>()?;
    segmentation_probe_features(&feats, masks, classes, cfg)
}
