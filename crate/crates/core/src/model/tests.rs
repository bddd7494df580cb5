use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::grad_check;
use crate::optim::{AdamConfig, AdamState};

fn small_config() -> ModelConfig {
    ModelConfig {
        encoders: vec![EncoderConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        }],
        projector_dims: Vec::new(),
        lm: LmConfig {
            vocab_size: 12,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            max_seq_len: 16,
            mlp_ratio: 2,
        },
    }
}

fn random_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::filled(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            img.set(x, y, [rng.random(), rng.random(), rng.random()]);
        }
    }
    img
}

#[test]
fn patchify_constant_image() {
    let cfg = EncoderConfig::default();
    let img = Image::filled(64, 64, [51, 51, 51]);
    let p = patchify(&img, &cfg).unwrap();
    assert_eq!(p.shape(), &[64, 192]);
    assert!(p.data().iter().all(|&v| v == 51.0 / 255.0));
}

#[test]
fn patchify_inverts_exactly() {
    let cfg = EncoderConfig::default();
    let img = random_image(64, 3);
    let p = patchify(&img, &cfg).unwrap();
    assert_eq!(unpatchify(&p, &cfg).unwrap(), img.unit_values());
}

#[test]
fn patchify_rejects_wrong_size() {
    let cfg = EncoderConfig::default();
    assert!(patchify(&Image::filled(32, 32, [0; 3]), &cfg).is_err());
}

#[test]
fn encoder_features_are_deterministic_and_image_dependent() {
    let enc =
        VisionEncoder::new(EncoderConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let a = enc.features(&random_image(64, 1)).unwrap();
    let b = enc.features(&random_image(64, 1)).unwrap();
    let c = enc.features(&random_image(64, 2)).unwrap();
    assert_eq!(a.shape(), &[64, 64]);
    assert_eq!(a, b);
    assert!(a.max_abs_diff(&c) > 1e-6);
}

#[test]
fn shuffled_patches_change_encoder_output() {
    let cfg = small_config().encoders[0].clone();
    let enc = VisionEncoder::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let img = random_image(16, 9);
    let base = enc.features(&img).unwrap();
    let patches = patchify(&img, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut any_differs = false;
    for _ in 0..5 {
        let mut order: Vec<usize> = (0..cfg.num_patches()).collect();
        order.shuffle(&mut rng);
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            continue;
        }
        let rows: Vec<Vec<f64>> = order.iter().map(|&o| patches.row(o).to_vec()).collect();
        let shuffled = Tensor::from_rows(&rows).unwrap();
        let values = unpatchify(&shuffled, &cfg).unwrap();
        let mut img2 = Image::filled(16, 16, [0; 3]);
        for (i, px) in values.chunks(3).enumerate() {
            let q = |v: f64| (v * 255.0).round() as u8;
            img2.set(i % 16, i / 16, [q(px[0]), q(px[1]), q(px[2])]);
        }
        let out = enc.features(&img2).unwrap();
        // Without positional information the output would be the same rows permuted.
        let permuted: Vec<Vec<f64>> = order.iter().map(|&o| base.row(o).to_vec()).collect();
        let permuted = Tensor::from_rows(&permuted).unwrap();
        any_differs |= out.max_abs_diff(&permuted) > 1e-9;
    }
    assert!(any_differs);
}

#[test]
fn sequence_layout_mask() {
    let l = SequenceLayout::new(64, 8, 6, 128).unwrap();
    let mask = l.loss_mask();
    assert_eq!(mask.len(), 78);
    assert_eq!(mask.iter().filter(|&&m| m == 1.0).count(), 6);
    let ones: Vec<usize> = (0..78).filter(|&i| mask[i] == 1.0).collect();
    assert_eq!(ones, (72..78).collect::<Vec<_>>());

    let empty = SequenceLayout::new(64, 8, 0, 128).unwrap();
    assert!(empty.loss_mask().iter().all(|&m| m == 0.0));

    assert!(matches!(
        SequenceLayout::new(64, 8, 60, 128),
        Err(Error::SequenceOverflow { len: 132, max: 128 })
    ));
}

#[test]
fn uniform_head_gives_log_vocab() {
    let mut cfg = small_config();
    cfg.lm.vocab_size = 64;
    let mut m = MultimodalModel::new(&cfg, 0).unwrap();
    for name in ["head.w", "head.b"] {
        m.lm.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let lp = m.score(&random_image(16, 0), &[1, 2], &[7]).unwrap();
    assert!((lp + 64f64.ln()).abs() < 1e-12);
}

#[test]
fn response_logprob_rejects_out_of_vocab() {
    let m = MultimodalModel::new(&small_config(), 0).unwrap();
    assert!(matches!(
        m.score(&random_image(16, 0), &[1], &[12]),
        Err(Error::TokenOutOfRange { id: 12, .. })
    ));
}

#[test]
fn trailing_tokens_do_not_change_logprob() {
    let m = MultimodalModel::new(&small_config(), 1).unwrap();
    let img = random_image(16, 4);
    // The realized response followed by extra tokens scored separately.
    let full = m.score(&img, &[1, 2], &[3, 4, 5]).unwrap();
    let mut g = Graph::new();
    let mb = m.bind(&mut g, true);
    let logits = m
        .sequence_logits(&mut g, &mb, &img, &[1, 2, 3, 4, 5, 9, 10])
        .unwrap();
    let lv = g.value(logits);
    let start = m.num_patches() + 2;
    let manual = brute_force_logprob(lv, start, &[3, 4, 5]);
    assert!((full - manual).abs() < 1e-12, "{full} vs {manual}");
}

/// Σ log softmax(row t−1)[y_t], computed directly from logits.
fn brute_force_logprob(logits: &Tensor, start: usize, response: &[usize]) -> f64 {
    response
        .iter()
        .enumerate()
        .map(|(j, &tok)| {
            let row = logits.row(start + j - 1);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            (row[tok].exp() / z).ln()
        })
        .sum()
}

#[test]
fn logprob_matches_brute_force_softmax() {
    let mut cfg = small_config();
    cfg.lm.vocab_size = 20;
    let m = MultimodalModel::new(&cfg, 7).unwrap();
    // Larger weights so the distribution is far from uniform.
    let mut m = m;
    for v in m.lm.params.get_mut("head.w").unwrap().data_mut() {
        *v *= 50.0;
    }
    let img = random_image(16, 8);
    let lp = m.score(&img, &[4, 5, 6], &[11, 0, 19]).unwrap();
    let mut g = Graph::new();
    let mb = m.bind(&mut g, true);
    let logits = m
        .sequence_logits(&mut g, &mb, &img, &[4, 5, 6, 11, 0, 19])
        .unwrap();
    let manual = brute_force_logprob(g.value(logits), m.num_patches() + 3, &[11, 0, 19]);
    assert!((lp - manual).abs() < 1e-10, "{lp} vs {manual}");
    assert!(lp < -0.1);
}

#[test]
fn causality_is_exact() {
    let m = MultimodalModel::new(&small_config(), 2).unwrap();
    let img = random_image(16, 1);
    let tokens = [1usize, 2, 3, 4, 5, 6];
    let logits_of = |toks: &[usize]| {
        let mut g = Graph::new();
        let mb = m.bind(&mut g, true);
        let l = m.sequence_logits(&mut g, &mb, &img, toks).unwrap();
        g.value(l).clone()
    };
    let base = logits_of(&tokens);
    for t in 0..tokens.len() {
        let mut perturbed = tokens;
        perturbed[t] = (perturbed[t] + 5) % 12;
        let out = logits_of(&perturbed);
        let pos = m.num_patches() + t;
        for r in 0..pos {
            assert_eq!(base.row(r), out.row(r), "row {r} changed by token {t}");
        }
        assert_ne!(base.row(pos), out.row(pos));
    }
}

#[test]
fn frozen_components_never_move() {
    let mut m = MultimodalModel::new(&small_config(), 3).unwrap();
    m.set_trainable(Component::Encoder, false);
    let enc_hash = m.component_hash(Component::Encoder);
    let lm_hash = m.component_hash(Component::Lm);
    let img = random_image(16, 2);
    let mut adam = AdamState::new(AdamConfig::with_lr(1e-2));
    for _ in 0..5 {
        let mut g = Graph::new();
        let mb = m.bind(&mut g, false);
        let lp = m
            .response_logprob(&mut g, &mb, &img, &[1, 2], &[3, 4])
            .unwrap();
        let loss = g.scale(lp, -1.0).unwrap();
        let grads = g.backward(loss).unwrap();
        let gm = m.collect_grads(&g, &mb, &grads);
        assert!(gm.keys().all(|k| !k.starts_with("enc")));
        adam.step(&mut m, &gm).unwrap();
    }
    assert_eq!(m.component_hash(Component::Encoder), enc_hash);
    assert_ne!(m.component_hash(Component::Lm), lm_hash);
}

#[test]
fn frozen_copy_scores_identically_and_stays_put() {
    let mut m = MultimodalModel::new(&small_config(), 4).unwrap();
    let reference = m.frozen_copy();
    let img = random_image(16, 3);
    let a = m.score(&img, &[1], &[2, 3]).unwrap();
    let b = reference.score(&img, &[1], &[2, 3]).unwrap();
    assert!((a - b).abs() <= 1e-12);
    let ref_hash = reference.param_hash();
    let mut adam = AdamState::new(AdamConfig::with_lr(1e-2));
    let mut g = Graph::new();
    let mb = m.bind(&mut g, false);
    let lp = m
        .response_logprob(&mut g, &mb, &img, &[1], &[2, 3])
        .unwrap();
    let grads = g.backward(lp).unwrap();
    let gm = m.collect_grads(&g, &mb, &grads);
    adam.step(&mut m, &gm).unwrap();
    assert_eq!(reference.param_hash(), ref_hash);
    assert_ne!(m.score(&img, &[1], &[2, 3]).unwrap(), b);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let m = MultimodalModel::new(&small_config(), 11).unwrap();
    let img = random_image(16, 5);
    let point = m.param_tensors();
    let r = grad_check(
        |g, vars| {
            let mb = m.bind_vars(vars);
            m.response_logprob(g, &mb, &img, &[1, 2], &[3, 4, 5])
        },
        &point,
        3,
        1e-4,
        0,
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

fn ensemble_pair() -> (VisionEncoder, VisionEncoder) {
    let cfg = small_config().encoders[0].clone();
    let a = VisionEncoder::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut bcfg = cfg;
    bcfg.embed_dim = 4;
    let b = VisionEncoder::new(bcfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    (a, b)
}

#[test]
fn ensemble_concatenates_features() {
    let (a, b) = ensemble_pair();
    let img = random_image(16, 6);
    let mut g = Graph::new();
    let ba = a.params.bind(&mut g, true);
    let bb = b.params.bind(&mut g, true);
    let out = ensemble_encode(&mut g, (&a, &ba), (&b, &bb), &img).unwrap();
    assert_eq!(g.value(out).shape(), &[4, 12]);

    let dup = ensemble_encode(&mut g, (&a, &ba), (&a, &ba), &img).unwrap();
    let fa = a.features(&img).unwrap();
    for r in 0..4 {
        assert_eq!(&g.value(dup).row(r)[..8], fa.row(r));
        assert_eq!(&g.value(dup).row(r)[8..], fa.row(r));
    }
}

#[test]
fn ensemble_rejects_grid_mismatch() {
    let (a, _) = ensemble_pair();
    let mut cfg = a.config.clone();
    cfg.image_size = 16;
    cfg.patch_size = 4;
    let c = VisionEncoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut g = Graph::new();
    let ba = a.params.bind(&mut g, true);
    let bc = c.params.bind(&mut g, true);
    assert!(matches!(
        ensemble_encode(&mut g, (&a, &ba), (&c, &bc), &random_image(16, 0)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn ensemble_gradients_reach_both_encoders() {
    let (a, b) = ensemble_pair();
    let img = random_image(16, 7);
    let na = a.params.len();
    let point: Vec<Tensor> = a
        .params
        .iter()
        .chain(b.params.iter())
        .map(|(_, p)| p.value.clone())
        .collect();
    let names_a: Vec<String> = a.params.names().map(String::from).collect();
    let names_b: Vec<String> = b.params.names().map(String::from).collect();
    let f = |g: &mut Graph, vars: &[Var]| {
        let ba = Bound::from_pairs(names_a.iter().cloned().zip(vars[..na].iter().copied()));
        let bb = Bound::from_pairs(names_b.iter().cloned().zip(vars[na..].iter().copied()));
        let out = ensemble_encode(g, (&a, &ba), (&b, &bb), &img)?;
        let sq = g.mul(out, out)?;
        g.sum(sq)
    };
    let r = grad_check(f, &point, 4, 1e-4, 3).unwrap();
    assert!(r.passed(), "{r:?}");

    let mut g = Graph::new();
    let ba = a.params.bind(&mut g, false);
    let bb = b.params.bind(&mut g, false);
    let out = ensemble_encode(&mut g, (&a, &ba), (&b, &bb), &img).unwrap();
    let s = g.sum(out).unwrap();
    let sq = g.mul(s, s).unwrap();
    let grads = g.backward(sq).unwrap();
    let norm = |v: Var| grads.wrt(v).data().iter().map(|x| x * x).sum::<f64>();
    assert!(norm(ba.var("patch.w")) > 0.0);
    assert!(norm(bb.var("patch.w")) > 0.0);
}

#[test]
fn greedy_decode_respects_budget() {
    let m = MultimodalModel::new(&small_config(), 0).unwrap();
    let out = m.greedy_decode(&random_image(16, 0), &[1], 11, 3).unwrap();
    assert!(out.tokens.len() <= 3);
    if out.tokens.len() == 3 {
        assert!(out.hit_limit);
    }
}

#[test]
fn projector_truncation_keeps_leading_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = Projector::new(8, 6, &mut rng);
    let t = p.truncated(1).unwrap();
    assert_eq!(t.dims(), &[8, 6]);
    assert_eq!(t.layer_weights(0).unwrap(), p.layer_weights(0).unwrap());
    assert!(p.truncated(3).is_err());
}
