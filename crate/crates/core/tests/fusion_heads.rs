use fusion_probe::autodiff::{Graph, Tensor};
use fusion_probe::fusion::{receptive_field, FusionHead, FusionHeadConfig, FusionKind, ParamSet};
use fusion_probe::{Model, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_clip(rng: &mut ChaCha8Rng, t: usize, n: usize, d: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![t, n, d], |_| rng.sample::<f32, _>(StandardNormal))
}

fn head(kind: FusionKind, d: usize, seed: u64, positions: bool) -> (FusionHead, ParamSet) {
    let cfg = FusionHeadConfig {
        num_heads: 2,
        seed,
        use_positions: positions,
        ..FusionHeadConfig::new(kind, d)
    };
    FusionHead::new(&cfg).unwrap()
}

/// Moves every parameter off its initial value so zero-initialized paths become active.
fn perturb(params: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.3 * rng.sample::<f32, _>(StandardNormal);
        }
    }
}

fn set(params: &mut ParamSet, name: &str, f: impl Fn(usize) -> f32) {
    let shape = params.by_name(name).unwrap_or_else(|| panic!("no {name}")).value.shape().to_vec();
    params.assign(name, Tensor::from_fn(shape, f)).unwrap();
}

fn permute_frames(x: &Tensor<f32>, order: &[usize]) -> Tensor<f32> {
    let s = x.shape();
    let row = s[1] * s[2];
    let mut data = Vec::with_capacity(x.numel());
    for &f in order {
        data.extend_from_slice(&x.data()[f * row..][..row]);
    }
    Tensor::new(s.to_vec(), data).unwrap()
}

#[test]
fn pool_examples() {
    let x = Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 3.0, 1.0]).unwrap();
    let (avg, pa) = head(FusionKind::AvgPool, 2, 0, false);
    let (max, pm) = head(FusionKind::MaxPool, 2, 0, false);
    assert_eq!(avg.fuse(&pa, &x, None).unwrap().data(), &[2.0, 2.0]);
    assert_eq!(max.fuse(&pm, &x, None).unwrap().data(), &[3.0, 3.0]);

    let single = Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, -1.0]).unwrap();
    for (h, p) in [(&avg, &pa), (&max, &pm)] {
        assert_eq!(h.fuse(p, &single, None).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(h.fuse(p, &single, Some(1)).unwrap().data(), &[3.0, -1.0]);
    }
}

#[test]
fn relu_pool_kinds_share_fusion_and_widen_probe() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_clip(&mut rng, 4, 3, 6);
    let (plain, pp) = head(FusionKind::MaxPool, 6, 0, true);
    let (relu, pr) = head(FusionKind::MaxPoolRelu, 6, 0, true);
    assert_eq!(plain.fuse(&pp, &x, Some(0)).unwrap(), relu.fuse(&pr, &x, Some(0)).unwrap());
    let cfg = |kind| ModelConfig::new(FusionHeadConfig::new(kind, 6), 3);
    let a = Model::new(cfg(FusionKind::MaxPool)).unwrap();
    let b = Model::new(cfg(FusionKind::MaxPoolRelu)).unwrap();
    assert!(!a.probe.relu_variant());
    assert!(b.probe.relu_variant());
    assert_eq!(b.params.scalar_count() - a.params.scalar_count(), 6 * 6 + 6);
}

#[test]
fn fresh_self_attention_reproduces_pooling_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..10 {
        let x = random_clip(&mut rng, 16, 5, 16);
        let cls = if i % 2 == 0 { Some(0) } else { None };
        for (attn, pool) in [
            (FusionKind::SelfAttnAllAvg, FusionKind::AvgPool),
            (FusionKind::SelfAttnAllMax, FusionKind::MaxPool),
            (FusionKind::SelfAttnClsAvg, FusionKind::AvgPool),
            (FusionKind::SelfAttnClsMax, FusionKind::MaxPool),
        ] {
            let (ha, pa) = head(attn, 16, i, true);
            let (hp, pp) = head(pool, 16, i, true);
            let a = ha.fuse(&pa, &x, cls).unwrap();
            let b = hp.fuse(&pp, &x, cls).unwrap();
            let same_bits = a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits());
            assert!(same_bits, "{attn} vs {pool} on clip {i}");
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_clip(&mut rng, 4, 5, 8);
    for kind in FusionKind::ALL.into_iter().filter(|k| k.uses_attention()) {
        let (h, mut p) = head(kind, 8, 1, true);
        perturb(&mut p, 2);
        let g = Graph::<f32>::new();
        let vars = p.bind(&g, false);
        let fused = h.forward(&vars, g.constant(x.clone()), Some(0)).unwrap();
        let w = fused.attention.expect("attention kinds expose weights").value();
        let keys = *w.shape().last().unwrap();
        for row in w.data().chunks(keys) {
            let total: f32 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-5, "{kind}: {total}");
            assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0 || keys == 1));
        }
    }
}

#[test]
fn order_blind_without_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_clip(&mut rng, 6, 5, 8);
    let order = [3, 0, 5, 1, 4, 2];
    let y = permute_frames(&x, &order);
    for kind in FusionKind::ALL {
        let (h, mut p) = head(kind, 8, 4, false);
        perturb(&mut p, 9);
        let a = h.fuse(&p, &x, Some(0)).unwrap();
        let b = h.fuse(&p, &y, Some(0)).unwrap();
        let diff = a.max_abs_diff(&b);
        if kind.is_sequential() {
            assert!(diff > 1e-3, "{kind} ignored frame order ({diff})");
        } else {
            assert!(diff < 1e-5, "{kind} depends on frame order ({diff})");
        }
    }
}

#[test]
fn positions_make_attention_order_aware() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_clip(&mut rng, 6, 5, 8);
    let y = permute_frames(&x, &[5, 4, 3, 2, 1, 0]);
    let (h, mut p) = head(FusionKind::SelfAttnAllAvg, 8, 4, true);
    perturb(&mut p, 1);
    assert!(h.fuse(&p, &x, None).unwrap().max_abs_diff(&h.fuse(&p, &y, None).unwrap()) > 1e-3);
}

#[test]
fn too_many_frames_for_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_clip(&mut rng, 17, 2, 8);
    let (h, p) = head(FusionKind::CrossAttnAll, 8, 0, true);
    assert!(h.fuse(&p, &x, None).is_err());
    let (h, p) = head(FusionKind::CrossAttnAll, 8, 0, false);
    assert!(h.fuse(&p, &x, None).is_ok());
}

#[test]
fn weighted_attention_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // a single token gets all the weight, so the output is that token's block output
    let x = random_clip(&mut rng, 1, 5, 8);
    let (h, mut p) = head(FusionKind::WeightedSelfAttn, 8, 0, true);
    perturb(&mut p, 3);
    let (sa, mut ps) = head(FusionKind::SelfAttnClsAvg, 8, 0, true);
    perturb(&mut ps, 3);
    assert!(h.fuse(&p, &x, Some(0)).unwrap().max_abs_diff(&sa.fuse(&ps, &x, Some(0)).unwrap()) < 1e-6);

    // equal logits everywhere give the plain mean of the block outputs
    let x = random_clip(&mut rng, 6, 5, 8);
    let (h, mut p) = head(FusionKind::WeightedSelfAttn, 8, 0, true);
    set(&mut p, "fusion.attn.q.weight", |_| 0.0);
    let (avg, pa) = head(FusionKind::AvgPool, 8, 0, true);
    let diff = h.fuse(&p, &x, Some(0)).unwrap().max_abs_diff(&avg.fuse(&pa, &x, Some(0)).unwrap());
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn cross_attention_symmetries() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // identical keys: the query projection only moves logits, which cannot matter
    let frame = random_clip(&mut rng, 1, 1, 8);
    let x = Tensor::from_fn(vec![4, 3, 8], |i| frame.data()[i % 8]);
    let (h, mut p) = head(FusionKind::CrossAttnAll, 8, 2, false);
    perturb(&mut p, 5);
    let before = h.fuse(&p, &x, None).unwrap();
    set(&mut p, "fusion.attn.q.weight", |i| (i as f32 * 0.37).sin());
    assert!(before.max_abs_diff(&h.fuse(&p, &x, None).unwrap()) < 1e-5);

    // one key: weight 1 regardless of q
    let x = random_clip(&mut rng, 1, 1, 8);
    let g = Graph::<f32>::new();
    let vars = p.bind(&g, false);
    let w = h.forward(&vars, g.constant(x), None).unwrap().attention.unwrap().value();
    assert!(w.data().iter().all(|v| *v == 1.0));
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn lstm_matches_scalar_gate_equations() {
    let (d, hd, t) = (5, 4, 3);
    let cfg = FusionHeadConfig {
        hidden_dim: hd,
        seed: 13,
        ..FusionHeadConfig::new(FusionKind::Lstm, d)
    };
    let (h, mut p) = FusionHead::new(&cfg).unwrap();
    set(&mut p, "fusion.lstm.bias", |i| 0.1 * i as f32 - 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_clip(&mut rng, t, 1, d);
    let got = h.fuse(&p, &x, None).unwrap();

    let w_ih = &p.by_name("fusion.lstm.w_ih").unwrap().value;
    let w_hh = &p.by_name("fusion.lstm.w_hh").unwrap().value;
    let b = &p.by_name("fusion.lstm.bias").unwrap().value;
    let mut hs = vec![0.0f64; hd];
    let mut cs = vec![0.0f64; hd];
    for step in 0..t {
        let mut z = vec![0.0f64; 4 * hd];
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = b.data()[j] as f64;
            for k in 0..d {
                *zj += x.data()[step * d + k] as f64 * w_ih.at(&[k, j]) as f64;
            }
            for k in 0..hd {
                *zj += hs[k] * w_hh.at(&[k, j]) as f64;
            }
        }
        for u in 0..hd {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[hd + u]);
            let g = z[2 * hd + u].tanh();
            let o = sigmoid(z[3 * hd + u]);
            cs[u] = f * cs[u] + i * g;
            hs[u] = o * cs[u].tanh();
        }
    }
    for (a, e) in got.data().iter().zip(&hs) {
        assert!((*a as f64 - e).abs() < 1e-5, "{a} vs {e}");
    }
}

#[test]
fn zero_recurrent_and_conv_weights_give_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_clip(&mut rng, 7, 3, 8);
    for kind in [FusionKind::Lstm, FusionKind::Tcn] {
        let (h, mut p) = head(kind, 8, 0, false);
        for param in p.iter_mut() {
            param.value.data_mut().fill(0.0);
        }
        let out = h.fuse(&p, &x, Some(0)).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0), "{kind}");
    }
}

#[test]
fn tcn_kernel_one_is_pointwise_on_last_frame() {
    let cfg = FusionHeadConfig {
        tcn_levels: 1,
        tcn_kernel: 1,
        hidden_dim: 3,
        ..FusionHeadConfig::new(FusionKind::Tcn, 3)
    };
    let (h, mut p) = FusionHead::new(&cfg).unwrap();
    let eye = |i: usize| if i / 3 == i % 3 { 1.0 } else { 0.0 };
    set(&mut p, "fusion.tcn.level0.conv1.tap0", eye);
    set(&mut p, "fusion.tcn.level0.conv2.tap0", eye);
    set(&mut p, "fusion.tcn.level0.skip.weight", |i| if i / 3 == i % 3 { 2.0 } else { 0.0 });
    let x = Tensor::new(vec![2, 1, 3], vec![9.0, 9.0, 9.0, 1.0, -2.0, 3.0]).unwrap();
    // skip 2x plus relu(relu(x)) on the last frame only
    assert_eq!(h.fuse(&p, &x, None).unwrap().data(), &[3.0, -4.0, 9.0]);
}

#[test]
fn tcn_receptive_field_from_gradient_mask() {
    for (levels, kernel) in [(2, 3), (3, 2), (1, 3)] {
        let field = receptive_field(levels, kernel);
        let t = field + 3;
        let cfg = FusionHeadConfig {
            tcn_levels: levels,
            tcn_kernel: kernel,
            seed: 3,
            ..FusionHeadConfig::new(FusionKind::Tcn, 4)
        };
        let (h, mut p) = FusionHead::new(&cfg).unwrap();
        // positive biases keep every ReLU open so no path is silently cut
        for param in p.iter_mut().filter(|q| q.name.ends_with("bias")) {
            param.value.data_mut().fill(10.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_clip(&mut rng, t, 1, 4).cast::<f64>().with_requires_grad(true);
        let g = Graph::<f64>::new();
        let vars = p.bind(&g, false);
        let input = g.leaf(x);
        let out = h.forward(&vars, input, None).unwrap().feature.sum().unwrap();
        let grad = g.backward(out).unwrap().wrt(input).unwrap().clone();
        let touched: Vec<bool> = grad.data().chunks(4).map(|f| f.iter().any(|v| *v != 0.0)).collect();
        let first = touched.iter().position(|b| *b).unwrap();
        assert_eq!(t - first, field, "levels {levels} kernel {kernel}: {touched:?}");
        assert!(touched[first..].iter().all(|b| *b));
    }
    assert_eq!(receptive_field(3, 3), 29);
}

#[test]
fn output_shapes_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = random_clip(&mut rng, 5, 4, 8);
    for kind in FusionKind::ALL {
        let cfg = FusionHeadConfig {
            num_heads: 4,
            hidden_dim: 6,
            seed: 77,
            ..FusionHeadConfig::new(kind, 8)
        };
        let (h1, p1) = FusionHead::new(&cfg).unwrap();
        let (h2, p2) = FusionHead::new(&cfg).unwrap();
        assert_eq!(p1, p2);
        let a = h1.fuse(&p1, &x, Some(0)).unwrap();
        let b = h2.fuse(&p2, &x, Some(0)).unwrap();
        let want = if kind.is_sequential() { 6 } else { 8 };
        assert_eq!(a.shape(), &[want], "{kind}");
        assert!(a.all_finite());
        assert_eq!(a, b);
    }
}

#[test]
fn clip_level_models_skip_fusion() {
    let model = Model::new(ModelConfig {
        clip_level: true,
        ..ModelConfig::new(FusionHeadConfig::new(FusionKind::Lstm, 4), 2)
    })
    .unwrap();
    let clip = fusion_probe::store::TokenClip {
        tokens: Tensor::new(vec![1, 1, 4], vec![0.5, -1.0, 2.0, 3.0]).unwrap(),
        cls_index: None,
        video_id: "v".into(),
        view: "a".into(),
        class_id: 0,
    };
    let (feature, logits) = model.infer(&clip).unwrap();
    assert_eq!(feature, clip.tokens.reshape(vec![4]).unwrap());
    assert_eq!(logits.shape(), &[2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_heads_are_order_blind_without_positions(
        seed in any::<u64>(),
        t in 1usize..6,
        kind_idx in 4usize..11,
    ) {
        let kind = FusionKind::ALL[kind_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_clip(&mut rng, t, 3, 8);
        let mut order: Vec<usize> = (0..t).collect();
        order.reverse();
        let (h, mut p) = head(kind, 8, seed, false);
        perturb(&mut p, seed.wrapping_add(1));
        let a = h.fuse(&p, &x, Some(0)).unwrap();
        let b = h.fuse(&p, &permute_frames(&x, &order), Some(0)).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-5);
    }
}
