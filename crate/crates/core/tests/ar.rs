use pointillist::ar::{
    grammar_mask, sample_sequence, ArConfig, ArModel, Condition, FarthestPointGroups, NextToken, SampleOptions,
    TrainItem,
};
use pointillist::cloud::{BoundPoint, BoundPointCloud};
use pointillist::codec::{encode, validate, TokenSequence};
use pointillist::geometry::Point3;
use pointillist::image::Image;
use pointillist::nn::gradcheck::{check_params, check_slice};
use pointillist::nn::{read_checkpoint, write_checkpoint, AdamW, AdamWConfig, Tensor};
use pointillist::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> ArConfig {
    ArConfig {
        coord_levels: 16,
        face_count: 6,
        d_model: 16,
        layers: 2,
        heads: 2,
        window: 16,
        stride: 8,
        max_points: 8,
        image_size: 16,
        patch: 8,
        anchors: 4,
        ..ArConfig::default()
    }
}

fn condition<T: pointillist::Scalar>(seed: u64, size: usize) -> Condition<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size * 3).map(|_| T::lit(rng.gen_range(0.0..1.0))).collect();
    let image = Image::from_vec(size, size, 3, data).unwrap();
    let vertices = (0..12)
        .map(|_| {
            Point3::new(
                T::lit(rng.gen_range(-1.0..1.0)),
                T::lit(rng.gen_range(-1.0..1.0)),
                T::lit(rng.gen_range(-1.0..1.0)),
            )
        })
        .collect();
    Condition { image, vertices }
}

fn sequence(cfg: &ArConfig, points: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = BoundPointCloud::new(
        (0..points)
            .map(|_| {
                BoundPoint::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0..cfg.face_count),
                )
            })
            .collect::<Vec<_>>(),
    );
    encode::<f64>(&cloud, &cfg.vocab()).unwrap().tokens
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

#[test]
fn logits_are_causal() {
    let cfg = tiny_cfg();
    let model = ArModel::<f64>::new(cfg.clone(), 1).unwrap();
    let cond = condition(2, 16);
    let tokens = sequence(&cfg, 2, 3)[..14].to_vec();
    let (base, _) = model.forward(&tokens, &cond).unwrap();
    for j in [0, 5, 13] {
        let mut t = tokens.clone();
        t[j] = (t[j] + 1) % cfg.vocab().size() as u32;
        let (changed, _) = model.forward(&t, &cond).unwrap();
        for i in 0..tokens.len() {
            let same = base.row(i) == changed.row(i);
            assert_eq!(same, i < j, "position {i} after perturbing {j}");
        }
    }
}

#[test]
fn cross_attention_is_live() {
    let cfg = tiny_cfg();
    let model = ArModel::<f64>::new(cfg.clone(), 4).unwrap();
    let cond = condition(5, 16);
    let ctx = model.condition_tokens(&cond).unwrap();
    let mut live = model.begin_with_tokens(&ctx).unwrap();
    let mut zero = model.begin_with_tokens(&Tensor::zeros(ctx.rows, ctx.cols)).unwrap();
    let a = model.step(&mut live, 0).unwrap();
    let b = model.step(&mut zero, 0).unwrap();
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-6, "conditioning had no effect ({diff:e})");
}

#[test]
fn softmax_rows_sum_to_one() {
    let cfg = tiny_cfg();
    let model = ArModel::<f32>::new(cfg.clone(), 6).unwrap();
    let (logits, _) = model.forward(&sequence(&cfg, 2, 7)[..12], &condition(8, 16)).unwrap();
    for r in 0..logits.rows {
        let row: Vec<f64> = logits.row(r).iter().map(|&x| x as f64).collect();
        let s: f64 = log_softmax(&row).iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn loss_matches_scalar_cross_entropy() {
    let cfg = ArConfig {
        window: 64,
        stride: 32,
        ..tiny_cfg()
    };
    let model = ArModel::<f64>::new(cfg.clone(), 9).unwrap();
    let vocab = cfg.vocab();
    let items: Vec<TrainItem<f64>> = (0..3)
        .map(|i| TrainItem {
            tokens: TokenSequence::new(sequence(&cfg, 2 + i, 10 + i as u64)).padded(24, &vocab).tokens,
            cond: condition(20 + i as u64, 16),
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0;
    for it in &items {
        let (logits, _) = model.forward(&it.tokens[..it.tokens.len() - 1], &it.cond).unwrap();
        for j in 0..logits.rows {
            let target = it.tokens[j + 1];
            if target == vocab.pad() || target == vocab.start() {
                continue;
            }
            let row: Vec<f64> = logits.row(j).to_vec();
            total -= log_softmax(&row)[target as usize];
            count += 1;
        }
    }
    let want = total / count as f64;
    let got = model.loss(&items).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert!(got > 0.0);
    let (with_grads, _) = model.loss_and_grads(&items, 1).unwrap();
    assert!((with_grads - want).abs() < 1e-6);
}

#[test]
fn padding_contributes_nothing() {
    let cfg = tiny_cfg();
    let vocab = cfg.vocab();
    let model = ArModel::<f64>::new(cfg.clone(), 11).unwrap();
    let pad = TrainItem {
        tokens: vec![vocab.pad(); 20],
        cond: condition(12, 16),
    };
    let (loss, grads) = model.loss_and_grads(std::slice::from_ref(&pad), 1).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grads.global_norm(), 0.0);

    let real = TrainItem {
        tokens: sequence(&cfg, 3, 13),
        cond: condition(14, 16),
    };
    let (a, ga) = model.loss_and_grads(&[real.clone()], 1).unwrap();
    let (b, gb) = model.loss_and_grads(&[real.clone(), pad], 1).unwrap();
    assert_eq!(a, b);
    for id in model.params.ids() {
        assert_eq!(ga.get(id), gb.get(id));
    }
    let mut padded = real.clone();
    padded.tokens = TokenSequence::new(real.tokens.clone()).padded(40, &vocab).tokens;
    assert_eq!(model.loss(&[padded]).unwrap(), a);
}

fn stepwise_log_prob(model: &ArModel<f64>, tokens: &[u32], cond: &Condition<f64>) -> f64 {
    let vocab = model.cfg.vocab();
    let mut st = model.begin(cond).unwrap();
    let mut lp = 0.0;
    for i in 0..tokens.len() - 1 {
        let logits = model.step(&mut st, tokens[i]).unwrap();
        let t = tokens[i + 1];
        if t != vocab.pad() && t != vocab.start() {
            lp += log_softmax(&logits)[t as usize];
        }
    }
    lp
}

#[test]
fn sequence_log_prob_factorizes() {
    for (window, stride) in [(64, 32), (16, 8), (16, 16), (16, 3)] {
        let cfg = ArConfig {
            window,
            stride,
            ..tiny_cfg()
        };
        let model = ArModel::<f64>::new(cfg.clone(), 15).unwrap();
        let cond = condition(16, 16);
        let tokens = sequence(&cfg, 8, 17);
        let joint = model.log_prob(&tokens, &cond).unwrap();
        let steps = stepwise_log_prob(&model, &tokens, &cond);
        assert!((joint - steps).abs() < 1e-6, "W={window} s={stride}: {joint} vs {steps}");
    }
}

#[test]
fn wide_window_equals_no_windowing() {
    let cfg = ArConfig {
        window: 64,
        stride: 7,
        ..tiny_cfg()
    };
    let model = ArModel::<f64>::new(cfg.clone(), 18).unwrap();
    let cond = condition(19, 16);
    let tokens = sequence(&cfg, 6, 20);
    let (logits, _) = model.forward(&tokens[..tokens.len() - 1], &cond).unwrap();
    let mut lp = 0.0;
    // S targets are context only
    for j in 3..logits.rows {
        lp += log_softmax(logits.row(j))[tokens[j + 1] as usize];
    }
    assert!((model.log_prob(&tokens, &cond).unwrap() - lp).abs() < 1e-6);
}

#[test]
fn cached_decoding_is_bit_identical() {
    for (window, stride) in [(64, 32), (16, 8), (16, 5)] {
        let cfg = ArConfig {
            window,
            stride,
            ..tiny_cfg()
        };
        let model = ArModel::<f32>::new(cfg.clone(), 21).unwrap();
        let cond = condition(22, 16);
        let tokens = sequence(&cfg, 8, 23);
        let mut st = model.begin(&cond).unwrap();
        for i in 0..tokens.len() {
            let logits = model.step(&mut st, tokens[i]).unwrap();
            let s = st.window_start();
            let (full, hidden) = model.forward(&tokens[s..=i], &cond).unwrap();
            assert_eq!(logits, full.row(i - s), "W={window} s={stride} token {i}");
            assert_eq!(st.hidden()[i], hidden.row(i - s));
        }
    }
}

struct Toy;

impl NextToken for Toy {
    // logits depend on the previous token only
    fn feed(&mut self, token: u32) -> pointillist::Result<Vec<f64>> {
        Ok(match token {
            0 => vec![0.2, 1.0, -0.5],
            1 => vec![1.5, -1.0, 0.3],
            _ => vec![0.0, 0.0, 0.0],
        })
    }
}

#[test]
fn toy_sampler_matches_product_of_conditionals() {
    // token 2 ends a sequence; at most 4 tokens after the prefix
    let opts = SampleOptions {
        temperature: 1.0,
        top_k: 0,
        max_len: 5,
    };
    let stop = |t: &[u32]| t.len() > 1 && *t.last().unwrap() == 2;
    let cond = |prev: u32| {
        let l = Toy.feed(prev).unwrap();
        let z: f64 = l.iter().map(|x| x.exp()).sum();
        l.iter().map(|x| x.exp() / z).collect::<Vec<_>>()
    };
    // exact distribution by enumeration
    let mut exact = std::collections::BTreeMap::new();
    let mut frontier = vec![(vec![0u32], 1.0)];
    while let Some((seq, p)) = frontier.pop() {
        if stop(&seq) || seq.len() >= opts.max_len {
            exact.insert(seq, p);
            continue;
        }
        let probs = cond(*seq.last().unwrap());
        for (t, q) in probs.iter().enumerate() {
            let mut next = seq.clone();
            next.push(t as u32);
            frontier.push((next, p * q));
        }
    }
    assert!((exact.values().sum::<f64>() - 1.0).abs() < 1e-12);

    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts = std::collections::BTreeMap::new();
    for _ in 0..n {
        let s = sample_sequence(&mut Toy, &[0], &opts, &mut rng, |_, _| {}, stop).unwrap();
        *counts.entry(s.tokens).or_insert(0usize) += 1;
    }
    assert!(counts.keys().all(|k| exact.contains_key(k)));
    let tv: f64 = exact
        .iter()
        .map(|(k, p)| (p - *counts.get(k).unwrap_or(&0) as f64 / n as f64).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.01, "total variation {tv}");
}

#[test]
fn constrained_sampling_is_always_grammatical() {
    let base = ArConfig {
        constrained: true,
        max_points: 6,
        ..tiny_cfg()
    };
    let vocab = base.vocab();
    for (seed, temp, top_k) in [(1, 1.0, 0), (2, 2.0, 0), (3, 0.0, 0), (4, 1.0, 3)] {
        let cfg = ArConfig {
            temperature: temp,
            top_k,
            ..base.clone()
        };
        let mut model = ArModel::<f32>::new(cfg.clone(), seed).unwrap();
        // a second model that strongly prefers tokens the grammar forbids
        let mut adversarial = model.clone();
        let head_b = adversarial.params.id("head.b").unwrap();
        adversarial.params.value_mut(head_b).data[vocab.pad() as usize] = 50.0;
        adversarial.params.value_mut(head_b).data[vocab.start() as usize] = 40.0;
        for m in [&mut model, &mut adversarial] {
            for s in 0..5 {
                let out = m.sample(&condition(seed * 10 + s, 16), s).unwrap();
                let report = validate(&out.sequence, &vocab);
                assert!(report.is_grammatical(), "{:?}", report.violations);
                assert_eq!(out.hidden.rows, 4 * report.points);
                assert!(report.points <= cfg.max_points);
            }
        }
    }
}

#[test]
fn constrained_cap_forces_end_block() {
    let cfg = ArConfig {
        constrained: true,
        max_points: 3,
        ..tiny_cfg()
    };
    let vocab = cfg.vocab();
    let mut model = ArModel::<f32>::new(cfg.clone(), 30).unwrap();
    let head_b = model.params.id("head.b").unwrap();
    model.params.value_mut(head_b).data[vocab.end() as usize] = -50.0;
    let out = model.sample(&condition(31, 16), 0).unwrap();
    assert!(out.truncated);
    let report = validate(&out.sequence, &vocab);
    assert!(report.is_grammatical());
    assert_eq!(report.points, 3);

    let mut allowed = vec![false; vocab.size()];
    grammar_mask(&[vocab.start(); 4], &vocab, 3, &mut allowed);
    assert!(!allowed[vocab.end() as usize], "an empty body is not grammatical");
}

#[test]
fn greedy_sampling_is_deterministic() {
    let cfg = ArConfig {
        temperature: 0.0,
        max_points: 5,
        ..tiny_cfg()
    };
    let model = ArModel::<f32>::new(cfg, 40).unwrap();
    let cond = condition(41, 16);
    let a = model.sample(&cond, 1).unwrap();
    let b = model.sample(&cond, 1).unwrap();
    let c = model.sample(&cond, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.sequence, c.sequence);
}

#[test]
fn seeded_sampling_is_reproducible() {
    let model = ArModel::<f32>::new(tiny_cfg(), 42).unwrap();
    let cond = condition(43, 16);
    assert_eq!(model.sample(&cond, 7).unwrap(), model.sample(&cond, 7).unwrap());
}

#[test]
fn sampled_hidden_states_match_teacher_forcing() {
    let cfg = ArConfig {
        constrained: true,
        max_points: 5,
        ..tiny_cfg()
    };
    let model = ArModel::<f32>::new(cfg, 44).unwrap();
    let cond = condition(45, 16);
    let out = model.sample(&cond, 3).unwrap();
    assert_eq!(model.hidden_states(&cond, &out.sequence).unwrap(), out.hidden);
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let mut model = ArModel::<f64>::new(cfg.clone(), 50).unwrap();
    // larger weights than the default init so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for id in model.params.ids().collect::<Vec<_>>() {
        for v in &mut model.params.value_mut(id).data {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let items = vec![
        TrainItem {
            tokens: sequence(&cfg, 6, 52),
            cond: condition(53, 16),
        },
        TrainItem {
            tokens: sequence(&cfg, 1, 54),
            cond: condition(55, 16),
        },
    ];
    let (_, grads) = model.loss_and_grads(&items, 1).unwrap();
    let report = check_params(&mut model.params.clone(), &grads, 10, 1e-5, &mut rng, |p| {
        let mut m = model.clone();
        m.params = p.clone();
        m.loss(&items).unwrap()
    });
    assert!(report.probes >= 10 * model.params.len());
    assert!(report.worst < 1e-3, "{:?}", report.worst_at);
}

#[test]
fn batch_reduction_is_thread_invariant() {
    let cfg = tiny_cfg();
    let model = ArModel::<f32>::new(cfg.clone(), 56).unwrap();
    let items: Vec<_> = (0..4)
        .map(|i| TrainItem {
            tokens: sequence(&cfg, 2 + i, 57 + i as u64),
            cond: condition(60 + i as u64, 16),
        })
        .collect();
    let (a, ga) = model.loss_and_grads(&items, 1).unwrap();
    let (b, gb) = model.loss_and_grads(&items, 3).unwrap();
    assert_eq!(a, b);
    for id in model.params.ids() {
        assert_eq!(ga.get(id), gb.get(id));
    }
}

#[test]
fn image_embedding_pixel_gradient() {
    let model = ArModel::<f64>::new(tiny_cfg(), 61).unwrap();
    let cond = condition::<f64>(62, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let up = Tensor::from_fn(4, 16, |_, _| rng.gen_range(-1.0..1.0));
    let grad = model.embed_image_vjp(&cond.image, &up).unwrap();
    let mut img = cond.image.clone();
    let w = img.width;
    let report = check_slice("pixels", &mut img.data, &grad.data, 20, 1e-6, &mut rng, |d| {
        let im = Image::from_vec(w, w, 3, d.to_vec()).unwrap();
        let t = model.embed_image(&im).unwrap();
        t.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
    });
    assert!(report.worst < 1e-3, "{:?}", report.worst_at);
}

#[test]
fn image_embedding_shapes() {
    let cfg = ArConfig {
        image_size: 64,
        ..tiny_cfg()
    };
    let model = ArModel::<f32>::new(cfg, 64).unwrap();
    let img = Image::<f32>::new(64, 64, 3);
    let t = model.embed_image(&img).unwrap();
    assert_eq!((t.rows, t.cols), (64, 16));
    // a constant image gives identical rows up to the positional term
    let pos = model.params.value(model.params.id("img.pos").unwrap());
    for r in 1..t.rows {
        for c in 0..t.cols {
            let a = t.at(r, c) - pos.at(r, c);
            let b = t.at(0, c) - pos.at(0, c);
            assert!((a - b).abs() < 1e-6);
        }
    }
    assert!(matches!(
        model.embed_image(&Image::<f32>::new(60, 64, 3)),
        Err(Error::BadImageShape { .. })
    ));
}

#[test]
fn point_embedding_is_order_and_duplicate_invariant() {
    let model = ArModel::<f64>::new(tiny_cfg(), 65).unwrap();
    let verts = condition::<f64>(66, 16).vertices;
    let base = model.embed_points(&verts).unwrap();
    assert_eq!(base.rows, 4);
    let mut rev = verts.clone();
    rev.reverse();
    rev.rotate_left(5);
    assert!(model.embed_points(&rev).unwrap().max_abs_diff(&base) < 1e-12);
    let mut dup = verts.clone();
    dup.push(verts[3]);
    dup.insert(0, verts[7]);
    assert!(model.embed_points(&dup).unwrap().max_abs_diff(&base) < 1e-12);
    assert!(matches!(
        model.embed_points(&verts[..7]),
        Err(Error::TooFewPoints { min: 8, got: 7 })
    ));
}

#[test]
fn full_anchor_count_is_identity_grouping() {
    let verts: Vec<Point3<f64>> = condition::<f64>(67, 16)
        .vertices
        .into_iter()
        .chain(condition::<f64>(68, 16).vertices.into_iter().take(4))
        .collect();
    assert_eq!(verts.len(), 16);
    let g = FarthestPointGroups::new(&verts, 16);
    assert_eq!(g.anchors.len(), 16);
    let mut seen = g.groups.clone();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 16);
    for (i, &grp) in g.groups.iter().enumerate() {
        assert_eq!(g.anchors[grp], i);
    }
}

#[test]
fn checkpoint_round_trip() {
    let model = ArModel::<f32>::new(tiny_cfg(), 70).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &model.to_checkpoint()).unwrap();
    let mut again = Vec::new();
    write_checkpoint(&mut again, &model.to_checkpoint()).unwrap();
    assert_eq!(bytes, again);
    let back = ArModel::<f32>::from_checkpoint(&read_checkpoint(&bytes[..]).unwrap()).unwrap();
    assert_eq!(back.cfg, model.cfg);
    let cond = condition(71, 16);
    let toks = sequence(&model.cfg, 2, 72);
    assert_eq!(back.forward(&toks, &cond).unwrap(), model.forward(&toks, &cond).unwrap());

    let mut ck = model.to_checkpoint();
    ck.config = ck.config.replace("\"ar\"", "\"decoder\"");
    assert!(ArModel::<f32>::from_checkpoint(&ck).is_err());
}

#[test]
fn overfits_a_small_batch() {
    let cfg = ArConfig {
        d_model: 32,
        layers: 1,
        heads: 2,
        window: 32,
        stride: 16,
        ..tiny_cfg()
    };
    let mut model = ArModel::<f32>::new(cfg.clone(), 80).unwrap();
    let items: Vec<_> = (0..2)
        .map(|i| TrainItem {
            tokens: sequence(&cfg, 3, 81 + i),
            cond: condition(90 + i, 16),
        })
        .collect();
    let mut opt = AdamW::new(AdamWConfig::default(), &model.params);
    let first = model.loss(&items).unwrap();
    for _ in 0..300 {
        model.train_step(&items, &mut opt, 3e-3, 1).unwrap();
    }
    let last = model.loss(&items).unwrap();
    assert!(last < 0.1, "loss {first} -> {last}");
}
