use super::*;
use crate::nn::{AttentionMask, Session, StackOptions};
use crate::rng::RngStream;
use crate::tensor::opcount;
use crate::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, RngStream::new(seed).normal_vec(n, 1.0)).unwrap()
}

fn rand_tokens(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut r = RngStream::new(seed);
    (0..len).map(|_| r.below(vocab)).collect()
}

fn tiny(mode: Mode, pattern: &str, t: usize, n: usize) -> FitConfig {
    FitConfig {
        pattern: pattern.into(),
        data_dim: 8,
        latent_dim: 8,
        groups: t,
        group_size: n,
        latents: 2,
        local_heads: 2,
        global_heads: 2,
        cross_heads: 2,
        mode,
        input_dim: 7,
        output_dim: 7,
        ..FitConfig::default()
    }
}

fn randomized(cfg: FitConfig, seed: u64) -> FitModel {
    let mut model = FitModel::new(cfg).unwrap();
    model.params.randomize(&RngStream::new(seed).split("perturb"), 0.3);
    model
}

fn grouped(x: &Tensor, n: usize) -> GroupedTokens {
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    GroupedTokens::new(x.reshape(&[b, l / n, n, c]).unwrap(), None, 0).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn pattern_grammar() {
    let p = Pattern::parse("L4,G2,L4,G2,L4").unwrap();
    assert_eq!(p.blocks, vec![(4, 2), (4, 2)]);
    assert_eq!(p.final_local, 4);
    assert_eq!(p.render(), "L4,G2,L4,G2,L4");
    assert_eq!(Pattern::parse("L3").unwrap().blocks, vec![]);
    for bad in ["G1", "L1,G1", "L1,L1,G1", "L1,X2,L1", "", "Lx"] {
        assert!(Pattern::parse(bad).is_err(), "{bad}");
    }
}

#[test]
fn group_tokens_contiguous_split() {
    let x = Tensor::new(&[1, 6, 1], (0..6).map(f64::from).collect()).unwrap();
    let g = group_tokens(&x, 3, false).unwrap();
    assert_eq!(g.values.shape(), &[1, 3, 2, 1]);
    assert_eq!(g.values.data(), x.data());
    assert!(g.valid.is_none());

    let one = group_tokens(&x, 1, false).unwrap();
    assert_eq!(one.values.shape(), &[1, 1, 6, 1]);
    let each = group_tokens(&x, 6, false).unwrap();
    assert_eq!(each.values.shape(), &[1, 6, 1, 1]);
}

#[test]
fn group_tokens_padding() {
    let x = Tensor::new(&[1, 5, 1], vec![1.0; 5]).unwrap();
    assert!(matches!(group_tokens(&x, 2, false), Err(crate::FitError::Usage(_))));
    let g = group_tokens(&x, 2, true).unwrap();
    assert_eq!(g.values.shape(), &[1, 2, 3, 1]);
    assert_eq!(g.valid.as_deref(), Some(&[true, true, true, true, true, false][..]));
    assert_eq!(g.values.data()[5], 0.0);
}

#[test]
fn overlapped_groups_stride() {
    let x = Tensor::new(&[1, 6, 1], (0..6).map(f64::from).collect()).unwrap();
    let (g, prefix) = build_overlapped_groups(&x, 3, 1, true).unwrap();
    assert_eq!(g.values.shape(), &[1, 3, 3, 1]);
    assert_eq!(g.values.data(), &[0.0, 1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 5.0, 0.0]);
    assert_eq!(g.valid.as_deref().unwrap()[8], false);
    let flagged: Vec<usize> = (0..9).filter(|&k| prefix[k]).collect();
    assert_eq!(flagged, vec![3, 6]);
    assert!(build_overlapped_groups(&x, 3, 1, false).is_err());
    assert!(build_overlapped_groups(&x, 3, 3, true).is_err());
}

#[test]
fn overlapped_without_prefix_is_contiguous() {
    let x = rand_tensor(&[2, 8, 3], 1);
    let (a, mask) = build_overlapped_groups(&x, 4, 0, false).unwrap();
    let b = group_tokens(&x, 2, false).unwrap();
    assert_eq!(a.values.data(), b.values.data());
    assert!(mask.iter().all(|m| !m));
}

#[test]
fn overlapped_letters_become_prefixes() {
    // Two leading start symbols, then A.. ; groups of five with one prefix.
    let text: Vec<char> = "^^ABCDEFGHIJK".chars().collect();
    let layout = GroupLayout::overlapped(text.len(), 5, 1, false).unwrap();
    let groups: Vec<String> = layout
        .arrange(&text, '_')
        .chunks(5)
        .map(|c| c.iter().collect())
        .collect();
    assert_eq!(groups, vec!["^^ABC", "CDEFG", "GHIJK"]);
    let prefixes: Vec<char> = (0..15)
        .filter(|&s| layout.is_prefix(s))
        .map(|s| text[layout.slots[s].unwrap()])
        .collect();
    assert_eq!(prefixes, vec!['C', 'G']);
}

#[test]
fn latents_broadcast_and_group_offsets() {
    let cfg = FitConfig {
        pattern: "L0".into(),
        data_dim: 8,
        latent_dim: 768,
        groups: 16,
        latents: 32,
        global_heads: 1,
        cross_heads: 1,
        local_heads: 1,
        mode: Mode::Encoder,
        ..FitConfig::default()
    };
    let model = FitModel::new(cfg).unwrap();
    let s = Session::inference(&model.params);
    let lat = model.initialize_latents(&s, 2, 16).unwrap();
    assert_eq!(lat.shape(), &[2, 16, 32, 768]);
    let half = lat.numel() / 2;
    assert_eq!(&lat.data()[..half], &lat.data()[half..]);

    let model = randomized(tiny(Mode::Encoder, "L1,G1,L1", 3, 4), 2);
    let s = Session::inference(&model.params);
    let lat = model.initialize_latents(&s, 1, 3).unwrap();
    let g = &model.params.get(model.latent_group).value;
    let (m, d) = (2, 8);
    for k in 0..m * d {
        let diff = lat.data()[2 * m * d + k] - lat.data()[k];
        assert!((diff - (g[2 * d + k % d] - g[k % d])).abs() <= 1e-12);
    }
}

#[test]
fn zero_init_forward_adds_positions_only() {
    let mut model = FitModel::new(tiny(Mode::Encoder, "L1,G1,L1,G1,L1", 2, 4)).unwrap();
    for id in [model.pos.group, model.pos.within] {
        let len = model.params.get(id).value.len();
        model.params.get_mut(id).value = RngStream::new(id.index() as u64).normal_vec(len, 1.0);
    }
    let s = Session::inference(&model.params);
    let x = rand_tensor(&[2, 8, 8], 3);
    let (out, _) = model.fit_forward(&s, &grouped(&x, 4)).unwrap();
    let expect = x
        .reshape(&[2, 2, 4, 8])
        .unwrap()
        .add(&model.positional(&s, 2, 0).unwrap())
        .unwrap();
    assert_eq!(out.data(), expect.data());
}

#[test]
fn local_only_equals_block_diagonal_stack() {
    let model = randomized(tiny(Mode::Encoder, "L2", 3, 4), 4);
    let s = Session::inference(&model.params);
    let x = rand_tensor(&[1, 12, 8], 5);
    let (out, _) = model.fit_forward(&s, &grouped(&x, 4)).unwrap();
    let with_pos = x
        .reshape(&[1, 3, 4, 8])
        .unwrap()
        .add(&model.positional(&s, 3, 0).unwrap())
        .unwrap()
        .reshape(&[1, 12, 8])
        .unwrap();
    let mask = AttentionMask::block_diagonal(3, 4);
    let flat = model
        .final_local
        .forward(&s, &with_pos, Some(&mask), None, StackOptions::default())
        .unwrap();
    assert_eq!(out.data(), flat.data());
}

/// Largest change at any token other than `j` after perturbing token `j`.
fn cross_token_influence(model: &FitModel, x: &Tensor, n: usize, j: usize, others: &dyn Fn(usize) -> bool) -> f64 {
    let s = Session::inference(&model.params);
    let c = x.shape()[2];
    let (base, _) = model.fit_forward(&s, &grouped(x, n)).unwrap();
    let mut v = x.to_vec();
    v[j * c] += 1e-3;
    let bumped = Tensor::new(x.shape(), v).unwrap();
    let (out, _) = model.fit_forward(&s, &grouped(&bumped, n)).unwrap();
    (0..x.shape()[1])
        .filter(|&i| others(i))
        .map(|i| max_abs_diff(&out.data()[i * c..(i + 1) * c], &base.data()[i * c..(i + 1) * c]))
        .fold(0.0, f64::max)
}

#[test]
fn rin_like_tokens_talk_only_through_latents() {
    let mut cfg = tiny(Mode::Encoder, "L1,G1,L1", 1, 6);
    cfg.local_self_attention = false;
    let x = rand_tensor(&[1, 6, 8], 6);
    let open = randomized(cfg.clone(), 7);
    assert!(cross_token_influence(&open, &x, 6, 2, &|i| i != 2) > 1e-8);
    cfg.danger.disable_cross_attention = true;
    let closed = randomized(cfg, 7);
    assert_eq!(cross_token_influence(&closed, &x, 6, 2, &|i| i != 2), 0.0);
}

#[test]
fn groups_are_independent_without_cross_attention() {
    let mut cfg = tiny(Mode::Encoder, "L1,G1,L2", 3, 4);
    cfg.danger.disable_cross_attention = true;
    let model = randomized(cfg, 8);
    let x = rand_tensor(&[1, 12, 8], 9);
    for j in [0, 5, 11] {
        let infl = cross_token_influence(&model, &x, 4, j, &|i| i / 4 != j / 4);
        assert_eq!(infl, 0.0);
    }
    let open = randomized(tiny(Mode::Encoder, "L1,G1,L2", 3, 4), 8);
    assert!(cross_token_influence(&open, &x, 4, 0, &|i| i / 4 != 0) > 1e-8);
}

#[test]
fn batch_rows_are_independent() {
    let model = randomized(tiny(Mode::Encoder, "L1,G1,L1", 2, 3), 10);
    let s = Session::inference(&model.params);
    let x = rand_tensor(&[2, 6, 8], 11);
    let (joint, jl) = model.fit_forward(&s, &grouped(&x, 3)).unwrap();
    for b in 0..2 {
        let row = x.slice_axis(0, b, b + 1).unwrap();
        let (alone, al) = model.fit_forward(&s, &grouped(&row, 3)).unwrap();
        let half = joint.numel() / 2;
        assert_eq!(&joint.data()[b * half..(b + 1) * half], alone.data());
        let lhalf = jl.numel() / 2;
        assert_eq!(&jl.data()[b * lhalf..(b + 1) * lhalf], al.data());
    }
}

#[test]
fn hand_counted_parameters() {
    let cfg = FitConfig {
        pattern: "L1".into(),
        data_dim: 8,
        latent_dim: 8,
        groups: 2,
        group_size: 3,
        latents: 1,
        local_heads: 1,
        global_heads: 1,
        cross_heads: 1,
        input_dim: 4,
        output_dim: 4,
        ..FitConfig::default()
    };
    // embed 5*8, positions (2+3)*8, latents (1+2)*8,
    // layer: norms 2*16, attention 4*(64+8), ffn (8*32+32)+(32*8+8),
    // final norm 16, head 8*4+4.
    let expect = 40 + 40 + 24 + (32 + 288 + 552) + 16 + 36;
    assert_eq!(parameter_count(&cfg).unwrap(), expect);
    assert_eq!(FitModel::new(cfg).unwrap().parameter_count(), expect);
}

#[test]
fn latent_count_only_touches_latent_tables() {
    let a = tiny(Mode::Encoder, "L1,G2,L1", 4, 4);
    let b = FitConfig { latents: 5, ..a.clone() };
    let diff = parameter_count(&b).unwrap() - parameter_count(&a).unwrap();
    assert_eq!(diff, 3 * a.latent_dim);
}

#[test]
fn depth_scales_stack_parameters() {
    let shallow = tiny(Mode::Encoder, "L1,G1,L1", 2, 4);
    let deep = FitConfig { pattern: "L2,G2,L2".into(), ..shallow.clone() };
    let none = FitConfig { pattern: "L0,G0,L0".into(), ..shallow.clone() };
    let base = parameter_count(&none).unwrap();
    let one = parameter_count(&shallow).unwrap() - base;
    let two = parameter_count(&deep).unwrap() - base;
    assert_eq!(two, 2 * one);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let mut cfg = tiny(Mode::Encoder, "L1,G1,L1", 2, 2);
    cfg.data_dim = 4;
    cfg.latent_dim = 4;
    cfg.latents = 1;
    cfg.ffn_expansion = 1;
    cfg.input = InputKind::Features;
    cfg.input_dim = 2;
    cfg.output_dim = 2;
    let model = randomized(cfg, 12);
    let x = rand_tensor(&[1, 4, 2], 13);
    let target = RngStream::new(14).normal_vec(8, 1.0);
    let loss = |s: &Session<'_>| {
        let (_, out) = model.predict(s, Input::Features(&x)).unwrap();
        out.mse(&target, None).unwrap()
    };
    let g = Graph::new();
    let s = Session::training(&model.params, &g);
    let grads = s.param_grads(&loss(&s).backward().unwrap());
    let mut probe = model.params.clone();
    let h = 1e-5;
    for id in model.params.ids() {
        let a = grads[id.index()].as_ref().unwrap();
        for k in 0..a.len() {
            let orig = probe.get(id).value[k];
            probe.get_mut(id).value[k] = orig + h;
            let up = loss(&Session::inference(&probe)).item().unwrap();
            probe.get_mut(id).value[k] = orig - h;
            let down = loss(&Session::inference(&probe)).item().unwrap();
            probe.get_mut(id).value[k] = orig;
            let num = (up - down) / (2.0 * h);
            let scale = a[k].abs().max(num.abs()).max(1e-6);
            assert!((a[k] - num).abs() / scale <= 1e-3, "{}[{k}] {} vs {num}", probe.get(id).name, a[k]);
        }
    }
}

#[test]
fn shift_examples() {
    let lat = rand_tensor(&[2, 3, 2, 2], 15);
    let sh = shift_latents(&lat).unwrap();
    assert_eq!(sh.shifted.shape(), &[6, 2, 2]);
    let grp = |t: &Tensor, b: usize, g: usize| t.data()[(b * 3 + g) * 4..(b * 3 + g + 1) * 4].to_vec();
    for b in 0..2 {
        assert_eq!(grp(&sh.shifted, b, 0), vec![0.0; 4]);
        assert_eq!(grp(&sh.shifted, b, 1), grp(&lat, b, 0));
        assert_eq!(grp(&sh.shifted, b, 2), grp(&lat, b, 1));
        assert_eq!(&sh.last_group.data()[b * 4..(b + 1) * 4], &grp(&lat, b, 2)[..]);
    }
    assert_eq!(shift_back_latents(&sh).unwrap().data(), lat.data());

    let single = rand_tensor(&[1, 1, 2, 2], 16);
    let sh = shift_latents(&single).unwrap();
    assert!(sh.shifted.data().iter().all(|v| *v == 0.0));
    assert_eq!(sh.last_group.data(), single.data());
    assert_eq!(shift_back_latents(&sh).unwrap().data(), single.data());

    let bad = ShiftedLatents {
        shifted: Tensor::zeros(&[3, 2, 2]),
        last_group: Tensor::zeros(&[2, 1, 2, 2]),
    };
    assert!(matches!(shift_back_latents(&bad), Err(crate::FitError::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shift_round_trip(b in 1usize..3, t in 1usize..5, m in 1usize..3, d in 1usize..4, seed in 0u64..1000) {
        let lat = rand_tensor(&[b, t, m, d], seed);
        let back = shift_back_latents(&shift_latents(&lat).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), lat.shape());
        prop_assert_eq!(back.data(), lat.data());
    }

    #[test]
    fn parameter_count_is_exact(
        l1 in 0usize..3, g1 in 0usize..3, l2 in 0usize..3,
        heads in 1usize..3, m in 1usize..4, t in 1usize..4, n in 1usize..5,
        tokens in any::<bool>(), cross_ffn in any::<bool>(), sa in any::<bool>(),
    ) {
        let cfg = FitConfig {
            pattern: format!("L{l1},G{g1},L{l2}"),
            data_dim: 4,
            latent_dim: 6,
            groups: t,
            group_size: n,
            latents: m,
            local_heads: heads,
            global_heads: heads,
            cross_heads: heads,
            local_self_attention: sa,
            cross_ffn,
            mode: Mode::Encoder,
            input: if tokens { InputKind::Tokens } else { InputKind::Features },
            ..FitConfig::default()
        };
        prop_assert_eq!(parameter_count(&cfg).unwrap(), FitModel::new(cfg).unwrap().parameter_count());
    }

    #[test]
    fn forward_shapes(blocks in 0usize..3, t in 1usize..4, n in 1usize..4, m in 1usize..3, b in 1usize..3) {
        let mut pattern = String::from("L1");
        for _ in 0..blocks {
            pattern.push_str(",G1,L1");
        }
        let mut cfg = tiny(Mode::Encoder, &pattern, t, n);
        cfg.latents = m;
        let model = randomized(cfg, 1);
        let s = Session::inference(&model.params);
        let x = rand_tensor(&[b, t * n, 8], 2);
        let (h, lat) = model.fit_forward(&s, &grouped(&x, n)).unwrap();
        prop_assert_eq!(h.shape(), &[b, t, n, 8]);
        prop_assert_eq!(lat.shape(), &[b, t, m, 8]);
    }
}

fn ar_model(pattern: &str, t: usize, n: usize, p: usize, seed: u64) -> FitModel {
    let mut cfg = tiny(Mode::Autoregressive, pattern, t, n);
    cfg.prefix_overlap = p;
    randomized(cfg, seed)
}

fn logits_for(model: &FitModel, tokens: &[usize]) -> (GroupLayout, Tensor) {
    let s = Session::inference(&model.params);
    model.predict(&s, Input::Tokens { ids: tokens, batch: 1 }).unwrap()
}

/// Logit rows in flat order, taken from each position's non-prefix slot.
fn flat_logits(layout: &GroupLayout, logits: &Tensor) -> Vec<Vec<f64>> {
    let v = logits.shape()[3];
    (0..layout.len)
        .map(|q| {
            let slot = layout.slot_of(q).unwrap();
            logits.data()[slot * v..(slot + 1) * v].to_vec()
        })
        .collect()
}

#[test]
fn single_group_matches_zero_latent_oracle() {
    let model = ar_model("L1,G1,L1,G2,L1", 1, 5, 0, 17);
    let tokens = rand_tokens(5, 7, 18);
    let (_, logits) = logits_for(&model, &tokens);

    let s = Session::inference(&model.params);
    let embed = match &model.embed {
        Embedding::Table(id) => s.param(*id).gather_rows(&tokens).unwrap(),
        Embedding::Projection(_) => unreachable!(),
    };
    let mut x = embed
        .add(&model.positional(&s, 1, 0).unwrap().reshape(&[5, 8]).unwrap())
        .unwrap()
        .reshape(&[1, 5, 8])
        .unwrap();
    let causal = AttentionMask::causal(5);
    let zeros = Tensor::zeros(&[1, 2, 8]);
    for block in &model.blocks {
        x = block.local.forward(&s, &x, Some(&causal), None, StackOptions::default()).unwrap();
        x = block.x2l.forward(&s, &x, &zeros, None).unwrap();
    }
    x = model.final_local.forward(&s, &x, Some(&causal), None, StackOptions::default()).unwrap();
    let expect = model.output(&s, &x).unwrap();
    assert!(max_abs_diff(logits.data(), expect.data()) <= 1e-10);
}

#[test]
fn perturbing_future_tokens_leaves_past_logits() {
    let model = ar_model("L1,G1,L1,G1,L1", 3, 4, 0, 19);
    let s = Session::inference(&model.params);
    let x = rand_tensor(&[1, 12, 8], 20);
    let base = model.fitar_forward(&s, &grouped(&x, 4)).unwrap();
    for q in [1, 4, 7, 11] {
        let mut v = x.to_vec();
        v[q * 8] += 1e-3;
        let out = model
            .fitar_forward(&s, &grouped(&Tensor::new(&[1, 12, 8], v).unwrap(), 4))
            .unwrap();
        assert_eq!(&out.data()[..q * 7], &base.data()[..q * 7], "perturbing {q}");
        assert_ne!(&out.data()[q * 7..], &base.data()[q * 7..]);
    }
}

#[test]
fn unshifted_latents_leak_the_future() {
    let mut cfg = tiny(Mode::Autoregressive, "L1,G1,L1", 2, 4);
    cfg.danger.unshifted_latents = true;
    let model = randomized(cfg, 21);
    let s = Session::inference(&model.params);
    let x = rand_tensor(&[1, 8, 8], 22);
    let base = model.fitar_forward(&s, &grouped(&x, 4)).unwrap();
    let mut v = x.to_vec();
    v[3 * 8] += 1e-3;
    let out = model
        .fitar_forward(&s, &grouped(&Tensor::new(&[1, 8, 8], v).unwrap(), 4))
        .unwrap();
    assert!(max_abs_diff(&out.data()[..3 * 7], &base.data()[..3 * 7]) > 1e-9);
}

#[test]
fn global_pathway_reaches_next_group() {
    let model = ar_model("L1,G1,L1", 2, 3, 0, 23);
    let g = Graph::new();
    let s = Session::training(&model.params, &g);
    let x = g.track(&rand_tensor(&[1, 6, 8], 24));
    let logits = model.fitar_forward(&s, &grouped(&x, 3)).unwrap();
    // Last slot of group 1, first logit.
    let pick = logits.slice_axis(1, 1, 2).unwrap().slice_axis(2, 2, 3).unwrap().slice_axis(3, 0, 1).unwrap();
    let grads = pick.sum().backward().unwrap();
    let gx = grads.get(&x).unwrap();
    assert!(gx[..3 * 8].iter().any(|v| v.abs() > 1e-10));
}

#[test]
fn causal_gradients_are_exactly_zero() {
    let model = ar_model("L1,G1,L1,G1,L1", 3, 2, 0, 25);
    let g = Graph::new();
    let s = Session::training(&model.params, &g);
    let x = g.track(&rand_tensor(&[1, 6, 8], 26));
    let logits = model.fitar_forward(&s, &grouped(&x, 2)).unwrap();
    for p in 0..6 {
        let pick = logits.reshape(&[6, 7]).unwrap().slice_axis(0, p, p + 1).unwrap().sum();
        let grads = pick.backward().unwrap();
        let gx = grads.get_or_zeros(&x);
        assert!(gx[(p + 1) * 8..].iter().all(|v| *v == 0.0), "position {p}");
    }
}

#[test]
fn ar_loss_counts_non_prefix_slots() {
    let (t, n, v) = (3, 4, 5);
    let logits = rand_tensor(&[1, t, n, v], 27);
    let targets: Vec<Option<usize>> = (0..t * n).map(|k| Some(k % v)).collect();
    let loss = ar_loss(&logits, &targets, 1).unwrap().item().unwrap();
    let row_nll = |k: usize| {
        let row = &logits.data()[k * v..(k + 1) * v];
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        lse - row[k % v]
    };
    let kept: Vec<usize> = (0..t * n).filter(|k| !(k / n > 0 && k % n == 0)).collect();
    assert_eq!(kept.len(), 10);
    let expect = kept.iter().map(|&k| row_nll(k)).sum::<f64>() / 10.0;
    assert!((loss - expect).abs() <= 1e-12);

    let plain = ar_loss(&logits, &targets, 0).unwrap().item().unwrap();
    let all = (0..t * n).map(row_nll).sum::<f64>() / 12.0;
    assert!((plain - all).abs() <= 1e-12);

    let uniform = Tensor::zeros(&[2, 2, 3, 9]);
    let tg: Vec<Option<usize>> = (0..12).map(|k| Some(k % 9)).collect();
    let l = ar_loss(&uniform, &tg, 0).unwrap().item().unwrap();
    assert!((l - 9f64.ln()).abs() <= 1e-12);

    assert!(matches!(ar_loss(&logits, &targets, 4), Err(crate::FitError::Usage(_))));
}

fn teacher_forcing_gap(model: &FitModel, len: usize, seed: u64) -> f64 {
    let tokens = rand_tokens(len, 7, seed);
    let (layout, logits) = logits_for(model, &tokens);
    let reference = flat_logits(&layout, &logits);
    let mut dec = Decoder::new(model).unwrap();
    let mut worst: f64 = 0.0;
    for (q, &tok) in tokens.iter().enumerate() {
        let step = dec.feed(tok).unwrap();
        worst = worst.max(max_abs_diff(&step, &reference[q]));
    }
    worst
}

#[test]
fn incremental_decoding_matches_teacher_forcing() {
    for (pattern, t, n, p, len) in [
        ("L1,G1,L1", 3, 4, 0, 12),
        ("L1,G1,L1", 3, 4, 0, 9),
        ("L2,G1,L1,G2,L1", 4, 3, 0, 10),
        ("L1,G1,L1", 4, 4, 1, 13),
        ("L1,G2,L1", 4, 5, 2, 14),
        ("L1", 2, 4, 0, 8),
        ("L1,G1,L0", 3, 2, 1, 4),
    ] {
        let model = ar_model(pattern, t, n, p, 28);
        let gap = teacher_forcing_gap(&model, len, 29);
        assert!(gap <= 1e-9, "{pattern} t={t} n={n} p={p}: {gap}");
    }
}

#[test]
fn generation_edges() {
    let model = ar_model("L1,G1,L1", 3, 4, 1, 30);
    assert_eq!(generate(&model, &[1, 2], 0, Sampler::Greedy, 0).unwrap(), vec![1, 2]);
    let max = model.config.max_len();
    assert_eq!(max, 10);
    assert!(matches!(
        generate(&model, &[1, 2], max - 1, Sampler::Greedy, 0),
        Err(crate::FitError::Usage(_))
    ));
    let a = generate(&model, &[3], max - 1, Sampler::Greedy, 0).unwrap();
    let b = generate(&model, &[3], max - 1, Sampler::Greedy, 9).unwrap();
    assert_eq!(a, b);
    let cold = generate(&model, &[3], max - 1, Sampler::Temperature(1e-9), 4).unwrap();
    assert_eq!(a, cold);
    let warm1 = generate(&model, &[3], max - 1, Sampler::Temperature(1.5), 5).unwrap();
    let warm2 = generate(&model, &[3], max - 1, Sampler::Temperature(1.5), 5).unwrap();
    assert_eq!(warm1, warm2);
}

#[test]
fn greedy_generation_is_teacher_forced_argmax() {
    let model = ar_model("L1,G1,L1", 3, 3, 0, 31);
    let out = generate(&model, &[4, 1], 7, Sampler::Greedy, 0).unwrap();
    let (layout, logits) = logits_for(&model, &out);
    let rows = flat_logits(&layout, &logits);
    for q in 1..out.len() - 1 {
        let mut rng = RngStream::new(0);
        assert_eq!(sample(&rows[q], Sampler::Greedy, &mut rng), out[q + 1]);
    }
}

#[test]
fn decode_attention_work_is_bounded_per_token() {
    let model = ar_model("L1,G1,L1", 8, 4, 0, 32);
    let mut dec = Decoder::new(&model).unwrap();
    let mut per_token = Vec::new();
    for (k, tok) in rand_tokens(32, 7, 33).into_iter().enumerate() {
        opcount::start();
        dec.feed(tok).unwrap();
        per_token.push((k, opcount::stop().score_evals));
    }
    let (n, m, t) = (4u64, 2u64, 8u64);
    let heads = 2u64;
    // Two local layers over at most n keys, one write-back over m keys, and at
    // a boundary a latent read over n keys and one global layer over t*m keys.
    let bound = heads * (2 * n + m + m * n + m * t * m);
    for (k, evals) in per_token {
        assert!(evals <= bound, "token {k}: {evals} > {bound}");
    }
}
