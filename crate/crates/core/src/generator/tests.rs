use super::*;
use crate::autodiff::{finite_diff_param_grad, relative_error, Tape};
use crate::nn::Adam;
use crate::rng::{self, Stream};
use ndarray::{Array1, Array2, Ix2};
use rand::Rng;

fn tiny_config(variant: Variant, fusion: SkipFusion) -> PairedGeneratorConfig {
    PairedGeneratorConfig {
        variant,
        skip_fusion: fusion,
        base_channels: 4,
        depth: 2,
        attention_heads: 2,
        image_channels: 3,
        input_size: 8,
        time_embed_dim: 8,
        blocks_per_level: 1,
    }
}

fn random_pair_batch(b: usize, size: usize, seed: u64) -> (Array4<f64>, Array4<f64>) {
    let mut rng = rng::derive(seed, Stream::DiffusionNoise, 50);
    (
        rng::randn(&mut rng, (b, 3, size, size)),
        rng::randn(&mut rng, (b, 1, size, size)),
    )
}

#[test]
fn concat_network_runs_over_stacked_channels() {
    let gen = build_generator(&tiny_config(Variant::Concat, SkipFusion::Direct), 1).unwrap();
    assert_eq!(gen.state_channels(), 4);
    // head convolution produces C+1 channels
    let head = gen.store.id_by_name("net.head.conv.w").unwrap();
    assert_eq!(gen.store.value(head).shape()[0], 4);
    assert_eq!(gen.store.value(gen.store.id_by_name("net.in.w").unwrap()).shape()[1], 4);
}

#[test]
fn shape_contract_all_variants_and_fusions() {
    let (x, y) = random_pair_batch(2, 8, 3);
    for variant in [Variant::Concat, Variant::SharedEncoder, Variant::TwoEncoder] {
        for fusion in [SkipFusion::Direct, SkipFusion::ZeroConv, SkipFusion::ScaleU] {
            let gen = build_generator(&tiny_config(variant, fusion), 7).unwrap();
            let (ex, ey) = gen.predict_noise(&x, &y, &[3, 5]).unwrap();
            assert_eq!(ex.dim(), x.dim(), "{variant:?}/{fusion:?}");
            assert_eq!(ey.dim(), y.dim(), "{variant:?}/{fusion:?}");
        }
    }
}

#[test]
fn same_seed_builds_identical_parameters() {
    let cfg = tiny_config(Variant::TwoEncoder, SkipFusion::ScaleU);
    let a = build_generator(&cfg, 42).unwrap();
    let b = build_generator(&cfg, 42).unwrap();
    assert_eq!(a.store.len(), b.store.len());
    for (pa, pb) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(pa.name, pb.name);
        assert_eq!(pa.value, pb.value);
    }
    let c = build_generator(&cfg, 43).unwrap();
    assert!(a.store.iter().zip(c.store.iter()).any(|(x, y)| x.value != y.value));
}

#[test]
fn two_encoder_has_disjoint_branch_groups_about_twice_concat() {
    let two = build_generator(&tiny_config(Variant::TwoEncoder, SkipFusion::Direct), 5).unwrap();
    let cat = build_generator(&tiny_config(Variant::Concat, SkipFusion::Direct), 5).unwrap();
    let groups: std::collections::BTreeMap<String, usize> =
        two.parameter_groups().into_iter().collect();
    assert!(groups.contains_key("gx") && groups.contains_key("gy"));
    for p in two.store.iter() {
        assert!(
            p.name.starts_with("gx.")
                || p.name.starts_with("gy.")
                || p.name.starts_with("attn.")
                || p.name.starts_with("temb."),
            "unexpected group for {}",
            p.name
        );
    }
    let ratio = two.store.scalar_count() as f64 / cat.store.scalar_count() as f64;
    assert!((1.5..=2.5).contains(&ratio), "census ratio {ratio}");
}

#[test]
fn forward_is_deterministic() {
    let gen = build_generator(&tiny_config(Variant::SharedEncoder, SkipFusion::ScaleU), 11).unwrap();
    let (x, y) = random_pair_batch(2, 8, 4);
    let (ex1, ey1) = gen.predict_noise(&x, &y, &[1, 2]).unwrap();
    let (ex2, ey2) = gen.predict_noise(&x, &y, &[1, 2]).unwrap();
    assert_eq!(ex1, ex2);
    assert_eq!(ey1, ey2);
}

#[test]
fn zero_conv_severance_equivalent_at_init_only() {
    for variant in [Variant::TwoEncoder, Variant::SharedEncoder] {
        let mut gen = build_generator(&tiny_config(variant, SkipFusion::ZeroConv), 21).unwrap();
        let (x, y) = random_pair_batch(2, 8, 6);
        let connected = gen.predict_noise(&x, &y, &[2, 4]).unwrap();
        let severed = gen
            .predict_noise_opts(&x, &y, &[2, 4], ForwardOpts { sever_cross_skips: true })
            .unwrap();
        assert_eq!(connected.0, severed.0, "{variant:?}: init severance must be exact");
        assert_eq!(connected.1, severed.1);

        // one optimization step on a nonzero loss makes the cross links live
        let mut tape = Tape::new();
        let xn = tape.constant4(x.clone());
        let yn = tape.constant4(y.clone());
        let (ex, ey) = gen.predict_noise_nodes(&mut tape, xn, yn, &[2, 4], ForwardOpts::default());
        let tx = ndarray::ArrayD::zeros(tape.value(ex).raw_dim());
        let ty = ndarray::ArrayD::zeros(tape.value(ey).raw_dim());
        let lx = tape.mse_loss(ex, &tx);
        let ly = tape.mse_loss(ey, &ty);
        let loss = tape.add(lx, ly);
        tape.backward(loss);
        gen.store.zero_grads();
        tape.accumulate_param_grads(&mut gen.store);
        let mut opt = Adam::new(&gen.store, 1e-2);
        opt.step(&mut gen.store);

        let connected = gen.predict_noise(&x, &y, &[2, 4]).unwrap();
        let severed = gen
            .predict_noise_opts(&x, &y, &[2, 4], ForwardOpts { sever_cross_skips: true })
            .unwrap();
        let diff = connected
            .0
            .iter()
            .zip(severed.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0, "{variant:?}: severance must matter after training");
    }
}

#[test]
fn scale_u_initializes_identical_to_direct() {
    for variant in [Variant::TwoEncoder, Variant::SharedEncoder] {
        let a = build_generator(&tiny_config(variant, SkipFusion::ScaleU), 33).unwrap();
        let b = build_generator(&tiny_config(variant, SkipFusion::Direct), 33).unwrap();
        let (x, y) = random_pair_batch(2, 8, 8);
        let (ax, ay) = a.predict_noise(&x, &y, &[1, 6]).unwrap();
        let (bx, by) = b.predict_noise(&x, &y, &[1, 6]).unwrap();
        assert_eq!(ax, bx, "{variant:?}: ScaleU at init must equal Direct");
        assert_eq!(ay, by);
    }
}

#[test]
fn fuse_skip_channel_arithmetic_and_zero_conv_zeroes() {
    let mut store = ParamStore::new();
    let direct = FuseSkip::new(&mut store, "fd", SkipFusion::Direct, 8, &[8, 8]);
    let zconv = FuseSkip::new(&mut store, "fz", SkipFusion::ZeroConv, 8, &[8, 8]);
    let scaleu = FuseSkip::new(&mut store, "fs", SkipFusion::ScaleU, 8, &[8, 8]);
    let mut rng = rng::derive(2, Stream::DiffusionNoise, 51);
    let b = rng::randn::<ndarray::Ix4, _>(&mut rng, (2, 8, 4, 4));
    let s1 = rng::randn::<ndarray::Ix4, _>(&mut rng, (2, 8, 4, 4));
    let s2 = rng::randn::<ndarray::Ix4, _>(&mut rng, (2, 8, 4, 4));

    let mut tape = Tape::new();
    let bn = tape.constant4(b.clone());
    let s1n = tape.constant4(s1.clone());
    let s2n = tape.constant4(s2.clone());
    let out_d = direct.forward(&mut tape, &store, bn, &[s1n, s2n]);
    assert_eq!(tape.shape(out_d), &[2, 24, 4, 4], "direct concat width");

    let out_z = zconv.forward(&mut tape, &store, bn, &[s1n, s2n]);
    let zv = tape.value(out_z);
    // skip-derived channels are exactly zero at init
    assert!(zv
        .slice_axis(ndarray::Axis(1), ndarray::Slice::from(8..24))
        .iter()
        .all(|&v| v == 0.0));
    assert_eq!(
        zv.slice_axis(ndarray::Axis(1), ndarray::Slice::from(0..8))
            .to_owned(),
        b.clone().into_dyn()
    );

    let out_s = scaleu.forward(&mut tape, &store, bn, &[s1n, s2n]);
    assert_eq!(tape.value(out_s), tape.value(out_d), "ScaleU at init is Direct");
}

#[test]
fn pair_attention_symmetry_on_equal_inputs() {
    let mut rng = rng::derive(17, Stream::ParamInit, 5);
    let mut store = ParamStore::new();
    let pa = PairAttention::new(&mut store, &mut rng, "pa", 8, 2);
    let x = rng::randn::<ndarray::Ix4, _>(&mut rng, (2, 8, 2, 2));
    let mut tape = Tape::new();
    let xn = tape.constant4(x.clone());
    let yn = tape.constant4(x.clone());
    let (ox, oy) = pa.forward(&mut tape, &store, xn, yn);
    assert_eq!(tape.value(ox), tape.value(oy));
}

#[test]
fn pair_attention_one_token_closed_form() {
    // single spatial token: softmax collapses to 1, so
    //   self(v)  = v + Wo_s Wv_s v
    //   cross(q, kv) = q + Wo_c Wv_c kv
    let mut rng = rng::derive(18, Stream::ParamInit, 6);
    let mut store = ParamStore::new();
    let c = 6;
    let pa = PairAttention::new(&mut store, &mut rng, "pa", c, 2);
    let x: Array1<f64> = rng::randn(&mut rng, c);
    let y: Array1<f64> = rng::randn(&mut rng, c);

    let w = |name: &str| -> Array2<f64> {
        store
            .value(store.id_by_name(name).unwrap())
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned()
    };
    let (wv_s, wo_s) = (w("pa.self.wv.w"), w("pa.self.wo.w"));
    let (wv_c, wo_c) = (w("pa.cross.wv.w"), w("pa.cross.wo.w"));
    let x1 = &x + &wo_s.dot(&wv_s.dot(&x));
    let y1 = &y + &wo_s.dot(&wv_s.dot(&y));
    let x2 = &x1 + &wo_c.dot(&wv_c.dot(&y1));
    let y2 = &y1 + &wo_c.dot(&wv_c.dot(&x1));

    let to4 = |v: &Array1<f64>| {
        Array4::from_shape_vec((1, c, 1, 1), v.to_vec()).unwrap()
    };
    let mut tape = Tape::new();
    let xn = tape.constant4(to4(&x));
    let yn = tape.constant4(to4(&y));
    let (ox, oy) = pa.forward(&mut tape, &store, xn, yn);
    for ch in 0..c {
        assert!((tape.value(ox)[[0, ch, 0, 0]] - x2[ch]).abs() < 1e-10);
        assert!((tape.value(oy)[[0, ch, 0, 0]] - y2[ch]).abs() < 1e-10);
    }
}

#[test]
fn predict_noise_gradients_match_finite_differences() {
    // mean-squared-output loss; ten sampled parameters, central differences
    let cfg = tiny_config(Variant::TwoEncoder, SkipFusion::ScaleU);
    let mut gen = build_generator(&cfg, 71).unwrap();
    let (x, y) = random_pair_batch(1, 8, 9);
    let ts = [4usize];

    let eval = |gen: &PairedGenerator| -> f64 {
        let mut tape = Tape::new();
        let xn = tape.constant4(x.clone());
        let yn = tape.constant4(y.clone());
        let (ex, ey) = gen.predict_noise_nodes(&mut tape, xn, yn, &ts, ForwardOpts::default());
        let sx = tape.mul(ex, ex);
        let sy = tape.mul(ey, ey);
        let mx = tape.mean_all(sx);
        let my = tape.mean_all(sy);
        let l = tape.add(mx, my);
        tape.scalar(l)
    };

    let mut tape = Tape::new();
    let xn = tape.constant4(x.clone());
    let yn = tape.constant4(y.clone());
    let (ex, ey) = gen.predict_noise_nodes(&mut tape, xn, yn, &ts, ForwardOpts::default());
    let sx = tape.mul(ex, ex);
    let sy = tape.mul(ey, ey);
    let mx = tape.mean_all(sx);
    let my = tape.mean_all(sy);
    let l = tape.add(mx, my);
    tape.backward(l);
    gen.store.zero_grads();
    tape.accumulate_param_grads(&mut gen.store);

    let mut pick = rng::derive(72, Stream::Validation, 1);
    let ids: Vec<_> = gen.store.ids().collect();
    for _ in 0..10 {
        let id = ids[pick.random_range(0..ids.len())];
        let n = gen.store.value(id).len();
        let e = pick.random_range(0..n);
        let analytic = gen.store.grad(id).as_slice().unwrap()[e];
        let name = gen.store.name(id).to_string();
        let mut store = std::mem::take(&mut gen.store);
        let fd = finite_diff_param_grad(&mut store, id, e, 1e-5, |st| {
            let probe = PairedGenerator {
                config: gen.config.clone(),
                store: st.clone(),
                temb: gen.temb.clone(),
                arch: gen.arch.clone(),
            };
            eval(&probe)
        });
        gen.store = store;
        let err = relative_error(analytic, fd);
        assert!(err < 1e-3, "{name}[{e}]: analytic {analytic} fd {fd} rel {err}");
    }
}

#[test]
fn config_validation_rejects_bad_geometry() {
    let mut cfg = tiny_config(Variant::Concat, SkipFusion::Direct);
    cfg.input_size = 10;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config(Variant::Concat, SkipFusion::Direct);
    cfg.attention_heads = 5;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config(Variant::Concat, SkipFusion::Direct);
    cfg.depth = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn predict_noise_rejects_mismatched_shapes() {
    let gen = build_generator(&tiny_config(Variant::Concat, SkipFusion::Direct), 2).unwrap();
    let (x, y) = random_pair_batch(2, 8, 60);
    let bad_y = Array4::<f64>::zeros((2, 1, 4, 4));
    assert!(gen.predict_noise(&x, &bad_y, &[1, 1]).is_err());
    assert!(gen.predict_noise(&x, &y, &[1]).is_err());
}
