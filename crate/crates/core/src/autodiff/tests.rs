//! Finite-difference checks for every tape op. The oracle re-evaluates the
//! loss from scratch around each perturbed parameter element, so it shares
//! no code with the analytic backward path.

use super::*;
use crate::rng::{self, Stream};
use ndarray::{ArrayD, IxDyn};

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn randd(rng: &mut impl rand::Rng, shape: &[usize]) -> ArrayD<f64> {
    rng::randn::<IxDyn, _>(rng, IxDyn(shape))
}

/// Build a store of named random params, run the graph builder to a scalar
/// loss, and compare analytic gradients to central differences elementwise.
fn check(shapes: &[&[usize]], build: impl Fn(&mut Tape, &ParamStore) -> NodeId) {
    let mut rng = rng::derive(1234, Stream::ParamInit, 0);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        let v = randd(&mut rng, s);
        store.add(format!("p{i}"), v);
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape, &store);
    assert_eq!(tape.value(loss).len(), 1, "loss must be scalar");
    tape.backward(loss);
    store.zero_grads();
    tape.accumulate_param_grads(&mut store);

    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        for e in 0..n {
            let analytic = store.grad(id).as_slice().unwrap()[e];
            let fd = finite_diff_param_grad(&mut store, id, e, H, |st| {
                let mut t = Tape::new();
                let l = build(&mut t, st);
                t.scalar(l)
            });
            let err = relative_error(analytic, fd);
            assert!(
                err < TOL,
                "param {:?} elem {e}: analytic {analytic} vs fd {fd} (rel {err})",
                store.name(id)
            );
        }
    }
}

fn target(rng_seed: u64, shape: &[usize]) -> ArrayD<f64> {
    let mut rng = rng::derive(rng_seed, Stream::Validation, 0);
    randd(&mut rng, shape)
}

#[test]
fn grad_add_sub_mul_div_affine() {
    let t = target(7, &[3, 4]);
    check(&[&[3, 4], &[3, 4]], |tape, st| {
        let a = tape.param(st, ParamId(0));
        let b = tape.param(st, ParamId(1));
        let s = tape.add(a, b);
        let d = tape.sub(s, b);
        let m = tape.mul(d, b);
        let q = tape.div(m, b);
        let f = tape.affine(q, 1.7, -0.3);
        tape.mse_loss(f, &t)
    });
}

#[test]
fn grad_silu_sigmoid() {
    let t = target(8, &[2, 5]);
    check(&[&[2, 5]], |tape, st| {
        let a = tape.param(st, ParamId(0));
        let s = tape.silu(a);
        let s = tape.sigmoid(s);
        tape.mse_loss(s, &t)
    });
}

#[test]
fn grad_add_channel_bias_and_scales() {
    let t = target(9, &[2, 3, 4, 4]);
    check(&[&[2, 3, 4, 4], &[2, 3], &[3]], |tape, st| {
        let x = tape.param(st, ParamId(0));
        let v = tape.param(st, ParamId(1));
        let s = tape.param(st, ParamId(2));
        let y = tape.add_channel_bias(x, v);
        let y = tape.channel_scale_one_plus(y, s);
        tape.mse_loss(y, &t)
    });
}

#[test]
fn grad_scale_per_batch() {
    let t = target(10, &[3, 2, 2, 2]);
    check(&[&[3, 2, 2, 2], &[3]], |tape, st| {
        let x = tape.param(st, ParamId(0));
        let s = tape.param(st, ParamId(1));
        let y = tape.scale_per_batch(x, s);
        tape.mse_loss(y, &t)
    });
}

#[test]
fn grad_reshape_permute() {
    let t = target(11, &[4, 6]);
    check(&[&[2, 3, 4]], |tape, st| {
        let x = tape.param(st, ParamId(0));
        let p = tape.permute(x, &[2, 0, 1]);
        let r = tape.reshape(p, &[4, 6]);
        tape.mse_loss(r, &t)
    });
}

#[test]
fn grad_concat_slice_channels() {
    let t = target(12, &[2, 2, 3, 3]);
    check(&[&[2, 2, 3, 3], &[2, 3, 3, 3]], |tape, st| {
        let a = tape.param(st, ParamId(0));
        let b = tape.param(st, ParamId(1));
        let c = tape.concat_channels(&[a, b]);
        let s = tape.slice_channels(c, 1, 3);
        tape.mse_loss(s, &t)
    });
}

#[test]
fn grad_linear() {
    let t = target(13, &[4, 3]);
    check(&[&[4, 5], &[3, 5], &[3]], |tape, st| {
        let x = tape.param(st, ParamId(0));
        let w = tape.param(st, ParamId(1));
        let b = tape.param(st, ParamId(2));
        let y = tape.linear(x, w, Some(b));
        tape.mse_loss(y, &t)
    });
}

#[test]
fn grad_bmm_both_orders() {
    let t = target(14, &[2, 3, 5]);
    check(&[&[2, 3, 4], &[2, 4, 3], &[2, 5, 3]], |tape, st| {
        let a = tape.param(st, ParamId(0));
        let b = tape.param(st, ParamId(1));
        let c = tape.param(st, ParamId(2));
        let y1 = tape.bmm(a, b);
        let y2 = tape.bmm_nt(y1, c);
        tape.mse_loss(y2, &t)
    });
}

#[test]
fn grad_softmax() {
    let t = target(15, &[3, 4]);
    check(&[&[3, 4]], |tape, st| {
        let x = tape.param(st, ParamId(0));
        let y = tape.softmax_last(x);
        tape.mse_loss(y, &t)
    });
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = rng::derive(77, Stream::ParamInit, 1);
    let mut tape = Tape::new();
    let x = tape.constant(randd(&mut rng, &[4, 7]));
    let y = tape.softmax_last(x);
    for row in tape.value(y).rows() {
        let s: f64 = row.sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn grad_losses() {
    let t = target(16, &[6]);
    check(&[&[6]], |tape, st| {
        let x = tape.param(st, ParamId(0));
        tape.mse_loss(x, &t)
    });
    let y = target(17, &[5]).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    check(&[&[5]], |tape, st| {
        let x = tape.param(st, ParamId(0));
        tape.bce_with_logits(x, &y)
    });
    check(&[&[3, 3]], |tape, st| {
        let x = tape.param(st, ParamId(0));
        let s = tape.silu(x);
        tape.mean_all(s)
    });
}

#[test]
fn bce_logits_matches_closed_form() {
    // logit 0 => p = 0.5 => loss = ln 2 regardless of target
    let mut tape = Tape::new();
    let z = tape.constant(ArrayD::zeros(IxDyn(&[4])));
    let y = ArrayD::from_elem(IxDyn(&[4]), 1.0);
    let l = tape.bce_with_logits(z, &y);
    assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn grad_conv2d_variants() {
    // 3x3 stride 1 pad 1
    let t = target(18, &[2, 3, 4, 4]);
    check(&[&[2, 2, 4, 4], &[3, 2, 3, 3], &[3]], |tape, st| {
        let x = tape.param(st, ParamId(0));
        let w = tape.param(st, ParamId(1));
        let b = tape.param(st, ParamId(2));
        let y = tape.conv2d(x, w, b, 1, 1);
        tape.mse_loss(y, &t)
    });
    // 3x3 stride 2 pad 1 (downsample)
    let t = target(19, &[1, 2, 2, 2]);
    check(&[&[1, 3, 4, 4], &[2, 3, 3, 3], &[2]], |tape, st| {
        let x = tape.param(st, ParamId(0));
        let w = tape.param(st, ParamId(1));
        let b = tape.param(st, ParamId(2));
        let y = tape.conv2d(x, w, b, 2, 1);
        tape.mse_loss(y, &t)
    });
    // 1x1 fast path
    let t = target(20, &[2, 4, 3, 3]);
    check(&[&[2, 2, 3, 3], &[4, 2, 1, 1], &[4]], |tape, st| {
        let x = tape.param(st, ParamId(0));
        let w = tape.param(st, ParamId(1));
        let b = tape.param(st, ParamId(2));
        let y = tape.conv2d(x, w, b, 1, 0);
        tape.mse_loss(y, &t)
    });
}

#[test]
fn conv2d_matches_direct_convolution() {
    // brute-force conv as an independent oracle
    let mut rng = rng::derive(55, Stream::ParamInit, 2);
    let x = rng::randn::<ndarray::Ix4, _>(&mut rng, (2, 3, 5, 5));
    let w = rng::randn::<ndarray::Ix4, _>(&mut rng, (4, 3, 3, 3));
    let b = rng::randn::<ndarray::Ix1, _>(&mut rng, 4);
    let mut tape = Tape::new();
    let xn = tape.constant4(x.clone());
    let wn = tape.constant(w.clone().into_dyn());
    let bn = tape.constant(b.clone().into_dyn());
    let y = tape.conv2d(xn, wn, bn, 1, 1);
    let yv = tape.value(y).view().into_dimensionality::<ndarray::Ix4>().unwrap();
    for bi in 0..2 {
        for co in 0..4 {
            for oy in 0..5 {
                for ox in 0..5 {
                    let mut acc = b[co];
                    for ci in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                    acc += x[[bi, ci, iy as usize, ix as usize]]
                                        * w[[co, ci, ky, kx]];
                                }
                            }
                        }
                    }
                    assert!((yv[[bi, co, oy, ox]] - acc).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn grad_group_norm() {
    let t = target(21, &[2, 4, 3, 3]);
    check(&[&[2, 4, 3, 3], &[4], &[4]], |tape, st| {
        let x = tape.param(st, ParamId(0));
        let g = tape.param(st, ParamId(1));
        let b = tape.param(st, ParamId(2));
        let y = tape.group_norm(x, g, b, 2, 1e-5);
        tape.mse_loss(y, &t)
    });
}

#[test]
fn grad_upsample_and_pool() {
    let t = target(22, &[2, 3]);
    check(&[&[2, 3, 2, 2]], |tape, st| {
        let x = tape.param(st, ParamId(0));
        let u = tape.upsample_nearest_2x(x);
        let p = tape.global_avg_pool(u);
        tape.mse_loss(p, &t)
    });
}

#[test]
fn shared_parameter_binding_accumulates() {
    // binding the same param twice doubles its gradient
    let t = target(23, &[2, 2]);
    let mut rng = rng::derive(99, Stream::ParamInit, 3);
    let mut store = ParamStore::new();
    let v = randd(&mut rng, &[2, 2]);
    let id = store.add("w", v);

    let run = |st: &ParamStore, twice: bool| -> (f64, ArrayD<f64>) {
        let mut tape = Tape::new();
        let a = tape.param(st, id);
        let y = if twice {
            let b = tape.param(st, id);
            tape.add(a, b)
        } else {
            tape.affine(a, 2.0, 0.0)
        };
        let l = tape.mse_loss(y, &t);
        tape.backward(l);
        let mut st2 = st.clone();
        st2.zero_grads();
        tape.accumulate_param_grads(&mut st2);
        (tape.scalar(l), st2.grad(id).clone())
    };
    let (l1, g1) = run(&store, true);
    let (l2, g2) = run(&store, false);
    assert!((l1 - l2).abs() < 1e-12);
    assert!(g1.iter().zip(g2.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    let _ = store;
}

#[test]
fn upsample_nearest_expands_blocks() {
    let mut tape = Tape::new();
    let x = ndarray::array![[[[1.0, 2.0], [3.0, 4.0]]]].into_dyn();
    let xn = tape.constant(x);
    let y = tape.upsample_nearest_2x(xn);
    let yv = tape.value(y);
    assert_eq!(yv.shape(), &[1, 1, 4, 4]);
    assert_eq!(yv[[0, 0, 0, 0]], 1.0);
    assert_eq!(yv[[0, 0, 0, 1]], 1.0);
    assert_eq!(yv[[0, 0, 1, 1]], 1.0);
    assert_eq!(yv[[0, 0, 3, 3]], 4.0);
    assert_eq!(yv[[0, 0, 2, 1]], 3.0);
}
