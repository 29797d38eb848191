use indexmap::IndexMap;
use rand::Rng;

use super::*;
use crate::error::Error;
use crate::rng::{stream_indexed, uniform_tensor};

type T = Tensor<f64>;

fn named(pairs: Vec<(&str, T)>) -> IndexMap<String, T> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Independent triple-loop matmul oracle.
fn naive_matmul(a: &T, b: &T) -> T {
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let n = b.dims()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let eye = tape.constant(
        Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
    );
    let a = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let an = tape.constant(a.clone());
    let r = tape.matmul(eye, an).unwrap();
    assert_eq!(tape.value(r), &a);
}

#[test]
fn matmul_matches_naive_oracle() {
    let mut rng = stream_indexed(11, "matmul-oracle", 0);
    let a: T = uniform_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let b: T = uniform_tensor(&mut rng, &[5, 6], -1.0, 1.0);
    let expect = naive_matmul(&a, &b);
    let mut tape = Tape::new();
    let an = tape.constant(a);
    let bn = tape.constant(b);
    let r = tape.matmul(an, bn).unwrap();
    let got = tape.value(r);
    let max_diff = got
        .data()
        .iter()
        .zip(expect.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff < 1e-12, "max diff {max_diff}");
}

#[test]
fn matmul_shape_error_names_both_dims() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_uniform_logits() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
    let y = tape.softmax(x).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_log_softmax_agrees() {
    let mut rng = stream_indexed(3, "softmax", 1);
    let x: T = uniform_tensor(&mut rng, &[5, 7], -30.0, 30.0);
    let mut tape = Tape::new();
    let xn = tape.constant(x);
    let sm = tape.softmax(xn).unwrap();
    let lsm = tape.log_softmax(xn).unwrap();
    for i in 0..5 {
        let row = &tape.value(sm).data()[i * 7..(i + 1) * 7];
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
    }
    for (p, lp) in tape.value(sm).data().iter().zip(tape.value(lsm).data()) {
        assert!((p.ln() - lp).abs() < 1e-10);
    }
}

#[test]
fn backward_square_function() {
    // d(x*x)/dx = 2x at x = 3.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let sq = tape.mul(x, x).unwrap();
    let root = tape.sum(sq).unwrap();
    let grads = tape.backward(root).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn backward_constant_leaves_get_no_entry() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::new(vec![3], vec![1., 2., 3.]).unwrap());
    let root = tape.sum(c).unwrap();
    let grads = tape.backward(root).unwrap();
    // Untracked leaf: gradient map carries what the sweep produced for it,
    // but a tracked-but-unreached leaf must be zeros.
    let mut tape2 = Tape::new();
    let a = tape2.leaf(Tensor::new(vec![2], vec![1., 1.]).unwrap(), true);
    let b = tape2.leaf(Tensor::new(vec![2], vec![2., 2.]).unwrap(), true);
    let root2 = tape2.sum(a).unwrap();
    let g2 = tape2.backward(root2).unwrap();
    assert_eq!(g2.get(b).unwrap().data(), &[0.0, 0.0]);
    let _ = grads;
}

#[test]
fn backward_rejects_non_scalar_root_and_foreign_nodes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));

    let mut other = Tape::<f64>::new();
    let y = other.leaf(Tensor::scalar(1.0), true);
    let r = other.sum(y).unwrap();
    assert!(matches!(tape.backward(r), Err(Error::Contract(_))));
}

#[test]
fn backward_is_linear_in_the_root() {
    let mut rng = stream_indexed(5, "linearity", 0);
    let xv: T = uniform_tensor(&mut rng, &[6], -1.0, 1.0);
    let wv: T = uniform_tensor(&mut rng, &[6], -1.0, 1.0);
    let mut tape = Tape::new();
    let x = tape.leaf(xv, true);
    let w = tape.constant(wv);
    // f = sum(x*w), g = sum(tanh(x))
    let xw = tape.mul(x, w).unwrap();
    let f = tape.sum(xw).unwrap();
    let tx = tape.tanh(x).unwrap();
    let g = tape.sum(tx).unwrap();
    let (alpha, beta) = (0.7, -2.5);
    let fa = tape.scale(f, alpha).unwrap();
    let gb = tape.scale(g, beta).unwrap();
    let combined = tape.add(fa, gb).unwrap();

    let gf = tape.backward(f).unwrap();
    let gg = tape.backward(g).unwrap();
    let gc = tape.backward(combined).unwrap();
    for i in 0..6 {
        let lhs = gc.get(x).unwrap().data()[i];
        let rhs = alpha * gf.get(x).unwrap().data()[i] + beta * gg.get(x).unwrap().data()[i];
        assert!((lhs - rhs).abs() <= 1e-12, "linearity at {i}: {lhs} vs {rhs}");
    }
}

#[test]
fn cosine_similarity_trivial_values() {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::new(vec![3], vec![0.3, -1.2, 0.5]).unwrap());
    let nv = tape.scale(v, -1.0).unwrap();
    let e1 = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    let e2 = tape.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let self_sim = tape.cosine_sim(v, v).unwrap();
    let anti = tape.cosine_sim(v, nv).unwrap();
    let ortho = tape.cosine_sim(e1, e2).unwrap();
    assert!((tape.value(self_sim).item() - 1.0).abs() < 1e-15);
    assert!((tape.value(anti).item() + 1.0).abs() < 1e-15);
    assert_eq!(tape.value(ortho).item(), 0.0);
}

#[test]
fn cosine_similarity_zero_norm_is_numeric_error() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let v = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    assert!(matches!(
        tape.cosine_sim(z, v),
        Err(Error::Numeric { .. })
    ));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let big = tape.constant(Tensor::new(vec![1], vec![1e308]).unwrap());
    // 1e308 * 1e308 overflows to inf.
    assert!(matches!(tape.mul(big, big), Err(Error::Numeric { .. })));
}

#[test]
fn determinism_bitwise_across_runs() {
    let run = || {
        let mut rng = stream_indexed(42, "det", 0);
        let x: T = uniform_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let w: T = uniform_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let mut tape = Tape::new();
        let xn = tape.leaf(x, true);
        let wn = tape.constant(w);
        let h = tape.matmul(xn, wn).unwrap();
        let t = tape.tanh(h).unwrap();
        let sm = tape.softmax(t).unwrap();
        let root = tape.sum(sm).unwrap();
        let grads = tape.backward(root).unwrap();
        (
            tape.value(root).item().to_bits(),
            grads
                .get(xn)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

/// Finite-difference sweep for one primitive expressed as a scalar loss.
fn check_primitive(
    label: &str,
    params: IndexMap<String, T>,
    f: &dyn Fn(&mut Tape<f64>, &IndexMap<String, NodeId>) -> crate::Result<NodeId>,
) {
    for seed in 0..5u64 {
        // Jitter inputs per seed, staying in [-1, 1].
        let mut p = params.clone();
        let mut rng = stream_indexed(seed, label, 7);
        for t in p.values_mut() {
            for v in t.data_mut() {
                let jitter: f64 = rng.gen_range(-0.35..0.35);
                *v = (*v * 0.6 + jitter).clamp(-1.0, 1.0);
            }
        }
        let report = finite_diff_check(f, &p, 1e-6, 1e-6).unwrap();
        assert!(
            report.passed(),
            "{label} seed {seed}: max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}

#[test]
fn finite_diff_every_primitive() {
    let mut rng = stream_indexed(1, "prim-base", 0);
    let a44: T = uniform_tensor(&mut rng, &[4, 4], -1.0, 1.0);
    let a45: T = uniform_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let a54: T = uniform_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let v4: T = uniform_tensor(&mut rng, &[4], -1.0, 1.0);
    let v5: T = uniform_tensor(&mut rng, &[5], -1.0, 1.0);
    let mix: T = uniform_tensor(&mut rng, &[3, 4], -1.0, 1.0);

    check_primitive(
        "matmul",
        named(vec![("a", a45.clone()), ("b", a54.clone())]),
        &|t, l| {
            let m = t.matmul(l["a"], l["b"])?;
            let s = t.sum(m)?;
            // Square so the gradient depends on both operands nontrivially.
            t.mul(s, s)
        },
    );
    check_primitive(
        "add_mul_scale",
        named(vec![("a", a44.clone()), ("b", a44.clone())]),
        &|t, l| {
            let s = t.add(l["a"], l["b"])?;
            let m = t.mul(s, l["b"])?;
            let sc = t.scale(m, 1.7)?;
            t.sum(sc)
        },
    );
    check_primitive(
        "add_rows_mean_rows",
        named(vec![("a", mix.clone()), ("b", v4.clone())]),
        &|t, l| {
            let s = t.add_rows(l["a"], l["b"])?;
            let m = t.mean_rows(s)?;
            let m2 = t.mul(m, m)?;
            t.sum(m2)
        },
    );
    check_primitive("tanh", named(vec![("a", a44.clone())]), &|t, l| {
        let y = t.tanh(l["a"])?;
        let y2 = t.mul(y, y)?;
        t.sum(y2)
    });
    check_primitive("softmax", named(vec![("a", mix.clone())]), &|t, l| {
        let y = t.softmax(l["a"])?;
        let y2 = t.mul(y, y)?;
        t.sum(y2)
    });
    check_primitive("log_softmax", named(vec![("a", mix.clone())]), &|t, l| {
        let y = t.log_softmax(l["a"])?;
        let picked = t.pick_per_row(y, &[1, 0, 3])?;
        let s = t.sum(picked)?;
        t.scale(s, -1.0)
    });
    check_primitive(
        "layer_norm",
        named(vec![
            ("x", mix.clone()),
            ("g", v4.clone()),
            ("b", v4.clone()),
        ]),
        &|t, l| {
            let y = t.layer_norm(l["x"], l["g"], l["b"], 1e-5)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        },
    );
    check_primitive(
        "concat_slice_rows",
        named(vec![("a", a45.clone()), ("b", a45.clone())]),
        &|t, l| {
            let cat = t.concat_rows(&[l["a"], l["b"]])?;
            let sl = t.slice_rows(cat, 2, 4)?;
            let sq = t.mul(sl, sl)?;
            t.sum(sq)
        },
    );
    check_primitive(
        "concat_slice_cols_transpose",
        named(vec![("a", a45.clone()), ("b", a44.clone())]),
        &|t, l| {
            let bt = t.transpose(l["b"])?;
            let cat = t.concat_cols(&[l["a"], bt])?;
            let sl = t.slice_cols(cat, 3, 4)?;
            let sq = t.mul(sl, sl)?;
            t.sum(sq)
        },
    );
    check_primitive("gather", named(vec![("tbl", a54.clone())]), &|t, l| {
        let rows = t.gather(l["tbl"], &[0, 2, 2, 4])?;
        let sq = t.mul(rows, rows)?;
        t.sum(sq)
    });
    check_primitive("reshape", named(vec![("a", a45.clone())]), &|t, l| {
        let r = t.reshape(l["a"], &[2, 10])?;
        let sq = t.mul(r, r)?;
        t.sum(sq)
    });
    check_primitive(
        "normalize_cosine",
        named(vec![("a", v5.clone()), ("b", v5.clone())]),
        &|t, l| {
            // Keep norms bounded away from zero by offsetting one input.
            let one = t.constant(Tensor::full(&[5], 1.5));
            let a = t.add(l["a"], one)?;
            let an = t.normalize(a)?;
            t.cosine_sim(an, l["b"])
        },
    );
}

#[test]
fn finite_diff_check_trivial_cases() {
    // Constant function: all gradients zero, pass.
    let params = named(vec![("x", Tensor::new(vec![3], vec![0.2, -0.4, 0.9]).unwrap())]);
    let report = finite_diff_check(
        &|t: &mut Tape<f64>, _l: &IndexMap<String, NodeId>| {
            let c = t.constant(Tensor::scalar(4.0));
            t.scale(c, 1.0)
        },
        &params,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.max_rel_err, 0.0);

    // Quadratic: central differences are exact for ||x||^2.
    let report = finite_diff_check(
        &|t: &mut Tape<f64>, l: &IndexMap<String, NodeId>| {
            let sq = t.mul(l["x"], l["x"])?;
            t.sum(sq)
        },
        &params,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

#[test]
fn two_layer_mlp_gradcheck() {
    // Random 2-layer MLP scalar loss vs central differences, rel err < 1e-6.
    let mut rng = stream_indexed(9, "mlp", 0);
    let params = named(vec![
        ("x", uniform_tensor(&mut rng, &[1, 6], -1.0, 1.0)),
        ("w1", uniform_tensor(&mut rng, &[6, 8], -1.0, 1.0)),
        ("b1", uniform_tensor(&mut rng, &[8], -1.0, 1.0)),
        ("w2", uniform_tensor(&mut rng, &[8, 3], -1.0, 1.0)),
        ("b2", uniform_tensor(&mut rng, &[3], -1.0, 1.0)),
    ]);
    let report = finite_diff_check(
        &|t: &mut Tape<f64>, l: &IndexMap<String, NodeId>| {
            let h = t.matmul(l["x"], l["w1"])?;
            let h = t.add_rows(h, l["b1"])?;
            let h = t.tanh(h)?;
            let o = t.matmul(h, l["w2"])?;
            let o = t.add_rows(o, l["b2"])?;
            let ls = t.log_softmax(o)?;
            let picked = t.pick_per_row(ls, &[2])?;
            let s = t.sum(picked)?;
            t.scale(s, -1.0)
        },
        &params,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(
        report.passed(),
        "mlp gradcheck: max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn engine_is_generic_over_f32() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![0.5f32, -0.25]).unwrap(), true);
    let sq = tape.mul(x, x).unwrap();
    let root = tape.sum(sq).unwrap();
    let grads = tape.backward(root).unwrap();
    let g = grads.get(x).unwrap();
    assert!((g.data()[0] - 1.0).abs() < 1e-6);
    assert!((g.data()[1] + 0.5).abs() < 1e-6);
}
