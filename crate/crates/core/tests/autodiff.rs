use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
mod common;

use common::centered_check;
use segforge_core::autodiff::{finite_diff_check, AutodiffError, Shape, Tape, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay outside the FD stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &[f32], stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    let os = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = vec![0.0f32; os.len()];
    for n in 0..xs.n {
        for co in 0..ws.n {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[co] as f64;
                    for ci in 0..xs.c {
                        for ki in 0..ws.h {
                            for kj in 0..ws.w {
                                let y = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < xs.h && (xx as usize) < xs.w {
                                    acc += x.at(n, ci, y as usize, xx as usize) as f64
                                        * w.at(co, ci, ki, kj) as f64;
                                }
                            }
                        }
                    }
                    out[((n * ws.n + co) * oh + i) * ow + j] = acc as f32;
                }
            }
        }
    }
    Tensor::new(os, out).unwrap()
}

/// Scatter form of the transposed convolution, written independently of
/// the gather-based conv oracle.
fn naive_conv_transpose(x: &Tensor, w: &Tensor, b: &[f32], stride: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let os = Shape::new(xs.n, ws.c, (xs.h - 1) * stride + ws.h, (xs.w - 1) * stride + ws.w);
    let mut out = vec![0.0f64; os.len()];
    for n in 0..xs.n {
        for ci in 0..xs.c {
            for i in 0..xs.h {
                for j in 0..xs.w {
                    for co in 0..ws.c {
                        for ki in 0..ws.h {
                            for kj in 0..ws.w {
                                let y = i * stride + ki;
                                let xx = j * stride + kj;
                                out[((n * os.c + co) * os.h + y) * os.w + xx] +=
                                    x.at(n, ci, i, j) as f64 * w.at(ci, co, ki, kj) as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    let data = out
        .iter()
        .enumerate()
        .map(|(idx, &v)| (v + b[(idx / os.plane()) % os.c] as f64) as f32)
        .collect();
    Tensor::new(os, data).unwrap()
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f32) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

/// Positive values, so weighted sums have gradients bounded away from zero
/// and f32 round-off in the finite differences stays relatively small.
fn positive(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.5..1.0))
}

fn weighted_sum(t: &mut Tape, y: Var, r: &Tensor) -> Result<Var, AutodiffError> {
    let rv = t.constant(r.clone());
    let p = t.mul(y, rv)?;
    t.sum(p)
}

#[test]
fn conv2d_identity_and_hand_sum() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_fn(Shape::new(1, 1, 3, 3), |i| i as f32));
    let w = t.constant(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
    let b = t.constant(Tensor::zeros(Shape::vector(1)));
    let y = t.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(t.value(y).data(), t.value(x).data());

    let x = t.constant(Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = t.constant(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
    let y = t.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(t.value(y).data(), &[10.0]);
}

#[test]
fn conv2d_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = rng.random_range(1..3);
        let cin = rng.random_range(1..4);
        let cout = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let h = rng.random_range(k..9);
        let w = rng.random_range(k..9);
        let x = rand_tensor(&mut rng, Shape::new(n, cin, h, w));
        let wt = rand_tensor(&mut rng, Shape::new(cout, cin, k, k));
        let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(wt.clone());
        let bv = t.constant(Tensor::new(Shape::vector(cout), b.clone()).unwrap());
        let y = t.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        assert_close(t.value(y), &naive_conv(&x, &wt, &b, stride, pad), 1e-5);
    }
}

#[test]
fn conv_transpose_cases() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_fn(Shape::new(1, 1, 3, 2), |i| i as f32 - 2.0));
    let w = t.constant(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
    let y = t.conv_transpose2d(x, w, None, 1).unwrap();
    assert_eq!(t.value(y).data(), t.value(x).data());

    let x = t.constant(Tensor::scalar(1.0));
    let w = t.constant(Tensor::new(Shape::new(1, 1, 2, 2), vec![0.5, -1.0, 2.0, 3.5]).unwrap());
    let y = t.conv_transpose2d(x, w, None, 2).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, -1.0, 2.0, 3.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (n, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (k, stride) = (rng.random_range(1..4), rng.random_range(1..3));
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let x = rand_tensor(&mut rng, Shape::new(n, cin, h, w));
        let wt = rand_tensor(&mut rng, Shape::new(cin, cout, k, k));
        let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(wt.clone());
        let bv = t.constant(Tensor::new(Shape::vector(cout), b.clone()).unwrap());
        let y = t.conv_transpose2d(xv, wv, Some(bv), stride).unwrap();
        assert_close(t.value(y), &naive_conv_transpose(&x, &wt, &b, stride), 1e-5);
    }
}

#[test]
fn conv_adjointness() {
    // <conv(x, w), y> == <x, conv_transpose(y, w)> with w reinterpreted
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let (k, stride) = (rng.random_range(1..4), rng.random_range(1..3));
        let h = stride * rng.random_range(1..4) + k;
        let w = stride * rng.random_range(1..4) + k;
        let x = rand_tensor(&mut rng, Shape::new(1, cin, h, w));
        let wt = rand_tensor(&mut rng, Shape::new(cout, cin, k, k));
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(wt.clone());
        let cx = t.conv2d(xv, wv, None, stride, 0).unwrap();
        let ys = t.shape(cx);
        let y = rand_tensor(&mut rng, ys);
        let yv = t.constant(y.clone());
        let back = t.conv_transpose2d(yv, wv, None, stride).unwrap();
        let lhs: f64 = t.value(cx).data().iter().zip(y.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        // conv_transpose output can be smaller than x when (h - k) % stride != 0
        let bs = t.shape(back);
        let mut rhs = 0.0f64;
        for c in 0..cin {
            for i in 0..bs.h {
                for j in 0..bs.w {
                    rhs += x.at(0, c, i, j) as f64 * t.value(back).at(0, c, i, j) as f64;
                }
            }
        }
        assert!((lhs - rhs).abs() <= 1e-4 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn maxpool_cases() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 5.0, 3.0, 2.0]).unwrap(), true);
    let y = t.maxpool2(x).unwrap();
    assert_eq!(t.value(y).data(), &[5.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(Shape::new(1, 1, 4, 4), 2.0), true);
    let y = t.maxpool2(x).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 2.0));
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    let g = t.grad(x).unwrap().data();
    let expected: Vec<f32> = (0..16).map(|i| if (i / 4) % 2 == 0 && i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    assert_eq!(g, &expected[..]);

    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(Shape::new(1, 1, 3, 4)));
    assert!(matches!(t.maxpool2(x), Err(AutodiffError::OddDims { h: 3, w: 4 })));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = rand_tensor(&mut rng, Shape::new(2, 3, 6, 4));
    let mut t = Tape::new();
    let x = t.constant(xt.clone());
    let y = t.maxpool2(x).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            for i in 0..3 {
                for j in 0..2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(a, b)| xt.at(n, c, 2 * i + a, 2 * j + b))
                        .fold(f32::NEG_INFINITY, f32::max);
                    assert_eq!(t.value(y).at(n, c, i, j), m);
                }
            }
        }
    }
}

#[test]
fn upsample_cases() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0), true);
    let y = t.upsample_nearest2(x).unwrap();
    assert_eq!(t.value(y).data(), &[3.0; 4]);
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[4.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = rand_tensor(&mut rng, Shape::new(2, 2, 3, 5));
    let mut t = Tape::new();
    let x = t.constant(xt.clone());
    let y = t.upsample_nearest2(x).unwrap();
    for n in 0..2 {
        for c in 0..2 {
            for i in 0..6 {
                for j in 0..10 {
                    assert_eq!(t.value(y).at(n, c, i, j), xt.at(n, c, i / 2, j / 2));
                }
            }
        }
    }
}

#[test]
fn elementwise_points() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(Shape::new(1, 1, 1, 2), vec![-1.0, 2.0]).unwrap(), true);
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 2.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(0.0), true);
    let s = t.sigmoid(x).unwrap();
    assert_eq!(t.value(s).data(), &[0.5]);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.25]);
}

#[test]
fn concat_bookkeeping() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let at = rand_tensor(&mut rng, Shape::new(2, 2, 3, 3));
    let bt = rand_tensor(&mut rng, Shape::new(2, 3, 3, 3));
    let mut t = Tape::new();
    let a = t.leaf(at.clone(), true);
    let b = t.leaf(bt.clone(), true);
    let c = t.concat_channels(a, b).unwrap();
    assert_eq!(t.shape(c), Shape::new(2, 5, 3, 3));
    for n in 0..2 {
        for ch in 0..5 {
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if ch < 2 { at.at(n, ch, i, j) } else { bt.at(n, ch - 2, i, j) };
                    assert_eq!(t.value(c).at(n, ch, i, j), expect);
                }
            }
        }
    }
    let r = Tensor::from_fn(Shape::new(2, 5, 3, 3), |i| i as f32);
    let l = weighted_sum(&mut t, c, &r).unwrap();
    t.backward(l).unwrap();
    for n in 0..2 {
        for ch in 0..5 {
            for i in 0..3 {
                for j in 0..3 {
                    let g = r.at(n, ch, i, j);
                    let got = if ch < 2 { t.grad(a).unwrap().at(n, ch, i, j) } else { t.grad(b).unwrap().at(n, ch - 2, i, j) };
                    assert_eq!(got, g);
                }
            }
        }
    }
    let d = t.constant(Tensor::zeros(Shape::new(2, 1, 4, 3)));
    assert!(matches!(t.concat_channels(a, d), Err(AutodiffError::ShapeMismatch { .. })));
}

#[test]
fn backward_basics() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = rand_tensor(&mut rng, Shape::new(1, 2, 3, 3));
    let mut t = Tape::new();
    let x = t.leaf(xt.clone(), true);
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

    let mut t = Tape::new();
    let x = t.leaf(xt.clone(), true);
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s).unwrap();
    for (g, v) in t.grad(x).unwrap().data().iter().zip(xt.data()) {
        assert_eq!(*g, 2.0 * v);
    }

    // y = x + x accumulates both paths
    let mut t = Tape::new();
    let x = t.leaf(xt.clone(), true);
    let y = t.add(x, x).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 2.0));

    assert!(matches!(t.backward(y), Err(AutodiffError::NotScalar(_))));
}

#[test]
fn non_finite_is_an_error() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(-1.0), true);
    assert!(matches!(t.ln(x), Err(AutodiffError::NonFinite { op: "ln" })));
}

#[test]
fn broadcast_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(Shape::new(2, 3, 4, 4)));
    let good = t.constant(Tensor::zeros(Shape::new(2, 1, 4, 4)));
    let chan = t.constant(Tensor::zeros(Shape::vector(3)));
    let bad = t.constant(Tensor::zeros(Shape::new(2, 2, 4, 4)));
    assert!(t.mul(a, good).is_ok());
    assert!(t.add(a, chan).is_ok());
    assert!(matches!(t.add(a, bad), Err(AutodiffError::ShapeMismatch { .. })));
}

#[test]
fn finite_diff_on_sum_is_exact() {
    let x = Tensor::from_fn(Shape::new(1, 1, 2, 3), |i| i as f32 * 0.3 - 0.5);
    let err = finite_diff_check(|t, v| t.sum(v), &x, 1e-3).unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn gradient_checks_per_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let eps = 1e-3;
    let mut worst = [0.0f64; 11];
    for _ in 0..20 {
        let shape = Shape::new(1, 2, 4, 4);
        let r = positive(&mut rng, shape);
        let x = away_from_zero(&mut rng, shape);
        let xp = positive(&mut rng, shape);
        let clamp_in = Tensor::from_fn(shape, |i| {
            let m = if i % 2 == 0 { rng.random_range(0.1..0.5) } else { rng.random_range(0.6..1.0) };
            if rng.random_bool(0.5) { m } else { -m }
        });
        let other = positive(&mut rng, shape);
        let gate = positive(&mut rng, Shape::new(1, 1, 4, 4));

        let conv_w = positive(&mut rng, Shape::new(3, 2, 3, 3));
        let conv_w_signed = rand_tensor(&mut rng, Shape::new(3, 2, 3, 3));
        let conv_b = rand_tensor(&mut rng, Shape::vector(3));
        let rc = positive(&mut rng, Shape::new(1, 3, 4, 4));
        let errs = [
            centered_check(|t, v| {
                let w = t.constant(conv_w.clone());
                let b = t.constant(conv_b.clone());
                let y = t.conv2d(v, w, Some(b), 1, 1)?;
                Ok((y, rc.clone()))
            }, &x, eps),
            centered_check(|t, v| {
                let xx = t.constant(xp.clone());
                let b = t.constant(conv_b.clone());
                let y = t.conv2d(xx, v, Some(b), 1, 1)?;
                Ok((y, rc.clone()))
            }, &conv_w_signed, eps),
            centered_check(|t, v| {
                let w = t.constant(Tensor::from_fn(Shape::new(2, 3, 2, 2), |i| ((i * 7) % 5) as f32 * 0.2 + 0.2));
                let y = t.conv_transpose2d(v, w, None, 2)?;
                let rr = Tensor::from_fn(t.shape(y), |i| ((i * 13) % 11) as f32 * 0.05 + 0.5);
                Ok((y, rr.clone()))
            }, &x, eps),
            centered_check(|t, v| {
                // distinct values per window keep max-pool away from ties
                let y = t.maxpool2(v)?;
                let rr = Tensor::from_fn(t.shape(y), |i| (i % 3) as f32 * 0.25 + 0.5);
                Ok((y, rr.clone()))
            }, &Tensor::from_fn(shape, |i| ((i * 37) % 32) as f32 * 0.05 - 0.8), eps),
            centered_check(|t, v| {
                let y = t.upsample_nearest2(v)?;
                let rr = Tensor::from_fn(t.shape(y), |i| ((i * 5) % 7) as f32 * 0.1 + 0.4);
                Ok((y, rr.clone()))
            }, &x, eps),
            centered_check(|t, v| { let y = t.relu(v)?; Ok((y, r.clone())) }, &x, eps),
            centered_check(|t, v| { let y = t.sigmoid(v)?; Ok((y, r.clone())) }, &x, eps),
            // bounds at ±0.55 sit at least 0.05 from every input
            centered_check(|t, v| { let y = t.clamp(v, -0.55, 0.55)?; Ok((y, r.clone())) }, &clamp_in, eps),
            centered_check(|t, v| {
                let o = t.constant(other.clone());
                let a = t.add(v, o)?;
                let m = t.mul(a, v)?;
                Ok((m, r.clone()))
            }, &xp, eps),
            centered_check(|t, v| {
                let g = t.constant(gate.clone());
                let m = t.mul(v, g)?;
                let s = t.scale(m, 1.5)?;
                let c = t.concat_channels(s, v)?;
                let rr = Tensor::from_fn(t.shape(c), |i| ((i * 3) % 5) as f32 * 0.1 + 0.5);
                Ok((c, rr.clone()))
            }, &x, eps),
            centered_check(|t, v| {
                // gradient w.r.t. the broadcast operand
                let xx = t.constant(xp.clone());
                let m = t.mul(xx, v)?;
                Ok((m, r.clone()))
            }, &gate, eps),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    for (i, w) in worst.iter().enumerate() {
        assert!(*w <= 1e-3, "op check {i}: max relative error {w}");
    }
}

#[test]
fn determinism_of_forward() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, Shape::new(2, 3, 8, 8));
        let w = rand_tensor(&mut rng, Shape::new(4, 3, 3, 3));
        let mut t = Tape::new();
        let xv = t.constant(x);
        let wv = t.constant(w);
        let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
        t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
