mod common;

use common::centered_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segforge_core::autodiff::{finite_diff_check, AutodiffError, Shape, Tape, Tensor, Var};
use segforge_core::losses::bce_dice_loss;
use segforge_core::model::*;

fn cfg(depth: usize, base: usize, size: usize, attention: bool) -> ModelConfig {
    ModelConfig {
        depth,
        base_channels: base,
        in_channels: 1,
        input_size: (size, size),
        attention_enabled: attention,
        init_seed: 11,
    }
}

fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

/// Closed-form parameter count of the described block structure.
fn analytic_count(c: &ModelConfig) -> usize {
    let ch = |l: usize| c.base_channels << l;
    let mut total = 0;
    let mut cin = c.in_channels;
    for l in 0..=c.depth {
        total += conv_params(cin, ch(l), 3) + conv_params(ch(l), ch(l), 3);
        cin = ch(l);
    }
    for l in 0..c.depth {
        total += conv_params(ch(l + 1), ch(l), 2);
        if c.attention_enabled {
            let inter = (ch(l) / 2).max(1);
            total += conv_params(ch(l), inter, 1) + conv_params(ch(l + 1), inter, 1) + conv_params(inter, 1, 1);
        }
        total += conv_params(2 * ch(l), ch(l), 3) + conv_params(ch(l), ch(l), 3);
    }
    total + conv_params(ch(0), 1, 1)
}

#[test]
fn tiny_parameter_count() {
    let m = build_unet(&cfg(1, 1, 4, true)).unwrap();
    // enc 10+10, bottleneck 20+38, up 9, gate 2+3+2, dec 19+10, head 2
    assert_eq!(count_parameters(&m), 125);
    assert_eq!(count_parameters(&build_unet(&cfg(1, 1, 4, false)).unwrap()), 118);
}

#[test]
fn counts_match_closed_form() {
    for depth in 1..=4 {
        for base in [1, 2, 3, 8] {
            for att in [false, true] {
                let c = cfg(depth, base, 16, att);
                assert_eq!(count_parameters(&build_unet(&c).unwrap()), analytic_count(&c), "{c:?}");
            }
        }
    }
}

#[test]
fn doubling_base_quadruples_inner_conv_weights() {
    let a = build_unet(&cfg(2, 4, 16, true)).unwrap();
    let b = build_unet(&cfg(2, 8, 16, true)).unwrap();
    assert_eq!(a.names(), b.names());
    for (name, (pa, pb)) in a.names().iter().zip(a.params().iter().zip(b.params())) {
        let (sa, sb) = (pa.shape(), pb.shape());
        // the input conv and the head each have one fixed channel side
        let factor = if name == "enc0.conv1.weight" || name == "head.weight" || name.ends_with("psi.weight") {
            2
        } else if name.ends_with(".weight") {
            4
        } else if name == "head.bias" || name.ends_with("psi.bias") {
            1
        } else {
            2
        };
        assert_eq!(sb.len(), factor * sa.len(), "{name}: {sa} -> {sb}");
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = build_unet(&cfg(2, 4, 16, true)).unwrap();
    let b = build_unet(&cfg(2, 4, 16, true)).unwrap();
    for (x, y) in a.params().iter().zip(b.params()) {
        assert!(x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
    let c = build_unet(&ModelConfig { init_seed: 12, ..cfg(2, 4, 16, true) }).unwrap();
    assert_ne!(a.params()[0], c.params()[0]);
}

#[test]
fn he_initialization_scale() {
    let m = build_unet(&cfg(2, 16, 16, true)).unwrap();
    let w = m.param("dec0.conv1.weight").unwrap();
    let fan_in = 32.0 * 9.0;
    let var = w.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / w.len() as f64;
    assert!((var * fan_in / 2.0 - 1.0).abs() < 0.1, "variance ratio {}", var * fan_in / 2.0);
}

#[test]
fn ablation_removes_gates() {
    let m = build_unet(&cfg(2, 2, 8, false)).unwrap();
    assert!(m.names().iter().all(|n| !n.contains("gate")));
    let g = build_unet(&cfg(2, 2, 8, true)).unwrap();
    assert_eq!(g.names().iter().filter(|n| n.contains("gate")).count(), 12);
}

#[test]
fn output_shape_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (depth, size) in [(1, 16), (2, 32), (3, 64), (3, 128), (2, 16)] {
        let m = build_unet(&cfg(depth, 2, size, true)).unwrap();
        let x = Tensor::from_fn(Shape::new(2, 1, size, size), |_| rng.random_range(-3.0..3.0));
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 1, size, size));
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let z = m.forward(&Tensor::zeros(Shape::new(1, 1, size, size))).unwrap();
        assert!(z.is_finite());
    }
}

#[test]
fn perturbing_an_encoder_weight_changes_output() {
    let mut m = build_unet(&cfg(2, 2, 16, true)).unwrap();
    let x = Tensor::from_fn(Shape::new(1, 1, 16, 16), |i| ((i * 7) % 13) as f32 / 13.0);
    let before = m.forward(&x).unwrap();
    m.param_mut("enc0.conv1.weight").unwrap().data_mut()[4] += 1.0;
    assert_ne!(before, m.forward(&x).unwrap());
}

fn gate_params(tape: &mut Tape, rng: &mut ChaCha8Rng, cx: usize, cg: usize, psi_bias: Option<f32>, zero_psi: bool) -> GateParams {
    let inter = gate_channels(cx);
    let mut r = |s: Shape| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0));
    let wx = r(Shape::new(inter, cx, 1, 1));
    let bx = r(Shape::vector(inter));
    let wg = r(Shape::new(inter, cg, 1, 1));
    let bg = r(Shape::vector(inter));
    let mut psi_w = r(Shape::new(1, inter, 1, 1));
    let mut psi_b = r(Shape::vector(1));
    if zero_psi {
        psi_w = Tensor::zeros(psi_w.shape());
        psi_b = Tensor::zeros(psi_b.shape());
    }
    if let Some(b) = psi_bias {
        psi_w = Tensor::zeros(psi_w.shape());
        psi_b = Tensor::full(psi_b.shape(), b);
    }
    GateParams {
        wx: tape.constant(wx),
        bx: tape.constant(bx),
        wg: tape.constant(wg),
        bg: tape.constant(bg),
        psi_w: tape.constant(psi_w),
        psi_b: tape.constant(psi_b),
    }
}

#[test]
fn gate_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs = Shape::new(2, 4, 6, 6);
    let x = Tensor::from_fn(xs, |_| rng.random_range(-2.0..2.0));
    let g = Tensor::from_fn(Shape::new(2, 8, 3, 3), |_| rng.random_range(-2.0..2.0));
    for (bias, zero, expect) in [(None, true, 0.5f32), (Some(20.0), false, 1.0)] {
        let mut tape = Tape::new();
        let p = gate_params(&mut tape, &mut rng, 4, 8, bias, zero);
        let (xv, gv) = (tape.constant(x.clone()), tape.constant(g.clone()));
        let y = attention_gate(&mut tape, xv, gv, &p).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            if zero {
                assert_eq!(*a, b * expect);
            } else {
                assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
            }
        }
    }
}

#[test]
fn gate_rejects_misaligned_signal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let p = gate_params(&mut tape, &mut rng, 2, 2, None, false);
    let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let g = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    assert!(matches!(attention_gate(&mut tape, x, g, &p), Err(ModelError::Autodiff(_))));
}

#[test]
fn gate_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = Tensor::from_fn(Shape::new(1, 2, 4, 4), |_| rng.random_range(0.2..1.0));
        let g = Tensor::from_fn(Shape::new(1, 2, 2, 2), |_| rng.random_range(-1.0..1.0));
        let seed: u64 = rng.random();
        let r = Tensor::from_fn(x.shape(), |_| rng.random_range(0.5..1.0));
        let err = centered_check(
            |tape, xv| {
                // positive weights keep the gating term from cancelling the direct one
                let mut prng = ChaCha8Rng::seed_from_u64(seed);
                let mut pos = |s: Shape| tape.constant(Tensor::from_fn(s, |_| prng.random_range(0.1..1.0)));
                let p = GateParams {
                    wx: pos(Shape::new(1, 2, 1, 1)),
                    bx: pos(Shape::vector(1)),
                    wg: pos(Shape::new(1, 2, 1, 1)),
                    bg: pos(Shape::vector(1)),
                    psi_w: pos(Shape::new(1, 1, 1, 1)),
                    psi_b: pos(Shape::vector(1)),
                };
                let gv = tape.constant(g.clone());
                let y = attention_gate(tape, xv, gv, &p).map_err(|e| match e {
                    ModelError::Autodiff(a) => a,
                    other => panic!("{other}"),
                })?;
                Ok((y, r.clone()))
            },
            &x,
            1e-3,
        );
        worst = worst.max(err);
    }
    assert!(worst <= 1e-3, "max relative error {worst}");
}

/// Zeroing every ψ makes each gate pass exactly half of its skip, which is
/// the plain network with the skip-side decoder weights halved.
#[test]
fn zero_psi_equals_plain_unet_with_halved_skips() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut gated = build_unet(&cfg(2, 4, 16, true)).unwrap();
    let mut plain = build_unet(&cfg(2, 4, 16, false)).unwrap();
    for name in gated.names().to_vec() {
        if name.contains("psi") {
            gated.param_mut(&name).unwrap().data_mut().fill(0.0);
        }
    }
    for name in plain.names().to_vec() {
        let mut t = gated.param(&name).unwrap().clone();
        if let Some(level) = name.strip_prefix("dec").and_then(|r| r.strip_suffix(".conv1.weight")) {
            let skip_channels = 4usize << level.parse::<usize>().unwrap();
            let s = t.shape();
            for o in 0..s.n {
                for c in 0..skip_channels {
                    for k in 0..s.plane() {
                        t.data_mut()[(o * s.c + c) * s.plane() + k] *= 0.5;
                    }
                }
            }
        }
        *plain.param_mut(&name).unwrap() = t;
    }
    let x = Tensor::from_fn(Shape::new(2, 1, 16, 16), |_| rng.random_range(-1.0..1.0));
    let (a, b) = (gated.forward(&x).unwrap(), plain.forward(&x).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
}

/// Replace every parameter by a positive value scaled by its fan-in, so
/// activations stay O(1), every ReLU is active and no gradient term cancels.
fn positive_params(m: &mut Model, rng: &mut ChaCha8Rng) {
    for i in 0..m.names().len() {
        let name = m.names()[i].clone();
        let t = &mut m.params_mut()[i];
        let s = t.shape();
        let fan_in = if name.ends_with("up.weight") { s.n } else { s.c * s.plane() };
        for v in t.data_mut() {
            *v = if name.ends_with(".bias") {
                rng.random_range(0.01..0.1)
            } else {
                rng.random_range(0.5..1.5) / fan_in as f32
            };
        }
    }
}

fn bound_forward(model: &Model, tape: &mut Tape, params: &[Var], x: &Tensor) -> Result<Var, AutodiffError> {
    let xv = tape.constant(x.clone());
    model.forward_on(tape, params, xv).map_err(|e| match e {
        ModelError::Autodiff(a) => a,
        other => panic!("{other}"),
    })
}

/// Per-coordinate check of every parameter tensor through the whole network.
#[test]
fn end_to_end_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = build_unet(&cfg(1, 2, 8, true)).unwrap();
    positive_params(&mut model, &mut rng);
    let x = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_| rng.random_range(0.2..1.0));
    let r = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_| rng.random_range(0.5..1.0));
    let mut report = Vec::new();
    for (idx, name) in model.names().iter().enumerate() {
        let err = centered_check(
            |tape, v| {
                let mut params = model.bind(tape, false);
                params[idx] = v;
                Ok((bound_forward(&model, tape, &params, &x)?, r.clone()))
            },
            &model.params()[idx],
            1e-3,
        );
        report.push((name.clone(), err));
    }
    let bad: Vec<_> = report.iter().filter(|(_, e)| *e > 1e-3).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

/// Directional derivative of BCE-Dice for a He-initialized network along
/// random parameter directions.
///
/// Biases are randomized first: at zero bias, conv outputs over dead ReLU
/// regions sit exactly on the next ReLU's kink. Moving every parameter at
/// once crosses a few kinks at step 1e-3, so this check uses step 1e-4,
/// where f32 rounding of the loss limits agreement to about 1e-3; it asserts
/// 1e-2, far below the O(1) disagreement a wrong gradient produces. The
/// strict per-coordinate check is `end_to_end_gradient_check`.
#[test]
fn end_to_end_directional_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = build_unet(&cfg(1, 2, 8, true)).unwrap();
    for i in 0..model.names().len() {
        if model.names()[i].ends_with(".bias") {
            model.params_mut()[i].data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let x = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_| rng.random_range(-1.0..1.0));
    let t = Tensor::from_fn(Shape::new(1, 1, 8, 8), |i| ((i / 8 > 2 && i % 8 > 3) as u8) as f32);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let dirs: Vec<Tensor> = model
            .params()
            .iter()
            .map(|p| Tensor::from_fn(p.shape(), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let err = finite_diff_check(
            |tape, step| {
                let mut params = Vec::new();
                for (p, d) in model.params().iter().zip(&dirs) {
                    let (pv, dv) = (tape.constant(p.clone()), tape.constant(d.clone()));
                    let moved = tape.mul(dv, step)?;
                    params.push(tape.add(pv, moved)?);
                }
                let p = bound_forward(&model, tape, &params, &x)?;
                let tv = tape.constant(t.clone());
                Ok(bce_dice_loss(tape, p, tv, 0.5, 1e-6).unwrap())
            },
            &Tensor::scalar(0.0),
            1e-4,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst <= 1e-2, "max relative error {worst}");
}
