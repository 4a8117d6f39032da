use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segforge_core::autodiff::{finite_diff_check, Shape, Tape, Tensor, Var};
use segforge_core::losses::*;
use segforge_core::MaskSlice;

const EPS: f32 = DEFAULT_EPS;

fn probs(rng: &mut ChaCha8Rng, s: Shape) -> Tensor {
    Tensor::from_fn(s, |_| rng.random_range(0.05..0.95))
}

fn binary(rng: &mut ChaCha8Rng, s: Shape) -> Tensor {
    Tensor::from_fn(s, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

fn value(p: &Tensor, t: &Tensor, f: impl Fn(&mut Tape, Var, Var) -> Result<Var, LossError>) -> f64 {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let tv = tape.constant(t.clone());
    let l = f(&mut tape, pv, tv).unwrap();
    tape.value(l).item().unwrap() as f64
}

fn dice_oracle(p: &[f32], t: &[f32], eps: f64) -> f64 {
    let (mut i, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(t) {
        i += a as f64 * b as f64;
        sp += a as f64;
        st += b as f64;
    }
    1.0 - (2.0 * i + eps) / (sp + st + eps)
}

fn weighted_bce_oracle(p: &[f32], t: &[f32], w: f64, eps: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (&a, &b) in p.iter().zip(t) {
        let (a, b) = (a as f64, b as f64);
        let wt = if b > 0.5 { w } else { 1.0 };
        num += -wt * (b * (a + eps).ln() + (1.0 - b) * (1.0 - a + eps).ln());
        den += wt;
    }
    num / den
}

fn brute_sdm(m: &MaskSlice) -> Vec<f64> {
    let (w, h) = m.dims();
    let mut boundary = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !m.get(x, y) {
                continue;
            }
            let n4 = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
            let edge = n4.iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 && !m.get(nx as usize, ny as usize)
            });
            if edge {
                boundary.push((x as i64, y as i64));
            }
        }
    }
    let diag = ((w * w + h * h) as f64).sqrt();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let d2 = boundary.iter().map(|&(bx, by)| (bx - x as i64).pow(2) + (by - y as i64).pow(2)).min();
            let mag = d2.map_or(diag, |d| (d as f64).sqrt());
            out.push(if m.get(x, y) { -mag } else { mag });
        }
    }
    out
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> MaskSlice {
    // blobs of varying density so masks include large regions and speckle
    let density = rng.random_range(0.05..0.6);
    let mut m = MaskSlice::from_fn(w, h, |_, _| rng.random_bool(density * 0.2));
    for _ in 0..rng.random_range(0..4) {
        let (cx, cy) = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
        let r = rng.random_range(1.0..10.0);
        for y in 0..h {
            for x in 0..w {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                    m.set(x, y, true);
                }
            }
        }
    }
    m
}

#[test]
fn bce_matches_per_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let s = Shape::new(2, 1, 5, 7);
        let (p, t) = (probs(&mut rng, s), binary(&mut rng, s));
        let got = value(&p, &t, |a, p, t| bce_loss(a, p, t, EPS));
        let want = weighted_bce_oracle(p.data(), t.data(), 1.0, EPS as f64);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn weighted_bce_matches_oracle_and_reduces() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let s = Shape::new(1, 1, 6, 6);
        let (p, t) = (probs(&mut rng, s), binary(&mut rng, s));
        let got = value(&p, &t, |a, p, t| weighted_bce_loss(a, p, t, 5.0, EPS));
        let want = weighted_bce_oracle(p.data(), t.data(), 5.0, EPS as f64);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");

        let plain = value(&p, &t, |a, p, t| bce_dice_loss(a, p, t, 0.5, EPS));
        let unit = value(&p, &t, |a, p, t| weighted_bce_dice_loss(a, p, t, 1.0, 0.5, EPS));
        assert!((plain - unit).abs() < 1e-6);

        let bg = Tensor::zeros(s);
        let plain = value(&p, &bg, |a, p, t| bce_dice_loss(a, p, t, 0.3, EPS));
        let heavy = value(&p, &bg, |a, p, t| weighted_bce_dice_loss(a, p, t, 37.0, 0.3, EPS));
        assert!((plain - heavy).abs() < 1e-6);
    }
}

#[test]
fn bce_dice_endpoints_and_mix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let s = Shape::new(1, 1, 4, 9);
        let (p, t) = (probs(&mut rng, s), binary(&mut rng, s));
        let b = value(&p, &t, |a, p, t| bce_loss(a, p, t, EPS));
        let d = value(&p, &t, |a, p, t| dice_loss(a, p, t, EPS));
        assert!((d - dice_oracle(p.data(), t.data(), EPS as f64)).abs() < 1e-6);
        assert_eq!(value(&p, &t, |a, p, t| bce_dice_loss(a, p, t, 1.0, EPS)), b);
        assert_eq!(value(&p, &t, |a, p, t| bce_dice_loss(a, p, t, 0.0, EPS)), d);
        let mid = value(&p, &t, |a, p, t| bce_dice_loss(a, p, t, 0.5, EPS));
        assert!((mid - (b + d) / 2.0).abs() < 1e-6);
    }
}

#[test]
fn log_dice_dominates_dice() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let s = Shape::new(1, 1, 3, 3);
        let (p, t) = (probs(&mut rng, s), binary(&mut rng, s));
        let d = value(&p, &t, |a, p, t| dice_loss(a, p, t, EPS));
        let ld = value(&p, &t, |a, p, t| log_dice_loss(a, p, t, EPS));
        assert!(ld >= d - 1e-6);
        let score = 1.0 - dice_oracle(p.data(), t.data(), EPS as f64);
        assert!((ld + score.ln()).abs() < 1e-5);
    }
}

#[test]
fn surface_loss_examples() {
    let disk = MaskSlice::from_fn(5, 5, |x, y| (x as i32 - 2).pow(2) + (y as i32 - 2).pow(2) <= 4);
    let sdm = distance_tensor(&[signed_distance_map(&disk)]);
    let s = sdm.shape();
    let indicator = disk.to_slice();
    let p = Tensor::new(s, indicator.pixels().to_vec()).unwrap();
    let v = value(&p, &sdm, surface_loss);
    let oracle: f64 = brute_sdm(&disk)
        .iter()
        .zip(indicator.pixels())
        .map(|(&d, &m)| d * m as f64)
        .sum::<f64>()
        / 25.0;
    assert!(oracle < 0.0);
    assert!((v - oracle).abs() < 1e-6);
    assert_eq!(value(&Tensor::zeros(s), &sdm, surface_loss), 0.0);
}

#[test]
fn generalized_endpoints_and_affinity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let s = Shape::new(2, 1, 6, 6);
        let (p, t) = (probs(&mut rng, s), binary(&mut rng, s));
        let sdm = distance_tensor(
            &(0..2)
                .map(|n| {
                    let m = MaskSlice::from_fn(6, 6, |x, y| t.at(n, 0, y, x) > 0.5);
                    signed_distance_map(&m)
                })
                .collect::<Vec<_>>(),
        );
        let run = |alpha: f32| {
            let cfg = LossConfig { alpha, pos_weight: Some(3.0), ..LossConfig::default() };
            let mut tape = Tape::new();
            let (pv, tv, sv) = (tape.constant(p.clone()), tape.constant(t.clone()), tape.constant(sdm.clone()));
            let l = generalized_loss(&mut tape, pv, tv, sv, &cfg).unwrap();
            tape.value(l).item().unwrap() as f64
        };
        let a = value(&p, &t, |a, p, t| weighted_bce_dice_loss(a, p, t, 3.0, 0.5, EPS));
        let mut tape = Tape::new();
        let (pv, sv) = (tape.constant(p.clone()), tape.constant(sdm.clone()));
        let l = surface_loss(&mut tape, pv, sv).unwrap();
        let b = tape.value(l).item().unwrap() as f64;
        assert_eq!(run(1.0), a);
        assert_eq!(run(0.0), b);
        assert!((run(0.7) - (0.7 * a + 0.3 * b)).abs() < 1e-5);
        assert!((run(0.5) - (run(0.0) + run(1.0)) / 2.0).abs() < 1e-5);
    }
}

#[test]
fn dice_is_symmetric_for_binary_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let s = Shape::new(1, 1, 5, 5);
        let (a, b) = (binary(&mut rng, s), binary(&mut rng, s));
        assert_eq!(
            value(&a, &b, |x, p, t| dice_loss(x, p, t, EPS)),
            value(&b, &a, |x, p, t| dice_loss(x, p, t, EPS))
        );
    }
}

#[test]
fn dice_is_monotone_on_true_foreground() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let s = Shape::new(1, 1, 4, 4);
        let (p, t) = (probs(&mut rng, s), binary(&mut rng, s));
        let mut tape = Tape::new();
        let pv = tape.leaf(p.clone(), true);
        let tv = tape.constant(t.clone());
        let l = dice_loss(&mut tape, pv, tv, EPS).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(pv).unwrap();
        for i in 0..s.len() {
            if t.data()[i] > 0.5 {
                assert!(g.data()[i] <= 0.0, "pixel {i} gradient {}", g.data()[i]);
            }
        }
    }
}

fn sdm_for(t: &Tensor) -> Tensor {
    let s = t.shape();
    let maps: Vec<_> = (0..s.n)
        .map(|n| signed_distance_map(&MaskSlice::from_fn(s.w, s.h, |x, y| t.at(n, 0, y, x) > 0.5)))
        .collect();
    distance_tensor(&maps)
}

/// Every loss against central differences, 20 seeded instances each.
#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = LossConfig { alpha: 0.6, pos_weight: Some(4.0), ..LossConfig::default() };
    for kind in LossKind::ALL {
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let s = Shape::new(1, 1, 4, 4);
            let (p, t) = (probs(&mut rng, s), binary(&mut rng, s));
            // unit-scale distances keep the surface term comparable to the others
            let sdm = Tensor::from_fn(s, |i| sdm_for(&t).data()[i] / 4.0);
            let err = finite_diff_check(
                |tape, pv| {
                    let tv = tape.constant(t.clone());
                    let sv = tape.constant(sdm.clone());
                    compute_loss(tape, kind, &cfg, pv, tv, Some(sv))
                        .map_err(|e| match e {
                            LossError::Autodiff(a) => a,
                            other => panic!("{other}"),
                        })
                },
                &p,
                1e-3,
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst <= 1e-3, "{}: max relative error {worst}", kind.name());
    }
}

#[test]
fn sdm_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..50 {
        let m = random_mask(&mut rng, 32, 32);
        assert_eq!(signed_distance_map(&m).values(), &brute_sdm(&m)[..], "trial {trial}");
    }
}

#[test]
fn sdm_rectangular_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
        let m = random_mask(&mut rng, w, h);
        assert_eq!(signed_distance_map(&m).values(), &brute_sdm(&m)[..]);
    }
}

proptest! {
    #[test]
    fn sdm_sign_follows_membership(bits in proptest::collection::vec(any::<bool>(), 64)) {
        let m = MaskSlice::from_fn(8, 8, |x, y| bits[y * 8 + x]);
        let s = signed_distance_map(&m);
        for y in 0..8 {
            for x in 0..8 {
                let v = s.get(x, y);
                if m.get(x, y) { prop_assert!(v <= 0.0) } else { prop_assert!(v > 0.0) }
            }
        }
    }

    // The complement's boundary sits one pixel across the contour, so the
    // magnitudes agree to within one pixel rather than exactly.
    #[test]
    fn sdm_magnitude_nearly_complement_invariant(bits in proptest::collection::vec(any::<bool>(), 100)) {
        let m = MaskSlice::from_fn(10, 10, |x, y| bits[y * 10 + x]);
        prop_assume!(m.count() > 0 && m.count() < 100);
        let a = signed_distance_map(&m);
        let b = signed_distance_map(&m.complement());
        for (u, v) in a.values().iter().zip(b.values()) {
            prop_assert!((u.abs() - v.abs()).abs() <= 1.0);
        }
    }

    #[test]
    fn dice_in_unit_interval_and_bce_nonnegative(
        p in proptest::collection::vec(0.0f32..=1.0, 12),
        t in proptest::collection::vec(any::<bool>(), 12),
    ) {
        let s = Shape::new(1, 1, 3, 4);
        let p = Tensor::new(s, p).unwrap();
        let t = Tensor::new(s, t.into_iter().map(|b| b as u8 as f32).collect()).unwrap();
        let d = value(&p, &t, |a, p, t| dice_loss(a, p, t, EPS));
        prop_assert!((-1e-6..=1.0 + 1e-6).contains(&d));
        prop_assert!(value(&p, &t, |a, p, t| bce_loss(a, p, t, EPS)) >= 0.0);
    }
}
