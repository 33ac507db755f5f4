use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmodal_core::objectives::*;

/// Direct loop form of the paired contrastive loss: no matrix algebra,
/// explicit candidate sets.
fn contrastive_oracle(he: &Array2<f64>, sim: &Array2<f64>, tau: f64) -> f64 {
    let b = he.nrows();
    let rows: Vec<Vec<f64>> = he.outer_iter().chain(sim.outer_iter()).map(|r| r.to_vec()).collect();
    let cos = |a: &[f64], c: &[f64]| {
        let dot: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nc: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nc)
    };
    let ell = |anchor: usize, positive: usize| {
        let num = (cos(&rows[anchor], &rows[positive]) / tau).exp();
        let mut den = 0.0;
        for (k, cand) in rows.iter().enumerate() {
            if k != anchor {
                den += (cos(&rows[anchor], cand) / tau).exp();
            }
        }
        (num / den).ln()
    };
    let mut total = 0.0;
    for i in 0..b {
        total += ell(i, b + i) + ell(b + i, i);
    }
    -total / (2 * b) as f64
}

/// Pair-by-pair self-distillation loss.
fn dino_oracle(t: &Array2<f64>, s: &Array2<f64>, c: &Array1<f64>, temps: &Temperatures) -> f64 {
    let softmax = |v: Vec<f64>| {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect::<Vec<_>>()
    };
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..t.nrows() {
        let q = softmax(t.row(i).iter().zip(c).map(|(a, b)| (a - b) / temps.t_teacher).collect());
        for j in 0..s.nrows() {
            if i == j {
                continue;
            }
            let p = softmax(s.row(j).iter().map(|a| a / temps.t_student).collect());
            sum -= q.iter().zip(&p).map(|(qq, pp)| qq * pp.ln()).sum::<f64>();
            count += 1.0;
        }
    }
    sum / count
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `f` at `x`, compared entrywise with `analytic`.
fn check_fd(x: &Array2<f64>, analytic: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) {
    let h = 1e-4;
    for idx in ndarray::indices(x.dim()) {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[idx] += h;
        xm[idx] -= h;
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        let err = rel_err(fd, analytic[idx]);
        assert!(
            err <= 1e-3 || (fd - analytic[idx]).abs() < 1e-8,
            "entry {idx:?}: numeric {fd} analytic {}",
            analytic[idx]
        );
    }
}

#[test]
fn contrastive_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let b = rng.random_range(1..=8);
        let d = rng.random_range(1..=16);
        let tau = [0.1, 0.5, 1.0][rng.random_range(0..3)];
        let he = random_matrix(&mut rng, b, d);
        let sim = random_matrix(&mut rng, b, d);
        let got = paired_contrastive_loss(he.view(), sim.view(), tau).unwrap();
        let want = contrastive_oracle(&he, &sim, tau);
        assert_abs_diff_eq!(got, want, epsilon = 1e-6);
    }
}

#[test]
fn contrastive_single_pair_is_exactly_zero() {
    let he = array![[0.3, -2.0, 1.0]];
    let sim = array![[5.0, 0.1, 0.0]];
    for tau in [0.05, 0.2, 1.0] {
        assert_eq!(paired_contrastive_loss(he.view(), sim.view(), tau).unwrap(), 0.0);
    }
}

#[test]
fn contrastive_orthonormal_pair_value() {
    let e = array![[1.0, 0.0], [0.0, 1.0]];
    let got = paired_contrastive_loss(e.view(), e.view(), 1.0).unwrap();
    let want = (std::f64::consts::E + 2.0).ln() - 1.0;
    assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    assert_abs_diff_eq!(contrastive_oracle(&e, &e, 1.0), want, epsilon = 1e-12);
}

#[test]
fn contrastive_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let he = random_matrix(&mut rng, 5, 7);
    let sim = random_matrix(&mut rng, 5, 7);
    let a = paired_contrastive_loss(he.view(), sim.view(), 0.2).unwrap();
    let b = paired_contrastive_loss((&he * 5.0).view(), (&sim * 5.0).view(), 0.2).unwrap();
    assert_abs_diff_eq!(a, b, epsilon = 1e-6);
}

#[test]
fn dino_two_view_case_matches_enumeration() {
    let t = array![[2.0, 0.0], [0.0, 2.0]];
    let s = array![[1.0, 1.0], [1.0, 1.0]];
    let c = Array1::zeros(2);
    let temps = Temperatures {
        t_teacher: 1.0,
        t_student: 1.0,
        tau_contrast: 1.0,
    };
    let got = dino_loss(t.view(), s.view(), c.view(), &temps).unwrap();
    // uniform student: every pair costs ln 2 regardless of the target
    assert_abs_diff_eq!(got, 2f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(got, dino_oracle(&t, &s, &c, &temps), epsilon = 1e-12);
}

#[test]
fn dino_centering_cancels_teacher_logits() {
    let c = array![0.5, -1.0, 2.0, 0.25];
    let t = ndarray::stack![ndarray::Axis(0), c, c];
    let s = Array2::from_elem((5, 4), 3.0);
    let l = dino_loss(t.view(), s.view(), c.view(), &Temperatures::default()).unwrap();
    assert_abs_diff_eq!(l, 4f64.ln(), epsilon = 1e-6);
}

#[test]
fn dino_matches_oracle_on_random_views() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let g = rng.random_range(2..4);
        let l = rng.random_range(0..4);
        let k = rng.random_range(2..10);
        let t = random_matrix(&mut rng, g, k);
        let s = random_matrix(&mut rng, g + l, k);
        let c = Array1::from_shape_fn(k, |_| rng.random_range(-0.5..0.5));
        let temps = Temperatures::default();
        let got = dino_loss(t.view(), s.view(), c.view(), &temps).unwrap();
        assert_abs_diff_eq!(got, dino_oracle(&t, &s, &c, &temps), epsilon = 1e-9);
    }
}

#[test]
fn domain_closed_form_values() {
    let uniform = Array2::zeros((3, 2));
    assert_abs_diff_eq!(domain_loss(uniform.view(), &[0, 1, 1]).unwrap(), 2f64.ln(), epsilon = 1e-12);
    let confident = array![[20.0, -20.0]];
    assert!(domain_loss(confident.view(), &[0]).unwrap() < 1e-15);
    let wrong = array![[1.0, -1.0], [-1.0, 1.0]];
    let want = (1.0 + 2f64.exp()).ln();
    assert_abs_diff_eq!(domain_loss(wrong.view(), &[1, 0]).unwrap(), want, epsilon = 1e-12);
    assert_abs_diff_eq!(want, 2.126928011042972, epsilon = 1e-12);
}

#[test]
fn recon_closed_form_values() {
    let target: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).sin()).collect();
    assert_eq!(cross_recon_loss(&target, &target, &target, &target).unwrap(), 0.0);
    let shifted: Vec<f64> = target.iter().map(|v| v + 0.5).collect();
    let l = cross_recon_loss(&shifted, &target, &shifted, &target).unwrap();
    assert_abs_diff_eq!(l, 0.5, epsilon = 1e-12);
}

#[test]
fn recon_matches_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (b, c, h, w) = (2, 3, 4, 5);
    let n = b * c * h * w;
    let gen = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (p1, t1, p2, t2) = (gen(&mut rng), gen(&mut rng), gen(&mut rng), gen(&mut rng));
    let mut a = 0.0;
    let mut bb = 0.0;
    for img in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let i = ((img * c + ch) * h + y) * w + x;
                    a += (p1[i] - t1[i]).powi(2);
                    bb += (p2[i] - t2[i]).powi(2);
                }
            }
        }
    }
    let want = a / n as f64 + bb / n as f64;
    assert_abs_diff_eq!(cross_recon_loss(&p1, &t1, &p2, &t2).unwrap(), want, epsilon = 1e-6);
}

#[test]
fn total_loss_values() {
    let c = LossComponents {
        dino: 1.0,
        domain: 0.5,
        contrast: 0.2,
        recon: 0.3,
    };
    assert_eq!(total_loss(&c, &LossWeights::new(0.0, 0.0, 0.0, 0.0)), 0.0);
    assert_eq!(total_loss(&c, &LossWeights::new(1.0, 0.0, 0.0, 0.0)), c.dino);
    assert_abs_diff_eq!(total_loss(&c, &LossWeights::new(1.0, 0.1, 0.5, 1.0)), 1.45, epsilon = 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let temps = Temperatures {
        t_teacher: 0.5,
        t_student: 0.7,
        tau_contrast: 0.5,
    };
    for _ in 0..5 {
        let t = random_matrix(&mut rng, 2, 5);
        let s = random_matrix(&mut rng, 4, 5);
        let c = Array1::from_shape_fn(5, |_| rng.random_range(-0.3..0.3));
        let (_, g) = dino_loss_grad(t.view(), s.view(), c.view(), &temps).unwrap();
        check_fd(&s, &g, |x| dino_loss(t.view(), x.view(), c.view(), &temps).unwrap());

        let logits = random_matrix(&mut rng, 6, 2) * 3.0;
        let labels = [0, 1, 1, 0, 1, 0];
        let (_, g) = domain_loss_grad(logits.view(), &labels).unwrap();
        check_fd(&logits, &g, |x| domain_loss(x.view(), &labels).unwrap());

        let he = random_matrix(&mut rng, 4, 6);
        let sim = random_matrix(&mut rng, 4, 6);
        let (_, g_he, g_sim) = paired_contrastive_loss_grad(he.view(), sim.view(), 0.5).unwrap();
        check_fd(&he, &g_he, |x| paired_contrastive_loss(x.view(), sim.view(), 0.5).unwrap());
        check_fd(&sim, &g_sim, |x| paired_contrastive_loss(he.view(), x.view(), 0.5).unwrap());

        let pred = random_matrix(&mut rng, 3, 8);
        let target = random_matrix(&mut rng, 3, 8);
        let other = random_matrix(&mut rng, 3, 8);
        let flat = |m: &Array2<f64>| m.iter().copied().collect::<Vec<_>>();
        let (_, g_a, _) = cross_recon_loss_grad(&flat(&pred), &flat(&target), &flat(&other), &flat(&target)).unwrap();
        let g_a = Array2::from_shape_vec((3, 8), g_a).unwrap();
        check_fd(&pred, &g_a, |x| {
            cross_recon_loss(&flat(x), &flat(&target), &flat(&other), &flat(&target)).unwrap()
        });
    }
}

#[test]
fn dino_gradient_ignores_teacher() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = random_matrix(&mut rng, 2, 6);
    let s = random_matrix(&mut rng, 5, 6);
    let c = Array1::zeros(6);
    let temps = Temperatures::default();
    let (l0, g0) = dino_loss_grad(t.view(), s.view(), c.view(), &temps).unwrap();
    let t2 = &t + 0.3;
    let t2 = {
        let mut m = t2;
        m[[0, 0]] += 1.0;
        m
    };
    let (l1, g1) = dino_loss_grad(t2.view(), s.view(), c.view(), &temps).unwrap();
    assert_ne!(l0, l1);
    // only the student shape is returned: the teacher has no gradient path
    assert_eq!(g0.dim(), s.dim());
    assert_eq!(g1.dim(), s.dim());
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let q = m.qr().q();
    Array2::from_shape_fn((d, d), |(i, j)| q[(i, j)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_is_modality_symmetric(seed in any::<u64>(), b in 1usize..8, d in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = random_matrix(&mut rng, b, d);
        let sim = random_matrix(&mut rng, b, d);
        let a = paired_contrastive_loss(he.view(), sim.view(), 0.3).unwrap();
        let c = paired_contrastive_loss(sim.view(), he.view(), 0.3).unwrap();
        // candidates are reordered, so the sums agree up to rounding
        prop_assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn contrastive_is_orthogonally_invariant(seed in any::<u64>(), b in 1usize..8, d in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = random_matrix(&mut rng, b, d);
        let sim = random_matrix(&mut rng, b, d);
        let q = random_orthogonal(&mut rng, d);
        let a = paired_contrastive_loss(he.view(), sim.view(), 0.2).unwrap();
        let c = paired_contrastive_loss(he.dot(&q).view(), sim.dot(&q).view(), 0.2).unwrap();
        prop_assert!((a - c).abs() < 1e-5);
    }

    #[test]
    fn contrastive_is_positive_for_distinct_candidates(seed in any::<u64>(), b in 2usize..8, d in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = random_matrix(&mut rng, b, d);
        let sim = random_matrix(&mut rng, b, d);
        prop_assert!(paired_contrastive_loss(he.view(), sim.view(), 0.5).unwrap() > 0.0);
    }

    #[test]
    fn total_gradient_is_weighted_sum(seed in any::<u64>(), w in proptest::array::uniform4(0.0f64..2.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_matrix(&mut rng, 4, 2);
        let labels = [0, 1, 0, 1];
        let he = random_matrix(&mut rng, 4, 3);
        let sim = random_matrix(&mut rng, 4, 3);
        let (ld, gd) = domain_loss_grad(logits.view(), &labels).unwrap();
        let (lc, gc, _) = paired_contrastive_loss_grad(he.view(), sim.view(), 0.5).unwrap();
        let weights = LossWeights::new(w[0], w[1], w[2], w[3]);
        let comps = LossComponents { dino: 0.0, domain: ld, contrast: lc, recon: 0.0 };
        let total = total_loss(&comps, &weights);
        prop_assert!((total - (w[1] * ld + w[2] * lc)).abs() < 1e-12);
        // each input only feeds one term, so the total gradient is that term's gradient scaled
        let h = 1e-5;
        let mut lp = logits.clone();
        lp[[0, 0]] += h;
        let mut lm = logits.clone();
        lm[[0, 0]] -= h;
        let f = |x: &Array2<f64>| {
            let c = LossComponents { domain: domain_loss(x.view(), &labels).unwrap(), ..comps };
            total_loss(&c, &weights)
        };
        let fd = (f(&lp) - f(&lm)) / (2.0 * h);
        prop_assert!((fd - w[1] * gd[[0, 0]]).abs() < 1e-6);
        let mut hp = he.clone();
        hp[[1, 2]] += h;
        let mut hm = he.clone();
        hm[[1, 2]] -= h;
        let g = |x: &Array2<f64>| {
            let c = LossComponents { contrast: paired_contrastive_loss(x.view(), sim.view(), 0.5).unwrap(), ..comps };
            total_loss(&c, &weights)
        };
        let fd = (g(&hp) - g(&hm)) / (2.0 * h);
        prop_assert!((fd - w[2] * gc[[1, 2]]).abs() < 1e-6);
    }

    #[test]
    fn center_update_is_convex_combination(seed in any::<u64>(), m in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let logits = random_matrix(&mut rng, 6, 5);
        let mean = logits.mean_axis(ndarray::Axis(0)).unwrap();
        let out = update_center(c.view(), logits.view(), m).unwrap();
        for i in 0..5 {
            let (lo, hi) = (c[i].min(mean[i]), c[i].max(mean[i]));
            prop_assert!(out[i] >= lo - 1e-12 && out[i] <= hi + 1e-12);
        }
    }
}
