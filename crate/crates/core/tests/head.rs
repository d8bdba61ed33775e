mod common;

use common::oracles::{oracle_anchor_term, oracle_attentive, oracle_final, oracle_pool, oracle_primary};
use common::{max_abs_diff, random_params, random_vec, small_config};
use proptest::prelude::*;
use relbal_core::head::{
    anchor_correction, anchor_similarities, attention_pool, attentive_correction, confidence, final_distribution,
    fuse_corrections, predict, predict_batch, primary_distribution, HeadParameters, Mode,
};
use relbal_core::numerics::RngState;
use relbal_core::Error;

fn assert_distribution(p: &[f64]) {
    assert!(p.iter().all(|&v| v >= 0.0), "{p:?}");
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{p:?}");
}

#[test]
fn full_forward_matches_scalar_oracle() {
    for seed in 0..20 {
        let mut cfg = small_config(3, 2, 8, 2, 2);
        cfg.reduction = seed % 2 == 0;
        cfg.input_dim = if cfg.reduction { 5 } else { 8 };
        let p = random_params(cfg.clone(), seed);
        let x = random_vec(&mut RngState::new(100 + seed), cfg.input_dim, 1.0);
        let rec = predict(&x, &p).unwrap();
        assert!(max_abs_diff(&rec.primary, &oracle_primary(&p, &x)) < 1e-9);
        assert!(max_abs_diff(&rec.final_dist, &oracle_final(&p, &x)) < 1e-9, "seed {seed}");
    }
}

#[test]
fn anchor_term_matches_double_loop_oracle() {
    for seed in 0..20 {
        let p = random_params(small_config(3, 2, 8, 2, 2), seed);
        let e = random_vec(&mut RngState::new(200 + seed), 8, 1.0);
        let got = anchor_correction(&e, &p).unwrap();
        assert!(max_abs_diff(&got, &oracle_anchor_term(&p, &e)) < 1e-12);
    }
}

#[test]
fn attention_matches_scalar_oracle() {
    for seed in 0..20 {
        let p = random_params(small_config(3, 2, 8, 2, 2), seed);
        let e = random_vec(&mut RngState::new(300 + seed), 8, 1.0);
        assert!(max_abs_diff(&attention_pool(&e, &p).unwrap(), &oracle_pool(&p, &e)) < 1e-9);
        assert!(max_abs_diff(&attentive_correction(&e, &p).unwrap(), &oracle_attentive(&p, &e)) < 1e-9);
    }
}

#[test]
fn zero_output_layer_gives_uniform_primary() {
    let mut p = random_params(small_config(4, 1, 8, 2, 2), 1);
    p.array_mut("mlp.out.weight").unwrap().fill(0.0);
    p.array_mut("mlp.out.bias").unwrap().fill(0.0);
    let l = primary_distribution(&[0.3; 8], &p, Mode::Eval).unwrap();
    assert!(max_abs_diff(&l, &[0.25; 4]) < 1e-15);
}

#[test]
fn eval_mode_is_deterministic_and_train_mode_uses_dropout() {
    let p = random_params(small_config(3, 2, 8, 2, 2), 2);
    let x = random_vec(&mut RngState::new(9), 8, 1.0);
    let a = primary_distribution(&x, &p, Mode::Eval).unwrap();
    let b = primary_distribution(&x, &p, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(predict(&x, &p).unwrap(), predict(&x, &p).unwrap());
    let t = primary_distribution(&x, &p, Mode::Train(&mut RngState::new(1))).unwrap();
    assert_distribution(&t);
    assert!(matches!(
        primary_distribution(&[0.0; 7], &p, Mode::Eval),
        Err(Error::Shape(_))
    ));
}

#[test]
fn confidence_examples() {
    assert!((confidence(&[0.5, 0.5, 0.0, 0.0]) - 0.5).abs() < 1e-12);
    for n in 2..=10 {
        assert!(confidence(&vec![1.0 / n as f64; n]).abs() < 1e-12);
        let mut one_hot = vec![0.0; n];
        one_hot[n - 1] = 1.0;
        assert!((confidence(&one_hot) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn confidence_decreases_toward_uniform() {
    for n in 2..=10 {
        let mut prev = f64::INFINITY;
        for step in 0..100 {
            let a = step as f64 / 99.0;
            let p: Vec<f64> = (0..n)
                .map(|i| (1.0 - a) * if i == 0 { 1.0 } else { 0.0 } + a / n as f64)
                .collect();
            let c = confidence(&p);
            assert!(c < prev, "N={n} step {step}: {c} !< {prev}");
            prev = c;
        }
    }
}

fn two_anchor_params(positions: &[f64], classes: usize) -> HeadParameters {
    let per_class = positions.len() / classes;
    let cfg = small_config(classes, per_class, 1, 1, 1);
    let mut p = random_params(cfg, 0);
    p.array_mut("anchors").unwrap().copy_from_slice(positions);
    p
}

#[test]
fn similarity_examples() {
    let single = two_anchor_params(&[3.0], 1);
    assert_eq!(anchor_similarities(&[0.0], &single).unwrap().as_slice(), &[1.0]);

    let equidistant = two_anchor_params(&[-1.0, 1.0], 2);
    let s = anchor_similarities(&[0.0], &equidistant).unwrap();
    assert!(max_abs_diff(s.as_slice(), &[0.5, 0.5]) < 1e-15);

    let p = two_anchor_params(&[0.0, 1.0], 2);
    let s = anchor_similarities(&[0.0], &p).unwrap();
    assert!(max_abs_diff(s.as_slice(), &[0.7311, 0.2689]) < 1e-4);
}

#[test]
fn anchor_term_limits() {
    // e sits on class 2's first anchor; every other anchor is far away.
    let mut positions = vec![0.0; 3 * 2];
    for (idx, v) in positions.iter_mut().enumerate() {
        *v = 50.0 + 10.0 * idx as f64;
    }
    positions[4] = 0.0;
    let p = two_anchor_params(&positions, 3);
    let t = anchor_correction(&[0.0], &p).unwrap();
    assert!((t[2] - 1.0).abs() < 1e-12, "{t:?}");

    let p = two_anchor_params(&[-2.0, 2.0, -2.0, 2.0], 2);
    assert!(max_abs_diff(&anchor_correction(&[0.0], &p).unwrap(), &[0.5, 0.5]) < 1e-15);
}

#[test]
fn temperature_limits() {
    let base = random_params(small_config(3, 2, 8, 2, 2), 4);
    let e = random_vec(&mut RngState::new(5), 8, 1.0);
    let nearest = {
        let mut best = (0, f64::INFINITY);
        for i in 0..3 {
            for j in 0..2 {
                let d: f64 = e.iter().zip(base.anchor(i, j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (i, d);
                }
            }
        }
        best.0
    };
    let with_temperature = |delta: f64| {
        let mut cfg = base.config().clone();
        cfg.temperature = delta;
        let mut p = random_params(cfg, 4);
        p.values_mut().copy_from_slice(base.values());
        anchor_correction(&e, &p).unwrap()
    };
    let cold = with_temperature(1e-3);
    assert!((cold[nearest] - 1.0).abs() < 1e-9, "{cold:?}");
    let hot = with_temperature(1e3);
    assert!(max_abs_diff(&hot, &[1.0 / 3.0; 3]) < 1e-2, "{hot:?}");
}

#[test]
fn within_class_anchor_permutation() {
    let p = random_params(small_config(3, 2, 8, 2, 2), 6);
    let e = random_vec(&mut RngState::new(7), 8, 1.0);
    let mut q = p.clone();
    let anchors = q.array_mut("anchors").unwrap();
    for class in 0..3 {
        let (a, b) = anchors[class * 16..(class + 1) * 16].split_at_mut(8);
        a.swap_with_slice(b);
    }
    let s = anchor_similarities(&e, &p).unwrap();
    let s2 = anchor_similarities(&e, &q).unwrap();
    for i in 0..3 {
        assert_eq!(s.get(i, 0), s2.get(i, 1));
        assert_eq!(s.get(i, 1), s2.get(i, 0));
    }
    let t = anchor_correction(&e, &p).unwrap();
    let t2 = anchor_correction(&e, &q).unwrap();
    assert!(max_abs_diff(&t, &t2) < 1e-15);
}

#[test]
fn anchors_disabled_with_zero_k() {
    let p = random_params(small_config(3, 0, 8, 2, 2), 1);
    assert!(matches!(anchor_similarities(&[0.0; 8], &p), Err(Error::Disabled(_))));
    assert!(matches!(anchor_correction(&[0.0; 8], &p), Err(Error::Disabled(_))));
}

#[test]
fn single_token_attention_is_value_projection() {
    let p = random_params(small_config(3, 1, 8, 1, 2), 8);
    let e = random_vec(&mut RngState::new(1), 8, 1.0);
    let v = p.array("attention.value").unwrap();
    let expected: Vec<f64> = (0..8).map(|r| (0..8).map(|c| v[r * 8 + c] * e[c]).sum()).collect();
    assert!(max_abs_diff(&attention_pool(&e, &p).unwrap(), &expected) < 1e-12);
}

#[test]
fn zero_queries_pool_the_mean_value() {
    let mut p = random_params(small_config(3, 1, 8, 4, 2), 9);
    p.array_mut("attention.query").unwrap().fill(0.0);
    let e = random_vec(&mut RngState::new(2), 8, 1.0);
    let (td, hd) = (2, 1);
    let v = p.array("attention.value").unwrap();
    let mut expected = vec![0.0; 2];
    for (h, out) in expected.iter_mut().enumerate() {
        for tok in 0..4 {
            let val: f64 = (0..td).map(|c| v[h * hd * td + c] * e[tok * td + c]).sum();
            *out += val / 4.0;
        }
    }
    assert!(max_abs_diff(&attention_pool(&e, &p).unwrap(), &expected) < 1e-12);
}

#[test]
fn fusion_examples() {
    let t_g = [0.1, 0.6, 0.3];
    let same = fuse_corrections(&t_g, &t_g);
    assert!(max_abs_diff(&same.distribution, &t_g) < 1e-15);

    let uniform = [1.0 / 3.0; 3];
    let f = fuse_corrections(&t_g, &uniform);
    assert!(max_abs_diff(&f.distribution, &t_g) < 1e-12);

    // t_a with confidence exactly one half on N = 4.
    let one_hot = [1.0, 0.0, 0.0, 0.0];
    let half = [0.5, 0.5, 0.0, 0.0];
    let f = fuse_corrections(&one_hot, &half);
    assert_eq!((f.weight_a, f.weight_b), (1.0, confidence(&half)));
    let expected: Vec<f64> = (0..4).map(|i| 2.0 / 3.0 * one_hot[i] + 1.0 / 3.0 * half[i]).collect();
    assert!(max_abs_diff(&f.distribution, &expected) < 1e-12);

    // Both uniform: zero total confidence falls back to the plain average.
    let f = fuse_corrections(&uniform, &uniform);
    assert!(max_abs_diff(&f.distribution, &uniform) < 1e-15);
}

#[test]
fn final_distribution_examples() {
    let l = [0.6, 0.4];
    let t = [0.2, 0.8];
    let c = |p: [f64; 2]| 1.0 + (p[0] * p[0].ln() + p[1] * p[1].ln()) / 2f64.ln();
    let (cl, ct) = (c(l), c(t));
    let expected = [(cl * 0.6 + ct * 0.2) / (cl + ct), (cl * 0.4 + ct * 0.8) / (cl + ct)];
    let f = final_distribution(&l, &t);
    assert!(max_abs_diff(&f.distribution, &expected) < 1e-15);
    assert!((f.weight_a - cl).abs() < 1e-15 && (f.weight_b - ct).abs() < 1e-15);

    assert!(max_abs_diff(&final_distribution(&l, &[0.5, 0.5]).distribution, &l) < 1e-15);
    assert!(max_abs_diff(&final_distribution(&l, &l).distribution, &l) < 1e-15);
}

#[test]
fn predict_is_the_composition_of_its_parts() {
    for (k, t) in [(2, 2), (0, 2), (2, 1)] {
        let mut cfg = small_config(3, k, 8, t, 2);
        cfg.reduction = true;
        cfg.input_dim = 6;
        let p = random_params(cfg, 11);
        let x = random_vec(&mut RngState::new(12), 6, 1.0);
        let rec = predict(&x, &p).unwrap();
        let e = p.reduce(&x).unwrap();
        let l = primary_distribution(&x, &p, Mode::Eval).unwrap();
        let t_a = attentive_correction(&e, &p).unwrap();
        let t_corr = if k > 0 {
            let t_g = anchor_correction(&e, &p).unwrap();
            assert_eq!(rec.anchor_term, t_g);
            let f = fuse_corrections(&t_g, &t_a);
            assert_eq!((rec.c_anchor, rec.c_attentive), (f.weight_a, f.weight_b));
            f.distribution
        } else {
            assert!(rec.anchor_term.is_empty());
            assert_eq!(rec.c_anchor, 0.0);
            t_a.clone()
        };
        let fin = final_distribution(&l, &t_corr);
        assert_eq!(rec.primary, l);
        assert_eq!(rec.attentive_term, t_a);
        assert_eq!(rec.correction, t_corr);
        assert_eq!(rec.final_dist, fin.distribution);
        assert_eq!((rec.c_primary, rec.c_correction), (fin.weight_a, fin.weight_b));
        let best = (0..3).fold(0, |b, i| if fin.distribution[i] > fin.distribution[b] { i } else { b });
        assert_eq!(rec.label, best);
    }
}

#[test]
fn zero_anchors_with_uniform_attention_returns_primary() {
    let mut p = random_params(small_config(3, 0, 8, 2, 2), 13);
    p.array_mut("attention.out").unwrap().fill(0.0);
    let x = random_vec(&mut RngState::new(1), 8, 1.0);
    let rec = predict(&x, &p).unwrap();
    assert!(max_abs_diff(&rec.final_dist, &rec.primary) < 1e-15);
}

#[test]
fn batched_prediction_matches_single() {
    let mut cfg = small_config(4, 3, 8, 2, 2);
    cfg.reduction = true;
    cfg.input_dim = 10;
    let p = random_params(cfg, 14);
    let mut rng = RngState::new(15);
    let xs: Vec<Vec<f64>> = (0..17).map(|_| random_vec(&mut rng, 10, 1.5)).collect();
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let batch = predict_batch(&refs, &p).unwrap();
    for (x, b) in xs.iter().zip(&batch) {
        let single = predict(x, &p).unwrap();
        assert!(max_abs_diff(&single.final_dist, &b.final_dist) < 1e-12);
        assert!(max_abs_diff(&single.primary, &b.primary) < 1e-12);
        assert_eq!(single.label, b.label);
    }
}

#[test]
fn class_relabeling_permutes_the_prediction() {
    // Reverse the class order of every class-indexed parameter.
    let p = random_params(small_config(3, 2, 8, 2, 2), 16);
    let mut q = p.clone();
    let perm = [2usize, 1, 0];
    let permute_rows = |q: &mut HeadParameters, name: &str, width: usize| {
        let src = p.array(name).unwrap().to_vec();
        let dst = q.array_mut(name).unwrap();
        for (c, &pc) in perm.iter().enumerate() {
            dst[c * width..(c + 1) * width].copy_from_slice(&src[pc * width..(pc + 1) * width]);
        }
    };
    permute_rows(&mut q, "mlp.out.weight", 6);
    permute_rows(&mut q, "mlp.out.bias", 1);
    permute_rows(&mut q, "anchors", 16);
    permute_rows(&mut q, "attention.out", 4);
    let mut rng = RngState::new(17);
    for _ in 0..50 {
        let x = random_vec(&mut rng, 8, 1.0);
        let a = predict(&x, &p).unwrap();
        let b = predict(&x, &q).unwrap();
        for c in 0..3 {
            assert!((a.final_dist[perm[c]] - b.final_dist[c]).abs() < 1e-12);
        }
        assert_eq!(perm[b.label], a.label);
    }
}

#[test]
fn distributions_are_valid_over_many_draws() {
    let started = std::time::Instant::now();
    let mut rng = RngState::new(18);
    for draw in 0..10_000u64 {
        let k = [0, 1, 2][draw as usize % 3];
        let t = [1, 2, 4][(draw as usize / 3) % 3];
        let p = random_params(small_config(3, k, 8, t, if t == 4 { 2 } else { 1 }), draw);
        let scale = [0.1, 1.0, 10.0][(draw as usize / 9) % 3];
        let x = random_vec(&mut rng, 8, scale);
        let rec = predict(&x, &p).unwrap();
        assert_distribution(&rec.primary);
        if k > 0 {
            assert_distribution(&rec.anchor_term);
        }
        assert_distribution(&rec.attentive_term);
        assert_distribution(&rec.correction);
        assert_distribution(&rec.final_dist);
    }
    assert!(started.elapsed().as_secs() < 30);
}

proptest! {
    #[test]
    fn confidence_stays_in_unit_interval(raw in prop::collection::vec(0.0f64..1.0, 2..10)) {
        let s: f64 = raw.iter().sum();
        prop_assume!(s > 1e-9);
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let c = confidence(&p);
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn fusion_stays_between_inputs(a in prop::collection::vec(0.01f64..1.0, 4), b in prop::collection::vec(0.01f64..1.0, 4)) {
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let (a, b) = (norm(&a), norm(&b));
        let f = fuse_corrections(&a, &b);
        for i in 0..4 {
            prop_assert!(f.distribution[i] >= a[i].min(b[i]) - 1e-15);
            prop_assert!(f.distribution[i] <= a[i].max(b[i]) + 1e-15);
        }
    }
}
