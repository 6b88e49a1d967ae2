mod common;

use capsroute::capsnet::{dynamic_routing, squash, votes};
use capsroute::tensor::Tensor;
use common::*;
use rand::Rng;

#[test]
fn routing_matches_straight_line_oracle() {
    let mut r = rng(31);
    for case in 0..300 {
        let p = r.random_range(1..=8);
        let j = r.random_range(1..=3);
        let d = r.random_range(1..=4);
        let iters = r.random_range(1..=4);
        let u_hat = uniform(&mut r, p * j * d, -2.0, 2.0);
        let (v, state) = dynamic_routing(&Tensor::new(&[p, j, d], u_hat.clone()).unwrap(), iters).unwrap();
        let want = oracle_routing(&u_hat, p, j, d, iters);
        for (a, b) in v.data().iter().zip(&want.v) {
            assert!((a - b).abs() <= 1e-12, "case {case}: v {a} vs {b}");
        }
        for (a, b) in state.couplings.data().iter().zip(&want.c) {
            assert!((a - b).abs() <= 1e-12, "case {case}: c {a} vs {b}");
        }
    }
}

#[test]
fn first_iteration_couplings_are_uniform() {
    let u_hat = uniform(&mut rng(32), 5 * 3 * 2, -1.0, 1.0);
    let (_, state) = dynamic_routing(&Tensor::new(&[5, 3, 2], u_hat.clone()).unwrap(), 1).unwrap();
    assert!(state.couplings.data().iter().all(|&c| (c - 1.0 / 3.0).abs() < 1e-15));
    let want = oracle_routing(&u_hat, 5, 3, 2, 3);
    assert!(want.history[0].iter().all(|&c| (c - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn votes_match_oracle() {
    let mut r = rng(33);
    let (p, j, dout, din) = (6, 2, 4, 3);
    let u = uniform(&mut r, p * din, -1.0, 1.0);
    let w = uniform(&mut r, p * j * dout * din, -1.0, 1.0);
    let got = votes(
        &Tensor::new(&[p, din], u.clone()).unwrap(),
        &Tensor::new(&[p, j, dout, din], w.clone()).unwrap(),
    )
    .unwrap();
    for (a, b) in got.data().iter().zip(oracle_votes(&u, &w, p, j, dout, din)) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn squash_matches_oracle_and_handles_zero() {
    let mut r = rng(34);
    for _ in 0..200 {
        let d = r.random_range(1..=8);
        let scale = 10f64.powf(r.random_range(-4.0..3.0));
        let s: Vec<f64> = uniform(&mut r, d, -1.0, 1.0).iter().map(|v| v * scale).collect();
        for (a, b) in squash(&s).iter().zip(oracle_squash(&s)) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
    assert_eq!(squash(&[0.0; 4]), vec![0.0; 4]);
}
