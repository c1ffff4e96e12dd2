mod common;

use barywin::nn::{default_hidden, layer_sizes, Mlp};
use barywin::rng;
use common::fd_check;

fn check(sizes: &[usize], seed: u64) {
    let mut r = rng::seeded(seed);
    let net = Mlp::he_init_with(sizes, &mut r).unwrap();
    let rep = fd_check(&net, 4, 100, &mut r);
    assert_eq!(rep.probed, 100, "{sizes:?}: too many kinks ({rep:?})");
    assert!(rep.max_rel_err < 1e-4, "{sizes:?}: {rep:?}");
}

#[test]
fn single_linear_layer() {
    check(&[3, 2], 1);
}

#[test]
fn small_relu_stacks() {
    check(&[2, 5, 1], 2);
    check(&[4, 8, 8, 4], 3);
}

#[test]
fn experiment_shapes() {
    for d in [1, 2, 4, 8, 16] {
        let hidden = default_hidden(d);
        // generator, transport map, potential
        check(&layer_sizes(d, &hidden, d), 10 + d as u64);
        check(&layer_sizes(d, &hidden, 1), 20 + d as u64);
    }
}

#[test]
fn wide_hidden_stack() {
    // max(100, 2D) only departs from 100 above D = 50.
    let hidden = default_hidden(64);
    assert_eq!(hidden, vec![128; 3]);
    check(&layer_sizes(64, &hidden, 64), 5);
}
