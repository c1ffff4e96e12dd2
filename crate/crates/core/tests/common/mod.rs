#![allow(dead_code)]

use barywin::nn::{Batch, Mlp};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Absolute floor below which a gradient entry counts as zero.
pub const GRAD_FLOOR: f64 = 1e-8;

pub fn gaussian_batch<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Batch {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// `Σ ⟨u, f(x)⟩`, the scalar whose gradient `backward` returns.
fn pairing(net: &Mlp, x: &Batch, u: &Batch) -> f64 {
    (net.forward(&x.view()).unwrap() * u).sum()
}

/// ReLU on/off pattern of every hidden unit for the batch.
fn pattern(net: &Mlp, x: &Batch) -> Vec<bool> {
    let mut h = x.clone();
    let mut out = Vec::new();
    for l in 0..net.num_layers() - 1 {
        let (w, b) = net.layer(l);
        let z = h.dot(&w.t()) + &b;
        out.extend(z.iter().map(|v| *v > 0.0));
        h = z.mapv(|v| v.max(0.0));
    }
    out
}

fn rel_err(fd: f64, an: f64) -> f64 {
    let denom = fd.abs().max(an.abs()).max(GRAD_FLOOR);
    (fd - an).abs() / denom
}

/// Result of a finite-difference probe.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub probed: usize,
    /// Coordinates redrawn because `θ ± h` crossed a ReLU kink.
    pub kinks_skipped: usize,
}

/// Central differences (`h = 1e-4·max(1, |θ|)`) on `n_probes` random
/// parameters and every input coordinate of the first rows.
pub fn fd_check<R: Rng>(net: &Mlp, batch_rows: usize, n_probes: usize, rng: &mut R) -> FdReport {
    let x = gaussian_batch(batch_rows, net.input_dim(), rng);
    let u = gaussian_batch(batch_rows, net.output_dim(), rng);
    let grads = net.backward(&x.view(), &u.view()).unwrap();
    let base_pattern = pattern(net, &x);

    let mut report = FdReport {
        max_rel_err: 0.0,
        probed: 0,
        kinks_skipped: 0,
    };
    let mut work = net.clone();
    let mut attempts = 0;
    while report.probed < n_probes && attempts < 20 * n_probes {
        attempts += 1;
        let i = rng.random_range(0..net.num_params());
        let theta = net.params()[i];
        let h = 1e-4 * theta.abs().max(1.0);
        work.params_mut()[i] = theta + h;
        let (fp, pp) = (pairing(&work, &x, &u), pattern(&work, &x));
        work.params_mut()[i] = theta - h;
        let (fm, pm) = (pairing(&work, &x, &u), pattern(&work, &x));
        work.params_mut()[i] = theta;
        if pp != base_pattern || pm != base_pattern {
            report.kinks_skipped += 1;
            continue;
        }
        report.max_rel_err = report.max_rel_err.max(rel_err((fp - fm) / (2.0 * h), grads.params[i]));
        report.probed += 1;
    }

    for r in 0..batch_rows.min(2) {
        for c in 0..net.input_dim() {
            let v = x[(r, c)];
            let h = 1e-4 * v.abs().max(1.0);
            let mut xp = x.clone();
            xp[(r, c)] = v + h;
            let mut xm = x.clone();
            xm[(r, c)] = v - h;
            if pattern(net, &xp) != base_pattern || pattern(net, &xm) != base_pattern {
                report.kinks_skipped += 1;
                continue;
            }
            let fd = (pairing(net, &xp, &u) - pairing(net, &xm, &u)) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(rel_err(fd, grads.input[(r, c)]));
        }
    }
    report
}
