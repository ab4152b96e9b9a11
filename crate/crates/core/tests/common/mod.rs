#![allow(dead_code)]

pub mod gradcheck;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ranf::nn::{Grads, ParamId, ParamStore, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

pub fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// `Σ y ⊙ w`, whose gradient with respect to `y` is `w`.
pub fn weighted_sum(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Central difference of `f` along one coordinate of a mutable buffer.
fn central(value: &mut f64, mut eval: impl FnMut(f64) -> f64) -> f64 {
    let x0 = *value;
    let plus = eval(x0 + FD_STEP);
    let minus = eval(x0 - FD_STEP);
    *value = x0;
    (plus - minus) / (2.0 * FD_STEP)
}

/// Worst relative error over up to `per_param` random coordinates of each
/// listed parameter. Parameters without a gradient buffer count as zero
/// gradient.
pub fn check_params(
    ps: &mut ParamStore<f64>,
    ids: &[ParamId],
    grads: &Grads<f64>,
    per_param: usize,
    seed: u64,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> (f64, String) {
    let mut r = rng(seed);
    let mut worst = (0.0, String::new());
    for &id in ids {
        let n = ps.value(id).len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| r.random_range(0..n)).collect()
        };
        for i in coords {
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            let x0 = ps.value(id)[i];
            ps.value_mut(id)[i] = x0 + FD_STEP;
            let plus = loss(ps);
            ps.value_mut(id)[i] = x0 - FD_STEP;
            let minus = loss(ps);
            ps.value_mut(id)[i] = x0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let e = rel_err(analytic, numeric);
            if e > worst.0 {
                worst = (e, format!("{}[{i}]: analytic {analytic:e}, numeric {numeric:e}", ps.param(id).name));
            }
        }
    }
    worst
}

/// Worst relative error of an input gradient over every coordinate.
pub fn check_input(x: &Tensor<f64>, gx: &Tensor<f64>, loss: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.data().len() {
        let numeric = {
            let mut v = probe.data()[i];
            let d = central(&mut v, |xi| {
                let mut t = probe.clone();
                t.data_mut()[i] = xi;
                loss(&t)
            });
            probe.data_mut()[i] = v;
            d
        };
        worst = worst.max(rel_err(gx.data()[i], numeric));
    }
    worst
}

pub fn all_ids(ps: &ParamStore<f64>) -> Vec<ParamId> {
    ps.iter().map(|(id, _)| id).collect()
}
