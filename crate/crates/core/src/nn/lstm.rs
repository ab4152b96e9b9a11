use rand_chacha::ChaCha8Rng;

use super::layers::uniform_init;
use super::params::{Grads, ParamId, ParamRole, ParamStore};
use super::tensor::{axpy, dot, matmul_t, matmul_t_backward, Scalar, Tensor};
use crate::error::Result;

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Unidirectional LSTM over `[time][feature]`. Gate order is i, f, g, o.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    x: Tensor<T>,
    /// Activated gates `[time][4H]`.
    gates: Tensor<T>,
    c: Tensor<T>,
    h: Tensor<T>,
}

impl Lstm {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = 4 * hidden;
        Ok(Self {
            w_ih: ps.add(
                format!("{name}.w_ih"),
                &[g, input],
                ParamRole::Shared,
                uniform_init(g * input, hidden, rng),
            )?,
            w_hh: ps.add(
                format!("{name}.w_hh"),
                &[g, hidden],
                ParamRole::Shared,
                uniform_init(g * hidden, hidden, rng),
            )?,
            bias: ps.add(format!("{name}.bias"), &[g], ParamRole::Shared, uniform_init(g, hidden, rng))?,
            input,
            hidden,
        })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, LstmCache<T>) {
        let h_dim = self.hidden;
        let steps = x.rows();
        let w_hh = ps.value(self.w_hh);
        let mut gates = matmul_t(x, ps.value(self.w_ih), 4 * h_dim, Some(ps.value(self.bias)));
        let mut c = Tensor::zeros(&[steps, h_dim]);
        let mut h = Tensor::zeros(&[steps, h_dim]);
        let mut h_prev = vec![T::zero(); h_dim];
        let mut c_prev = vec![T::zero(); h_dim];
        for t in 0..steps {
            let g = gates.row_mut(t);
            for (j, gj) in g.iter_mut().enumerate() {
                *gj += dot(&w_hh[j * h_dim..(j + 1) * h_dim], &h_prev);
            }
            for j in 0..h_dim {
                g[j] = sigmoid(g[j]);
                g[h_dim + j] = sigmoid(g[h_dim + j]);
                g[2 * h_dim + j] = g[2 * h_dim + j].tanh();
                g[3 * h_dim + j] = sigmoid(g[3 * h_dim + j]);
            }
            let g = gates.row(t);
            let ct = c.row_mut(t);
            for j in 0..h_dim {
                ct[j] = g[h_dim + j] * c_prev[j] + g[j] * g[2 * h_dim + j];
            }
            c_prev.copy_from_slice(ct);
            let ht = h.row_mut(t);
            for j in 0..h_dim {
                ht[j] = g[3 * h_dim + j] * c_prev[j].tanh();
            }
            h_prev.copy_from_slice(ht);
        }
        let cache = LstmCache {
            x: x.clone(),
            gates,
            c,
            h: h.clone(),
        };
        (h, cache)
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &LstmCache<T>,
        gh: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let h_dim = self.hidden;
        let steps = gh.rows();
        let w_hh = ps.value(self.w_hh);
        let mut da = Tensor::zeros(&[steps, 4 * h_dim]);
        let mut dh_next = vec![T::zero(); h_dim];
        let mut dc_next = vec![T::zero(); h_dim];
        let zero = vec![T::zero(); h_dim];
        let mut gw_hh = grads.tracks(self.w_hh).then(|| vec![T::zero(); 4 * h_dim * h_dim]);
        for t in (0..steps).rev() {
            let g = cache.gates.row(t);
            let ct = cache.c.row(t);
            let c_prev = if t > 0 { cache.c.row(t - 1) } else { &zero };
            let h_prev = if t > 0 { cache.h.row(t - 1) } else { &zero };
            let d = da.row_mut(t);
            for j in 0..h_dim {
                let (i, f, gg, o) = (g[j], g[h_dim + j], g[2 * h_dim + j], g[3 * h_dim + j]);
                let dh = gh.row(t)[j] + dh_next[j];
                let tc = ct[j].tanh();
                let dc = dc_next[j] + dh * o * (T::one() - tc * tc);
                d[j] = dc * gg * i * (T::one() - i);
                d[h_dim + j] = dc * c_prev[j] * f * (T::one() - f);
                d[2 * h_dim + j] = dc * i * (T::one() - gg * gg);
                d[3 * h_dim + j] = dh * tc * o * (T::one() - o);
                dc_next[j] = dc * f;
            }
            dh_next.iter_mut().for_each(|v| *v = T::zero());
            for (k, &dk) in d.iter().enumerate() {
                if dk != T::zero() {
                    axpy(dk, &w_hh[k * h_dim..(k + 1) * h_dim], &mut dh_next);
                    if let Some(gw) = gw_hh.as_mut() {
                        axpy(dk, h_prev, &mut gw[k * h_dim..(k + 1) * h_dim]);
                    }
                }
            }
        }
        if let Some(gw) = gw_hh {
            if let Some(slot) = grads.slot(self.w_hh, gw.len()) {
                slot.iter_mut().zip(&gw).for_each(|(a, &b)| *a += b);
            }
        }
        if let Some(gb) = grads.slot(self.bias, 4 * h_dim) {
            for t in 0..steps {
                gb.iter_mut().zip(da.row(t)).for_each(|(a, &b)| *a += b);
            }
        }
        let gw_ih = grads.slot(self.w_ih, 4 * h_dim * self.input);
        matmul_t_backward(&cache.x, ps.value(self.w_ih), &da, gw_ih, true).expect("input gradient requested")
    }
}

/// Bidirectional LSTM; the output concatenates forward and backward states,
/// `[time][2H]`.
#[derive(Debug, Clone)]
pub struct Blstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

#[derive(Debug, Clone)]
pub struct BlstmCache<T> {
    fwd: LstmCache<T>,
    bwd: LstmCache<T>,
}

impl Blstm {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            fwd: Lstm::new(ps, &format!("{name}.fwd"), input, hidden, rng)?,
            bwd: Lstm::new(ps, &format!("{name}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, BlstmCache<T>) {
        let (hf, fwd) = self.fwd.forward(ps, x);
        let (hb, bwd) = self.bwd.forward(ps, &x.reversed_rows());
        (Tensor::concat_cols(&hf, &hb.reversed_rows()), BlstmCache { fwd, bwd })
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &BlstmCache<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let (gf, gb) = gy.split_cols(self.fwd.hidden);
        let mut gx = self.fwd.backward(ps, &cache.fwd, &gf, grads);
        let gxb = self.bwd.backward(ps, &cache.bwd, &gb.reversed_rows(), grads);
        gx.add_assign(&gxb.reversed_rows());
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_step_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let lstm = Lstm::new(&mut ps, "l", 1, 1, &mut rng).unwrap();
        ps.value_mut(lstm.w_ih).copy_from_slice(&[0.5, -0.5, 1.0, 2.0]);
        ps.value_mut(lstm.bias).fill(0.0);
        let (h, _) = lstm.forward(&ps, &Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let c = s(0.5) * 1f64.tanh();
        assert!((h.data()[0] - s(2.0) * c.tanh()).abs() < 1e-12);
    }

    #[test]
    fn backward_direction_sees_the_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::<f64>::new();
        let b = Blstm::new(&mut ps, "b", 2, 3, &mut rng).unwrap();
        let x = Tensor::matrix(4, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let (y0, _) = b.forward(&ps, &x);
        let mut x2 = x.clone();
        x2.row_mut(3)[0] = -1.0;
        let (y1, _) = b.forward(&ps, &x2);
        assert_eq!(y0.row(0)[..3], y1.row(0)[..3]);
        assert_ne!(y0.row(0)[3..], y1.row(0)[3..]);
    }
}
