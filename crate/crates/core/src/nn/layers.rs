use std::f64::consts::PI;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Grads, ParamId, ParamRole, ParamStore};
use super::tensor::{axpy, dot, matmul_t, matmul_t_backward, Scalar, Tensor};
use crate::error::{Error, Result};

/// `U(-1/√fan_in, 1/√fan_in)` values.
pub(crate) fn uniform_init<T: Scalar>(n: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| T::lit(rng.random_range(-b..b))).collect()
}

pub(crate) fn normal_init<T: Scalar>(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let d = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| T::lit(d.sample(rng))).collect()
}

fn add_bias_grad<T: Scalar>(grads: &mut Grads<T>, id: ParamId, gy: &Tensor<T>) {
    if let Some(gb) = grads.slot(id, gy.cols()) {
        for r in 0..gy.rows() {
            for (b, &g) in gb.iter_mut().zip(gy.row(r)) {
                *b += g;
            }
        }
    }
}

/// Fully connected layer, `y = x Wᵀ + b` row by row.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = ps.add(
            format!("{name}.weight"),
            &[out_dim, in_dim],
            ParamRole::Shared,
            uniform_init(out_dim * in_dim, in_dim, rng),
        )?;
        let bias = if bias {
            Some(ps.add(
                format!("{name}.bias"),
                &[out_dim],
                ParamRole::Shared,
                uniform_init(out_dim, in_dim, rng),
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.cols(), self.in_dim);
        matmul_t(x, ps.value(self.weight), self.out_dim, self.bias.map(|b| ps.value(b)))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
        need_gx: bool,
    ) -> Option<Tensor<T>> {
        if let Some(b) = self.bias {
            add_bias_grad(grads, b, gy);
        }
        let gw = grads.slot(self.weight, self.out_dim * self.in_dim);
        matmul_t_backward(x, ps.value(self.weight), gy, gw, need_gx)
    }
}

/// The rank-one vectors applied on top of a [`LoraFc`] weight. A missing
/// vector means a zero update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoraPair {
    pub u: Option<ParamId>,
    pub v: Option<ParamId>,
}

impl LoraPair {
    pub fn active(&self) -> Option<(ParamId, ParamId)> {
        self.u.zip(self.v)
    }
}

/// Fully connected layer with a per-call rank-one update,
/// `W' = W + u vᵀ`, so `y = x Wᵀ + b + (x·v) u`.
#[derive(Debug, Clone)]
pub struct LoraFc {
    pub base: Linear,
    pub name: String,
}

/// Cached `x·v` per row, needed by the backward pass.
#[derive(Debug, Clone)]
pub struct LoraCache<T> {
    xv: Vec<T>,
}

impl LoraFc {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            base: Linear::new(ps, name, in_dim, out_dim, true, rng)?,
            name: name.to_string(),
        })
    }

    pub fn u_name(&self, subject: &str) -> String {
        format!("{}.u.{subject}", self.name)
    }

    pub fn v_name(&self, subject: &str) -> String {
        format!("{}.v.{subject}", self.name)
    }

    /// Registers a zero `u` (output side) for `subject`.
    pub fn add_u<T: Scalar>(&self, ps: &mut ParamStore<T>, subject: &str, role: ParamRole) -> Result<ParamId> {
        let n = self.base.out_dim;
        ps.add(self.u_name(subject), &[n], role, vec![T::zero(); n])
    }

    /// Registers a Gaussian `v` (input side) for `subject`.
    pub fn add_v<T: Scalar>(
        &self,
        ps: &mut ParamStore<T>,
        subject: &str,
        role: ParamRole,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let n = self.base.in_dim;
        ps.add(self.v_name(subject), &[n], role, normal_init(n, std, rng))
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>, pair: LoraPair) -> (Tensor<T>, LoraCache<T>) {
        let mut y = self.base.forward(ps, x);
        let mut xv = Vec::new();
        if let Some((u, v)) = pair.active() {
            let (u, v) = (ps.value(u), ps.value(v));
            for r in 0..x.rows() {
                let s = dot(x.row(r), v);
                axpy(s, u, y.row_mut(r));
                xv.push(s);
            }
        }
        (y, LoraCache { xv })
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        pair: LoraPair,
        cache: &LoraCache<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
        need_gx: bool,
    ) -> Option<Tensor<T>> {
        let mut gx = self.base.backward(ps, x, gy, grads, need_gx);
        if let Some((u_id, v_id)) = pair.active() {
            let (u, v) = (ps.value(u_id), ps.value(v_id));
            // (gy·u) per row drives both gx and gv.
            let gyu: Vec<T> = (0..gy.rows()).map(|r| dot(gy.row(r), u)).collect();
            if let Some(gu) = grads.slot(u_id, u.len()) {
                for r in 0..gy.rows() {
                    axpy(cache.xv[r], gy.row(r), gu);
                }
            }
            if let Some(gv) = grads.slot(v_id, v.len()) {
                for r in 0..x.rows() {
                    axpy(gyu[r], x.row(r), gv);
                }
            }
            if let Some(gx) = gx.as_mut() {
                for (r, &s) in gyu.iter().enumerate() {
                    axpy(s, v, gx.row_mut(r));
                }
            }
        }
        gx
    }

    /// `W + u vᵀ` as a row-major `[out][in]` matrix.
    pub fn effective_weight<T: Scalar>(&self, ps: &ParamStore<T>, pair: LoraPair) -> Vec<T> {
        let mut w = ps.value(self.base.weight).to_vec();
        if let Some((u, v)) = pair.active() {
            let n = self.base.in_dim;
            for (o, &uo) in ps.value(u).iter().enumerate() {
                axpy(uo, ps.value(v), &mut w[o * n..(o + 1) * n]);
            }
        }
        w
    }
}

/// Picks the LoRA vectors for one call: `u` from `target`, `v` from
/// `retrieved`. A target without registered vectors gets a zero update; an
/// unregistered retrieved subject is an error.
pub fn lora_select<T: Scalar>(
    ps: &ParamStore<T>,
    layer: &LoraFc,
    target: Option<&str>,
    retrieved: &str,
) -> Result<LoraPair> {
    let v = ps
        .id(&layer.v_name(retrieved))
        .ok_or_else(|| Error::UnknownSubject(retrieved.to_string()))?;
    Ok(LoraPair {
        u: target.and_then(|t| ps.id(&layer.u_name(t))),
        v: Some(v),
    })
}

/// Parametric ReLU with one shared slope.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub alpha: ParamId,
}

impl PRelu {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            alpha: ps.add(format!("{name}.alpha"), &[1], ParamRole::Shared, vec![T::lit(0.25)])?,
        })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let a = ps.value(self.alpha)[0];
        x.map(|v| if v > T::zero() { v } else { a * v })
    }

    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>, gy: &Tensor<T>, grads: &mut Grads<T>) -> Tensor<T> {
        let a = ps.value(self.alpha)[0];
        let mut ga = T::zero();
        let mut gx = gy.clone();
        for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
            if v <= T::zero() {
                ga += *g * v;
                *g *= a;
            }
        }
        if let Some(s) = grads.slot(self.alpha, 1) {
            s[0] += ga;
        }
        gx
    }
}

const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = T::lit((2.0 / PI).sqrt());
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    x.map(|v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let k = T::lit((2.0 / PI).sqrt());
    let c = T::lit(GELU_C);
    let c3 = T::lit(3.0 * GELU_C);
    let half = T::lit(0.5);
    let mut gx = gy.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
        let t = (k * (v + c * v * v * v)).tanh();
        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * k * (T::one() + c3 * v * v);
        *g *= d;
    }
    gx
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalization over the last axis with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.add(format!("{name}.gamma"), &[dim], ParamRole::Shared, vec![T::one(); dim])?,
            beta: ps.add(format!("{name}.beta"), &[dim], ParamRole::Shared, vec![T::zero(); dim])?,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, LayerNormCache<T>) {
        let n = T::lit(self.dim as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let (g, b) = (ps.value(self.gamma), ps.value(self.beta));
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xr = xhat.row_mut(r);
            for (h, &v) in xr.iter_mut().zip(row) {
                *h = (v - mu) * is;
            }
            let xr = xhat.row(r).to_vec();
            for (i, o) in y.row_mut(r).iter_mut().enumerate() {
                *o = g[i] * xr[i] + b[i];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &LayerNormCache<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let n = T::lit(self.dim as f64);
        let g = ps.value(self.gamma);
        if let Some(gg) = grads.slot(self.gamma, self.dim) {
            for r in 0..gy.rows() {
                for ((a, &d), &h) in gg.iter_mut().zip(gy.row(r)).zip(cache.xhat.row(r)) {
                    *a += d * h;
                }
            }
        }
        add_bias_grad(grads, self.beta, gy);
        let mut gx = Tensor::zeros(gy.shape());
        for r in 0..gy.rows() {
            let h = cache.xhat.row(r);
            let gh: Vec<T> = gy.row(r).iter().zip(g).map(|(&d, &gi)| d * gi).collect();
            let m1 = gh.iter().copied().sum::<T>() / n;
            let m2 = dot(&gh, h) / n;
            let is = cache.inv_std[r];
            for (i, o) in gx.row_mut(r).iter_mut().enumerate() {
                *o = is * (gh[i] - m1 - h[i] * m2);
            }
        }
        gx
    }
}

/// Random Fourier features `[cos 2πxP, sin 2πxP]` with a frozen Gaussian
/// projection `P: [in][features]`.
#[derive(Debug, Clone)]
pub struct Rff {
    pub projection: ParamId,
    pub in_dim: usize,
    pub features: usize,
}

impl Rff {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        features: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            projection: ps.add(
                format!("{name}.projection"),
                &[in_dim, features],
                ParamRole::Frozen,
                normal_init(in_dim * features, scale, rng),
            )?,
            in_dim,
            features,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.features
    }

    fn phases<T: Scalar>(&self, ps: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let p = ps.value(self.projection);
        let two_pi = T::lit(2.0 * PI);
        let mut z = vec![T::zero(); self.features];
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, &p[i * self.features..(i + 1) * self.features], &mut z);
        }
        z.iter_mut().for_each(|v| *v *= two_pi);
        z
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut y = Tensor::zeros(&[x.rows(), self.out_dim()]);
        for r in 0..x.rows() {
            let z = self.phases(ps, x.row(r));
            let yr = y.row_mut(r);
            for (j, &zj) in z.iter().enumerate() {
                yr[j] = zj.cos();
                yr[self.features + j] = zj.sin();
            }
        }
        y
    }

    /// Input gradient only; the projection is frozen.
    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
        let p = ps.value(self.projection);
        let two_pi = T::lit(2.0 * PI);
        let mut gx = Tensor::zeros(x.shape());
        for r in 0..x.rows() {
            let z = self.phases(ps, x.row(r));
            let g = gy.row(r);
            let gz: Vec<T> = z
                .iter()
                .enumerate()
                .map(|(j, &zj)| two_pi * (g[self.features + j] * zj.cos() - g[j] * zj.sin()))
                .collect();
            for (i, o) in gx.row_mut(r).iter_mut().enumerate() {
                *o = dot(&p[i * self.features..(i + 1) * self.features], &gz);
            }
        }
        gx
    }
}
