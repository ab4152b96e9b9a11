use rand_chacha::ChaCha8Rng;

use super::layers::uniform_init;
use super::params::{Grads, ParamId, ParamRole, ParamStore};
use super::tensor::{matmul_t, matmul_t_backward, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output length of a strided convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Strided 1-D convolution over sequences laid out `[position][channel]`.
/// The weight is `[out][kernel][in]`, flattened to match the im2col rows.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    col: Tensor<T>,
    in_len: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel;
        Ok(Self {
            weight: ps.add(
                format!("{name}.weight"),
                &[out_ch, kernel, in_ch],
                ParamRole::Shared,
                uniform_init(out_ch * fan_in, fan_in, rng),
            )?,
            bias: ps.add(format!("{name}.bias"), &[out_ch], ParamRole::Shared, uniform_init(out_ch, fan_in, rng))?,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        })
    }

    pub fn out_len(&self, len: usize) -> usize {
        conv_out_len(len, self.kernel, self.stride, self.pad)
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        if x.cols() != self.in_ch || x.rows() + 2 * self.pad < self.kernel {
            return Err(Error::Shape(format!(
                "conv expects [len >= {}][{}], got {:?}",
                self.kernel.saturating_sub(2 * self.pad),
                self.in_ch,
                x.shape()
            )));
        }
        let lin = x.rows();
        let lout = self.out_len(lin);
        let width = self.kernel * self.in_ch;
        let mut col = Tensor::zeros(&[lout, width]);
        for t in 0..lout {
            let row = col.row_mut(t);
            for k in 0..self.kernel {
                let src = (t * self.stride + k) as isize - self.pad as isize;
                if src >= 0 && (src as usize) < lin {
                    row[k * self.in_ch..(k + 1) * self.in_ch].copy_from_slice(x.row(src as usize));
                }
            }
        }
        let y = matmul_t(&col, ps.value(self.weight), self.out_ch, Some(ps.value(self.bias)));
        Ok((y, ConvCache { col, in_len: lin }))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &ConvCache<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
        need_gx: bool,
    ) -> Option<Tensor<T>> {
        if let Some(gb) = grads.slot(self.bias, self.out_ch) {
            for r in 0..gy.rows() {
                for (b, &g) in gb.iter_mut().zip(gy.row(r)) {
                    *b += g;
                }
            }
        }
        let gw = grads.slot(self.weight, self.out_ch * self.kernel * self.in_ch);
        let gcol = matmul_t_backward(&cache.col, ps.value(self.weight), gy, gw, need_gx)?;
        let mut gx = Tensor::zeros(&[cache.in_len, self.in_ch]);
        for t in 0..gcol.rows() {
            let row = gcol.row(t);
            for k in 0..self.kernel {
                let dst = (t * self.stride + k) as isize - self.pad as isize;
                if dst >= 0 && (dst as usize) < cache.in_len {
                    let out = gx.row_mut(dst as usize);
                    for (o, &g) in out.iter_mut().zip(&row[k * self.in_ch..(k + 1) * self.in_ch]) {
                        *o += g;
                    }
                }
            }
        }
        Some(gx)
    }
}

/// Transposed 1-D convolution, the adjoint of [`Conv1d`] plus a bias. The
/// weight is `[kernel][out][in]`; `output_padding` extends the tail so a
/// decoder can hit the exact encoder lengths.
#[derive(Debug, Clone)]
pub struct Deconv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
}

#[derive(Debug, Clone)]
pub struct DeconvCache<T> {
    x: Tensor<T>,
}

impl Deconv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if output_padding >= stride.max(1) {
            return Err(Error::Shape(format!(
                "output padding {output_padding} must be below the stride {stride}"
            )));
        }
        let fan_in = in_ch * kernel;
        Ok(Self {
            weight: ps.add(
                format!("{name}.weight"),
                &[kernel, out_ch, in_ch],
                ParamRole::Shared,
                uniform_init(kernel * out_ch * in_ch, fan_in, rng),
            )?,
            bias: ps.add(format!("{name}.bias"), &[out_ch], ParamRole::Shared, uniform_init(out_ch, fan_in, rng))?,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            output_padding,
        })
    }

    /// Output padding that maps `in_len` to `target_len`, if one exists.
    pub fn output_padding_for(in_len: usize, target_len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let base = ((in_len - 1) * stride + kernel).checked_sub(2 * pad)?;
        let op = target_len.checked_sub(base)?;
        (op < stride.max(1)).then_some(op)
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len - 1) * self.stride + self.kernel + self.output_padding - 2 * self.pad
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, DeconvCache<T>)> {
        if x.cols() != self.in_ch || x.rows() == 0 {
            return Err(Error::Shape(format!(
                "deconv expects [len][{}], got {:?}",
                self.in_ch,
                x.shape()
            )));
        }
        let lout = self.out_len(x.rows());
        let z = matmul_t(x, ps.value(self.weight), self.kernel * self.out_ch, None);
        let bias = ps.value(self.bias);
        let mut y = Tensor::zeros(&[lout, self.out_ch]);
        for t in 0..lout {
            y.row_mut(t).copy_from_slice(bias);
        }
        for i in 0..x.rows() {
            let zi = z.row(i);
            for k in 0..self.kernel {
                let t = (i * self.stride + k) as isize - self.pad as isize;
                if t >= 0 && (t as usize) < lout {
                    let out = y.row_mut(t as usize);
                    for (o, &v) in out.iter_mut().zip(&zi[k * self.out_ch..(k + 1) * self.out_ch]) {
                        *o += v;
                    }
                }
            }
        }
        Ok((y, DeconvCache { x: x.clone() }))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &DeconvCache<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
        need_gx: bool,
    ) -> Option<Tensor<T>> {
        if let Some(gb) = grads.slot(self.bias, self.out_ch) {
            for r in 0..gy.rows() {
                for (b, &g) in gb.iter_mut().zip(gy.row(r)) {
                    *b += g;
                }
            }
        }
        let lin = cache.x.rows();
        let mut gz = Tensor::zeros(&[lin, self.kernel * self.out_ch]);
        for i in 0..lin {
            let row = gz.row_mut(i);
            for k in 0..self.kernel {
                let t = (i * self.stride + k) as isize - self.pad as isize;
                if t >= 0 && (t as usize) < gy.rows() {
                    row[k * self.out_ch..(k + 1) * self.out_ch].copy_from_slice(gy.row(t as usize));
                }
            }
        }
        let gw = grads.slot(self.weight, self.kernel * self.out_ch * self.in_ch);
        matmul_t_backward(&cache.x, ps.value(self.weight), &gz, gw, need_gx)
    }
}
