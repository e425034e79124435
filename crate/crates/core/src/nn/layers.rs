//! Conv / linear / group-norm layers backed by [`ParamStore`] parameters.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::{Init, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
            bias: true,
        }
    }
}

pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    cfg: Conv2dCfg,
    out_channels: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        cfg: Conv2dCfg,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = (in_c / cfg.groups) * kernel * kernel;
        Self::new_with_init(
            ps,
            name,
            in_c,
            out_c,
            kernel,
            cfg,
            Init::KaimingNormal { fan_in },
            rng,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new_with_init(
        ps: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        cfg: Conv2dCfg,
        weight_init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = ps.var(
            &format!("{name}.weight"),
            (out_c, in_c / cfg.groups, kernel, kernel),
            weight_init,
            rng,
        )?;
        let bias = if cfg.bias {
            Some(ps.var(&format!("{name}.bias"), (out_c,), Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            cfg,
            out_channels: out_c,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.cfg.groups != 1 {
            x.conv2d(
                &self.weight,
                self.cfg.padding,
                self.cfg.stride,
                self.cfg.dilation,
                self.cfg.groups,
            )?
        } else {
            self.gemm_forward(x)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, self.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }

    /// Convolution expressed as patch gathers plus one matmul per call.
    ///
    /// The backward pass of the native conv op scales poorly on CPU; this
    /// composition keeps both directions on gather and GEMM kernels.
    fn gemm_forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c_in, h, w) = x.dims4()?;
        let (out_c, _, k_h, k_w) = self.weight.dims4()?;
        let Conv2dCfg {
            stride,
            padding,
            dilation,
            ..
        } = self.cfg;

        if k_h == 1 && k_w == 1 && stride == 1 && padding == 0 && dilation == 1 {
            let flat = x.reshape((b, c_in, h * w))?;
            let w2 = self.weight.reshape((1, out_c, c_in))?;
            return Ok(w2.broadcast_matmul(&flat)?.reshape((b, out_c, h, w))?);
        }

        let xp = if padding > 0 {
            x.pad_with_zeros(2, padding, padding)?
                .pad_with_zeros(3, padding, padding)?
        } else {
            x.clone()
        };
        let h_p = h + 2 * padding;
        let w_p = w + 2 * padding;
        let span_h = (k_h - 1) * dilation + 1;
        let span_w = (k_w - 1) * dilation + 1;
        assert!(
            h_p >= span_h && w_p >= span_w,
            "conv input {h}x{w} too small for kernel span {span_h}x{span_w}"
        );
        let o_h = (h_p - span_h) / stride + 1;
        let o_w = (w_p - span_w) / stride + 1;
        let dev = x.device();

        let mut patches = Vec::with_capacity(k_h * k_w);
        for ky in 0..k_h {
            let rows: Vec<u32> = (0..o_h).map(|oy| (ky * dilation + stride * oy) as u32).collect();
            let row_idx = Tensor::from_vec(rows, o_h, dev)?;
            let x_rows = xp.index_select(&row_idx, 2)?;
            for kx in 0..k_w {
                let cols: Vec<u32> = (0..o_w).map(|ox| (kx * dilation + stride * ox) as u32).collect();
                let col_idx = Tensor::from_vec(cols, o_w, dev)?;
                patches.push(x_rows.index_select(&col_idx, 3)?);
            }
        }
        let col = if patches.len() == 1 {
            patches.pop().expect("one patch")
        } else {
            Tensor::stack(&patches, 2)?
        };
        // col is (b, c_in, k_h*k_w, o_h, o_w); weight rows expect the
        // (c_in, ky, kx) axis order, which matches this layout flattened.
        let col = col.reshape((b, c_in * k_h * k_w, o_h * o_w))?;
        let w2 = self.weight.reshape((1, out_c, c_in * k_h * k_w))?;
        Ok(w2.broadcast_matmul(&col)?.reshape((b, out_c, o_h, o_w))?)
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_f: usize,
        out_f: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::new_with_init(ps, name, in_f, out_f, Init::KaimingNormal { fan_in: in_f }, rng)
    }

    pub fn new_with_init(
        ps: &mut ParamStore,
        name: &str,
        in_f: usize,
        out_f: usize,
        weight_init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = ps.var(&format!("{name}.weight"), (out_f, in_f), weight_init, rng)?;
        let bias = ps.var(&format!("{name}.bias"), (out_f,), Init::Zeros, rng)?;
        Ok(Self { weight, bias })
    }

    /// Applies to the last axis of `x`, broadcasting over leading axes.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?)
    }
}

pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    channels: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        assert!(channels % groups == 0, "channels must divide into groups");
        let gamma = ps.var(&format!("{name}.gamma"), (channels,), Init::Const(1.0), rng)?;
        let beta = ps.var(&format!("{name}.beta"), (channels,), Init::Zeros, rng)?;
        Ok(Self {
            gamma,
            beta,
            groups,
            channels,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let grouped = x.reshape((b, self.groups, c / self.groups * h * w))?;
        let mean = grouped.mean_keepdim(2)?;
        let centered = grouped.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        let gamma = self.gamma.reshape((1, self.channels, 1, 1))?;
        let beta = self.beta.reshape((1, self.channels, 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}
