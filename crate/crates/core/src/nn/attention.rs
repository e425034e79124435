//! Multi-head attention over short token sequences.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::layers::Linear;
use super::ops::softmax;
use super::ParamStore;
use crate::error::Result;

pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    n_heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        assert!(dim % n_heads == 0, "dim must divide into heads");
        Ok(Self {
            wq: Linear::new(ps, &format!("{name}.wq"), dim, dim, rng)?,
            wk: Linear::new(ps, &format!("{name}.wk"), dim, dim, rng)?,
            wv: Linear::new(ps, &format!("{name}.wv"), dim, dim, rng)?,
            wo: Linear::new(ps, &format!("{name}.wo"), dim, dim, rng)?,
            n_heads,
            head_dim: dim / n_heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        debug_assert_eq!(d, self.n_heads * self.head_dim);
        // B×L×D -> B×H×L×hd
        Ok(x.reshape((b, l, self.n_heads, self.head_dim))?
            .permute((0, 2, 1, 3))?
            .contiguous()?)
    }

    /// Attention weights and output for query B×Lq×D against keys/values B×Lk×D.
    pub fn forward_with_weights(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (b, lq, d) = query.dims3()?;
        let q = self.split_heads(&self.wq.forward(query)?)?;
        let k = self.split_heads(&self.wk.forward(key)?)?;
        let v = self.split_heads(&self.wv.forward(value)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let weights = softmax(&scores, 3)?; // B×H×Lq×Lk
        let ctx = weights.matmul(&v)?; // B×H×Lq×hd
        let merged = ctx.permute((0, 2, 1, 3))?.contiguous()?.reshape((b, lq, d))?;
        Ok((self.wo.forward(&merged)?, weights))
    }

    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, key, value)?.0)
    }
}
