//! Building blocks written against candle's differentiable tensor ops.

use candle_core::{Tensor, D};

use super::params::{fan_in_uniform, Init, ParamGroup, ParamStore};
use crate::error::Result;

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug)]
pub struct Linear {
    /// `[in, out]`
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize, gain: f64) -> Result<Self> {
        let w = ps.add(format!("{name}.w"), group, &[fan_in, fan_out], fan_in_uniform(fan_in, gain))?;
        let b = ps.add(format!("{name}.b"), group, &[fan_out], Init::Zeros)?;
        Ok(Self { w, b })
    }

    pub fn relu(ps: &mut ParamStore, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::new(ps, name, group, fan_in, fan_out, RELU_GAIN)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if x.rank() == 2 { x.matmul(&self.w)? } else { x.broadcast_matmul(&self.w)? };
        Ok(y.broadcast_add(&self.b)?)
    }
}

/// 3x3 convolution with padding 1.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    w: Tensor,
    b: Tensor,
    stride: usize,
}

impl Conv3x3 {
    pub fn new(ps: &mut ParamStore, name: &str, group: ParamGroup, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let fan_in = c_in * 9;
        let w = ps.add(format!("{name}.w"), group, &[c_out, c_in, 3, 3], fan_in_uniform(fan_in, RELU_GAIN))?;
        let b = ps.add(format!("{name}.b"), group, &[c_out], Init::Zeros)?;
        Ok(Self { w, b, stride })
    }

    /// `[N, C_in, H, W] -> [N, C_out, H', W']`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.w, 1, self.stride, 1, 1)?;
        let c_out = self.b.dim(0)?;
        Ok(y.broadcast_add(&self.b.reshape((1, c_out, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(ps: &mut ParamStore, name: &str, group: ParamGroup, width: usize) -> Result<Self> {
        let gamma = ps.add(format!("{name}.gamma"), group, &[width], Init::Ones)?;
        let beta = ps.add(format!("{name}.beta"), group, &[width], Init::Zeros)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Multi-head self-attention over `[b, t, W]` token sequences.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl SelfAttention {
    pub fn new(ps: &mut ParamStore, name: &str, group: ParamGroup, heads: usize, head_dim: usize) -> Result<Self> {
        let width = heads * head_dim;
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), group, width, width, 1.0)?,
            k: Linear::new(ps, &format!("{name}.k"), group, width, width, 1.0)?,
            v: Linear::new(ps, &format!("{name}.v"), group, width, width, 1.0)?,
            out: Linear::new(ps, &format!("{name}.out"), group, width, width, 1.0)?,
            heads,
            head_dim,
        })
    }

    /// Returns the mixed tokens and the attention maps `[b, heads, t, t]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, t, _) = x.dims3()?;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, self.head_dim))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (self.head_dim as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, self.heads * self.head_dim))?;
        Ok((self.out.forward(&mixed)?, attn))
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(ps: &mut ParamStore, name: &str, group: ParamGroup, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), group, width)?,
            up: Linear::new(ps, &format!("{name}.up"), group, width, hidden, RELU_GAIN)?,
            down: Linear::new(ps, &format!("{name}.down"), group, hidden, width, 1.0)?,
        })
    }

    /// Residual branch only: `down(gelu(up(norm(x))))`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(&self.norm.forward(x)?)?.gelu()?)
    }
}

#[derive(Clone, Debug)]
enum Block {
    Attention { norm: LayerNorm, attn: SelfAttention, ff: FeedForward },
    Mlp { ff: FeedForward },
}

/// Pre-norm token encoder. The attention variant is a standard transformer
/// encoder; the MLP variant processes every token independently.
#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<Block>,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderShape {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_width: usize,
    pub attention: bool,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, name: &str, group: ParamGroup, shape: EncoderShape) -> Result<Self> {
        let width = shape.heads * shape.head_dim;
        let blocks = (0..shape.layers)
            .map(|l| {
                let prefix = format!("{name}.{l}");
                let ff = FeedForward::new(ps, &format!("{prefix}.ff"), group, width, shape.ffn_width)?;
                Ok(if shape.attention {
                    Block::Attention {
                        norm: LayerNorm::new(ps, &format!("{prefix}.norm"), group, width)?,
                        attn: SelfAttention::new(ps, &format!("{prefix}.attn"), group, shape.heads, shape.head_dim)?,
                        ff,
                    }
                } else {
                    Block::Mlp { ff }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    /// Encodes `[b, t, W]`; returns the attention maps of each layer (empty for the MLP variant).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut x = x.clone();
        let mut maps = Vec::new();
        for block in &self.blocks {
            x = match block {
                Block::Attention { norm, attn, ff } => {
                    let (mixed, map) = attn.forward(&norm.forward(&x)?)?;
                    maps.push(map);
                    let x = (x + mixed)?;
                    let h = ff.forward(&x)?;
                    (x + h)?
                }
                Block::Mlp { ff } => {
                    let h = ff.forward(&x)?;
                    (x + h)?
                }
            };
        }
        Ok((x, maps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn layer_norm_standardises_last_dim() {
        let mut ps = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&mut ps, "ln", ParamGroup::Students, 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let y: Vec<f64> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean = y.iter().sum::<f64>() / 4.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut ps = ParamStore::new(1, DType::F64);
        let attn = SelfAttention::new(&mut ps, "a", ParamGroup::SpatialTeacher, 2, 3).unwrap();
        let x = Tensor::randn(0.0f64, 1.0, (2, 4, 6), &Device::Cpu).unwrap();
        let (y, map) = attn.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 4, 6]);
        assert_eq!(map.dims(), &[2, 2, 4, 4]);
        let sums: Vec<f64> = map.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn strided_conv_halves_resolution() {
        let mut ps = ParamStore::new(2, DType::F32);
        let conv = Conv3x3::new(&mut ps, "c", ParamGroup::BackboneA, 1, 4, 2).unwrap();
        let x = Tensor::zeros((3, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[3, 4, 8, 8]);
    }
}
