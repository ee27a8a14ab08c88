//! The two-branch network: a spatial teacher over per-AU tokens (branch A)
//! and per-position student heads feeding a temporal teacher (branch B).

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;

use candle_core::{DType, Tensor, D};
use rand::Rng;

use crate::config::{EncoderKind, ModelConfig, TemporalPooling};
use crate::error::{Error, Result};
use layers::{Conv3x3, Encoder, EncoderShape, LayerNorm, Linear};
use params::{Init, ParamGroup, ParamStore};

/// Stack of 3x3 conv + ReLU blocks. Frames are processed independently.
#[derive(Clone, Debug)]
pub struct Backbone {
    blocks: Vec<Conv3x3>,
}

impl Backbone {
    fn new(ps: &mut ParamStore, name: &str, group: ParamGroup, cfg: &ModelConfig) -> Result<Self> {
        let mut c_in = cfg.image_channels;
        let mut blocks = Vec::new();
        for (i, (&width, &stride)) in cfg.backbone_widths.iter().zip(&cfg.backbone_strides).enumerate() {
            blocks.push(Conv3x3::new(ps, &format!("{name}.{i}"), group, c_in, width, stride)?);
            c_in = width;
        }
        Ok(Self { blocks })
    }

    /// `[N, C, H, W] -> [N, C_f, h, w]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for block in &self.blocks {
            x = block.forward(&x)?.relu()?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct SpatialOutput {
    /// Decoupled per-AU features `[b, U, W]`.
    pub features: Tensor,
    /// `[b, U]`
    pub logits: Tensor,
    /// One `[b, heads, U, U]` map per encoder layer.
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct StudentOutput {
    /// Penultimate features `[b, W]`, taken before dropout.
    pub hidden: Tensor,
    /// `[b, U]`
    pub logits: Tensor,
}

#[derive(Clone, Debug)]
pub struct TemporalOutput {
    /// `[b, U]`
    pub au_logits: Tensor,
    /// `[b]`; positive means "temporally perturbed".
    pub ssl_logits: Tensor,
    /// One `[b, heads, n, n]` map per encoder layer.
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
struct StudentHead {
    hidden: Linear,
    out: Linear,
}

/// Perturbation classifier over an encoded token sequence.
///
/// Scores how rough the sequence is: the mean squared step between adjacent
/// projected tokens divided by the mean squared distance over all token
/// pairs. The ratio has expectation 1 under a random reordering and is small
/// for smoothly evolving sequences; a learned affine map of its log is the logit.
///
/// Tokens are layer-normed first and both terms are softened by a constant,
/// so near-identical tokens read as undecidable (ratio 1) instead of giving
/// gradients that blow up as the tokens collapse.
#[derive(Clone, Debug)]
struct PerturbationHead {
    norm: LayerNorm,
    proj: Linear,
    scale: Tensor,
    shift: Tensor,
}

impl PerturbationHead {
    const SOFTENING: f64 = 0.01;

    fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (_, n, _) = tokens.dims3()?;
        let h = self.proj.forward(&self.norm.forward(tokens)?)?;
        let steps = (h.narrow(1, 1, n - 1)? - h.narrow(1, 0, n - 1)?)?;
        let adjacent = steps.sqr()?.sum(D::Minus1)?.mean(D::Minus1)?;
        let centered = h.broadcast_sub(&h.mean_keepdim(1)?)?;
        // Mean pairwise squared distance: 2 / (n - 1) * sum_i |h_i - mean|^2.
        let pairwise = (centered.sqr()?.sum(D::Minus1)?.sum(D::Minus1)? * (2.0 / (n - 1) as f64))?;
        let ratio = ((adjacent + Self::SOFTENING)? / (pairwise + Self::SOFTENING)?)?;
        let score = ratio.log()?;
        Ok(score.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?)
    }
}

/// All learnable components. Parameters live in one [`ParamStore`], tagged by group.
#[derive(Debug)]
pub struct KnowledgeSpreader {
    cfg: ModelConfig,
    params: ParamStore,
    backbone_a: Backbone,
    decouple: Linear,
    spatial_pos: Tensor,
    spatial_encoder: Encoder,
    spatial_readout: Linear,
    backbone_b: Backbone,
    frame_embed: Linear,
    students: Vec<StudentHead>,
    temporal_pos: Tensor,
    temporal_encoder: Encoder,
    au_head: Linear,
    ssl_head: PerturbationHead,
}

impl KnowledgeSpreader {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed, dtype);
        let (u, w, n) = (cfg.num_aus, cfg.feature_width, cfg.clip_len);
        let c_f = *cfg.backbone_widths.last().expect("validated non-empty");
        let map = cfg.feature_map_size();
        let shape = EncoderShape {
            layers: cfg.encoder_layers,
            heads: cfg.channels,
            head_dim: cfg.head_dim,
            ffn_width: cfg.ffn_width,
            attention: cfg.encoder == EncoderKind::Transformer,
        };
        let pos_init = Init::Normal(0.02);

        let backbone_a = Backbone::new(&mut ps, "backbone_a", ParamGroup::BackboneA, cfg)?;
        let decouple = Linear::relu(&mut ps, "decouple", ParamGroup::Decouple, c_f, u * w)?;
        let spatial_pos = ps.add("spatial.pos", ParamGroup::SpatialTeacher, &[u, w], pos_init)?;
        let spatial_encoder = Encoder::new(&mut ps, "spatial.encoder", ParamGroup::SpatialTeacher, shape)?;
        let spatial_readout = Linear::new(&mut ps, "spatial.readout", ParamGroup::SpatialTeacher, w, 1, 1.0)?;

        let backbone_b = Backbone::new(&mut ps, "backbone_b", ParamGroup::BackboneB, cfg)?;
        let frame_embed = Linear::relu(&mut ps, "frame_embed", ParamGroup::BackboneB, c_f * map * map, w)?;
        // Students share one starting point; otherwise their hidden spaces are
        // unrelated random rotations and adjacent tokens are incomparable.
        let students = ps.replicate(n, |ps, j| {
            Ok(StudentHead {
                hidden: Linear::relu(ps, &format!("students.{j}.hidden"), ParamGroup::Students, w, w)?,
                out: Linear::new(ps, &format!("students.{j}.out"), ParamGroup::Students, w, u, 1.0)?,
            })
        })?;

        let temporal_pos = ps.add("temporal.pos", ParamGroup::TemporalTeacher, &[n, w], pos_init)?;
        let temporal_encoder = Encoder::new(&mut ps, "temporal.encoder", ParamGroup::TemporalTeacher, shape)?;
        let au_head = Linear::new(&mut ps, "temporal.au_head", ParamGroup::TemporalTeacher, w, u, 1.0)?;
        // Starts at "perturbed" above a roughness ratio of exp(-0.25), about 0.78.
        let ssl_head = PerturbationHead {
            norm: LayerNorm::new(&mut ps, "temporal.ssl.norm", ParamGroup::TemporalTeacher, w)?,
            proj: Linear::new(&mut ps, "temporal.ssl.proj", ParamGroup::TemporalTeacher, w, w, 1.0)?,
            scale: ps.add("temporal.ssl.scale", ParamGroup::TemporalTeacher, &[1], Init::Const(4.0))?,
            shift: ps.add("temporal.ssl.shift", ParamGroup::TemporalTeacher, &[1], Init::Const(1.0))?,
        };

        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            backbone_a,
            decouple,
            spatial_pos,
            spatial_encoder,
            spatial_readout,
            backbone_b,
            frame_embed,
            students,
            temporal_pos,
            temporal_encoder,
            au_head,
            ssl_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Packs `H x W x C` images into an `[N, C, H, W]` tensor.
    pub fn images_to_tensor(&self, images: &[&[f32]]) -> Result<Tensor> {
        let (s, c) = (self.cfg.image_size, self.cfg.image_channels);
        let mut flat = Vec::with_capacity(images.len() * s * s * c);
        for img in images {
            if img.len() != s * s * c {
                return Err(Error::shape(format!("image of {} values, expected {}", img.len(), s * s * c)));
            }
            flat.extend_from_slice(img);
        }
        let t = Tensor::from_vec(flat, (images.len(), s, s, c), self.params.device())?;
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(self.dtype())?)
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        let (n, c, h, w) = x.dims4()?;
        let s = self.cfg.image_size;
        if c != self.cfg.image_channels || h != s || w != s {
            return Err(Error::shape(format!("expected [N, {}, {s}, {s}] images, got {:?}", self.cfg.image_channels, x.dims())));
        }
        Ok(n)
    }

    /// Branch A on the key frames: decoupled per-AU features `D_s` `[b, U, W]`.
    pub fn spatial_features(&self, key_images: &Tensor) -> Result<Tensor> {
        let b = self.check_images(key_images)?;
        let fmap = self.backbone_a.forward(key_images)?;
        let (_, c_f, h, w) = fmap.dims4()?;
        // A per-location projection per AU, rectified and then averaged over the map.
        let tokens = fmap.reshape((b, c_f, h * w))?.transpose(1, 2)?.contiguous()?;
        let projected = self.decouple.forward(&tokens)?.relu()?.mean(1)?;
        Ok(projected.reshape((b, self.cfg.num_aus, self.cfg.feature_width))?)
    }

    pub fn spatial_teacher(&self, features: &Tensor) -> Result<SpatialOutput> {
        let (b, u, w) = features.dims3()?;
        if u != self.cfg.num_aus || w != self.cfg.feature_width {
            return Err(Error::shape(format!("spatial teacher expects [b, {}, {}] tokens", self.cfg.num_aus, self.cfg.feature_width)));
        }
        let x = features.broadcast_add(&self.spatial_pos)?;
        let (encoded, attention) = self.spatial_encoder.forward(&x)?;
        let logits = self.spatial_readout.forward(&encoded)?.reshape((b, u))?;
        Ok(SpatialOutput { features: features.clone(), logits, attention })
    }

    pub fn spatial_branch(&self, key_images: &Tensor) -> Result<SpatialOutput> {
        self.spatial_teacher(&self.spatial_features(key_images)?)
    }

    /// Branch B frame features `D_b` `[b, n, W]` from `[b * n, C, H, W]` frames.
    pub fn frame_features(&self, frames: &Tensor, clips: usize) -> Result<Tensor> {
        let total = self.check_images(frames)?;
        if clips == 0 || total % clips != 0 {
            return Err(Error::shape(format!("{total} frames do not split into {clips} clips")));
        }
        let fmap = self.backbone_b.forward(frames)?;
        let flat = fmap.flatten_from(1)?;
        let emb = self.frame_embed.forward(&flat)?.relu()?;
        Ok(emb.reshape((clips, total / clips, self.cfg.feature_width))?)
    }

    /// Student head `head` on features `[b, W]`. `dropout_mask` (already
    /// scaled) is applied to the hidden layer before the output projection.
    pub fn student(&self, head: usize, features: &Tensor, dropout_mask: Option<&Tensor>) -> Result<StudentOutput> {
        let s = self
            .students
            .get(head)
            .ok_or_else(|| Error::shape(format!("no student head {head} (clip length {})", self.cfg.clip_len)))?;
        let hidden = s.hidden.forward(features)?.relu()?;
        let dropped = match dropout_mask {
            Some(mask) => (&hidden * mask)?,
            None => hidden.clone(),
        };
        Ok(StudentOutput { logits: s.out.forward(&dropped)?, hidden })
    }

    /// Temporal teacher over `[b, n, W]` tokens in clip order.
    pub fn temporal_teacher(&self, tokens: &Tensor, key_pos: usize) -> Result<TemporalOutput> {
        let (_, n, w) = tokens.dims3()?;
        if n != self.cfg.clip_len || w != self.cfg.feature_width {
            return Err(Error::shape(format!(
                "temporal teacher expects {} tokens of width {}, got {n} x {w}",
                self.cfg.clip_len, self.cfg.feature_width
            )));
        }
        let x = tokens.broadcast_add(&self.temporal_pos)?;
        let (encoded, attention) = self.temporal_encoder.forward(&x)?;
        let pooled = match self.cfg.temporal_pooling {
            TemporalPooling::Mean => encoded.mean(1)?,
            TemporalPooling::KeyFrame => encoded.narrow(1, key_pos, 1)?.squeeze(1)?,
        };
        Ok(TemporalOutput {
            au_logits: self.au_head.forward(&pooled)?,
            ssl_logits: self.ssl_head.forward(&encoded)?,
            attention,
        })
    }

    /// Dropout mask `[rows, W]` with inverted scaling; all zeros when `p >= 1`.
    pub fn dropout_mask<R: Rng>(&self, rng: &mut R, rows: usize, p: f64) -> Result<Tensor> {
        let w = self.cfg.feature_width;
        let values: Vec<f64> = (0..rows * w)
            .map(|_| if p >= 1.0 || rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
            .collect();
        Ok(Tensor::from_vec(values, (rows, w), self.params.device())?.to_dtype(self.dtype())?)
    }
}

/// Reorders tokens `[b, n, W]` along the clip axis, one permutation per clip.
pub fn permute_tokens(tokens: &Tensor, perms: &[Vec<usize>]) -> Result<Tensor> {
    let (b, n, _) = tokens.dims3()?;
    if perms.len() != b || perms.iter().any(|p| p.len() != n) {
        return Err(Error::shape("one permutation of length n is needed per clip"));
    }
    let idx: Vec<u32> = perms
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.iter().map(move |&j| (i * n + j) as u32))
        .collect();
    let idx = Tensor::from_vec(idx, b * n, tokens.device())?;
    let w = tokens.dim(2)?;
    Ok(tokens.reshape((b * n, w))?.index_select(&idx, 0)?.reshape((b, n, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(dtype: DType) -> KnowledgeSpreader {
        KnowledgeSpreader::new(&ModelConfig::default(), 7, dtype).unwrap()
    }

    fn random_images(rng: &mut ChaCha8Rng, count: usize, m: &KnowledgeSpreader) -> Tensor {
        let len = m.config().frame_len();
        let imgs: Vec<Vec<f32>> = (0..count).map(|_| (0..len).map(|_| rng.random::<f32>()).collect()).collect();
        let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
        m.images_to_tensor(&refs).unwrap()
    }

    fn to_vec2(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
    }

    #[test]
    fn students_share_their_starting_point() {
        let m = model(DType::F64);
        let values = |name: &str| {
            let i = m.params().params().iter().position(|p| p.name == name).unwrap();
            m.params().values(i).unwrap()
        };
        for j in 1..m.config().clip_len {
            for part in ["hidden.w", "out.w"] {
                assert_eq!(values(&format!("students.0.{part}")), values(&format!("students.{j}.{part}")));
            }
        }
        // The store moves on afterwards: later layers are not copies.
        assert_ne!(values("students.0.hidden.w")[..8], values("temporal.ssl.proj.w")[..8]);
    }

    #[test]
    fn parameter_budget_and_disjoint_backbones() {
        let m = model(DType::F32);
        assert!(m.params().num_parameters() < 30_000_000);
        let a: Vec<&str> = m.params().in_group(ParamGroup::BackboneA).map(|p| p.name.as_str()).collect();
        let b: Vec<&str> = m.params().in_group(ParamGroup::BackboneB).map(|p| p.name.as_str()).collect();
        assert!(!a.is_empty() && !b.is_empty());
        for pa in m.params().in_group(ParamGroup::BackboneA) {
            for pb in m.params().in_group(ParamGroup::BackboneB) {
                assert_ne!(pa.var.as_tensor().id(), pb.var.as_tensor().id());
            }
        }
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let m = model(DType::F32);
        let zeros = vec![0.0f32; m.config().frame_len()];
        let x = m.images_to_tensor(&[&zeros, &zeros]).unwrap();
        let out = m.spatial_branch(&x).unwrap();
        assert!(to_vec2(&out.logits).iter().flatten().all(|v| v.is_finite()));
        assert!(m.frame_features(&x, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
        assert!(m.spatial_branch(&Tensor::zeros((1, 1, 8, 8), DType::F32, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn frame_features_are_per_frame() {
        let m = model(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let len = m.config().frame_len();
        let base: Vec<f32> = (0..len).map(|_| rng.random()).collect();
        let same = vec![base.as_slice(); 5];
        let x = m.images_to_tensor(&same).unwrap();
        let f: Vec<Vec<f64>> = m.frame_features(&x, 1).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert!(f.iter().all(|row| row == &f[0]));

        let mut other = base.clone();
        for v in other.iter_mut().take(40) {
            *v = 1.0 - *v;
        }
        let mut perturbed = same.clone();
        perturbed[3] = other.as_slice();
        let g: Vec<Vec<f64>> = m
            .frame_features(&m.images_to_tensor(&perturbed).unwrap(), 1)
            .unwrap()
            .squeeze(0)
            .unwrap()
            .to_vec2()
            .unwrap();
        for j in 0..5 {
            assert_eq!(f[j] != g[j], j == 3, "frame {j}");
        }
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let m = model(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = m.spatial_branch(&random_images(&mut rng, 3, &m)).unwrap();
        assert_eq!(out.attention.len(), 2);
        for a in &out.attention {
            assert_eq!(a.dims(), &[3, 4, 5, 5]);
            let sums: Vec<f64> = a.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
        }
        let tokens = Tensor::randn(0.0f64, 1.0, (2, 5, 32), &Device::Cpu).unwrap();
        let t = m.temporal_teacher(&tokens, 0).unwrap();
        for a in &t.attention {
            assert_eq!(a.dims(), &[2, 4, 5, 5]);
            let sums: Vec<f64> = a.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
        }
        assert!(m.temporal_teacher(&tokens.narrow(1, 0, 4).unwrap(), 0).is_err());
    }

    #[test]
    fn zeroed_encoder_reduces_to_linear_readout() {
        let m = model(DType::F64);
        for (i, p) in m.params().params().iter().enumerate() {
            if p.name.starts_with("spatial.encoder") {
                m.params().set_values(i, &vec![0.0; p.var.elem_count()]).unwrap();
            }
        }
        let d_s = Tensor::randn(0.0f64, 1.0, (2, 5, 32), &Device::Cpu).unwrap();
        let got = to_vec2(&m.spatial_teacher(&d_s).unwrap().logits);

        let pos = m.params().values(m.params().params().iter().position(|p| p.name == "spatial.pos").unwrap()).unwrap();
        let w = m.params().values(m.params().params().iter().position(|p| p.name == "spatial.readout.w").unwrap()).unwrap();
        let b = m.params().values(m.params().params().iter().position(|p| p.name == "spatial.readout.b").unwrap()).unwrap()[0];
        let x: Vec<f64> = d_s.flatten_all().unwrap().to_vec1().unwrap();
        for i in 0..2 {
            for u in 0..5 {
                let expected: f64 = (0..32).map(|k| (x[(i * 5 + u) * 32 + k] + pos[u * 32 + k]) * w[k]).sum::<f64>() + b;
                assert!((got[i][u] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_teacher_is_permutation_equivariant() {
        let m = model(DType::F64);
        let pos_idx = m.params().params().iter().position(|p| p.name == "spatial.pos").unwrap();
        let pos = m.params().values(pos_idx).unwrap();
        let d_s = Tensor::randn(0.0f64, 1.0, (2, 5, 32), &Device::Cpu).unwrap();
        let before = to_vec2(&m.spatial_teacher(&d_s).unwrap().logits);

        let perm = [3usize, 0, 4, 1, 2];
        let permuted = permute_tokens(&d_s, &[perm.to_vec(), perm.to_vec()]).unwrap();
        let new_pos: Vec<f64> = perm.iter().flat_map(|&p| pos[p * 32..(p + 1) * 32].to_vec()).collect();
        m.params().set_values(pos_idx, &new_pos).unwrap();
        let after = to_vec2(&m.spatial_teacher(&permuted).unwrap().logits);
        for i in 0..2 {
            for (k, &p) in perm.iter().enumerate() {
                assert!((after[i][k] - before[i][p]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn students_dropout_and_isolation() {
        let m = model(DType::F64);
        let x = Tensor::randn(0.0f64, 1.0, (4, 32), &Device::Cpu).unwrap();
        let a = to_vec2(&m.student(1, &x, None).unwrap().logits);
        let b = to_vec2(&m.student(1, &x, None).unwrap().logits);
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = m.dropout_mask(&mut rng, 4, 1.0).unwrap();
        let dropped = to_vec2(&m.student(1, &x, Some(&mask)).unwrap().logits);
        let bias_idx = m.params().params().iter().position(|p| p.name == "students.1.out.b").unwrap();
        let bias = m.params().values(bias_idx).unwrap();
        assert!(dropped.iter().all(|row| row == &bias));

        let before = to_vec2(&m.student(2, &x, None).unwrap().logits);
        for (i, p) in m.params().params().iter().enumerate() {
            if p.name.starts_with("students.0.") {
                let v: Vec<f64> = m.params().values(i).unwrap().iter().map(|v| v + 0.3).collect();
                m.params().set_values(i, &v).unwrap();
            }
        }
        assert_eq!(to_vec2(&m.student(2, &x, None).unwrap().logits), before);
        assert!(m.student(5, &x, None).is_err());
    }

    #[test]
    fn perturbation_logit_ignores_order_of_identical_tokens() {
        let m = model(DType::F64);
        let token = Tensor::randn(0.0f64, 1.0, (1, 1, 32), &Device::Cpu).unwrap();
        let tokens = token.repeat((1, 5, 1)).unwrap();
        let a = m.temporal_teacher(&tokens, 0).unwrap().ssl_logits.to_vec1::<f64>().unwrap();
        let shuffled = permute_tokens(&tokens, &[vec![4, 2, 0, 3, 1]]).unwrap();
        let b = m.temporal_teacher(&shuffled, 0).unwrap().ssl_logits.to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
        assert!(a[0].is_finite());
    }

    #[test]
    fn forward_passes_stay_finite() {
        let m = model(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..4 {
            let x = random_images(&mut rng, 250, &m);
            let s = m.spatial_branch(&x).unwrap();
            assert!(to_vec2(&s.logits).iter().flatten().all(|v| v.is_finite()));
            let f = m.frame_features(&x, 50).unwrap();
            let hidden: Vec<Tensor> = (0..5)
                .map(|j| m.student(j, &f.narrow(1, j, 1).unwrap().squeeze(1).unwrap(), None).unwrap().hidden)
                .collect();
            let tokens = Tensor::stack(&hidden, 1).unwrap();
            let t = m.temporal_teacher(&tokens, 2).unwrap();
            assert!(to_vec2(&t.au_logits).iter().flatten().all(|v| v.is_finite()));
            assert!(t.ssl_logits.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn permute_tokens_moves_rows() {
        let t = Tensor::arange(0f64, 12.0, &Device::Cpu).unwrap().reshape((2, 3, 2)).unwrap();
        let p = permute_tokens(&t, &[vec![2, 0, 1], vec![1, 0, 2]]).unwrap();
        let v: Vec<f64> = p.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![4.0, 5.0, 0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 6.0, 7.0, 10.0, 11.0]);
    }
}
