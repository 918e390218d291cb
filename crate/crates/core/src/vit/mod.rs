//! Vanilla ViT encoder with a learned mask token and a per-token linear
//! prediction head (a 1×1 convolution over the token map).

mod checkpoint;
mod model;

pub use checkpoint::{checkpoint_digest, Checkpoint};
pub use model::{backward, forward, forward_train, patchify, unpatchify, ForwardCache, Reconstruction};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub mlp_ratio: f32,
    pub patch_side: usize,
    pub image_side: usize,
    pub layer_norm_eps: f32,
    /// Dropout on both residual branches during training. Off by default.
    pub dropout: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// 12 layers, 768 wide, 12 heads.
    pub fn full() -> Self {
        Self::toy(12, 768, 12)
    }

    pub fn toy(depth: usize, embed_dim: usize, n_heads: usize) -> Self {
        ModelConfig {
            depth,
            embed_dim,
            n_heads,
            mlp_ratio: 4.0,
            patch_side: 16,
            image_side: 224,
            layer_norm_eps: 1e-6,
            dropout: 0.0,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these checks
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigRejected(msg));
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return bad(format!("embed_dim {} must be a positive multiple of n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return bad(format!("image_side {} is not a multiple of patch_side {}", self.image_side, self.patch_side));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return bad(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} is outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f32 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, h, p, n) = (self.embed_dim, self.hidden_dim(), self.patch_dim(), self.n_patches());
        let block = 2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d + d * h + h + h * d + d;
        p * d + d + d + n * d + self.depth * block + 2 * d + d * p + p
    }
}

/// How a tensor is treated by initialization and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    MaskToken,
    PosEmbed,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

/// Names, kinds and shapes of every tensor, in storage order.
pub fn param_layout(config: &ModelConfig) -> Vec<ParamSpec> {
    let (d, h, p, n) = (config.embed_dim, config.hidden_dim(), config.patch_dim(), config.n_patches());
    let spec = |name: String, kind, shape: &[usize]| ParamSpec { name, kind, shape: shape.to_vec() };
    let mut out = vec![
        spec("patch_embed.weight".into(), ParamKind::Weight, &[p, d]),
        spec("patch_embed.bias".into(), ParamKind::Bias, &[d]),
        spec("mask_token".into(), ParamKind::MaskToken, &[d]),
        spec("pos_embed".into(), ParamKind::PosEmbed, &[n, d]),
    ];
    for l in 0..config.depth {
        let pre = format!("blocks.{l}");
        out.extend([
            spec(format!("{pre}.norm1.scale"), ParamKind::NormScale, &[d]),
            spec(format!("{pre}.norm1.shift"), ParamKind::NormShift, &[d]),
            spec(format!("{pre}.attn.qkv.weight"), ParamKind::Weight, &[d, 3 * d]),
            spec(format!("{pre}.attn.qkv.bias"), ParamKind::Bias, &[3 * d]),
            spec(format!("{pre}.attn.proj.weight"), ParamKind::Weight, &[d, d]),
            spec(format!("{pre}.attn.proj.bias"), ParamKind::Bias, &[d]),
            spec(format!("{pre}.norm2.scale"), ParamKind::NormScale, &[d]),
            spec(format!("{pre}.norm2.shift"), ParamKind::NormShift, &[d]),
            spec(format!("{pre}.mlp.fc1.weight"), ParamKind::Weight, &[d, h]),
            spec(format!("{pre}.mlp.fc1.bias"), ParamKind::Bias, &[h]),
            spec(format!("{pre}.mlp.fc2.weight"), ParamKind::Weight, &[h, d]),
            spec(format!("{pre}.mlp.fc2.bias"), ParamKind::Bias, &[d]),
        ]);
    }
    out.extend([
        spec("norm.scale".into(), ParamKind::NormScale, &[d]),
        spec("norm.shift".into(), ParamKind::NormShift, &[d]),
        spec("head.weight".into(), ParamKind::Weight, &[d, p]),
        spec("head.bias".into(), ParamKind::Bias, &[p]),
    ]);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1_scale: Tensor<T>,
    pub norm1_shift: Tensor<T>,
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub norm2_scale: Tensor<T>,
    pub norm2_shift: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

/// All learnable tensors. Gradients share this type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub mask_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm_scale: Tensor<T>,
    pub norm_shift: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Assembles params from tensors given in [`param_layout`] order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(config);
        if tensors.len() != layout.len() {
            return Err(Error::ConfigMismatch(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        for (spec, t) in layout.iter().zip(&tensors) {
            if spec.shape != t.shape || t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::ConfigMismatch(format!(
                    "{}: expected shape {:?}, got {:?}",
                    spec.name, spec.shape, t.shape
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let patch_w = next();
        let patch_b = next();
        let mask_token = next();
        let pos_embed = next();
        let blocks = (0..config.depth)
            .map(|_| Block {
                norm1_scale: next(),
                norm1_shift: next(),
                qkv_w: next(),
                qkv_b: next(),
                proj_w: next(),
                proj_b: next(),
                norm2_scale: next(),
                norm2_shift: next(),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            patch_w,
            patch_b,
            mask_token,
            pos_embed,
            blocks,
            norm_scale: next(),
            norm_shift: next(),
            head_w: next(),
            head_b: next(),
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let tensors = param_layout(config).iter().map(|s| Tensor::zeros(&s.shape)).collect();
        Self::from_tensors(config, tensors)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.patch_w, &self.patch_b, &self.mask_token, &self.pos_embed];
        for b in &self.blocks {
            v.extend([
                &b.norm1_scale,
                &b.norm1_shift,
                &b.qkv_w,
                &b.qkv_b,
                &b.proj_w,
                &b.proj_b,
                &b.norm2_scale,
                &b.norm2_shift,
                &b.fc1_w,
                &b.fc1_b,
                &b.fc2_w,
                &b.fc2_b,
            ]);
        }
        v.extend([&self.norm_scale, &self.norm_shift, &self.head_w, &self.head_b]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.patch_w, &mut self.patch_b, &mut self.mask_token, &mut self.pos_embed];
        for b in &mut self.blocks {
            v.extend([
                &mut b.norm1_scale,
                &mut b.norm1_shift,
                &mut b.qkv_w,
                &mut b.qkv_b,
                &mut b.proj_w,
                &mut b.proj_b,
                &mut b.norm2_scale,
                &mut b.norm2_shift,
                &mut b.fc1_w,
                &mut b.fc1_b,
                &mut b.fc2_w,
                &mut b.fc2_b,
            ]);
        }
        v.extend([&mut self.norm_scale, &mut self.norm_shift, &mut self.head_w, &mut self.head_b]);
        v
    }

    /// Parameter count by walking the stored tensors.
    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| crate::tensor::all_finite(&t.data))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let tensors = self
            .tensors()
            .into_iter()
            .map(|t| Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect() })
            .collect();
        ModelParams::from_tensors(&self.config, tensors).expect("same layout")
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::tensor::add_assign(&mut a.data, &b.data);
        }
    }

    /// Flat (tensor index, element index) addressing used by gradient probes.
    pub fn get(&self, tensor: usize, index: usize) -> T {
        self.tensors()[tensor].data[index]
    }

    pub fn set(&mut self, tensor: usize, index: usize, v: T) {
        self.tensors_mut()[tensor].data[index] = v;
    }
}

const INIT_STD: f64 = 0.02;

/// Truncated-normal (σ = 0.02, cut at ±2σ) weights, positions and mask
/// token; zero biases and shifts; unit norm scales.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
    config.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = param_layout(config)
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut t = Tensor::<f32>::zeros(&spec.shape);
            match spec.kind {
                ParamKind::Weight | ParamKind::MaskToken | ParamKind::PosEmbed => {
                    let mut rng = rng::stream(seed, Stream::Init, &[i as u64]);
                    for v in &mut t.data {
                        *v = loop {
                            let x: f64 = normal.sample(&mut rng);
                            if x.abs() <= 2.0 * INIT_STD {
                                break x as f32;
                            }
                        };
                    }
                }
                ParamKind::NormScale => t.data.fill(1.0),
                ParamKind::Bias | ParamKind::NormShift => {}
            }
            t
        })
        .collect();
    ModelParams::from_tensors(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_param_count() {
        let cfg = ModelConfig::full();
        let walked: usize = param_layout(&cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum();
        assert_eq!(cfg.param_count(), walked);
        assert_eq!(walked, 85_601_536);
    }

    #[test]
    fn toy_init_invariants() {
        let cfg = ModelConfig::toy(2, 32, 4);
        let p = init_params(&cfg, 3).unwrap();
        assert_eq!(p.count(), cfg.param_count());
        assert!(p.all_finite());
        for (spec, t) in param_layout(&cfg).iter().zip(p.tensors()) {
            match spec.kind {
                ParamKind::NormScale => assert!(t.data.iter().all(|&v| v == 1.0)),
                ParamKind::Bias | ParamKind::NormShift => assert!(t.data.iter().all(|&v| v == 0.0)),
                _ => {
                    assert!(t.data.iter().all(|v| v.abs() <= 0.04 + 1e-7), "{}", spec.name);
                    assert!(t.data.iter().any(|&v| v != 0.0));
                }
            }
        }
        assert_eq!(p, init_params(&cfg, 3).unwrap());
        assert_ne!(p, init_params(&cfg, 4).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ModelConfig::toy(2, 30, 4).validate().is_err());
        let mut c = ModelConfig::toy(2, 32, 4);
        c.patch_side = 15;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tensors_follow_layout_order() {
        let cfg = ModelConfig::toy(3, 8, 2);
        let p = init_params(&cfg, 0).unwrap();
        let shapes: Vec<_> = p.tensors().iter().map(|t| t.shape.clone()).collect();
        let layout: Vec<_> = param_layout(&cfg).into_iter().map(|s| s.shape).collect();
        assert_eq!(shapes, layout);
    }
}
