use crate::error::{Error, Result};
use crate::grid::Composite;
use crate::image::Image;
use crate::masking::PatchMask;
use crate::rng::Rng;
use crate::tensor::{
    all_finite, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward, softmax_rows,
    NormCache, Scalar, View, ViewMut,
};

use super::{ModelConfig, ModelParams};

/// Model output before clamping. Values are unbounded reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub pixels: Image,
}

/// Splits a square image into row-major patches, each flattened row-major.
pub fn patchify<T: Copy>(image: &[T], side: usize, patch: usize) -> Result<Vec<T>> {
    if patch == 0 || !side.is_multiple_of(patch) || image.len() != side * side {
        return Err(Error::InvalidDimension(format!(
            "cannot patchify {} pixels (side {side}) into {patch}-pixel patches",
            image.len()
        )));
    }
    let g = side / patch;
    let mut out = Vec::with_capacity(image.len());
    for py in 0..g {
        for px in 0..g {
            for y in 0..patch {
                let start = (py * patch + y) * side + px * patch;
                out.extend_from_slice(&image[start..start + patch]);
            }
        }
    }
    Ok(out)
}

pub fn unpatchify<T: Copy + Default>(patches: &[T], side: usize, patch: usize) -> Vec<T> {
    let g = side / patch;
    let mut out = vec![T::default(); side * side];
    for py in 0..g {
        for px in 0..g {
            let base = (py * g + px) * patch * patch;
            for y in 0..patch {
                let start = (py * patch + y) * side + px * patch;
                out[start..start + patch].copy_from_slice(&patches[base + y * patch..base + (y + 1) * patch]);
            }
        }
    }
    out
}

struct LayerCache<T> {
    norm1: NormCache<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    drop1: Option<Vec<T>>,
    norm2: NormCache<T>,
    b: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
    drop2: Option<Vec<T>>,
}

/// Activations kept from a training forward pass for [`backward`].
pub struct ForwardCache<T> {
    patches: Vec<T>,
    masked: Vec<bool>,
    layers: Vec<LayerCache<T>>,
    final_norm: NormCache<T>,
    z: Vec<T>,
}

fn dropout_mask<T: Scalar>(len: usize, p: f32, rng: &mut Rng) -> Vec<T> {
    use rand::Rng as _;
    let keep = T::of(1.0 / (1.0 - p as f64));
    (0..len).map(|_| if rng.random::<f32>() < p { T::zero() } else { keep }).collect()
}

fn check<T: Scalar>(xs: &[T], stage: &'static str, layer: Option<usize>) -> Result<()> {
    if all_finite(xs) {
        Ok(())
    } else {
        Err(Error::Numerical { stage, layer })
    }
}

/// Full forward pass on image-layout pixels, returning image-layout output
/// and the cache needed for gradients. Dropout is applied only when an RNG
/// is supplied and the configured rate is non-zero.
pub fn forward_train<T: Scalar>(
    params: &ModelParams<T>,
    pixels: &[T],
    mask: &PatchMask,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(Vec<T>, ForwardCache<T>)> {
    let cfg: &ModelConfig = &params.config;
    let (n, d, p, hid) = (cfg.n_patches(), cfg.embed_dim, cfg.patch_dim(), cfg.hidden_dim());
    let (heads, dh) = (cfg.n_heads, cfg.head_dim());
    if mask.len() != n {
        return Err(Error::InvalidDimension(format!("patch mask has {} entries for {n} patches", mask.len())));
    }
    let eps = T::of(cfg.layer_norm_eps as f64);
    let drop_p = cfg.dropout;

    let mut patches = patchify(pixels, cfg.image_side, cfg.patch_side)?;
    let masked = mask.as_slice().to_vec();
    for (i, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
        patches[i * p..(i + 1) * p].fill(T::zero());
    }

    let mut h = linear(&patches, &params.patch_w.data, &params.patch_b.data, n, p, d);
    for i in 0..n {
        let row = &mut h[i * d..(i + 1) * d];
        if masked[i] {
            row.copy_from_slice(&params.mask_token.data);
        }
        for (v, &pe) in row.iter_mut().zip(&params.pos_embed.data[i * d..(i + 1) * d]) {
            *v += pe;
        }
    }
    check(&h, "embedding", None)?;

    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut layers = Vec::with_capacity(cfg.depth);
    for (l, blk) in params.blocks.iter().enumerate() {
        let (a, norm1) = layer_norm(&h, &blk.norm1_scale.data, &blk.norm1_shift.data, n, d, eps);
        let qkv = linear(&a, &blk.qkv_w.data, &blk.qkv_b.data, n, d, 3 * d);

        let mut probs = vec![T::zero(); heads * n * n];
        let mut attn = vec![T::zero(); n * d];
        for hd in 0..heads {
            let s = &mut probs[hd * n * n..(hd + 1) * n * n];
            let q = View::cols(&qkv, n, 3 * d, hd * dh, dh);
            let k = View::cols(&qkv, n, 3 * d, d + hd * dh, dh);
            gemm(scale, q, k.t(), T::zero(), ViewMut::new(s, n, n));
            softmax_rows(s, n, n);
            let v = View::cols(&qkv, n, 3 * d, 2 * d + hd * dh, dh);
            gemm(T::one(), View::new(s, n, n), v, T::zero(), ViewMut::cols(&mut attn, n, d, hd * dh, dh));
        }
        let mut branch = linear(&attn, &blk.proj_w.data, &blk.proj_b.data, n, d, d);
        let drop1 = match (&mut dropout_rng, drop_p > 0.0) {
            (Some(rng), true) => {
                let m = dropout_mask::<T>(n * d, drop_p, rng);
                branch.iter_mut().zip(&m).for_each(|(v, &k)| *v = *v * k);
                Some(m)
            }
            _ => None,
        };
        crate::tensor::add_assign(&mut h, &branch);

        let (b, norm2) = layer_norm(&h, &blk.norm2_scale.data, &blk.norm2_shift.data, n, d, eps);
        let u = linear(&b, &blk.fc1_w.data, &blk.fc1_b.data, n, d, hid);
        let g: Vec<T> = u.iter().map(|&x| gelu(x)).collect();
        let mut branch = linear(&g, &blk.fc2_w.data, &blk.fc2_b.data, n, hid, d);
        let drop2 = match (&mut dropout_rng, drop_p > 0.0) {
            (Some(rng), true) => {
                let m = dropout_mask::<T>(n * d, drop_p, rng);
                branch.iter_mut().zip(&m).for_each(|(v, &k)| *v = *v * k);
                Some(m)
            }
            _ => None,
        };
        crate::tensor::add_assign(&mut h, &branch);
        check(&h, "block", Some(l))?;

        layers.push(LayerCache { norm1, a, qkv, probs, attn, drop1, norm2, b, u, g, drop2 });
    }

    let (z, final_norm) = layer_norm(&h, &params.norm_scale.data, &params.norm_shift.data, n, d, eps);
    let out = linear(&z, &params.head_w.data, &params.head_b.data, n, d, p);
    check(&out, "head", None)?;
    let pixels_out = unpatchify(&out, cfg.image_side, cfg.patch_side);
    Ok((pixels_out, ForwardCache { patches, masked, layers, final_norm, z }))
}

/// Inference forward pass (no dropout).
pub fn forward(params: &ModelParams<f32>, composite: &Composite, mask: &PatchMask) -> Result<Reconstruction> {
    let side = params.config.image_side;
    let (out, _) = forward_train(params, composite.pixels().data(), mask, None)?;
    Ok(Reconstruction { pixels: Image::new(side, side, out)? })
}

/// Accumulates parameter gradients into `grads` given the loss gradient
/// with respect to the image-layout output.
pub fn backward<T: Scalar>(params: &ModelParams<T>, cache: &ForwardCache<T>, d_pixels: &[T], grads: &mut ModelParams<T>) {
    let cfg = &params.config;
    let (n, d, p, hid) = (cfg.n_patches(), cfg.embed_dim, cfg.patch_dim(), cfg.hidden_dim());
    let (heads, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let d_out = patchify(d_pixels, cfg.image_side, cfg.patch_side).expect("output layout");
    let dz = linear_backward(&cache.z, &params.head_w.data, &d_out, n, d, p, &mut grads.head_w.data, &mut grads.head_b.data, true)
        .unwrap();
    let mut dh_res = layer_norm_backward(
        &dz,
        &cache.final_norm,
        &params.norm_scale.data,
        n,
        d,
        &mut grads.norm_scale.data,
        &mut grads.norm_shift.data,
    );

    for l in (0..cfg.depth).rev() {
        let blk = &params.blocks[l];
        let c = &cache.layers[l];
        let gb = &mut grads.blocks[l];

        // MLP branch.
        let mut d_branch = dh_res.clone();
        if let Some(m) = &c.drop2 {
            d_branch.iter_mut().zip(m).for_each(|(v, &k)| *v = *v * k);
        }
        let dg = linear_backward(&c.g, &blk.fc2_w.data, &d_branch, n, hid, d, &mut gb.fc2_w.data, &mut gb.fc2_b.data, true)
            .unwrap();
        let du: Vec<T> = dg.iter().zip(&c.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
        let db = linear_backward(&c.b, &blk.fc1_w.data, &du, n, d, hid, &mut gb.fc1_w.data, &mut gb.fc1_b.data, true).unwrap();
        let dx = layer_norm_backward(&db, &c.norm2, &blk.norm2_scale.data, n, d, &mut gb.norm2_scale.data, &mut gb.norm2_shift.data);
        crate::tensor::add_assign(&mut dh_res, &dx);

        // Attention branch.
        let mut d_branch = dh_res.clone();
        if let Some(m) = &c.drop1 {
            d_branch.iter_mut().zip(m).for_each(|(v, &k)| *v = *v * k);
        }
        let d_attn =
            linear_backward(&c.attn, &blk.proj_w.data, &d_branch, n, d, d, &mut gb.proj_w.data, &mut gb.proj_b.data, true)
                .unwrap();
        let mut dqkv = vec![T::zero(); n * 3 * d];
        let mut dp = vec![T::zero(); n * n];
        for hd in 0..heads {
            let probs = &c.probs[hd * n * n..(hd + 1) * n * n];
            let d_o = View::cols(&d_attn, n, d, hd * dh, dh);
            let v = View::cols(&c.qkv, n, 3 * d, 2 * d + hd * dh, dh);
            gemm(T::one(), d_o, v.t(), T::zero(), ViewMut::new(&mut dp, n, n));
            gemm(T::one(), View::new(probs, n, n).t(), d_o, T::zero(), ViewMut::cols(&mut dqkv, n, 3 * d, 2 * d + hd * dh, dh));
            // Softmax backward, in place: dS = P ⊙ (dP − Σ_j dP·P).
            for r in 0..n {
                let pr = &probs[r * n..(r + 1) * n];
                let dr = &mut dp[r * n..(r + 1) * n];
                let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |a, (&x, &y)| a + x * y);
                for (g, &pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            let q = View::cols(&c.qkv, n, 3 * d, hd * dh, dh);
            let k = View::cols(&c.qkv, n, 3 * d, d + hd * dh, dh);
            gemm(scale, View::new(&dp, n, n), k, T::zero(), ViewMut::cols(&mut dqkv, n, 3 * d, hd * dh, dh));
            gemm(scale, View::new(&dp, n, n).t(), q, T::zero(), ViewMut::cols(&mut dqkv, n, 3 * d, d + hd * dh, dh));
        }
        let da = linear_backward(&c.a, &blk.qkv_w.data, &dqkv, n, d, 3 * d, &mut gb.qkv_w.data, &mut gb.qkv_b.data, true).unwrap();
        let dx = layer_norm_backward(&da, &c.norm1, &blk.norm1_scale.data, n, d, &mut gb.norm1_scale.data, &mut gb.norm1_shift.data);
        crate::tensor::add_assign(&mut dh_res, &dx);
    }

    // Embedding: positions see every token; masked rows route to the mask token.
    crate::tensor::add_assign(&mut grads.pos_embed.data, &dh_res);
    for i in (0..n).filter(|&i| cache.masked[i]) {
        let row = &mut dh_res[i * d..(i + 1) * d];
        crate::tensor::add_assign(&mut grads.mask_token.data, row);
        row.fill(T::zero());
    }
    linear_backward(&cache.patches, &params.patch_w.data, &dh_res, n, p, d, &mut grads.patch_w.data, &mut grads.patch_b.data, false);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{sample_mask, PatchGrid};
    use crate::vit::init_params;

    #[test]
    fn patchify_constant_and_hot_pixel() {
        let c = vec![0.25f32; 224 * 224];
        let p = patchify(&c, 224, 16).unwrap();
        assert_eq!(p.len(), 196 * 256);
        assert!(p.iter().all(|&v| v == 0.25));

        let mut hot = vec![0.0f32; 224 * 224];
        hot[0] = 1.0;
        let p = patchify(&hot, 224, 16).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(p.iter().filter(|&&v| v != 0.0).count(), 1);

        assert!(patchify(&vec![0.0f32; 30 * 30], 30, 16).is_err());
    }

    #[test]
    fn patchify_round_trip() {
        let img: Vec<f32> = (0..224 * 224).map(|i| (i % 977) as f32).collect();
        let p = patchify(&img, 224, 16).unwrap();
        assert_eq!(unpatchify(&p, 224, 16), img);
        // Pixel (17, 3) lives in patch 14 (row 1, col 0) at offset 1*16 + 3.
        assert_eq!(p[14 * 256 + 16 + 3], img[17 * 224 + 3]);
    }

    #[test]
    fn zero_head_outputs_bias() {
        let cfg = ModelConfig::toy(1, 16, 2);
        let mut params = init_params(&cfg, 1).unwrap();
        params.head_w.data.fill(0.0);
        params.head_b.data.fill(0.3);
        let pixels = crate::image::Image::filled(224, 224, 0.5);
        let comp = Composite::new(pixels, "x").unwrap();
        let mask = sample_mask(&PatchGrid::default(), 0.5, 1).unwrap();
        let out = forward(&params, &comp, &mask).unwrap();
        assert_eq!(out.pixels.dims(), (224, 224));
        assert!(out.pixels.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn masked_patch_content_is_ignored() {
        let cfg = ModelConfig::toy(2, 16, 2);
        let params = init_params(&cfg, 2).unwrap();
        let mask = sample_mask(&PatchGrid::default(), 0.6, 5).unwrap();
        let a = crate::image::Image::from_fn(224, 224, |y, x| ((y * 31 + x * 7) % 101) as f32 / 100.0);
        let mut b = a.clone();
        for y in 0..224 {
            for x in 0..224 {
                if mask.is_masked((y / 16) * 14 + x / 16) {
                    b.set(y, x, 1.0 - a.get(y, x));
                }
            }
        }
        let ra = forward(&params, &Composite::new(a, "a").unwrap(), &mask).unwrap();
        let rb = forward(&params, &Composite::new(b, "b").unwrap(), &mask).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn depth_zero_permutation_covariance() {
        let cfg = ModelConfig::toy(0, 16, 2);
        let mut params = init_params(&cfg, 3).unwrap();
        params.pos_embed.data.fill(0.0);
        let img: Vec<f32> = (0..224 * 224).map(|i| ((i * 13) % 251) as f32 / 250.0).collect();
        let patches = patchify(&img, 224, 16).unwrap();
        let perm: Vec<usize> = (0..196).map(|i| (i * 37 + 11) % 196).collect();
        let mut permuted = vec![0.0f32; patches.len()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 256..(dst + 1) * 256].copy_from_slice(&patches[src * 256..(src + 1) * 256]);
        }
        let none = PatchMask::none(&PatchGrid::default());
        let (out_a, _) = forward_train(&params, &img, &none, None).unwrap();
        let (out_b, _) = forward_train(&params, &unpatchify(&permuted, 224, 16), &none, None).unwrap();
        let pa = patchify(&out_a, 224, 16).unwrap();
        let pb = patchify(&out_b, 224, 16).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(&pb[dst * 256..(dst + 1) * 256], &pa[src * 256..(src + 1) * 256]);
        }
    }

    #[test]
    fn deep_random_forward_stays_finite() {
        let cfg = ModelConfig::toy(12, 32, 4);
        let params = init_params(&cfg, 9).unwrap();
        let img: Vec<f32> = (0..224 * 224).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect();
        let mask = sample_mask(&PatchGrid::default(), 0.3, 2).unwrap();
        let (out, _) = forward_train(&params, &img, &mask, None).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn non_finite_input_is_reported() {
        let cfg = ModelConfig::toy(1, 16, 2);
        let params = init_params(&cfg, 1).unwrap();
        let mut img = vec![0.5f32; 224 * 224];
        img[5] = f32::NAN;
        let none = PatchMask::none(&PatchGrid::default());
        assert!(matches!(forward_train(&params, &img, &none, None), Err(Error::Numerical { .. })));
    }
}
