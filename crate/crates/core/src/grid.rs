//! The 2×2 prompt composite.
//!
//! ```text
//! +----------------+----------------+
//! | support image  | support mask   |
//! +----------------+----------------+
//! | query image    | query target   |
//! +----------------+----------------+
//! ```
//!
//! Each quadrant is 112×112, giving a 224×224 canvas that divides evenly
//! into the 14×14 grid of 16-pixel patches.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub const QUADRANT_SIDE: usize = 112;
pub const COMPOSITE_SIDE: usize = 2 * QUADRANT_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Quadrant {
    SupportImage,
    SupportMask,
    QueryImage,
    QueryTarget,
}

/// Pixel rectangle `(top, left, height, width)`.
pub type Rect = (usize, usize, usize, usize);

impl Quadrant {
    pub const ALL: [Quadrant; 4] =
        [Quadrant::SupportImage, Quadrant::SupportMask, Quadrant::QueryImage, Quadrant::QueryTarget];

    /// (row, column) of this quadrant in the 2×2 layout.
    pub fn cell(self) -> (usize, usize) {
        match self {
            Quadrant::SupportImage => (0, 0),
            Quadrant::SupportMask => (0, 1),
            Quadrant::QueryImage => (1, 0),
            Quadrant::QueryTarget => (1, 1),
        }
    }

    pub fn rect(self) -> Rect {
        let (r, c) = self.cell();
        (r * QUADRANT_SIDE, c * QUADRANT_SIDE, QUADRANT_SIDE, QUADRANT_SIDE)
    }

    pub fn contains(self, y: usize, x: usize) -> bool {
        let (top, left, h, w) = self.rect();
        (top..top + h).contains(&y) && (left..left + w).contains(&x)
    }
}

/// A 224×224 canvas in [0, 1] plus the id of the pair it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pixels: Image,
    pub pair_id: String,
}

impl Composite {
    pub fn new(pixels: Image, pair_id: impl Into<String>) -> Result<Self> {
        if pixels.dims() != (COMPOSITE_SIDE, COMPOSITE_SIDE) {
            return Err(Error::InvalidDimension(format!(
                "composite must be {COMPOSITE_SIDE}x{COMPOSITE_SIDE}, got {:?}",
                pixels.dims()
            )));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidDimension("composite pixels must lie in [0, 1]".into()));
        }
        Ok(Composite { pixels, pair_id: pair_id.into() })
    }

    pub fn pixels(&self) -> &Image {
        &self.pixels
    }

    pub fn into_pixels(self) -> Image {
        self.pixels
    }
}

/// Foreground to 1.0, background to 0.0.
pub fn render_mask_image(mask: &Mask) -> Image {
    Image::from_fn(mask.height(), mask.width(), |y, x| if mask.get(y, x) { 1.0 } else { 0.0 })
}

/// Bilinear resize with half-pixel centres (`align_corners = false`),
/// clamped to [0, 1].
pub fn resize_image(image: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimension(format!("resize target {height}x{width}")));
    }
    if image.dims() == (height, width) {
        return Ok(image.clone());
    }
    let (src_h, src_w) = image.dims();
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let rows = axis(height, src_h);
    let cols = axis(width, src_w);
    Ok(Image::from_fn(height, width, |y, x| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = image.get(y0, x0) * (1.0 - fx) + image.get(y0, x1) * fx;
        let bottom = image.get(y1, x0) * (1.0 - fx) + image.get(y1, x1) * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
    }))
}

/// Resizes a mask through its rendered image and re-thresholds at 0.5.
pub fn resize_mask(mask: &Mask, height: usize, width: usize) -> Result<Mask> {
    if mask.dims() == (height, width) {
        return Ok(mask.clone());
    }
    Ok(resize_image(&render_mask_image(mask), height, width)?.threshold(0.5))
}

fn to_quadrant(image: &Image) -> Result<Image> {
    let out = resize_image(image, QUADRANT_SIDE, QUADRANT_SIDE)?;
    if out.dims() != (QUADRANT_SIDE, QUADRANT_SIDE) {
        return Err(Error::InvalidDimension(format!("quadrant came out {:?}", out.dims())));
    }
    Ok(out)
}

/// Tiles four 112×112 images in `Quadrant::ALL` order.
pub fn compose_quadrants(quadrants: [&Image; 4], pair_id: &str) -> Result<Composite> {
    for q in &quadrants {
        if q.dims() != (QUADRANT_SIDE, QUADRANT_SIDE) {
            return Err(Error::InvalidDimension(format!("quadrant must be 112x112, got {:?}", q.dims())));
        }
    }
    let mut canvas = Image::filled(COMPOSITE_SIDE, COMPOSITE_SIDE, 0.0);
    for (q, src) in Quadrant::ALL.into_iter().zip(quadrants) {
        let (top, left, h, w) = q.rect();
        for y in 0..h {
            let row = &src.data()[y * w..(y + 1) * w];
            let start = (top + y) * COMPOSITE_SIDE + left;
            canvas.data_mut()[start..start + w].copy_from_slice(row);
        }
    }
    Composite::new(canvas, pair_id)
}

/// Full training composite; it is both the masking substrate and the
/// reconstruction target.
pub fn compose_training_composite(
    support_image: &Image,
    support_mask: &Mask,
    query_image: &Image,
    query_mask: &Mask,
    pair_id: &str,
) -> Result<Composite> {
    let tl = to_quadrant(support_image)?;
    let tr = render_mask_image(&resize_mask(support_mask, QUADRANT_SIDE, QUADRANT_SIDE)?);
    let bl = to_quadrant(query_image)?;
    let br = render_mask_image(&resize_mask(query_mask, QUADRANT_SIDE, QUADRANT_SIDE)?);
    compose_quadrants([&tl, &tr, &bl, &br], pair_id)
}

/// Prompt composite with the query-target quadrant left at 0.0.
pub fn compose_inference_composite(
    support_image: &Image,
    support_mask: &Mask,
    query_image: &Image,
    pair_id: &str,
) -> Result<Composite> {
    compose_inference_composite_with_fill(support_image, support_mask, query_image, pair_id, 0.0)
}

pub(crate) fn compose_inference_composite_with_fill(
    support_image: &Image,
    support_mask: &Mask,
    query_image: &Image,
    pair_id: &str,
    fill: f32,
) -> Result<Composite> {
    let tl = to_quadrant(support_image)?;
    let tr = render_mask_image(&resize_mask(support_mask, QUADRANT_SIDE, QUADRANT_SIDE)?);
    let bl = to_quadrant(query_image)?;
    let br = Image::filled(QUADRANT_SIDE, QUADRANT_SIDE, fill);
    compose_quadrants([&tl, &tr, &bl, &br], pair_id)
}

pub fn extract_quadrant(composite: &Composite, q: Quadrant) -> Image {
    let (top, left, h, w) = q.rect();
    let px = composite.pixels();
    Image::from_fn(h, w, |y, x| px.get(top + y, left + x))
}

/// Single-image ablation input: the query alone, stretched to the full canvas.
pub fn single_image_input(image: &Image, pair_id: &str) -> Result<Composite> {
    Composite::new(resize_image(image, COMPOSITE_SIDE, COMPOSITE_SIDE)?, pair_id)
}

/// Single-image ablation target: the rendered mask at canvas resolution.
pub fn single_image_target(mask: &Mask, pair_id: &str) -> Result<Composite> {
    Composite::new(render_mask_image(&resize_mask(mask, COMPOSITE_SIDE, COMPOSITE_SIDE)?), pair_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f32) -> Image {
        Image::filled(QUADRANT_SIDE, QUADRANT_SIDE, v)
    }

    #[test]
    fn quadrants_tile_canvas() {
        let mut hits = vec![0u8; COMPOSITE_SIDE * COMPOSITE_SIDE];
        for q in Quadrant::ALL {
            let (top, left, h, w) = q.rect();
            for y in top..top + h {
                for x in left..left + w {
                    hits[y * COMPOSITE_SIDE + x] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn mask_rendering() {
        assert!(render_mask_image(&Mask::empty(4, 4)).data().iter().all(|&v| v == 0.0));
        let full = Mask::from_fn(3, 5, |_, _| true);
        assert!(render_mask_image(&full).data().iter().all(|&v| v == 1.0));
        let checker = Mask::from_fn(4, 4, |y, x| (y + x) % 2 == 0);
        let img = render_mask_image(&checker);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(img.get(y, x), if (y + x) % 2 == 0 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = Image::filled(7, 9, 0.5);
        let r = resize_image(&c, 13, 4).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        let img = Image::from_fn(6, 6, |y, x| (y * 6 + x) as f32 / 36.0);
        assert_eq!(resize_image(&img, 6, 6).unwrap(), img);
        assert!(resize_image(&img, 0, 3).is_err());
    }

    #[test]
    fn resize_two_by_two_to_two_by_four() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = resize_image(&img, 2, 4).unwrap();
        // Half-pixel sampling positions -0.25, 0.25, 0.75, 1.25 clamp to 0, .25, .75, 1.
        let expected = [0.0, 0.25, 0.75, 1.0];
        for y in 0..2 {
            for (x, e) in expected.iter().enumerate() {
                assert!((r.get(y, x) - e).abs() < 1e-7);
            }
            for x in 1..4 {
                assert!(r.get(y, x) >= r.get(y, x - 1));
            }
        }
    }

    #[test]
    fn composite_quadrant_means() {
        let imgs = [constant(0.1), constant(0.2), constant(0.3), constant(0.4)];
        let c = compose_quadrants([&imgs[0], &imgs[1], &imgs[2], &imgs[3]], "p").unwrap();
        assert_eq!(c.pixels().dims(), (COMPOSITE_SIDE, COMPOSITE_SIDE));
        for (q, img) in Quadrant::ALL.into_iter().zip(&imgs) {
            assert_eq!(&extract_quadrant(&c, q), img);
        }
    }

    #[test]
    fn training_composite_round_trip() {
        let si = Image::from_fn(112, 112, |y, x| ((y * 3 + x) % 17) as f32 / 16.0);
        let sm = Mask::from_fn(112, 112, |y, _| y > 50);
        let qi = Image::from_fn(112, 112, |y, x| ((y + 5 * x) % 11) as f32 / 10.0);
        let qm = Mask::from_fn(112, 112, |_, x| x < 20);
        let c = compose_training_composite(&si, &sm, &qi, &qm, "p").unwrap();
        assert_eq!(extract_quadrant(&c, Quadrant::SupportImage), si);
        assert_eq!(extract_quadrant(&c, Quadrant::SupportMask), render_mask_image(&sm));
        assert_eq!(extract_quadrant(&c, Quadrant::QueryImage), qi);
        assert_eq!(extract_quadrant(&c, Quadrant::QueryTarget), render_mask_image(&qm));

        let parts: Vec<Image> = Quadrant::ALL.iter().map(|&q| extract_quadrant(&c, q)).collect();
        let again = compose_quadrants([&parts[0], &parts[1], &parts[2], &parts[3]], "p").unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn inference_composite_blank_target() {
        let si = Image::from_fn(64, 64, |y, x| ((y + x) % 7) as f32 / 6.0);
        let sm = Mask::from_fn(64, 64, |y, _| y % 3 == 0);
        let qi = Image::filled(200, 150, 0.3);
        let c = compose_inference_composite(&si, &sm, &qi, "p").unwrap();
        assert_eq!(c.pixels().dims(), (224, 224));
        assert!(extract_quadrant(&c, Quadrant::QueryTarget).data().iter().all(|&v| v == 0.0));
        assert_eq!(extract_quadrant(&c, Quadrant::SupportImage), resize_image(&si, 112, 112).unwrap());
        assert_eq!(c, compose_inference_composite(&si, &sm, &qi, "p").unwrap());
        let tr = extract_quadrant(&c, Quadrant::SupportMask);
        assert!(tr.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn composite_rejects_out_of_range() {
        assert!(Composite::new(Image::filled(224, 224, 1.5), "x").is_err());
        assert!(Composite::new(Image::filled(224, 200, 0.5), "x").is_err());
    }
}
