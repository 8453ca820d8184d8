//! Images are `h × w × 3` tensors in `[0, 1]`. Latents are their patches
//! mapped affinely to `[-1, 1]`; there is no learned autoencoder.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_dims(image: &Tensor, p: usize) -> Result<(usize, usize)> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        other => return Err(Error::shape("patchify", format!("expected h×w×3 image, got {other:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape("patchify", format!("{h}×{w} image not divisible by patch {p}")));
    }
    Ok((h, w))
}

/// Row-major grid of `p × p` patches, each flattened as `(row, col, channel)`.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w) = image_dims(image, p)?;
    let (gh, gw) = (h / p, w / p);
    let width = 3 * p * p;
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let start = ((gy * p + py) * w + gx * p) * 3;
                out.extend_from_slice(&src[start..start + 3 * p]);
            }
        }
    }
    Tensor::new(vec![gh * gw, width], out)
}

/// Inverse of [`patchify`] for an `h × w` image.
pub fn unpatchify(tokens: &Tensor, p: usize, h: usize, w: usize) -> Result<Tensor> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::shape("unpatchify", format!("{h}×{w} image not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let (n, width) = tokens.dims2()?;
    if n != gh * gw || width != 3 * p * p {
        return Err(Error::shape("unpatchify", format!("{n}×{width} tokens for {h}×{w} image, patch {p}")));
    }
    let mut out = vec![0.0; h * w * 3];
    for gy in 0..gh {
        for gx in 0..gw {
            let tok = tokens.row(gy * gw + gx);
            for py in 0..p {
                let start = ((gy * p + py) * w + gx * p) * 3;
                out[start..start + 3 * p].copy_from_slice(&tok[py * 3 * p..(py + 1) * 3 * p]);
            }
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

/// Image in `[0, 1]` to latent patches in `[-1, 1]`.
pub fn encode_image(image: &Tensor, p: usize) -> Result<Tensor> {
    let mut t = patchify(image, p)?;
    t.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    Ok(t)
}

/// Latent patches back to an image, clamped to `[0, 1]`.
pub fn decode_latent(latent: &Tensor, p: usize, size: usize) -> Result<Tensor> {
    let mut img = unpatchify(latent, p, size, size)?;
    img.data_mut().iter_mut().for_each(|v| *v = ((*v + 1.0) * 0.5).clamp(0.0, 1.0));
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn four_by_four_gives_four_tokens() {
        let img = Tensor::from_fn(&[4, 4, 3], |i| i as f32);
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.shape(), &[4, 12]);
        // first patch: pixels (0,0),(0,1),(1,0),(1,1)
        assert_eq!(t.row(0), &[0., 1., 2., 3., 4., 5., 12., 13., 14., 15., 16., 17.]);
    }

    #[test]
    fn round_trip_and_constant_image() {
        let mut rng = Rng::new(1);
        let img = Tensor::from_fn(&[8, 12, 3], |_| rng.uniform());
        assert_eq!(unpatchify(&patchify(&img, 4).unwrap(), 4, 8, 12).unwrap(), img);
        let flat = patchify(&Tensor::full(&[6, 6, 3], 0.25), 3).unwrap();
        assert!((1..flat.rows()).all(|r| flat.row(r) == flat.row(0)));
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        assert!(patchify(&Tensor::zeros(&[5, 4, 3]), 2).is_err());
        assert!(patchify(&Tensor::zeros(&[4, 4]), 2).is_err());
        assert!(unpatchify(&Tensor::zeros(&[4, 12]), 2, 4, 6).is_err());
    }
}
