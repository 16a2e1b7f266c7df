use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Pixel-patch tokens standing in for a latent image.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage<T> {
    /// `[grid_h · grid_w, patch · patch · channels]`, row-major patches.
    pub tokens: Tensor<T>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub channels: usize,
}

impl<T: Scalar> LatentImage<T> {
    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Same geometry, new token values.
    pub fn with_tokens(&self, tokens: Tensor<T>) -> Result<Self> {
        if tokens.shape() != self.tokens.shape() {
            return Err(Error::shape("latent", self.tokens.shape(), tokens.shape()));
        }
        Ok(Self {
            tokens,
            ..self.clone()
        })
    }
}

pub fn patchify<T: Scalar>(img: &Image, patch: usize) -> Result<LatentImage<T>> {
    if patch == 0 || img.width % patch != 0 || img.height % patch != 0 {
        return Err(Error::shape("patchify", &[img.height, img.width], &[patch, patch]));
    }
    let (gh, gw) = (img.height / patch, img.width / patch);
    let td = patch * patch * 3;
    let mut data = Vec::with_capacity(gh * gw * td);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    let p = img.get(gx * patch + px, gy * patch + py);
                    data.extend(p.iter().map(|&v| T::c(v)));
                }
            }
        }
    }
    Ok(LatentImage {
        tokens: Tensor::new(&[gh * gw, td], data)?,
        grid_h: gh,
        grid_w: gw,
        patch,
        channels: 3,
    })
}

pub fn unpatchify<T: Scalar>(lat: &LatentImage<T>) -> Result<Image> {
    let p = lat.patch;
    if lat.channels != 3 || lat.tokens.shape() != [lat.num_tokens(), lat.token_dim()] {
        return Err(Error::shape("unpatchify", lat.tokens.shape(), &[lat.num_tokens(), lat.token_dim()]));
    }
    let mut img = Image::black(lat.grid_w * p, lat.grid_h * p);
    let d = lat.tokens.data();
    let mut o = 0;
    for gy in 0..lat.grid_h {
        for gx in 0..lat.grid_w {
            for py in 0..p {
                for px in 0..p {
                    img.set(gx * p + px, gy * p + py, [d[o].as_f64(), d[o + 1].as_f64(), d[o + 2].as_f64()]);
                    o += 3;
                }
            }
        }
    }
    Ok(img)
}

/// Patch tokens in model space: pixels in `[0, 1]` map to `[-1, 1]`.
pub fn image_to_latent<T: Scalar>(img: &Image, patch: usize) -> Result<LatentImage<T>> {
    let mut lat = patchify::<T>(img, patch)?;
    let two = T::c(2.0);
    lat.tokens = lat.tokens.map(|v| two * v - T::one());
    Ok(lat)
}

/// Inverse of [`image_to_latent`] (values outside `[0, 1]` are kept).
pub fn latent_to_image<T: Scalar>(lat: &LatentImage<T>) -> Result<Image> {
    let half = T::c(0.5);
    let px = lat.with_tokens(lat.tokens.map(|v| (v + T::one()) * half))?;
    unpatchify(&px)
}
