//! Images and patch grids.
//!
//! Patch ordering is row-major over the grid; pixels inside a patch are
//! row-major with channels last. `unpatchify` is the exact inverse of
//! `patchify`, bit for bit.

use crate::error::{PacoError, Result};
use ndarray::{Array2, Array3};

/// An image as [height, width, channels] reals. Loaders produce values in
/// [0, 1]; decoder outputs may be unclamped.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let c = data.shape()[2];
        if c != 1 && c != 3 {
            return Err(PacoError::shape(format!("channels must be 1 or 3, got {c}")));
        }
        Ok(ImageTensor { data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(Array3::zeros((height, width, channels)))
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }
}

/// An image decomposed into K flattened patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// [K, patch_size^2 * channels]
    pub patches: Array2<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Flat [H, W, C] index of image pixel (y, x, c).
#[inline]
fn image_flat(y: usize, x: usize, c: usize, width: usize, channels: usize) -> usize {
    (y * width + x) * channels + c
}

/// For each flat patch-grid element, the flat image element it copies.
///
/// Entry `k` of the result is the [H, W, C]-flat index feeding element `k` of
/// the [K, P*P*C]-flat patch array. The map is a bijection, which is what
/// makes patchify/unpatchify exact inverses.
pub fn patchify_perm(
    height: usize,
    width: usize,
    channels: usize,
    patch_size: usize,
) -> Vec<usize> {
    let gr = height / patch_size;
    let gc = width / patch_size;
    let plen = patch_size * patch_size * channels;
    let mut perm = vec![0usize; gr * gc * plen];
    for row in 0..gr {
        for col in 0..gc {
            let k = row * gc + col;
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for c in 0..channels {
                        let within = (py * patch_size + px) * channels + c;
                        let y = row * patch_size + py;
                        let x = col * patch_size + px;
                        perm[k * plen + within] = image_flat(y, x, c, width, channels);
                    }
                }
            }
        }
    }
    perm
}

/// Inverse of `patchify_perm`: for each flat image element, the flat
/// patch-grid element it copies.
pub fn unpatchify_perm(
    height: usize,
    width: usize,
    channels: usize,
    patch_size: usize,
) -> Vec<usize> {
    let fwd = patchify_perm(height, width, channels, patch_size);
    let mut inv = vec![0usize; fwd.len()];
    for (patch_idx, &img_idx) in fwd.iter().enumerate() {
        inv[img_idx] = patch_idx;
    }
    inv
}

/// Split an image into K flattened patches.
pub fn patchify(image: &ImageTensor, patch_size: usize) -> Result<PatchGrid> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(PacoError::shape(format!(
            "image {h}x{w} not divisible by patch_size {patch_size}"
        )));
    }
    let gr = h / patch_size;
    let gc = w / patch_size;
    let plen = patch_size * patch_size * c;
    let perm = patchify_perm(h, w, c, patch_size);
    let src = image.data.as_slice().expect("contiguous image");
    let mut out = Vec::with_capacity(perm.len());
    for &i in &perm {
        out.push(src[i]);
    }
    Ok(PatchGrid {
        patches: Array2::from_shape_vec((gr * gc, plen), out).expect("patch shape"),
        grid_rows: gr,
        grid_cols: gc,
        patch_size,
        channels: c,
    })
}

/// Reassemble an image from its patch grid. Exact inverse of `patchify`.
pub fn unpatchify(grid: &PatchGrid) -> Result<ImageTensor> {
    let k = grid.patches.shape()[0];
    if k != grid.grid_rows * grid.grid_cols {
        return Err(PacoError::shape(format!(
            "grid has {k} patches but {}x{} layout",
            grid.grid_rows, grid.grid_cols
        )));
    }
    if grid.patches.shape()[1] != grid.patch_len() {
        return Err(PacoError::shape(format!(
            "patch length {} does not match patch_size {} x channels {}",
            grid.patches.shape()[1],
            grid.patch_size,
            grid.channels
        )));
    }
    let h = grid.grid_rows * grid.patch_size;
    let w = grid.grid_cols * grid.patch_size;
    let perm = unpatchify_perm(h, w, grid.channels, grid.patch_size);
    let src = grid.patches.as_slice().expect("contiguous patches");
    let mut out = Vec::with_capacity(perm.len());
    for &i in &perm {
        out.push(src[i]);
    }
    ImageTensor::new(Array3::from_shape_vec((h, w, grid.channels), out).expect("image shape"))
}

/// Reshape flat [K, P*P*C] patch rows into an image without going through
/// `PatchGrid` (used for decoded pixels).
pub fn patches_to_image(
    patches: &Array2<f64>,
    grid_rows: usize,
    grid_cols: usize,
    patch_size: usize,
    channels: usize,
) -> Result<ImageTensor> {
    unpatchify(&PatchGrid {
        patches: patches.clone(),
        grid_rows,
        grid_cols,
        patch_size,
        channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn ramp_image(h: usize, w: usize, c: usize) -> ImageTensor {
        let data = Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            (y * w * c + x * c + ch) as f64
        });
        ImageTensor::new(data).unwrap()
    }

    #[test]
    fn four_by_four_block_layout() {
        // 4x4 single-channel image with pixels 0..15 row-major, P=2.
        let img = ramp_image(4, 4, 1);
        let grid = patchify(&img, 2).unwrap();
        assert_eq!(grid.num_patches(), 4);
        let p0: Vec<f64> = grid.patches.row(0).to_vec();
        let p3: Vec<f64> = grid.patches.row(3).to_vec();
        assert_eq!(p0, vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p3, vec![10.0, 11.0, 14.0, 15.0]);
        let back = unpatchify(&grid).unwrap();
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn vit_b16_patch_count() {
        // 224x224x3 with P=16 gives 196 patches of length 768.
        let img = ImageTensor::zeros(224, 224, 3).unwrap();
        let grid = patchify(&img, 16).unwrap();
        assert_eq!(grid.num_patches(), 196);
        assert_eq!(grid.patch_len(), 768);
    }

    #[test]
    fn zero_grid_gives_zero_image() {
        let grid = PatchGrid {
            patches: Array2::zeros((4, 12)),
            grid_rows: 2,
            grid_cols: 2,
            patch_size: 2,
            channels: 3,
        };
        let img = unpatchify(&grid).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
        assert_eq!((img.height(), img.width(), img.channels()), (4, 4, 3));
    }

    #[test]
    fn indivisible_image_rejected() {
        let img = ImageTensor::zeros(6, 6, 1).unwrap();
        assert!(patchify(&img, 4).is_err());
    }

    #[test]
    fn inconsistent_grid_rejected() {
        let grid = PatchGrid {
            patches: Array2::zeros((3, 4)),
            grid_rows: 2,
            grid_cols: 2,
            patch_size: 2,
            channels: 1,
        };
        assert!(unpatchify(&grid).is_err());
    }
}
