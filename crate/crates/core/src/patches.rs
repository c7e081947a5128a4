//! Patch grids and indicator-based patch extraction.
//!
//! Images are `H×W×C` row-major. Patch `n` of the grid sits at row
//! `n / grid_w`, column `n % grid_w`, with pixel origin
//! `(row·stride_h, col·stride_w)`. Extraction computes `X̃ = Yᵀ P`, where
//! `P` stacks all `N` patches; [`extract_scan`] does the same contraction
//! without materializing `P`.

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGeometry {
    pub fn new(
        (image_h, image_w, channels): (usize, usize, usize),
        (patch_h, patch_w): (usize, usize),
        (stride_h, stride_w): (usize, usize),
    ) -> Result<Self> {
        if stride_h == 0 || stride_w == 0 {
            return arg_err("patch stride must be positive");
        }
        if patch_h == 0 || patch_w == 0 || channels == 0 {
            return arg_err("patch and channel sizes must be positive");
        }
        if patch_h > image_h || patch_w > image_w {
            return arg_err(format!(
                "patch {patch_h}×{patch_w} larger than image {image_h}×{image_w}"
            ));
        }
        Ok(Self {
            image_h,
            image_w,
            channels,
            patch_h,
            patch_w,
            stride_h,
            stride_w,
            grid_h: (image_h - patch_h) / stride_h + 1,
            grid_w: (image_w - patch_w) / stride_w + 1,
        })
    }

    /// Square patches with equal stride on a square image.
    pub fn square(image: usize, channels: usize, patch: usize, stride: usize) -> Result<Self> {
        Self::new((image, image, channels), (patch, patch), (stride, stride))
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w * self.channels
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        [self.patch_h, self.patch_w, self.channels]
    }

    /// Pixel origin `(y, x)` of patch `n`.
    pub fn origin(&self, n: usize) -> (usize, usize) {
        ((n / self.grid_w) * self.stride_h, (n % self.grid_w) * self.stride_w)
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        image.expect_shape(&[self.image_h, self.image_w, self.channels])
    }

    /// Calls `f(dst_offset_in_patch, src_offset_in_image, len)` for each
    /// contiguous row segment of patch `n`.
    #[inline]
    fn for_each_row(&self, n: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (oy, ox) = self.origin(n);
        let row_len = self.patch_w * self.channels;
        for py in 0..self.patch_h {
            let src = ((oy + py) * self.image_w + ox) * self.channels;
            f(py * row_len, src, row_len);
        }
    }
}

/// All `N` patches as an `N×P_h×P_w×C` tensor.
pub fn enumerate_patches(image: &Tensor, geom: &PatchGeometry) -> Result<Tensor> {
    geom.check_image(image)?;
    let plen = geom.patch_len();
    let mut data = vec![0.0f32; geom.num_patches() * plen];
    let img = image.data();
    for n in 0..geom.num_patches() {
        let dst = &mut data[n * plen..(n + 1) * plen];
        geom.for_each_row(n, |d, s, len| dst[d..d + len].copy_from_slice(&img[s..s + len]));
    }
    let [ph, pw, c] = geom.patch_shape();
    Tensor::new(vec![geom.num_patches(), ph, pw, c], data)
}

/// Patches at the given grid indices, by direct slicing.
pub fn slice_patches(image: &Tensor, indices: &[usize], geom: &PatchGeometry) -> Result<Tensor> {
    geom.check_image(image)?;
    let plen = geom.patch_len();
    let img = image.data();
    let mut data = vec![0.0f32; indices.len() * plen];
    for (k, &n) in indices.iter().enumerate() {
        if n >= geom.num_patches() {
            return arg_err(format!("patch index {n} outside grid of {}", geom.num_patches()));
        }
        let dst = &mut data[k * plen..(k + 1) * plen];
        geom.for_each_row(n, |d, s, len| dst[d..d + len].copy_from_slice(&img[s..s + len]));
    }
    let [ph, pw, c] = geom.patch_shape();
    Tensor::new(vec![indices.len(), ph, pw, c], data)
}

fn check_selector(y: &Tensor, n: usize) -> Result<usize> {
    let (rows, k) = y.dims2()?;
    if rows != n {
        return shape_err(format!("selector has {rows} rows, grid has {n} patches"));
    }
    if k == 0 {
        return shape_err("selector has no columns");
    }
    let d = y.data();
    for c in 0..k {
        if (0..rows).all(|i| d[i * k + c] == 0.0) {
            return arg_err(format!("selector column {c} is all zero"));
        }
    }
    Ok(k)
}

/// `out[k] = Σ_n Y[n,k] · P[n]` against precomputed patches.
pub fn extract_dense(all_patches: &Tensor, y: &Tensor) -> Result<Tensor> {
    if all_patches.rank() < 1 {
        return shape_err("patch tensor needs a leading axis");
    }
    let n = all_patches.shape()[0];
    let k = check_selector(y, n)?;
    let plen = if n == 0 { 0 } else { all_patches.numel() / n };
    let p = all_patches.data();
    let w = y.data();
    let mut out = vec![0.0f32; k * plen];
    for col in 0..k {
        let dst = &mut out[col * plen..(col + 1) * plen];
        for i in 0..n {
            let wt = w[i * k + col];
            if wt == 0.0 {
                continue;
            }
            for (o, &v) in dst.iter_mut().zip(&p[i * plen..(i + 1) * plen]) {
                *o += wt * v;
            }
        }
    }
    let mut shape = all_patches.shape().to_vec();
    shape[0] = k;
    Tensor::new(shape, out)
}

/// Same contraction as [`extract_dense`], reading each patch straight from
/// the image in ascending `n`.
pub fn extract_scan(image: &Tensor, y: &Tensor, geom: &PatchGeometry) -> Result<Tensor> {
    geom.check_image(image)?;
    let k = check_selector(y, geom.num_patches())?;
    let plen = geom.patch_len();
    let img = image.data();
    let w = y.data();
    let mut out = vec![0.0f32; k * plen];
    for col in 0..k {
        let dst = &mut out[col * plen..(col + 1) * plen];
        for n in 0..geom.num_patches() {
            let wt = w[n * k + col];
            if wt == 0.0 {
                continue;
            }
            geom.for_each_row(n, |d, s, len| {
                for (o, &v) in dst[d..d + len].iter_mut().zip(&img[s..s + len]) {
                    *o += wt * v;
                }
            });
        }
    }
    let [ph, pw, c] = geom.patch_shape();
    Tensor::new(vec![k, ph, pw, c], out)
}

/// Transpose of the extraction map. Returns `(∂L/∂Y, ∂L/∂image)` where
/// `∂L/∂Y[n,k] = ⟨grad_k, patch_n⟩`.
pub fn extraction_backward(
    grad_patches: &Tensor,
    image: &Tensor,
    y: &Tensor,
    geom: &PatchGeometry,
) -> Result<(Tensor, Tensor)> {
    geom.check_image(image)?;
    let n_patches = geom.num_patches();
    let (rows, k) = y.dims2()?;
    if rows != n_patches {
        return shape_err(format!("selector has {rows} rows, grid has {n_patches} patches"));
    }
    let [ph, pw, c] = geom.patch_shape();
    grad_patches.expect_shape(&[k, ph, pw, c])?;
    let plen = geom.patch_len();
    let img = image.data();
    let g = grad_patches.data();
    let w = y.data();
    let mut grad_y = vec![0.0f32; n_patches * k];
    let mut grad_img = vec![0.0f32; img.len()];
    for n in 0..n_patches {
        for col in 0..k {
            let gk = &g[col * plen..(col + 1) * plen];
            let mut dot = 0.0f64;
            let wt = w[n * k + col];
            geom.for_each_row(n, |d, s, len| {
                for ((&gv, &iv), gi) in gk[d..d + len]
                    .iter()
                    .zip(&img[s..s + len])
                    .zip(&mut grad_img[s..s + len])
                {
                    dot += gv as f64 * iv as f64;
                    *gi += wt * gv;
                }
            });
            grad_y[n * k + col] = dot as f32;
        }
    }
    Ok((
        Tensor::new(vec![n_patches, k], grad_y)?,
        Tensor::new(image.shape().to_vec(), grad_img)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_sample, RngStream};

    fn ramp(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::new(vec![h, w, c], (0..h * w * c).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn grid_arithmetic() {
        let g = PatchGeometry::square(64, 1, 8, 8).unwrap();
        assert_eq!((g.grid_h, g.grid_w, g.num_patches()), (8, 8, 64));
        let g = PatchGeometry::square(100, 3, 50, 25).unwrap();
        assert_eq!(g.num_patches(), 9);
        assert_eq!(g.origin(5), (25, 50));
        assert!(PatchGeometry::square(8, 1, 9, 1).is_err());
        assert!(PatchGeometry::square(8, 1, 4, 0).is_err());
    }

    #[test]
    fn enumeration_slices_the_image() {
        let g = PatchGeometry::new((6, 5, 2), (3, 2), (3, 1)).unwrap();
        let img = ramp(6, 5, 2);
        let all = enumerate_patches(&img, &g).unwrap();
        assert_eq!(all.shape(), &[g.num_patches(), 3, 2, 2]);
        for n in 0..g.num_patches() {
            let (oy, ox) = g.origin(n);
            for py in 0..3 {
                for px in 0..2 {
                    for ch in 0..2 {
                        assert_eq!(all.at(&[n, py, px, ch]), img.at(&[oy + py, ox + px, ch]));
                    }
                }
            }
        }
        let flat = enumerate_patches(&Tensor::full(&[64, 64, 1], 0.5), &PatchGeometry::square(64, 1, 8, 8).unwrap())
            .unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn half_weights_average_two_patches() {
        let g = PatchGeometry::square(4, 1, 2, 2).unwrap();
        let img = ramp(4, 4, 1);
        let y = Tensor::new(vec![4, 1], vec![0.5, 0.0, 0.5, 0.0]).unwrap();
        let out = extract_scan(&img, &y, &g).unwrap();
        let all = enumerate_patches(&img, &g).unwrap();
        for i in 0..4 {
            let avg = 0.5 * all.index_axis0(0).data()[i] + 0.5 * all.index_axis0(2).data()[i];
            assert_eq!(out.data()[i], avg);
        }
    }

    #[test]
    fn zero_column_rejected() {
        let g = PatchGeometry::square(4, 1, 2, 2).unwrap();
        let y = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(extract_scan(&ramp(4, 4, 1), &y, &g).is_err());
        assert!(extract_dense(&enumerate_patches(&ramp(4, 4, 1), &g).unwrap(), &y).is_err());
    }

    #[test]
    fn backward_on_disjoint_tiles_places_gradient() {
        let g = PatchGeometry::square(4, 1, 2, 2).unwrap();
        let img = ramp(4, 4, 1);
        let y = Tensor::new(vec![4, 1], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let grad = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (gy, gi) = extraction_backward(&grad, &img, &y, &g).unwrap();
        let all = enumerate_patches(&img, &g).unwrap();
        for n in 0..4 {
            let expected = all.index_axis0(n).dot(&grad.index_axis0(0)).unwrap();
            assert_eq!(gy.data()[n] as f64, expected);
        }
        let mut expected = vec![0.0; 16];
        expected[10] = 1.0;
        expected[11] = 2.0;
        expected[14] = 3.0;
        expected[15] = 4.0;
        assert_eq!(gi.data(), &expected[..]);
    }

    #[test]
    fn scan_matches_dense_on_overlapping_grid() {
        let g = PatchGeometry::new((9, 7, 2), (4, 3), (1, 2)).unwrap();
        let img = gaussian_sample(&mut RngStream::new(1), &[9, 7, 2]);
        let y = gaussian_sample(&mut RngStream::new(2), &[g.num_patches(), 3]).map(f32::abs);
        let dense = extract_dense(&enumerate_patches(&img, &g).unwrap(), &y).unwrap();
        let scan = extract_scan(&img, &y, &g).unwrap();
        assert!(dense.max_abs_diff(&scan) <= 1e-5);
    }
}
