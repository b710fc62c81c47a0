//! Gaussian smoothness regularizer on the density grid and its exact adjoint.
//!
//! The loss is `mean((G v - v)^2)` with `G` a separable gaussian blur using
//! replicate padding. By default it is applied to each component of the
//! finite-difference gradient of the raw density and summed.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::renderer::FieldGrad;
use crate::voxel_field::VoxelField;

/// Which grid the smoothness loss acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothTarget {
    /// The three components of the raw-density gradient field.
    GradientField,
    /// The raw density itself.
    Density,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothConfig {
    pub k_g: usize,
    pub sigma_g: f64,
    pub lambda: f64,
    pub target: SmoothTarget,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        SmoothConfig { k_g: 3, sigma_g: 1.0, lambda: 1e-3, target: SmoothTarget::GradientField }
    }
}

impl SmoothConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_g < 3 || self.k_g % 2 == 0 {
            return invalid(format!("kernel size must be odd and >= 3, got {}", self.k_g));
        }
        if !(self.sigma_g > 0.0) {
            return invalid("kernel sigma must be positive");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return invalid("smoothness lambda must be finite and >= 0");
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<Vec<f64>> {
        gaussian_kernel(self.k_g, self.sigma_g)
    }
}

/// Normalized 1D gaussian taps at integer offsets `-k/2..=k/2`.
pub fn gaussian_kernel(k_g: usize, sigma_g: f64) -> Result<Vec<f64>> {
    if k_g == 0 || k_g % 2 == 0 {
        return invalid(format!("kernel size must be odd, got {k_g}"));
    }
    if !(sigma_g > 0.0) {
        return invalid("kernel sigma must be positive");
    }
    let r = (k_g / 2) as f64;
    let taps: Vec<f64> = (0..k_g).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma_g * sigma_g)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

fn check_grid(values: &[f64], dims: [usize; 3], min_side: usize) -> Result<()> {
    if values.len() != dims[0] * dims[1] * dims[2] {
        return invalid(format!("grid has {} values, dims {:?}", values.len(), dims));
    }
    if dims.iter().any(|&d| d < min_side) {
        return invalid(format!("grid {:?} is smaller than {} per axis", dims, min_side));
    }
    Ok(())
}

fn strides(dims: [usize; 3]) -> [usize; 3] {
    [1, dims[0], dims[0] * dims[1]]
}

/// One 1D pass along `axis`, or its transpose. Works on contiguous slabs of
/// `stride` values so the strided axes stay cache friendly.
fn pass(values: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64], transpose: bool) -> Vec<f64> {
    let n = dims[axis];
    let inner = strides(dims)[axis];
    let r = kernel.len() / 2;
    let mut out = vec![0.0; values.len()];
    for (src, dst) in values.chunks_exact(n * inner).zip(out.chunks_exact_mut(n * inner)) {
        if inner == 1 && n > 4 * r {
            for p in r..n - r {
                let window = &src[p - r..=p + r];
                dst[p] = if transpose {
                    kernel.iter().zip(window.iter().rev()).map(|(w, x)| w * x).sum()
                } else {
                    kernel.iter().zip(window).map(|(w, x)| w * x).sum()
                };
            }
            for p in (0..2 * r).chain(n - 2 * r..n) {
                for (k, &w) in kernel.iter().enumerate() {
                    let q = (p + k).saturating_sub(r).min(n - 1);
                    let (from, to) = if transpose { (p, q) } else { (q, p) };
                    if to < r || to >= n - r {
                        dst[to] += w * src[from];
                    }
                }
            }
            continue;
        }
        for p in 0..n {
            for (k, &w) in kernel.iter().enumerate() {
                let q = (p + k).saturating_sub(r).min(n - 1);
                let (from, to) = if transpose { (p, q) } else { (q, p) };
                let a = &src[from * inner..(from + 1) * inner];
                let b = &mut dst[to * inner..(to + 1) * inner];
                for (y, x) in b.iter_mut().zip(a) {
                    *y += w * x;
                }
            }
        }
    }
    out
}

/// Separable 3D convolution with replicate padding.
pub fn conv3d(values: &[f64], dims: [usize; 3], kernel: &[f64]) -> Result<Vec<f64>> {
    check_grid(values, dims, kernel.len())?;
    let mut v = pass(values, dims, 0, kernel, false);
    v = pass(&v, dims, 1, kernel, false);
    Ok(pass(&v, dims, 2, kernel, false))
}

/// Adjoint of [`conv3d`].
pub fn conv3d_transpose(values: &[f64], dims: [usize; 3], kernel: &[f64]) -> Result<Vec<f64>> {
    check_grid(values, dims, kernel.len())?;
    let mut v = pass(values, dims, 2, kernel, true);
    v = pass(&v, dims, 1, kernel, true);
    Ok(pass(&v, dims, 0, kernel, true))
}

/// Finite-difference derivative of a grid along `axis` with spacing `h`:
/// central inside, one-sided on the two boundary layers.
fn difference(values: &[f64], dims: [usize; 3], axis: usize, h: f64) -> Vec<f64> {
    let n = dims[axis];
    let stride = strides(dims)[axis];
    (0..values.len())
        .map(|idx| {
            let i = (idx / stride) % n;
            if i == 0 {
                (values[idx + stride] - values[idx]) / h
            } else if i == n - 1 {
                (values[idx] - values[idx - stride]) / h
            } else {
                (values[idx + stride] - values[idx - stride]) / (2.0 * h)
            }
        })
        .collect()
}

fn difference_transpose(grad: &[f64], dims: [usize; 3], axis: usize, h: f64, out: &mut [f64]) {
    let n = dims[axis];
    let inner = strides(dims)[axis];
    let add = |dst: &mut [f64], to: usize, src: &[f64], from: usize, w: f64| {
        let (d, s) = (&mut dst[to * inner..(to + 1) * inner], &src[from * inner..(from + 1) * inner]);
        d.iter_mut().zip(s).for_each(|(y, x)| *y += w * x);
    };
    for (src, dst) in grad.chunks_exact(n * inner).zip(out.chunks_exact_mut(n * inner)) {
        add(dst, 1, src, 0, 1.0 / h);
        add(dst, 0, src, 0, -1.0 / h);
        add(dst, n - 1, src, n - 1, 1.0 / h);
        add(dst, n - 2, src, n - 1, -1.0 / h);
        for p in 1..n - 1 {
            add(dst, p + 1, src, p, 0.5 / h);
            add(dst, p - 1, src, p, -0.5 / h);
        }
    }
}

/// `[dV/dx, dV/dy, dV/dz]` of the raw density.
pub fn density_gradient_field(field: &VoxelField) -> Result<[Vec<f64>; 3]> {
    check_grid(&field.density_raw, field.dims, 3)?;
    let h = field.cell_size();
    Ok([0, 1, 2].map(|a| difference(&field.density_raw, field.dims, a, h[a])))
}

/// `mean((conv3d(v) - v)^2)`.
pub fn smooth_loss(values: &[f64], dims: [usize; 3], kernel: &[f64]) -> Result<f64> {
    let blurred = conv3d(values, dims, kernel)?;
    Ok(blurred.iter().zip(values).map(|(b, v)| (b - v).powi(2)).sum::<f64>() / values.len() as f64)
}

/// Loss and its gradient with respect to `values`.
pub fn smooth_loss_with_grad(values: &[f64], dims: [usize; 3], kernel: &[f64]) -> Result<(f64, Vec<f64>)> {
    let blurred = conv3d(values, dims, kernel)?;
    let n = values.len() as f64;
    let resid: Vec<f64> = blurred.iter().zip(values).map(|(b, v)| b - v).collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
    let back = conv3d_transpose(&resid, dims, kernel)?;
    let grad = back.iter().zip(&resid).map(|(b, r)| 2.0 * (b - r) / n).collect();
    Ok((loss, grad))
}

/// Smoothness loss of `field` under `config` (unscaled by lambda).
pub fn field_smoothness(field: &VoxelField, config: &SmoothConfig) -> Result<f64> {
    let kernel = config.kernel()?;
    match config.target {
        SmoothTarget::Density => smooth_loss(&field.density_raw, field.dims, &kernel),
        SmoothTarget::GradientField => density_gradient_field(field)?
            .iter()
            .map(|g| smooth_loss(g, field.dims, &kernel))
            .sum(),
    }
}

/// Smoothness loss and its gradient with respect to the raw density.
pub fn field_smoothness_with_grad(field: &VoxelField, config: &SmoothConfig) -> Result<(f64, Vec<f64>)> {
    let kernel = config.kernel()?;
    match config.target {
        SmoothTarget::Density => smooth_loss_with_grad(&field.density_raw, field.dims, &kernel),
        SmoothTarget::GradientField => {
            let h = field.cell_size();
            let grads = density_gradient_field(field)?;
            let mut total = 0.0;
            let mut out = vec![0.0; field.len()];
            for (axis, g) in grads.iter().enumerate() {
                let (loss, dg) = smooth_loss_with_grad(g, field.dims, &kernel)?;
                total += loss;
                difference_transpose(&dg, field.dims, axis, h[axis], &mut out);
            }
            Ok((total, out))
        }
    }
}

/// `sds + lambda * smooth`.
pub fn total_loss(sds_term: f64, smooth_term: f64, lambda: f64) -> f64 {
    sds_term + lambda * smooth_term
}

/// Adds `lambda * dL_smooth/d(raw density)` to `grad` and returns the
/// unscaled smoothness loss. With `lambda == 0` the gradient is untouched.
pub fn add_smoothness_grad(grad: &mut FieldGrad, field: &VoxelField, config: &SmoothConfig) -> Result<f64> {
    if config.lambda == 0.0 {
        return field_smoothness(field, config);
    }
    let (loss, g) = field_smoothness_with_grad(field, config)?;
    for (dst, src) in grad.density_raw.iter_mut().zip(g) {
        *dst += config.lambda * src;
    }
    Ok(loss)
}
