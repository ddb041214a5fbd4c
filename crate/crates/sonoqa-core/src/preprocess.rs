//! Image preprocessing: Gaussian smoothing and overlay-text removal.
//!
//! Ultrasound frames carry burned-in patient/device text near the margins;
//! it is removed by thresholding inside a border band before the image is
//! smoothed with a normalized Gaussian kernel.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Grayscale image with intensities in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input("image extents must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "{} values for {width}×{height} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("intensities must lie in [0, 1]".into()));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Set a pixel, clamping into [0, 1] to preserve the range invariant.
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Sampled, normalized 2-d Gaussian. Weights sum to 1 and are exactly
/// symmetric under reflection and transposition (they depend only on
/// x² + y²).
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    sigma: f64,
    radius: usize,
    /// (2·radius+1)² weights, row-major, centered.
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at integer offset (dx, dy), |dx|,|dy| ≤ radius.
    pub fn weight(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        let side = 2 * self.radius + 1;
        self.weights[((dy + r) as usize) * side + (dx + r) as usize]
    }
}

/// Default smoothing width; truncating at radius ceil(3σ) leaves under 1e-3
/// of the kernel mass outside the support.
pub const DEFAULT_SIGMA: f64 = 1.0;

pub fn default_radius(sigma: f64) -> usize {
    libm::ceil(3.0 * sigma) as usize
}

/// Sample exp(−(x²+y²)/(2σ²)) at integer offsets and renormalize to sum 1.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<GaussianKernel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    if radius == 0 {
        return Err(Error::Parameter("kernel radius must be at least 1".into()));
    }
    let side = 2 * radius + 1;
    let mut weights = Vec::with_capacity(side * side);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let r = radius as isize;
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            // Evaluated as a function of dx² + dy² so the rotational
            // symmetries hold bit-exactly.
            let w = libm::exp(-((dx * dx + dy * dy) as f64) * inv);
            weights.push(w);
            total += w;
        }
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(GaussianKernel { sigma, radius, weights })
}

/// Mirror an index into 0..n (symmetric reflection that repeats the edge
/// pixel: -1 ↦ 0, n ↦ n−1). This padding makes smoothing with a normalized
/// kernel mean-preserving.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Convolve with a Gaussian kernel under reflect padding. Output values are
/// convex combinations of inputs, so the [0, 1] range is preserved.
pub fn smooth(image: &GrayImage, kernel: &GaussianKernel) -> GrayImage {
    let (w, h) = (image.width, image.height);
    let r = kernel.radius as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                let sy = reflect(y as isize + dy, h);
                for dx in -r..=r {
                    let sx = reflect(x as isize + dx, w);
                    acc += kernel.weight(dx, dy) * image.data[sy * w + sx];
                }
            }
            out[y * w + x] = acc.clamp(0.0, 1.0);
        }
    }
    GrayImage { width: w, height: h, data: out }
}

/// Replace bright pixels inside the border band by the band median.
///
/// Overlay text sits at the frame margins, so thresholding is restricted to
/// a band of `border_band` pixels along each edge; full-frame thresholding
/// would erase bright anatomy. The replacement value is capped at the
/// threshold, which makes the operation idempotent.
pub fn strip_overlay_text(
    image: &GrayImage,
    threshold: f64,
    border_band: usize,
) -> Result<GrayImage> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Parameter(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let (w, h) = (image.width, image.height);
    let band = border_band.min(w).min(h);
    let in_band = |x: usize, y: usize| x < band || y < band || x >= w - band || y >= h - band;

    let mut band_values: Vec<f64> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if in_band(x, y) {
                band_values.push(image.data[y * w + x]);
            }
        }
    }
    if band_values.is_empty() {
        return Ok(image.clone());
    }
    band_values.sort_by(|a, b| a.partial_cmp(b).expect("finite intensities"));
    let n = band_values.len();
    let median = if n % 2 == 1 {
        band_values[n / 2]
    } else {
        0.5 * (band_values[n / 2 - 1] + band_values[n / 2])
    };
    let replacement = median.min(threshold);

    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if in_band(x, y) && out.data[y * w + x] > threshold {
                out.data[y * w + x] = replacement;
            }
        }
    }
    Ok(out)
}

/// Fraction of each edge covered by the default text-removal band.
pub const DEFAULT_BORDER_BAND_FRACTION: f64 = 0.12;

pub fn default_border_band(width: usize, height: usize) -> usize {
    let m = width.min(height) as f64;
    libm::ceil(m * DEFAULT_BORDER_BAND_FRACTION) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized() {
        for sigma in [0.5, 1.0, 2.3] {
            let k = gaussian_kernel(sigma, default_radius(sigma)).unwrap();
            let sum: f64 = k.weights().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sigma {sigma}: sum {sum}");
        }
    }

    #[test]
    fn kernel_rotational_symmetry_is_exact() {
        let k = gaussian_kernel(1.3, 4).unwrap();
        assert_eq!(k.weight(1, 2), k.weight(2, 1));
        assert_eq!(k.weight(1, 2), k.weight(-1, -2));
        assert_eq!(k.weight(-3, 2), k.weight(2, -3));
    }

    #[test]
    fn kernel_center_weight_matches_direct_evaluation() {
        let k = gaussian_kernel(1.0, 1).unwrap();
        // Direct evaluation: center e⁰, edges e^(−1/2), corners e^(−1).
        let total = 1.0 + 4.0 * libm::exp(-0.5) + 4.0 * libm::exp(-1.0);
        assert!((k.weight(0, 0) - 1.0 / total).abs() < 1e-15);
    }

    #[test]
    fn kernel_rejects_bad_sigma() {
        assert!(matches!(gaussian_kernel(0.0, 1), Err(Error::Parameter(_))));
        assert!(matches!(gaussian_kernel(-1.0, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn smoothing_preserves_constant_images() {
        let img = GrayImage::filled(9, 7, 0.37).unwrap();
        let k = gaussian_kernel(1.0, 3).unwrap();
        let out = smooth(&img, &k);
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn impulse_response_reproduces_kernel() {
        let mut img = GrayImage::filled(11, 11, 0.0).unwrap();
        img.set(5, 5, 1.0);
        let k = gaussian_kernel(1.0, 2).unwrap();
        let out = smooth(&img, &k);
        for dy in -2isize..=2 {
            for dx in -2isize..=2 {
                let v = out.get((5 + dx) as usize, (5 + dy) as usize);
                assert!((v - k.weight(dx, dy)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strip_is_noop_without_bright_pixels() {
        let img = GrayImage::filled(20, 20, 0.4).unwrap();
        let out = strip_overlay_text(&img, 0.9, 3).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn strip_removes_corner_glyph_only() {
        let mut img = GrayImage::filled(32, 32, 0.2).unwrap();
        // Bright interior anatomy must survive.
        img.set(16, 16, 0.95);
        // White glyph in the corner band.
        for (x, y) in [(1, 1), (2, 1), (1, 2), (3, 2)] {
            img.set(x, y, 0.98);
        }
        let out = strip_overlay_text(&img, 0.9, 4).unwrap();
        assert_eq!(out.get(16, 16), 0.95);
        for (x, y) in [(1, 1), (2, 1), (1, 2), (3, 2)] {
            assert!(out.get(x, y) <= 0.9);
        }
    }

    #[test]
    fn strip_all_black_unchanged() {
        let img = GrayImage::filled(16, 16, 0.0).unwrap();
        let out = strip_overlay_text(&img, 0.5, 2).unwrap();
        assert_eq!(out, img);
    }
}
