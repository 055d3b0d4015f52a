//! Gaussian kernel density estimation on [0, 1] with boundary reflection.

use crate::error::{Error, Result};

pub const KDE_GRID_POINTS: usize = 512;

/// Fallback bandwidth when the sample is (numerically) a point mass and
/// the plug-in rule would collapse to zero.
const POINT_MASS_BANDWIDTH: f64 = 0.05;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityCurve {
    /// Trapezoidal integral over the grid; ≈ 1 after boundary reflection.
    pub fn integral(&self) -> f64 {
        let mut area = 0.0;
        for i in 1..self.grid.len() {
            let dx = self.grid[i] - self.grid[i - 1];
            area += 0.5 * dx * (self.density[i] + self.density[i - 1]);
        }
        area
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("p,density\n");
        for (x, d) in self.grid.iter().zip(&self.density) {
            out.push_str(&format!("{x},{d}\n"));
        }
        out
    }
}

/// Silverman's rule of thumb with the robust min(σ, IQR/1.349) spread;
/// degenerates to a fixed fallback for point masses.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return POINT_MASS_BANDWIDTH;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        let pos = q * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    let iqr = quantile(0.75) - quantile(0.25);
    let spread = if iqr > 0.0 {
        std.min(iqr / 1.349)
    } else {
        std
    };
    if spread <= 0.0 {
        return POINT_MASS_BANDWIDTH;
    }
    0.9 * spread * (n as f64).powf(-0.2)
}

/// Gaussian KDE on a 512-point grid over [0, 1], with the sample
/// reflected at both boundaries so no mass leaks outside the interval.
pub fn kde(samples: &[f64], h: f64) -> Result<DensityCurve> {
    if samples.len() < 2 {
        return Err(Error::Data(format!(
            "kde needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Contract(format!("kde bandwidth must be positive, got {h}")));
    }
    if let Some(bad) = samples.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Data(format!(
            "kde expects probabilities in [0, 1], found {bad}"
        )));
    }
    let n = samples.len() as f64;
    let grid: Vec<f64> = (0..KDE_GRID_POINTS)
        .map(|i| i as f64 / (KDE_GRID_POINTS - 1) as f64)
        .collect();
    let kernel = |u: f64| INV_SQRT_2PI * (-0.5 * u * u).exp();
    let density: Vec<f64> = grid
        .iter()
        .map(|&x| {
            let mut acc = 0.0;
            for &s in samples {
                // Original point plus its reflections across 0 and 1.
                acc += kernel((x - s) / h);
                acc += kernel((x + s) / h);
                acc += kernel((x - (2.0 - s)) / h);
            }
            acc / (n * h)
        })
        .collect();
    Ok(DensityCurve {
        grid,
        density,
        bandwidth: h,
    })
}
