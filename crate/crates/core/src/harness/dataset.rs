//! Synthetic ground-truth data.

use crate::error::{FlowError, Result};
use crate::tensor::{gaussian_sample, Matrix, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    /// `mean + L z` with `z ~ N(0, I)`; `L` may be singular or zero.
    Gaussian { mean: Vec<f64>, lower: Matrix },
    /// Sum of random Gaussian bumps on a constant background, clamped to `[0, 1]`.
    SmoothBlobs { height: usize, width: usize, blobs: usize },
    Checkerboard { height: usize, width: usize, cell: usize },
}

impl DatasetKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetKind::Gaussian { mean, lower } => {
                if mean.is_empty() || lower.rows() != mean.len() || lower.cols() != mean.len() {
                    return Err(FlowError::config("gaussian dataset needs a square factor matching the mean"));
                }
            }
            DatasetKind::SmoothBlobs { height, width, blobs } => {
                if *height == 0 || *width == 0 || *blobs == 0 {
                    return Err(FlowError::config("smooth_blobs needs positive height, width and blob count"));
                }
            }
            DatasetKind::Checkerboard { height, width, cell } => {
                if *height == 0 || *width == 0 || *cell == 0 {
                    return Err(FlowError::config("checkerboard needs positive height, width and cell"));
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            DatasetKind::Gaussian { mean, .. } => vec![mean.len()],
            DatasetKind::SmoothBlobs { height, width, .. } | DatasetKind::Checkerboard { height, width, .. } => {
                vec![*height, *width]
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<Tensor> {
        self.validate()?;
        match self {
            DatasetKind::Gaussian { mean, lower } => {
                gaussian_sample(rng, &Tensor::vector(mean.clone()), lower)
            }
            DatasetKind::SmoothBlobs { height, width, blobs } => {
                let (h, w) = (*height, *width);
                let scale = h.min(w) as f64;
                let background = rng.uniform_range(0.0, 0.2);
                let bumps: Vec<(f64, f64, f64, f64)> = (0..*blobs)
                    .map(|_| {
                        let cy = rng.uniform_range(0.0, h as f64);
                        let cx = rng.uniform_range(0.0, w as f64);
                        let s = rng.uniform_range(scale / 8.0, scale / 4.0);
                        let amp = rng.uniform_range(0.3, 0.8);
                        (cy, cx, s, amp)
                    })
                    .collect();
                let data = (0..h * w)
                    .map(|k| {
                        let (i, j) = ((k / w) as f64 + 0.5, (k % w) as f64 + 0.5);
                        let v: f64 = bumps
                            .iter()
                            .map(|(cy, cx, s, a)| a * (-((i - cy).powi(2) + (j - cx).powi(2)) / (2.0 * s * s)).exp())
                            .sum();
                        (background + v).clamp(0.0, 1.0)
                    })
                    .collect();
                Tensor::new(vec![h, w], data)
            }
            DatasetKind::Checkerboard { height, width, cell } => {
                let (w, c) = (*width, *cell);
                let data = (0..height * width).map(|k| (((k / w) / c + (k % w) / c) % 2) as f64).collect();
                Tensor::new(vec![*height, *width], data)
            }
        }
    }
}

/// Image `i` is drawn from `rng.substream(i)`, so a prefix of a larger
/// dataset equals the smaller dataset.
pub fn synthesize_dataset(kind: &DatasetKind, count: usize, rng: &Rng) -> Result<Vec<Tensor>> {
    kind.validate()?;
    (0..count).map(|i| kind.sample(&mut rng.substream(i as u64))).collect()
}
