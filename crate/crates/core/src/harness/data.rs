//! Synthetic latent "videos": per channel, a sum of low-frequency travelling
//! sinusoids over `(frame, row, col)` with random phases and directions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ToyDiTConfig;
use crate::error::{bail, Result};
use crate::layout::TokenGrid;
use crate::tensor::Tensor;

const COMPONENTS: usize = 3;

/// `count` tensors of shape `[S, channels]` in raster token order.
pub fn synth_dataset(grid: &TokenGrid, channels: usize, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    grid.validate()?;
    if count == 0 {
        bail!(Param, "dataset size must be at least 1");
    }
    if channels == 0 {
        bail!(Param, "channel count must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (frames, rows, cols) = (grid.t_frames, grid.height, grid.width);
    let tau = std::f32::consts::TAU;
    (0..count)
        .map(|_| {
            // Per channel: amplitudes summing to 0.9, frequencies in cycles
            // per clip along each axis.
            let waves: Vec<Vec<[f32; 5]>> = (0..channels)
                .map(|_| {
                    let raw: Vec<f32> = (0..COMPONENTS).map(|_| rng.random_range(0.2f32..1.0)).collect();
                    let total: f32 = raw.iter().sum();
                    raw.iter()
                        .map(|a| {
                            [
                                0.9 * a / total,
                                rng.random_range(-1.0f32..1.0),
                                rng.random_range(0.0f32..2.0),
                                rng.random_range(0.0f32..2.0),
                                rng.random_range(0.0f32..tau),
                            ]
                        })
                        .collect()
                })
                .collect();
            let mut data = Vec::with_capacity(grid.seq_len() * channels);
            for t in 0..frames {
                for y in 0..rows {
                    for x in 0..cols {
                        let (ft, fy, fx) = (
                            t as f32 / frames as f32,
                            y as f32 / rows as f32,
                            x as f32 / cols as f32,
                        );
                        for wave in &waves {
                            data.push(
                                wave.iter()
                                    .map(|[a, kt, ky, kx, phase]| {
                                        a * (tau * (kt * ft + ky * fy + kx * fx) + phase).sin()
                                    })
                                    .sum(),
                            );
                        }
                    }
                }
            }
            Tensor::new(vec![grid.seq_len(), channels], data)
        })
        .collect()
}

/// Training and validation clips, in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Tensor>,
    pub val: Vec<Tensor>,
}

impl Dataset {
    pub fn synth(config: &ToyDiTConfig) -> Result<Self> {
        let train = synth_dataset(&config.grid, config.channels, config.train_samples, config.seed)?;
        let val = synth_dataset(
            &config.grid,
            config.channels,
            config.val_samples,
            config.seed ^ 0x9e37_79b9_7f4a_7c15,
        )?;
        Ok(Self { train, val })
    }
}
