//! Seeded synthetic identities for desk-scale experiments.
//!
//! Identities come in look-alike families of `family_size`: each family has
//! a centre on the unit sphere and its identities sit `family_spread` away
//! from it. Each identity has `views` view offsets (think camera
//! viewpoints). A sample is identity centre + view offset + isotropic noise
//! scaled by `overlap`, so larger overlap blurs look-alikes together while
//! the views tend to fragment an identity into several clusters.
//! g-descriptors are per-identity stripe indices in `0..stripes`, with each
//! channel resampled uniformly with probability `overlap`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingDataset, Sample};

use super::{EngineError, Result};

/// Defaults give the standard desk benchmark: 1000 samples of 50
/// identities in look-alike pairs, two views each, overlap 0.3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub identities: usize,
    pub per_identity: usize,
    pub overlap: f64,
    pub seed: u64,
    pub dim: usize,
    pub g_dim: usize,
    pub views: usize,
    pub view_spread: f64,
    pub family_size: usize,
    pub family_spread: f64,
    pub stripes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 50,
            per_identity: 20,
            overlap: 0.3,
            seed: 0,
            dim: 32,
            g_dim: 8,
            views: 2,
            view_spread: 0.9,
            family_size: 2,
            family_spread: 0.4,
            stripes: 6,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<EmbeddingDataset> {
    if cfg.identities == 0
        || cfg.per_identity == 0
        || cfg.dim == 0
        || cfg.views == 0
        || cfg.family_size == 0
    {
        return Err(EngineError::Config(
            "identities, per_identity, dim, views and family_size must be positive".into(),
        ));
    }
    if !(cfg.overlap >= 0.0) {
        return Err(EngineError::Config("overlap must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = 1.0 / (cfg.dim as f64).sqrt();
    let stripes = cfg.stripes.max(1);

    let mut rows: Vec<(Vec<f64>, Vec<f64>, u32)> = Vec::new();
    let mut family = Vec::new();
    for identity in 0..cfg.identities {
        if identity % cfg.family_size == 0 {
            family = gaussian(&mut rng, cfg.dim, 1.0);
            let n = family
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            family.iter_mut().for_each(|x| *x /= n);
        }
        let centre: Vec<f64> = if cfg.family_size == 1 {
            family.clone()
        } else {
            let offset = gaussian(&mut rng, cfg.dim, cfg.family_spread * unit);
            family.iter().zip(&offset).map(|(c, o)| c + o).collect()
        };
        let views: Vec<Vec<f64>> = (0..cfg.views)
            .map(|_| gaussian(&mut rng, cfg.dim, cfg.view_spread * unit))
            .collect();
        let pattern: Vec<usize> = (0..cfg.g_dim)
            .map(|_| rng.random_range(0..stripes))
            .collect();
        for s in 0..cfg.per_identity {
            let view = &views[s % cfg.views];
            let noise = gaussian(&mut rng, cfg.dim, cfg.overlap * unit);
            let feature: Vec<f64> = centre
                .iter()
                .zip(view)
                .zip(&noise)
                .map(|((c, v), e)| c + v + e)
                .collect();
            let g: Vec<f64> = pattern
                .iter()
                .map(|&p| {
                    if rng.random_bool(cfg.overlap.min(1.0)) {
                        rng.random_range(0..stripes) as f64
                    } else {
                        p as f64
                    }
                })
                .collect();
            rows.push((feature, g, identity as u32));
        }
    }
    rows.shuffle(&mut rng);

    let samples = rows
        .into_iter()
        .enumerate()
        .map(|(id, (f, g, identity))| {
            // round-trip through f32 so saved datasets reload identically
            let f = f.into_iter().map(|x| x as f32 as f64).collect();
            let g = (cfg.g_dim > 0).then_some(g);
            Sample::new(id, f, g, Some(identity), None)
        })
        .collect();
    Ok(EmbeddingDataset::from_samples(samples)?)
}
