//! Synthetic places for desk-scale training and evaluation.
//!
//! Every place has an `M×d` center of i.i.d. Gaussian rows, normalized to
//! unit length. An image of a place perturbs each center token with
//! `N(0, σ²)` noise and renormalizes. The CLIP-like view of an image is the
//! DINO-like view under a fixed random orthogonal map, plus independent
//! `N(0, σ_clip²)` noise, renormalized.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatabaseEntry, DatasetManifest, QueryEntry};
use super::tokens::write_tokens;
use crate::error::{Error, Result};
use crate::fusion::{Source, TokenSet};
use crate::tensor::{matmul, normalize_rows, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub places: usize,
    /// Database images per place.
    pub images_per_place: usize,
    /// Held-out query images per place.
    pub queries_per_place: usize,
    pub dim: usize,
    /// Token count `M`.
    pub tokens: usize,
    /// Intra-place token noise σ.
    pub sigma: f64,
    /// Width of the CLIP-like tokens; defaults to `dim`.
    pub clip_dim: Option<usize>,
    /// Extra noise on the CLIP-like view; defaults to `sigma`.
    pub clip_noise: Option<f64>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            places: 32,
            images_per_place: 4,
            queries_per_place: 1,
            dim: 16,
            tokens: 16,
            sigma: 0.15,
            clip_dim: None,
            clip_noise: None,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.places < 2 || self.images_per_place < 2 {
            return Err(Error::config(
                "synthetic data needs at least 2 places with 2 images each",
            ));
        }
        if self.dim == 0 || self.tokens == 0 || self.clip_dim == Some(0) {
            return Err(Error::config("synthetic dims must be positive"));
        }
        let noise_ok = |s: f64| s.is_finite() && s >= 0.0;
        if !noise_ok(self.sigma) || !self.clip_noise.is_none_or(noise_ok) {
            return Err(Error::config("synthetic noise levels must be nonnegative"));
        }
        Ok(())
    }

    pub fn clip_dim(&self) -> usize {
        self.clip_dim.unwrap_or(self.dim)
    }

    /// Near-square `(h, w)` factorization of the token count.
    pub fn grid(&self) -> (usize, usize) {
        let mut h = (self.tokens as f64).sqrt() as usize;
        while h > 1 && !self.tokens.is_multiple_of(h) {
            h -= 1;
        }
        let h = h.max(1);
        (h, self.tokens / h)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub id: String,
    pub place: usize,
    pub is_query: bool,
    pub dino: TokenSet,
    pub clip: TokenSet,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SynthSpec,
    /// Noise-free place centers (DINO view).
    pub centers: Vec<Matrix>,
    pub images: Vec<SyntheticImage>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        (z * std) as f32
    })
}

/// `rows×cols` block of a random orthogonal matrix: orthonormal rows when
/// `rows ≤ cols`, orthonormal columns otherwise.
fn random_orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = rows.max(cols);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Matrix::from_fn(rows, cols, |i, j| basis[i][j] as f32)
}

fn noisy_view(base: &Matrix, sigma: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = base
        .add(&gaussian(base.rows(), base.cols(), sigma, rng))
        .expect("same shape");
    normalize_rows(&mut m);
    m
}

/// Deterministic in `spec` (including its seed).
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid = spec.grid();
    let rotation = random_orthogonal(spec.dim, spec.clip_dim(), &mut rng);
    let clip_noise = spec.clip_noise.unwrap_or(spec.sigma);
    let centers: Vec<Matrix> = (0..spec.places)
        .map(|_| {
            let mut c = gaussian(spec.tokens, spec.dim, 1.0, &mut rng);
            normalize_rows(&mut c);
            c
        })
        .collect();

    let per_place = spec.images_per_place + spec.queries_per_place;
    let mut images = Vec::with_capacity(spec.places * per_place);
    for (p, center) in centers.iter().enumerate() {
        for i in 0..per_place {
            let is_query = i >= spec.images_per_place;
            let id = if is_query {
                format!("q_p{p:03}_{:02}", i - spec.images_per_place)
            } else {
                format!("db_p{p:03}_{i:02}")
            };
            let dino = noisy_view(center, spec.sigma, &mut rng);
            let clip = noisy_view(&matmul(&dino, &rotation)?, clip_noise, &mut rng);
            images.push(SyntheticImage {
                place: p,
                is_query,
                dino: TokenSet::new(dino, Source::Dino, id.clone(), grid)?,
                clip: TokenSet::new(clip, Source::Clip, id.clone(), grid)?,
                id,
            });
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        centers,
        images,
    })
}

fn place_name(p: usize) -> String {
    format!("p{p:03}")
}

impl SyntheticDataset {
    /// Manifest with paths relative to the dataset directory.
    pub fn manifest(&self) -> DatasetManifest {
        let paths = |id: &str| {
            (
                Path::new("tokens").join(format!("{id}.dino.vprt")),
                Path::new("tokens").join(format!("{id}.clip.vprt")),
            )
        };
        let mut m = DatasetManifest {
            name: "synth".to_string(),
            ..Default::default()
        };
        for img in &self.images {
            let (dino, clip) = paths(&img.id);
            if img.is_query {
                let positives = self
                    .images
                    .iter()
                    .filter(|o| !o.is_query && o.place == img.place)
                    .map(|o| o.id.clone())
                    .collect();
                m.query.push(QueryEntry {
                    id: img.id.clone(),
                    dino,
                    clip,
                    positives,
                });
            } else {
                m.database.push(DatabaseEntry {
                    id: img.id.clone(),
                    place: Some(place_name(img.place)),
                    dino,
                    clip,
                });
            }
        }
        m
    }

    /// Writes `manifest.toml` and `tokens/*.vprt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let mut manifest = self.manifest();
        manifest.base_dir = dir.to_path_buf();
        for img in &self.images {
            write_tokens(&dir.join("tokens").join(format!("{}.dino.vprt", img.id)), &img.dino)?;
            write_tokens(&dir.join("tokens").join(format!("{}.clip.vprt", img.id)), &img.clip)?;
        }
        manifest.save(&dir.join("manifest.toml"))?;
        Ok(manifest)
    }

    pub fn database(&self) -> impl Iterator<Item = &SyntheticImage> {
        self.images.iter().filter(|i| !i.is_query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &SyntheticImage> {
        self.images.iter().filter(|i| i.is_query)
    }
}
