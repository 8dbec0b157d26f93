//! Fusion of DINO-anchored and CLIP-derived token sets.
//!
//! The default strategy keeps the DINO tokens as the anchor and adds a learned
//! token-wise linear correction of the CLIP−DINO difference:
//! `Z = X_dino + (X_clip − X_dino)·W + b`. Naive addition and a FiLM
//! modulation are provided as baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{affine, matmul, matmul_nt, matmul_tn, norm, Matrix, Parameter, Scalar};

/// Scale applied to the uniform initializer of learned correction maps, so
/// training starts close to the anchor.
pub const INIT_SCALE: f64 = 0.1;

/// Tolerance on per-row unit norm for encoder token sets.
pub const UNIT_ROW_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Dino,
    Clip,
    Fused,
}

impl Source {
    pub fn tag(self) -> u8 {
        match self {
            Source::Dino => 0,
            Source::Clip => 1,
            Source::Fused => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Source::Dino),
            1 => Some(Source::Clip),
            2 => Some(Source::Fused),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    #[default]
    Residual,
    #[serde(rename = "add")]
    NaiveAdd,
    Film,
}

/// Per-image local features from one encoder, or the fused result.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub tokens: Matrix,
    pub source: Source,
    pub image_id: String,
    /// `(h_tokens, w_tokens)` with `h·w = M`.
    pub grid: (usize, usize),
}

impl TokenSet {
    pub fn new(tokens: Matrix, source: Source, image_id: impl Into<String>, grid: (usize, usize)) -> Result<Self> {
        let image_id = image_id.into();
        let m = tokens.rows();
        if m == 0 {
            return Err(Error::invalid(format!("token set for {image_id} is empty")));
        }
        if grid.0 * grid.1 != m {
            return Err(Error::invalid(format!(
                "grid {}x{} inconsistent with {m} tokens for {image_id}",
                grid.0, grid.1
            )));
        }
        tokens.check_finite(&format!("tokens of {image_id}"))?;
        if source != Source::Fused {
            for i in 0..m {
                let n = norm(tokens.row(i));
                if (n - 1.0).abs() > UNIT_ROW_TOL {
                    return Err(Error::invalid(format!(
                        "{source:?} token row {i} of {image_id} has norm {n}, expected 1"
                    )));
                }
            }
        }
        Ok(Self {
            tokens,
            source,
            image_id,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Borrowed FiLM weights: `γ = X_clip·gamma_w + gamma_b`, `β = X_clip·beta_w + beta_b`.
#[derive(Clone, Copy, Debug)]
pub struct FilmWeights<'a, T> {
    pub gamma_w: &'a Matrix<T>,
    pub gamma_b: &'a [T],
    pub beta_w: &'a Matrix<T>,
    pub beta_b: &'a [T],
}

#[derive(Clone, Copy, Debug)]
pub enum FusionWeights<'a, T> {
    Residual { w: &'a Matrix<T>, b: &'a [T] },
    NaiveAdd,
    Film(FilmWeights<'a, T>),
}

/// Gradients of a fusion kernel. `params` follows the weight order:
/// residual `[w, b]`, FiLM `[gamma_w, gamma_b, beta_w, beta_b]`; biases are `1×d`.
#[derive(Clone, Debug)]
pub struct FusionGrads<T> {
    pub d_dino: Matrix<T>,
    pub d_clip: Matrix<T>,
    pub params: Vec<Matrix<T>>,
}

fn same_shape<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn bias_row<T: Scalar>(v: Vec<f64>) -> Matrix<T> {
    let n = v.len();
    Matrix::from_vec(1, n, v.into_iter().map(T::lift).collect()).expect("bias shape")
}

/// Fuses two equally shaped token matrices.
pub fn fuse_tokens<T: Scalar>(dino: &Matrix<T>, clip: &Matrix<T>, weights: &FusionWeights<'_, T>) -> Result<Matrix<T>> {
    same_shape(dino, clip, "fuse")?;
    match weights {
        FusionWeights::Residual { w, b } => {
            let diff = clip.sub(dino)?;
            let correction = affine(&diff, w, b)?;
            same_shape(dino, &correction, "fuse_residual")?;
            dino.add(&correction)
        }
        FusionWeights::NaiveAdd => dino.add(clip),
        FusionWeights::Film(f) => {
            let gamma = affine(clip, f.gamma_w, f.gamma_b)?;
            let beta = affine(clip, f.beta_w, f.beta_b)?;
            same_shape(dino, &gamma, "fuse_film")?;
            gamma.hadamard(dino)?.add(&beta)
        }
    }
}

/// Analytic backward of [`fuse_tokens`].
pub fn fuse_tokens_backward<T: Scalar>(
    dino: &Matrix<T>,
    clip: &Matrix<T>,
    weights: &FusionWeights<'_, T>,
    dz: &Matrix<T>,
) -> Result<FusionGrads<T>> {
    same_shape(dino, dz, "fuse_backward")?;
    match weights {
        FusionWeights::Residual { w, .. } => {
            let diff = clip.sub(dino)?;
            // d(diff) = dZ·Wᵀ; dX_dino = dZ − d(diff), dX_clip = d(diff)
            let d_diff = matmul_nt(dz, w)?;
            let d_dino = dz.sub(&d_diff)?;
            let dw = matmul_tn(&diff, dz)?;
            let db = bias_row(dz.column_sums());
            Ok(FusionGrads {
                d_dino,
                d_clip: d_diff,
                params: vec![dw, db],
            })
        }
        FusionWeights::NaiveAdd => Ok(FusionGrads {
            d_dino: dz.clone(),
            d_clip: dz.clone(),
            params: Vec::new(),
        }),
        FusionWeights::Film(f) => {
            let gamma = affine(clip, f.gamma_w, f.gamma_b)?;
            let d_dino = dz.hadamard(&gamma)?;
            let d_gamma = dz.hadamard(dino)?;
            let d_beta = dz;
            let mut d_clip = matmul_nt(&d_gamma, f.gamma_w)?;
            d_clip.add_assign(&matmul_nt(d_beta, f.beta_w)?)?;
            Ok(FusionGrads {
                d_dino,
                d_clip,
                params: vec![
                    matmul_tn(clip, &d_gamma)?,
                    bias_row(d_gamma.column_sums()),
                    matmul_tn(clip, d_beta)?,
                    bias_row(d_beta.column_sums()),
                ],
            })
        }
    }
}

fn check_pair(dino: &TokenSet, clip: &TokenSet) -> Result<()> {
    if dino.image_id != clip.image_id {
        return Err(Error::invalid(format!(
            "token sets belong to different images: {} vs {}",
            dino.image_id, clip.image_id
        )));
    }
    if dino.grid != clip.grid {
        return Err(Error::invalid(format!(
            "grid mismatch for {}: {:?} vs {:?}",
            dino.image_id, dino.grid, clip.grid
        )));
    }
    Ok(())
}

fn fused_set(dino: &TokenSet, tokens: Matrix) -> TokenSet {
    TokenSet {
        tokens,
        source: Source::Fused,
        image_id: dino.image_id.clone(),
        grid: dino.grid,
    }
}

/// `Z = X_dino + (X_clip − X_dino)·W + b`.
pub fn fuse_residual(dino: &TokenSet, clip: &TokenSet, w: &Matrix, b: &[f32]) -> Result<TokenSet> {
    check_pair(dino, clip)?;
    let z = fuse_tokens(&dino.tokens, &clip.tokens, &FusionWeights::Residual { w, b })?;
    Ok(fused_set(dino, z))
}

/// `Z = X_dino + X_clip`.
pub fn fuse_naive_add(dino: &TokenSet, clip: &TokenSet) -> Result<TokenSet> {
    check_pair(dino, clip)?;
    let z = fuse_tokens(&dino.tokens, &clip.tokens, &FusionWeights::NaiveAdd)?;
    Ok(fused_set(dino, z))
}

/// `z_j = γ(x_clip,j) ⊙ x_dino,j + β(x_clip,j)`.
pub fn fuse_film(dino: &TokenSet, clip: &TokenSet, film: &FilmWeights<'_, f32>) -> Result<TokenSet> {
    check_pair(dino, clip)?;
    let z = fuse_tokens(&dino.tokens, &clip.tokens, &FusionWeights::Film(*film))?;
    Ok(fused_set(dino, z))
}

fn uniform_init(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| (rng.random_range(-bound..bound) * scale) as f32)
}

#[derive(Clone, Debug)]
pub struct FilmParams {
    pub gamma_w: Parameter,
    pub gamma_b: Parameter,
    pub beta_w: Parameter,
    pub beta_b: Parameter,
}

/// Trainable state of the fusion stage. Only the tensors the selected
/// variant uses are allocated.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub variant: FusionVariant,
    pub w_res: Option<Parameter>,
    pub b_res: Option<Parameter>,
    pub film: Option<FilmParams>,
    /// Projects CLIP tokens of width `d_clip` to `d` when the widths differ.
    pub clip_adapter: Option<Parameter>,
}

/// Forward intermediates needed by [`FusionParams::backward`].
#[derive(Clone, Debug)]
pub struct FusionCache {
    dino: Matrix,
    clip_raw: Matrix,
    clip: Matrix,
}

impl FusionParams {
    pub fn init(variant: FusionVariant, dim: usize, clip_dim: usize, rng: &mut impl Rng) -> Self {
        let clip_adapter =
            (clip_dim != dim).then(|| Parameter::new("adapter.clip", uniform_init(clip_dim, dim, 1.0, rng)));
        let mut p = Self {
            variant,
            w_res: None,
            b_res: None,
            film: None,
            clip_adapter,
        };
        match variant {
            FusionVariant::Residual => {
                p.w_res = Some(Parameter::new("fusion.w_res", uniform_init(dim, dim, INIT_SCALE, rng)));
                p.b_res = Some(Parameter::new("fusion.b_res", Matrix::zeros(1, dim)).without_decay());
            }
            FusionVariant::NaiveAdd => {}
            FusionVariant::Film => {
                let ones = Matrix::from_vec(1, dim, vec![1.0; dim]).expect("bias shape");
                p.film = Some(FilmParams {
                    gamma_w: Parameter::new("fusion.film.gamma_w", uniform_init(dim, dim, INIT_SCALE, rng)),
                    gamma_b: Parameter::new("fusion.film.gamma_b", ones).without_decay(),
                    beta_w: Parameter::new("fusion.film.beta_w", uniform_init(dim, dim, INIT_SCALE, rng)),
                    beta_b: Parameter::new("fusion.film.beta_b", Matrix::zeros(1, dim)).without_decay(),
                });
            }
        }
        p
    }

    pub fn weights(&self) -> Result<FusionWeights<'_, f32>> {
        let missing = || Error::invalid(format!("fusion parameters missing for {:?}", self.variant));
        Ok(match self.variant {
            FusionVariant::Residual => FusionWeights::Residual {
                w: &self.w_res.as_ref().ok_or_else(missing)?.value,
                b: self.b_res.as_ref().ok_or_else(missing)?.value.data(),
            },
            FusionVariant::NaiveAdd => FusionWeights::NaiveAdd,
            FusionVariant::Film => {
                let f = self.film.as_ref().ok_or_else(missing)?;
                FusionWeights::Film(FilmWeights {
                    gamma_w: &f.gamma_w.value,
                    gamma_b: f.gamma_b.value.data(),
                    beta_w: &f.beta_w.value,
                    beta_b: f.beta_b.value.data(),
                })
            }
        })
    }

    /// Applies the CLIP adapter (if any) and the configured fusion.
    pub fn forward(&self, dino: &TokenSet, clip: &TokenSet) -> Result<(TokenSet, FusionCache)> {
        check_pair(dino, clip)?;
        let clip_tokens = match &self.clip_adapter {
            Some(a) => matmul(&clip.tokens, &a.value)?,
            None => clip.tokens.clone(),
        };
        let z = fuse_tokens(&dino.tokens, &clip_tokens, &self.weights()?)?;
        let cache = FusionCache {
            dino: dino.tokens.clone(),
            clip_raw: clip.tokens.clone(),
            clip: clip_tokens,
        };
        Ok((fused_set(dino, z), cache))
    }

    /// Accumulates parameter gradients for upstream `dz`; returns the
    /// gradients with respect to the raw DINO and CLIP tokens.
    pub fn backward(&mut self, cache: &FusionCache, dz: &Matrix) -> Result<(Matrix, Matrix)> {
        let grads = fuse_tokens_backward(&cache.dino, &cache.clip, &self.weights()?, dz)?;
        match self.variant {
            FusionVariant::Residual => {
                if let (Some(w), Some(b)) = (self.w_res.as_mut(), self.b_res.as_mut()) {
                    w.accumulate(&grads.params[0])?;
                    b.accumulate(&grads.params[1])?;
                }
            }
            FusionVariant::NaiveAdd => {}
            FusionVariant::Film => {
                if let Some(f) = self.film.as_mut() {
                    f.gamma_w.accumulate(&grads.params[0])?;
                    f.gamma_b.accumulate(&grads.params[1])?;
                    f.beta_w.accumulate(&grads.params[2])?;
                    f.beta_b.accumulate(&grads.params[3])?;
                }
            }
        }
        let d_clip_raw = match self.clip_adapter.as_mut() {
            Some(a) => {
                a.accumulate(&matmul_tn(&cache.clip_raw, &grads.d_clip)?)?;
                matmul_nt(&grads.d_clip, &a.value)?
            }
            None => grads.d_clip,
        };
        Ok((grads.d_dino, d_clip_raw))
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = Vec::new();
        out.extend(self.clip_adapter.as_ref());
        out.extend(self.w_res.as_ref());
        out.extend(self.b_res.as_ref());
        if let Some(f) = &self.film {
            out.extend([&f.gamma_w, &f.gamma_b, &f.beta_w, &f.beta_b]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        out.extend(self.clip_adapter.as_mut());
        out.extend(self.w_res.as_mut());
        out.extend(self.b_res.as_mut());
        if let Some(f) = &mut self.film {
            out.extend([&mut f.gamma_w, &mut f.gamma_b, &mut f.beta_w, &mut f.beta_b]);
        }
        out
    }
}
