//! Query-based global aggregation.
//!
//! Each block holds `S` learnable queries. Tokens are scored against the
//! queries with a scaled dot product, softly assigned (softmax over tokens per
//! query, or Sinkhorn transport), and pooled per query either as residuals
//! `v_k = Σ_j α_jk (z_j − q_k)` (VLAQ) or as plain weighted sums (BoQ). Blocks
//! see the same tokens independently; their outputs are concatenated
//! block-major, query-major, channel-minor and L2-normalized.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    dot, l2_normalize_backward, matmul, matmul_nt, matmul_tn, norm, softmax_columns, softmax_columns_backward, Matrix,
    Parameter, Scalar, NORM_EPS,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    #[default]
    Vlaq,
    Boq,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentKind {
    #[default]
    Softmax,
    Sinkhorn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornOptions {
    pub iters: usize,
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self { iters: 50, tol: 1e-6 }
    }
}

/// Soft assignment of `M` tokens to `S` queries.
#[derive(Clone, Debug)]
pub struct Assignment<T = f32> {
    pub alpha: Matrix<T>,
    /// Largest deviation of a marginal from its target.
    pub marginal_error: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// `s[j][k] = q_k · z_j / √d`.
pub fn similarity_scores<T: Scalar>(tokens: &Matrix<T>, queries: &Matrix<T>) -> Result<Matrix<T>> {
    if tokens.cols() != queries.cols() {
        return Err(Error::Shape {
            op: "similarity_scores",
            left: tokens.shape(),
            right: queries.shape(),
        });
    }
    let scale = 1.0 / (tokens.cols() as f64).sqrt();
    Ok(matmul_nt(tokens, queries)?.scale(scale))
}

/// Gradients of [`similarity_scores`] with respect to tokens and queries.
pub fn similarity_scores_backward<T: Scalar>(
    tokens: &Matrix<T>,
    queries: &Matrix<T>,
    d_scores: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let scale = 1.0 / (tokens.cols() as f64).sqrt();
    let d_tokens = matmul(d_scores, queries)?.scale(scale);
    let d_queries = matmul_tn(d_scores, tokens)?.scale(scale);
    Ok((d_tokens, d_queries))
}

/// Softmax over tokens for each query. Every column sums to one.
pub fn assign_softmax<T: Scalar>(scores: &Matrix<T>) -> Result<Assignment<T>> {
    let alpha = softmax_columns(scores)?;
    let marginal_error = alpha.column_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    Ok(Assignment {
        alpha,
        marginal_error,
        converged: true,
        iterations: 1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Rows,
    Cols,
}

/// Log-domain intermediates of a Sinkhorn run, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SinkhornTrace {
    rows: usize,
    cols: usize,
    /// Log-plan before each normalization step.
    steps: Vec<(Axis, Vec<f64>)>,
    /// Final transport plan.
    plan: Vec<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn normalize_axis(log_p: &mut [f64], rows: usize, cols: usize, axis: Axis) {
    match axis {
        Axis::Rows => {
            let target = -(rows as f64).ln();
            for i in 0..rows {
                let row = &mut log_p[i * cols..(i + 1) * cols];
                let lse = log_sum_exp(row.iter().copied());
                row.iter_mut().for_each(|x| *x += target - lse);
            }
        }
        Axis::Cols => {
            let target = -(cols as f64).ln();
            for k in 0..cols {
                let lse = log_sum_exp((0..rows).map(|i| log_p[i * cols + k]));
                for i in 0..rows {
                    log_p[i * cols + k] += target - lse;
                }
            }
        }
    }
}

fn sinkhorn_marginal_error(plan: &[f64], rows: usize, cols: usize) -> f64 {
    let row_target = 1.0 / rows as f64;
    let col_target = 1.0 / cols as f64;
    let mut err: f64 = 0.0;
    for i in 0..rows {
        let s: f64 = plan[i * cols..(i + 1) * cols].iter().sum();
        err = err.max((s - row_target).abs());
    }
    for k in 0..cols {
        let s: f64 = (0..rows).map(|i| plan[i * cols + k]).sum();
        err = err.max((s - col_target).abs());
    }
    err
}

/// Entropic transport plan with uniform marginals (`1/M` per token, `1/S` per
/// query, total mass one), computed by alternating log-domain row and column
/// normalization of `exp(scores)`. Stops early once both marginals are within
/// `tol`; otherwise the result is returned with `converged = false`.
pub fn sinkhorn_forward<T: Scalar>(
    scores: &Matrix<T>,
    iters: usize,
    tol: f64,
) -> Result<(Assignment<T>, SinkhornTrace)> {
    if iters == 0 {
        return Err(Error::invalid("sinkhorn needs at least one iteration"));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::invalid("sinkhorn tolerance must be positive"));
    }
    scores.check_finite("sinkhorn scores")?;
    let (rows, cols) = scores.shape();
    let mut log_p: Vec<f64> = scores.data().iter().map(|x| x.widen()).collect();
    let mut steps = Vec::with_capacity(2 * iters);
    let mut marginal_error = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..iters {
        for axis in [Axis::Rows, Axis::Cols] {
            steps.push((axis, log_p.clone()));
            normalize_axis(&mut log_p, rows, cols, axis);
        }
        iterations += 1;
        let plan: Vec<f64> = log_p.iter().map(|x| x.exp()).collect();
        marginal_error = sinkhorn_marginal_error(&plan, rows, cols);
        if marginal_error <= tol {
            break;
        }
    }
    let plan: Vec<f64> = log_p.iter().map(|x| x.exp()).collect();
    let alpha = Matrix::from_vec(rows, cols, plan.iter().map(|&x| T::lift(x)).collect())?;
    Ok((
        Assignment {
            alpha,
            marginal_error,
            converged: marginal_error <= tol,
            iterations,
        },
        SinkhornTrace {
            rows,
            cols,
            steps,
            plan,
        },
    ))
}

pub fn assign_sinkhorn<T: Scalar>(scores: &Matrix<T>, iters: usize, tol: f64) -> Result<Assignment<T>> {
    let (assignment, _) = sinkhorn_forward(scores, iters, tol)?;
    if !assignment.converged {
        log::warn!(
            "sinkhorn stopped after {} iterations with marginal error {:.3e}",
            assignment.iterations,
            assignment.marginal_error
        );
    }
    Ok(assignment)
}

/// Backpropagates through the unrolled Sinkhorn iterations.
pub fn sinkhorn_backward<T: Scalar>(trace: &SinkhornTrace, d_alpha: &Matrix<T>) -> Matrix<T> {
    let (rows, cols) = (trace.rows, trace.cols);
    let mut grad: Vec<f64> = trace
        .plan
        .iter()
        .zip(d_alpha.data())
        .map(|(p, g)| p * g.widen())
        .collect();
    for (axis, before) in trace.steps.iter().rev() {
        // y = x − lse_axis(x) + c  ⇒  dx = dy − softmax_axis(x) · Σ_axis dy
        match axis {
            Axis::Rows => {
                for i in 0..rows {
                    let row = &before[i * cols..(i + 1) * cols];
                    let lse = log_sum_exp(row.iter().copied());
                    let total: f64 = grad[i * cols..(i + 1) * cols].iter().sum();
                    for k in 0..cols {
                        grad[i * cols + k] -= (row[k] - lse).exp() * total;
                    }
                }
            }
            Axis::Cols => {
                for k in 0..cols {
                    let lse = log_sum_exp((0..rows).map(|i| before[i * cols + k]));
                    let total: f64 = (0..rows).map(|i| grad[i * cols + k]).sum();
                    for i in 0..rows {
                        grad[i * cols + k] -= (before[i * cols + k] - lse).exp() * total;
                    }
                }
            }
        }
    }
    Matrix::from_vec(rows, cols, grad.into_iter().map(T::lift).collect()).expect("trace shape")
}

fn check_alpha<T: Scalar>(tokens: &Matrix<T>, alpha: &Matrix<T>, s: usize) -> Result<()> {
    if alpha.rows() != tokens.rows() || alpha.cols() != s {
        return Err(Error::Shape {
            op: "aggregate(alpha)",
            left: alpha.shape(),
            right: (tokens.rows(), s),
        });
    }
    Ok(())
}

/// `v_k = Σ_j α_jk z_j − (Σ_j α_jk) q_k`.
pub fn aggregate_vlaq<T: Scalar>(tokens: &Matrix<T>, queries: &Matrix<T>, alpha: &Matrix<T>) -> Result<Matrix<T>> {
    if tokens.cols() != queries.cols() {
        return Err(Error::Shape {
            op: "aggregate_vlaq",
            left: tokens.shape(),
            right: queries.shape(),
        });
    }
    check_alpha(tokens, alpha, queries.rows())?;
    let mass = alpha.column_sums();
    let mut v = matmul_tn(alpha, tokens)?;
    for (k, &m) in mass.iter().enumerate() {
        let q = queries.row(k);
        for (o, &qc) in v.row_mut(k).iter_mut().zip(q) {
            *o = T::lift(o.widen() - m * qc.widen());
        }
    }
    Ok(v)
}

/// Gradients of [`aggregate_vlaq`]: `(d_tokens, d_queries, d_alpha)`.
pub fn aggregate_vlaq_backward<T: Scalar>(
    tokens: &Matrix<T>,
    queries: &Matrix<T>,
    alpha: &Matrix<T>,
    d_v: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let d_tokens = matmul(alpha, d_v)?;
    let mass = alpha.column_sums();
    let d_queries = Matrix::from_fn(queries.rows(), queries.cols(), |k, c| {
        T::lift(-mass[k] * d_v.get(k, c).widen())
    });
    let q_dot: Vec<f64> = (0..queries.rows()).map(|k| dot(queries.row(k), d_v.row(k))).collect();
    let zt_dv = matmul_nt(tokens, d_v)?;
    let d_alpha = Matrix::from_fn(alpha.rows(), alpha.cols(), |j, k| {
        T::lift(zt_dv.get(j, k).widen() - q_dot[k])
    });
    Ok((d_tokens, d_queries, d_alpha))
}

/// `v_k = Σ_j α_jk z_j`.
pub fn aggregate_boq<T: Scalar>(tokens: &Matrix<T>, alpha: &Matrix<T>) -> Result<Matrix<T>> {
    if alpha.rows() != tokens.rows() {
        return Err(Error::Shape {
            op: "aggregate_boq",
            left: alpha.shape(),
            right: tokens.shape(),
        });
    }
    matmul_tn(alpha, tokens)
}

/// Gradients of [`aggregate_boq`]: `(d_tokens, d_alpha)`.
pub fn aggregate_boq_backward<T: Scalar>(
    tokens: &Matrix<T>,
    alpha: &Matrix<T>,
    d_v: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    Ok((matmul(alpha, d_v)?, matmul_nt(tokens, d_v)?))
}

/// Unit-norm image descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor<T = f32> {
    pub values: Vec<T>,
    /// Set when the pre-normalization vector was zero; `values` is then all
    /// zeros rather than an arbitrary direction.
    pub degenerate: bool,
}

impl<T: Scalar> GlobalDescriptor<T> {
    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn flatten_blocks<T: Scalar>(blocks: &[Matrix<T>]) -> Result<Vec<T>> {
    let Some(first) = blocks.first() else {
        return Err(Error::invalid("descriptor needs at least one block"));
    };
    let mut flat = Vec::with_capacity(blocks.len() * first.data().len());
    for b in blocks {
        if b.shape() != first.shape() {
            return Err(Error::Shape {
                op: "build_descriptor",
                left: first.shape(),
                right: b.shape(),
            });
        }
        flat.extend_from_slice(b.data());
    }
    Ok(flat)
}

fn project<T: Scalar>(flat: &[T], projection: Option<&Matrix<T>>) -> Result<Vec<T>> {
    match projection {
        None => Ok(flat.to_vec()),
        Some(p) => {
            let x = Matrix::from_vec(1, flat.len(), flat.to_vec())?;
            Ok(matmul(&x, p)?.into_data())
        }
    }
}

/// Concatenates per-block residual matrices, optionally projects the result
/// with a `D×d_out` matrix, and L2-normalizes.
pub fn build_descriptor<T: Scalar>(
    blocks: &[Matrix<T>],
    projection: Option<&Matrix<T>>,
) -> Result<GlobalDescriptor<T>> {
    let pre = project(&flatten_blocks(blocks)?, projection)?;
    crate::tensor::check_finite(&pre, "descriptor")?;
    let n = norm(&pre);
    if n <= NORM_EPS {
        return Ok(GlobalDescriptor {
            values: vec![T::default(); pre.len()],
            degenerate: true,
        });
    }
    Ok(GlobalDescriptor {
        values: pre.iter().map(|&x| T::lift(x.widen() / n)).collect(),
        degenerate: false,
    })
}

/// Per-block gradients and the projection gradient.
pub type DescriptorGrads<T> = (Vec<Matrix<T>>, Option<Matrix<T>>);

/// Backward of [`build_descriptor`].
pub fn build_descriptor_backward<T: Scalar>(
    blocks: &[Matrix<T>],
    projection: Option<&Matrix<T>>,
    d_desc: &[T],
) -> Result<DescriptorGrads<T>> {
    let flat = flatten_blocks(blocks)?;
    let pre = project(&flat, projection)?;
    if d_desc.len() != pre.len() {
        return Err(Error::Shape {
            op: "build_descriptor_backward",
            left: (1, pre.len()),
            right: (1, d_desc.len()),
        });
    }
    let d_pre = l2_normalize_backward(&pre, d_desc, NORM_EPS);
    let (d_flat, d_proj) = match projection {
        None => (d_pre, None),
        Some(p) => {
            let dy = Matrix::from_vec(1, d_pre.len(), d_pre)?;
            let x = Matrix::from_vec(1, flat.len(), flat)?;
            (matmul_nt(&dy, p)?.into_data(), Some(matmul_tn(&x, &dy)?))
        }
    };
    let (s, d) = blocks[0].shape();
    let d_blocks = d_flat
        .chunks(s * d)
        .map(|c| Matrix::from_vec(s, d, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((d_blocks, d_proj))
}

/// Shape-independent settings of the aggregation head.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadOptions {
    pub aggregation: AggregationKind,
    pub assignment: AssignmentKind,
    pub sinkhorn: SinkhornOptions,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    alpha: Matrix<T>,
    sinkhorn: Option<SinkhornTrace>,
    residuals: Matrix<T>,
}

/// Forward intermediates of [`head_forward`].
#[derive(Clone, Debug)]
pub struct HeadCache<T = f32> {
    tokens: Matrix<T>,
    blocks: Vec<BlockCache<T>>,
    /// Assignment diagnostics per block.
    pub assignments: Vec<(f64, bool)>,
}

#[derive(Clone, Debug)]
pub struct HeadGrads<T = f32> {
    pub d_tokens: Matrix<T>,
    pub d_queries: Vec<Matrix<T>>,
    pub d_projection: Option<Matrix<T>>,
}

/// Full aggregation: scores, assignment, pooling for every block, then the
/// descriptor.
pub fn head_forward<T: Scalar>(
    tokens: &Matrix<T>,
    queries: &[&Matrix<T>],
    projection: Option<&Matrix<T>>,
    opts: &HeadOptions,
) -> Result<(GlobalDescriptor<T>, HeadCache<T>)> {
    let mut blocks = Vec::with_capacity(queries.len());
    let mut assignments = Vec::with_capacity(queries.len());
    for q in queries {
        let scores = similarity_scores(tokens, q)?;
        let (assignment, trace) = match opts.assignment {
            AssignmentKind::Softmax => (assign_softmax(&scores)?, None),
            AssignmentKind::Sinkhorn => {
                let (a, t) = sinkhorn_forward(&scores, opts.sinkhorn.iters, opts.sinkhorn.tol)?;
                (a, Some(t))
            }
        };
        let residuals = match opts.aggregation {
            AggregationKind::Vlaq => aggregate_vlaq(tokens, q, &assignment.alpha)?,
            AggregationKind::Boq => aggregate_boq(tokens, &assignment.alpha)?,
        };
        assignments.push((assignment.marginal_error, assignment.converged));
        blocks.push(BlockCache {
            alpha: assignment.alpha,
            sinkhorn: trace,
            residuals,
        });
    }
    let residuals: Vec<Matrix<T>> = blocks.iter().map(|b| b.residuals.clone()).collect();
    let descriptor = build_descriptor(&residuals, projection)?;
    Ok((
        descriptor,
        HeadCache {
            tokens: tokens.clone(),
            blocks,
            assignments,
        },
    ))
}

pub fn head_backward<T: Scalar>(
    cache: &HeadCache<T>,
    queries: &[&Matrix<T>],
    projection: Option<&Matrix<T>>,
    d_desc: &[T],
    opts: &HeadOptions,
) -> Result<HeadGrads<T>> {
    let residuals: Vec<Matrix<T>> = cache.blocks.iter().map(|b| b.residuals.clone()).collect();
    let (d_blocks, d_projection) = build_descriptor_backward(&residuals, projection, d_desc)?;
    let tokens = &cache.tokens;
    let mut d_tokens = Matrix::zeros(tokens.rows(), tokens.cols());
    let mut d_queries = Vec::with_capacity(queries.len());
    for ((block, q), d_v) in cache.blocks.iter().zip(queries).zip(&d_blocks) {
        let (dt, mut dq, d_alpha) = match opts.aggregation {
            AggregationKind::Vlaq => aggregate_vlaq_backward(tokens, q, &block.alpha, d_v)?,
            AggregationKind::Boq => {
                let (dt, da) = aggregate_boq_backward(tokens, &block.alpha, d_v)?;
                (dt, Matrix::zeros(q.rows(), q.cols()), da)
            }
        };
        let d_scores = match &block.sinkhorn {
            None => softmax_columns_backward(&block.alpha, &d_alpha),
            Some(trace) => sinkhorn_backward(trace, &d_alpha),
        };
        let (dt_scores, dq_scores) = similarity_scores_backward(tokens, q, &d_scores)?;
        d_tokens.add_assign(&dt)?;
        d_tokens.add_assign(&dt_scores)?;
        dq.add_assign(&dq_scores)?;
        d_queries.push(dq);
    }
    Ok(HeadGrads {
        d_tokens,
        d_queries,
        d_projection,
    })
}

/// Architecture of the aggregation head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub aggregation: AggregationKind,
    pub assignment: AssignmentKind,
    pub sinkhorn: SinkhornOptions,
    pub blocks: usize,
    pub queries_per_block: usize,
    /// Output width of the optional learned projection; `None` keeps `B·S·d`.
    pub projection_dim: Option<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            aggregation: AggregationKind::Vlaq,
            assignment: AssignmentKind::Softmax,
            sinkhorn: SinkhornOptions::default(),
            blocks: 2,
            queries_per_block: 64,
            projection_dim: None,
        }
    }
}

impl HeadConfig {
    pub fn options(&self) -> HeadOptions {
        HeadOptions {
            aggregation: self.aggregation,
            assignment: self.assignment,
            sinkhorn: self.sinkhorn,
        }
    }

    pub fn descriptor_dim(&self, token_dim: usize) -> usize {
        self.projection_dim
            .unwrap_or(self.blocks * self.queries_per_block * token_dim)
    }
}

/// Learnable query vectors, one `S×d` matrix per block.
#[derive(Clone, Debug)]
pub struct QueryBank {
    pub blocks: Vec<Parameter>,
}

impl QueryBank {
    /// Queries drawn from `N(0, 1/d)`.
    pub fn init(blocks: usize, queries_per_block: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if blocks == 0 || queries_per_block == 0 {
            return Err(Error::config("query bank needs at least one block and one query"));
        }
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let blocks = (0..blocks)
            .map(|b| {
                let m = Matrix::from_fn(queries_per_block, dim, |_, _| normal.sample(rng) as f32);
                Parameter::new(format!("queries.block{b}"), m).without_decay()
            })
            .collect();
        Ok(Self { blocks })
    }

    pub fn queries_per_block(&self) -> usize {
        self.blocks[0].value.rows()
    }
}

/// Trainable aggregation head.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub config: HeadConfig,
    pub queries: QueryBank,
    pub projection: Option<Parameter>,
}

impl Aggregator {
    pub fn init(config: HeadConfig, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let queries = QueryBank::init(config.blocks, config.queries_per_block, dim, rng)?;
        let projection = match config.projection_dim {
            None => None,
            Some(0) => return Err(Error::config("projection_dim must be positive")),
            Some(out) => {
                let input = config.blocks * config.queries_per_block * dim;
                let bound = 1.0 / (input as f64).sqrt();
                let m = Matrix::from_fn(input, out, |_, _| rng.random_range(-bound..bound) as f32);
                Some(Parameter::new("projection.w", m))
            }
        };
        Ok(Self {
            config,
            queries,
            projection,
        })
    }

    fn query_refs(&self) -> Vec<&Matrix> {
        self.queries.blocks.iter().map(|p| &p.value).collect()
    }

    pub fn forward(&self, tokens: &Matrix) -> Result<(GlobalDescriptor, HeadCache)> {
        head_forward(
            tokens,
            &self.query_refs(),
            self.projection.as_ref().map(|p| &p.value),
            &self.config.options(),
        )
    }

    /// Accumulates query/projection gradients; returns the token gradient.
    pub fn backward(&mut self, cache: &HeadCache, d_desc: &[f32]) -> Result<Matrix> {
        let grads = head_backward(
            cache,
            &self.query_refs(),
            self.projection.as_ref().map(|p| &p.value),
            d_desc,
            &self.config.options(),
        )?;
        for (p, g) in self.queries.blocks.iter_mut().zip(&grads.d_queries) {
            p.accumulate(g)?;
        }
        if let (Some(p), Some(g)) = (self.projection.as_mut(), grads.d_projection.as_ref()) {
            p.accumulate(g)?;
        }
        Ok(grads.d_tokens)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.queries.blocks.iter().chain(self.projection.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.queries.blocks.iter_mut().chain(self.projection.as_mut()).collect()
    }
}
