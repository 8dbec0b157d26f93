//! Finite-difference verification of every analytic backward pass.
//!
//! Each op is exercised on seeded random instances with `M ≤ 8`, `d ≤ 6`,
//! `S ≤ 4`. Inputs are drawn as f32 values and evaluated in f64, the scalar
//! objective is a random weighting of the op's output, and the analytic
//! gradient of that objective is compared with central differences.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregation::{
    aggregate_boq, aggregate_boq_backward, aggregate_vlaq, aggregate_vlaq_backward, assign_softmax, build_descriptor,
    build_descriptor_backward, head_backward, head_forward, similarity_scores, similarity_scores_backward,
    sinkhorn_backward, sinkhorn_forward, AggregationKind, AssignmentKind, HeadOptions, SinkhornOptions,
};
use crate::error::Result;
use crate::fusion::{fuse_tokens, fuse_tokens_backward, FilmWeights, FusionWeights};
use crate::gradcheck::{finite_diff_check, FiniteDiffOptions};
use crate::loss::{mine_pairs, ms_loss, similarity_backward, MinedPairs, MsParams};
use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, normalize_rows, softmax_columns_backward, Matrix};

/// Maximum relative error accepted by the suite.
pub const GRADCHECK_TOL: f64 = 1e-3;

/// Every op the suite covers, in report order.
pub const OPS: [&str; 14] = [
    "fusion.residual",
    "fusion.add",
    "fusion.film",
    "fusion.adapter",
    "aggregation.vlaq.softmax",
    "aggregation.boq.softmax",
    "aggregation.vlaq.sinkhorn",
    "aggregation.boq.sinkhorn",
    "descriptor.normalize",
    "descriptor.projection",
    "head.vlaq",
    "loss.similarity",
    "loss.ms",
    "model.residual",
];

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    pub tolerance: f64,
    /// Corrupts the analytic gradient of the named op, so tests can confirm
    /// that a wrong backward is caught.
    pub perturb: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 5,
            tolerance: GRADCHECK_TOL,
            perturb: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
    pub seconds: f64,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.ops.iter().map(|o| o.max_rel_err).fold(0.0, f64::max)
    }

    pub fn get(&self, op: &str) -> Option<&OpReport> {
        self.ops.iter().find(|o| o.op == op)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("op instances coords max_rel_err status\n");
        for o in &self.ops {
            s.push_str(&format!(
                "{} {} {} {:.3e} {}\n",
                o.op,
                o.instances,
                o.coords,
                o.max_rel_err,
                if o.passed { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

type Objective = Box<dyn Fn(&[f64]) -> Result<f64>>;
type Gradient = Box<dyn Fn(&[f64]) -> Result<Vec<f64>>>;

/// A scalar objective over a flat parameter vector with its analytic gradient.
struct Problem {
    theta: Vec<f64>,
    h: f64,
    eval: Objective,
    grad: Gradient,
}

/// Splits a flat vector into matrices of the given shapes.
fn unpack(theta: &[f64], shapes: &[(usize, usize)]) -> Vec<Matrix<f64>> {
    let mut at = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let m = Matrix::from_vec(r, c, theta[at..at + r * c].to_vec()).expect("packed shape");
            at += r * c;
            m
        })
        .collect()
}

fn pack(parts: &[&Matrix<f64>]) -> Vec<f64> {
    parts.iter().flat_map(|m| m.data().iter().copied()).collect()
}

/// Uniform values in `[-scale, scale]`, rounded through f32.
fn sample(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| {
        let x: f32 = rng.random_range(-1.0f32..1.0);
        (x as f64) * scale
    })
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let mut m = sample(rng, rows, cols, 1.0);
    normalize_rows(&mut m);
    m
}

fn weighted(r: &Matrix<f64>, out: &Matrix<f64>) -> f64 {
    dot(r.data(), out.data())
}

struct Dims {
    m: usize,
    d: usize,
    s: usize,
}

fn dims(rng: &mut ChaCha8Rng) -> Dims {
    Dims {
        m: rng.random_range(3..=8),
        d: rng.random_range(2..=6),
        s: rng.random_range(2..=4),
    }
}

fn fusion_weights<'a>(variant: &str, p: &'a [Matrix<f64>]) -> FusionWeights<'a, f64> {
    match variant {
        "residual" => FusionWeights::Residual {
            w: &p[2],
            b: p[3].data(),
        },
        "add" => FusionWeights::NaiveAdd,
        _ => FusionWeights::Film(FilmWeights {
            gamma_w: &p[2],
            gamma_b: p[3].data(),
            beta_w: &p[4],
            beta_b: p[5].data(),
        }),
    }
}

fn fusion_problem(rng: &mut ChaCha8Rng, variant: &str) -> Problem {
    let Dims { m, d, .. } = dims(rng);
    let dino = unit_rows(rng, m, d);
    let clip = unit_rows(rng, m, d);
    let r = sample(rng, m, d, 1.0);
    let tok = [(m, d), (m, d)];
    let (shapes, params): (Vec<(usize, usize)>, Vec<Matrix<f64>>) = match variant {
        "residual" => (
            [&tok[..], &[(d, d), (1, d)]].concat(),
            vec![sample(rng, d, d, 0.5), sample(rng, 1, d, 0.5)],
        ),
        "add" => (tok.to_vec(), Vec::new()),
        _ => (
            [&tok[..], &[(d, d), (1, d), (d, d), (1, d)]].concat(),
            vec![
                sample(rng, d, d, 0.5),
                sample(rng, 1, d, 0.5),
                sample(rng, d, d, 0.5),
                sample(rng, 1, d, 0.5),
            ],
        ),
    };
    let mut parts = vec![&dino, &clip];
    parts.extend(params.iter());
    let theta = pack(&parts);
    let (k1, k2) = (variant.to_string(), variant.to_string());
    let (s1, s2, r1) = (shapes.clone(), shapes, r.clone());
    Problem {
        theta,
        h: 1e-3,
        eval: Box::new(move |t| {
            let p = unpack(t, &s1);
            Ok(weighted(&r1, &fuse_tokens(&p[0], &p[1], &fusion_weights(&k1, &p))?))
        }),
        grad: Box::new(move |t| {
            let p = unpack(t, &s2);
            let g = fuse_tokens_backward(&p[0], &p[1], &fusion_weights(&k2, &p), &r)?;
            let mut parts = vec![&g.d_dino, &g.d_clip];
            parts.extend(g.params.iter());
            Ok(pack(&parts))
        }),
    }
}

fn adapter_problem(rng: &mut ChaCha8Rng) -> Problem {
    let Dims { m, d, .. } = dims(rng);
    let dc = rng.random_range(2..=6);
    let dino = unit_rows(rng, m, d);
    let w = sample(rng, d, d, 0.5);
    let b = sample(rng, 1, d, 0.5);
    let r = sample(rng, m, d, 1.0);
    let clip_raw = unit_rows(rng, m, dc);
    let adapter = sample(rng, dc, d, 0.5);
    let shapes = vec![(m, dc), (dc, d)];
    let theta = pack(&[&clip_raw, &adapter]);
    let (s1, dino1, w1, b1, r1) = (shapes.clone(), dino.clone(), w.clone(), b.clone(), r.clone());
    Problem {
        theta,
        h: 1e-3,
        eval: Box::new(move |t| {
            let p = unpack(t, &s1);
            let clip = matmul(&p[0], &p[1])?;
            let weights = FusionWeights::Residual { w: &w1, b: b1.data() };
            Ok(weighted(&r1, &fuse_tokens(&dino1, &clip, &weights)?))
        }),
        grad: Box::new(move |t| {
            let p = unpack(t, &shapes);
            let clip = matmul(&p[0], &p[1])?;
            let weights = FusionWeights::Residual { w: &w, b: b.data() };
            let g = fuse_tokens_backward(&dino, &clip, &weights, &r)?;
            let d_raw = matmul_nt(&g.d_clip, &p[1])?;
            let d_adapter = matmul_tn(&p[0], &g.d_clip)?;
            Ok(pack(&[&d_raw, &d_adapter]))
        }),
    }
}

/// Iteration budget for Sinkhorn inside the suite; the tolerance is set so
/// that every evaluation runs the same number of steps.
const SINKHORN_CHECK: SinkhornOptions = SinkhornOptions {
    iters: 30,
    tol: f64::MIN_POSITIVE,
};

/// One block: scores, assignment, pooling. Returns the residual matrix.
fn block_forward(tokens: &Matrix<f64>, queries: &Matrix<f64>, opts: &HeadOptions) -> Result<Matrix<f64>> {
    let scores = similarity_scores(tokens, queries)?;
    let alpha = match opts.assignment {
        AssignmentKind::Softmax => assign_softmax(&scores)?.alpha,
        AssignmentKind::Sinkhorn => {
            sinkhorn_forward(&scores, opts.sinkhorn.iters, opts.sinkhorn.tol)?
                .0
                .alpha
        }
    };
    match opts.aggregation {
        AggregationKind::Vlaq => aggregate_vlaq(tokens, queries, &alpha),
        AggregationKind::Boq => aggregate_boq(tokens, &alpha),
    }
}

fn block_backward(
    tokens: &Matrix<f64>,
    queries: &Matrix<f64>,
    opts: &HeadOptions,
    d_v: &Matrix<f64>,
) -> Result<Vec<f64>> {
    let scores = similarity_scores(tokens, queries)?;
    let (alpha, trace) = match opts.assignment {
        AssignmentKind::Softmax => (assign_softmax(&scores)?.alpha, None),
        AssignmentKind::Sinkhorn => {
            let (a, t) = sinkhorn_forward(&scores, opts.sinkhorn.iters, opts.sinkhorn.tol)?;
            (a.alpha, Some(t))
        }
    };
    let (mut dt, mut dq, d_alpha) = match opts.aggregation {
        AggregationKind::Vlaq => aggregate_vlaq_backward(tokens, queries, &alpha, d_v)?,
        AggregationKind::Boq => {
            let (dt, da) = aggregate_boq_backward(tokens, &alpha, d_v)?;
            (dt, Matrix::zeros(queries.rows(), queries.cols()), da)
        }
    };
    let d_scores = match &trace {
        None => softmax_columns_backward(&alpha, &d_alpha),
        Some(t) => sinkhorn_backward(t, &d_alpha),
    };
    let (dts, dqs) = similarity_scores_backward(tokens, queries, &d_scores)?;
    dt.add_assign(&dts)?;
    dq.add_assign(&dqs)?;
    Ok(pack(&[&dt, &dq]))
}

fn block_problem(rng: &mut ChaCha8Rng, aggregation: AggregationKind, assignment: AssignmentKind) -> Problem {
    let Dims { m, d, s } = dims(rng);
    let tokens = unit_rows(rng, m, d);
    let queries = sample(rng, s, d, 1.0);
    let r = sample(rng, s, d, 1.0);
    let opts = HeadOptions {
        aggregation,
        assignment,
        sinkhorn: SINKHORN_CHECK,
    };
    let shapes = vec![(m, d), (s, d)];
    let (s1, r1) = (shapes.clone(), r.clone());
    Problem {
        theta: pack(&[&tokens, &queries]),
        h: 1e-3,
        eval: Box::new(move |t| {
            let p = unpack(t, &s1);
            Ok(weighted(&r1, &block_forward(&p[0], &p[1], &opts)?))
        }),
        grad: Box::new(move |t| {
            let p = unpack(t, &shapes);
            block_backward(&p[0], &p[1], &opts, &r)
        }),
    }
}

fn descriptor_problem(rng: &mut ChaCha8Rng, with_projection: bool) -> Problem {
    let Dims { d, s, .. } = dims(rng);
    let blocks = 2;
    let flat = blocks * s * d;
    let out = if with_projection { rng.random_range(2..=6) } else { flat };
    let mut shapes = vec![(s, d); blocks];
    let mut parts: Vec<Matrix<f64>> = (0..blocks).map(|_| sample(rng, s, d, 1.0)).collect();
    if with_projection {
        shapes.push((flat, out));
        parts.push(sample(rng, flat, out, 0.5));
    }
    let r: Vec<f64> = sample(rng, 1, out, 1.0).into_data();
    let theta = pack(&parts.iter().collect::<Vec<_>>());
    let (s1, r1) = (shapes.clone(), r.clone());
    Problem {
        theta,
        h: 1e-3,
        eval: Box::new(move |t| {
            let p = unpack(t, &s1);
            let g = build_descriptor(&p[..blocks], p.get(blocks))?;
            Ok(dot(&r1, &g.values))
        }),
        grad: Box::new(move |t| {
            let p = unpack(t, &shapes);
            let (db, dp) = build_descriptor_backward(&p[..blocks], p.get(blocks), &r)?;
            let mut parts: Vec<&Matrix<f64>> = db.iter().collect();
            parts.extend(dp.as_ref());
            Ok(pack(&parts))
        }),
    }
}

fn head_problem(rng: &mut ChaCha8Rng) -> Problem {
    let Dims { m, d, s } = dims(rng);
    let tokens = unit_rows(rng, m, d);
    let q0 = sample(rng, s, d, 1.0);
    let q1 = sample(rng, s, d, 1.0);
    let r = sample(rng, 1, 2 * s * d, 1.0).into_data();
    let opts = HeadOptions::default();
    let shapes = vec![(m, d), (s, d), (s, d)];
    let (s1, r1) = (shapes.clone(), r.clone());
    Problem {
        theta: pack(&[&tokens, &q0, &q1]),
        h: 1e-3,
        eval: Box::new(move |t| {
            let p = unpack(t, &s1);
            let (g, _) = head_forward(&p[0], &[&p[1], &p[2]], None, &opts)?;
            Ok(dot(&r1, &g.values))
        }),
        grad: Box::new(move |t| {
            let p = unpack(t, &shapes);
            let qs = [&p[1], &p[2]];
            let (_, cache) = head_forward(&p[0], &qs, None, &opts)?;
            let g = head_backward(&cache, &qs, None, &r, &opts)?;
            let mut parts = vec![&g.d_tokens];
            parts.extend(g.d_queries.iter());
            Ok(pack(&parts))
        }),
    }
}

fn similarity_problem(rng: &mut ChaCha8Rng) -> Problem {
    let n = rng.random_range(3..=8);
    let d = rng.random_range(2..=6);
    let desc = unit_rows(rng, n, d);
    let r = sample(rng, n, n, 1.0);
    let r1 = r.clone();
    Problem {
        theta: desc.data().to_vec(),
        h: 1e-3,
        eval: Box::new(move |t| {
            let g = Matrix::from_vec(n, d, t.to_vec())?;
            Ok(weighted(&r1, &matmul_nt(&g, &g)?))
        }),
        grad: Box::new(move |t| {
            // descriptors are rounded to f32 by the batch path; the check
            // point is f32-representable by construction
            let g: Matrix = Matrix::from_vec(n, d, t.to_vec())?.cast();
            Ok(similarity_backward(&g, &r).cast::<f64>().into_data())
        }),
    }
}

fn ms_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let places = rng.random_range(2..=4);
    let per = 2;
    let n = places * per;
    let d = rng.random_range(2..=6);
    let labels: Vec<usize> = (0..n).map(|i| i / per).collect();
    let desc = unit_rows(rng, n, d);
    let sim = matmul_nt(&desc, &desc)?;
    let p = MsParams::default();
    // mining is piecewise constant; differentiate with the mined set fixed
    let mined: MinedPairs = mine_pairs(&sim, &labels, p.epsilon)?;
    let mined1 = mined.clone();
    Ok(Problem {
        theta: sim.data().to_vec(),
        h: 1e-4,
        eval: Box::new(move |t| Ok(ms_loss(&Matrix::from_vec(n, n, t.to_vec())?, &mined1, &p).loss)),
        grad: Box::new(move |t| {
            Ok(ms_loss(&Matrix::from_vec(n, n, t.to_vec())?, &mined, &p)
                .d_sim
                .into_data())
        }),
    })
}

/// Residual fusion followed by a two-block VLAQ head with projection, with
/// respect to every trainable tensor.
fn model_problem(rng: &mut ChaCha8Rng) -> Problem {
    let Dims { m, d, s } = dims(rng);
    let dino = unit_rows(rng, m, d);
    let clip = unit_rows(rng, m, d);
    let out = rng.random_range(2..=6);
    let parts = [
        sample(rng, d, d, 0.5),
        sample(rng, 1, d, 0.5),
        sample(rng, s, d, 1.0),
        sample(rng, s, d, 1.0),
        sample(rng, 2 * s * d, out, 0.5),
    ];
    let r = sample(rng, 1, out, 1.0).into_data();
    let shapes: Vec<(usize, usize)> = parts.iter().map(|p| p.shape()).collect();
    let theta = pack(&parts.iter().collect::<Vec<_>>());
    let opts = HeadOptions::default();
    let (s1, r1, dino1, clip1) = (shapes.clone(), r.clone(), dino.clone(), clip.clone());
    Problem {
        theta,
        h: 1e-3,
        eval: Box::new(move |t| {
            let p = unpack(t, &s1);
            let z = fuse_tokens(
                &dino1,
                &clip1,
                &FusionWeights::Residual {
                    w: &p[0],
                    b: p[1].data(),
                },
            )?;
            let (g, _) = head_forward(&z, &[&p[2], &p[3]], Some(&p[4]), &opts)?;
            Ok(dot(&r1, &g.values))
        }),
        grad: Box::new(move |t| {
            let p = unpack(t, &shapes);
            let weights = FusionWeights::Residual {
                w: &p[0],
                b: p[1].data(),
            };
            let z = fuse_tokens(&dino, &clip, &weights)?;
            let qs = [&p[2], &p[3]];
            let (_, cache) = head_forward(&z, &qs, Some(&p[4]), &opts)?;
            let hg = head_backward(&cache, &qs, Some(&p[4]), &r, &opts)?;
            let fg = fuse_tokens_backward(&dino, &clip, &weights, &hg.d_tokens)?;
            let d_proj = hg.d_projection.expect("projection gradient");
            Ok(pack(&[
                &fg.params[0],
                &fg.params[1],
                &hg.d_queries[0],
                &hg.d_queries[1],
                &d_proj,
            ]))
        }),
    }
}

fn build_problem(op: &str, rng: &mut ChaCha8Rng) -> Result<Problem> {
    use AggregationKind::{Boq, Vlaq};
    use AssignmentKind::{Sinkhorn, Softmax};
    Ok(match op {
        "fusion.residual" => fusion_problem(rng, "residual"),
        "fusion.add" => fusion_problem(rng, "add"),
        "fusion.film" => fusion_problem(rng, "film"),
        "fusion.adapter" => adapter_problem(rng),
        "aggregation.vlaq.softmax" => block_problem(rng, Vlaq, Softmax),
        "aggregation.boq.softmax" => block_problem(rng, Boq, Softmax),
        "aggregation.vlaq.sinkhorn" => block_problem(rng, Vlaq, Sinkhorn),
        "aggregation.boq.sinkhorn" => block_problem(rng, Boq, Sinkhorn),
        "descriptor.normalize" => descriptor_problem(rng, false),
        "descriptor.projection" => descriptor_problem(rng, true),
        "head.vlaq" => head_problem(rng),
        "loss.similarity" => similarity_problem(rng),
        "loss.ms" => ms_problem(rng)?,
        "model.residual" => model_problem(rng),
        other => return Err(crate::error::Error::invalid(format!("unknown gradcheck op {other}"))),
    })
}

fn check_op(op: &str, opts: &GradcheckOptions) -> Result<OpReport> {
    let mut worst = 0.0f64;
    let mut coords = 0;
    for instance in 0..opts.instances {
        let salt = op.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt);
        rng.set_stream(instance as u64);
        let problem = build_problem(op, &mut rng)?;
        let mut analytic = (problem.grad)(&problem.theta)?;
        if opts.perturb.as_deref() == Some(op) {
            analytic[0] = analytic[0] * 1.1 + 1e-2;
        }
        let mut failure = None;
        let report = finite_diff_check(
            &problem.theta,
            &analytic,
            |t| match (problem.eval)(t) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            },
            &FiniteDiffOptions {
                h: problem.h,
                max_coords: 0,
            },
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(report.max_rel_err);
        coords += report.checked;
    }
    Ok(OpReport {
        op: op.to_string(),
        instances: opts.instances,
        coords,
        max_rel_err: worst,
        passed: worst <= opts.tolerance,
    })
}

/// Runs the full suite.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckSummary> {
    let start = Instant::now();
    let ops = OPS.iter().map(|op| check_op(op, opts)).collect::<Result<Vec<_>>>()?;
    Ok(GradcheckSummary {
        tolerance: opts.tolerance,
        ops,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let s = run_gradcheck(&GradcheckOptions::default()).unwrap();
        assert!(s.passed(), "{}", s.to_table());
        assert_eq!(s.ops.len(), OPS.len());
    }

    #[test]
    fn perturbed_gradient_fails_only_its_op() {
        let s = run_gradcheck(&GradcheckOptions {
            instances: 1,
            perturb: Some("fusion.film".into()),
            ..GradcheckOptions::default()
        })
        .unwrap();
        assert!(!s.passed());
        assert!(!s.get("fusion.film").unwrap().passed);
        assert!(s.get("fusion.residual").unwrap().passed);
    }
}
