//! Central finite-difference verification of reverse-mode gradients (64-bit).

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::Session;
use crate::model::{NetworkConfig, RidNet};
use crate::tensor::Tensor;

/// Perturbation used for the central difference.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because the loss is not differentiable there
    /// (a ReLU / soft-shrink / ℓ1 kink lies within one step).
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.checked > 0
    }

    /// Folds another report for the same op into this one.
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradient of `build`'s scalar output with respect to every
/// tensor in `inputs` against central differences.
///
/// `build` receives a fresh graph and one leaf per input and must return a
/// scalar loss. When `max_coords` is set, at most that many coordinates per
/// input are sampled; otherwise every coordinate is checked.
pub fn check<R: Rng>(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = build(&mut graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| graph.grad(v).cloned().expect("leaf gradient"))
        .collect();
    let base = graph.value(loss).data()[0];
    drop(graph);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vs)?;
        Ok(g.value(l).data()[0])
    };

    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < input.len() => index::sample(rng, input.len(), k).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;

            let forward = (plus - base) / STEP;
            let backward = (base - minus) / STEP;
            let numeric = (plus - minus) / (2.0 * STEP);
            // One-sided slopes of a smooth function differ by O(step); a kink
            // shows up as a jump far larger than that.
            let curvature_gap = (forward - backward).abs();
            if curvature_gap > 1e-3 * forward.abs().max(backward.abs()).max(1e-2) {
                report.skipped += 1;
                continue;
            }
            let err = relative_error(analytic[i].data()[j], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces `out` to a scalar through a fixed random weighting, so every
/// output element contributes a distinct sensitivity.
fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn unary<R: Rng>(
    name: &str,
    x: Tensor<f64>,
    op: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut probe = Graph::new();
    let xv = probe.constant(x.clone());
    let out = op(&mut probe, xv)?;
    let w = uniform(probe.shape(out), -1.0, 1.0, rng);
    check(
        name,
        &[x],
        |g, v| {
            let y = op(g, v[0])?;
            weighted_sum(g, y, &w)
        },
        None,
        rng,
    )
}

fn binary<R: Rng>(
    name: &str,
    a: Tensor<f64>,
    b: Tensor<f64>,
    op: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut probe = Graph::new();
    let (av, bv) = (probe.constant(a.clone()), probe.constant(b.clone()));
    let out = op(&mut probe, av, bv)?;
    let w = uniform(probe.shape(out), -1.0, 1.0, rng);
    check(
        name,
        &[a, b],
        |g, v| {
            let y = op(g, v[0], v[1])?;
            weighted_sum(g, y, &w)
        },
        None,
        rng,
    )
}

/// Checks every differentiable graph op on random inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    for d in 1..=4 {
        let x = uniform(&[2, 3, 7, 6], -1.0, 1.0, r);
        let w = uniform(&[4, 3, 3, 3], -1.0, 1.0, r);
        let b = uniform(&[4], -1.0, 1.0, r);
        let mut probe = Graph::new();
        let (xv, wv, bv) = (
            probe.constant(x.clone()),
            probe.constant(w.clone()),
            probe.constant(b.clone()),
        );
        let y = probe.conv2d(xv, wv, Some(bv), d)?;
        let weights = uniform(probe.shape(y), -1.0, 1.0, r);
        out.push(check(
            &format!("conv2d_d{d}"),
            &[x, w, b],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), d)?;
                weighted_sum(g, y, &weights)
            },
            None,
            r,
        )?);
    }
    let x = uniform(&[2, 3, 5, 4], -1.0, 1.0, r);
    let w = uniform(&[4, 3, 1, 1], -1.0, 1.0, r);
    out.push(binary(
        "conv2d_1x1",
        x,
        w,
        |g, a, b| g.conv2d(a, b, None, 1),
        r,
    )?);

    out.push(unary(
        "global_avg_pool",
        uniform(&[2, 3, 4, 5], -1.0, 1.0, r),
        |g, x| g.global_avg_pool(x),
        r,
    )?);
    out.push(unary(
        "soft_shrink",
        uniform(&[2, 3, 4, 4], -2.0, 2.0, r),
        |g, x| g.soft_shrink(x, 0.5),
        r,
    )?);
    out.push(unary(
        "sigmoid",
        uniform(&[2, 3, 4, 4], -4.0, 4.0, r),
        |g, x| Ok(g.sigmoid(x)),
        r,
    )?);
    out.push(unary(
        "relu",
        uniform(&[2, 3, 4, 4], -1.0, 1.0, r),
        |g, x| Ok(g.relu(x)),
        r,
    )?);

    let pair = |r: &mut ChaCha8Rng| {
        (
            uniform(&[2, 3, 4, 4], -1.0, 1.0, r),
            uniform(&[2, 3, 4, 4], -1.0, 1.0, r),
        )
    };
    let (a, b) = pair(r);
    out.push(binary("add", a, b, |g, a, b| g.add(a, b), r)?);
    let (a, b) = pair(r);
    out.push(binary("sub", a, b, |g, a, b| g.sub(a, b), r)?);
    let (a, b) = pair(r);
    out.push(binary("mul", a, b, |g, a, b| g.mul(a, b), r)?);
    let (a, b) = (
        uniform(&[2, 3, 4, 4], -1.0, 1.0, r),
        uniform(&[2, 3, 1, 1], 0.0, 1.0, r),
    );
    out.push(binary(
        "mul_broadcast",
        a,
        b,
        |g, a, b| g.mul_broadcast(a, b),
        r,
    )?);
    let (a, b) = (
        uniform(&[2, 2, 4, 4], -1.0, 1.0, r),
        uniform(&[2, 3, 4, 4], -1.0, 1.0, r),
    );
    out.push(binary(
        "concat_channels",
        a,
        b,
        |g, a, b| g.concat_channels(a, b),
        r,
    )?);

    let x = uniform(&[3, 4], -1.0, 1.0, r);
    out.push(check("sum", &[x], |g, v| Ok(g.sum(v[0])), None, r)?);
    let (a, b) = pair(r);
    out.push(check(
        "l1_loss",
        &[a, b],
        |g, v| g.l1_loss(v[0], v[1]),
        None,
        r,
    )?);
    Ok(out)
}

/// End-to-end check of a freshly initialized network: gradients of a
/// weighted output sum with respect to the input and a sample of
/// `coords_per_tensor` coordinates of every parameter tensor.
pub fn network_check(
    config: &NetworkConfig,
    seed: u64,
    size: usize,
    coords_per_tensor: usize,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = RidNet::<f64>::init(config.clone(), seed)?;
    let x = uniform(&[1, config.in_channels, size, size], 0.0, 1.0, &mut rng);
    let w = uniform(&[1, config.in_channels, size, size], -1.0, 1.0, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(net.params().values().iter().cloned());
    let name = format!("network[{}]", config.ablation);
    check(
        &name,
        &inputs,
        |g, v| {
            let mut s = Session::with_params(g, v[1..].to_vec());
            let y = net.forward_in(&mut s, v[0])?;
            weighted_sum(g, y, &w)
        },
        Some(coords_per_tensor),
        &mut rng,
    )
}
