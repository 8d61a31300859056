//! Central finite-difference verification of tape gradients.

use super::{NodeId, Tape, Tensor};
use crate::error::Result;
use crate::rng;
use rand::Rng;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// for a scalar-valued function of a single tensor.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    finite_diff_check_multi(
        |tape, leaves| f(tape, leaves[0]),
        std::slice::from_ref(point),
        step,
    )
}

/// Multi-input variant: checks the gradient w.r.t. every coordinate of every
/// input tensor. Used for end-to-end parameter checks.
pub fn finite_diff_check_multi<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = points.iter().map(|p| tape.leaf(p, true)).collect();
    let root = f(&mut tape, &leaves)?;
    tape.backprop(root)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&l| tape.grad(l).expect("leaf requires grad").to_vec())
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ls: Vec<NodeId> = perturbed.iter().map(|p| t.leaf(p, false)).collect();
        let r = f(&mut t, &ls)?;
        Ok(t.scalar_value(r))
    };

    let mut work: Vec<Tensor> = points.to_vec();
    let mut worst = 0.0_f64;
    for ti in 0..points.len() {
        for ci in 0..points[ti].data.len() {
            let orig = work[ti].data[ci];
            work[ti].data[ci] = orig + step;
            let fp = eval(&work)?;
            work[ti].data[ci] = orig - step;
            let fm = eval(&work)?;
            work[ti].data[ci] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[ti][ci];
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Outcome of one op's finite-difference probe.
#[derive(Debug, Clone, serde::Serialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_err: f64,
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape,
        data: (0..n).map(|_| rng::normal(rng)).collect(),
    }
}

/// Reduce an arbitrary node to a scalar that depends on every entry
/// non-uniformly, so index bugs in forward/backward show up.
fn weighted_mean(tape: &mut Tape, x: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = tape.leaf(weights, false);
    let prod = tape.mul(x, w)?;
    Ok(tape.mean(prod))
}

/// Finite-difference probe for every registered op kind, `points` random
/// points each; returns the worst relative error per op.
pub fn op_gradient_suite(seed: u64, points: usize) -> Result<Vec<OpCheck>> {
    let mut rng = rng::stream(seed, "gradcheck-ops");
    let mut results = Vec::new();
    let step = DEFAULT_FD_STEP;

    // Each entry: (name, input shapes, graph builder over those leaves).
    type Builder = Box<dyn Fn(&mut Tape, &[NodeId], &Tensor) -> Result<NodeId>>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Vec<usize>, Builder)> = vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 5]],
            vec![3, 5],
            Box::new(|t, l, w| {
                let y = t.matmul(l[0], l[1])?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "transpose",
            vec![vec![3, 5]],
            vec![5, 3],
            Box::new(|t, l, w| {
                let y = t.transpose(l[0])?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "add",
            vec![vec![4, 3], vec![4, 3]],
            vec![4, 3],
            Box::new(|t, l, w| {
                let y = t.add(l[0], l[1])?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "add-row",
            vec![vec![4, 3], vec![3]],
            vec![4, 3],
            Box::new(|t, l, w| {
                let y = t.add_row(l[0], l[1])?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "mul-row",
            vec![vec![4, 3], vec![3]],
            vec![4, 3],
            Box::new(|t, l, w| {
                let y = t.mul_row(l[0], l[1])?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "scale",
            vec![vec![4, 3]],
            vec![4, 3],
            Box::new(|t, l, w| {
                let y = t.scale(l[0], -1.7);
                weighted_mean(t, y, w)
            }),
        ),
        (
            "elementwise-mul",
            vec![vec![4, 3], vec![4, 3]],
            vec![4, 3],
            Box::new(|t, l, w| {
                let y = t.mul(l[0], l[1])?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "softmax",
            vec![vec![3, 5]],
            vec![3, 5],
            Box::new(|t, l, w| {
                let y = t.softmax(l[0])?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "log-softmax",
            vec![vec![3, 5]],
            vec![3, 5],
            Box::new(|t, l, w| {
                let y = t.log_softmax(l[0])?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "layer-norm",
            vec![vec![3, 6]],
            vec![3, 6],
            Box::new(|t, l, w| {
                let y = t.layer_norm(l[0], 1e-5)?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "gelu-or-tanh",
            vec![vec![4, 3]],
            vec![4, 3],
            Box::new(|t, l, w| {
                let y = t.tanh(l[0]);
                weighted_mean(t, y, w)
            }),
        ),
        (
            "embedding-gather",
            vec![vec![6, 4]],
            vec![5, 4],
            Box::new(|t, l, w| {
                let y = t.gather(l[0], &[0, 3, 3, 5, 1])?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "concat-rows",
            vec![vec![2, 3], vec![4, 3]],
            vec![6, 3],
            Box::new(|t, l, w| {
                let y = t.concat_rows(l[0], l[1])?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "concat-cols",
            vec![vec![3, 2], vec![3, 4]],
            vec![3, 6],
            Box::new(|t, l, w| {
                let y = t.concat_cols(l[0], l[1])?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "stack-rows",
            vec![vec![3], vec![2, 3], vec![3]],
            vec![4, 3],
            Box::new(|t, l, w| {
                let y = t.stack_rows(l)?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "slice-rows",
            vec![vec![5, 3]],
            vec![2, 3],
            Box::new(|t, l, w| {
                let y = t.slice_rows(l[0], 1, 3)?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "slice-cols",
            vec![vec![3, 5]],
            vec![3, 2],
            Box::new(|t, l, w| {
                let y = t.slice_cols(l[0], 2, 4)?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "squared-l2-norm",
            vec![vec![4, 3]],
            vec![1],
            Box::new(|t, l, _| Ok(t.sq_norm(l[0]))),
        ),
        (
            "mean",
            vec![vec![4, 3]],
            vec![1],
            Box::new(|t, l, _| Ok(t.mean(l[0]))),
        ),
        (
            "cross-entropy-with-logits",
            vec![vec![5]],
            vec![1],
            Box::new(|t, l, _| t.cross_entropy_with_logits(l[0], 2)),
        ),
        (
            "log-sum-exp",
            vec![vec![7]],
            vec![1],
            Box::new(|t, l, _| Ok(t.log_sum_exp(l[0]))),
        ),
        (
            "log-sum-exp-rows",
            vec![vec![3, 4]],
            vec![3],
            Box::new(|t, l, w| {
                let y = t.log_sum_exp_rows(l[0])?;
                weighted_mean(t, y, w)
            }),
        ),
        (
            "reshape",
            vec![vec![4, 3]],
            vec![2, 6],
            Box::new(|t, l, w| {
                let y = t.reshape(l[0], vec![2, 6])?;
                weighted_mean(t, y, w)
            }),
        ),
    ];

    for (name, shapes, wshape, build) in cases {
        let mut worst = 0.0_f64;
        for _ in 0..points {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| rand_tensor(&mut rng, s.clone()))
                .collect();
            let weights = rand_tensor(&mut rng, wshape.clone());
            let err = finite_diff_check_multi(
                |t, leaves| build(t, leaves, &weights),
                &inputs,
                step,
            )?;
            worst = worst.max(err);
        }
        results.push(OpCheck {
            op: name.to_string(),
            max_rel_err: worst,
        });
    }
    Ok(results)
}
