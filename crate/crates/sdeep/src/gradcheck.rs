//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker takes a builder closure that wires a scalar loss from a single
//! point tensor, runs backward once for the analytic gradient, then probes
//! every coordinate with a symmetric difference quotient. The reported figure
//! is the worst relative error, with the denominator floored at 1 so that
//! near-zero gradients are compared absolutely.

use crate::graph::{Graph, NodeId, Padding};
use crate::model::{AttentionMode, Extraction, Model, ModelConfig, Strategy};
use crate::tensor::{Tensor, TensorError};
use crate::train::{classification_loss, TrainError};
use rand::Rng;
use std::collections::BTreeMap;

/// Default step used by the test-suite checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Error threshold the suite holds gradients to.
pub const TOLERANCE: f64 = 1e-4;

/// Compares the autodiff gradient of `build` at `point` against central
/// finite differences with the given `step`.
///
/// `build` must wire a scalar loss from the leaf it is handed; a non-scalar
/// result is an error. Returns `max_i |g_ad[i] - g_fd[i]| / max(1, |g_fd[i]|)`.
pub fn finite_diff_check<F>(build: F, point: &Tensor, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>,
{
    // Analytic gradient.
    let mut graph = Graph::new();
    let leaf = graph.leaf(point.clone().with_requires_grad());
    let loss = build(&mut graph, leaf)?;
    if graph.value(loss).numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: graph.value(loss).shape().to_vec(),
        });
    }
    graph.backward(loss)?;
    let analytic = graph.grad(leaf).expect("leaf requires grad").to_vec();

    // Central differences, one coordinate at a time.
    let eval = |data: Vec<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(data, point.shape())?);
        let loss = build(&mut g, x)?;
        Ok(g.value(loss).data()[0])
    };

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        plus[i] += step;
        let mut minus = point.data().to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

/// A named differentiation case: a probe point plus a builder wiring a scalar
/// loss from it. Produced by [`op_cases`], checked by [`finite_diff_check`].
pub struct OpCase {
    /// Short operation label, e.g. `"conv1d-same"`.
    pub name: &'static str,
    /// The point the gradient is probed at.
    pub point: Tensor,
    /// Builds the scalar loss from the probe leaf.
    pub build: Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>>,
}

impl OpCase {
    /// Runs the case through [`finite_diff_check`] with [`DEFAULT_STEP`].
    pub fn check(&self) -> Result<f64, TensorError> {
        finite_diff_check(&self.build, &self.point, DEFAULT_STEP)
    }
}

/// One case per differentiable op, each wired into a scalar loss and probed
/// at random points drawn from `rng`. Points and constants are rejection
/// sampled to |x| > 1e-3 so no symmetric difference straddles the relu kink.
pub fn op_cases<R: Rng>(rng: &mut R) -> Vec<OpCase> {
    fn away_from_kink<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| loop {
                let v: f64 = rng.gen_range(-2.0..2.0);
                if v.abs() > 1e-3 {
                    break v;
                }
            })
            .collect()
    }
    let grid = |rng: &mut R| Tensor::new(away_from_kink(rng, 12), &[2, 6]).expect("2x6 point");

    let other = grid(rng);
    let bias_row = Tensor::from_vec(away_from_kink(rng, 6));
    let mat = Tensor::new(away_from_kink(rng, 18), &[6, 3]).expect("6x3 matrix");
    let kernel = Tensor::new(away_from_kink(rng, 6), &[2, 1, 3]).expect("2x1x3 kernel");
    let kbias = Tensor::from_vec(away_from_kink(rng, 2));

    let mut cases: Vec<OpCase> = Vec::new();
    let mut case = |name: &'static str,
                    point: Tensor,
                    build: Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>>| {
        cases.push(OpCase { name, point, build });
    };

    let o = other.clone();
    case(
        "add",
        grid(rng),
        Box::new(move |g, x| {
            let b = g.leaf(o.clone());
            let y = g.add(x, b)?;
            g.sum(y)
        }),
    );
    let b = bias_row.clone();
    case(
        "add-broadcast",
        grid(rng),
        Box::new(move |g, x| {
            let bias = g.leaf(b.clone());
            let y = g.add(x, bias)?;
            g.mean(y)
        }),
    );
    let o = other.clone();
    case(
        "mul",
        grid(rng),
        Box::new(move |g, x| {
            let b = g.leaf(o.clone());
            let y = g.mul(x, b)?;
            g.sum(y)
        }),
    );
    let m = mat.clone();
    case(
        "matmul",
        grid(rng),
        Box::new(move |g, x| {
            let w = g.leaf(m.clone());
            let y = g.matmul(x, w)?;
            g.sum(y)
        }),
    );
    let o = other;
    case(
        "concat-slice",
        grid(rng),
        Box::new(move |g, x| {
            let b = g.leaf(o.clone());
            let c = g.concat(&[x, b], 1)?;
            let s = g.slice(c, 1, 3, 9)?;
            g.sum(s)
        }),
    );
    case(
        "reshape",
        grid(rng),
        Box::new(move |g, x| {
            let r = g.reshape(x, &[3, 4])?;
            g.mean(r)
        }),
    );
    case(
        "tanh",
        grid(rng),
        Box::new(|g, x| {
            let y = g.tanh(x)?;
            g.sum(y)
        }),
    );
    case(
        "sigmoid",
        grid(rng),
        Box::new(|g, x| {
            let y = g.sigmoid(x)?;
            g.sum(y)
        }),
    );
    case(
        "relu",
        grid(rng),
        Box::new(|g, x| {
            let y = g.relu(x)?;
            g.sum(y)
        }),
    );
    case(
        "softmax",
        grid(rng),
        Box::new(|g, x| {
            let y = g.softmax(x)?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        }),
    );
    case("mean", grid(rng), Box::new(|g, x| g.mean(x)));
    case(
        "dropout-mask",
        grid(rng),
        Box::new(move |g, x| {
            // An external 0/scale mask, exactly how dropout is applied.
            let mask = g.leaf(Tensor::new(
                vec![1.25, 0.0, 1.25, 1.25, 0.0, 1.25, 1.25, 1.25, 0.0, 1.25, 0.0, 1.25],
                &[2, 6],
            )?);
            let y = g.mul(x, mask)?;
            g.sum(y)
        }),
    );
    let (w, b) = (kernel.clone(), kbias.clone());
    case(
        "conv1d-same",
        grid(rng),
        Box::new(move |g, x| {
            let xr = g.reshape(x, &[2, 1, 6])?;
            let wk = g.leaf(w.clone());
            let bk = g.leaf(b.clone());
            let y = g.conv1d(xr, wk, bk, 1, Padding::Same)?;
            g.sum(y)
        }),
    );
    let (w, b) = (kernel, kbias);
    case(
        "conv1d-valid-stride2",
        grid(rng),
        Box::new(move |g, x| {
            let xr = g.reshape(x, &[2, 1, 6])?;
            let wk = g.leaf(w.clone());
            let bk = g.leaf(b.clone());
            let y = g.conv1d(xr, wk, bk, 2, Padding::Valid)?;
            g.sum(y)
        }),
    );
    case(
        "softmax-nll",
        grid(rng),
        Box::new(|g, x| {
            let p = g.softmax(x)?;
            g.nll_from_probs(p, &[1, 4])
        }),
    );
    cases
}

/// Worst relative gradient error per parameter of a full model, probed
/// against central finite differences on its classification loss.
pub struct ModelGradReport {
    /// `(parameter name, worst relative error over its coordinates)`.
    pub per_param: Vec<(String, f64)>,
    /// The overall worst relative error.
    pub worst: f64,
}

impl ModelGradReport {
    /// Name and error of the worst-checking parameter.
    pub fn worst_param(&self) -> (&str, f64) {
        self.per_param
            .iter()
            .map(|(name, err)| (name.as_str(), *err))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("models have at least one parameter")
    }
}

/// Checks every parameter gradient of `model` (dropout off) against central
/// finite differences of the total classification loss at step `step`.
///
/// `x` is a `(n, channels, timesteps)` input batch and `labels` its targets;
/// `lambda` weighs the auxiliary head as in training.
pub fn model_grad_check(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    step: f64,
) -> Result<ModelGradReport, TrainError> {
    let loss_value = |m: &Model| -> Result<(Graph, BTreeMap<String, NodeId>, NodeId), TrainError> {
        let mut g = Graph::new();
        let nodes = m.attach(&mut g);
        let xn = g.leaf(x.clone());
        let out = m.forward(&mut g, &nodes, xn, None)?;
        let parts = classification_loss(&mut g, &out, labels, lambda)?;
        Ok((g, nodes, parts.total))
    };

    // Analytic pass: one graph, one backward.
    let (mut g, nodes, total) = loss_value(model)?;
    g.backward(total)?;
    let analytic: BTreeMap<String, Vec<f64>> = nodes
        .iter()
        .map(|(name, &node)| {
            let grad = g.grad(node).expect("parameters require grad").to_vec();
            (name.clone(), grad)
        })
        .collect();

    // Numeric probes: perturb one coordinate at a time on a scratch copy.
    let mut scratch = model.clone();
    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut per_param = Vec::with_capacity(names.len());
    let mut worst = 0.0f64;
    for name in names {
        let n = model.params()[&name].numel();
        let mut param_worst = 0.0f64;
        for i in 0..n {
            let base = model.params()[&name].data()[i];
            let mut probe = |value: f64| -> Result<f64, TrainError> {
                scratch.params_mut().get_mut(&name).expect("same keys").data_mut()[i] = value;
                let (g, _, total) = loss_value(&scratch)?;
                Ok(g.value(total).data()[0])
            };
            let plus = probe(base + step)?;
            let minus = probe(base - step)?;
            scratch.params_mut().get_mut(&name).expect("same keys").data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[&name][i] - numeric).abs() / numeric.abs().max(1.0);
            param_worst = param_worst.max(err);
        }
        worst = worst.max(param_worst);
        per_param.push((name, param_worst));
    }
    Ok(ModelGradReport { per_param, worst })
}

/// A small grouped-extraction, multi-output, same-padded configuration used
/// by the gradient suite: every layer family is exercised — shared conv
/// banks, the attention scorer, and both classifier heads.
pub fn toy_multi_config() -> ModelConfig {
    ModelConfig {
        extraction: Extraction::PerGroup,
        strategy: Strategy::SamePadded,
        attention_mode: AttentionMode::Multi,
        num_channels: 4,
        num_timesteps: 12,
        num_classes: 3,
        channel_groups: vec![vec![0, 1], vec![2, 3]],
        conv_widths: vec![4, 3, 2],
        kernel_lens: vec![],
        d_a: 5,
        head_widths: vec![7],
        dropout_rate: 0.2,
    }
}

/// Random `(n, channels, timesteps)` batch and labels for a model check.
pub fn toy_batch<R: Rng>(
    config: &ModelConfig,
    n: usize,
    rng: &mut R,
) -> (Tensor, Vec<usize>) {
    let numel = n * config.num_channels * config.num_timesteps;
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::new(data, &[n, config.num_channels, config.num_timesteps])
        .expect("shape matches data");
    let labels = (0..n).map(|_| rng.gen_range(0..config.num_classes)).collect();
    (x, labels)
}

/// How far every relu input must stay from zero for a finite-difference
/// comparison of the full model to be meaningful: 20x the largest shift a
/// [`DEFAULT_STEP`] nudge of one parameter can inflict on a relu input (a
/// bias moves its own map by exactly the step; measured cross-stage gains
/// stay below 5). Tighter margins would be safer still, but a toy forward
/// pass holds ~2e3 relu inputs and the smallest one rarely clears 5e-4, so
/// this is the practical ceiling.
pub const RELU_MARGIN: f64 = 2e-4;

/// Draws batches until the model's forward pass keeps every relu input at
/// least [`RELU_MARGIN`] away from its kink, so a parameter nudge of
/// [`DEFAULT_STEP`] cannot cross it.
///
/// At the kink itself the backward pass uses the zero subgradient while a
/// central difference measures the two-sided slope average; the mismatch is
/// inherent to non-differentiability and says nothing about gradient
/// correctness. Exactly-zero relu inputs genuinely occur (zero-initialized
/// biases plus padding and upstream relu outputs, which are exact zeros),
/// so points are redrawn rather than hoping randomness avoids them.
pub fn conditioned_toy_batch<R: Rng>(
    model: &Model,
    n: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>), TrainError> {
    let config = model.config();
    for _ in 0..1000 {
        let (x, labels) = toy_batch(config, n, rng);
        let mut g = Graph::new();
        let nodes = model.attach(&mut g);
        let xn = g.leaf(x.clone());
        model.forward(&mut g, &nodes, xn, None)?;
        if g.relu_input_margin() > RELU_MARGIN {
            return Ok((x, labels));
        }
    }
    Err(TrainError::InvalidData(
        "no smooth evaluation point found in 1000 draws; \
         the model keeps an activation pinned to the relu kink"
            .into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn square_function_checks_out_tightly() {
        // f(x) = x^2 at x = 3: analytic 6, central difference is exact for
        // quadratics up to rounding.
        let err = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &Tensor::from_vec(vec![3.0]),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_diff_check(
            |g, _x| {
                let c = g.leaf(Tensor::from_vec(vec![4.0]));
                g.sum(c)
            },
            &Tensor::from_vec(vec![1.0, 2.0]),
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_build_is_rejected() {
        let err = finite_diff_check(
            |g, x| g.relu(x),
            &Tensor::from_vec(vec![1.0, 2.0]),
            DEFAULT_STEP,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn dense_softmax_cross_entropy_composite() {
        // Feed a 2x3 "weight" point through a fixed input, softmax the rows
        // and take the labelled NLL: the classic classifier tail.
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let point = Tensor::new((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[2, 3]).unwrap();
        let err = finite_diff_check(
            |g, w| {
                let x = g.leaf(Tensor::new(vec![0.5, -1.0, 0.25, 0.75], &[2, 2]).unwrap());
                let logits = g.matmul(x, w)?;
                let probs = g.softmax(logits)?;
                g.nll_from_probs(probs, &[2, 0])
            },
            &point,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= TOLERANCE, "error {err}");
    }

    #[test]
    fn three_layer_composite_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let point =
            Tensor::new((0..8).map(|_| rng.gen_range(-0.9..0.9)).collect(), &[2, 4]).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let w1 = g.leaf(Tensor::new(
                    vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.6, 0.2, -0.1, 0.05, 0.15, -0.25, 0.35],
                    &[4, 3],
                )?);
                let h1 = g.matmul(x, w1)?;
                let a1 = g.tanh(h1)?;
                let w2 = g.leaf(Tensor::new(vec![0.7, -0.3, 0.2, 0.4, -0.6, 0.1], &[3, 2])?);
                let h2 = g.matmul(a1, w2)?;
                let a2 = g.sigmoid(h2)?;
                g.mean(a2)
            },
            &point,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= TOLERANCE, "error {err}");
    }

    /// Every op of the catalogue against central differences at random
    /// points (kink avoidance is built into the catalogue sampling).
    #[test]
    fn every_op_matches_finite_differences_at_random_points() {
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        for round in 0..7 {
            for case in op_cases(&mut rng) {
                let err = case
                    .check()
                    .unwrap_or_else(|e| panic!("{}: {e}", case.name));
                assert!(err <= TOLERANCE, "{} round {round}: error {err}", case.name);
            }
        }
    }

    #[test]
    fn toy_model_parameters_all_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let config = toy_multi_config();
        let model = Model::new(config, 5).unwrap();
        let (x, labels) = conditioned_toy_batch(&model, 3, &mut rng).unwrap();
        let report = model_grad_check(&model, &x, &labels, 0.5, DEFAULT_STEP).unwrap();
        assert!(report.worst <= TOLERANCE, "worst {}", report.worst);
        // every parameter tensor was covered
        assert_eq!(report.per_param.len(), model.params().len());
        let (name, err) = report.worst_param();
        assert!(!name.is_empty());
        assert_eq!(err, report.worst);
    }

    #[test]
    fn catalogue_covers_every_op_once() {
        let names: Vec<&str> = op_cases(&mut ChaCha20Rng::seed_from_u64(0))
            .iter()
            .map(|c| c.name)
            .collect();
        let expected = [
            "add",
            "add-broadcast",
            "mul",
            "matmul",
            "concat-slice",
            "reshape",
            "tanh",
            "sigmoid",
            "relu",
            "softmax",
            "mean",
            "dropout-mask",
            "conv1d-same",
            "conv1d-valid-stride2",
            "softmax-nll",
        ];
        assert_eq!(names, expected);
    }
}

