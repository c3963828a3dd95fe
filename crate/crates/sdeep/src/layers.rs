//! Neural layers wired on top of the computation graph.
//!
//! Three building blocks cover every architecture in this crate:
//!
//! - [`conv_temporal`]: per-channel 1-d convolutions over time where several
//!   channels may share one weight bank. Sharing is expressed by a map from
//!   channel index to bank index; two channels pointing at the same bank are
//!   convolved with byte-identical weights (and their gradients accumulate).
//! - [`dense`]: fully connected layer with an optional activation.
//! - [`channel_attention`]: additive attention that scores each channel's
//!   flattened feature vector with `sigmoid(u . tanh(W h + b))`. Scores are
//!   deliberately NOT normalized across channels — each channel is gated
//!   independently in (0, 1), so "all channels matter" is expressible.

use thiserror::Error;

use crate::graph::{Graph, NodeId, Padding};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("conv block: {0}")]
    InvalidConvSpec(String),

    #[error("attention: {0}")]
    InvalidAttention(String),
}

/// Shape and sharing layout of one temporal convolution stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBlockSpec {
    /// Kernel length; must be odd and positive so `Same` padding is centered.
    pub kernel_len: usize,
    pub in_features: usize,
    pub out_features: usize,
    pub stride: usize,
    pub padding: Padding,
    /// `sharing_map[c]` is the index of the weight bank channel `c` uses.
    pub sharing_map: Vec<usize>,
}

impl ConvBlockSpec {
    /// Number of channels this stage processes.
    pub fn channels(&self) -> usize {
        self.sharing_map.len()
    }

    /// Number of distinct weight banks the sharing map references.
    pub fn bank_count(&self) -> usize {
        self.sharing_map.iter().max().map_or(0, |m| m + 1)
    }

    /// Checks the structural invariants of the spec itself.
    pub fn validate(&self) -> Result<(), LayerError> {
        if self.kernel_len == 0 || self.kernel_len % 2 == 0 {
            return Err(LayerError::InvalidConvSpec(format!(
                "kernel_len must be odd and positive, got {}",
                self.kernel_len
            )));
        }
        if self.stride == 0 {
            return Err(LayerError::InvalidConvSpec("stride must be >= 1".into()));
        }
        if self.in_features == 0 || self.out_features == 0 {
            return Err(LayerError::InvalidConvSpec(
                "feature counts must be positive".into(),
            ));
        }
        if self.sharing_map.is_empty() {
            return Err(LayerError::InvalidConvSpec("sharing map is empty".into()));
        }
        // Every bank index below the maximum must actually be used, so the
        // bank list and the map always describe the same set.
        let banks = self.bank_count();
        for bank in 0..banks {
            if !self.sharing_map.contains(&bank) {
                return Err(LayerError::InvalidConvSpec(format!(
                    "bank {bank} is never referenced by the sharing map {:?}",
                    self.sharing_map
                )));
            }
        }
        Ok(())
    }

    /// Output length for an input of `t_in` steps, if representable.
    pub fn output_len(&self, t_in: usize) -> Result<usize, LayerError> {
        match self.padding {
            Padding::Same => {
                if self.stride != 1 {
                    return Err(LayerError::InvalidConvSpec(
                        "same padding requires stride 1".into(),
                    ));
                }
                Ok(t_in)
            }
            Padding::Valid => {
                if t_in < self.kernel_len {
                    return Err(LayerError::InvalidConvSpec(format!(
                        "series of {t_in} steps shorter than kernel {}",
                        self.kernel_len
                    )));
                }
                Ok((t_in - self.kernel_len) / self.stride + 1)
            }
        }
    }
}

/// Graph nodes of one weight bank: `(weight, bias)` with shapes
/// `(f_out, f_in, k)` and `(f_out)`.
pub type ConvBank = (NodeId, NodeId);

/// Applies one shared-bank temporal convolution stage.
///
/// `x` is `(n, channels, f_in, t)`; each channel is convolved separately with
/// the bank its sharing-map entry selects, and the outputs are restacked to
/// `(n, channels, f_out, t_out)`.
pub fn conv_temporal(
    g: &mut Graph,
    x: NodeId,
    spec: &ConvBlockSpec,
    banks: &[ConvBank],
) -> Result<NodeId, LayerError> {
    spec.validate()?;
    if banks.len() != spec.bank_count() {
        return Err(LayerError::InvalidConvSpec(format!(
            "sharing map references {} banks, {} provided",
            spec.bank_count(),
            banks.len()
        )));
    }
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != spec.channels() || shape[2] != spec.in_features {
        return Err(LayerError::InvalidConvSpec(format!(
            "input {shape:?} does not match {} channels x {} features",
            spec.channels(),
            spec.in_features
        )));
    }
    let (n, t_in) = (shape[0], shape[3]);
    let t_out = spec.output_len(t_in)?;

    let mut per_channel = Vec::with_capacity(spec.channels());
    for (c, &bank) in spec.sharing_map.iter().enumerate() {
        let (w, b) = banks[bank];
        let xc = g.slice(x, 1, c, c + 1)?;
        let xc = g.reshape(xc, &[n, spec.in_features, t_in])?;
        let yc = g.conv1d(xc, w, b, spec.stride, spec.padding)?;
        let yc = g.reshape(yc, &[n, 1, spec.out_features, t_out])?;
        per_channel.push(yc);
    }
    Ok(g.concat(&per_channel, 1)?)
}

/// Activation applied by [`dense`] after the affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

/// Fully connected layer: `activation(x . w + b)`.
///
/// `x` is `(n, in)`, `w` is `(in, out)`, `b` is `(out)`.
pub fn dense(
    g: &mut Graph,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    activation: Activation,
) -> Result<NodeId, LayerError> {
    let affine = g.matmul(x, w)?;
    let affine = g.add(affine, b)?;
    Ok(match activation {
        Activation::Linear => affine,
        Activation::Relu => g.relu(affine)?,
        Activation::Tanh => g.tanh(affine)?,
    })
}

/// Graph nodes of the attention parameters.
///
/// `w` is stored `(n_feat, d_a)` so the per-channel score is a plain matmul;
/// `b` is `(d_a)` and `u` is `(d_a)`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub u: NodeId,
}

/// Everything the attention stage produces for one batch.
pub struct AttentionOutput {
    /// `(n, channels)` matrix of sigmoid gate values.
    pub alphas: NodeId,
    /// Per-channel gates, each `(n, 1)`, in channel order.
    pub per_channel_alpha: Vec<NodeId>,
    /// Per-channel gated features `alpha_i * h_i`, each `(n, n_feat)`.
    pub weighted: Vec<NodeId>,
    /// Attention-pooled feature vector `sum_i alpha_i * h_i`, `(n, n_feat)`.
    pub pooled: NodeId,
}

/// Additive channel attention over per-channel feature vectors.
///
/// `h` is `(n, channels, n_feat)`. For every channel `i` the gate is
/// `alpha_i = sigmoid(u . tanh(W h_i + b))`; gates are independent across
/// channels (no softmax), so they are comparable against the 0.5 midpoint.
pub fn channel_attention(
    g: &mut Graph,
    h: NodeId,
    params: AttentionNodes,
) -> Result<AttentionOutput, LayerError> {
    let shape = g.value(h).shape().to_vec();
    if shape.len() != 3 {
        return Err(LayerError::InvalidAttention(format!(
            "expected features (n, channels, n_feat), got {shape:?}"
        )));
    }
    let (n, channels, n_feat) = (shape[0], shape[1], shape[2]);
    if channels == 0 {
        return Err(LayerError::InvalidAttention("no channels".into()));
    }
    let w_shape = g.value(params.w).shape().to_vec();
    let b_shape = g.value(params.b).shape().to_vec();
    let u_shape = g.value(params.u).shape().to_vec();
    if w_shape.len() != 2 || w_shape[0] != n_feat {
        return Err(LayerError::InvalidAttention(format!(
            "weight {w_shape:?} does not accept features of length {n_feat}"
        )));
    }
    let d_a = w_shape[1];
    if b_shape != [d_a] || u_shape != [d_a] {
        return Err(LayerError::InvalidAttention(format!(
            "bias {b_shape:?} / context {u_shape:?} do not match hidden size {d_a}"
        )));
    }

    let u_col = g.reshape(params.u, &[d_a, 1])?;
    let mut per_channel_alpha = Vec::with_capacity(channels);
    let mut weighted = Vec::with_capacity(channels);
    let mut pooled: Option<NodeId> = None;
    for i in 0..channels {
        let h_i = g.slice(h, 1, i, i + 1)?;
        let h_i = g.reshape(h_i, &[n, n_feat])?;
        let pre = g.matmul(h_i, params.w)?;
        let pre = g.add(pre, params.b)?;
        let act = g.tanh(pre)?;
        let score = g.matmul(act, u_col)?;
        let alpha = g.sigmoid(score)?;
        let gated = g.mul(alpha, h_i)?;
        pooled = Some(match pooled {
            Some(acc) => g.add(acc, gated)?,
            None => gated,
        });
        per_channel_alpha.push(alpha);
        weighted.push(gated);
    }
    let alphas = g.concat(&per_channel_alpha, 1)?;
    Ok(AttentionOutput {
        alphas,
        per_channel_alpha,
        weighted,
        pooled: pooled.expect("at least one channel"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, DEFAULT_STEP, TOLERANCE};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn spec(k: usize, f_in: usize, f_out: usize, map: &[usize], padding: Padding) -> ConvBlockSpec {
        ConvBlockSpec {
            kernel_len: k,
            in_features: f_in,
            out_features: f_out,
            stride: 1,
            padding,
            sharing_map: map.to_vec(),
        }
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 2, 1, 3]).unwrap());
        let w = g.leaf(Tensor::new(vec![1.0], &[1, 1, 1]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![0.0]));
        let y = conv_temporal(
            &mut g,
            x,
            &spec(1, 1, 1, &[0, 0], Padding::Valid),
            &[(w, b)],
        )
        .unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 1, 3]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn moving_average_kernel_on_one_channel() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 1, 4]).unwrap());
        let w = g.leaf(Tensor::new(vec![1.0 / 3.0; 3], &[1, 1, 3]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![0.0]));
        let y = conv_temporal(&mut g, x, &spec(3, 1, 1, &[0], Padding::Valid), &[(w, b)]).unwrap();
        let out = g.value(y).data();
        assert!(close(out[0], 2.0, 1e-15) && close(out[1], 3.0, 1e-15));
    }

    #[test]
    fn shared_bank_gives_bitwise_identical_channel_outputs() {
        let mut g = Graph::new();
        let series = vec![0.3, -0.7, 1.1, 0.4, 0.9];
        let mut data = series.clone();
        data.extend_from_slice(&series);
        let x = g.leaf(Tensor::new(data, &[1, 2, 1, 5]).unwrap());
        let w = g.leaf(Tensor::new(vec![0.25, -0.5, 0.75], &[1, 1, 3]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![0.1]));
        let y = conv_temporal(&mut g, x, &spec(3, 1, 1, &[0, 0], Padding::Same), &[(w, b)]).unwrap();
        let out = g.value(y).data();
        let (c0, c1) = out.split_at(out.len() / 2);
        assert_eq!(c0, c1);
    }

    #[test]
    fn series_shorter_than_kernel_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 1, 2]));
        let w = g.leaf(Tensor::zeros(&[1, 1, 5]));
        let b = g.leaf(Tensor::zeros(&[1]));
        let err =
            conv_temporal(&mut g, x, &spec(5, 1, 1, &[0], Padding::Valid), &[(w, b)]).unwrap_err();
        assert!(err.to_string().contains("shorter than kernel"));
    }

    #[test]
    fn sharing_map_must_reference_every_bank() {
        let bad = spec(3, 1, 1, &[0, 2], Padding::Same);
        let err = bad.validate().unwrap_err();
        assert!(err.to_string().contains("bank 1"));
    }

    #[test]
    fn bank_count_mismatch_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 1, 4]));
        let w = g.leaf(Tensor::zeros(&[1, 1, 3]));
        let b = g.leaf(Tensor::zeros(&[1]));
        let err = conv_temporal(
            &mut g,
            x,
            &spec(3, 1, 1, &[0, 1], Padding::Same),
            &[(w, b)], // map wants two banks
        )
        .unwrap_err();
        assert!(err.to_string().contains("2 banks"));
    }

    #[test]
    fn dense_matches_hand_arithmetic() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap());
        let w = g.leaf(Tensor::new(vec![1.0, 1.0], &[2, 1]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![0.5]));
        let y = dense(&mut g, x, w, b, Activation::Linear).unwrap();
        assert_eq!(g.value(y).data(), &[3.5]);
    }

    #[test]
    fn dense_identity_weights_reproduce_input() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![0.5, -1.5, 2.5, 3.5], &[2, 2]).unwrap());
        let w = g.leaf(Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let y = dense(&mut g, x, w, b, Activation::Linear).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn dense_relu_clamps_negative_preactivations() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![-3.0, 1.0], &[1, 2]).unwrap());
        let w = g.leaf(Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap());
        let b = g.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let y = dense(&mut g, x, w, b, Activation::Relu).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0]);
    }

    fn attention_params(g: &mut Graph, w: Tensor, b: Tensor, u: Tensor) -> AttentionNodes {
        AttentionNodes {
            w: g.leaf(w),
            b: g.leaf(b),
            u: g.leaf(u),
        }
    }

    #[test]
    fn zero_context_vector_gives_exactly_half_gates() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 3, 2]).unwrap());
        let params = attention_params(
            &mut g,
            Tensor::new(vec![0.3, -0.2, 0.7, 0.4], &[2, 2]).unwrap(),
            Tensor::from_vec(vec![0.1, -0.1]),
            Tensor::from_vec(vec![0.0, 0.0]),
        );
        let out = channel_attention(&mut g, h, params).unwrap();
        assert_eq!(g.value(out.alphas).data(), &[0.5, 0.5, 0.5]);
        // pooled = 0.5 * sum of channel features
        let pooled = g.value(out.pooled).data();
        assert!(close(pooled[0], 0.5 * (1.0 + 3.0 + 5.0), 1e-12));
        assert!(close(pooled[1], 0.5 * (2.0 + 4.0 + 6.0), 1e-12));
    }

    #[test]
    fn zero_features_pool_to_zero() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::zeros(&[2, 3, 4]));
        let params = attention_params(
            &mut g,
            Tensor::new(vec![0.5; 8], &[4, 2]).unwrap(),
            Tensor::from_vec(vec![0.3, -0.3]),
            Tensor::from_vec(vec![1.0, 2.0]),
        );
        let out = channel_attention(&mut g, h, params).unwrap();
        assert_eq!(g.value(out.pooled).data(), &[0.0; 8]);
    }

    #[test]
    fn scalar_attention_oracle() {
        // Two channels with one feature each, d_a = 1, all weights 1:
        // alpha_1 = sigmoid(tanh(0)) = 0.5 exactly,
        // alpha_2 = sigmoid(tanh(1000)), pooled = alpha_2 * 1000.
        let mut g = Graph::new();
        let h = g.leaf(Tensor::new(vec![0.0, 1000.0], &[1, 2, 1]).unwrap());
        let params = attention_params(
            &mut g,
            Tensor::new(vec![1.0], &[1, 1]).unwrap(),
            Tensor::from_vec(vec![0.0]),
            Tensor::from_vec(vec![1.0]),
        );
        let out = channel_attention(&mut g, h, params).unwrap();
        let alphas = g.value(out.alphas).data();
        let expected_a2 = 1.0 / (1.0 + (-(1000.0f64.tanh())).exp());
        assert_eq!(alphas[0], 0.5);
        assert!(close(alphas[1], expected_a2, 1e-15));
        assert!(close(alphas[1], 0.7310585786300049, 1e-12));
        let pooled = g.value(out.pooled).data();
        assert!(close(pooled[0], expected_a2 * 1000.0, 1e-9));
        assert!(close(pooled[0], 731.0585786300049, 1e-6));
    }

    #[test]
    fn gates_are_bounded_and_pooling_is_consistent() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..100 {
            let (n, channels, n_feat, d_a) = (2, 4, 3, 5);
            let rand_vec = |rng: &mut ChaCha20Rng, len: usize| -> Vec<f64> {
                (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect()
            };
            let h_data = rand_vec(&mut rng, n * channels * n_feat);
            let mut g = Graph::new();
            let h = g.leaf(Tensor::new(h_data.clone(), &[n, channels, n_feat]).unwrap());
            let params = attention_params(
                &mut g,
                Tensor::new(rand_vec(&mut rng, n_feat * d_a), &[n_feat, d_a]).unwrap(),
                Tensor::from_vec(rand_vec(&mut rng, d_a)),
                Tensor::from_vec(rand_vec(&mut rng, d_a)),
            );
            let out = channel_attention(&mut g, h, params).unwrap();
            let alphas = g.value(out.alphas).data().to_vec();
            assert!(alphas.iter().all(|&a| a > 0.0 && a < 1.0));

            // pooled must equal the explicit weighted sum of channel features
            let pooled = g.value(out.pooled).data();
            for row in 0..n {
                for f in 0..n_feat {
                    let mut expected = 0.0;
                    for c in 0..channels {
                        let alpha = alphas[row * channels + c];
                        let h_val = h_data[(row * channels + c) * n_feat + f];
                        expected += alpha * h_val;
                    }
                    assert!(close(pooled[row * n_feat + f], expected, 1e-12));
                }
            }
        }
    }

    #[test]
    fn permuting_channels_permutes_gates() {
        let mut g = Graph::new();
        let h_data = vec![0.1, 0.9, -0.4, 1.3, 0.6, -0.8];
        let h = g.leaf(Tensor::new(h_data.clone(), &[1, 3, 2]).unwrap());
        let w = Tensor::new(vec![0.8, -0.5, 0.2, 0.9], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.05, -0.15]);
        let u = Tensor::from_vec(vec![1.1, -0.6]);
        let params = attention_params(&mut g, w.clone(), b.clone(), u.clone());
        let out = channel_attention(&mut g, h, params).unwrap();
        let base = g.value(out.alphas).data().to_vec();

        // channel order (2, 0, 1)
        let mut g2 = Graph::new();
        let permuted: Vec<f64> = [2usize, 0, 1]
            .iter()
            .flat_map(|&c| h_data[c * 2..(c + 1) * 2].to_vec())
            .collect();
        let h2 = g2.leaf(Tensor::new(permuted, &[1, 3, 2]).unwrap());
        let params2 = attention_params(&mut g2, w, b, u);
        let out2 = channel_attention(&mut g2, h2, params2).unwrap();
        let perm = g2.value(out2.alphas).data().to_vec();
        assert_eq!(perm, vec![base[2], base[0], base[1]]);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (channels, n_feat, d_a) = (3, 4, 2);
        let h_point = Tensor::new(
            (0..channels * n_feat).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[1, channels, n_feat],
        )
        .unwrap();
        let w = Tensor::new(
            (0..n_feat * d_a).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[n_feat, d_a],
        )
        .unwrap();
        let b = Tensor::from_vec((0..d_a).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let u = Tensor::from_vec((0..d_a).map(|_| rng.gen_range(-1.0..1.0)).collect());

        // gradient w.r.t. the features
        let (wc, bc, uc) = (w.clone(), b.clone(), u.clone());
        let err = finite_diff_check(
            move |g, h| {
                let params = AttentionNodes {
                    w: g.leaf(wc.clone()),
                    b: g.leaf(bc.clone()),
                    u: g.leaf(uc.clone()),
                };
                let out = channel_attention(g, h, params).map_err(|e| match e {
                    LayerError::Tensor(t) => t,
                    other => TensorError::ShapeMismatch {
                        op: "attention",
                        details: other.to_string(),
                    },
                })?;
                g.sum(out.pooled)
            },
            &h_point,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= TOLERANCE, "feature gradient error {err}");

        // gradient w.r.t. the score weights
        let h_fixed = h_point.clone();
        let (bc, uc) = (b.clone(), u.clone());
        let err = finite_diff_check(
            move |g, w| {
                let h = g.leaf(h_fixed.clone());
                let params = AttentionNodes {
                    w,
                    b: g.leaf(bc.clone()),
                    u: g.leaf(uc.clone()),
                };
                let out = channel_attention(g, h, params).map_err(|e| match e {
                    LayerError::Tensor(t) => t,
                    other => TensorError::ShapeMismatch {
                        op: "attention",
                        details: other.to_string(),
                    },
                })?;
                g.sum(out.pooled)
            },
            &w,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= TOLERANCE, "weight gradient error {err}");
    }

    #[test]
    fn conv_temporal_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let x = Tensor::new(
            (0..2 * 2 * 1 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[2, 2, 1, 6],
        )
        .unwrap();
        let w_point = Tensor::new(
            (0..2 * 1 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[2, 1, 3],
        )
        .unwrap();
        let err = finite_diff_check(
            move |g, w| {
                let xb = g.leaf(x.clone());
                let b = g.leaf(Tensor::from_vec(vec![0.2, -0.3]));
                let block = ConvBlockSpec {
                    kernel_len: 3,
                    in_features: 1,
                    out_features: 2,
                    stride: 1,
                    padding: Padding::Same,
                    sharing_map: vec![0, 0],
                };
                let y = conv_temporal(g, xb, &block, &[(w, b)]).map_err(|e| match e {
                    LayerError::Tensor(t) => t,
                    other => TensorError::ShapeMismatch {
                        op: "conv_temporal",
                        details: other.to_string(),
                    },
                })?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            },
            &w_point,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= TOLERANCE, "conv weight gradient error {err}");
    }
}
