//! Hypernetwork building blocks: tabular embedding, weight/bias generation
//! heads, variance-preserving head initialization, and the hyper-conditioned
//! layer forward passes.
//!
//! Each hyperlayer owns one sub-network: an embedding that maps the encoded
//! tabular vector into a low-dimensional latent, and two linear heads that
//! turn the latent into the target layer's weights and biases. The generated
//! parameters sit in partition `theta_h`: gradients pass through them into
//! the heads, but no optimizer ever updates them directly.

use thiserror::Error;

use crate::params::{Parameter, ParameterStore, Partition};
use crate::rng::{self, Prng};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum HyperError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("embedding `{name}` expects input width {expected}, got {got}")]
    EmbedWidth {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("embedding output width {l} must not exceed input width {d}")]
    EmbedNotCompressing { d: usize, l: usize },
    #[error("degenerate embedding variance ({var_e:.3e}); the embedding is constant over the training set")]
    DegenerateEmbeddingVariance { var_e: f64 },
    #[error("head `{name}` emits {got} weight values but the target layer needs {expected}")]
    HeadShapeMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("hyper layer `{name}`: image batch {x} != tabular batch {t}")]
    BatchMismatch { name: String, x: usize, t: usize },
    #[error("variance estimate needs at least {min} embeddings, got {got}")]
    TooFewEmbeddings { min: usize, got: usize },
}

/// Activation used between embedding layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedActivation {
    PRelu,
    Identity,
}

/// MLP mapping the encoded tabular vector into a latent of width `l`.
///
/// `widths` excludes the input width: `d -> widths[0] -> ... -> l`.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    pub name: String,
    pub input_width: usize,
    pub widths: Vec<usize>,
    pub activation: EmbedActivation,
}

impl EmbeddingNet {
    pub fn new(
        name: &str,
        input_width: usize,
        widths: Vec<usize>,
        activation: EmbedActivation,
    ) -> Result<Self, HyperError> {
        assert!(!widths.is_empty(), "embedding needs at least one layer");
        let l = *widths.last().unwrap();
        if input_width > 1 && l > input_width {
            return Err(HyperError::EmbedNotCompressing {
                d: input_width,
                l,
            });
        }
        Ok(EmbeddingNet {
            name: name.to_string(),
            input_width,
            widths,
            activation,
        })
    }

    /// Latent width `l`.
    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut Prng) {
        let mut w_in = self.input_width;
        for (i, &w_out) in self.widths.iter().enumerate() {
            let bound = (1.0 / w_in as f64).sqrt();
            let w: Vec<f64> = (0..w_out * w_in)
                .map(|_| rng::uniform(rng, -bound, bound))
                .collect();
            let b: Vec<f64> = (0..w_out).map(|_| rng::uniform(rng, -bound, bound)).collect();
            store.insert(Parameter::trainable(
                &format!("{}.l{i}.weight", self.name),
                Tensor::new(&[w_out, w_in], w).expect("embed weight"),
                Partition::Phi,
            ));
            store.insert(Parameter::trainable(
                &format!("{}.l{i}.bias", self.name),
                Tensor::from_vec(b),
                Partition::Phi,
            ));
            if self.activation == EmbedActivation::PRelu && i + 1 < self.widths.len() {
                store.insert(Parameter::trainable_unregularized(
                    &format!("{}.prelu{i}.slope", self.name),
                    Tensor::scalar(0.25),
                    Partition::Phi,
                ));
            }
            w_in = w_out;
        }
    }

    /// e(T) for a batch of encoded tabular rows `t`: [n, d] -> [n, l].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        t: NodeId,
    ) -> Result<NodeId, HyperError> {
        let ts = tape.value(t).shape().to_vec();
        if ts.len() != 2 || ts[1] != self.input_width {
            return Err(HyperError::EmbedWidth {
                name: self.name.clone(),
                expected: self.input_width,
                got: *ts.last().unwrap_or(&0),
            });
        }
        let mut x = t;
        for i in 0..self.widths.len() {
            let w = store.use_param(tape, &format!("{}.l{i}.weight", self.name))?;
            let b = store.use_param(tape, &format!("{}.l{i}.bias", self.name))?;
            x = tape.matmul_tb(x, w)?;
            x = tape.add_bias_rows(x, b)?;
            if self.activation == EmbedActivation::PRelu && i + 1 < self.widths.len() {
                let slope = store.use_param(tape, &format!("{}.prelu{i}.slope", self.name))?;
                x = tape.prelu(x, slope)?;
            }
        }
        Ok(x)
    }
}

/// Target variances for the head weight matrices (the paper's init rule):
/// the head entries are drawn uniformly so that the *generated* layer
/// parameters end up with fan-in-scaled variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperInitSpec {
    /// Fan-in of the target primary-network layer.
    pub d_j: usize,
    /// Fan-in of the head, i.e. the embedding width l.
    pub d_k: usize,
    /// Pooled Var(e(T)) over the training embeddings at initialization.
    pub var_e: f64,
}

impl HyperInitSpec {
    pub fn weight_head_variance(&self) -> f64 {
        1.0 / (self.d_j as f64 * self.d_k as f64 * self.var_e)
    }

    pub fn bias_head_variance(&self) -> f64 {
        1.0 / (self.d_k as f64 * self.var_e)
    }

    /// Half-width of the uniform sampling interval for a head with variance v.
    pub fn uniform_bound(v: f64) -> f64 {
        (3.0 * v).sqrt()
    }
}

/// Linear heads generating a target layer's weights and biases from the
/// embedding latent.
#[derive(Debug, Clone)]
pub struct HyperHead {
    pub name: String,
    /// Head fan-in == embedding width l.
    pub d_k: usize,
    /// Fan-in of the target layer, used by the init rule.
    pub d_j: usize,
    /// Shape the flat weight vector reshapes into (row-major).
    pub target_w_shape: Vec<usize>,
    /// Shape of the target bias.
    pub target_b_shape: Vec<usize>,
}

impl HyperHead {
    pub fn new(
        name: &str,
        d_k: usize,
        d_j: usize,
        target_w_shape: Vec<usize>,
        target_b_shape: Vec<usize>,
    ) -> Self {
        HyperHead {
            name: name.to_string(),
            d_k,
            d_j,
            target_w_shape,
            target_b_shape,
        }
    }

    pub fn w_out(&self) -> usize {
        self.target_w_shape.iter().product()
    }

    pub fn b_out(&self) -> usize {
        self.target_b_shape.iter().product()
    }

    /// Validate that the head emits exactly the parameter count a layer
    /// declares. Construction-time check so a disagreement never reaches a
    /// forward pass.
    pub fn validate_target(&self, expected_w: usize, expected_b: usize) -> Result<(), HyperError> {
        if self.w_out() != expected_w || self.b_out() != expected_b {
            return Err(HyperError::HeadShapeMismatch {
                name: self.name.clone(),
                expected: expected_w,
                got: self.w_out(),
            });
        }
        Ok(())
    }

    /// Register head parameters as zeros; `init` fills them in once the
    /// embedding variance is known.
    pub fn register(&self, store: &mut ParameterStore) {
        store.insert(Parameter::trainable(
            &format!("{}.w_head.weight", self.name),
            Tensor::zeros(&[self.w_out(), self.d_k]),
            Partition::Phi,
        ));
        store.insert(Parameter::trainable(
            &format!("{}.w_head.bias", self.name),
            Tensor::zeros(&[self.w_out()]),
            Partition::Phi,
        ));
        store.insert(Parameter::trainable(
            &format!("{}.b_head.weight", self.name),
            Tensor::zeros(&[self.b_out(), self.d_k]),
            Partition::Phi,
        ));
        store.insert(Parameter::trainable(
            &format!("{}.b_head.bias", self.name),
            Tensor::zeros(&[self.b_out()]),
            Partition::Phi,
        ));
    }

    /// Sample head entries from the uniform distributions prescribed by the
    /// init rule; head bias vectors stay zero so the initially generated
    /// parameters are exactly the uniform samples.
    pub fn init(
        &self,
        store: &mut ParameterStore,
        spec: &HyperInitSpec,
        rng: &mut Prng,
    ) -> Result<(), HyperError> {
        if spec.var_e <= 1e-12 {
            return Err(HyperError::DegenerateEmbeddingVariance { var_e: spec.var_e });
        }
        let bw = HyperInitSpec::uniform_bound(spec.weight_head_variance());
        let bb = HyperInitSpec::uniform_bound(spec.bias_head_variance());
        {
            let p = store.get_mut(&format!("{}.w_head.weight", self.name))?;
            for v in p.value.data_mut() {
                *v = rng::uniform(rng, -bw, bw);
            }
        }
        {
            let p = store.get_mut(&format!("{}.b_head.weight", self.name))?;
            for v in p.value.data_mut() {
                *v = rng::uniform(rng, -bb, bb);
            }
        }
        Ok(())
    }

    /// Batched generation: e [n, l] -> (w_flat [n, w_out], b_flat [n, b_out]).
    pub fn generate(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        e: NodeId,
    ) -> Result<(NodeId, NodeId), HyperError> {
        let hw = store.use_param(tape, &format!("{}.w_head.weight", self.name))?;
        let hwb = store.use_param(tape, &format!("{}.w_head.bias", self.name))?;
        let hb = store.use_param(tape, &format!("{}.b_head.weight", self.name))?;
        let hbb = store.use_param(tape, &format!("{}.b_head.bias", self.name))?;
        let w = tape.matmul_tb(e, hw)?;
        let w = tape.add_bias_rows(w, hwb)?;
        let b = tape.matmul_tb(e, hb)?;
        let b = tape.add_bias_rows(b, hbb)?;
        Ok((w, b))
    }

    /// One-shot generation for a single latent vector, returning the
    /// generated parameters placed in partition theta_H.
    pub fn generate_params(
        &self,
        store: &ParameterStore,
        e: &Tensor,
    ) -> Result<(Parameter, Parameter), HyperError> {
        if e.shape() != [self.d_k] {
            return Err(HyperError::EmbedWidth {
                name: self.name.clone(),
                expected: self.d_k,
                got: e.numel(),
            });
        }
        let mut tape = Tape::eval();
        let en = tape.leaf(e.reshape(&[1, self.d_k])?);
        let (w, b) = self.generate(&mut tape, store, en)?;
        let w = tape.value(w).reshape(&self.target_w_shape)?;
        let b = tape.value(b).reshape(&self.target_b_shape)?;
        Ok((
            Parameter::generated(&format!("{}.generated_w", self.name), w),
            Parameter::generated(&format!("{}.generated_b", self.name), b),
        ))
    }
}

/// Pooled scalar Var(e(T)): population variance over all embedding entries,
/// flattened across samples and components.
pub fn pooled_embedding_variance(
    embed: &EmbeddingNet,
    store: &ParameterStore,
    tabular: &Tensor,
) -> Result<f64, HyperError> {
    const MIN_ROWS: usize = 32;
    let rows = tabular.shape()[0];
    if rows < MIN_ROWS {
        return Err(HyperError::TooFewEmbeddings {
            min: MIN_ROWS,
            got: rows,
        });
    }
    let mut tape = Tape::eval();
    let t = tape.leaf(tabular.clone());
    let e = embed.forward(&mut tape, store, t)?;
    Ok(tape.value(e).variance())
}

/// A linear layer whose weights and biases all come from the hypernetwork.
#[derive(Debug, Clone)]
pub struct HyperLinear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub embed: EmbeddingNet,
    pub head: HyperHead,
}

impl HyperLinear {
    pub fn new(
        name: &str,
        in_features: usize,
        out_features: usize,
        tabular_width: usize,
        embed_widths: Vec<usize>,
        activation: EmbedActivation,
    ) -> Result<Self, HyperError> {
        let embed = EmbeddingNet::new(
            &format!("{name}.embed"),
            tabular_width,
            embed_widths,
            activation,
        )?;
        let l = embed.output_width();
        let head = HyperHead::new(
            name,
            l,
            in_features,
            vec![out_features, in_features],
            vec![out_features],
        );
        head.validate_target(out_features * in_features, out_features)?;
        Ok(HyperLinear {
            name: name.to_string(),
            in_features,
            out_features,
            embed,
            head,
        })
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut Prng) {
        self.embed.register(store, rng);
        self.head.register(store);
    }

    /// Estimate Var(e) on the training tabular data and initialize the heads.
    pub fn init_heads(
        &self,
        store: &mut ParameterStore,
        train_tabular: &Tensor,
        rng: &mut Prng,
    ) -> Result<(), HyperError> {
        let var_e = pooled_embedding_variance(&self.embed, store, train_tabular)?;
        let spec = HyperInitSpec {
            d_j: self.in_features,
            d_k: self.head.d_k,
            var_e,
        };
        self.head.init(store, &spec, rng)
    }

    /// Per-sample conditioned forward: sample i is transformed by parameters
    /// generated from tabular row i.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: NodeId,
        t: NodeId,
    ) -> Result<NodeId, HyperError> {
        let xb = tape.value(x).shape()[0];
        let tb = tape.value(t).shape()[0];
        if xb != tb {
            return Err(HyperError::BatchMismatch {
                name: self.name.clone(),
                x: xb,
                t: tb,
            });
        }
        let e = self.embed.forward(tape, store, t)?;
        let (w, b) = self.head.generate(tape, store, e)?;
        Ok(tape.batched_linear(x, w, b)?)
    }
}

/// A 2D convolution whose kernel and bias come from the hypernetwork.
#[derive(Debug, Clone)]
pub struct HyperConv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub embed: EmbeddingNet,
    pub head: HyperHead,
}

impl HyperConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        tabular_width: usize,
        embed_widths: Vec<usize>,
        activation: EmbedActivation,
    ) -> Result<Self, HyperError> {
        let embed = EmbeddingNet::new(
            &format!("{name}.embed"),
            tabular_width,
            embed_widths,
            activation,
        )?;
        let l = embed.output_width();
        let d_j = in_channels * kernel * kernel;
        let head = HyperHead::new(
            name,
            l,
            d_j,
            vec![out_channels, in_channels, kernel, kernel],
            vec![out_channels],
        );
        head.validate_target(out_channels * d_j, out_channels)?;
        Ok(HyperConv2d {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            embed,
            head,
        })
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut Prng) {
        self.embed.register(store, rng);
        self.head.register(store);
    }

    pub fn init_heads(
        &self,
        store: &mut ParameterStore,
        train_tabular: &Tensor,
        rng: &mut Prng,
    ) -> Result<(), HyperError> {
        let var_e = pooled_embedding_variance(&self.embed, store, train_tabular)?;
        let spec = HyperInitSpec {
            d_j: self.in_channels * self.kernel * self.kernel,
            d_k: self.head.d_k,
            var_e,
        };
        self.head.init(store, &spec, rng)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: NodeId,
        t: NodeId,
    ) -> Result<NodeId, HyperError> {
        let xb = tape.value(x).shape()[0];
        let tb = tape.value(t).shape()[0];
        if xb != tb {
            return Err(HyperError::BatchMismatch {
                name: self.name.clone(),
                x: xb,
                t: tb,
            });
        }
        let e = self.embed.forward(tape, store, t)?;
        let (w, b) = self.head.generate(tape, store, e)?;
        Ok(tape.batched_conv2d(
            x,
            w,
            b,
            self.out_channels,
            self.kernel,
            self.kernel,
            self.stride,
            self.pad,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_hyper_linear(seed: u64) -> (HyperLinear, ParameterStore) {
        let layer = HyperLinear::new("hyper.fc", 3, 3, 4, vec![2], EmbedActivation::Identity)
            .unwrap();
        let mut store = ParameterStore::new();
        let mut r = rng::seeded(seed);
        layer.register(&mut store, &mut r);
        (layer, store)
    }

    #[test]
    fn embedding_with_zero_params_maps_to_zero() {
        let embed = EmbeddingNet::new("e", 4, vec![2], EmbedActivation::Identity).unwrap();
        let mut store = ParameterStore::new();
        let mut r = rng::seeded(0);
        embed.register(&mut store, &mut r);
        for p in store.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut tape = Tape::eval();
        let t = tape.leaf(Tensor::new(&[1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let e = embed.forward(&mut tape, &store, t).unwrap();
        assert_eq!(tape.value(e).data(), &[0.0, 0.0]);
    }

    #[test]
    fn embedding_rejects_width_mismatch() {
        let embed = EmbeddingNet::new("e", 4, vec![2], EmbedActivation::Identity).unwrap();
        let mut store = ParameterStore::new();
        let mut r = rng::seeded(0);
        embed.register(&mut store, &mut r);
        let mut tape = Tape::eval();
        let t = tape.leaf(Tensor::new(&[1, 3], vec![0.0; 3]).unwrap());
        assert!(matches!(
            embed.forward(&mut tape, &store, t).unwrap_err(),
            HyperError::EmbedWidth { .. }
        ));
    }

    #[test]
    fn distinct_one_hot_inputs_embed_distinctly() {
        // Over 100 random inits, two different one-hot rows never collide.
        for seed in 0..100 {
            let embed = EmbeddingNet::new("e", 2, vec![1], EmbedActivation::Identity).unwrap();
            let mut store = ParameterStore::new();
            let mut r = rng::seeded(seed);
            embed.register(&mut store, &mut r);
            let mut tape = Tape::eval();
            let t = tape
                .leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
            let e = embed.forward(&mut tape, &store, t).unwrap();
            let v = tape.value(e).data();
            assert!((v[0] - v[1]).abs() > 1e-12, "collision at seed {seed}");
        }
    }

    #[test]
    fn generate_params_is_deterministic_and_theta_h() {
        let (layer, mut store) = simple_hyper_linear(5);
        let mut r = rng::seeded(9);
        let spec = HyperInitSpec {
            d_j: 3,
            d_k: 2,
            var_e: 1.0,
        };
        layer.head.init(&mut store, &spec, &mut r).unwrap();
        let e = Tensor::from_vec(vec![0.3, -0.7]);
        let (w1, b1) = layer.head.generate_params(&store, &e).unwrap();
        let (w2, b2) = layer.head.generate_params(&store, &e).unwrap();
        assert_eq!(w1.value, w2.value);
        assert_eq!(b1.value, b2.value);
        assert_eq!(w1.partition, Partition::ThetaH);
        assert!(!w1.trainable && !w1.regularized);
        assert_eq!(w1.value.shape(), &[3, 3]);
    }

    #[test]
    fn zero_latent_with_zero_head_bias_generates_zero_params() {
        let (layer, mut store) = simple_hyper_linear(5);
        let mut r = rng::seeded(9);
        let spec = HyperInitSpec {
            d_j: 3,
            d_k: 2,
            var_e: 1.0,
        };
        layer.head.init(&mut store, &spec, &mut r).unwrap();
        let e = Tensor::from_vec(vec![0.0, 0.0]);
        let (w, b) = layer.head.generate_params(&store, &e).unwrap();
        assert!(w.value.data().iter().all(|&v| v == 0.0));
        assert!(b.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_spec_matches_hand_computed_bounds() {
        let spec = HyperInitSpec {
            d_j: 4,
            d_k: 8,
            var_e: 1.0,
        };
        assert!((spec.weight_head_variance() - 1.0 / 32.0).abs() < 1e-15);
        let bound = HyperInitSpec::uniform_bound(spec.weight_head_variance());
        assert!((bound - 0.30619).abs() < 1e-5, "bound {bound}");
        let unit = HyperInitSpec {
            d_j: 1,
            d_k: 1,
            var_e: 1.0,
        };
        assert!((unit.weight_head_variance() - 1.0).abs() < 1e-15);
        assert!((HyperInitSpec::uniform_bound(1.0) - 3.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_variance_is_rejected() {
        let (layer, mut store) = simple_hyper_linear(1);
        let mut r = rng::seeded(0);
        let spec = HyperInitSpec {
            d_j: 3,
            d_k: 2,
            var_e: 0.0,
        };
        assert!(matches!(
            layer.head.init(&mut store, &spec, &mut r).unwrap_err(),
            HyperError::DegenerateEmbeddingVariance { .. }
        ));
    }

    #[test]
    fn forced_identity_generation_is_identity_forward() {
        let (layer, mut store) = simple_hyper_linear(3);
        // Zero head weights, weight-head bias = flattened identity.
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        store
            .get_mut("hyper.fc.w_head.bias")
            .unwrap()
            .value
            .data_mut()
            .copy_from_slice(&eye);
        let x = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 4.0, -0.5]).unwrap();
        let t = Tensor::new(&[2, 4], vec![0.1, 0.2, 0.3, 0.4, -0.4, 0.0, 0.3, 0.9]).unwrap();
        let mut tape = Tape::eval();
        let xn = tape.leaf(x.clone());
        let tn = tape.leaf(t);
        let y = layer.forward(&mut tape, &store, xn, tn).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn batched_forward_matches_per_sample_loop() {
        let (layer, mut store) = simple_hyper_linear(8);
        let mut r = rng::seeded(21);
        let spec = HyperInitSpec {
            d_j: 3,
            d_k: 2,
            var_e: 0.5,
        };
        layer.head.init(&mut store, &spec, &mut r).unwrap();
        let mut rr = rng::seeded(77);
        let n = 5;
        let x = Tensor::new(
            &[n, 3],
            (0..n * 3).map(|_| rng::uniform(&mut rr, -2.0, 2.0)).collect(),
        )
        .unwrap();
        let t = Tensor::new(
            &[n, 4],
            (0..n * 4).map(|_| rng::uniform(&mut rr, -1.0, 1.0)).collect(),
        )
        .unwrap();

        let mut tape = Tape::eval();
        let (xn, tn) = (tape.leaf(x.clone()), tape.leaf(t.clone()));
        let y = layer.forward(&mut tape, &store, xn, tn).unwrap();
        let batched = tape.value(y).data().to_vec();

        for i in 0..n {
            let mut tape = Tape::eval();
            let xi = tape.leaf(x.gather_rows(&[i]));
            let ti = tape.leaf(t.gather_rows(&[i]));
            let yi = layer.forward(&mut tape, &store, xi, ti).unwrap();
            let row = tape.value(yi).data();
            for (a, b) in row.iter().zip(&batched[i * 3..(i + 1) * 3]) {
                assert!((a - b).abs() < 1e-12, "batched vs loop: {a} vs {b}");
            }
        }
    }

    #[test]
    fn equal_tabular_rows_share_generated_parameters() {
        let (layer, store) = simple_hyper_linear(4);
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let t = Tensor::new(&[2, 4], vec![0.5, 0.1, -0.2, 0.9, 0.5, 0.1, -0.2, 0.9]).unwrap();
        let mut tape = Tape::eval();
        let (xn, tn) = (tape.leaf(x), tape.leaf(t));
        let y = layer.forward(&mut tape, &store, xn, tn).unwrap();
        let v = tape.value(y);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn batch_mismatch_is_rejected() {
        let (layer, store) = simple_hyper_linear(4);
        let mut tape = Tape::eval();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let t = tape.leaf(Tensor::zeros(&[3, 4]));
        assert!(matches!(
            layer.forward(&mut tape, &store, x, t).unwrap_err(),
            HyperError::BatchMismatch { .. }
        ));
    }

    #[test]
    fn pooled_variance_needs_enough_rows() {
        let embed = EmbeddingNet::new("e", 2, vec![1], EmbedActivation::Identity).unwrap();
        let mut store = ParameterStore::new();
        let mut r = rng::seeded(0);
        embed.register(&mut store, &mut r);
        let small = Tensor::zeros(&[8, 2]);
        assert!(matches!(
            pooled_embedding_variance(&embed, &store, &small).unwrap_err(),
            HyperError::TooFewEmbeddings { .. }
        ));
    }

    #[test]
    fn gradients_reach_phi_through_generated_parameters() {
        let (layer, mut store) = simple_hyper_linear(13);
        let mut r = rng::seeded(3);
        let spec = HyperInitSpec {
            d_j: 3,
            d_k: 2,
            var_e: 1.0,
        };
        layer.head.init(&mut store, &spec, &mut r).unwrap();
        let mut tape = Tape::eval();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![0.4, -0.3, 1.2, 0.7, 0.2, -0.8]).unwrap());
        let t = tape.leaf(Tensor::new(&[2, 4], vec![0.9, 0.1, 0.4, -0.5, 0.2, 0.8, -0.1, 0.3]).unwrap());
        let y = layer.forward(&mut tape, &store, x, t).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.mean(sq);
        tape.backward(loss).unwrap();
        store.absorb_grads(&tape);
        let head_grad = &store.get("hyper.fc.w_head.weight").unwrap().grad;
        let embed_grad = &store.get("hyper.fc.embed.l0.weight").unwrap().grad;
        assert!(head_grad.data().iter().any(|&g| g.abs() > 1e-9));
        assert!(embed_grad.data().iter().any(|&g| g.abs() > 1e-9));
    }
}
