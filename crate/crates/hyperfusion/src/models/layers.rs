//! Primitive layers the fusion models are assembled from. Each layer owns
//! its parameter names; `register` inserts freshly initialized values into
//! the store and `forward` records the computation on a tape.

use crate::params::{Parameter, ParameterStore, Partition};
use crate::rng::{self, Prng};
use crate::tape::{BnStats, NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

/// Standard fan-in uniform bound: U(-sqrt(1/fan_in), +sqrt(1/fan_in)).
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

fn uniform_tensor(rng: &mut Prng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng::uniform(rng, -bound, bound)).collect(),
    )
    .expect("uniform tensor")
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2dLayer {
            name: name.to_string(),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut Prng) {
        let bound = fan_in_bound(self.fan_in());
        store.insert(Parameter::trainable(
            &format!("{}.weight", self.name),
            uniform_tensor(rng, &[self.out_ch, self.in_ch, self.k, self.k], bound),
            Partition::ThetaP,
        ));
        store.insert(Parameter::trainable(
            &format!("{}.bias", self.name),
            uniform_tensor(rng, &[self.out_ch], bound),
            Partition::ThetaP,
        ));
    }

    /// Overwrite this layer's parameters with a fresh fan-in uniform draw.
    pub fn reinit(&self, store: &mut ParameterStore, rng: &mut Prng) -> Result<(), TensorError> {
        let bound = fan_in_bound(self.fan_in());
        let w = uniform_tensor(rng, &[self.out_ch, self.in_ch, self.k, self.k], bound);
        store.get_mut(&format!("{}.weight", self.name))?.value = w;
        let b = uniform_tensor(rng, &[self.out_ch], bound);
        store.get_mut(&format!("{}.bias", self.name))?.value = b;
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = store.use_param(tape, &format!("{}.weight", self.name))?;
        let b = store.use_param(tape, &format!("{}.bias", self.name))?;
        let y = tape.conv2d(x, w, self.stride, self.pad)?;
        tape.add_bias_channels(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub name: String,
    pub in_f: usize,
    pub out_f: usize,
}

impl LinearLayer {
    pub fn new(name: &str, in_f: usize, out_f: usize) -> Self {
        LinearLayer {
            name: name.to_string(),
            in_f,
            out_f,
        }
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut Prng) {
        let bound = fan_in_bound(self.in_f);
        store.insert(Parameter::trainable(
            &format!("{}.weight", self.name),
            uniform_tensor(rng, &[self.out_f, self.in_f], bound),
            Partition::ThetaP,
        ));
        store.insert(Parameter::trainable(
            &format!("{}.bias", self.name),
            uniform_tensor(rng, &[self.out_f], bound),
            Partition::ThetaP,
        ));
    }

    pub fn reinit(&self, store: &mut ParameterStore, rng: &mut Prng) -> Result<(), TensorError> {
        let bound = fan_in_bound(self.in_f);
        store.get_mut(&format!("{}.weight", self.name))?.value =
            uniform_tensor(rng, &[self.out_f, self.in_f], bound);
        store.get_mut(&format!("{}.bias", self.name))?.value =
            uniform_tensor(rng, &[self.out_f], bound);
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = store.use_param(tape, &format!("{}.weight", self.name))?;
        let b = store.use_param(tape, &format!("{}.bias", self.name))?;
        let y = tape.matmul_tb(x, w)?;
        tape.add_bias_rows(y, b)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub name: String,
    pub ch: usize,
}

impl BatchNormLayer {
    pub fn new(name: &str, ch: usize) -> Self {
        BatchNormLayer {
            name: name.to_string(),
            ch,
        }
    }

    pub fn register(&self, store: &mut ParameterStore, _rng: &mut Prng) {
        store.insert(Parameter::trainable(
            &format!("{}.gamma", self.name),
            Tensor::full(&[self.ch], 1.0),
            Partition::ThetaP,
        ));
        store.insert(Parameter::trainable(
            &format!("{}.beta", self.name),
            Tensor::zeros(&[self.ch]),
            Partition::ThetaP,
        ));
        store.insert(Parameter::buffer(
            &format!("{}.running_mean", self.name),
            Tensor::zeros(&[self.ch]),
        ));
        store.insert(Parameter::buffer(
            &format!("{}.running_var", self.name),
            Tensor::full(&[self.ch], 1.0),
        ));
    }

    /// Train mode pushes the blended running statistics into `bn_sink`;
    /// the caller commits them to the store after the step.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: NodeId,
        bn_sink: &mut Vec<(String, BnStats)>,
    ) -> Result<NodeId, TensorError> {
        let gamma = store.use_param(tape, &format!("{}.gamma", self.name))?;
        let beta = store.use_param(tape, &format!("{}.beta", self.name))?;
        let running = BnStats {
            mean: store
                .get(&format!("{}.running_mean", self.name))?
                .value
                .data()
                .to_vec(),
            var: store
                .get(&format!("{}.running_var", self.name))?
                .value
                .data()
                .to_vec(),
        };
        let (y, update) = tape.batch_norm2d(x, gamma, beta, &running, BN_EPS, BN_MOMENTUM)?;
        if let Some(stats) = update {
            bn_sink.push((self.name.clone(), stats));
        }
        Ok(y)
    }

    /// Write blended running statistics back into the store.
    pub fn commit(
        store: &mut ParameterStore,
        updates: &[(String, BnStats)],
    ) -> Result<(), TensorError> {
        for (name, stats) in updates {
            store
                .get_mut(&format!("{name}.running_mean"))?
                .value
                .data_mut()
                .copy_from_slice(&stats.mean);
            store
                .get_mut(&format!("{name}.running_var"))?
                .value
                .data_mut()
                .copy_from_slice(&stats.var);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PReluLayer {
    pub name: String,
}

impl PReluLayer {
    pub fn new(name: &str) -> Self {
        PReluLayer {
            name: name.to_string(),
        }
    }

    pub fn register(&self, store: &mut ParameterStore, _rng: &mut Prng) {
        store.insert(Parameter::trainable(
            &format!("{}.slope", self.name),
            Tensor::scalar(0.25),
            Partition::ThetaP,
        ));
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let slope = store.use_param(tape, &format!("{}.slope", self.name))?;
        tape.prelu(x, slope)
    }
}

/// FiLM/DAFT-style conditioning generator: a small MLP emitting per-channel
/// (gamma, beta). Gamma is parameterized as 1 + head output so zeroed head
/// parameters give the identity modulation.
#[derive(Debug, Clone)]
pub struct CondGenerator {
    pub name: String,
    pub input_width: usize,
    pub hidden: usize,
    pub channels: usize,
}

impl CondGenerator {
    pub fn new(name: &str, input_width: usize, hidden: usize, channels: usize) -> Self {
        CondGenerator {
            name: name.to_string(),
            input_width,
            hidden,
            channels,
        }
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut Prng) {
        let b0 = fan_in_bound(self.input_width);
        store.insert(Parameter::trainable(
            &format!("{}.l0.weight", self.name),
            uniform_tensor(rng, &[self.hidden, self.input_width], b0),
            Partition::ThetaP,
        ));
        store.insert(Parameter::trainable(
            &format!("{}.l0.bias", self.name),
            uniform_tensor(rng, &[self.hidden], b0),
            Partition::ThetaP,
        ));
        store.insert(Parameter::trainable(
            &format!("{}.prelu0.slope", self.name),
            Tensor::scalar(0.25),
            Partition::ThetaP,
        ));
        let b1 = fan_in_bound(self.hidden);
        for head in ["gamma", "beta"] {
            store.insert(Parameter::trainable(
                &format!("{}.{head}.weight", self.name),
                uniform_tensor(rng, &[self.channels, self.hidden], b1),
                Partition::ThetaP,
            ));
            store.insert(Parameter::trainable(
                &format!("{}.{head}.bias", self.name),
                Tensor::zeros(&[self.channels]),
                Partition::ThetaP,
            ));
        }
    }

    /// Returns (gamma, beta), each [n, channels].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        cond_input: NodeId,
    ) -> Result<(NodeId, NodeId), TensorError> {
        let w0 = store.use_param(tape, &format!("{}.l0.weight", self.name))?;
        let b0 = store.use_param(tape, &format!("{}.l0.bias", self.name))?;
        let slope = store.use_param(tape, &format!("{}.prelu0.slope", self.name))?;
        let h = tape.matmul_tb(cond_input, w0)?;
        let h = tape.add_bias_rows(h, b0)?;
        let h = tape.prelu(h, slope)?;

        let gw = store.use_param(tape, &format!("{}.gamma.weight", self.name))?;
        let gb = store.use_param(tape, &format!("{}.gamma.bias", self.name))?;
        let g_raw = tape.matmul_tb(h, gw)?;
        let g_raw = tape.add_bias_rows(g_raw, gb)?;
        let n = tape.value(g_raw).shape()[0];
        let ones = tape.leaf(Tensor::full(&[n, self.channels], 1.0));
        let gamma = tape.add(g_raw, ones)?;

        let bw = store.use_param(tape, &format!("{}.beta.weight", self.name))?;
        let bb = store.use_param(tape, &format!("{}.beta.bias", self.name))?;
        let beta = tape.matmul_tb(h, bw)?;
        let beta = tape.add_bias_rows(beta, bb)?;
        Ok((gamma, beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_register_and_forward_shapes() {
        let layer = Conv2dLayer::new("c", 2, 3, 3, 1, 1);
        let mut store = ParameterStore::new();
        let mut r = rng::seeded(0);
        layer.register(&mut store, &mut r);
        let mut tape = Tape::eval();
        let x = tape.leaf(Tensor::zeros(&[2, 2, 5, 5]));
        let y = layer.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 5, 5]);
    }

    #[test]
    fn zeroed_cond_generator_is_identity_modulation() {
        let g = CondGenerator::new("cond", 4, 8, 3);
        let mut store = ParameterStore::new();
        let mut r = rng::seeded(1);
        g.register(&mut store, &mut r);
        for p in store.iter_mut() {
            if p.name.contains("gamma") || p.name.contains("beta") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let mut tape = Tape::eval();
        let t = tape.leaf(Tensor::new(&[2, 4], vec![0.3; 8]).unwrap());
        let (gamma, beta) = g.forward(&mut tape, &store, t).unwrap();
        assert!(tape.value(gamma).data().iter().all(|&v| v == 1.0));
        assert!(tape.value(beta).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bn_commit_round_trips() {
        let bn = BatchNormLayer::new("bn", 2);
        let mut store = ParameterStore::new();
        let mut r = rng::seeded(0);
        bn.register(&mut store, &mut r);
        let updates = vec![(
            "bn".to_string(),
            BnStats {
                mean: vec![0.5, -0.5],
                var: vec![2.0, 3.0],
            },
        )];
        BatchNormLayer::commit(&mut store, &updates).unwrap();
        assert_eq!(store.get("bn.running_mean").unwrap().value.data(), &[0.5, -0.5]);
        assert_eq!(store.get("bn.running_var").unwrap().value.data(), &[2.0, 3.0]);
    }
}
