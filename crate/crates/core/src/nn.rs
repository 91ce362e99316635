//! Policy and Q networks.
//!
//! Both networks share a sequential information layer (a two-layer CNN or a
//! two-layer LSTM) and a bias-free decision layer over the extracted
//! features and the previous action. The policy squashes with `tanh`; the
//! Q network first embeds the state and the action back into a `3 × n`
//! window and leaves its output unbounded.
//!
//! Forward passes work on batches and take the parameter nodes explicitly,
//! so the same code serves training (parameters bound as leaves), frozen
//! evaluation (bound as constants) and finite-difference checks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::AgentState;
use crate::tensor::{
    decode_tensors, encode_tensors, kaiming_normal, Graph, Mode, NodeId, ParamStore, Tensor, TensorError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqLayerKind {
    Cnn,
    Lstm,
}

impl SeqLayerKind {
    pub fn name(self) -> &'static str {
        match self {
            SeqLayerKind::Cnn => "cnn",
            SeqLayerKind::Lstm => "lstm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub kind: SeqLayerKind,
    /// Observations per state.
    pub n: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub lstm_hidden: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl NetConfig {
    pub fn new(kind: SeqLayerKind, n: usize) -> Self {
        Self {
            kind,
            n,
            conv_channels: 32,
            kernel: 3,
            lstm_hidden: 128,
            dropout: 0.2,
            leaky_slope: 0.01,
            bn_eps: 1e-8,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let shape = |m: String| Err(TensorError::Shape(m));
        match self.kind {
            SeqLayerKind::Cnn if self.n < 2 * (self.kernel - 1) + 2 => {
                shape(format!("CNN needs n >= {}, got {}", 2 * (self.kernel - 1) + 2, self.n))
            }
            SeqLayerKind::Lstm if self.n == 0 => shape(String::from("LSTM needs a non-empty sequence")),
            _ if !(0.0..1.0).contains(&self.dropout) => shape(format!("dropout {} not in [0, 1)", self.dropout)),
            _ => Ok(()),
        }
    }

    /// Length of the feature vector the sequential layer emits.
    pub fn feature_len(&self) -> usize {
        match self.kind {
            SeqLayerKind::Cnn => self.conv_channels * ((self.n - 2 * (self.kernel - 1)) / 2),
            SeqLayerKind::Lstm => self.lstm_hidden,
        }
    }
}

/// Running batch-norm statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    fn update(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        for (r, &m) in self.mean.iter_mut().zip(mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, &v) in self.var.iter_mut().zip(var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Head {
    Policy,
    Q,
}

/// Shared implementation of both networks. Parameter order: optional
/// embedding (weight, bias), sequential layer, decision weight.
#[derive(Debug, Clone, PartialEq)]
struct Net {
    cfg: NetConfig,
    head: Head,
    params: ParamStore,
    bn: Vec<BnRunning>,
}

fn dims_err(msg: String) -> TensorError {
    TensorError::Shape(msg)
}

impl Net {
    fn new(cfg: NetConfig, head: Head, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let n3 = 3 * cfg.n;
        if head == Head::Q {
            params.add("embed.weight", kaiming_normal(vec![n3, n3 + 2], n3 + 2, rng));
            params.add("embed.bias", Tensor::zeros(vec![n3]));
        }
        let mut bn = Vec::new();
        match cfg.kind {
            SeqLayerKind::Cnn => {
                let (c, k) = (cfg.conv_channels, cfg.kernel);
                params.add("conv1.weight", kaiming_normal(vec![c, 3, k], 3 * k, rng));
                params.add("conv1.bias", Tensor::zeros(vec![c]));
                params.add("bn1.gamma", Tensor::filled(vec![c], 1.0));
                params.add("bn1.beta", Tensor::zeros(vec![c]));
                params.add("conv2.weight", kaiming_normal(vec![c, c, k], c * k, rng));
                params.add("conv2.bias", Tensor::zeros(vec![c]));
                params.add("bn2.gamma", Tensor::filled(vec![c], 1.0));
                params.add("bn2.beta", Tensor::zeros(vec![c]));
                bn.push(BnRunning::new(c));
                bn.push(BnRunning::new(c));
            }
            SeqLayerKind::Lstm => {
                let h = cfg.lstm_hidden;
                params.add("lstm1.weight", kaiming_normal(vec![4 * h, h + 3], h + 3, rng));
                params.add("lstm1.bias", Tensor::zeros(vec![4 * h]));
                params.add("lstm2.weight", kaiming_normal(vec![4 * h, 2 * h], 2 * h, rng));
                params.add("lstm2.bias", Tensor::zeros(vec![4 * h]));
            }
        }
        let f = cfg.feature_len() + 1;
        params.add("decision.weight", kaiming_normal(vec![1, f], f, rng));
        Ok(Self { cfg, head, params, bn })
    }

    fn seq_offset(&self) -> usize {
        if self.head == Head::Q {
            2
        } else {
            0
        }
    }

    /// Input nodes for a batch: the `[B, 3, n]` windows and `[B, 1]`
    /// previous actions.
    fn state_inputs(&self, g: &mut Graph, states: &[&AgentState]) -> Result<(NodeId, NodeId), TensorError> {
        let n = self.cfg.n;
        if states.is_empty() {
            return Err(dims_err(String::from("empty batch")));
        }
        let mut x = Vec::with_capacity(states.len() * 3 * n);
        let mut prev = Vec::with_capacity(states.len());
        for s in states {
            if s.n() != n {
                return Err(dims_err(format!("state window {} != n = {}", s.n(), n)));
            }
            x.extend(s.channels());
            prev.push(s.prev_action);
        }
        let b = states.len();
        let x = g.input(Tensor::new(vec![b, 3, n], x)?);
        let prev = g.input(Tensor::new(vec![b, 1], prev)?);
        Ok((x, prev))
    }

    fn seq_forward(
        &mut self,
        g: &mut Graph,
        p: &[NodeId],
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TensorError> {
        let cfg = self.cfg;
        let train = mode == Mode::Train;
        let b = g.shape(x)[0];
        let p = &p[self.seq_offset()..];
        match cfg.kind {
            SeqLayerKind::Cnn => {
                let mut h = x;
                for layer in 0..2 {
                    let q = &p[4 * layer..4 * layer + 4];
                    h = g.conv1d(h, q[0], q[1])?;
                    h = if train {
                        let (out, mean, var) = g.batch_norm_train(h, q[2], q[3], cfg.bn_eps)?;
                        self.bn[layer].update(&mean, &var, cfg.bn_momentum);
                        out
                    } else {
                        let r = &self.bn[layer];
                        g.batch_norm_eval(h, q[2], q[3], &r.mean, &r.var, cfg.bn_eps)?
                    };
                    h = g.leaky_relu(h, cfg.leaky_slope);
                    h = g.dropout(h, cfg.dropout, train, rng);
                }
                h = g.max_pool1d(h, 2, 2)?;
                g.reshape(h, &[b, cfg.feature_len()])
            }
            SeqLayerKind::Lstm => {
                let (n, hid) = (cfg.n, cfg.lstm_hidden);
                let h_idx: Vec<usize> = (0..hid).collect();
                let mut hc1 = g.input(Tensor::zeros(vec![2 * hid]));
                let mut hc2 = g.input(Tensor::zeros(vec![2 * hid]));
                let mut feats = Vec::with_capacity(b);
                for s in 0..b {
                    for t in 0..n {
                        let idx = (0..3).map(|c| s * 3 * n + c * n + t).collect();
                        let xt = g.gather(x, idx)?;
                        hc1 = g.lstm_cell(xt, hc1, p[0], p[1])?;
                        let h1 = g.gather(hc1, h_idx.clone())?;
                        let h1 = g.dropout(h1, cfg.dropout, train, rng);
                        hc2 = g.lstm_cell(h1, hc2, p[2], p[3])?;
                    }
                    let h2 = g.gather(hc2, h_idx.clone())?;
                    feats.push(g.dropout(h2, cfg.dropout, train, rng));
                }
                g.stack(&feats)
            }
        }
    }

    fn decision(&self, g: &mut Graph, p: &[NodeId], feats: NodeId, prev: NodeId) -> Result<NodeId, TensorError> {
        let b = g.shape(feats)[0];
        let z = g.concat(&[feats, prev])?;
        let out = g.linear(z, p[p.len() - 1], None)?;
        g.reshape(out, &[b])
    }

    fn check_params(&self, p: &[NodeId]) -> Result<(), TensorError> {
        if p.len() != self.params.len() {
            return Err(dims_err(format!("expected {} parameter nodes, got {}", self.params.len(), p.len())));
        }
        Ok(())
    }

    fn save(&self) -> Vec<u8> {
        let mut tensors = self.params.tensors();
        for r in &self.bn {
            tensors.push(Tensor::from_vec(r.mean.clone()));
            tensors.push(Tensor::from_vec(r.var.clone()));
        }
        encode_tensors(tensors.iter())
    }

    fn load(&mut self, bytes: &[u8]) -> Result<(), TensorError> {
        let tensors = decode_tensors(bytes)?;
        let expect = self.params.len() + 2 * self.bn.len();
        if tensors.len() != expect {
            return Err(TensorError::Snapshot(format!("expected {} tensors, found {}", expect, tensors.len())));
        }
        for (p, t) in self.params.iter().zip(&tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(TensorError::Snapshot(format!(
                    "`{}` has shape {:?}, snapshot has {:?}",
                    p.name,
                    p.tensor.shape(),
                    t.shape()
                )));
            }
        }
        let (weights, stats) = tensors.split_at(self.params.len());
        for (p, t) in self.params.iter_mut().zip(weights) {
            p.tensor = t.clone();
        }
        for (r, pair) in self.bn.iter_mut().zip(stats.chunks(2)) {
            if pair[0].len() != r.mean.len() || pair[1].len() != r.var.len() {
                return Err(TensorError::Snapshot(String::from("batch-norm statistics mismatch")));
            }
            r.mean = pair[0].data().to_vec();
            r.var = pair[1].data().to_vec();
        }
        Ok(())
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            kind: self.cfg.kind,
            layers: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
                .chain(self.bn.iter().enumerate().flat_map(|(i, r)| {
                    [
                        (format!("bn{}.running_mean", i + 1), vec![r.mean.len()]),
                        (format!("bn{}.running_var", i + 1), vec![r.var.len()]),
                    ]
                }))
                .collect(),
        }
    }
}

/// Layer names and shapes of a snapshot, in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub kind: SeqLayerKind,
    pub layers: Vec<(String, Vec<usize>)>,
}

/// Feature vector and decision output, exposed for inspection and tests.
pub fn decision_forward(g: &[f64], prev_action: f64, w: &[f64]) -> f64 {
    assert_eq!(w.len(), g.len() + 1, "decision weights must cover features and previous action");
    g.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + prev_action * w[g.len()]
}

macro_rules! net_common {
    ($t:ty) => {
        impl $t {
            pub fn config(&self) -> &NetConfig {
                &self.0.cfg
            }

            pub fn params(&self) -> &ParamStore {
                &self.0.params
            }

            pub fn params_mut(&mut self) -> &mut ParamStore {
                &mut self.0.params
            }

            pub fn bn_running(&self) -> &[BnRunning] {
                &self.0.bn
            }

            /// Parameters and batch-norm statistics in the tensor snapshot format.
            pub fn save(&self) -> Vec<u8> {
                self.0.save()
            }

            pub fn load(&mut self, bytes: &[u8]) -> Result<(), TensorError> {
                self.0.load(bytes)
            }

            pub fn manifest(&self) -> Manifest {
                self.0.manifest()
            }
        }
    };
}

/// `μθ(s) = tanh(wᴰ·[g(s); a_prev])`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet(Net);

net_common!(PolicyNet);

impl PolicyNet {
    pub fn new(cfg: NetConfig, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        Ok(Self(Net::new(cfg, Head::Policy, rng)?))
    }

    /// Action means `[B]` for a batch. Train mode updates batch-norm
    /// running statistics.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        params: &[NodeId],
        states: &[&AgentState],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TensorError> {
        self.0.check_params(params)?;
        let (x, prev) = self.0.state_inputs(g, states)?;
        let feats = self.0.seq_forward(g, params, x, mode, rng)?;
        let d = self.0.decision(g, params, feats, prev)?;
        Ok(g.tanh(d))
    }

    /// Action mean for a single state.
    pub fn act(&mut self, state: &AgentState, mode: Mode, rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let bound = self.0.params.bind(&mut g, false);
        let out = self.forward(&mut g, bound.nodes(), &[state], mode, rng)?;
        Ok(g.value(out).item())
    }
}

/// `Qφ(s, a) = wᴰ·[g(embed(s, a)); a_prev]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QNet(Net);

net_common!(QNet);

impl QNet {
    pub fn new(cfg: NetConfig, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        Ok(Self(Net::new(cfg, Head::Q, rng)?))
    }

    /// Embeds states and actions `[B]` into `[B, 3, n]`.
    #[allow(clippy::too_many_arguments)]
    pub fn embed(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        x: NodeId,
        prev: NodeId,
        actions: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TensorError> {
        let cfg = self.0.cfg;
        let b = g.shape(x)[0];
        let n3 = 3 * cfg.n;
        if g.value(actions).len() != b {
            return Err(dims_err(format!("{} actions for {} states", g.value(actions).len(), b)));
        }
        let flat = g.reshape(x, &[b, n3])?;
        let a = g.reshape(actions, &[b, 1])?;
        let z = g.concat(&[flat, prev, a])?;
        let h = g.linear(z, params[0], Some(params[1]))?;
        let h = g.leaky_relu(h, cfg.leaky_slope);
        let h = g.dropout(h, cfg.dropout, mode == Mode::Train, rng);
        g.reshape(h, &[b, 3, cfg.n])
    }

    /// Action values `[B]`; `actions` may be a constant or a differentiable
    /// node (for the deterministic policy gradient).
    pub fn forward(
        &mut self,
        g: &mut Graph,
        params: &[NodeId],
        states: &[&AgentState],
        actions: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TensorError> {
        self.0.check_params(params)?;
        let (x, prev) = self.0.state_inputs(g, states)?;
        let e = self.embed(g, params, x, prev, actions, mode, rng)?;
        let feats = self.0.seq_forward(g, params, e, mode, rng)?;
        self.0.decision(g, params, feats, prev)
    }

    pub fn value(
        &mut self,
        state: &AgentState,
        action: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let bound = self.0.params.bind(&mut g, false);
        let a = g.input(Tensor::from_vec(vec![action]));
        let out = self.forward(&mut g, bound.nodes(), &[state], a, mode, rng)?;
        Ok(g.value(out).item())
    }
}

/// Uniform random state, handy for initialization diagnostics.
pub fn random_state<R: Rng + ?Sized>(n: usize, rng: &mut R) -> AgentState {
    use crate::env::NormalizedObservation;
    AgentState {
        window: (0..n)
            .map(|_| {
                NormalizedObservation([
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                ])
            })
            .collect(),
        prev_action: rng.random_range(-1.0..=1.0),
    }
}
