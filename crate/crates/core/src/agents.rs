//! The two learning agents.
//!
//! The actor-only agent samples from a Gaussian around the policy mean and
//! takes a score-function (REINFORCE) step every `b` transitions. The
//! actor-critic agent perturbs the deterministic mean with uniform noise,
//! regresses its critic on immediate rewards from a replay memory, and then
//! ascends the critic along the policy's action every step.
//!
//! Actions are always chosen with the networks in eval mode; gradient steps
//! run them in train mode.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::env::{AgentState, EnvError, TradingEnv};
use crate::nn::{NetConfig, PolicyNet, QNet, SeqLayerKind};
use crate::rng::{component_rng, Component};
use crate::tensor::{adam_step, Graph, Mode, NodeId, OptimizerConfig, StepStats, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationSchedule {
    pub epsilon: f64,
    pub decay: f64,
    pub min: f64,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        Self { epsilon: 1.0, decay: 0.9, min: 0.01 }
    }
}

impl ExplorationSchedule {
    /// `ε ← max(λε·ε, εmin)`.
    pub fn decay_exploration(&mut self) {
        self.epsilon = (self.decay * self.epsilon).max(self.min);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: AgentState,
    pub action: f64,
    pub reward: f64,
}

/// FIFO replay memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMemory {
    buf: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { buf: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, t: Transition) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.buf.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.buf.iter()
    }
}

/// Indices of a minibatch of `b` transitions, or `None` while the memory
/// holds fewer than `b`. CNN batches are drawn without replacement; LSTM
/// batches are a contiguous window at a uniform start.
pub fn replay_sample(memory: &ReplayMemory, b: usize, kind: SeqLayerKind, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let len = memory.len();
    if b == 0 || len < b {
        return None;
    }
    Some(match kind {
        SeqLayerKind::Cnn => {
            let mut idx = sample(rng, len, b).into_vec();
            idx.sort_unstable();
            idx
        }
        SeqLayerKind::Lstm => {
            let start = rng.random_range(0..=len - b);
            (start..start + b).collect()
        }
    })
}

/// Everything needed to re-evaluate `log π(raw | s)` at update time.
#[derive(Debug, Clone, PartialEq)]
pub struct PgSample {
    pub state: AgentState,
    pub raw_action: f64,
    pub epsilon: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgBatchBuffer {
    items: Vec<PgSample>,
    capacity: usize,
}

impl PgBatchBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "batch size must be positive");
        Self { items: Vec::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, s: PgSample) {
        self.items.push(s);
    }

    pub fn is_full(&self) -> bool {
        self.items.len() >= self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn items(&self) -> &[PgSample] {
        &self.items
    }
}

/// `−(raw − μ)²/(2ε²) − log(ε√(2π))`.
pub fn gaussian_log_prob(raw: f64, mu: f64, epsilon: f64) -> f64 {
    debug_assert!(epsilon > 0.0);
    let d = raw - mu;
    -d * d / (2.0 * epsilon * epsilon) - libm::log(epsilon * libm::sqrt(2.0 * core::f64::consts::PI))
}

/// Draws `raw ~ N(μ, ε²)` and returns `(clip(raw), raw)`.
pub fn gaussian_action<R: Rng + ?Sized>(mu: f64, epsilon: f64, rng: &mut R) -> (f64, f64) {
    let raw = if epsilon == 0.0 {
        mu
    } else {
        let z: f64 = StandardNormal.sample(rng);
        mu + epsilon * z
    };
    (raw.clamp(-1.0, 1.0), raw)
}

/// Samples from the Gaussian policy at `state`: `(executed, raw, μ)`.
pub fn sample_action_gaussian(
    policy: &mut PolicyNet,
    state: &AgentState,
    epsilon: f64,
    dropout_rng: &mut ChaCha8Rng,
    explore_rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64), TensorError> {
    let mu = policy.act(state, Mode::Eval, dropout_rng)?;
    let (a, raw) = gaussian_action(mu, epsilon, explore_rng);
    Ok((a, raw, mu))
}

/// `clip(μ + ε·W, −1, 1)` with `W ~ U[−1, 1)`.
pub fn uniform_action<R: Rng + ?Sized>(mu: f64, epsilon: f64, rng: &mut R) -> f64 {
    let w: f64 = rng.random_range(-1.0..1.0);
    (mu + epsilon * w).clamp(-1.0, 1.0)
}

pub fn ac_explore_action(
    policy: &mut PolicyNet,
    state: &AgentState,
    epsilon: f64,
    dropout_rng: &mut ChaCha8Rng,
    explore_rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), TensorError> {
    let mu = policy.act(state, Mode::Eval, dropout_rng)?;
    Ok((uniform_action(mu, epsilon, explore_rng), mu))
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub objective: f64,
    /// `None` when the step was rejected for a non-finite gradient.
    pub step: Option<StepStats>,
}

fn apply(
    store: &mut crate::tensor::ParamStore,
    grads: Vec<Vec<f64>>,
    opt: &OptimizerConfig,
    maximize: bool,
    objective: f64,
) -> Result<UpdateStats, AgentError> {
    if !objective.is_finite() {
        return Ok(UpdateStats { objective, step: None });
    }
    match adam_step(store, grads, opt, maximize) {
        Ok(s) => Ok(UpdateStats { objective, step: Some(s) }),
        Err(TensorError::NonFinite(_)) => Ok(UpdateStats { objective, step: None }),
        Err(e) => Err(e.into()),
    }
}

/// One ascent step on `Σ r·log π(raw | s)` over the buffer, which is then
/// cleared.
pub fn pg_update(
    policy: &mut PolicyNet,
    buffer: &mut PgBatchBuffer,
    opt: &OptimizerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, AgentError> {
    if buffer.is_empty() {
        return Err(TensorError::Shape("empty policy-gradient buffer".into()).into());
    }
    let items = core::mem::take(&mut buffer.items);
    let states: Vec<&AgentState> = items.iter().map(|s| &s.state).collect();
    let mut g = Graph::new();
    let bound = policy.params().bind(&mut g, true);
    let mu = policy.forward(&mut g, bound.nodes(), &states, Mode::Train, rng)?;
    let raw: Vec<f64> = items.iter().map(|s| -s.raw_action).collect();
    let diff = g.affine(mu, 1.0, &raw)?;
    let sq = g.square(diff);
    // The normalizing constant of the density carries no gradient.
    let w = items.iter().map(|s| -s.reward / (2.0 * s.epsilon * s.epsilon)).collect();
    let obj = g.weighted_sum(sq, w)?;
    let grads = g.backward(obj)?;
    let grads = bound.collect(&g, &grads);
    let objective = g.value(obj).item();
    apply(policy.params_mut(), grads, opt, true, objective)
}

/// One descent step on `mean (Q(s, a) − r)²`.
pub fn q_update(
    qnet: &mut QNet,
    batch: &[&Transition],
    opt: &OptimizerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, AgentError> {
    if batch.is_empty() {
        return Err(TensorError::Shape("empty critic batch".into()).into());
    }
    let states: Vec<&AgentState> = batch.iter().map(|t| &t.state).collect();
    let mut g = Graph::new();
    let bound = qnet.params().bind(&mut g, true);
    let actions = g.input(Tensor::from_vec(batch.iter().map(|t| t.action).collect()));
    let q = qnet.forward(&mut g, bound.nodes(), &states, actions, Mode::Train, rng)?;
    let neg_r: Vec<f64> = batch.iter().map(|t| -t.reward).collect();
    let err = g.affine(q, 1.0, &neg_r)?;
    let sq = g.square(err);
    let loss = g.mean(sq);
    let grads = g.backward(loss)?;
    let grads = bound.collect(&g, &grads);
    let objective = g.value(loss).item();
    apply(qnet.params_mut(), grads, opt, false, objective)
}

/// A frozen action-value function the deterministic policy gradient can
/// differentiate through.
pub trait ActionValue {
    /// Values `[B]` for `states` and the differentiable `actions` node.
    fn q_frozen(
        &mut self,
        g: &mut Graph,
        states: &[&AgentState],
        actions: NodeId,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TensorError>;
}

impl ActionValue for QNet {
    fn q_frozen(
        &mut self,
        g: &mut Graph,
        states: &[&AgentState],
        actions: NodeId,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TensorError> {
        let bound = self.params().bind(g, false);
        self.forward(g, bound.nodes(), states, actions, Mode::Eval, rng)
    }
}

/// One ascent step on `mean Q(s, μθ(s))` with the critic frozen (and in
/// eval mode).
pub fn policy_update_ddpg<C: ActionValue + ?Sized>(
    policy: &mut PolicyNet,
    critic: &mut C,
    states: &[&AgentState],
    opt: &OptimizerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, AgentError> {
    if states.is_empty() {
        return Err(TensorError::Shape("empty actor batch".into()).into());
    }
    let mut g = Graph::new();
    let bound = policy.params().bind(&mut g, true);
    let mu = policy.forward(&mut g, bound.nodes(), states, Mode::Train, rng)?;
    let q = critic.q_frozen(&mut g, states, mu, rng)?;
    let obj = g.mean(q);
    let grads = g.backward(obj)?;
    let grads = bound.collect(&g, &grads);
    let objective = g.value(obj).item();
    apply(policy.params_mut(), grads, opt, true, objective)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Pg,
    Ac,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Pg => "pg",
            Algorithm::Ac => "ac",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub net: NetConfig,
    pub actor: OptimizerConfig,
    pub critic: OptimizerConfig,
    pub batch_size: usize,
    pub memory_size: usize,
    pub exploration: ExplorationSchedule,
}

impl AgentConfig {
    pub fn new(algorithm: Algorithm, kind: SeqLayerKind, n: usize) -> Self {
        Self {
            algorithm,
            net: NetConfig::new(kind, n),
            actor: OptimizerConfig::with_learning_rate(0.0001),
            critic: OptimizerConfig::with_learning_rate(0.001),
            batch_size: 128,
            memory_size: 1000,
            exploration: ExplorationSchedule::default(),
        }
    }
}

/// How an episode treats exploration and learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Explore with the current ε, learn, decay ε at the end.
    Train,
    /// Act greedily, never learn.
    Evaluate,
    /// Keep refitting online: PG explores at εmin, AC acts greedily.
    OnlineTest,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub bar_index: usize,
    pub mean_action: f64,
    pub action: f64,
    pub reward: f64,
    pub linear_return: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeLog {
    pub steps: Vec<StepRecord>,
    pub updates: usize,
    pub rejected_updates: usize,
    pub epsilon: f64,
}

impl EpisodeLog {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    fn record(&mut self, u: UpdateStats) {
        match u.step {
            Some(_) => self.updates += 1,
            None => self.rejected_updates += 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Streams {
    dropout: ChaCha8Rng,
    explore: ChaCha8Rng,
    replay: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            dropout: component_rng(seed, Component::Dropout),
            explore: component_rng(seed, Component::Exploration),
            replay: component_rng(seed, Component::Replay),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PgAgent {
    pub policy: PolicyNet,
    pub buffer: PgBatchBuffer,
    pub schedule: ExplorationSchedule,
    pub cfg: AgentConfig,
    rngs: Streams,
}

#[derive(Debug, Clone)]
pub struct AcAgent {
    pub policy: PolicyNet,
    pub critic: QNet,
    pub memory: ReplayMemory,
    pub schedule: ExplorationSchedule,
    pub cfg: AgentConfig,
    rngs: Streams,
}

/// Common interface of both agents.
pub trait TradingAgent {
    fn run_episode(&mut self, env: &mut TradingEnv<'_>, phase: Phase) -> Result<EpisodeLog, AgentError>;
    fn epsilon(&self) -> f64;
}

impl PgAgent {
    pub fn new(cfg: AgentConfig, seed: u64) -> Result<Self, AgentError> {
        let mut init = component_rng(seed, Component::Init);
        Ok(Self {
            policy: PolicyNet::new(cfg.net, &mut init)?,
            buffer: PgBatchBuffer::new(cfg.batch_size),
            schedule: cfg.exploration,
            cfg,
            rngs: Streams::new(seed),
        })
    }
}

/// Runs the Gaussian-policy agent over one pass of `env`, flushing the
/// buffer every `b` transitions and at the end.
pub fn run_episode_pg(agent: &mut PgAgent, env: &mut TradingEnv<'_>, phase: Phase) -> Result<EpisodeLog, AgentError> {
    let eps = match phase {
        Phase::Train => agent.schedule.epsilon,
        Phase::Evaluate => 0.0,
        Phase::OnlineTest => agent.schedule.min,
    };
    let learn = phase != Phase::Evaluate && eps > 0.0;
    let mut log = EpisodeLog { epsilon: eps, ..EpisodeLog::default() };
    agent.buffer.clear();
    while !env.done() {
        let state = env.state();
        let (a, raw, mu) =
            sample_action_gaussian(&mut agent.policy, &state, eps, &mut agent.rngs.dropout, &mut agent.rngs.explore)?;
        let out = env.step(a)?;
        log.steps.push(StepRecord {
            bar_index: out.bar_index,
            mean_action: mu,
            action: a,
            reward: out.reward,
            linear_return: out.linear_return,
        });
        if learn {
            agent.buffer.push(PgSample { state, raw_action: raw, epsilon: eps, reward: out.reward });
            if agent.buffer.is_full() || out.done {
                let u = pg_update(&mut agent.policy, &mut agent.buffer, &agent.cfg.actor, &mut agent.rngs.dropout)?;
                log.record(u);
            }
        }
    }
    if phase == Phase::Train {
        agent.schedule.decay_exploration();
    }
    Ok(log)
}

impl TradingAgent for PgAgent {
    fn run_episode(&mut self, env: &mut TradingEnv<'_>, phase: Phase) -> Result<EpisodeLog, AgentError> {
        run_episode_pg(self, env, phase)
    }

    fn epsilon(&self) -> f64 {
        self.schedule.epsilon
    }
}

impl AcAgent {
    pub fn new(cfg: AgentConfig, seed: u64) -> Result<Self, AgentError> {
        let mut init = component_rng(seed, Component::Init);
        let policy = PolicyNet::new(cfg.net, &mut init)?;
        let critic = QNet::new(cfg.net, &mut init)?;
        Ok(Self {
            policy,
            critic,
            memory: ReplayMemory::new(cfg.memory_size),
            schedule: cfg.exploration,
            cfg,
            rngs: Streams::new(seed),
        })
    }

    /// One critic step and one actor step on a shared minibatch, if the
    /// memory is large enough.
    fn learn(&mut self, log: &mut EpisodeLog) -> Result<(), AgentError> {
        let Some(idx) = replay_sample(&self.memory, self.cfg.batch_size, self.cfg.net.kind, &mut self.rngs.replay)
        else {
            return Ok(());
        };
        let batch: Vec<&Transition> = idx.iter().map(|&i| self.memory.get(i).expect("index in range")).collect();
        let u = q_update(&mut self.critic, &batch, &self.cfg.critic, &mut self.rngs.dropout)?;
        log.record(u);
        let states: Vec<&AgentState> = batch.iter().map(|t| &t.state).collect();
        let u =
            policy_update_ddpg(&mut self.policy, &mut self.critic, &states, &self.cfg.actor, &mut self.rngs.dropout)?;
        log.record(u);
        Ok(())
    }
}

/// Runs the actor-critic agent over one pass of `env`.
pub fn run_episode_ac(agent: &mut AcAgent, env: &mut TradingEnv<'_>, phase: Phase) -> Result<EpisodeLog, AgentError> {
    let eps = match phase {
        Phase::Train => agent.schedule.epsilon,
        Phase::Evaluate | Phase::OnlineTest => 0.0,
    };
    let mut log = EpisodeLog { epsilon: eps, ..EpisodeLog::default() };
    while !env.done() {
        let state = env.state();
        let (a, mu) =
            ac_explore_action(&mut agent.policy, &state, eps, &mut agent.rngs.dropout, &mut agent.rngs.explore)?;
        let out = env.step(a)?;
        log.steps.push(StepRecord {
            bar_index: out.bar_index,
            mean_action: mu,
            action: a,
            reward: out.reward,
            linear_return: out.linear_return,
        });
        if phase != Phase::Evaluate {
            agent.memory.push(Transition { state, action: a, reward: out.reward });
            agent.learn(&mut log)?;
        }
    }
    if phase == Phase::Train {
        agent.schedule.decay_exploration();
    }
    Ok(log)
}

impl TradingAgent for AcAgent {
    fn run_episode(&mut self, env: &mut TradingEnv<'_>, phase: Phase) -> Result<EpisodeLog, AgentError> {
        run_episode_ac(self, env, phase)
    }

    fn epsilon(&self) -> f64 {
        self.schedule.epsilon
    }
}

/// Either agent, chosen at run time.
#[derive(Debug, Clone)]
pub enum Agent {
    Pg(PgAgent),
    Ac(AcAgent),
}

impl Agent {
    pub fn new(cfg: AgentConfig, seed: u64) -> Result<Self, AgentError> {
        Ok(match cfg.algorithm {
            Algorithm::Pg => Agent::Pg(PgAgent::new(cfg, seed)?),
            Algorithm::Ac => Agent::Ac(AcAgent::new(cfg, seed)?),
        })
    }

    pub fn policy(&self) -> &PolicyNet {
        match self {
            Agent::Pg(a) => &a.policy,
            Agent::Ac(a) => &a.policy,
        }
    }

    pub fn critic(&self) -> Option<&QNet> {
        match self {
            Agent::Pg(_) => None,
            Agent::Ac(a) => Some(&a.critic),
        }
    }
}

impl TradingAgent for Agent {
    fn run_episode(&mut self, env: &mut TradingEnv<'_>, phase: Phase) -> Result<EpisodeLog, AgentError> {
        match self {
            Agent::Pg(a) => a.run_episode(env, phase),
            Agent::Ac(a) => a.run_episode(env, phase),
        }
    }

    fn epsilon(&self) -> f64 {
        match self {
            Agent::Pg(a) => a.epsilon(),
            Agent::Ac(a) => a.epsilon(),
        }
    }
}
