//! Double deep Q-learning for the phase transformer.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, AdamConfig, Tape};
use crate::baselines::Policy;
use crate::env::{AcquisitionState, ActionMap, Environment, Observation, Trajectory, Transition};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::transformer::{forward_on_tape, PhaseTransformer};

/// Anything that maps an observation to one Q-value per action slot.
pub trait QFunction<T> {
    fn q_values(&self, obs: &Observation<T>) -> Result<Vec<T>>;
}

impl<T: Scalar> QFunction<T> for PhaseTransformer<T> {
    fn q_values(&self, obs: &Observation<T>) -> Result<Vec<T>> {
        PhaseTransformer::q_values(self, obs)
    }
}

/// Fixed-capacity FIFO store of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    items: VecDeque<Transition<T>>,
    capacity: usize,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting the oldest transition when full.
    pub fn push(&mut self, tr: Transition<T>) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(tr);
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition<T>> {
        self.items.iter()
    }

    /// `batch` distinct transitions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch: usize,
        rng: &mut R,
    ) -> Result<Vec<&Transition<T>>> {
        if batch == 0 || batch > self.items.len() {
            return Err(Error::Contract(format!(
                "cannot draw {} transitions from a buffer of {}",
                batch,
                self.items.len()
            )));
        }
        Ok(index::sample(rng, self.items.len(), batch)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    /// Outer loop count `Y`; one slice is drawn per episode.
    pub episodes: usize,
    pub batch_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episodes over which epsilon decays linearly.
    pub epsilon_decay: f64,
    /// Gradient steps between hard target copies.
    pub target_sync: usize,
    /// Buffer fill level before the first gradient step.
    pub warmup: usize,
    pub buffer_capacity: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    /// Greedy evaluation every this many episodes; 0 disables.
    pub eval_every: usize,
    /// Record wall time per selection in the log. Off keeps logs bit-reproducible.
    pub record_timing: bool,
    /// Number given to the first episode, for resumed runs.
    pub first_episode: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            learning_rate: 1e-4,
            episodes: 10_000_000,
            batch_size: 32,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.3,
            target_sync: 1000,
            warmup: 1000,
            buffer_capacity: 20_000,
            grad_clip: 10.0,
            seed: 0,
            eval_every: 0,
            record_timing: false,
            first_episode: 0,
        }
    }
}

impl TrainConfig {
    /// Small-budget settings for 64x64 phantoms.
    pub fn desk() -> Self {
        Self {
            episodes: 2000,
            batch_size: 16,
            warmup: 200,
            target_sync: 250,
            learning_rate: 3e-4,
            buffer_capacity: 10_000,
            eval_every: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        for (name, e) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
        ] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("{} must lie in [0, 1]", name)));
            }
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return bad("epsilon_decay must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.target_sync == 0 {
            return bad("target_sync must be positive");
        }
        if self.buffer_capacity < self.batch_size {
            return bad("buffer_capacity must hold at least one batch");
        }
        if self.warmup > self.buffer_capacity {
            return bad("warmup exceeds buffer_capacity");
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip must be non-negative");
        }
        Ok(())
    }

    /// Exploration rate for the `i`-th episode of this run.
    pub fn epsilon(&self, i: usize) -> f64 {
        let span = (self.epsilon_decay * self.episodes as f64).max(1.0);
        let frac = (i as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

fn argmax_valid<T: Scalar>(q: &[T], valid: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (j, (&v, &ok)) in q.iter().zip(valid).enumerate() {
        if ok && best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

/// Highest-valued valid slot, ties to the lowest.
pub fn greedy_action<T: Scalar>(q: &[T], valid: &[bool]) -> Result<usize> {
    if q.len() != valid.len() {
        return Err(Error::Size(format!(
            "{} Q-values for {} slots",
            q.len(),
            valid.len()
        )));
    }
    if q.iter().any(|v| v.is_nan()) {
        return Err(Error::Contract("Q-values contain NaN".into()));
    }
    argmax_valid(q, valid).ok_or_else(|| Error::Contract("no valid actions remain".into()))
}

/// Epsilon-greedy choice of an action slot. Invalid slots never win;
/// ties go to the lowest slot.
pub fn select_action<T: Scalar, R: Rng + ?Sized>(
    q: &[T],
    valid: &[bool],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    if q.len() != valid.len() {
        return Err(Error::Size(format!(
            "{} Q-values for {} slots",
            q.len(),
            valid.len()
        )));
    }
    let slots: Vec<usize> = (0..valid.len()).filter(|&j| valid[j]).collect();
    if slots.is_empty() {
        return Err(Error::Contract("no valid actions remain".into()));
    }
    if rng.random::<f64>() < epsilon {
        return Ok(slots[rng.random_range(0..slots.len())]);
    }
    greedy_action(q, valid)
}

/// Bootstrap target: the online net picks the next action, the target net
/// scores it. Terminal transitions return the reward alone.
pub fn q_target<T: Scalar, Q1: QFunction<T> + ?Sized, Q2: QFunction<T> + ?Sized>(
    tr: &Transition<T>,
    online: &Q1,
    target: &Q2,
    gamma: f64,
    actions: &ActionMap,
) -> Result<f64> {
    if tr.done || gamma == 0.0 {
        return Ok(tr.reward);
    }
    let valid = actions.valid_slots(&tr.next.indicator);
    let q = online.q_values(&tr.next)?;
    let Some(a) = argmax_valid(&q, &valid) else {
        return Ok(tr.reward);
    };
    let qt = target.q_values(&tr.next)?;
    let v = qt.get(a).ok_or(Error::Index {
        index: a,
        len: qt.len(),
    })?;
    Ok(tr.reward + gamma * v.as_f64())
}

/// `0.5 d^2` for `|d| < 1`, else `|d| - 0.5`.
pub fn smooth_l1(q: f64, target: f64) -> f64 {
    let d = (q - target).abs();
    if d < 1.0 {
        0.5 * d * d
    } else {
        d - 0.5
    }
}

/// Hard copy of the online parameters.
pub fn sync_target<T: Scalar>(online: &PhaseTransformer<T>, target: &mut PhaseTransformer<T>) {
    target.clone_from(online);
}

/// Greedy selection by a Q-network.
#[derive(Clone, Copy, Debug)]
pub struct TransformerPolicy<'a, T> {
    pub net: &'a PhaseTransformer<T>,
}

impl<T: Scalar> Policy<T> for TransformerPolicy<'_, T> {
    fn select(&mut self, env: &Environment<T>, state: &AcquisitionState<T>) -> Result<usize> {
        let q = self.net.forward(&state.image, &state.indicator)?;
        let valid = env.actions().valid_slots(&state.indicator);
        let slot = greedy_action(&q, &valid)?;
        Ok(env.actions().phase(slot))
    }
}

/// Greedy rollouts of `net` on every environment.
pub fn evaluate_greedy<T: Scalar>(
    net: &PhaseTransformer<T>,
    envs: &[Environment<T>],
) -> Result<Vec<Trajectory<T>>> {
    envs.iter()
        .map(|env| env.rollout(&mut TransformerPolicy { net }))
        .collect()
}

pub fn mean_final_quality<T: Scalar>(trajectories: &[Trajectory<T>]) -> f64 {
    if trajectories.is_empty() {
        return f64::NAN;
    }
    trajectories.iter().map(|t| t.final_quality()).sum::<f64>() / trajectories.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    pub epsilon: f64,
    pub episode_return: f64,
    /// Mean loss over this episode's gradient steps, if any were taken.
    pub loss_mean: Option<f64>,
    pub eval_ssim_ift: Option<f64>,
    pub wall_ms_per_selection: Option<f64>,
}

pub const LOG_HEADER: &str =
    "episode,epsilon,episode_return,loss_mean,eval_ssim_ift,wall_ms_per_selection";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{:.9}", x)).unwrap_or_default();
        format!(
            "{},{:.6},{:.9},{},{},{}",
            self.episode,
            self.epsilon,
            self.episode_return,
            opt(self.loss_mean),
            opt(self.eval_ssim_ift),
            self.wall_ms_per_selection
                .map(|x| format!("{:.4}", x))
                .unwrap_or_default()
        )
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub online: PhaseTransformer<T>,
    /// Parameters with the highest evaluation score and that score.
    pub best: Option<(PhaseTransformer<T>, f64)>,
    pub log: Vec<LogRow>,
    pub gradient_steps: u64,
    pub buffer: ReplayBuffer<T>,
}

/// Runs `cfg.episodes` episodes of double DQN on slices drawn uniformly
/// from `train`. Greedy evaluation on `eval` is logged every
/// `cfg.eval_every` episodes and after the last one.
pub fn train<T: Scalar>(
    net: PhaseTransformer<T>,
    train: &[Environment<T>],
    eval: &[Environment<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let actions = first.actions().clone();
    let episode_cfg = *first.config();
    if train.iter().chain(eval).any(|e| e.config() != &episode_cfg) {
        return Err(Error::Config(
            "environments disagree on the episode configuration".into(),
        ));
    }
    if net.cfg.phases() != episode_cfg.phases
        || net.cfg.image_rows != episode_cfg.frequencies
        || net.cfg.preselect != episode_cfg.preselect
    {
        return Err(Error::Config(format!(
            "network expects {}x{} with {} pre-selected phases, data is {}x{} with {}",
            net.cfg.image_rows,
            net.cfg.image_cols,
            net.cfg.preselect,
            episode_cfg.frequencies,
            episode_cfg.phases,
            episode_cfg.preselect
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut online = net;
    let mut target = online.clone();
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut best: Option<(PhaseTransformer<T>, f64)> = None;
    let mut gradient_steps = 0u64;

    for i in 0..cfg.episodes {
        let episode = cfg.first_episode + i;
        let epsilon = cfg.epsilon(i);
        let env = &train[rng.random_range(0..train.len())];
        let mut state = env.reset()?;
        let mut obs = Arc::new(state.observation());
        let mut episode_return = 0.0;
        let mut losses = Vec::new();
        let mut select_ms = 0.0;

        while !env.is_done(&state) {
            let t0 = cfg.record_timing.then(Instant::now);
            let q = online.forward(&state.image, &state.indicator)?;
            if q.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    episode,
                    step: state.step,
                    detail: format!("online Q-values {:?} after {} updates", q, adam.steps()),
                });
            }
            let slot = select_action(
                &q,
                &actions.valid_slots(&state.indicator),
                epsilon,
                &mut rng,
            )?;
            if let Some(t0) = t0 {
                select_ms += t0.elapsed().as_secs_f64() * 1e3;
            }
            let phase = actions.phase(slot);
            let out = env.step(&state, phase)?;
            let next = Arc::new(out.state.observation());
            episode_return += out.reward;
            buffer.push(Transition {
                state: Arc::clone(&obs),
                action: phase,
                reward: out.reward,
                next: Arc::clone(&next),
                done: out.done,
            });
            state = out.state;
            obs = next;

            if buffer.len() >= cfg.warmup.max(cfg.batch_size) {
                let batch = buffer.sample(cfg.batch_size, &mut rng)?;
                let loss = gradient_step(&mut online, &target, &batch, &actions, &mut adam, cfg)
                    .map_err(|e| match e {
                        Error::NonFinite { detail, .. } => Error::NonFinite {
                            episode,
                            step: state.step,
                            detail,
                        },
                        e => e,
                    })?;
                losses.push(loss);
                gradient_steps += 1;
                if gradient_steps.is_multiple_of(cfg.target_sync as u64) {
                    sync_target(&online, &mut target);
                }
            }
        }

        let last = i + 1 == cfg.episodes;
        let eval_ssim =
            if !eval.is_empty() && cfg.eval_every > 0 && ((i + 1) % cfg.eval_every == 0 || last) {
                let score = mean_final_quality(&evaluate_greedy(&online, eval)?);
                if best.as_ref().is_none_or(|(_, b)| score > *b) {
                    best = Some((online.clone(), score));
                }
                Some(score)
            } else {
                None
            };
        log.push(LogRow {
            episode,
            epsilon,
            episode_return,
            loss_mean: (!losses.is_empty())
                .then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            eval_ssim_ift: eval_ssim,
            wall_ms_per_selection: cfg
                .record_timing
                .then(|| select_ms / episode_cfg.selections as f64),
        });
    }

    Ok(TrainOutcome {
        online,
        best,
        log,
        gradient_steps,
        buffer,
    })
}

/// One Adam step on the mean smooth-L1 loss of `batch`; returns the loss.
fn gradient_step<T: Scalar>(
    online: &mut PhaseTransformer<T>,
    target: &PhaseTransformer<T>,
    batch: &[&Transition<T>],
    actions: &ActionMap,
    adam: &mut Adam<T>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let targets = batch
        .iter()
        .map(|tr| q_target(tr, &*online, target, cfg.gamma, actions))
        .collect::<Result<Vec<f64>>>()?;

    let mut tape = Tape::new();
    let bound = online.params.bind(&mut tape);
    let mut terms = Vec::with_capacity(batch.len());
    let mut q_taken = Vec::with_capacity(batch.len());
    for (tr, &y) in batch.iter().zip(&targets) {
        let q = forward_on_tape(
            &mut tape,
            &bound,
            &online.cfg,
            &tr.state.image,
            &tr.state.indicator,
        )?;
        let slot = actions
            .slot(tr.action)
            .ok_or_else(|| Error::Contract(format!("phase {} is not an action", tr.action)))?;
        let qa = tape.pick(q, slot)?;
        q_taken.push(tape.scalar(qa).as_f64());
        terms.push(tape.smooth_l1(qa, T::of(y))?);
    }
    let total = tape.sum(&terms)?;
    let loss_var = tape.scale(total, T::of(1.0 / batch.len() as f64));
    let loss = tape.scalar(loss_var).as_f64();
    let grads = tape.backward(loss_var)?;

    let shapes: Vec<usize> = online
        .params
        .named_tensors()
        .iter()
        .map(|(_, t)| t.len())
        .collect();
    let mut g: Vec<Vec<T>> = bound
        .all
        .iter()
        .zip(&shapes)
        .map(|(&v, &n)| grads.get_or_zero(v, n))
        .collect();
    let norm = g
        .iter()
        .flatten()
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if !loss.is_finite() || !norm.is_finite() {
        let qmax = q_taken.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        return Err(Error::NonFinite {
            episode: 0,
            step: 0,
            detail: format!(
                "loss {} gradient norm {} max |Q(s,a)| {} targets {:?} after {} updates",
                loss,
                norm,
                qmax,
                targets,
                adam.steps()
            ),
        });
    }
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        let s = T::of(cfg.grad_clip / norm);
        g.iter_mut().flatten().for_each(|x| *x *= s);
    }
    adam.adam_update(&mut online.params.tensors_mut(), &g)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::{KSpaceMatrix, PhaseIndicator, RealImage};
    use crate::transformer::PTConfig;
    use crate::Complex;

    struct Table(Vec<f64>);

    impl QFunction<f64> for Table {
        fn q_values(&self, _: &Observation<f64>) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    fn obs(p: usize, set: &[usize], step: usize) -> Arc<Observation<f64>> {
        Arc::new(Observation {
            image: RealImage::zeros(2, p),
            indicator: PhaseIndicator::from_phases(p, set).unwrap(),
            step,
        })
    }

    fn transition(reward: f64, done: bool) -> Transition<f64> {
        // P = 4, L = 1: phase 2 pre-selected, slots map to phases 0, 1, 3.
        Transition {
            state: obs(4, &[2], 0),
            action: 0,
            reward,
            next: obs(4, &[2], 1),
            done,
        }
    }

    #[test]
    fn greedy_and_masked_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = [0.1f32, 0.9, 0.3];
        assert_eq!(select_action(&q, &[true; 3], 0.0, &mut rng).unwrap(), 1);
        assert_eq!(
            select_action(&q, &[true, false, true], 0.0, &mut rng).unwrap(),
            2
        );
        assert_eq!(
            select_action(&[1.0f32, 1.0, 0.5], &[true; 3], 0.0, &mut rng).unwrap(),
            0
        );
        assert!(matches!(
            select_action(&q, &[false; 3], 0.0, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn full_exploration_is_uniform() {
        let n = 338;
        let draws = 100_000;
        let q = vec![0.0f32; n];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            counts[select_action(&q, &vec![true; n], 1.0, &mut rng).unwrap()] += 1;
        }
        let e = draws as f64 / n as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // mean n-1, sd sqrt(2(n-1)); three sigma
        let df = (n - 1) as f64;
        assert!(chi2 < df + 3.0 * (2.0 * df).sqrt(), "chi2 {chi2}");
    }

    #[test]
    fn double_dqn_target() {
        let actions = ActionMap::new(4, 1);
        let online = Table(vec![1.0, 3.0, 2.0]);
        let target = Table(vec![5.0, 0.0, 7.0]);
        assert_eq!(
            q_target(&transition(0.5, false), &online, &target, 0.5, &actions).unwrap(),
            0.5
        );
        assert_eq!(
            q_target(&transition(0.25, true), &online, &target, 0.5, &actions).unwrap(),
            0.25
        );
        assert_eq!(
            q_target(&transition(0.5, false), &online, &target, 0.0, &actions).unwrap(),
            0.5
        );
        // evaluation by the target network, selection by the online one
        let swapped = q_target(&transition(0.5, false), &target, &online, 0.5, &actions).unwrap();
        assert_eq!(swapped, 0.5 + 0.5 * 2.0);
    }

    #[test]
    fn target_skips_acquired_slots() {
        let actions = ActionMap::new(4, 1);
        let mut tr = transition(0.0, false);
        // phase 1 (slot 1) already taken
        tr.next = obs(4, &[1, 2], 1);
        let v = q_target(
            &tr,
            &Table(vec![1.0, 3.0, 2.0]),
            &Table(vec![5.0, 0.0, 7.0]),
            1.0,
            &actions,
        )
        .unwrap();
        assert_eq!(v, 7.0);
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(0.0, 0.0), 0.0);
        assert_eq!(smooth_l1(0.5, 0.0), 0.125);
        assert_eq!(smooth_l1(-2.0, 0.0), 1.5);
        assert!((smooth_l1(1.0, 0.0) - 0.5).abs() < 1e-12);
        assert!((smooth_l1(1.0 - 1e-12, 0.0) - smooth_l1(1.0 + 1e-12, 0.0)).abs() < 1e-9);
    }

    #[test]
    fn replay_fifo_and_sampling() {
        let mut buf = ReplayBuffer::<f64>::new(5).unwrap();
        for k in 0..8 {
            buf.push(transition(k as f64, false));
            assert!(buf.len() <= 5);
        }
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = buf.sample(5, &mut rng).unwrap();
        let mut seen: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, rewards);
        assert!(buf.sample(6, &mut rng).is_err());
        assert!(ReplayBuffer::<f64>::new(0).is_err());
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = TrainConfig {
            episodes: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!((cfg.epsilon(15) - 0.525).abs() < 1e-12);
        assert!((cfg.epsilon(30) - 0.05).abs() < 1e-12);
        assert!((cfg.epsilon(99) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        for bad in [
            TrainConfig {
                gamma: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                epsilon_end: -0.1,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                warmup: 30_000,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn sync_is_exact_and_idempotent() {
        let cfg = PTConfig {
            image_rows: 8,
            image_cols: 8,
            patch_rows: 4,
            patch_cols: 4,
            embed_dim: 8,
            hidden_dim: 8,
            layers: 1,
            heads: 2,
            preselect: 2,
            phase_token: true,
        };
        let online = PhaseTransformer::<f32>::new(cfg, 1).unwrap();
        let mut target = PhaseTransformer::<f32>::new(cfg, 2).unwrap();
        assert_ne!(online, target);
        sync_target(&online, &mut target);
        assert_eq!(online, target);
        sync_target(&online, &mut target);
        assert_eq!(online, target);
        let img = RealImage::new(8, 8, (0..64).map(|i| i as f32 / 64.0).collect()).unwrap();
        let b = PhaseIndicator::from_phases(8, &[3, 4]).unwrap();
        assert_eq!(
            online.forward(&img, &b).unwrap(),
            target.forward(&img, &b).unwrap()
        );
    }

    fn tiny_env(seed: u64) -> Environment<f32> {
        let img = crate::phantom::generate_phantom::<f32>(&crate::phantom::PhantomSpec::random(
            8, 8, 3, seed,
        ))
        .unwrap();
        let k = crate::kspace::fft2_centered(&img).unwrap();
        Environment::new(k, crate::env::EpisodeConfig::new(8, 8, 2, 3)).unwrap()
    }

    fn tiny_net() -> PhaseTransformer<f32> {
        PhaseTransformer::new(
            PTConfig {
                image_rows: 8,
                image_cols: 8,
                patch_rows: 4,
                patch_cols: 4,
                embed_dim: 8,
                hidden_dim: 8,
                layers: 1,
                heads: 2,
                preselect: 2,
                phase_token: true,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn one_episode_fills_buffer_with_m_transitions() {
        let cfg = TrainConfig {
            episodes: 1,
            warmup: 100,
            buffer_capacity: 100,
            ..TrainConfig::default()
        };
        let out = train(tiny_net(), &[tiny_env(0)], &[], &cfg).unwrap();
        assert_eq!(out.buffer.len(), 3);
        assert_eq!(out.gradient_steps, 0);
        assert_eq!(out.log.len(), 1);
        assert!(out.buffer.iter().last().unwrap().done);
        let r: f64 = out.buffer.iter().map(|t| t.reward).sum();
        assert!((r - out.log[0].episode_return).abs() < 1e-12);
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = TrainConfig {
            episodes: 12,
            warmup: 8,
            batch_size: 4,
            target_sync: 5,
            eval_every: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let envs = [tiny_env(0), tiny_env(1)];
        let a = train(tiny_net(), &envs, &envs[..1], &cfg).unwrap();
        let b = train(tiny_net(), &envs, &envs[..1], &cfg).unwrap();
        assert!(a.gradient_steps > 0);
        assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
        assert_eq!(a.online, b.online);
        assert_ne!(a.online, tiny_net());
        assert!(a.best.is_some());
    }

    #[test]
    fn mismatched_network_is_rejected() {
        let mut net = tiny_net();
        net.cfg.preselect = 3;
        let cfg = TrainConfig {
            episodes: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(net, &[tiny_env(0)], &[], &cfg),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train(tiny_net(), &[], &[], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let mut net = tiny_net();
        net.params.head_b2.data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            episodes: 4,
            warmup: 2,
            batch_size: 2,
            epsilon_start: 1.0,
            epsilon_end: 1.0,
            ..TrainConfig::default()
        };
        match train(net, &[tiny_env(0)], &[], &cfg) {
            Err(Error::NonFinite { detail, .. }) => assert!(detail.contains("Q")),
            other => panic!(
                "expected a non-finite abort, got {:?}",
                other.map(|o| o.log)
            ),
        }
    }

    /// One column holds 90% of the energy left after pre-selection; the
    /// trained policy should take it first.
    #[test]
    fn toy_task_learns_dominant_phase() {
        let (f, p) = (8usize, 8usize);
        let dominant = 1usize;
        let mut data = vec![Complex::new(0.0f32, 0.0); f * p];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for r in 0..f {
            for c in 0..p {
                let w = match c {
                    3 | 4 => 1.0,
                    c if c == dominant => 3.0,
                    _ => 0.4,
                };
                data[r * p + c] = Complex::new(
                    w * rng.random_range(-1.0..1.0),
                    w * rng.random_range(-1.0..1.0),
                );
            }
        }
        let k = KSpaceMatrix::new(f, p, data).unwrap();
        let env = Environment::new(k, crate::env::EpisodeConfig::new(f, p, 2, 2)).unwrap();
        let residual: Vec<f64> = (0..p)
            .filter(|c| ![3, 4].contains(c))
            .map(|c| {
                env.k_full()
                    .column(c)
                    .iter()
                    .map(|z| z.norm_sqr() as f64)
                    .sum()
            })
            .collect();
        let share = residual[dominant] / residual.iter().sum::<f64>();
        assert!(share > 0.85, "dominant share {share}");
        // the dominant phase is also the best first move by immediate reward
        let s0 = env.reset().unwrap();
        assert_eq!(
            crate::baselines::greedy_oracle(&env, &s0).unwrap(),
            dominant
        );

        let cfg = TrainConfig {
            episodes: 2000,
            warmup: 50,
            batch_size: 8,
            target_sync: 100,
            learning_rate: 1e-3,
            buffer_capacity: 2000,
            ..TrainConfig::default()
        };
        let out = train(tiny_net(), std::slice::from_ref(&env), &[], &cfg).unwrap();
        let mut hits = 0;
        let mut explore = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let q = out.online.forward(&s0.image, &s0.indicator).unwrap();
            let slot = select_action(
                &q,
                &env.actions().valid_slots(&s0.indicator),
                0.0,
                &mut explore,
            )
            .unwrap();
            hits += (env.actions().phase(slot) == dominant) as usize;
        }
        assert!(hits >= 95, "{hits}/100");
    }

    proptest::proptest! {
        #[test]
        fn replay_keeps_newest(capacity in 1usize..40, pushes in 0usize..120) {
            let mut buf = ReplayBuffer::<f64>::new(capacity).unwrap();
            for k in 0..pushes {
                buf.push(transition(k as f64, false));
                proptest::prop_assert!(buf.len() <= capacity);
            }
            let kept: Vec<f64> = buf.iter().map(|t| t.reward).collect();
            let expect: Vec<f64> = (pushes.saturating_sub(capacity)..pushes).map(|k| k as f64).collect();
            proptest::prop_assert_eq!(kept, expect);
        }

        #[test]
        fn smooth_l1_nonnegative_and_symmetric(q in -50.0f64..50.0, t in -50.0f64..50.0) {
            let v = smooth_l1(q, t);
            proptest::prop_assert!(v >= 0.0);
            proptest::prop_assert_eq!(v, smooth_l1(t, q));
            proptest::prop_assert!(v <= 0.5 * (q - t).powi(2) + 1e-12);
        }
    }
}
