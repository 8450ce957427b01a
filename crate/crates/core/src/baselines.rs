//! Reference selection policies.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{AcquisitionState, Environment};
use crate::error::{Error, Result};
use crate::num::Scalar;

/// Chooses the next phase to acquire. Returns a physical phase index.
pub trait Policy<T: Scalar> {
    fn select(&mut self, env: &Environment<T>, state: &AcquisitionState<T>) -> Result<usize>;
}

impl<T: Scalar, P: Policy<T> + ?Sized> Policy<T> for Box<P> {
    fn select(&mut self, env: &Environment<T>, state: &AcquisitionState<T>) -> Result<usize> {
        (**self).select(env, state)
    }
}

fn nonempty(valid: &[usize]) -> Result<()> {
    if valid.is_empty() {
        return Err(Error::Contract("no valid actions remain".into()));
    }
    Ok(())
}

/// Uniform draw from `valid`.
pub fn random_policy<R: rand::Rng + ?Sized>(valid: &[usize], rng: &mut R) -> Result<usize> {
    nonempty(valid)?;
    Ok(*valid.choose(rng).unwrap())
}

/// Unselected phase closest to the center column `P / 2`, ties to the lower index.
pub fn lowfreq_policy(valid: &[usize], phases: usize) -> Result<usize> {
    nonempty(valid)?;
    let center = (phases / 2) as isize;
    Ok(*valid
        .iter()
        .min_by_key(|&&j| ((j as isize - center).abs(), j))
        .unwrap())
}

/// Immediate reward of every valid action, in `valid_actions` order.
pub fn reward_table<T: Scalar>(
    env: &Environment<T>,
    state: &AcquisitionState<T>,
) -> Result<Vec<(usize, f64)>> {
    env.valid_actions(state)
        .into_iter()
        .map(|a| Ok((a, env.step(state, a)?.reward)))
        .collect()
}

/// One-step lookahead: the action with the largest immediate reward,
/// ties to the lower index.
pub fn greedy_oracle<T: Scalar>(
    env: &Environment<T>,
    state: &AcquisitionState<T>,
) -> Result<usize> {
    let table = reward_table(env, state)?;
    let mut best: Option<(usize, f64)> = None;
    for (a, r) in table {
        if best.is_none_or(|(_, br)| r > br) {
            best = Some((a, r));
        }
    }
    best.map(|(a, _)| a)
        .ok_or_else(|| Error::Contract("no valid actions remain".into()))
}

#[derive(Clone, Debug)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<T: Scalar> Policy<T> for RandomPolicy {
    fn select(&mut self, env: &Environment<T>, state: &AcquisitionState<T>) -> Result<usize> {
        random_policy(&env.valid_actions(state), &mut self.rng)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LowFreqPolicy;

impl<T: Scalar> Policy<T> for LowFreqPolicy {
    fn select(&mut self, env: &Environment<T>, state: &AcquisitionState<T>) -> Result<usize> {
        lowfreq_policy(&env.valid_actions(state), env.config().phases)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GreedyOraclePolicy;

impl<T: Scalar> Policy<T> for GreedyOraclePolicy {
    fn select(&mut self, env: &Environment<T>, state: &AcquisitionState<T>) -> Result<usize> {
        greedy_oracle(env, state)
    }
}

/// Replays a fixed list of phases; does not check validity itself.
#[derive(Clone, Debug)]
pub struct FixedOrderPolicy {
    order: Vec<usize>,
    next: usize,
}

impl FixedOrderPolicy {
    pub fn new(order: Vec<usize>) -> Self {
        Self { order, next: 0 }
    }
}

impl<T: Scalar> Policy<T> for FixedOrderPolicy {
    fn select(&mut self, _env: &Environment<T>, _state: &AcquisitionState<T>) -> Result<usize> {
        let a = *self
            .order
            .get(self.next)
            .ok_or_else(|| Error::Contract("fixed order exhausted".into()))?;
        self.next += 1;
        Ok(a)
    }
}
