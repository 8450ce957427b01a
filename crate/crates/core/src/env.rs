//! Episodic acquisition environment.
//!
//! An episode starts from the `L` pre-selected center phases and performs
//! `M` learned selections. Each step inserts one phase column into the
//! partial k-space, reconstructs the undersampled image by inverse FFT and
//! rewards the SSIM gain against the fully sampled image.

use std::sync::Arc;

use crate::baselines::Policy;
use crate::error::{Error, Result};
use crate::kspace::{
    apply_phase_mask, centered_phases, insert_phase, magnitude_normalize, Fft2Plan, KSpaceMatrix,
    PhaseIndicator, RealImage,
};
use crate::metrics::{ssim, SsimParams};
use crate::num::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    /// `F`
    pub frequencies: usize,
    /// `P`
    pub phases: usize,
    /// `L`, acquired unconditionally around the k-space center.
    pub preselect: usize,
    /// `M`, learned selections per episode.
    pub selections: usize,
    pub ssim: SsimParams,
}

impl EpisodeConfig {
    pub fn new(frequencies: usize, phases: usize, preselect: usize, selections: usize) -> Self {
        Self {
            frequencies,
            phases,
            preselect,
            selections,
            ssim: SsimParams::default(),
        }
    }

    /// 64x64 slices, 6 pre-selected and 10 learned phases (4x acceleration).
    pub fn desk() -> Self {
        Self::new(64, 64, 6, 10)
    }

    /// 640x368 slices, 30 pre-selected and 70 learned phases.
    pub fn paper_scale() -> Self {
        Self::new(640, 368, 30, 70)
    }

    /// `C = L + M`
    pub fn acquired(&self) -> usize {
        self.preselect + self.selections
    }

    pub fn acceleration(&self) -> f64 {
        self.phases as f64 / self.acquired() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.frequencies < 2 || self.phases < 2 {
            return Err(Error::Config(format!(
                "slices must be at least 2x2, got {}x{}",
                self.frequencies, self.phases
            )));
        }
        if self.preselect < 1 || self.selections < 1 {
            return Err(Error::Config(
                "preselect and selections must both be at least 1".into(),
            ));
        }
        if self.acquired() > self.phases {
            return Err(Error::Config(format!(
                "preselect + selections = {} exceeds {} phases",
                self.acquired(),
                self.phases
            )));
        }
        self.ssim.validate()?;
        if self.frequencies < self.ssim.window || self.phases < self.ssim.window {
            return Err(Error::Config("slice smaller than the SSIM window".into()));
        }
        Ok(())
    }
}

/// Maps Q-network output slots to physical phase indices.
///
/// Slot `j` scores the `j`-th phase, in ascending order, outside the
/// pre-selection set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionMap {
    slots: Vec<usize>,
    slot_of: Vec<Option<usize>>,
    preselected: Vec<usize>,
}

impl ActionMap {
    pub fn new(phases: usize, preselect: usize) -> Self {
        let preselected = centered_phases(phases, preselect);
        let slots: Vec<usize> = (0..phases).filter(|j| !preselected.contains(j)).collect();
        let mut slot_of = vec![None; phases];
        for (s, &p) in slots.iter().enumerate() {
            slot_of[p] = Some(s);
        }
        Self {
            slots,
            slot_of,
            preselected,
        }
    }

    /// Number of slots, `P - L`.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn phase(&self, slot: usize) -> usize {
        self.slots[slot]
    }

    pub fn slot(&self, phase: usize) -> Option<usize> {
        self.slot_of.get(phase).copied().flatten()
    }

    pub fn preselected(&self) -> &[usize] {
        &self.preselected
    }

    /// Per-slot availability under indicator `b`.
    pub fn valid_slots(&self, b: &PhaseIndicator) -> Vec<bool> {
        self.slots.iter().map(|&p| !b.get(p)).collect()
    }
}

/// What the Q-network sees of a state.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation<T> {
    pub image: RealImage<T>,
    pub indicator: PhaseIndicator,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionState<T> {
    pub kspace: KSpaceMatrix<T>,
    pub indicator: PhaseIndicator,
    pub image: RealImage<T>,
    /// Learned selections made so far.
    pub step: usize,
    /// SSIM of `image` against the ground truth, cached for the next reward.
    pub quality: f64,
}

impl<T: Scalar> AcquisitionState<T> {
    pub fn observation(&self) -> Observation<T> {
        Observation {
            image: self.image.clone(),
            indicator: self.indicator.clone(),
            step: self.step,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Transition<T> {
    pub state: Arc<Observation<T>>,
    /// Physical phase index.
    pub action: usize,
    pub reward: f64,
    pub next: Arc<Observation<T>>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome<T> {
    pub state: AcquisitionState<T>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    /// Selected phases in acquisition order.
    pub phases: Vec<usize>,
    pub rewards: Vec<f64>,
    pub initial_quality: f64,
    pub final_state: AcquisitionState<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn final_quality(&self) -> f64 {
        self.final_state.quality
    }
}

/// Environment for one fully sampled slice.
#[derive(Clone, Debug)]
pub struct Environment<T: Scalar> {
    cfg: EpisodeConfig,
    k_full: KSpaceMatrix<T>,
    gt_image: RealImage<T>,
    gt_max: T,
    plan: Fft2Plan<T>,
    actions: ActionMap,
}

impl<T: Scalar> Environment<T> {
    pub fn new(k_full: KSpaceMatrix<T>, mut cfg: EpisodeConfig) -> Result<Self> {
        cfg.validate()?;
        if (k_full.rows(), k_full.cols()) != (cfg.frequencies, cfg.phases) {
            return Err(Error::Size(format!(
                "slice is {}x{}, episode expects {}x{}",
                k_full.rows(),
                k_full.cols(),
                cfg.frequencies,
                cfg.phases
            )));
        }
        let plan = Fft2Plan::new(cfg.frequencies, cfg.phases)?;
        let gt = plan.inverse(&k_full)?;
        let gt_max = gt.max_magnitude();
        let gt_image = magnitude_normalize(&gt, gt_max)?;
        cfg.ssim.dynamic_range = gt_image.max().as_f64();
        Ok(Self {
            actions: ActionMap::new(cfg.phases, cfg.preselect),
            cfg,
            k_full,
            gt_image,
            gt_max,
            plan,
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn actions(&self) -> &ActionMap {
        &self.actions
    }

    pub fn ground_truth(&self) -> &RealImage<T> {
        &self.gt_image
    }

    pub fn k_full(&self) -> &KSpaceMatrix<T> {
        &self.k_full
    }

    /// Normalized magnitude reconstruction of a (partial) k-space.
    pub fn reconstruct(&self, k: &KSpaceMatrix<T>) -> Result<RealImage<T>> {
        magnitude_normalize(&self.plan.inverse(k)?, self.gt_max)
    }

    pub fn quality(&self, image: &RealImage<T>) -> Result<f64> {
        ssim(image, &self.gt_image, &self.cfg.ssim)
    }

    pub fn state_for(&self, indicator: PhaseIndicator, step: usize) -> Result<AcquisitionState<T>> {
        let kspace = apply_phase_mask(&self.k_full, &indicator)?;
        let image = self.reconstruct(&kspace)?;
        let quality = self.quality(&image)?;
        Ok(AcquisitionState {
            kspace,
            indicator,
            image,
            step,
            quality,
        })
    }

    pub fn reset(&self) -> Result<AcquisitionState<T>> {
        let b = PhaseIndicator::from_phases(self.cfg.phases, self.actions.preselected())?;
        self.state_for(b, 0)
    }

    pub fn is_done(&self, s: &AcquisitionState<T>) -> bool {
        s.step >= self.cfg.selections
    }

    /// Phases not yet acquired, ascending.
    pub fn valid_actions(&self, s: &AcquisitionState<T>) -> Vec<usize> {
        s.indicator.zeros_idx()
    }

    /// Acquires phase `a`.
    pub fn step(&self, s: &AcquisitionState<T>, a: usize) -> Result<StepOutcome<T>> {
        if self.is_done(s) {
            return Err(Error::EpisodeFinished(s.step));
        }
        let indicator = s.indicator.set_indicator(a)?;
        let kspace = insert_phase(&s.kspace, &self.k_full, a)?;
        let image = self.reconstruct(&kspace)?;
        let quality = self.quality(&image)?;
        let step = s.step + 1;
        Ok(StepOutcome {
            reward: quality - s.quality,
            done: step == self.cfg.selections,
            state: AcquisitionState {
                kspace,
                indicator,
                image,
                step,
                quality,
            },
        })
    }

    /// Runs one full episode under `policy`.
    pub fn rollout<P: Policy<T> + ?Sized>(&self, policy: &mut P) -> Result<Trajectory<T>> {
        let mut state = self.reset()?;
        let initial_quality = state.quality;
        let mut phases = Vec::with_capacity(self.cfg.selections);
        let mut rewards = Vec::with_capacity(self.cfg.selections);
        while !self.is_done(&state) {
            let a = policy.select(self, &state)?;
            let out = self.step(&state, a)?;
            phases.push(a);
            rewards.push(out.reward);
            state = out.state;
        }
        Ok(Trajectory {
            phases,
            rewards,
            initial_quality,
            final_state: state,
        })
    }
}
