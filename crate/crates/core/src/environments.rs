//! Worked control environments (thermostat, CartPole) and the synthetic
//! oracles that label data for the learning modules.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::PreferenceRecord;
use crate::error::{Error, Result};
use crate::numerics::sigmoid;
use crate::policy::Token;
use crate::reward_models::LinearRewardModel;
use crate::rng::Seed;
use crate::scalar::{lit, Scalar};

pub const THERMOSTAT_TARGET: f64 = 70.0;
pub const THERMOSTAT_BAND: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeaterAction {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermostatParams<T> {
    pub heat_rate: T,
    pub cool_rate: T,
    /// Standard deviation of Gaussian noise added to each transition.
    pub noise_std: T,
}

impl<T: Scalar> Default for ThermostatParams<T> {
    fn default() -> Self {
        ThermostatParams {
            heat_rate: lit(1.5),
            cool_rate: lit(1.0),
            noise_std: T::zero(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermostatState<T> {
    pub temperature: T,
}

/// Deterministic part of the transition plus the band reward.
pub fn thermostat_step<T: Scalar>(
    state: ThermostatState<T>,
    action: HeaterAction,
    params: &ThermostatParams<T>,
) -> (ThermostatState<T>, T) {
    let delta = match action {
        HeaterAction::On => params.heat_rate,
        HeaterAction::Off => -params.cool_rate,
    };
    let next = ThermostatState {
        temperature: state.temperature + delta,
    };
    (next, thermostat_reward(next.temperature))
}

/// Transition with the configured Gaussian noise drawn from `seed`.
pub fn thermostat_step_noisy<T: Scalar>(
    state: ThermostatState<T>,
    action: HeaterAction,
    params: &ThermostatParams<T>,
    seed: Seed,
) -> (ThermostatState<T>, T) {
    let (mut next, _) = thermostat_step(state, action, params);
    if params.noise_std > T::zero() {
        let normal = Normal::new(0.0, params.noise_std.as_f64()).expect("finite noise scale");
        next.temperature += lit(normal.sample(&mut seed.rng()));
    }
    (next, thermostat_reward(next.temperature))
}

/// 1 inside the comfort band around the target, else 0.
pub fn thermostat_reward<T: Scalar>(temperature: T) -> T {
    if (temperature - lit(THERMOSTAT_TARGET)).abs() <= lit(THERMOSTAT_BAND) {
        T::one()
    } else {
        T::zero()
    }
}

/// Probability of switching the heater on under the example policy: on below
/// the target, off otherwise.
pub fn thermostat_example_policy<T: Scalar>(state: ThermostatState<T>) -> T {
    if state.temperature < lit(THERMOSTAT_TARGET) {
        T::one()
    } else {
        T::zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams<T> {
    pub m_c: T,
    pub m_p: T,
    /// Pole half-length.
    pub l: T,
    pub g: T,
    #[serde(rename = "F")]
    pub force: T,
    pub dt: T,
}

impl<T: Scalar> Default for CartPoleParams<T> {
    fn default() -> Self {
        CartPoleParams {
            m_c: lit(1.0),
            m_p: lit(0.1),
            l: lit(0.5),
            g: lit(9.8),
            force: lit(10.0),
            dt: lit(0.02),
        }
    }
}

impl<T: Scalar> CartPoleParams<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("m_c", self.m_c),
            ("m_p", self.m_p),
            ("l", self.l),
            ("g", self.g),
            ("F", self.force),
            ("dt", self.dt),
        ] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::validation(name, "must be finite and strictly positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CartPoleState<T> {
    pub x: T,
    pub x_dot: T,
    pub theta: T,
    pub theta_dot: T,
}

pub const CARTPOLE_X_LIMIT: f64 = 2.4;
pub const CARTPOLE_THETA_LIMIT_DEG: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Push {
    Left,
    Right,
}

pub fn cartpole_done<T: Scalar>(s: &CartPoleState<T>) -> bool {
    let theta_limit = T::lit(CARTPOLE_THETA_LIMIT_DEG).to_radians();
    s.x.abs() > lit(CARTPOLE_X_LIMIT) || s.theta.abs() > theta_limit
}

/// One Euler step under an arbitrary applied force.
pub fn cartpole_step_force<T: Scalar>(
    s: CartPoleState<T>,
    force: T,
    p: &CartPoleParams<T>,
) -> Result<(CartPoleState<T>, T, bool)> {
    if [s.x, s.x_dot, s.theta, s.theta_dot].iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cartpole state is not finite"));
    }
    let total = p.m_c + p.m_p;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + p.m_p * p.l * s.theta_dot * s.theta_dot * sin) / total;
    let theta_acc = (p.g * sin - cos * temp) / (p.l * (lit::<T>(4.0) / lit(3.0) - p.m_p * cos * cos / total));
    let x_acc = temp - p.m_p * p.l * theta_acc * cos / total;
    let next = CartPoleState {
        x: s.x + p.dt * s.x_dot,
        x_dot: s.x_dot + p.dt * x_acc,
        theta: s.theta + p.dt * s.theta_dot,
        theta_dot: s.theta_dot + p.dt * theta_acc,
    };
    let done = cartpole_done(&next);
    let reward = if done { T::zero() } else { T::one() };
    Ok((next, reward, done))
}

/// One step with the action's ±F push.
pub fn cartpole_step<T: Scalar>(
    s: CartPoleState<T>,
    action: Push,
    p: &CartPoleParams<T>,
) -> Result<(CartPoleState<T>, T, bool)> {
    let force = match action {
        Push::Left => -p.force,
        Push::Right => p.force,
    };
    cartpole_step_force(s, force, p)
}

/// Bradley-Terry labeler backed by a latent sequence reward model.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceOracle<T> {
    pub latent: LinearRewardModel<T>,
}

impl<T: Scalar> PreferenceOracle<T> {
    pub fn new(latent: LinearRewardModel<T>) -> Self {
        PreferenceOracle { latent }
    }

    pub fn reward(&self, prompt: &[Token], completion: &[Token]) -> Result<T> {
        self.latent.score(prompt, completion)
    }

    /// `P(y1 ≻ y2 | x)`.
    pub fn preference_probability(&self, prompt: &[Token], y1: &[Token], y2: &[Token]) -> Result<T> {
        Ok(sigmoid(self.reward(prompt, y1)? - self.reward(prompt, y2)?))
    }

    pub fn sample_preference(
        &self,
        prompt: &[Token],
        y1: &[Token],
        y2: &[Token],
        seed: Seed,
    ) -> Result<PreferenceRecord> {
        if y1 == y2 {
            return Err(Error::invalid("sample_preference needs distinct completions"));
        }
        let p = self.preference_probability(prompt, y1, y2)?;
        let u: T = lit(seed.rng().gen::<f64>());
        let (c, r) = if u < p { (y1, y2) } else { (y2, y1) };
        Ok(PreferenceRecord::new(prompt.to_vec(), c.to_vec(), r.to_vec()))
    }

    /// Deterministic label: the higher latent reward wins; ties go to `y1`.
    pub fn label_by_reward(&self, prompt: &[Token], y1: &[Token], y2: &[Token]) -> Result<PreferenceRecord> {
        let (c, r) = if self.reward(prompt, y1)? >= self.reward(prompt, y2)? {
            (y1, y2)
        } else {
            (y2, y1)
        };
        Ok(PreferenceRecord::new(prompt.to_vec(), c.to_vec(), r.to_vec()))
    }
}

/// A prompt with a checkable answer. The answer is read from the token that
/// follows the last occurrence of `marker`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiableTask {
    pub prompt: Vec<Token>,
    pub answer_token: Token,
    pub marker: Token,
}

impl VerifiableTask {
    pub fn new(prompt: Vec<Token>, answer_token: Token, marker: Token, vocab_size: usize) -> Result<Self> {
        if answer_token as usize >= vocab_size {
            return Err(Error::validation(
                "answer_token",
                format!("{answer_token} >= vocab size {vocab_size}"),
            ));
        }
        if marker as usize >= vocab_size {
            return Err(Error::validation(
                "marker",
                format!("{marker} >= vocab size {vocab_size}"),
            ));
        }
        Ok(VerifiableTask {
            prompt,
            answer_token,
            marker,
        })
    }

    pub fn extract_answer(&self, completion: &[Token]) -> Option<Token> {
        let i = completion.iter().rposition(|&t| t == self.marker)?;
        completion.get(i + 1).copied()
    }
}

pub fn verifiable_reward<T: Scalar>(task: &VerifiableTask, completion: &[Token]) -> T {
    if task.extract_answer(completion) == Some(task.answer_token) {
        T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward_models::{FeatureSpec, HeadKind};
    use proptest::prelude::*;

    #[test]
    fn thermostat_examples() {
        let p = ThermostatParams::<f64>::default();
        assert_eq!(thermostat_reward(70.0_f64), 1.0);
        assert_eq!(thermostat_reward(72.0_f64), 1.0);
        assert_eq!(thermostat_reward(72.5_f64), 0.0);
        let s = ThermostatState { temperature: 65.0 };
        assert_eq!(thermostat_example_policy(s), 1.0);
        assert_eq!(thermostat_example_policy(ThermostatState { temperature: 71.0 }), 0.0);
        let (n, r) = thermostat_step(s, HeaterAction::On, &p);
        assert_eq!(n.temperature, 66.5);
        assert_eq!(r, 0.0);
        let (n, r) = thermostat_step(ThermostatState { temperature: 71.0 }, HeaterAction::Off, &p);
        assert_eq!((n.temperature, r), (70.0, 1.0));
    }

    #[test]
    fn thermostat_noise_is_seeded() {
        let p = ThermostatParams {
            noise_std: 0.1,
            ..ThermostatParams::<f64>::default()
        };
        let s = ThermostatState { temperature: 69.0 };
        let a = thermostat_step_noisy(s, HeaterAction::On, &p, Seed::new(3));
        let b = thermostat_step_noisy(s, HeaterAction::On, &p, Seed::new(3));
        assert_eq!(a, b);
        assert!((a.0.temperature - 70.5).abs() < 1.0);
        assert_ne!(a.0.temperature, 70.5);
    }

    #[test]
    fn cartpole_fixed_point_and_termination() {
        let p = CartPoleParams::<f64>::default();
        let (s, r, done) = cartpole_step_force(CartPoleState::default(), 0.0, &p).unwrap();
        assert_eq!(s, CartPoleState::default());
        assert_eq!((r, done), (1.0, false));
        let tilted = CartPoleState {
            theta: 13f64.to_radians(),
            ..Default::default()
        };
        assert!(cartpole_done(&tilted));
        assert!(!cartpole_done(&CartPoleState {
            theta: 11f64.to_radians(),
            ..Default::default()
        }));
        assert!(cartpole_done(&CartPoleState {
            x: 2.41,
            ..Default::default()
        }));
        let bad = CartPoleState {
            x: f64::NAN,
            ..Default::default()
        };
        assert!(cartpole_step(bad, Push::Left, &p).is_err());
        assert!(CartPoleParams { dt: 0.0, ..p }.validate().is_err());
    }

    #[test]
    fn cartpole_first_step_by_hand() {
        // From rest a push only changes velocities on the first Euler step.
        let p = CartPoleParams::<f64>::default();
        let (s, _, _) = cartpole_step(CartPoleState::default(), Push::Right, &p).unwrap();
        let temp = 10.0 / 1.1;
        let theta_acc = -temp / (0.5 * (4.0 / 3.0 - 0.1 / 1.1));
        let x_acc = temp - 0.1 * 0.5 * theta_acc / 1.1;
        assert_eq!(s.x, 0.0);
        assert_eq!(s.theta, 0.0);
        assert!((s.x_dot - 0.02 * x_acc).abs() < 1e-15);
        assert!((s.theta_dot - 0.02 * theta_acc).abs() < 1e-15);
    }

    fn oracle() -> PreferenceOracle<f64> {
        let mut w = vec![0.0; 4];
        w[2] = 1.0;
        PreferenceOracle::new(LinearRewardModel::new(HeadKind::Sequence, FeatureSpec::counts(4), w).unwrap())
    }

    #[test]
    fn preference_sampling() {
        let o = oracle();
        // Same latent reward: probability exactly one half.
        assert_eq!(o.preference_probability(&[1], &[3], &[1]).unwrap(), 0.5);
        assert!(o.sample_preference(&[1], &[3], &[3], Seed::new(0)).is_err());
        // Gap of 20 always picks y1.
        let y1 = vec![2; 20];
        let base = Seed::new(5).derive("sat");
        for i in 0..10_000 {
            let rec = o.sample_preference(&[1], &y1, &[3], base.index(i)).unwrap();
            assert_eq!(rec.chosen, y1);
        }
        // Gap of 1: empirical rate within 3σ of σ(1).
        let n = 100_000;
        let base = Seed::new(6).derive("gap1");
        let hits = (0..n)
            .filter(|&i| o.sample_preference(&[1], &[2], &[3], base.index(i)).unwrap().chosen == vec![2])
            .count();
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(((hits as f64 / n as f64) - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn preference_sampling_antisymmetric() {
        let o = oracle();
        let n = 20_000;
        let base = Seed::new(9).derive("anti");
        let a = (0..n)
            .filter(|&i| o.sample_preference(&[1], &[2, 3], &[3], base.index(i)).unwrap().chosen == vec![2, 3])
            .count();
        let b = (0..n)
            .filter(|&i| {
                o.sample_preference(&[1], &[3], &[2, 3], base.index(i + n))
                    .unwrap()
                    .chosen
                    == vec![3]
            })
            .count();
        let pa = a as f64 / n as f64;
        let pb = b as f64 / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((pa + pb - 1.0).abs() < 4.0 * sigma * 2f64.sqrt());
    }

    #[test]
    fn verifiable_reward_cases() {
        let task = VerifiableTask::new(vec![1, 2], 7, 9, 10).unwrap();
        assert_eq!(verifiable_reward::<f64>(&task, &[3, 9, 7, 0]), 1.0);
        assert_eq!(verifiable_reward::<f64>(&task, &[3, 7, 0]), 0.0);
        assert_eq!(verifiable_reward::<f64>(&task, &[9, 6, 0]), 0.0);
        assert_eq!(verifiable_reward::<f64>(&task, &[3, 9]), 0.0);
        assert!(VerifiableTask::new(vec![], 10, 9, 10).is_err());
    }

    proptest! {
        #[test]
        fn verifiable_reward_is_pure(c in proptest::collection::vec(0u32..10, 0..12)) {
            let task = VerifiableTask::new(vec![1], 4, 9, 10).unwrap();
            let a: f64 = verifiable_reward(&task, &c);
            prop_assert_eq!(a, verifiable_reward::<f64>(&task, &c));
            prop_assert!(a == 0.0 || a == 1.0);
        }

        #[test]
        fn cartpole_drift_bounded(
            x in -1.0_f64..1.0, xd in -1.0_f64..1.0, th in -0.1_f64..0.1, thd in -1.0_f64..1.0,
        ) {
            let p = CartPoleParams::default();
            let s = CartPoleState { x, x_dot: xd, theta: th, theta_dot: thd };
            let (n, _, _) = cartpole_step_force(s, 0.0, &p).unwrap();
            // Each coordinate moves by dt times a bounded rate.
            prop_assert!((n.x - s.x).abs() <= p.dt * xd.abs() + 1e-15);
            prop_assert!((n.theta - s.theta).abs() <= p.dt * thd.abs() + 1e-15);
            prop_assert!((n.x_dot - s.x_dot).abs() < p.dt * 5.0);
            prop_assert!((n.theta_dot - s.theta_dot).abs() < p.dt * 25.0);
        }
    }
}
