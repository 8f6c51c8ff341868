//! Environment rollouts written as per-step state tables.

use rlhf_kernel::environments::{
    cartpole_step, thermostat_example_policy, thermostat_step, thermostat_step_noisy, HeaterAction, Push,
    ThermostatState,
};
use rlhf_kernel::Seed;

use crate::config::{EnvironmentConfig, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsTable;

/// CartPole columns: step, x, x_dot, theta, theta_dot, force, reward, done.
/// Row `t` holds the state after step `t`; rollouts stop at termination.
/// Thermostat columns: step, temperature, heater, reward.
pub fn run_simulation(config: &ExperimentConfig) -> Result<MetricsTable> {
    config.validate()?;
    let env = config
        .environment
        .as_ref()
        .ok_or_else(|| HarnessError::validation("environment", "required for simulate-env"))?;
    match env {
        EnvironmentConfig::Cartpole {
            params,
            initial_state,
            actions,
            steps,
        } => {
            let mut table = MetricsTable::with_step(&["x", "x_dot", "theta", "theta_dot", "force", "reward", "done"]);
            let mut s = *initial_state;
            for t in 0..*steps {
                let action = match actions {
                    Some(list) => *list.get(t).ok_or_else(|| {
                        HarnessError::validation("environment.actions", format!("no action for step {t}"))
                    })?,
                    None if s.theta >= 0.0 => Push::Right,
                    None => Push::Left,
                };
                let force = if action == Push::Right {
                    params.force
                } else {
                    -params.force
                };
                let (next, reward, done) = cartpole_step(s, action, params)?;
                table.push(vec![
                    t as f64,
                    next.x,
                    next.x_dot,
                    next.theta,
                    next.theta_dot,
                    force,
                    reward,
                    if done { 1.0 } else { 0.0 },
                ]);
                s = next;
                if done {
                    break;
                }
            }
            Ok(table)
        }
        EnvironmentConfig::Thermostat {
            params,
            initial_temperature,
            steps,
        } => {
            let mut table = MetricsTable::with_step(&["temperature", "heater", "reward"]);
            let mut s = ThermostatState {
                temperature: *initial_temperature,
            };
            let noise = Seed::new(config.seed).derive("thermostat");
            for t in 0..*steps {
                let on = thermostat_example_policy(s) > 0.5;
                let action = if on { HeaterAction::On } else { HeaterAction::Off };
                let (next, reward) = if params.noise_std > 0.0 {
                    thermostat_step_noisy(s, action, params, noise.index(t as u64))
                } else {
                    thermostat_step(s, action, params)
                };
                table.push(vec![t as f64, next.temperature, if on { 1.0 } else { 0.0 }, reward]);
                s = next;
            }
            Ok(table)
        }
    }
}
