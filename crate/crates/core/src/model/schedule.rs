use crate::error::{Error, Result};

use super::config::Pattern;

/// Group-member index used at every layer step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSchedule(Vec<usize>);

impl LayerSchedule {
    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Layer steps at which `member` is applied.
    pub fn steps_of(&self, member: usize) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == member)
            .map(|(l, _)| l)
            .collect()
    }
}

/// Stacks `group_size` distinct layers into `n_layers` steps.
///
/// Cyclic gives `0,1,…,G-1` repeated; blocked repeats each member `n_layers/G` times.
pub fn build_schedule(n_layers: usize, group_size: usize, pattern: Pattern) -> Result<LayerSchedule> {
    if group_size == 0 || group_size > n_layers || n_layers % group_size != 0 {
        return Err(Error::Config(format!(
            "cannot stack {n_layers} layers from groups of {group_size}"
        )));
    }
    let reps = n_layers / group_size;
    let members = (0..n_layers)
        .map(|l| match pattern {
            Pattern::Cyclic => l % group_size,
            Pattern::Blocked => l / reps,
        })
        .collect();
    Ok(LayerSchedule(members))
}
