//! Iteration scheduling and truncation selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The step schedule: members train `steps[i]` epochs between the i-th and
/// (i+1)-th selection barriers. Steps are all >= 1 and sum to the total
/// epoch budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationSchedule {
    steps: Vec<usize>,
}

impl IterationSchedule {
    pub fn from_steps(steps: Vec<usize>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if steps.contains(&0) {
            return Err(Error::InvalidConfig("schedule steps must all be >= 1".into()));
        }
        Ok(IterationSchedule { steps })
    }

    /// Uniform steps of `e_step`, with a final remainder step when `e_total`
    /// is not a multiple.
    pub fn uniform(e_total: usize, e_step: usize) -> Result<Self> {
        if e_total == 0 || e_step == 0 {
            return Err(Error::InvalidConfig(
                "e_total and e_step must be >= 1".into(),
            ));
        }
        let mut steps = vec![e_step; e_total / e_step];
        if !e_total.is_multiple_of(e_step) {
            steps.push(e_total % e_step);
        }
        Ok(IterationSchedule { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn num_iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn e_total(&self) -> usize {
        self.steps.iter().sum()
    }
}

/// Truncation selection parameter: the percentage of the population treated
/// as the top (parent pool) and bottom (replaced) partitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub tau: f64,
}

impl SelectionConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau <= 0.0 || tau > 50.0 {
            return Err(Error::InvalidConfig(format!(
                "tau must be in (0, 50], got {tau}"
            )));
        }
        Ok(SelectionConfig { tau })
    }

    /// Partition size: `max(1, floor(N * tau / 100))`.
    pub fn partition_size(&self, n: usize) -> usize {
        (((n as f64) * self.tau / 100.0).floor() as usize).max(1)
    }
}

/// Sort members descending by fitness (ties broken by ascending id) and
/// return the index sets of the top and bottom partitions. Errors when any
/// fitness is unset.
pub fn select_partition(
    members: &[(usize, Option<f64>)],
    selection: SelectionConfig,
) -> Result<(Vec<usize>, Vec<usize>)> {
    for (id, fitness) in members {
        if fitness.is_none() {
            return Err(Error::FitnessUnset(*id));
        }
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| {
        let (ida, fa) = (members[a].0, members[a].1.expect("checked"));
        let (idb, fb) = (members[b].0, members[b].1.expect("checked"));
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ida.cmp(&idb))
    });
    let k = selection.partition_size(members.len());
    let top = order[..k].to_vec();
    let bottom = order[members.len() - k..].to_vec();
    Ok((top, bottom))
}
