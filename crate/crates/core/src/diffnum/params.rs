use serde::{Deserialize, Serialize};

use super::TensorR;
use crate::{Error, Result};

/// Index of a [`ParamGroup`] inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// What a group parameterizes; lets callers address BN affine values as a set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTag {
    Conv,
    BnAffine,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub id: String,
    pub tag: GroupTag,
    pub values: TensorR,
    pub grad: TensorR,
    pub trainable: bool,
}

impl ParamGroup {
    pub fn new(id: impl Into<String>, tag: GroupTag, values: TensorR) -> Self {
        let grad = TensorR::zeros(values.shape());
        Self {
            id: id.into(),
            tag,
            values,
            grad,
            trainable: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, group: ParamGroup) -> ParamId {
        self.groups.push(group);
        ParamId(self.groups.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamGroup {
        &self.groups[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamGroup {
        &mut self.groups[id.0]
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.groups {
            g.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Marks only groups carrying `tag` as trainable.
    pub fn train_only(&mut self, tag: GroupTag) {
        for g in &mut self.groups {
            g.trainable = g.tag == tag;
        }
    }

    pub fn train_all(&mut self) {
        for g in &mut self.groups {
            g.trainable = true;
        }
    }

    pub fn total_count(&self) -> usize {
        self.groups.iter().map(|g| g.values.len()).sum()
    }

    pub fn count_tagged(&self, tag: GroupTag) -> usize {
        self.groups
            .iter()
            .filter(|g| g.tag == tag)
            .map(|g| g.values.len())
            .sum()
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.groups.len() == other.groups.len()
            && self
                .groups
                .iter()
                .zip(&other.groups)
                .all(|(a, b)| a.id == b.id && a.values.shape() == b.values.shape())
    }
}

/// Adaptive-moment optimizer over the trainable groups of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated `grad` of every trainable group.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = store
                .groups()
                .iter()
                .map(|g| (vec![0.0; g.values.len()], vec![0.0; g.values.len()]))
                .collect();
        } else if self.moments.len() != store.groups().len() {
            return Err(Error::arg("optimizer state does not match parameter store"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (group, (m, v)) in store.groups_mut().iter_mut().zip(&mut self.moments) {
            if !group.trainable {
                continue;
            }
            let grad = group.grad.data().to_vec();
            for (((p, g), mi), vi) in group
                .values
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
