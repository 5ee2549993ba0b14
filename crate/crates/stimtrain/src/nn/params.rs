//! Central parameter storage with per-entry gradient slots.
//!
//! All forwards — main network or any subnetwork — read the same storage, so
//! weight sharing is structural rather than a copying convention. Entries are
//! kept in registration order (forward order), which fixes initialization,
//! checkpoint layout and update order.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::elem::Elem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    LinearBias,
    NormScale,
    NormBias,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are state, not trainable weights.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Normalization scale/bias are exempt from weight decay.
    pub fn decayed(self) -> bool {
        matches!(
            self,
            ParamKind::ConvWeight | ParamKind::LinearWeight | ParamKind::LinearBias
        )
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone)]
pub struct ParameterSet<F> {
    entries: IndexMap<String, Param<F>>,
    updates_applied: u64,
}

impl<F: Elem> Default for ParameterSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> ParameterSet<F> {
    pub fn new() -> Self {
        ParameterSet { entries: IndexMap::new(), updates_applied: 0 }
    }

    pub fn register(&mut self, name: &str, kind: ParamKind, value: ArrayD<F>) {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.entries.insert(name.to_string(), Param { value, grad, kind });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn grad(&self, name: &str) -> &ArrayD<F> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).grad
    }

    pub fn kind(&self, name: &str) -> ParamKind {
        self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).kind
    }

    /// Accumulate a gradient contribution (shapes must match exactly).
    pub fn grad_add(&mut self, name: &str, contribution: &ArrayD<F>) {
        let p = self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        debug_assert_eq!(p.grad.shape(), contribution.shape(), "gradient shape for {name}");
        p.grad += contribution;
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(F::zero());
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count across trainable entries.
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Total scalar count across all entries (including running statistics).
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// How many optimizer updates have been applied to this storage.
    pub fn updates_applied(&self) -> u64 {
        self.updates_applied
    }

    pub(crate) fn note_update(&mut self) {
        self.updates_applied += 1;
    }
}
