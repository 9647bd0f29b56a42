//! Named parameter storage and the convolution building blocks shared by the
//! generator and the discriminators.

use msgdd_tensor::{BatchStats, Conv2dSpec, Padding, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::config::NormKind;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable; receives gradients and optimizer updates.
    Param,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors owned by one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: EntryKind, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// SHA-256 over names and exact bit patterns of every entry.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update(e.name.as_bytes());
            for d in e.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Put every entry on `tape`. Parameters are differentiable only when
    /// `trainable`; buffers are never put on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| match (e.kind, trainable) {
                (EntryKind::Param, true) => Some(tape.param(e.value.clone())),
                (EntryKind::Param, false) => Some(tape.constant(e.value.clone())),
                (EntryKind::Buffer, _) => None,
            })
            .collect();
        Bound { vars }
    }

    /// Running-statistics update with momentum 0.1.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        const MOMENTUM: f64 = 0.1;
        for u in updates {
            for (id, fresh) in [(u.running_mean, &u.stats.mean), (u.running_var, &u.stats.var)] {
                let buf = self.get_mut(id);
                for (r, f) in buf.data_mut().iter_mut().zip(fresh) {
                    *r = (1.0 - MOMENTUM) * *r + MOMENTUM * f;
                }
            }
        }
    }
}

/// Tape variables of one [`ParamStore`].
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not bound to the tape")
    }

    /// `(id, var)` for every bound parameter.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm layers.
    Train,
    /// Running statistics in batch-norm layers.
    Eval,
}

/// Batch statistics produced by a training-mode forward pass, to be folded
/// into the running buffers once the caller decides to keep them.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

/// State threaded through one forward pass of one network.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub bound: &'a Bound,
    pub mode: Mode,
    pub stat_updates: Vec<StatUpdate>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, bound: &'a Bound, mode: Mode) -> Self {
        Self {
            tape,
            store,
            bound,
            mode,
            stat_updates: Vec::new(),
        }
    }

    fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }
}

/// Draws initial values in declaration order from one seeded stream.
pub struct Initializer<'r> {
    pub rng: &'r mut Rng,
    pub weight_std: f64,
}

impl Initializer<'_> {
    fn normal(&mut self, shape: Vec<usize>) -> Tensor {
        let normal = Normal::new(0.0, self.weight_std).expect("positive init std");
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| normal.sample(self.rng)).collect())
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    /// Absent when a normalization layer follows and would cancel it.
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            EntryKind::Param,
            init.normal(vec![out_channels, in_channels, kernel, kernel]),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                EntryKind::Param,
                Tensor::zeros(vec![out_channels]),
            )
        });
        Self {
            weight,
            bias,
            spec: Conv2dSpec::new(stride, padding),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let w = f.var(self.weight);
        let b = self.bias.map(|b| f.var(b));
        f.tape.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub enum Norm {
    Instance,
    Batch {
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    },
    Identity,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, kind: NormKind, channels: usize) -> Self {
        match kind {
            NormKind::Instance => Norm::Instance,
            NormKind::None => Norm::Identity,
            NormKind::Batch => Norm::Batch {
                gamma: store.add(
                    format!("{name}.gamma"),
                    EntryKind::Param,
                    Tensor::full(vec![channels], 1.0),
                ),
                beta: store.add(format!("{name}.beta"), EntryKind::Param, Tensor::zeros(vec![channels])),
                running_mean: store.add(
                    format!("{name}.running_mean"),
                    EntryKind::Buffer,
                    Tensor::zeros(vec![channels]),
                ),
                running_var: store.add(
                    format!("{name}.running_var"),
                    EntryKind::Buffer,
                    Tensor::full(vec![channels], 1.0),
                ),
            },
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        match self {
            Norm::Identity => x,
            Norm::Instance => f.tape.instance_norm(x),
            Norm::Batch {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let (g, b) = (f.var(*gamma), f.var(*beta));
                match f.mode {
                    Mode::Train => {
                        let (y, stats) = f.tape.batch_norm_train(x, g, b);
                        f.stat_updates.push(StatUpdate {
                            running_mean: *running_mean,
                            running_var: *running_var,
                            stats,
                        });
                        y
                    }
                    Mode::Eval => {
                        let rm = f.store.get(*running_mean).data();
                        let rv = f.store.get(*running_var).data();
                        f.tape.batch_norm_eval(x, g, b, rm, rv)
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn forward(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Convolution, then normalization, then activation.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub norm: Norm,
    pub act: Activation,
}

impl ConvNormAct {
    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let y = self.conv.forward(f, x);
        let y = self.norm.forward(f, y);
        self.act.forward(f.tape, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn batch_norm_registers_params_and_buffers() {
        let mut store = ParamStore::new();
        let norm = Norm::new(&mut store, "bn", NormKind::Batch, 3);
        assert!(matches!(norm, Norm::Batch { .. }));
        assert_eq!(store.len(), 4);
        assert_eq!(store.parameter_count(), 6);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        assert_eq!(bound.params().count(), 2);
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut store = ParamStore::new();
        let norm = Norm::new(&mut store, "bn", NormKind::Batch, 1);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let x = tape.constant(Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]));
        let updates = {
            let mut f = Forward::new(&mut tape, &store, &bound, Mode::Train);
            norm.forward(&mut f, x);
            f.stat_updates
        };
        store.apply_stat_updates(&updates);
        let mean = store.get(store.find("bn.running_mean").unwrap()).data()[0];
        let var = store.get(store.find("bn.running_var").unwrap()).data()[0];
        assert!((mean - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((var - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_changes_with_any_bit() {
        let mut rng = seeded_rng(1);
        let mut init = Initializer {
            rng: &mut rng,
            weight_std: 0.02,
        };
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut store, &mut init, "c", 1, 2, 3, 1, Padding::same(3), true);
        let before = store.fingerprint();
        assert_eq!(before, store.clone().fingerprint());
        store.get_mut(conv.bias.unwrap()).data_mut()[1] = f64::from_bits(1);
        assert_ne!(before, store.fingerprint());
    }
}
