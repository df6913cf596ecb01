//! Named parameter storage shared by every layer of a model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Component a parameter belongs to; each group has its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Trunk,
    Lstm,
    Head,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Trunk, Group::Lstm, Group::Head];

    pub fn name(self) -> &'static str {
        match self {
            Group::Trunk => "trunk",
            Group::Lstm => "lstm",
            Group::Head => "head",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trunk" => Ok(Group::Trunk),
            "lstm" => Ok(Group::Lstm),
            "head" => Ok(Group::Head),
            _ => Err(Error::Input(format!("unknown parameter group {s:?}"))),
        }
    }
}

/// Trainable tensors receive gradients; buffers (batch-norm running
/// statistics) are state that is saved and restored but never optimised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub group: Group,
    pub kind: ParamKind,
    /// Whether weight decay applies. Off for biases, batch-norm shifts and
    /// learned initial states.
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Tape handles for the trainable parameters of one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not bound to the tape")
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    fn insert(&mut self, name: String, value: Tensor<S>, group: Group, kind: ParamKind, decay: bool) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            group,
            kind,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, group: Group, decay: bool) -> ParamId {
        self.insert(name.into(), value, group, ParamKind::Trainable, decay)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<S>, group: Group) -> ParamId {
        self.insert(name.into(), value, group, ParamKind::Buffer, false)
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter().filter(|p| p.kind == ParamKind::Trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self) -> u64 {
        self.trainable().map(|p| p.value.len() as u64).sum()
    }

    pub fn scalar_count_in(&self, group: Group) -> u64 {
        self.trainable()
            .filter(|p| p.group == group)
            .map(|p| p.value.len() as u64)
            .sum()
    }

    /// Records every trainable parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Like [`bind`](Self::bind); with `requires_grad == false` the leaves
    /// are constants and the tape keeps no backward state for them.
    pub fn bind_with(&self, tape: &mut Tape<S>, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| match p.kind {
                ParamKind::Trainable => Some(tape.leaf(p.value.clone(), requires_grad)),
                ParamKind::Buffer => None,
            })
            .collect();
        Bound { vars }
    }

    /// Adds tape gradients of the bound leaves into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>, bound: &Bound) -> Result<()> {
        for (p, var) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = var.and_then(|v| tape.grad(v)) {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }

    /// Copy of every value, trainable and buffer alike.
    pub fn snapshot(&self) -> Vec<Tensor<S>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<S>]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "snapshot holds {} tensors, store has {}",
                snapshot.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            if p.value.shape() != v.shape() {
                return Err(Error::dim("restore", p.value.shape(), v.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Same parameters in another precision.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    group: p.group,
                    kind: p.kind,
                    decay: p.decay,
                })
                .collect(),
        }
    }
}
