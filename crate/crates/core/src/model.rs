//! Common interface of the trainable classifiers.

use crate::analysis::ModelKind;
use crate::crmn::Crmn;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::params::{Bound, ParamStore};
use crate::resnet::{NetworkConfig, ResNet};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub trait Classifier<S: Scalar> {
    fn config(&self) -> &NetworkConfig;
    fn store(&self) -> &ParamStore<S>;
    fn store_mut(&mut self) -> &mut ParamStore<S>;

    /// Logits `[b×classes]` for images `x[b×3×E×E]` using already bound
    /// parameters.
    fn forward_bound(&mut self, tape: &mut Tape<S>, bound: &Bound, x: Var, mode: Mode) -> Result<Var>;

    fn forward(&mut self, tape: &mut Tape<S>, x: Var, mode: Mode) -> Result<Var> {
        let bound = self.store().bind(tape);
        self.forward_bound(tape, &bound, x, mode)
    }

    /// Mean cross-entropy of a batch; parameter gradients are added to the
    /// store. Returns the loss and the logits.
    fn loss_and_grad(&mut self, images: &Tensor<S>, labels: &[usize], mode: Mode) -> Result<(S, Tensor<S>)> {
        let mut tape = Tape::new();
        let bound = self.store().bind(&mut tape);
        let x = tape.constant(images.clone());
        let logits = self.forward_bound(&mut tape, &bound, x, mode)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        tape.backward(loss)?;
        self.store_mut().accumulate_grads(&tape, &bound)?;
        Ok((tape.value(loss).item(), tape.value(logits).clone()))
    }

    /// Mean cross-entropy without gradients.
    fn loss(&mut self, images: &Tensor<S>, labels: &[usize], mode: Mode) -> Result<S> {
        let mut tape = Tape::new();
        let bound = self.store().bind_with(&mut tape, false);
        let x = tape.constant(images.clone());
        let logits = self.forward_bound(&mut tape, &bound, x, mode)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        Ok(tape.value(loss).item())
    }

    /// Logits without recording gradients.
    fn logits(&mut self, images: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let bound = self.store().bind_with(&mut tape, false);
        let x = tape.constant(images.clone());
        let logits = self.forward_bound(&mut tape, &bound, x, mode)?;
        Ok(tape.value(logits).clone())
    }
}

/// Row-wise argmax of `[b×k]` logits.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Result<Vec<usize>> {
    let (rows, k) = match *logits.shape() {
        [r, k] if k > 0 => (r, k),
        _ => return Err(Error::dim("argmax_rows", logits.shape(), &[2])),
    };
    let d = logits.data();
    Ok((0..rows)
        .map(|r| {
            let row = &d[r * k..(r + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// A classifier of the requested kind with freshly initialised parameters.
pub fn build<S: Scalar>(kind: ModelKind, cfg: &NetworkConfig, seed: u64) -> Result<Box<dyn Classifier<S>>> {
    Ok(match kind {
        ModelKind::Resnet => Box::new(ResNet::<S>::new(cfg, seed)?),
        ModelKind::Crmn => Box::new(Crmn::<S>::new(cfg, seed)?),
    })
}
