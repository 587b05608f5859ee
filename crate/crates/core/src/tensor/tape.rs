//! Thread-local operation tape for reverse-mode differentiation.
//!
//! Every differentiable operation appends one entry in execution order, which
//! is topological by construction: the inputs of a node always precede it.
//! `run_backward` walks the tape once in reverse, running each recorded
//! local-gradient closure at most once, so a graph of N reachable nodes costs
//! exactly N local-gradient evaluations. The tape is rebuilt from scratch
//! every step (define-by-run); callers clear it between steps.

use std::cell::RefCell;
use std::collections::HashSet;

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) struct Entry {
    pub out: Tensor,
    /// Ids of inputs that require gradients; used to mark reachability.
    pub input_ids: Vec<u64>,
    /// Accumulates gradient contributions into the entry's inputs, given the
    /// output gradient. Must not execute tensor ops (would re-enter the tape).
    pub backward: Box<dyn Fn(&[f64])>,
}

thread_local! {
    static TAPE: RefCell<Vec<Entry>> = const { RefCell::new(Vec::new()) };
}

pub(crate) fn record(out: Tensor, input_ids: Vec<u64>, backward: Box<dyn Fn(&[f64])>) {
    TAPE.with(|t| {
        t.borrow_mut().push(Entry {
            out,
            input_ids,
            backward,
        })
    });
}

/// Number of operations currently recorded on this thread's tape.
pub fn len() -> usize {
    TAPE.with(|t| t.borrow().len())
}

/// Drop all recorded operations (start of a new step).
pub fn clear() {
    TAPE.with(|t| t.borrow_mut().clear());
}

/// Reverse sweep from `loss`. Returns the number of local-gradient
/// evaluations performed (= reachable recorded nodes).
///
/// Gradients of intermediate nodes are reset at the start of each sweep;
/// gradients of leaves (tensors never produced by a recorded op) accumulate
/// across repeated calls.
pub(crate) fn run_backward(loss: &Tensor) -> Result<usize> {
    if loss.len() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    TAPE.with(|t| {
        let tape = t.borrow();
        // Intermediates get fresh gradient storage each sweep.
        for e in tape.iter() {
            e.out.reset_grad_storage();
        }
        loss.ensure_grad_storage();
        loss.add_to_grad(&[1.0]);

        let mut needed: HashSet<u64> = HashSet::new();
        needed.insert(loss.id());
        let mut evaluations = 0usize;
        for e in tape.iter().rev() {
            if !needed.contains(&e.out.id()) {
                continue;
            }
            let guard = e.out.grad_ref();
            let gout = guard
                .as_ref()
                .expect("reachable tape output missing gradient storage");
            (e.backward)(gout);
            drop(guard);
            evaluations += 1;
            for id in &e.input_ids {
                needed.insert(*id);
            }
        }
        Ok(evaluations)
    })
}
