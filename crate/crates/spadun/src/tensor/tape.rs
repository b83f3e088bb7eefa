//! Backward pass: topological replay of the recorded op nodes.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use super::{Result, Storage, Tensor, TensorError};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with op recording disabled on this thread. Inference paths use
/// this so forward passes do not retain graph memory.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let _guard = Guard(prev);
    f()
}

/// The ordered record of executed primitives reachable from one root.
/// Node inputs always precede the node itself.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    /// Collects the subgraph that produced `root`, in topological order.
    pub fn for_root(root: &Tensor) -> Tape {
        let mut order: Vec<Tensor> = Vec::new();
        let mut done: HashSet<u64> = HashSet::new();
        // Iterative post-order DFS; unfolded networks chain deep enough that
        // recursion is not worth the risk.
        enum Item {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut stack = vec![Item::Enter(root.clone())];
        let mut entered: HashSet<u64> = HashSet::new();
        while let Some(item) = stack.pop() {
            match item {
                Item::Enter(t) => {
                    if done.contains(&t.id()) || entered.contains(&t.id()) {
                        continue;
                    }
                    entered.insert(t.id());
                    stack.push(Item::Exit(t.clone()));
                    if let Some(op) = t.op() {
                        for input in op.inputs.iter().rev() {
                            if !done.contains(&input.id()) {
                                stack.push(Item::Enter(input.clone()));
                            }
                        }
                    }
                }
                Item::Exit(t) => {
                    done.insert(t.id());
                    order.push(t);
                }
            }
        }
        Tape { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in execution order, for diagnostics.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter_map(|t| t.op().map(|o| o.name))
            .collect()
    }

    /// Propagates d(root)/d(leaf) into every `requires_grad` leaf reachable
    /// from `root`. The root must be scalar.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if root.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: root.shape().to_vec(),
            });
        }
        let mut grads: HashMap<u64, Storage> = HashMap::new();
        grads.insert(
            root.id(),
            match root.dtype() {
                super::DType::F32 => Storage::F32(vec![1.0]),
                super::DType::F64 => Storage::F64(vec![1.0]),
            },
        );
        for t in self.nodes.iter().rev() {
            let Some(upstream) = grads.remove(&t.id()) else {
                continue; // no path from the root through this node
            };
            if t.does_require_grad() {
                t.accumulate_grad(&upstream);
            }
            let Some(op) = t.op() else {
                continue;
            };
            let input_grads = (op.backward)(&op.inputs, t, &upstream)?;
            debug_assert_eq!(input_grads.len(), op.inputs.len());
            for (input, g) in op.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.tracks_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), input.numel(), "bad grad size from {}", op.name);
                match grads.get_mut(&input.id()) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(input.id(), g);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Computes gradients of a scalar loss into every reachable
/// `requires_grad` leaf.
pub fn backward(loss: &Tensor) -> Result<()> {
    Tape::for_root(loss).backward(loss)
}
