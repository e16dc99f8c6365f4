//! Scalar reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Tape`] is a Wengert list: every arithmetic operation on tracked
//! [`DVar`]s appends one node holding the operand indices and the local
//! partial derivatives evaluated at the forward values. [`DVar::backward`]
//! runs a single reverse sweep and returns the adjoint of every node.
//!
//! Nonsmooth primitives (`min`, `max`, `abs`, [`DVar::select`]) record the
//! one-sided partial of the branch actually taken, with ties broken toward
//! the first operand. The tape is therefore always differentiating the
//! piecewise branch the forward pass executed, which is exactly what a
//! simulator stepping through contact switches needs.
//!
//! Operations between two untracked constants stay off the tape, so plain
//! parameter arithmetic costs nothing.

mod fd;
mod ops;

pub use fd::{finite_diff_gradient, FdError};

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

/// Kind tag stored per node; purely diagnostic (backward only needs the
/// recorded partials).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Min,
    Max,
    Abs,
    Exp,
    Sqrt,
    Recip,
    Sigmoid,
    Select,
    Custom,
}

struct TapeCore {
    ops: Vec<Op>,
    /// `starts[i]..starts[i+1]` indexes the edge slice of node `i`.
    starts: Vec<u32>,
    /// `(operand node index, local partial)` pairs, densely packed.
    edges: Vec<(u32, f64)>,
    /// Nodes below this index are cut off from backward propagation.
    checkpoint: u32,
}

impl TapeCore {
    fn new() -> Self {
        TapeCore {
            ops: Vec::new(),
            starts: vec![0],
            edges: Vec::new(),
            checkpoint: 0,
        }
    }

    fn push(&mut self, op: Op, edges: &[(u32, f64)]) -> u32 {
        let idx = self.ops.len() as u32;
        self.ops.push(op);
        self.edges.extend_from_slice(edges);
        self.starts.push(self.edges.len() as u32);
        idx
    }
}

/// Shared handle to one recording tape. Cloning the handle is cheap and
/// refers to the same underlying node list.
#[derive(Clone)]
pub struct Tape {
    core: Rc<RefCell<TapeCore>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            core: Rc::new(RefCell::new(TapeCore::new())),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.core.borrow().ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.core, &other.core)
    }

    /// Create a tracked leaf variable.
    pub fn var(&self, value: f64) -> DVar {
        let idx = self.core.borrow_mut().push(Op::Leaf, &[]);
        DVar {
            value,
            node: Some((self.clone(), idx)),
        }
    }

    /// Record one node with explicit operands and local partials and return
    /// the resulting variable. Untracked operands contribute no edge.
    ///
    /// Panics if any tracked operand lives on a different tape: mixing
    /// tapes is a programming error, not a recoverable condition.
    pub fn record(&self, op: Op, operands: &[(&DVar, f64)], value: f64) -> DVar {
        let mut edges: Vec<(u32, f64)> = Vec::with_capacity(operands.len());
        for (v, partial) in operands {
            if let Some((t, idx)) = &v.node {
                assert!(
                    self.same_tape(t),
                    "operands recorded on different tapes cannot be combined"
                );
                edges.push((*idx, *partial));
            }
        }
        let idx = self.core.borrow_mut().push(op, &edges);
        DVar {
            value,
            node: Some((self.clone(), idx)),
        }
    }

    /// Move the truncation marker to the current end of tape and return the
    /// previous marker. After this, backward passes treat every gradient
    /// path crossing the marker as zero — the mechanism behind
    /// short-horizon truncation of backprop through time.
    pub fn set_checkpoint(&self) -> usize {
        let mut core = self.core.borrow_mut();
        let prev = core.checkpoint;
        core.checkpoint = core.ops.len() as u32;
        prev as usize
    }

    pub fn checkpoint(&self) -> usize {
        self.core.borrow().checkpoint as usize
    }

    /// Reset the marker (no truncation).
    pub fn clear_checkpoint(&self) {
        self.core.borrow_mut().checkpoint = 0;
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let core = self.core.borrow();
        f.debug_struct("Tape")
            .field("nodes", &core.ops.len())
            .field("edges", &core.edges.len())
            .field("checkpoint", &core.checkpoint)
            .finish()
    }
}

/// A scalar that may be tracked on a tape (`node = Some`) or a plain
/// constant (`node = None`). All arithmetic is value-correct either way;
/// only tracked variables record derivative information.
#[derive(Clone)]
pub struct DVar {
    value: f64,
    node: Option<(Tape, u32)>,
}

impl DVar {
    /// An untracked constant.
    pub fn constant(value: f64) -> DVar {
        DVar { value, node: None }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Tape handle, if tracked.
    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|(t, _)| t)
    }

    /// Node index on its tape, if tracked.
    pub fn node_index(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, i)| *i as usize)
    }

    /// Re-enter the same value as a fresh untracked constant. Gradients do
    /// not flow through a detached copy.
    pub fn detach(&self) -> DVar {
        DVar::constant(self.value)
    }

    /// Reverse sweep from this output. Every node's adjoint is accumulated
    /// in one pass; propagation stops at the tape's checkpoint marker. The
    /// tape is left untouched, so repeated calls (possibly from different
    /// outputs) are valid and bit-reproducible.
    pub fn backward(&self) -> Adjoints {
        let (tape, out_idx) = match &self.node {
            Some((t, i)) => (t.clone(), *i as usize),
            // Gradient of a constant w.r.t. anything is zero.
            None => {
                return Adjoints {
                    tape: None,
                    adj: Vec::new(),
                }
            }
        };
        let core = tape.core.borrow();
        let n = core.ops.len();
        let cut = core.checkpoint as usize;
        let mut adj = vec![0.0; n];
        adj[out_idx] = 1.0;
        let lo = cut.min(out_idx);
        for i in (lo..=out_idx).rev() {
            let a = adj[i];
            // Zero adjoints carry nothing and may sit on inactive branches
            // whose recorded partials are infinite; skipping them keeps
            // 0 * inf out of the sweep.
            if a == 0.0 || i < cut {
                continue;
            }
            let s = core.starts[i] as usize;
            let e = core.starts[i + 1] as usize;
            for &(p, w) in &core.edges[s..e] {
                let p = p as usize;
                if p >= cut {
                    adj[p] += a * w;
                }
            }
        }
        drop(core);
        Adjoints {
            tape: Some(tape),
            adj,
        }
    }
}

impl fmt::Debug for DVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some((_, i)) => write!(f, "DVar({} @ node {})", self.value, i),
            None => write!(f, "DVar({} const)", self.value),
        }
    }
}

impl From<f64> for DVar {
    fn from(v: f64) -> Self {
        DVar::constant(v)
    }
}

/// Adjoints of every node after a backward pass.
pub struct Adjoints {
    tape: Option<Tape>,
    adj: Vec<f64>,
}

impl Adjoints {
    /// Adjoint (d output / d var). Constants and variables recorded after
    /// the backward pass get zero. Panics on a variable from another tape.
    pub fn get(&self, var: &DVar) -> f64 {
        match (&self.tape, &var.node) {
            (Some(t), Some((vt, idx))) => {
                assert!(
                    t.same_tape(vt),
                    "queried adjoint of a variable from a different tape"
                );
                self.adj.get(*idx as usize).copied().unwrap_or(0.0)
            }
            _ => 0.0,
        }
    }

    /// Adjoints for a slice of variables, in order.
    pub fn get_all(&self, vars: &[DVar]) -> Vec<f64> {
        vars.iter().map(|v| self.get(v)).collect()
    }
}
