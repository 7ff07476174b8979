//! The recording tape: every operation pushes one node holding its forward
//! value and a backward closure that routes incoming gradients to its parents.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

/// Dynamically shaped f64 array, the single tensor type of this engine.
pub type Arr = ArrayD<f64>;

/// Index of a node on the tape.
pub type NodeId = usize;

/// Backward closure: given read access to all forward values, the gradient
/// flowing into this node, and a sink, deposit gradients for the parents.
pub type BackFn = Box<dyn Fn(&Ctx<'_>, &Arr, &mut GradSink<'_>)>;

#[derive(Default)]
struct Inner {
    values: Vec<Arr>,
    backs: Vec<Option<BackFn>>,
}

/// A gradient tape. Cloning is cheap (shared handle); all `Var`s created
/// through one tape share its node storage.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<Inner>>,
}

/// Read-only view of forward values, handed to backward closures.
pub struct Ctx<'a> {
    values: &'a [Arr],
}

impl Ctx<'_> {
    pub fn value(&self, id: NodeId) -> &Arr {
        &self.values[id]
    }
}

/// Accumulates parent gradients during the backward sweep.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Arr>],
}

impl GradSink<'_> {
    /// Add `delta` into the gradient slot of node `id`.
    pub fn add(&mut self, id: NodeId, delta: Arr) {
        match &mut self.grads[id] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), delta.shape(), "gradient shape mismatch");
                *acc += &delta;
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input node. Gradients accumulate for leaves like any other
    /// node; whether they are used (parameter) or ignored (data, frozen
    /// weights) is the caller's business.
    pub fn leaf(&self, value: Arr) -> Var {
        self.push(value, None)
    }

    /// Convenience: a 0-d scalar leaf.
    pub fn scalar(&self, x: f64) -> Var {
        self.leaf(Arr::from_elem(IxDyn(&[]), x))
    }

    /// Record a node with an explicit backward closure. This is the extension
    /// point custom fused operations are built on.
    pub fn push(&self, value: Arr, back: Option<BackFn>) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        inner.values.push(value);
        inner.backs.push(back);
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: &Var) -> Gradients {
        assert!(
            Rc::ptr_eq(&self.inner, &root.tape.inner),
            "backward root from a different tape"
        );
        let inner = self.inner.borrow();
        assert_eq!(
            inner.values[root.id].len(),
            1,
            "backward requires a scalar root, got shape {:?}",
            inner.values[root.id].shape()
        );
        let mut grads: Vec<Option<Arr>> = (0..inner.values.len()).map(|_| None).collect();
        grads[root.id] = Some(Arr::from_elem(inner.values[root.id].raw_dim(), 1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &inner.backs[id] {
                let ctx = Ctx {
                    values: &inner.values,
                };
                let mut sink = GradSink { grads: &mut grads };
                back(&ctx, &g, &mut sink);
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn with_value<R>(&self, id: NodeId, f: impl FnOnce(&Arr) -> R) -> R {
        f(&self.inner.borrow().values[id])
    }
}

/// A value recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: NodeId,
}

impl Var {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Clone of the forward value.
    pub fn value(&self) -> Arr {
        self.tape.with_value(self.id, |v| v.clone())
    }

    /// Forward value of a 0-d (or single-element) node as a plain f64.
    pub fn scalar_value(&self) -> f64 {
        self.tape.with_value(self.id, |v| {
            assert_eq!(v.len(), 1, "scalar_value on shape {:?}", v.shape());
            *v.iter().next().unwrap()
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |v| v.shape().to_vec())
    }

    /// Borrow the forward value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Arr) -> R) -> R {
        self.tape.with_value(self.id, f)
    }

    pub(crate) fn assert_same_tape(&self, other: &Var) {
        assert!(
            self.tape.same_tape(&other.tape),
            "operands recorded on different tapes"
        );
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if any path reached it.
    pub fn get(&self, v: &Var) -> Option<&Arr> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Like `get`, but a missing gradient is returned as zeros of the
    /// variable's shape.
    pub fn get_or_zeros(&self, v: &Var) -> Arr {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Arr::zeros(IxDyn(&v.shape())),
        }
    }

    pub fn take(&mut self, v: &Var) -> Option<Arr> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let t = Tape::new();
        let v = t.leaf(Arr::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(v.shape(), vec![2, 2]);
        assert_eq!(v.value()[[0, 1]], 2.0);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn backward_of_leaf_is_one() {
        let t = Tape::new();
        let v = t.scalar(3.5);
        let g = t.backward(&v);
        assert_eq!(g.get(&v).unwrap()[[]], 1.0);
    }

    #[test]
    #[should_panic(expected = "scalar root")]
    fn backward_rejects_nonscalar_root() {
        let t = Tape::new();
        let v = t.leaf(Arr::zeros(IxDyn(&[3])));
        let _ = t.backward(&v);
    }
}
