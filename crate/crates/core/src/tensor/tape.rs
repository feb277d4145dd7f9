//! Define-by-run tape: every operation records its output value and a
//! backward rule; `backward` replays the records in exact reverse order.

use std::cell::RefCell;
use std::rc::Rc;

use super::storage::Storage;
use super::TensorError;

pub(crate) type BackFn = Box<dyn Fn(&Storage, &mut dyn FnMut(usize, Storage))>;

pub(crate) struct Node {
    pub requires_grad: bool,
    pub back: Option<BackFn>,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
}

/// A recording of one forward pass. Tapes are single-threaded and rebuilt
/// per pass; parameters live outside and are bound as leaves.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Passes allocate and free many megabyte-sized buffers per step; with
/// glibc defaults those round-trip through mmap and the page faults
/// dominate the arithmetic. Raising the thresholds keeps freed blocks in
/// the arena for reuse.
#[cfg(target_os = "linux")]
fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 * 1024 * 1024);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    });
}

#[cfg(not(target_os = "linux"))]
fn tune_allocator() {}

impl Tape {
    pub fn new() -> Self {
        tune_allocator();
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Records a differentiable leaf (a parameter binding).
    pub fn leaf(&self, value: Storage) -> Tensor {
        self.record_unchecked(value, true, None)
    }

    /// Records a constant: values flow forward, no gradient is tracked.
    pub fn constant(&self, value: Storage) -> Tensor {
        self.record_unchecked(value, false, None)
    }

    pub(crate) fn record_unchecked(
        &self,
        value: Storage,
        requires_grad: bool,
        back: Option<BackFn>,
    ) -> Tensor {
        let value = Rc::new(value);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            requires_grad,
            back,
        });
        Tensor {
            tape: self.clone(),
            id,
            value,
        }
    }

    /// Records an op output, erroring out on non-finite values.
    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Storage,
        requires_grad: bool,
        back: Option<BackFn>,
    ) -> Result<Tensor, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(self.record_unchecked(value, requires_grad, back))
    }
}

/// Handle to one tape node. Cloning is cheap; the value is shared.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
    pub(crate) value: Rc<Storage>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.value.ndim()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn value(&self) -> &Storage {
        &self.value
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub(crate) fn check_same_tape(&self, other: &Tensor) -> Result<(), TensorError> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Reverse pass from a scalar loss. Returns one gradient per reached
    /// leaf; unreached leaves read back as zero through `Gradients`.
    pub fn backward(&self) -> Result<Gradients, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        let inner = self.tape.inner.borrow();
        let nodes = &inner.nodes;
        let mut slots: Vec<Option<Storage>> = Vec::with_capacity(self.id + 1);
        slots.resize_with(self.id + 1, || None);
        slots[self.id] = Some(Storage::full(self.shape(), 1.0));
        for id in (0..=self.id).rev() {
            if slots[id].is_none() {
                continue;
            }
            let node = &nodes[id];
            let Some(back) = node.back.as_ref() else {
                continue; // leaf or constant: gradient stays in its slot
            };
            let grad = slots[id].take().expect("slot checked above");
            let mut emit = |parent: usize, contribution: Storage| {
                debug_assert!(parent < id, "tape must be topologically ordered");
                if !nodes[parent].requires_grad {
                    return;
                }
                let slot = &mut slots[parent];
                match slot {
                    Some(existing) => existing.add_assign(&contribution),
                    None => *slot = Some(contribution),
                }
            };
            back(&grad, &mut emit);
        }
        Ok(Gradients { slots })
    }
}

/// Gradients keyed by tape node, produced by [`Tensor::backward`].
pub struct Gradients {
    slots: Vec<Option<Storage>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Storage> {
        self.slots.get(t.id).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Storage> {
        self.slots.get_mut(t.id).and_then(|s| s.take())
    }

    /// Gradient of a leaf, densified: leaves the loss never reached get an
    /// explicit zero tensor of the leaf's shape.
    pub fn get_or_zeros(&self, t: &Tensor) -> Storage {
        match self.get(t) {
            Some(g) => g.clone(),
            None => Storage::zeros(t.shape()),
        }
    }
}
