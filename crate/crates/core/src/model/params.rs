//! Persistent parameter storage. Parameters live outside the tape and are
//! bound as leaves each forward pass; handles stay valid for the lifetime
//! of the model (entries are never removed, only dereferenced).

use std::cell::RefCell;
use std::collections::HashMap;

use crate::tensor::{Storage, Tape, Tensor};

/// Stable handle to one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct ParamEntry {
    value: Storage,
    trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: Storage, trainable: bool) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { value, trainable });
        id
    }

    pub fn value(&self, id: ParamId) -> &Storage {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Storage) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter shape is fixed at construction"
        );
        self.entries[id.0].value = value;
    }

    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut Storage)) {
        f(&mut self.entries[id.0].value)
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One forward pass: a fresh tape plus the memoized parameter bindings, so
/// a parameter used twice shares a single leaf and its gradient accumulates.
///
/// An `active` set restricts which parameters are differentiable this pass;
/// the rest bind as constants and their weight-gradient work is skipped.
pub struct Session<'m> {
    pub tape: Tape,
    store: &'m ParamStore,
    bound: RefCell<HashMap<ParamId, Tensor>>,
    active: Option<std::collections::HashSet<ParamId>>,
}

impl<'m> Session<'m> {
    pub fn new(store: &'m ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: RefCell::new(HashMap::new()),
            active: None,
        }
    }

    pub fn with_active(store: &'m ParamStore, active: std::collections::HashSet<ParamId>) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: RefCell::new(HashMap::new()),
            active: Some(active),
        }
    }

    /// Binds a parameter onto the tape (once per session).
    pub fn p(&self, id: ParamId) -> Tensor {
        if let Some(t) = self.bound.borrow().get(&id) {
            return t.clone();
        }
        let differentiable = match &self.active {
            Some(set) => set.contains(&id),
            None => true,
        };
        let value = self.store.value(id).clone();
        let t = if differentiable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(id, t.clone());
        t
    }

    /// All parameters bound during this session, with their leaf tensors.
    pub fn bound_params(&self) -> Vec<(ParamId, Tensor)> {
        let map = self.bound.borrow();
        let mut out: Vec<(ParamId, Tensor)> = map.iter().map(|(k, v)| (*k, v.clone())).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
