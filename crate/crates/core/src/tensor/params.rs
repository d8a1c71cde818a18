use super::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable leaf: value plus an explicitly reset gradient slot.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

/// Flat, name-addressed parameter storage. Order of insertion is the
/// serialisation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, grad: None, requires_grad: true });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id)
    }

    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        self.params[id.0].requires_grad = on;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grads` into the gradient slots, creating them as needed.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => {
                    let t = Tensor::new(p.value.shape().to_vec(), g.to_vec())
                        .expect("gradient shape follows the parameter");
                    p.grad = Some(t);
                }
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Sparse per-parameter gradient buffers produced by one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads {
    slots: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn new(n_params: usize) -> Self {
        Self { slots: vec![None; n_params] }
    }

    pub fn add(&mut self, id: ParamId, g: &[f64]) {
        if id.0 >= self.slots.len() {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_deref().map(|g| (ParamId(i), g)))
    }

    /// Sums `other` into `self` slot by slot.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (id, g) in other.iter() {
            self.add(id, g);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
