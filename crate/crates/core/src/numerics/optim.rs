use std::collections::HashMap;

use super::{Grads, NumericsError, Tape, Tensor, Var};

/// Named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order; indexes the vector returned by
    /// [`ParamStore::leaves`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Registration-ordered collection of parameters. The order is part of the
/// contract: checkpoints, Adam state and tape leaves all index into it.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId, NumericsError> {
        if self.by_name.contains_key(name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(ParamId(id))
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Put every parameter on a tape, in registration order. The returned
    /// vector is indexed by `ParamId` position.
    pub fn leaves(&self, tape: &mut Tape) -> Result<Vec<Var>, NumericsError> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    /// Accumulate tape gradients back into `grad` slots after a backward
    /// sweep over leaves created by [`ParamStore::leaves`].
    pub fn absorb_grads(&mut self, grads: &Grads, leaves: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(leaves) {
            if let Some(g) = grads.get(v) {
                p.grad.add_assign(g);
            }
        }
    }
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm. A non-finite norm means an upstream op leaked,
/// so it is reported as an error rather than clipped away.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64, NumericsError> {
    let total: f64 = store.params.iter().map(|p| p.grad.sq_norm()).sum();
    let norm = total.sqrt();
    if !norm.is_finite() {
        return Err(NumericsError::NonFinite {
            op: "clip_global_norm",
        });
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for p in &mut store.params {
            p.grad.scale_assign(s);
        }
    }
    Ok(norm)
}

/// Adam with bias correction; the only optimizer here. Moment buffers align
/// with the store's registration order.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Rebuild from checkpointed state.
    pub fn from_state(m: Vec<Tensor>, v: Vec<Tensor>, t: u64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t,
            m,
            v,
        }
    }

    /// One update from the gradients currently held in the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            let x = p.value.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                x[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, v) in values {
            s.register(name, v.clone()).unwrap();
        }
        s
    }

    #[test]
    fn adam_first_step_hand_computed() {
        // theta = 1, g = 0.5, lr = 0.1: m_hat = 0.5, v_hat = 0.25,
        // theta' = 1 - 0.1 * 0.5 / (0.5 + 1e-8) ~= 0.9
        let mut store = store_with(&[("w", Tensor::scalar(1.0))]);
        store.get_mut(store.find("w").unwrap()).grad = Tensor::scalar(0.5);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.1);
        let got = store.get(store.find("w").unwrap()).value.item();
        let exact = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((got - exact).abs() <= 1e-15);
        assert!((got - 0.9).abs() <= 1e-7);
        assert_eq!(adam.t(), 1);
    }

    #[test]
    fn identical_grads_yield_identical_updates() {
        let init = Tensor::new(&[3], vec![0.2, -0.4, 1.1]).unwrap();
        let mut store = store_with(&[("a", init.clone()), ("b", init)]);
        let mut adam = Adam::new(&store);
        for step in 0..5 {
            for name in ["a", "b"] {
                let id = store.find(name).unwrap();
                store.get_mut(id).grad =
                    Tensor::new(&[3], vec![0.3 * step as f64, -0.1, 0.05]).unwrap();
            }
            adam.step(&mut store, 0.01);
        }
        let a = store.get(store.find("a").unwrap()).value.data().to_vec();
        let b = store.get(store.find("b").unwrap()).value.data().to_vec();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn clip_rescales_to_threshold() {
        let mut store = store_with(&[("w", Tensor::zeros(&[2]))]);
        store.get_mut(store.find("w").unwrap()).grad =
            Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        let pre = clip_global_norm(&mut store, 1.0).unwrap();
        assert!((pre - 5.0).abs() <= 1e-12);
        let post = store.get(store.find("w").unwrap()).grad.sq_norm().sqrt();
        assert!((post - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_untouched() {
        let mut store = store_with(&[("w", Tensor::zeros(&[2]))]);
        store.get_mut(store.find("w").unwrap()).grad =
            Tensor::new(&[2], vec![0.3, 0.4]).unwrap();
        let pre = clip_global_norm(&mut store, 1.0).unwrap();
        assert!((pre - 0.5).abs() <= 1e-12);
        assert_eq!(
            store.get(store.find("w").unwrap()).grad.data(),
            &[0.3, 0.4]
        );
    }

    #[test]
    fn clip_reports_non_finite_gradients() {
        let mut store = store_with(&[("w", Tensor::zeros(&[1]))]);
        store.get_mut(store.find("w").unwrap()).grad = Tensor::scalar(f64::INFINITY);
        assert!(matches!(
            clip_global_norm(&mut store, 1.0),
            Err(NumericsError::NonFinite { .. })
        ));
    }

    #[test]
    fn duplicate_parameter_names_are_rejected() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::scalar(0.0)).unwrap();
        assert!(matches!(
            s.register("w", Tensor::scalar(1.0)),
            Err(NumericsError::DuplicateParam(_))
        ));
    }

    #[test]
    fn zero_grads_resets_every_slot() {
        let mut store = store_with(&[("w", Tensor::zeros(&[2]))]);
        store.get_mut(store.find("w").unwrap()).grad =
            Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        store.zero_grads();
        assert_eq!(store.get(store.find("w").unwrap()).grad.data(), &[0.0, 0.0]);
    }
}
