//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with a
//! closure that maps the output gradient back onto the inputs. A graph is
//! built per forward pass and dropped afterwards; parameters live in a
//! [`ParamStore`] and are copied into the graph on first use.

mod conv;
mod ops;
mod sample;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    g: &'g Graph<'g>,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store: Some(store), nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()), grad_enabled: true }
    }

    /// A graph that records no backward closures. Used for inference.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self { grad_enabled: false, ..Self::new(store) }
    }

    /// A graph without a parameter store, for exercising individual ops.
    pub fn detached() -> Self {
        Self { store: None, nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()), grad_enabled: true }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push_node(&self, value: Tensor, inputs: Vec<usize>, backward: Option<BackwardFn>, needs_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), inputs, backward, needs_grad });
        nodes.len() - 1
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let id = self.push_node(t, Vec::new(), None, false);
        Var { g: self, id }
    }

    /// A leaf whose gradient is tracked (for input-gradient checks).
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let id = self.push_node(t, Vec::new(), None, self.grad_enabled);
        Var { g: self, id }
    }

    pub fn param(&self, pid: ParamId) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(&pid) {
            return Var { g: self, id };
        }
        let store = self.store.expect("graph has no parameter store");
        let id = self.push_node(store.get(pid).clone(), Vec::new(), None, self.grad_enabled);
        self.params.borrow_mut().insert(pid, id);
        Var { g: self, id }
    }

    pub(crate) fn record<F>(&self, value: Tensor, inputs: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let needs_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].needs_grad)
        };
        let (ids, bw): (Vec<usize>, Option<BackwardFn>) = if needs_grad { (ids, Some(Box::new(backward))) } else { (Vec::new(), None) };
        let id = self.push_node(value, ids, bw, needs_grad);
        Var { g: self, id }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Back-propagate from a scalar.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let mask: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].needs_grad).collect();
            let input_grads = bw(&g, &mask);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&inp, ig), &m) in node.inputs.iter().zip(input_grads).zip(&mask) {
                let (Some(ig), true) = (ig, m) else { continue };
                debug_assert_eq!(ig.shape(), nodes[inp].value.shape(), "grad shape for node {inp}");
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        let params = self.params.borrow().iter().map(|(&pid, &nid)| (pid, nid)).collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient of a leaf; `None` if the loss does not depend on it.
    pub fn of(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, pid: ParamId) -> Option<&Tensor> {
        self.params.get(&pid).and_then(|&n| self.grads[n].as_ref())
    }

    /// Gradient for every parameter of `store`, zero-filled where unused.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store.ids().map(|pid| self.param(pid).cloned().unwrap_or_else(|| Tensor::zeros(store.get(pid).shape()))).collect()
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph<'g> {
        self.g
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.g.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.nodes.borrow()[self.id].needs_grad
    }
}

pub mod gradcheck {
    //! Central-difference gradient checking.
    use super::*;

    /// Floor on the relative-error denominator, so gradients near zero are
    /// compared absolutely.
    pub const REL_FLOOR: f64 = 1e-3;

    pub fn rel_error(numeric: f64, analytic: f64) -> f64 {
        (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(REL_FLOOR)
    }

    /// Worst relative error of `f`'s input gradients at `inputs`, step `1e-5`.
    pub fn max_rel_error(inputs: &[Tensor], f: impl for<'g> Fn(&[Var<'g>]) -> Var<'g> + Copy) -> f64 {
        max_rel_error_step(inputs, 1e-5, f)
    }

    /// Worst relative error of `f`'s input gradients at `inputs` with central step `h`.
    pub fn max_rel_error_step(inputs: &[Tensor], h: f64, f: impl for<'g> Fn(&[Var<'g>]) -> Var<'g> + Copy) -> f64 {
        let store = ParamStore::new();
        max_rel_error_in(&store, inputs, h, f)
    }

    /// As [`max_rel_error_step`], with `store` reachable through `Graph::param`.
    pub fn max_rel_error_in(store: &ParamStore, inputs: &[Tensor], h: f64, f: impl for<'g> Fn(&[Var<'g>]) -> Var<'g> + Copy) -> f64 {
        let g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&vars);
        let grads = g.backward(out).expect("gradcheck: scalar output");
        let analytic: Vec<Tensor> =
            vars.iter().zip(inputs).map(|(v, t)| grads.of(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
        let eval = |ins: &[Tensor]| -> f64 {
            let g = Graph::inference(store);
            let vs: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            f(&vs).value().data()[0]
        };
        let mut worst = 0.0f64;
        for (k, t) in inputs.iter().enumerate() {
            for i in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                worst = worst.max(rel_error(num, analytic[k].data()[i]));
            }
        }
        worst
    }

    /// Outcome of a parameter gradient check.
    #[derive(Clone, Debug, PartialEq)]
    pub struct ParamCheck {
        pub checked: usize,
        pub passed: usize,
        pub worst: f64,
    }

    impl ParamCheck {
        pub fn pass_fraction(&self) -> f64 {
            if self.checked == 0 {
                1.0
            } else {
                self.passed as f64 / self.checked as f64
            }
        }
    }

    /// Compare analytic parameter gradients of the scalar built by `f` against
    /// central differences at the listed `(parameter, flat index)` entries.
    pub fn check_params(
        store: &mut ParamStore,
        picks: &[(ParamId, usize)],
        h: f64,
        tol: f64,
        f: impl for<'g> Fn(&'g Graph<'g>) -> Result<Var<'g>>,
    ) -> Result<ParamCheck> {
        let analytic: Vec<f64> = {
            let g = Graph::new(store);
            let out = f(&g)?;
            let grads = g.backward(out)?;
            picks.iter().map(|&(pid, i)| grads.param(pid).map_or(0.0, |t| t.data()[i])).collect()
        };
        let eval = |store: &ParamStore| -> Result<f64> {
            let g = Graph::inference(store);
            Ok(f(&g)?.value().data()[0])
        };
        let mut out = ParamCheck { checked: 0, passed: 0, worst: 0.0 };
        for (&(pid, i), &ana) in picks.iter().zip(&analytic) {
            let orig = store.get(pid).data()[i];
            store.get_mut(pid).data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(pid).data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(pid).data_mut()[i] = orig;
            let err = rel_error((plus - minus) / (2.0 * h), ana);
            out.checked += 1;
            out.passed += (err <= tol) as usize;
            out.worst = out.worst.max(err);
        }
        Ok(out)
    }
}
