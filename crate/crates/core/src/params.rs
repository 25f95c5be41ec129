//! Named parameter storage and the per-forward binding of parameters onto a tape.

use std::ops::{Deref, DerefMut};

use crate::tensor::{Gradients, Result, Scalar, Tape, Tensor, Var};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// How the optimizer treats a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, weight decay applies.
    Weight,
    /// Trainable batchnorm scale/shift, exempt from weight decay.
    Norm,
    /// Running statistics; never trained.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    pub kind: ParamKind,
}

impl<F: Scalar> Param<F> {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            grad: None,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable()).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Sums the gradients of a finished graph into the stored buffers and
    /// applies any recorded running-statistic updates.
    pub fn absorb(&mut self, outcome: GraphOutcome<F>) {
        for (id, g) in outcome.grads {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b),
                None => p.grad = Some(g),
            }
        }
        for u in outcome.stats {
            blend(&mut self.params[u.mean.0].value, &u.batch_mean, u.momentum);
            blend(&mut self.params[u.var.0].value, &u.batch_var, u.momentum);
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    kind: p.kind,
                })
                .collect(),
        }
    }
}

fn blend<F: Scalar>(running: &mut Tensor<F>, batch: &[F], momentum: f64) {
    let m = F::lit(momentum);
    for (r, &b) in running.data_mut().iter_mut().zip(batch) {
        *r = (F::one() - m) * *r + m * b;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct StatUpdate<F> {
    mean: ParamId,
    var: ParamId,
    batch_mean: Vec<F>,
    batch_var: Vec<F>,
    momentum: f64,
}

/// Gradients and statistic updates extracted from a [`Graph`].
pub struct GraphOutcome<F> {
    grads: Vec<(ParamId, Tensor<F>)>,
    stats: Vec<StatUpdate<F>>,
}

impl<F: Scalar> GraphOutcome<F> {
    pub fn grad(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

/// A tape plus the parameters bound onto it for one forward pass.
pub struct Graph<'s, F> {
    tape: Tape<F>,
    store: &'s ParamStore<F>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    stats: Vec<StatUpdate<F>>,
}

impl<'s, F: Scalar> Graph<'s, F> {
    pub fn new(store: &'s ParamStore<F>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    /// Binds a parameter as a gradient-tracked leaf (once per graph).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), p.trainable());
        self.bound[id.0] = Some(v);
        v
    }

    /// Batchnorm over `x[n×c×h×w]`; training mode records running-stat updates.
    pub fn batch_norm(&mut self, x: Var, bn: &BatchNormIds, eps: f64, momentum: f64) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        match self.mode {
            Mode::Train => {
                let (y, batch_mean, batch_var) = self.tape.batch_norm_train(x, gamma, beta, eps)?;
                self.stats.push(StatUpdate {
                    mean: bn.running_mean,
                    var: bn.running_var,
                    batch_mean,
                    batch_var,
                    momentum,
                });
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.store.value(bn.running_mean).data();
                let rv = self.store.value(bn.running_var).data();
                self.tape.batch_norm_eval(x, gamma, beta, rm, rv, eps)
            }
        }
    }

    /// Consumes the graph, pairing each bound parameter with its gradient.
    pub fn finish(self, mut grads: Gradients<F>) -> GraphOutcome<F> {
        let grads = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.params[i].trainable() {
                    return None;
                }
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect();
        GraphOutcome {
            grads,
            stats: self.stats,
        }
    }
}

impl<F> Deref for Graph<'_, F> {
    type Target = Tape<F>;
    fn deref(&self) -> &Tape<F> {
        &self.tape
    }
}

impl<F> DerefMut for Graph<'_, F> {
    fn deref_mut(&mut self) -> &mut Tape<F> {
        &mut self.tape
    }
}

/// Parameter handles for one batchnorm layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormIds {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[channels], F::one()), ParamKind::Norm),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamKind::Norm),
            running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(
                format!("{prefix}.running_var"),
                Tensor::full(&[channels], F::one()),
                ParamKind::Buffer,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), ParamKind::Weight);
        for _ in 0..2 {
            let mut g = Graph::new(&store, Mode::Train);
            let x = g.param(id);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq).unwrap();
            let grads = g.backward(loss).unwrap();
            let out = g.finish(grads);
            store.absorb(out);
        }
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[4.0, 8.0]);
        store.zero_grads();
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNormIds::register(&mut store, "bn", 1);
        let x = Tensor::new(&[4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new(&store, Mode::Train);
        let xv = g.constant(x);
        let y = g.batch_norm(xv, &bn, 1e-5, 0.1).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let out = g.finish(grads);
        store.absorb(out);
        // batch mean 2.5, unbiased var 5/3
        assert!((store.value(bn.running_mean).data()[0] - 0.25).abs() < 1e-12);
        assert!((store.value(bn.running_var).data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        assert_eq!(store.trainable_count(), 2);
    }
}
