use std::sync::Arc;

use super::ops;
use super::params::{Gradients, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Maximum(Var, Var),
    Relu(Var),
    Concat(Vec<Var>),
    Gather { x: Var, index: Arc<Vec<usize>> },
    GroupMax { x: Var, argmax: Vec<usize> },
    SoftmaxRows(Var),
    L2NormRows { x: Var, norms: Vec<f64> },
    Reshape(Var),
    VladResidual { assign: Var, x: Var, centers: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A forward pass recorded for reverse-mode differentiation.
///
/// Parameters are read from a shared [`ParamStore`]; [`Graph::backward`]
/// returns their gradients without touching the store, so independent graphs
/// can run on separate threads.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, "input")
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let t = self.params.get(name)?.clone();
        self.push(t, Op::Param(name.to_string()), name)
    }

    /// `x · w + b` applied to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::shared_mlp_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
        )?;
        self.push(y, Op::Linear { x, w, b }, "linear")
    }

    /// Shared layer looked up by prefix: `{prefix}.w` and `{prefix}.b`.
    pub fn dense(&mut self, x: Var, prefix: &str, relu: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.linear(x, w, Some(b))?;
        if relu {
            self.relu(y)
        } else {
            Ok(y)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        self.push(y, Op::MatMul(a, b), "matmul")
    }

    fn elementwise(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::Shape(format!(
                "{name} of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::maximum(self.value(a), self.value(b))?;
        self.push(y, Op::Maximum(a, b), "maximum")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x), "relu")
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_cols(&ts)?;
        self.push(y, Op::Concat(parts.to_vec()), "concat")
    }

    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let y = ops::gather_rows(self.value(x), &index)?;
        self.push(y, Op::Gather { x, index }, "gather")
    }

    /// Max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (y, argmax) = ops::group_max(self.value(x), group)?;
        self.push(y, Op::GroupMax { x, argmax }, "group max")
    }

    /// Column-wise max over all rows, giving a `1 × C` row.
    pub fn maxpool_points(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::maxpool_points(self.value(x))?;
        self.push(y, Op::GroupMax { x, argmax }, "max pool")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_rows(self.value(x));
        self.push(y, Op::SoftmaxRows(x), "softmax")
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (y, norms) = ops::l2_normalize_rows(self.value(x));
        self.push(y, Op::L2NormRows { x, norms }, "l2 normalize")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push(y, Op::Reshape(x), "reshape")
    }

    pub fn vlad_residual(&mut self, assign: Var, x: Var, centers: Var) -> Result<Var> {
        let y = ops::vlad_residual(self.value(assign), self.value(x), self.value(centers))?;
        self.push(y, Op::VladResidual { assign, x, centers }, "vlad")
    }

    /// Reverse pass from `output` seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if !self.value(output).same_shape(seed) {
            return Err(Error::Shape(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        let mut out = Gradients::new();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=output.0).rev() {
            let Some(dy) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(name) => match out.get_mut(name) {
                    Some(t) => t.add_assign(&dy),
                    None => {
                        out.insert(name.clone(), dy);
                    }
                },
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::shared_mlp_backward(self.value(*x), self.value(*w), &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        let db = db.reshape(self.value(*b).shape().to_vec())?;
                        acc(&mut grads, *b, db);
                    }
                }
                Op::MatMul(a, b) => {
                    let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), &dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    let mut neg = dy.clone();
                    neg.scale(-1.0);
                    acc(&mut grads, *a, dy);
                    acc(&mut grads, *b, neg);
                }
                Op::Maximum(a, b) => {
                    let (da, db) = ops::maximum_backward(self.value(*a), self.value(*b), &dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Relu(x) => acc(&mut grads, *x, ops::relu_backward(self.value(*x), &dy)),
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
                    for (&p, g) in parts.iter().zip(ops::concat_cols_backward(&widths, &dy)) {
                        acc(&mut grads, p, g);
                    }
                }
                Op::Gather { x, index } => {
                    let g = ops::gather_rows_backward(index, self.value(*x).rows(), &dy);
                    acc(&mut grads, *x, g);
                }
                Op::GroupMax { x, argmax } => {
                    let g = ops::group_max_backward(argmax, self.value(*x).rows(), &dy);
                    acc(&mut grads, *x, g);
                }
                Op::SoftmaxRows(x) => {
                    acc(&mut grads, *x, ops::softmax_rows_backward(&node.value, &dy));
                }
                Op::L2NormRows { x, norms } => {
                    acc(&mut grads, *x, ops::l2_normalize_rows_backward(&node.value, norms, &dy));
                }
                Op::Reshape(x) => {
                    let g = dy.reshape(self.value(*x).shape().to_vec())?;
                    acc(&mut grads, *x, g);
                }
                Op::VladResidual { assign, x, centers } => {
                    let (da, dx, dc) = ops::vlad_residual_backward(
                        self.value(*assign),
                        self.value(*x),
                        self.value(*centers),
                        &dy,
                    );
                    acc(&mut grads, *assign, da);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *centers, dc);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_gradients() {
        let mut store = ParamStore::new(3);
        store.insert_glorot("l.w", 3, 2).unwrap();
        store.insert_zeros("l.b", &[1, 2]).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_rows(&[[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]]).unwrap()).unwrap();
        let y = g.dense(x, "l", false).unwrap();
        let grads = g.backward(y, &Tensor::matrix(2, 2, vec![1.0; 4]).unwrap()).unwrap();
        // d/dw of the summed output: column sums of x repeated per output.
        assert_eq!(grads["l.w"].data(), &[1.5, 1.5, 1.0, 1.0, 3.0, 3.0]);
        assert_eq!(grads["l.b"].data(), &[2.0, 2.0]);
    }

    #[test]
    fn shared_param_gradients_accumulate() {
        let mut store = ParamStore::new(3);
        store.insert("p", Tensor::row_vector(vec![2.0])).unwrap();
        let mut g = Graph::new(&store);
        let a = g.param("p").unwrap();
        let b = g.param("p").unwrap();
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s, &Tensor::row_vector(vec![1.0])).unwrap();
        assert_eq!(grads["p"].data(), &[2.0]);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let store = ParamStore::new(0);
        let mut g = Graph::new(&store);
        assert!(matches!(
            g.input(Tensor::row_vector(vec![f64::NAN])),
            Err(Error::NonFinite(_))
        ));
        let x = g.input(Tensor::row_vector(vec![1e300])).unwrap();
        let w = g.input(Tensor::from_rows(&[[1e300]]).unwrap()).unwrap();
        assert!(matches!(g.matmul(x, w), Err(Error::NonFinite(_))));
    }
}
