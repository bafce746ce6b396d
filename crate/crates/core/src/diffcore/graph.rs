//! Tape of primitive operations with reverse-mode gradient propagation.
//!
//! A [`Graph`] borrows a [`ParameterStore`] read-only while the forward pass is
//! recorded. [`Graph::backward`] consumes the tape and returns [`Gradients`],
//! which the caller folds into the store with [`ParameterStore::accumulate`].
//! Nodes that do not depend on any parameter are never differentiated.

use super::params::{Gradients, ParamId, ParameterStore};
use super::tensor::{self, log_softmax_slice, sigmoid, softmax_slice, Tensor};
use crate::error::{ensure, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Pointwise operations accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Mul,
    Add,
    Sub,
    Tanh,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// matrix [r×c] + vector [r] repeated across columns
    AddColumn(Var, Var),
    /// matrix [r×c] ∘ vector [r] repeated across columns
    MulColumn(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Row(Var, usize),
    Concat(Vec<Var>),
    Reshape(Var),
    Pick(Var, usize),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParameterStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParameterStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    /// The node for a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{what}: incompatible shapes {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn column_check(&self, m: Var, v: Var, what: &str) -> Result<(usize, usize)> {
        let ms = self.shape(m);
        ensure!(
            ms.len() == 2 && self.shape(v) == [ms[0]],
            "{what}: cannot broadcast {:?} across columns of {:?}",
            self.shape(v),
            ms
        );
        Ok((ms[0], ms[1]))
    }

    /// `m + v·1ᵀ`: adds vector `v` to every column of matrix `m`.
    pub fn add_column(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.column_check(m, v, "add_column")?;
        let mut out = self.value(m).clone();
        let vv = self.value(v).data();
        for i in 0..r {
            for x in &mut out.data_mut()[i * c..(i + 1) * c] {
                *x += vv[i];
            }
        }
        let ng = self.needs(m) || self.needs(v);
        Ok(self.push(out, Op::AddColumn(m, v), ng))
    }

    /// `m ∘ (v·1ᵀ)`: scales row `i` of `m` by `v[i]`.
    pub fn mul_column(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.column_check(m, v, "mul_column")?;
        let mut out = self.value(m).clone();
        let vv = self.value(v).data();
        for i in 0..r {
            for x in &mut out.data_mut()[i * c..(i + 1) * c] {
                *x *= vv[i];
            }
        }
        let ng = self.needs(m) || self.needs(v);
        Ok(self.push(out, Op::MulColumn(m, v), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        let ng = self.needs(a);
        self.push(out, Op::Offset(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(out, Op::Square(a), ng)
    }

    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        match (op, inputs) {
            (Elementwise::Mul, [a, b]) => self.mul(*a, *b),
            (Elementwise::Add, [a, b]) => self.add(*a, *b),
            (Elementwise::Sub, [a, b]) => self.sub(*a, *b),
            (Elementwise::Tanh, [a]) => Ok(self.tanh(*a)),
            (Elementwise::Square, [a]) => Ok(self.square(*a)),
            _ => Err(crate::Error::contract(format!(
                "{op:?} does not take {} operands",
                inputs.len()
            ))),
        }
    }

    /// Softmax along the last axis (per row for matrices).
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = tensor::softmax(self.value(a));
        let ng = self.needs(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        ensure!(self.value(a).rank() == 1, "log_softmax expects a vector");
        let out = Tensor::vector(log_softmax_slice(self.value(a).data()));
        let ng = self.needs(a);
        Ok(self.push(out, Op::LogSoftmax(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.needs(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let t = self.value(m);
        ensure!(t.rank() == 2, "row expects a matrix, got {:?}", t.shape());
        ensure!(
            i < t.shape()[0],
            "row index {i} out of range for {:?}",
            t.shape()
        );
        let out = Tensor::vector(t.row(i).to_vec());
        let ng = self.needs(m);
        Ok(self.push(out, Op::Row(m, i), ng))
    }

    /// Concatenate vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat of nothing");
        let mut data = Vec::new();
        for &p in parts {
            ensure!(
                self.value(p).rank() == 1,
                "concat expects vectors, got {:?}",
                self.shape(p)
            );
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Element `i` of a vector as a scalar.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        ensure!(
            t.rank() == 1 && i < t.len(),
            "pick index {i} out of range for {:?}",
            t.shape()
        );
        let out = Tensor::scalar(t.data()[i]);
        let ng = self.needs(a);
        Ok(self.push(out, Op::Pick(a, i), ng))
    }

    /// Propagate d(loss)/d(node) back to every parameter reached by the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.value(loss).is_scalar(),
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut out = Gradients::empty(self.store.len());
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, g: Tensor| {
                if self.nodes[v.0].needs_grad {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => match &mut out.per_param[id.0] {
                    Some(acc) => acc.add_assign(&dy),
                    slot => *slot = Some(dy),
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        let da = if bv.rank() == 1 {
                            outer(dy.data(), bv.data())
                        } else {
                            tensor::matmul(&dy, &bv.transpose())?
                        };
                        send(*a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = tensor::matmul(&av.transpose(), &dy)?;
                        send(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, dy.clone());
                    send(*b, dy);
                }
                Op::Sub(a, b) => {
                    send(*b, dy.map(|x| -x));
                    send(*a, dy);
                }
                Op::Mul(a, b) => {
                    let da = dy.zip_map(self.value(*b), |g, y| g * y);
                    let db = dy.zip_map(self.value(*a), |g, x| g * x);
                    send(*a, da);
                    send(*b, db);
                }
                Op::AddColumn(m, v) => {
                    let (r, c) = dy.rows_cols();
                    let dv = (0..r).map(|i| dy.row(i).iter().sum()).collect();
                    send(*v, Tensor::vector(dv));
                    debug_assert_eq!(dy.len(), r * c);
                    send(*m, dy);
                }
                Op::MulColumn(m, v) => {
                    let (r, c) = dy.rows_cols();
                    let mv = self.value(*m);
                    let vv = self.value(*v).data();
                    let dv = (0..r)
                        .map(|i| dy.row(i).iter().zip(mv.row(i)).map(|(g, x)| g * x).sum())
                        .collect();
                    let mut dm = dy;
                    for i in 0..r {
                        for x in &mut dm.data_mut()[i * c..(i + 1) * c] {
                            *x *= vv[i];
                        }
                    }
                    send(*v, Tensor::vector(dv));
                    send(*m, dm);
                }
                Op::Scale(a, k) => send(*a, dy.map(|g| g * k)),
                Op::Offset(a) => send(*a, dy),
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap();
                    send(*a, dy.zip_map(y, |g, y| g * (1.0 - y * y)));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    send(*a, dy.zip_map(y, |g, y| g * y * (1.0 - y)));
                }
                Op::Square(a) => {
                    send(*a, dy.zip_map(self.value(*a), |g, x| 2.0 * g * x));
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let (r, c) = y.rows_cols();
                    let mut dx = dy;
                    for i in 0..r {
                        let yr = y.row(i);
                        let dr = &mut dx.data_mut()[i * c..(i + 1) * c];
                        let dot: f64 = dr.iter().zip(yr).map(|(g, p)| g * p).sum();
                        for (g, p) in dr.iter_mut().zip(yr) {
                            *g = p * (*g - dot);
                        }
                    }
                    send(*a, dx);
                }
                Op::LogSoftmax(a) => {
                    let p = softmax_slice(self.value(*a).data());
                    let total = dy.sum();
                    let dx = dy
                        .data()
                        .iter()
                        .zip(&p)
                        .map(|(g, p)| g - p * total)
                        .collect();
                    send(*a, Tensor::vector(dx));
                }
                Op::Sum(a) => {
                    let g = dy.data()[0];
                    send(*a, Tensor::full(self.shape(*a), g));
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let g = dy.data()[0] / n;
                    send(*a, Tensor::full(self.shape(*a), g));
                }
                Op::Row(m, i) => {
                    let mut dm = Tensor::zeros(self.shape(*m));
                    let c = dy.len();
                    dm.data_mut()[i * c..(i + 1) * c].copy_from_slice(dy.data());
                    send(*m, dm);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        let piece = dy.data()[offset..offset + n].to_vec();
                        offset += n;
                        send(*p, Tensor::vector(piece));
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a).to_vec();
                    send(*a, dy.reshaped(&shape)?);
                }
                Op::Pick(a, i) => {
                    let mut da = Tensor::zeros(self.shape(*a));
                    da.data_mut()[*i] = dy.data()[0];
                    send(*a, da);
                }
            }
        }
        Ok(out)
    }
}

fn outer(u: &[f64], v: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(u.len() * v.len());
    for &a in u {
        data.extend(v.iter().map(|&b| a * b));
    }
    Tensor::matrix(u.len(), v.len(), data).expect("outer product shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences on every entry of every parameter.
    fn check_grads(store: &mut ParameterStore, f: impl Fn(&mut Graph) -> Var) {
        let grads = {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward(loss).unwrap()
        };
        let h = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            for k in 0..store.value(id).len() {
                let orig = store.value(id).data()[k];
                let mut eval = |x: f64| {
                    store.value_mut(id).data_mut()[k] = x;
                    let mut g = Graph::new(store);
                    let l = f(&mut g);
                    g.value(l).data()[0]
                };
                let num = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
                store.value_mut(id).data_mut()[k] = orig;
                let ana = grads.get(id).map_or(0.0, |t| t.data()[k]);
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "param {} [{k}]: analytic {ana} numeric {num}", store.name(id));
            }
        }
    }

    #[test]
    fn sum_gives_ones() {
        let mut store = ParameterStore::new();
        let x = store.insert("x", Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let l = g.sum(xv);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_at_minimum_has_zero_grad() {
        let mut store = ParameterStore::new();
        let x = store.insert("x", Tensor::vector(vec![0.3, 0.7])).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let y = g.constant(Tensor::vector(vec![0.3, 0.7]));
        let d = g.sub(xv, y).unwrap();
        let sq = g.square(d);
        let l = g.mean(sq);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParameterStore::new();
        let x = store.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let t = g.tanh(xv);
        assert!(g.backward(t).is_err());
    }

    #[test]
    fn double_use_accumulates() {
        let mut store = ParameterStore::new();
        let x = store.insert("x", Tensor::vector(vec![2.0])).unwrap();
        let mut g = Graph::new(&store);
        let a = g.param(x);
        let b = g.param(x);
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn tanh_and_unary_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParameterStore::new();
        store.insert("x", rand_tensor(&mut rng, &[10])).unwrap();
        let w = rand_tensor(&mut rng, &[10]);
        check_grads(&mut store, |g| {
            let x = g.param(ParamId(0));
            let t = g.tanh(x);
            let s = g.sigmoid(x);
            let q = g.square(x);
            let a = g.add(t, s).unwrap();
            let b = g.mul(a, q).unwrap();
            let c = g.offset(b, 0.5);
            let c = g.scale(c, 1.7);
            let wv = g.constant(w.clone());
            let d = g.sub(c, wv).unwrap();
            let d = g.mul(d, d).unwrap();
            g.sum(d)
        });
    }

    #[test]
    fn matrix_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParameterStore::new();
        store.insert("a", rand_tensor(&mut rng, &[3, 4])).unwrap();
        store.insert("b", rand_tensor(&mut rng, &[4, 5])).unwrap();
        store.insert("v", rand_tensor(&mut rng, &[3])).unwrap();
        store.insert("u", rand_tensor(&mut rng, &[5])).unwrap();
        let target = rand_tensor(&mut rng, &[3, 5]);
        check_grads(&mut store, |g| {
            let a = g.param(ParamId(0));
            let b = g.param(ParamId(1));
            let v = g.param(ParamId(2));
            let u = g.param(ParamId(3));
            let ab = g.matmul(a, b).unwrap();
            let ab = g.add_column(ab, v).unwrap();
            let ab = g.mul_column(ab, v).unwrap();
            let sm = g.softmax(ab);
            let t = g.constant(target.clone());
            let d = g.sub(sm, t).unwrap();
            let d = g.square(d);
            let l1 = g.mean(d);
            let bu = g.matmul(b, u).unwrap();
            let r = g.row(ab, 1).unwrap();
            let cat = g.concat(&[bu, r]).unwrap();
            let ls = g.log_softmax(cat).unwrap();
            let p = g.pick(ls, 2).unwrap();
            let flat = g.reshape(ab, &[15]).unwrap();
            let fs = g.sum(flat);
            let fs = g.scale(fs, 0.01);
            let l = g.add(l1, p).unwrap();
            g.add(l, fs).unwrap()
        });
    }

    #[test]
    fn elementwise_dispatch() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let z = g.constant(Tensor::zeros(&[3]));
        let t = g.elementwise(Elementwise::Tanh, &[z]).unwrap();
        assert_eq!(g.value(t).data(), &[0.0; 3]);
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let ones = g.constant(Tensor::ones(&[3]));
        let m = g.elementwise(Elementwise::Mul, &[x, ones]).unwrap();
        assert_eq!(g.value(m), g.value(x));
        assert!(g.elementwise(Elementwise::Add, &[x]).is_err());
        let bad = g.constant(Tensor::zeros(&[2]));
        assert!(g.elementwise(Elementwise::Add, &[x, bad]).is_err());
    }
}
