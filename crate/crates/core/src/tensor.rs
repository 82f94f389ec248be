//! Dense tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Parameters
//! live in a [`ParamStore`] that the graph borrows, so building a forward pass
//! never copies weights. [`Graph::backward`] walks the tape in reverse
//! construction order, which is a valid topological order because every node
//! only refers to earlier nodes.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floating point element type of tensors.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    /// `c = a * b + beta * c` over strided row/column views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above and the caller's stride choice keep
                // every access inside the slices; `c` is dense row-major.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| F::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian payload preceded by rank and dims as u64.
    pub fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.shape.len() as u64).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(out);
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

/// `c (+)= op(a) * op(b)` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
/// A transposed operand is stored as the transpose of its logical shape.
#[allow(clippy::too_many_arguments)]
fn matmul_into<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_t: bool,
    b: &[F],
    b_t: bool,
    c: &mut [F],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c);
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Which attention scores may be attended to.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub batch: usize,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    /// `[batch, keys]`, false for padding.
    pub key_valid: Vec<bool>,
    /// Forbid keys after the query position.
    pub causal: bool,
}

impl AttentionMask {
    fn allowed(&self, row: usize, key: usize) -> bool {
        let b = row / (self.heads * self.queries);
        let q = row % self.queries;
        self.key_valid[b * self.keys + key] && (!self.causal || key <= q)
    }
}

#[derive(Clone, Copy, Debug)]
struct Broadcast {
    groups: usize,
    reps: usize,
    inner: usize,
}

enum Op<F> {
    Leaf,
    Param(usize),
    MatMul {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        b_t: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var, Broadcast),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Dropout(Var, Vec<F>),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        ignore: u32,
        smoothing: F,
        probs: Vec<F>,
        count: usize,
    },
    Permute0213(Var, [usize; 4]),
    Reshape(Var),
    Sum(Var),
}

struct Node<F> {
    value: Option<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// A recording of tensor operations for one forward pass.
pub struct Graph<'p, F: Real> {
    params: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<usize, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    param_of_node: Vec<(usize, usize)>,
    param_shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to a node, if the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// One tensor per parameter in store order; zeros where the loss does not reach.
    pub fn param_grads(mut self) -> Vec<Tensor<F>> {
        let mut out: Vec<Tensor<F>> = self.param_shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for &(node, pid) in &self.param_of_node {
            if let Some(g) = self.grads[node].take() {
                out[pid] = g;
            }
        }
        out
    }
}

impl<'p, F: Real> Default for Graph<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Real> Graph<'p, F> {
    /// A graph without parameters, in inference mode.
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_params(params: &'p ParamStore<F>) -> Self {
        Graph {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Enables dropout, drawing masks from a generator seeded with `seed`.
    pub fn training(mut self, seed: u64) -> Self {
        self.train = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => &self.params.expect("param node without store").tensors[id],
            _ => node.value.as_ref().expect("node value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is tracked.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// The parameter `id` of the borrowed store. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id.0) {
            return v;
        }
        assert!(self.params.is_some_and(|p| id.0 < p.len()), "unknown parameter");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id.0),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id.0, v);
        v
    }

    /// 2-D product `op(a) * op(b)`; `a_t`/`b_t` read the operand transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = if a_t { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_into(m, k, n, self.value(a).data(), a_t, self.value(b).data(), b_t, &mut out, false);
        let t = Tensor { shape: vec![m, n], data: out };
        Ok(self.push(t, Op::MatMul { a, b, a_t, b_t, m, k, n }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product of `[B, m, k]` by `[B, k, n]` (or `[B, n, k]` when `b_t`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (k2, n) = if b_t { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                matmul_into(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    b_t,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let t = Tensor { shape: vec![batch, m, n], data: out };
        Ok(self.push(t, Op::BatchMatMul { a, b, b_t, batch, m, k, n }, &[a, b]))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    fn add_broadcast(&mut self, a: Var, b: Var, bc: Broadcast) -> Var {
        let mut data = self.value(a).data().to_vec();
        let bv = self.value(b).data();
        for g in 0..bc.groups {
            let brow = &bv[g * bc.inner..(g + 1) * bc.inner];
            for r in 0..bc.reps {
                let start = (g * bc.reps + r) * bc.inner;
                for (x, &y) in data[start..start + bc.inner].iter_mut().zip(brow) {
                    *x += y;
                }
            }
        }
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(t, Op::AddBroadcast(a, b, bc), &[a, b])
    }

    /// Adds a vector of the last-axis size to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let inner = self.value(a).last_dim();
        if self.value(bias).numel() != inner {
            return Err(shape_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let reps = self.value(a).numel() / inner.max(1);
        Ok(self.add_broadcast(a, bias, Broadcast { groups: 1, reps, inner }))
    }

    /// Treats `a` as `[groups, reps, inner]` and adds `b` of shape `[groups, inner]`
    /// to every one of the `reps` slices of its group.
    pub fn add_grouped(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if groups == 0 || nb % groups != 0 || na % nb != 0 {
            return Err(shape_err("add_grouped", self.shape(a), self.shape(b)));
        }
        let inner = nb / groups;
        let reps = na / nb;
        Ok(self.add_broadcast(a, b, Broadcast { groups, reps, inner }))
    }

    /// Adds `b` to each consecutive block of `a` with `b`'s size.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if nb == 0 || na % nb != 0 {
            return Err(shape_err("add_tiled", self.shape(a), self.shape(b)));
        }
        Ok(self.add_broadcast(a, b, Broadcast { groups: 1, reps: na / nb, inner: nb }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::from_f64_lossy(s);
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data().iter().map(|&x| x * s).collect(),
        };
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.value(a).data().iter().map(|&x| x.max(F::zero())).collect(),
        };
        self.push(t, Op::Relu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, None)
    }

    /// Softmax over attention scores of shape `[batch * heads, queries, keys]`,
    /// giving zero weight to masked keys.
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<AttentionMask>) -> Result<Var> {
        let expected = [mask.batch * mask.heads, mask.queries, mask.keys];
        if self.shape(a) != expected || mask.key_valid.len() != mask.batch * mask.keys {
            return Err(shape_err("masked_softmax", self.shape(a), &expected));
        }
        Ok(self.softmax_impl(a, Some(mask)))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<Rc<AttentionMask>>) -> Var {
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = vec![F::zero(); x.numel()];
        for (row, (xs, ys)) in x.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let allowed = |j: usize| mask.as_ref().is_none_or(|m| m.allowed(row, j));
            let mut max = F::neg_infinity();
            for (j, &v) in xs.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == F::neg_infinity() {
                continue;
            }
            let mut sum = F::zero();
            for (j, (y, &v)) in ys.iter_mut().zip(xs).enumerate() {
                if allowed(j) {
                    *y = (v - max).exp();
                    sum += *y;
                }
            }
            for y in ys.iter_mut() {
                *y /= sum;
            }
        }
        let t = Tensor { shape: x.shape().to_vec(), data: out };
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Normalizes each row over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = F::from_f64_lossy(eps);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d;
        let mut out = vec![F::zero(); xv.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let dn = F::from_usize(d).unwrap();
        for (xs, ys) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = xs.iter().copied().sum::<F>() / dn;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rstd = F::one() / (var + eps).sqrt();
            for (j, (y, &v)) in ys.iter_mut().zip(xs).enumerate() {
                *y = (v - mean) * rstd * gv[j] + bv[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor { shape: xv.shape().to_vec(), data: out };
        Ok(self.push(
            t,
            Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds },
            &[x, gamma, beta],
        ))
    }

    /// Rows of a `[vocab, dim]` table selected by `ids`, giving `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(shape_err("embedding", &s, &[ids.len()]));
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::validation(format!(
                "embedding id {bad} out of range for vocabulary {vocab}"
            )));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tv[i as usize * dim..(i as usize + 1) * dim]);
        }
        let t = Tensor { shape: vec![ids.len(), dim], data: out };
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Inverted dropout. The identity outside training or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.value(a).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| if self.rng.gen::<f64>() >= p { keep } else { F::zero() })
            .collect();
        let x = self.value(a);
        let t = Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        };
        self.push(t, Op::Dropout(a, mask), &[a])
    }

    /// Mean token cross-entropy of `[n, vocab]` logits, skipping rows whose
    /// target is `ignore`. With label smoothing the target distribution puts
    /// `1 - smoothing` on the label and spreads the rest evenly; the entropy
    /// of that distribution is subtracted so a perfect prediction scores zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        ignore: u32,
        smoothing: f64,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(shape_err("cross_entropy", &s, &[targets.len()]));
        }
        let v = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t as usize >= v) {
            return Err(Error::validation(format!("target {bad} out of range for {v} classes")));
        }
        let (on, off) = smoothed_targets(smoothing, v);
        let constant = entropy_term(on) + F::from_usize(v - 1).unwrap() * entropy_term(off);
        let lv = self.value(logits).data();
        let mut probs = vec![F::zero(); lv.len()];
        let mut total = F::zero();
        let mut count = 0;
        for (row, (&tgt, (xs, ps))) in targets.iter().zip(lv.chunks(v).zip(probs.chunks_mut(v))).enumerate() {
            let _ = row;
            if tgt == ignore {
                continue;
            }
            let max = xs.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (p, &x) in ps.iter_mut().zip(xs) {
                *p = (x - max).exp();
                sum += *p;
            }
            let log_sum = sum.ln();
            let mut loss = constant;
            for (j, (p, &x)) in ps.iter_mut().zip(xs).enumerate() {
                *p /= sum;
                let q = if j == tgt as usize { on } else { off };
                if q > F::zero() {
                    loss -= q * (x - max - log_sum);
                }
            }
            total += loss;
            count += 1;
        }
        if count == 0 {
            return Err(Error::validation("cross entropy over zero non-ignored targets"));
        }
        let mean = total / F::from_usize(count).unwrap();
        Ok(self.push(
            Tensor::scalar(mean),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                smoothing: F::from_f64_lossy(smoothing),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Views `a` as `[d0, d1, d2, d3]` and swaps the middle axes.
    pub fn permute_0213(&mut self, a: Var, dims: [usize; 4]) -> Result<Var> {
        if self.value(a).numel() != dims.iter().product::<usize>() {
            return Err(shape_err("permute_0213", self.shape(a), &dims));
        }
        let data = permute_0213(self.value(a).data(), dims);
        let t = Tensor { shape: vec![dims[0], dims[2], dims[1], dims[3]], data };
        Ok(self.push(t, Op::Permute0213(a, dims), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: self.shape(loss).to_vec(),
            data: vec![F::one()],
        });
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let param_shapes = self
            .params
            .map(|p| p.tensors.iter().map(|t| t.shape().to_vec()).collect())
            .unwrap_or_default();
        let param_of_node = self.param_vars.iter().map(|(&pid, v)| (v.0, pid)).collect();
        Ok(Gradients {
            grads,
            param_of_node,
            param_shapes,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, a_t, b_t, m, k, n } => {
                if self.wants(a) {
                    let bv = self.value(b).data();
                    accumulate(grads, a, self.shape(a), |da| {
                        if a_t {
                            matmul_into(k, n, m, bv, b_t, gd, true, da, true);
                        } else {
                            matmul_into(m, n, k, gd, false, bv, !b_t, da, true);
                        }
                    });
                }
                if self.wants(b) {
                    let av = self.value(a).data();
                    accumulate(grads, b, self.shape(b), |db| {
                        if b_t {
                            matmul_into(n, m, k, gd, true, av, a_t, db, true);
                        } else {
                            matmul_into(k, m, n, av, !a_t, gd, false, db, true);
                        }
                    });
                }
            }
            &Op::BatchMatMul { a, b, b_t, batch, m, k, n } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    accumulate(grads, a, self.shape(a), |da| {
                        for i in 0..batch {
                            matmul_into(
                                m,
                                n,
                                k,
                                &gd[i * m * n..(i + 1) * m * n],
                                false,
                                &bv[i * k * n..(i + 1) * k * n],
                                !b_t,
                                &mut da[i * m * k..(i + 1) * m * k],
                                true,
                            );
                        }
                    });
                }
                if self.wants(b) {
                    accumulate(grads, b, self.shape(b), |db| {
                        for i in 0..batch {
                            let (gs, as_, ds) = (
                                &gd[i * m * n..(i + 1) * m * n],
                                &av[i * m * k..(i + 1) * m * k],
                                &mut db[i * k * n..(i + 1) * k * n],
                            );
                            if b_t {
                                matmul_into(n, m, k, gs, true, as_, false, ds, true);
                            } else {
                                matmul_into(k, m, n, as_, true, gs, false, ds, true);
                            }
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        accumulate(grads, v, self.shape(v), |d| add_into(d, gd));
                    }
                }
            }
            &Op::AddBroadcast(a, b, bc) => {
                if self.wants(a) {
                    accumulate(grads, a, self.shape(a), |d| add_into(d, gd));
                }
                if self.wants(b) {
                    accumulate(grads, b, self.shape(b), |db| {
                        for gi in 0..bc.groups {
                            let drow = &mut db[gi * bc.inner..(gi + 1) * bc.inner];
                            for r in 0..bc.reps {
                                let start = (gi * bc.reps + r) * bc.inner;
                                add_into(drow, &gd[start..start + bc.inner]);
                            }
                        }
                    });
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    accumulate(grads, a, self.shape(a), |d| {
                        for ((x, &gg), &y) in d.iter_mut().zip(gd).zip(bv) {
                            *x += gg * y;
                        }
                    });
                }
                if self.wants(b) {
                    accumulate(grads, b, self.shape(b), |d| {
                        for ((x, &gg), &y) in d.iter_mut().zip(gd).zip(av) {
                            *x += gg * y;
                        }
                    });
                }
            }
            &Op::Scale(a, s) => {
                accumulate(grads, a, self.shape(a), |d| {
                    for (x, &gg) in d.iter_mut().zip(gd) {
                        *x += gg * s;
                    }
                });
            }
            &Op::Relu(a) => {
                let av = self.value(a).data();
                accumulate(grads, a, self.shape(a), |d| {
                    for ((x, &gg), &v) in d.iter_mut().zip(gd).zip(av) {
                        if v > F::zero() {
                            *x += gg;
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = self.nodes[idx].value.as_ref().expect("softmax output");
                let dlen = y.last_dim();
                accumulate(grads, a, self.shape(a), |d| {
                    for ((ds, ys), gs) in d.chunks_mut(dlen).zip(y.data().chunks(dlen)).zip(gd.chunks(dlen)) {
                        let dot: F = ys.iter().zip(gs).map(|(&p, &q)| p * q).sum();
                        for ((x, &p), &q) in ds.iter_mut().zip(ys).zip(gs) {
                            *x += p * (q - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                let dlen = gv.len();
                let dn = F::from_usize(dlen).unwrap();
                if self.wants(gamma) || self.wants(beta) {
                    let mut dgamma = vec![F::zero(); dlen];
                    let mut dbeta = vec![F::zero(); dlen];
                    for (r, (xs, gs)) in xv.chunks(dlen).zip(gd.chunks(dlen)).enumerate() {
                        for j in 0..dlen {
                            let xhat = (xs[j] - mean[r]) * rstd[r];
                            dgamma[j] += gs[j] * xhat;
                            dbeta[j] += gs[j];
                        }
                    }
                    if self.wants(gamma) {
                        accumulate(grads, gamma, self.shape(gamma), |d| add_into(d, &dgamma));
                    }
                    if self.wants(beta) {
                        accumulate(grads, beta, self.shape(beta), |d| add_into(d, &dbeta));
                    }
                }
                if self.wants(x) {
                    accumulate(grads, x, self.shape(x), |d| {
                        let mut dxhat = vec![F::zero(); dlen];
                        for (r, ((ds, xs), gs)) in d
                            .chunks_mut(dlen)
                            .zip(xv.chunks(dlen))
                            .zip(gd.chunks(dlen))
                            .enumerate()
                        {
                            let mut mean_d = F::zero();
                            let mut mean_dx = F::zero();
                            for j in 0..dlen {
                                dxhat[j] = gs[j] * gv[j];
                                let xhat = (xs[j] - mean[r]) * rstd[r];
                                mean_d += dxhat[j];
                                mean_dx += dxhat[j] * xhat;
                            }
                            mean_d /= dn;
                            mean_dx /= dn;
                            for j in 0..dlen {
                                let xhat = (xs[j] - mean[r]) * rstd[r];
                                ds[j] += rstd[r] * (dxhat[j] - mean_d - xhat * mean_dx);
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let dim = self.shape(table)[1];
                accumulate(grads, table, self.shape(table), |d| {
                    for (row, &i) in ids.iter().enumerate() {
                        add_into(
                            &mut d[i as usize * dim..(i as usize + 1) * dim],
                            &gd[row * dim..(row + 1) * dim],
                        );
                    }
                });
            }
            Op::Dropout(a, mask) => {
                let a = *a;
                accumulate(grads, a, self.shape(a), |d| {
                    for ((x, &gg), &m) in d.iter_mut().zip(gd).zip(mask) {
                        *x += gg * m;
                    }
                });
            }
            Op::CrossEntropy { logits, targets, ignore, smoothing, probs, count } => {
                let logits = *logits;
                let v = self.shape(logits)[1];
                let (on, off) = smoothed_targets(smoothing.as_f64(), v);
                let scale = gd[0] / F::from_usize(*count).unwrap();
                accumulate(grads, logits, self.shape(logits), |d| {
                    for ((ds, ps), &t) in d.chunks_mut(v).zip(probs.chunks(v)).zip(targets) {
                        if t == *ignore {
                            continue;
                        }
                        for (j, (x, &p)) in ds.iter_mut().zip(ps).enumerate() {
                            let q = if j == t as usize { on } else { off };
                            *x += (p - q) * scale;
                        }
                    }
                });
            }
            &Op::Permute0213(a, dims) => {
                let back = permute_0213(gd, [dims[0], dims[2], dims[1], dims[3]]);
                accumulate(grads, a, self.shape(a), |d| add_into(d, &back));
            }
            &Op::Reshape(a) => {
                accumulate(grads, a, self.shape(a), |d| add_into(d, gd));
            }
            &Op::Sum(a) => {
                let gg = gd[0];
                accumulate(grads, a, self.shape(a), |d| {
                    for x in d.iter_mut() {
                        *x += gg;
                    }
                });
            }
        }
    }
}

fn smoothed_targets<F: Real>(smoothing: f64, classes: usize) -> (F, F) {
    let on = F::from_f64_lossy(1.0 - smoothing);
    let off = if classes > 1 {
        F::from_f64_lossy(smoothing / (classes - 1) as f64)
    } else {
        F::zero()
    };
    (on, off)
}

// q * ln q with 0 ln 0 = 0
fn entropy_term<F: Real>(q: F) -> F {
    if q > F::zero() {
        q * q.ln()
    } else {
        F::zero()
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate<F: Real>(
    grads: &mut [Option<Tensor<F>>],
    v: Var,
    shape: &[usize],
    f: impl FnOnce(&mut [F]),
) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

fn permute_0213<F: Real>(src: &[F], [d0, d1, d2, d3]: [usize; 4]) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let s = ((a * d1 + b) * d2 + c) * d3;
                let t = ((a * d2 + c) * d1 + b) * d3;
                out[t..t + d3].copy_from_slice(&src[s..s + d3]);
            }
        }
    }
    out
}

/// Result of a finite-difference gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` builds a scalar loss on a fresh graph over `params`; it must be
/// deterministic. With `sample = Some((n, seed))` only `n` randomly chosen
/// coordinates are perturbed. The relative error of one coordinate is
/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check<F: Real>(
    params: &mut ParamStore<F>,
    h: f64,
    sample: Option<(usize, u64)>,
    mut f: impl FnMut(&mut Graph<'_, F>) -> Result<Var>,
) -> Result<GradCheck> {
    let analytic = {
        let mut g = Graph::with_params(params);
        let loss = f(&mut g)?;
        g.backward(loss)?.param_grads()
    };
    let mut coords: Vec<(usize, usize)> = params
        .tensors
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    if let Some((n, seed)) = sample {
        if n < coords.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            coords = rand::seq::index::sample(&mut rng, coords.len(), n)
                .into_iter()
                .map(|i| coords[i])
                .collect();
            log::info!("finite difference check on {n} sampled coordinates");
        }
    }
    let mut eval = |params: &ParamStore<F>| -> Result<f64> {
        let mut g = Graph::with_params(params);
        let loss = f(&mut g)?;
        Ok(g.value(loss).data()[0].as_f64())
    };
    let mut worst = 0.0f64;
    for &(p, i) in &coords {
        let orig = params.tensors[p].data[i];
        params.tensors[p].data[i] = F::from_f64_lossy(orig.as_f64() + h);
        let up = eval(params)?;
        params.tensors[p].data[i] = F::from_f64_lossy(orig.as_f64() - h);
        let down = eval(params)?;
        params.tensors[p].data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let exact = analytic[p].data[i].as_f64();
        let denom = exact.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((exact - numeric).abs() / denom);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coordinates: coords.len(),
    })
}
