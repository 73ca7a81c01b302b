use super::kernels::{self, split_axis};
use super::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { a: Var, k: f64 },
    AddScalar { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { a: Var, axis: usize, idx: Vec<usize> },
    Sum { a: Var, axis: usize },
    SumAll { a: Var },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax { a: Var },
    Gelu { a: Var },
    Relu { a: Var },
    L2Norm { a: Var },
    Cosine { a: Var, b: Var, eps: f64 },
    BceLogits { logits: Var, targets: Vec<f64> },
    CrossEntropy { logits: Var, classes: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations supporting one reverse-mode pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` walks it in reverse. Shape errors are
/// programming errors and panic.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of a leaf after [`Graph::backward`]; `None` if the leaf was
    /// not reached or does not require gradients.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- linear algebra -------------------------------------------------

    /// `[.., m, k] x [k, n]` (shared right operand) or batched
    /// `[.., m, k] x [.., k, n]` with identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, kb, "matmul inner dims {:?} x {:?}", sa, sb);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if sb.len() == 2 {
            let rows = av.len() / k.max(1);
            if k == 0 {
                // empty contraction: zeros
            } else {
                kernels::matmul(rows, k, n, av, bv, &mut out);
            }
        } else {
            assert_eq!(
                sa[..sa.len() - 2],
                sb[..sb.len() - 2],
                "batched matmul leading dims"
            );
            let batch: usize = sa[..sa.len() - 2].iter().product();
            for bi in 0..batch {
                kernels::matmul(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(out_shape, out).unwrap(), Op::MatMul { a, b }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Var {
        let r = self.shape(a).len();
        assert!(r >= 2);
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(perm.len(), shape.len(), "permute rank");
        let data = kernels::permute(&shape, perm, self.value(a).data());
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(a);
        self.push(
            Tensor::new(out_shape, data).unwrap(),
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self
            .value(a)
            .clone()
            .reshaped(shape.to_vec())
            .expect("reshape size");
        let rg = self.rg(a);
        self.push(t, Op::Reshape { a }, rg)
    }

    // ---- elementwise ----------------------------------------------------

    /// Number of times `b` repeats across `a` (leading-batch broadcast only).
    fn repeats(&self, a: Var, b: Var) -> usize {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "operand {:?} does not broadcast onto {:?}",
            sb,
            sa
        );
        self.value(a).numel() / self.value(b).numel().max(1)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op) -> Var {
        self.repeats(a, b);
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kk = T::of(k);
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * kk).collect())
            .unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, k }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cc = T::of(c);
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x + cc).collect())
            .unwrap();
        let rg = self.rg(a);
        self.push(t, Op::AddScalar { a }, rg)
    }

    /// Clamp at zero (`max(0, x)`); the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x.max(T::zero())).collect(),
        )
        .unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Relu { a }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| T::of(gelu(x.f64()))).collect(),
        )
        .unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Gelu { a }, rg)
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank");
            for (d, (&x, &y)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || x == y, "concat shapes {:?} vs {:?}", s, first);
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(out_shape, out).unwrap(),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Selects entries along `axis`; indices may repeat.
    pub fn gather(&mut self, a: Var, axis: usize, idx: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        assert!(idx.iter().all(|&i| i < len), "gather index out of range");
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = (o * len + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = idx.len();
        let rg = self.rg(a);
        self.push(
            Tensor::new(out_shape, out).unwrap(),
            Op::Gather {
                a,
                axis,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(a, axis, &idx)
    }

    // ---- reductions -----------------------------------------------------

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut acc = vec![0.0f64; inner];
        for o in 0..outer {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (dst, &v) in acc.iter_mut().zip(&src[base..base + inner]) {
                    *dst += v.f64();
                }
            }
            for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(&acc) {
                *d = T::of(v);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        self.push(Tensor::new(out_shape, out).unwrap(), Op::Sum { a, axis }, rg)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Var {
        let len = self.shape(a)[axis];
        let s = self.sum(a, axis);
        self.scale(s, 1.0 / len.max(1) as f64)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().map(|v| v.f64()).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(T::of(total)), Op::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- normalisation and nonlinearities ------------------------------

    /// Per-row normalisation over the last axis with optional affine
    /// parameters of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm rank");
        for p in [gamma, beta].into_iter().flatten() {
            assert_eq!(self.shape(p), [d], "layer_norm affine shape");
        }
        let src = self.value(x).data();
        let rows = src.len() / d.max(1);
        let mut out = vec![T::zero(); src.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let g = gamma.map(|v| self.value(v).data().to_vec());
        let b = beta.map(|v| self.value(v).data().to_vec());
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| (v.f64() - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                let mut y = (row[j].f64() - mean) * rstd;
                if let Some(g) = &g {
                    y *= g[j].f64();
                }
                if let Some(b) = &b {
                    y += b[j].f64();
                }
                out[r * d + j] = T::of(y);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(x) || gamma.is_some_and(|v| self.rg(v)) || beta.is_some_and(|v| self.rg(v));
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            rg,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("softmax rank");
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (o, e) in dst.iter_mut().zip(exps) {
                *o = T::of(e / z);
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out).unwrap(), Op::Softmax { a }, rg)
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("l2_norm rank");
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(d)
            .map(|r| T::of(r.iter().map(|v| v.f64().powi(2)).sum::<f64>().sqrt()))
            .collect();
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape[..shape.len() - 1].to_vec(), out).unwrap(),
            Op::L2Norm { a },
            rg,
        )
    }

    /// Cosine similarity over the last axis; norms are floored at `1e-8`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape, self.shape(b), "cosine operand shapes");
        let d = *shape.last().expect("cosine rank");
        let eps = 1e-8;
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(d)
            .zip(self.value(b).data().chunks(d))
            .map(|(x, y)| {
                let (dot, nx, ny) = dot_norms(x, y);
                T::of(dot / (nx.max(eps) * ny.max(eps)))
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(shape[..shape.len() - 1].to_vec(), out).unwrap(),
            Op::Cosine { a, b, eps },
            rg,
        )
    }

    /// Mean binary cross-entropy of logits `[n]` against `{0,1}` targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let z = self.value(logits).data();
        assert_eq!(z.len(), targets.len(), "bce target count");
        let n = z.len().max(1) as f64;
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| {
                let z = z.f64();
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(T::of(total / n)),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of logits `[n, c]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Var {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2, "cross_entropy expects [n, c]");
        let c = shape[1];
        assert_eq!(shape[0], classes.len(), "cross_entropy target count");
        let z = self.value(logits).data();
        let total: f64 = z
            .chunks(c)
            .zip(classes)
            .map(|(row, &k)| {
                let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln() + max;
                lse - row[k].f64()
            })
            .sum();
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(T::of(total / classes.len().max(1) as f64)),
            Op::CrossEntropy {
                logits,
                classes: classes.to_vec(),
            },
            rg,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a one-element node. Gradients of leaves are
    /// retrievable with [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Vec<T>>> = vec![None; n];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaf_grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        self.grads = leaf_grads;
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (d, c) in g.iter_mut().zip(contrib) {
                    *d += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    /// Sums a full-size gradient down to a broadcast operand's size.
    fn reduce_repeats(g: &[T], nb: usize) -> Vec<T> {
        let mut acc = vec![0.0f64; nb];
        for (i, &v) in g.iter().enumerate() {
            acc[i % nb] += v.f64();
        }
        acc.into_iter().map(T::of).collect()
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if sb.len() == 2 {
                    let rows = av.len() / k.max(1);
                    if self.rg(a) {
                        let bt = kernels::transpose2(k, n, bv);
                        let mut ga = vec![T::zero(); rows * k];
                        kernels::matmul(rows, n, k, g, &bt, &mut ga);
                        self.accumulate(grads, a, ga);
                    }
                    if self.rg(b) {
                        let at = kernels::transpose2(rows, k, av);
                        let mut gb = vec![T::zero(); k * n];
                        kernels::matmul(k, rows, n, &at, g, &mut gb);
                        self.accumulate(grads, b, gb);
                    }
                } else {
                    let batch = av.len() / (m * k).max(1);
                    let mut ga = vec![T::zero(); av.len()];
                    let mut gb = vec![T::zero(); bv.len()];
                    for bi in 0..batch {
                        let gblk = &g[bi * m * n..(bi + 1) * m * n];
                        if self.rg(a) {
                            let bt = kernels::transpose2(k, n, &bv[bi * k * n..(bi + 1) * k * n]);
                            kernels::matmul(m, n, k, gblk, &bt, &mut ga[bi * m * k..(bi + 1) * m * k]);
                        }
                        if self.rg(b) {
                            let at = kernels::transpose2(m, k, &av[bi * m * k..(bi + 1) * m * k]);
                            kernels::matmul(k, m, n, &at, gblk, &mut gb[bi * k * n..(bi + 1) * k * n]);
                        }
                    }
                    self.accumulate(grads, a, ga);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                if self.rg(*b) {
                    let nb = self.value(*b).numel();
                    self.accumulate(grads, *b, Self::reduce_repeats(g, nb));
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                if self.rg(*b) {
                    let nb = self.value(*b).numel();
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, Self::reduce_repeats(&neg, nb));
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                if self.rg(*a) {
                    let ga = g.iter().enumerate().map(|(i, &v)| v * bv[i % nb]).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let full: Vec<T> = g.iter().zip(av).map(|(&v, &x)| v * x).collect();
                    self.accumulate(grads, *b, Self::reduce_repeats(&full, nb));
                }
            }
            Op::Div { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                if self.rg(*a) {
                    let ga = g.iter().enumerate().map(|(i, &v)| v / bv[i % nb]).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let full: Vec<T> = g
                        .iter()
                        .zip(av)
                        .enumerate()
                        .map(|(i, (&v, &x))| {
                            let y = bv[i % nb];
                            -v * x / (y * y)
                        })
                        .collect();
                    self.accumulate(grads, *b, Self::reduce_repeats(&full, nb));
                }
            }
            Op::Scale { a, k } => {
                let kk = T::of(*k);
                self.accumulate(grads, *a, g.iter().map(|&v| v * kk).collect());
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                self.accumulate(grads, *a, g.to_vec());
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gi = kernels::permute(out.shape(), &inv, g);
                self.accumulate(grads, *a, gi);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::Gather { a, axis, idx } => {
                let shape = self.shape(*a);
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut ga = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for (j, &src) in idx.iter().enumerate() {
                        let gb = (o * idx.len() + j) * inner;
                        let ab = (o * len + src) * inner;
                        for t in 0..inner {
                            ga[ab + t] += g[gb + t];
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum { a, axis } => {
                let shape = self.shape(*a);
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut ga = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        ga.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll { a } => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let d = *self.shape(*x).last().unwrap();
                let gam = gamma.map(|v| self.value(v).data());
                let mut gx = vec![T::zero(); xv.len()];
                let mut gg = vec![0.0f64; d];
                let mut gbeta = vec![0.0f64; d];
                let mut dxhat = vec![0.0f64; d];
                let mut xhat = vec![0.0f64; d];
                for r in 0..mean.len() {
                    let row = &xv[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        xhat[j] = (row[j].f64() - mean[r]) * rstd[r];
                        let gj = grow[j].f64();
                        gg[j] += gj * xhat[j];
                        gbeta[j] += gj;
                        dxhat[j] = gj * gam.map_or(1.0, |gm| gm[j].f64());
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                    for j in 0..d {
                        gx[r * d + j] = T::of(rstd[r] * (dxhat[j] - m1 - xhat[j] * m2));
                    }
                }
                self.accumulate(grads, *x, gx);
                if let Some(gm) = gamma {
                    self.accumulate(grads, *gm, gg.into_iter().map(T::of).collect());
                }
                if let Some(bt) = beta {
                    self.accumulate(grads, *bt, gbeta.into_iter().map(T::of).collect());
                }
            }
            Op::Softmax { a } => {
                let d = *out.shape().last().unwrap();
                let y = out.data();
                let mut ga = vec![T::zero(); y.len()];
                for ((yr, gr), dst) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
                    for j in 0..d {
                        dst[j] = T::of(yr[j].f64() * (gr[j].f64() - dot));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu { a } => {
                let xv = self.value(*a).data();
                let ga = xv
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| T::of(gelu_grad(x.f64()) * gv.f64()))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Relu { a } => {
                let xv = self.value(*a).data();
                let ga = xv
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::L2Norm { a } => {
                let xv = self.value(*a).data();
                let d = *self.shape(*a).last().unwrap();
                let norms = out.data();
                let mut ga = vec![T::zero(); xv.len()];
                for r in 0..norms.len() {
                    let nrm = norms[r].f64();
                    if nrm > 0.0 {
                        let s = g[r].f64() / nrm;
                        for j in 0..d {
                            ga[r * d + j] = T::of(xv[r * d + j].f64() * s);
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Cosine { a, b, eps } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let d = *self.shape(*a).last().unwrap();
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                for r in 0..g.len() {
                    let x = &av[r * d..(r + 1) * d];
                    let y = &bv[r * d..(r + 1) * d];
                    let (dot, nx, ny) = dot_norms(x, y);
                    let (cx, cy) = (nx.max(*eps), ny.max(*eps));
                    let c = dot / (cx * cy);
                    let gr = g[r].f64();
                    for j in 0..d {
                        let (xj, yj) = (x[j].f64(), y[j].f64());
                        let mut dx = yj / (cx * cy);
                        if nx > *eps {
                            dx -= c * xj / (nx * nx);
                        }
                        let mut dy = xj / (cx * cy);
                        if ny > *eps {
                            dy -= c * yj / (ny * ny);
                        }
                        ga[r * d + j] = T::of(gr * dx);
                        gb[r * d + j] = T::of(gr * dy);
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let n = z.len().max(1) as f64;
                let g0 = g[0].f64();
                let ga = z
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| T::of(g0 * (sigmoid(z.f64()) - y) / n))
                    .collect();
                self.accumulate(grads, *logits, ga);
            }
            Op::CrossEntropy { logits, classes } => {
                let z = self.value(*logits).data();
                let c = self.shape(*logits)[1];
                let n = classes.len().max(1) as f64;
                let g0 = g[0].f64();
                let mut ga = vec![T::zero(); z.len()];
                for (r, (row, &k)) in z.chunks(c).zip(classes).enumerate() {
                    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
                    let s: f64 = exps.iter().sum();
                    for j in 0..c {
                        let p = exps[j] / s - if j == k { 1.0 } else { 0.0 };
                        ga[r * c + j] = T::of(g0 * p / n);
                    }
                }
                self.accumulate(grads, *logits, ga);
            }
        }
    }
}

fn dot_norms<T: Real>(x: &[T], y: &[T]) -> (f64, f64, f64) {
    let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a.f64(), b.f64());
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    (dot, nx.sqrt(), ny.sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
