//! Dense tensor arithmetic with tape-based reverse-mode differentiation.
//!
//! The tape is rebuilt per forward pass (define-by-run): the model works on
//! variable-length instances, so the op graph differs between instances.
//! All arrays are 64-bit floats, row-major, and two-dimensional; scalars are
//! `[1, 1]`, vectors `[n, 1]` or `[1, n]`.

pub type NodeId = usize;

/// A dense row-major array of f64 with an optional gradient slot.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![1, 1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Broadcast-add a `[1, n]` row vector to every row of `[m, n]`.
    AddRow { a: NodeId, row: NodeId },
    /// Elementwise `x * mul + add`; only the slope matters on the way back.
    Affine { a: NodeId, mul: f64 },
    Sin { a: NodeId },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    /// Row-wise softmax over unmasked positions; masked outputs are exactly 0.
    MaskedSoftmax { a: NodeId, mask: Vec<bool> },
    /// Mean of squared entries over mask-true positions.
    MaskedSqMean { a: NodeId, mask: Vec<bool>, count: usize },
    /// Scatter-mean of input rows into buckets by `assign`.
    AvgPoolRows { a: NodeId, assign: Vec<usize>, counts: Vec<usize> },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    /// Single row `index` of a as `[1, n]`.
    Row { a: NodeId, index: usize },
    /// `[m, n] -> [m, 1]` row sums.
    RowSum { a: NodeId },
    /// Diagonal of a square matrix as `[m, 1]`.
    TakeDiag { a: NodeId },
    MeanAll { a: NodeId },
    SumAll { a: NodeId },
    L2NormalizeRows { a: NodeId },
    /// `sum_i weights[i] * cross_entropy(softmax(logits[i]), labels[i])`.
    CrossEntropyRows { logits: NodeId, labels: Vec<usize>, weights: Vec<f64> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Records primitive applications in topological order; inputs always precede
/// their consumers. Single-owner: one tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// dA = G * B^T for G[m,n], B[k,n] -> [m,k]
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut s = 0.0;
            for j in 0..n {
                s += g[i * n + j] * b[p * n + j];
            }
            out[i * k + p] = s;
        }
    }
    out
}

/// dB = A^T * G for A[m,k], G[m,n] -> [k,n]
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let grow = &g[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].tensor.shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].tensor.data
    }

    /// Gradient of the last `backward` call for `id`, if one was produced.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].tensor.grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        let mut t = Tensor::from_vec(shape, data);
        t.requires_grad = requires_grad;
        self.nodes.push(Node { tensor: t, op });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].tensor.requires_grad
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(vec![1, 1], vec![v])
    }

    /// Differentiable leaf (a parameter bound onto this tape).
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(shape, data, true, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul dimension mismatch: {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        self.push(vec![m, n], data, rg, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        let src = self.value(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.needs(a);
        self.push(vec![n, m], data, rg, Op::Transpose { a })
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, name: &str) -> (Vec<usize>, bool) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{} shape mismatch: {:?} vs {:?}",
            name,
            self.shape(a),
            self.shape(b)
        );
        (self.shape(a).to_vec(), self.needs(a) || self.needs(b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, rg) = self.binary_same_shape(a, b, "add");
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(shape, data, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, rg) = self.binary_same_shape(a, b, "sub");
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(shape, data, rg, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, rg) = self.binary_same_shape(a, b, "mul");
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(shape, data, rg, Op::Mul { a, b })
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        assert_eq!(
            self.shape(row),
            &[1, n],
            "add_row: row shape {:?} does not match columns of {:?}",
            self.shape(row),
            self.shape(a)
        );
        let mut data = self.value(a).to_vec();
        let r = self.value(row).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        let rg = self.needs(a) || self.needs(row);
        self.push(vec![m, n], data, rg, Op::AddRow { a, row })
    }

    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self.value(a).iter().map(|x| x * mul + add).collect();
        let rg = self.needs(a);
        self.push(shape, data, rg, Op::Affine { a, mul })
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.affine(a, k, 0.0)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let shape = self.shape(a).to_vec();
        let data: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.needs(a);
        self.push(shape, data, rg, op)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sin, Op::Sin { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log { a })
    }

    /// Row-wise softmax over the last dimension restricted to mask-true
    /// positions, computed with max-subtraction. Masked outputs are exactly 0.
    ///
    /// Panics if any row of the mask is entirely false, naming the row.
    pub fn masked_softmax(&mut self, a: NodeId, mask: &[bool]) -> NodeId {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("masked_softmax: scalar input");
        let numel: usize = shape.iter().product();
        assert_eq!(mask.len(), numel, "masked_softmax: mask length {} != numel {}", mask.len(), numel);
        let rows = numel / n;
        let src = self.value(a);
        let mut data = vec![0.0; numel];
        for r in 0..rows {
            let xs = &src[r * n..(r + 1) * n];
            let ms = &mask[r * n..(r + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            let mut any_visible = false;
            for j in 0..n {
                if ms[j] {
                    any_visible = true;
                    if xs[j] > mx {
                        mx = xs[j];
                    }
                }
            }
            if !any_visible {
                panic!("masked_softmax: fully masked row {}", r);
            }
            if mx == f64::NEG_INFINITY {
                // Visible scores were all NaN (or -inf): emit NaN so the
                // run-level divergence check reports this instead of a crash.
                for j in 0..n {
                    if ms[j] {
                        data[r * n + j] = f64::NAN;
                    }
                }
                continue;
            }
            let mut sum = 0.0;
            for j in 0..n {
                if ms[j] {
                    let e = (xs[j] - mx).exp();
                    data[r * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                if ms[j] {
                    data[r * n + j] /= sum;
                }
            }
        }
        let rg = self.needs(a);
        self.push(shape, data, rg, Op::MaskedSoftmax { a, mask: mask.to_vec() })
    }

    /// Scalar mean of squared entries over mask-true positions.
    ///
    /// The caller must guarantee at least one mask-true cell.
    pub fn masked_sq_mean(&mut self, a: NodeId, mask: &[bool]) -> NodeId {
        assert_eq!(mask.len(), self.value(a).len(), "masked_sq_mean: mask length mismatch");
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "masked_sq_mean: empty mask");
        let s: f64 = self
            .value(a)
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(x, _)| x * x)
            .sum();
        let rg = self.needs(a);
        self.push(vec![1, 1], vec![s / count as f64], rg, Op::MaskedSqMean { a, mask: mask.to_vec(), count })
    }

    /// Mean-pool input rows into `out_rows` buckets: `assign[r]` names the
    /// output row receiving input row `r`. Buckets with no members stay 0.
    pub fn avg_pool_rows(&mut self, a: NodeId, assign: &[usize], out_rows: usize) -> NodeId {
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        assert_eq!(assign.len(), m, "avg_pool_rows: assignment length {} != rows {}", assign.len(), m);
        let mut counts = vec![0usize; out_rows];
        for &t in assign {
            assert!(t < out_rows, "avg_pool_rows: assignment {} out of range {}", t, out_rows);
            counts[t] += 1;
        }
        let src = self.value(a);
        let mut data = vec![0.0; out_rows * n];
        for r in 0..m {
            let t = assign[r];
            for j in 0..n {
                data[t * n + j] += src[r * n + j];
            }
        }
        for t in 0..out_rows {
            if counts[t] > 0 {
                let inv = 1.0 / counts[t] as f64;
                for j in 0..n {
                    data[t * n + j] *= inv;
                }
            }
        }
        let rg = self.needs(a);
        self.push(
            vec![out_rows, n],
            data,
            rg,
            Op::AvgPoolRows { a, assign: assign.to_vec(), counts },
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let m = self.shape(parts[0])[0];
        let mut n = 0;
        for &p in parts {
            assert_eq!(self.shape(p)[0], m, "concat_cols: row mismatch {:?} vs {} rows", self.shape(p), m);
            n += self.shape(p)[1];
        }
        let mut data = vec![0.0; m * n];
        let mut col = 0;
        for &p in parts {
            let pn = self.shape(p)[1];
            let src = self.value(p);
            for i in 0..m {
                data[i * n + col..i * n + col + pn].copy_from_slice(&src[i * pn..(i + 1) * pn]);
            }
            col += pn;
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(vec![m, n], data, rg, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let n = self.shape(parts[0])[1];
        let mut m = 0;
        for &p in parts {
            assert_eq!(self.shape(p)[1], n, "concat_rows: column mismatch {:?} vs {} cols", self.shape(p), n);
            m += self.shape(p)[0];
        }
        let mut data = Vec::with_capacity(m * n);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(vec![m, n], data, rg, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn row(&mut self, a: NodeId, index: usize) -> NodeId {
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        assert!(index < m, "row: index {} out of range {}", index, m);
        let data = self.value(a)[index * n..(index + 1) * n].to_vec();
        let rg = self.needs(a);
        self.push(vec![1, n], data, rg, Op::Row { a, index })
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        let src = self.value(a);
        let data: Vec<f64> = (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.needs(a);
        self.push(vec![m, 1], data, rg, Op::RowSum { a })
    }

    pub fn take_diag(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        assert_eq!(m, n, "take_diag: matrix not square: {:?}", self.shape(a));
        let src = self.value(a);
        let data: Vec<f64> = (0..m).map(|i| src[i * n + i]).collect();
        let rg = self.needs(a);
        self.push(vec![m, 1], data, rg, Op::TakeDiag { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let numel = self.value(a).len() as f64;
        let s: f64 = self.value(a).iter().sum();
        let rg = self.needs(a);
        self.push(vec![1, 1], vec![s / numel], rg, Op::MeanAll { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.needs(a);
        self.push(vec![1, 1], vec![s], rg, Op::SumAll { a })
    }

    /// Scale every row to unit L2 norm (rows below 1e-12 norm are scaled by
    /// 1/1e-12 instead, keeping the map smooth near zero).
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        let src = self.value(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let norm = src[i * n..(i + 1) * n].iter().map(|x| x * x).sum::<f64>().sqrt();
            let inv = 1.0 / norm.max(1e-12);
            for j in 0..n {
                data[i * n + j] = src[i * n + j] * inv;
            }
        }
        let rg = self.needs(a);
        self.push(vec![m, n], data, rg, Op::L2NormalizeRows { a })
    }

    /// Weighted softmax cross-entropy summed over rows:
    /// `sum_i weights[i] * (logsumexp(logits_i) - logits_i[labels_i])`.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, labels: &[usize], weights: &[f64]) -> NodeId {
        let (m, c) = (self.shape(logits)[0], self.shape(logits)[1]);
        assert_eq!(labels.len(), m, "cross_entropy_rows: {} labels for {} rows", labels.len(), m);
        assert_eq!(weights.len(), m, "cross_entropy_rows: {} weights for {} rows", weights.len(), m);
        let src = self.value(logits);
        let mut total = 0.0;
        for i in 0..m {
            assert!(labels[i] < c, "cross_entropy_rows: label {} out of range {}", labels[i], c);
            let xs = &src[i * c..(i + 1) * c];
            let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            total += weights[i] * (lse - xs[labels[i]]);
        }
        let rg = self.needs(logits);
        self.push(
            vec![1, 1],
            vec![total],
            rg,
            Op::CrossEntropyRows { logits, labels: labels.to_vec(), weights: weights.to_vec() },
        )
    }

    /// Reverse pass from a scalar loss node. Gradients for every
    /// `requires_grad` node become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.shape(loss)
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss] = Some(vec![1.0]);

        for id in (0..n).rev() {
            if grads[id].is_none() || !self.nodes[id].tensor.requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (id, g) in grads.into_iter().enumerate() {
            if self.nodes[id].tensor.requires_grad {
                self.nodes[id].tensor.grad = g;
            }
        }
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, numel: usize, add: impl Fn(&mut [f64])) {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; numel]);
        add(slot);
    }

    fn propagate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let da = matmul_nt(g, self.value(b), m, n, k);
                    Self::accumulate(grads, a, m * k, |s| {
                        for (x, d) in s.iter_mut().zip(&da) {
                            *x += d;
                        }
                    });
                }
                if self.needs(b) {
                    let db = matmul_tn(self.value(a), g, m, k, n);
                    Self::accumulate(grads, b, k * n, |s| {
                        for (x, d) in s.iter_mut().zip(&db) {
                            *x += d;
                        }
                    });
                }
            }
            Op::Transpose { a } => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                if self.needs(a) {
                    Self::accumulate(grads, a, m * n, |s| {
                        for i in 0..m {
                            for j in 0..n {
                                s[i * n + j] += g[j * m + i];
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for &x in &[a, b] {
                    if self.needs(x) {
                        Self::accumulate(grads, x, g.len(), |s| {
                            for (v, d) in s.iter_mut().zip(g) {
                                *v += d;
                            }
                        });
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g.len(), |s| {
                        for (v, d) in s.iter_mut().zip(g) {
                            *v += d;
                        }
                    });
                }
                if self.needs(b) {
                    Self::accumulate(grads, b, g.len(), |s| {
                        for (v, d) in s.iter_mut().zip(g) {
                            *v -= d;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let bv = self.value(b);
                    Self::accumulate(grads, a, g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * bv[i];
                        }
                    });
                }
                if self.needs(b) {
                    let av = self.value(a);
                    Self::accumulate(grads, b, g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * av[i];
                        }
                    });
                }
            }
            Op::AddRow { a, row } => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                if self.needs(a) {
                    Self::accumulate(grads, a, m * n, |s| {
                        for (v, d) in s.iter_mut().zip(g) {
                            *v += d;
                        }
                    });
                }
                if self.needs(row) {
                    Self::accumulate(grads, row, n, |s| {
                        for i in 0..m {
                            for j in 0..n {
                                s[j] += g[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::Affine { a, mul } => {
                if self.needs(a) {
                    Self::accumulate(grads, a, g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * mul;
                        }
                    });
                }
            }
            Op::Sin { a } => {
                if self.needs(a) {
                    let av = self.value(a);
                    Self::accumulate(grads, a, g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * av[i].cos();
                        }
                    });
                }
            }
            Op::Tanh { a } => {
                if self.needs(a) {
                    let yv = self.value(id);
                    Self::accumulate(grads, a, g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * (1.0 - yv[i] * yv[i]);
                        }
                    });
                }
            }
            Op::Sigmoid { a } => {
                if self.needs(a) {
                    let yv = self.value(id);
                    Self::accumulate(grads, a, g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * yv[i] * (1.0 - yv[i]);
                        }
                    });
                }
            }
            Op::Exp { a } => {
                if self.needs(a) {
                    let yv = self.value(id);
                    Self::accumulate(grads, a, g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * yv[i];
                        }
                    });
                }
            }
            Op::Log { a } => {
                if self.needs(a) {
                    let av = self.value(a);
                    Self::accumulate(grads, a, g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] / av[i];
                        }
                    });
                }
            }
            Op::MaskedSoftmax { a, mask } => {
                if self.needs(a) {
                    let shape = self.shape(a);
                    let n = *shape.last().unwrap();
                    let rows = g.len() / n;
                    let yv = self.value(id);
                    Self::accumulate(grads, a, g.len(), |s| {
                        for r in 0..rows {
                            let mut dot = 0.0;
                            for j in 0..n {
                                if mask[r * n + j] {
                                    dot += g[r * n + j] * yv[r * n + j];
                                }
                            }
                            for j in 0..n {
                                if mask[r * n + j] {
                                    s[r * n + j] += yv[r * n + j] * (g[r * n + j] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::MaskedSqMean { a, mask, count } => {
                if self.needs(a) {
                    let av = self.value(a);
                    let scale = 2.0 * g[0] / count as f64;
                    Self::accumulate(grads, a, av.len(), |s| {
                        for i in 0..av.len() {
                            if mask[i] {
                                s[i] += scale * av[i];
                            }
                        }
                    });
                }
            }
            Op::AvgPoolRows { a, assign, counts, .. } => {
                if self.needs(a) {
                    let n = self.shape(a)[1];
                    let m = self.shape(a)[0];
                    Self::accumulate(grads, a, m * n, |s| {
                        for r in 0..m {
                            let t = assign[r];
                            let inv = 1.0 / counts[t] as f64;
                            for j in 0..n {
                                s[r * n + j] += g[t * n + j] * inv;
                            }
                        }
                    });
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.shape(id)[0];
                let n = self.shape(id)[1];
                let mut col = 0;
                for &p in &parts {
                    let pn = self.shape(p)[1];
                    if self.needs(p) {
                        let c0 = col;
                        Self::accumulate(grads, p, m * pn, |s| {
                            for i in 0..m {
                                for j in 0..pn {
                                    s[i * pn + j] += g[i * n + c0 + j];
                                }
                            }
                        });
                    }
                    col += pn;
                }
            }
            Op::ConcatRows { parts } => {
                let n = self.shape(id)[1];
                let mut off = 0;
                for &p in &parts {
                    let pm = self.shape(p)[0];
                    if self.needs(p) {
                        let o = off;
                        Self::accumulate(grads, p, pm * n, |s| {
                            s.iter_mut().zip(&g[o..o + pm * n]).for_each(|(v, d)| *v += d);
                        });
                    }
                    off += pm * n;
                }
            }
            Op::Row { a, index } => {
                if self.needs(a) {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    Self::accumulate(grads, a, m * n, |s| {
                        for j in 0..n {
                            s[index * n + j] += g[j];
                        }
                    });
                }
            }
            Op::RowSum { a } => {
                if self.needs(a) {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    Self::accumulate(grads, a, m * n, |s| {
                        for i in 0..m {
                            for j in 0..n {
                                s[i * n + j] += g[i];
                            }
                        }
                    });
                }
            }
            Op::TakeDiag { a } => {
                if self.needs(a) {
                    let m = self.shape(a)[0];
                    Self::accumulate(grads, a, m * m, |s| {
                        for i in 0..m {
                            s[i * m + i] += g[i];
                        }
                    });
                }
            }
            Op::MeanAll { a } => {
                if self.needs(a) {
                    let numel = self.value(a).len();
                    let d = g[0] / numel as f64;
                    Self::accumulate(grads, a, numel, |s| {
                        for v in s.iter_mut() {
                            *v += d;
                        }
                    });
                }
            }
            Op::SumAll { a } => {
                if self.needs(a) {
                    let numel = self.value(a).len();
                    Self::accumulate(grads, a, numel, |s| {
                        for v in s.iter_mut() {
                            *v += g[0];
                        }
                    });
                }
            }
            Op::L2NormalizeRows { a } => {
                if self.needs(a) {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let av = self.value(a);
                    let yv = self.value(id);
                    Self::accumulate(grads, a, m * n, |s| {
                        for i in 0..m {
                            let norm = av[i * n..(i + 1) * n]
                                .iter()
                                .map(|x| x * x)
                                .sum::<f64>()
                                .sqrt();
                            let inv = 1.0 / norm.max(1e-12);
                            if norm >= 1e-12 {
                                let mut dot = 0.0;
                                for j in 0..n {
                                    dot += g[i * n + j] * yv[i * n + j];
                                }
                                for j in 0..n {
                                    s[i * n + j] += (g[i * n + j] - dot * yv[i * n + j]) * inv;
                                }
                            } else {
                                for j in 0..n {
                                    s[i * n + j] += g[i * n + j] * inv;
                                }
                            }
                        }
                    });
                }
            }
            Op::CrossEntropyRows { logits, labels, weights } => {
                if self.needs(logits) {
                    let (m, c) = (self.shape(logits)[0], self.shape(logits)[1]);
                    let xs = self.value(logits);
                    Self::accumulate(grads, logits, m * c, |s| {
                        for i in 0..m {
                            let row = &xs[i * c..(i + 1) * c];
                            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let denom: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                            for j in 0..c {
                                let p = (row[j] - mx).exp() / denom;
                                let ind = if j == labels[i] { 1.0 } else { 0.0 };
                                s[i * c + j] += g[0] * weights[i] * (p - ind);
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Named parameter arrays with stable registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> usize {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {:?}",
            name
        );
        let mut t = Tensor::from_vec(shape, data);
        t.requires_grad = true;
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn data(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    pub fn data_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i].data
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Bind every parameter onto `tape` as a differentiable leaf; the
    /// returned ids are aligned with registration order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.shape.clone(), t.data.clone()))
            .collect()
    }

    /// Collect gradients for bound params after a backward pass; parameters
    /// the loss never touched yield zero gradients.
    pub fn collect_grads(&self, tape: &Tape, bound: &[NodeId]) -> Vec<Vec<f64>> {
        bound
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; self.tensors[i].numel()])
            })
            .collect()
    }
}

/// Central finite-difference gradient check.
///
/// `build` must construct the loss deterministically from the current
/// parameter values, returning the bound parameter node ids (aligned with
/// store order) and the loss node. Returns the maximum relative error, or an
/// error string naming the first offending coordinate.
pub fn gradcheck<F>(
    params: &mut ParamStore,
    build: F,
    step: f64,
    tol: f64,
) -> std::result::Result<f64, String>
where
    F: Fn(&ParamStore, &mut Tape) -> (Vec<NodeId>, NodeId),
{
    let mut tape = Tape::new();
    let (bound, loss) = build(params, &mut tape);
    assert_eq!(bound.len(), params.len(), "gradcheck: bound ids do not cover the store");
    tape.backward(loss);
    let analytic = params.collect_grads(&tape, &bound);

    let mut max_rel = 0.0f64;
    for p in 0..params.len() {
        for j in 0..params.tensor(p).numel() {
            let orig = params.data(p)[j];
            params.data_mut(p)[j] = orig + step;
            let mut tp = Tape::new();
            let (_, lp) = build(params, &mut tp);
            let fp = tp.value(lp)[0];
            params.data_mut(p)[j] = orig - step;
            let mut tm = Tape::new();
            let (_, lm) = build(params, &mut tm);
            let fm = tm.value(lm)[0];
            params.data_mut(p)[j] = orig;

            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[p][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
            if rel > tol {
                return Err(format!(
                    "gradcheck failed for {}[{}]: analytic {:.6e}, numeric {:.6e}, rel {:.3e}",
                    params.name(p),
                    j,
                    a,
                    numeric,
                    rel
                ));
            }
        }
    }
    Ok(max_rel)
}
