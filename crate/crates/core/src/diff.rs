//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation; [`Tape::backward`] walks the record in
//! reverse creation order (which is a reverse topological order, since an op
//! can only reference earlier nodes) and accumulates gradients into each
//! node's `grad` buffer. Gradients accumulate across repeated `backward`
//! calls until [`Tape::zero_grads`] is called, so multi-term losses can be
//! assembled incrementally.
//!
//! The op set is exactly what the models in this crate need: dense matmul,
//! elementwise maps, row/column softmax, seeded dropout, row gather/scatter
//! over edge lists, segment softmax over neighborhoods, cosine-style row
//! normalization, cross-entropy, and a row-wise KL whose reference argument
//! is treated as a constant.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CgrlError, Result};
use crate::scalar::Scalar;

pub type Mat<T> = Array2<T>;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Precomputed weighted edge list: `out[dst[e]] += coeff[e] * x[src[e]]`.
#[derive(Debug, Clone)]
pub struct EdgeAgg<T> {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub coeff: Vec<T>,
    pub out_rows: usize,
}

/// Segment ids for per-neighborhood softmax: one id per score row.
#[derive(Debug, Clone)]
pub struct Segments {
    pub seg_of: Vec<usize>,
    pub num_segments: usize,
}

enum Rule<T: Scalar> {
    Leaf,
    Constant,
    Add(Var, Var),
    AddScalar(Var),
    ScalarMul(Var, T),
    Hadamard(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Exp(Var),
    Log(Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    RowSoftmax(Var),
    ColSoftmax(Var),
    Dropout(Var, Mat<T>),
    GatherRows(Var, Rc<Vec<usize>>),
    NeighborScatterAdd(Var, Rc<EdgeAgg<T>>),
    ScatterWeightedRows {
        values: Var,
        weights: Var,
        dst: Rc<Vec<usize>>,
    },
    SegmentSoftmax(Var, Rc<Segments>),
    L2NormalizeRows(Var, Vec<T>),
    RowSum(Var),
    MeanAll(Var),
    CrossEntropy {
        logits: Var,
        labels: Rc<Vec<usize>>,
        ids: Rc<Vec<usize>>,
    },
    KlRows {
        q: Var,
        p: Var,
    },
}

struct Node<T: Scalar> {
    value: Mat<T>,
    grad: Mat<T>,
    rule: Rule<T>,
}

/// Reverse-mode computation record. Single-threaded by design; independent
/// runs own independent tapes.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, rule: Rule<T>) -> Var {
        let grad = Mat::zeros(value.raw_dim());
        self.nodes.push(Node { value, grad, rule });
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracked input (parameter).
    pub fn leaf(&mut self, value: Mat<T>) -> Var {
        self.push(value, Rule::Leaf)
    }

    /// Input that never receives a gradient of its own.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Rule::Constant)
    }

    /// 1x1 constant.
    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].grad
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        let m = self.value(v);
        if m.dim() != (1, 1) {
            return Err(CgrlError::NonScalarRoot {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        Ok(m[[0, 0]])
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(T::zero());
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(CgrlError::Shape {
                op,
                expect: format!("{:?}", da),
                got: format!("{:?}", db),
            });
        }
        Ok(())
    }

    // -- elementwise and linear ops -----------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(v, Rule::Add(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Rule::AddScalar(a))
    }

    pub fn scalar_mul(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Rule::ScalarMul(a, c))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(v, Rule::Hadamard(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ca != rb {
            return Err(CgrlError::Shape {
                op: "matmul",
                expect: format!("lhs cols = rhs rows, lhs {ra}x{ca}"),
                got: format!("rhs {rb}x{cb}"),
            });
        }
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        Ok(self.push(v, Rule::MatMul(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(T::zero()));
        self.push(v, Rule::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > T::zero() { x } else { slope * x });
        self.push(v, Rule::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.exp());
        self.push(v, Rule::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.iter().any(|&x| x <= T::zero()) {
            return Err(CgrlError::invalid("log", "non-positive input"));
        }
        let v = self.nodes[a.0].value.mapv(|x| x.ln());
        Ok(self.push(v, Rule::Log(a)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(CgrlError::Shape {
                op: "concat_cols",
                expect: format!("{ra} rows"),
                got: format!("{rb} rows"),
            });
        }
        let mut v = Mat::zeros((ra, ca + cb));
        v.slice_mut(s![.., ..ca]).assign(&self.nodes[a.0].value);
        v.slice_mut(s![.., ca..]).assign(&self.nodes[b.0].value);
        Ok(self.push(v, Rule::ConcatCols(a, b)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (ra, _) = self.dims(a);
        if start > end || end > ra {
            return Err(CgrlError::invalid(
                "slice_rows",
                format!("range {start}..{end} out of {ra} rows"),
            ));
        }
        let v = self.nodes[a.0].value.slice(s![start..end, ..]).to_owned();
        Ok(self.push(v, Rule::SliceRows(a, start)))
    }

    // -- softmax family ------------------------------------------------------

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(T::neg_infinity(), |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(v, Rule::RowSoftmax(a))
    }

    pub fn col_softmax(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for mut col in v.columns_mut() {
            let m = col.fold(T::neg_infinity(), |acc, &x| acc.max(x));
            col.mapv_inplace(|x| (x - m).exp());
            let s = col.sum();
            col.mapv_inplace(|x| x / s);
        }
        self.push(v, Rule::ColSoftmax(a))
    }

    /// Softmax within each segment of a column of scores. Empty segments are
    /// allowed and contribute nothing.
    pub fn segment_softmax(&mut self, scores: Var, seg: Rc<Segments>) -> Result<Var> {
        let (rows, cols) = self.dims(scores);
        if cols != 1 || seg.seg_of.len() != rows {
            return Err(CgrlError::Shape {
                op: "segment_softmax",
                expect: format!("{}x1 scores", seg.seg_of.len()),
                got: format!("{rows}x{cols}"),
            });
        }
        let x = &self.nodes[scores.0].value;
        let mut maxes = vec![T::neg_infinity(); seg.num_segments];
        for (e, &g) in seg.seg_of.iter().enumerate() {
            maxes[g] = maxes[g].max(x[[e, 0]]);
        }
        let mut sums = vec![T::zero(); seg.num_segments];
        let mut v = Mat::zeros((rows, 1));
        for (e, &g) in seg.seg_of.iter().enumerate() {
            let ex = (x[[e, 0]] - maxes[g]).exp();
            v[[e, 0]] = ex;
            sums[g] += ex;
        }
        for (e, &g) in seg.seg_of.iter().enumerate() {
            v[[e, 0]] = v[[e, 0]] / sums[g];
        }
        Ok(self.push(v, Rule::SegmentSoftmax(scores, seg)))
    }

    // -- stochastic / structural ops ------------------------------------------

    /// Inverted dropout: kept entries are scaled by 1/(1-rate), so evaluation
    /// mode needs no counterpart op. `rate` 0 is the identity.
    pub fn dropout(&mut self, a: Var, rate: T, seed: u64) -> Result<Var> {
        if rate < T::zero() || rate >= T::one() {
            return Err(CgrlError::invalid("dropout", format!("rate {rate} not in [0, 1)")));
        }
        let dim = self.nodes[a.0].value.raw_dim();
        let mask = if rate == T::zero() {
            Mat::from_elem(dim, T::one())
        } else {
            let keep = T::one() - rate;
            let keep_f = keep.as_f64();
            let inv = T::one() / keep;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<T> = (0..dim[0] * dim[1])
                .map(|_| {
                    if rng.random::<f64>() < keep_f {
                        inv
                    } else {
                        T::zero()
                    }
                })
                .collect();
            Mat::from_shape_vec(dim, data).expect("mask shape")
        };
        let v = &self.nodes[a.0].value * &mask;
        Ok(self.push(v, Rule::Dropout(a, mask)))
    }

    pub fn gather_rows(&mut self, a: Var, ids: Rc<Vec<usize>>) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(CgrlError::NodeOutOfRange { id: bad, n: rows });
        }
        let mut v = Mat::zeros((ids.len(), cols));
        for (r, &i) in ids.iter().enumerate() {
            v.row_mut(r).assign(&self.nodes[a.0].value.row(i));
        }
        Ok(self.push(v, Rule::GatherRows(a, ids)))
    }

    /// Sparse weighted aggregation with constant coefficients; equals dense
    /// `A_w · x` for the weighted adjacency the edge list encodes.
    pub fn neighbor_scatter_add(&mut self, a: Var, agg: Rc<EdgeAgg<T>>) -> Result<Var> {
        let (rows, cols) = self.dims(a);
        if agg.src.len() != agg.dst.len() || agg.src.len() != agg.coeff.len() {
            return Err(CgrlError::invalid("neighbor_scatter_add", "ragged edge list"));
        }
        if let Some(&bad) = agg.src.iter().find(|&&i| i >= rows) {
            return Err(CgrlError::NodeOutOfRange { id: bad, n: rows });
        }
        if let Some(&bad) = agg.dst.iter().find(|&&i| i >= agg.out_rows) {
            return Err(CgrlError::NodeOutOfRange {
                id: bad,
                n: agg.out_rows,
            });
        }
        let x = &self.nodes[a.0].value;
        let mut v = Mat::zeros((agg.out_rows, cols));
        for e in 0..agg.src.len() {
            let mut out_row = v.row_mut(agg.dst[e]);
            out_row.scaled_add(agg.coeff[e], &x.row(agg.src[e]));
        }
        Ok(self.push(v, Rule::NeighborScatterAdd(a, agg)))
    }

    /// `out[dst[e]] += weights[e] * values[e]`, differentiable in both
    /// `values` and `weights` (used for attention aggregation).
    pub fn scatter_weighted_rows(
        &mut self,
        values: Var,
        weights: Var,
        dst: Rc<Vec<usize>>,
        out_rows: usize,
    ) -> Result<Var> {
        let (re, cols) = self.dims(values);
        let (rw, cw) = self.dims(weights);
        if rw != re || cw != 1 {
            return Err(CgrlError::Shape {
                op: "scatter_weighted_rows",
                expect: format!("{re}x1 weights"),
                got: format!("{rw}x{cw}"),
            });
        }
        if dst.len() != re {
            return Err(CgrlError::invalid("scatter_weighted_rows", "dst length mismatch"));
        }
        if let Some(&bad) = dst.iter().find(|&&i| i >= out_rows) {
            return Err(CgrlError::NodeOutOfRange { id: bad, n: out_rows });
        }
        let vals = &self.nodes[values.0].value;
        let w = &self.nodes[weights.0].value;
        let mut v = Mat::zeros((out_rows, cols));
        for e in 0..re {
            let mut out_row = v.row_mut(dst[e]);
            out_row.scaled_add(w[[e, 0]], &vals.row(e));
        }
        Ok(self.push(v, Rule::ScatterWeightedRows { values, weights, dst }))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let mut norms = Vec::with_capacity(x.nrows());
        for row in x.rows() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n <= T::zero() {
                return Err(CgrlError::invalid("l2_normalize_rows", "zero-norm row"));
            }
            norms.push(n);
        }
        let mut v = x.clone();
        for (mut row, &n) in v.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|e| e / n);
        }
        Ok(self.push(v, Rule::L2NormalizeRows(a, norms)))
    }

    // -- reductions and losses -------------------------------------------------

    pub fn row_sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum_axis(Axis(1));
        let rows = s.len();
        let v = s.into_shape_with_order((rows, 1)).expect("column shape");
        self.push(v, Rule::RowSum(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let count = T::cast((x.nrows() * x.ncols()) as f64);
        let v = Mat::from_elem((1, 1), x.sum() / count);
        self.push(v, Rule::MeanAll(a))
    }

    /// Mean cross-entropy of `logits` rows selected by `ids` against integer
    /// labels, computed through a stable log-sum-exp.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: Rc<Vec<usize>>,
        ids: Rc<Vec<usize>>,
    ) -> Result<Var> {
        let (rows, classes) = self.dims(logits);
        if labels.len() != rows {
            return Err(CgrlError::Shape {
                op: "cross_entropy",
                expect: format!("{rows} labels"),
                got: format!("{}", labels.len()),
            });
        }
        if ids.is_empty() {
            return Err(CgrlError::invalid("cross_entropy", "empty id set"));
        }
        for &i in ids.iter() {
            if i >= rows {
                return Err(CgrlError::NodeOutOfRange { id: i, n: rows });
            }
            if labels[i] >= classes {
                return Err(CgrlError::LabelOutOfRange {
                    node: i,
                    label: labels[i],
                    classes,
                });
            }
        }
        let x = &self.nodes[logits.0].value;
        let mut total = T::zero();
        for &i in ids.iter() {
            let row = x.row(i);
            let m = row.fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - row[labels[i]];
        }
        let v = Mat::from_elem((1, 1), total / T::cast(ids.len() as f64));
        Ok(self.push(v, Rule::CrossEntropy { logits, labels, ids }))
    }

    /// Mean over rows of KL(q_row || p_row). Both inputs must be
    /// row-stochastic; the reference `p` is treated as a constant and never
    /// receives gradient.
    pub fn kl_rows(&mut self, q: Var, p: Var) -> Result<Var> {
        self.same_shape("kl_rows", q, p)?;
        for (what, var) in [("kl q", q), ("kl p", p)] {
            let m = &self.nodes[var.0].value;
            for (r, row) in m.rows().into_iter().enumerate() {
                let sum = row.sum();
                if (sum - T::one()).abs() > T::cast(1e-6) || row.iter().any(|&x| x < T::zero()) {
                    return Err(CgrlError::NotStochastic {
                        what: if what == "kl q" { "kl_rows q" } else { "kl_rows p" },
                        row: r,
                        sum: sum.as_f64(),
                    });
                }
            }
        }
        let qm = &self.nodes[q.0].value;
        let pm = &self.nodes[p.0].value;
        let mut total = T::zero();
        for (qrow, prow) in qm.rows().into_iter().zip(pm.rows()) {
            for (&qi, &pi) in qrow.iter().zip(prow.iter()) {
                if qi > T::zero() {
                    if pi <= T::zero() {
                        return Err(CgrlError::NonFinite("kl_rows (q > 0 where p = 0)"));
                    }
                    total += qi * (qi / pi).ln();
                }
            }
        }
        let v = Mat::from_elem((1, 1), total / T::cast(qm.nrows() as f64));
        Ok(self.push(v, Rule::KlRows { q, p }))
    }

    // -- backward ----------------------------------------------------------------

    /// Accumulate d(root)/d(node) into every node's grad buffer. Repeated
    /// calls without `zero_grads` keep accumulating.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let (r, c) = self.dims(root);
        if (r, c) != (1, 1) {
            return Err(CgrlError::NonScalarRoot { rows: r, cols: c });
        }
        // Propagate through a scratch buffer and fold into each node's grad at
        // the end, so prior accumulated grads survive repeated calls.
        let mut pass: Vec<Mat<T>> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.value.raw_dim()))
            .collect();
        pass[root.0][[0, 0]] = T::one();

        for i in (0..=root.0).rev() {
            let g = std::mem::replace(&mut pass[i], Mat::zeros((0, 0)));
            if g.iter().all(|&x| x == T::zero()) {
                continue;
            }
            self.apply_rule(i, &g, &mut pass);
            self.nodes[i].grad += &g;
        }
        Ok(())
    }

    fn apply_rule(&self, i: usize, g: &Mat<T>, pass: &mut [Mat<T>]) {
        let node = &self.nodes[i];
        match &node.rule {
            Rule::Leaf | Rule::Constant => {}
            Rule::Add(a, b) => {
                pass[a.0] += g;
                pass[b.0] += g;
            }
            Rule::AddScalar(a) => {
                pass[a.0] += g;
            }
            Rule::ScalarMul(a, c) => {
                pass[a.0].scaled_add(*c, g);
            }
            Rule::Hadamard(a, b) => {
                let ca = g * &self.nodes[b.0].value;
                let cb = g * &self.nodes[a.0].value;
                pass[a.0] += &ca;
                pass[b.0] += &cb;
            }
            Rule::MatMul(a, b) => {
                let ca = g.dot(&self.nodes[b.0].value.t());
                let cb = self.nodes[a.0].value.t().dot(g);
                pass[a.0] += &ca;
                pass[b.0] += &cb;
            }
            Rule::Relu(a) => {
                let mut c = g.clone();
                c.zip_mut_with(&node.value, |gi, &y| {
                    if y <= T::zero() {
                        *gi = T::zero();
                    }
                });
                pass[a.0] += &c;
            }
            Rule::LeakyRelu(a, slope) => {
                let mut c = g.clone();
                c.zip_mut_with(&node.value, |gi, &y| {
                    if y <= T::zero() {
                        *gi = *gi * *slope;
                    }
                });
                pass[a.0] += &c;
            }
            Rule::Exp(a) => {
                let c = g * &node.value;
                pass[a.0] += &c;
            }
            Rule::Log(a) => {
                let c = g / &self.nodes[a.0].value;
                pass[a.0] += &c;
            }
            Rule::ConcatCols(a, b) => {
                let ca = self.nodes[a.0].value.ncols();
                let ga = g.slice(s![.., ..ca]).to_owned();
                let gb = g.slice(s![.., ca..]).to_owned();
                pass[a.0] += &ga;
                pass[b.0] += &gb;
            }
            Rule::SliceRows(a, start) => {
                let rows = node.value.nrows();
                let mut pa = pass[a.0].slice_mut(s![*start..start + rows, ..]);
                pa += g;
            }
            Rule::RowSoftmax(a) => {
                let y = &node.value;
                let mut c = Mat::zeros(y.raw_dim());
                for ((yrow, grow), mut crow) in
                    y.rows().into_iter().zip(g.rows()).zip(c.rows_mut())
                {
                    let dot = yrow.iter().zip(grow.iter()).map(|(&yi, &gi)| yi * gi).sum::<T>();
                    for ((ci, &yi), &gi) in crow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                        *ci = yi * (gi - dot);
                    }
                }
                pass[a.0] += &c;
            }
            Rule::ColSoftmax(a) => {
                let y = &node.value;
                let mut c = Mat::zeros(y.raw_dim());
                for ((ycol, gcol), mut ccol) in y
                    .columns()
                    .into_iter()
                    .zip(g.columns())
                    .zip(c.columns_mut())
                {
                    let dot = ycol.iter().zip(gcol.iter()).map(|(&yi, &gi)| yi * gi).sum::<T>();
                    for ((ci, &yi), &gi) in ccol.iter_mut().zip(ycol.iter()).zip(gcol.iter()) {
                        *ci = yi * (gi - dot);
                    }
                }
                pass[a.0] += &c;
            }
            Rule::Dropout(a, mask) => {
                let c = g * mask;
                pass[a.0] += &c;
            }
            Rule::GatherRows(a, ids) => {
                let pa = &mut pass[a.0];
                for (r, &i) in ids.iter().enumerate() {
                    let mut row = pa.row_mut(i);
                    row += &g.row(r);
                }
            }
            Rule::NeighborScatterAdd(a, agg) => {
                let pa = &mut pass[a.0];
                for e in 0..agg.src.len() {
                    let mut row = pa.row_mut(agg.src[e]);
                    row.scaled_add(agg.coeff[e], &g.row(agg.dst[e]));
                }
            }
            Rule::ScatterWeightedRows { values, weights, dst } => {
                let vals = &self.nodes[values.0].value;
                let w = &self.nodes[weights.0].value;
                let mut cv = Mat::zeros(vals.raw_dim());
                let mut cw = Mat::zeros(w.raw_dim());
                for e in 0..dst.len() {
                    let gout = g.row(dst[e]);
                    cv.row_mut(e).scaled_add(w[[e, 0]], &gout);
                    cw[[e, 0]] = vals
                        .row(e)
                        .iter()
                        .zip(gout.iter())
                        .map(|(&v, &go)| v * go)
                        .sum::<T>();
                }
                pass[values.0] += &cv;
                pass[weights.0] += &cw;
            }
            Rule::SegmentSoftmax(a, seg) => {
                let y = &node.value;
                let mut seg_dot = vec![T::zero(); seg.num_segments];
                for (e, &s) in seg.seg_of.iter().enumerate() {
                    seg_dot[s] += y[[e, 0]] * g[[e, 0]];
                }
                let mut c = Mat::zeros(y.raw_dim());
                for (e, &s) in seg.seg_of.iter().enumerate() {
                    c[[e, 0]] = y[[e, 0]] * (g[[e, 0]] - seg_dot[s]);
                }
                pass[a.0] += &c;
            }
            Rule::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut c = Mat::zeros(y.raw_dim());
                for (((yrow, grow), mut crow), &n) in y
                    .rows()
                    .into_iter()
                    .zip(g.rows())
                    .zip(c.rows_mut())
                    .zip(norms)
                {
                    let dot = yrow.iter().zip(grow.iter()).map(|(&yi, &gi)| yi * gi).sum::<T>();
                    for ((ci, &yi), &gi) in crow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                        *ci = (gi - yi * dot) / n;
                    }
                }
                pass[a.0] += &c;
            }
            Rule::RowSum(a) => {
                let pa = &mut pass[a.0];
                for (r, mut row) in pa.rows_mut().into_iter().enumerate() {
                    let gr = g[[r, 0]];
                    row.mapv_inplace(|x| x + gr);
                }
            }
            Rule::MeanAll(a) => {
                let pa = &mut pass[a.0];
                let scale = g[[0, 0]] / T::cast((pa.nrows() * pa.ncols()) as f64);
                pa.mapv_inplace(|x| x + scale);
            }
            Rule::CrossEntropy { logits, labels, ids } => {
                let x = &self.nodes[logits.0].value;
                let scale = g[[0, 0]] / T::cast(ids.len() as f64);
                let mut c = Mat::zeros(x.raw_dim());
                for &i in ids.iter() {
                    let row = x.row(i);
                    let m = row.fold(T::neg_infinity(), |acc, &v| acc.max(v));
                    let mut exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
                    let s: T = exps.iter().copied().sum();
                    for e in &mut exps {
                        *e = *e / s;
                    }
                    exps[labels[i]] -= T::one();
                    let mut crow = c.row_mut(i);
                    for (cj, ej) in crow.iter_mut().zip(exps) {
                        *cj += scale * ej;
                    }
                }
                pass[logits.0] += &c;
            }
            Rule::KlRows { q, p } => {
                // Reference p is constant by design: no gradient flows into it.
                let qm = &self.nodes[q.0].value;
                let pm = &self.nodes[p.0].value;
                let scale = g[[0, 0]] / T::cast(qm.nrows() as f64);
                let mut c = Mat::zeros(qm.raw_dim());
                for ((qrow, prow), mut crow) in
                    qm.rows().into_iter().zip(pm.rows()).zip(c.rows_mut())
                {
                    for ((ci, &qi), &pi) in crow.iter_mut().zip(qrow.iter()).zip(prow.iter()) {
                        if qi > T::zero() {
                            *ci = scale * ((qi / pi).ln() + T::one());
                        }
                    }
                }
                pass[q.0] += &c;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Evaluate the scalar loss a builder produces at a parameter point.
pub fn eval_loss<T, F>(build: &F, point: &[Mat<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let v = tape.scalar_value(loss)?;
    if !v.is_finite() {
        return Err(CgrlError::NonFinite("loss probe"));
    }
    Ok(v)
}

/// Central-difference gradients, coordinate by coordinate.
pub fn numeric_grad<T, F>(build: &F, point: &[Mat<T>], h: T) -> Result<Vec<Mat<T>>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let two_h = h + h;
    let mut grads = Vec::with_capacity(point.len());
    let mut work: Vec<Mat<T>> = point.to_vec();
    for pi in 0..point.len() {
        let mut gm = Mat::zeros(point[pi].raw_dim());
        for idx in 0..point[pi].len() {
            let (r, c) = (idx / point[pi].ncols(), idx % point[pi].ncols());
            let orig = work[pi][[r, c]];
            work[pi][[r, c]] = orig + h;
            let plus = eval_loss(build, &work)?;
            work[pi][[r, c]] = orig - h;
            let minus = eval_loss(build, &work)?;
            work[pi][[r, c]] = orig;
            gm[[r, c]] = (plus - minus) / two_h;
        }
        grads.push(gm);
    }
    Ok(grads)
}

/// Max over coordinates of |analytic - central difference| / max(1, |cd|).
pub fn grad_check<T, F>(build: F, point: &[Mat<T>], h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if !tape.scalar_value(loss)?.is_finite() {
        return Err(CgrlError::NonFinite("grad_check loss"));
    }
    tape.backward(loss)?;
    let analytic: Vec<Mat<T>> = vars.iter().map(|&v| tape.grad(v).clone()).collect();
    let numeric = numeric_grad(&build, point, h)?;
    let mut worst = T::zero();
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&ai, &ni) in a.iter().zip(n.iter()) {
            let denom = T::one().max(ni.abs());
            worst = worst.max((ai - ni).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn sum_all<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Var {
        let m = tape.mean_all(v);
        let count = T::cast((tape.value(v).nrows() * tape.value(v).ncols()) as f64);
        tape.scalar_mul(m, count)
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[-1.0, 2.0]]));
        let y = t.relu(x);
        assert_eq!(t.value(y), &arr2(&[[0.0, 2.0]]));
    }

    #[test]
    fn row_softmax_symmetry() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[0.0, 0.0]]));
        let y = t.row_softmax(x);
        assert_eq!(t.value(y), &arr2(&[[0.5, 0.5]]));
    }

    #[test]
    fn kl_identity_is_zero() {
        let mut t: Tape<f64> = Tape::new();
        let p = t.leaf(arr2(&[[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]]));
        let q = t.leaf(arr2(&[[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]]));
        let kl = t.kl_rows(q, p).unwrap();
        assert!(t.scalar_value(kl).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_non_stochastic() {
        let mut t = Tape::new();
        let p = t.leaf(arr2(&[[0.2, 0.9]]));
        let q = t.leaf(arr2(&[[0.5, 0.5]]));
        assert!(matches!(
            t.kl_rows(q, p),
            Err(CgrlError::NotStochastic { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[1.0, -2.0], [3.0, 0.5]]));
        let s = sum_all(&mut t, x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &arr2(&[[1.0, 1.0], [1.0, 1.0]]));
    }

    #[test]
    fn backward_of_relu_sum() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[-1.0, 2.0]]));
        let r = t.relu(x);
        let s = sum_all(&mut t, r);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &arr2(&[[0.0, 1.0]]));
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[2.0]]));
        let y = t.scalar_mul(x, 3.0);
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x)[[0, 0]], 6.0);
        t.zero_grads();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x)[[0, 0]], 3.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[1.0, 2.0]]));
        assert!(matches!(
            t.backward(x),
            Err(CgrlError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        // 3-class toy: loss = CE(x W, y)
        let x = arr2(&[[0.3, -0.4], [0.9, 0.1], [-0.2, 0.8]]);
        let w0 = arr2(&[[0.2, -0.1, 0.4], [-0.3, 0.5, 0.1]]);
        let labels = Rc::new(vec![0usize, 2, 1]);
        let ids = Rc::new(vec![0usize, 1, 2]);
        let err = grad_check(
            move |t, vars| {
                let xc = t.constant(x.clone());
                let logits = t.matmul(xc, vars[0])?;
                t.cross_entropy(logits, labels.clone(), ids.clone())
            },
            &[w0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let err = grad_check(
            |t, vars| {
                let sq = t.hadamard(vars[0], vars[0])?;
                Ok(sum_all(t, sq))
            },
            &[arr2(&[[1.0, 2.0]])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        // Negative control: compare a deliberately corrupted analytic
        // gradient against the central-difference oracle.
        let build = |t: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
            let sq = t.hadamard(vars[0], vars[0])?;
            let m = t.mean_all(sq);
            Ok(t.scalar_mul(m, 2.0))
        };
        let point = [arr2(&[[1.0, 2.0]])];
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.backward(loss).unwrap();
        let mut corrupted = tape.grad(vars[0]).clone();
        corrupted[[0, 0]] += 0.05;
        let numeric = numeric_grad(&build, &point, 1e-5).unwrap();
        let worst = corrupted
            .iter()
            .zip(numeric[0].iter())
            .map(|(&a, &n)| (a - n).abs() / 1.0f64.max(n.abs()))
            .fold(0.0, f64::max);
        assert!(worst > 1e-2, "corruption not detected: {worst}");
    }

    #[test]
    fn dropout_identity_and_determinism() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let same = t.dropout(x, 0.0, 99).unwrap();
        assert_eq!(t.value(same), t.value(x));

        let a = t.dropout(x, 0.5, 7).unwrap();
        let b = t.dropout(x, 0.5, 7).unwrap();
        assert_eq!(t.value(a), t.value(b));
        assert!(t.dropout(x, 1.0, 7).is_err());
    }

    #[test]
    fn scatter_add_equals_dense_adjacency_oracle() {
        // random graphs with n <= 20 against an explicit dense A * H
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4 + (rng.random::<u64>() % 17) as usize;
            let h = 3;
            let mut dense = Mat::<f64>::zeros((n, n));
            let mut src = Vec::new();
            let mut dst = Vec::new();
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.random::<f64>() < 0.3 {
                        dense[[u, v]] = 1.0;
                        dense[[v, u]] = 1.0;
                        src.extend([u, v]);
                        dst.extend([v, u]);
                    }
                }
            }
            let coeff = vec![1.0; src.len()];
            let x = Mat::from_shape_fn((n, h), |_| rng.random::<f64>() - 0.5);
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let agg = Rc::new(EdgeAgg {
                src,
                dst,
                coeff,
                out_rows: n,
            });
            let out = t.neighbor_scatter_add(xv, agg).unwrap();
            let oracle = dense.dot(&x);
            let diff = (t.value(out) - &oracle).mapv(f64::abs);
            assert!(diff.iter().all(|&d| d < 1e-12));
        }
    }

    #[test]
    fn segment_softmax_sums_to_one_per_segment() {
        let mut t: Tape<f64> = Tape::new();
        let s = t.leaf(arr2(&[[0.1], [2.0], [-1.0], [0.5]]));
        let seg = Rc::new(Segments {
            seg_of: vec![0, 0, 1, 1],
            num_segments: 3,
        });
        let y = t.segment_softmax(s, seg).unwrap();
        let v = t.value(y);
        assert!((v[[0, 0]] + v[[1, 0]] - 1.0).abs() < 1e-12);
        assert!((v[[2, 0]] + v[[3, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = t.leaf(arr2(&[[5.0], [6.0]]));
        let cat = t.concat_cols(a, b).unwrap();
        assert_eq!(t.value(cat), &arr2(&[[1.0, 2.0, 5.0], [3.0, 4.0, 6.0]]));

        let col = t.leaf(arr2(&[[1.0], [2.0], [3.0]]));
        let top = t.slice_rows(col, 0, 2).unwrap();
        assert_eq!(t.value(top), &arr2(&[[1.0], [2.0]]));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn small_matrix() -> impl Strategy<Value = Mat<f64>> {
            (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
                proptest::collection::vec(-8.0f64..8.0, r * c)
                    .prop_map(move |data| Mat::from_shape_vec((r, c), data).unwrap())
            })
        }

        proptest! {
            #[test]
            fn row_softmax_rows_are_stochastic(m in small_matrix()) {
                let mut t = Tape::new();
                let x = t.leaf(m);
                let y = t.row_softmax(x);
                for row in t.value(y).rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                    prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0 + 1e-12));
                }
            }

            #[test]
            fn kl_rows_is_nonnegative_and_zero_at_identity(m in small_matrix(), n in small_matrix()) {
                let mut t = Tape::new();
                let rows = m.nrows().min(n.nrows());
                let cols = m.ncols().min(n.ncols());
                let a = t.leaf(m.slice(s![..rows, ..cols]).to_owned());
                let b = t.leaf(n.slice(s![..rows, ..cols]).to_owned());
                let q = t.row_softmax(a);
                let p = t.row_softmax(b);
                let kl = t.kl_rows(q, p).unwrap();
                prop_assert!(t.scalar_value(kl).unwrap() >= -1e-12);

                let self_kl = t.kl_rows(q, q).unwrap();
                prop_assert!(t.scalar_value(self_kl).unwrap().abs() < 1e-12);
            }

            #[test]
            fn dropout_rate_zero_is_identity(m in small_matrix(), seed in 0u64..1000) {
                let mut t = Tape::new();
                let x = t.leaf(m);
                let y = t.dropout(x, 0.0, seed).unwrap();
                prop_assert_eq!(t.value(y), t.value(x));
            }
        }
    }
}
