//! Define-by-run reverse-mode autodiff over the small op set the context
//! models need: submanifold 3x3x3 convolution, linear, PReLU, concat,
//! row/column gather (occupancy pruning), scalar combination, and a fused
//! softmax cross-entropy sum.
//!
//! Forward evaluation happens eagerly as ops are recorded. Backward walks
//! the tape once in reverse. Summation order is fixed; the parallel feature
//! only splits loops whose output rows are disjoint.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::util::for_each_row;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValId(pub(crate) usize);

enum Op {
    Leaf,
    Param(String),
    /// out = x . w + bias (w: Cin x Cout, bias 1 x Cout). Bias optional.
    Linear {
        x: ValId,
        w: ValId,
        b: Option<ValId>,
    },
    Prelu {
        x: ValId,
        slope: ValId,
    },
    /// Submanifold convolution. `nbr[i*27 + o]` is the input row index of
    /// the o-th 3x3x3 offset around node i, or -1 when unoccupied.
    /// k: (27*Cin) x Cout.
    Conv {
        x: ValId,
        k: ValId,
        b: ValId,
        nbr: Arc<Vec<i64>>,
    },
    Concat {
        a: ValId,
        b: ValId,
    },
    /// out[r, :] = x[row[r], col_off[r] .. col_off[r]+width].
    Gather {
        x: ValId,
        row: Arc<Vec<u32>>,
        col_off: Arc<Vec<u32>>,
        width: usize,
    },
    /// out = ca*a + cb*b, elementwise over equal shapes.
    AddScaled {
        a: ValId,
        b: ValId,
        ca: f64,
        cb: f64,
    },
    /// 1x1 sum over rows of -log softmax(logits)[truth].
    CeSum {
        logits: ValId,
        truth: Arc<Vec<u8>>,
    },
}

pub struct Tape {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
        }
    }

    /// Number of nodes recorded so far.
    pub fn node_count(&self) -> usize {
        self.vals.len()
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.vals[id.0]
    }

    fn push(&mut self, t: Tensor, op: Op) -> ValId {
        self.vals.push(t);
        self.ops.push(op);
        ValId(self.vals.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> ValId {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, name: &str, t: Tensor) -> ValId {
        self.push(t, Op::Param(name.to_string()))
    }

    pub fn linear(&mut self, x: ValId, w: ValId, b: Option<ValId>) -> ValId {
        let (xs, ws) = (&self.vals[x.0], &self.vals[w.0]);
        assert_eq!(xs.cols, ws.rows, "linear shape mismatch");
        let (n, c_out) = (xs.rows, ws.cols);
        let mut out = Tensor::zeros(n, c_out);
        if let Some(b) = b {
            let bias = &self.vals[b.0];
            assert_eq!(bias.cols, c_out);
            for i in 0..n {
                out.row_mut(i).copy_from_slice(bias.row(0));
            }
        }
        matmul_acc(&mut out, xs, ws);
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn prelu(&mut self, x: ValId, slope: ValId) -> ValId {
        let (xs, ss) = (&self.vals[x.0], &self.vals[slope.0]);
        assert_eq!(ss.cols, xs.cols, "one slope per channel");
        let mut out = xs.clone();
        let c = xs.cols;
        for i in 0..out.data.len() {
            if out.data[i] < 0.0 {
                out.data[i] *= ss.data[i % c];
            }
        }
        self.push(out, Op::Prelu { x, slope })
    }

    pub fn conv(&mut self, x: ValId, k: ValId, b: ValId, nbr: Arc<Vec<i64>>) -> ValId {
        let (xs, ks, bs) = (&self.vals[x.0], &self.vals[k.0], &self.vals[b.0]);
        let c_in = xs.cols;
        assert_eq!(ks.rows, 27 * c_in, "kernel rows must be 27*C_in");
        let c_out = ks.cols;
        assert_eq!(bs.cols, c_out);
        let n = xs.rows;
        assert_eq!(nbr.len(), 27 * n);
        let mut out = Tensor::zeros(n, c_out);
        conv_forward(&mut out, xs, ks, bs, &nbr);
        self.push(out, Op::Conv { x, k, b, nbr })
    }

    pub fn concat(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.rows != tb.rows {
            return Err(Error::Contract(format!(
                "concat row mismatch: {} vs {}",
                ta.rows, tb.rows
            )));
        }
        let mut out = Tensor::zeros(ta.rows, ta.cols + tb.cols);
        for i in 0..ta.rows {
            out.row_mut(i)[..ta.cols].copy_from_slice(ta.row(i));
            out.row_mut(i)[ta.cols..].copy_from_slice(tb.row(i));
        }
        Ok(self.push(out, Op::Concat { a, b }))
    }

    pub fn gather(
        &mut self,
        x: ValId,
        row: Arc<Vec<u32>>,
        col_off: Arc<Vec<u32>>,
        width: usize,
    ) -> ValId {
        assert_eq!(row.len(), col_off.len());
        let xs = &self.vals[x.0];
        let mut out = Tensor::zeros(row.len(), width);
        for r in 0..row.len() {
            let (i, off) = (row[r] as usize, col_off[r] as usize);
            out.row_mut(r).copy_from_slice(&xs.row(i)[off..off + width]);
        }
        self.push(out, Op::Gather { x, row, col_off, width })
    }

    pub fn add_scaled(&mut self, a: ValId, b: ValId, ca: f64, cb: f64) -> ValId {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let mut out = Tensor::zeros(ta.rows, ta.cols);
        for i in 0..out.data.len() {
            out.data[i] = ca * ta.data[i] + cb * tb.data[i];
        }
        self.push(out, Op::AddScaled { a, b, ca, cb })
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> ValId {
        self.add_scaled(a, b, 1.0, 1.0)
    }

    pub fn scale(&mut self, x: ValId, c: f64) -> ValId {
        let placeholder = self.leaf(Tensor::zeros(
            self.vals[x.0].rows,
            self.vals[x.0].cols,
        ));
        self.add_scaled(x, placeholder, c, 0.0)
    }

    /// Summed negative log softmax probability of the true symbols.
    /// `truth[i]` is a 0-based symbol index into the logit columns.
    pub fn ce_sum(&mut self, logits: ValId, truth: Arc<Vec<u8>>) -> Result<ValId> {
        let t = &self.vals[logits.0];
        if t.rows != truth.len() {
            return Err(Error::Contract(format!(
                "{} logit rows vs {} truth symbols",
                t.rows,
                truth.len()
            )));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut total = 0.0;
        for i in 0..t.rows {
            let row = t.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[truth[i] as usize];
        }
        Ok(self.push(
            Tensor::from_vec(1, 1, vec![total]),
            Op::CeSum { logits, truth },
        ))
    }

    /// Reverse-mode gradients of scalar `root` with respect to every value
    /// on the tape. Each node is visited exactly once.
    pub fn backward(&self, root: ValId) -> Vec<Option<Tensor>> {
        let rt = &self.vals[root.0];
        assert_eq!((rt.rows, rt.cols), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        grads[root.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    /// Gradients keyed by parameter name, for the optimizer.
    pub fn param_grads(
        &self,
        grads: &[Option<Tensor>],
    ) -> std::collections::BTreeMap<String, Tensor> {
        let mut out = std::collections::BTreeMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Param(name) = op {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.vals[i].rows, self.vals[i].cols));
                // A parameter appearing twice on one tape would need
                // accumulation across ids; the registry inserts each name
                // at most once per forward pass.
                let prev = out.insert(name.clone(), g);
                assert!(prev.is_none(), "parameter {name} recorded twice");
            }
        }
        out
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let ensure = |grads: &mut [Option<Tensor>], id: ValId, rows: usize, cols: usize| {
            if grads[id.0].is_none() {
                grads[id.0] = Some(Tensor::zeros(rows, cols));
            }
        };
        match &self.ops[idx] {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xs, ws) = (&self.vals[x.0], &self.vals[w.0]);
                ensure(grads, *x, xs.rows, xs.cols);
                // dX = g . W^T
                {
                    let gx = grads[x.0].as_mut().unwrap();
                    for i in 0..xs.rows {
                        for ci in 0..xs.cols {
                            let mut acc = 0.0;
                            let wrow = ws.row(ci);
                            let grow = g.row(i);
                            for co in 0..ws.cols {
                                acc += grow[co] * wrow[co];
                            }
                            *gx.at_mut(i, ci) += acc;
                        }
                    }
                }
                ensure(grads, *w, ws.rows, ws.cols);
                // dW = X^T . g
                {
                    let gw = grads[w.0].as_mut().unwrap();
                    for i in 0..xs.rows {
                        let xrow = xs.row(i);
                        let grow = g.row(i);
                        for ci in 0..xs.cols {
                            let xv = xrow[ci];
                            let dst = gw.row_mut(ci);
                            for co in 0..ws.cols {
                                dst[co] += xv * grow[co];
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    ensure(grads, *b, 1, ws.cols);
                    let gb = grads[b.0].as_mut().unwrap();
                    for i in 0..g.rows {
                        for co in 0..g.cols {
                            gb.data[co] += g.at(i, co);
                        }
                    }
                }
            }
            Op::Prelu { x, slope } => {
                let (xs, ss) = (&self.vals[x.0], &self.vals[slope.0]);
                let c = xs.cols;
                ensure(grads, *x, xs.rows, xs.cols);
                {
                    let gx = grads[x.0].as_mut().unwrap();
                    for i in 0..xs.data.len() {
                        let d = if xs.data[i] >= 0.0 { 1.0 } else { ss.data[i % c] };
                        gx.data[i] += g.data[i] * d;
                    }
                }
                ensure(grads, *slope, 1, c);
                {
                    let gs = grads[slope.0].as_mut().unwrap();
                    for i in 0..xs.data.len() {
                        if xs.data[i] < 0.0 {
                            gs.data[i % c] += g.data[i] * xs.data[i];
                        }
                    }
                }
            }
            Op::Conv { x, k, b, nbr } => {
                let (xs, ks) = (&self.vals[x.0], &self.vals[k.0]);
                let (c_in, c_out) = (xs.cols, ks.cols);
                ensure(grads, *x, xs.rows, xs.cols);
                {
                    let gx = grads[x.0].as_mut().unwrap();
                    for i in 0..xs.rows {
                        let grow = g.row(i);
                        for o in 0..27 {
                            let j = nbr[i * 27 + o];
                            if j < 0 {
                                continue;
                            }
                            let dst = gx.row_mut(j as usize);
                            for ci in 0..c_in {
                                let krow = ks.row(o * c_in + ci);
                                let mut acc = 0.0;
                                for co in 0..c_out {
                                    acc += grow[co] * krow[co];
                                }
                                dst[ci] += acc;
                            }
                        }
                    }
                }
                ensure(grads, *k, ks.rows, ks.cols);
                {
                    let gk = grads[k.0].as_mut().unwrap();
                    for i in 0..xs.rows {
                        let grow = g.row(i);
                        for o in 0..27 {
                            let j = nbr[i * 27 + o];
                            if j < 0 {
                                continue;
                            }
                            let xrow = xs.row(j as usize);
                            for ci in 0..c_in {
                                let xv = xrow[ci];
                                let dst = gk.row_mut(o * c_in + ci);
                                for co in 0..c_out {
                                    dst[co] += xv * grow[co];
                                }
                            }
                        }
                    }
                }
                ensure(grads, *b, 1, c_out);
                {
                    let gb = grads[b.0].as_mut().unwrap();
                    for i in 0..g.rows {
                        for co in 0..c_out {
                            gb.data[co] += g.at(i, co);
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
                ensure(grads, *a, ta.rows, ta.cols);
                {
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..ta.rows {
                        let src = &g.row(i)[..ta.cols];
                        for (d, s) in ga.row_mut(i).iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                ensure(grads, *b, tb.rows, tb.cols);
                {
                    let gb = grads[b.0].as_mut().unwrap();
                    for i in 0..tb.rows {
                        let src = &g.row(i)[ta.cols..];
                        for (d, s) in gb.row_mut(i).iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gather { x, row, col_off, width } => {
                let xs = &self.vals[x.0];
                ensure(grads, *x, xs.rows, xs.cols);
                let gx = grads[x.0].as_mut().unwrap();
                for r in 0..row.len() {
                    let (i, off) = (row[r] as usize, col_off[r] as usize);
                    let dst = &mut gx.row_mut(i)[off..off + width];
                    for (d, s) in dst.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
            Op::AddScaled { a, b, ca, cb } => {
                let ta = &self.vals[a.0];
                ensure(grads, *a, ta.rows, ta.cols);
                {
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..g.data.len() {
                        ga.data[i] += ca * g.data[i];
                    }
                }
                let tb = &self.vals[b.0];
                ensure(grads, *b, tb.rows, tb.cols);
                {
                    let gb = grads[b.0].as_mut().unwrap();
                    for i in 0..g.data.len() {
                        gb.data[i] += cb * g.data[i];
                    }
                }
            }
            Op::CeSum { logits, truth } => {
                let t = &self.vals[logits.0];
                ensure(grads, *logits, t.rows, t.cols);
                let gl = grads[logits.0].as_mut().unwrap();
                let up = g.scalar();
                for i in 0..t.rows {
                    let row = t.row(i);
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    let dst = gl.row_mut(i);
                    for (j, &v) in row.iter().enumerate() {
                        dst[j] += up * ((v - m).exp() / denom);
                    }
                    dst[truth[i] as usize] -= up;
                }
            }
        }
    }
}

fn matmul_acc(out: &mut Tensor, x: &Tensor, w: &Tensor) {
    let (c_in, c_out) = (w.rows, w.cols);
    let xd = &x.data;
    let wd = &w.data;
    for_each_row(&mut out.data, c_out, |i, orow| {
        let xrow = &xd[i * c_in..(i + 1) * c_in];
        for ci in 0..c_in {
            let xv = xrow[ci];
            if xv == 0.0 {
                continue;
            }
            let wrow = &wd[ci * c_out..(ci + 1) * c_out];
            for co in 0..c_out {
                orow[co] += xv * wrow[co];
            }
        }
    });
}

fn conv_forward(out: &mut Tensor, x: &Tensor, k: &Tensor, bias: &Tensor, nbr: &[i64]) {
    let (c_in, c_out) = (x.cols, k.cols);
    let xd = &x.data;
    let kd = &k.data;
    let bd = &bias.data;
    for_each_row(&mut out.data, c_out, |i, orow| {
        orow.copy_from_slice(bd);
        for o in 0..27 {
            let j = nbr[i * 27 + o];
            if j < 0 {
                continue;
            }
            let xrow = &xd[j as usize * c_in..(j as usize + 1) * c_in];
            for ci in 0..c_in {
                let xv = xrow[ci];
                if xv == 0.0 {
                    continue;
                }
                let krow = &kd[(o * c_in + ci) * c_out..(o * c_in + ci + 1) * c_out];
                for co in 0..c_out {
                    orow[co] += xv * krow[co];
                }
            }
        }
    });
}

/// Sequential-reference convolution used by benchmarks to compare against
/// the (possibly parallel) default path.
pub fn conv_forward_seq(x: &Tensor, k: &Tensor, bias: &Tensor, nbr: &[i64]) -> Tensor {
    let (c_in, c_out) = (x.cols, k.cols);
    let mut out = Tensor::zeros(x.rows, c_out);
    crate::util::for_each_row_seq(&mut out.data, c_out, |i, orow| {
        orow.copy_from_slice(&bias.data);
        for o in 0..27 {
            let j = nbr[i * 27 + o];
            if j < 0 {
                continue;
            }
            let xrow = &x.data[j as usize * c_in..(j as usize + 1) * c_in];
            for ci in 0..c_in {
                let xv = xrow[ci];
                if xv == 0.0 {
                    continue;
                }
                let krow = &k.data[(o * c_in + ci) * c_out..(o * c_in + ci + 1) * c_out];
                for co in 0..c_out {
                    orow[co] += xv * krow[co];
                }
            }
        }
    });
    out
}

/// Forward-only convolution entry point for benchmarks.
pub fn conv_forward_only(x: &Tensor, k: &Tensor, bias: &Tensor, nbr: &[i64]) -> Tensor {
    let mut out = Tensor::zeros(x.rows, k.cols);
    conv_forward(&mut out, x, k, bias, nbr);
    out
}
