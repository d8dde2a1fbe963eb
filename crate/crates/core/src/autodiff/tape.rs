use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::tensor::GradTensor;

/// Element-wise activations with analytic derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Sqrt,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

/// Per-pass gradient flows, keyed by tensor id. Flows are folded into each
/// tensor's persistent grad once the pass finishes, so repeated backward
/// calls accumulate and passes never double-count intermediate gradients.
pub(crate) struct BackwardPass {
    flows: HashMap<u64, (GradTensor, Vec<f64>)>,
}

impl BackwardPass {
    fn flow_of(&self, t: &GradTensor) -> Option<Vec<f64>> {
        self.flows.get(&t.id()).map(|(_, g)| g.clone())
    }

    fn add_flow(&mut self, t: &GradTensor, f: impl FnOnce(&mut [f64])) {
        if !t.requires_grad() {
            return;
        }
        let entry = self
            .flows
            .entry(t.id())
            .or_insert_with(|| (t.clone(), vec![0.0; t.numel()]));
        f(&mut entry.1);
    }
}

type Node = Box<dyn Fn(&mut BackwardPass) + Send + Sync>;

/// Wengert tape: ops executed through a recording tape append a backward
/// closure; replaying closures in reverse order accumulates exact gradients.
///
/// An inference tape records nothing and produces bitwise-identical forward
/// values. Independent tapes are safe to run concurrently; a single tape is
/// not shared across writers.
pub struct Tape {
    recording: bool,
    nodes: Mutex<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            recording: true,
            nodes: Mutex::new(Vec::new()),
        }
    }

    /// Forward-only tape; no closures are recorded and all outputs are
    /// detached from gradient tracking.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            nodes: Mutex::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) {
        self.nodes.lock().unwrap().push(node);
    }

    fn track(&self, inputs: &[&GradTensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    /// Reverse pass from a scalar output. Gradients of every reachable
    /// `requires_grad` tensor are accumulated into its grad slot.
    pub fn backward(&self, out: &GradTensor) -> Result<()> {
        if out.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        if !out.requires_grad() {
            return Ok(());
        }
        let mut pass = BackwardPass {
            flows: HashMap::new(),
        };
        pass.flows.insert(out.id(), (out.clone(), vec![1.0]));
        {
            let nodes = self.nodes.lock().unwrap();
            for node in nodes.iter().rev() {
                node(&mut pass);
            }
        }
        for (t, g) in pass.flows.values() {
            t.accumulate_grad(g);
        }
        Ok(())
    }

    // ----- binary ops ------------------------------------------------------

    pub fn add(&self, a: &GradTensor, b: &GradTensor) -> Result<GradTensor> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&self, a: &GradTensor, b: &GradTensor) -> Result<GradTensor> {
        self.binary(a, b, BinKind::Sub)
    }

    /// Element-wise product; shapes must be equal, scalar, or `b` may match a
    /// trailing suffix of `a`'s shape.
    pub fn hadamard(&self, a: &GradTensor, b: &GradTensor) -> Result<GradTensor> {
        self.binary(a, b, BinKind::Mul)
    }

    fn binary(&self, a: &GradTensor, b: &GradTensor, kind: BinKind) -> Result<GradTensor> {
        let plan = Broadcast::plan(a.shape(), b.shape(), kind)?;
        let vals = GradTensor::with_values2(a, b, |av, bv| plan.forward(av, bv, kind));
        let track = self.track(&[a, b]);
        let out = GradTensor::from_op(plan.out_shape.clone(), vals, track);
        if track {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.push(Box::new(move |pass| {
                let Some(g) = pass.flow_of(&o2) else { return };
                match kind {
                    BinKind::Add => {
                        pass.add_flow(&a2, |buf| plan.back_into_a(buf, &g, None));
                        pass.add_flow(&b2, |buf| plan.back_into_b(buf, &g, None));
                    }
                    BinKind::Sub => {
                        pass.add_flow(&a2, |buf| plan.back_into_a(buf, &g, None));
                        pass.add_flow(&b2, |buf| {
                            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                            plan.back_into_b(buf, &neg, None)
                        });
                    }
                    BinKind::Mul => {
                        if a2.requires_grad() {
                            let bv = b2.to_vec();
                            pass.add_flow(&a2, |buf| plan.back_into_a(buf, &g, Some(&bv)));
                        }
                        if b2.requires_grad() {
                            let av = a2.to_vec();
                            pass.add_flow(&b2, |buf| plan.back_into_b(buf, &g, Some(&av)));
                        }
                    }
                }
            }));
        }
        Ok(out)
    }

    // ----- matmul -----------------------------------------------------------

    /// Standard 2-D matrix product `(m,k)·(k,n) -> (m,n)`.
    pub fn matmul(&self, a: &GradTensor, b: &GradTensor) -> Result<GradTensor> {
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!(
                "matmul expects rank-2 tensors, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} vs {:?}",
                sa, sb
            )));
        }
        let vals = GradTensor::with_values2(a, b, |av, bv| matmul_nn(av, bv, m, k, n));
        let track = self.track(&[a, b]);
        let out = GradTensor::from_op(vec![m, n], vals, track);
        if track {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.push(Box::new(move |pass| {
                let Some(g) = pass.flow_of(&o2) else { return };
                if a2.requires_grad() {
                    // grad_a = g · bᵀ
                    let da = b2.with_values(|bv| matmul_nt(&g, bv, m, n, k));
                    pass.add_flow(&a2, |buf| axpy(buf, &da));
                }
                if b2.requires_grad() {
                    // grad_b = aᵀ · g
                    let db = a2.with_values(|av| matmul_tn(av, &g, m, k, n));
                    pass.add_flow(&b2, |buf| axpy(buf, &db));
                }
            }));
        }
        Ok(out)
    }

    // ----- element-wise -----------------------------------------------------

    pub fn unary(&self, a: &GradTensor, act: Activation) -> Result<GradTensor> {
        if let Activation::Sqrt = act {
            let bad = a.with_values(|av| av.iter().any(|&v| v < 0.0));
            if bad {
                return Err(Error::Domain("sqrt of negative input".into()));
            }
        }
        let vals = a.with_values(|av| av.iter().map(|&x| act.apply(x)).collect::<Vec<_>>());
        let track = self.track(&[a]);
        let out = GradTensor::from_op(a.shape().to_vec(), vals, track);
        if track {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(Box::new(move |pass| {
                let Some(g) = pass.flow_of(&o2) else { return };
                let deriv: Vec<f64> = match act {
                    Activation::Relu => a2.with_values(|av| {
                        av.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect()
                    }),
                    Activation::LeakyRelu(alpha) => a2.with_values(|av| {
                        av.iter().map(|&x| if x > 0.0 { 1.0 } else { alpha }).collect()
                    }),
                    Activation::Sigmoid => {
                        o2.with_values(|ov| ov.iter().map(|&y| y * (1.0 - y)).collect())
                    }
                    Activation::Exp => o2.to_vec(),
                    Activation::Sqrt => {
                        o2.with_values(|ov| ov.iter().map(|&y| 0.5 / y).collect())
                    }
                    Activation::Neg => vec![-1.0; g.len()],
                };
                pass.add_flow(&a2, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * deriv[i];
                    }
                });
            }));
        }
        Ok(out)
    }

    pub fn relu(&self, a: &GradTensor) -> Result<GradTensor> {
        self.unary(a, Activation::Relu)
    }

    pub fn sigmoid(&self, a: &GradTensor) -> Result<GradTensor> {
        self.unary(a, Activation::Sigmoid)
    }

    pub fn exp(&self, a: &GradTensor) -> Result<GradTensor> {
        self.unary(a, Activation::Exp)
    }

    /// `scale * a + shift` with scalar constants.
    pub fn affine(&self, a: &GradTensor, scale: f64, shift: f64) -> Result<GradTensor> {
        let vals = a.with_values(|av| av.iter().map(|&x| scale * x + shift).collect::<Vec<_>>());
        let track = self.track(&[a]);
        let out = GradTensor::from_op(a.shape().to_vec(), vals, track);
        if track {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(Box::new(move |pass| {
                let Some(g) = pass.flow_of(&o2) else { return };
                pass.add_flow(&a2, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * scale;
                    }
                });
            }));
        }
        Ok(out)
    }

    // ----- reductions -------------------------------------------------------

    /// Reduce all elements (axis `None`, scalar output) or along one axis.
    pub fn reduce(&self, a: &GradTensor, op: Reduce, axis: Option<usize>) -> Result<GradTensor> {
        let shape = a.shape().to_vec();
        match axis {
            None => {
                let n = a.numel().max(1);
                let total = a.with_values(|av| av.iter().sum::<f64>());
                let v = match op {
                    Reduce::Sum => total,
                    Reduce::Mean => total / n as f64,
                };
                let track = self.track(&[a]);
                let out = GradTensor::from_op(vec![], vec![v], track);
                if track {
                    let (a2, o2) = (a.clone(), out.clone());
                    self.push(Box::new(move |pass| {
                        let Some(g) = pass.flow_of(&o2) else { return };
                        let w = match op {
                            Reduce::Sum => g[0],
                            Reduce::Mean => g[0] / n as f64,
                        };
                        pass.add_flow(&a2, |buf| {
                            for v in buf.iter_mut() {
                                *v += w;
                            }
                        });
                    }));
                }
                Ok(out)
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::dim(format!(
                        "reduce axis {} out of range for shape {:?}",
                        ax, shape
                    )));
                }
                let outer: usize = shape[..ax].iter().product();
                let len = shape[ax];
                let inner: usize = shape[ax + 1..].iter().product();
                let mut out_shape = shape.clone();
                out_shape.remove(ax);
                let scale = match op {
                    Reduce::Sum => 1.0,
                    Reduce::Mean => 1.0 / len.max(1) as f64,
                };
                let vals = a.with_values(|av| {
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            let obase = o * inner;
                            for i in 0..inner {
                                out[obase + i] += av[base + i];
                            }
                        }
                    }
                    for v in out.iter_mut() {
                        *v *= scale;
                    }
                    out
                });
                let track = self.track(&[a]);
                let out = GradTensor::from_op(out_shape, vals, track);
                if track {
                    let (a2, o2) = (a.clone(), out.clone());
                    self.push(Box::new(move |pass| {
                        let Some(g) = pass.flow_of(&o2) else { return };
                        pass.add_flow(&a2, |buf| {
                            for o in 0..outer {
                                for j in 0..len {
                                    let base = (o * len + j) * inner;
                                    let obase = o * inner;
                                    for i in 0..inner {
                                        buf[base + i] += g[obase + i] * scale;
                                    }
                                }
                            }
                        });
                    }));
                }
                Ok(out)
            }
        }
    }

    pub fn sum_all(&self, a: &GradTensor) -> Result<GradTensor> {
        self.reduce(a, Reduce::Sum, None)
    }

    pub fn mean_all(&self, a: &GradTensor) -> Result<GradTensor> {
        self.reduce(a, Reduce::Mean, None)
    }

    // ----- indexing / layout --------------------------------------------------

    /// Gather rows (`axis` 0) or columns (`axis` 1) of a rank-2 tensor.
    /// Indices may repeat; the backward pass scatter-adds in index order.
    pub fn index_select(
        &self,
        a: &GradTensor,
        axis: usize,
        indices: &Arc<Vec<usize>>,
    ) -> Result<GradTensor> {
        let shape = a.shape().to_vec();
        if shape.len() != 2 || axis > 1 {
            return Err(Error::dim(format!(
                "index_select expects rank-2 tensor and axis 0/1, got {:?} axis {}",
                shape, axis
            )));
        }
        let (m, n) = (shape[0], shape[1]);
        let bound = if axis == 0 { m } else { n };
        if let Some(&bad) = indices.iter().find(|&&i| i >= bound) {
            return Err(Error::dim(format!(
                "index_select index {} out of range {}",
                bad, bound
            )));
        }
        let k = indices.len();
        let vals = a.with_values(|av| {
            if axis == 0 {
                let mut out = vec![0.0; k * n];
                for (r, &idx) in indices.iter().enumerate() {
                    out[r * n..(r + 1) * n].copy_from_slice(&av[idx * n..(idx + 1) * n]);
                }
                out
            } else {
                let mut out = vec![0.0; m * k];
                for i in 0..m {
                    let row = &av[i * n..(i + 1) * n];
                    for (c, &idx) in indices.iter().enumerate() {
                        out[i * k + c] = row[idx];
                    }
                }
                out
            }
        });
        let out_shape = if axis == 0 { vec![k, n] } else { vec![m, k] };
        let track = self.track(&[a]);
        let out = GradTensor::from_op(out_shape, vals, track);
        if track {
            let (a2, o2) = (a.clone(), out.clone());
            let idx = Arc::clone(indices);
            self.push(Box::new(move |pass| {
                let Some(g) = pass.flow_of(&o2) else { return };
                pass.add_flow(&a2, |buf| {
                    if axis == 0 {
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..n {
                                buf[i * n + j] += g[r * n + j];
                            }
                        }
                    } else {
                        let k = idx.len();
                        for i in 0..m {
                            for (c, &j) in idx.iter().enumerate() {
                                buf[i * n + j] += g[i * k + c];
                            }
                        }
                    }
                });
            }));
        }
        Ok(out)
    }

    /// Concatenate rank-1 or rank-2 tensors along `axis`.
    pub fn concat(&self, parts: &[&GradTensor], axis: usize) -> Result<GradTensor> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let rank = parts[0].shape().len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::dim(format!(
                "concat supports rank 1-2, got rank {} axis {}",
                rank, axis
            )));
        }
        for p in parts {
            if p.shape().len() != rank {
                return Err(Error::dim("concat rank mismatch"));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    return Err(Error::dim(format!(
                        "concat off-axis dims differ: {:?} vs {:?}",
                        p.shape(),
                        parts[0].shape()
                    )));
                }
            }
        }
        let axis_total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = axis_total;

        let mut vals = vec![0.0; out_shape.iter().product()];
        if rank == 1 || axis == 0 {
            let mut off = 0;
            for p in parts {
                let pn = p.numel();
                p.with_values(|pv| vals[off..off + pn].copy_from_slice(pv));
                off += pn;
            }
        } else {
            let m = out_shape[0];
            let total = axis_total;
            let mut col = 0;
            for p in parts {
                let pn = p.shape()[1];
                p.with_values(|pv| {
                    for i in 0..m {
                        vals[i * total + col..i * total + col + pn]
                            .copy_from_slice(&pv[i * pn..(i + 1) * pn]);
                    }
                });
                col += pn;
            }
        }
        let track = self.track(&parts.iter().copied().collect::<Vec<_>>());
        let out = GradTensor::from_op(out_shape.clone(), vals, track);
        if track {
            let owned: Vec<GradTensor> = parts.iter().map(|p| (*p).clone()).collect();
            let o2 = out.clone();
            self.push(Box::new(move |pass| {
                let Some(g) = pass.flow_of(&o2) else { return };
                if owned[0].shape().len() == 1 || axis == 0 {
                    let mut off = 0;
                    for p in &owned {
                        let pn = p.numel();
                        let slice = &g[off..off + pn];
                        pass.add_flow(p, |buf| axpy(buf, slice));
                        off += pn;
                    }
                } else {
                    let m = out_shape[0];
                    let total = out_shape[1];
                    let mut col = 0;
                    for p in &owned {
                        let pn = p.shape()[1];
                        pass.add_flow(p, |buf| {
                            for i in 0..m {
                                for j in 0..pn {
                                    buf[i * pn + j] += g[i * total + col + j];
                                }
                            }
                        });
                        col += pn;
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`.
    pub fn narrow(
        &self,
        a: &GradTensor,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<GradTensor> {
        let shape = a.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "narrow axis {} out of range for {:?}",
                axis, shape
            )));
        }
        if start + len > shape[axis] {
            return Err(Error::dim(format!(
                "narrow [{}, {}) exceeds dim {} of {:?}",
                start,
                start + len,
                shape[axis],
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let alen = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let vals = a.with_values(|av| {
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    let src = (o * alen + start + j) * inner;
                    let dst = (o * len + j) * inner;
                    out[dst..dst + inner].copy_from_slice(&av[src..src + inner]);
                }
            }
            out
        });
        let track = self.track(&[a]);
        let out = GradTensor::from_op(out_shape, vals, track);
        if track {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(Box::new(move |pass| {
                let Some(g) = pass.flow_of(&o2) else { return };
                pass.add_flow(&a2, |buf| {
                    for o in 0..outer {
                        for j in 0..len {
                            let dst = (o * alen + start + j) * inner;
                            let src = (o * len + j) * inner;
                            for i in 0..inner {
                                buf[dst + i] += g[src + i];
                            }
                        }
                    }
                });
            }));
        }
        Ok(out)
    }

    pub fn reshape(&self, a: &GradTensor, new_shape: &[usize]) -> Result<GradTensor> {
        let n: usize = new_shape.iter().product();
        if n != a.numel() {
            return Err(Error::dim(format!(
                "reshape {:?} -> {:?} changes element count",
                a.shape(),
                new_shape
            )));
        }
        let track = self.track(&[a]);
        let out = GradTensor::from_op(new_shape.to_vec(), a.to_vec(), track);
        if track {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(Box::new(move |pass| {
                let Some(g) = pass.flow_of(&o2) else { return };
                pass.add_flow(&a2, |buf| axpy(buf, &g));
            }));
        }
        Ok(out)
    }

    pub fn transpose(&self, a: &GradTensor) -> Result<GradTensor> {
        let shape = a.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("transpose expects rank 2, got {:?}", shape)));
        }
        let (m, n) = (shape[0], shape[1]);
        let vals = a.with_values(|av| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = av[i * n + j];
                }
            }
            out
        });
        let track = self.track(&[a]);
        let out = GradTensor::from_op(vec![n, m], vals, track);
        if track {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(Box::new(move |pass| {
                let Some(g) = pass.flow_of(&o2) else { return };
                pass.add_flow(&a2, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }));
        }
        Ok(out)
    }

    /// Tile the columns of a rank-2 tensor: `(m,n) -> (m, n*times)` where
    /// `out[i, t*n + j] = a[i, j]`. Backward sums the tiles.
    pub fn repeat_cols(&self, a: &GradTensor, times: usize) -> Result<GradTensor> {
        let shape = a.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!(
                "repeat_cols expects rank 2, got {:?}",
                shape
            )));
        }
        let (m, n) = (shape[0], shape[1]);
        let vals = a.with_values(|av| {
            let mut out = vec![0.0; m * n * times];
            for i in 0..m {
                let row = &av[i * n..(i + 1) * n];
                for t in 0..times {
                    let dst = i * n * times + t * n;
                    out[dst..dst + n].copy_from_slice(row);
                }
            }
            out
        });
        let track = self.track(&[a]);
        let out = GradTensor::from_op(vec![m, n * times], vals, track);
        if track {
            let (a2, o2) = (a.clone(), out.clone());
            self.push(Box::new(move |pass| {
                let Some(g) = pass.flow_of(&o2) else { return };
                pass.add_flow(&a2, |buf| {
                    for i in 0..m {
                        for t in 0..times {
                            let src = i * n * times + t * n;
                            for j in 0..n {
                                buf[i * n + j] += g[src + j];
                            }
                        }
                    }
                });
            }));
        }
        Ok(out)
    }

    // ----- segment ops (ragged per-ray batches) ------------------------------

    /// Exclusive prefix sums within segments delimited by `offsets`
    /// (`offsets[0] == 0`, `offsets.last() == len`).
    pub fn segment_cumsum_exclusive(
        &self,
        a: &GradTensor,
        offsets: &Arc<Vec<usize>>,
    ) -> Result<GradTensor> {
        check_offsets(offsets, a.numel())?;
        if a.shape().len() != 1 {
            return Err(Error::dim("segment_cumsum_exclusive expects rank 1"));
        }
        let vals = a.with_values(|av| {
            let mut out = vec![0.0; av.len()];
            for w in offsets.windows(2) {
                let (s, e) = (w[0], w[1]);
                let mut acc = 0.0;
                for p in s..e {
                    out[p] = acc;
                    acc += av[p];
                }
            }
            out
        });
        let track = self.track(&[a]);
        let out = GradTensor::from_op(a.shape().to_vec(), vals, track);
        if track {
            let (a2, o2) = (a.clone(), out.clone());
            let offs = Arc::clone(offsets);
            self.push(Box::new(move |pass| {
                let Some(g) = pass.flow_of(&o2) else { return };
                pass.add_flow(&a2, |buf| {
                    for w in offs.windows(2) {
                        let (s, e) = (w[0], w[1]);
                        let mut acc = 0.0;
                        for p in (s..e).rev() {
                            buf[p] += acc;
                            acc += g[p];
                        }
                    }
                });
            }));
        }
        Ok(out)
    }

    /// Per-segment sums. Rank 1 `(P) -> (B)` or rank 2 `(P,C) -> (B,C)`.
    pub fn segment_sum(&self, a: &GradTensor, offsets: &Arc<Vec<usize>>) -> Result<GradTensor> {
        let shape = a.shape().to_vec();
        let (rows, cols) = match shape.len() {
            1 => (shape[0], 1),
            2 => (shape[0], shape[1]),
            _ => return Err(Error::dim("segment_sum expects rank 1 or 2")),
        };
        check_offsets(offsets, rows)?;
        let b = offsets.len() - 1;
        let vals = a.with_values(|av| {
            let mut out = vec![0.0; b * cols];
            for (seg, w) in offsets.windows(2).enumerate() {
                for p in w[0]..w[1] {
                    for c in 0..cols {
                        out[seg * cols + c] += av[p * cols + c];
                    }
                }
            }
            out
        });
        let out_shape = if shape.len() == 1 { vec![b] } else { vec![b, cols] };
        let track = self.track(&[a]);
        let out = GradTensor::from_op(out_shape, vals, track);
        if track {
            let (a2, o2) = (a.clone(), out.clone());
            let offs = Arc::clone(offsets);
            self.push(Box::new(move |pass| {
                let Some(g) = pass.flow_of(&o2) else { return };
                pass.add_flow(&a2, |buf| {
                    for (seg, w) in offs.windows(2).enumerate() {
                        for p in w[0]..w[1] {
                            for c in 0..cols {
                                buf[p * cols + c] += g[seg * cols + c];
                            }
                        }
                    }
                });
            }));
        }
        Ok(out)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn check_offsets(offsets: &[usize], len: usize) -> Result<()> {
    if offsets.first() != Some(&0) || offsets.last() != Some(&len) {
        return Err(Error::contract(format!(
            "segment offsets must span [0, {}], got {:?} .. {:?}",
            len,
            offsets.first(),
            offsets.last()
        )));
    }
    if offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::contract("segment offsets must be non-decreasing"));
    }
    Ok(())
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Exp => x.exp(),
            Activation::Sqrt => x.sqrt(),
            Activation::Neg => -x,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

/// How `b` lines up against `a` in a binary op.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Align {
    Same,
    AScalar,
    BScalar,
    /// `b.shape` equals a trailing suffix of `a.shape`.
    BTrailing,
}

struct Broadcast {
    align: Align,
    out_shape: Vec<usize>,
    b_len: usize,
}

impl Broadcast {
    fn plan(a: &[usize], b: &[usize], kind: BinKind) -> Result<Self> {
        let an: usize = a.iter().product();
        let bn: usize = b.iter().product();
        let align = if a == b {
            Align::Same
        } else if bn == 1 {
            Align::BScalar
        } else if an == 1 && kind != BinKind::Sub {
            Align::AScalar
        } else if b.len() < a.len() && a[a.len() - b.len()..] == *b {
            Align::BTrailing
        } else {
            return Err(Error::dim(format!(
                "incompatible shapes {:?} and {:?}",
                a, b
            )));
        };
        let out_shape = if align == Align::AScalar { b.to_vec() } else { a.to_vec() };
        Ok(Broadcast {
            align,
            out_shape,
            b_len: bn,
        })
    }

    fn forward(&self, av: &[f64], bv: &[f64], kind: BinKind) -> Vec<f64> {
        let op = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        match self.align {
            Align::Same => av.iter().zip(bv).map(|(&x, &y)| op(x, y)).collect(),
            Align::BScalar => av.iter().map(|&x| op(x, bv[0])).collect(),
            Align::AScalar => bv.iter().map(|&y| op(av[0], y)).collect(),
            Align::BTrailing => {
                let bn = self.b_len;
                av.iter()
                    .enumerate()
                    .map(|(i, &x)| op(x, bv[i % bn]))
                    .collect()
            }
        }
    }

    /// Accumulate d(out)/d(a) into `buf`; `other` carries b's values for Mul.
    fn back_into_a(&self, buf: &mut [f64], g: &[f64], other: Option<&[f64]>) {
        match (self.align, other) {
            (Align::AScalar, None) => buf[0] += g.iter().sum::<f64>(),
            (Align::AScalar, Some(bv)) => {
                buf[0] += g.iter().zip(bv).map(|(&gi, &b)| gi * b).sum::<f64>()
            }
            (_, None) => axpy(buf, g),
            (Align::Same, Some(bv)) => {
                for i in 0..buf.len() {
                    buf[i] += g[i] * bv[i];
                }
            }
            (Align::BScalar, Some(bv)) => {
                for i in 0..buf.len() {
                    buf[i] += g[i] * bv[0];
                }
            }
            (Align::BTrailing, Some(bv)) => {
                let bn = self.b_len;
                for i in 0..buf.len() {
                    buf[i] += g[i] * bv[i % bn];
                }
            }
        }
    }

    /// Accumulate d(out)/d(b) into `buf`; `other` carries a's values for Mul.
    fn back_into_b(&self, buf: &mut [f64], g: &[f64], other: Option<&[f64]>) {
        match (self.align, other) {
            (Align::Same, None) => axpy(buf, g),
            (Align::Same, Some(av)) => {
                for i in 0..buf.len() {
                    buf[i] += g[i] * av[i];
                }
            }
            (Align::BScalar, None) => buf[0] += g.iter().sum::<f64>(),
            (Align::BScalar, Some(av)) => {
                buf[0] += g.iter().zip(av).map(|(&gi, &a)| gi * a).sum::<f64>()
            }
            (Align::AScalar, None) => axpy(buf, g),
            (Align::AScalar, Some(av)) => {
                for i in 0..buf.len() {
                    buf[i] += g[i] * av[0];
                }
            }
            (Align::BTrailing, None) => {
                let bn = self.b_len;
                for (i, &gi) in g.iter().enumerate() {
                    buf[i % bn] += gi;
                }
            }
            (Align::BTrailing, Some(av)) => {
                let bn = self.b_len;
                for (i, &gi) in g.iter().enumerate() {
                    buf[i % bn] += gi * av[i];
                }
            }
        }
    }
}

fn axpy(buf: &mut [f64], g: &[f64]) {
    debug_assert_eq!(buf.len(), g.len());
    for (b, &v) in buf.iter_mut().zip(g) {
        *b += v;
    }
}

const PAR_FLOP_THRESHOLD: usize = 1 << 17;

/// `(m,k)·(k,n)`, row-major. ikj loop order keeps the inner loop contiguous.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let body = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| body(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            body(i, orow);
        }
    }
    out
}

/// `g(m,n) · b(k,n)ᵀ -> (m,k)`: rows of g dotted with rows of b.
pub(crate) fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    let body = |i: usize, orow: &mut [f64]| {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            orow[kk] = acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(k)
            .enumerate()
            .for_each(|(i, orow)| body(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(k).enumerate() {
            body(i, orow);
        }
    }
    out
}

/// `a(m,k)ᵀ · g(m,n) -> (k,n)`.
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(kk, orow)| {
            for i in 0..m {
                let aik = a[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let grow = &g[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * grow[j];
                }
            }
        });
    } else {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for kk in 0..k {
                let aik = a[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let orow = &mut out[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += aik * grow[j];
                }
            }
        }
    }
    out
}
