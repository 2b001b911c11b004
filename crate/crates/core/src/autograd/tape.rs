//! Arena-based reverse-mode differentiation.
//!
//! A `Tape` records each operation as a node holding its output value and the
//! ids of its inputs. Nodes are append-only, so ids are already a topological
//! order and the backward sweep is a single reverse iteration. Gradients flow
//! only through nodes that (transitively) depend on a trainable parameter;
//! everything else is skipped.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng::RngStream;
use crate::tensor::FeatureMap;

use super::ops;

/// Node id on a tape. Valid only for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tid(pub usize);

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

enum Op {
    /// Constant input or trainable parameter (grads harvested per `ParamId`).
    Leaf { param: Option<ParamId> },
    Conv2d { x: Tid, w: Tid, b: Option<Tid>, pad: (usize, usize), stride: usize },
    MaxPool2 { x: Tid },
    Tanh { x: Tid },
    Sigmoid { x: Tid },
    SoftmaxSpatial { x: Tid },
    Linear { x: Tid, w: Tid, b: Tid },
    Dropout { x: Tid, mask: Vec<f64> },
    Add { a: Tid, b: Tid },
    Mul { a: Tid, b: Tid },
    /// x[n,c,h,w] * map[n,1,h,w], map broadcast across channels.
    MulMap { x: Tid, map: Tid },
    SliceChannels { x: Tid, from: usize, to: usize },
    Flatten { x: Tid },
    ConcatRows { a: Tid, b: Tid },
    MeanRows { x: Tid },
    L2NormalizeRows { x: Tid, eps: f64 },
    AddN { xs: Vec<Tid> },
    SoftmaxCrossEntropy { logits: Tid, probs: Vec<f64>, label: usize },
    Square { x: Tid },
    SumAll { x: Tid },
    MulConst { x: Tid, k: f64 },
}

struct Node {
    value: FeatureMap,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward sweep.
pub struct Grads {
    grads: Vec<Option<FeatureMap>>,
}

impl Grads {
    pub fn get(&self, t: Tid) -> Option<&FeatureMap> {
        self.grads[t.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: Tid) -> &FeatureMap {
        &self.nodes[t.0].value
    }

    fn needs(&self, t: Tid) -> bool {
        self.nodes[t.0].needs_grad
    }

    fn push(&mut self, value: FeatureMap, op: Op, needs_grad: bool) -> Tid {
        self.nodes.push(Node { value, op, needs_grad });
        Tid(self.nodes.len() - 1)
    }

    /// Records a constant input. No gradient flows into it.
    pub fn leaf(&mut self, value: FeatureMap) -> Tid {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Records a trainable parameter by copying its current values.
    pub fn param(&mut self, ps: &ParamSet, id: ParamId) -> Tid {
        let value = ps.as_feature_map(id);
        self.push(value, Op::Leaf { param: Some(id) }, true)
    }

    pub fn conv2d(
        &mut self,
        x: Tid,
        w: Tid,
        b: Option<Tid>,
        pad: (usize, usize),
        stride: usize,
    ) -> Result<Tid> {
        let value = ops::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|t| self.value(t)),
            pad,
            stride,
        )?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|t| self.needs(t));
        Ok(self.push(value, Op::Conv2d { x, w, b, pad, stride }, needs))
    }

    pub fn maxpool2(&mut self, x: Tid) -> Result<Tid> {
        let value = ops::maxpool2_forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool2 { x }, needs))
    }

    pub fn tanh(&mut self, x: Tid) -> Tid {
        let value = ops::tanh_forward(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::Tanh { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Tid) -> Tid {
        let value = ops::sigmoid_forward(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid { x }, needs)
    }

    pub fn softmax_spatial(&mut self, x: Tid) -> Result<Tid> {
        let value = ops::softmax_spatial_forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SoftmaxSpatial { x }, needs))
    }

    pub fn linear(&mut self, x: Tid, w: Tid, b: Tid) -> Result<Tid> {
        let value = ops::linear_forward(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// Inverted dropout: each element is zeroed with probability `p`,
    /// survivors scaled by 1/(1-p). In `Eval` phase (or p == 0) the mask is
    /// all ones and the output equals the input exactly.
    pub fn dropout(&mut self, x: Tid, p: f64, phase: Phase, rng: &mut RngStream) -> Result<Tid> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        let xv = self.value(x);
        let mask: Vec<f64> = if phase == Phase::Eval || p == 0.0 {
            vec![1.0; xv.len()]
        } else {
            let keep = 1.0 / (1.0 - p);
            (0..xv.len())
                .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
                .collect()
        };
        let mut value = xv.clone();
        for (v, m) in value.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        let needs = self.needs(x);
        Ok(self.push(value, Op::Dropout { x, mask }, needs))
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut value = av.clone();
        for (v, o) in value.data.iter_mut().zip(&bv.data) {
            *v += o;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut value = av.clone();
        for (v, o) in value.data.iter_mut().zip(&bv.data) {
            *v *= o;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn mul_map(&mut self, x: Tid, map: Tid) -> Result<Tid> {
        let (xv, mv) = (self.value(x), self.value(map));
        if mv.n != xv.n || mv.c != 1 || mv.h != xv.h || mv.w != xv.w {
            return Err(Error::shape(
                "mul_map",
                format!("map {:?} does not broadcast over {:?}", mv.shape(), xv.shape()),
            ));
        }
        let (n, c, h, w) = xv.shape();
        let hw = h * w;
        let mut value = xv.clone();
        for ni in 0..n {
            let m = &mv.data[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let row = &mut value.data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for (v, mm) in row.iter_mut().zip(m) {
                    *v *= mm;
                }
            }
        }
        let needs = self.needs(x) || self.needs(map);
        Ok(self.push(value, Op::MulMap { x, map }, needs))
    }

    pub fn slice_channels(&mut self, x: Tid, from: usize, to: usize) -> Result<Tid> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.shape();
        if from >= to || to > c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {from}..{to} invalid for {c} channels"),
            ));
        }
        let span = to - from;
        let hw = h * w;
        let mut value = FeatureMap::zeros(n, span, h, w);
        for ni in 0..n {
            let src = &xv.data[(ni * c + from) * hw..(ni * c + to) * hw];
            value.data[ni * span * hw..(ni + 1) * span * hw].copy_from_slice(src);
        }
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceChannels { x, from, to }, needs))
    }

    /// [n, c, h, w] -> [n, c*h*w] row matrix. Row-major layout makes this a
    /// relabeling of the same data.
    pub fn flatten(&mut self, x: Tid) -> Tid {
        let xv = self.value(x);
        let f = xv.c * xv.h * xv.w;
        let value = FeatureMap::matrix(xv.n, f, xv.data.clone()).unwrap();
        let needs = self.needs(x);
        self.push(value, Op::Flatten { x }, needs)
    }

    pub fn concat_rows(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        let (av, bv) = (self.value(a), self.value(b));
        let fa = av.c * av.h * av.w;
        let fb = bv.c * bv.h * bv.w;
        if fa != fb {
            return Err(Error::shape("concat_rows", format!("row widths {fa} vs {fb}")));
        }
        let mut data = Vec::with_capacity((av.n + bv.n) * fa);
        data.extend_from_slice(&av.data);
        data.extend_from_slice(&bv.data);
        let value = FeatureMap::matrix(av.n + bv.n, fa, data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatRows { a, b }, needs))
    }

    /// Column means over rows, order-independent bit for bit.
    pub fn mean_rows(&mut self, x: Tid) -> Tid {
        let value = ops::mean_rows_forward(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::MeanRows { x }, needs)
    }

    pub fn l2_normalize_rows(&mut self, x: Tid, eps: f64) -> Tid {
        let value = ops::l2_normalize_rows_forward(self.value(x), eps);
        let needs = self.needs(x);
        self.push(value, Op::L2NormalizeRows { x, eps }, needs)
    }

    pub fn add_n(&mut self, xs: &[Tid]) -> Result<Tid> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("add_n", "empty operand list"))?;
        let mut value = self.value(*first).clone();
        for &t in &xs[1..] {
            let tv = self.value(t);
            if !tv.same_shape(&value) {
                return Err(Error::shape("add_n", format!("{:?} vs {:?}", tv.shape(), value.shape())));
            }
            for (v, o) in value.data.iter_mut().zip(&tv.data) {
                *v += o;
            }
        }
        let needs = xs.iter().any(|&t| self.needs(t));
        Ok(self.push(value, Op::AddN { xs: xs.to_vec() }, needs))
    }

    /// Scalar cross-entropy of a [1, C] logit row against `label`.
    pub fn softmax_cross_entropy(&mut self, logits: Tid, label: usize) -> Result<Tid> {
        let lv = self.value(logits);
        if lv.n != 1 {
            return Err(Error::shape("classification_loss", format!("expected 1 row, got {}", lv.n)));
        }
        let (loss, probs) = ops::softmax_ce_forward(lv, label)?;
        let needs = self.needs(logits);
        Ok(self.push(
            FeatureMap::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, probs, label },
            needs,
        ))
    }

    pub fn square(&mut self, x: Tid) -> Tid {
        let mut value = self.value(x).clone();
        for v in &mut value.data {
            *v *= *v;
        }
        let needs = self.needs(x);
        self.push(value, Op::Square { x }, needs)
    }

    pub fn sum_all(&mut self, x: Tid) -> Tid {
        let s: f64 = self.value(x).data.iter().sum();
        let needs = self.needs(x);
        self.push(FeatureMap::scalar(s), Op::SumAll { x }, needs)
    }

    pub fn mul_const(&mut self, x: Tid, k: f64) -> Tid {
        let mut value = self.value(x).clone();
        for v in &mut value.data {
            *v *= k;
        }
        let needs = self.needs(x);
        self.push(value, Op::MulConst { x, k }, needs)
    }

    /// Reverse sweep from explicit seeds. Each seed attaches an upstream
    /// gradient (shape-matched to the node's value) at an arbitrary node;
    /// multiple seeds compose additively, which is how a scalar loss on one
    /// head and a hand-computed vector gradient on another share one sweep.
    pub fn backward(&self, seeds: &[(Tid, FeatureMap)]) -> Result<Grads> {
        let mut grads: Vec<Option<FeatureMap>> = (0..self.nodes.len()).map(|_| None).collect();
        for (t, seed) in seeds {
            if !seed.same_shape(&self.nodes[t.0].value) {
                return Err(Error::shape(
                    "backward",
                    format!("seed {:?} vs node {:?}", seed.shape(), self.nodes[t.0].value.shape()),
                ));
            }
            match &mut grads[t.0] {
                Some(g) => {
                    for (gv, sv) in g.data.iter_mut().zip(&seed.data) {
                        *gv += sv;
                    }
                }
                slot => *slot = Some(seed.clone()),
            }
        }

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let gout = grads[i].take().unwrap();
            self.backstep(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Grads { grads })
    }

    /// Takes the delta by value: the first contribution moves the buffer into
    /// the slot instead of copying it.
    fn accumulate(&self, grads: &mut [Option<FeatureMap>], t: Tid, delta: FeatureMap) {
        if !self.nodes[t.0].needs_grad {
            return;
        }
        match &mut grads[t.0] {
            Some(g) => {
                for (gv, dv) in g.data.iter_mut().zip(&delta.data) {
                    *gv += dv;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn accumulate_ref(&self, grads: &mut [Option<FeatureMap>], t: Tid, delta: &FeatureMap) {
        if !self.nodes[t.0].needs_grad {
            return;
        }
        match &mut grads[t.0] {
            Some(g) => {
                for (gv, dv) in g.data.iter_mut().zip(&delta.data) {
                    *gv += dv;
                }
            }
            slot => *slot = Some(delta.clone()),
        }
    }

    /// Builds a delta with `shape_of`'s shape from one zipped pass over gout
    /// and a second operand, avoiding the clone-then-rescale double write.
    fn mapped(shape_of: &FeatureMap, data: Vec<f64>) -> FeatureMap {
        FeatureMap::from_vec(shape_of.n, shape_of.c, shape_of.h, shape_of.w, data)
            .expect("delta shape matches source")
    }

    fn grad_slot<'a>(
        &self,
        grads: &'a mut [Option<FeatureMap>],
        t: Tid,
    ) -> Option<&'a mut FeatureMap> {
        if !self.nodes[t.0].needs_grad {
            return None;
        }
        let shape = self.nodes[t.0].value.shape();
        Some(
            grads[t.0]
                .get_or_insert_with(|| FeatureMap::zeros(shape.0, shape.1, shape.2, shape.3)),
        )
    }

    fn backstep(&self, i: usize, gout: &FeatureMap, grads: &mut [Option<FeatureMap>]) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Conv2d { x, w, b, pad, stride } => {
                let need_dx = self.needs(*x);
                let need_db = b.is_some_and(|t| self.needs(t));
                let g = ops::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gout,
                    *pad,
                    *stride,
                    need_dx,
                    need_db,
                );
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, g.dw);
                if let (Some(bt), Some(db)) = (b, &g.db) {
                    if let Some(slot) = self.grad_slot(grads, *bt) {
                        for (gv, dv) in slot.data.iter_mut().zip(db) {
                            *gv += dv;
                        }
                    }
                }
            }
            Op::MaxPool2 { x } => {
                if let Some(slot) = self.grad_slot(grads, *x) {
                    // Split borrows: recompute argmax against the stored input.
                    ops::maxpool2_backward(&self.nodes[x.0].value, gout, slot);
                }
            }
            Op::Tanh { x } => {
                if self.needs(*x) {
                    let y = &self.nodes[i].value;
                    let data = gout.data.iter().zip(&y.data).map(|(g, yv)| g * (1.0 - yv * yv)).collect();
                    self.accumulate(grads, *x, Self::mapped(gout, data));
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let y = &self.nodes[i].value;
                    let data = gout.data.iter().zip(&y.data).map(|(g, yv)| g * (yv * (1.0 - yv))).collect();
                    self.accumulate(grads, *x, Self::mapped(gout, data));
                }
            }
            Op::SoftmaxSpatial { x } => {
                if let Some(slot) = self.grad_slot(grads, *x) {
                    ops::softmax_spatial_backward(&self.nodes[i].value, gout, slot);
                }
            }
            Op::Linear { x, w, b } => {
                let need_dx = self.needs(*x);
                let g = ops::linear_backward(self.value(*x), self.value(*w), gout, need_dx);
                if let Some(dx) = &g.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, &g.dw);
                if let Some(slot) = self.grad_slot(grads, *b) {
                    for (gv, dv) in slot.data.iter_mut().zip(&g.db) {
                        *gv += dv;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let data = gout.data.iter().zip(mask).map(|(g, m)| g * m).collect();
                    self.accumulate(grads, *x, Self::mapped(gout, data));
                }
            }
            Op::Add { a, b } => {
                self.accumulate_ref(grads, *a, gout);
                self.accumulate_ref(grads, *b, gout);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let data = gout.data.iter().zip(&self.value(*b).data).map(|(g, bv)| g * bv).collect();
                    self.accumulate(grads, *a, Self::mapped(gout, data));
                }
                if self.needs(*b) {
                    let data = gout.data.iter().zip(&self.value(*a).data).map(|(g, av)| g * av).collect();
                    self.accumulate(grads, *b, Self::mapped(gout, data));
                }
            }
            Op::MulMap { x, map } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.shape();
                let hw = h * w;
                if self.needs(*x) {
                    let mv = self.value(*map);
                    let mut d = gout.clone();
                    for ni in 0..n {
                        let m = &mv.data[ni * hw..(ni + 1) * hw];
                        for ci in 0..c {
                            let row = &mut d.data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            for (dv, mm) in row.iter_mut().zip(m) {
                                *dv *= mm;
                            }
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
                if self.needs(*map) {
                    let mut d = FeatureMap::zeros(n, 1, h, w);
                    for ni in 0..n {
                        let dm = &mut d.data[ni * hw..(ni + 1) * hw];
                        for ci in 0..c {
                            let xrow = &xv.data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            let grow = &gout.data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            for j in 0..hw {
                                dm[j] += xrow[j] * grow[j];
                            }
                        }
                    }
                    self.accumulate(grads, *map, d);
                }
            }
            Op::SliceChannels { x, from, to } => {
                if let Some(slot) = self.grad_slot(grads, *x) {
                    let (n, c, h, w) = (slot.n, slot.c, slot.h, slot.w);
                    let hw = h * w;
                    let span = to - from;
                    for ni in 0..n {
                        let dst = &mut slot.data[(ni * c + from) * hw..(ni * c + to) * hw];
                        let src = &gout.data[ni * span * hw..(ni + 1) * span * hw];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Flatten { x } => {
                if let Some(slot) = self.grad_slot(grads, *x) {
                    for (d, s) in slot.data.iter_mut().zip(&gout.data) {
                        *d += s;
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let na = self.value(*a).len();
                if self.needs(*a) {
                    let av = self.value(*a);
                    let mut d = FeatureMap::zeros(av.n, av.c, av.h, av.w);
                    d.data.copy_from_slice(&gout.data[..na]);
                    self.accumulate(grads, *a, &d);
                }
                if self.needs(*b) {
                    let bv = self.value(*b);
                    let mut d = FeatureMap::zeros(bv.n, bv.c, bv.h, bv.w);
                    d.data.copy_from_slice(&gout.data[na..]);
                    self.accumulate(grads, *b, &d);
                }
            }
            Op::MeanRows { x } => {
                if let Some(slot) = self.grad_slot(grads, *x) {
                    let rows = slot.n;
                    let f = slot.c * slot.h * slot.w;
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for j in 0..f {
                            slot.data[r * f + j] += gout.data[j] * inv;
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, eps } => {
                if let Some(slot) = self.grad_slot(grads, *x) {
                    ops::l2_normalize_rows_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[i].value,
                        gout,
                        *eps,
                        slot,
                    );
                }
            }
            Op::AddN { xs } => {
                for &t in xs {
                    self.accumulate(grads, t, gout);
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, label } => {
                if let Some(slot) = self.grad_slot(grads, *logits) {
                    let g = gout.item();
                    for (j, p) in probs.iter().enumerate() {
                        let onehot = if j == *label { 1.0 } else { 0.0 };
                        slot.data[j] += g * (p - onehot);
                    }
                }
            }
            Op::Square { x } => {
                if self.needs(*x) {
                    let mut d = gout.clone();
                    for (dv, xv) in d.data.iter_mut().zip(&self.value(*x).data) {
                        *dv *= 2.0 * xv;
                    }
                    self.accumulate(grads, *x, &d);
                }
            }
            Op::SumAll { x } => {
                if let Some(slot) = self.grad_slot(grads, *x) {
                    let g = gout.item();
                    for v in &mut slot.data {
                        *v += g;
                    }
                }
            }
            Op::MulConst { x, k } => {
                if self.needs(*x) {
                    let mut d = gout.clone();
                    for dv in &mut d.data {
                        *dv *= k;
                    }
                    self.accumulate(grads, *x, &d);
                }
            }
        }
    }

    /// Adds every parameter-leaf gradient from `grads` into the corresponding
    /// parameter's gradient accumulator.
    pub fn harvest_param_grads(&self, grads: &Grads, ps: &mut ParamSet) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &grads.grads[i] {
                    ps.accumulate_grad(id, &g.data);
                }
            }
        }
    }
}
