//! Tape-based reverse mode over batched 2-D values.
//!
//! Every node value is a `batch x features` matrix. Sequences use a
//! position-major layout: feature index `t * channels + c` holds channel `c`
//! at position `t`. Ops cache exactly what their backward pass needs.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{dim_err, NumError, Result};
use crate::tensor::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => pre.mapv(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Linear => pre.clone(),
        }
    }

    /// Multiplies `grad` by the activation derivative. ReLU uses subgradient 0 at 0.
    fn backprop(self, pre: &Array2<f64>, grad: &mut Array2<f64>) {
        if self == Activation::Relu {
            ndarray::Zip::from(grad).and(pre).for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
        }
    }
}

/// Geometry of a position-major sequence batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqShape {
    pub channels: usize,
    pub len: usize,
}

impl SeqShape {
    pub fn new(channels: usize, len: usize) -> Self {
        Self { channels, len }
    }

    pub fn width(&self) -> usize {
        self.channels * self.len
    }
}

enum Op {
    Input,
    Dense {
        x: Var,
        w: ParamId,
        b: ParamId,
        act: Activation,
        pre: Array2<f64>,
    },
    Conv1d {
        x: Var,
        k: ParamId,
        b: ParamId,
        act: Activation,
        input: SeqShape,
        width: usize,
        cols: Array2<f64>,
        pre: Array2<f64>,
    },
    MaxPool {
        x: Var,
        in_width: usize,
        argmax: Vec<usize>,
    },
    ConvPool {
        x: Var,
        k: ParamId,
        b: ParamId,
        act: Activation,
        input: SeqShape,
        width: usize,
        pool: usize,
        /// Start row in `cols`/`pre` of each batch row's live conv positions.
        offsets: Vec<usize>,
        conv_prefix: Vec<usize>,
        in_prefix: Vec<usize>,
        tail_in: Option<Vec<f64>>,
        tail_pre: Vec<f64>,
        /// Winning conv position per pooled output entry.
        argmax: Vec<usize>,
        cols: Array2<f64>,
        pre: Array2<f64>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    RowDot {
        a: Var,
        b: Var,
    },
    AddScalar {
        x: Var,
        bias: ParamId,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    label: String,
    value: Array2<f64>,
    needs_grad: bool,
    op: Op,
    live: Option<Live>,
}

/// Sequence rows whose positions `>= prefix[b]` all hold one shared `tail` vector.
#[derive(Clone)]
struct Live {
    prefix: Vec<usize>,
    tail: Option<Vec<f64>>,
}

/// Records a forward pass so gradients can be pulled back through it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of every tape node reached by a backward pass.
pub struct Gradients {
    per_node: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.per_node.get(var.0).and_then(Option::as_ref)
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

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    pub fn label(&self, var: Var) -> &str {
        &self.nodes[var.0].label
    }

    fn push(&mut self, label: impl Into<String>, value: Array2<f64>, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            label: label.into(),
            value,
            needs_grad,
            op,
            live: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// A constant input; its gradient is not tracked.
    pub fn input(&mut self, label: impl Into<String>, value: Array2<f64>) -> Var {
        self.push(label, value, false, Op::Input)
    }

    /// An input whose gradient is reported by [`Tape::backward`].
    pub fn input_with_grad(&mut self, label: impl Into<String>, value: Array2<f64>) -> Var {
        self.push(label, value, true, Op::Input)
    }

    /// `act(x W^T + b)` with `W` shaped `[out, in]` and `b` shaped `[out]`.
    pub fn dense(
        &mut self,
        label: impl Into<String>,
        store: &ParamStore,
        x: Var,
        w: ParamId,
        b: ParamId,
        act: Activation,
    ) -> Result<Var> {
        let wt = store.get(w);
        let bt = store.get(b);
        let xv = &self.nodes[x.0].value;
        if wt.shape().len() != 2 || wt.shape()[1] != xv.ncols() {
            return Err(dim_err(
                "dense",
                format!("weight shape {:?} vs input width {}", wt.shape(), xv.ncols()),
            ));
        }
        if bt.len() != wt.shape()[0] {
            return Err(dim_err(
                "dense",
                format!("bias length {} vs {} output rows", bt.len(), wt.shape()[0]),
            ));
        }
        let wm = wt.as_matrix();
        let mut pre = Array2::<f64>::zeros((xv.nrows(), wm.nrows()));
        general_mat_mul(1.0, xv, &wm.t(), 0.0, &mut pre);
        let bias = ArrayView2::from_shape((1, bt.len()), bt.values()).expect("bias row");
        pre += &bias;
        let value = act.apply(&pre);
        let pre = if act == Activation::Relu { pre } else { Array2::zeros((0, 0)) };
        Ok(self.push(label, value, true, Op::Dense { x, w, b, act, pre }))
    }

    /// Declares that in row `b` of a sequence value every position from
    /// `prefix[b]` on holds the same vector for all rows. [`Tape::conv_pool`]
    /// then computes only the live prefix and treats the tail in closed form.
    /// Gradients flowing into such a value keep the tail's total at the first
    /// tail position of each row instead of spreading it per position.
    pub fn mark_live(&mut self, x: Var, shape: SeqShape, prefix: Vec<usize>) -> Result<()> {
        let node = &self.nodes[x.0];
        let (batch, ch) = (node.value.nrows(), shape.channels);
        if node.value.ncols() != shape.width() || prefix.len() != batch {
            return Err(dim_err("mark_live", format!("{} prefixes for a {:?} batch of {batch}", prefix.len(), shape)));
        }
        if prefix.iter().any(|&p| p > shape.len) {
            return Err(dim_err("mark_live", "prefix longer than the sequence"));
        }
        let mut tail: Option<Vec<f64>> = None;
        for (bi, &p) in prefix.iter().enumerate() {
            let row = node.value.row(bi);
            let row = row.as_slice().expect("standard layout");
            for t in p..shape.len {
                let v = &row[t * ch..(t + 1) * ch];
                match &tail {
                    None => tail = Some(v.to_vec()),
                    Some(expected) if expected.as_slice() != v => {
                        return Err(NumError::State(format!(
                            "row {bi} position {t} differs from the shared tail"
                        )))
                    }
                    _ => {}
                }
            }
        }
        self.nodes[x.0].live = Some(Live { prefix, tail });
        Ok(())
    }

    /// Stride-1 causal convolution: position `t` sees inputs `t-width+1 ..= t`,
    /// with zeros left of the sequence start. Kernels are `[filters, width, channels]`.
    pub fn conv1d_causal(
        &mut self,
        label: impl Into<String>,
        store: &ParamStore,
        x: Var,
        input: SeqShape,
        k: ParamId,
        b: ParamId,
        act: Activation,
    ) -> Result<Var> {
        let kt = store.get(k);
        let xv = &self.nodes[x.0].value;
        if input.len == 0 || input.channels == 0 {
            return Err(dim_err("conv1d_causal", "zero-length sequence"));
        }
        if xv.ncols() != input.width() {
            return Err(dim_err(
                "conv1d_causal",
                format!("input width {} vs sequence {:?}", xv.ncols(), input),
            ));
        }
        let &[filters, width, channels] = kt.shape() else {
            return Err(dim_err("conv1d_causal", format!("kernel shape {:?}", kt.shape())));
        };
        if width == 0 || channels != input.channels {
            return Err(dim_err(
                "conv1d_causal",
                format!("kernel shape {:?} vs {} input channels", kt.shape(), input.channels),
            ));
        }
        if store.get(b).len() != filters {
            return Err(dim_err("conv1d_causal", "bias length must equal filter count"));
        }
        let batch = xv.nrows();
        let (len, ch) = (input.len, input.channels);
        let span = width * ch;
        let mut cols = Array2::<f64>::zeros((batch * len, span));
        for bi in 0..batch {
            let row = xv.row(bi);
            let row = row.as_slice().expect("standard layout");
            for t in 0..len {
                let mut dst = cols.row_mut(bi * len + t);
                let dst = dst.as_slice_mut().expect("standard layout");
                // window start in positions; negative part stays zero
                let start = t as isize - (width as isize - 1);
                let skip = (-start).max(0) as usize;
                let src_from = (start + skip as isize) as usize * ch;
                dst[skip * ch..].copy_from_slice(&row[src_from..(t + 1) * ch]);
            }
        }
        let km = ArrayView2::from_shape((filters, span), kt.values()).expect("kernel matrix");
        let mut pre = Array2::<f64>::zeros((batch * len, filters));
        general_mat_mul(1.0, &cols, &km.t(), 0.0, &mut pre);
        let bias = ArrayView2::from_shape((1, filters), store.get(b).values()).expect("bias row");
        pre += &bias;
        let value = act
            .apply(&pre)
            .into_shape_with_order((batch, len * filters))
            .expect("position-major reshape");
        Ok(self.push(
            label,
            value,
            true,
            Op::Conv1d {
                x,
                k,
                b,
                act,
                input,
                width,
                cols,
                pre,
            },
        ))
    }

    /// Non-overlapping max pooling with `stride == pool`. A trailing partial
    /// window is pooled over the entries it has, so the output length is
    /// `ceil(len / pool)`. Ties resolve to the earliest position.
    pub fn maxpool1d(
        &mut self,
        label: impl Into<String>,
        x: Var,
        input: SeqShape,
        pool: usize,
        stride: usize,
    ) -> Result<(Var, SeqShape)> {
        if pool == 0 {
            return Err(NumError::Parameter {
                op: "maxpool1d",
                detail: "pool size must be positive".into(),
            });
        }
        if stride != pool {
            return Err(NumError::Parameter {
                op: "maxpool1d",
                detail: format!("stride {stride} must equal pool size {pool}"),
            });
        }
        let xv = &self.nodes[x.0].value;
        if input.len == 0 || xv.ncols() != input.width() {
            return Err(dim_err(
                "maxpool1d",
                format!("input width {} vs sequence {:?}", xv.ncols(), input),
            ));
        }
        let ch = input.channels;
        let out_len = input.len.div_ceil(pool);
        let batch = xv.nrows();
        let mut value = Array2::<f64>::zeros((batch, out_len * ch));
        let mut argmax = vec![0usize; batch * out_len * ch];
        for bi in 0..batch {
            let row = xv.row(bi);
            let row = row.as_slice().expect("standard layout");
            for w in 0..out_len {
                let lo = w * pool;
                let hi = ((w + 1) * pool).min(input.len);
                for c in 0..ch {
                    let mut best = lo * ch + c;
                    for t in lo + 1..hi {
                        let idx = t * ch + c;
                        if row[idx] > row[best] {
                            best = idx;
                        }
                    }
                    value[[bi, w * ch + c]] = row[best];
                    argmax[(bi * out_len + w) * ch + c] = best;
                }
            }
        }
        let needs = self.needs(x);
        let out = self.push(
            label,
            value,
            needs,
            Op::MaxPool {
                x,
                in_width: input.width(),
                argmax,
            },
        );
        Ok((out, SeqShape::new(ch, out_len)))
    }

    /// `maxpool1d(conv1d_causal(x))` with `stride == pool`, computed without
    /// materializing the convolution output. When `x` carries a live prefix
    /// (see [`Tape::mark_live`]) only positions whose window touches the
    /// prefix are convolved; the rest share one closed-form tail value.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_pool(
        &mut self,
        label: impl Into<String>,
        store: &ParamStore,
        x: Var,
        input: SeqShape,
        k: ParamId,
        b: ParamId,
        act: Activation,
        pool: usize,
    ) -> Result<(Var, SeqShape)> {
        if pool == 0 {
            return Err(NumError::Parameter {
                op: "conv_pool",
                detail: "pool size must be positive".into(),
            });
        }
        let kt = store.get(k);
        let xv = &self.nodes[x.0].value;
        if input.len == 0 || input.channels == 0 || xv.ncols() != input.width() {
            return Err(dim_err("conv_pool", format!("input width {} vs sequence {:?}", xv.ncols(), input)));
        }
        let &[filters, width, channels] = kt.shape() else {
            return Err(dim_err("conv_pool", format!("kernel shape {:?}", kt.shape())));
        };
        if width == 0 || channels != input.channels || store.get(b).len() != filters {
            return Err(dim_err("conv_pool", format!("kernel shape {:?} vs input {:?}", kt.shape(), input)));
        }
        let batch = xv.nrows();
        let (len, ch) = (input.len, input.channels);
        let live = self.nodes[x.0].live.clone().unwrap_or(Live {
            prefix: vec![len; batch],
            tail: None,
        });
        let span = width * ch;
        let conv_prefix: Vec<usize> = live.prefix.iter().map(|&p| (p + width - 1).min(len)).collect();
        let mut offsets = Vec::with_capacity(batch + 1);
        offsets.push(0);
        for p in &conv_prefix {
            offsets.push(offsets.last().unwrap() + p);
        }
        let total = offsets[batch];
        let mut cols = Array2::<f64>::zeros((total, span));
        for bi in 0..batch {
            let row = xv.row(bi);
            let row = row.as_slice().expect("standard layout");
            for t in 0..conv_prefix[bi] {
                let mut dst = cols.row_mut(offsets[bi] + t);
                let dst = dst.as_slice_mut().expect("standard layout");
                let start = t as isize - (width as isize - 1);
                let skip = (-start).max(0) as usize;
                let src_from = (start + skip as isize) as usize * ch;
                dst[skip * ch..].copy_from_slice(&row[src_from..(t + 1) * ch]);
            }
        }
        let km = ArrayView2::from_shape((filters, span), kt.values()).expect("kernel matrix");
        let bv = store.get(b).values();
        let mut pre = Array2::<f64>::zeros((total, filters));
        general_mat_mul(1.0, &cols, &km.t(), 0.0, &mut pre);
        pre += &ArrayView2::from_shape((1, filters), bv).expect("bias row");
        let post = act.apply(&pre);
        let tail_pre: Vec<f64> = match &live.tail {
            Some(tail) => (0..filters)
                .map(|f| {
                    let mut acc = bv[f];
                    for kk in 0..width {
                        for c in 0..ch {
                            acc += kt.values()[f * span + kk * ch + c] * tail[c];
                        }
                    }
                    acc
                })
                .collect(),
            None => vec![0.0; filters],
        };
        let tail_out: Vec<f64> = tail_pre
            .iter()
            .map(|&v| if act == Activation::Relu && v <= 0.0 { 0.0 } else { v })
            .collect();

        let out_len = len.div_ceil(pool);
        let out_prefix: Vec<usize> = conv_prefix.iter().map(|&p| p.div_ceil(pool).min(out_len)).collect();
        let mut value = Array2::<f64>::zeros((batch, out_len * filters));
        let mut argmax = vec![usize::MAX; batch * out_len * filters];
        for bi in 0..batch {
            let cp = conv_prefix[bi];
            let mut vrow = value.row_mut(bi);
            let vrow = vrow.as_slice_mut().expect("standard layout");
            let arow = &mut argmax[bi * out_len * filters..(bi + 1) * out_len * filters];
            for w in 0..out_len {
                let dst = &mut vrow[w * filters..(w + 1) * filters];
                if w >= out_prefix[bi] {
                    dst.copy_from_slice(&tail_out);
                    continue;
                }
                let lo = w * pool;
                let hi = ((w + 1) * pool).min(len);
                let amax = &mut arow[w * filters..(w + 1) * filters];
                for t in lo..hi {
                    let src = if t < cp {
                        post.row(offsets[bi] + t).to_slice().expect("standard layout")
                    } else {
                        tail_out.as_slice()
                    };
                    for f in 0..filters {
                        if t == lo || src[f] > dst[f] {
                            dst[f] = src[f];
                            amax[f] = t;
                        }
                    }
                }
            }
        }
        let out_tail = live.tail.as_ref().map(|_| tail_out);
        let var = self.push(
            label,
            value,
            true,
            Op::ConvPool {
                x,
                k,
                b,
                act,
                input,
                width,
                pool,
                offsets,
                conv_prefix,
                in_prefix: live.prefix,
                tail_in: live.tail,
                tail_pre,
                argmax,
                cols,
                pre,
            },
        );
        self.nodes[var.0].live = Some(Live {
            prefix: out_prefix,
            tail: out_tail,
        });
        Ok((var, SeqShape::new(filters, out_len)))
    }

    /// Column-wise concatenation of equal-batch values.
    pub fn concat(&mut self, label: impl Into<String>, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(dim_err("concat", "no inputs"));
        };
        let batch = self.nodes[first.0].value.nrows();
        if parts.iter().any(|p| self.nodes[p.0].value.nrows() != batch) {
            return Err(dim_err("concat", "batch sizes differ"));
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).map_err(|e| dim_err("concat", e.to_string()))?;
        let needs = parts.iter().any(|p| self.needs(*p));
        let parts = parts
            .iter()
            .map(|p| (*p, self.nodes[p.0].value.ncols()))
            .collect();
        Ok(self.push(label, value, needs, Op::Concat { parts }))
    }

    /// Per-row dot product of two `batch x p` values, giving `batch x 1`.
    pub fn row_dot(&mut self, label: impl Into<String>, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.dim() != bv.dim() {
            return Err(dim_err(
                "row_dot",
                format!("{:?} vs {:?}", av.dim(), bv.dim()),
            ));
        }
        let value = (av * bv).sum_axis(Axis(1)).insert_axis(Axis(1));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(label, value, needs, Op::RowDot { a, b }))
    }

    /// Adds a learnable scalar to a `batch x 1` value.
    pub fn add_scalar(
        &mut self,
        label: impl Into<String>,
        store: &ParamStore,
        x: Var,
        bias: ParamId,
    ) -> Result<Var> {
        if store.get(bias).len() != 1 {
            return Err(dim_err("add_scalar", "bias must hold one value"));
        }
        let c = store.get(bias).values()[0];
        let value = self.nodes[x.0].value.mapv(|v| v + c);
        Ok(self.push(label, value, true, Op::AddScalar { x, bias }))
    }

    /// Sum of every entry, as a `1 x 1` value.
    pub fn sum(&mut self, label: impl Into<String>, x: Var) -> Var {
        let total = self.nodes[x.0].value.sum();
        let needs = self.needs(x);
        self.push(label, Array2::from_elem((1, 1), total), needs, Op::Sum { x })
    }

    /// Reports the first node, in forward order, holding a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self
            .nodes
            .iter()
            .find(|n| n.value.iter().any(|v| !v.is_finite()))
        {
            Some(n) => Err(NumError::NonFinite {
                label: n.label.clone(),
            }),
            None => Ok(()),
        }
    }

    /// Backward pass from a `1 x 1` node with upstream gradient `upstream`.
    pub fn backward(&self, store: &mut ParamStore, root: Var, upstream: f64) -> Result<Gradients> {
        self.backward_with(store, root, Array2::from_elem((1, 1), upstream))
    }

    /// Backward pass seeded with an arbitrary same-shape upstream gradient.
    /// Parameter gradients accumulate into `store`.
    pub fn backward_with(
        &self,
        store: &mut ParamStore,
        root: Var,
        seed: Array2<f64>,
    ) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(NumError::State(format!(
                "node {} was never recorded (tape holds {} nodes)",
                root.0,
                self.nodes.len()
            )));
        }
        if seed.dim() != self.nodes[root.0].value.dim() {
            return Err(dim_err(
                "backward",
                format!(
                    "seed {:?} vs root value {:?}",
                    seed.dim(),
                    self.nodes[root.0].value.dim()
                ),
            ));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => grads[idx] = Some(g),
                Op::Dense { x, w, b, act, pre } => {
                    let mut dpre = g.clone();
                    act.backprop(pre, &mut dpre);
                    let xv = &self.nodes[x.0].value;
                    general_mat_mul(1.0, &dpre.t(), xv, 1.0, &mut store.get_mut(*w).grad_matrix_mut());
                    add_col_sums(store.get_mut(*b).grad_mut(), &dpre);
                    if self.needs(*x) {
                        let wm = store.get(*w).as_matrix();
                        let mut dx = Array2::<f64>::zeros(xv.dim());
                        general_mat_mul(1.0, &dpre, &wm, 0.0, &mut dx);
                        accumulate(&mut grads, *x, dx);
                    }
                    grads[idx] = Some(g);
                }
                Op::Conv1d {
                    x,
                    k,
                    b,
                    act,
                    input,
                    width,
                    cols,
                    pre,
                } => {
                    let filters = pre.ncols();
                    let mut dpre = g
                        .clone()
                        .into_shape_with_order((pre.nrows(), filters))
                        .expect("position-major reshape");
                    act.backprop(pre, &mut dpre);
                    let span = width * input.channels;
                    {
                        let kt = store.get_mut(*k);
                        let mut gk = ndarray::ArrayViewMut2::from_shape((filters, span), kt.grad_mut())
                            .expect("kernel grad");
                        general_mat_mul(1.0, &dpre.t(), cols, 1.0, &mut gk);
                    }
                    add_col_sums(store.get_mut(*b).grad_mut(), &dpre);
                    if self.needs(*x) {
                        let km = ArrayView2::from_shape((filters, span), store.get(*k).values())
                            .expect("kernel matrix");
                        let mut dcols = Array2::<f64>::zeros((pre.nrows(), span));
                        general_mat_mul(1.0, &dpre, &km, 0.0, &mut dcols);
                        let batch = self.nodes[x.0].value.nrows();
                        let (len, ch) = (input.len, input.channels);
                        let mut dx = Array2::<f64>::zeros((batch, len * ch));
                        for bi in 0..batch {
                            for t in 0..len {
                                let src = dcols.row(bi * len + t);
                                let start = t as isize - (*width as isize - 1);
                                for kk in 0..*width {
                                    let pos = start + kk as isize;
                                    if pos < 0 {
                                        continue;
                                    }
                                    let pos = pos as usize;
                                    for c in 0..ch {
                                        dx[[bi, pos * ch + c]] += src[kk * ch + c];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    grads[idx] = Some(g);
                }
                Op::MaxPool { x, in_width, argmax } => {
                    if self.needs(*x) {
                        let out_width = g.ncols();
                        let mut dx = Array2::<f64>::zeros((g.nrows(), *in_width));
                        for ((bi, o), &gv) in g.indexed_iter() {
                            dx[[bi, argmax[bi * out_width + o]]] += gv;
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    grads[idx] = Some(g);
                }
                Op::ConvPool {
                    x,
                    k,
                    b,
                    act,
                    input,
                    width,
                    pool,
                    offsets,
                    conv_prefix,
                    in_prefix,
                    tail_in,
                    tail_pre,
                    argmax,
                    cols,
                    pre,
                } => {
                    let filters = pre.ncols();
                    let (len, ch) = (input.len, input.channels);
                    let span = width * ch;
                    let batch = g.nrows();
                    let out_len = len.div_ceil(*pool);
                    let mut dpre = Array2::<f64>::zeros(pre.dim());
                    // per-row gradient reaching the shared tail value
                    let mut tail_g = Array2::<f64>::zeros((batch, filters));
                    for bi in 0..batch {
                        let grow = g.row(bi);
                        let grow = grow.as_slice().expect("standard layout");
                        let arow = &argmax[bi * out_len * filters..(bi + 1) * out_len * filters];
                        for (o, (&gv, &t)) in grow.iter().zip(arow).enumerate() {
                            let f = o % filters;
                            if t < conv_prefix[bi] {
                                dpre[[offsets[bi] + t, f]] += gv;
                            } else {
                                tail_g[[bi, f]] += gv;
                            }
                        }
                    }
                    act.backprop(pre, &mut dpre);
                    if *act == Activation::Relu {
                        for f in 0..filters {
                            if tail_pre[f] <= 0.0 {
                                tail_g.column_mut(f).fill(0.0);
                            }
                        }
                    }
                    let tail_total: Vec<f64> = (0..filters).map(|f| tail_g.column(f).sum()).collect();
                    {
                        let kt = store.get_mut(*k);
                        let mut gk = ndarray::ArrayViewMut2::from_shape((filters, span), kt.grad_mut())
                            .expect("kernel grad");
                        general_mat_mul(1.0, &dpre.t(), cols, 1.0, &mut gk);
                        if let Some(tail) = tail_in {
                            for f in 0..filters {
                                for kk in 0..*width {
                                    for c in 0..ch {
                                        gk[[f, kk * ch + c]] += tail_total[f] * tail[c];
                                    }
                                }
                            }
                        }
                    }
                    {
                        let gb = store.get_mut(*b).grad_mut();
                        add_col_sums(gb, &dpre);
                        for f in 0..filters {
                            gb[f] += tail_total[f];
                        }
                    }
                    if self.needs(*x) {
                        let kv = store.get(*k).values();
                        let km = ArrayView2::from_shape((filters, span), kv).expect("kernel matrix");
                        let mut dcols = Array2::<f64>::zeros((pre.nrows(), span));
                        general_mat_mul(1.0, &dpre, &km, 0.0, &mut dcols);
                        // a tail input sits under every kernel tap
                        let mut ksum = Array2::<f64>::zeros((filters, ch));
                        for f in 0..filters {
                            for kk in 0..*width {
                                for c in 0..ch {
                                    ksum[[f, c]] += kv[f * span + kk * ch + c];
                                }
                            }
                        }
                        let mut dx = Array2::<f64>::zeros((batch, len * ch));
                        for bi in 0..batch {
                            let mut drow = dx.row_mut(bi);
                            let drow = drow.as_slice_mut().expect("standard layout");
                            for t in 0..conv_prefix[bi] {
                                let src = dcols.row(offsets[bi] + t);
                                let src = src.as_slice().expect("standard layout");
                                let start = t as isize - (*width as isize - 1);
                                let skip = (-start).max(0) as usize;
                                let from = (start + skip as isize) as usize * ch;
                                for (d, v) in drow[from..(t + 1) * ch].iter_mut().zip(&src[skip * ch..]) {
                                    *d += v;
                                }
                            }
                            if in_prefix[bi] < len {
                                let at = in_prefix[bi] * ch;
                                for f in 0..filters {
                                    let gf = tail_g[[bi, f]];
                                    if gf != 0.0 {
                                        for c in 0..ch {
                                            drow[at + c] += gf * ksum[[f, c]];
                                        }
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    grads[idx] = Some(g);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for (p, w) in parts {
                        if self.needs(*p) {
                            let piece = g.slice(s![.., offset..offset + w]).to_owned();
                            accumulate(&mut grads, *p, piece);
                        }
                        offset += w;
                    }
                    grads[idx] = Some(g);
                }
                Op::RowDot { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, bv * &g);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, av * &g);
                    }
                    grads[idx] = Some(g);
                }
                Op::AddScalar { x, bias } => {
                    store.get_mut(*bias).grad_mut()[0] += g.sum();
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g.clone());
                    }
                    grads[idx] = Some(g);
                }
                Op::Sum { x } => {
                    if self.needs(*x) {
                        let dim = self.nodes[x.0].value.dim();
                        accumulate(&mut grads, *x, Array2::from_elem(dim, g[[0, 0]]));
                    }
                    grads[idx] = Some(g);
                }
            }
        }
        Ok(Gradients { per_node: grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], var: Var, delta: Array2<f64>) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn add_col_sums(target: &mut [f64], m: &Array2<f64>) {
    for row in m.rows() {
        for (t, v) in target.iter_mut().zip(row.iter()) {
            *t += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamTensor;
    use ndarray::array;

    fn identity_dense(store: &mut ParamStore, n: usize) -> (ParamId, ParamId) {
        let mut w = ParamTensor::zeros(&[n, n]);
        for i in 0..n {
            w.values_mut()[i * n + i] = 1.0;
        }
        (store.add("w", w), store.add("b", ParamTensor::zeros(&[n])))
    }

    #[test]
    fn dense_identity_relu_and_linear() {
        let mut store = ParamStore::new();
        let (w, b) = identity_dense(&mut store, 2);
        let mut tape = Tape::new();
        let x = tape.input("x", array![[-1.0, 2.0]]);
        let r = tape.dense("relu", &store, x, w, b, Activation::Relu).unwrap();
        let l = tape.dense("lin", &store, x, w, b, Activation::Linear).unwrap();
        assert_eq!(tape.value(r), &array![[0.0, 2.0]]);
        assert_eq!(tape.value(l), &array![[-1.0, 2.0]]);
    }

    #[test]
    fn dense_shape_mismatch_is_dimension_error() {
        let mut store = ParamStore::new();
        let (w, b) = identity_dense(&mut store, 2);
        let mut tape = Tape::new();
        let x = tape.input("x", array![[1.0, 2.0, 3.0]]);
        let err = tape.dense("d", &store, x, w, b, Activation::Linear).unwrap_err();
        assert!(matches!(err, NumError::Dimension { op: "dense", .. }));
    }

    #[test]
    fn sum_of_identity_dense_has_unit_input_gradient() {
        let mut store = ParamStore::new();
        let (w, b) = identity_dense(&mut store, 3);
        let mut tape = Tape::new();
        let x = tape.input_with_grad("x", array![[0.5, -2.0, 4.0]]);
        let y = tape.dense("d", &store, x, w, b, Activation::Linear).unwrap();
        let loss = tape.sum("loss", y);
        let grads = tape.backward(&mut store, loss, 1.0).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[1.0, 1.0, 1.0]]);
        assert_eq!(store.get(b).grad(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_at_zero_uses_zero_subgradient() {
        let mut store = ParamStore::new();
        let (w, b) = identity_dense(&mut store, 1);
        let mut tape = Tape::new();
        let x = tape.input_with_grad("x", array![[0.0]]);
        let y = tape.dense("d", &store, x, w, b, Activation::Relu).unwrap();
        let loss = tape.sum("loss", y);
        let grads = tape.backward(&mut store, loss, 1.0).unwrap();
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 0.0);
        assert_eq!(store.get(w).grad(), &[0.0]);
    }

    #[test]
    fn backward_on_unrecorded_node_is_state_error() {
        let mut store = ParamStore::new();
        let tape = Tape::new();
        let err = tape.backward(&mut store, Var(0), 1.0).err().unwrap();
        assert!(matches!(err, NumError::State(_)));
    }

    #[test]
    fn identity_kernel_leaves_sequence_unchanged() {
        let mut store = ParamStore::new();
        let k = store.add("k", ParamTensor::from_values(&[1, 1, 1], vec![1.0]));
        let b = store.add("b", ParamTensor::zeros(&[1]));
        let mut tape = Tape::new();
        let seq = array![[0.3, 1.5, 2.0, 7.0]];
        let x = tape.input("x", seq.clone());
        let y = tape
            .conv1d_causal("c", &store, x, SeqShape::new(1, 4), k, b, Activation::Relu)
            .unwrap();
        assert_eq!(tape.value(y), &seq);
    }

    #[test]
    fn shifted_kernel_reads_previous_position() {
        // kernel (1, 0): weight 1 on the previous position, 0 on the current one
        let mut store = ParamStore::new();
        let k = store.add("k", ParamTensor::from_values(&[1, 2, 1], vec![1.0, 0.0]));
        let b = store.add("b", ParamTensor::zeros(&[1]));
        let mut tape = Tape::new();
        let x = tape.input("x", array![[1.0, 2.0, 3.0]]);
        let y = tape
            .conv1d_causal("c", &store, x, SeqShape::new(1, 3), k, b, Activation::Linear)
            .unwrap();
        assert_eq!(tape.value(y), &array![[0.0, 1.0, 2.0]]);
    }

    #[test]
    fn conv_rejects_empty_sequence() {
        let mut store = ParamStore::new();
        let k = store.add("k", ParamTensor::from_values(&[1, 1, 1], vec![1.0]));
        let b = store.add("b", ParamTensor::zeros(&[1]));
        let mut tape = Tape::new();
        let x = tape.input("x", Array2::zeros((1, 0)));
        let err = tape
            .conv1d_causal("c", &store, x, SeqShape::new(1, 0), k, b, Activation::Relu)
            .unwrap_err();
        assert!(matches!(err, NumError::Dimension { .. }));
    }

    #[test]
    fn maxpool_basic_cases() {
        let mut tape = Tape::new();
        let x = tape.input("x", array![[1.0, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0]]);
        let (y, shape) = tape.maxpool1d("p", x, SeqShape::new(1, 4), 2, 2).unwrap();
        assert_eq!(shape.len, 2);
        assert_eq!(tape.value(y), &array![[2.0, 4.0], [5.0, 5.0]]);
        let (z, shape) = tape.maxpool1d("p3", x, SeqShape::new(1, 4), 3, 3).unwrap();
        assert_eq!(shape.len, 2);
        assert_eq!(tape.value(z), &array![[3.0, 4.0], [5.0, 5.0]]);
    }

    #[test]
    fn maxpool_rejects_zero_pool() {
        let mut tape = Tape::new();
        let x = tape.input("x", array![[1.0, 2.0]]);
        let err = tape.maxpool1d("p", x, SeqShape::new(1, 2), 0, 0).unwrap_err();
        assert!(matches!(err, NumError::Parameter { .. }));
    }

    #[test]
    fn row_dot_and_scalar_bias() {
        let mut store = ParamStore::new();
        let c = store.add("c", ParamTensor::from_values(&[1], vec![0.5]));
        let mut tape = Tape::new();
        let a = tape.input("a", array![[2.0], [1.0]]);
        let b = tape.input("b", array![[3.0], [-1.0]]);
        let d = tape.row_dot("dot", a, b).unwrap();
        let h = tape.add_scalar("h", &store, d, c).unwrap();
        assert_eq!(tape.value(h), &array![[6.5], [-0.5]]);
    }

    #[test]
    fn check_finite_names_offending_node() {
        let mut tape = Tape::new();
        let a = tape.input("a", array![[1.0]]);
        tape.input("bad", array![[f64::NAN]]);
        tape.sum("s", a);
        assert_eq!(
            tape.check_finite().unwrap_err(),
            NumError::NonFinite { label: "bad".into() }
        );
    }
}
