//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes in topological
//! order; [`Tape::backward`] walks the list in reverse and returns gradients
//! for every leaf. The tape is generic over the scalar type so the same loss
//! code runs in f32 for training and in f64 for finite-difference checks.

use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};
use num_traits::Float;

pub trait Scalar:
    Float
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a tape node. Valid only for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

type BackFn<F> = Box<dyn Fn(&[&ArrayD<F>], &ArrayD<F>, &ArrayD<F>) -> Vec<ArrayD<F>> + Send + Sync>;

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<usize>,
    backward: Option<BackFn<F>>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Gradients returned by [`Tape::backward`], keyed by leaf node.
pub struct Gradients<F: Scalar> {
    by_node: HashMap<usize, ArrayD<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Value) -> Option<&ArrayD<F>> {
        self.by_node.get(&v.0)
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Extracts a single-element node as a scalar.
    pub fn scalar(&self, v: Value) -> F {
        let arr = self.value(v);
        assert_eq!(arr.len(), 1, "expected scalar node, got shape {:?}", arr.shape());
        *arr.iter().next().unwrap()
    }

    fn push(
        &mut self,
        value: ArrayD<F>,
        parents: Vec<usize>,
        backward: Option<BackFn<F>>,
    ) -> Value {
        let requires_grad = match &backward {
            None => false,
            Some(_) => parents.iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            value,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
            param: None,
        });
        Value(self.nodes.len() - 1)
    }

    /// Untracked constant.
    pub fn constant(&mut self, value: ArrayD<F>) -> Value {
        self.push(value, vec![], None)
    }

    pub fn constant2(&mut self, value: Array2<F>) -> Value {
        self.constant(value.into_dyn())
    }

    pub fn constant_scalar(&mut self, v: F) -> Value {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    /// Differentiable input; its gradient is available after `backward`.
    pub fn leaf(&mut self, value: ArrayD<F>) -> Value {
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad: true,
            param: None,
        });
        Value(self.nodes.len() - 1)
    }

    /// Differentiable leaf bound to a parameter slot.
    pub fn param(&mut self, pid: usize, value: ArrayD<F>) -> Value {
        let v = self.leaf(value);
        self.nodes[v.0].param = Some(pid);
        v
    }

    /// Reverse pass from a scalar root. Returns gradients for every leaf
    /// reached by nonzero gradient flow.
    pub fn backward(&self, root: Value) -> Gradients<F> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), F::one()));
        let mut out = HashMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    out.insert(i, g);
                }
                Some(back) => {
                    let parent_vals: Vec<&ArrayD<F>> =
                        node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                    let pgrads = back(&parent_vals, &node.value, &g);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(pgrads) {
                        if !self.nodes[p].requires_grad {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => *acc = &*acc + &pg,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Gradients { by_node: out }
    }

    /// Gradients for parameter-bound leaves, keyed by parameter id.
    pub fn param_grads(&self, grads: &Gradients<F>) -> HashMap<usize, ArrayD<F>> {
        let mut out = HashMap::new();
        for (&node, g) in &grads.by_node {
            if let Some(pid) = self.nodes[node].param {
                match out.entry(pid) {
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(g.clone());
                    }
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        let acc = e.get_mut();
                        *acc = &*acc + g;
                    }
                }
            }
        }
        out
    }

    // ---- elementwise arithmetic ----

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        let v = self.value(a) + self.value(b);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|_, _, g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        let v = self.value(a) - self.value(b);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|_, _, g| vec![g.clone(), g.mapv(|x| -x)])),
        )
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        let v = self.value(a) * self.value(b);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|p, _, g| vec![g * p[1], g * p[0]])),
        )
    }

    pub fn div(&mut self, a: Value, b: Value) -> Value {
        let v = self.value(a) / self.value(b);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|p, _, g| {
                let ga = g / p[1];
                let gb = -(g * p[0]) / (p[1] * p[1]);
                vec![ga, gb]
            })),
        )
    }

    pub fn neg(&mut self, a: Value) -> Value {
        self.scale(a, -F::one())
    }

    pub fn scale(&mut self, a: Value, c: F) -> Value {
        let v = self.value(a).mapv(|x| x * c);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |_, _, g| vec![g.mapv(|x| x * c)])),
        )
    }

    pub fn add_scalar(&mut self, a: Value, c: F) -> Value {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, vec![a.0], Some(Box::new(|_, _, g| vec![g.clone()])))
    }

    /// Elementwise max; ties route the gradient to `a`.
    pub fn emax(&mut self, a: Value, b: Value) -> Value {
        let v = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| if x >= y { x } else { y });
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|p, _, g| {
                let mut ga = g.clone();
                let mut gb = g.clone();
                ndarray::Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(p[0])
                    .and(p[1])
                    .for_each(|ga, gb, &x, &y| {
                        if x >= y {
                            *gb = F::zero();
                        } else {
                            *ga = F::zero();
                        }
                    });
                vec![ga, gb]
            })),
        )
    }

    /// Elementwise min; ties route the gradient to `a`.
    pub fn emin(&mut self, a: Value, b: Value) -> Value {
        let v = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| if x <= y { x } else { y });
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|p, _, g| {
                let mut ga = g.clone();
                let mut gb = g.clone();
                ndarray::Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(p[0])
                    .and(p[1])
                    .for_each(|ga, gb, &x, &y| {
                        if x <= y {
                            *gb = F::zero();
                        } else {
                            *ga = F::zero();
                        }
                    });
                vec![ga, gb]
            })),
        )
    }

    /// Lower clamp; gradient passes where `a >= c`.
    pub fn clamp_min(&mut self, a: Value, c: F) -> Value {
        let v = self.value(a).mapv(|x| if x < c { c } else { x });
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |p, _, g| {
                vec![ndarray::Zip::from(g)
                    .and(p[0])
                    .map_collect(|&gv, &x| if x >= c { gv } else { F::zero() })]
            })),
        )
    }

    pub fn abs(&mut self, a: Value) -> Value {
        let v = self.value(a).mapv(|x| x.abs());
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|p, _, g| {
                vec![ndarray::Zip::from(g).and(p[0]).map_collect(|&gv, &x| {
                    if x > F::zero() {
                        gv
                    } else if x < F::zero() {
                        -gv
                    } else {
                        F::zero()
                    }
                })]
            })),
        )
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, a: Value) -> Value {
        let v = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|p, _, g| {
                vec![ndarray::Zip::from(g)
                    .and(p[0])
                    .map_collect(|&gv, &x| if x > F::zero() { gv } else { F::zero() })]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let v = self.value(a).mapv(sigmoid_stable);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|_, out, g| {
                vec![ndarray::Zip::from(g)
                    .and(out)
                    .map_collect(|&gv, &s| gv * s * (F::one() - s))]
            })),
        )
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Value) -> Value {
        let v = self.value(a).mapv(softplus_stable);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|p, _, g| {
                vec![ndarray::Zip::from(g)
                    .and(p[0])
                    .map_collect(|&gv, &x| gv * sigmoid_stable(x))]
            })),
        )
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let v = self.value(a).mapv(|x| x.exp());
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|_, out, g| vec![g * out])),
        )
    }

    pub fn ln(&mut self, a: Value) -> Value {
        let v = self.value(a).mapv(|x| x.ln());
        self.push(v, vec![a.0], Some(Box::new(|p, _, g| vec![g / p[0]])))
    }

    pub fn sqrt(&mut self, a: Value) -> Value {
        let v = self.value(a).mapv(|x| x.sqrt());
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|_, out, g| {
                let half = F::from_f64(0.5);
                vec![ndarray::Zip::from(g).and(out).map_collect(|&gv, &s| gv * half / s)]
            })),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Value {
        let orig = self.value(a).shape().to_vec();
        let v = self
            .value(a)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |_, _, g| {
                vec![g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape backward")]
            })),
        )
    }

    pub fn transpose2(&mut self, a: Value) -> Value {
        let v = as2(self.value(a)).t().to_owned().into_dyn();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|_, _, g| vec![as2(g).t().to_owned().into_dyn()])),
        )
    }

    /// Contiguous slice along an axis of a 2-d value.
    pub fn narrow2(&mut self, a: Value, axis: usize, start: usize, len: usize) -> Value {
        let src = as2(self.value(a));
        let v = src
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned()
            .into_dyn();
        let full = src.raw_dim();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |_, _, g| {
                let mut out = Array2::<F>::zeros(full);
                out.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(&as2(g));
                vec![out.into_dyn()]
            })),
        )
    }

    /// Concatenation of 2-d values along an axis.
    pub fn concat2(&mut self, axis: usize, parts: &[Value]) -> Value {
        assert!(!parts.is_empty());
        let (v, sizes) = {
            let views: Vec<ndarray::ArrayView2<'_, F>> =
                parts.iter().map(|&p| as2(self.value(p))).collect();
            let sizes: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
            let v = ndarray::concatenate(Axis(axis), &views)
                .expect("concat shape mismatch")
                .into_dyn();
            (v, sizes)
        };
        self.push(
            v,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |_, _, g| {
                let g2 = as2(g);
                let mut out = Vec::with_capacity(sizes.len());
                let mut offset = 0;
                for &s in &sizes {
                    out.push(
                        g2.slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + s))
                            .to_owned()
                            .into_dyn(),
                    );
                    offset += s;
                }
                out
            })),
        )
    }

    /// Row selection on a 2-d value; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, a: Value, indices: &[usize]) -> Value {
        let src = as2(self.value(a));
        let idx = indices.to_vec();
        let v = src.select(Axis(0), &idx).into_dyn();
        let rows = src.nrows();
        let cols = src.ncols();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |_, _, g| {
                let g2 = as2(g);
                let mut out = Array2::<F>::zeros((rows, cols));
                for (r, &i) in idx.iter().enumerate() {
                    ndarray::Zip::from(out.row_mut(i))
                        .and(g2.row(r))
                        .for_each(|o, &v| *o = *o + v);
                }
                vec![out.into_dyn()]
            })),
        )
    }

    // ---- reductions and broadcasts ----

    pub fn sum_all(&mut self, a: Value) -> Value {
        let s = self.value(a).iter().copied().sum::<F>();
        let shape = self.value(a).raw_dim();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![a.0],
            Some(Box::new(move |_, _, g| {
                vec![ArrayD::from_elem(shape.clone(), g[[0]])]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Value) -> Value {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::from_usize(n))
    }

    /// Row sums of a 2-d value, shape `[m, 1]`.
    pub fn sum_axis1(&mut self, a: Value) -> Value {
        let src = as2(self.value(a));
        let v = src
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .into_dyn();
        let cols = src.ncols();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |_, _, g| {
                let g2 = as2(g);
                let mut out = Array2::<F>::zeros((g2.nrows(), cols));
                for (mut row, &gv) in out.rows_mut().into_iter().zip(g2.column(0)) {
                    row.fill(gv);
                }
                vec![out.into_dyn()]
            })),
        )
    }

    /// Adds a `[1, n]` (or `[n]`) vector to every row of a `[m, n]` value.
    pub fn add_rowvec(&mut self, a: Value, v: Value) -> Value {
        let src = as2(self.value(a));
        let row = asrow(self.value(v));
        let out = (&src + &row.broadcast(src.raw_dim()).unwrap()).into_dyn();
        let vshape = self.value(v).raw_dim();
        self.push(
            out,
            vec![a.0, v.0],
            Some(Box::new(move |_, _, g| {
                let g2 = as2(g);
                let gv = g2.sum_axis(Axis(0));
                vec![
                    g.clone(),
                    gv.into_shape_with_order(vshape.clone()).unwrap(),
                ]
            })),
        )
    }

    // ---- linear algebra ----

    /// 2-d matrix product.
    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let va = as2(self.value(a));
        let vb = as2(self.value(b));
        let v = va.dot(&vb).into_dyn();
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|p, _, g| {
                let (pa, pb, g2) = (as2(p[0]), as2(p[1]), as2(g));
                vec![
                    g2.dot(&pb.t()).into_dyn(),
                    pa.t().dot(&g2).into_dyn(),
                ]
            })),
        )
    }

    /// Row-wise softmax on a 2-d value.
    pub fn softmax_rows(&mut self, a: Value) -> Value {
        let src = as2(self.value(a));
        let mut v = Array2::<F>::zeros(src.raw_dim());
        for (mut orow, irow) in v.rows_mut().into_iter().zip(src.rows()) {
            let m = irow.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (o, &x) in orow.iter_mut().zip(irow) {
                let e = (x - m).exp();
                *o = e;
                denom = denom + e;
            }
            orow.mapv_inplace(|x| x / denom);
        }
        self.push(
            v.into_dyn(),
            vec![a.0],
            Some(Box::new(|_, out, g| {
                let (s, g2) = (as2(out), as2(g));
                let mut dx = Array2::<F>::zeros(s.raw_dim());
                for ((mut drow, srow), grow) in
                    dx.rows_mut().into_iter().zip(s.rows()).zip(g2.rows())
                {
                    let dot: F = srow.iter().zip(grow).map(|(&si, &gi)| si * gi).sum();
                    for ((d, &si), &gi) in drow.iter_mut().zip(srow).zip(grow) {
                        *d = si * (gi - dot);
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layernorm_rows(&mut self, a: Value, gain: Value, bias: Value, eps: F) -> Value {
        let src = as2(self.value(a));
        let gv = asrow(self.value(gain));
        let bv = asrow(self.value(bias));
        let n = src.ncols();
        let nf = F::from_usize(n);
        let mut out = Array2::<F>::zeros(src.raw_dim());
        for (mut orow, irow) in out.rows_mut().into_iter().zip(src.rows()) {
            let mean = irow.iter().copied().sum::<F>() / nf;
            let var = irow.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / nf;
            let inv = F::one() / (var + eps).sqrt();
            for (j, (o, &x)) in orow.iter_mut().zip(irow).enumerate() {
                *o = (x - mean) * inv * gv[[0, j]] + bv[[0, j]];
            }
        }
        let gain_shape = self.value(gain).raw_dim();
        let bias_shape = self.value(bias).raw_dim();
        self.push(
            out.into_dyn(),
            vec![a.0, gain.0, bias.0],
            Some(Box::new(move |p, _, g| {
                let (x, gn, g2) = (as2(p[0]), asrow(p[1]), as2(g));
                let n = x.ncols();
                let nf = F::from_usize(n);
                let mut dx = Array2::<F>::zeros(x.raw_dim());
                let mut dgain = Array1::<F>::zeros(n);
                let mut dbias = Array1::<F>::zeros(n);
                for r in 0..x.nrows() {
                    let xrow = x.row(r);
                    let grow = g2.row(r);
                    let mean = xrow.iter().copied().sum::<F>() / nf;
                    let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
                    let inv = F::one() / (var + eps).sqrt();
                    // param grads plus the two row means needed for dx
                    let mut m1 = F::zero(); // mean of gain .* g
                    let mut m2 = F::zero(); // mean of gain .* g .* xhat
                    for j in 0..n {
                        let xhat = (xrow[j] - mean) * inv;
                        dgain[j] = dgain[j] + grow[j] * xhat;
                        dbias[j] = dbias[j] + grow[j];
                        let gg = gn[[0, j]] * grow[j];
                        m1 = m1 + gg;
                        m2 = m2 + gg * xhat;
                    }
                    m1 = m1 / nf;
                    m2 = m2 / nf;
                    for j in 0..n {
                        let xhat = (xrow[j] - mean) * inv;
                        let gg = gn[[0, j]] * grow[j];
                        dx[(r, j)] = (gg - m1 - xhat * m2) * inv;
                    }
                }
                vec![
                    dx.into_dyn(),
                    dgain.into_shape_with_order(gain_shape.clone()).unwrap(),
                    dbias.into_shape_with_order(bias_shape.clone()).unwrap(),
                ]
            })),
        )
    }

    // ---- spatial ops ----

    /// 2-d convolution on a `[c_in, h, w]` input with `[c_out, c_in, kh, kw]`
    /// weights and `[c_out]` bias.
    pub fn conv2d(
        &mut self,
        x: Value,
        weight: Value,
        bias: Value,
        stride: usize,
        pad: usize,
    ) -> Value {
        let xv = as3(self.value(x));
        let wv = as4(self.value(weight));
        let bv = as1(self.value(bias));
        let (co, ci, kh, kw) = wv.dim();
        let (ci2, h, w) = xv.dim();
        assert_eq!(ci, ci2, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;

        let cols = im2col(&xv, kh, kw, stride, pad, ho, wo);
        let wmat = reshape_copy2(self.value(weight), co, ci * kh * kw);
        let mut out = wmat.dot(&cols); // [co, ho*wo]
        for (mut row, &b) in out.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out3 = reshape_copy(&out.into_dyn(), &[co, ho, wo]);

        self.push(
            out3,
            vec![x.0, weight.0, bias.0],
            Some(Box::new(move |p, _, g| {
                let xv = as3(p[0]);
                let gmat = reshape_copy2(g, co, ho * wo);
                let cols = im2col(&xv.view(), kh, kw, stride, pad, ho, wo);
                let dw = gmat.dot(&cols.t()); // [co, ci*kh*kw]
                let db = gmat.sum_axis(Axis(1));
                let wmat = reshape_copy2(p[1], co, ci * kh * kw);
                let dcols = wmat.t().dot(&gmat); // [ci*kh*kw, ho*wo]
                let dx = col2im(&dcols, ci, h, w, kh, kw, stride, pad, ho, wo);
                vec![
                    dx.into_dyn(),
                    reshape_copy(&dw.into_dyn(), &[co, ci, kh, kw]),
                    db.into_dyn(),
                ]
            })),
        )
    }

    /// Nearest-neighbor 2x upsampling of a `[c, h, w]` value.
    pub fn upsample2x(&mut self, a: Value) -> Value {
        let xv = as3(self.value(a));
        let (c, h, w) = xv.dim();
        let mut out = Array3::<F>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ci, y, x)] = xv[(ci, y / 2, x / 2)];
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![a.0],
            Some(Box::new(move |_, _, g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = Array3::<F>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dx[(ci, y / 2, x / 2)] = dx[(ci, y / 2, x / 2)] + g3[(ci, y, x)];
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }
}

/// Reshape that tolerates any source layout by copying elements in logical
/// (row-major) order.
fn reshape_copy<F: Scalar>(a: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    let flat: Vec<F> = a.iter().copied().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape size mismatch")
}

fn reshape_copy2<F: Scalar>(a: &ArrayD<F>, rows: usize, cols: usize) -> Array2<F> {
    let flat: Vec<F> = a.iter().copied().collect();
    Array2::from_shape_vec((rows, cols), flat).expect("reshape size mismatch")
}

fn sigmoid_stable<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus_stable<F: Scalar>(x: F) -> F {
    // max(x, 0) + ln(1 + e^{ -|x| })
    let m = if x > F::zero() { x } else { F::zero() };
    m + (F::one() + (-x.abs()).exp()).ln()
}

fn as1<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView1<'_, F> {
    a.view().into_dimensionality::<Ix1>().expect("expected 1-d value")
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d value")
}

fn as3<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView3<'_, F> {
    a.view().into_dimensionality::<Ix3>().expect("expected 3-d value")
}

fn as4<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    a.view().into_dimensionality::<Ix4>().expect("expected 4-d value")
}

/// Converts `[n]` or `[1, n]` to a `[1, n]` view.
fn asrow<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    match a.ndim() {
        1 => a
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .insert_axis(Axis(0)),
        2 => as2(a),
        d => panic!("expected row vector, got {d}-d value"),
    }
}

fn im2col<F: Scalar>(
    x: &ndarray::ArrayView3<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (ci, h, w) = x.dim();
    let mut cols = Array2::<F>::zeros((ci * kh * kw, ho * wo));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * wo + ox)] = x[(c, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}


#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: &Array2<F>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<F> {
    let mut x = Array3::<F>::zeros((ci, h, w));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(c, iy as usize, ix as usize)] =
                            x[(c, iy as usize, ix as usize)] + cols[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
    x
}
