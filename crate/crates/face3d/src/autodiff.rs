//! Reverse-mode automatic differentiation over dynamically shaped f64 arrays.
//!
//! A [`Graph`] records one forward pass as a flat list of nodes; a node is
//! created per operation and holds the operation's value plus a one-shot
//! backward closure. [`Graph::backward`] walks the list in reverse and
//! accumulates gradients for every node reachable from a leaf.
//!
//! Values are plain `ndarray::ArrayD<f64>` in standard layout. The engine is
//! single-threaded and rebuilds the graph every step, which is the right
//! trade-off at the problem sizes this crate targets.

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Backward closure: receives the graph (for reading parent values) and the
/// gradient of the loss w.r.t. this node, returns per-parent contributions.
pub type BackwardFn = Box<dyn FnOnce(&Graph, &ArrayD<f64>) -> Vec<(TensorId, ArrayD<f64>)>>;

struct Node {
    value: ArrayD<f64>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`TensorId`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: TensorId) -> Option<&ArrayD<f64>> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `t`, panicking if none was accumulated.
    pub fn wrt(&self, t: TensorId) -> &ArrayD<f64> {
        self.get(t).expect("no gradient accumulated for tensor")
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, requires_grad: bool, backward: Option<BackwardFn>) -> TensorId {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Node that never receives gradients.
    pub fn constant(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, false, None)
    }

    /// Differentiable input node (parameter or variable under study).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, true, None)
    }

    pub fn value(&self, t: TensorId) -> &ArrayD<f64> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    pub fn requires_grad(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, t: TensorId) -> f64 {
        let v = self.value(t);
        assert_eq!(v.len(), 1, "scalar() on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    /// Register a custom operation. `backward` receives the output gradient
    /// and must return contributions for (a subset of) `inputs`.
    pub fn custom(&mut self, inputs: &[TensorId], value: ArrayD<f64>, backward: BackwardFn) -> TensorId {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push(value, rg, Some(backward))
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&mut self, loss: TensorId) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        let mut fns: Vec<Option<BackwardFn>> = self.nodes.iter_mut().map(|n| n.backward.take()).collect();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            if let Some(f) = fns[i].take() {
                let g = grads[i].clone().unwrap();
                for (parent, contribution) in f(self, &g) {
                    if !self.nodes[parent.0].requires_grad {
                        continue;
                    }
                    match &mut grads[parent.0] {
                        Some(acc) => *acc += &contribution,
                        slot => *slot = Some(contribution),
                    }
                }
            }
        }
        Gradients { grads }
    }

    // ---- elementwise binary ops (identical shapes) ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.value(a) + self.value(b);
        self.custom(&[a, b], v, Box::new(move |_, g| vec![(a, g.clone()), (b, g.clone())]))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.value(a) - self.value(b);
        self.custom(&[a, b], v, Box::new(move |_, g| vec![(a, g.clone()), (b, -g)]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.value(a) * self.value(b);
        self.custom(
            &[a, b],
            v,
            Box::new(move |graph, g| vec![(a, g * graph.value(b)), (b, g * graph.value(a))]),
        )
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.value(a) / self.value(b);
        self.custom(
            &[a, b],
            v,
            Box::new(move |graph, g| {
                let bv = graph.value(b);
                let av = graph.value(a);
                let da = g / bv;
                let db = -(g * av) / (bv * bv);
                vec![(a, da), (b, db)]
            }),
        )
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a).mapv(|x| x * c);
        self.custom(&[a], v, Box::new(move |_, g| vec![(a, g.mapv(|x| x * c))]))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a).mapv(|x| x + c);
        self.custom(&[a], v, Box::new(move |_, g| vec![(a, g.clone())]))
    }

    // ---- broadcasting binary ops ----
    //
    // Inputs must share ndim; on each axis the dims must match or one of
    // them must be 1. The gradient for a broadcast input is sum-reduced
    // over the expanded axes.

    pub fn add_bcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.custom(
            &[a, b],
            out,
            Box::new(move |_, g| {
                vec![(a, reduce_to_shape(g, &sa)), (b, reduce_to_shape(g, &sb))]
            }),
        )
    }

    pub fn sub_bcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.custom(
            &[a, b],
            out,
            Box::new(move |_, g| {
                let neg = g.mapv(|x| -x);
                vec![(a, reduce_to_shape(g, &sa)), (b, reduce_to_shape(&neg, &sb))]
            }),
        )
    }

    pub fn mul_bcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        self.custom(
            &[a, b],
            out,
            Box::new(move |graph, g| {
                let shape = g.shape().to_vec();
                let av = graph.value(a).broadcast(IxDyn(&shape)).unwrap().to_owned();
                let bv = graph.value(b).broadcast(IxDyn(&shape)).unwrap().to_owned();
                let da = reduce_to_shape(&(g * &bv), &sa);
                let db = reduce_to_shape(&(g * &av), &sb);
                vec![(a, da), (b, db)]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s = self.value(a).sum();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a],
            ArrayD::from_elem(IxDyn(&[]), s),
            Box::new(move |_, g| {
                let gv = *g.iter().next().unwrap();
                vec![(a, ArrayD::from_elem(IxDyn(&shape), gv))]
            }),
        )
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> TensorId {
        let v = self.value(a).sum_axis(Axis(axis));
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a],
            v,
            Box::new(move |_, g| {
                let expanded = g.clone().insert_axis(Axis(axis));
                let full = expanded.broadcast(IxDyn(&shape)).unwrap().to_owned();
                vec![(a, full)]
            }),
        )
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> TensorId {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    // ---- matrix products ----

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let out = av.dot(&bv).into_dyn();
        self.custom(
            &[a, b],
            out,
            Box::new(move |graph, g| {
                let g2 = as2(g);
                let av = as2(graph.value(a));
                let bv = as2(graph.value(b));
                let da = g2.dot(&bv.t()).into_dyn();
                let db = av.t().dot(&g2).into_dyn();
                vec![(a, da), (b, db)]
            }),
        )
    }

    /// `[m, k] x [k] -> [m]`
    pub fn matvec(&mut self, a: TensorId, x: TensorId) -> TensorId {
        let av = as2(self.value(a));
        let xv = as1(self.value(x));
        let out = av.dot(&xv).into_dyn();
        self.custom(
            &[a, x],
            out,
            Box::new(move |graph, g| {
                let g1 = as1(g);
                let av = as2(graph.value(a));
                let xv = as1(graph.value(x));
                let mut da = ndarray::Array2::<f64>::zeros((g1.len(), xv.len()));
                for i in 0..g1.len() {
                    for j in 0..xv.len() {
                        da[[i, j]] = g1[i] * xv[j];
                    }
                }
                let dx = av.t().dot(&g1).into_dyn();
                vec![(a, da.into_dyn()), (x, dx)]
            }),
        )
    }

    // ---- nonlinearities ----

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(sigmoid_scalar);
        self.custom(
            &[a],
            v,
            Box::new(move |graph, g| {
                let y = graph.value(a).mapv(sigmoid_scalar);
                vec![(a, g * &(y.mapv(|s| s * (1.0 - s))))]
            }),
        )
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.custom(
            &[a],
            v,
            Box::new(move |graph, g| {
                let mask = graph.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(a, g * &mask)]
            }),
        )
    }

    /// Elementwise square root. The derivative at exactly zero is defined
    /// as zero (subgradient choice; keeps masked-L2 losses finite).
    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(f64::sqrt);
        self.custom(
            &[a],
            v,
            Box::new(move |graph, g| {
                let av = graph.value(a);
                let mut da = g.clone();
                for (d, &x) in da.iter_mut().zip(av.iter()) {
                    *d = if x > 0.0 { *d / (2.0 * x.sqrt()) } else { 0.0 };
                }
                vec![(a, da)]
            }),
        )
    }

    /// Clamp to [0, 1]; gradient passes only where the input is interior.
    pub fn clamp01(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| x.clamp(0.0, 1.0));
        self.custom(
            &[a],
            v,
            Box::new(move |graph, g| {
                let mask = graph
                    .value(a)
                    .mapv(|x| if x > 0.0 && x < 1.0 { 1.0 } else { 0.0 });
                vec![(a, g * &mask)]
            }),
        )
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        let v = self
            .value(a)
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let orig = self.shape(a).to_vec();
        self.custom(
            &[a],
            v,
            Box::new(move |_, g| vec![(a, g.clone().into_shape(IxDyn(&orig)).unwrap())]),
        )
    }

    pub fn permute(&mut self, a: TensorId, axes: &[usize]) -> TensorId {
        let axes_owned = axes.to_vec();
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.custom(
            &[a],
            v,
            Box::new(move |_, g| {
                let mut inverse = vec![0usize; axes_owned.len()];
                for (i, &ax) in axes_owned.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                vec![(a, back)]
            }),
        )
    }

    pub fn transpose2(&mut self, a: TensorId) -> TensorId {
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> TensorId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(axis), &views)
            .expect("concat: incompatible shapes")
            .as_standard_layout()
            .to_owned();
        let ids = parts.to_vec();
        let lens: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        self.custom(
            &ids.clone(),
            v,
            Box::new(move |_, g| {
                let mut out = Vec::with_capacity(ids.len());
                let mut offset = 0;
                for (&id, &len) in ids.iter().zip(lens.iter()) {
                    let part = g
                        .slice_axis(Axis(axis), Slice::from(offset..offset + len))
                        .to_owned();
                    out.push((id, part));
                    offset += len;
                }
                out
            }),
        )
    }

    pub fn slice_axis(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> TensorId {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a],
            v,
            Box::new(move |_, g| {
                let mut da = ArrayD::zeros(IxDyn(&shape));
                da.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![(a, da)]
            }),
        )
    }

    /// Select rows of a `[n, ...]` tensor; repeated indices are allowed
    /// (gradients scatter-add).
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> TensorId {
        let v = self.value(a).select(Axis(0), indices);
        let idx = indices.to_vec();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a],
            v,
            Box::new(move |_, g| {
                let mut da = ArrayD::zeros(IxDyn(&shape));
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = da.index_axis_mut(Axis(0), i);
                    row += &g.index_axis(Axis(0), k);
                }
                vec![(a, da)]
            }),
        )
    }

    // ---- spatial ops on [C, H, W] tensors ----

    /// Subsample rows/cols with the given stride (used by 1x1 stride-2 convolutions).
    pub fn subsample2(&mut self, a: TensorId, stride: usize) -> TensorId {
        let v3 = as3(self.value(a));
        let v = v3
            .slice(ndarray::s![.., ..;stride, ..;stride])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a],
            v,
            Box::new(move |_, g| {
                let mut da = ndarray::Array3::<f64>::zeros((shape[0], shape[1], shape[2]));
                let g3 = as3(g);
                da.slice_mut(ndarray::s![.., ..;stride, ..;stride]).assign(&g3);
                vec![(a, da.into_dyn())]
            }),
        )
    }

    /// Global average pool `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, a: TensorId) -> TensorId {
        let m = self.mean_axis(a, 2);
        self.mean_axis(m, 1)
    }

    /// Non-overlapping average pooling with window `k` (spatial dims must divide).
    pub fn avgpool2d(&mut self, a: TensorId, k: usize) -> TensorId {
        let v3 = as3(self.value(a));
        let (c, h, w) = v3.dim();
        assert!(h % k == 0 && w % k == 0, "avgpool2d: size not divisible by window");
        let (ho, wo) = (h / k, w / k);
        let mut out = ndarray::Array3::<f64>::zeros((c, ho, wo));
        for ci in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += v3[[ci, y * k + dy, x * k + dx]];
                        }
                    }
                    out[[ci, y, x]] = s / (k * k) as f64;
                }
            }
        }
        self.custom(
            &[a],
            out.into_dyn(),
            Box::new(move |_, g| {
                let g3 = as3(g);
                let mut da = ndarray::Array3::<f64>::zeros((c, h, w));
                let inv = 1.0 / (k * k) as f64;
                for ci in 0..c {
                    for y in 0..ho {
                        for x in 0..wo {
                            let gv = g3[[ci, y, x]] * inv;
                            for dy in 0..k {
                                for dx in 0..k {
                                    da[[ci, y * k + dy, x * k + dx]] += gv;
                                }
                            }
                        }
                    }
                }
                vec![(a, da.into_dyn())]
            }),
        )
    }

    /// Max pooling with padding (padded cells never win).
    pub fn maxpool2d(&mut self, a: TensorId, k: usize, stride: usize, pad: usize) -> TensorId {
        let v3 = as3(self.value(a));
        let (c, h, w) = v3.dim();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = ndarray::Array3::<f64>::zeros((c, ho, wo));
        let mut argmax: Vec<(usize, usize)> = vec![(0, 0); c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_src = (0usize, 0usize);
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (x * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let val = v3[[ci, iy as usize, ix as usize]];
                            if val > best {
                                best = val;
                                best_src = (iy as usize, ix as usize);
                            }
                        }
                    }
                    out[[ci, y, x]] = best;
                    argmax[(ci * ho + y) * wo + x] = best_src;
                }
            }
        }
        self.custom(
            &[a],
            out.into_dyn(),
            Box::new(move |_, g| {
                let g3 = as3(g);
                let mut da = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..ho {
                        for x in 0..wo {
                            let (sy, sx) = argmax[(ci * ho + y) * wo + x];
                            da[[ci, sy, sx]] += g3[[ci, y, x]];
                        }
                    }
                }
                vec![(a, da.into_dyn())]
            }),
        )
    }

    /// 2D convolution on `[C_in, H, W]` with kernel `[C_out, C_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xv = as3(self.value(x));
        let wv = self.value(w);
        let (c_in, h, win) = xv.dim();
        let wshape = wv.shape().to_vec();
        assert_eq!(wshape.len(), 4, "conv2d kernel must be 4-d");
        let (c_out, kc, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(kc, c_in, "conv2d: channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (win + 2 * pad - kw) / stride + 1;

        let cols = im2col(&xv, kh, kw, stride, pad, ho, wo);
        let wmat = wv
            .clone()
            .into_shape(IxDyn(&[c_out, c_in * kh * kw]))
            .unwrap();
        let mut out = as2(&wmat).dot(&as2(&cols.clone().into_dyn()));
        if let Some(b) = bias {
            let bv = as1(self.value(b));
            for (mut row, &bval) in out.outer_iter_mut().zip(bv.iter()) {
                row += bval;
            }
        }
        let out = out.into_shape((c_out, ho, wo)).unwrap().into_dyn();

        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.custom(
            &inputs,
            out,
            Box::new(move |graph, g| {
                let g2 = g.clone().into_shape(IxDyn(&[c_out, ho * wo])).unwrap();
                let g2 = as2(&g2);
                let xv = as3(graph.value(x));
                let cols = im2col(&xv, kh, kw, stride, pad, ho, wo);
                // dW = g . cols^T
                let dw = g2.dot(&cols.t());
                let dw = dw.into_shape((c_out, c_in, kh, kw)).unwrap().into_dyn();
                // dX = col2im(W^T . g)
                let wv = graph.value(w).clone().into_shape(IxDyn(&[c_out, c_in * kh * kw])).unwrap();
                let dcols = as2(&wv).t().dot(&g2);
                let dx = col2im(&dcols, c_in, h, win, kh, kw, stride, pad, ho, wo);
                let mut result = vec![(x, dx.into_dyn()), (w, dw)];
                if let Some(b) = bias {
                    let db = g2.sum_axis(Axis(1)).into_dyn();
                    result.push((b, db));
                }
                result
            }),
        )
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn as1(a: &ArrayD<f64>) -> ndarray::Array1<f64> {
    a.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned()
}

fn as2(a: &ArrayD<f64>) -> ndarray::Array2<f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned()
}

fn as3(a: &ArrayD<f64>) -> ndarray::Array3<f64> {
    a.view().into_dimensionality::<ndarray::Ix3>().unwrap().to_owned()
}

fn im2col(
    x: &ndarray::Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut cols = ndarray::Array2::<f64>::zeros((c_in * kh * kw, ho * wo));
    for c in 0..c_in {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for y in 0..ho {
                    let iy = (y * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xo in 0..wo {
                        let ix = (xo * stride + j) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, y * wo + xo]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &ndarray::Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<f64> {
    let mut x = ndarray::Array3::<f64>::zeros((c_in, h, w));
    for c in 0..c_in {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for y in 0..ho {
                    let iy = (y * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xo in 0..wo {
                        let ix = (xo * stride + j) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[c, iy as usize, ix as usize]] += cols[[row, y * wo + xo]];
                    }
                }
            }
        }
    }
    x
}

/// Sum-reduce `g` onto `shape` (same ndim, broadcast axes have dim 1).
fn reduce_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut out = g.clone();
    for (axis, &target) in shape.iter().enumerate() {
        if out.shape()[axis] != target {
            debug_assert_eq!(target, 1, "reduce_to_shape: incompatible shapes");
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out
}

fn broadcast_zip(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    assert_eq!(a.ndim(), b.ndim(), "broadcast ops need equal ndim");
    let shape: Vec<usize> = a
        .shape()
        .iter()
        .zip(b.shape().iter())
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "incompatible broadcast shapes");
            x.max(y)
        })
        .collect();
    let av = a.broadcast(IxDyn(&shape)).unwrap();
    let bv = b.broadcast(IxDyn(&shape)).unwrap();
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}
