//! Reverse-mode differentiation over the small operator set the model needs.
//!
//! A [`Graph`] is built eagerly: every op computes its value immediately and
//! records what its backward pass needs. [`Graph::backward`] then walks the
//! tape in reverse. Graphs are single-use and cheap to create; one graph per
//! training sample (or per inference step) is the intended pattern.

use std::sync::Arc;

use crate::tensor::{self, blur_separable, blur_separable_adjoint, gemm, Real, Strides, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        cols: Vec<T>,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Tanh(Var),
    Scale(Var, T),
    Add(Var, Var),
    Sub(Var, Var),
    Concat(Vec<Var>),
    Upsample {
        x: Var,
        factor: usize,
    },
    Warp {
        img: Var,
        flow: Var,
    },
    SpaceToDepth {
        x: Var,
        block: usize,
    },
    Blur {
        x: Var,
        kernel: Arc<Vec<T>>,
    },
    PadReplicate {
        x: Var,
    },
    Crop {
        x: Var,
        y0: usize,
        x0: usize,
    },
    Mse(Var, Var),
    LinComb(Vec<(Var, T)>),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A forward-only graph; nothing is kept for differentiation.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        let grad = grad && self.record;
        let op = if grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Constant sharing storage with the caller.
    pub fn constant_shared(&mut self, t: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is reported by [`Graph::backward`].
    pub fn parameter(&mut self, t: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// 3×3 convolution, zero padding 1. `w` is `[cout, cin, 9]`, `b` is `[cout,1,1]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xv = self.value(x);
        let [cin, _, _] = xv.shape();
        let [cout, wcin, k9] = self.value(w).shape();
        assert_eq!((wcin, k9), (cin, 9), "conv3x3 weight shape");
        let mut cols = Vec::new();
        let (ho, wo) = tensor::im2col(xv, stride, &mut cols);
        let hw = ho * wo;
        let mut out = vec![T::zero(); cout * hw];
        let bias = self.value(b).data();
        for (co, row) in out.chunks_mut(hw).enumerate() {
            row.fill(bias[co]);
        }
        gemm(
            cout,
            cin * 9,
            hw,
            self.value(w).data(),
            Strides::row_major(cin * 9),
            &cols,
            Strides::row_major(hw),
            T::one(),
            &mut out,
        );
        let grad = self.needs(&[x, w, b]);
        if !grad {
            cols = Vec::new();
        }
        self.push(
            Tensor::from_vec(cout, ho, wo, out),
            Op::Conv { x, w, b, stride, cols },
            grad,
        )
    }

    /// 3×3 transpose convolution, stride 2, padding 1, output padding 1:
    /// exactly doubles both spatial dims. `w` is `[cin, cout, 9]`.
    pub fn conv_transpose3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let [cin, h, wd] = xv.shape();
        let [wcin, cout, k9] = self.value(w).shape();
        assert_eq!((wcin, k9), (cin, 9), "conv_transpose3x3 weight shape");
        let hw = h * wd;
        let mut cols = vec![T::zero(); cout * 9 * hw];
        gemm(
            cout * 9,
            cin,
            hw,
            self.value(w).data(),
            Strides::transposed(cout * 9),
            xv.data(),
            Strides::row_major(hw),
            T::zero(),
            &mut cols,
        );
        let bias = self.value(b).data().to_vec();
        let mut out = Tensor::zeros(cout, 2 * h, 2 * wd);
        for (co, plane) in out.data_mut().chunks_mut(4 * hw).enumerate() {
            plane.fill(bias[co]);
        }
        tensor::col2im(&cols, 2, h, wd, &mut out);
        let grad = self.needs(&[x, w, b]);
        self.push(out, Op::ConvTranspose { x, w, b }, grad)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let grad = self.needs(&[x]);
        self.push(out, Op::Relu(x), grad)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let grad = self.needs(&[x]);
        self.push(out, Op::Tanh(x), grad)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let grad = self.needs(&[x]);
        self.push(out, Op::Scale(x, s), grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let grad = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), grad)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let [c, h, w] = av.shape();
        let out = Tensor::from_vec(c, h, w, data);
        let grad = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), grad)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let [_, h, w] = self.value(parts[0]).shape();
        let mut data = Vec::new();
        let mut c = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!((v.height(), v.width()), (h, w), "concat spatial dims");
            c += v.channels();
            data.extend_from_slice(v.data());
        }
        let grad = self.needs(parts);
        self.push(Tensor::from_vec(c, h, w, data), Op::Concat(parts.to_vec()), grad)
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers, edge clamp).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        let out = upsample_forward(self.value(x), factor);
        let grad = self.needs(&[x]);
        self.push(out, Op::Upsample { x, factor }, grad)
    }

    /// Backward warp: `out(p) = bilinear(img, p + flow(p))` with coordinates
    /// clamped to the image border. `flow` is `[2,h,w]` holding (dx, dy).
    pub fn warp(&mut self, img: Var, flow: Var) -> Var {
        let out = warp_forward(self.value(img), self.value(flow));
        let grad = self.needs(&[img, flow]);
        self.push(out, Op::Warp { img, flow }, grad)
    }

    pub fn space_to_depth(&mut self, x: Var, block: usize) -> Var {
        let out = space_to_depth_forward(self.value(x), block);
        let grad = self.needs(&[x]);
        self.push(out, Op::SpaceToDepth { x, block }, grad)
    }

    /// Separable blur with reflect padding.
    pub fn blur(&mut self, x: Var, kernel: Arc<Vec<T>>) -> Var {
        let out = blur_separable(self.value(x), &kernel);
        let grad = self.needs(&[x]);
        self.push(out, Op::Blur { x, kernel }, grad)
    }

    /// Pads bottom/right by edge replication up to `(h, w)`.
    pub fn pad_replicate(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = self.value(x);
        let [c, ih, iw] = v.shape();
        assert!(h >= ih && w >= iw, "pad_replicate shrinks");
        if (h, w) == (ih, iw) {
            return x;
        }
        let out = Tensor::from_fn(c, h, w, |ci, y, xx| v.at(ci, y.min(ih - 1), xx.min(iw - 1)));
        let grad = self.needs(&[x]);
        self.push(out, Op::PadReplicate { x }, grad)
    }

    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        let v = self.value(x);
        let [c, ih, iw] = v.shape();
        assert!(y0 + h <= ih && x0 + w <= iw, "crop out of bounds");
        if (y0, x0, h, w) == (0, 0, ih, iw) {
            return x;
        }
        let out = Tensor::from_fn(c, h, w, |ci, y, xx| v.at(ci, y + y0, xx + x0));
        let grad = self.needs(&[x]);
        self.push(out, Op::Crop { x, y0, x0 }, grad)
    }

    /// Mean squared error, a `[1,1,1]` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape");
        let n = T::from_usize(av.len()).unwrap();
        let s: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let grad = self.needs(&[a, b]);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), grad)
    }

    /// `Σ coef·term` over same-shaped tensors.
    pub fn lin_comb(&mut self, terms: &[(Var, T)]) -> Var {
        let mut out = Tensor::zeros(
            self.value(terms[0].0).channels(),
            self.value(terms[0].0).height(),
            self.value(terms[0].0).width(),
        );
        for &(v, c) in terms {
            let t = self.value(v);
            assert_eq!(t.shape(), out.shape(), "lin_comb shape");
            for (o, &x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += c * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let grad = self.needs(&vars);
        self.push(out, Op::LinComb(terms.to_vec()), grad)
    }

    /// Fingerprint of the smooth piece the recorded graph is evaluated on:
    /// ReLU input signs and warp sampling cells. Two evaluations with equal
    /// signatures lie on the same differentiable piece.
    pub fn piecewise_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::Warp { flow, .. } => {
                    let f = self.value(*flow);
                    let [_, fh, fw] = f.shape();
                    for y in 0..fh {
                        for x in 0..fw {
                            let p = y * fw + x;
                            let (x0, _, _, in_x) = sample_coord(T::from_usize(x).unwrap() + f.plane(0)[p], fw);
                            let (y0, _, _, in_y) = sample_coord(T::from_usize(y).unwrap() + f.plane(1)[p], fh);
                            (x0, y0, in_x, in_y).hash(&mut h);
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride, cols } => {
                let xv = self.value(*x);
                let [cin, _, _] = xv.shape();
                let [cout, ho, wo] = g.shape();
                let hw = ho * wo;
                let k = cin * 9;
                if self.nodes[b.0].grad {
                    let gb: Vec<T> = g.data().chunks(hw).map(|r| r.iter().copied().sum()).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(cout, 1, 1, gb));
                }
                if self.nodes[w.0].grad {
                    let mut gw = vec![T::zero(); cout * k];
                    gemm(cout, hw, k, g.data(), Strides::row_major(hw), cols, Strides::transposed(hw), T::zero(), &mut gw);
                    self.accumulate(grads, *w, Tensor::from_vec(cout, cin, 9, gw));
                }
                if self.nodes[x.0].grad {
                    let mut gcols = vec![T::zero(); k * hw];
                    gemm(
                        k,
                        cout,
                        hw,
                        self.value(*w).data(),
                        Strides::transposed(k),
                        g.data(),
                        Strides::row_major(hw),
                        T::zero(),
                        &mut gcols,
                    );
                    let mut gx = Tensor::zeros(cin, xv.height(), xv.width());
                    tensor::col2im(&gcols, *stride, ho, wo, &mut gx);
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConvTranspose { x, w, b } => {
                let xv = self.value(*x);
                let [cin, h, wd] = xv.shape();
                let cout = g.channels();
                let hw = h * wd;
                if self.nodes[b.0].grad {
                    let gb: Vec<T> = g.data().chunks(4 * hw).map(|r| r.iter().copied().sum()).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(cout, 1, 1, gb));
                }
                let mut gcols = Vec::new();
                let (ho, wo) = tensor::im2col(g, 2, &mut gcols);
                debug_assert_eq!((ho, wo), (h, wd));
                if self.nodes[w.0].grad {
                    let mut gw = vec![T::zero(); cin * cout * 9];
                    gemm(
                        cin,
                        hw,
                        cout * 9,
                        xv.data(),
                        Strides::row_major(hw),
                        &gcols,
                        Strides::transposed(hw),
                        T::zero(),
                        &mut gw,
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(cin, cout, 9, gw));
                }
                if self.nodes[x.0].grad {
                    let mut gx = vec![T::zero(); cin * hw];
                    gemm(
                        cin,
                        cout * 9,
                        hw,
                        self.value(*w).data(),
                        Strides::row_major(cout * 9),
                        &gcols,
                        Strides::row_major(hw),
                        T::zero(),
                        &mut gx,
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(cin, h, wd, gx));
                }
            }
            Op::Relu(x) => {
                let out = &node.value;
                let [c, h, w] = g.shape();
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(c, h, w, data));
            }
            Op::Tanh(x) => {
                let out = &node.value;
                let [c, h, w] = g.shape();
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &o)| gv * (T::one() - o * o))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(c, h, w, data));
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Concat(parts) => {
                let [_, h, w] = g.shape();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).channels();
                    let n = c * h * w;
                    if self.nodes[p.0].grad {
                        let slice = g.data()[off..off + n].to_vec();
                        self.accumulate(grads, p, Tensor::from_vec(c, h, w, slice));
                    }
                    off += n;
                }
            }
            Op::Upsample { x, factor } => {
                let gx = upsample_adjoint(g, self.value(*x).shape(), *factor);
                self.accumulate(grads, *x, gx);
            }
            Op::Warp { img, flow } => {
                let (gi, gf) = warp_adjoint(self.value(*img), self.value(*flow), g);
                self.accumulate(grads, *img, gi);
                self.accumulate(grads, *flow, gf);
            }
            Op::SpaceToDepth { x, block } => {
                self.accumulate(grads, *x, depth_to_space_forward(g, *block));
            }
            Op::Blur { x, kernel } => {
                self.accumulate(grads, *x, blur_separable_adjoint(g, kernel));
            }
            Op::PadReplicate { x } => {
                let [c, ih, iw] = self.value(*x).shape();
                let mut gx = Tensor::zeros(c, ih, iw);
                let [_, h, w] = g.shape();
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let (sy, sx) = (y.min(ih - 1), xx.min(iw - 1));
                            let v = gx.at(ci, sy, sx) + g.at(ci, y, xx);
                            gx.set(ci, sy, sx, v);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Crop { x, y0, x0 } => {
                let [c, ih, iw] = self.value(*x).shape();
                let mut gx = Tensor::zeros(c, ih, iw);
                let [_, h, w] = g.shape();
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx.set(ci, y + y0, xx + x0, g.at(ci, y, xx));
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let [c, h, w] = av.shape();
                let k = g.item() * T::lit(2.0) / T::from_usize(av.len()).unwrap();
                let diff: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| k * (x - y)).collect();
                if self.nodes[b.0].grad {
                    let neg = diff.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(c, h, w, neg));
                }
                self.accumulate(grads, *a, Tensor::from_vec(c, h, w, diff));
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, g.map(|x| x * c));
                }
            }
        }
    }
}

/// Per-axis linear interpolation table: `(i0, i1, frac)` for each output index.
fn interp_table(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [c, h, w] = x.shape();
    let (ty, tx) = (interp_table(h, factor), interp_table(w, factor));
    let mut out = Tensor::zeros(c, h * factor, w * factor);
    let ow = w * factor;
    for ci in 0..c {
        let src = x.plane(ci);
        let dst = &mut out.data_mut()[ci * h * w * factor * factor..(ci + 1) * h * w * factor * factor];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

fn upsample_adjoint<T: Real>(g: &Tensor<T>, in_shape: [usize; 3], factor: usize) -> Tensor<T> {
    let [c, h, w] = in_shape;
    let (ty, tx) = (interp_table(h, factor), interp_table(w, factor));
    let mut out = Tensor::zeros(c, h, w);
    let ow = w * factor;
    for ci in 0..c {
        let src = g.plane(ci);
        let dst = &mut out.data_mut()[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let v = src[oy * ow + ox];
                let (top, bot) = (v * (T::one() - fy), v * fy);
                dst[y0 * w + x0] += top * (T::one() - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bot * (T::one() - fx);
                dst[y1 * w + x1] += bot * fx;
            }
        }
    }
    out
}

/// Clamped sample coordinate along one axis: `(i0, i1, frac, inside)`.
#[inline]
fn sample_coord<T: Real>(p: T, n: usize) -> (usize, usize, T, bool) {
    let hi = T::from_usize(n - 1).unwrap();
    let inside = p >= T::zero() && p <= hi;
    let s = if p.is_nan() { T::zero() } else { p.max(T::zero()).min(hi) };
    let i0 = s.floor().to_usize().unwrap_or(0).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - T::from_usize(i0).unwrap(), inside)
}

pub(crate) fn warp_forward<T: Real>(img: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let [c, h, w] = img.shape();
    assert_eq!(flow.shape(), [2, h, w], "warp flow shape");
    let mut out = Tensor::zeros(c, h, w);
    let (fx, fy) = (flow.plane(0), flow.plane(1));
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (x0, x1, ax, _) = sample_coord(T::from_usize(x).unwrap() + fx[p], w);
            let (y0, y1, ay, _) = sample_coord(T::from_usize(y).unwrap() + fy[p], h);
            let (w00, w01) = ((T::one() - ay) * (T::one() - ax), (T::one() - ay) * ax);
            let (w10, w11) = (ay * (T::one() - ax), ay * ax);
            for ci in 0..c {
                let s = img.plane(ci);
                out.data_mut()[ci * hw + p] =
                    w00 * s[y0 * w + x0] + w01 * s[y0 * w + x1] + w10 * s[y1 * w + x0] + w11 * s[y1 * w + x1];
            }
        }
    }
    out
}

fn warp_adjoint<T: Real>(img: &Tensor<T>, flow: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [c, h, w] = img.shape();
    let hw = h * w;
    let mut gi = Tensor::zeros(c, h, w);
    let mut gf = Tensor::zeros(2, h, w);
    let (fx, fy) = (flow.plane(0), flow.plane(1));
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (x0, x1, ax, in_x) = sample_coord(T::from_usize(x).unwrap() + fx[p], w);
            let (y0, y1, ay, in_y) = sample_coord(T::from_usize(y).unwrap() + fy[p], h);
            let (mut dx, mut dy) = (T::zero(), T::zero());
            for ci in 0..c {
                let gv = g.data()[ci * hw + p];
                let s = img.plane(ci);
                let (v00, v01, v10, v11) = (s[y0 * w + x0], s[y0 * w + x1], s[y1 * w + x0], s[y1 * w + x1]);
                dx += gv * ((T::one() - ay) * (v01 - v00) + ay * (v11 - v10));
                dy += gv * ((T::one() - ax) * (v10 - v00) + ax * (v11 - v01));
                let d = &mut gi.data_mut()[ci * hw..(ci + 1) * hw];
                d[y0 * w + x0] += gv * (T::one() - ay) * (T::one() - ax);
                d[y0 * w + x1] += gv * (T::one() - ay) * ax;
                d[y1 * w + x0] += gv * ay * (T::one() - ax);
                d[y1 * w + x1] += gv * ay * ax;
            }
            if in_x {
                gf.data_mut()[p] = dx;
            }
            if in_y {
                gf.data_mut()[hw + p] = dy;
            }
        }
    }
    (gi, gf)
}

/// `[c, h, w] → [c·b², h/b, w/b]`; output channel `c·b² + dy·b + dx`.
pub(crate) fn space_to_depth_forward<T: Real>(x: &Tensor<T>, b: usize) -> Tensor<T> {
    let [c, h, w] = x.shape();
    assert!(h % b == 0 && w % b == 0, "space_to_depth dims");
    let (oh, ow) = (h / b, w / b);
    Tensor::from_fn(c * b * b, oh, ow, |oc, y, xx| {
        let (ci, off) = (oc / (b * b), oc % (b * b));
        x.at(ci, y * b + off / b, xx * b + off % b)
    })
}

/// Inverse of [`space_to_depth_forward`].
pub(crate) fn depth_to_space_forward<T: Real>(x: &Tensor<T>, b: usize) -> Tensor<T> {
    let [c, h, w] = x.shape();
    assert!(c % (b * b) == 0, "depth_to_space channels");
    Tensor::from_fn(c / (b * b), h * b, w * b, |ci, y, xx| {
        x.at(ci * b * b + (y % b) * b + xx % b, y / b, xx / b)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(c, h, w, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    /// Checks d(sum(out ⊙ probe))/d(input) against central differences.
    fn check_op(input: Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let probe_for = |g: &Graph<f64>, out: Var| rand_tensor(
            g.value(out).channels(),
            g.value(out).height(),
            g.value(out).width(),
            99,
        );
        let eval = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.parameter(Arc::new(x.clone()));
            let out = f(&mut g, v);
            let probe = probe_for(&g, out);
            g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let v = g.parameter(Arc::new(input.clone()));
        let out = f(&mut g, v);
        let probe = g.constant(probe_for(&g, out));
        let prod_terms = g.sub(out, probe);
        // sum(out*probe) = (|out|² + |probe|² - |out-probe|²)/2; use mse pieces instead.
        let zero = g.constant(Tensor::zeros(
            g.value(out).channels(),
            g.value(out).height(),
            g.value(out).width(),
        ));
        let n = g.value(out).len() as f64;
        let a = g.mse(out, zero);
        let b = g.mse(prod_terms, zero);
        let root = g.lin_comb(&[(a, n / 2.0), (b, -n / 2.0)]);
        let grads = g.backward(root);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(1, 1, 1));
        let h = 1e-6;
        for i in 0..input.len() {
            let mut p = input.clone();
            p.data_mut()[i] += h;
            let mut m = input.clone();
            m.data_mut()[i] -= h;
            let num = (eval(&p) - eval(&m)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!(
                (num - an).abs() <= 1e-6 * (1.0 + num.abs()),
                "component {i}: analytic {an} vs numeric {num}"
            );
        }
    }

    #[test]
    fn conv_gradients() {
        let w = Arc::new(rand_tensor(3, 2, 9, 1));
        let b = Arc::new(rand_tensor(3, 1, 1, 2));
        for stride in [1, 2] {
            let (w, b) = (w.clone(), b.clone());
            check_op(rand_tensor(2, 6, 5, 3), move |g, x| {
                let wv = g.parameter(w.clone());
                let bv = g.parameter(b.clone());
                g.conv3x3(x, wv, bv, stride)
            });
        }
        let x = Arc::new(rand_tensor(2, 4, 4, 4));
        check_op(rand_tensor(3, 2, 9, 5), move |g, w| {
            let xv = g.constant_shared(x.clone());
            let b = g.constant(Tensor::zeros(3, 1, 1));
            g.conv3x3(xv, w, b, 1)
        });
    }

    #[test]
    fn conv_transpose_gradients() {
        let w = Arc::new(rand_tensor(2, 3, 9, 7));
        check_op(rand_tensor(2, 3, 4, 8), move |g, x| {
            let wv = g.parameter(w.clone());
            let b = g.constant(Tensor::full(3, 1, 1, 0.1));
            g.conv_transpose3x3(x, wv, b)
        });
        let x = Arc::new(rand_tensor(2, 3, 3, 9));
        check_op(rand_tensor(2, 1, 9, 10), move |g, w| {
            let xv = g.constant_shared(x.clone());
            let b = g.constant(Tensor::zeros(1, 1, 1));
            g.conv_transpose3x3(xv, w, b)
        });
    }

    #[test]
    fn conv_transpose_is_adjoint_of_strided_conv() {
        // <convT(x; W), y> == <x, conv_s2(y; W')> with W' the channel-swapped kernel.
        let x = rand_tensor(2, 3, 4, 11);
        let y = rand_tensor(3, 6, 8, 12);
        let wt = rand_tensor(2, 3, 9, 13); // [cin=2, cout=3, 9]
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(wt.clone()));
        let b = g.constant(Tensor::zeros(3, 1, 1));
        let t = g.conv_transpose3x3(xv, wv, b);
        assert_eq!(g.value(t).shape(), [3, 6, 8]);
        let lhs: f64 = g.value(t).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let wc = Tensor::from_fn(2, 3, 9, |co, ci, k| wt.at(co, ci, k)); // [cout=2, cin=3, 9]
        let yv = g.constant(y);
        let wcv = g.constant(wc);
        let b2 = g.constant(Tensor::zeros(2, 1, 1));
        let c = g.conv3x3(yv, wcv, b2, 2);
        let rhs: f64 = g.value(c).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pointwise_and_structural_gradients() {
        check_op(rand_tensor(2, 3, 3, 20), |g, x| g.relu(x));
        check_op(rand_tensor(2, 3, 3, 21), |g, x| g.tanh(x));
        check_op(rand_tensor(1, 3, 4, 22), |g, x| g.upsample_bilinear(x, 4));
        check_op(rand_tensor(2, 4, 8, 23), |g, x| g.space_to_depth(x, 2));
        check_op(rand_tensor(1, 5, 6, 24), |g, x| g.pad_replicate(x, 8, 8));
        check_op(rand_tensor(1, 5, 6, 25), |g, x| g.crop(x, 1, 2, 3, 3));
        let k = Arc::new(crate::tensor::gaussian_kernel_1d(1.5, 6));
        check_op(rand_tensor(2, 5, 7, 26), move |g, x| g.blur(x, k.clone()));
        check_op(rand_tensor(2, 2, 2, 27), |g, x| {
            let y = g.scale(x, 3.0);
            let z = g.concat(&[x, y]);
            let s = g.sub(z, z);
            g.add(z, s)
        });
    }

    #[test]
    fn warp_gradients_image_and_flow() {
        let flow = rand_tensor(2, 5, 6, 30).map(|v| v * 3.0 + 0.013);
        let fa = Arc::new(flow);
        check_op(rand_tensor(2, 5, 6, 31), move |g, x| {
            let f = g.constant_shared(fa.clone());
            g.warp(x, f)
        });
        let img = Arc::new(rand_tensor(3, 5, 6, 32));
        check_op(rand_tensor(2, 5, 6, 33).map(|v| v * 2.0 + 0.017), move |g, f| {
            let i = g.constant_shared(img.clone());
            g.warp(i, f)
        });
    }
}
