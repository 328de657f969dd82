//! Minimal reverse-mode automatic differentiation on a tape.
//!
//! Every operation appends a node holding its forward value, the ids of its
//! parents, and one closure that maps the node's output gradient to the
//! gradients of all parents. `backward` walks the tape once in reverse and
//! accumulates. Tape ids are strictly increasing, so a single reverse pass
//! visits children before parents.
//!
//! The op set is exactly what the model needs: dense linear algebra,
//! activations, masked row softmax for graph attention, a same-padding 2-d
//! convolution for the market sparsifier, and the selective-scan recurrence
//! with a hand-written backward pass through time.

use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use std::cell::RefCell;
use std::rc::Rc;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape if `v` never received one.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            back,
        });
        Var(nodes.len() - 1)
    }

    /// Insert a value with no parents. Inputs, parameters and constants all
    /// enter the tape this way; the caller decides which gradients to read.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, vec![], None)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    // ── elementwise arithmetic ──────────────────────────────────────────

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.with2(a, b, |x, y| x.zip_map(y, |u, v| u + v));
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = self.with2(a, b, |x, y| x.zip_map(y, |u, v| u - v));
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g| vec![g.clone(), g.map(|x| -x)])),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (value, av, bv) = self.with2(a, b, |x, y| (x.zip_map(y, |u, v| u * v), x.clone(), y.clone()));
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                vec![g.zip_map(&bv, |gv, v| gv * v), g.zip_map(&av, |gv, v| gv * v)]
            })),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (value, av, bv) = self.with2(a, b, |x, y| (x.zip_map(y, |u, v| u / v), x.clone(), y.clone()));
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let da = g.zip_map(&bv, |gv, v| gv / v);
                let mut db = g.zip_map(&av, |gv, u| gv * u);
                for (d, v) in db.data_mut().iter_mut().zip(bv.data()) {
                    *d *= -1.0 / (v * v);
                }
                vec![da, db]
            })),
        )
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.with1(a, |x| x.map(|v| v * c));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| vec![g.map(|v| v * c)])),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Elementwise product with a constant tensor (no gradient into `t`).
    pub fn mul_const(&self, a: Var, t: &Tensor) -> Var {
        let value = self.with1(a, |x| x.zip_map(t, |u, v| u * v));
        let tc = t.clone();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| vec![g.zip_map(&tc, |gv, v| gv * v)])),
        )
    }

    /// Elementwise `max(a, c)`; the gradient flows only where `a >= c`.
    pub fn maximum_scalar(&self, a: Var, c: f64) -> Var {
        let (value, av) = self.with1(a, |x| (x.map(|v| v.max(c)), x.clone()));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g.zip_map(&av, |gv, v| if v >= c { gv } else { 0.0 })]
            })),
        )
    }

    // ── shape plumbing ──────────────────────────────────────────────────

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self.with1(a, |x| x.clone().reshaped(shape));
        let orig = self.shape(a);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| vec![g.clone().reshaped(&orig)])),
        )
    }

    /// Concatenate along the last axis. All leading axes must agree.
    pub fn concat_last(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let shapes: Vec<Vec<usize>> = vars.iter().map(|v| self.shape(*v)).collect();
        let lead = &shapes[0][..shapes[0].len() - 1];
        for s in &shapes {
            assert_eq!(&s[..s.len() - 1], lead, "concat_last leading axes differ");
        }
        let widths: Vec<usize> = shapes.iter().map(|s| s[s.len() - 1]).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();

        let nodes = self.nodes.borrow();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, w) in vars.iter().zip(&widths) {
                let src = nodes[v.0].value.data();
                data.extend_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        drop(nodes);

        let mut out_shape = lead.to_vec();
        out_shape.push(total);
        let value = Tensor::from_vec(&out_shape, data);
        let widths_c = widths.clone();
        let shapes_c = shapes.clone();
        self.push(
            value,
            vars.iter().map(|v| v.0).collect(),
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut outs: Vec<Tensor> = shapes_c.iter().map(|s| Tensor::zeros(s)).collect();
                for r in 0..rows {
                    let mut off = 0;
                    for (out, w) in outs.iter_mut().zip(&widths_c) {
                        let dst = out.data_mut();
                        dst[r * w..(r + 1) * w]
                            .copy_from_slice(&gd[r * total + off..r * total + off + w]);
                        off += w;
                    }
                }
                outs
            })),
        )
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = self.with2(a, b, |x, y| (x.clone(), y.clone()));
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let value = Tensor::from_vec(&[m, n], matmul_nn(av.data(), bv.data(), m, k, n));
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let da = Tensor::from_vec(&[m, k], matmul_nt(g.data(), bv.data(), m, n, k));
                let db = Tensor::from_vec(&[k, n], matmul_tn(av.data(), g.data(), m, k, n));
                vec![da, db]
            })),
        )
    }

    /// `out[i,j] = u[i] + v[j]` for vectors `u: [n]`, `v: [m]`.
    pub fn outer_sum(&self, u: Var, v: Var) -> Var {
        let (uv, vv) = self.with2(u, v, |x, y| (x.clone(), y.clone()));
        let n = uv.len();
        let m = vv.len();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(uv.data()[i] + vv.data()[j]);
            }
        }
        self.push(
            Tensor::from_vec(&[n, m], data),
            vec![u.0, v.0],
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut du = vec![0.0; n];
                let mut dv = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        du[i] += gd[i * m + j];
                        dv[j] += gd[i * m + j];
                    }
                }
                vec![Tensor::from_vec(&[n], du), Tensor::from_vec(&[m], dv)]
            })),
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&self, a: Var) -> Var {
        let (total, shape) = self.with1(a, |x| (x.data().iter().sum::<f64>(), x.shape().to_vec()));
        self.push(
            Tensor::scalar(total),
            vec![a.0],
            Some(Box::new(move |g| vec![Tensor::filled(&shape, g.item())])),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.with1(a, |x| x.len());
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row means of a 2-d tensor: `[n, m] -> [n]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let (value, n, m) = self.with1(a, |x| {
            let n = x.shape()[0];
            let m = x.shape()[1];
            let mut out = vec![0.0; n];
            for i in 0..n {
                out[i] = x.data()[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64;
            }
            (Tensor::from_vec(&[n], out), n, m)
        });
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut out = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    let gv = g.data()[i] / m as f64;
                    for j in 0..m {
                        out.data_mut()[i * m + j] = gv;
                    }
                }
                vec![out]
            })),
        )
    }

    // ── time-axis ops on [n, t, f] tensors ──────────────────────────────

    /// Mean pooling over the time axis with the given stride. The trailing
    /// window may be shorter; it averages over what remains (ceil semantics).
    pub fn avg_pool_time(&self, a: Var, stride: usize) -> Var {
        assert!(stride >= 1);
        let av = self.value(a);
        let (n, t, f) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let t_out = t.div_ceil(stride);
        let mut out = Tensor::zeros(&[n, t_out, f]);
        for i in 0..n {
            for w in 0..t_out {
                let lo = w * stride;
                let hi = ((w + 1) * stride).min(t);
                let inv = 1.0 / (hi - lo) as f64;
                for c in 0..f {
                    let mut acc = 0.0;
                    for s in lo..hi {
                        acc += av.data()[(i * t + s) * f + c];
                    }
                    let idx = (i * t_out + w) * f + c;
                    out.data_mut()[idx] = acc * inv;
                }
            }
        }
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut da = Tensor::zeros(&[n, t, f]);
                for i in 0..n {
                    for w in 0..t_out {
                        let lo = w * stride;
                        let hi = ((w + 1) * stride).min(t);
                        let inv = 1.0 / (hi - lo) as f64;
                        for c in 0..f {
                            let gv = g.data()[(i * t_out + w) * f + c] * inv;
                            for s in lo..hi {
                                da.data_mut()[(i * t + s) * f + c] += gv;
                            }
                        }
                    }
                }
                vec![da]
            })),
        )
    }

    /// Final time step of `[n, t, f]` as `[n, f]`.
    pub fn last_time_step(&self, a: Var) -> Var {
        let av = self.value(a);
        let (n, t, f) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let mut out = Tensor::zeros(&[n, f]);
        for i in 0..n {
            for c in 0..f {
                out.data_mut()[i * f + c] = av.data()[(i * t + t - 1) * f + c];
            }
        }
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut da = Tensor::zeros(&[n, t, f]);
                for i in 0..n {
                    for c in 0..f {
                        da.data_mut()[(i * t + t - 1) * f + c] = g.data()[i * f + c];
                    }
                }
                vec![da]
            })),
        )
    }

    // ── activations ─────────────────────────────────────────────────────

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Var {
        let (value, av) = self.with1(a, |x| (x.map(&f), x.clone()));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g| vec![g.zip_map(&av, |gv, x| gv * df(x))])),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, f64::exp)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, sigmoid)
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), |x| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, gelu, gelu_grad)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x| if x > 0.0 { 1.0 } else { slope },
        )
    }

    // ── graph attention ─────────────────────────────────────────────────

    /// Row-wise softmax over the entries where `mask` is true; masked-out
    /// entries are exactly zero. Every row must have at least one true cell.
    pub fn masked_softmax_rows(&self, logits: Var, mask: Rc<Vec<bool>>) -> Var {
        let lv = self.value(logits);
        let (n, m) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(mask.len(), n * m);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            let row = &lv.data()[i * m..(i + 1) * m];
            let mrow = &mask[i * m..(i + 1) * m];
            let mx = row
                .iter()
                .zip(mrow)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(mx.is_finite(), "masked_softmax_rows: empty row {i}");
            let mut z = 0.0;
            for j in 0..m {
                if mrow[j] {
                    let e = (row[j] - mx).exp();
                    out.data_mut()[i * m + j] = e;
                    z += e;
                }
            }
            for j in 0..m {
                out.data_mut()[i * m + j] /= z;
            }
        }
        let alpha = out.clone();
        let mask_c = mask.clone();
        self.push(
            out,
            vec![logits.0],
            Some(Box::new(move |g| {
                let mut dl = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..m {
                        dot += g.data()[i * m + j] * alpha.data()[i * m + j];
                    }
                    for j in 0..m {
                        if mask_c[i * m + j] {
                            let a = alpha.data()[i * m + j];
                            dl.data_mut()[i * m + j] = a * (g.data()[i * m + j] - dot);
                        }
                    }
                }
                vec![dl]
            })),
        )
    }

    // ── 2-d convolution (same padding, odd kernels) ─────────────────────

    /// `x: [c_in, h, w]`, `weight: [c_out, c_in, kh, kw]`, `bias: [c_out]`
    /// with zero same-padding. Kernel sides must be odd.
    pub fn conv2d_same(&self, x: Var, weight: Var, bias: Var) -> Var {
        let (xv, wv) = self.with2(x, weight, |a, b| (a.clone(), b.clone()));
        let bv = self.value(bias);
        let (c_in, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (c_out, ci2, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(c_in, ci2);
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d_same needs odd kernels");
        let (ph, pw) = (kh / 2, kw / 2);

        let mut out = Tensor::zeros(&[c_out, h, w]);
        for co in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bv.data()[co];
                    for ci in 0..c_in {
                        for di in 0..kh {
                            let ii = i + di;
                            if ii < ph || ii - ph >= h {
                                continue;
                            }
                            for dj in 0..kw {
                                let jj = j + dj;
                                if jj < pw || jj - pw >= w {
                                    continue;
                                }
                                acc += xv.data()[(ci * h + ii - ph) * w + jj - pw]
                                    * wv.data()[((co * c_in + ci) * kh + di) * kw + dj];
                            }
                        }
                    }
                    out.data_mut()[(co * h + i) * w + j] = acc;
                }
            }
        }

        self.push(
            out,
            vec![x.0, weight.0, bias.0],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[c_in, h, w]);
                let mut dw = Tensor::zeros(&[c_out, c_in, kh, kw]);
                let mut db = Tensor::zeros(&[c_out]);
                for co in 0..c_out {
                    for i in 0..h {
                        for j in 0..w {
                            let gv = g.data()[(co * h + i) * w + j];
                            db.data_mut()[co] += gv;
                            for ci in 0..c_in {
                                for di in 0..kh {
                                    let ii = i + di;
                                    if ii < ph || ii - ph >= h {
                                        continue;
                                    }
                                    for dj in 0..kw {
                                        let jj = j + dj;
                                        if jj < pw || jj - pw >= w {
                                            continue;
                                        }
                                        let xi = (ci * h + ii - ph) * w + jj - pw;
                                        let wi = ((co * c_in + ci) * kh + di) * kw + dj;
                                        dx.data_mut()[xi] += gv * wv.data()[wi];
                                        dw.data_mut()[wi] += gv * xv.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dx, dw, db]
            })),
        )
    }

    // ── selective scan ──────────────────────────────────────────────────

    /// Input-dependent diagonal state-space recurrence, one left-to-right
    /// scan per sequence:
    ///
    ///   h_t = exp(delta_t * a) ∘ h_{t-1} + (delta_t * x_t) ⊗ b_t
    ///   o_t[ch] = Σ_s c_t[s] * h_t[ch, s]
    ///
    /// Shapes: `x, delta: [n, t, d]`, `b, c: [n, t, s]`, `a: [d, s]`,
    /// output `[n, t, d]`. The backward pass replays the recurrence in
    /// reverse using the stored state history.
    pub fn selective_scan(&self, x: Var, delta: Var, b: Var, c: Var, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let xv = nodes[x.0].value.clone();
        let dv = nodes[delta.0].value.clone();
        let bv = nodes[b.0].value.clone();
        let cv = nodes[c.0].value.clone();
        let av = nodes[a.0].value.clone();
        drop(nodes);

        let (n, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let s = av.shape()[1];
        assert_eq!(dv.shape(), &[n, t, d]);
        assert_eq!(bv.shape(), &[n, t, s]);
        assert_eq!(cv.shape(), &[n, t, s]);
        assert_eq!(av.shape()[0], d);

        let mut out = Tensor::zeros(&[n, t, d]);
        // Post-update state h_t for every step, needed by the backward pass.
        let mut h_hist = vec![0.0; n * t * d * s];
        for seq in 0..n {
            let mut h = vec![0.0; d * s];
            for step in 0..t {
                let brow = &bv.data()[(seq * t + step) * s..(seq * t + step + 1) * s];
                let crow = &cv.data()[(seq * t + step) * s..(seq * t + step + 1) * s];
                for ch in 0..d {
                    let dt = dv.data()[(seq * t + step) * d + ch];
                    let xt = dt * xv.data()[(seq * t + step) * d + ch];
                    let arow = &av.data()[ch * s..(ch + 1) * s];
                    let hrow = &mut h[ch * s..(ch + 1) * s];
                    let mut o = 0.0;
                    for st in 0..s {
                        let hv = (dt * arow[st]).exp() * hrow[st] + xt * brow[st];
                        hrow[st] = hv;
                        o += crow[st] * hv;
                    }
                    out.data_mut()[(seq * t + step) * d + ch] = o;
                }
                h_hist[(seq * t + step) * d * s..(seq * t + step + 1) * d * s].copy_from_slice(&h);
            }
        }

        self.push(
            out,
            vec![x.0, delta.0, b.0, c.0, a.0],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[n, t, d]);
                let mut dd = Tensor::zeros(&[n, t, d]);
                let mut db = Tensor::zeros(&[n, t, s]);
                let mut dc = Tensor::zeros(&[n, t, s]);
                let mut da = Tensor::zeros(&[d, s]);
                let zero_state = vec![0.0; d * s];
                for seq in 0..n {
                    // carry[ch,st] = dL/dh_t flowing back from step t+1
                    let mut carry = vec![0.0; d * s];
                    for step in (0..t).rev() {
                        let h_t = &h_hist[(seq * t + step) * d * s..(seq * t + step + 1) * d * s];
                        let h_prev: &[f64] = if step == 0 {
                            &zero_state
                        } else {
                            &h_hist[(seq * t + step - 1) * d * s..(seq * t + step) * d * s]
                        };
                        let brow = &bv.data()[(seq * t + step) * s..(seq * t + step + 1) * s];
                        let crow = &cv.data()[(seq * t + step) * s..(seq * t + step + 1) * s];
                        for ch in 0..d {
                            let go = g.data()[(seq * t + step) * d + ch];
                            let dt = dv.data()[(seq * t + step) * d + ch];
                            let xt = xv.data()[(seq * t + step) * d + ch];
                            let arow = &av.data()[ch * s..(ch + 1) * s];
                            let mut d_dt = 0.0;
                            let mut d_xt = 0.0;
                            for st in 0..s {
                                let gh = go * crow[st] + carry[ch * s + st];
                                dc.data_mut()[(seq * t + step) * s + st] += go * h_t[ch * s + st];
                                let ab = (dt * arow[st]).exp();
                                let dab = gh * h_prev[ch * s + st];
                                d_dt += dab * arow[st] * ab + gh * brow[st] * xt;
                                da.data_mut()[ch * s + st] += dab * dt * ab;
                                db.data_mut()[(seq * t + step) * s + st] += gh * dt * xt;
                                d_xt += gh * dt * brow[st];
                                carry[ch * s + st] = gh * ab;
                            }
                            dd.data_mut()[(seq * t + step) * d + ch] += d_dt;
                            dx.data_mut()[(seq * t + step) * d + ch] += d_xt;
                        }
                    }
                }
                vec![dx, dd, db, dc, da]
            })),
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns accumulated gradients for
    /// every node that participates in the root's history.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward root must be scalar, got shape {:?}",
            nodes[root.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &nodes[i].back {
                let contribs = back(&g);
                debug_assert_eq!(contribs.len(), nodes[i].parents.len());
                for (pid, contrib) in nodes[i].parents.iter().zip(contribs) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU; `gelu_grad` is its exact derivative.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
pub(crate) mod check {
    use super::*;

    /// Central finite differences of a scalar-valued tape program with
    /// respect to every element of every input, compared against the
    /// analytic gradients from one backward sweep.
    pub fn finite_diff(
        inputs: &[Tensor],
        f: impl Fn(&Tape, &[Var]) -> Var,
        step: f64,
        tol: f64,
    ) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&tape, &vars);
        let grads = tape.backward(root);

        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], input.shape());
            for e in 0..input.len() {
                let eval = |v: f64| -> f64 {
                    let mut bumped: Vec<Tensor> = inputs.to_vec();
                    bumped[i].data_mut()[e] = v;
                    let t = Tape::new();
                    let vs: Vec<Var> = bumped.iter().map(|x| t.leaf(x.clone())).collect();
                    t.item(f(&t, &vs))
                };
                let x0 = input.data()[e];
                let fd = (eval(x0 + step) - eval(x0 - step)) / (2.0 * step);
                let a = analytic.data()[e];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "input {i} elem {e}: analytic {a} vs fd {fd}"
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::check::finite_diff;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::uniform(rng, shape, -1.0, 1.0)
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rt(&mut rng, &[3, 4]);
        let b = Tensor::uniform(&mut rng, &[3, 4], 0.5, 1.5);
        finite_diff(
            &[a.clone(), b.clone()],
            |t, v| {
                let x = t.mul(v[0], v[1]);
                let y = t.div(v[0], v[1]);
                let z = t.add(t.sub(x, y), t.scale(v[0], 0.3));
                t.sum(z)
            },
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn activation_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rt(&mut rng, &[17]);
        finite_diff(
            &[a],
            |t, v| {
                let e = t.exp(t.scale(v[0], 0.5));
                let s = t.sigmoid(v[0]);
                let sp = t.softplus(v[0]);
                let si = t.silu(v[0]);
                let g = t.gelu(v[0]);
                let l = t.leaky_relu(v[0], 0.2);
                let acc = t.add(t.add(e, s), t.add(sp, t.add(si, t.add(g, l))));
                t.sum(acc)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn matmul_and_reshape_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rt(&mut rng, &[4, 3]);
        let b = rt(&mut rng, &[3, 5]);
        finite_diff(
            &[a, b],
            |t, v| {
                let c = t.matmul(v[0], v[1]);
                let r = t.reshape(c, &[2, 10]);
                t.mean(t.mul(r, r))
            },
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn concat_and_rowmean_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rt(&mut rng, &[2, 3]);
        let b = rt(&mut rng, &[2, 2]);
        finite_diff(
            &[a, b],
            |t, v| {
                let c = t.concat_last(&[v[0], v[1], v[0]]);
                let m = t.mean_rows(c);
                t.sum(t.mul(m, m))
            },
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn pooling_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rt(&mut rng, &[2, 7, 3]); // odd t exercises the partial window
        finite_diff(
            &[a],
            |t, v| {
                let p = t.avg_pool_time(v[0], 2);
                let l = t.last_time_step(p);
                t.sum(t.mul(l, l))
            },
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn outer_sum_and_masked_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = rt(&mut rng, &[4]);
        let v = rt(&mut rng, &[4]);
        // Diagonal always retained plus a few off-diagonal edges.
        let mut mask = vec![false; 16];
        for i in 0..4 {
            mask[i * 4 + i] = true;
        }
        mask[1] = true;
        mask[6] = true;
        mask[11] = true;
        mask[12] = true;
        let mask = Rc::new(mask);
        finite_diff(
            &[u, v],
            |t, vars| {
                let logits = t.leaky_relu(t.outer_sum(vars[0], vars[1]), 0.2);
                let alpha = t.masked_softmax_rows(logits, mask.clone());
                t.sum(t.mul(alpha, alpha))
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let logits = tape.leaf(rt(&mut rng, &[5, 5]));
        let mut mask = vec![false; 25];
        for i in 0..5 {
            mask[i * 5 + i] = true;
            mask[i * 5 + (i + 2) % 5] = true;
        }
        let alpha = tape.value(tape.masked_softmax_rows(logits, Rc::new(mask.clone())));
        for i in 0..5 {
            let row: f64 = (0..5).map(|j| alpha.at2(i, j)).sum();
            assert!((row - 1.0).abs() < 1e-12);
            for j in 0..5 {
                if !mask[i * 5 + j] {
                    assert_eq!(alpha.at2(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn conv2d_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rt(&mut rng, &[2, 5, 4]);
        let w = rt(&mut rng, &[3, 2, 3, 3]);
        let b = rt(&mut rng, &[3]);
        finite_diff(
            &[x, w, b],
            |t, v| {
                let y = t.conv2d_same(v[0], v[1], v[2]);
                t.mean(t.mul(y, y))
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn conv2d_identity_kernel_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let xval = rt(&mut rng, &[1, 4, 4]);
        let x = tape.leaf(xval.clone());
        let w = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.value(tape.conv2d_same(x, w, b));
        assert!(y.max_abs_diff(&xval) < 1e-15);
    }

    #[test]
    fn selective_scan_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rt(&mut rng, &[2, 4, 3]);
        let delta = Tensor::uniform(&mut rng, &[2, 4, 3], 0.1, 0.9);
        let b = rt(&mut rng, &[2, 4, 2]);
        let c = rt(&mut rng, &[2, 4, 2]);
        let a = Tensor::uniform(&mut rng, &[3, 2], -1.5, -0.2);
        finite_diff(
            &[x, delta, b, c, a],
            |t, v| {
                let o = t.selective_scan(v[0], v[1], v[2], v[3], v[4]);
                t.sum(t.mul(o, o))
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn backward_accumulates_shared_nodes() {
        // y = x*x + x: dy/dx = 2x + 1, checks fan-out accumulation.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.add(tape.mul(x, x), x);
        let g = tape.backward(y);
        assert!((g.get(x).unwrap().item() - 7.0).abs() < 1e-12);
    }
}
