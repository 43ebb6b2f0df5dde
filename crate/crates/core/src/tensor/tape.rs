//! The operation tape: forward recording and reverse-mode backward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{add_macs, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Cheap to copy; only valid for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Backward closure: given the output gradient, return one gradient buffer
/// per parent (same order as `parents`). Input/output values a rule needs
/// are captured by clone at recording time, so replay never re-reads nodes.
type BackFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

/// Topologically ordered computation graph. Nodes are appended during the
/// forward pass (single writer); `backward` walks them in reverse exactly
/// once, so gradient accumulation is deterministic.
pub struct Tape {
    nodes: Vec<Node>,
    train_mode: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            train_mode: false,
        }
    }

    pub fn train_mode(mut self, on: bool) -> Self {
        self.train_mode = on;
        self
    }

    pub fn set_train(&mut self, on: bool) {
        self.train_mode = on;
    }

    pub fn is_train(&self) -> bool {
        self.train_mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t.shape, t.data, requires_grad, vec![], None)
    }

    /// A leaf that never receives gradient (detached input / mask).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackFn>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            grad: None,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    /// Record a unary/binary/n-ary op. `backward` may be `None` for ops
    /// recorded on a detached path.
    fn record(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[Var],
        backward: BackFn,
    ) -> Var {
        let rg = self.any_grad(parents);
        let ids: Vec<usize> = parents.iter().map(|p| p.0).collect();
        let bf = if rg { Some(backward) } else { None };
        self.push(shape, data, rg, ids, bf)
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate
    /// additively into every `requires_grad` ancestor (including
    /// intermediates); detached subgraphs are skipped.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            // propagate to parents first, then bank the gradient
            if let Some(bf) = &self.nodes[id].backward {
                let parent_grads = bf(&g);
                let parents = self.nodes[id].parents.clone();
                debug_assert_eq!(parent_grads.len(), parents.len());
                for (pid, pg) in parents.into_iter().zip(parent_grads) {
                    if !self.nodes[pid].requires_grad {
                        continue;
                    }
                    match &mut pending[pid] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&pg) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    // ── elementwise ────────────────────────────────────────────────

    fn assert_same_shape(&self, a: Var, b: Var, ctx: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{ctx}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.record(
            self.shape(a).to_vec(),
            data,
            &[a, b],
            Box::new(|g| vec![g.to_vec(), g.to_vec()]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        self.record(
            self.shape(a).to_vec(),
            data,
            &[a, b],
            Box::new(|g| vec![g.to_vec(), g.iter().map(|v| -v).collect()]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let av = self.data(a).to_vec();
        let bv = self.data(b).to_vec();
        let data: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        self.record(
            self.shape(a).to_vec(),
            data,
            &[a, b],
            Box::new(move |g| {
                vec![
                    g.iter().zip(&bv).map(|(gi, y)| gi * y).collect(),
                    g.iter().zip(&av).map(|(gi, x)| gi * x).collect(),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        self.record(
            self.shape(a).to_vec(),
            data,
            &[a],
            Box::new(move |g| vec![g.iter().map(|gi| gi * c).collect()]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        self.record(
            self.shape(a).to_vec(),
            data,
            &[a],
            Box::new(|g| vec![g.to_vec()]),
        )
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let xv = self.data(a).to_vec();
        let data: Vec<f64> = xv.iter().map(|&x| f(x)).collect();
        let yv = data.clone();
        self.record(
            self.shape(a).to_vec(),
            data,
            &[a],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(xv.iter().zip(&yv))
                    .map(|(gi, (&x, &y))| gi * dfdx(x, y))
                    .collect()]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, |x, _| gelu_grad(x))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x >= 0.0 { x } else { slope * x },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    // ── reductions ────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let n = self.numel(a);
        self.record(
            vec![],
            vec![s],
            &[a],
            Box::new(move |g| vec![vec![g[0]; n]]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.numel(a);
        let s: f64 = self.data(a).iter().sum();
        self.record(
            vec![],
            vec![s / n as f64],
            &[a],
            Box::new(move |g| vec![vec![g[0] / n as f64; n]]),
        )
    }

    // ── shape ─────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(a),
            "reshape: {:?} -> {:?} changes element count",
            self.shape(a),
            shape
        );
        self.record(
            shape,
            self.data(a).to_vec(),
            &[a],
            Box::new(|g| vec![g.to_vec()]),
        )
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (h, w) = {
            let s = self.shape(parts[0]);
            assert_eq!(s.len(), 3, "concat_channels expects [C,H,W] tensors");
            (s[1], s[2])
        };
        let mut chans = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!((s[1], s[2]), (h, w), "concat_channels: spatial mismatch");
            chans.push(s[0]);
            data.extend_from_slice(self.data(p));
        }
        let c_total: usize = chans.iter().sum();
        let plane = h * w;
        self.record(
            vec![c_total, h, w],
            data,
            parts,
            Box::new(move |g| {
                let mut out = Vec::with_capacity(chans.len());
                let mut off = 0;
                for &c in &chans {
                    out.push(g[off..off + c * plane].to_vec());
                    off += c * plane;
                }
                out
            }),
        )
    }

    /// Columns `[lo, hi)` of a `[N, D]` matrix.
    pub fn split_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        assert!(lo < hi && hi <= d);
        let src = self.data(a);
        let mut data = Vec::with_capacity(n * (hi - lo));
        for r in 0..n {
            data.extend_from_slice(&src[r * d + lo..r * d + hi]);
        }
        self.record(
            vec![n, hi - lo],
            data,
            &[a],
            Box::new(move |g| {
                let w = hi - lo;
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    dx[r * d + lo..r * d + hi].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                vec![dx]
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s.len(), 2);
                assert_eq!(s[0], n, "concat_cols: row mismatch");
                s[1]
            })
            .collect();
        let d: usize = widths.iter().sum();
        let mut data = vec![0.0; n * d];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p).to_vec();
            for r in 0..n {
                data[r * d + off..r * d + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.record(
            vec![n, d],
            data,
            parts,
            Box::new(move |g| {
                let mut out = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    let mut part = vec![0.0; n * w];
                    for r in 0..n {
                        part[r * w..(r + 1) * w].copy_from_slice(&g[r * d + off..r * d + off + w]);
                    }
                    out.push(part);
                    off += w;
                }
                out
            }),
        )
    }

    pub fn transpose2d(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                data[c * n + r] = src[r * d + c];
            }
        }
        self.record(
            vec![d, n],
            data,
            &[a],
            Box::new(move |g| {
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    for c in 0..d {
                        dx[r * d + c] = g[c * n + r];
                    }
                }
                vec![dx]
            }),
        )
    }

    pub fn masked_select(&mut self, a: Var, mask: &[bool]) -> Var {
        assert_eq!(mask.len(), self.numel(a), "masked_select: mask length");
        let idx: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        let src = self.data(a);
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let n = mask.len();
        let k = idx.len();
        self.record(
            vec![k],
            data,
            &[a],
            Box::new(move |g| {
                let mut dx = vec![0.0; n];
                for (j, &i) in idx.iter().enumerate() {
                    dx[i] = g[j];
                }
                vec![dx]
            }),
        )
    }

    // ── linear algebra ────────────────────────────────────────────

    /// `[N,K] x [K,M] -> [N,M]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[0], "matmul: inner dims {:?} x {:?}", sa, sb);
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let av = self.data(a).to_vec();
        let bv = self.data(b).to_vec();
        let data = matmul_raw(&av, &bv, n, k, m);
        add_macs((n * k * m) as u64);
        self.record(
            vec![n, m],
            data,
            &[a, b],
            Box::new(move |g| {
                // dA = g @ B^T ; dB = A^T @ g
                let mut bt = vec![0.0; k * m];
                for r in 0..k {
                    for c in 0..m {
                        bt[c * k + r] = bv[r * m + c];
                    }
                }
                let da = matmul_raw(g, &bt, n, m, k);
                let mut at = vec![0.0; n * k];
                for r in 0..n {
                    for c in 0..k {
                        at[c * n + r] = av[r * k + c];
                    }
                }
                let db = matmul_raw(&at, g, k, n, m);
                add_macs(2 * (n * k * m) as u64);
                vec![da, db]
            }),
        )
    }

    /// Row-wise bias add: `[N,D] + [D]`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        assert_eq!(self.shape(bias), &[d], "add_row_bias: bias shape");
        let bv = self.data(bias).to_vec();
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % d])
            .collect();
        self.record(
            vec![n, d],
            data,
            &[a, bias],
            Box::new(move |g| {
                let mut db = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        db[c] += g[r * d + c];
                    }
                }
                vec![g.to_vec(), db]
            }),
        )
    }

    /// Per-channel bias add: `[C,H,W] + [C]`.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        assert_eq!(self.shape(bias), &[c], "add_channel_bias: bias shape");
        let plane = h * w;
        let bv = self.data(bias).to_vec();
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i / plane])
            .collect();
        self.record(
            vec![c, h, w],
            data,
            &[a, bias],
            Box::new(move |g| {
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    db[ch] = g[ch * plane..(ch + 1) * plane].iter().sum();
                }
                vec![g.to_vec(), db]
            }),
        )
    }

    /// 2-D convolution, zero "same" padding, stride 1 or 2.
    /// `x: [C_in,H,W]`, `w: [C_out,C_in,K,K]` (K odd), output
    /// `[C_out, ceil(H/s), ceil(W/s)]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Var {
        assert!(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 3, "conv2d: input must be [C,H,W]");
        assert_eq!(sw.len(), 4, "conv2d: weight must be [Co,Ci,K,K]");
        assert_eq!(sw[1], sx[0], "conv2d: channel mismatch {:?} vs {:?}", sw, sx);
        assert_eq!(sw[2], sw[3], "conv2d: square kernels only");
        assert_eq!(sw[2] % 2, 1, "conv2d: odd kernel size required");
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[0], sw[2]);
        let oh = h.div_ceil(stride);
        let ow = wd.div_ceil(stride);
        let xv = self.data(x).to_vec();
        let wv = self.data(w).to_vec();
        let data = conv2d_raw(&xv, &wv, ci, h, wd, co, k, stride);
        add_macs((oh * ow * ci * co * k * k) as u64);
        self.record(
            vec![co, oh, ow],
            data,
            &[x, w],
            Box::new(move |g| {
                let (dx, dw) = conv2d_backward(&xv, &wv, g, ci, h, wd, co, k, stride);
                add_macs(2 * (oh * ow * ci * co * k * k) as u64);
                vec![dx, dw]
            }),
        )
    }

    /// Nearest-neighbor upsampling of `[C,H,W]` by integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.data(a);
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    data[(ch * oh + y) * ow + x] = src[(ch * h + y / factor) * w + x / factor];
                }
            }
        }
        self.record(
            vec![c, oh, ow],
            data,
            &[a],
            Box::new(move |g| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            dx[(ch * h + y / factor) * w + x / factor] +=
                                g[(ch * oh + y) * ow + x];
                        }
                    }
                }
                vec![dx]
            }),
        )
    }

    /// Nearest-neighbor resize of `[C,H,W]` to `[C,H2,W2]` (up or down).
    pub fn resize_nearest(&mut self, a: Var, h2: usize, w2: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.data(a);
        let mut data = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let sy = y * h / h2;
                for x in 0..w2 {
                    let sx = x * w / w2;
                    data[(ch * h2 + y) * w2 + x] = src[(ch * h + sy) * w + sx];
                }
            }
        }
        self.record(
            vec![c, h2, w2],
            data,
            &[a],
            Box::new(move |g| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        let sy = y * h / h2;
                        for x in 0..w2 {
                            let sx = x * w / w2;
                            dx[(ch * h + sy) * w + sx] += g[(ch * h2 + y) * w2 + x];
                        }
                    }
                }
                vec![dx]
            }),
        )
    }

    /// `[C,H,W]` -> `[N, C*P*P]` with `N = (H/P)*(W/P)`; feature layout is
    /// channel-major within a patch.
    pub fn patchify(&mut self, a: Var, p: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(
            h % p == 0 && w % p == 0,
            "patchify: spatial extents {h}x{w} not divisible by patch size {p}"
        );
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let d = c * p * p;
        let src = self.data(a);
        let mut data = vec![0.0; n * d];
        for py in 0..gh {
            for px in 0..gw {
                let t = py * gw + px;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            data[t * d + (ch * p + dy) * p + dx] =
                                src[(ch * h + py * p + dy) * w + px * p + dx];
                        }
                    }
                }
            }
        }
        self.record(
            vec![n, d],
            data,
            &[a],
            Box::new(move |g| {
                let mut dxv = vec![0.0; c * h * w];
                for py in 0..gh {
                    for px in 0..gw {
                        let t = py * gw + px;
                        for ch in 0..c {
                            for dy in 0..p {
                                for dx in 0..p {
                                    dxv[(ch * h + py * p + dy) * w + px * p + dx] =
                                        g[t * d + (ch * p + dy) * p + dx];
                                }
                            }
                        }
                    }
                }
                vec![dxv]
            }),
        )
    }

    /// Inverse of [`Tape::patchify`]: `[N, C*P*P]` -> `[C,H,W]`.
    pub fn unpatchify(&mut self, a: Var, c: usize, h: usize, w: usize, p: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (gh, gw) = (h / p, w / p);
        assert_eq!(s[0], gh * gw, "unpatchify: token count");
        assert_eq!(s[1], c * p * p, "unpatchify: feature width");
        let d = s[1];
        let src = self.data(a);
        let mut data = vec![0.0; c * h * w];
        for py in 0..gh {
            for px in 0..gw {
                let t = py * gw + px;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            data[(ch * h + py * p + dy) * w + px * p + dx] =
                                src[t * d + (ch * p + dy) * p + dx];
                        }
                    }
                }
            }
        }
        self.record(
            vec![c, h, w],
            data,
            &[a],
            Box::new(move |g| {
                let mut dxv = vec![0.0; gh * gw * d];
                for py in 0..gh {
                    for px in 0..gw {
                        let t = py * gw + px;
                        for ch in 0..c {
                            for dy in 0..p {
                                for dx in 0..p {
                                    dxv[t * d + (ch * p + dy) * p + dx] =
                                        g[(ch * h + py * p + dy) * w + px * p + dx];
                                }
                            }
                        }
                    }
                }
                vec![dxv]
            }),
        )
    }

    // ── normalization / attention pieces ──────────────────────────

    /// Softmax over the last dimension of a `[N,D]` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..d {
                let e = (row[c] - m).exp();
                data[r * d + c] = e;
                sum += e;
            }
            for c in 0..d {
                data[r * d + c] /= sum;
            }
        }
        let yv = data.clone();
        self.record(
            vec![n, d],
            data,
            &[a],
            Box::new(move |g| {
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let y = &yv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for c in 0..d {
                        dx[r * d + c] = y[c] * (gr[c] - dot);
                    }
                }
                vec![dx]
            }),
        )
    }

    /// LayerNorm over the last dimension of `[N,D]`, affine per feature.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        assert_eq!(self.shape(gamma), &[d]);
        assert_eq!(self.shape(beta), &[d]);
        const EPS: f64 = 1e-5;
        let xv = self.data(a).to_vec();
        let gv = self.data(gamma).to_vec();
        let bv = self.data(beta).to_vec();
        let mut data = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                xhat[r * d + c] = xh;
                data[r * d + c] = gv[c] * xh + bv[c];
            }
        }
        self.record(
            vec![n, d],
            data,
            &[a, gamma, beta],
            Box::new(move |g| {
                let mut dx = vec![0.0; n * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..n {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0; // mean of gamma*g
                    let mut m2 = 0.0; // mean of gamma*g*xhat
                    for c in 0..d {
                        let gg = gv[c] * gr[c];
                        m1 += gg;
                        m2 += gg * xh[c];
                        dgamma[c] += gr[c] * xh[c];
                        dbeta[c] += gr[c];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for c in 0..d {
                        dx[r * d + c] = inv_std[r] * (gv[c] * gr[c] - m1 - xh[c] * m2);
                    }
                }
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    /// GroupNorm over `[C,H,W]` with `groups` groups, affine per channel.
    pub fn group_norm(&mut self, a: Var, groups: usize, gamma: Var, beta: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(c % groups == 0, "group_norm: {c} channels, {groups} groups");
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        const EPS: f64 = 1e-5;
        let cpg = c / groups;
        let gsize = cpg * h * w;
        let plane = h * w;
        let xv = self.data(a).to_vec();
        let gv = self.data(gamma).to_vec();
        let bv = self.data(beta).to_vec();
        let mut data = vec![0.0; c * plane];
        let mut xhat = vec![0.0; c * plane];
        let mut inv_std = vec![0.0; groups];
        for grp in 0..groups {
            let lo = grp * gsize;
            let hi = lo + gsize;
            let mean = xv[lo..hi].iter().sum::<f64>() / gsize as f64;
            let var =
                xv[lo..hi].iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / gsize as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[grp] = is;
            for i in lo..hi {
                let xh = (xv[i] - mean) * is;
                xhat[i] = xh;
                data[i] = gv[i / plane] * xh + bv[i / plane];
            }
        }
        self.record(
            vec![c, h, w],
            data,
            &[a, gamma, beta],
            Box::new(move |g| {
                let mut dx = vec![0.0; c * plane];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, &gi) in g.iter().enumerate() {
                    let ch = i / plane;
                    dgamma[ch] += gi * xhat[i];
                    dbeta[ch] += gi;
                }
                for grp in 0..groups {
                    let lo = grp * gsize;
                    let hi = lo + gsize;
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for i in lo..hi {
                        let gg = gv[i / plane] * g[i];
                        m1 += gg;
                        m2 += gg * xhat[i];
                    }
                    m1 /= gsize as f64;
                    m2 /= gsize as f64;
                    for i in lo..hi {
                        dx[i] = inv_std[grp] * (gv[i / plane] * g[i] - m1 - xhat[i] * m2);
                    }
                }
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    /// Inverted dropout. Identity in eval mode or at p = 0; in train mode the
    /// kept mask is drawn from `seed` alone, so a fixed seed fixes the mask.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout: p must be in [0,1)");
        if !self.train_mode || p == 0.0 {
            // record an identity op so graph structure does not depend on mode
            return self.scale(a, 1.0);
        }
        let n = self.numel(a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f64> = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.record(
            self.shape(a).to_vec(),
            data,
            &[a],
            Box::new(move |g| vec![g.iter().zip(&mask).map(|(gi, m)| gi * m).collect()]),
        )
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

// tanh-form GELU
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw(
    x: &[f64],
    w: &[f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = h.div_ceil(stride);
    let ow = wd.div_ceil(stride);
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; co * oh * ow];
    for oc in 0..co {
        let oplane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..ci {
            let xplane = &x[ic * h * wd..(ic + 1) * h * wd];
            let wbase = ((oc * ci) + ic) * k * k;
            for kh in 0..k {
                for kw in 0..k {
                    let wv = w[wbase + kh * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let shift = kw as isize - pad as isize;
                            let (o_lo, i_lo) = if shift < 0 {
                                ((-shift) as usize, 0usize)
                            } else {
                                (0usize, shift as usize)
                            };
                            let len = (ow - o_lo).min(wd - i_lo);
                            for j in 0..len {
                                orow[o_lo + j] += wv * xrow[i_lo + j];
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kw) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    *o += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<f64>) {
    let oh = h.div_ceil(stride);
    let ow = wd.div_ceil(stride);
    let pad = (k - 1) / 2;
    let mut dx = vec![0.0; ci * h * wd];
    let mut dw = vec![0.0; co * ci * k * k];
    for oc in 0..co {
        let gplane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..ci {
            let xplane = &x[ic * h * wd..(ic + 1) * h * wd];
            let dxplane = &mut dx[ic * h * wd..(ic + 1) * h * wd];
            let wbase = ((oc * ci) + ic) * k * k;
            for kh in 0..k {
                for kw in 0..k {
                    let wv = w[wbase + kh * k + kw];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                        let dxrow = &mut dxplane[iy as usize * wd..(iy as usize + 1) * wd];
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for (ox, &g) in grow.iter().enumerate() {
                            let ix = (ox * stride + kw) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                acc += g * xrow[ix as usize];
                                dxrow[ix as usize] += g * wv;
                            }
                        }
                    }
                    dw[wbase + kh * k + kw] += acc;
                }
            }
        }
    }
    (dx, dw)
}
