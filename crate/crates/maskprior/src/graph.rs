//! Reverse-mode automatic differentiation on an eager tape.
//!
//! A [`Graph`] records every operation as it executes (define-by-run), so the
//! forward values are available immediately and [`Graph::backward`] walks the
//! tape in reverse to accumulate gradients. The op set is exactly what the
//! detection model needs — dense convolutions via im2col + GEMM, batch norm,
//! RoI align over a feature pyramid, bilinear resizing, and the three loss
//! heads — rather than a general tensor algebra.
//!
//! Shape errors are programmer errors and panic with a message; fallible I/O
//! lives elsewhere.

use crate::scalar::Scalar;
use crate::tensor::{lerp_coeff, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// One RoI for [`Graph::roi_align`]: which image in the batch, which pyramid
/// level, and the box in that level's feature coordinates.
#[derive(Clone, Debug)]
pub struct RoiSpec {
    pub img: usize,
    pub level: usize,
    /// Box `[x0, y0, x1, y1]` in feature-map coordinates of `level`.
    pub rect: [f64; 4],
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    needs_grad: bool,
    op: Op<S>,
}

enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvT2x2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor<S>,
        var: Tensor<S>,
        eps: S,
        training: bool,
    },
    Relu {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    PerPixelLinear {
        x: Var,
        w: Var,
    },
    Gap {
        x: Var,
    },
    BilinearResize {
        x: Var,
    },
    UpsampleNearest2x {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcastChan {
        x: Var,
        prior: Var,
    },
    IndexChannels {
        x: Var,
        idx: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    RoiAlign {
        levels: Vec<Var>,
        rois: Vec<RoiSpec>,
        out_size: usize,
        sampling: usize,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<S>,
    },
    SmoothL1 {
        pred: Var,
        target: Tensor<S>,
        rows: Vec<usize>,
    },
    BceLogits {
        logits: Var,
        target: Tensor<S>,
    },
    SumScalars {
        terms: Vec<Var>,
    },
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<S: Scalar> {
    by_var: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss w.r.t. `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.by_var[v.0].as_ref()
    }

    /// Remove and return the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.by_var[v.0].take()
    }
}

/// An eager autodiff tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<S>, needs_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Clone the forward value out of the tape.
    pub fn detach(&self, v: Var) -> Tensor<S> {
        self.nodes[v.0].value.clone()
    }

    /// Insert an input tensor. `needs_grad` marks trainable parameters.
    pub fn leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> Var {
        self.push(value, needs_grad, Op::Leaf)
    }

    /// Insert a constant (no gradient).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Batch-stat summary saved by a training-mode batch norm node:
    /// `(mean, biased variance)`, both `[C]`.
    pub fn bn_batch_stats(&self, v: Var) -> (&Tensor<S>, &Tensor<S>) {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => (mean, var),
            _ => panic!("bn_batch_stats on a non-batchnorm node"),
        }
    }

    // ---------------------------------------------------------------- conv

    /// 2-D convolution, NCHW × [Cout, Cin, kh, kw] with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.nodes[x.0].value.dims4();
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv2d: weight must be 4-d");
        assert_eq!(ws[1], cin, "conv2d: Cin mismatch ({} vs {})", ws[1], cin);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(bv) = b {
            assert_eq!(self.nodes[bv.0].value.shape(), [cout]);
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let kk = cin * kh * kw;
        let ll = oh * ow;

        let mut y = Tensor::zeros(&[n, cout, oh, ow]);
        let mut col = vec![S::zero(); kk * ll];
        for ni in 0..n {
            let xs = &self.nodes[x.0].value.data()[ni * cin * h * wd..(ni + 1) * cin * h * wd];
            im2col(xs, cin, h, wd, kh, kw, stride, pad, oh, ow, &mut col);
            let ys = &mut y.data_mut()[ni * cout * ll..(ni + 1) * cout * ll];
            S::gemm(cout, kk, ll, S::one(), self.nodes[w.0].value.data(), &col, S::zero(), ys);
            if let Some(bv) = b {
                let bd = self.nodes[bv.0].value.data().to_vec();
                for co in 0..cout {
                    let bias = bd[co];
                    for v in &mut ys[co * ll..(co + 1) * ll] {
                        *v += bias;
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.map(|bv| self.ng(bv)).unwrap_or(false);
        self.push(y, needs, Op::Conv2d { x, w, b, stride, pad })
    }

    /// 2×2 stride-2 transposed convolution (exact 2× upsampling).
    /// Weight layout `[Cin, Cout, 2, 2]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, cin, h, wd) = self.nodes[x.0].value.dims4();
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[0], cin, "conv_transpose2x2: Cin mismatch");
        assert_eq!((ws[2], ws[3]), (2, 2), "conv_transpose2x2: kernel must be 2x2");
        let cout = ws[1];
        let (oh, ow) = (2 * h, 2 * wd);
        let hw = h * wd;
        let q = cout * 4;

        let mut y = Tensor::zeros(&[n, cout, oh, ow]);
        let mut tmp = vec![S::zero(); q * hw];
        for ni in 0..n {
            let xs = &self.nodes[x.0].value.data()[ni * cin * hw..(ni + 1) * cin * hw];
            // tmp[q, hw] = w^T [q, cin] @ x [cin, hw]
            S::gemm_tn(q, cin, hw, S::one(), self.nodes[w.0].value.data(), xs, S::zero(), &mut tmp);
            let ys = &mut y.data_mut()[ni * cout * oh * ow..(ni + 1) * cout * oh * ow];
            for co in 0..cout {
                for di in 0..2 {
                    for dj in 0..2 {
                        let row = &tmp[((co * 2 + di) * 2 + dj) * hw..((co * 2 + di) * 2 + dj + 1) * hw];
                        for i in 0..h {
                            for j in 0..wd {
                                ys[co * oh * ow + (2 * i + di) * ow + (2 * j + dj)] = row[i * wd + j];
                            }
                        }
                    }
                }
            }
            if let Some(bv) = b {
                let bd = self.nodes[bv.0].value.data().to_vec();
                for co in 0..cout {
                    let bias = bd[co];
                    for v in &mut ys[co * oh * ow..(co + 1) * oh * ow] {
                        *v += bias;
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.map(|bv| self.ng(bv)).unwrap_or(false);
        self.push(y, needs, Op::ConvT2x2 { x, w, b })
    }

    // ------------------------------------------------------------- normfns

    /// Batch normalization over N×H×W per channel. `running = None` uses the
    /// batch statistics (training); `Some((mean, var))` uses the provided
    /// running statistics (evaluation). Batch stats are retrievable from the
    /// node via [`Graph::bn_batch_stats`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor<S>, &Tensor<S>)>,
        eps: S,
    ) -> Var {
        let (n, c, h, w) = self.nodes[x.0].value.dims4();
        assert_eq!(self.nodes[gamma.0].value.shape(), [c]);
        assert_eq!(self.nodes[beta.0].value.shape(), [c]);
        let cnt = n * h * w;
        let cnt_s = S::from_f64(cnt as f64);

        let training = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => {
                assert_eq!(m.shape(), [c]);
                assert_eq!(v.shape(), [c]);
                (m.clone(), v.clone())
            }
            None => {
                assert!(cnt > 0, "batch_norm: empty batch");
                let xd = self.nodes[x.0].value.data();
                let mut m = Tensor::zeros(&[c]);
                let mut v = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let mut s = S::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            s += xd[base + p];
                        }
                    }
                    let mu = s / cnt_s;
                    let mut sq = S::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            let d = xd[base + p] - mu;
                            sq += d * d;
                        }
                    }
                    m.data_mut()[ci] = mu;
                    v.data_mut()[ci] = sq / cnt_s;
                }
                (m, v)
            }
        };

        let mut y = Tensor::zeros(&[n, c, h, w]);
        {
            let xd = self.nodes[x.0].value.data();
            let gd = self.nodes[gamma.0].value.data();
            let bd = self.nodes[beta.0].value.data();
            let yd = y.data_mut();
            for ci in 0..c {
                let istd = S::one() / (var.data()[ci] + eps).sqrt();
                let (mu, g, bi) = (mean.data()[ci], gd[ci], bd[ci]);
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for p in 0..h * w {
                        yd[base + p] = g * (xd[base + p] - mu) * istd + bi;
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(y, needs, Op::BatchNorm { x, gamma, beta, mean, var, eps, training })
    }

    // ----------------------------------------------------------- pointwise

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.map(|v| if v > S::zero() { v } else { S::zero() });
        let needs = self.ng(x);
        self.push(y, needs, Op::Relu { x })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape(), "add: shape mismatch");
        let mut y = self.nodes[a.0].value.clone();
        for (o, v) in y.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += *v;
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(y, needs, Op::Add { a, b })
    }

    // ------------------------------------------------------------- linear

    /// Fully connected layer: `y = x @ w^T + b`, `x` is `[N, F]`, `w` is `[O, F]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(xs.len(), 2, "linear: input must be [N, F]");
        assert_eq!(ws.len(), 2, "linear: weight must be [O, F]");
        assert_eq!(xs[1], ws[1], "linear: feature dim mismatch");
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut y = Tensor::zeros(&[n, o]);
        if n > 0 {
            S::gemm_nt(
                n,
                f,
                o,
                S::one(),
                self.nodes[x.0].value.data(),
                self.nodes[w.0].value.data(),
                S::zero(),
                y.data_mut(),
            );
        }
        if let Some(bv) = b {
            assert_eq!(self.nodes[bv.0].value.shape(), [o]);
            let bd = self.nodes[bv.0].value.data().to_vec();
            for ni in 0..n {
                for (oi, bias) in bd.iter().enumerate() {
                    y.data_mut()[ni * o + oi] += *bias;
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.map(|bv| self.ng(bv)).unwrap_or(false);
        self.push(y, needs, Op::Linear { x, w, b })
    }

    /// Apply a `[O, F]` weight matrix at every spatial position of a
    /// `[N, F, H, W]` map (a bias-free 1×1 convolution that can share its
    /// weights with a [`Graph::linear`] node).
    pub fn per_pixel_linear(&mut self, x: Var, w: Var) -> Var {
        let (n, f, h, wd) = self.nodes[x.0].value.dims4();
        let ws = self.nodes[w.0].value.shape().to_vec();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1], f, "per_pixel_linear: feature dim mismatch");
        let o = ws[0];
        let hw = h * wd;
        let mut y = Tensor::zeros(&[n, o, h, wd]);
        for ni in 0..n {
            let xs = &self.nodes[x.0].value.data()[ni * f * hw..(ni + 1) * f * hw];
            let ys = &mut y.data_mut()[ni * o * hw..(ni + 1) * o * hw];
            S::gemm(o, f, hw, S::one(), self.nodes[w.0].value.data(), xs, S::zero(), ys);
        }
        let needs = self.ng(x) || self.ng(w);
        self.push(y, needs, Op::PerPixelLinear { x, w })
    }

    /// Global average pooling: `[N, C, H, W] -> [N, C]`.
    pub fn gap(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.nodes[x.0].value.dims4();
        let hw = S::from_f64((h * w) as f64);
        let mut y = Tensor::zeros(&[n, c]);
        let xd = self.nodes[x.0].value.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let mut s = S::zero();
                for p in 0..h * w {
                    s += xd[base + p];
                }
                y.data_mut()[ni * c + ci] = s / hw;
            }
        }
        let needs = self.ng(x);
        self.push(y, needs, Op::Gap { x })
    }

    // ------------------------------------------------------------ resample

    /// Bilinear resize to `oh × ow` (half-pixel-center convention).
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (n, c, h, w) = self.nodes[x.0].value.dims4();
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        let ys_coef = resize_coeffs(h, oh);
        let xs_coef = resize_coeffs(w, ow);
        let xd = self.nodes[x.0].value.data();
        let yd = y.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let obase = (ni * c + ci) * oh * ow;
                for (i, &(y0, y1, wy)) in ys_coef.iter().enumerate() {
                    for (j, &(x0, x1, wx)) in xs_coef.iter().enumerate() {
                        let wy1 = S::from_f64(wy);
                        let wy0 = S::one() - wy1;
                        let wx1 = S::from_f64(wx);
                        let wx0 = S::one() - wx1;
                        let v = wy0 * (wx0 * xd[base + y0 * w + x0] + wx1 * xd[base + y0 * w + x1])
                            + wy1 * (wx0 * xd[base + y1 * w + x0] + wx1 * xd[base + y1 * w + x1]);
                        yd[obase + i * ow + j] = v;
                    }
                }
            }
        }
        let needs = self.ng(x);
        self.push(y, needs, Op::BilinearResize { x })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest_2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.nodes[x.0].value.dims4();
        let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let xd = self.nodes[x.0].value.data();
        let yd = y.data_mut();
        for nc in 0..n * c {
            let base = nc * h * w;
            let obase = nc * 4 * h * w;
            for i in 0..h {
                for j in 0..w {
                    let v = xd[base + i * w + j];
                    for di in 0..2 {
                        for dj in 0..2 {
                            yd[obase + (2 * i + di) * 2 * w + (2 * j + dj)] = v;
                        }
                    }
                }
            }
        }
        let needs = self.ng(x);
        self.push(y, needs, Op::UpsampleNearest2x { x })
    }

    // -------------------------------------------------------------- gather

    /// Broadcast-add a single-channel map to every channel:
    /// `[N, C, H, W] + [N, 1, H, W]`.
    pub fn add_broadcast_chan(&mut self, x: Var, prior: Var) -> Var {
        let (n, c, h, w) = self.nodes[x.0].value.dims4();
        let (pn, pc, ph, pw) = self.nodes[prior.0].value.dims4();
        assert_eq!((pn, pc, ph, pw), (n, 1, h, w), "add_broadcast_chan: prior must be [N,1,H,W]");
        let mut y = self.nodes[x.0].value.clone();
        let pd = self.nodes[prior.0].value.data();
        let yd = y.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let pbase = ni * h * w;
                for p in 0..h * w {
                    yd[base + p] += pd[pbase + p];
                }
            }
        }
        let needs = self.ng(x) || self.ng(prior);
        self.push(y, needs, Op::AddBroadcastChan { x, prior })
    }

    /// Per-row channel selection: `[N, K, H, W]` with `idx[n] < K` yields
    /// `[N, 1, H, W]` where row `n` is channel `idx[n]` of input row `n`.
    pub fn index_channels(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let (n, k, h, w) = self.nodes[x.0].value.dims4();
        assert_eq!(idx.len(), n, "index_channels: one index per row");
        assert!(idx.iter().all(|&i| i < k), "index_channels: index out of range");
        let mut y = Tensor::zeros(&[n, 1, h, w]);
        let xd = self.nodes[x.0].value.data();
        for ni in 0..n {
            let src = (ni * k + idx[ni]) * h * w;
            y.data_mut()[ni * h * w..(ni + 1) * h * w].copy_from_slice(&xd[src..src + h * w]);
        }
        let needs = self.ng(x);
        self.push(y, needs, Op::IndexChannels { x, idx })
    }

    /// Select a subset of leading-axis rows (any rank ≥ 1).
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xs = self.nodes[x.0].value.shape().to_vec();
        assert!(!xs.is_empty());
        let stride: usize = xs[1..].iter().product();
        assert!(rows.iter().all(|&r| r < xs[0]), "select_rows: row out of range");
        let mut oshape = xs.clone();
        oshape[0] = rows.len();
        let mut y = Tensor::zeros(&oshape);
        let xd = self.nodes[x.0].value.data();
        for (oi, &r) in rows.iter().enumerate() {
            y.data_mut()[oi * stride..(oi + 1) * stride].copy_from_slice(&xd[r * stride..(r + 1) * stride]);
        }
        let needs = self.ng(x);
        self.push(y, needs, Op::SelectRows { x, rows })
    }

    // ----------------------------------------------------------- roi align

    /// RoI align over a feature pyramid. Every level must be `[N, C, h_l, w_l]`
    /// with a common `C`; each RoI names its batch image, its pyramid level and
    /// a box in that level's feature coordinates. Sampling uses
    /// `sampling × sampling` bilinear taps per output bin, averaged.
    pub fn roi_align(&mut self, levels: &[Var], rois: Vec<RoiSpec>, out_size: usize, sampling: usize) -> Var {
        assert!(!levels.is_empty() && sampling > 0 && out_size > 0);
        let (n0, c, _, _) = self.nodes[levels[0].0].value.dims4();
        for lv in levels {
            let (ln, lc, _, _) = self.nodes[lv.0].value.dims4();
            assert_eq!((ln, lc), (n0, c), "roi_align: inconsistent pyramid shapes");
        }
        for r in &rois {
            assert!(r.img < n0 && r.level < levels.len(), "roi_align: roi out of range");
            assert!(
                r.rect[2] > r.rect[0] && r.rect[3] > r.rect[1],
                "roi_align: degenerate box {:?}",
                r.rect
            );
        }
        let rn = rois.len();
        let mut y = Tensor::zeros(&[rn, c, out_size, out_size]);
        let inv = 1.0 / (sampling * sampling) as f64;
        for (ri, roi) in rois.iter().enumerate() {
            let lvl = &self.nodes[levels[roi.level].0].value;
            let (_, _, lh, lw) = lvl.dims4();
            let ld = lvl.data();
            for (cell, sy, sx) in roi_sample_points(roi, out_size, sampling) {
                let (y0, y1, wy) = lerp_coeff(sy - 0.5, lh);
                let (x0, x1, wx) = lerp_coeff(sx - 0.5, lw);
                let wy1 = S::from_f64(wy);
                let wy0 = S::one() - wy1;
                let wx1 = S::from_f64(wx);
                let wx0 = S::one() - wx1;
                let scale = S::from_f64(inv);
                for ci in 0..c {
                    let base = (roi.img * c + ci) * lh * lw;
                    let v = wy0 * (wx0 * ld[base + y0 * lw + x0] + wx1 * ld[base + y0 * lw + x1])
                        + wy1 * (wx0 * ld[base + y1 * lw + x0] + wx1 * ld[base + y1 * lw + x1]);
                    y.data_mut()[(ri * c + ci) * out_size * out_size + cell] += v * scale;
                }
            }
        }
        let needs = levels.iter().any(|&lv| self.ng(lv));
        self.push(
            y,
            needs,
            Op::RoiAlign { levels: levels.to_vec(), rois, out_size, sampling },
        )
    }

    // -------------------------------------------------------------- losses

    /// Mean softmax cross-entropy over rows of `[N, K]` logits.
    pub fn softmax_ce(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let ls = self.nodes[logits.0].value.shape().to_vec();
        assert_eq!(ls.len(), 2);
        let (n, k) = (ls[0], ls[1]);
        assert_eq!(labels.len(), n);
        assert!(labels.iter().all(|&l| l < k), "softmax_ce: label out of range");
        assert!(n > 0, "softmax_ce: empty batch");
        let mut probs = Tensor::zeros(&[n, k]);
        let mut loss = S::zero();
        let ld = self.nodes[logits.0].value.data();
        for ni in 0..n {
            let row = &ld[ni * k..(ni + 1) * k];
            let m = row.iter().cloned().fold(row[0], |a, b| if b > a { b } else { a });
            let mut z = S::zero();
            for &v in row {
                z += (v - m).exp();
            }
            for ki in 0..k {
                probs.data_mut()[ni * k + ki] = (row[ki] - m).exp() / z;
            }
            loss -= (row[labels[ni]] - m) - z.ln();
        }
        loss /= S::from_f64(n as f64);
        let needs = self.ng(logits);
        self.push(Tensor::scalar(loss), needs, Op::SoftmaxCe { logits, labels, probs })
    }

    /// Smooth-L1 (Huber, delta = 1) box regression loss: per selected row the
    /// four coordinate errors are summed, then averaged over the selected rows.
    /// Empty `rows` yields zero loss.
    pub fn smooth_l1(&mut self, pred: Var, target: Tensor<S>, rows: Vec<usize>) -> Var {
        let ps = self.nodes[pred.0].value.shape().to_vec();
        assert_eq!(ps, target.shape(), "smooth_l1: pred/target shape mismatch");
        assert_eq!(ps.len(), 2);
        assert!(rows.iter().all(|&r| r < ps[0]));
        let cols = ps[1];
        let denom = S::from_f64(rows.len().max(1) as f64);
        let mut loss = S::zero();
        let pd = self.nodes[pred.0].value.data();
        let one = S::one();
        let half = S::from_f64(0.5);
        for &r in &rows {
            for ci in 0..cols {
                let e = pd[r * cols + ci] - target.data()[r * cols + ci];
                let a = e.abs();
                loss += if a < one { half * e * e } else { a - half };
            }
        }
        loss /= denom;
        let needs = self.ng(pred);
        self.push(Tensor::scalar(loss), needs, Op::SmoothL1 { pred, target, rows })
    }

    /// Mean binary cross-entropy over logits against soft targets in `[0, 1]`
    /// (numerically stable log-sum-exp form).
    pub fn bce_logits(&mut self, logits: Var, target: Tensor<S>) -> Var {
        assert_eq!(self.nodes[logits.0].value.shape(), target.shape(), "bce_logits: shape mismatch");
        let total = target.data().len();
        assert!(total > 0, "bce_logits: empty input");
        let mut loss = S::zero();
        let ld = self.nodes[logits.0].value.data();
        for (z, t) in ld.iter().zip(target.data()) {
            let zmax = if *z > S::zero() { *z } else { S::zero() };
            loss += zmax - *z * *t + ((-z.abs()).exp() + S::one()).ln();
        }
        loss /= S::from_f64(total as f64);
        let needs = self.ng(logits);
        self.push(Tensor::scalar(loss), needs, Op::BceLogits { logits, target })
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty());
        let mut s = S::zero();
        for t in terms {
            assert_eq!(self.nodes[t.0].value.data().len(), 1, "sum_scalars: non-scalar term");
            s += self.nodes[t.0].value.item();
        }
        let needs = terms.iter().any(|&t| self.ng(t));
        self.push(Tensor::scalar(s), needs, Op::SumScalars { terms: terms.to_vec() })
    }

    // ------------------------------------------------------------ backward

    /// Reverse pass from a scalar `loss` node. Returns per-node gradients for
    /// every node on a differentiable path to the loss.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(self.nodes[loss.0].value.data().len(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &gy, &mut grads);
            // Leave gradients in place for leaves so callers can read them.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Grads { by_var: grads }
    }

    fn acc_into<'a>(
        grads: &'a mut [Option<Tensor<S>>],
        v: Var,
        shape: &[usize],
    ) -> &'a mut Tensor<S> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, gy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (n, cin, h, wd) = self.nodes[x.0].value.dims4();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let (_, _, oh, ow) = gy.dims4();
                let kk = cin * kh * kw;
                let ll = oh * ow;
                let mut col = vec![S::zero(); kk * ll];
                let mut dcol = vec![S::zero(); kk * ll];
                let want_x = self.ng(*x);
                let want_w = self.ng(*w);
                for ni in 0..n {
                    let gys = &gy.data()[ni * cout * ll..(ni + 1) * cout * ll];
                    if want_w {
                        let xs = &self.nodes[x.0].value.data()[ni * cin * h * wd..(ni + 1) * cin * h * wd];
                        im2col(xs, cin, h, wd, kh, kw, *stride, *pad, oh, ow, &mut col);
                        let gw = Self::acc_into(grads, *w, &ws);
                        S::gemm_nt(cout, ll, kk, S::one(), gys, &col, S::one(), gw.data_mut());
                    }
                    if want_x {
                        S::gemm_tn(kk, cout, ll, S::one(), self.nodes[w.0].value.data(), gys, S::zero(), &mut dcol);
                        let gx = Self::acc_into(grads, *x, &[n, cin, h, wd]);
                        let gxs = &mut gx.data_mut()[ni * cin * h * wd..(ni + 1) * cin * h * wd];
                        col2im_acc(&dcol, cin, h, wd, kh, kw, *stride, *pad, oh, ow, gxs);
                    }
                }
                if let Some(bv) = b {
                    if self.ng(*bv) {
                        let gb = Self::acc_into(grads, *bv, &[cout]);
                        for ni in 0..n {
                            for co in 0..cout {
                                let base = (ni * cout + co) * ll;
                                let mut s = S::zero();
                                for p in 0..ll {
                                    s += gy.data()[base + p];
                                }
                                gb.data_mut()[co] += s;
                            }
                        }
                    }
                }
            }
            Op::ConvT2x2 { x, w, b } => {
                let (n, cin, h, wd) = self.nodes[x.0].value.dims4();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let cout = ws[1];
                let (oh, ow) = (2 * h, 2 * wd);
                let hw = h * wd;
                let q = cout * 4;
                let mut dtmp = vec![S::zero(); q * hw];
                for ni in 0..n {
                    let gys = &gy.data()[ni * cout * oh * ow..(ni + 1) * cout * oh * ow];
                    for co in 0..cout {
                        for di in 0..2 {
                            for dj in 0..2 {
                                let row = &mut dtmp[((co * 2 + di) * 2 + dj) * hw..((co * 2 + di) * 2 + dj + 1) * hw];
                                for ii in 0..h {
                                    for jj in 0..wd {
                                        row[ii * wd + jj] = gys[co * oh * ow + (2 * ii + di) * ow + (2 * jj + dj)];
                                    }
                                }
                            }
                        }
                    }
                    if self.ng(*w) {
                        let xs = &self.nodes[x.0].value.data()[ni * cin * hw..(ni + 1) * cin * hw];
                        let gw = Self::acc_into(grads, *w, &ws);
                        // dw [cin, q] += x [cin, hw] @ dtmp^T [hw, q]
                        S::gemm_nt(cin, hw, q, S::one(), xs, &dtmp, S::one(), gw.data_mut());
                    }
                    if self.ng(*x) {
                        let gx = Self::acc_into(grads, *x, &[n, cin, h, wd]);
                        let gxs = &mut gx.data_mut()[ni * cin * hw..(ni + 1) * cin * hw];
                        // dx [cin, hw] += w [cin, q] @ dtmp [q, hw]
                        S::gemm(cin, q, hw, S::one(), self.nodes[w.0].value.data(), &dtmp, S::one(), gxs);
                    }
                }
                if let Some(bv) = b {
                    if self.ng(*bv) {
                        let gb = Self::acc_into(grads, *bv, &[cout]);
                        for ni in 0..n {
                            for co in 0..cout {
                                let base = (ni * cout + co) * oh * ow;
                                let mut s = S::zero();
                                for p in 0..oh * ow {
                                    s += gy.data()[base + p];
                                }
                                gb.data_mut()[co] += s;
                            }
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, var, eps, training } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4();
                let cnt = n * h * w;
                let cnt_s = S::from_f64(cnt as f64);
                let xd = self.nodes[x.0].value.data();
                let gd = self.nodes[gamma.0].value.data().to_vec();
                for ci in 0..c {
                    let mu = mean.data()[ci];
                    let istd = S::one() / (var.data()[ci] + *eps).sqrt();
                    let mut sum_dy = S::zero();
                    let mut sum_dy_xhat = S::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            let dy = gy.data()[base + p];
                            sum_dy += dy;
                            sum_dy_xhat += dy * (xd[base + p] - mu) * istd;
                        }
                    }
                    if self.ng(*gamma) {
                        Self::acc_into(grads, *gamma, &[c]).data_mut()[ci] += sum_dy_xhat;
                    }
                    if self.ng(*beta) {
                        Self::acc_into(grads, *beta, &[c]).data_mut()[ci] += sum_dy;
                    }
                    if self.ng(*x) {
                        let gx = Self::acc_into(grads, *x, &[n, c, h, w]);
                        if *training {
                            let coef = gd[ci] * istd / cnt_s;
                            for ni in 0..n {
                                let base = (ni * c + ci) * h * w;
                                for p in 0..h * w {
                                    let xhat = (xd[base + p] - mu) * istd;
                                    gx.data_mut()[base + p] +=
                                        coef * (cnt_s * gy.data()[base + p] - sum_dy - xhat * sum_dy_xhat);
                                }
                            }
                        } else {
                            let coef = gd[ci] * istd;
                            for ni in 0..n {
                                let base = (ni * c + ci) * h * w;
                                for p in 0..h * w {
                                    gx.data_mut()[base + p] += coef * gy.data()[base + p];
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.ng(*x) {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let gx = Self::acc_into(grads, *x, &shape);
                    for ((g, &xv), &dy) in gx
                        .data_mut()
                        .iter_mut()
                        .zip(self.nodes[x.0].value.data())
                        .zip(gy.data())
                    {
                        if xv > S::zero() {
                            *g += dy;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.ng(*v) {
                        let shape = self.nodes[v.0].value.shape().to_vec();
                        let gv = Self::acc_into(grads, *v, &shape);
                        gv.add_scaled(gy, S::one());
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (n, f, o) = (xs[0], xs[1], ws[0]);
                if n > 0 {
                    if self.ng(*x) {
                        let gx = Self::acc_into(grads, *x, &xs);
                        S::gemm(n, o, f, S::one(), gy.data(), self.nodes[w.0].value.data(), S::one(), gx.data_mut());
                    }
                    if self.ng(*w) {
                        let gw = Self::acc_into(grads, *w, &ws);
                        S::gemm_tn(o, n, f, S::one(), gy.data(), self.nodes[x.0].value.data(), S::one(), gw.data_mut());
                    }
                }
                if let Some(bv) = b {
                    if self.ng(*bv) {
                        let gb = Self::acc_into(grads, *bv, &[o]);
                        for ni in 0..n {
                            for oi in 0..o {
                                gb.data_mut()[oi] += gy.data()[ni * o + oi];
                            }
                        }
                    }
                }
            }
            Op::PerPixelLinear { x, w } => {
                let (n, f, h, wd) = self.nodes[x.0].value.dims4();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let o = ws[0];
                let hw = h * wd;
                for ni in 0..n {
                    let gys = &gy.data()[ni * o * hw..(ni + 1) * o * hw];
                    if self.ng(*x) {
                        let gx = Self::acc_into(grads, *x, &[n, f, h, wd]);
                        let gxs = &mut gx.data_mut()[ni * f * hw..(ni + 1) * f * hw];
                        S::gemm_tn(f, o, hw, S::one(), self.nodes[w.0].value.data(), gys, S::one(), gxs);
                    }
                    if self.ng(*w) {
                        let xs = &self.nodes[x.0].value.data()[ni * f * hw..(ni + 1) * f * hw];
                        let gw = Self::acc_into(grads, *w, &ws);
                        S::gemm_nt(o, hw, f, S::one(), gys, xs, S::one(), gw.data_mut());
                    }
                }
            }
            Op::Gap { x } => {
                if self.ng(*x) {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4();
                    let inv = S::one() / S::from_f64((h * w) as f64);
                    let gx = Self::acc_into(grads, *x, &[n, c, h, w]);
                    for ni in 0..n {
                        for ci in 0..c {
                            let g = gy.data()[ni * c + ci] * inv;
                            let base = (ni * c + ci) * h * w;
                            for p in 0..h * w {
                                gx.data_mut()[base + p] += g;
                            }
                        }
                    }
                }
            }
            Op::BilinearResize { x } => {
                if self.ng(*x) {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4();
                    let (_, _, oh, ow) = gy.dims4();
                    let ys_coef = resize_coeffs(h, oh);
                    let xs_coef = resize_coeffs(w, ow);
                    let gx = Self::acc_into(grads, *x, &[n, c, h, w]);
                    for nc in 0..n * c {
                        let base = nc * h * w;
                        let obase = nc * oh * ow;
                        for (i, &(y0, y1, wy)) in ys_coef.iter().enumerate() {
                            for (j, &(x0, x1, wx)) in xs_coef.iter().enumerate() {
                                let dy = gy.data()[obase + i * ow + j];
                                let wy1 = S::from_f64(wy);
                                let wy0 = S::one() - wy1;
                                let wx1 = S::from_f64(wx);
                                let wx0 = S::one() - wx1;
                                gx.data_mut()[base + y0 * w + x0] += dy * wy0 * wx0;
                                gx.data_mut()[base + y0 * w + x1] += dy * wy0 * wx1;
                                gx.data_mut()[base + y1 * w + x0] += dy * wy1 * wx0;
                                gx.data_mut()[base + y1 * w + x1] += dy * wy1 * wx1;
                            }
                        }
                    }
                }
            }
            Op::UpsampleNearest2x { x } => {
                if self.ng(*x) {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4();
                    let gx = Self::acc_into(grads, *x, &[n, c, h, w]);
                    for nc in 0..n * c {
                        let base = nc * h * w;
                        let obase = nc * 4 * h * w;
                        for i in 0..h {
                            for j in 0..w {
                                let mut s = S::zero();
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        s += gy.data()[obase + (2 * i + di) * 2 * w + (2 * j + dj)];
                                    }
                                }
                                gx.data_mut()[base + i * w + j] += s;
                            }
                        }
                    }
                }
            }
            Op::AddBroadcastChan { x, prior } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4();
                if self.ng(*x) {
                    let gx = Self::acc_into(grads, *x, &[n, c, h, w]);
                    gx.add_scaled(gy, S::one());
                }
                if self.ng(*prior) {
                    let gp = Self::acc_into(grads, *prior, &[n, 1, h, w]);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * h * w;
                            let pbase = ni * h * w;
                            for p in 0..h * w {
                                gp.data_mut()[pbase + p] += gy.data()[base + p];
                            }
                        }
                    }
                }
            }
            Op::IndexChannels { x, idx } => {
                if self.ng(*x) {
                    let (n, k, h, w) = self.nodes[x.0].value.dims4();
                    let gx = Self::acc_into(grads, *x, &[n, k, h, w]);
                    for ni in 0..n {
                        let dst = (ni * k + idx[ni]) * h * w;
                        for p in 0..h * w {
                            gx.data_mut()[dst + p] += gy.data()[ni * h * w + p];
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if self.ng(*x) {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let stride: usize = xs[1..].iter().product();
                    let gx = Self::acc_into(grads, *x, &xs);
                    for (oi, &r) in rows.iter().enumerate() {
                        for p in 0..stride {
                            gx.data_mut()[r * stride + p] += gy.data()[oi * stride + p];
                        }
                    }
                }
            }
            Op::RoiAlign { levels, rois, out_size, sampling } => {
                let c = self.nodes[levels[0].0].value.dims4().1;
                let inv = 1.0 / (sampling * sampling) as f64;
                for (ri, roi) in rois.iter().enumerate() {
                    let lvar = levels[roi.level];
                    if !self.ng(lvar) {
                        continue;
                    }
                    let (ln, lc, lh, lw) = self.nodes[lvar.0].value.dims4();
                    for (cell, sy, sx) in roi_sample_points(roi, *out_size, *sampling) {
                        let (y0, y1, wy) = lerp_coeff(sy - 0.5, lh);
                        let (x0, x1, wx) = lerp_coeff(sx - 0.5, lw);
                        let wy1 = S::from_f64(wy);
                        let wy0 = S::one() - wy1;
                        let wx1 = S::from_f64(wx);
                        let wx0 = S::one() - wx1;
                        let scale = S::from_f64(inv);
                        let gl = Self::acc_into(grads, lvar, &[ln, lc, lh, lw]);
                        for ci in 0..c {
                            let dy = gy.data()[(ri * c + ci) * out_size * out_size + cell] * scale;
                            let base = (roi.img * c + ci) * lh * lw;
                            gl.data_mut()[base + y0 * lw + x0] += dy * wy0 * wx0;
                            gl.data_mut()[base + y0 * lw + x1] += dy * wy0 * wx1;
                            gl.data_mut()[base + y1 * lw + x0] += dy * wy1 * wx0;
                            gl.data_mut()[base + y1 * lw + x1] += dy * wy1 * wx1;
                        }
                    }
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                if self.ng(*logits) {
                    let ls = self.nodes[logits.0].value.shape().to_vec();
                    let (n, k) = (ls[0], ls[1]);
                    let g = gy.item() / S::from_f64(n as f64);
                    let gx = Self::acc_into(grads, *logits, &ls);
                    for ni in 0..n {
                        for ki in 0..k {
                            let ind = if ki == labels[ni] { S::one() } else { S::zero() };
                            gx.data_mut()[ni * k + ki] += g * (probs.data()[ni * k + ki] - ind);
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, target, rows } => {
                if self.ng(*pred) && !rows.is_empty() {
                    let ps = self.nodes[pred.0].value.shape().to_vec();
                    let cols = ps[1];
                    let g = gy.item() / S::from_f64(rows.len() as f64);
                    let one = S::one();
                    let gx = Self::acc_into(grads, *pred, &ps);
                    for &r in rows {
                        for ci in 0..cols {
                            let e = self.nodes[pred.0].value.data()[r * cols + ci] - target.data()[r * cols + ci];
                            let de = if e.abs() < one {
                                e
                            } else if e > S::zero() {
                                one
                            } else {
                                -one
                            };
                            gx.data_mut()[r * cols + ci] += g * de;
                        }
                    }
                }
            }
            Op::BceLogits { logits, target } => {
                if self.ng(*logits) {
                    let shape = self.nodes[logits.0].value.shape().to_vec();
                    let total = target.data().len();
                    let g = gy.item() / S::from_f64(total as f64);
                    let gx = Self::acc_into(grads, *logits, &shape);
                    for ((gv, &z), &t) in gx
                        .data_mut()
                        .iter_mut()
                        .zip(self.nodes[logits.0].value.data())
                        .zip(target.data())
                    {
                        let sig = S::one() / (S::one() + (-z).exp());
                        *gv += g * (sig - t);
                    }
                }
            }
            Op::SumScalars { terms } => {
                for t in terms {
                    if self.ng(*t) {
                        let gt = Self::acc_into(grads, *t, &[]);
                        gt.data_mut()[0] += gy.item();
                    }
                }
            }
        }
    }
}

/// Per-axis bilinear resize coefficients under the half-pixel-center
/// convention: output index `i` samples input coordinate
/// `(i + 0.5) * n_in / n_out - 0.5`.
fn resize_coeffs(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| lerp_coeff((i as f64 + 0.5) * scale - 0.5, n_in))
        .collect()
}

/// Sample points for one RoI: `(output cell index, y, x)` in continuous
/// feature coordinates (pixel `(r, c)` has its center at `(r+0.5, c+0.5)`).
fn roi_sample_points(roi: &RoiSpec, out_size: usize, sampling: usize) -> Vec<(usize, f64, f64)> {
    let [x0, y0, x1, y1] = roi.rect;
    let bw = (x1 - x0) / out_size as f64;
    let bh = (y1 - y0) / out_size as f64;
    let mut pts = Vec::with_capacity(out_size * out_size * sampling * sampling);
    for i in 0..out_size {
        for j in 0..out_size {
            for si in 0..sampling {
                for sj in 0..sampling {
                    let sy = y0 + bh * (i as f64 + (si as f64 + 0.5) / sampling as f64);
                    let sx = x0 + bw * (j as f64 + (sj as f64 + 0.5) / sampling as f64);
                    pts.push((i * out_size + j, sy, sx));
                }
            }
        }
    }
    pts
}

/// Unfold one `[C, H, W]` sample into a `[C*kh*kw, oh*ow]` column matrix with
/// zero padding.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * oh * ow;
                for oi in 0..oh {
                    let iy = (oi * stride + ki) as isize - pad as isize;
                    for oj in 0..ow {
                        let ix = (oj * stride + kj) as isize - pad as isize;
                        col[row + oi * ow + oj] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            S::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-add a column-matrix gradient back onto the
/// `[C, H, W]` input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<S: Scalar>(
    dcol: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [S],
) {
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * oh * ow;
                for oi in 0..oh {
                    let iy = (oi * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let ix = (oj * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[(ci * h + iy as usize) * w + ix as usize] += dcol[row + oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient check for a scalar-valued graph function.
    /// `build` must construct the same computation each call from the given
    /// leaf tensors (leaf 0..n marked trainable).
    fn fd_check<F>(inputs: &[Tensor<f64>], build: F, tol: f64)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let run = |ins: &[Tensor<f64>]| -> (f64, Vec<Option<Tensor<f64>>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let loss = build(&mut g, &vars);
            let val = g.value(loss).item();
            let mut grads = g.backward(loss);
            let out = vars.iter().map(|&v| grads.take(v)).collect();
            (val, out)
        };
        let (_, analytic) = run(inputs);
        let h = 1e-5;
        for (pi, inp) in inputs.iter().enumerate() {
            for ei in 0..inp.data().len() {
                let mut plus = inputs.to_vec();
                plus[pi].data_mut()[ei] += h;
                let mut minus = inputs.to_vec();
                minus[pi].data_mut()[ei] -= h;
                let num = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                let ana = analytic[pi]
                    .as_ref()
                    .map(|t| t.data()[ei])
                    .unwrap_or(0.0);
                let denom = ana.abs().max(num.abs()).max(1e-4);
                assert!(
                    (ana - num).abs() / denom < tol,
                    "grad mismatch input {pi} elem {ei}: analytic {ana} vs numeric {num}"
                );
            }
        }
    }

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[2, 3, 5, 6]);
        let w = randn(&mut rng, &[4, 3, 3, 3]);
        let b = randn(&mut rng, &[4]);
        let mut g: Graph<f64> = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let wv = g.leaf(w.clone(), false);
        let bv = g.leaf(b.clone(), false);
        let y = g.conv2d(xv, wv, Some(bv), 2, 1);
        assert_eq!(g.value(y).shape(), [2, 4, 3, 3]);
        // Direct nested-loop convolution as the oracle.
        for n in 0..2 {
            for co in 0..4 {
                for oi in 0..3 {
                    for oj in 0..3 {
                        let mut acc = b.data()[co];
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oi * 2 + ki) as isize - 1;
                                    let ix = (oj * 2 + kj) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                        acc += x.at4(n, ci, iy as usize, ix as usize)
                                            * w.at4(co, ci, ki, kj);
                                    }
                                }
                            }
                        }
                        let got = g.value(y).at4(n, co, oi, oj);
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[2, 2, 4, 4]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        fd_check(
            &[x, w, b],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1);
                let r = g.relu(y);
                let t = Tensor::full(g.value(r).shape(), 0.3);
                g.bce_logits(r, t)
            },
            1e-5,
        );
    }

    #[test]
    fn conv_transpose_gradcheck_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, &[2, 3, 3, 3]);
        let w = randn(&mut rng, &[3, 2, 2, 2]);
        let b = randn(&mut rng, &[2]);
        {
            let mut g: Graph<f64> = Graph::new();
            let xv = g.leaf(x.clone(), false);
            let wv = g.leaf(w.clone(), false);
            let y = g.conv_transpose2x2(xv, wv, None);
            assert_eq!(g.value(y).shape(), [2, 2, 6, 6]);
            // Spot-check one output: y[n,co,2i+di,2j+dj] = sum_ci x[n,ci,i,j] w[ci,co,di,dj].
            let mut want = 0.0;
            for ci in 0..3 {
                want += x.at4(1, ci, 2, 1) * w.at4(ci, 1, 1, 0);
            }
            assert!((g.value(y).at4(1, 1, 5, 2) - want).abs() < 1e-12);
        }
        fd_check(
            &[x, w, b],
            |g, v| {
                let y = g.conv_transpose2x2(v[0], v[1], Some(v[2]));
                let t = Tensor::full(g.value(y).shape(), 0.4);
                g.bce_logits(y, t)
            },
            1e-5,
        );
    }

    #[test]
    fn batch_norm_normalizes_and_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn(&mut rng, &[3, 2, 4, 4]);
        let gamma = Tensor::from_vec(&[2], vec![1.3, 0.7]);
        let beta = Tensor::from_vec(&[2], vec![0.1, -0.2]);
        {
            let mut g: Graph<f64> = Graph::new();
            let xv = g.leaf(x.clone(), false);
            let gv = g.leaf(gamma.clone(), false);
            let bv = g.leaf(beta.clone(), false);
            let y = g.batch_norm(xv, gv, bv, None, 1e-5);
            let (m, v) = g.bn_batch_stats(y);
            // Output per channel must have mean beta and std ~gamma.
            for ci in 0..2 {
                let mut s = 0.0;
                let mut cnt = 0;
                for n in 0..3 {
                    for p in 0..16 {
                        s += g.value(y).data()[(n * 2 + ci) * 16 + p];
                        cnt += 1;
                    }
                }
                let mean_out = s / cnt as f64;
                assert!((mean_out - beta.data()[ci]).abs() < 1e-9);
                assert!(m.data()[ci].is_finite() && v.data()[ci] > 0.0);
            }
        }
        fd_check(
            &[x, gamma, beta],
            |g, v| {
                let y = g.batch_norm(v[0], v[1], v[2], None, 1e-5);
                let r = g.relu(y);
                let t = Tensor::full(g.value(r).shape(), 0.25);
                g.bce_logits(r, t)
            },
            1e-4,
        );
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![3.0, 5.0]);
        let gamma = Tensor::from_vec(&[1], vec![2.0]);
        let beta = Tensor::from_vec(&[1], vec![1.0]);
        let rm = Tensor::from_vec(&[1], vec![1.0]);
        let rv = Tensor::from_vec(&[1], vec![4.0]);
        let mut g: Graph<f64> = Graph::new();
        let xv = g.leaf(x, false);
        let gv = g.leaf(gamma, false);
        let bv = g.leaf(beta, false);
        let y = g.batch_norm(xv, gv, bv, Some((&rm, &rv)), 0.0);
        // (3-1)/2*2+1 = 3, (5-1)/2*2+1 = 5
        assert!((g.value(y).data()[0] - 3.0).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn linear_and_gap_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = randn(&mut rng, &[3, 2, 3, 3]);
        let w = randn(&mut rng, &[4, 2]);
        let b = randn(&mut rng, &[4]);
        fd_check(
            &[x, w, b],
            |g, v| {
                let p = g.gap(v[0]);
                let y = g.linear(p, v[1], Some(v[2]));
                g.softmax_ce(y, vec![1, 0, 3])
            },
            1e-5,
        );
    }

    #[test]
    fn per_pixel_linear_matches_linear_on_gap() {
        // GAP then linear (no bias) == per-pixel linear then GAP: the CAM
        // identity this model relies on.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = randn(&mut rng, &[2, 3, 5, 5]);
        let w = randn(&mut rng, &[4, 3]);
        let mut g: Graph<f64> = Graph::new();
        let xv = g.leaf(x, false);
        let wv = g.leaf(w, false);
        let cam = g.per_pixel_linear(xv, wv);
        let cam_gap = g.gap(cam);
        let pooled = g.gap(xv);
        let logits = g.linear(pooled, wv, None);
        for i in 0..g.value(logits).data().len() {
            assert!((g.value(cam_gap).data()[i] - g.value(logits).data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn per_pixel_linear_gradcheck_with_shared_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = randn(&mut rng, &[2, 3, 2, 2]);
        let w = randn(&mut rng, &[3, 3]);
        fd_check(
            &[x, w],
            |g, v| {
                // Shared weight: CAM path + classification path, both
                // contribute gradient to v[1].
                let cam = g.per_pixel_linear(v[0], v[1]);
                let pooled = g.gap(v[0]);
                let logits = g.linear(pooled, v[1], None);
                let l1 = g.softmax_ce(logits, vec![0, 2]);
                let t = Tensor::full(g.value(cam).shape(), 0.5);
                let l2 = g.bce_logits(cam, t);
                g.sum_scalars(&[l1, l2])
            },
            1e-5,
        );
    }

    #[test]
    fn bilinear_resize_constant_and_gradcheck() {
        // A constant map must stay constant under resize.
        let x = Tensor::full(&[1, 1, 3, 5], 2.5f64);
        let mut g: Graph<f64> = Graph::new();
        let xv = g.leaf(x, false);
        let y = g.bilinear_resize(xv, 7, 9);
        assert!(g.value(y).data().iter().all(|v| (v - 2.5).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = randn(&mut rng, &[1, 2, 3, 3]);
        fd_check(
            &[x],
            |g, v| {
                let y = g.bilinear_resize(v[0], 5, 4);
                let t = Tensor::full(g.value(y).shape(), 0.2);
                g.bce_logits(y, t)
            },
            1e-5,
        );
    }

    #[test]
    fn bilinear_resize_exact_doubling_centers() {
        // 2x upsample of a 2-pixel row: outer output pixels clamp to the
        // nearest input, inner ones interpolate at 1/4 and 3/4.
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0f64, 1.0]);
        let mut g: Graph<f64> = Graph::new();
        let xv = g.leaf(x, false);
        let y = g.bilinear_resize(xv, 1, 4);
        let want = [0.0, 0.25, 0.75, 1.0];
        for (got, want) in g.value(y).data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn upsample_nearest_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = randn(&mut rng, &[1, 2, 2, 3]);
        fd_check(
            &[x],
            |g, v| {
                let y = g.upsample_nearest_2x(v[0]);
                let t = Tensor::full(g.value(y).shape(), 0.6);
                g.bce_logits(y, t)
            },
            1e-5,
        );
    }

    #[test]
    fn roi_align_constant_map_and_center() {
        // Constant map -> every pooled value equals the constant.
        let lvl = Tensor::full(&[1, 2, 6, 6], 3.0f64);
        let mut g: Graph<f64> = Graph::new();
        let lv = g.leaf(lvl, false);
        let rois = vec![RoiSpec { img: 0, level: 0, rect: [0.7, 1.1, 4.9, 5.3] }];
        let y = g.roi_align(&[lv], rois, 7, 2);
        assert!(g.value(y).data().iter().all(|v| (v - 3.0).abs() < 1e-9));

        // 2x2 map [[1,2],[3,4]], box covering the whole map, 1x1 output with a
        // single sample lands exactly at the center: mean of all four = 2.5.
        let lvl = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let mut g: Graph<f64> = Graph::new();
        let lv = g.leaf(lvl, false);
        let y = g.roi_align(&[lv], vec![RoiSpec { img: 0, level: 0, rect: [0.0, 0.0, 2.0, 2.0] }], 1, 1);
        assert!((g.value(y).item() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn roi_align_aligned_box_resamples_exactly() {
        // A box aligned with the pixel grid pooled at matching resolution with
        // one sample per bin reads back pixel centers exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let lvl = randn(&mut rng, &[1, 1, 8, 8]);
        let mut g: Graph<f64> = Graph::new();
        let lv = g.leaf(lvl.clone(), false);
        let y = g.roi_align(&[lv], vec![RoiSpec { img: 0, level: 0, rect: [2.0, 3.0, 6.0, 7.0] }], 4, 1);
        for i in 0..4 {
            for j in 0..4 {
                let want = lvl.at4(0, 0, 3 + i, 2 + j);
                let got = g.value(y).at4(0, 0, i, j);
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roi_align_gradcheck_multilevel() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let l0 = randn(&mut rng, &[2, 2, 6, 6]);
        let l1 = randn(&mut rng, &[2, 2, 3, 3]);
        fd_check(
            &[l0, l1],
            |g, v| {
                let rois = vec![
                    RoiSpec { img: 0, level: 0, rect: [0.5, 0.5, 4.5, 5.0] },
                    RoiSpec { img: 1, level: 1, rect: [0.2, 0.3, 2.8, 2.9] },
                    RoiSpec { img: 1, level: 0, rect: [1.0, 2.0, 5.0, 6.0] },
                ];
                let y = g.roi_align(&[v[0], v[1]], rois, 3, 2);
                let t = Tensor::full(g.value(y).shape(), 0.45);
                g.bce_logits(y, t)
            },
            1e-5,
        );
    }

    #[test]
    fn gather_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let x = randn(&mut rng, &[3, 4, 2, 2]);
        let p = randn(&mut rng, &[3, 1, 2, 2]);
        fd_check(
            &[x, p],
            |g, v| {
                let merged = g.add_broadcast_chan(v[0], v[1]);
                let sel = g.index_channels(merged, vec![2, 0, 3]);
                let rows = g.select_rows(sel, vec![0, 2]);
                let t = Tensor::full(g.value(rows).shape(), 0.35);
                g.bce_logits(rows, t)
            },
            1e-5,
        );
    }

    #[test]
    fn losses_reference_values() {
        // Softmax CE of uniform logits = ln(K).
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[2, 5]), false);
        let l = g.softmax_ce(logits, vec![0, 3]);
        assert!((g.value(l).item() - 5.0f64.ln()).abs() < 1e-12);

        // BCE with logit 0 = ln 2 regardless of target.
        let mut g: Graph<f64> = Graph::new();
        let z = g.leaf(Tensor::zeros(&[3, 1]), false);
        let l = g.bce_logits(z, Tensor::from_vec(&[3, 1], vec![0.0, 0.5, 1.0]));
        assert!((g.value(l).item() - 2.0f64.ln()).abs() < 1e-12);

        // Saturated BCE: huge logit with matching target ~ 0 loss.
        let mut g: Graph<f64> = Graph::new();
        let z = g.leaf(Tensor::from_vec(&[1, 1], vec![30.0]), false);
        let l = g.bce_logits(z, Tensor::from_vec(&[1, 1], vec![1.0]));
        assert!(g.value(l).item() < 1e-8);

        // Smooth L1: |e| = 0.5 -> 0.125 per coord; |e| = 2 -> 1.5.
        let mut g: Graph<f64> = Graph::new();
        let p = g.leaf(Tensor::from_vec(&[2, 4], vec![0.5, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]), false);
        let t = Tensor::zeros(&[2, 4]);
        let l = g.smooth_l1(p, t, vec![0, 1]);
        assert!((g.value(l).item() - (0.125 + 1.5) / 2.0).abs() < 1e-12);

        // Empty selection -> zero loss.
        let mut g: Graph<f64> = Graph::new();
        let p = g.leaf(Tensor::from_vec(&[1, 4], vec![9.0, 9.0, 9.0, 9.0]), true);
        let l = g.smooth_l1(p, Tensor::zeros(&[1, 4]), vec![]);
        assert_eq!(g.value(l).item(), 0.0);
        let mut grads = g.backward(l);
        assert!(grads.take(p).is_none());
    }

    #[test]
    fn loss_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let logits = randn(&mut rng, &[4, 3]);
        let boxes = randn(&mut rng, &[4, 4]);
        let masks = randn(&mut rng, &[2, 1, 3, 3]);
        let box_t = randn(&mut rng, &[4, 4]);
        let mask_t = {
            let mut t = randn(&mut rng, &[2, 1, 3, 3]);
            for v in t.data_mut() {
                *v = (*v + 1.0) / 2.0;
            }
            t
        };
        fd_check(
            &[logits, boxes, masks],
            |g, v| {
                let l1 = g.softmax_ce(v[0], vec![0, 2, 1, 1]);
                let l2 = g.smooth_l1(v[1], box_t.clone(), vec![0, 3]);
                let l3 = g.bce_logits(v[2], mask_t.clone());
                g.sum_scalars(&[l1, l2, l3])
            },
            1e-5,
        );
    }

    #[test]
    fn no_grad_paths_are_skipped() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), false);
        let w = g.leaf(Tensor::full(&[1, 1, 1, 1], 2.0), true);
        let y = g.conv2d(x, w, None, 1, 0);
        let t = Tensor::full(&[1, 1, 2, 2], 0.5);
        let l = g.bce_logits(y, t);
        let mut grads = g.backward(l);
        assert!(grads.take(w).is_some());
        assert!(grads.take(x).is_none());
    }
}
