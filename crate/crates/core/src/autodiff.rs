//! A small reverse-mode automatic differentiation tape over dense `f64`
//! tensors. Every forward op records its inputs; [`Graph::backward`] walks
//! the tape in reverse and accumulates gradients for nodes that depend on a
//! parameter.
//!
//! Layout conventions: images are `[N, C, H, W]`, token sequences are
//! `[N, L, D]`, matrices are row-major.

use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} values", self.data.len());
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding, groups: 1 }
    }

    pub const fn depthwise(channels: usize, padding: usize) -> Self {
        Self { stride: 1, padding, groups: channels }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f64, f64)> },
    Upsample2(Var),
    Crop { x: Var, top: usize, left: usize },
    Softmax { x: Var, scale: f64 },
    Mean(Var),
    WeightedSum(Vec<(Var, f64)>),
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    SoftCrossEntropy { logits: Var, probs: Vec<f64>, target: Vec<f64>, scale: f64 },
    Mse { x: Var, target: Vec<f64> },
    Diversity { m: Var, argmax: Vec<usize> },
    Dispersion { m: Var, dist: Vec<f64>, cluster_var: Vec<f64>, cluster_mass: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The recording tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const MASS_EPS: f64 = 1e-12;

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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape == vb.shape {
            va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let n = vb.numel();
            assert!(
                va.shape.ends_with(&vb.shape),
                "cannot broadcast {:?} onto {:?}",
                vb.shape,
                va.shape
            );
            va.data.iter().enumerate().map(|(i, x)| f(*x, vb.data[i % n])).collect()
        };
        let shape = va.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, out), op, needs)
    }

    /// Elementwise sum. `b` may have a shape equal to a suffix of `a`'s and
    /// is then broadcast over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|&a| f(a)).collect());
        let needs = self.needs(x);
        self.push(out, op, needs)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.map(x, |a| a * k, Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |a| a.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, |a| 0.5 * a * (1.0 + gelu_inner(a).tanh()), Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape);
        let needs = self.needs(x);
        self.push(v, Op::Reshape(x), needs)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = permute_tensor(self.value(x), perm);
        let needs = self.needs(x);
        self.push(out, Op::Permute(x, perm.to_vec()), needs)
    }

    /// Concatenates two `[N, C, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = dims4(va);
        let [nb, cb, hb, wb] = dims4(vb);
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&va.data[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&vb.data[i * cb * hw..(i + 1) * cb * hw]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![n, ca + cb, h, w], out), Op::Concat(a, b), needs)
    }

    /// Matrix product of 2-D or 3-D operands. A 2-D operand is shared
    /// across the batch of the other. `ta`/`tb` transpose the last two axes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let ga = MatGeom::of(va, ta);
        let gb = MatGeom::of(vb, tb);
        assert_eq!(ga.cols, gb.rows, "matmul inner dimension mismatch");
        let batch = batch_of(ga.batch, gb.batch);
        let (m, k, n) = (ga.rows, ga.cols, gb.cols);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                ga.slice(&va.data, i),
                ga.strides(),
                gb.slice(&vb.data, i),
                gb.strides(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
                0.0,
            );
        }
        let shape = if va.shape.len() == 3 || vb.shape.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, out), Op::MatMul { a, b, ta, tb }, needs)
    }

    /// Affine map over the last axis: `x·Wᵀ + b` with `W` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let in_f = *vx.shape.last().unwrap();
        let [out_f, w_in] = [vw.shape[0], vw.shape[1]];
        assert_eq!(in_f, w_in, "linear input width mismatch");
        let rows = vx.numel() / in_f;
        let mut out = vec![0.0; rows * out_f];
        if let Some(b) = b {
            let vb = &self.value(b).data;
            for r in 0..rows {
                out[r * out_f..(r + 1) * out_f].copy_from_slice(vb);
            }
        }
        gemm(rows, in_f, out_f, &vx.data, (in_f as isize, 1), &vw.data, (1, in_f as isize), &mut out, (out_f as isize, 1), 1.0);
        let mut shape = vx.shape.clone();
        *shape.last_mut().unwrap() = out_f;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, needs)
    }

    /// 2-D convolution with zero padding. `w` is `[out, in/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let geo = ConvGeom::new(vx, vw, spec);
        let mut out = vec![0.0; geo.n * geo.cout * geo.out_hw()];
        let mut cols = vec![0.0; geo.col_rows() * geo.out_hw()];
        let bias = b.map(|b| &self.value(b).data);
        for i in 0..geo.n {
            for g in 0..spec.groups {
                geo.im2col(&vx.data, i, g, &mut cols);
                let o = geo.out_offset(i, g);
                let out_g = &mut out[o..o + geo.cout_g() * geo.out_hw()];
                if let Some(bias) = bias {
                    for oc in 0..geo.cout_g() {
                        let bv = bias[g * geo.cout_g() + oc];
                        out_g[oc * geo.out_hw()..(oc + 1) * geo.out_hw()].fill(bv);
                    }
                }
                let wg = &vw.data[g * geo.cout_g() * geo.col_rows()..(g + 1) * geo.cout_g() * geo.col_rows()];
                gemm(
                    geo.cout_g(),
                    geo.col_rows(),
                    geo.out_hw(),
                    wg,
                    (geo.col_rows() as isize, 1),
                    &cols,
                    (geo.out_hw() as isize, 1),
                    out_g,
                    (geo.out_hw() as isize, 1),
                    1.0,
                );
            }
        }
        let shape = vec![geo.n, geo.cout, geo.hout, geo.wout];
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(shape, out), Op::Conv2d { x, w, b, spec }, needs)
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/cols are dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = dims4(v);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for r in 0..ho {
                for col in 0..wo {
                    let mut best = base + 2 * r * w + 2 * col;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * r + dr) * w + 2 * col + dc;
                        if v.data[idx] > v.data[best] {
                            best = idx;
                        }
                    }
                    out.push(v.data[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![n, c, ho, wo], out), Op::MaxPool2 { x, argmax }, needs)
    }

    /// Mean over spatial positions: `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = dims4(v);
        let hw = h * w;
        let out = v.data.chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let needs = self.needs(x);
        self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(x), needs)
    }

    /// Per-sample group normalisation of `[N, C, H, W]` with a per-channel
    /// affine map. Statistics never mix samples.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let v = self.value(x);
        let [n, c, h, w] = dims4(v);
        assert!(groups > 0 && c % groups == 0, "channels must split evenly into groups");
        let (ga, be) = (&self.value(gamma).data, &self.value(beta).data);
        let hw = h * w;
        let m = c / groups * hw;
        let mut out = vec![0.0; v.numel()];
        let mut stats = Vec::with_capacity(n * groups);
        for (block, o) in v.data.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
            let gi = stats.len() % groups;
            let mean = block.iter().sum::<f64>() / m as f64;
            let var = block.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for (k, (a, y)) in block.iter().zip(o.iter_mut()).enumerate() {
                let ch = gi * (c / groups) + k / hw;
                *y = (a - mean) * inv * ga[ch] + be[ch];
            }
            stats.push((mean, inv));
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Tensor::new(vec![n, c, h, w], out), Op::GroupNorm { x, gamma, beta, groups, stats }, needs)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = dims4(v);
        let mut out = Vec::with_capacity(n * c * h * w * 4);
        for plane in v.data.chunks_exact(h * w) {
            for r in 0..2 * h {
                for col in 0..2 * w {
                    out.push(plane[(r / 2) * w + col / 2]);
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![n, c, 2 * h, 2 * w], out), Op::Upsample2(x), needs)
    }

    /// Spatial window `[top..top+h, left..left+w]` of a `[N, C, H, W]` tensor.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let v = self.value(x);
        let [n, c, hin, win] = dims4(v);
        assert!(top + h <= hin && left + w <= win, "crop window out of bounds");
        if (top, left, h, w) == (0, 0, hin, win) {
            return x;
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in v.data.chunks_exact(hin * win) {
            for r in top..top + h {
                out.extend_from_slice(&plane[r * win + left..r * win + left + w]);
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![n, c, h, w], out), Op::Crop { x, top, left }, needs)
    }

    /// `softmax(scale · x)` along the last axis.
    pub fn softmax(&mut self, x: Var, scale: f64) -> Var {
        let v = self.value(x);
        let k = *v.shape.last().unwrap();
        let mut out = vec![0.0; v.numel()];
        for (row, o) in v.data.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
            softmax_row(row, scale, o);
        }
        let shape = v.shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out), Op::Softmax { x, scale }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data.iter().sum::<f64>() / v.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), needs)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        let mut needs = false;
        for &(v, w) in terms {
            total += w * self.value(v).item();
            needs |= self.needs(v);
        }
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), needs)
    }

    /// Mean cross-entropy of `[N, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let v = self.value(logits);
        let k = v.shape[1];
        assert_eq!(v.shape[0], labels.len());
        let mut probs = vec![0.0; v.numel()];
        let mut loss = 0.0;
        for ((row, p), &y) in v.data.chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(labels) {
            loss -= log_softmax_at(row, 1.0, y);
            softmax_row(row, 1.0, p);
        }
        loss /= labels.len() as f64;
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, probs, labels: labels.to_vec() },
            needs,
        )
    }

    /// Mean over rows of `−Σ t·ln softmax(scale·z)` with a constant target
    /// distribution per row.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor, scale: f64) -> Var {
        let v = self.value(logits);
        assert_eq!(v.numel(), target.numel(), "target shape mismatch");
        let k = *v.shape.last().unwrap();
        let rows = v.numel() / k;
        let mut probs = vec![0.0; v.numel()];
        let mut loss = 0.0;
        for ((row, p), t) in v.data.chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(target.data.chunks_exact(k)) {
            let lse = log_sum_exp(row, scale);
            for j in 0..k {
                if t[j] != 0.0 {
                    loss -= t[j] * (scale * row[j] - lse);
                }
            }
            softmax_row(row, scale, p);
        }
        loss /= rows as f64;
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy { logits, probs, target: target.data.clone(), scale },
            needs,
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Var {
        let v = self.value(x);
        assert_eq!(v.numel(), target.numel(), "mse shape mismatch");
        let s: f64 = v.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(s / v.numel() as f64),
            Op::Mse { x, target: target.data.clone() },
            needs,
        )
    }

    /// Batch mean of `log₂C·(1 − (1/C)·Σ_c max_p m[n, p, c])` for `m` of
    /// shape `[N, P, C]`.
    pub fn diversity(&mut self, m: Var) -> Var {
        let v = self.value(m);
        let [n, p, c] = dims3(v);
        let mut argmax = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for i in 0..n {
            let base = i * p * c;
            let mut sum_max = 0.0;
            for ch in 0..c {
                let mut best = base + ch;
                for q in 1..p {
                    let idx = base + q * c + ch;
                    if v.data[idx] > v.data[best] {
                        best = idx;
                    }
                }
                sum_max += v.data[best];
                argmax.push(best);
            }
            total += (c as f64).log2() * (1.0 - sum_max / c as f64);
        }
        let needs = self.needs(m);
        self.push(Tensor::scalar(total / n as f64), Op::Diversity { m, argmax }, needs)
    }

    /// Weighted within-cluster dispersion for soft memberships `m` of shape
    /// `[N, P, C]` and a constant distance table `dist[n, p, c]`:
    ///
    /// `mean_n (1/C)·Σ_c Σ_p m·dist / Σ_p m`
    ///
    /// Clusters with (numerically) zero mass contribute 0.
    pub fn dispersion(&mut self, m: Var, dist: &Tensor) -> Var {
        let v = self.value(m);
        let [n, p, c] = dims3(v);
        assert_eq!(dist.numel(), v.numel(), "distance table shape mismatch");
        let (cluster_var, cluster_mass) = cluster_stats(&v.data, &dist.data, n, p, c);
        let total: f64 = cluster_var.iter().sum::<f64>() / (n * c) as f64;
        let needs = self.needs(m);
        self.push(
            Tensor::scalar(total),
            Op::Dispersion { m, dist: dist.data.clone(), cluster_var, cluster_mass },
            needs,
        )
    }

    /// Within-cluster variance of constant 3-D `points[n, p, :]` under soft
    /// memberships `m[n, p, c]`, each centroid being the membership-weighted
    /// mean. Gradient flows into the memberships only.
    pub fn centroid_dispersion(&mut self, m: Var, points: &Tensor) -> Var {
        let dist = {
            let v = self.value(m);
            let [n, p, c] = dims3(v);
            assert_eq!(points.numel(), n * p * 3, "points shape mismatch");
            let centroids = weighted_centroids(&v.data, &points.data, n, p, c);
            let mut dist = vec![0.0; n * p * c];
            for i in 0..n {
                for q in 0..p {
                    let x = &points.data[(i * p + q) * 3..(i * p + q) * 3 + 3];
                    for ch in 0..c {
                        let mu = &centroids[(i * c + ch) * 3..(i * c + ch) * 3 + 3];
                        dist[(i * p + q) * c + ch] = (0..3).map(|d| (x[d] - mu[d]).powi(2)).sum();
                    }
                }
            }
            Tensor::new(vec![n, p, c], dist)
        };
        // Holding the centroid fixed, d(var)/dm = (dist − var)/mass, which is
        // also the exact derivative once the centroid's own dependence on m is
        // included (the centroid is the stationary point of the weighted
        // squared error).
        self.dispersion(m, &dist)
    }

    /// Runs reverse-mode differentiation from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.needs(v) {
            return None;
        }
        let shape = &self.nodes[v.0].value.shape;
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.broadcast_back(grads, *b, gy, |g, _| g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.broadcast_back(grads, *b, gy, |g, _| -g);
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.needs(*a) {
                    let n = vb.numel();
                    let g = gy.data.iter().enumerate().map(|(i, g)| g * vb.data[i % n]).collect();
                    self.accumulate(grads, *a, Tensor::new(va.shape.clone(), g));
                }
                self.broadcast_back(grads, *b, gy, |g, i| g * va.data[i]);
            }
            Op::Scale(x, k) => {
                let g = gy.data.iter().map(|g| g * k).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape.clone(), g));
            }
            Op::Relu(x) => {
                let g = gy.data.iter().zip(&y.data).map(|(g, o)| if *o > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape.clone(), g));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let g = gy.data.iter().zip(&vx.data).map(|(g, a)| g * gelu_grad(*a)).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape.clone(), g));
            }
            Op::Sigmoid(x) => {
                let g = gy.data.iter().zip(&y.data).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape.clone(), g));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, gy.clone().reshaped(&shape));
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.accumulate(grads, *x, permute_tensor(gy, &inverse));
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = dims4(self.value(*a));
                let cb = self.shape(*b)[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    ga.extend_from_slice(&gy.data[base..base + ca * hw]);
                    gb.extend_from_slice(&gy.data[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, ca, h, w], ga));
                self.accumulate(grads, *b, Tensor::new(vec![n, cb, h, w], gb));
            }
            Op::MatMul { a, b, ta, tb } => self.matmul_back(grads, *a, *b, *ta, *tb, gy),
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let in_f = vw.shape[1];
                let out_f = vw.shape[0];
                let rows = vx.numel() / in_f;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gemm(rows, out_f, in_f, &gy.data, (out_f as isize, 1), &vw.data, (in_f as isize, 1), &mut gx.data, (in_f as isize, 1), 1.0);
                }
                if let Some(gw) = self.grad_slot(grads, *w) {
                    gemm(out_f, rows, in_f, &gy.data, (1, out_f as isize), &vx.data, (in_f as isize, 1), &mut gw.data, (in_f as isize, 1), 1.0);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.grad_slot(grads, *b) {
                        for row in gy.data.chunks_exact(out_f) {
                            for (acc, g) in gb.data.iter_mut().zip(row) {
                                *acc += g;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, spec } => self.conv_back(grads, *x, *w, *b, *spec, gy),
            Op::MaxPool2 { x, argmax } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (g, &i) in gy.data.iter().zip(argmax) {
                        gx.data[i] += g;
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = dims4(self.value(*x));
                let hw = h * w;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (plane, g) in gx.data.chunks_exact_mut(hw).zip(&gy.data) {
                        for v in plane {
                            *v += g / hw as f64;
                        }
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let vx = self.value(*x);
                let [_, c, h, w] = dims4(vx);
                let hw = h * w;
                let cg = c / groups;
                let m = cg * hw;
                let ga = &self.value(*gamma).data;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; vx.numel()];
                for (b, &(mean, inv)) in stats.iter().enumerate() {
                    let gi = b % groups;
                    let range = b * m..(b + 1) * m;
                    let (xs, gs) = (&vx.data[range.clone()], &gy.data[range.clone()]);
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for k in 0..m {
                        let ch = gi * cg + k / hw;
                        let xhat = (xs[k] - mean) * inv;
                        dgamma[ch] += gs[k] * xhat;
                        dbeta[ch] += gs[k];
                        let gh = gs[k] * ga[ch];
                        s1 += gh;
                        s2 += gh * xhat;
                    }
                    let (s1, s2) = (s1 / m as f64, s2 / m as f64);
                    for k in 0..m {
                        let ch = gi * cg + k / hw;
                        let xhat = (xs[k] - mean) * inv;
                        dx[range.start + k] = inv * (gs[k] * ga[ch] - s1 - xhat * s2);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape.clone(), dx));
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma));
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta));
            }
            Op::Upsample2(x) => {
                let [_, _, h, w] = dims4(self.value(*x));
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (plane, gplane) in gx.data.chunks_exact_mut(h * w).zip(gy.data.chunks_exact(4 * h * w)) {
                        for r in 0..2 * h {
                            for c in 0..2 * w {
                                plane[(r / 2) * w + c / 2] += gplane[r * 2 * w + c];
                            }
                        }
                    }
                }
            }
            Op::Crop { x, top, left } => {
                let [_, _, hin, win] = dims4(self.value(*x));
                let [_, _, h, w] = dims4(y);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (plane, gplane) in gx.data.chunks_exact_mut(hin * win).zip(gy.data.chunks_exact(h * w)) {
                        for r in 0..h {
                            let dst = &mut plane[(top + r) * win + left..(top + r) * win + left + w];
                            for (d, g) in dst.iter_mut().zip(&gplane[r * w..(r + 1) * w]) {
                                *d += g;
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, scale } => {
                let k = *y.shape.last().unwrap();
                let mut g = vec![0.0; y.numel()];
                for ((o, s), gr) in g.chunks_exact_mut(k).zip(y.data.chunks_exact(k)).zip(gy.data.chunks_exact(k)) {
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        o[j] = scale * s[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape.clone(), g));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let g = vec![gy.item() / n as f64; n];
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), g));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(gy.item() * w));
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let k = self.shape(*logits)[1];
                let scale = gy.item() / labels.len() as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    g[i * k + y] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), g));
            }
            Op::SoftCrossEntropy { logits, probs, target, scale } => {
                let shape = self.shape(*logits).to_vec();
                let k = *shape.last().unwrap();
                let rows = probs.len() / k;
                let f = gy.item() * scale / rows as f64;
                let mut g = vec![0.0; probs.len()];
                for ((o, p), t) in g.chunks_exact_mut(k).zip(probs.chunks_exact(k)).zip(target.chunks_exact(k)) {
                    let mass: f64 = t.iter().sum();
                    for j in 0..k {
                        o[j] = f * (p[j] * mass - t[j]);
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(shape, g));
            }
            Op::Mse { x, target } => {
                let vx = self.value(*x);
                let f = 2.0 * gy.item() / vx.numel() as f64;
                let g = vx.data.iter().zip(target).map(|(a, t)| f * (a - t)).collect();
                self.accumulate(grads, *x, Tensor::new(vx.shape.clone(), g));
            }
            Op::Diversity { m, argmax } => {
                let [n, _, c] = dims3(self.value(*m));
                let f = -gy.item() * (c as f64).log2() / (c * n) as f64;
                if let Some(gm) = self.grad_slot(grads, *m) {
                    for &i in argmax {
                        gm.data[i] += f;
                    }
                }
            }
            Op::Dispersion { m, dist, cluster_var, cluster_mass } => {
                let [n, p, c] = dims3(self.value(*m));
                let f = gy.item() / (n * c) as f64;
                if let Some(gm) = self.grad_slot(grads, *m) {
                    for i in 0..n {
                        for ch in 0..c {
                            let mass = cluster_mass[i * c + ch];
                            if mass <= MASS_EPS {
                                continue;
                            }
                            let var = cluster_var[i * c + ch];
                            for q in 0..p {
                                let idx = (i * p + q) * c + ch;
                                gm.data[idx] += f * (dist[idx] - var) / mass;
                            }
                        }
                    }
                }
            }
        }
    }

    fn broadcast_back(&self, grads: &mut [Option<Tensor>], b: Var, gy: &Tensor, f: impl Fn(f64, usize) -> f64) {
        if !self.needs(b) {
            return;
        }
        let shape = self.shape(b).to_vec();
        let n = shape.iter().product::<usize>();
        let mut g = vec![0.0; n];
        for (i, gv) in gy.data.iter().enumerate() {
            g[i % n] += f(*gv, i);
        }
        self.accumulate(grads, b, Tensor::new(shape, g));
    }

    fn matmul_back(&self, grads: &mut [Option<Tensor>], a: Var, b: Var, ta: bool, tb: bool, gy: &Tensor) {
        let (va, vb) = (self.value(a), self.value(b));
        let ga = MatGeom::of(va, ta);
        let gb = MatGeom::of(vb, tb);
        let batch = batch_of(ga.batch, gb.batch);
        let (m, k, n) = (ga.rows, ga.cols, gb.cols);
        let gy_strides = (n as isize, 1);
        if let Some(gat) = self.grad_slot(grads, a) {
            // dA (as stored) = dY·Bᵀ, or its transpose when `ta`.
            for i in 0..batch {
                let dst = ga.slice_mut(&mut gat.data, i);
                let gyi = &gy.data[i * m * n..(i + 1) * m * n];
                let (bs_r, bs_c) = gb.strides();
                if ta {
                    // stored [k, m]: dAᵀ = B·dYᵀ  → (k×n)(n×m)
                    gemm(k, n, m, gb.slice(&vb.data, i), (bs_r, bs_c), gyi, (1, n as isize), dst, (m as isize, 1), 1.0);
                } else {
                    gemm(m, n, k, gyi, gy_strides, gb.slice(&vb.data, i), (bs_c, bs_r), dst, (k as isize, 1), 1.0);
                }
            }
        }
        if let Some(gbt) = self.grad_slot(grads, b) {
            for i in 0..batch {
                let dst = gb.slice_mut(&mut gbt.data, i);
                let gyi = &gy.data[i * m * n..(i + 1) * m * n];
                let (as_r, as_c) = ga.strides();
                if tb {
                    // stored [n, k]: dBᵀ = dYᵀ·A → (n×m)(m×k)
                    gemm(n, m, k, gyi, (1, n as isize), ga.slice(&va.data, i), (as_r, as_c), dst, (k as isize, 1), 1.0);
                } else {
                    gemm(k, m, n, ga.slice(&va.data, i), (as_c, as_r), gyi, gy_strides, dst, (n as isize, 1), 1.0);
                }
            }
        }
    }

    fn conv_back(&self, grads: &mut [Option<Tensor>], x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec, gy: &Tensor) {
        let (vx, vw) = (self.value(x), self.value(w));
        let geo = ConvGeom::new(vx, vw, spec);
        let ohw = geo.out_hw();
        let cr = geo.col_rows();
        if let Some(b) = b {
            if let Some(gb) = self.grad_slot(grads, b) {
                for i in 0..geo.n {
                    for oc in 0..geo.cout {
                        let o = (i * geo.cout + oc) * ohw;
                        gb.data[oc] += gy.data[o..o + ohw].iter().sum::<f64>();
                    }
                }
            }
        }
        let need_w = self.needs(w);
        let need_x = self.needs(x);
        if !need_w && !need_x {
            return;
        }
        let mut gw_acc = need_w.then(|| vec![0.0; vw.numel()]);
        let mut gx_acc = need_x.then(|| vec![0.0; vx.numel()]);
        let mut cols = vec![0.0; cr * ohw];
        for i in 0..geo.n {
            for g in 0..spec.groups {
                let o = geo.out_offset(i, g);
                let gy_g = &gy.data[o..o + geo.cout_g() * ohw];
                let w_range = g * geo.cout_g() * cr..(g + 1) * geo.cout_g() * cr;
                if let Some(gw) = gw_acc.as_mut() {
                    geo.im2col(&vx.data, i, g, &mut cols);
                    gemm(geo.cout_g(), ohw, cr, gy_g, (ohw as isize, 1), &cols, (1, ohw as isize), &mut gw[w_range.clone()], (cr as isize, 1), 1.0);
                }
                if let Some(gx) = gx_acc.as_mut() {
                    gemm(cr, geo.cout_g(), ohw, &vw.data[w_range], (1, cr as isize), gy_g, (ohw as isize, 1), &mut cols, (ohw as isize, 1), 0.0);
                    geo.col2im(&cols, i, g, gx);
                }
            }
        }
        if let Some(gw) = gw_acc {
            self.accumulate(grads, w, Tensor::new(vw.shape.clone(), gw));
        }
        if let Some(gx) = gx_acc {
            self.accumulate(grads, x, Tensor::new(vx.shape.clone(), gx));
        }
    }
}

fn cluster_stats(m: &[f64], dist: &[f64], n: usize, p: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut var = vec![0.0; n * c];
    let mut mass = vec![0.0; n * c];
    for i in 0..n {
        for q in 0..p {
            for ch in 0..c {
                let idx = (i * p + q) * c + ch;
                mass[i * c + ch] += m[idx];
                var[i * c + ch] += m[idx] * dist[idx];
            }
        }
    }
    for (v, &w) in var.iter_mut().zip(&mass) {
        *v = if w > MASS_EPS { *v / w } else { 0.0 };
    }
    (var, mass)
}

/// Membership-weighted means of `points[n, p, 3]`, shape `[n, c, 3]`.
pub(crate) fn weighted_centroids(m: &[f64], points: &[f64], n: usize, p: usize, c: usize) -> Vec<f64> {
    let mut sums = vec![0.0; n * c * 3];
    let mut mass = vec![0.0; n * c];
    for i in 0..n {
        for q in 0..p {
            let x = &points[(i * p + q) * 3..(i * p + q) * 3 + 3];
            for ch in 0..c {
                let w = m[(i * p + q) * c + ch];
                mass[i * c + ch] += w;
                for d in 0..3 {
                    sums[(i * c + ch) * 3 + d] += w * x[d];
                }
            }
        }
    }
    for (k, s) in sums.iter_mut().enumerate() {
        let w = mass[k / 3];
        *s = if w > MASS_EPS { *s / w } else { 0.0 };
    }
    sums
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 0.044_715;

fn gelu_inner(a: f64) -> f64 {
    (2.0 / PI).sqrt() * (a + GELU_K * a * a * a)
}

fn gelu_grad(a: f64) -> f64 {
    let t = gelu_inner(a).tanh();
    0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * (2.0 / PI).sqrt() * (1.0 + 3.0 * GELU_K * a * a)
}

pub(crate) fn log_sum_exp(row: &[f64], scale: f64) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(scale * v));
    max + row.iter().map(|&v| (scale * v - max).exp()).sum::<f64>().ln()
}

fn log_softmax_at(row: &[f64], scale: f64, j: usize) -> f64 {
    scale * row[j] - log_sum_exp(row, scale)
}

pub(crate) fn softmax_row(row: &[f64], scale: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(scale * v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (scale * v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn dims4(t: &Tensor) -> [usize; 4] {
    t.shape.as_slice().try_into().unwrap_or_else(|_| panic!("expected a 4-D tensor, got {:?}", t.shape))
}

fn dims3(t: &Tensor) -> [usize; 3] {
    t.shape.as_slice().try_into().unwrap_or_else(|_| panic!("expected a 3-D tensor, got {:?}", t.shape))
}

fn batch_of(a: Option<usize>, b: Option<usize>) -> usize {
    match (a, b) {
        (Some(x), Some(y)) => {
            assert_eq!(x, y, "matmul batch mismatch");
            x
        }
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => 1,
    }
}

/// Logical matrix view of a (possibly batched, possibly transposed) operand.
struct MatGeom {
    batch: Option<usize>,
    rows: usize,
    cols: usize,
    stored_cols: usize,
    transposed: bool,
}

impl MatGeom {
    fn of(t: &Tensor, transposed: bool) -> Self {
        let (batch, r, c) = match t.shape.as_slice() {
            &[r, c] => (None, r, c),
            &[b, r, c] => (Some(b), r, c),
            s => panic!("matmul operand must be 2-D or 3-D, got {s:?}"),
        };
        let (rows, cols) = if transposed { (c, r) } else { (r, c) };
        Self { batch, rows, cols, stored_cols: c, transposed }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.stored_cols as isize)
        } else {
            (self.stored_cols as isize, 1)
        }
    }

    fn slice<'a>(&self, data: &'a [f64], i: usize) -> &'a [f64] {
        let len = self.rows * self.cols;
        match self.batch {
            Some(_) => &data[i * len..(i + 1) * len],
            None => data,
        }
    }

    fn slice_mut<'a>(&self, data: &'a mut [f64], i: usize) -> &'a mut [f64] {
        let len = self.rows * self.cols;
        match self.batch {
            Some(_) => &mut data[i * len..(i + 1) * len],
            None => data,
        }
    }
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    hout: usize,
    wout: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, spec: Conv2dSpec) -> Self {
        let [n, cin, h, wd] = dims4(x);
        let [cout, cin_g, kh, kw] = dims4(w);
        assert_eq!(cin, cin_g * spec.groups, "conv input channels mismatch");
        assert_eq!(cout % spec.groups, 0, "conv output channels not divisible by groups");
        let hout = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wout = (wd + 2 * spec.padding - kw) / spec.stride + 1;
        Self { n, cin, h, w: wd, cout, kh, kw, hout, wout, spec }
    }

    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.hout * self.wout
    }

    fn out_offset(&self, i: usize, g: usize) -> usize {
        (i * self.cout + g * self.cout_g()) * self.out_hw()
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        // f(row_in_cols, ky, kx, c_local, _) over every (c, ky, kx) tap.
        for c in 0..self.cin_g() {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    f((c * self.kh + ky) * self.kw + kx, ky, kx, c, 0);
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], i: usize, g: usize, cols: &mut [f64]) {
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let ohw = self.out_hw();
        let plane0 = (i * self.cin + g * self.cin_g()) * self.h * self.w;
        self.for_each_tap(|row, ky, kx, c, _| {
            let plane = &x[plane0 + c * self.h * self.w..plane0 + (c + 1) * self.h * self.w];
            let dst = &mut cols[row * ohw..(row + 1) * ohw];
            for oy in 0..self.hout {
                let iy = oy as isize * s + ky as isize - p;
                let out_row = &mut dst[oy * self.wout..(oy + 1) * self.wout];
                if iy < 0 || iy >= self.h as isize {
                    out_row.fill(0.0);
                    continue;
                }
                let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                for (ox, o) in out_row.iter_mut().enumerate() {
                    let ix = ox as isize * s + kx as isize - p;
                    *o = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                }
            }
        });
    }

    fn col2im(&self, cols: &[f64], i: usize, g: usize, gx: &mut [f64]) {
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let ohw = self.out_hw();
        let plane0 = (i * self.cin + g * self.cin_g()) * self.h * self.w;
        let (h, w) = (self.h, self.w);
        self.for_each_tap(|row, ky, kx, c, _| {
            let plane = &mut gx[plane0 + c * h * w..plane0 + (c + 1) * h * w];
            let src = &cols[row * ohw..(row + 1) * ohw];
            for oy in 0..self.hout {
                let iy = oy as isize * s + ky as isize - p;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for ox in 0..self.wout {
                    let ix = ox as isize * s + kx as isize - p;
                    if ix >= 0 && ix < w as isize {
                        plane[iy as usize * w + ix as usize] += src[oy * self.wout + ox];
                    }
                }
            }
        });
    }
}

/// `C = A·B + beta·C` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(span(m, k, rsa, csa) as usize <= a.len(), "gemm: A out of bounds");
    assert!(span(k, n, rsb, csb) as usize <= b.len(), "gemm: B out of bounds");
    assert!(span(m, n, rsc, csc) as usize <= c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above bound every element reached through the
    // given (non-negative) strides inside each slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let rank = t.shape.len();
    assert_eq!(perm.len(), rank, "permutation rank mismatch");
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * t.shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; rank];
    for _ in 0..t.numel() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(t.data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}
