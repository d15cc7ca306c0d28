//! A small tape-based reverse-mode differentiator over [`Tensor`]s.
//!
//! The op set is exactly what the denoiser needs: convolutions, group and
//! layer normalization, channel-wise affine modulation, masked attention,
//! pooling, and the squared-error loss. Every op records what its backward
//! rule needs at forward time; [`Graph::backward`] walks the tape once.
//!
//! Shape errors inside a graph are programming errors and panic; public
//! model entry points validate their inputs before building a graph.

use std::collections::BTreeMap;

use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        groups: usize,
        rstd: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Option<Var>,
        one_plus: bool,
    },
    Silu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Upsample2x(Var),
    ToTokens(Var),
    FromTokens(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Vec<bool>,
        heads: usize,
        probs: Vec<T>,
    },
    ReplaceRows {
        x: Var,
        null: Var,
        drop: Vec<bool>,
    },
    MeanPool {
        f: Var,
        mask: Vec<bool>,
    },
    SapPool {
        f: Var,
        w: Var,
        mask: Vec<bool>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape. Values are computed eagerly as ops are appended.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

/// Gradients indexed by tape position.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Attention probabilities `[B, heads, N, M]` recorded by an attention op.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [B,C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,k,k]");
        let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv2d channel mismatch");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let ckk = c * k * k;
        let hw = ho * wo;
        let mut out = vec![T::zero(); bsz * o * hw];
        let mut cols = vec![T::zero(); ckk * hw];
        let geo = ConvGeo {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..bsz {
                im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], &geo, &mut cols);
                let ob = &mut out[bi * o * hw..(bi + 1) * o * hw];
                gemm(false, false, o, ckk, hw, T::one(), wv, &cols, T::zero(), ob);
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (oi, row) in ob.chunks_mut(hw).enumerate() {
                        let bias = bv[oi];
                        row.iter_mut().for_each(|y| *y = *y + bias);
                    }
                }
            }
        }
        let needs = self.ng(&[x, w]) || b.is_some_and(|b| self.ng(&[b]));
        let value = Tensor::from_vec(&[bsz, o, ho, wo], out).unwrap();
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        )
    }

    /// Group normalization without affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (bsz, c) = (xs[0], xs[1]);
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        let per = (c / groups) * xs[2..].iter().product::<usize>();
        let eps = T::of(1e-5);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(bsz * groups);
        for (src, dst) in xv.chunks(per).zip(out.chunks_mut(per)) {
            let n = T::of_usize(per);
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * r;
            }
            rstd.push(r);
        }
        let needs = self.ng(&[x]);
        self.push(
            Tensor::from_vec(&xs, out).unwrap(),
            Op::GroupNorm { x, groups, rstd },
            needs,
        )
    }

    /// `y[b,c,..] = x[b,c,..] * s[b,c] + shift[b,c]`, where `s` is `1 + scale`
    /// when `one_plus` is set. `scale`/`shift` are `[1,C]`, `[C]` or `[B,C]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Option<Var>, one_plus: bool) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (bsz, c) = (xs[0], xs[1]);
        let sp: usize = xs[2..].iter().product();
        let sv = self.value(scale).data();
        let sb = affine_batch(sv.len(), bsz, c);
        let hv = shift.map(|s| self.value(s).data());
        if let Some(h) = hv {
            assert_eq!(affine_batch(h.len(), bsz, c), sb);
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..bsz {
            for ci in 0..c {
                let pi = if sb == 1 { ci } else { bi * c + ci };
                let mut s = sv[pi];
                if one_plus {
                    s = s + T::one();
                }
                let sh = hv.map_or(T::zero(), |h| h[pi]);
                let off = (bi * c + ci) * sp;
                for j in off..off + sp {
                    out[j] = xv[j] * s + sh;
                }
            }
        }
        let mut deps = vec![x, scale];
        deps.extend(shift);
        let needs = self.ng(&deps);
        self.push(
            Tensor::from_vec(&xs, out).unwrap(),
            Op::ChannelAffine {
                x,
                scale,
                shift,
                one_plus,
            },
            needs,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let needs = self.ng(&[x]);
        self.push(value, Op::Silu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add: shape mismatch");
        let needs = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), needs)
    }

    /// Concatenate along axis 1. Both inputs are `[B, C_i, ...]` with equal
    /// trailing extents.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2..], sb[2..], "concat trailing shape mismatch");
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for bi in 0..sa[0] {
            out.extend_from_slice(&av[bi * ca * inner..(bi + 1) * ca * inner]);
            out.extend_from_slice(&bv[bi * cb * inner..(bi + 1) * cb * inner]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let needs = self.ng(&[a, b]);
        self.push(Tensor::from_vec(&shape, out).unwrap(), Op::Concat(a, b), needs)
    }

    /// Nearest-neighbour 2× spatial upsampling of `[B,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (h, w) = (s[2], s[3]);
        let xv = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.ng(&[x]);
        self.push(
            Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out).unwrap(),
            Op::Upsample2x(x),
            needs,
        )
    }

    /// `[B,C,H,W]` → `[B,H·W,C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (bsz, c, n) = (s[0], s[1], s[2] * s[3]);
        let out = transpose_last2(self.value(x).data(), bsz, c, n);
        let needs = self.ng(&[x]);
        self.push(
            Tensor::from_vec(&[bsz, n, c], out).unwrap(),
            Op::ToTokens(x),
            needs,
        )
    }

    /// `[B,H·W,C]` → `[B,C,H,W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        let (bsz, n, c) = (s[0], s[1], s[2]);
        assert_eq!(n, h * w);
        let out = transpose_last2(self.value(x).data(), bsz, n, c);
        let needs = self.ng(&[x]);
        self.push(
            Tensor::from_vec(&[bsz, c, h, w], out).unwrap(),
            Op::FromTokens(x),
            needs,
        )
    }

    /// `y = x·W (+ b)` over the last axis; `W` is `[K, M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let kdim = *xs.last().unwrap();
        assert_eq!(ws[0], kdim, "linear: input width {} vs weight {:?}", kdim, ws);
        let m = ws[1];
        let rows = self.value(x).numel() / kdim;
        let mut out = vec![T::zero(); rows * m];
        gemm(
            false,
            false,
            rows,
            kdim,
            m,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(m) {
                for (y, &bb) in row.iter_mut().zip(bv) {
                    *y = *y + bb;
                }
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = m;
        let needs = self.ng(&[x, w]) || b.is_some_and(|b| self.ng(&[b]));
        self.push(
            Tensor::from_vec(&shape, out).unwrap(),
            Op::Linear { x, w, b },
            needs,
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().unwrap();
        let eps = T::of(1e-5);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(xv.len() / d);
        for (src, dst) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let n = T::of_usize(d);
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            for j in 0..d {
                dst[j] = (src[j] - mean) * r * gv[j] + bv[j];
            }
            rstd.push(r);
        }
        let needs = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::from_vec(&xs, out).unwrap(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            },
            needs,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[B,N,H·d]`, `k`/`v` are `[B,M,H·d]`, `mask` has `B·M` entries
    /// (false = padding, excluded from the softmax). Every batch row must
    /// have at least one valid key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &[bool], heads: usize) -> Var {
        let qs = self.value(q).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        let (bsz, n, inner) = (qs[0], qs[1], qs[2]);
        let m = ks[1];
        assert_eq!(ks[0], bsz);
        assert_eq!(ks[2], inner);
        assert_eq!(self.value(v).shape(), &ks[..]);
        assert_eq!(mask.len(), bsz * m);
        assert!(inner % heads == 0);
        let dh = inner / heads;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![T::zero(); bsz * heads * n * m];
        let mut out = vec![T::zero(); bsz * n * inner];
        for bi in 0..bsz {
            let bm = &mask[bi * m..(bi + 1) * m];
            assert!(bm.iter().any(|&b| b), "attention: batch row {bi} fully masked");
            for hi in 0..heads {
                for ni in 0..n {
                    let qrow = &qv[(bi * n + ni) * inner + hi * dh..][..dh];
                    let prow = &mut probs[((bi * heads + hi) * n + ni) * m..][..m];
                    let mut mx = T::neg_infinity();
                    for mi in 0..m {
                        if bm[mi] {
                            let krow = &kv[(bi * m + mi) * inner + hi * dh..][..dh];
                            let s = dot(qrow, krow) * scale;
                            prow[mi] = s;
                            mx = mx.max(s);
                        }
                    }
                    let mut z = T::zero();
                    for mi in 0..m {
                        prow[mi] = if bm[mi] { (prow[mi] - mx).exp() } else { T::zero() };
                        z = z + prow[mi];
                    }
                    let orow = &mut out[(bi * n + ni) * inner + hi * dh..][..dh];
                    for mi in 0..m {
                        prow[mi] = prow[mi] / z;
                        if bm[mi] {
                            let p = prow[mi];
                            let vrow = &vv[(bi * m + mi) * inner + hi * dh..][..dh];
                            for (o, &vx) in orow.iter_mut().zip(vrow) {
                                *o = *o + p * vx;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.ng(&[q, k, v]);
        self.push(
            Tensor::from_vec(&qs, out).unwrap(),
            Op::Attention {
                q,
                k,
                v,
                mask: mask.to_vec(),
                heads,
                probs,
            },
            needs,
        )
    }

    /// Replace every row of batch entries flagged in `drop` by `null`.
    /// `x` is `[B, R, K]` (or `[B, K]`), `null` has `K` elements.
    pub fn replace_rows(&mut self, x: Var, null: Var, drop: &[bool]) -> Var {
        let xs = self.value(x).shape().to_vec();
        let kdim = self.value(null).numel();
        let per = self.value(x).numel() / xs[0];
        assert_eq!(drop.len(), xs[0]);
        assert_eq!(per % kdim, 0);
        let mut out = self.value(x).data().to_vec();
        let nv = self.value(null).data();
        for (bi, &d) in drop.iter().enumerate() {
            if d {
                for row in out[bi * per..(bi + 1) * per].chunks_mut(kdim) {
                    row.copy_from_slice(nv);
                }
            }
        }
        let needs = self.ng(&[x, null]);
        self.push(
            Tensor::from_vec(&xs, out).unwrap(),
            Op::ReplaceRows {
                x,
                null,
                drop: drop.to_vec(),
            },
            needs,
        )
    }

    /// Masked mean over rows: `[B,M,d]` → `[B,d]`.
    pub fn mean_pool(&mut self, f: Var, mask: &[bool]) -> Var {
        let fs = self.value(f).shape().to_vec();
        let (bsz, m, d) = (fs[0], fs[1], fs[2]);
        assert_eq!(mask.len(), bsz * m);
        let fv = self.value(f).data();
        let mut out = vec![T::zero(); bsz * d];
        for bi in 0..bsz {
            let cnt = mask[bi * m..(bi + 1) * m].iter().filter(|&&b| b).count();
            assert!(cnt > 0, "mean_pool: batch row {bi} fully masked");
            let inv = T::one() / T::of_usize(cnt);
            for mi in 0..m {
                if mask[bi * m + mi] {
                    let row = &fv[(bi * m + mi) * d..][..d];
                    for (o, &x) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                        *o = *o + x * inv;
                    }
                }
            }
        }
        let needs = self.ng(&[f]);
        self.push(
            Tensor::from_vec(&[bsz, d], out).unwrap(),
            Op::MeanPool {
                f,
                mask: mask.to_vec(),
            },
            needs,
        )
    }

    /// Self-attention pooling: `softmax(F·w)ᵀ F` per batch entry, with masked
    /// rows excluded. `[B,M,d]`, `w: [d]` → `[B,d]`.
    pub fn sap_pool(&mut self, f: Var, w: Var, mask: &[bool]) -> Var {
        let fs = self.value(f).shape().to_vec();
        let (bsz, m, d) = (fs[0], fs[1], fs[2]);
        assert_eq!(self.value(w).numel(), d);
        assert_eq!(mask.len(), bsz * m);
        let fv = self.value(f).data();
        let wv = self.value(w).data();
        let mut probs = vec![T::zero(); bsz * m];
        let mut out = vec![T::zero(); bsz * d];
        for bi in 0..bsz {
            let bm = &mask[bi * m..(bi + 1) * m];
            assert!(bm.iter().any(|&b| b), "sap_pool: batch row {bi} fully masked");
            let p = &mut probs[bi * m..(bi + 1) * m];
            softmax_masked(
                (0..m).map(|mi| dot(&fv[(bi * m + mi) * d..][..d], wv)),
                bm,
                p,
            );
            for mi in 0..m {
                if bm[mi] {
                    let row = &fv[(bi * m + mi) * d..][..d];
                    for (o, &x) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                        *o = *o + p[mi] * x;
                    }
                }
            }
        }
        let needs = self.ng(&[f, w]);
        self.push(
            Tensor::from_vec(&[bsz, d], out).unwrap(),
            Op::SapPool {
                f,
                w,
                mask: mask.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// Mean squared error against a constant target; yields a scalar.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let p = self.value(pred);
        p.check_same_shape(&target).expect("mse: shape mismatch");
        let n = T::of_usize(p.numel());
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        let needs = self.ng(&[pred]);
        self.push(Tensor::scalar(loss), Op::Mse { pred, target }, needs)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.value(out).numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), T::one()));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Grads { grads }
    }

    /// Gradients of every named parameter.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let dyv = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let ys = node.value.shape();
                let (ho, wo) = (ys[2], ys[3]);
                let geo = ConvGeo {
                    c,
                    h,
                    w: wd,
                    k,
                    stride: *stride,
                    pad: *pad,
                    ho,
                    wo,
                };
                let ckk = c * k * k;
                let hw = ho * wo;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![T::zero(); ckk * hw];
                let mut dw = vec![T::zero(); o * ckk];
                let mut dx = if self.wants(*x) {
                    Some(vec![T::zero(); xv.len()])
                } else {
                    None
                };
                let plane = c * h * wd;
                for bi in 0..bsz {
                    let dyb = &dyv[bi * o * hw..(bi + 1) * o * hw];
                    if self.wants(*w) {
                        im2col(&xv[bi * plane..(bi + 1) * plane], &geo, &mut cols);
                        gemm(false, true, o, hw, ckk, T::one(), dyb, &cols, T::one(), &mut dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(true, false, ckk, o, hw, T::one(), wv, dyb, T::zero(), &mut cols);
                        col2im(&cols, &geo, &mut dx[bi * plane..(bi + 1) * plane]);
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::from_vec(xs, dx).unwrap());
                }
                if self.wants(*w) {
                    accumulate(grads, *w, Tensor::from_vec(ws, dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![T::zero(); o];
                    for bi in 0..bsz {
                        for (oi, d) in db.iter_mut().enumerate() {
                            let row = &dyv[(bi * o + oi) * hw..][..hw];
                            *d = *d + row.iter().copied().sum::<T>();
                        }
                    }
                    accumulate(grads, b, Tensor::from_vec(&[o], db).unwrap());
                }
            }
            Op::GroupNorm { x, groups, rstd } => {
                let xs = self.value(*x).shape();
                let per = (xs[1] / groups) * xs[2..].iter().product::<usize>();
                let yv = node.value.data();
                let mut dx = vec![T::zero(); yv.len()];
                let n = T::of_usize(per);
                for (gi, ((dxg, dyg), yg)) in dx
                    .chunks_mut(per)
                    .zip(dyv.chunks(per))
                    .zip(yv.chunks(per))
                    .enumerate()
                {
                    let mdy = dyg.iter().copied().sum::<T>() / n;
                    let mdyy = dyg.iter().zip(yg).map(|(&a, &b)| a * b).sum::<T>() / n;
                    let r = rstd[gi];
                    for j in 0..per {
                        dxg[j] = r * (dyg[j] - mdy - yg[j] * mdyy);
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xs, dx).unwrap());
            }
            Op::ChannelAffine {
                x,
                scale,
                shift,
                one_plus,
            } => {
                let xs = self.value(*x).shape();
                let (bsz, c) = (xs[0], xs[1]);
                let sp: usize = xs[2..].iter().product();
                let sv = self.value(*scale).data();
                let sb = affine_batch(sv.len(), bsz, c);
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut ds = vec![T::zero(); sv.len()];
                let mut dh = vec![T::zero(); sv.len()];
                for bi in 0..bsz {
                    for ci in 0..c {
                        let pi = if sb == 1 { ci } else { bi * c + ci };
                        let s = if *one_plus { sv[pi] + T::one() } else { sv[pi] };
                        let off = (bi * c + ci) * sp;
                        let mut acc_s = T::zero();
                        let mut acc_h = T::zero();
                        for j in off..off + sp {
                            dx[j] = dyv[j] * s;
                            acc_s = acc_s + dyv[j] * xv[j];
                            acc_h = acc_h + dyv[j];
                        }
                        ds[pi] = ds[pi] + acc_s;
                        dh[pi] = dh[pi] + acc_h;
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::from_vec(xs, dx).unwrap());
                }
                if self.wants(*scale) {
                    let shape = self.value(*scale).shape();
                    accumulate(grads, *scale, Tensor::from_vec(shape, ds).unwrap());
                }
                if let Some(sh) = shift.filter(|s| self.wants(*s)) {
                    let shape = self.value(sh).shape();
                    accumulate(grads, sh, Tensor::from_vec(shape, dh).unwrap());
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let dx = Tensor::from_fn(xv.shape(), |j| {
                    let v = xv.data()[j];
                    let s = sigmoid(v);
                    dyv[j] * s * (T::one() + v * (T::one() - s))
                });
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Concat(a, b) => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let mut da = Vec::with_capacity(sa[0] * ca);
                let mut db = Vec::with_capacity(sa[0] * cb);
                for row in dyv.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::from_vec(sa, da).unwrap());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::from_vec(sb, db).unwrap());
                }
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape();
                let (h, w) = (s[2], s[3]);
                let planes = s[0] * s[1];
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let j = p * h * w + (y / 2) * w + xx / 2;
                            dx[j] = dx[j] + dyv[p * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(s, dx).unwrap());
            }
            Op::ToTokens(x) => {
                let s = self.value(*x).shape();
                let dx = transpose_last2(dyv, s[0], s[2] * s[3], s[1]);
                accumulate(grads, *x, Tensor::from_vec(s, dx).unwrap());
            }
            Op::FromTokens(x) => {
                let s = self.value(*x).shape();
                let dx = transpose_last2(dyv, s[0], s[2], s[1]);
                accumulate(grads, *x, Tensor::from_vec(s, dx).unwrap());
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let (kdim, m) = (ws[0], ws[1]);
                let rows = self.value(*x).numel() / kdim;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); rows * kdim];
                    gemm(false, true, rows, m, kdim, T::one(), dyv, self.value(*w).data(), T::zero(), &mut dx);
                    accumulate(grads, *x, Tensor::from_vec(xs, dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); kdim * m];
                    gemm(true, false, kdim, rows, m, T::one(), self.value(*x).data(), dyv, T::zero(), &mut dw);
                    accumulate(grads, *w, Tensor::from_vec(ws, dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![T::zero(); m];
                    for row in dyv.chunks(m) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    let shape = self.value(b).shape();
                    accumulate(grads, b, Tensor::from_vec(shape, db).unwrap());
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            } => {
                let xs = self.value(*x).shape();
                let d = *xs.last().unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let n = T::of_usize(d);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (ri, (src, g)) in xv.chunks(d).zip(dyv.chunks(d)).enumerate() {
                    let mean = src.iter().copied().sum::<T>() / n;
                    let r = rstd[ri];
                    for j in 0..d {
                        xhat[j] = (src[j] - mean) * r;
                        dxhat[j] = g[j] * gv[j];
                        dg[j] = dg[j] + g[j] * xhat[j];
                        db[j] = db[j] + g[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / n;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for j in 0..d {
                        dx[ri * d + j] = r * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::from_vec(xs, dx).unwrap());
                }
                if self.wants(*gamma) {
                    let s = self.value(*gamma).shape();
                    accumulate(grads, *gamma, Tensor::from_vec(s, dg).unwrap());
                }
                if self.wants(*beta) {
                    let s = self.value(*beta).shape();
                    accumulate(grads, *beta, Tensor::from_vec(s, db).unwrap());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                probs,
            } => {
                let qs = self.value(*q).shape();
                let ks = self.value(*k).shape();
                let (bsz, n, inner) = (qs[0], qs[1], qs[2]);
                let m = ks[1];
                let dh = inner / heads;
                let scale = T::one() / T::of_usize(dh).sqrt();
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                let vv = self.value(*v).data();
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut dp = vec![T::zero(); m];
                for bi in 0..bsz {
                    let bm = &mask[bi * m..(bi + 1) * m];
                    for hi in 0..*heads {
                        for ni in 0..n {
                            let p = &probs[((bi * heads + hi) * n + ni) * m..][..m];
                            let dorow = &dyv[(bi * n + ni) * inner + hi * dh..][..dh];
                            let mut pdp = T::zero();
                            for mi in 0..m {
                                if !bm[mi] {
                                    dp[mi] = T::zero();
                                    continue;
                                }
                                let vo = (bi * m + mi) * inner + hi * dh;
                                dp[mi] = dot(dorow, &vv[vo..vo + dh]);
                                pdp = pdp + p[mi] * dp[mi];
                                for (d, &g) in dv[vo..vo + dh].iter_mut().zip(dorow) {
                                    *d = *d + p[mi] * g;
                                }
                            }
                            let qo = (bi * n + ni) * inner + hi * dh;
                            for mi in 0..m {
                                if !bm[mi] {
                                    continue;
                                }
                                let ds = p[mi] * (dp[mi] - pdp) * scale;
                                let ko = (bi * m + mi) * inner + hi * dh;
                                for j in 0..dh {
                                    dq[qo + j] = dq[qo + j] + ds * kv[ko + j];
                                    dk[ko + j] = dk[ko + j] + ds * qv[qo + j];
                                }
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    accumulate(grads, *q, Tensor::from_vec(qs, dq).unwrap());
                }
                if self.wants(*k) {
                    accumulate(grads, *k, Tensor::from_vec(ks, dk).unwrap());
                }
                if self.wants(*v) {
                    accumulate(grads, *v, Tensor::from_vec(ks, dv).unwrap());
                }
            }
            Op::ReplaceRows { x, null, drop } => {
                let xs = self.value(*x).shape();
                let kdim = self.value(*null).numel();
                let per = self.value(*x).numel() / xs[0];
                let mut dx = dyv.to_vec();
                let mut dn = vec![T::zero(); kdim];
                for (bi, &d) in drop.iter().enumerate() {
                    if d {
                        for row in dx[bi * per..(bi + 1) * per].chunks_mut(kdim) {
                            for (a, g) in dn.iter_mut().zip(row.iter_mut()) {
                                *a = *a + *g;
                                *g = T::zero();
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::from_vec(xs, dx).unwrap());
                }
                if self.wants(*null) {
                    let s = self.value(*null).shape();
                    accumulate(grads, *null, Tensor::from_vec(s, dn).unwrap());
                }
            }
            Op::MeanPool { f, mask } => {
                let fs = self.value(*f).shape();
                let (bsz, m, d) = (fs[0], fs[1], fs[2]);
                let mut df = vec![T::zero(); bsz * m * d];
                for bi in 0..bsz {
                    let cnt = mask[bi * m..(bi + 1) * m].iter().filter(|&&b| b).count();
                    let inv = T::one() / T::of_usize(cnt);
                    for mi in 0..m {
                        if mask[bi * m + mi] {
                            for j in 0..d {
                                df[(bi * m + mi) * d + j] = dyv[bi * d + j] * inv;
                            }
                        }
                    }
                }
                accumulate(grads, *f, Tensor::from_vec(fs, df).unwrap());
            }
            Op::SapPool { f, w, mask, probs } => {
                let fs = self.value(*f).shape();
                let (bsz, m, d) = (fs[0], fs[1], fs[2]);
                let fv = self.value(*f).data();
                let wv = self.value(*w).data();
                let mut df = vec![T::zero(); fv.len()];
                let mut dw = vec![T::zero(); d];
                let mut dp = vec![T::zero(); m];
                for bi in 0..bsz {
                    let p = &probs[bi * m..(bi + 1) * m];
                    let g = &dyv[bi * d..(bi + 1) * d];
                    let mut pdp = T::zero();
                    for mi in 0..m {
                        dp[mi] = if mask[bi * m + mi] {
                            dot(g, &fv[(bi * m + mi) * d..][..d])
                        } else {
                            T::zero()
                        };
                        pdp = pdp + p[mi] * dp[mi];
                    }
                    for mi in 0..m {
                        if !mask[bi * m + mi] {
                            continue;
                        }
                        let ds = p[mi] * (dp[mi] - pdp);
                        let off = (bi * m + mi) * d;
                        for j in 0..d {
                            dw[j] = dw[j] + ds * fv[off + j];
                            df[off + j] = p[mi] * g[j] + ds * wv[j];
                        }
                    }
                }
                if self.wants(*f) {
                    accumulate(grads, *f, Tensor::from_vec(fs, df).unwrap());
                }
                if self.wants(*w) {
                    let s = self.value(*w).shape();
                    accumulate(grads, *w, Tensor::from_vec(s, dw).unwrap());
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let c = dyv[0] * T::of(2.0) / T::of_usize(p.numel());
                let dp = p.zip_with(target, |a, b| (a - b) * c).unwrap();
                accumulate(grads, *pred, dp);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn affine_batch(len: usize, bsz: usize, c: usize) -> usize {
    if len == c {
        1
    } else {
        assert_eq!(len, bsz * c, "affine parameter has {len} elements for [{bsz},{c}]");
        bsz
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Numerically stable softmax over `scores` restricted to `mask`; masked
/// entries get probability zero.
pub(crate) fn softmax_masked<T: Scalar>(scores: impl Iterator<Item = T>, mask: &[bool], out: &mut [T]) {
    let mut mx = T::neg_infinity();
    for ((o, s), &valid) in out.iter_mut().zip(scores).zip(mask) {
        *o = s;
        if valid {
            mx = mx.max(s);
        }
    }
    let mut z = T::zero();
    for (o, &valid) in out.iter_mut().zip(mask) {
        *o = if valid { (*o - mx).exp() } else { T::zero() };
        z = z + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / z);
}

fn transpose_last2<T: Scalar>(src: &[T], bsz: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..bsz {
        let s = &src[bi * rows * cols..(bi + 1) * rows * cols];
        let d = &mut out[bi * rows * cols..(bi + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

struct ConvGeo {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies in `0..w`.
fn valid_cols(g: &ConvGeo, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeo, cols: &mut [T]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * hw..][..hw];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let out = &mut row[oy * g.wo..][..g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h || lo >= hi {
                        out.fill(T::zero());
                        continue;
                    }
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let src = &plane[iy as usize * g.w..][..g.w];
                    let x0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (j, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[x0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeo, dx: &mut [T]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ci * g.k + ky) * g.k + kx) * hw..][..hw];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let src = &row[oy * g.wo + lo..oy * g.wo + hi];
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    let x0 = lo * g.stride + kx - g.pad;
                    for (j, &v) in src.iter().enumerate() {
                        let d = &mut dst[x0 + j * g.stride];
                        *d = *d + v;
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

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Builds `loss = mse(f(params), target)` and compares every parameter
    /// gradient with a central finite difference.
    fn check(shapes: &[&[usize]], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let run = |inputs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| g.param(&format!("p{i}"), t.clone()))
                .collect();
            let out = build(&mut g, &vars);
            (g, out)
        };
        let (g0, out0) = run(&inputs);
        let mut trng = ChaCha8Rng::seed_from_u64(99);
        let target = rand_tensor(&mut trng, g0.value(out0).shape());
        let loss_of = |inputs: &[Tensor<f64>]| {
            let (mut g, out) = run(inputs);
            let l = g.mse(out, target.clone());
            (g, l)
        };
        let (g, l) = loss_of(&inputs);
        let grads = g.param_grads(&g.backward(l));
        let h = 1e-5;
        for (pi, input) in inputs.iter().enumerate() {
            let analytic = &grads[&format!("p{pi}")];
            for j in 0..input.numel() {
                let mut plus = inputs.clone();
                plus[pi].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[pi].data_mut()[j] -= h;
                let (gp, lp) = loss_of(&plus);
                let (gm, lm) = loss_of(&minus);
                let fd = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
                let an = analytic.data()[j];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                    "input {pi} element {j}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        check(&[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1));
        check(&[&[1, 2, 6, 6], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1));
        check(&[&[2, 3, 4, 4], &[2, 3, 1, 1]], |g, v| g.conv2d(v[0], v[1], None, 1, 0));
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        for (h, w, k, stride, pad) in [(5, 7, 3, 1, 1), (6, 6, 3, 2, 1), (4, 5, 1, 1, 0), (5, 5, 3, 2, 2), (3, 3, 3, 1, 0)] {
            let (c, o) = (2, 3);
            let x = Tensor::from_fn(&[1, c, h, w], |i| ((i * 7 % 11) as f64 - 5.0) * 0.1);
            let wt = Tensor::from_fn(&[o, c, k, k], |i| ((i * 5 % 13) as f64 - 6.0) * 0.1);
            let mut g = Graph::new();
            let (xv, wv) = (g.constant(x.clone()), g.constant(wt.clone()));
            let y = g.conv2d(xv, wv, None, stride, pad);
            let y = g.value(y).clone();
            let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
            assert_eq!(y.shape(), &[1, o, ho, wo]);
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[(ci * h + iy as usize) * w + ix as usize]
                                            * wt.data()[((oc * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        let got = y.data()[(oc * ho + oy) * wo + ox];
                        assert!((got - acc).abs() < 1e-12, "{h}x{w} k{k} s{stride} p{pad}");
                    }
                }
            }
        }
    }

    #[test]
    fn norm_gradients() {
        check(&[&[2, 4, 3, 3]], |g, v| g.group_norm(v[0], 2));
        check(&[&[2, 5, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2]));
    }

    #[test]
    fn affine_gradients() {
        check(&[&[2, 3, 2, 2], &[2, 3], &[2, 3]], |g, v| g.channel_affine(v[0], v[1], Some(v[2]), true));
        check(&[&[2, 3, 4], &[3], &[3]], |g, v| g.channel_affine(v[0], v[1], Some(v[2]), false));
    }

    #[test]
    fn elementwise_and_layout_gradients() {
        check(&[&[2, 3, 2, 2]], |g, v| g.silu(v[0]));
        check(&[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]));
        check(&[&[2, 3, 2, 2], &[2, 1, 2, 2]], |g, v| g.concat(v[0], v[1]));
        check(&[&[1, 2, 2, 3]], |g, v| g.upsample2x(v[0]));
        check(&[&[2, 3, 2, 2]], |g, v| {
            let t = g.to_tokens(v[0]);
            let s = g.silu(t);
            g.from_tokens(s, 2, 2)
        });
    }

    #[test]
    fn linear_gradients() {
        check(&[&[2, 3, 4], &[4, 5], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2])));
    }

    #[test]
    fn attention_gradients() {
        let mask = vec![true, true, false, true, true, true];
        check(&[&[2, 4, 6], &[2, 3, 6], &[2, 3, 6]], move |g, v| g.attention(v[0], v[1], v[2], &mask, 2));
    }

    #[test]
    fn pooling_and_replace_gradients() {
        let mask = vec![true, false, true, true, true, true];
        let m2 = mask.clone();
        check(&[&[2, 3, 4], &[4]], move |g, v| g.sap_pool(v[0], v[1], &mask));
        check(&[&[2, 3, 4]], move |g, v| g.mean_pool(v[0], &m2));
        check(&[&[3, 2, 4], &[4]], |g, v| g.replace_rows(v[0], v[1], &[false, true, false]));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(&mut rng, &[2, 5, 8]));
        let k = g.constant(rand_tensor(&mut rng, &[2, 4, 8]));
        let v = g.constant(rand_tensor(&mut rng, &[2, 4, 8]));
        let mask = [true, true, true, false, true, false, true, true];
        let a = g.attention(q, k, v, &mask, 2);
        let probs = g.attention_probs(a).unwrap();
        for (ri, row) in probs.chunks(4).enumerate() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let b = ri / (2 * 5);
            for (mi, &p) in row.iter().enumerate() {
                if !mask[b * 4 + mi] {
                    assert_eq!(p, 0.0);
                }
            }
        }
    }
}
