use super::conv::{col2im, conv_output_len, im2col, Padding};
use super::scalar::matmul;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        pad: usize,
        cols: Vec<T>,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    CropConcat {
        skip: Var,
        up: Var,
        offset: (usize, usize),
    },
    Softmax(Var),
    WeightedCe {
        p: Var,
        labels: Vec<u32>,
        weights: Vec<T>,
    },
    SoftmaxWeightedCe {
        logits: Var,
        labels: Vec<u32>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Scale(Var, T),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar output with respect to every recorded node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::ZERO; len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    /// Selection state of every piecewise-linear op on the tape: positions of
    /// positive ReLU inputs and the chosen max-pool inputs, grouped per node.
    /// When the state agrees at both ends of a small perturbation, the
    /// pre-softmax computation is linear along it in practice.
    pub fn branch_state(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Relu(x) => Some(
                    self.value(*x)
                        .values()
                        .iter()
                        .enumerate()
                        .filter(|(_, &a)| a > T::ZERO)
                        .map(|(i, _)| i)
                        .collect(),
                ),
                Op::MaxPool2 { argmax, .. } => Some(argmax.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let rg = self.needs(inputs);
        Ok(self.push(value, op, rg))
    }

    /// Stride-1 cross-correlation plus bias. `x: [Ci,H,W]`, `w: [Co,Ci,k,k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
        let (ci, h, wd) = self.value(x).chw()?;
        let wdims = self.value(w).dims().to_vec();
        let [co, wci, k, k2] = wdims[..] else {
            return Err(Error::Shape(format!("conv weight must be [Co,Ci,k,k], got {wdims:?}")));
        };
        if wci != ci || k != k2 || !(1..=3).contains(&k) {
            return Err(Error::Shape(format!(
                "conv weight {wdims:?} incompatible with input channels {ci} (k must be 1..=3)"
            )));
        }
        if self.value(b).dims() != [co] {
            return Err(Error::Shape(format!(
                "conv bias must be [{co}], got {:?}",
                self.value(b).dims()
            )));
        }
        let (ho, wo) = match (conv_output_len(h, k, padding), conv_output_len(wd, k, padding)) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
            _ => {
                return Err(Error::Shape(format!(
                    "{k}x{k} {padding:?} conv does not fit a {h}x{wd} input"
                )))
            }
        };
        let pad = padding.amounts(k).0;
        let cols = im2col(self.value(x).values(), ci, h, wd, k, pad, ho, wo);
        let p = ho * wo;
        let mut out = vec![T::ZERO; co * p];
        for (o, &bias) in self.value(b).values().iter().enumerate() {
            out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = bias);
        }
        matmul(co, ci * k * k, p, self.value(w).values(), false, &cols, false, &mut out, true);
        let value = Tensor::new(vec![co, ho, wo], out)?;
        self.record(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                k,
                pad,
                cols,
            },
            &[x, w, b],
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(
            v.dims().to_vec(),
            v.values().iter().map(|&a| if a > T::ZERO { a } else { T::ZERO }).collect(),
        )?;
        self.record(out, Op::Relu(x), &[x], "relu")
    }

    /// 2×2 max-pool with stride 2. Both spatial sides must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Tiling(format!(
                "2x2 max-pool needs even sides, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let top = base + 2 * oy * w + 2 * ox;
                    let cands = [top, top + 1, top + w, top + w + 1];
                    let mut best = cands[0];
                    for &i in &cands[1..] {
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        self.record(value, Op::MaxPool2 { x, argmax }, &[x], "maxpool2")
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let src = self.value(x).values();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                let row = &src[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
                for ox in 0..wo {
                    out.push(row[ox / 2]);
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        self.record(value, Op::Upsample2(x), &[x], "upsample2")
    }

    /// Up-convolution: 2× nearest upsample followed by a 2×2 same-padded conv.
    pub fn upconv2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let up = self.upsample2(x)?;
        self.conv2d(up, w, b, Padding::Same)
    }

    /// Centre-crops `skip` to the spatial extent of `up` and stacks `[skip; up]`
    /// along channels. Returns the crop offset as well.
    pub fn crop_concat(&mut self, skip: Var, up: Var) -> Result<(Var, (usize, usize))> {
        let (c1, hs, ws) = self.value(skip).chw()?;
        let (c2, hu, wu) = self.value(up).chw()?;
        if hs < hu || ws < wu || (hs - hu) % 2 != 0 || (ws - wu) % 2 != 0 {
            return Err(Error::Shape(format!(
                "cannot centre-crop skip {hs}x{ws} to {hu}x{wu}"
            )));
        }
        let offset = ((ws - wu) / 2, (hs - hu) / 2);
        let s = self.value(skip).values();
        let mut out = Vec::with_capacity((c1 + c2) * hu * wu);
        for ch in 0..c1 {
            for y in 0..hu {
                let row = (ch * hs + y + offset.1) * ws + offset.0;
                out.extend_from_slice(&s[row..row + wu]);
            }
        }
        out.extend_from_slice(self.value(up).values());
        let value = Tensor::new(vec![c1 + c2, hu, wu], out)?;
        let v = self.record(value, Op::CropConcat { skip, up, offset }, &[skip, up], "crop_concat")?;
        Ok((v, offset))
    }

    /// Per-pixel softmax over the channel axis of `[K,H,W]` logits.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_px(self.value(a))?;
        self.record(value, Op::Softmax(a), &[a], "softmax")
    }

    /// `-Σ_x w(x) · ln p_{l(x)}(x)` over `p: [K,H,W]`.
    pub fn weighted_ce(&mut self, p: Var, labels: &[u32], weights: &[T]) -> Result<Var> {
        let (k, h, w) = self.value(p).chw()?;
        check_targets(k, h * w, labels, weights)?;
        let pv = self.value(p).values();
        let n = h * w;
        let mut loss = T::ZERO;
        for i in 0..n {
            loss -= weights[i] * pv[labels[i] as usize * n + i].ln();
        }
        self.record(
            Tensor::scalar(loss),
            Op::WeightedCe {
                p,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            &[p],
            "weighted_ce",
        )
    }

    /// Fused softmax + weighted cross-entropy on logits; numerically safer
    /// than composing [`Tape::softmax`] and [`Tape::weighted_ce`].
    pub fn softmax_weighted_ce(&mut self, logits: Var, labels: &[u32], weights: &[T]) -> Result<Var> {
        let (k, h, w) = self.value(logits).chw()?;
        check_targets(k, h * w, labels, weights)?;
        let n = h * w;
        let a = self.value(logits).values();
        let mut probs = vec![T::ZERO; k * n];
        let mut loss = T::ZERO;
        for i in 0..n {
            let mut m = a[i];
            for c in 1..k {
                m = m.max(a[c * n + i]);
            }
            let mut z = T::ZERO;
            for c in 0..k {
                let e = (a[c * n + i] - m).exp();
                probs[c * n + i] = e;
                z += e;
            }
            for c in 0..k {
                probs[c * n + i] = probs[c * n + i] / z;
            }
            let l = labels[i] as usize;
            // -ln p_l = ln z - (a_l - m)
            loss += weights[i] * (z.ln() - (a[l * n + i] - m));
        }
        self.record(
            Tensor::scalar(loss),
            Op::SoftmaxWeightedCe {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
            "softmax_weighted_ce",
        )
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.dims().to_vec(), v.values().iter().map(|&a| a * s).collect())?;
        self.record(out, Op::Scale(x, s), &[x], "scale")
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::ONE]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(op_name(&self.nodes[i].op)));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                k,
                pad,
                cols,
            } => {
                let (ci, h, wd) = self.value(*x).chw()?;
                let (co, ho, wo) = node.value.chw()?;
                let p = ho * wo;
                let kk = ci * k * k;
                if self.wants(*b) {
                    let db = add_into(&mut grads[b.0], co);
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += g[o * p..(o + 1) * p].iter().copied().sum::<T>();
                    }
                }
                if self.wants(*w) {
                    let dw = add_into(&mut grads[w.0], co * kk);
                    // dW (co×kk) += dY (co×p) · colsᵀ
                    matmul(co, p, kk, g, false, cols, true, dw, true);
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::ZERO; kk * p];
                    // dcols (kk×p) = Wᵀ · dY
                    matmul(kk, co, p, self.value(*w).values(), true, g, false, &mut dcols, false);
                    let dx = add_into(&mut grads[x.0], ci * h * wd);
                    col2im(&dcols, dx, ci, h, wd, *k, *pad, ho, wo);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).values();
                    let dx = add_into(&mut grads[x.0], xv.len());
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > T::ZERO {
                            *d += gi;
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.wants(*x) {
                    let dx = add_into(&mut grads[x.0], self.value(*x).len());
                    for (&src, &gi) in argmax.iter().zip(g) {
                        dx[src] += gi;
                    }
                }
            }
            Op::Upsample2(x) => {
                if self.wants(*x) {
                    let (c, h, w) = self.value(*x).chw()?;
                    let wo = 2 * w;
                    let dx = add_into(&mut grads[x.0], c * h * w);
                    for ch in 0..c {
                        for oy in 0..2 * h {
                            for ox in 0..wo {
                                dx[(ch * h + oy / 2) * w + ox / 2] += g[(ch * 2 * h + oy) * wo + ox];
                            }
                        }
                    }
                }
            }
            Op::CropConcat { skip, up, offset } => {
                let (c1, hs, ws) = self.value(*skip).chw()?;
                let (_, hu, wu) = node.value.chw()?;
                let split = c1 * hu * wu;
                if self.wants(*skip) {
                    let ds = add_into(&mut grads[skip.0], c1 * hs * ws);
                    for ch in 0..c1 {
                        for y in 0..hu {
                            let dst = (ch * hs + y + offset.1) * ws + offset.0;
                            let src = (ch * hu + y) * wu;
                            for x in 0..wu {
                                ds[dst + x] += g[src + x];
                            }
                        }
                    }
                }
                if self.wants(*up) {
                    let du = add_into(&mut grads[up.0], g.len() - split);
                    for (d, &gi) in du.iter_mut().zip(&g[split..]) {
                        *d += gi;
                    }
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let (k, h, w) = node.value.chw()?;
                    let n = h * w;
                    let p = node.value.values();
                    let da = add_into(&mut grads[a.0], k * n);
                    for i in 0..n {
                        let dot: T = (0..k).map(|c| p[c * n + i] * g[c * n + i]).sum();
                        for c in 0..k {
                            da[c * n + i] += p[c * n + i] * (g[c * n + i] - dot);
                        }
                    }
                }
            }
            Op::WeightedCe { p, labels, weights } => {
                if self.wants(*p) {
                    let pv = self.value(*p).values();
                    let (_, h, w) = self.value(*p).chw()?;
                    let n = h * w;
                    let dp = add_into(&mut grads[p.0], pv.len());
                    for i in 0..n {
                        let j = labels[i] as usize * n + i;
                        dp[j] -= g[0] * weights[i] / pv[j];
                    }
                }
            }
            Op::SoftmaxWeightedCe {
                logits,
                labels,
                weights,
                probs,
            } => {
                if self.wants(*logits) {
                    let n = labels.len();
                    let da = add_into(&mut grads[logits.0], probs.len());
                    for (j, (d, &pj)) in da.iter_mut().zip(probs).enumerate() {
                        let (c, i) = (j / n, j % n);
                        let target = if labels[i] as usize == c { T::ONE } else { T::ZERO };
                        *d += g[0] * weights[i] * (pj - target);
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    let dx = add_into(&mut grads[x.0], g.len());
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * *s;
                    }
                }
            }
        }
        Ok(())
    }
}

fn op_name<T: Scalar>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d backward",
        Op::Relu(_) => "relu backward",
        Op::MaxPool2 { .. } => "maxpool2 backward",
        Op::Upsample2(_) => "upsample2 backward",
        Op::CropConcat { .. } => "crop_concat backward",
        Op::Softmax(_) => "softmax backward",
        Op::WeightedCe { .. } => "weighted_ce backward",
        Op::SoftmaxWeightedCe { .. } => "softmax_weighted_ce backward",
        Op::Scale(..) => "scale backward",
    }
}

fn check_targets<T: Scalar>(k: usize, n: usize, labels: &[u32], weights: &[T]) -> Result<()> {
    if k < 2 {
        return Err(Error::Shape(format!("need at least 2 classes, got {k}")));
    }
    if labels.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "labels ({}) and weights ({}) must cover {n} pixels",
            labels.len(),
            weights.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Label { label: l, classes: k });
    }
    Ok(())
}

/// `p_k(x) = exp(a_k(x)) / Σ_i exp(a_i(x))`, with the per-pixel maximum subtracted first.
pub fn softmax_px<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, h, w) = a.chw()?;
    if k < 2 {
        return Err(Error::Shape(format!("softmax needs K >= 2, got {k}")));
    }
    let n = h * w;
    let av = a.values();
    let mut out = vec![T::ZERO; k * n];
    for i in 0..n {
        let mut m = av[i];
        for c in 1..k {
            m = m.max(av[c * n + i]);
        }
        let mut z = T::ZERO;
        for c in 0..k {
            let e = (av[c * n + i] - m).exp();
            out[c * n + i] = e;
            z += e;
        }
        for c in 0..k {
            out[c * n + i] = out[c * n + i] / z;
        }
    }
    Tensor::new(vec![k, h, w], out)
}
