//! A small define-by-run reverse-mode autodiff tape over NCHW tensors.
//!
//! Every op records its output value; [`Graph::backward`] walks the tape in
//! reverse and returns parameter gradients keyed by [`ParamId`].

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::pixelops::{bilinear_taps, check_shuffle, check_unshuffle, shuffle_into, unshuffle_into};
use crate::tensor::{conv2d_backward, conv2d_forward, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    ScaleChannels { x: Var, s: Var },
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Shuffle { x: Var, r: usize },
    Unshuffle { x: Var, r: usize },
    GlobalAvg(Var),
    GlobalMax { x: Var, argmax: Vec<usize> },
    AvgPool2(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Reshape(Var),
    WeightedMse { x: Var, target: Var, weight: f32 },
    CrossEntropy { logits: Var, probs: Vec<f32>, targets: Vec<usize>, classes: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.store.get(id).clone();
        self.push(t, Op::Param(id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(out, Op::Conv { x, w, b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[n, c, :, :] * s[n, c, 0, 0]`
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(s) != [n, c, 1, 1] {
            return Err(Error::shape(format!(
                "channel scale {:?} does not match {:?}",
                self.shape(s),
                self.shape(x)
            )));
        }
        let mut out = self.value(x).clone();
        let scales = self.value(s).data();
        for (plane, &sv) in out.data_mut().chunks_exact_mut(h * w).zip(scales) {
            for v in plane {
                *v *= sv;
            }
        }
        Ok(self.push(out, Op::ScaleChannels { x, s }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        self.push(out, Op::Relu(x))
    }

    /// Logistic sigmoid. Saturated values stop at the nearest f32 inside
    /// the open interval (0, 1) rather than rounding onto its ends.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = (1.0 / (1.0 + (-*v).exp())).clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0);
        }
        self.push(out, Op::Sigmoid(x))
    }

    /// Concatenate along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let [n, _, h, w] = self.shape(first);
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.shape(p);
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat mixes {:?} and {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[1] * hw;
                out.extend_from_slice(&t.data()[i * len..(i + 1) * len]);
            }
        }
        let out = Tensor::new([n, total_c, h, w], out)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start+len`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if start + len > c || len == 0 {
            return Err(Error::shape(format!(
                "narrow {start}..{} out of {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let base = (i * c + start) * hw;
            out.extend_from_slice(&src[base..base + len * hw]);
        }
        let out = Tensor::new([n, len, h, w], out)?;
        Ok(self.push(out, Op::Narrow { x, start }))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        check_shuffle(c, r)?;
        let out = shuffle_batch(self.value(x), r);
        debug_assert_eq!(out.shape(), [n, c / (r * r), h * r, w * r]);
        Ok(self.push(out, Op::Shuffle { x, r }))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [_, _, h, w] = self.shape(x);
        check_unshuffle(h, w, r)?;
        let out = unshuffle_batch(self.value(x), r);
        Ok(self.push(out, Op::Unshuffle { x, r }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let hw = (h * w) as f32;
        let data = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().sum::<f32>() / hw)
            .collect();
        let out = Tensor::new([n, c, 1, 1], data).expect("pooled shape");
        self.push(out, Op::GlobalAvg(x))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let mut argmax = Vec::with_capacity(n * c);
        let mut data = Vec::with_capacity(n * c);
        for (pi, p) in self.value(x).data().chunks_exact(h * w).enumerate() {
            let (best, &v) = p
                .iter()
                .enumerate()
                .fold((0, &p[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            argmax.push(pi * h * w + best);
            data.push(v);
        }
        let out = Tensor::new([n, c, 1, 1], data).expect("pooled shape");
        self.push(out, Op::GlobalMax { x, argmax })
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("avg_pool2 needs even dims, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in src.chunks_exact(h * w) {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out.push(0.25 * (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]));
                }
            }
        }
        let out = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push(out, Op::AvgPool2(x)))
    }

    /// 2x2 max pooling with floor on odd sizes.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape(format!("max_pool2 on {h}x{w}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for (pi, p) in src.chunks_exact(h * w).enumerate() {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    let mut best = i;
                    for j in [i + 1, i + w, i + w + 1] {
                        if p[j] > p[best] {
                            best = j;
                        }
                    }
                    out.push(p[best]);
                    argmax.push(pi * h * w + best);
                }
            }
        }
        let out = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }))
    }

    /// Bilinear 2x upsampling with half-pixel centres.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let (oh, ow) = (2 * h, 2 * w);
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in src.chunks_exact(h * w) {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                    let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        let out = Tensor::new([n, c, oh, ow], out).expect("upsampled shape");
        self.push(out, Op::Upsample2(x))
    }

    /// Flatten each batch entry into `[n, c*h*w, 1, 1]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let out = self
            .value(x)
            .clone()
            .reshape([n, c * h * w, 1, 1])
            .expect("same element count");
        self.push(out, Op::Reshape(x))
    }

    /// `weight * mean((x - target)^2)` as a scalar.
    pub fn weighted_mse(&mut self, x: Var, target: Var, weight: f32) -> Result<Var> {
        self.same_shape(x, target, "mse")?;
        let sum: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum();
        let mean = sum / self.value(x).numel() as f64;
        let out = Tensor::scalar((f64::from(weight) * mean) as f32);
        Ok(self.push(out, Op::WeightedMse { x, target, weight }))
    }

    /// Mean over the batch of the summed softmax cross-entropy of `heads`
    /// independent `classes`-way classifiers laid out contiguously per entry.
    ///
    /// `targets` holds `n * heads` class indices.
    pub fn cross_entropy_heads(&mut self, logits: Var, targets: &[usize], classes: usize) -> Result<Var> {
        let t = self.value(logits);
        let n = t.shape()[0];
        let per = t.item_len();
        if classes == 0 || !per.is_multiple_of(classes) || targets.len() != n * (per / classes) {
            return Err(Error::shape(format!(
                "cross entropy: {per} logits per item, {classes} classes, {} targets for batch {n}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= classes) {
            return Err(Error::arg(format!("target class {bad} out of {classes}")));
        }
        let mut probs = Vec::with_capacity(t.numel());
        let mut loss = 0.0f64;
        for (row, &target) in t.data().chunks_exact(classes).zip(targets) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: f32 = exps.iter().sum();
            loss -= f64::from(exps[target] / z).max(1e-30).ln();
            probs.extend(exps.iter().map(|e| e / z));
        }
        let out = Tensor::scalar((loss / n as f64) as f32);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                classes,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut out = Gradients::for_store(self.store);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::Conv { x, w, b } => {
                    let need_dx = !matches!(self.nodes[x.0].op, Op::Leaf);
                    let cg = conv2d_backward(self.value(*x), self.value(*w), &g, need_dx);
                    if let Some(dx) = cg.dx {
                        acc(&mut grads, *x, dx);
                    }
                    acc(&mut grads, *w, cg.dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, cg.db);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    for (o, v) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *o *= v;
                    }
                    let mut gb = g;
                    for (o, v) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= v;
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::ScaleChannels { x, s } => {
                    let [n, c, h, w] = self.shape(*x);
                    let hw = h * w;
                    let scales = self.value(*s).data();
                    let xv = self.value(*x).data();
                    let mut gs = Tensor::zeros([n, c, 1, 1]);
                    let mut gx = g.clone();
                    for (p, (gp, xp)) in gx
                        .data_mut()
                        .chunks_exact_mut(hw)
                        .zip(xv.chunks_exact(hw))
                        .enumerate()
                    {
                        let mut dot = 0.0f32;
                        for (gv, xv) in gp.iter_mut().zip(xp) {
                            dot += *gv * xv;
                            *gv *= scales[p];
                        }
                        gs.data_mut()[p] = dot;
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *s, gs);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= y * (1.0 - y);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let [n, total_c, h, w] = node.value.shape();
                    let hw = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.shape(p)[1];
                        let mut gp = Vec::with_capacity(n * pc * hw);
                        for i in 0..n {
                            let base = (i * total_c + offset) * hw;
                            gp.extend_from_slice(&g.data()[base..base + pc * hw]);
                        }
                        offset += pc;
                        acc(&mut grads, p, Tensor::new([n, pc, h, w], gp)?);
                    }
                }
                Op::Narrow { x, start } => {
                    let [n, c, h, w] = self.shape(*x);
                    let len = node.value.shape()[1];
                    let hw = h * w;
                    let mut gx = Tensor::zeros([n, c, h, w]);
                    for i in 0..n {
                        let dst = (i * c + start) * hw;
                        let src = i * len * hw;
                        gx.data_mut()[dst..dst + len * hw]
                            .copy_from_slice(&g.data()[src..src + len * hw]);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Shuffle { x, r } => acc(&mut grads, *x, unshuffle_batch(&g, *r)),
                Op::Unshuffle { x, r } => acc(&mut grads, *x, shuffle_batch(&g, *r)),
                Op::GlobalAvg(x) => {
                    let [n, c, h, w] = self.shape(*x);
                    let hw = h * w;
                    let mut gx = Vec::with_capacity(n * c * hw);
                    for &gv in g.data() {
                        gx.extend(std::iter::repeat_n(gv / hw as f32, hw));
                    }
                    acc(&mut grads, *x, Tensor::new([n, c, h, w], gx)?);
                }
                Op::GlobalMax { x, argmax } | Op::MaxPool2 { x, argmax } => {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    for (&i, &gv) in argmax.iter().zip(g.data()) {
                        gx.data_mut()[i] += gv;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::AvgPool2(x) => {
                    let [n, c, h, w] = self.shape(*x);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut gx = Tensor::zeros([n, c, h, w]);
                    for (p, gp) in gx
                        .data_mut()
                        .chunks_exact_mut(h * w)
                        .zip(g.data().chunks_exact(oh * ow))
                    {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = 0.25 * gp[y * ow + xx];
                                let i = 2 * y * w + 2 * xx;
                                p[i] += v;
                                p[i + 1] += v;
                                p[i + w] += v;
                                p[i + w + 1] += v;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Upsample2(x) => {
                    let [n, c, h, w] = self.shape(*x);
                    let (oh, ow) = (2 * h, 2 * w);
                    let ty = bilinear_taps(h, oh);
                    let tx = bilinear_taps(w, ow);
                    let mut gx = Tensor::zeros([n, c, h, w]);
                    for (p, gp) in gx
                        .data_mut()
                        .chunks_exact_mut(h * w)
                        .zip(g.data().chunks_exact(oh * ow))
                    {
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let v = gp[oy * ow + ox];
                                p[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                                p[y0 * w + x1] += v * (1.0 - fy) * fx;
                                p[y1 * w + x0] += v * fy * (1.0 - fx);
                                p[y1 * w + x1] += v * fy * fx;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x);
                    acc(&mut grads, *x, g.reshape(shape)?);
                }
                Op::WeightedMse { x, target, weight } => {
                    let upstream = g.data()[0];
                    let n = self.value(*x).numel() as f32;
                    let coeff = upstream * weight * 2.0 / n;
                    let diff: Vec<f32> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(self.value(*target).data())
                        .map(|(a, b)| coeff * (a - b))
                        .collect();
                    let shape = self.shape(*x);
                    let gx = Tensor::new(shape, diff)?;
                    if !matches!(self.nodes[target.0].op, Op::Leaf) {
                        let mut gt = gx.clone();
                        gt.scale(-1.0);
                        acc(&mut grads, *target, gt);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                    classes,
                } => {
                    let upstream = g.data()[0];
                    let shape = self.shape(*logits);
                    let n = shape[0] as f32;
                    let mut gl = probs.clone();
                    for (row, &t) in gl.chunks_exact_mut(*classes).zip(targets) {
                        row[t] -= 1.0;
                    }
                    for v in &mut gl {
                        *v *= upstream / n;
                    }
                    acc(&mut grads, *logits, Tensor::new(shape, gl)?);
                }
            }
        }
        Ok(out)
    }
}

fn shuffle_batch(t: &Tensor, r: usize) -> Tensor {
    let [n, c, h, w] = t.shape();
    let len = t.item_len();
    let mut out = vec![0.0; t.numel()];
    for i in 0..n {
        shuffle_into(&t.data()[i * len..(i + 1) * len], c, h, w, r, &mut out[i * len..(i + 1) * len]);
    }
    Tensor::new([n, c / (r * r), h * r, w * r], out).expect("shuffle preserves size")
}

fn unshuffle_batch(t: &Tensor, r: usize) -> Tensor {
    let [n, c, h, w] = t.shape();
    let len = t.item_len();
    let mut out = vec![0.0; t.numel()];
    for i in 0..n {
        unshuffle_into(&t.data()[i * len..(i + 1) * len], c, h, w, r, &mut out[i * len..(i + 1) * len]);
    }
    Tensor::new([n, c * r * r, h / r, w / r], out).expect("unshuffle preserves size")
}
