use rand::Rng;

use super::tensor::{axpy, dot, mean_var};
use super::{NumericsError, Tensor};

/// Forward-pass mode; dropout is the identity in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv1d { padding: usize },
    MaxPool2,
    InstanceNorm { eps: f64 },
    Prelu,
    /// Scale factors per element: `1/(1-p)` for kept, `0.0` for dropped.
    /// Empty in eval mode (identity).
    Dropout { mask: Vec<f64> },
    SoftmaxTime,
    Linear,
    ChannelSlice { from: usize },
    AttendTime,
    CrossEntropy { labels: Vec<usize> },
    Scale { factor: f64 },
    AddScalars,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Tape-ordered computation graph. Nodes are appended by the op builders, so
/// every node's inputs precede it and a single reverse sweep backpropagates.
/// Gradients accumulate additively across `backward` calls until
/// `zero_grads`.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn sink<'a>(scratch: &'a mut [Option<Tensor>], nodes: &[Node], idx: usize) -> &'a mut Tensor {
    let shape = nodes[idx].value.shape();
    if scratch[idx].is_none() {
        scratch[idx] = Some(Tensor::zeros(shape));
    }
    scratch[idx].as_mut().unwrap()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of `id`, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// 1-d convolution with stride 1 and symmetric zero padding.
    ///
    /// `input [b, c_in, t]`, `weight [c_out, c_in, kw]`, `bias [c_out]`
    /// produce `[b, c_out, t + 2*padding - kw + 1]`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        padding: usize,
    ) -> Result<NodeId, NumericsError> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.rank() != 3 {
            return Err(NumericsError::BadRank {
                op: "conv1d input",
                expected: 3,
                got: x.shape().to_vec(),
            });
        }
        if w.rank() != 3 || x.shape()[1] != w.shape()[1] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv1d input channels vs weight",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let (bsz, c_in, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, kw) = (w.shape()[0], w.shape()[2]);
        if b.shape() != [c_out] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv1d bias vs weight",
                left: b.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        if t + 2 * padding < kw {
            return Err(NumericsError::WindowTooShort {
                t,
                padding,
                kernel: kw,
            });
        }
        let t_out = t + 2 * padding - kw + 1;
        let mut out = Tensor::zeros(&[bsz, c_out, t_out]);
        let od = out.data_mut();
        for i in 0..bsz {
            for co in 0..c_out {
                let yoff = (i * c_out + co) * t_out;
                od[yoff..yoff + t_out].fill(b.data()[co]);
                for ci in 0..c_in {
                    let xrow = x.row3(i, ci);
                    let woff = (co * c_in + ci) * kw;
                    for j in 0..kw {
                        let (lo, hi) = conv_span(t, t_out, padding, j);
                        if lo >= hi {
                            continue;
                        }
                        let xs = lo + j - padding;
                        axpy(
                            w.data()[woff + j],
                            &xrow[xs..xs + hi - lo],
                            &mut od[yoff + lo..yoff + hi],
                        );
                    }
                }
            }
        }
        Ok(self.push(Op::Conv1d { padding }, vec![input.0, weight.0, bias.0], out))
    }

    /// 2-factor max pooling over time; a trailing odd sample is discarded.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(NumericsError::BadRank {
                op: "max_pool2",
                expected: 3,
                got: x.shape().to_vec(),
            });
        }
        let (bsz, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if t < 2 {
            return Err(NumericsError::SeriesTooShortForPooling);
        }
        let t_out = t / 2;
        let mut out = Tensor::zeros(&[bsz, c, t_out]);
        for i in 0..bsz {
            for ch in 0..c {
                let row = x.row3(i, ch);
                let ooff = (i * c + ch) * t_out;
                let orow = &mut out.data_mut()[ooff..ooff + t_out];
                for k in 0..t_out {
                    let (a, b) = (row[2 * k], row[2 * k + 1]);
                    orow[k] = if a >= b { a } else { b };
                }
            }
        }
        Ok(self.push(Op::MaxPool2, vec![input.0], out))
    }

    /// Per-instance normalization with learnable affine.
    ///
    /// Rank-3 input `[b, c, t]`: statistics over the time axis of each
    /// `(instance, channel)`, `gamma`/`beta` per channel. Rank-2 input
    /// `[b, d]`: statistics over the `d` components of each instance,
    /// `gamma`/`beta` per component. Population variance in both cases.
    pub fn instance_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, NumericsError> {
        let (x, g, b) = (self.value(input), self.value(gamma), self.value(beta));
        let feature_dim = match x.rank() {
            2 | 3 => x.shape()[1],
            _ => {
                return Err(NumericsError::BadRank {
                    op: "instance_norm",
                    expected: 3,
                    got: x.shape().to_vec(),
                })
            }
        };
        if g.shape() != [feature_dim] || b.shape() != [feature_dim] {
            return Err(NumericsError::ShapeMismatch {
                op: "instance_norm affine",
                left: g.shape().to_vec(),
                right: vec![feature_dim],
            });
        }
        let mut out = Tensor::zeros(x.shape());
        if x.rank() == 3 {
            let (bsz, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            for i in 0..bsz {
                for ch in 0..c {
                    let row = x.row3(i, ch);
                    let (mean, var) = mean_var(row);
                    let s = (var + eps).sqrt();
                    let (gc, bc) = (g.data()[ch], b.data()[ch]);
                    let ooff = (i * c + ch) * t;
                    let orow = &mut out.data_mut()[ooff..ooff + t];
                    for (o, xv) in orow.iter_mut().zip(row) {
                        *o = gc * (xv - mean) / s + bc;
                    }
                }
            }
        } else {
            let (bsz, d) = (x.shape()[0], x.shape()[1]);
            for i in 0..bsz {
                let row = x.row2(i);
                let (mean, var) = mean_var(row);
                let s = (var + eps).sqrt();
                let orow = &mut out.data_mut()[i * d..(i + 1) * d];
                for j in 0..d {
                    orow[j] = g.data()[j] * (row[j] - mean) / s + b.data()[j];
                }
            }
        }
        Ok(self.push(
            Op::InstanceNorm { eps },
            vec![input.0, gamma.0, beta.0],
            out,
        ))
    }

    /// Parametric ReLU with one slope per channel.
    pub fn prelu(&mut self, input: NodeId, slope: NodeId) -> Result<NodeId, NumericsError> {
        let (x, a) = (self.value(input), self.value(slope));
        if x.rank() != 3 {
            return Err(NumericsError::BadRank {
                op: "prelu",
                expected: 3,
                got: x.shape().to_vec(),
            });
        }
        let c = x.shape()[1];
        if a.shape() != [c] {
            return Err(NumericsError::ShapeMismatch {
                op: "prelu slope",
                left: a.shape().to_vec(),
                right: vec![c],
            });
        }
        let (bsz, t) = (x.shape()[0], x.shape()[2]);
        let mut out = Tensor::zeros(x.shape());
        for i in 0..bsz {
            for ch in 0..c {
                let ac = a.data()[ch];
                let row = x.row3(i, ch);
                let ooff = (i * c + ch) * t;
                let orow = &mut out.data_mut()[ooff..ooff + t];
                for (o, xv) in orow.iter_mut().zip(row) {
                    *o = if *xv >= 0.0 { *xv } else { ac * xv };
                }
            }
        }
        Ok(self.push(Op::Prelu, vec![input.0, slope.0], out))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; eval mode is
    /// the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        input: NodeId,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::BadDropoutProbability(p));
        }
        let x = self.value(input);
        let (out, mask) = match mode {
            Mode::Eval => (x.clone(), Vec::new()),
            Mode::Train => {
                let keep_scale = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..x.numel())
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
                    .collect();
                let mut out = x.clone();
                for (o, m) in out.data_mut().iter_mut().zip(&mask) {
                    *o *= m;
                }
                (out, mask)
            }
        };
        Ok(self.push(Op::Dropout { mask }, vec![input.0], out))
    }

    /// Softmax over the time axis, per (instance, channel), with
    /// max-subtraction for stability.
    pub fn softmax_time(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(NumericsError::BadRank {
                op: "softmax_time",
                expected: 3,
                got: x.shape().to_vec(),
            });
        }
        let (bsz, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Tensor::zeros(x.shape());
        for i in 0..bsz {
            for ch in 0..c {
                let row = x.row3(i, ch);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ooff = (i * c + ch) * t;
                let orow = &mut out.data_mut()[ooff..ooff + t];
                let mut sum = 0.0;
                for (o, xv) in orow.iter_mut().zip(row) {
                    *o = (xv - m).exp();
                    sum += *o;
                }
                for o in orow.iter_mut() {
                    *o /= sum;
                }
            }
        }
        Ok(self.push(Op::SoftmaxTime, vec![input.0], out))
    }

    /// Affine map: `input [b, d_in]`, `weight [d_out, d_in]`, `bias [d_out]`.
    pub fn linear(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.rank() != 2 {
            return Err(NumericsError::BadRank {
                op: "linear input",
                expected: 2,
                got: x.shape().to_vec(),
            });
        }
        if w.rank() != 2 || w.shape()[1] != x.shape()[1] {
            return Err(NumericsError::ShapeMismatch {
                op: "linear input vs weight",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let (bsz, d_out) = (x.shape()[0], w.shape()[0]);
        if b.shape() != [d_out] {
            return Err(NumericsError::ShapeMismatch {
                op: "linear bias vs weight",
                left: b.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[bsz, d_out]);
        for i in 0..bsz {
            let xrow = x.row2(i);
            let orow = &mut out.data_mut()[i * d_out..(i + 1) * d_out];
            for o in 0..d_out {
                orow[o] = dot(xrow, w.row2(o)) + b.data()[o];
            }
        }
        Ok(self.push(Op::Linear, vec![input.0, weight.0, bias.0], out))
    }

    /// Keeps channels `from..to` of a rank-3 tensor.
    pub fn channel_slice(
        &mut self,
        input: NodeId,
        from: usize,
        to: usize,
    ) -> Result<NodeId, NumericsError> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(NumericsError::BadRank {
                op: "channel_slice",
                expected: 3,
                got: x.shape().to_vec(),
            });
        }
        let (bsz, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if from >= to || to > c {
            return Err(NumericsError::BadChannelSlice {
                from,
                to,
                channels: c,
            });
        }
        let width = to - from;
        let mut out = Tensor::zeros(&[bsz, width, t]);
        for i in 0..bsz {
            for ch in 0..width {
                let row = x.row3(i, from + ch);
                let ooff = (i * width + ch) * t;
                out.data_mut()[ooff..ooff + t].copy_from_slice(row);
            }
        }
        Ok(self.push(Op::ChannelSlice { from }, vec![input.0], out))
    }

    /// Per-(instance, channel) dot product over time:
    /// `out[i, c] = sum_t signal[i, c, t] * weights[i, c, t]`.
    pub fn attend_time(
        &mut self,
        signal: NodeId,
        weights: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let (h, a) = (self.value(signal), self.value(weights));
        if h.rank() != 3 || h.shape() != a.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "attend_time",
                left: h.shape().to_vec(),
                right: a.shape().to_vec(),
            });
        }
        let (bsz, c) = (h.shape()[0], h.shape()[1]);
        let mut out = Tensor::zeros(&[bsz, c]);
        for i in 0..bsz {
            for ch in 0..c {
                out.data_mut()[i * c + ch] = dot(h.row3(i, ch), a.row3(i, ch));
            }
        }
        Ok(self.push(Op::AttendTime, vec![signal.0, weights.0], out))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, NumericsError> {
        let x = self.value(logits);
        if x.rank() != 2 {
            return Err(NumericsError::BadRank {
                op: "cross_entropy",
                expected: 2,
                got: x.shape().to_vec(),
            });
        }
        let (bsz, classes) = (x.shape()[0], x.shape()[1]);
        if labels.len() != bsz {
            return Err(NumericsError::LabelCountMismatch {
                labels: labels.len(),
                batch: bsz,
            });
        }
        for &l in labels {
            if l >= classes {
                return Err(NumericsError::LabelOutOfRange { label: l, classes });
            }
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = x.row2(i);
            total += log_sum_exp(row) - row[label];
        }
        let value = Tensor::scalar(total / bsz as f64);
        Ok(self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits.0],
            value,
        ))
    }

    /// Scales every element by a constant.
    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let x = self.value(input);
        let mut out = x.clone();
        for v in out.data_mut() {
            *v *= factor;
        }
        self.push(Op::Scale { factor }, vec![input.0], out)
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, terms: &[NodeId]) -> Result<NodeId, NumericsError> {
        let mut total = 0.0;
        for id in terms {
            let v = self.value(*id);
            if v.numel() != 1 {
                return Err(NumericsError::NonScalarLoss(v.shape().to_vec()));
            }
            total += v.scalar_value();
        }
        Ok(self.push(
            Op::AddScalars,
            terms.iter().map(|id| id.0).collect(),
            Tensor::scalar(total),
        ))
    }

    /// Reverse-mode sweep from a scalar loss. The freshly propagated
    /// gradients are added onto whatever previous backward calls
    /// accumulated, so two passes without `zero_grads` double every
    /// gradient exactly.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NonScalarLoss(
                self.value(loss).shape().to_vec(),
            ));
        }
        let mut scratch: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        scratch[loss.0] =
            Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]).expect("scalar"));
        for i in (0..=loss.0).rev() {
            let Some(gout) = scratch[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut scratch);
            match &mut self.grads[i] {
                Some(acc) => {
                    for (a, g) in acc.data_mut().iter_mut().zip(gout.data()) {
                        *a += g;
                    }
                }
                slot => *slot = Some(gout),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &Tensor, scratch: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let input = |j: usize| &self.nodes[ins[j]].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { padding } => {
                let (x, w) = (input(0), input(1));
                let (bsz, c_in, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (c_out, kw) = (w.shape()[0], w.shape()[2]);
                let t_out = node.value.shape()[2];
                let p = *padding;
                {
                    let gb = sink(scratch, &self.nodes, ins[2]);
                    for i in 0..bsz {
                        for co in 0..c_out {
                            gb.data_mut()[co] += gout.row3(i, co).iter().sum::<f64>();
                        }
                    }
                }
                {
                    let gw = sink(scratch, &self.nodes, ins[1]);
                    for i in 0..bsz {
                        for co in 0..c_out {
                            let gy = gout.row3(i, co);
                            for ci in 0..c_in {
                                let xrow = x.row3(i, ci);
                                let woff = (co * c_in + ci) * kw;
                                for j in 0..kw {
                                    let (lo, hi) = conv_span(t, t_out, p, j);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let xs = lo + j - p;
                                    gw.data_mut()[woff + j] +=
                                        dot(&gy[lo..hi], &xrow[xs..xs + hi - lo]);
                                }
                            }
                        }
                    }
                }
                {
                    let gx = sink(scratch, &self.nodes, ins[0]);
                    for i in 0..bsz {
                        for co in 0..c_out {
                            let gy = gout.row3(i, co);
                            for ci in 0..c_in {
                                let woff = (co * c_in + ci) * kw;
                                let goff = (i * c_in + ci) * t;
                                let grow = &mut gx.data_mut()[goff..goff + t];
                                for j in 0..kw {
                                    let (lo, hi) = conv_span(t, t_out, p, j);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let xs = lo + j - p;
                                    axpy(
                                        w.data()[woff + j],
                                        &gy[lo..hi],
                                        &mut grow[xs..xs + hi - lo],
                                    );
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2 => {
                let x = input(0);
                let (bsz, c) = (x.shape()[0], x.shape()[1]);
                let t_out = node.value.shape()[2];
                let gx = sink(scratch, &self.nodes, ins[0]);
                for i in 0..bsz {
                    for ch in 0..c {
                        let row = x.row3(i, ch);
                        let gy = gout.row3(i, ch);
                        let grow = gx.row3_mut(i, ch);
                        for k in 0..t_out {
                            // ties route to the earlier element
                            let idx = if row[2 * k] >= row[2 * k + 1] {
                                2 * k
                            } else {
                                2 * k + 1
                            };
                            grow[idx] += gy[k];
                        }
                    }
                }
            }
            Op::InstanceNorm { eps } => {
                let (x, g) = (input(0), input(1));
                if x.rank() == 3 {
                    let (bsz, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    {
                        let gx = sink(scratch, &self.nodes, ins[0]);
                        for i in 0..bsz {
                            for ch in 0..c {
                                let row = x.row3(i, ch);
                                let gy = gout.row3(i, ch);
                                let (mean, var) = mean_var(row);
                                let s = (var + eps).sqrt();
                                let gc = g.data()[ch];
                                let mut m1 = 0.0;
                                let mut m2 = 0.0;
                                for k in 0..t {
                                    let xhat = (row[k] - mean) / s;
                                    let dxhat = gy[k] * gc;
                                    m1 += dxhat;
                                    m2 += dxhat * xhat;
                                    dgamma[ch] += gy[k] * xhat;
                                    dbeta[ch] += gy[k];
                                }
                                m1 /= t as f64;
                                m2 /= t as f64;
                                let grow = gx.row3_mut(i, ch);
                                for k in 0..t {
                                    let xhat = (row[k] - mean) / s;
                                    grow[k] += (gy[k] * gc - m1 - xhat * m2) / s;
                                }
                            }
                        }
                    }
                    axpy(1.0, &dgamma, sink(scratch, &self.nodes, ins[1]).data_mut());
                    axpy(1.0, &dbeta, sink(scratch, &self.nodes, ins[2]).data_mut());
                } else {
                    let (bsz, d) = (x.shape()[0], x.shape()[1]);
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    {
                        let gx = sink(scratch, &self.nodes, ins[0]);
                        for i in 0..bsz {
                            let row = x.row2(i);
                            let gy = gout.row2(i);
                            let (mean, var) = mean_var(row);
                            let s = (var + eps).sqrt();
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                let xhat = (row[j] - mean) / s;
                                let dxhat = gy[j] * g.data()[j];
                                m1 += dxhat;
                                m2 += dxhat * xhat;
                                dgamma[j] += gy[j] * xhat;
                                dbeta[j] += gy[j];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            let grow = gx.row2_mut(i);
                            for j in 0..d {
                                let xhat = (row[j] - mean) / s;
                                grow[j] += (gy[j] * g.data()[j] - m1 - xhat * m2) / s;
                            }
                        }
                    }
                    axpy(1.0, &dgamma, sink(scratch, &self.nodes, ins[1]).data_mut());
                    axpy(1.0, &dbeta, sink(scratch, &self.nodes, ins[2]).data_mut());
                }
            }
            Op::Prelu => {
                let (x, a) = (input(0), input(1));
                let (bsz, c) = (x.shape()[0], x.shape()[1]);
                let mut dslope = vec![0.0; c];
                {
                    let gx = sink(scratch, &self.nodes, ins[0]);
                    for i in 0..bsz {
                        for ch in 0..c {
                            let row = x.row3(i, ch);
                            let gy = gout.row3(i, ch);
                            let ac = a.data()[ch];
                            let grow = gx.row3_mut(i, ch);
                            for k in 0..row.len() {
                                if row[k] >= 0.0 {
                                    grow[k] += gy[k];
                                } else {
                                    grow[k] += gy[k] * ac;
                                    dslope[ch] += gy[k] * row[k];
                                }
                            }
                        }
                    }
                }
                axpy(1.0, &dslope, sink(scratch, &self.nodes, ins[1]).data_mut());
            }
            Op::Dropout { mask } => {
                let gx = sink(scratch, &self.nodes, ins[0]);
                if mask.is_empty() {
                    axpy(1.0, gout.data(), gx.data_mut());
                } else {
                    for (g, (go, m)) in gx.data_mut().iter_mut().zip(gout.data().iter().zip(mask))
                    {
                        *g += go * m;
                    }
                }
            }
            Op::SoftmaxTime => {
                let a = &node.value;
                let (bsz, c) = (a.shape()[0], a.shape()[1]);
                let gx = sink(scratch, &self.nodes, ins[0]);
                for i in 0..bsz {
                    for ch in 0..c {
                        let arow = a.row3(i, ch);
                        let gy = gout.row3(i, ch);
                        let inner = dot(gy, arow);
                        let grow = gx.row3_mut(i, ch);
                        for k in 0..arow.len() {
                            grow[k] += arow[k] * (gy[k] - inner);
                        }
                    }
                }
            }
            Op::Linear => {
                let (x, w) = (input(0), input(1));
                let (bsz, d_out) = (x.shape()[0], w.shape()[0]);
                {
                    let gb = sink(scratch, &self.nodes, ins[2]);
                    for i in 0..bsz {
                        axpy(1.0, gout.row2(i), gb.data_mut());
                    }
                }
                {
                    let gw = sink(scratch, &self.nodes, ins[1]);
                    for i in 0..bsz {
                        let gy = gout.row2(i);
                        let xrow = x.row2(i);
                        for o in 0..d_out {
                            axpy(gy[o], xrow, gw.row2_mut(o));
                        }
                    }
                }
                {
                    let gx = sink(scratch, &self.nodes, ins[0]);
                    for i in 0..bsz {
                        let gy = gout.row2(i);
                        let grow = gx.row2_mut(i);
                        for o in 0..d_out {
                            axpy(gy[o], w.row2(o), grow);
                        }
                    }
                }
            }
            Op::ChannelSlice { from } => {
                let (bsz, width) = (node.value.shape()[0], node.value.shape()[1]);
                let gx = sink(scratch, &self.nodes, ins[0]);
                for i in 0..bsz {
                    for ch in 0..width {
                        axpy(1.0, gout.row3(i, ch), gx.row3_mut(i, from + ch));
                    }
                }
            }
            Op::AttendTime => {
                let (h, a) = (input(0), input(1));
                let (bsz, c) = (h.shape()[0], h.shape()[1]);
                {
                    let gh = sink(scratch, &self.nodes, ins[0]);
                    for i in 0..bsz {
                        for ch in 0..c {
                            axpy(gout.data()[i * c + ch], a.row3(i, ch), gh.row3_mut(i, ch));
                        }
                    }
                }
                {
                    let ga = sink(scratch, &self.nodes, ins[1]);
                    for i in 0..bsz {
                        for ch in 0..c {
                            axpy(gout.data()[i * c + ch], h.row3(i, ch), ga.row3_mut(i, ch));
                        }
                    }
                }
            }
            Op::CrossEntropy { labels } => {
                let x = input(0);
                let classes = x.shape()[1];
                let go = gout.scalar_value() / labels.len() as f64;
                let gx = sink(scratch, &self.nodes, ins[0]);
                for (i, &label) in labels.iter().enumerate() {
                    let row = x.row2(i);
                    let lse = log_sum_exp(row);
                    let grow = gx.row2_mut(i);
                    for c in 0..classes {
                        let p = (row[c] - lse).exp();
                        grow[c] += go * (p - if c == label { 1.0 } else { 0.0 });
                    }
                }
            }
            Op::Scale { factor } => {
                axpy(
                    *factor,
                    gout.data(),
                    sink(scratch, &self.nodes, ins[0]).data_mut(),
                );
            }
            Op::AddScalars => {
                for &j in ins.iter() {
                    sink(scratch, &self.nodes, j).data_mut()[0] += gout.scalar_value();
                }
            }
        }
    }
}

/// Output positions `lo..hi` whose window tap `j` stays inside the input.
fn conv_span(t: usize, t_out: usize, padding: usize, j: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(j);
    let hi = (t + padding).saturating_sub(j).min(t_out);
    (lo, hi)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
