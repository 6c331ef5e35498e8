//! Forward and backward execution over a [`Network`].

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use super::graph::{Graph, LayerKind};
use super::{param_key, Network};
use crate::error::{Error, Result};
use crate::tensor::conv::conv2d_backward_parts;
use crate::tensor::{conv2d_forward, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Gradients keyed like the parameter store.
pub type Gradients = BTreeMap<String, Tensor>;

/// Tensors retained by a forward pass for the matching backward pass:
/// post-activation maps, layer inputs that feed weighted layers, pooling
/// argmax indices and projection bottleneck maps.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    complete: bool,
    batch: usize,
    input: Option<Tensor>,
    outputs: Vec<Option<Tensor>>,
    argmax: Vec<Option<Vec<u32>>>,
    bottleneck: Vec<Option<Tensor>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }
}

fn fingerprint(graph: &Graph) -> u64 {
    let mut h = DefaultHasher::new();
    graph.to_text().hash(&mut h);
    h.finish()
}

fn weighted(kind: &LayerKind) -> bool {
    matches!(
        kind,
        LayerKind::Conv2d { .. } | LayerKind::Dense { .. } | LayerKind::Projection { .. }
    )
}

struct LayerOut {
    value: Tensor,
    argmax: Option<Vec<u32>>,
    bottleneck: Option<Tensor>,
}

impl LayerOut {
    fn plain(value: Tensor) -> Self {
        LayerOut {
            value,
            argmax: None,
            bottleneck: None,
        }
    }
}

impl Network {
    /// Runs the network on `[batch, c, h, w]` (or `[batch, c]` for `1x1`
    /// inputs) and returns `[batch, outputs]` logits. With `keep_cache` the
    /// returned cache supports [`Network::backward`].
    pub fn forward(&self, batch: &Tensor, keep_cache: bool) -> Result<(Tensor, ForwardCache)> {
        let graph = self.graph();
        let [c, h, w] = graph.input_shape();
        let n = batch.shape()[0];
        let matches_4d = batch.shape() == [n, c, h, w];
        let matches_2d = h == 1 && w == 1 && batch.shape() == [n, c];
        if !(matches_4d || matches_2d) {
            return Err(Error::Dimension(format!(
                "edge input -> {}: batch shape {:?} does not match declared input {c}x{h}x{w}",
                graph.layers()[0].name,
                batch.shape()
            )));
        }
        let x = batch.clone().reshape(&[n, c, h, w])?;

        let layers = graph.layers();
        let producers = graph.producer_indices();
        let consumers = graph.consumers();
        let len = layers.len();
        let mut remaining: Vec<usize> = consumers.iter().map(Vec::len).collect();
        let keep: Vec<bool> = (0..len)
            .map(|i| {
                keep_cache
                    && (layers[i].kind == LayerKind::ReLU
                        || consumers[i].iter().any(|&j| weighted(&layers[j].kind)))
            })
            .collect();
        let keep_input = keep_cache
            && producers
                .iter()
                .zip(layers)
                .any(|(p, l)| p.contains(&None) && weighted(&l.kind));

        let mut outputs: Vec<Option<Tensor>> = vec![None; len];
        let mut argmax: Vec<Option<Vec<u32>>> = vec![None; len];
        let mut bottleneck: Vec<Option<Tensor>> = vec![None; len];
        for i in 0..len {
            let out = {
                let ins: Vec<&Tensor> = producers[i]
                    .iter()
                    .map(|p| match p {
                        None => Ok(&x),
                        Some(j) => outputs[*j].as_ref().ok_or_else(|| {
                            Error::State(format!("output of {} released early", layers[*j].name))
                        }),
                    })
                    .collect::<Result<_>>()?;
                self.run_layer(i, &ins)?
            };
            if keep_cache {
                argmax[i] = out.argmax;
                bottleneck[i] = out.bottleneck;
            }
            outputs[i] = Some(out.value);
            for p in producers[i].iter().flatten() {
                remaining[*p] -= 1;
                if remaining[*p] == 0 && !keep[*p] {
                    outputs[*p] = None;
                }
            }
        }
        let last = if keep[len - 1] {
            outputs[len - 1].clone()
        } else {
            outputs[len - 1].take()
        }
        .expect("last layer output");
        let features = last.len() / n;
        let logits = last.reshape(&[n, features])?;
        let cache = ForwardCache {
            fingerprint: if keep_cache { fingerprint(graph) } else { 0 },
            complete: keep_cache,
            batch: n,
            input: keep_input.then_some(x),
            outputs: if keep_cache { outputs } else { Vec::new() },
            argmax,
            bottleneck,
        };
        Ok((logits, cache))
    }

    /// Output of the named layer for a batch, without caching.
    pub fn activation(&self, batch: &Tensor, layer: &str) -> Result<Tensor> {
        let graph = self.graph();
        let target = graph
            .index_of(layer)
            .ok_or_else(|| Error::Lookup(format!("no layer named {layer}")))?;
        let [c, h, w] = graph.input_shape();
        let n = batch.shape()[0];
        let x = batch.clone().reshape(&[n, c, h, w])?;
        let producers = graph.producer_indices();
        let mut outputs: Vec<Option<Tensor>> = vec![None; target + 1];
        for i in 0..=target {
            let ins: Vec<&Tensor> = producers[i]
                .iter()
                .map(|p| p.map_or(&x, |j| outputs[j].as_ref().expect("computed in order")))
                .collect();
            outputs[i] = Some(self.run_layer(i, &ins)?.value);
        }
        Ok(outputs[target].take().expect("target computed"))
    }

    fn run_layer(&self, i: usize, ins: &[&Tensor]) -> Result<LayerOut> {
        let layer = &self.graph().layers()[i];
        let x = ins[0];
        let (n, c, h, w) = x.dims4()?;
        match layer.kind {
            LayerKind::Conv2d {
                stride, pad, groups, ..
            } => {
                if groups != 1 {
                    return Err(Error::Config(format!(
                        "layer {}: grouped convolution is shape-only",
                        layer.name
                    )));
                }
                let weight = self.param(&param_key(&layer.name, "weight"))?;
                let bias = self.param(&param_key(&layer.name, "bias"))?;
                Ok(LayerOut::plain(conv2d_forward(x, weight, Some(bias), stride, pad)?))
            }
            LayerKind::ReLU => Ok(LayerOut::plain(x.map(|v| v.max(0.0)))),
            LayerKind::MaxPool { .. } => {
                if !layer.kind.is_standard_pool() {
                    return Err(Error::Config(format!(
                        "layer {}: only 2x2 stride-2 max pooling executes",
                        layer.name
                    )));
                }
                let (out, idx) = maxpool2x2(x)?;
                Ok(LayerOut {
                    value: out,
                    argmax: Some(idx),
                    bottleneck: None,
                })
            }
            LayerKind::Dense { units } => {
                let weight = self.param(&param_key(&layer.name, "weight"))?;
                let bias = self.param(&param_key(&layer.name, "bias"))?;
                let features = c * h * w;
                let mut out = Vec::with_capacity(n * units);
                for _ in 0..n {
                    out.extend_from_slice(bias.data());
                }
                gemm_nt(n, features, units, x.data(), weight.data(), &mut out);
                Ok(LayerOut::plain(Tensor::new(vec![n, units, 1, 1], out)?))
            }
            LayerKind::ResidualAdd => {
                let mut acc = x.clone();
                for other in &ins[1..] {
                    acc.add_assign(other)?;
                }
                Ok(LayerOut::plain(acc))
            }
            LayerKind::GlobalAvgPool => {
                let hw = h * w;
                let out: Vec<f32> = x
                    .data()
                    .chunks(hw)
                    .map(|plane| plane.iter().sum::<f32>() / hw as f32)
                    .collect();
                Ok(LayerOut::plain(Tensor::new(vec![n, c, 1, 1], out)?))
            }
            LayerKind::Flatten => Ok(LayerOut::plain(x.clone().reshape(&[n, c * h * w, 1, 1])?)),
            LayerKind::SoftmaxXent => Ok(LayerOut::plain(x.clone())),
            LayerKind::Projection { rank, folded } => {
                let s1 = self.param(&param_key(&layer.name, "s1"))?;
                let hw = h * w;
                let mut y = vec![0.0f32; n * rank * hw];
                for b in 0..n {
                    gemm_nn(rank, c, hw, s1.data(), x.item(b), &mut y[b * rank * hw..(b + 1) * rank * hw]);
                }
                let y = Tensor::new(vec![n, rank, h, w], y)?;
                if folded {
                    return Ok(LayerOut::plain(y));
                }
                let s2 = self.param(&param_key(&layer.name, "s2"))?;
                let mut z = vec![0.0f32; n * c * hw];
                for b in 0..n {
                    gemm_nn(c, rank, hw, s2.data(), y.item(b), &mut z[b * c * hw..(b + 1) * c * hw]);
                }
                Ok(LayerOut {
                    value: Tensor::new(vec![n, c, h, w], z)?,
                    argmax: None,
                    bottleneck: Some(y),
                })
            }
        }
    }

    /// Gradients of `sum(loss_grad * logits)` for every trainable parameter.
    pub fn backward(&self, cache: &ForwardCache, loss_grad: &Tensor) -> Result<Gradients> {
        let graph = self.graph();
        if !cache.complete {
            return Err(Error::State("forward cache was not retained".into()));
        }
        if cache.fingerprint != fingerprint(graph) {
            return Err(Error::State("forward cache belongs to a different graph".into()));
        }
        let layers = graph.layers();
        let len = layers.len();
        let shapes = graph.shapes()?;
        let in_shapes = graph.input_shapes()?;
        let producers = graph.producer_indices();
        let n = cache.batch;
        let out_len: usize = shapes[len - 1].iter().product();
        if loss_grad.shape() != [n, out_len] {
            return Err(Error::Dimension(format!(
                "loss gradient shape {:?}, logits are [{n}, {out_len}]",
                loss_grad.shape()
            )));
        }

        let trainable = |layer: &str, slot: &str| {
            self.params()
                .get(&param_key(layer, slot))
                .is_some_and(|p| p.trainable)
        };
        let mut requires = vec![false; len];
        for i in 0..len {
            let own = self
                .params()
                .iter()
                .any(|(k, p)| p.trainable && k.rsplit_once('.').is_some_and(|(l, _)| l == layers[i].name));
            requires[i] = own || producers[i].iter().flatten().any(|&p| requires[p]);
        }

        let mut grads = Gradients::new();
        for (k, p) in self.params() {
            if p.trainable {
                grads.insert(k.clone(), Tensor::zeros(p.value.shape()));
            }
        }
        let mut flow: Vec<Option<Tensor>> = vec![None; len];
        let [lc, lh, lw] = shapes[len - 1];
        flow[len - 1] = Some(loss_grad.clone().reshape(&[n, lc, lh, lw])?);

        let cached = |p: Option<usize>| -> Result<&Tensor> {
            match p {
                None => cache.input.as_ref(),
                Some(j) => cache.outputs.get(j).and_then(Option::as_ref),
            }
            .ok_or_else(|| Error::State("forward cache is missing a required tensor".into()))
        };

        for i in (0..len).rev() {
            if !requires[i] {
                continue;
            }
            let Some(g) = flow[i].take() else { continue };
            let layer = &layers[i];
            let src = producers[i][0];
            let need_in = src.is_some_and(|p| requires[p]);
            let [c, h, w] = in_shapes[i];
            let mut to_input: Option<Tensor> = None;
            match layer.kind {
                LayerKind::Conv2d { stride, pad, .. } => {
                    let need_w = trainable(&layer.name, "weight") || trainable(&layer.name, "bias");
                    let weight = self.param(&param_key(&layer.name, "weight"))?;
                    let x = cached(src)?;
                    let parts = conv2d_backward_parts(&g, x, weight, stride, pad, need_in, need_w)?;
                    if need_w {
                        accumulate(&mut grads, &layer.name, "weight", parts.grad_w);
                        accumulate(&mut grads, &layer.name, "bias", parts.grad_bias);
                    }
                    to_input = parts.grad_x;
                }
                LayerKind::ReLU => {
                    let out = cached(Some(i))?;
                    let data = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &o)| if o > 0.0 { gv } else { 0.0 })
                        .collect();
                    to_input = Some(Tensor::new(g.shape().to_vec(), data)?);
                }
                LayerKind::MaxPool { .. } => {
                    if need_in {
                        let idx = cache.argmax[i]
                            .as_ref()
                            .ok_or_else(|| Error::State("missing pooling indices".into()))?;
                        let item = c * h * w;
                        let out_item = g.len() / n;
                        let mut gx = vec![0.0f32; n * item];
                        for b in 0..n {
                            for o in 0..out_item {
                                gx[b * item + idx[b * out_item + o] as usize] += g.data()[b * out_item + o];
                            }
                        }
                        to_input = Some(Tensor::new(vec![n, c, h, w], gx)?);
                    }
                }
                LayerKind::Dense { units } => {
                    let features = c * h * w;
                    if trainable(&layer.name, "weight") || trainable(&layer.name, "bias") {
                        let x = cached(src)?;
                        let mut gw = vec![0.0f32; units * features];
                        gemm_tn(units, n, features, g.data(), x.data(), &mut gw);
                        let mut gb = vec![0.0f32; units];
                        for b in 0..n {
                            for (u, v) in gb.iter_mut().enumerate() {
                                *v += g.data()[b * units + u];
                            }
                        }
                        accumulate(&mut grads, &layer.name, "weight", Some(Tensor::new(vec![units, features], gw)?));
                        accumulate(&mut grads, &layer.name, "bias", Some(Tensor::new(vec![units], gb)?));
                    }
                    if need_in {
                        let weight = self.param(&param_key(&layer.name, "weight"))?;
                        let mut gx = vec![0.0f32; n * features];
                        gemm_nn(n, units, features, g.data(), weight.data(), &mut gx);
                        to_input = Some(Tensor::new(vec![n, c, h, w], gx)?);
                    }
                }
                LayerKind::ResidualAdd => {
                    for p in producers[i].iter().flatten() {
                        if requires[*p] {
                            push_flow(&mut flow, *p, g.clone())?;
                        }
                    }
                }
                LayerKind::GlobalAvgPool => {
                    if need_in {
                        let hw = h * w;
                        let mut gx = Vec::with_capacity(n * c * hw);
                        for &v in g.data() {
                            gx.extend(std::iter::repeat_n(v / hw as f32, hw));
                        }
                        to_input = Some(Tensor::new(vec![n, c, h, w], gx)?);
                    }
                }
                LayerKind::Flatten | LayerKind::SoftmaxXent => {
                    to_input = Some(g.reshape(&[n, c, h, w])?);
                }
                LayerKind::Projection { rank, folded } => {
                    let hw = h * w;
                    let x = cached(src)?;
                    let s1 = self.param(&param_key(&layer.name, "s1"))?;
                    let gy = if folded {
                        g
                    } else {
                        let s2 = self.param(&param_key(&layer.name, "s2"))?;
                        let y = cache.bottleneck[i]
                            .as_ref()
                            .ok_or_else(|| Error::State("missing projection bottleneck".into()))?;
                        let mut gs2 = vec![0.0f32; c * rank];
                        let mut gy = vec![0.0f32; n * rank * hw];
                        for b in 0..n {
                            gemm_nt(c, hw, rank, g.item(b), y.item(b), &mut gs2);
                            gemm_tn(rank, c, hw, s2.data(), g.item(b), &mut gy[b * rank * hw..(b + 1) * rank * hw]);
                        }
                        if trainable(&layer.name, "s2") {
                            accumulate(&mut grads, &layer.name, "s2", Some(Tensor::new(vec![c, rank], gs2)?));
                        }
                        Tensor::new(vec![n, rank, h, w], gy)?
                    };
                    if trainable(&layer.name, "s1") {
                        let mut gs1 = vec![0.0f32; rank * c];
                        for b in 0..n {
                            gemm_nt(rank, hw, c, gy.item(b), x.item(b), &mut gs1);
                        }
                        accumulate(&mut grads, &layer.name, "s1", Some(Tensor::new(vec![rank, c], gs1)?));
                    }
                    if need_in {
                        let mut gx = vec![0.0f32; n * c * hw];
                        for b in 0..n {
                            gemm_tn(c, rank, hw, s1.data(), gy.item(b), &mut gx[b * c * hw..(b + 1) * c * hw]);
                        }
                        to_input = Some(Tensor::new(vec![n, c, h, w], gx)?);
                    }
                }
            }
            if let (Some(p), Some(t)) = (src, to_input) {
                if requires[p] && layer.kind != LayerKind::ResidualAdd {
                    push_flow(&mut flow, p, t)?;
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut Gradients, layer: &str, slot: &str, value: Option<Tensor>) {
    if let (Some(acc), Some(v)) = (grads.get_mut(&param_key(layer, slot)), value) {
        for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
            *a += b;
        }
    }
}

fn push_flow(flow: &mut [Option<Tensor>], at: usize, value: Tensor) -> Result<()> {
    match flow[at].as_mut() {
        Some(existing) => existing.add_assign(&value),
        None => {
            flow[at] = Some(value);
            Ok(())
        }
    }
}

fn maxpool2x2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Dimension(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        let item = x.item(b);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let at = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if item[at] > item[best] {
                            best = at;
                        }
                    }
                    out.push(item[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, idx))
}
