//! Learnable channel projections: initialisation, insertion into a network
//! and folding of the lift into the following convolution.
//!
//! A pair `(S1, S2)` at a site replaces the stored map `x` (`c` channels)
//! by `y = S1 x` (`k` channels). The next layer sees `S2 y`. For a
//! convolution consumer, `S2` is a 1x1 convolution that can be absorbed
//! into the kernel, leaving `S1` as the only extra storage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::network::{
    param_key, stored_records, Graph, Layer, LayerKind, Network, Param,
};
use crate::tensor::{matmul, reshape_fm, truncated_svd, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    /// Site (fused-group name) of the stored activation being compressed.
    pub site: String,
    /// `[k, c]` compression.
    pub s1: Tensor,
    /// `[c, k]` lift.
    pub s2: Tensor,
}

impl ProjectionPair {
    pub fn new(site: impl Into<String>, s1: Tensor, s2: Tensor) -> Result<Self> {
        let (k, c) = s1.dims2()?;
        if s2.shape() != [c, k] {
            return Err(Error::Dimension(format!(
                "lift shape {:?} does not transpose projection shape [{k}, {c}]",
                s2.shape()
            )));
        }
        check_rank(k, c)?;
        Ok(ProjectionPair {
            site: site.into(),
            s1,
            s2,
        })
    }

    pub fn rank(&self) -> usize {
        self.s1.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.s1.shape()[1]
    }

    /// Name of the projection layer this pair occupies in a network.
    pub fn layer_name(&self) -> String {
        projection_layer_name(&self.site)
    }
}

pub fn projection_layer_name(site: &str) -> String {
    format!("proj_{site}")
}

fn check_rank(k: usize, c: usize) -> Result<()> {
    if k == 0 || k >= c {
        return Err(Error::Parameter(format!(
            "rank {k} must lie in [1, {c}) for {c} channels"
        )));
    }
    Ok(())
}

/// Reshapes a `[c_o, c, p, p]` kernel to the `[p*p*c_o, c]` matrix whose
/// product with a reshaped input map gives the convolution's im2col terms.
pub fn weight_matrix(w: &Tensor) -> Result<Tensor> {
    let (c_o, c, kh, kw) = w.dims4()?;
    let taps = kh * kw;
    let mut out = vec![0.0f32; c_o * taps * c];
    for o in 0..c_o {
        for ch in 0..c {
            for t in 0..taps {
                out[(o * taps + t) * c + ch] = w.data()[(o * c + ch) * taps + t];
            }
        }
    }
    Tensor::new(vec![c_o * taps, c], out)
}

/// `S1 = V_k^T`, `S2 = V_k` from the truncated SVD of the next layer's
/// reshaped kernel: the rank-`k` factorisation minimising the Frobenius
/// error of `w_hat * S2 * S1`.
pub fn svd_init(site: &str, w_next: &Tensor, k: usize) -> Result<ProjectionPair> {
    svd_init_matrix(site, &weight_matrix(w_next)?, k)
}

/// [`svd_init`] on an already reshaped `[rows, c]` matrix.
pub fn svd_init_matrix(site: &str, w_hat: &Tensor, k: usize) -> Result<ProjectionPair> {
    let (rows, c) = w_hat.dims2()?;
    check_rank(k, c)?;
    let v = if rows >= k {
        truncated_svd(w_hat, k)?.v
    } else {
        // Zero rows leave the leading directions unchanged and let the
        // decomposition complete the basis.
        let mut padded = w_hat.data().to_vec();
        padded.resize(k * c, 0.0);
        truncated_svd(&Tensor::new(vec![k, c], padded)?, k)?.v
    };
    ProjectionPair::new(site, v.transpose2()?, v)
}

/// Top-`k` eigenvectors of the uncentred channel second-moment matrix of
/// the sample maps: the rank-`k` projector minimising mean reconstruction
/// error of the samples.
pub fn pca_init(site: &str, sample_maps: &[Tensor], k: usize) -> Result<ProjectionPair> {
    let first = sample_maps
        .first()
        .ok_or_else(|| Error::Parameter("PCA initialisation needs at least one sample".into()))?;
    let c = first.shape()[0];
    check_rank(k, c)?;
    let mut moment = vec![0.0f64; c * c];
    for x in sample_maps {
        if x.rank() != 3 || x.shape()[0] != c {
            return Err(Error::Dimension(format!(
                "sample shape {:?} is not a {c}-channel map",
                x.shape()
            )));
        }
        let xm = reshape_fm(x)?;
        let cols = xm.shape()[1];
        let d = xm.data();
        for i in 0..c {
            for j in i..c {
                let s: f64 = (0..cols)
                    .map(|t| f64::from(d[i * cols + t]) * f64::from(d[j * cols + t]))
                    .sum();
                moment[i * c + j] += s;
                if i != j {
                    moment[j * c + i] += s;
                }
            }
        }
    }
    let scale = moment.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let m = Tensor::new(vec![c, c], moment.iter().map(|v| (v / scale) as f32).collect())?;
    let u = truncated_svd(&m, k)?.u;
    ProjectionPair::new(site, u.transpose2()?, u)
}

/// Random orthonormal `S2` (Gram-Schmidt on Gaussian columns), `S1 = S2^T`.
pub fn random_init(site: &str, c: usize, k: usize, seed: u64) -> Result<ProjectionPair> {
    check_rank(k, c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for q in &cols {
                let p: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let s2 = Tensor::from_fn(&[c, k], |i| cols[i % k][i / k] as f32);
    ProjectionPair::new(site, s2.transpose2()?, s2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    Svd,
    Pca,
    Random,
}

impl std::str::FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svd" => Ok(InitMethod::Svd),
            "pca" => Ok(InitMethod::Pca),
            "random" => Ok(InitMethod::Random),
            other => Err(Error::Parameter(format!(
                "unknown init '{other}' (svd|pca|random)"
            ))),
        }
    }
}

/// The stored activation a projection at `site` would compress.
#[derive(Debug, Clone)]
pub struct SiteInfo {
    pub site: String,
    pub producer: String,
    pub producer_index: usize,
    /// Channels, height, width of the uncompressed map.
    pub shape: [usize; 3],
}

/// Resolves `site` to its stored activation, checking it can take a
/// projection.
pub fn locate_site(graph: &Graph, site: &str) -> Result<SiteInfo> {
    let record = stored_records(graph)
        .into_iter()
        .find(|r| r.site == site)
        .ok_or_else(|| Error::Config(format!("no stored activation at site '{site}'")))?;
    let index = graph.index_of(&record.producer).expect("record producer exists");
    let layer = &graph.layers()[index];
    match layer.kind {
        LayerKind::Projection { .. } => {
            return Err(Error::Config(format!("site '{site}' already has a projection")))
        }
        LayerKind::ReLU | LayerKind::MaxPool { .. } | LayerKind::ResidualAdd => {}
        _ => {
            return Err(Error::Config(format!(
                "site '{site}' ends in {}, projections attach after an activation",
                layer.name
            )))
        }
    }
    if record.head {
        return Err(Error::Config(format!(
            "site '{site}' is a classifier-head activation"
        )));
    }
    Ok(SiteInfo {
        site: site.to_string(),
        producer: record.producer,
        producer_index: index,
        shape: record.shape,
    })
}

/// Row-stacked `[rows, c]` matrix of every consumer of the map at `site`:
/// reshaped kernels for convolutions, per-pixel slices of dense weights,
/// and an identity block for pass-through consumers such as residual adds.
pub fn consumer_matrix(net: &Network, site: &str) -> Result<Tensor> {
    let info = locate_site(net.graph(), site)?;
    let [c, h, w] = info.shape;
    let hw = h * w;
    let mut rows: Vec<f32> = Vec::new();
    for i in net.graph().readers(info.producer_index) {
        let layer = &net.graph().layers()[i];
        match layer.kind {
            LayerKind::Conv2d { groups: 1, .. } => {
                rows.extend_from_slice(weight_matrix(net.param(&param_key(&layer.name, "weight"))?)?.data());
            }
            LayerKind::Dense { units } => {
                let wd = net.param(&param_key(&layer.name, "weight"))?.data();
                for u in 0..units {
                    for pix in 0..hw {
                        rows.extend((0..c).map(|ch| wd[u * c * hw + ch * hw + pix]));
                    }
                }
            }
            _ => rows.extend_from_slice(Tensor::identity(c).data()),
        }
    }
    let n = rows.len() / c;
    Tensor::new(vec![n, c], rows)
}

/// Builds an initial pair for `site` using the chosen method. PCA needs
/// `calibration` input batches.
pub fn init_pair(
    net: &Network,
    site: &str,
    k: usize,
    method: InitMethod,
    calibration: Option<&Tensor>,
    seed: u64,
) -> Result<ProjectionPair> {
    let info = locate_site(net.graph(), site)?;
    match method {
        InitMethod::Svd => svd_init_matrix(site, &consumer_matrix(net, site)?, k),
        InitMethod::Random => random_init(site, info.shape[0], k, seed),
        InitMethod::Pca => {
            let batch = calibration
                .ok_or_else(|| Error::Parameter("PCA initialisation needs calibration data".into()))?;
            let maps = net.activation(batch, &info.producer)?;
            let [c, h, w] = info.shape;
            let samples: Vec<Tensor> = (0..maps.shape()[0])
                .map(|b| Tensor::new(vec![c, h, w], maps.item(b).to_vec()))
                .collect::<Result<_>>()?;
            pca_init(site, &samples, k)
        }
    }
}

/// Inserts `pair` after the stored activation at its site. The new
/// matrices are trainable; every other parameter keeps its value and flag.
pub fn insert_projection(net: &Network, pair: &ProjectionPair) -> Result<Network> {
    let info = locate_site(net.graph(), &pair.site)?;
    if info.shape[0] != pair.channels() {
        return Err(Error::Dimension(format!(
            "site '{}' has {} channels, projection expects {}",
            pair.site,
            info.shape[0],
            pair.channels()
        )));
    }
    let name = pair.layer_name();
    if net.graph().layer(&name).is_some() {
        return Err(Error::Config(format!("layer name {name} already in use")));
    }
    let graph = net.graph();
    let mut layers: Vec<Layer> = graph.layers().to_vec();
    for layer in layers.iter_mut() {
        for input in layer.inputs.iter_mut() {
            if *input == info.producer {
                *input = name.clone();
            }
        }
    }
    layers.insert(
        info.producer_index + 1,
        Layer {
            name: name.clone(),
            kind: LayerKind::Projection {
                rank: pair.rank(),
                folded: false,
            },
            inputs: vec![info.producer.clone()],
        },
    );
    let new_graph = Graph::new(graph.name(), graph.input_shape(), graph.declared_params(), layers)?;
    let mut params = net.params().clone();
    for (slot, value) in [("s1", &pair.s1), ("s2", &pair.s2)] {
        params.insert(
            param_key(&name, slot),
            Param {
                value: value.clone(),
                trainable: true,
            },
        );
    }
    Network::new(new_graph, params)
}

/// Removes the (unfolded) projection at `site`, returning the restored
/// network and the pair that was there.
pub fn remove_projection(net: &Network, site: &str) -> Result<(Network, ProjectionPair)> {
    let name = projection_layer_name(site);
    let graph = net.graph();
    let index = graph
        .index_of(&name)
        .ok_or_else(|| Error::Config(format!("no projection at site '{site}'")))?;
    let layer = &graph.layers()[index];
    if matches!(layer.kind, LayerKind::Projection { folded: true, .. }) {
        return Err(Error::Config(format!("projection at '{site}' is folded")));
    }
    let producer = layer.inputs[0].clone();
    let mut layers = graph.layers().to_vec();
    layers.remove(index);
    for l in layers.iter_mut() {
        for input in l.inputs.iter_mut() {
            if *input == name {
                *input = producer.clone();
            }
        }
    }
    let mut params = net.params().clone();
    let s1 = params.remove(&param_key(&name, "s1")).expect("projection has s1").value;
    let s2 = params.remove(&param_key(&name, "s2")).expect("projection has s2").value;
    let restored = Network::new(
        Graph::new(graph.name(), graph.input_shape(), graph.declared_params(), layers)?,
        params,
    )?;
    Ok((restored, ProjectionPair::new(site, s1, s2)?))
}

/// Folded kernel `w_tilde = w * S2` plus the storage accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    /// `[c_o, k, p, p]`.
    pub w_tilde: Tensor,
    pub s1_kept: Tensor,
    /// `k*(p^2*c_o + c) - p^2*c_o*c`: elements of `w_tilde` and `S1` minus
    /// elements of the original kernel.
    pub param_delta: i64,
}

/// Absorbs the 1x1 lift into the next convolution:
/// `w_tilde[o, j] = sum_c w_next[o, c] * s2[c, j]` per kernel tap.
pub fn fold_lift(w_next: &Tensor, pair: &ProjectionPair) -> Result<FoldResult> {
    let (c_o, c, kh, kw) = w_next.dims4()?;
    if pair.channels() != c {
        return Err(Error::Dimension(format!(
            "lift has {} rows, kernel expects {c} input channels",
            pair.channels()
        )));
    }
    let k = pair.rank();
    let taps = kh * kw;
    let s2 = pair.s2.data();
    let w = w_next.data();
    let mut out = vec![0.0f32; c_o * k * taps];
    for o in 0..c_o {
        for ch in 0..c {
            let src = &w[(o * c + ch) * taps..(o * c + ch + 1) * taps];
            for j in 0..k {
                let coef = s2[ch * k + j];
                let dst = &mut out[(o * k + j) * taps..(o * k + j + 1) * taps];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += coef * s;
                }
            }
        }
    }
    let p2co = (taps * c_o) as i64;
    Ok(FoldResult {
        w_tilde: Tensor::new(vec![c_o, k, kh, kw], out)?,
        s1_kept: pair.s1.clone(),
        param_delta: k as i64 * (p2co + c as i64) - p2co * c as i64,
    })
}

/// `k * (p^2*c_o + c_i) < p^2*c_o*c_i`: folded kernel plus `S1` is smaller
/// than the original kernel.
pub fn overhead_check(p: u64, c_o: u64, c_i: u64, k: u64) -> bool {
    let (p, c_o, c_i, k) = (p as u128, c_o as u128, c_i as u128, k as u128);
    k * (p * p * c_o + c_i) < p * p * c_o * c_i
}

/// Per-site outcome of [`fold_network`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldReport {
    pub site: String,
    /// Consumers whose kernels absorbed the lift; empty for an explicit lift.
    pub folded_into: Vec<String>,
    pub param_delta: i64,
    /// Every folded consumer passes [`overhead_check`].
    pub within_bound: bool,
}

/// Folds every projection whose consumers are all ungrouped convolutions.
/// Other projections keep `S2` as an explicit lift when
/// `allow_explicit_lift`, otherwise folding fails.
pub fn fold_network(net: &Network, allow_explicit_lift: bool) -> Result<(Network, Vec<FoldReport>)> {
    let graph = net.graph();
    let consumers = graph.consumers();
    let mut layers = graph.layers().to_vec();
    let mut params = net.params().clone();
    let mut reports = Vec::new();
    for (i, layer) in graph.layers().iter().enumerate() {
        let LayerKind::Projection { rank, folded: false } = layer.kind else {
            continue;
        };
        let site = layer.name.strip_prefix("proj_").unwrap_or(&layer.name).to_string();
        let foldable = !consumers[i].is_empty()
            && consumers[i]
                .iter()
                .all(|&j| matches!(graph.layers()[j].kind, LayerKind::Conv2d { groups: 1, .. }));
        let s1 = net.param(&param_key(&layer.name, "s1"))?.clone();
        let s2 = net.param(&param_key(&layer.name, "s2"))?.clone();
        let c = s1.shape()[1];
        if !foldable {
            if !allow_explicit_lift {
                return Err(Error::Config(format!(
                    "site '{site}' feeds a layer that cannot absorb the lift; allow an explicit lift to keep S2"
                )));
            }
            reports.push(FoldReport {
                site,
                folded_into: Vec::new(),
                param_delta: (2 * rank * c) as i64,
                within_bound: false,
            });
            continue;
        }
        let pair = ProjectionPair::new(site.clone(), s1, s2)?;
        let mut delta = (rank * c) as i64;
        let mut within = true;
        let mut into = Vec::new();
        for &j in &consumers[i] {
            let cname = &graph.layers()[j].name;
            let key = param_key(cname, "weight");
            let w = net.param(&key)?;
            let (c_o, _, kh, _) = w.dims4()?;
            let fold = fold_lift(w, &pair)?;
            within &= overhead_check(kh as u64, c_o as u64, c as u64, rank as u64);
            delta += fold.param_delta - (rank * c) as i64;
            let trainable = params[&key].trainable;
            params.insert(
                key,
                Param {
                    value: fold.w_tilde,
                    trainable,
                },
            );
            into.push(cname.clone());
        }
        params.remove(&param_key(&layer.name, "s2"));
        layers[i].kind = LayerKind::Projection { rank, folded: true };
        reports.push(FoldReport {
            site,
            folded_into: into,
            param_delta: delta,
            within_bound: within,
        });
    }
    let folded = Network::new(
        Graph::new(graph.name(), graph.input_shape(), graph.declared_params(), layers)?,
        params,
    )?;
    Ok((folded, reports))
}

/// `w_hat * S2 * S1`, the effective low-rank kernel matrix.
pub fn effective_matrix(w_hat: &Tensor, pair: &ProjectionPair) -> Result<Tensor> {
    matmul(&matmul(w_hat, &pair.s2)?, &pair.s1)
}
