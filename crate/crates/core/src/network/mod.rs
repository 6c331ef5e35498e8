//! CNN layer graphs with parameters, execution and storage analysis.

pub mod catalog;
mod exec;
mod graph;
mod loss;
mod storage;

pub use exec::{ForwardCache, Gradients};
pub use graph::{parse_shape3, Graph, Layer, LayerKind, Shape3, INPUT};
pub use loss::softmax_xent;
pub use storage::{classify_storage, stored_records, ActivationRecord, StorageClass};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Parameters keyed `<layer>.<slot>`; slots are `weight`, `bias` for
/// convolutions and dense layers and `s1`, `s2` for projections.
pub type ParamStore = BTreeMap<String, Param>;

pub fn param_key(layer: &str, slot: &str) -> String {
    format!("{layer}.{slot}")
}

/// Expected parameter tensors of one layer given its input shape.
pub fn param_shapes(kind: &LayerKind, input: Shape3) -> Vec<(&'static str, Vec<usize>)> {
    let c = input[0];
    match *kind {
        LayerKind::Conv2d {
            out_channels,
            kernel,
            groups,
            ..
        } => vec![
            ("weight", vec![out_channels, c / groups, kernel, kernel]),
            ("bias", vec![out_channels]),
        ],
        LayerKind::Dense { units } => vec![
            ("weight", vec![units, input.iter().product()]),
            ("bias", vec![units]),
        ],
        LayerKind::Projection { rank, folded } => {
            let mut v = vec![("s1", vec![rank, c])];
            if !folded {
                v.push(("s2", vec![c, rank]));
            }
            v
        }
        _ => Vec::new(),
    }
}

/// Parameter elements implied by a graph's layer shapes.
pub fn param_count(graph: &Graph) -> Result<u64> {
    let inputs = graph.input_shapes()?;
    Ok(graph
        .layers()
        .iter()
        .zip(inputs)
        .flat_map(|(l, s)| param_shapes(&l.kind, s))
        .map(|(_, shape)| shape.iter().product::<usize>() as u64)
        .sum())
}

/// A graph together with its parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    graph: Graph,
    params: ParamStore,
}

impl Network {
    /// Binds parameters to a graph, checking that every expected tensor is
    /// present with the right shape and nothing else is.
    pub fn new(graph: Graph, params: ParamStore) -> Result<Self> {
        let inputs = graph.input_shapes()?;
        let mut expected = 0usize;
        for (layer, input) in graph.layers().iter().zip(inputs) {
            for (slot, shape) in param_shapes(&layer.kind, input) {
                expected += 1;
                let key = param_key(&layer.name, slot);
                match params.get(&key) {
                    Some(p) if p.value.shape() == shape.as_slice() => {}
                    Some(p) => {
                        return Err(Error::Dimension(format!(
                            "parameter {key} has shape {:?}, layer expects {shape:?}",
                            p.value.shape()
                        )))
                    }
                    None => return Err(Error::Config(format!("missing parameter {key}"))),
                }
            }
        }
        if expected != params.len() {
            return Err(Error::Config(format!(
                "parameter store has {} tensors, graph expects {expected}",
                params.len()
            )));
        }
        Ok(Network { graph, params })
    }

    /// He-normal weights, zero biases, identity-like projections; all
    /// trainable.
    pub fn init(graph: Graph, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = graph.input_shapes()?;
        let mut params = ParamStore::new();
        for (layer, input) in graph.layers().iter().zip(inputs) {
            for (slot, shape) in param_shapes(&layer.kind, input) {
                let value = match slot {
                    "weight" => {
                        let fan_in: usize = shape[1..].iter().product();
                        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
                            .expect("positive std");
                        Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
                    }
                    "s1" => Tensor::from_fn(&shape, |i| {
                        (i / shape[1] == i % shape[1]) as u8 as f32
                    }),
                    "s2" => Tensor::from_fn(&shape, |i| {
                        (i / shape[1] == i % shape[1]) as u8 as f32
                    }),
                    _ => Tensor::zeros(&shape),
                };
                params.insert(
                    param_key(&layer.name, slot),
                    Param {
                        value,
                        trainable: true,
                    },
                );
            }
        }
        Network::new(graph, params)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn param(&self, key: &str) -> Result<&Tensor> {
        self.params
            .get(key)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Lookup(format!("no parameter {key}")))
    }

    pub fn into_parts(self) -> (Graph, ParamStore) {
        (self.graph, self.params)
    }

    /// Replaces a parameter value, keeping its shape and flag.
    pub fn set_param(&mut self, key: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(key)
            .ok_or_else(|| Error::Lookup(format!("no parameter {key}")))?;
        value.check_same_shape(&p.value)?;
        p.value = value;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Freezes every base parameter; only projection matrices train.
    pub fn freeze_base(&mut self) {
        let proj: Vec<String> = self
            .graph
            .layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Projection { .. }))
            .map(|l| l.name.clone())
            .collect();
        for (key, p) in self.params.iter_mut() {
            let layer = key.rsplit_once('.').map_or(key.as_str(), |(l, _)| l);
            p.trainable = proj.iter().any(|n| n == layer);
        }
    }

    pub fn trainable_keys(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Total parameter elements held by this network.
    pub fn param_elements(&self) -> u64 {
        self.params.values().map(|p| p.value.len() as u64).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.graph
            .output_shape()
            .map(|s| s.iter().product())
            .unwrap_or(0)
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_binds_expected_params() {
        let g = Graph::parse("input 1x4x4\nconv c out=2 k=3 p=1\nrelu r\nproj q rank=1\nflatten f\ndense d units=3\n")
            .unwrap();
        let net = Network::init(g, 0).unwrap();
        let keys: Vec<_> = net.params().keys().cloned().collect();
        assert_eq!(keys, vec!["c.bias", "c.weight", "d.bias", "d.weight", "q.s1", "q.s2"]);
        assert_eq!(net.param("d.weight").unwrap().shape(), &[3, 32]);
        assert_eq!(net.param_elements(), 2 + 18 + 3 + 96 + 2 + 2);
    }

    #[test]
    fn new_rejects_wrong_shape_and_extras() {
        let g = Graph::parse("input 1x4x4\nconv c out=2 k=1\n").unwrap();
        let mut params = Network::init(g.clone(), 0).unwrap().into_parts().1;
        params.get_mut("c.weight").unwrap().value = Tensor::zeros(&[2, 1, 3, 3]);
        assert!(matches!(Network::new(g.clone(), params), Err(Error::Dimension(_))));
        let mut params = Network::init(g.clone(), 0).unwrap().into_parts().1;
        params.insert(
            "zz.weight".into(),
            Param {
                value: Tensor::zeros(&[1]),
                trainable: true,
            },
        );
        assert!(matches!(Network::new(g, params), Err(Error::Config(_))));
    }

    #[test]
    fn freeze_base_leaves_projection_trainable() {
        let g = Graph::parse("input 2x4x4\nrelu r\nproj q rank=1\nconv c out=2 k=1\n").unwrap();
        let mut net = Network::init(g, 0).unwrap();
        net.freeze_base();
        assert_eq!(net.trainable_keys(), vec!["q.s1", "q.s2"]);
    }
}
