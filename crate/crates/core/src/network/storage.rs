//! Which activations are materialised in memory and which stay inside a
//! fused operator group.
//!
//! Fusable single-consumer edges: Conv/Dense -> ReLU, Conv -> ResidualAdd,
//! ResidualAdd -> ReLU, ReLU -> 2x2 MaxPool, and any activation -> its
//! Projection. Flatten is a view and produces no record of its own. A tensor
//! read by more than one layer is always stored.

use super::graph::{Graph, LayerKind, Shape3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageClass {
    Stored,
    Fused,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationRecord {
    /// Site identifier: the first layer of the fused group that produces
    /// this tensor.
    pub site: String,
    /// Layer whose output this record describes.
    pub producer: String,
    /// Channels, height, width. For a projection this is the compressed
    /// `rank x m x n` tensor that is actually held in memory.
    pub shape: Shape3,
    pub storage_class: StorageClass,
    /// Produced by a Dense layer group (classifier head).
    pub head: bool,
}

impl ActivationRecord {
    pub fn elements(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    pub fn spatial(&self) -> u64 {
        (self.shape[1] * self.shape[2]) as u64
    }
}

fn fusable(producer: &LayerKind, consumer: &LayerKind) -> bool {
    use LayerKind::*;
    match (producer, consumer) {
        (_, Projection { .. }) => !matches!(producer, Projection { .. }),
        (Conv2d { .. } | Dense { .. } | ResidualAdd, ReLU) => true,
        (Conv2d { .. }, ResidualAdd) => true,
        (ReLU, c) => c.is_standard_pool(),
        _ => false,
    }
}

/// Storage record for every tensor-producing layer, in graph order.
pub fn classify_storage(graph: &Graph) -> Vec<ActivationRecord> {
    let layers = graph.layers();
    let shapes = graph.shapes().expect("graph was shape-checked on construction");
    let consumers = graph.consumers();
    let producers = graph.producer_indices();
    let n = layers.len();

    // Readers of a tensor, looking through Flatten views.
    fn readers(i: usize, layers: &[super::graph::Layer], consumers: &[Vec<usize>], out: &mut Vec<usize>) {
        for &c in &consumers[i] {
            if layers[c].kind == LayerKind::Flatten {
                readers(c, layers, consumers, out);
            } else {
                out.push(c);
            }
        }
    }

    let mut fused = vec![false; n];
    for i in 0..n {
        let mut r = Vec::new();
        readers(i, layers, &consumers, &mut r);
        if let [only] = r[..] {
            // A Flatten between the two breaks fusion except for projections,
            // which never sit behind a Flatten.
            fused[i] = consumers[i] == [only] && fusable(&layers[i].kind, &layers[only].kind);
        }
    }

    // Site of each layer: inherited from the first fused producer.
    let mut site: Vec<usize> = (0..n).collect();
    for i in 0..n {
        if let Some(p) = producers[i].iter().flatten().find(|&&p| fused[p]) {
            site[i] = site[*p];
        }
    }

    let mut records = Vec::new();
    for i in 0..n {
        if matches!(layers[i].kind, LayerKind::Flatten | LayerKind::SoftmaxXent) {
            continue;
        }
        let shape = match layers[i].kind {
            LayerKind::Projection { rank, .. } => [rank, shapes[i][1], shapes[i][2]],
            _ => shapes[i],
        };
        let head_layer = &layers[site[i]];
        records.push(ActivationRecord {
            site: head_layer.name.clone(),
            producer: layers[i].name.clone(),
            shape,
            storage_class: if fused[i] {
                StorageClass::Fused
            } else {
                StorageClass::Stored
            },
            head: matches!(head_layer.kind, LayerKind::Dense { .. }),
        });
    }
    records
}

/// Stored records only.
pub fn stored_records(graph: &Graph) -> Vec<ActivationRecord> {
    classify_storage(graph)
        .into_iter()
        .filter(|r| r.storage_class == StorageClass::Stored)
        .collect()
}
