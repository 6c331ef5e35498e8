//! Built-in architecture descriptions.

use super::graph::Graph;
use crate::error::{Error, Result};

const ENTRIES: &[(&str, &str)] = &[
    ("vgg16", include_str!("../../catalog/vgg16.arch")),
    ("vgg19", include_str!("../../catalog/vgg19.arch")),
    ("resnet18", include_str!("../../catalog/resnet18.arch")),
    ("mobilenet_v2", include_str!("../../catalog/mobilenet_v2.arch")),
    ("mnist_convnet", include_str!("../../catalog/mnist_convnet.arch")),
    ("cifar_convnet", include_str!("../../catalog/cifar_convnet.arch")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    ENTRIES.iter().map(|(n, _)| *n)
}

/// Source text of a built-in architecture.
pub fn source(name: &str) -> Result<&'static str> {
    let key = name.to_ascii_lowercase().replace('-', "_");
    let key = match key.as_str() {
        "mobilenetv2" => "mobilenet_v2",
        other => other,
    };
    ENTRIES
        .iter()
        .find(|(n, _)| *n == key)
        .map(|(_, src)| *src)
        .ok_or_else(|| {
            Error::Lookup(format!(
                "unknown architecture '{name}' (built-in: {})",
                names().collect::<Vec<_>>().join(", ")
            ))
        })
}

/// Parses a built-in architecture.
pub fn load(name: &str) -> Result<Graph> {
    Graph::parse(source(name)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{param_count, stored_records};

    fn computed_params(g: &Graph) -> u64 {
        param_count(g).unwrap()
    }

    #[test]
    fn every_entry_parses() {
        for n in names() {
            let g = load(n).unwrap();
            assert_eq!(g.name(), n);
        }
        assert!(matches!(load("alexnet"), Err(Error::Lookup(_))));
        assert!(load("MobileNetV2").is_ok());
    }

    #[test]
    fn vgg_parameter_counts_match_declared() {
        for n in ["vgg16", "vgg19"] {
            let g = load(n).unwrap();
            assert_eq!(Some(computed_params(&g)), g.declared_params(), "{n}");
        }
    }

    #[test]
    fn resnet18_counts_without_batch_norm() {
        // Folding turns 9,600 batch-norm scale/shift values into 4,800
        // convolution biases.
        let g = load("resnet18").unwrap();
        assert_eq!(computed_params(&g), 11_689_512 - 9_600 + 4_800);
        assert_eq!(g.output_shape().unwrap(), [1000, 1, 1]);
    }

    #[test]
    fn largest_stored_maps() {
        let largest = |n: &str| {
            stored_records(&load(n).unwrap())
                .iter()
                .map(|r| r.elements())
                .max()
                .unwrap()
        };
        assert_eq!(largest("vgg16"), 3_211_264);
        assert_eq!(largest("resnet18"), 802_816);
        assert_eq!(largest("mobilenet_v2"), 1_204_224);
    }
}
