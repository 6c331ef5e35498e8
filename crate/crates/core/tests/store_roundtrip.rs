mod common;

use ceilcomp::network::{catalog, Network};
use ceilcomp::projection::{fold_lift, insert_projection, random_init, svd_init, ProjectionPair};
use ceilcomp::store::{self, export_folded, ModelFile};
use ceilcomp::tensor::Tensor;
use ceilcomp::trainer::Checkpoint;
use ceilcomp::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn compressed_cifar_net() -> Network {
    let net = Network::init(catalog::load("cifar_convnet").unwrap(), 1).unwrap();
    let pair = svd_init("conv1", &common::conv_weight(&net, "conv2"), 8).unwrap();
    insert_projection(&net, &pair).unwrap()
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut ckpt = Checkpoint::new(compressed_cifar_net(), 0.01, 0.9);
    ckpt.optimizer.velocity.insert("proj_conv1.s1".into(), Tensor::full(&[8, 32], -0.5));
    ckpt.val_accuracy = 0.1 + 0.2;
    let a = dir.path().join("a.ceil");
    let b = dir.path().join("b.ceil");
    store::save_checkpoint(&ckpt, &a).unwrap();
    let loaded = store::load_checkpoint(&a).unwrap();
    assert_eq!(loaded, ckpt);
    store::save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn folded_export_drops_lift_and_keeps_logits() {
    let dir = tempfile::tempdir().unwrap();
    let net = compressed_cifar_net();
    let path = dir.path().join("f.ceil");
    let ex = export_folded(&net, false, &path).unwrap();
    assert!(ex.sites.iter().all(|s| s.within_bound));
    assert!(ex.folded_elements < net.param_elements() - 32 * 8 * 2);
    let loaded = store::load(&path).unwrap();
    assert!(loaded.net.params().contains_key("proj_conv1.s1"));
    assert!(!loaded.net.params().contains_key("proj_conv1.s2"));
    assert_eq!(loaded.meta.get("folded").map(String::as_str), Some("true"));

    let x = common::random_tensor(&[2, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(2));
    let (a, _) = net.forward(&x, false).unwrap();
    let (b, _) = loaded.net.forward(&x, false).unwrap();
    assert!(a.sub(&b).unwrap().frobenius() <= 1e-5 * a.frobenius());
}

#[test]
fn export_without_projections_keeps_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::init(catalog::load("mnist_convnet").unwrap(), 0).unwrap();
    let ex = export_folded(&net, false, &dir.path().join("m.ceil")).unwrap();
    assert_eq!(ex.folded_elements, ex.unfolded_elements);
    store::save(&ModelFile::from_network(net.clone()), &dir.path().join("plain.ceil")).unwrap();
    assert_eq!(store::load(&dir.path().join("plain.ceil")).unwrap().param_elements(), ex.folded_elements);
}

#[test]
fn dense_consumer_needs_explicit_lift_flag() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::init(catalog::load("mnist_convnet").unwrap(), 0).unwrap();
    let with = insert_projection(&net, &random_init("conv3", 32, 4, 0).unwrap()).unwrap();
    assert!(matches!(export_folded(&with, false, &dir.path().join("x")), Err(Error::Config(_))));
    assert!(export_folded(&with, true, &dir.path().join("x")).is_ok());
}

#[test]
fn single_site_element_delta() {
    let w = Tensor::zeros(&[64, 64, 3, 3]);
    let pair = ProjectionPair::new("s", Tensor::zeros(&[16, 64]), Tensor::zeros(&[64, 16])).unwrap();
    assert_eq!(fold_lift(&w, &pair).unwrap().param_delta, -26_624);
}
