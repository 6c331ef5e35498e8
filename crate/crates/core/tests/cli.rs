use std::process::Command;

use ceilcomp::cli::run;

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("ceilcomp").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn profile_reports_largest_ratio() {
    let (code, out, _) = run_cli(&["profile", "--arch", "vgg16", "--input", "3x224x224"]);
    assert_eq!(code, 0);
    assert!(out.contains("\nlargest_fm_ratio,2.3%\n"), "{out}");
    assert!(out.starts_with("site,c,m,n,elements,storage_class,assigned_k,compressed_elements\n"));
}

#[test]
fn plan_reports_overall_factor() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.txt");
    let svg = dir.path().join("r.svg");
    let (code, out, _) = run_cli(&[
        "plan", "--arch", "vgg19", "--input", "3x224x224", "--ceiling-factor", "8",
        "--out", plan.to_str().unwrap(), "--report", svg.to_str().unwrap(), "--format", "svg",
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("overall_compression,2.21\n"), "{out}");
    assert!(std::fs::read_to_string(&plan).unwrap().contains("site conv1_1 c=64 spatial=50176 k=8"));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn plan_outputs_are_reproducible() {
    let args = ["plan", "--arch", "resnet18", "--ceiling-factor", "4"];
    assert_eq!(run_cli(&args), run_cli(&args));
}

#[test]
fn exit_codes() {
    let (code, _, err) = run_cli(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(err.lines().last().unwrap().starts_with("error,usage,"));

    let (code, _, err) = run_cli(&["plan", "--arch", "vgg16", "--ceiling-elements", "100"]);
    assert_eq!(code, 3);
    assert!(err.starts_with("error,infeasible,"));

    let (code, _, err) = run_cli(&["eval", "--model", "/nonexistent/m.ceil", "--dataset", "mnist", "--data-dir", "/nonexistent"]);
    assert_eq!(code, 2);
    assert_eq!(err.lines().count(), 1);

    let (code, _, _) = run_cli(&["profile", "--arch", "no_such_net"]);
    assert_eq!(code, 1);
}

#[test]
fn fold_command_on_saved_checkpoint() {
    use ceilcomp::network::{catalog, Network};
    use ceilcomp::projection::{insert_projection, svd_init};
    let dir = tempfile::tempdir().unwrap();
    let net = Network::init(catalog::load("cifar_convnet").unwrap(), 1).unwrap();
    let pair = svd_init("conv1", net.param("conv2.weight").unwrap(), 8).unwrap();
    let ckpt = ceilcomp::trainer::Checkpoint::new(insert_projection(&net, &pair).unwrap(), 0.01, 0.9);
    let src = dir.path().join("c.ceil");
    let dst = dir.path().join("f.ceil");
    ceilcomp::store::save_checkpoint(&ckpt, &src).unwrap();
    let (code, out, err) = run_cli(&["fold", "--ckpt", src.to_str().unwrap(), "--out", dst.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("conv1,conv2,"), "{out}");

    let before = dir.path().join("before.ceil");
    ceilcomp::store::save_checkpoint(&ceilcomp::trainer::Checkpoint::new(net, 0.01, 0.9), &before).unwrap();
    let fig = dir.path().join("fig.svg");
    let (code, _, err) = run_cli(&[
        "report", "--ckpt-before", before.to_str().unwrap(), "--ckpt-after", src.to_str().unwrap(),
        "--out", fig.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(std::fs::read_to_string(fig).unwrap().contains("class=\"ceiling\""));
}

#[test]
fn binary_prints_usage_on_bad_subcommand() {
    let out = Command::new(env!("CARGO_BIN_EXE_ceilcomp")).arg("nope").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}
