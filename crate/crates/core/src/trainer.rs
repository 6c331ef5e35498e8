//! SGD training of baselines and progressive insertion of projections with
//! a frozen base network.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{debug, info};

use crate::dataset::{batches, hflip, DataBundle, LabeledDataset};
use crate::error::{Error, Result};
use crate::network::{softmax_xent, Gradients, Network};
use crate::planner::CeilingPlan;
use crate::projection::{init_pair, insert_projection, locate_site, InitMethod};
use crate::tensor::Tensor;

/// Learning rates are never reduced below this.
pub const LR_FLOOR: f32 = 1e-6;
/// Smallest validation-accuracy gain counted as an improvement.
pub const PLATEAU_THRESHOLD: f64 = 1e-4;

const EVAL_BATCH: usize = 500;
const CALIBRATION_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs_per_insertion: usize,
    pub final_epochs: usize,
    pub baseline_epochs: usize,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f32,
    pub seed: u64,
    pub momentum: f32,
    pub init: InitMethod,
    /// Train S1 as the transpose of S2 instead of independently.
    pub tie_projections: bool,
    pub hflip: bool,
    /// Cap on training samples drawn per epoch.
    pub samples_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            epochs_per_insertion: 4,
            final_epochs: 20,
            baseline_epochs: 10,
            batch_size: 64,
            plateau_patience: 2,
            plateau_factor: 0.1,
            seed: 0,
            momentum: 0.9,
            init: InitMethod::Svd,
            tie_projections: false,
            hflip: false,
            samples_per_epoch: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale MNIST schedule: two epochs per insertion, eight final.
    pub fn mnist() -> Self {
        TrainConfig {
            epochs_per_insertion: 2,
            final_epochs: 4,
            baseline_epochs: 6,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs_per_insertion == 0 || self.final_epochs == 0 || self.baseline_epochs == 0 {
            return bad("epoch counts must be at least 1".into());
        }
        if self.batch_size == 0 || self.plateau_patience == 0 {
            return bad("batch_size and plateau_patience must be at least 1".into());
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Parameter(format!("bad value '{v}' for {key}")))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "epochs_per_insertion" => self.epochs_per_insertion = num(key, value)?,
            "final_epochs" => self.final_epochs = num(key, value)?,
            "baseline_epochs" => self.baseline_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "plateau_patience" => self.plateau_patience = num(key, value)?,
            "plateau_factor" => self.plateau_factor = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "init" => self.init = value.parse()?,
            "tie_projections" => self.tie_projections = num(key, value)?,
            "hflip" => self.hflip = num(key, value)?,
            "samples_per_epoch" => {
                self.samples_per_epoch = match value {
                    "" | "all" => None,
                    v => Some(num(key, v)?),
                }
            }
            _ => return Err(Error::Parameter(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a key-value text file: one `key = value` per line, `#`
    /// comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("config line {}: expected key = value", no + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }
}

/// Momentum SGD over the trainable parameters: `v = mu*v + g; p -= lr*v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        for (key, g) in grads {
            let v = self
                .velocity
                .entry(key.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            g.check_same_shape(v)?;
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            let p = net
                .params_mut()
                .get_mut(key)
                .ok_or_else(|| Error::Lookup(format!("no parameter {key}")))?;
            for (pi, vi) in p.value.data_mut().iter_mut().zip(v.data()) {
                *pi -= self.lr * vi;
            }
        }
        Ok(())
    }
}

/// Learning rate after the latest validation accuracy in `history`:
/// reduced by `factor` when the last `patience` entries improve on the
/// best before them by no more than the threshold.
pub fn reduce_on_plateau(history: &[f64], lr: f32, patience: usize, factor: f32) -> f32 {
    if history.len() <= patience {
        return lr;
    }
    let split = history.len() - patience;
    let before = history[..split].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let recent = history[split..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if recent > before + PLATEAU_THRESHOLD {
        lr
    } else {
        (lr * factor).max(LR_FLOOR)
    }
}

/// Network and optimiser state at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    pub optimizer: Sgd,
    /// Epochs completed in `stage`.
    pub epoch: usize,
    /// Insertion stage: 0 for a baseline, `i + 1` after the `i`-th
    /// insertion, `sites + 1` for the final phase.
    pub stage: usize,
    pub val_accuracy: f64,
    pub plan: Option<CeilingPlan>,
}

impl Checkpoint {
    pub fn new(net: Network, lr: f32, momentum: f32) -> Self {
        Checkpoint {
            net,
            optimizer: Sgd::new(lr, momentum),
            epoch: 0,
            stage: 0,
            val_accuracy: 0.0,
            plan: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub stage: usize,
    pub site: String,
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Per-epoch training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub notes: Vec<String>,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        s.push_str("stage,site,epoch,lr,train_loss,val_accuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6}",
                r.stage, r.site, r.epoch, r.lr, r.train_loss, r.val_accuracy
            );
        }
        s
    }

    fn push(&mut self, row: LogRow) {
        info!(
            "stage {} [{}] epoch {}: lr {} loss {:.4} val {:.4}",
            row.stage, row.site, row.epoch, row.lr, row.train_loss, row.val_accuracy
        );
        self.rows.push(row);
    }
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(net: &Network, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for idx in batches(ds.len(), EVAL_BATCH, 0, false) {
        let (x, labels) = ds.gather(&idx)?;
        let (logits, _) = net.forward(&x, false)?;
        let classes = logits.shape()[1];
        for (b, &label) in labels.iter().enumerate() {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn tie(net: &mut Network) -> Result<()> {
    let keys: Vec<String> = net
        .params()
        .keys()
        .filter(|k| k.ends_with(".s2") && net.params()[k.as_str()].trainable)
        .cloned()
        .collect();
    for k2 in keys {
        let k1 = format!("{}.s1", k2.trim_end_matches(".s2"));
        let t = net.param(&k2)?.transpose2()?;
        net.set_param(&k1, t)?;
    }
    Ok(())
}

/// One pass over (a seeded permutation of) the training split. Returns the
/// mean loss.
fn train_epoch(net: &mut Network, opt: &mut Sgd, ds: &LabeledDataset, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let mut order = batches(ds.len(), cfg.batch_size, seed, true);
    if let Some(limit) = cfg.samples_per_epoch {
        order.truncate(limit.div_ceil(cfg.batch_size).max(1));
    }
    let mut total = 0.0f64;
    let mut seen = 0usize;
    for (step, idx) in order.iter().enumerate() {
        let (mut x, labels) = ds.gather(idx)?;
        if cfg.hflip && (seed.wrapping_add(step as u64)) % 2 == 1 {
            hflip(&mut x);
        }
        let (logits, cache) = net.forward(&x, true)?;
        let (loss, grad) = softmax_xent(&logits, &labels)
            .map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;
        let grads = net.backward(&cache, &grad)?;
        if grads.values().any(|g| !g.all_finite()) {
            return Err(Error::Numerical(format!("step {step}: non-finite gradient")));
        }
        opt.step(net, &grads)?;
        if cfg.tie_projections {
            tie(net)?;
        }
        total += f64::from(loss) * idx.len() as f64;
        seen += idx.len();
        if step % 100 == 0 {
            debug!("step {step}: loss {loss:.4}");
        }
    }
    Ok(total / seen as f64)
}

fn epoch_seed(cfg: &TrainConfig, stage: usize, epoch: usize) -> u64 {
    cfg.seed ^ ((stage as u64) << 32) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains `epochs` epochs in one stage with a fresh optimiser and plateau
/// schedule. Returns the stage's best checkpoint (including the initial
/// evaluation) and the final one.
fn run_stage(
    start: Checkpoint,
    data: &DataBundle,
    cfg: &TrainConfig,
    epochs: usize,
    site: &str,
    log: &mut TrainLog,
) -> Result<Checkpoint> {
    let mut cur = start;
    cur.optimizer = Sgd::new(cfg.lr, cfg.momentum);
    cur.epoch = 0;
    cur.val_accuracy = evaluate(&cur.net, &data.val)?;
    log.push(LogRow {
        stage: cur.stage,
        site: site.to_string(),
        epoch: 0,
        lr: cur.optimizer.lr,
        train_loss: f64::NAN,
        val_accuracy: cur.val_accuracy,
    });
    let mut best = cur.clone();
    let mut window = vec![cur.val_accuracy];
    for epoch in 1..=epochs {
        let loss = train_epoch(&mut cur.net, &mut cur.optimizer, &data.train, cfg, epoch_seed(cfg, cur.stage, epoch))
            .map_err(|e| match e {
                Error::Numerical(m) => {
                    Error::Numerical(format!("stage {} ({site}) epoch {epoch}: {m}", cur.stage))
                }
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "stage {} ({site}) epoch {epoch}: loss is {loss}",
                cur.stage
            )));
        }
        cur.epoch = epoch;
        cur.val_accuracy = evaluate(&cur.net, &data.val)?;
        log.push(LogRow {
            stage: cur.stage,
            site: site.to_string(),
            epoch,
            lr: cur.optimizer.lr,
            train_loss: loss,
            val_accuracy: cur.val_accuracy,
        });
        if cur.val_accuracy > best.val_accuracy {
            best = cur.clone();
        }
        window.push(cur.val_accuracy);
        let lr = reduce_on_plateau(&window, cur.optimizer.lr, cfg.plateau_patience, cfg.plateau_factor);
        if lr != cur.optimizer.lr {
            info!("plateau: lr {} -> {lr}", cur.optimizer.lr);
            cur.optimizer.lr = lr;
            window = vec![cur.val_accuracy];
        }
    }
    Ok(best)
}

/// Trains every parameter for `cfg.baseline_epochs` and returns the best
/// validation checkpoint, with all parameters frozen.
pub fn train_baseline(net: Network, data: &DataBundle, cfg: &TrainConfig, log: &mut TrainLog) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data(format!("{}: empty training or validation split", data.name)));
    }
    let mut net = net;
    net.set_all_trainable(true);
    log.notes.push("phase=baseline".into());
    let mut best = run_stage(Checkpoint::new(net, cfg.lr, cfg.momentum), data, cfg, cfg.baseline_epochs, "base", log)?;
    best.net.set_all_trainable(false);
    Ok(best)
}

/// Inserts the plan's projections one at a time in graph order, training
/// all inserted projections (base frozen) for `epochs_per_insertion`
/// epochs after each, then `final_epochs` more. Each stage restarts the
/// learning-rate schedule from the best checkpoint of the previous stage.
/// Returns the best checkpoint with every projection in place.
pub fn progressive_compress(
    base: &Checkpoint,
    plan: &CeilingPlan,
    data: &DataBundle,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if plan.is_empty() {
        return Ok(base.clone());
    }
    let mut sites: Vec<(usize, &str, usize)> = Vec::new();
    for a in &plan.assignments {
        let info = locate_site(base.net.graph(), &a.site)?;
        if info.shape[0] != a.c {
            return Err(Error::Dimension(format!(
                "plan expects {} channels at {}, network has {}",
                a.c, a.site, info.shape[0]
            )));
        }
        sites.push((info.producer_index, &a.site, a.k));
    }
    sites.sort_by_key(|s| s.0);

    log.notes.push("phase=progressive".into());
    log.notes.push("lr_schedule=reset_per_stage".into());
    let calibration = if cfg.init == InitMethod::Pca {
        let n = data.train.len().min(CALIBRATION_SAMPLES);
        let idx: Vec<usize> = batches(data.train.len(), n, cfg.seed, true).swap_remove(0);
        Some(data.train.gather(&idx)?.0)
    } else {
        None
    };

    let mut cur = base.clone();
    cur.plan = Some(plan.clone());
    let mut overall_best: Option<Checkpoint> = None;
    let n_sites = sites.len();
    for stage in 1..=n_sites + 1 {
        let (site, epochs) = if stage <= n_sites {
            let (_, site, k) = sites[stage - 1];
            let pair = init_pair(&cur.net, site, k, cfg.init, calibration.as_ref(), cfg.seed ^ stage as u64)?;
            let mut net = insert_projection(&cur.net, &pair)?;
            net.freeze_base();
            cur.net = net;
            (site.to_string(), cfg.epochs_per_insertion)
        } else {
            ("final".to_string(), cfg.final_epochs)
        };
        cur.stage = stage;
        let best = run_stage(cur, data, cfg, epochs, &site, log)?;
        if stage >= n_sites && overall_best.as_ref().is_none_or(|b| best.val_accuracy > b.val_accuracy) {
            overall_best = Some(best.clone());
        }
        cur = best;
    }
    Ok(overall_best.expect("final stage ran"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::network::Graph;
    use crate::planner::{plan_ceiling, profile, Ceiling};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_bundle(n: usize, seed: u64) -> DataBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let label = rng.random_range(0..2usize);
            let shift = if label == 1 { 1.0 } else { -1.0 };
            for _ in 0..16 {
                data.push(shift + rng.random_range(-0.5f32..0.5));
            }
            labels.push(label);
        }
        let raw = LabeledDataset::new(Split::Train, Tensor::new(vec![n, 1, 4, 4], data).unwrap(), labels, 2).unwrap();
        let test = raw.subset(Split::Test, &(0..n / 5).collect::<Vec<_>>()).unwrap();
        DataBundle::from_raw("toy", raw, test, seed).unwrap()
    }

    const TOY: &str = "input 1x4x4\nconv c1 out=4 k=3 p=1\nrelu r1\nconv c2 out=4 k=3 p=1\nrelu r2\nflatten f\ndense fc units=2\n";

    fn cfg() -> TrainConfig {
        TrainConfig {
            baseline_epochs: 5,
            epochs_per_insertion: 1,
            final_epochs: 2,
            batch_size: 16,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn plateau_rules() {
        assert_eq!(reduce_on_plateau(&[0.1, 0.2, 0.3, 0.4], 0.01, 2, 0.1), 0.01);
        assert!((reduce_on_plateau(&[0.5, 0.5, 0.5], 0.01, 2, 0.1) - 0.001).abs() < 1e-9);
        assert_eq!(reduce_on_plateau(&[0.5, 0.5, 0.5], LR_FLOOR, 2, 0.1), LR_FLOOR);
        assert_eq!(reduce_on_plateau(&[0.5], 0.01, 2, 0.1), 0.01);
    }

    #[test]
    fn config_validation_and_text() {
        let mut c = TrainConfig::default();
        c.apply_text("# schedule\nlr = 0.05\nfinal_epochs=3\ninit = pca\n").unwrap();
        assert_eq!((c.lr, c.final_epochs, c.init), (0.05, 3, InitMethod::Pca));
        assert!(c.clone().apply_text("plateau_factor = 1.5").is_err());
        assert!(c.clone().apply_text("nonsense = 1").is_err());
        assert!(c.apply_text("lr 3").is_err());
    }

    #[test]
    fn separable_toy_reaches_high_accuracy_deterministically() {
        let data = toy_bundle(400, 1);
        let net = Network::init(Graph::parse(TOY).unwrap(), 2).unwrap();
        let a = train_baseline(net.clone(), &data, &cfg(), &mut TrainLog::default()).unwrap();
        assert!(a.val_accuracy >= 0.99, "{}", a.val_accuracy);
        let b = train_baseline(net, &data, &cfg(), &mut TrainLog::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.net.trainable_keys().is_empty());
    }

    #[test]
    fn evaluate_counts() {
        let g = Graph::parse("input 1x1x1\ndense d units=3\n").unwrap();
        let mut net = Network::init(g, 0).unwrap();
        net.set_param("d.weight", Tensor::zeros(&[3, 1])).unwrap();
        net.set_param("d.bias", Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let ds = LabeledDataset::new(Split::Test, Tensor::zeros(&[30, 1, 1, 1]), labels, 3).unwrap();
        assert!((evaluate(&net, &ds).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(ds.subset(Split::Test, &[]).is_err());
    }

    #[test]
    fn progressive_keeps_base_and_returns_best() {
        let data = toy_bundle(300, 4);
        let net = Network::init(Graph::parse(TOY).unwrap(), 5).unwrap();
        let base = train_baseline(net, &data, &cfg(), &mut TrainLog::default()).unwrap();
        let inv = profile(base.net.graph()).unwrap();
        let plan = plan_ceiling(&inv, Ceiling::Elements(32)).unwrap();
        assert_eq!(plan.assignments.len(), 2);
        let mut log = TrainLog::default();
        let out = progressive_compress(&base, &plan, &data, &cfg(), &mut log).unwrap();
        for (k, p) in base.net.params() {
            assert_eq!(&out.net.params()[k].value, &p.value, "{k} changed");
        }
        assert!(out.net.graph().layer("proj_c1").is_some() && out.net.graph().layer("proj_c2").is_some());
        let best = log.rows.iter().filter(|r| r.stage >= 2).map(|r| r.val_accuracy).fold(0.0, f64::max);
        assert_eq!(out.val_accuracy, best);
        assert!(log.to_csv().starts_with("# phase=progressive\n# lr_schedule=reset_per_stage\n"));

        let empty = plan_ceiling(&inv, Ceiling::Elements(1000)).unwrap();
        assert_eq!(progressive_compress(&base, &empty, &data, &cfg(), &mut log).unwrap(), base);
    }

    #[test]
    fn nan_reports_stage() {
        let data = toy_bundle(100, 6);
        let net = Network::init(Graph::parse(TOY).unwrap(), 5).unwrap();
        let mut base = Checkpoint::new(net, 0.01, 0.9);
        base.net.set_all_trainable(false);
        base.net.set_param("fc.bias", Tensor::full(&[2], f32::NAN)).unwrap();
        let inv = profile(base.net.graph()).unwrap();
        let plan = plan_ceiling(&inv, Ceiling::Elements(32)).unwrap();
        match progressive_compress(&base, &plan, &data, &cfg(), &mut TrainLog::default()) {
            Err(Error::Numerical(m)) => assert!(m.starts_with("stage "), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
