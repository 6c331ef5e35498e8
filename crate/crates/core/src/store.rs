//! Single-file model container.
//!
//! ```text
//! "CEIL"                      4 bytes
//! version                     u32, little endian
//! header length               u64, little endian
//! header                      UTF-8 text, sections introduced by @name
//! payload                     little-endian f32 blobs
//! ```
//!
//! The header holds the architecture text (`@arch`), a tensor manifest
//! (`@tensors`: name, shape, byte offset, element count, trainable flag),
//! an optional ceiling plan (`@plan`) and training metadata (`@meta`).
//! Optimiser state is stored as `velocity/<param>` tensors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Graph, Network, Param, ParamStore};
use crate::planner::CeilingPlan;
use crate::projection::{fold_network, FoldReport};
use crate::tensor::Tensor;
use crate::trainer::{Checkpoint, Sgd};

pub const MAGIC: &[u8; 4] = b"CEIL";
pub const VERSION: u32 = 1;
const VELOCITY: &str = "velocity/";

/// Everything a model file can carry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub net: Network,
    pub optimizer: Option<Sgd>,
    pub epoch: usize,
    pub stage: usize,
    pub val_accuracy: Option<f64>,
    pub plan: Option<CeilingPlan>,
    /// Free-form extra metadata.
    pub meta: BTreeMap<String, String>,
}

impl ModelFile {
    pub fn from_network(net: Network) -> Self {
        ModelFile {
            net,
            optimizer: None,
            epoch: 0,
            stage: 0,
            val_accuracy: None,
            plan: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn into_checkpoint(self) -> Result<Checkpoint> {
        let optimizer = self
            .optimizer
            .ok_or_else(|| Error::Format("file holds a model without optimiser state".into()))?;
        Ok(Checkpoint {
            net: self.net,
            optimizer,
            epoch: self.epoch,
            stage: self.stage,
            val_accuracy: self.val_accuracy.unwrap_or(0.0),
            plan: self.plan,
        })
    }

    /// Parameter elements held by the network.
    pub fn param_elements(&self) -> u64 {
        self.net.param_elements()
    }
}

impl From<Checkpoint> for ModelFile {
    fn from(c: Checkpoint) -> Self {
        ModelFile {
            net: c.net,
            optimizer: Some(c.optimizer),
            epoch: c.epoch,
            stage: c.stage,
            val_accuracy: Some(c.val_accuracy),
            plan: c.plan,
            meta: BTreeMap::new(),
        }
    }
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(char::is_whitespace) || s.starts_with('@') {
        return Err(Error::Format(format!("{what} '{s}' cannot be stored in a header")));
    }
    Ok(())
}

pub fn to_bytes(file: &ModelFile) -> Result<Vec<u8>> {
    let mut header = String::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut manifest = String::new();
    let mut add = |name: &str, t: &Tensor, trainable: bool, manifest: &mut String| -> Result<()> {
        check_token("tensor name", name)?;
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(
            manifest,
            "{name} {} {} {} {}",
            shape.join("x"),
            payload.len(),
            t.len(),
            u8::from(trainable)
        );
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    };
    for (key, p) in file.net.params() {
        add(key, &p.value, p.trainable, &mut manifest)?;
    }
    if let Some(opt) = &file.optimizer {
        for (key, v) in &opt.velocity {
            add(&format!("{VELOCITY}{key}"), v, false, &mut manifest)?;
        }
    }

    header.push_str("endian little\ndtype f32\n@arch\n");
    header.push_str(&file.net.graph().to_text());
    header.push_str("@tensors\n");
    header.push_str(&manifest);
    if let Some(plan) = &file.plan {
        header.push_str("@plan\n");
        header.push_str(&plan.to_text());
    }
    header.push_str("@meta\n");
    let _ = writeln!(header, "epoch {}", file.epoch);
    let _ = writeln!(header, "stage {}", file.stage);
    if let Some(acc) = file.val_accuracy {
        let _ = writeln!(header, "val_accuracy {acc}");
    }
    if let Some(opt) = &file.optimizer {
        let _ = writeln!(header, "optimizer sgd lr={} momentum={}", opt.lr, opt.momentum);
    }
    for (k, v) in &file.meta {
        check_token("metadata key", k)?;
        if v.contains('\n') {
            return Err(Error::Format(format!("metadata value for {k} spans lines")));
        }
        let _ = writeln!(header, "x.{k} {v}");
    }
    header.push_str("@end\n");

    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
    trainable: bool,
}

fn parse_entry(line: &str) -> Result<Entry> {
    let bad = || Error::Format(format!("bad manifest line '{line}'"));
    let f: Vec<&str> = line.split_whitespace().collect();
    let [name, shape, offset, count, trainable] = f[..] else {
        return Err(bad());
    };
    let shape = shape
        .split('x')
        .map(|d| d.parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Entry {
        name: name.to_string(),
        shape,
        offset: offset.parse().map_err(|_| bad())?,
        count: count.parse().map_err(|_| bad())?,
        trainable: match trainable {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        },
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelFile> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes"));
    let header_end = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| Error::Corruption("header length overflows".into()))?)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Corruption(format!("header length {header_len} exceeds file size")))?;
    let header = std::str::from_utf8(&bytes[16..header_end])
        .map_err(|_| Error::Corruption("header is not UTF-8".into()))?;
    let payload = &bytes[header_end..];

    let mut sections: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut current = "";
    for line in header.lines() {
        if let Some(name) = line.strip_prefix('@') {
            current = name;
            sections.entry(name).or_default();
        } else {
            sections.entry(current).or_default().push(line);
        }
    }
    if !sections.contains_key("end") {
        return Err(Error::Corruption("header is truncated".into()));
    }
    let preamble = sections.get("").cloned().unwrap_or_default();
    if !preamble.contains(&"endian little") {
        return Err(Error::Format("header does not declare little-endian payload".into()));
    }
    let arch = sections
        .get("arch")
        .ok_or_else(|| Error::Format("header has no @arch section".into()))?
        .join("\n");
    let graph = Graph::parse(&arch)?;

    let entries = sections
        .get("tensors")
        .map(|lines| lines.iter().map(|l| parse_entry(l)).collect::<Result<Vec<_>>>())
        .transpose()?
        .unwrap_or_default();
    let expected: usize = entries.iter().map(|e| e.count * 4).sum();
    if expected != payload.len() {
        return Err(Error::Corruption(format!(
            "manifest describes {expected} payload bytes, file holds {}",
            payload.len()
        )));
    }
    let mut params = ParamStore::new();
    let mut velocity = BTreeMap::new();
    for e in entries {
        let end = e.offset.checked_add(e.count * 4).filter(|&end| end <= payload.len());
        let Some(end) = end else {
            return Err(Error::Corruption(format!("tensor {} lies outside the payload", e.name)));
        };
        if e.shape.iter().product::<usize>() != e.count {
            return Err(Error::Corruption(format!("tensor {} shape disagrees with its size", e.name)));
        }
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let value = Tensor::new(e.shape, data)?;
        match e.name.strip_prefix(VELOCITY) {
            Some(key) => {
                velocity.insert(key.to_string(), value);
            }
            None => {
                params.insert(
                    e.name,
                    Param {
                        value,
                        trainable: e.trainable,
                    },
                );
            }
        }
    }
    let net = Network::new(graph, params)?;

    let plan = sections
        .get("plan")
        .map(|lines| CeilingPlan::parse(&lines.join("\n")))
        .transpose()?;

    let mut file = ModelFile::from_network(net);
    file.plan = plan;
    for line in sections.get("meta").cloned().unwrap_or_default() {
        let bad = || Error::Format(format!("bad metadata line '{line}'"));
        let (key, value) = line.split_once(' ').ok_or_else(bad)?;
        match key {
            "epoch" => file.epoch = value.parse().map_err(|_| bad())?,
            "stage" => file.stage = value.parse().map_err(|_| bad())?,
            "val_accuracy" => file.val_accuracy = Some(value.parse().map_err(|_| bad())?),
            "optimizer" => {
                let mut lr = None;
                let mut momentum = None;
                for part in value.split_whitespace().skip(1) {
                    match part.split_once('=') {
                        Some(("lr", v)) => lr = v.parse().ok(),
                        Some(("momentum", v)) => momentum = v.parse().ok(),
                        _ => return Err(bad()),
                    }
                }
                let mut opt = Sgd::new(lr.ok_or_else(bad)?, momentum.ok_or_else(bad)?);
                opt.velocity = std::mem::take(&mut velocity);
                file.optimizer = Some(opt);
            }
            k => match k.strip_prefix("x.") {
                Some(k) => {
                    file.meta.insert(k.to_string(), value.to_string());
                }
                None => return Err(bad()),
            },
        }
    }
    if !velocity.is_empty() {
        return Err(Error::Format("optimiser state without optimiser settings".into()));
    }
    Ok(file)
}

/// Writes via a temporary file in the same directory and a rename.
pub fn save(file: &ModelFile, path: &Path) -> Result<()> {
    let bytes = to_bytes(file)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Parameter(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load(path: &Path) -> Result<ModelFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corruption(m) => Error::Corruption(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    save(&ModelFile::from(ckpt.clone()), path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    load(path)?.into_checkpoint()
}

/// Outcome of [`export_folded`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldExport {
    pub sites: Vec<FoldReport>,
    pub unfolded_elements: u64,
    pub folded_elements: u64,
}

/// Folds every lift into its consumer convolution and writes the inference
/// model: folded kernels and `S1` only, plus explicit lifts where allowed.
pub fn export_folded(net: &Network, allow_explicit_lift: bool, path: &Path) -> Result<FoldExport> {
    let (folded, sites) = fold_network(net, allow_explicit_lift)?;
    let mut file = ModelFile::from_network(folded);
    file.meta.insert("folded".into(), "true".into());
    let folded_elements = file.param_elements();
    save(&file, path)?;
    Ok(FoldExport {
        sites,
        unfolded_elements: net.param_elements(),
        folded_elements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::catalog;
    use crate::planner::{plan_ceiling, profile, Ceiling};

    fn sample() -> ModelFile {
        let net = Network::init(catalog::load("mnist_convnet").unwrap(), 7).unwrap();
        let mut ckpt = Checkpoint::new(net, 0.01, 0.9);
        ckpt.optimizer.velocity.insert("fc.bias".into(), Tensor::full(&[10], 0.125));
        ckpt.val_accuracy = 0.987_654_321_012_345_6;
        ckpt.epoch = 3;
        ckpt.plan = Some(plan_ceiling(&profile(ckpt.net.graph()).unwrap(), Ceiling::Factor(4.0)).unwrap());
        let mut f = ModelFile::from(ckpt);
        f.meta.insert("dataset".into(), "mnist".into());
        f
    }

    #[test]
    fn round_trip_is_exact_and_idempotent() {
        let f = sample();
        let bytes = to_bytes(&f).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = to_bytes(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn tampered_payload_is_corruption() {
        let mut bytes = to_bytes(&sample()).unwrap();
        bytes.pop();
        assert!(matches!(from_bytes(&bytes), Err(Error::Corruption(_))));
        let mut bytes = to_bytes(&sample()).unwrap();
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(from_bytes(&bytes), Err(Error::Corruption(_))));
        let bytes = to_bytes(&sample()).unwrap();
        assert!(matches!(from_bytes(&bytes[..40]), Err(Error::Corruption(_))));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ceil");
        let f = sample();
        save(&f, &p).unwrap();
        assert_eq!(load(&p).unwrap(), f);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.epoch, 3);
        assert!(matches!(load(&dir.path().join("none")), Err(Error::Io { .. })));
    }

    #[test]
    fn model_without_optimizer_is_not_a_checkpoint() {
        let f = ModelFile::from_network(sample().net);
        let back = from_bytes(&to_bytes(&f).unwrap()).unwrap();
        assert!(back.optimizer.is_none());
        assert!(matches!(back.into_checkpoint(), Err(Error::Format(_))));
    }
}
