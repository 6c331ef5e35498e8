//! Feature-map inventories and ceiling plans.
//!
//! A ceiling plan bounds the largest stored activation of a network: every
//! stored map above the ceiling gets a channel projection whose rank is the
//! largest that keeps `k * m * n` at or under it.

mod report;

pub use report::{compression_report, render_svg, Bar, ReportFormat};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::{param_count, stored_records, Graph, LayerKind, StorageClass};
use crate::projection::overhead_check;

/// A convolution reading a stored map, as seen by the overhead bound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvConsumer {
    pub name: String,
    pub kernel: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InventoryEntry {
    pub site: String,
    pub producer: String,
    pub c: usize,
    pub m: usize,
    pub n: usize,
    pub storage_class: StorageClass,
    /// Classifier-head activation; never assigned a projection.
    pub head: bool,
    /// Ungrouped convolutions reading this map.
    pub conv_consumers: Vec<ConvConsumer>,
    /// Readers that cannot absorb a lift (dense layers, adds, pools...).
    pub other_consumers: Vec<String>,
}

impl InventoryEntry {
    pub fn spatial(&self) -> u64 {
        (self.m * self.n) as u64
    }

    pub fn elements(&self) -> u64 {
        self.c as u64 * self.spatial()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapInventory {
    pub arch: String,
    pub input_shape: [usize; 3],
    /// Declared parameter count if the description carries one, else the
    /// count implied by the layer shapes.
    pub param_elements: u64,
    pub entries: Vec<InventoryEntry>,
}

impl FeatureMapInventory {
    pub fn largest(&self) -> Option<&InventoryEntry> {
        self.entries
            .iter()
            .fold(None, |best: Option<&InventoryEntry>, e| match best {
                Some(b) if b.elements() >= e.elements() => Some(b),
                _ => Some(e),
            })
    }

    pub fn total_elements(&self) -> u64 {
        self.entries.iter().map(InventoryEntry::elements).sum()
    }

    pub fn entry(&self, site: &str) -> Option<&InventoryEntry> {
        self.entries.iter().find(|e| e.site == site)
    }
}

/// One entry per stored activation, in graph order.
pub fn profile(graph: &Graph) -> Result<FeatureMapInventory> {
    graph.shapes()?;
    let layers = graph.layers();
    let mut entries = Vec::new();
    for r in stored_records(graph) {
        let index = graph
            .index_of(&r.producer)
            .ok_or_else(|| Error::Config(format!("unknown producer {}", r.producer)))?;
        let mut conv_consumers = Vec::new();
        let mut other_consumers = Vec::new();
        for j in graph.readers(index) {
            match layers[j].kind {
                LayerKind::Conv2d {
                    out_channels,
                    kernel,
                    groups: 1,
                    ..
                } => conv_consumers.push(ConvConsumer {
                    name: layers[j].name.clone(),
                    kernel,
                    out_channels,
                }),
                _ => other_consumers.push(layers[j].name.clone()),
            }
        }
        let [c, m, n] = r.shape;
        entries.push(InventoryEntry {
            site: r.site,
            producer: r.producer,
            c,
            m,
            n,
            storage_class: r.storage_class,
            head: r.head,
            conv_consumers,
            other_consumers,
        });
    }
    Ok(FeatureMapInventory {
        arch: graph.name().to_string(),
        input_shape: graph.input_shape(),
        param_elements: match graph.declared_params() {
            Some(p) => p,
            None => param_count(graph)?,
        },
        entries,
    })
}

/// Largest stored activation divided by the parameter count.
pub fn largest_fm_ratio(inv: &FeatureMapInventory) -> Result<f64> {
    let largest = inv
        .largest()
        .ok_or_else(|| Error::Lookup(format!("{} has no stored activations", inv.arch)))?;
    if inv.param_elements == 0 {
        return Err(Error::Lookup(format!("{} has no parameter count", inv.arch)));
    }
    Ok(largest.elements() as f64 / inv.param_elements as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ceiling {
    /// Ceiling as a divisor of the largest stored map.
    Factor(f64),
    /// Ceiling as an absolute element count.
    Elements(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub site: String,
    pub c: usize,
    pub spatial: u64,
    pub k: usize,
}

impl Assignment {
    pub fn compressed_elements(&self) -> u64 {
        self.k as u64 * self.spatial
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeilingPlan {
    pub arch: String,
    pub ceiling_elements: u64,
    /// Largest original map divided by the ceiling.
    pub ceiling_factor: f64,
    /// Sites needing compression, in graph order.
    pub assignments: Vec<Assignment>,
    pub original_elements: u64,
    pub compressed_elements: u64,
    pub overall_compression: f64,
    /// Sites whose folded lift would not shrink the consumer's weights.
    pub warnings: Vec<String>,
}

impl CeilingPlan {
    pub fn rank_of(&self, site: &str) -> Option<usize> {
        self.assignments.iter().find(|a| a.site == site).map(|a| a.k)
    }

    pub fn ranks(&self) -> BTreeMap<&str, usize> {
        self.assignments.iter().map(|a| (a.site.as_str(), a.k)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Summary lines in `key,value` form.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ceiling_elements,{}", self.ceiling_elements);
        let _ = writeln!(s, "ceiling_factor,{:.2}", self.ceiling_factor);
        let _ = writeln!(s, "original_elements,{}", self.original_elements);
        let _ = writeln!(s, "compressed_elements,{}", self.compressed_elements);
        let _ = writeln!(s, "overall_compression,{:.2}", self.overall_compression);
        for w in &self.warnings {
            let _ = writeln!(s, "warning,{w}");
        }
        s
    }

    /// Line-oriented text form, read back by [`CeilingPlan::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "plan {}", self.arch);
        let _ = writeln!(s, "ceiling_elements {}", self.ceiling_elements);
        let _ = writeln!(s, "ceiling_factor {}", self.ceiling_factor);
        let _ = writeln!(s, "original_elements {}", self.original_elements);
        for a in &self.assignments {
            let _ = writeln!(s, "site {} c={} spatial={} k={}", a.site, a.c, a.spatial, a.k);
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning {w}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<CeilingPlan> {
        let bad = |line: &str| Error::Format(format!("bad plan line '{line}'"));
        let mut arch = None;
        let mut ceiling = None;
        let mut factor = None;
        let mut original = None;
        let mut assignments = Vec::new();
        let mut warnings = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(line))?;
            match key {
                "plan" => arch = Some(rest.to_string()),
                "ceiling_elements" => ceiling = Some(rest.parse::<u64>().map_err(|_| bad(line))?),
                "ceiling_factor" => factor = Some(rest.parse::<f64>().map_err(|_| bad(line))?),
                "original_elements" => original = Some(rest.parse::<u64>().map_err(|_| bad(line))?),
                "warning" => warnings.push(rest.to_string()),
                "site" => {
                    let mut parts = rest.split_whitespace();
                    let site = parts.next().ok_or_else(|| bad(line))?.to_string();
                    let mut fields = BTreeMap::new();
                    for p in parts {
                        let (k, v) = p.split_once('=').ok_or_else(|| bad(line))?;
                        fields.insert(k, v.parse::<u64>().map_err(|_| bad(line))?);
                    }
                    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(line));
                    assignments.push(Assignment {
                        site,
                        c: get("c")? as usize,
                        spatial: get("spatial")?,
                        k: get("k")? as usize,
                    });
                }
                _ => return Err(bad(line)),
            }
        }
        let missing = |what: &str| Error::Format(format!("plan is missing '{what}'"));
        let original_elements = original.ok_or_else(|| missing("original_elements"))?;
        let saved: u64 = assignments
            .iter()
            .map(|a| (a.c - a.k) as u64 * a.spatial)
            .sum();
        let compressed_elements = original_elements
            .checked_sub(saved)
            .ok_or_else(|| Error::Format("plan saves more elements than it holds".into()))?;
        Ok(CeilingPlan {
            arch: arch.ok_or_else(|| missing("plan"))?,
            ceiling_elements: ceiling.ok_or_else(|| missing("ceiling_elements"))?,
            ceiling_factor: factor.ok_or_else(|| missing("ceiling_factor"))?,
            assignments,
            original_elements,
            compressed_elements,
            overall_compression: original_elements as f64 / compressed_elements as f64,
            warnings,
        })
    }
}

/// Assigns each stored map above the ceiling the largest rank that fits.
pub fn plan_ceiling(inv: &FeatureMapInventory, ceiling: Ceiling) -> Result<CeilingPlan> {
    let largest = inv
        .largest()
        .ok_or_else(|| Error::Config(format!("{} has no stored activations", inv.arch)))?
        .elements();
    let ceiling_elements = match ceiling {
        Ceiling::Factor(f) if f.is_finite() && f > 0.0 => (largest as f64 / f).floor() as u64,
        Ceiling::Factor(f) => {
            return Err(Error::Parameter(format!("ceiling factor {f} must be positive")))
        }
        Ceiling::Elements(e) => e,
    };
    if ceiling_elements == 0 {
        return Err(Error::Infeasible {
            ceiling: 0,
            sites: inv.entries.iter().map(|e| e.site.clone()).collect(),
        });
    }
    let mut assignments = Vec::new();
    let mut blocking = Vec::new();
    let mut warnings = Vec::new();
    for e in inv.entries.iter().filter(|e| e.elements() > ceiling_elements) {
        let k = (ceiling_elements / e.spatial()).min(e.c as u64 - 1) as usize;
        if e.head || k == 0 {
            blocking.push(e.site.clone());
            continue;
        }
        for cc in &e.conv_consumers {
            if !overhead_check(cc.kernel as u64, cc.out_channels as u64, e.c as u64, k as u64) {
                warnings.push(format!(
                    "{}: k={k} exceeds the fold bound for {} ({}x{}, {} outputs)",
                    e.site, cc.name, cc.kernel, cc.kernel, cc.out_channels
                ));
            }
        }
        if !e.other_consumers.is_empty() {
            warnings.push(format!(
                "{}: lift kept explicit for {}",
                e.site,
                e.other_consumers.join("+")
            ));
        }
        assignments.push(Assignment {
            site: e.site.clone(),
            c: e.c,
            spatial: e.spatial(),
            k,
        });
    }
    if !blocking.is_empty() {
        return Err(Error::Infeasible {
            ceiling: ceiling_elements,
            sites: blocking,
        });
    }
    let original_elements = inv.total_elements();
    let saved: u64 = assignments
        .iter()
        .map(|a| (a.c - a.k) as u64 * a.spatial)
        .sum();
    let compressed_elements = original_elements - saved;
    Ok(CeilingPlan {
        arch: inv.arch.clone(),
        ceiling_elements,
        ceiling_factor: largest as f64 / ceiling_elements as f64,
        assignments,
        original_elements,
        compressed_elements,
        overall_compression: original_elements as f64 / compressed_elements as f64,
        warnings,
    })
}
