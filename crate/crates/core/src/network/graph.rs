//! Layer graph, shape inference and the text architecture format.
//!
//! One layer per line: `<kind> <name> [key=value ...] [in=a,b]`. A layer
//! without `in=` reads the previous line's layer (the first reads `input`).
//! Header lines: `arch <name>`, `input CxHxW`, `params <count>`. `#` starts a
//! comment.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

/// Reserved producer name for the network input.
pub const INPUT: &str = "input";

/// Channels, height, width of one batch item.
pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    ReLU,
    /// Only `2x2 / stride 2 / pad 0` executes; other windows are shape-only.
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        units: usize,
    },
    ResidualAdd,
    GlobalAvgPool,
    Flatten,
    SoftmaxXent,
    /// Channel projection `S2 * S1`. A folded projection applies `S1` only
    /// and emits `rank` channels; its lift lives in the consumer's weights.
    Projection {
        rank: usize,
        folded: bool,
    },
}

impl LayerKind {
    pub const MAXPOOL_2X2: LayerKind = LayerKind::MaxPool {
        kernel: 2,
        stride: 2,
        pad: 0,
    };

    pub fn is_standard_pool(&self) -> bool {
        *self == Self::MAXPOOL_2X2
    }

    fn keyword(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv",
            LayerKind::ReLU => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Dense { .. } => "dense",
            LayerKind::ResidualAdd => "add",
            LayerKind::GlobalAvgPool => "gap",
            LayerKind::Flatten => "flatten",
            LayerKind::SoftmaxXent => "softmax_xent",
            LayerKind::Projection { .. } => "proj",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

/// A topologically ordered layer graph. The last layer produces the
/// network output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    name: String,
    input_shape: Shape3,
    declared_params: Option<u64>,
    layers: Vec<Layer>,
}

impl Graph {
    pub fn new(
        name: impl Into<String>,
        input_shape: Shape3,
        declared_params: Option<u64>,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        let g = Graph {
            name: name.into(),
            input_shape,
            declared_params,
            layers,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    /// Parameter count recorded for the reference checkpoint, when the
    /// description carries one.
    pub fn declared_params(&self) -> Option<u64> {
        self.declared_params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.index_of(name).map(|i| &self.layers[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Producer indices of each layer; `None` stands for the network input.
    pub fn producer_indices(&self) -> Vec<Vec<Option<usize>>> {
        let index: HashMap<&str, usize> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.as_str(), i))
            .collect();
        self.layers
            .iter()
            .map(|l| {
                l.inputs
                    .iter()
                    .map(|s| index.get(s.as_str()).copied())
                    .collect()
            })
            .collect()
    }

    /// Consumer indices of each layer's output.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.layers.len()];
        for (i, producers) in self.producer_indices().iter().enumerate() {
            for p in producers.iter().flatten() {
                out[*p].push(i);
            }
        }
        out
    }

    /// Layers that read the output of layer `index`, looking through
    /// Flatten views. Sorted by graph position.
    pub fn readers(&self, index: usize) -> Vec<usize> {
        let consumers = self.consumers();
        let mut out = Vec::new();
        let mut stack = consumers[index].clone();
        while let Some(c) = stack.pop() {
            if self.layers[c].kind == LayerKind::Flatten {
                stack.extend(consumers[c].iter().copied());
            } else {
                out.push(c);
            }
        }
        out.sort_unstable();
        out
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("graph has no layers".into()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "input shape {:?} has a zero axis",
                self.input_shape
            )));
        }
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.name == INPUT || layer.name.is_empty() {
                return Err(Error::Config(format!("invalid layer name '{}'", layer.name)));
            }
            if layer.name.chars().any(|c| c.is_whitespace() || c == ',' || c == '=') {
                return Err(Error::Config(format!(
                    "layer name '{}' contains a reserved character",
                    layer.name
                )));
            }
            for src in &layer.inputs {
                if src != INPUT && !seen.contains_key(src.as_str()) {
                    return Err(Error::Config(format!(
                        "layer '{}' reads '{}', which is not an earlier layer",
                        layer.name, src
                    )));
                }
            }
            let arity_ok = match layer.kind {
                LayerKind::ResidualAdd => layer.inputs.len() >= 2,
                _ => layer.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Config(format!(
                    "layer '{}' has {} inputs",
                    layer.name,
                    layer.inputs.len()
                )));
            }
            check_attributes(layer)?;
            if seen.insert(&layer.name, i).is_some() {
                return Err(Error::Config(format!("duplicate layer name '{}'", layer.name)));
            }
        }
        self.shapes().map(|_| ())
    }

    /// Output shape of every layer for the declared input shape.
    pub fn shapes(&self) -> Result<Vec<Shape3>> {
        let producers = self.producer_indices();
        let mut shapes: Vec<Shape3> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let ins: Vec<Shape3> = producers[i]
                .iter()
                .map(|p| p.map_or(self.input_shape, |j| shapes[j]))
                .collect();
            let [c, h, w] = ins[0];
            let edge = || format!("{} -> {}", layer.inputs[0], layer.name);
            let out = match layer.kind {
                LayerKind::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    groups,
                } => {
                    if c % groups != 0 || out_channels % groups != 0 {
                        return Err(Error::Dimension(format!(
                            "edge {}: {c} input / {out_channels} output channels not divisible by {groups} groups",
                            edge()
                        )));
                    }
                    [
                        out_channels,
                        window_extent(h, kernel, stride, pad, &edge)?,
                        window_extent(w, kernel, stride, pad, &edge)?,
                    ]
                }
                LayerKind::MaxPool {
                    kernel,
                    stride,
                    pad,
                } => [
                    c,
                    window_extent(h, kernel, stride, pad, &edge)?,
                    window_extent(w, kernel, stride, pad, &edge)?,
                ],
                LayerKind::ReLU | LayerKind::SoftmaxXent => [c, h, w],
                LayerKind::Dense { units } => [units, 1, 1],
                LayerKind::ResidualAdd => {
                    if let Some((k, s)) = ins.iter().enumerate().find(|(_, s)| **s != ins[0]) {
                        return Err(Error::Dimension(format!(
                            "edge {} -> {}: shape {:?} differs from {:?}",
                            layer.inputs[k], layer.name, s, ins[0]
                        )));
                    }
                    ins[0]
                }
                LayerKind::GlobalAvgPool => [c, 1, 1],
                LayerKind::Flatten => [c * h * w, 1, 1],
                LayerKind::Projection { rank, folded } => {
                    if rank >= c {
                        return Err(Error::Dimension(format!(
                            "edge {}: projection rank {rank} must be below {c} channels",
                            edge()
                        )));
                    }
                    if folded {
                        [rank, h, w]
                    } else {
                        [c, h, w]
                    }
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Input shape seen by each layer (first input).
    pub fn input_shapes(&self) -> Result<Vec<Shape3>> {
        let shapes = self.shapes()?;
        Ok(self
            .producer_indices()
            .iter()
            .map(|p| p[0].map_or(self.input_shape, |j| shapes[j]))
            .collect())
    }

    pub fn output_shape(&self) -> Result<Shape3> {
        Ok(*self.shapes()?.last().expect("non-empty graph"))
    }

    /// Parses the text architecture format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = String::from("unnamed");
        let mut input_shape = None;
        let mut declared = None;
        let mut layers: Vec<Layer> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            let mut tokens = line.split_whitespace();
            let keyword = tokens.next().expect("non-empty line");
            match keyword {
                "arch" => {
                    name = tokens.next().ok_or_else(|| bad("missing arch name".into()))?.into();
                    continue;
                }
                "input" => {
                    let spec = tokens.next().ok_or_else(|| bad("missing input shape".into()))?;
                    input_shape = Some(parse_shape3(spec).map_err(bad)?);
                    continue;
                }
                "params" => {
                    let v = tokens.next().ok_or_else(|| bad("missing count".into()))?;
                    declared = Some(v.parse().map_err(|_| bad(format!("bad count '{v}'")))?);
                    continue;
                }
                _ => {}
            }
            let lname = tokens
                .next()
                .ok_or_else(|| bad(format!("'{keyword}' needs a layer name")))?
                .to_string();
            let mut attrs: HashMap<&str, &str> = HashMap::new();
            for tok in tokens {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| bad(format!("expected key=value, got '{tok}'")))?;
                if attrs.insert(k, v).is_some() {
                    return Err(bad(format!("repeated attribute '{k}'")));
                }
            }
            let inputs = match attrs.remove("in") {
                Some(list) => list.split(',').map(str::to_string).collect(),
                None => vec![layers.last().map_or(INPUT.to_string(), |l| l.name.clone())],
            };
            let mut num = |key: &str, default: Option<usize>| -> Result<usize> {
                match attrs.remove(key) {
                    Some(v) => v
                        .parse()
                        .map_err(|_| bad(format!("attribute {key}='{v}' is not an integer"))),
                    None => default.ok_or_else(|| bad(format!("{keyword} needs {key}="))),
                }
            };
            let kind = match keyword {
                "conv" => LayerKind::Conv2d {
                    out_channels: num("out", None)?,
                    kernel: num("k", None)?,
                    stride: num("s", Some(1))?,
                    pad: num("p", Some(0))?,
                    groups: num("g", Some(1))?,
                },
                "relu" => LayerKind::ReLU,
                "maxpool" => LayerKind::MaxPool {
                    kernel: num("k", Some(2))?,
                    stride: num("s", Some(2))?,
                    pad: num("p", Some(0))?,
                },
                "dense" => LayerKind::Dense {
                    units: num("units", None)?,
                },
                "add" => LayerKind::ResidualAdd,
                "gap" => LayerKind::GlobalAvgPool,
                "flatten" => LayerKind::Flatten,
                "softmax_xent" => LayerKind::SoftmaxXent,
                "proj" => {
                    let rank = num("rank", None)?;
                    let folded = match attrs.remove("lift") {
                        None | Some("explicit") => false,
                        Some("folded") => true,
                        Some(v) => return Err(bad(format!("lift must be explicit|folded, got '{v}'"))),
                    };
                    LayerKind::Projection { rank, folded }
                }
                other => return Err(bad(format!("unknown layer kind '{other}'"))),
            };
            if let Some(k) = attrs.keys().next() {
                return Err(bad(format!("unexpected attribute '{k}' for {keyword}")));
            }
            layers.push(Layer {
                name: lname,
                kind,
                inputs,
            });
        }
        let input_shape =
            input_shape.ok_or_else(|| Error::Config("architecture lacks an 'input CxHxW' line".into()))?;
        Graph::new(name, input_shape, declared, layers)
    }

    /// Serialises to the text format; `Graph::parse(&g.to_text())` == `g`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let [c, h, w] = self.input_shape;
        writeln!(s, "arch {}", self.name).unwrap();
        writeln!(s, "input {c}x{h}x{w}").unwrap();
        if let Some(p) = self.declared_params {
            writeln!(s, "params {p}").unwrap();
        }
        let mut prev = INPUT;
        for l in &self.layers {
            write!(s, "{} {}", l.kind.keyword(), l.name).unwrap();
            match l.kind {
                LayerKind::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    groups,
                } => {
                    write!(s, " out={out_channels} k={kernel} s={stride} p={pad}").unwrap();
                    if groups != 1 {
                        write!(s, " g={groups}").unwrap();
                    }
                }
                LayerKind::MaxPool {
                    kernel,
                    stride,
                    pad,
                } => write!(s, " k={kernel} s={stride} p={pad}").unwrap(),
                LayerKind::Dense { units } => write!(s, " units={units}").unwrap(),
                LayerKind::Projection { rank, folded } => {
                    let lift = if folded { "folded" } else { "explicit" };
                    write!(s, " rank={rank} lift={lift}").unwrap()
                }
                _ => {}
            }
            if l.inputs.len() != 1 || l.inputs[0] != prev {
                write!(s, " in={}", l.inputs.join(",")).unwrap();
            }
            s.push('\n');
            prev = &l.name;
        }
        s
    }
}

impl fmt::Display for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn check_attributes(layer: &Layer) -> Result<()> {
    let positive = match layer.kind {
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            groups,
            ..
        } => out_channels > 0 && kernel > 0 && stride > 0 && groups > 0,
        LayerKind::MaxPool { kernel, stride, .. } => kernel > 0 && stride > 0,
        LayerKind::Dense { units } => units > 0,
        LayerKind::Projection { rank, .. } => rank > 0,
        _ => true,
    };
    if positive {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "layer '{}' has a non-positive attribute",
            layer.name
        )))
    }
}

/// Sliding-window output extent with floor rounding, as in the reference
/// frameworks the shape catalogs describe.
fn window_extent(
    size: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    edge: &dyn Fn() -> String,
) -> Result<usize> {
    let padded = size + 2 * pad;
    if kernel > padded {
        return Err(Error::Dimension(format!(
            "edge {}: window {kernel} exceeds padded extent {padded}",
            edge()
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn parse_shape3(spec: &str) -> std::result::Result<Shape3, String> {
    let parts: Vec<&str> = spec.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(format!("shape '{spec}' is not CxHxW"));
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse()
            .ok()
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| format!("shape '{spec}' has a bad axis '{p}'"))?;
    }
    Ok(out)
}
