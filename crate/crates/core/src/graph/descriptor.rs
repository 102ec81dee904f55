//! Plain-text architecture descriptor so a saved model is self-describing:
//! one line per node with its kind, hyperparameters and wiring.

use super::{Graph, GraphBuilder, LayerSpec, Port};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;

const HEADER: &str = "fedcache-arch v1";

impl Graph {
    /// Render the graph as a descriptor document.
    pub fn to_descriptor(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "prefix {}", self.prefix);
        let _ = writeln!(out, "input {}", join_dims(&self.input_shape));
        for (idx, node) in self.nodes.iter().enumerate() {
            let attrs = match &node.spec {
                LayerSpec::Dense { input, output } => format!(" in={input} out={output}"),
                LayerSpec::Conv1d { in_channels, out_channels, kernel } => {
                    format!(" cin={in_channels} cout={out_channels} k={kernel}")
                }
                LayerSpec::LayerNorm { channels } => format!(" channels={channels}"),
                LayerSpec::NearestUpsample { factor } => format!(" factor={factor}"),
                LayerSpec::StridedDownsample { in_channels, out_channels, kernel, stride } => {
                    format!(" cin={in_channels} cout={out_channels} k={kernel} stride={stride}")
                }
                LayerSpec::SinusoidalTimeEmbedding { dim } => format!(" dim={dim}"),
                LayerSpec::Reshape { dims } => format!(" dims={}", join_dims(dims)),
                _ => String::new(),
            };
            let ports = node
                .inputs
                .iter()
                .map(|p| match p {
                    Port::Input => "input".to_string(),
                    Port::Time => "time".to_string(),
                    Port::Node(i) => format!("@{i}"),
                })
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(out, "node {idx:03} {}{attrs} from={ports}", node.spec.kind_name());
        }
        let _ = writeln!(out, "output @{}", self.output);
        out
    }
}

fn join_dims(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::data(format!("bad dimension {p:?}"))))
        .collect()
}

fn parse_port(s: &str) -> Result<Port> {
    match s {
        "input" => Ok(Port::Input),
        "time" => Ok(Port::Time),
        _ => {
            let idx = s
                .strip_prefix('@')
                .and_then(|n| n.parse::<usize>().ok())
                .ok_or_else(|| Error::data(format!("bad port reference {s:?}")))?;
            Ok(Port::Node(idx))
        }
    }
}

/// Rebuild a graph from descriptor text produced by [`Graph::to_descriptor`].
pub fn graph_from_descriptor(text: &str) -> Result<Graph> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some(HEADER) {
        return Err(Error::data("architecture descriptor missing header".to_string()));
    }
    let mut prefix = String::new();
    let mut builder: Option<GraphBuilder> = None;
    let mut output: Option<Port> = None;
    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("prefix") => prefix = parts.next().unwrap_or("").to_string(),
            Some("input") => {
                let dims = parse_dims(parts.next().ok_or_else(|| Error::data("input line missing dims".to_string()))?)?;
                builder = Some(GraphBuilder::new(dims));
            }
            Some("node") => {
                let b = builder
                    .as_mut()
                    .ok_or_else(|| Error::data("node line before input line".to_string()))?;
                let _idx = parts.next();
                let kind = parts
                    .next()
                    .ok_or_else(|| Error::data("node line missing kind".to_string()))?;
                let mut attrs: HashMap<&str, &str> = HashMap::new();
                for kv in parts {
                    if let Some((k, v)) = kv.split_once('=') {
                        attrs.insert(k, v);
                    }
                }
                let need = |key: &str| -> Result<usize> {
                    attrs
                        .get(key)
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| Error::data(format!("{kind}: missing or bad attribute {key}")))
                };
                let spec = match kind {
                    "dense" => LayerSpec::Dense { input: need("in")?, output: need("out")? },
                    "conv1d" => LayerSpec::Conv1d {
                        in_channels: need("cin")?,
                        out_channels: need("cout")?,
                        kernel: need("k")?,
                    },
                    "layer-norm" => LayerSpec::LayerNorm { channels: need("channels")? },
                    "silu" => LayerSpec::Silu,
                    "relu" => LayerSpec::Relu,
                    "sigmoid" => LayerSpec::Sigmoid,
                    "nearest-upsample" => LayerSpec::NearestUpsample { factor: need("factor")? },
                    "strided-downsample" => LayerSpec::StridedDownsample {
                        in_channels: need("cin")?,
                        out_channels: need("cout")?,
                        kernel: need("k")?,
                        stride: need("stride")?,
                    },
                    "sinusoidal-time-embedding" => {
                        LayerSpec::SinusoidalTimeEmbedding { dim: need("dim")? }
                    }
                    "skip-concat" => LayerSpec::SkipConcat,
                    "broadcast-add" => LayerSpec::BroadcastAdd,
                    "reshape" => LayerSpec::Reshape {
                        dims: parse_dims(
                            attrs.get("dims").ok_or_else(|| Error::data("reshape missing dims".to_string()))?,
                        )?,
                    },
                    other => return Err(Error::data(format!("unknown layer kind {other:?}"))),
                };
                let ports = attrs
                    .get("from")
                    .ok_or_else(|| Error::data(format!("{kind}: missing from=")))?
                    .split(',')
                    .map(parse_port)
                    .collect::<Result<Vec<_>>>()?;
                b.add(spec, &ports)?;
            }
            Some("output") => {
                output = Some(parse_port(
                    parts.next().ok_or_else(|| Error::data("output line missing port".to_string()))?,
                )?);
            }
            Some(other) => return Err(Error::data(format!("unknown descriptor line {other:?}"))),
            None => {}
        }
    }
    let builder = builder.ok_or_else(|| Error::data("descriptor has no input line".to_string()))?;
    let output = output.ok_or_else(|| Error::data("descriptor has no output line".to_string()))?;
    builder.finish(output, &prefix)
}
