//! Architectures as TOML files, so experiments beyond the built-in presets
//! do not require recompiling.
//!
//! ```toml
//! name = "tiny"
//! input_height = 32
//! input_width = 32
//! num_classes = 10
//! tail = ["flatten", "dense 64", "relu", "dense 10", "softmax"]
//!
//! [[superlayer]]
//! name = "rgb"
//! in_channels = 3
//! stages = [["conv 32x3", "relu", "maxpool 2", "dropout 0.25"]]
//! ```
//!
//! Layers are single tokens with at most one argument: `conv OUTxK`,
//! `maxout PIECES`, `maxpool WINDOW`, `dropout RATE`, `dense UNITS`, and the
//! bare `relu`, `batchnorm`, `globalmaxpool`, `flatten`, `identity`,
//! `softmax`.  Cross-connection segments add `[[cross]]` tables whose edges
//! use `kind = "identity"` or `kind = "conv1x1 MAPS"`; `post` lists the
//! activation applied after every learned edge.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xcnn_core::graph::{ArchitectureSpec, CrossConnectionSpec, CrossEdgeSpec, SuperlayerSpec};
use xcnn_core::layers::{EdgeSpec, LayerSpec};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct ArchFile {
    name: String,
    input_height: usize,
    input_width: usize,
    num_classes: usize,
    tail: Vec<String>,
    #[serde(rename = "superlayer")]
    superlayers: Vec<SuperlayerFile>,
    #[serde(default, rename = "cross", skip_serializing_if = "Vec::is_empty")]
    cross: Vec<CrossFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SuperlayerFile {
    name: String,
    in_channels: usize,
    stages: Vec<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CrossFile {
    after_stage: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    post: Vec<String>,
    #[serde(rename = "edge")]
    edges: Vec<EdgeFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeFile {
    from: String,
    to: String,
    kind: String,
}

fn parse_layer(s: &str) -> Result<LayerSpec> {
    let bad = || Error::invalid(format!("unrecognised layer `{s}`"));
    let mut it = s.split_whitespace();
    let head = it.next().ok_or_else(bad)?;
    let arg = it.next();
    if it.next().is_some() {
        return Err(bad());
    }
    let num = |a: Option<&str>| a.ok_or_else(bad)?.parse::<usize>().map_err(|_| bad());
    Ok(match (head, arg) {
        ("relu", None) => LayerSpec::Relu,
        ("batchnorm", None) => LayerSpec::BatchNorm,
        ("globalmaxpool", None) => LayerSpec::GlobalMaxPool,
        ("flatten", None) => LayerSpec::Flatten,
        ("identity", None) => LayerSpec::Identity,
        ("softmax", None) => LayerSpec::Softmax,
        ("conv", Some(a)) => {
            let (out, k) = a.split_once('x').ok_or_else(bad)?;
            LayerSpec::Conv {
                out_channels: out.parse().map_err(|_| bad())?,
                kernel: k.parse().map_err(|_| bad())?,
            }
        }
        ("maxout", _) => LayerSpec::Maxout { pieces: num(arg)? },
        ("maxpool", _) => LayerSpec::MaxPool { window: num(arg)? },
        ("dense", _) => LayerSpec::Dense { units: num(arg)? },
        ("dropout", Some(a)) => {
            LayerSpec::Dropout { rate: a.parse().map_err(|_| bad())? }
        }
        _ => return Err(bad()),
    })
}

fn layer_token(l: &LayerSpec) -> String {
    match *l {
        LayerSpec::Conv { out_channels, kernel } => format!("conv {out_channels}x{kernel}"),
        LayerSpec::Relu => "relu".into(),
        LayerSpec::Maxout { pieces } => format!("maxout {pieces}"),
        LayerSpec::MaxPool { window } => format!("maxpool {window}"),
        LayerSpec::GlobalMaxPool => "globalmaxpool".into(),
        LayerSpec::BatchNorm => "batchnorm".into(),
        LayerSpec::Dropout { rate } => format!("dropout {rate}"),
        LayerSpec::Dense { units } => format!("dense {units}"),
        LayerSpec::Flatten => "flatten".into(),
        LayerSpec::Identity => "identity".into(),
        LayerSpec::Softmax => "softmax".into(),
    }
}

fn parse_edge_kind(s: &str) -> Result<EdgeSpec> {
    if s == "identity" {
        return Ok(EdgeSpec::Identity);
    }
    if let Some(maps) = s.strip_prefix("conv1x1 ") {
        return Ok(EdgeSpec::Conv1x1 {
            out_channels: maps
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad edge map count in `{s}`")))?,
        });
    }
    Err(Error::invalid(format!("unrecognised edge kind `{s}`")))
}

fn edge_token(e: &EdgeSpec) -> String {
    match *e {
        EdgeSpec::Identity => "identity".into(),
        EdgeSpec::Conv1x1 { out_channels } => format!("conv1x1 {out_channels}"),
    }
}

fn layers(tokens: &[String]) -> Result<Vec<LayerSpec>> {
    tokens.iter().map(|t| parse_layer(t)).collect()
}

/// Parse TOML text into a validated architecture.
pub fn parse_architecture(text: &str) -> Result<ArchitectureSpec> {
    let file: ArchFile =
        toml::from_str(text).map_err(|e| Error::invalid(format!("architecture file: {e}")))?;
    let spec = ArchitectureSpec {
        name: file.name,
        input_height: file.input_height,
        input_width: file.input_width,
        num_classes: file.num_classes,
        tail: layers(&file.tail)?,
        superlayers: file
            .superlayers
            .into_iter()
            .map(|s| {
                Ok(SuperlayerSpec {
                    name: s.name,
                    in_channels: s.in_channels,
                    stages: s.stages.iter().map(|st| layers(st)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?,
        cross: file
            .cross
            .into_iter()
            .map(|c| {
                Ok(CrossConnectionSpec {
                    after_stage: c.after_stage,
                    conv_post: layers(&c.post)?,
                    edges: c
                        .edges
                        .into_iter()
                        .map(|e| {
                            Ok(CrossEdgeSpec {
                                edge: parse_edge_kind(&e.kind)?,
                                from: e.from,
                                to: e.to,
                            })
                        })
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn load_architecture(path: &Path) -> Result<ArchitectureSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_architecture(&text)
}

/// Render a spec back into the file format (useful for seeding a custom
/// architecture from a preset).
pub fn format_architecture(spec: &ArchitectureSpec) -> String {
    let file = ArchFile {
        name: spec.name.clone(),
        input_height: spec.input_height,
        input_width: spec.input_width,
        num_classes: spec.num_classes,
        tail: spec.tail.iter().map(layer_token).collect(),
        superlayers: spec
            .superlayers
            .iter()
            .map(|s| SuperlayerFile {
                name: s.name.clone(),
                in_channels: s.in_channels,
                stages: s.stages.iter().map(|st| st.iter().map(layer_token).collect()).collect(),
            })
            .collect(),
        cross: spec
            .cross
            .iter()
            .map(|c| CrossFile {
                after_stage: c.after_stage,
                post: c.conv_post.iter().map(layer_token).collect(),
                edges: c
                    .edges
                    .iter()
                    .map(|e| EdgeFile {
                        from: e.from.clone(),
                        to: e.to.clone(),
                        kind: edge_token(&e.edge),
                    })
                    .collect(),
            })
            .collect(),
    };
    toml::to_string_pretty(&file).expect("architecture serialises")
}

#[cfg(test)]
mod tests {
    use super::*;
    use xcnn_core::graph::{architecture, Preset, PresetOptions};

    #[test]
    fn presets_survive_a_format_parse_round_trip() {
        for preset in Preset::all() {
            let spec = architecture(preset, 10, PresetOptions::default());
            let text = format_architecture(&spec);
            let back = parse_architecture(&text)
                .unwrap_or_else(|e| panic!("{}: {e}\n{text}", preset.name()));
            assert_eq!(back, spec, "{} round trip", preset.name());
        }
    }

    #[test]
    fn a_small_hand_written_file_parses() {
        let text = r#"
            name = "tiny"
            input_height = 8
            input_width = 8
            num_classes = 4
            tail = ["flatten", "dense 4", "softmax"]

            [[superlayer]]
            name = "rgb"
            in_channels = 3
            stages = [["conv 6x3", "relu", "maxpool 2", "dropout 0.1"]]
        "#;
        let spec = parse_architecture(text).unwrap();
        assert_eq!(spec.superlayers[0].stages[0].len(), 4);
        assert_eq!(
            spec.superlayers[0].stages[0][0],
            LayerSpec::Conv { out_channels: 6, kernel: 3 }
        );
        // It must also build.
        xcnn_core::graph::NetworkGraph::<f32>::build(spec, 0).unwrap();
    }

    #[test]
    fn bad_tokens_and_invalid_wiring_are_rejected() {
        assert!(parse_layer("conv 64").is_err());
        assert!(parse_layer("conv 64x3x2").is_err());
        assert!(parse_layer("pool 2").is_err());
        assert!(parse_layer("dropout two").is_err());
        assert!(parse_edge_kind("conv2x2 8").is_err());

        // Structurally valid TOML, structurally invalid network: dense
        // before flatten in a tower.
        let text = r#"
            name = "broken"
            input_height = 8
            input_width = 8
            num_classes = 4
            tail = ["dense 4", "softmax"]

            [[superlayer]]
            name = "rgb"
            in_channels = 3
            stages = [["dense 7"]]
        "#;
        assert!(parse_architecture(text).is_err());
    }
}
