//! Declarative architecture descriptions.
//!
//! An [`ArchitectureSpec`] lists one or more superlayers (parallel conv
//! towers, one per input channel group), optional cross-connection segments
//! at the pooling boundaries, and a shared classifier tail.  A plain
//! single-tower CNN is simply a spec with one superlayer holding all input
//! channels and no cross segments.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::{EdgeSpec, LayerSpec};

/// One conv tower.  `stages[i]` is the block of layers running up to and
/// including pooling point `i` (pool and any post-pool dropout included).
#[derive(Debug, Clone, PartialEq)]
pub struct SuperlayerSpec {
    pub name: String,
    /// How many consecutive input channels this tower consumes.
    pub in_channels: usize,
    pub stages: Vec<Vec<LayerSpec>>,
}

/// A directed edge inside a cross-connection segment: `from`'s stage output
/// feeding `to`'s next stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEdgeSpec {
    pub from: String,
    pub to: String,
    pub edge: EdgeSpec,
}

/// Information exchange inserted after pooling point `after_stage`.
/// Each destination concatenates its incoming edges in listed order.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossConnectionSpec {
    pub after_stage: usize,
    pub edges: Vec<CrossEdgeSpec>,
    /// Applied to every learned 1x1 edge output (the host network's
    /// activation family); identity edges pass through untouched.
    pub conv_post: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input_height: usize,
    pub input_width: usize,
    pub superlayers: Vec<SuperlayerSpec>,
    pub cross: Vec<CrossConnectionSpec>,
    /// Shared classifier applied to the concatenated tower outputs.
    pub tail: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ArchitectureSpec {
    /// Total input channels, summed over superlayers in declared order.
    pub fn input_channels(&self) -> usize {
        self.superlayers.iter().map(|s| s.in_channels).sum()
    }

    pub fn superlayer(&self, name: &str) -> Option<&SuperlayerSpec> {
        self.superlayers.iter().find(|s| s.name == name)
    }

    /// Structural checks that do not require materialising parameters.
    /// Channel/spatial arithmetic is validated again, exactly, during
    /// materialisation.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(
                "architecture",
                format!("need at least 2 classes, got {}", self.num_classes),
            ));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::invalid("architecture", "input size must be positive"));
        }
        if self.superlayers.is_empty() {
            return Err(Error::invalid("architecture", "no superlayers"));
        }
        let n_stages = self.superlayers[0].stages.len();
        for sl in &self.superlayers {
            if sl.name.is_empty() || sl.name.contains('.') || sl.name.contains('-') {
                return Err(Error::invalid(
                    "architecture",
                    format!("superlayer name `{}` must be non-empty and avoid '.'/'-'", sl.name),
                ));
            }
            if sl.in_channels == 0 {
                return Err(Error::invalid(
                    "architecture",
                    format!("superlayer `{}` consumes no channels", sl.name),
                ));
            }
            if sl.stages.len() != n_stages {
                return Err(Error::invalid(
                    "architecture",
                    format!(
                        "superlayer `{}` has {} stages, `{}` has {n_stages}; towers must pool in lockstep",
                        sl.name,
                        sl.stages.len(),
                        self.superlayers[0].name
                    ),
                ));
            }
        }
        for (i, sl) in self.superlayers.iter().enumerate() {
            if self.superlayers[..i].iter().any(|o| o.name == sl.name) {
                return Err(Error::invalid(
                    "architecture",
                    format!("duplicate superlayer name `{}`", sl.name),
                ));
            }
        }
        // Pooling layers must align across towers so spatial dims agree at
        // every cross/concat point.
        for stage in 0..n_stages {
            let pools: Vec<Vec<&LayerSpec>> = self
                .superlayers
                .iter()
                .map(|sl| {
                    sl.stages[stage]
                        .iter()
                        .filter(|l| matches!(l, LayerSpec::MaxPool { .. } | LayerSpec::GlobalMaxPool))
                        .collect()
                })
                .collect();
            for (sl, p) in self.superlayers.iter().zip(&pools) {
                if p.len() != pools[0].len() || p.iter().zip(&pools[0]).any(|(a, b)| a != b) {
                    return Err(Error::invalid(
                        "architecture",
                        format!(
                            "stage {stage} pools differ between `{}` and `{}`",
                            self.superlayers[0].name, sl.name
                        ),
                    ));
                }
            }
        }
        // Cross segments: known towers, valid anchors, identity edges only on
        // self paths, every tower kept alive, no duplicate edges.
        for (ci, cross) in self.cross.iter().enumerate() {
            if cross.after_stage + 1 >= n_stages {
                return Err(Error::invalid(
                    "architecture",
                    format!(
                        "cross segment {ci} sits after stage {} but there is no following stage",
                        cross.after_stage
                    ),
                ));
            }
            if cross.edges.is_empty() {
                return Err(Error::invalid("architecture", format!("cross segment {ci} has no edges")));
            }
            for (ei, e) in cross.edges.iter().enumerate() {
                for name in [&e.from, &e.to] {
                    if self.superlayer(name).is_none() {
                        return Err(Error::UnknownName(name.clone()));
                    }
                }
                if matches!(e.edge, EdgeSpec::Identity) && e.from != e.to {
                    return Err(Error::invalid(
                        "architecture",
                        format!(
                            "cross segment {ci} edge {}->{}: identity edges must connect a tower to itself",
                            e.from, e.to
                        ),
                    ));
                }
                if cross.edges[..ei].iter().any(|o| o.from == e.from && o.to == e.to) {
                    return Err(Error::invalid(
                        "architecture",
                        format!("cross segment {ci} has duplicate edge {}->{}", e.from, e.to),
                    ));
                }
            }
            for sl in &self.superlayers {
                if !cross.edges.iter().any(|e| e.to == sl.name) {
                    return Err(Error::invalid(
                        "architecture",
                        format!("cross segment {ci} leaves tower `{}` without inputs", sl.name),
                    ));
                }
            }
        }
        if self.tail.is_empty() {
            return Err(Error::invalid("architecture", "empty tail"));
        }
        // Softmax may only close the network.
        for (i, l) in self.tail.iter().enumerate() {
            if matches!(l, LayerSpec::Softmax) && i + 1 != self.tail.len() {
                return Err(Error::invalid(
                    "architecture",
                    "softmax must be the final tail layer",
                ));
            }
        }
        for sl in &self.superlayers {
            for stage in &sl.stages {
                for l in stage {
                    if matches!(l, LayerSpec::Dense { .. } | LayerSpec::Flatten | LayerSpec::Softmax) {
                        return Err(Error::invalid(
                            "architecture",
                            format!("layer {:?} belongs in the tail, not in tower `{}`", l, sl.name),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}
