//! The four built-in architectures.
//!
//! Two families, each in a plain single-tower form and a cross-modal form
//! with one superlayer per YUV channel:
//!
//! * `kerasnet` / `x-kerasnet` — the compact ReLU network: two conv stages
//!   (2x conv3x3 + pool each), a 512-unit hidden layer, dropout 0.25/0.5.
//! * `fitnet4` / `x-fitnet4` — the deep thin maxout network: 17 conv layers
//!   of 2-piece maxout units with batch norm, global pooling, a 500-unit
//!   5-piece maxout hidden layer, dropout 0.2 throughout and L2 5e-4.
//!
//! Conv channel counts below are literal linear outputs; a conv feeding
//! `Maxout { pieces: k }` lists `k` times the nominal feature count.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::spec::{ArchitectureSpec, CrossConnectionSpec, CrossEdgeSpec, SuperlayerSpec};
use crate::error::{Error, Result};
use crate::layers::{EdgeSpec, LayerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Preset {
    KerasNet,
    XKerasNet,
    FitNet4,
    XFitNet4,
}

impl Preset {
    pub fn all() -> [Preset; 4] {
        [Preset::KerasNet, Preset::XKerasNet, Preset::FitNet4, Preset::XFitNet4]
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::KerasNet => "kerasnet",
            Preset::XKerasNet => "x-kerasnet",
            Preset::FitNet4 => "fitnet4",
            Preset::XFitNet4 => "x-fitnet4",
        }
    }

    pub fn parse(s: &str) -> Result<Preset> {
        Preset::all()
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownName(s.to_string()))
    }

    /// Does this preset split the input into per-channel towers?
    pub fn is_cross_modal(self) -> bool {
        matches!(self, Preset::XKerasNet | Preset::XFitNet4)
    }

    /// The cross-modal counterpart of a baseline (or vice versa), for paired
    /// comparisons.
    pub fn counterpart(self) -> Preset {
        match self {
            Preset::KerasNet => Preset::XKerasNet,
            Preset::XKerasNet => Preset::KerasNet,
            Preset::FitNet4 => Preset::XFitNet4,
            Preset::XFitNet4 => Preset::FitNet4,
        }
    }
}

/// Knobs that change a preset's construction without redefining it.
#[derive(Debug, Clone, Copy)]
pub struct PresetOptions {
    /// Build x-fitnet4 cross-connection 1x1 convs as 2-piece maxout units
    /// (doubling their linear outputs) instead of plain linear maps.
    pub cross_maxout: bool,
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions { cross_maxout: false }
    }
}

/// Published training regime for a preset.
#[derive(Debug, Clone, Copy)]
pub struct TrainDefaults {
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
}

pub fn train_defaults(preset: Preset) -> TrainDefaults {
    match preset {
        Preset::KerasNet | Preset::XKerasNet => TrainDefaults { epochs: 200, batch_size: 32, l2: 0.0 },
        Preset::FitNet4 | Preset::XFitNet4 => TrainDefaults { epochs: 230, batch_size: 128, l2: 0.0005 },
    }
}

pub fn architecture(preset: Preset, num_classes: usize, opts: PresetOptions) -> ArchitectureSpec {
    let spec = match preset {
        Preset::KerasNet => kerasnet(num_classes),
        Preset::XKerasNet => x_kerasnet(num_classes),
        Preset::FitNet4 => fitnet4(num_classes),
        Preset::XFitNet4 => x_fitnet4(num_classes, opts.cross_maxout),
    };
    debug_assert!(spec.validate().is_ok());
    spec
}

fn conv(out_channels: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv { out_channels, kernel }
}

fn kerasnet_stage(c: usize) -> Vec<LayerSpec> {
    vec![
        conv(c, 3),
        LayerSpec::Relu,
        conv(c, 3),
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
        LayerSpec::Dropout { rate: 0.25 },
    ]
}

fn kerasnet_tail(num_classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 512 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::Dense { units: num_classes },
        LayerSpec::Softmax,
    ]
}

fn kerasnet(num_classes: usize) -> ArchitectureSpec {
    ArchitectureSpec {
        name: "kerasnet".to_string(),
        input_height: 32,
        input_width: 32,
        superlayers: vec![SuperlayerSpec {
            name: "rgb".to_string(),
            in_channels: 3,
            stages: vec![kerasnet_stage(64), kerasnet_stage(128)],
        }],
        cross: vec![],
        tail: kerasnet_tail(num_classes),
        num_classes,
    }
}

fn x_kerasnet(num_classes: usize) -> ArchitectureSpec {
    let tower = |name: &str, c0: usize, c1: usize| SuperlayerSpec {
        name: name.to_string(),
        in_channels: 1,
        stages: vec![kerasnet_stage(c0), kerasnet_stage(c1)],
    };
    ArchitectureSpec {
        name: "x-kerasnet".to_string(),
        input_height: 32,
        input_width: 32,
        // The luma tower carries twice the chroma width, mirroring how much
        // structure each plane holds.
        superlayers: vec![tower("Y", 32, 64), tower("U", 16, 32), tower("V", 16, 32)],
        cross: vec![CrossConnectionSpec {
            after_stage: 0,
            edges: cross_edges(&[
                ("Y", "Y", None),
                ("U", "Y", Some(16)),
                ("V", "Y", Some(16)),
                ("U", "U", None),
                ("Y", "U", Some(32)),
                ("V", "V", None),
                ("Y", "V", Some(32)),
            ]),
            conv_post: vec![LayerSpec::Relu],
        }],
        tail: kerasnet_tail(num_classes),
        num_classes,
    }
}

/// `(from, to, conv channels)`; `None` marks an identity self edge.
fn cross_edges(table: &[(&str, &str, Option<usize>)]) -> Vec<CrossEdgeSpec> {
    table
        .iter()
        .map(|&(from, to, c)| CrossEdgeSpec {
            from: from.to_string(),
            to: to.to_string(),
            edge: match c {
                None => EdgeSpec::Identity,
                Some(out_channels) => EdgeSpec::Conv1x1 { out_channels },
            },
        })
        .collect()
}

/// `nominal` post-maxout feature counts; convs emit `2 * nominal`.
fn maxout_convs(nominal: &[usize]) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for &c in nominal {
        layers.push(conv(2 * c, 3));
        layers.push(LayerSpec::Maxout { pieces: 2 });
        layers.push(LayerSpec::BatchNorm);
    }
    layers
}

fn fitnet_stage(nominal: &[usize], head_dropout: bool, global: bool) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    if head_dropout {
        layers.push(LayerSpec::Dropout { rate: 0.2 });
    }
    layers.extend(maxout_convs(nominal));
    layers.push(if global { LayerSpec::GlobalMaxPool } else { LayerSpec::MaxPool { window: 2 } });
    layers.push(LayerSpec::Dropout { rate: 0.2 });
    layers
}

fn fitnet_tail(num_classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 2500 },
        LayerSpec::Maxout { pieces: 5 },
        LayerSpec::BatchNorm,
        LayerSpec::Dropout { rate: 0.2 },
        LayerSpec::Dense { units: num_classes },
        LayerSpec::Softmax,
    ]
}

fn fitnet4(num_classes: usize) -> ArchitectureSpec {
    ArchitectureSpec {
        name: "fitnet4".to_string(),
        input_height: 32,
        input_width: 32,
        superlayers: vec![SuperlayerSpec {
            name: "rgb".to_string(),
            in_channels: 3,
            stages: vec![
                fitnet_stage(&[32, 32, 32, 48, 48], true, false),
                fitnet_stage(&[80; 6], false, false),
                fitnet_stage(&[128; 6], false, true),
            ],
        }],
        cross: vec![],
        tail: fitnet_tail(num_classes),
        num_classes,
    }
}

fn x_fitnet4(num_classes: usize, cross_maxout: bool) -> ArchitectureSpec {
    let tower = |name: &str, s0: &[usize], s1: usize, s2: usize| SuperlayerSpec {
        name: name.to_string(),
        in_channels: 1,
        stages: vec![
            fitnet_stage(s0, true, false),
            fitnet_stage(&[s1; 6], false, false),
            fitnet_stage(&[s2; 6], false, true),
        ],
    };
    // Learned 1x1 edges everywhere (self paths included).  With
    // `cross_maxout` the convs double up and a 2-piece maxout follows; either
    // way batch norm closes each edge, matching the host family.
    let scale = if cross_maxout { 2 } else { 1 };
    let mut conv_post = Vec::new();
    if cross_maxout {
        conv_post.push(LayerSpec::Maxout { pieces: 2 });
    }
    conv_post.push(LayerSpec::BatchNorm);
    let seg = |after_stage: usize, self_y: usize, self_uv: usize, y_to_uv: usize, uv_to_y: usize| {
        CrossConnectionSpec {
            after_stage,
            edges: cross_edges(&[
                ("Y", "Y", Some(scale * self_y)),
                ("U", "Y", Some(scale * uv_to_y)),
                ("V", "Y", Some(scale * uv_to_y)),
                ("U", "U", Some(scale * self_uv)),
                ("Y", "U", Some(scale * y_to_uv)),
                ("V", "V", Some(scale * self_uv)),
                ("Y", "V", Some(scale * y_to_uv)),
            ]),
            conv_post: conv_post.clone(),
        }
    };
    ArchitectureSpec {
        name: "x-fitnet4".to_string(),
        input_height: 32,
        input_width: 32,
        superlayers: vec![
            tower("Y", &[24, 24, 24, 36, 36], 60, 96),
            tower("U", &[12, 12, 12, 18, 18], 30, 48),
            tower("V", &[12, 12, 12, 18, 18], 30, 48),
        ],
        cross: vec![
            // Post-stage-0 features: Y=36, U=V=18 -> Y=60, U=V=30.
            seg(0, 36, 18, 12, 12),
            // Post-stage-1 features: Y=60, U=V=30 -> Y=96, U=V=48.
            seg(1, 60, 30, 18, 18),
        ],
        tail: fitnet_tail(num_classes),
        num_classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_validate() {
        for p in Preset::all() {
            for classes in [10, 100] {
                architecture(p, classes, PresetOptions::default()).validate().unwrap();
            }
        }
        architecture(Preset::XFitNet4, 10, PresetOptions { cross_maxout: true })
            .validate()
            .unwrap();
    }

    #[test]
    fn preset_names_roundtrip() {
        for p in Preset::all() {
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
        }
        assert!(Preset::parse("resnet").is_err());
    }

    #[test]
    fn cross_towers_split_yuv() {
        let s = architecture(Preset::XKerasNet, 10, PresetOptions::default());
        assert_eq!(s.superlayers.len(), 3);
        assert_eq!(s.input_channels(), 3);
        let b = architecture(Preset::KerasNet, 10, PresetOptions::default());
        assert_eq!(b.superlayers.len(), 1);
        assert_eq!(b.input_channels(), 3);
    }

    #[test]
    fn fitnet_has_seventeen_convs_per_tower_path() {
        let s = architecture(Preset::FitNet4, 10, PresetOptions::default());
        let convs: usize = s.superlayers[0]
            .stages
            .iter()
            .flatten()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count();
        assert_eq!(convs, 17);
    }

    #[test]
    fn counterparts_pair_up() {
        assert_eq!(Preset::KerasNet.counterpart(), Preset::XKerasNet);
        assert_eq!(Preset::XFitNet4.counterpart(), Preset::FitNet4);
    }
}
