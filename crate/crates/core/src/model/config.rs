//! Architecture description and its on-disk key/value form.
//!
//! The config file is TOML with one string per layer, e.g.
//! `branch1 = ["conv 16 3 sigmoid", "pool 3", ...]`. Layer tokens:
//! `conv <filters> <kernel> <activation>`, `pool <size>`, `batchnorm`,
//! `dropout <rate>`, `flatten`, `dense <width> <activation>`.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::nn::Activation;

pub const ARCH_CONFIG_VERSION: u32 = 1;

/// Which parts of the network run: both branches fused, or one branch alone
/// feeding the same classifier (the ablation rows).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Fused,
    Branch1Only,
    Branch2Only,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Fused => "fused",
            FusionMode::Branch1Only => "branch1",
            FusionMode::Branch2Only => "branch2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fused" => Some(FusionMode::Fused),
            "branch1" | "branch1_only" => Some(FusionMode::Branch1Only),
            "branch2" | "branch2_only" => Some(FusionMode::Branch2Only),
            _ => None,
        }
    }

    pub fn uses_branch1(self) -> bool {
        matches!(self, FusionMode::Fused | FusionMode::Branch1Only)
    }

    pub fn uses_branch2(self) -> bool {
        matches!(self, FusionMode::Fused | FusionMode::Branch2Only)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: usize,
        activation: Activation,
    },
    MaxPool2d {
        pool: usize,
    },
    BatchNorm,
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        width: usize,
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn parse(token: &str) -> Result<Self, ModelError> {
        let mut parts = token.split_whitespace();
        let kind = parts.next().unwrap_or("");
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        let spec = match kind {
            "conv" => {
                let filters = parts.next().and_then(|s| s.parse().ok());
                let kernel = parts.next().and_then(|s| s.parse().ok());
                let act = parts.next().and_then(Activation::parse);
                match (filters, kernel, act) {
                    (Some(f), Some(k), Some(a)) => LayerSpec::Conv2d {
                        filters: f,
                        kernel: k,
                        activation: a,
                    },
                    _ => return bad(format!("bad conv layer `{token}`")),
                }
            }
            "pool" => match parts.next().and_then(|s| s.parse().ok()) {
                Some(p) => LayerSpec::MaxPool2d { pool: p },
                None => return bad(format!("bad pool layer `{token}`")),
            },
            "batchnorm" => LayerSpec::BatchNorm,
            "dropout" => match parts.next().and_then(|s| s.parse().ok()) {
                Some(r) => LayerSpec::Dropout { rate: r },
                None => return bad(format!("bad dropout layer `{token}`")),
            },
            "flatten" => LayerSpec::Flatten,
            "dense" => {
                let width = parts.next().and_then(|s| s.parse().ok());
                let act = parts.next().and_then(Activation::parse);
                match (width, act) {
                    (Some(w), Some(a)) => LayerSpec::Dense {
                        width: w,
                        activation: a,
                    },
                    _ => return bad(format!("bad dense layer `{token}`")),
                }
            }
            _ => return bad(format!("unknown layer kind `{token}`")),
        };
        if parts.next().is_some() {
            return bad(format!("trailing tokens in layer `{token}`"));
        }
        Ok(spec)
    }

    pub fn format(&self) -> String {
        match self {
            LayerSpec::Conv2d {
                filters,
                kernel,
                activation,
            } => format!("conv {filters} {kernel} {}", activation.name()),
            LayerSpec::MaxPool2d { pool } => format!("pool {pool}"),
            LayerSpec::BatchNorm => "batchnorm".into(),
            LayerSpec::Dropout { rate } => format!("dropout {rate}"),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Dense { width, activation } => {
                format!("dense {width} {}", activation.name())
            }
        }
    }
}

/// Declarative description of both branches and the classifier, plus the
/// preprocessing knobs an inference pass needs to reproduce its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub version: u32,
    pub num_classes: usize,
    pub input_size: usize,
    pub mode: FusionMode,
    /// Standard-deviation filter window for branch one's input.
    pub window_size: usize,
    /// Signed-log conditioning of the DCT coefficients (off by default).
    pub dct_log: bool,
    pub branch1: Vec<LayerSpec>,
    pub branch2: Vec<LayerSpec>,
    pub classifier: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
struct RawConfig {
    version: u32,
    num_classes: usize,
    input_size: usize,
    mode: String,
    window_size: usize,
    dct_log: bool,
    branch1: Vec<String>,
    branch2: Vec<String>,
    classifier: Vec<String>,
}

impl ArchConfig {
    /// Default fused architecture for the 14-class task.
    pub fn default_fused() -> Self {
        Self::with_classes(14)
    }

    /// Default layer stack parameterized by class count.
    pub fn with_classes(num_classes: usize) -> Self {
        let parse_all = |tokens: &[&str]| -> Vec<LayerSpec> {
            tokens
                .iter()
                .map(|t| LayerSpec::parse(t).expect("built-in layer token"))
                .collect()
        };
        Self {
            version: ARCH_CONFIG_VERSION,
            num_classes,
            input_size: 128,
            mode: FusionMode::Fused,
            window_size: 3,
            dct_log: false,
            branch1: parse_all(&[
                "conv 16 3 sigmoid",
                "pool 3",
                "conv 32 3 sigmoid",
                "pool 3",
                "batchnorm",
                "conv 64 3 relu",
                "pool 3",
                "dropout 0.25",
                "flatten",
            ]),
            branch2: parse_all(&[
                "conv 16 3 relu",
                "pool 3",
                "conv 32 3 relu",
                "pool 3",
                "batchnorm",
                "conv 64 3 relu",
                "conv 128 3 relu",
                "pool 3",
                "dropout 0.25",
                "flatten",
            ]),
            classifier: parse_all(&[
                "dense 512 relu",
                "dropout 0.5",
                "dense 256 relu",
                "dense 128 relu",
                "dense 64 relu",
                &format!("dense {num_classes} softmax"),
            ]),
        }
    }

    /// Same layer structure with small filter counts; suited to quick runs
    /// on small synthetic datasets.
    pub fn compact(num_classes: usize) -> Self {
        let mut cfg = Self::with_classes(num_classes);
        let parse_all = |tokens: &[&str]| -> Vec<LayerSpec> {
            tokens
                .iter()
                .map(|t| LayerSpec::parse(t).expect("built-in layer token"))
                .collect()
        };
        // Same two-sigmoid/one-relu mix; relu first keeps the expensive
        // sigmoids off the full-resolution feature maps.
        cfg.branch1 = parse_all(&[
            "conv 4 3 relu",
            "pool 3",
            "conv 8 3 sigmoid",
            "pool 3",
            "batchnorm",
            "conv 16 3 sigmoid",
            "pool 3",
            "dropout 0.25",
            "flatten",
        ]);
        cfg.branch2 = parse_all(&[
            "conv 4 3 relu",
            "pool 3",
            "conv 8 3 relu",
            "pool 3",
            "batchnorm",
            "conv 16 3 relu",
            "conv 16 3 relu",
            "pool 3",
            "dropout 0.25",
            "flatten",
        ]);
        cfg.classifier = parse_all(&[
            "dense 128 relu",
            "dropout 0.5",
            "dense 64 relu",
            "dense 48 relu",
            "dense 32 relu",
            &format!("dense {num_classes} softmax"),
        ]);
        cfg
    }

    pub fn to_toml(&self) -> String {
        let raw = RawConfig {
            version: self.version,
            num_classes: self.num_classes,
            input_size: self.input_size,
            mode: self.mode.name().to_string(),
            window_size: self.window_size,
            dct_log: self.dct_log,
            branch1: self.branch1.iter().map(LayerSpec::format).collect(),
            branch2: self.branch2.iter().map(LayerSpec::format).collect(),
            classifier: self.classifier.iter().map(LayerSpec::format).collect(),
        };
        toml::to_string(&raw).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| ModelError::BadConfig(e.to_string()))?;
        if raw.version != ARCH_CONFIG_VERSION {
            return Err(ModelError::VersionMismatch {
                expected: ARCH_CONFIG_VERSION,
                got: raw.version,
            });
        }
        let mode = FusionMode::parse(&raw.mode)
            .ok_or_else(|| ModelError::BadConfig(format!("unknown mode `{}`", raw.mode)))?;
        let parse_all = |tokens: &[String]| -> Result<Vec<LayerSpec>, ModelError> {
            tokens.iter().map(|t| LayerSpec::parse(t)).collect()
        };
        Ok(Self {
            version: raw.version,
            num_classes: raw.num_classes,
            input_size: raw.input_size,
            mode,
            window_size: raw.window_size,
            dct_log: raw.dct_log,
            branch1: parse_all(&raw.branch1)?,
            branch2: parse_all(&raw.branch2)?,
            classifier: parse_all(&raw.classifier)?,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::BadConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Preprocessing options implied by this architecture.
    pub fn preprocess_options(&self) -> crate::preprocess::PreprocessOptions {
        crate::preprocess::PreprocessOptions {
            target_size: self.input_size,
            window_size: self.window_size,
            dct_log: self.dct_log,
        }
    }

    /// Checks every structural constraint; the error names the violated one.
    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |msg: String| Err(ModelError::InvalidArchitecture(msg));
        if self.num_classes < 2 {
            return invalid(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_size < 2 {
            return invalid(format!("input_size must be at least 2, got {}", self.input_size));
        }
        if self.window_size < 3 || self.window_size.is_multiple_of(2) {
            return invalid(format!(
                "window_size must be odd and at least 3, got {}",
                self.window_size
            ));
        }

        for (name, layers) in [("branch1", &self.branch1), ("branch2", &self.branch2)] {
            let convs: Vec<Activation> = layers
                .iter()
                .filter_map(|l| match l {
                    LayerSpec::Conv2d { activation, .. } => Some(*activation),
                    _ => None,
                })
                .collect();
            let pools = layers
                .iter()
                .filter(|l| matches!(l, LayerSpec::MaxPool2d { .. }))
                .count();
            let bns = layers
                .iter()
                .filter(|l| matches!(l, LayerSpec::BatchNorm))
                .count();
            if name == "branch1" {
                if convs.len() != 3 {
                    return invalid(format!("branch1 needs exactly 3 conv layers, got {}", convs.len()));
                }
                let sigmoids = convs.iter().filter(|a| **a == Activation::Sigmoid).count();
                let relus = convs.iter().filter(|a| **a == Activation::Relu).count();
                if sigmoids != 2 || relus != 1 {
                    return invalid(format!(
                        "branch1 convs need exactly two sigmoid and one relu activations, got {sigmoids} sigmoid / {relus} relu"
                    ));
                }
            } else {
                if convs.len() != 4 {
                    return invalid(format!("branch2 needs exactly 4 conv layers, got {}", convs.len()));
                }
                if convs.iter().any(|a| *a != Activation::Relu) {
                    return invalid("branch2 convs must all use relu".into());
                }
            }
            if pools != 3 {
                return invalid(format!("{name} needs exactly 3 max-pool layers, got {pools}"));
            }
            if bns != 1 {
                return invalid(format!("{name} needs exactly 1 batchnorm layer, got {bns}"));
            }
            if !matches!(layers.last(), Some(LayerSpec::Flatten)) {
                return invalid(format!("{name} must end in a flatten layer"));
            }
            for l in layers.iter() {
                match l {
                    LayerSpec::Conv2d { kernel, filters, .. } => {
                        if *kernel != 3 {
                            return invalid(format!("{name} conv kernels must be 3x3, got {kernel}"));
                        }
                        if *filters == 0 {
                            return invalid(format!("{name} conv filter count must be positive"));
                        }
                    }
                    LayerSpec::MaxPool2d { pool } => {
                        if *pool == 0 {
                            return invalid(format!("{name} pool size must be positive"));
                        }
                    }
                    LayerSpec::Dropout { rate } => {
                        if !(0.0..1.0).contains(rate) {
                            return invalid(format!("{name} dropout rate must be in [0,1), got {rate}"));
                        }
                    }
                    LayerSpec::Dense { .. } => {
                        return invalid(format!("{name} must not contain dense layers"));
                    }
                    LayerSpec::BatchNorm | LayerSpec::Flatten => {}
                }
            }
        }

        let denses: Vec<(usize, Activation)> = self
            .classifier
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { width, activation } => Some((*width, *activation)),
                _ => None,
            })
            .collect();
        if denses.len() != 5 {
            return invalid(format!(
                "classifier needs exactly 5 dense layers, got {}",
                denses.len()
            ));
        }
        let dropouts = self
            .classifier
            .iter()
            .filter(|l| matches!(l, LayerSpec::Dropout { .. }))
            .count();
        if dropouts == 0 {
            return invalid("classifier needs at least one dropout layer".into());
        }
        for l in &self.classifier {
            match l {
                LayerSpec::Dense { .. } => {}
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return invalid(format!("classifier dropout rate must be in [0,1), got {rate}"));
                    }
                }
                other => {
                    return invalid(format!(
                        "classifier allows only dense and dropout layers, found `{}`",
                        other.format()
                    ));
                }
            }
        }
        match self.classifier.last() {
            Some(LayerSpec::Dense { width, activation })
                if *width == self.num_classes && *activation == Activation::Softmax => {}
            _ => {
                return invalid(format!(
                    "classifier must end in `dense {} softmax`",
                    self.num_classes
                ));
            }
        }
        if denses[..denses.len() - 1]
            .iter()
            .any(|(_, a)| *a == Activation::Softmax)
        {
            return invalid("softmax is reserved for the final classifier layer".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        ArchConfig::default_fused().validate().unwrap();
        ArchConfig::compact(4).validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ArchConfig::default_fused();
        let text = cfg.to_toml();
        let back = ArchConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn validation_names_the_violated_constraint() {
        let mut cfg = ArchConfig::default_fused();
        cfg.branch1.remove(0); // drop a conv
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("3 conv layers"));

        let mut cfg = ArchConfig::default_fused();
        if let LayerSpec::Conv2d { activation, .. } = &mut cfg.branch1[0] {
            *activation = Activation::Relu;
        }
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("two sigmoid"));

        let mut cfg = ArchConfig::default_fused();
        if let LayerSpec::Conv2d { kernel, .. } = &mut cfg.branch2[0] {
            *kernel = 5;
        }
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("3x3"));

        let mut cfg = ArchConfig::default_fused();
        cfg.classifier.pop();
        cfg.classifier.push(LayerSpec::Dense {
            width: 7,
            activation: Activation::Softmax,
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn layer_tokens_round_trip() {
        for token in [
            "conv 16 3 sigmoid",
            "pool 3",
            "batchnorm",
            "dropout 0.25",
            "flatten",
            "dense 512 relu",
        ] {
            let spec = LayerSpec::parse(token).unwrap();
            assert_eq!(spec.format(), token);
        }
        assert!(LayerSpec::parse("conv banana").is_err());
        assert!(LayerSpec::parse("wibble 3").is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let text = ArchConfig::default_fused()
            .to_toml()
            .replace("version = 1", "version = 9");
        assert!(matches!(
            ArchConfig::from_toml(&text),
            Err(ModelError::VersionMismatch { expected: 1, got: 9 })
        ));
    }
}
