use std::collections::BTreeMap;
use std::fmt;

use crate::attention::{attn_layer_param_count, SampleShape};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 10;

/// Convolution plan of the VGG-like control network at divisor 1:
/// (output channels, kernel, stride, padding, bias).
pub(crate) const CONTROL_PLAN: [(usize, usize, usize, usize, bool); 6] = [
    (100, 3, 1, 1, true),
    (100, 3, 1, 1, true),
    (100, 2, 2, 0, false),
    (200, 3, 1, 1, true),
    (200, 3, 1, 1, true),
    (200, 2, 2, 0, false),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Six convolutions and a classifier; channel widths divided by `scale_divisor`.
    Control { scale_divisor: usize },
    /// Stacked element-wise attention layers and a classifier.
    Attention {
        layers: usize,
        heads: usize,
        post_norm: bool,
        skip: bool,
    },
}

/// Declarative description of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub input: SampleShape,
    pub arch: Architecture,
}

pub const FASHION_MNIST_SHAPE: SampleShape = [1, 28, 28];
pub const CIFAR10_SHAPE: SampleShape = [3, 32, 32];

/// Built-in configuration ids accepted by [`ModelSpec::preset`].
pub const PRESET_IDS: &[&str] = &[
    "control-fmnist",
    "control-cifar",
    "attn-A",
    "attn-B",
    "attn-C",
    "attn-D",
    "attn-E",
    "attn-F",
    "attn-G",
    "attn-H",
    "attn-cifar",
    "attn-1head",
];

impl ModelSpec {
    pub fn control(input: SampleShape, scale_divisor: usize) -> Self {
        Self {
            input,
            arch: Architecture::Control { scale_divisor },
        }
    }

    pub fn attention(input: SampleShape, layers: usize, heads: usize, post_norm: bool) -> Self {
        Self {
            input,
            arch: Architecture::Attention {
                layers,
                heads,
                post_norm,
                skip: true,
            },
        }
    }

    pub fn preset(id: &str) -> Result<Self> {
        let fm = FASHION_MNIST_SHAPE;
        let spec = match id {
            "control-fmnist" => Self::control(fm, 1),
            "control-cifar" => Self::control(CIFAR10_SHAPE, 1),
            "attn-A" => Self::attention(fm, 2, 8, true),
            "attn-B" => Self::attention(fm, 2, 8, false),
            "attn-C" => Self::attention(fm, 2, 16, true),
            "attn-D" => Self::attention(fm, 2, 16, false),
            "attn-E" => Self::attention(fm, 4, 8, true),
            "attn-F" => Self::attention(fm, 4, 8, false),
            "attn-G" => Self::attention(fm, 4, 16, true),
            "attn-H" => Self::attention(fm, 4, 16, false),
            "attn-cifar" => Self::attention(CIFAR10_SHAPE, 4, 8, false),
            "attn-1head" => Self::attention(fm, 2, 1, true),
            other => {
                return Err(Error::Config(format!(
                    "unknown model id '{other}' (known: {})",
                    PRESET_IDS.join(", ")
                )))
            }
        };
        Ok(spec)
    }

    pub fn is_attention(&self) -> bool {
        matches!(self.arch, Architecture::Attention { .. })
    }

    pub fn with_skip(mut self, on: bool) -> Self {
        if let Architecture::Attention { skip, .. } = &mut self.arch {
            *skip = on;
        }
        self
    }

    pub fn with_scale_divisor(mut self, d: usize) -> Self {
        if let Architecture::Control { scale_divisor } = &mut self.arch {
            *scale_divisor = d;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("empty input shape {:?}", self.input)));
        }
        match self.arch {
            Architecture::Control { scale_divisor } => {
                if scale_divisor == 0 || 100 % scale_divisor != 0 {
                    return Err(Error::Config(format!(
                        "scale divisor {scale_divisor} does not divide 100"
                    )));
                }
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Config(format!(
                        "control model downsamples twice by 2; {h}x{w} is not divisible by 4"
                    )));
                }
            }
            Architecture::Attention { layers, heads, .. } => {
                if layers == 0 || heads == 0 {
                    return Err(Error::Config(format!(
                        "attention model needs at least one layer and one head (got {layers} layers, {heads} heads)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Conv layers of the control network as (in, out, kernel, stride, pad, bias).
    pub(crate) fn control_convs(&self) -> Vec<(usize, usize, usize, usize, usize, bool)> {
        let Architecture::Control { scale_divisor } = self.arch else {
            return Vec::new();
        };
        let mut in_c = self.input[0];
        CONTROL_PLAN
            .iter()
            .map(|&(out, k, stride, pad, bias)| {
                let out = out / scale_divisor;
                let layer = (in_c, out, k, stride, pad, bias);
                in_c = out;
                layer
            })
            .collect()
    }

    /// Flattened feature count entering the classifier.
    pub fn classifier_inputs(&self) -> usize {
        let [c, h, w] = self.input;
        match self.arch {
            Architecture::Control { scale_divisor } => (200 / scale_divisor) * (h / 4) * (w / 4),
            Architecture::Attention { .. } => c * h * w,
        }
    }

    /// Parameter count from the closed-form per-layer formulas, without
    /// building the model: `in·out·k²` (+`out` bias) per convolution,
    /// `in·out + out` for the classifier, and the attention-layer formula.
    pub fn analytic_param_count(&self) -> usize {
        let [c, h, w] = self.input;
        let body: usize = match self.arch {
            Architecture::Control { .. } => self
                .control_convs()
                .iter()
                .map(|&(i, o, k, _, _, bias)| i * o * k * k + if bias { o } else { 0 })
                .sum(),
            Architecture::Attention {
                layers,
                heads,
                post_norm,
                ..
            } => layers * attn_layer_param_count(c, h, w, heads, post_norm),
        };
        body + self.classifier_inputs() * NUM_CLASSES + NUM_CLASSES
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let [c, h, w] = self.input;
        let mut out = String::new();
        match self.arch {
            Architecture::Control { scale_divisor } => {
                out.push_str("kind=control\n");
                out.push_str(&format!("input={c}x{h}x{w}\n"));
                out.push_str(&format!("scale_divisor={scale_divisor}\n"));
            }
            Architecture::Attention {
                layers,
                heads,
                post_norm,
                skip,
            } => {
                out.push_str("kind=attention\n");
                out.push_str(&format!("input={c}x{h}x{w}\n"));
                out.push_str(&format!(
                    "layers={layers}\nheads={heads}\npost_norm={post_norm}\nskip={skip}\n"
                ));
            }
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        Self::from_map(&map)
    }

    pub(crate) fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| map.get(k).map(String::as_str);
        let input = match get("input") {
            Some(s) => parse_shape(s)?,
            None => return Err(Error::Config("model spec is missing 'input'".into())),
        };
        let spec = match get("kind") {
            Some("control") => Self::control(input, get("scale_divisor").map(parse_num).transpose()?.unwrap_or(1)),
            Some("attention") => Self {
                input,
                arch: Architecture::Attention {
                    layers: parse_num(get("layers").ok_or_else(|| Error::Config("missing 'layers'".into()))?)?,
                    heads: parse_num(get("heads").ok_or_else(|| Error::Config("missing 'heads'".into()))?)?,
                    post_norm: get("post_norm").map(parse_bool).transpose()?.unwrap_or(false),
                    skip: get("skip").map(parse_bool).transpose()?.unwrap_or(true),
                },
            },
            Some(other) => return Err(Error::Config(format!("unknown model kind '{other}'"))),
            None => return Err(Error::Config("model spec is missing 'kind'".into())),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input;
        match self.arch {
            Architecture::Control { scale_divisor } => write!(f, "control {c}x{h}x{w} (width /{scale_divisor})"),
            Architecture::Attention {
                layers,
                heads,
                post_norm,
                skip,
            } => write!(
                f,
                "attention {c}x{h}x{w}: {layers} layers x {heads} heads, post-norm {}, skip {}",
                if post_norm { "on" } else { "off" },
                if skip { "on" } else { "off" }
            ),
        }
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key '{}'",
                lineno + 1,
                k.trim()
            )));
        }
    }
    Ok(map)
}

pub(crate) fn parse_num<N: std::str::FromStr>(s: &str) -> Result<N> {
    s.parse()
        .map_err(|_| Error::Config(format!("'{s}' is not a valid number")))
}

pub(crate) fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("'{s}' is not a boolean"))),
    }
}

fn parse_shape(s: &str) -> Result<SampleShape> {
    let dims: Vec<usize> = s.split('x').map(parse_num).collect::<Result<_>>()?;
    match dims.as_slice() {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(Error::Config(format!("input shape '{s}' must look like CxHxW"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_resolve_and_validate() {
        for id in PRESET_IDS {
            ModelSpec::preset(id).unwrap().validate().unwrap();
        }
        assert!(ModelSpec::preset("attn-Z").is_err());
    }

    #[test]
    fn kv_round_trip() {
        for id in PRESET_IDS {
            let spec = ModelSpec::preset(id).unwrap();
            assert_eq!(ModelSpec::from_kv(&spec.to_kv()).unwrap(), spec);
        }
        let no_skip = ModelSpec::preset("attn-B").unwrap().with_skip(false);
        assert_eq!(ModelSpec::from_kv(&no_skip.to_kv()).unwrap(), no_skip);
    }

    #[test]
    fn control_validation() {
        assert!(ModelSpec::control([1, 28, 28], 3).validate().is_err());
        assert!(ModelSpec::control([1, 30, 30], 1).validate().is_err());
        assert!(ModelSpec::control([1, 28, 28], 4).validate().is_ok());
    }

    #[test]
    fn kv_errors_are_descriptive() {
        assert!(ModelSpec::from_kv("kind=attention\ninput=1x28x28\nheads=8").is_err());
        assert!(ModelSpec::from_kv("kind=mlp\ninput=1x28x28").is_err());
        assert!(ModelSpec::from_kv("kind=control\ninput=28x28").is_err());
        assert!(parse_kv("a=1\na=2").is_err());
        assert!(parse_kv("just words").is_err());
    }

    #[test]
    fn analytic_counts() {
        assert_eq!(
            ModelSpec::preset("control-fmnist").unwrap().analytic_param_count(),
            929_510
        );
        assert_eq!(
            ModelSpec::preset("control-cifar").unwrap().analytic_param_count(),
            961_310
        );
        assert_eq!(ModelSpec::preset("attn-B").unwrap().analytic_param_count(), 33_084);
        assert_eq!(ModelSpec::preset("attn-F").unwrap().analytic_param_count(), 58_318);
    }
}
