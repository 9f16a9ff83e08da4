//! Architecture configuration: patching, encoder, sequencer, task, presets.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("patch size {p} must divide image dims {h}x{w}")]
    PatchDoesNotDivide { h: usize, w: usize, p: usize },
    #[error("attention heads {heads} must divide model width {d}")]
    HeadsDoNotDivide { heads: usize, d: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot parse model spec: {0}")]
    Parse(String),
}

/// Classification task; fixes the head width and the loss pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Eight age groups, softmax head.
    Age8,
    /// Binary gender, single sigmoid neuron emitting P(male) with label
    /// order f = 0, m = 1.
    Gender2,
}

impl Task {
    pub fn head_classes(&self) -> usize {
        match self {
            Task::Age8 => 8,
            Task::Gender2 => 1,
        }
    }

    /// Number of distinct labels (8 or 2).
    pub fn num_classes(&self) -> usize {
        match self {
            Task::Age8 => 8,
            Task::Gender2 => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Age8 => "age8",
            Task::Gender2 => "gender2",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "age8" => Some(Task::Age8),
            "gender2" => Some(Task::Gender2),
            _ => None,
        }
    }
}

/// Image/patch geometry. `d` is the embedding width shared with the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p: usize,
    pub d: usize,
}

impl PatchConfig {
    /// N = H*W/P^2, the effective number of patches.
    pub fn num_patches(&self) -> usize {
        (self.h / self.p) * (self.w / self.p)
    }

    /// Flattened patch length P^2 * C.
    pub fn patch_len(&self) -> usize {
        self.p * self.p * self.c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.p == 0 || self.h % self.p != 0 || self.w % self.p != 0 {
            return Err(ConfigError::PatchDoesNotDivide {
                h: self.h,
                w: self.w,
                p: self.p,
            });
        }
        if self.num_patches() == 0 || self.c == 0 || self.d == 0 {
            return Err(ConfigError::Invalid(format!("degenerate patch config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_mlp: usize,
    pub class_token: bool,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequencerConfig {
    pub units1: usize,
    pub units2: usize,
    pub bn_eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub task: Task,
    pub patch: PatchConfig,
    pub encoder: EncoderConfig,
    pub sequencer: SequencerConfig,
}

/// Named architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Desk-scale configuration for tests and gradient checks.
    Toy,
    /// Base-capacity encoder on 32-pixel patches of 224x224 images.
    VitB32,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::VitB32 => "vitb32",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        match s {
            "toy" => Some(Preset::Toy),
            "vitb32" => Some(Preset::VitB32),
            _ => None,
        }
    }

    pub fn working_res(&self) -> usize {
        match self {
            Preset::Toy => 32,
            Preset::VitB32 => 224,
        }
    }
}

impl ModelSpec {
    pub fn preset(preset: Preset, task: Task) -> ModelSpec {
        match preset {
            Preset::Toy => ModelSpec {
                task,
                patch: PatchConfig {
                    h: 32,
                    w: 32,
                    c: 3,
                    p: 8,
                    d: 16,
                },
                encoder: EncoderConfig {
                    layers: 2,
                    heads: 2,
                    d_mlp: 32,
                    class_token: true,
                    dropout: 0.0,
                },
                sequencer: SequencerConfig {
                    units1: 128,
                    units2: 64,
                    bn_eps: 1e-5,
                },
            },
            Preset::VitB32 => ModelSpec {
                task,
                patch: PatchConfig {
                    h: 224,
                    w: 224,
                    c: 3,
                    p: 32,
                    d: 768,
                },
                encoder: EncoderConfig {
                    layers: 12,
                    heads: 12,
                    d_mlp: 3072,
                    class_token: true,
                    dropout: 0.0,
                },
                sequencer: SequencerConfig {
                    units1: 128,
                    units2: 64,
                    bn_eps: 1e-5,
                },
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.patch.validate()?;
        if self.encoder.heads == 0 || self.patch.d % self.encoder.heads != 0 {
            return Err(ConfigError::HeadsDoNotDivide {
                heads: self.encoder.heads,
                d: self.patch.d,
            });
        }
        if self.encoder.layers == 0 {
            return Err(ConfigError::Invalid("encoder needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.encoder.dropout) {
            return Err(ConfigError::Invalid(format!(
                "dropout {} outside [0,1)",
                self.encoder.dropout
            )));
        }
        if self.sequencer.units1 == 0 || self.sequencer.units2 == 0 {
            return Err(ConfigError::Invalid("sequencer units must be >= 1".into()));
        }
        Ok(())
    }

    /// Token count entering the encoder (patches plus optional class token).
    pub fn tokens(&self) -> usize {
        self.patch.num_patches() + usize::from(self.encoder.class_token)
    }

    /// Feature width after the sequencer's second concatenation level:
    /// D + 2*units1 + 2*units2.
    pub fn sequencer_output_width(&self) -> usize {
        self.patch.d + 2 * self.sequencer.units1 + 2 * self.sequencer.units2
    }

    /// Width of the first concatenation level (sequencer input joined with
    /// the first BiLSTM output): D + 2*units1.
    pub fn sequencer_mid_width(&self) -> usize {
        self.patch.d + 2 * self.sequencer.units1
    }

    /// Deterministic textual rendering; embedded verbatim in checkpoints and
    /// parsed back by [`ModelSpec::from_canonical_text`].
    pub fn to_canonical_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        line("task", self.task.name().to_string());
        line("patch.h", self.patch.h.to_string());
        line("patch.w", self.patch.w.to_string());
        line("patch.c", self.patch.c.to_string());
        line("patch.p", self.patch.p.to_string());
        line("patch.d", self.patch.d.to_string());
        line("encoder.layers", self.encoder.layers.to_string());
        line("encoder.heads", self.encoder.heads.to_string());
        line("encoder.d_mlp", self.encoder.d_mlp.to_string());
        line("encoder.class_token", self.encoder.class_token.to_string());
        line("encoder.dropout", format!("{:?}", self.encoder.dropout));
        line("sequencer.units1", self.sequencer.units1.to_string());
        line("sequencer.units2", self.sequencer.units2.to_string());
        line("sequencer.bn_eps", format!("{:?}", self.sequencer.bn_eps));
        s
    }

    pub fn from_canonical_text(text: &str) -> Result<ModelSpec, ConfigError> {
        let get = |key: &str| -> Result<String, ConfigError> {
            for line in text.lines() {
                if let Some((k, v)) = line.split_once(" = ") {
                    if k == key {
                        return Ok(v.to_string());
                    }
                }
            }
            Err(ConfigError::Parse(format!("missing key {key}")))
        };
        let usize_of = |v: String| -> Result<usize, ConfigError> {
            v.parse().map_err(|_| ConfigError::Parse(format!("bad integer {v}")))
        };
        let f64_of = |v: String| -> Result<f64, ConfigError> {
            v.parse().map_err(|_| ConfigError::Parse(format!("bad float {v}")))
        };
        let task = Task::parse(&get("task")?)
            .ok_or_else(|| ConfigError::Parse("unknown task".into()))?;
        let spec = ModelSpec {
            task,
            patch: PatchConfig {
                h: usize_of(get("patch.h")?)?,
                w: usize_of(get("patch.w")?)?,
                c: usize_of(get("patch.c")?)?,
                p: usize_of(get("patch.p")?)?,
                d: usize_of(get("patch.d")?)?,
            },
            encoder: EncoderConfig {
                layers: usize_of(get("encoder.layers")?)?,
                heads: usize_of(get("encoder.heads")?)?,
                d_mlp: usize_of(get("encoder.d_mlp")?)?,
                class_token: get("encoder.class_token")? == "true",
                dropout: f64_of(get("encoder.dropout")?)?,
            },
            sequencer: SequencerConfig {
                units1: usize_of(get("sequencer.units1")?)?,
                units2: usize_of(get("sequencer.units2")?)?,
                bn_eps: f64_of(get("sequencer.bn_eps")?)?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_arithmetic_matches_formula() {
        // 224x224 with 32-pixel patches: N = 49, flattened length 3072.
        let p = PatchConfig {
            h: 224,
            w: 224,
            c: 3,
            p: 32,
            d: 768,
        };
        assert_eq!(p.num_patches(), 49);
        assert_eq!(p.patch_len(), 3072);

        // Degenerate single-patch case.
        let single = PatchConfig {
            h: 16,
            w: 16,
            c: 3,
            p: 16,
            d: 8,
        };
        assert_eq!(single.num_patches(), 1);
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        let p = PatchConfig {
            h: 30,
            w: 32,
            c: 3,
            p: 8,
            d: 16,
        };
        assert!(matches!(
            p.validate().unwrap_err(),
            ConfigError::PatchDoesNotDivide { .. }
        ));
    }

    #[test]
    fn sequencer_width_arithmetic() {
        let spec = ModelSpec::preset(Preset::VitB32, Task::Age8);
        assert_eq!(spec.sequencer_output_width(), 768 + 256 + 128);
        assert_eq!(spec.sequencer_output_width(), 1152);
        let toy = ModelSpec::preset(Preset::Toy, Task::Age8);
        assert_eq!(toy.sequencer_output_width(), 16 + 256 + 128);
        assert_eq!(toy.tokens(), 17);
    }

    #[test]
    fn canonical_text_round_trips() {
        for preset in [Preset::Toy, Preset::VitB32] {
            for task in [Task::Age8, Task::Gender2] {
                let spec = ModelSpec::preset(preset, task);
                let text = spec.to_canonical_text();
                let back = ModelSpec::from_canonical_text(&text).unwrap();
                assert_eq!(spec, back);
            }
        }
    }

    #[test]
    fn presets_validate() {
        ModelSpec::preset(Preset::Toy, Task::Age8).validate().unwrap();
        ModelSpec::preset(Preset::VitB32, Task::Gender2).validate().unwrap();
    }
}
