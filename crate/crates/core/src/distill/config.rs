//! Run configuration files: INI-style sections [data], [stage.N], [loss]
//! and [eval] whose keys mirror the stage and loss configuration fields.
//! Unknown sections or keys are errors.

use crate::error::{Error, Result};
use crate::losses::DistillKind;
use crate::models::Scale;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub train: Option<usize>,
    pub test: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossSection {
    pub kind: Option<DistillKind>,
    pub layers: Option<[bool; 3]>,
    pub lambda_kd: Option<f32>,
    pub lambda_amp: Option<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageSection {
    pub scale: Option<Scale>,
    pub teacher_ckpt: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr0: Option<f64>,
    pub seed: Option<u64>,
    pub include_task_loss: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSection {
    pub conf_threshold: Option<f32>,
    pub nms_iou: Option<f32>,
}

/// A parsed configuration file.
#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    pub data: DataSection,
    pub loss: LossSection,
    pub stages: BTreeMap<usize, StageSection>,
    pub eval: EvalSection,
}

/// Parses a comma-separated subset of {p3,p4,p5} into layer toggles.
pub fn parse_layers(s: &str) -> Result<[bool; 3]> {
    let mut layers = [false; 3];
    for part in s.split(',') {
        match part.trim() {
            "p3" => layers[0] = true,
            "p4" => layers[1] = true,
            "p5" => layers[2] = true,
            "" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown layer {other:?}, expected a subset of p3,p4,p5"
                )))
            }
        }
    }
    if !layers.iter().any(|&l| l) {
        return Err(Error::Config("layer list selects nothing".into()));
    }
    Ok(layers)
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<FileConfig> {
        let mut cfg = FileConfig::default();
        let mut section: Option<String> = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let err = |msg: String| Error::Config(format!("line {}: {msg}", ln + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header {line:?}")))?;
                match name {
                    "data" | "loss" | "eval" => section = Some(name.to_string()),
                    other if other.starts_with("stage.") => {
                        let idx: usize = other["stage.".len()..]
                            .parse()
                            .map_err(|_| err(format!("bad stage index in {other:?}")))?;
                        cfg.stages.entry(idx).or_default();
                        section = Some(other.to_string());
                    }
                    other => return Err(err(format!("unknown section [{other}]"))),
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let sec = section.clone().ok_or_else(|| err(format!("key {key:?} outside any section")))?;
            let unknown = || err(format!("unknown key {key:?} in section [{sec}]"));
            match sec.as_str() {
                "data" => match key {
                    "dir" => cfg.data.dir = Some(PathBuf::from(value)),
                    "train" => cfg.data.train = Some(parse_num(value, ln)?),
                    "test" => cfg.data.test = Some(parse_num(value, ln)?),
                    "seed" => cfg.data.seed = Some(parse_num(value, ln)?),
                    _ => return Err(unknown()),
                },
                "loss" => match key {
                    "kind" => cfg.loss.kind = Some(DistillKind::parse(value)?),
                    "layers" => cfg.loss.layers = Some(parse_layers(value)?),
                    "lambda_kd" => cfg.loss.lambda_kd = Some(parse_num(value, ln)?),
                    "lambda_amp" => cfg.loss.lambda_amp = Some(parse_num(value, ln)?),
                    _ => return Err(unknown()),
                },
                "eval" => match key {
                    "conf_threshold" => cfg.eval.conf_threshold = Some(parse_num(value, ln)?),
                    "nms_iou" => cfg.eval.nms_iou = Some(parse_num(value, ln)?),
                    _ => return Err(unknown()),
                },
                stage => {
                    let idx: usize = stage["stage.".len()..].parse().expect("validated above");
                    let s = cfg.stages.get_mut(&idx).expect("inserted above");
                    match key {
                        "scale" => s.scale = Some(Scale::parse(value)?),
                        "teacher_ckpt" => s.teacher_ckpt = Some(PathBuf::from(value)),
                        "epochs" => s.epochs = Some(parse_num(value, ln)?),
                        "batch" => s.batch = Some(parse_num(value, ln)?),
                        "lr0" => s.lr0 = Some(parse_num(value, ln)?),
                        "seed" => s.seed = Some(parse_num(value, ln)?),
                        "include_task_loss" => {
                            s.include_task_loss = Some(parse_bool(value, ln)?)
                        }
                        _ => return Err(unknown()),
                    }
                }
            }
        }
        Ok(cfg)
    }
}

fn parse_num<T: std::str::FromStr>(value: &str, ln: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {}: bad number {value:?}", ln + 1)))
}

fn parse_bool(value: &str, ln: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("line {}: bad boolean {other:?}", ln + 1))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# toy run
[data]
dir = data/run1
train = 512
test = 128
seed = 7

[loss]
kind = spectral
layers = p3,p5
lambda_kd = 1.5
lambda_amp = 0.25

[stage.0]
scale = senior
epochs = 30
batch = 32
lr0 = 0.001

[stage.1]
scale = junior
teacher_ckpt = out/senior.ckpt
batch = 16
include_task_loss = false

[eval]
conf_threshold = 0.05
nms_iou = 0.5
";

    #[test]
    fn parses_all_sections() {
        let cfg = FileConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.data.train, Some(512));
        assert_eq!(cfg.data.dir.as_deref(), Some(Path::new("data/run1")));
        assert_eq!(cfg.loss.kind, Some(DistillKind::SpectralPhase));
        assert_eq!(cfg.loss.layers, Some([true, false, true]));
        assert_eq!(cfg.loss.lambda_kd, Some(1.5));
        assert_eq!(cfg.stages.len(), 2);
        assert_eq!(cfg.stages[&0].scale, Some(Scale::Senior));
        assert_eq!(cfg.stages[&1].batch, Some(16));
        assert_eq!(cfg.stages[&1].include_task_loss, Some(false));
        assert_eq!(cfg.eval.nms_iou, Some(0.5));
    }

    #[test]
    fn unknown_keys_and_sections_error() {
        let bad_key = "[data]\nspeed = 7\n";
        let err = FileConfig::parse(bad_key).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");

        let bad_section = "[datums]\ndir = x\n";
        let err = FileConfig::parse(bad_section).unwrap_err();
        assert!(err.to_string().contains("unknown section"), "{err}");

        let no_section = "dir = x\n";
        assert!(FileConfig::parse(no_section).is_err());
    }

    #[test]
    fn layer_lists_validate() {
        assert_eq!(parse_layers("p3,p4,p5").unwrap(), [true, true, true]);
        assert_eq!(parse_layers("p4").unwrap(), [false, true, false]);
        assert!(parse_layers("p2").is_err());
        assert!(parse_layers("").is_err());
    }
}
