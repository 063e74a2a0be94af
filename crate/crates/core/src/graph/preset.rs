//! Architecture presets and their TOML file form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::builder::{build_regseg, BackboneConfig, StageConfig};
use super::ModelGraph;
use crate::error::{Error, Result};
use crate::schedule::{DilationSchedule, Dilations, DEFAULT_SCHEDULE};

/// A complete network description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Preset {
    pub name: String,
    pub backbone: BackboneConfig,
    pub schedule: DilationSchedule,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageFile {
    channels: usize,
    repeats: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PresetFile {
    name: String,
    schedule: String,
    num_classes: usize,
    #[serde(default = "default_in_channels")]
    in_channels: usize,
    stem_channels: usize,
    group_width: usize,
    final_channels: usize,
    stage4: StageFile,
    stage8: StageFile,
    stage16: StageFile,
}

fn default_in_channels() -> usize {
    3
}

/// One row of the backbone layout table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub operator: String,
    pub dilations: String,
    pub stride: usize,
    pub channels: usize,
    pub repeat: usize,
}

impl Preset {
    /// The 19-class Cityscapes network.
    pub fn regseg() -> Self {
        Preset {
            name: "regseg".into(),
            backbone: BackboneConfig::regseg(),
            schedule: DilationSchedule::parse(DEFAULT_SCHEDULE).expect("default schedule"),
            num_classes: 19,
        }
    }

    pub fn names() -> &'static [&'static str] {
        &["regseg", "regseg-camvid"]
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "regseg" => Ok(Self::regseg()),
            "regseg-camvid" => Ok(Preset {
                name: name.into(),
                num_classes: 11,
                ..Self::regseg()
            }),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (known: {})",
                Self::names().join(", ")
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let f: PresetFile = toml::from_str(text).map_err(|e| Error::Config(format!("preset: {e}")))?;
        let stage = |s: StageFile| StageConfig {
            channels: s.channels,
            repeats: s.repeats,
        };
        let preset = Preset {
            name: f.name,
            backbone: BackboneConfig {
                in_channels: f.in_channels,
                stem_channels: f.stem_channels,
                stage4: stage(f.stage4),
                stage8: stage(f.stage8),
                stage16: stage(f.stage16),
                final_channels: f.final_channels,
                group_width: f.group_width,
            },
            schedule: DilationSchedule::parse(&f.schedule)?,
            num_classes: f.num_classes,
        };
        preset
            .build()
            .map_err(|e| Error::Config(format!("preset '{}': {e}", preset.name)))?;
        Ok(preset)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        let b = &self.backbone;
        let stage = |s: StageConfig| StageFile {
            channels: s.channels,
            repeats: s.repeats,
        };
        let f = PresetFile {
            name: self.name.clone(),
            schedule: self.schedule.to_string(),
            num_classes: self.num_classes,
            in_channels: b.in_channels,
            stem_channels: b.stem_channels,
            group_width: b.group_width,
            final_channels: b.final_channels,
            stage4: stage(b.stage4),
            stage8: stage(b.stage8),
            stage16: stage(b.stage16),
        };
        toml::to_string(&f).expect("preset serializes")
    }

    pub fn with_schedule(self, schedule: DilationSchedule) -> Self {
        Preset { schedule, ..self }
    }

    pub fn build(&self) -> Result<ModelGraph> {
        build_regseg(&self.backbone, &self.schedule, self.num_classes)
    }

    /// Backbone layout grouped into rows of equal operator, dilations and
    /// channels. A stride-2 block absorbs the stride-1 blocks that follow it.
    pub fn layer_table(&self) -> Result<Vec<LayerRow>> {
        let mut rows = vec![LayerRow {
            operator: "3x3 conv".into(),
            dilations: "-".into(),
            stride: 2,
            channels: self.backbone.stem_channels,
            repeat: 1,
        }];
        for (_, _, b) in self.backbone.blocks(&self.schedule)? {
            let d = display_dilations(&b.dilations);
            match rows.last_mut() {
                Some(last)
                    if last.operator == "D block"
                        && last.dilations == d
                        && last.channels == b.out_channels
                        && b.stride == 1 =>
                {
                    last.repeat += 1
                }
                _ => rows.push(LayerRow {
                    operator: "D block".into(),
                    dilations: d,
                    stride: b.stride,
                    channels: b.out_channels,
                    repeat: 1,
                }),
            }
        }
        Ok(rows)
    }
}

/// `1, 14` style; a single branch `d` shows as `d, d`.
fn display_dilations(d: &Dilations) -> String {
    let rates: Vec<String> = if d.branches() == 1 {
        vec![d.rates()[0].to_string(); 2]
    } else {
        d.rates().iter().map(usize::to_string).collect()
    };
    rates.join(", ")
}

impl Default for Preset {
    fn default() -> Self {
        Self::regseg()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layer_table() {
        let rows = Preset::regseg().layer_table().unwrap();
        let got: Vec<(&str, &str, usize, usize, usize)> = rows
            .iter()
            .map(|r| {
                (
                    r.operator.as_str(),
                    r.dilations.as_str(),
                    r.stride,
                    r.channels,
                    r.repeat,
                )
            })
            .collect();
        assert_eq!(
            got,
            vec![
                ("3x3 conv", "-", 2, 32, 1),
                ("D block", "1, 1", 2, 48, 1),
                ("D block", "1, 1", 2, 128, 3),
                ("D block", "1, 1", 2, 256, 2),
                ("D block", "1, 2", 1, 256, 1),
                ("D block", "1, 4", 1, 256, 4),
                ("D block", "1, 14", 1, 256, 6),
                ("D block", "1, 14", 1, 320, 1),
            ]
        );
    }

    #[test]
    fn toml_round_trip() {
        let p = Preset::regseg();
        let text = p.to_toml();
        assert!(text.contains("schedule = \"(1,1)+(1,2)+4*(1,4)+7*(1,14)\""));
        assert_eq!(Preset::from_toml(&text).unwrap(), p);
    }

    #[test]
    fn bad_presets_are_config_errors() {
        assert!(matches!(Preset::by_name("nope"), Err(Error::Config(_))));
        let text = Preset::regseg()
            .to_toml()
            .replace("group_width = 16", "group_width = 7");
        assert!(matches!(Preset::from_toml(&text), Err(Error::Config(_))));
        assert!(matches!(Preset::from_toml("name = 3"), Err(Error::Config(_))));
        let text = Preset::regseg().to_toml().replace("7*(1,14)", "6*(1,14)");
        assert!(matches!(Preset::from_toml(&text), Err(Error::Config(_))));
    }
}
