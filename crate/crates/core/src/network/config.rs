use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Mechanism, Operator};
use crate::error::{Error, Result};
use crate::lfa::LfaConfig;
use crate::sampling::{GroupingSpec, Scale};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleConfig {
    /// Number of FPS centers.
    pub samples: usize,
    pub lfa: LfaConfig,
    pub attention: AttentionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input points per cloud.
    pub points: usize,
    pub classes: usize,
    pub modules: Vec<ModuleConfig>,
    /// Width of the pointwise layer before global pooling.
    pub final_width: usize,
    /// Hidden widths of the classification head.
    pub head: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size widths.
    Paper,
    /// Narrow widths that train in minutes on one CPU core.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected paper, desk)"))),
        }
    }
}

fn grouping(radii: [f64; 3]) -> GroupingSpec {
    GroupingSpec {
        scales: radii
            .iter()
            .zip([8, 16, 32])
            .map(|(&radius, k)| Scale { radius, k })
            .collect(),
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset, points: usize, classes: usize) -> Self {
        let (w1, w2, tau1, tau2, final_width, head) = match preset {
            Preset::Paper => (64, 192, None, None, 1024, vec![512, 256]),
            Preset::Desk => (16, 32, Some(16), Some(32), 256, vec![128, 64]),
        };
        let module = |samples, radii, w, tau_hidden| ModuleConfig {
            samples,
            lfa: LfaConfig {
                enabled: true,
                grouping: grouping(radii),
                widths: vec![vec![w]; 3],
            },
            attention: AttentionConfig {
                tau_hidden,
                ..AttentionConfig::default()
            },
        };
        Self {
            points,
            classes,
            modules: vec![
                module(points / 4, [0.1, 0.2, 0.4], w1, tau1),
                module(points / 16, [0.2, 0.4, 0.8], w2, tau2),
            ],
            final_width,
            head,
        }
    }

    pub fn paper(points: usize, classes: usize) -> Self {
        Self::preset(Preset::Paper, points, classes)
    }

    pub fn desk(points: usize, classes: usize) -> Self {
        Self::preset(Preset::Desk, points, classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || self.classes == 0 || self.final_width == 0 {
            return Err(Error::Config("points, classes and final width must be positive".into()));
        }
        if self.modules.is_empty() {
            return Err(Error::Config("at least one module is required".into()));
        }
        if self.head.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        let mut available = self.points;
        for (i, m) in self.modules.iter().enumerate() {
            if m.samples == 0 || m.samples > available {
                return Err(Error::Config(format!(
                    "module {} samples {} centers from {available} points",
                    i + 1,
                    m.samples
                )));
            }
            available = m.samples;
            m.lfa.validate()?;
            if m.attention.tau_hidden == Some(0) {
                return Err(Error::Config("attention hidden width must be positive".into()));
            }
        }
        Ok(())
    }

    /// Module output widths, in order.
    pub fn widths(&self) -> Vec<usize> {
        self.modules.iter().map(|m| m.lfa.out_width()).collect()
    }

    pub fn samples(&self) -> Vec<usize> {
        self.modules.iter().map(|m| m.samples).collect()
    }

    /// Keeps only each module's middle grouping scale (`1`) or restores
    /// nothing (`3` is the identity).
    pub fn with_scales(mut self, scales: usize) -> Result<Self> {
        match scales {
            1 => {
                for m in &mut self.modules {
                    m.lfa = m.lfa.single_scale();
                }
                Ok(self)
            }
            3 => Ok(self),
            _ => Err(Error::Config(format!("scales must be 1 or 3, got {scales}"))),
        }
    }

    /// Without hierarchy every module keeps all incoming points.
    pub fn with_hierarchy(mut self, on: bool) -> Self {
        if !on {
            for m in &mut self.modules {
                m.samples = self.points;
            }
        }
        self
    }

    pub fn with_lfa(mut self, on: bool) -> Self {
        self.modules.iter_mut().for_each(|m| m.lfa.enabled = on);
        self
    }

    pub fn with_gfl(mut self, on: bool) -> Self {
        self.modules.iter_mut().for_each(|m| m.attention.enabled = on);
        self
    }

    pub fn with_position_encoding(mut self, on: bool) -> Self {
        self.modules
            .iter_mut()
            .for_each(|m| m.attention.position_encoding = on);
        self
    }

    pub fn with_mechanism(mut self, mechanism: Mechanism) -> Self {
        self.modules.iter_mut().for_each(|m| m.attention.mechanism = mechanism);
        self
    }

    pub fn with_operator(mut self, operator: Operator) -> Self {
        self.modules.iter_mut().for_each(|m| m.attention.operator = operator);
        self
    }

    /// A two-module model small enough for exhaustive finite differences:
    /// 16 points, 4 then 1 centers, width 8.
    pub fn micro(classes: usize) -> Self {
        let module = |samples, r: f64| ModuleConfig {
            samples,
            lfa: LfaConfig {
                enabled: true,
                grouping: GroupingSpec {
                    scales: vec![Scale { radius: r, k: 4 }, Scale { radius: 2.0 * r, k: 6 }],
                },
                widths: vec![vec![4], vec![4]],
            },
            attention: AttentionConfig::default(),
        };
        Self {
            points: 16,
            classes,
            modules: vec![module(4, 0.5), module(1, 1.0)],
            final_width: 8,
            head: vec![8, 6],
        }
    }
}
