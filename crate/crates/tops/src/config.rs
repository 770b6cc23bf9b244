//! JSON run configuration, mirrored by the CLI flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tops_core::pipeline::{Composition, Mode, PipelineConfig};
use tops_core::smoother::{SmootherKind, DEFAULT_ALPHA, DEFAULT_WINDOW};
use tops_core::threshold::{StreamConfig, DEFAULT_BIAS_SCALE, DEFAULT_FANOUT, DEFAULT_RANGE};

use crate::error::{Result, ToolError};
use crate::formats::read_json;

/// Flat smoother description: `{kind, w, alpha}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmootherSpec {
    pub kind: String,
    #[serde(default)]
    pub w: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl Default for SmootherSpec {
    fn default() -> Self {
        Self {
            kind: "recent".to_string(),
            w: None,
            alpha: None,
        }
    }
}

impl SmootherSpec {
    pub fn to_kind(&self) -> Result<SmootherKind> {
        let kind = match self.kind.to_ascii_lowercase().replace('-', "_").as_str() {
            "recent" => SmootherKind::Recent,
            "mean" => SmootherKind::Mean,
            "median" => SmootherKind::Median,
            "moving_average" | "ma" => SmootherKind::MovingAverage {
                window: self.w.unwrap_or(DEFAULT_WINDOW),
            },
            "exponential" | "ema" => SmootherKind::Exponential {
                alpha: self.alpha.unwrap_or(DEFAULT_ALPHA),
            },
            other => return Err(ToolError::config(format!("unknown smoother {other:?}"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

pub fn parse_mode(text: &str) -> Result<Mode> {
    match text.to_ascii_lowercase().as_str() {
        "tops" => Ok(Mode::Tops),
        "topl" => Ok(Mode::Topl),
        "pak" => Ok(Mode::Pak),
        other => Err(ToolError::config(format!("unknown mode {other:?}; expected tops, topl or pak"))),
    }
}

/// `{mode, B, r, b, epsilon, m, c, smoother, seed, input_path, output_path}` plus optional extras.
/// Every field is optional so that a file and the CLI flags can be layered.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<String>,
    #[serde(rename = "B")]
    pub bound: Option<f64>,
    pub r: Option<u64>,
    pub b: Option<u32>,
    pub epsilon: Option<f64>,
    pub m: Option<usize>,
    pub c: Option<f64>,
    pub smoother: Option<SmootherSpec>,
    pub seed: Option<u64>,
    pub input_path: Option<PathBuf>,
    pub output_path: Option<PathBuf>,
    /// CSV column holding the readings; plain lines when absent.
    pub column: Option<String>,
    pub threshold_epsilon: Option<f64>,
    /// Share of ε spent on the threshold under sequential composition.
    pub sequential_share: Option<f64>,
    /// Skip threshold selection and use this θ.
    pub theta: Option<f64>,
    /// Override the optimised smoother level.
    pub s: Option<u32>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Fields set in `over` win.
    pub fn overlay(self, over: RunConfig) -> RunConfig {
        RunConfig {
            mode: over.mode.or(self.mode),
            bound: over.bound.or(self.bound),
            r: over.r.or(self.r),
            b: over.b.or(self.b),
            epsilon: over.epsilon.or(self.epsilon),
            m: over.m.or(self.m),
            c: over.c.or(self.c),
            smoother: over.smoother.or(self.smoother),
            seed: over.seed.or(self.seed),
            input_path: over.input_path.or(self.input_path),
            output_path: over.output_path.or(self.output_path),
            column: over.column.or(self.column),
            threshold_epsilon: over.threshold_epsilon.or(self.threshold_epsilon),
            sequential_share: over.sequential_share.or(self.sequential_share),
            theta: over.theta.or(self.theta),
            s: over.s.or(self.s),
        }
    }

    pub fn mode(&self) -> Result<Mode> {
        self.mode.as_deref().map(parse_mode).unwrap_or(Ok(Mode::Tops))
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let bound = self.bound.ok_or_else(|| ToolError::config("missing bound B"))?;
        let epsilon = self.epsilon.ok_or_else(|| ToolError::config("missing epsilon"))?;
        let holdout = self.m.ok_or_else(|| ToolError::config("missing holdout size m"))?;
        let mut stream = StreamConfig::new(bound, epsilon, holdout)
            .with_range(self.r.unwrap_or(DEFAULT_RANGE))
            .with_fanout(self.b.unwrap_or(DEFAULT_FANOUT));
        stream.bias_scale = self.c.unwrap_or(DEFAULT_BIAS_SCALE);
        stream.threshold_epsilon = self.threshold_epsilon;
        let mut config = PipelineConfig::new(self.mode()?, stream);
        config.smoother = self.smoother.clone().unwrap_or_default().to_kind()?;
        if let Some(share) = self.sequential_share {
            config.composition = Composition::Sequential { threshold_share: share };
        }
        config.fixed_theta = self.theta;
        config.smoothed_levels = self.s;
        config.validate()?;
        Ok(config)
    }
}
