//! Run configuration and project settings.
//!
//! Settings resolve in order of precedence: command-line flags, then the JSON config
//! file, then environment variables, then built-in defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::layout::{read_json, sanitize_name};

pub const DEFAULT_N_G: usize = 10;
pub const DEFAULT_N_SCALES: usize = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// LLM-written prompts, coarse shape first, fine detail after.
    #[default]
    CoarseToFine,
    /// The fixed `a photo of a <class>` template; no LLM involved.
    Baseline,
}

impl PromptStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptStyle::CoarseToFine => "coarse_to_fine",
            PromptStyle::Baseline => "baseline",
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptStyle {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse_to_fine" => Ok(PromptStyle::CoarseToFine),
            "baseline" => Ok(PromptStyle::Baseline),
            other => Err(PipelineError::Invalid(format!(
                "unknown prompt style `{other}` (expected coarse_to_fine or baseline)"
            ))),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_n_scales() -> usize {
    DEFAULT_N_SCALES
}

fn default_n_g() -> usize {
    DEFAULT_N_G
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_id: String,
    pub backend_id: String,
    #[serde(default = "default_n_scales")]
    pub n_scales: usize,
    #[serde(default)]
    pub prompt_style: PromptStyle,
    #[serde(default = "default_true")]
    pub multiscale_enabled: bool,
    #[serde(default)]
    pub calibration_applied: bool,
    #[serde(default)]
    pub raw_aggregate: bool,
    #[serde(default = "default_n_g")]
    pub n_g: usize,
}

impl RunConfig {
    pub fn new(dataset_id: impl Into<String>, backend_id: impl Into<String>) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            backend_id: backend_id.into(),
            n_scales: DEFAULT_N_SCALES,
            prompt_style: PromptStyle::CoarseToFine,
            multiscale_enabled: true,
            calibration_applied: false,
            raw_aggregate: false,
            n_g: DEFAULT_N_G,
        }
    }

    /// Enforces `multiscale_enabled = false ⇒ n_scales = 1` and basic ranges.
    pub fn normalized(mut self) -> Result<Self> {
        if self.dataset_id.trim().is_empty() || self.backend_id.trim().is_empty() {
            return Err(PipelineError::Invalid("dataset_id and backend_id are required".into()));
        }
        if !self.multiscale_enabled {
            self.n_scales = 1;
        }
        if self.n_scales == 0 {
            return Err(PipelineError::Invalid("n_scales must be at least 1".into()));
        }
        if self.n_g == 0 {
            return Err(PipelineError::Invalid("n_g must be at least 1".into()));
        }
        Ok(self)
    }

    pub fn run_id(&self) -> String {
        sanitize_name(&format!(
            "{}-{}-{}-s{}-{}-{}-ng{}",
            self.dataset_id,
            self.backend_id,
            self.prompt_style,
            self.n_scales,
            if self.calibration_applied { "cal" } else { "unc" },
            if self.raw_aggregate { "raw" } else { "norm" },
            self.n_g
        ))
    }

    /// Row label of the prompt-source × multi-scale ablation grid.
    pub fn ablation_label(&self) -> &'static str {
        match (self.prompt_style, self.multiscale_enabled) {
            (PromptStyle::Baseline, false) => "CLIP",
            (PromptStyle::CoarseToFine, false) => "CLIP&LLM",
            (PromptStyle::Baseline, true) => "CLIP&M_S",
            (PromptStyle::CoarseToFine, true) => "CLIP&LLM&M_S",
        }
    }

    /// The no-LLM, single-scale counterpart used for Δ columns.
    pub fn baseline_arm(&self) -> RunConfig {
        RunConfig {
            prompt_style: PromptStyle::Baseline,
            multiscale_enabled: false,
            n_scales: 1,
            ..self.clone()
        }
    }

    pub fn uncorrected(&self) -> RunConfig {
        RunConfig {
            calibration_applied: false,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub url: Option<String>,
    pub api_key: Option<String>,
    pub model: String,
    /// `None` leaves sampling at the provider default.
    pub temperature: Option<f32>,
    pub top_p: Option<f32>,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            url: None,
            api_key: None,
            model: "grok-3".into(),
            temperature: None,
            top_p: None,
            max_retries: 3,
            backoff_ms: 500,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct T2iSettings {
    pub url: Option<String>,
    pub api_key: Option<String>,
    pub engine_id: String,
    pub guidance_scale: f64,
    pub num_inference_steps: u32,
    pub width: u32,
    pub height: u32,
    pub retries: u32,
    pub timeout_secs: u64,
}

impl Default for T2iSettings {
    fn default() -> Self {
        Self {
            url: None,
            api_key: None,
            engine_id: "stable-diffusion-2.1".into(),
            guidance_scale: 7.5,
            num_inference_steps: 30,
            width: 512,
            height: 512,
            retries: 2,
            timeout_secs: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSettings {
    pub port: u16,
    pub token: Option<String>,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        Self {
            port: 8717,
            token: None,
        }
    }
}

/// Contents of the JSON config file: run fields plus store root and endpoints. Every
/// field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigFile {
    pub root: Option<PathBuf>,
    pub dataset_id: Option<String>,
    pub backend_id: Option<String>,
    pub n_scales: Option<usize>,
    pub prompt_style: Option<PromptStyle>,
    pub multiscale_enabled: Option<bool>,
    pub calibration_applied: Option<bool>,
    pub raw_aggregate: Option<bool>,
    pub n_g: Option<usize>,
    pub workers: Option<usize>,
    pub global_seed: Option<u64>,
    pub llm: Option<LlmSettings>,
    pub t2i: Option<T2iSettings>,
    pub service: Option<ServiceSettings>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Builds a `RunConfig` from file values, with `fallback` filling absent fields.
    pub fn run_config(&self, fallback: &RunConfig) -> RunConfig {
        RunConfig {
            dataset_id: self.dataset_id.clone().unwrap_or_else(|| fallback.dataset_id.clone()),
            backend_id: self.backend_id.clone().unwrap_or_else(|| fallback.backend_id.clone()),
            n_scales: self.n_scales.unwrap_or(fallback.n_scales),
            prompt_style: self.prompt_style.unwrap_or(fallback.prompt_style),
            multiscale_enabled: self.multiscale_enabled.unwrap_or(fallback.multiscale_enabled),
            calibration_applied: self.calibration_applied.unwrap_or(fallback.calibration_applied),
            raw_aggregate: self.raw_aggregate.unwrap_or(fallback.raw_aggregate),
            n_g: self.n_g.unwrap_or(fallback.n_g),
        }
    }
}

/// Fully resolved project settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub root: PathBuf,
    pub n_g: usize,
    pub workers: Option<usize>,
    pub global_seed: u64,
    pub llm: LlmSettings,
    pub t2i: T2iSettings,
    pub service: ServiceSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            root: PathBuf::from("."),
            n_g: DEFAULT_N_G,
            workers: None,
            global_seed: 0,
            llm: LlmSettings::default(),
            t2i: T2iSettings::default(),
            service: ServiceSettings::default(),
        }
    }
}

impl Settings {
    /// Defaults overlaid with environment variables (`LLM_API_URL`, `LLM_API_KEY`,
    /// `LLM_MODEL`, `T2I_API_URL`, `T2I_API_KEY`, `VIZPROTO_SERVICE_TOKEN`).
    pub fn from_env_with(get: impl Fn(&str) -> Option<String>) -> Self {
        let mut s = Settings::default();
        s.llm.url = get("LLM_API_URL");
        s.llm.api_key = get("LLM_API_KEY");
        if let Some(model) = get("LLM_MODEL") {
            s.llm.model = model;
        }
        s.t2i.url = get("T2I_API_URL");
        s.t2i.api_key = get("T2I_API_KEY");
        s.service.token = get("VIZPROTO_SERVICE_TOKEN");
        s
    }

    pub fn from_env() -> Self {
        Self::from_env_with(|k| std::env::var(k).ok().filter(|v| !v.is_empty()))
    }

    /// Overlays values present in the config file.
    pub fn apply_file(&mut self, file: &ConfigFile) {
        if let Some(root) = &file.root {
            self.root = root.clone();
        }
        if let Some(n_g) = file.n_g {
            self.n_g = n_g;
        }
        if file.workers.is_some() {
            self.workers = file.workers;
        }
        if let Some(seed) = file.global_seed {
            self.global_seed = seed;
        }
        if let Some(llm) = &file.llm {
            let env = std::mem::take(&mut self.llm);
            self.llm = LlmSettings {
                url: llm.url.clone().or(env.url),
                api_key: llm.api_key.clone().or(env.api_key),
                ..llm.clone()
            };
        }
        if let Some(t2i) = &file.t2i {
            let env = std::mem::take(&mut self.t2i);
            self.t2i = T2iSettings {
                url: t2i.url.clone().or(env.url),
                api_key: t2i.api_key.clone().or(env.api_key),
                ..t2i.clone()
            };
        }
        if let Some(service) = &file.service {
            let env_token = self.service.token.take();
            self.service = ServiceSettings {
                token: service.token.clone().or(env_token),
                ..service.clone()
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_scale_forced_when_multiscale_off() {
        let mut c = RunConfig::new("d", "mock-1");
        c.multiscale_enabled = false;
        c.n_scales = 5;
        assert_eq!(c.normalized().unwrap().n_scales, 1);
        assert!(RunConfig::new("", "x").normalized().is_err());
    }

    #[test]
    fn ablation_labels_cover_grid() {
        let base = RunConfig::new("d", "b");
        let mut labels = vec![];
        for style in [PromptStyle::Baseline, PromptStyle::CoarseToFine] {
            for ms in [false, true] {
                labels.push(
                    RunConfig { prompt_style: style, multiscale_enabled: ms, ..base.clone() }.ablation_label(),
                );
            }
        }
        assert_eq!(labels, vec!["CLIP", "CLIP&M_S", "CLIP&LLM", "CLIP&LLM&M_S"]);
        assert_eq!(base.baseline_arm().ablation_label(), "CLIP");
    }

    #[test]
    fn run_config_json_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"dataset_id":"pet","backend_id":"mock-3"}"#).unwrap();
        assert_eq!(c, RunConfig::new("pet", "mock-3"));
        assert_eq!(c.run_id(), "pet-mock-3-coarse_to_fine-s3-unc-norm-ng10");
    }

    #[test]
    fn precedence_file_over_env_over_default() {
        let env = |k: &str| match k {
            "LLM_API_URL" => Some("http://env/llm".to_string()),
            "LLM_API_KEY" => Some("env-key".to_string()),
            "T2I_API_URL" => Some("http://env/t2i".to_string()),
            _ => None,
        };
        let mut s = Settings::from_env_with(env);
        assert_eq!(s.llm.url.as_deref(), Some("http://env/llm"));
        assert_eq!(s.llm.model, "grok-3");
        let file: ConfigFile = serde_json::from_str(
            r#"{"root": "/data", "llm": {"url": "http://file/llm", "model": "m2"}, "t2i": {"guidance_scale": 9.0}}"#,
        )
        .unwrap();
        s.apply_file(&file);
        assert_eq!(s.root, PathBuf::from("/data"));
        assert_eq!(s.llm.url.as_deref(), Some("http://file/llm"));
        assert_eq!(s.llm.api_key.as_deref(), Some("env-key"));
        assert_eq!(s.llm.model, "m2");
        assert_eq!(s.t2i.url.as_deref(), Some("http://env/t2i"));
        assert_eq!(s.t2i.guidance_scale, 9.0);
        assert_eq!(s.t2i.num_inference_steps, 30);
    }

    #[test]
    fn config_file_fills_run_config() {
        let file: ConfigFile =
            serde_json::from_str(r#"{"dataset_id":"x","n_scales":2,"prompt_style":"baseline"}"#).unwrap();
        let c = file.run_config(&RunConfig::new("", "mock-0"));
        assert_eq!(c.dataset_id, "x");
        assert_eq!(c.backend_id, "mock-0");
        assert_eq!(c.n_scales, 2);
        assert_eq!(c.prompt_style, PromptStyle::Baseline);
    }
}
