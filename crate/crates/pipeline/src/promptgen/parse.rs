//! Strict parsing of LLM responses into prompt lists.
//!
//! Two shapes are accepted: a JSON array of strings, or numbered lines such as
//! `1. ...` / `2) ...`. Unnumbered lines in a numbered response are dropped.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::LlmError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseFormat {
    /// JSON when the body starts with `[`, numbered lines otherwise.
    #[default]
    Auto,
    NumberedLines,
    JsonArray,
}

static NUMBERED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(\d+)\s*[.)]\s+(\S.*?)\s*$").expect("valid regex"));

fn parse_numbered(body: &str) -> Vec<String> {
    body.lines()
        .filter_map(|line| {
            let caps = NUMBERED.captures(line)?;
            Some(caps[2].to_owned())
        })
        .collect()
}

fn parse_json(body: &str) -> Result<Vec<String>, LlmError> {
    let items: Vec<String> = serde_json::from_str(body.trim())
        .map_err(|e| LlmError::Malformed(format!("expected a JSON array of strings: {e}")))?;
    Ok(items
        .into_iter()
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .collect())
}

pub fn parse_prompts(body: &str, format: ResponseFormat) -> Result<Vec<String>, LlmError> {
    let prompts = match format {
        ResponseFormat::JsonArray => parse_json(body)?,
        ResponseFormat::NumberedLines => parse_numbered(body),
        ResponseFormat::Auto if body.trim_start().starts_with('[') => parse_json(body)?,
        ResponseFormat::Auto => parse_numbered(body),
    };
    if prompts.is_empty() {
        return Err(LlmError::Malformed(
            "response contains neither numbered prompt lines nor a JSON array".into(),
        ));
    }
    Ok(prompts)
}
