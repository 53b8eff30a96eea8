//! Per-class prompt sets: generation through a chat provider and the on-disk store.

mod llm;
mod parse;
mod store;
mod template;

use std::collections::BTreeSet;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

pub use llm::{
    ChatMessage, ChatProvider, ChatRequest, HttpChatProvider, LlmError, Sampling, StubChatProvider,
};
pub use parse::{parse_prompts, ResponseFormat};
pub use store::{list_prompt_classes, list_subdirs, load_prompts, store_prompts, PROMPT_SIDECAR};
pub use template::{
    build_system_prompt, default_system_template, render, BASELINE_TEMPLATE, CLASS_PLACEHOLDER,
};

use crate::calibration::{FlagCategory, FlagRecord};
use crate::config::PromptStyle;
use crate::dataset::ClassEntry;
use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStatus {
    Unreviewed,
    Approved,
    FlaggedWrongCategory,
    FlaggedPoorComposition,
    Replaced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEntry {
    /// 1-based position, the `<No.>` of the store layout.
    pub no: usize,
    /// Text as produced by the provider; never edited.
    pub text: String,
    #[serde(default)]
    pub approved: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<FlagRecord>,
}

impl PromptEntry {
    pub fn new(no: usize, text: impl Into<String>) -> Self {
        Self {
            no,
            text: text.into(),
            approved: false,
            replacement: None,
            flag: None,
        }
    }

    pub fn status(&self) -> PromptStatus {
        if self.replacement.is_some() {
            return PromptStatus::Replaced;
        }
        match &self.flag {
            Some(f) => match f.category {
                FlagCategory::WrongCategory => PromptStatus::FlaggedWrongCategory,
                FlagCategory::PoorComposition => PromptStatus::FlaggedPoorComposition,
            },
            None if self.approved => PromptStatus::Approved,
            None => PromptStatus::Unreviewed,
        }
    }

    /// Text to send to the generator: the replacement when one exists.
    pub fn effective_text(&self) -> &str {
        self.replacement.as_deref().unwrap_or(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deficiency {
    pub expected: usize,
    pub found: usize,
    pub missing: Vec<usize>,
}

impl Deficiency {
    pub fn check(expected: usize, present: impl IntoIterator<Item = usize>) -> Option<Self> {
        let present: BTreeSet<usize> = present.into_iter().collect();
        let missing: Vec<usize> = (1..=expected).filter(|n| !present.contains(n)).collect();
        if missing.is_empty() {
            return None;
        }
        Some(Self {
            expected,
            found: present.iter().filter(|&&n| n <= expected).count(),
            missing,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub dataset_id: String,
    pub class_id: String,
    pub class_name: String,
    pub style: PromptStyle,
    pub prompts: Vec<PromptEntry>,
    pub provider_id: String,
    pub created_at: String,
    /// Set when fewer than the expected number of prompts are available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deficiency: Option<Deficiency>,
}

impl PromptSet {
    pub fn entry(&self, no: usize) -> Option<&PromptEntry> {
        self.prompts.iter().find(|p| p.no == no)
    }

    pub fn entry_mut(&mut self, no: usize) -> Option<&mut PromptEntry> {
        self.prompts.iter_mut().find(|p| p.no == no)
    }

    pub fn expected_len(&self) -> usize {
        self.deficiency.as_ref().map_or(self.prompts.len(), |d| d.expected)
    }

    fn from_texts(
        dataset_id: &str,
        class: &ClassEntry,
        style: PromptStyle,
        texts: Vec<String>,
        provider_id: String,
        expected: usize,
    ) -> Self {
        let prompts: Vec<PromptEntry> = texts
            .into_iter()
            .take(expected)
            .enumerate()
            .map(|(i, t)| PromptEntry::new(i + 1, t))
            .collect();
        let deficiency = Deficiency::check(expected, prompts.iter().map(|p| p.no));
        Self {
            dataset_id: dataset_id.to_owned(),
            class_id: class.class_id.clone(),
            class_name: class.class_name.clone(),
            style,
            prompts,
            provider_id,
            created_at: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
            deficiency,
        }
    }
}

/// `n_g` copies of the `a photo of a <class>` template.
pub fn baseline_prompt_set(dataset_id: &str, class: &ClassEntry, n_g: usize) -> Result<PromptSet> {
    let text = build_system_prompt(&class.class_name, PromptStyle::Baseline)?;
    Ok(PromptSet::from_texts(
        dataset_id,
        class,
        PromptStyle::Baseline,
        vec![text; n_g],
        "template".into(),
        n_g,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRequest {
    pub class_name: String,
    pub dataset_id: String,
    pub system_template: String,
    /// Names of classes already described earlier in the session.
    pub continuation_context: Vec<String>,
    pub sampling: Sampling,
    pub n_g: usize,
}

impl PromptRequest {
    pub fn new(dataset_id: &str, class_name: &str, n_g: usize) -> Self {
        Self {
            class_name: class_name.to_owned(),
            dataset_id: dataset_id.to_owned(),
            system_template: default_system_template(),
            continuation_context: Vec::new(),
            sampling: Sampling::default(),
            n_g,
        }
    }

    pub fn to_chat(&self, model: &str) -> Result<ChatRequest> {
        let system = render(&self.system_template, &self.class_name)?;
        let mut user = String::new();
        if !self.continuation_context.is_empty() {
            user.push_str(&format!(
                "Classes already described: {}.\n",
                self.continuation_context.join(", ")
            ));
        }
        user.push_str(&format!(
            "Newly updated class: {}. Write {} distinct prompts for this class only, \
             one per line, numbered 1 to {}.",
            self.class_name.trim(),
            self.n_g,
            self.n_g
        ));
        Ok(ChatRequest {
            model: model.to_owned(),
            messages: vec![ChatMessage::system(system), ChatMessage::user(user)],
            sampling: self.sampling,
            class_name: self.class_name.trim().to_owned(),
        })
    }
}

/// Sends one request and parses exactly `n_g` prompts; fewer yields a set carrying a
/// [`Deficiency`], more are truncated.
pub fn request_prompts(
    provider: &dyn ChatProvider,
    request: &PromptRequest,
    class: &ClassEntry,
    format: ResponseFormat,
) -> Result<PromptSet> {
    if request.n_g == 0 {
        return Err(PipelineError::Invalid("n_g must be at least 1".into()));
    }
    let chat = request.to_chat("")?;
    let body = provider.complete(&chat)?;
    let texts = parse_prompts(&body, format)?;
    if texts.len() < request.n_g {
        log::warn!(
            "provider returned {} of {} prompts for `{}`",
            texts.len(),
            request.n_g,
            class.class_id
        );
    }
    Ok(PromptSet::from_texts(
        &request.dataset_id,
        class,
        PromptStyle::CoarseToFine,
        texts,
        provider.provider_id(),
        request.n_g,
    ))
}

/// A conversation over one dataset: each class is described once, and every request
/// lists the classes described before it.
pub struct PromptSession<'a> {
    provider: &'a dyn ChatProvider,
    dataset_id: String,
    n_g: usize,
    sampling: Sampling,
    format: ResponseFormat,
    described: Vec<ClassEntry>,
}

impl<'a> PromptSession<'a> {
    pub fn new(provider: &'a dyn ChatProvider, dataset_id: &str, n_g: usize) -> Self {
        Self {
            provider,
            dataset_id: dataset_id.to_owned(),
            n_g,
            sampling: Sampling::default(),
            format: ResponseFormat::Auto,
            described: Vec::new(),
        }
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_format(mut self, format: ResponseFormat) -> Self {
        self.format = format;
        self
    }

    pub fn described(&self) -> impl Iterator<Item = &str> {
        self.described.iter().map(|c| c.class_id.as_str())
    }

    pub fn next_request(&self, class: &ClassEntry) -> Result<PromptRequest> {
        if self.described.iter().any(|c| c.class_id == class.class_id) {
            return Err(PipelineError::Invalid(format!(
                "class `{}` was already described in this session",
                class.class_id
            )));
        }
        let mut req = PromptRequest::new(&self.dataset_id, &class.class_name, self.n_g);
        req.sampling = self.sampling;
        req.continuation_context = self.described.iter().map(|c| c.class_name.clone()).collect();
        Ok(req)
    }

    pub fn describe(&mut self, class: &ClassEntry) -> Result<PromptSet> {
        let req = self.next_request(class)?;
        let set = request_prompts(self.provider, &req, class, self.format)?;
        self.described.push(class.clone());
        Ok(set)
    }
}
