use crate::config::PromptStyle;
use crate::error::{PipelineError, Result};

pub const CLASS_PLACEHOLDER: &str = "{class_name}";

/// Task instruction sent as the system message; `{class_name}` is substituted per class.
pub const COARSE_TO_FINE_TASK: &str = "Write a detailed description of {class_name}, including its unique features. The description I need is for image generation, so the description you give must be a clear visual feature that can help the generator understand the content and reduce ambiguity to the greatest extent.";

/// Granularity and continuation instruction appended to the task.
pub const COARSE_TO_FINE_GUIDANCE: &str = "Try to imitate the process of human eyes recognizing objects to classify the features of objects from coarse to fine granularity and generate prompt words. You need to estimate your own adjectives to ensure that the features generated by your adjectives in the generated image are not distorted or exaggerated. The input length should remain roughly the same, and only generate descriptions of newly updated classes each time to avoid repeating descriptions of classes that have already been generated above.";

pub const BASELINE_TEMPLATE: &str = "a photo of a {class_name}";

pub fn default_system_template() -> String {
    format!("{COARSE_TO_FINE_TASK}\n\n{COARSE_TO_FINE_GUIDANCE}")
}

pub fn render(template: &str, class_name: &str) -> Result<String> {
    let class_name = class_name.trim();
    if class_name.is_empty() {
        return Err(PipelineError::Invalid("class name must not be empty".into()));
    }
    if !template.contains(CLASS_PLACEHOLDER) {
        return Err(PipelineError::Invalid(format!(
            "prompt template lacks the {CLASS_PLACEHOLDER} placeholder"
        )));
    }
    Ok(template.replace(CLASS_PLACEHOLDER, class_name))
}

pub fn build_system_prompt(class_name: &str, style: PromptStyle) -> Result<String> {
    match style {
        PromptStyle::CoarseToFine => render(&default_system_template(), class_name),
        PromptStyle::Baseline => render(BASELINE_TEMPLATE, class_name),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_prompt() {
        assert_eq!(
            build_system_prompt("Boxer", PromptStyle::Baseline).unwrap(),
            "a photo of a Boxer"
        );
    }

    #[test]
    fn coarse_to_fine_prompt_contains_task_and_guidance() {
        let p = build_system_prompt("Boxer", PromptStyle::CoarseToFine).unwrap();
        assert!(p.contains("Write a detailed description of Boxer"));
        assert!(p.contains("from coarse to fine granularity"));
        assert!(p.contains("only generate descriptions of newly updated classes"));
        assert!(!p.contains(CLASS_PLACEHOLDER));
    }

    #[test]
    fn empty_class_rejected() {
        for style in [PromptStyle::Baseline, PromptStyle::CoarseToFine] {
            assert!(build_system_prompt("", style).is_err());
            assert!(build_system_prompt("   ", style).is_err());
        }
    }

    #[test]
    fn pure_function() {
        let a = build_system_prompt("Siamese", PromptStyle::CoarseToFine).unwrap();
        let b = build_system_prompt("Siamese", PromptStyle::CoarseToFine).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn template_without_placeholder_rejected() {
        assert!(render("describe a thing", "cat").is_err());
    }
}
