use serde::{Deserialize, Serialize};

/// Single-turn chat markup with the generation prompt appended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatTemplate {
    /// Markup of the built-in instruct model.
    Tiny,
    ChatMl,
    Llama3,
    Mistral,
}

const QWEN_DEFAULT_SYSTEM: &str = "You are Qwen, created by Alibaba Cloud. You are a helpful assistant.";

impl ChatTemplate {
    /// Guesses the markup family from a hub `chat_template` string.
    pub fn detect(template: &str) -> Option<Self> {
        if template.contains("<|im_start|>") {
            Some(Self::ChatMl)
        } else if template.contains("<|start_header_id|>") {
            Some(Self::Llama3)
        } else if template.contains("[INST]") {
            Some(Self::Mistral)
        } else if template.contains("<|user|>") {
            Some(Self::Tiny)
        } else {
            None
        }
    }

    /// Returns the prompt text and whether the tokenizer should still add
    /// its own special prefix.
    pub fn apply(self, user: &str) -> (String, bool) {
        match self {
            Self::Tiny => (format!("<|user|>{user}<|end|><|assistant|>"), true),
            Self::ChatMl => (
                format!(
                    "<|im_start|>system\n{QWEN_DEFAULT_SYSTEM}<|im_end|>\n<|im_start|>user\n{user}<|im_end|>\n<|im_start|>assistant\n"
                ),
                false,
            ),
            Self::Llama3 => (
                format!(
                    "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n\n\
                     Cutting Knowledge Date: December 2023\nToday Date: 26 Jul 2024\n\n<|eot_id|>\
                     <|start_header_id|>user<|end_header_id|>\n\n{user}<|eot_id|>\
                     <|start_header_id|>assistant<|end_header_id|>\n\n"
                ),
                false,
            ),
            Self::Mistral => (format!("<s>[INST] {user}[/INST]"), false),
        }
    }

    /// Extra stop tokens beyond the config's EOS ids.
    pub fn stop_tokens(self) -> &'static [&'static str] {
        match self {
            Self::Tiny => &["<|end|>"],
            Self::ChatMl => &["<|im_end|>"],
            Self::Llama3 => &["<|eot_id|>"],
            Self::Mistral => &[],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_common_families() {
        assert_eq!(ChatTemplate::detect("{% for m in messages %}<|im_start|>"), Some(ChatTemplate::ChatMl));
        assert_eq!(ChatTemplate::detect("<|start_header_id|>"), Some(ChatTemplate::Llama3));
        assert_eq!(ChatTemplate::detect("[INST] x"), Some(ChatTemplate::Mistral));
        assert_eq!(ChatTemplate::detect("plain"), None);
        let (text, add) = ChatTemplate::Tiny.apply("hi");
        assert_eq!(text, "<|user|>hi<|end|><|assistant|>");
        assert!(add);
    }
}
