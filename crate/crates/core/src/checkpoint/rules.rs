//! Suffix rules that recognize channel-mapped modules by tensor name.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    LinearOut,
    Embedding,
    Norm,
    LmHead,
}

impl Kind {
    /// Axis of the 2-D weight indexed by output channel.
    pub fn channel_axis(self) -> usize {
        match self {
            Kind::Embedding => 1,
            Kind::LinearOut | Kind::LmHead | Kind::Norm => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleRule {
    /// Matched against the end of the module path (tensor name without its
    /// `.weight` / `.bias` suffix).
    pub suffix: String,
    pub kind: Kind,
}

/// Ordered rule list; the first matching rule wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTable {
    pub rules: Vec<ModuleRule>,
}

impl Default for RuleTable {
    fn default() -> Self {
        let rule = |suffix: &str, kind| ModuleRule {
            suffix: suffix.to_string(),
            kind,
        };
        RuleTable {
            rules: vec![
                rule("embed_tokens", Kind::Embedding),
                rule("tok_embeddings", Kind::Embedding),
                rule("word_embeddings", Kind::Embedding),
                rule("wte", Kind::Embedding),
                rule("lm_head", Kind::LmHead),
                rule("embed_out", Kind::LmHead),
                rule("norm", Kind::Norm),
                rule("layernorm", Kind::Norm),
                rule("ln_f", Kind::Norm),
                rule("ln_1", Kind::Norm),
                rule("ln_2", Kind::Norm),
                rule("_proj", Kind::LinearOut),
                rule("query_key_value", Kind::LinearOut),
                rule("dense", Kind::LinearOut),
                rule("dense_h_to_4h", Kind::LinearOut),
                rule("dense_4h_to_h", Kind::LinearOut),
                rule("fc1", Kind::LinearOut),
                rule("fc2", Kind::LinearOut),
                rule("wq", Kind::LinearOut),
                rule("wk", Kind::LinearOut),
                rule("wv", Kind::LinearOut),
                rule("wo", Kind::LinearOut),
                rule("w1", Kind::LinearOut),
                rule("w2", Kind::LinearOut),
                rule("w3", Kind::LinearOut),
            ],
        }
    }
}

/// Role of a tensor inside its module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TensorRole {
    Weight,
    Bias,
}

/// Split a tensor name into `(module path, role)`.
pub fn split_tensor_name(name: &str) -> Option<(&str, TensorRole)> {
    if let Some(p) = name.strip_suffix(".weight") {
        Some((p, TensorRole::Weight))
    } else {
        name.strip_suffix(".bias").map(|p| (p, TensorRole::Bias))
    }
}

impl RuleTable {
    pub fn classify(&self, module_path: &str) -> Option<Kind> {
        self.rules
            .iter()
            .find(|r| module_path.ends_with(r.suffix.as_str()))
            .map(|r| r.kind)
    }
}

/// Layer number of a module path, parsed from the component that follows
/// `layers`, `layer`, `h` or `blocks`.
pub fn layer_of(module_path: &str) -> Option<usize> {
    let parts: Vec<&str> = module_path.split('.').collect();
    parts.windows(2).find_map(|w| match w[0] {
        "layers" | "layer" | "h" | "blocks" => w[1].parse().ok(),
        _ => None,
    })
}

/// Module type label: the last path component of a recognized module,
/// `"other"` when no rule matches.
pub fn module_type_of(rules: &RuleTable, module_path: &str) -> String {
    let path = split_tensor_name(module_path).map_or(module_path, |(p, _)| p);
    match rules.classify(path) {
        Some(_) => path.rsplit('.').next().unwrap_or(path).to_string(),
        None => "other".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_decoder_paths() {
        let r = RuleTable::default();
        assert_eq!(layer_of("model.layers.12.self_attn.q_proj"), Some(12));
        assert_eq!(
            module_type_of(&r, "model.layers.12.self_attn.q_proj"),
            "q_proj"
        );
        assert_eq!(layer_of("lm_head"), None);
        assert_eq!(module_type_of(&r, "lm_head"), "lm_head");
        assert_eq!(module_type_of(&r, "model.rotary_emb.inv_freq"), "other");
    }

    #[test]
    fn classifies_default_names() {
        let r = RuleTable::default();
        assert_eq!(r.classify("model.embed_tokens"), Some(Kind::Embedding));
        assert_eq!(
            r.classify("model.layers.0.input_layernorm"),
            Some(Kind::Norm)
        );
        assert_eq!(
            r.classify("model.layers.0.post_attention_layernorm"),
            Some(Kind::Norm)
        );
        assert_eq!(r.classify("model.norm"), Some(Kind::Norm));
        assert_eq!(
            r.classify("model.layers.0.mlp.down_proj"),
            Some(Kind::LinearOut)
        );
        assert_eq!(r.classify("lm_head"), Some(Kind::LmHead));
        assert_eq!(r.classify("model.rotary_emb"), None);
    }

    #[test]
    fn tensor_name_split() {
        assert_eq!(
            split_tensor_name("a.q_proj.bias"),
            Some(("a.q_proj", TensorRole::Bias))
        );
        assert_eq!(split_tensor_name("inv_freq"), None);
    }
}
