use std::fmt;
use std::str::FromStr;

use hypermoe_core::harness::{LayerKind, ModelConfig};
use hypermoe_core::hyper::{ConditionOn, EmbeddingSource};
use hypermoe_core::{Error, Result};

/// A layer kind plus optional generated-expert variants, written
/// `hypermoe@selected@compressed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Method {
    pub layer_kind: LayerKind,
    pub condition_on: Option<ConditionOn>,
    pub embedding_source: Option<EmbeddingSource>,
}

impl Method {
    pub fn plain(layer_kind: LayerKind) -> Self {
        Self {
            layer_kind,
            condition_on: None,
            embedding_source: None,
        }
    }

    /// `base` with this method's layer kind and variant overrides.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.layer_kind = self.layer_kind;
        if let Some(c) = self.condition_on {
            cfg.condition_on = c;
        }
        if let Some(s) = self.embedding_source {
            cfg.embedding_source = s;
        }
        cfg
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('@');
        let layer_kind: LayerKind = parts.next().unwrap_or_default().parse()?;
        let mut method = Method::plain(layer_kind);
        for variant in parts {
            if layer_kind != LayerKind::Hypermoe {
                return Err(Error::Config(format!(
                    "variant `@{variant}` only applies to hypermoe, not `{}`",
                    layer_kind.name()
                )));
            }
            match variant {
                "selected" => method.condition_on = Some(ConditionOn::Selected),
                "unselected" => method.condition_on = Some(ConditionOn::Unselected),
                "learned" => method.embedding_source = Some(EmbeddingSource::Learned),
                "compressed" => method.embedding_source = Some(EmbeddingSource::Compressed),
                "none" => method.embedding_source = Some(EmbeddingSource::None),
                other => {
                    return Err(Error::Config(format!(
                        "unknown method variant `@{other}` (expected selected, unselected, learned, compressed or none)"
                    )))
                }
            }
        }
        Ok(method)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.layer_kind.name())?;
        match self.condition_on {
            Some(ConditionOn::Selected) => f.write_str("@selected")?,
            Some(ConditionOn::Unselected) => f.write_str("@unselected")?,
            None => {}
        }
        match self.embedding_source {
            Some(EmbeddingSource::Learned) => f.write_str("@learned")?,
            Some(EmbeddingSource::Compressed) => f.write_str("@compressed")?,
            Some(EmbeddingSource::None) => f.write_str("@none")?,
            None => {}
        }
        Ok(())
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let methods: Vec<Method> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(Error::Config("at least one method is required".into()));
    }
    Ok(methods)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_roundtrip() {
        for id in ["dense", "moe", "moe_share", "hypermoe", "hypermoe@selected", "hypermoe@unselected@none"] {
            assert_eq!(id.parse::<Method>().unwrap().to_string(), id);
        }
    }

    #[test]
    fn variants_override_config() {
        let m: Method = "hypermoe@selected@compressed".parse().unwrap();
        let cfg = m.apply(&ModelConfig {
            layer_kind: LayerKind::Dense,
            ..ModelConfig::default()
        });
        assert_eq!(cfg.layer_kind, LayerKind::Hypermoe);
        assert_eq!(cfg.condition_on, ConditionOn::Selected);
        assert_eq!(cfg.embedding_source, EmbeddingSource::Compressed);
    }

    #[test]
    fn bad_ids_are_config_errors() {
        for id in ["moe@selected", "hypermoe@sideways", "switch", ""] {
            assert!(matches!(id.parse::<Method>(), Err(Error::Config(_))), "{id}");
        }
        assert!(parse_methods(" , ").is_err());
        assert_eq!(parse_methods("moe, hypermoe").unwrap().len(), 2);
    }
}
