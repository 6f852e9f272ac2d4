use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::{load_model, InpainterModel};
use crate::error::{Error, Result};

/// Builds a model from an adapter-specific argument (for the built-in
/// `toy` adapter, a checkpoint path).
pub type AdapterFactory =
    Arc<dyn Fn(&str) -> Result<Arc<dyn InpainterModel>> + Send + Sync>;

/// Maps adapter identifiers to model factories.
#[derive(Clone, Default)]
pub struct AdapterRegistry {
    factories: BTreeMap<String, AdapterFactory>,
}

impl std::fmt::Debug for AdapterRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.factories.keys()).finish()
    }
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the `toy` checkpoint adapter.
    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        reg.register(
            "toy",
            Arc::new(|arg: &str| -> Result<Arc<dyn InpainterModel>> {
                Ok(Arc::new(load_model(arg)?))
            }),
        )
        .expect("empty registry");
        reg
    }

    pub fn register(&mut self, identifier: impl Into<String>, factory: AdapterFactory) -> Result<()> {
        let identifier = identifier.into();
        if self.factories.contains_key(&identifier) {
            return Err(Error::DuplicateAdapter(identifier));
        }
        self.factories.insert(identifier, factory);
        Ok(())
    }

    pub fn resolve(&self, identifier: &str) -> Result<AdapterFactory> {
        self.factories
            .get(identifier)
            .cloned()
            .ok_or_else(|| Error::UnknownAdapter {
                identifier: identifier.to_string(),
                known: self.identifiers(),
            })
    }

    pub fn identifiers(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    /// Instantiates a model reference of the form `adapter:argument`; a
    /// bare path ending in `.mpkt` goes to the `toy` adapter.
    pub fn instantiate(&self, reference: &str) -> Result<Arc<dyn InpainterModel>> {
        let is_checkpoint = Path::new(reference)
            .extension()
            .is_some_and(|e| e == "mpkt");
        let (adapter, arg) = match reference.split_once(':') {
            Some((a, rest)) if !is_checkpoint || self.factories.contains_key(a) => (a, rest),
            _ if is_checkpoint => ("toy", reference),
            _ => (reference, ""),
        };
        (self.resolve(adapter)?)(arg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::RngSeed;
    use crate::inpaint::{save_model, ToyInpainter, ToyInpainterConfig};

    #[test]
    fn register_and_resolve() {
        let mut reg = AdapterRegistry::new();
        let factory: AdapterFactory = Arc::new(|arg: &str| -> Result<Arc<dyn InpainterModel>> {
            Ok(Arc::new(ToyInpainter::new(arg, ToyInpainterConfig::default(), RngSeed(0))?))
        });
        reg.register("toy", factory.clone()).unwrap();
        assert!(Arc::ptr_eq(&reg.resolve("toy").unwrap(), &factory));
        assert!(matches!(reg.register("toy", factory), Err(Error::DuplicateAdapter(_))));
        match reg.resolve("rn") {
            Err(Error::UnknownAdapter { known, .. }) => assert_eq!(known, vec!["toy".to_string()]),
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
        let msg = reg.resolve("rn").err().unwrap().to_string();
        assert!(msg.contains("toy"), "{msg}");
        assert_eq!(reg.instantiate("toy:named").unwrap().identifier(), "named");
    }

    #[test]
    fn builtin_toy_adapter_loads_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mpkt");
        let m = ToyInpainter::new("alpha", ToyInpainterConfig { base_channels: 2, depth: 1 }, RngSeed(0)).unwrap();
        save_model(&m, &path).unwrap();
        let reg = AdapterRegistry::with_builtins();
        let p = path.to_str().unwrap();
        assert_eq!(reg.instantiate(p).unwrap().identifier(), "alpha");
        assert_eq!(reg.instantiate(&format!("toy:{p}")).unwrap().identifier(), "alpha");
        assert!(reg.instantiate("gmcnn:weights.bin").is_err());
    }
}
