//! Name-keyed factories for interchangeable strategies (distance metrics,
//! predictors). A spec string is `name` or `name:argument`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

type Factory<T, C> = Box<dyn Fn(&C, Option<&str>) -> Result<Box<T>> + Send + Sync>;

pub struct Registry<T: ?Sized, C: ?Sized = ()> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T, C>>,
}

impl<T: ?Sized, C: ?Sized> Registry<T, C> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    /// Registers `factory` under `name`, replacing any previous entry.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        factory: impl Fn(&C, Option<&str>) -> Result<Box<T>> + Send + Sync + 'static,
    ) -> &mut Self {
        self.factories.insert(name.into(), Box::new(factory));
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn create(&self, spec: &str, ctx: &C) -> Result<Box<T>> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (spec.trim(), None),
        };
        let factory = self.factories.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: self.kind,
            name: name.to_string(),
            known: self.names().collect::<Vec<_>>().join(", "),
        })?;
        factory(ctx, arg)
    }
}
