use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use num_rational::BigRational;
use serde_json::{Map, Number, Value};
use thiserror::Error;

use super::calculator::Calculator;
use crate::semantic::ObserveStatus;
use crate::transaction::is_reserved_tool;

/// What a tool hands back for the OBSERVE reply.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolOutcome {
    pub status: ObserveStatus,
    pub output: Value,
    pub metrics: Option<BTreeMap<String, Number>>,
}

impl ToolOutcome {
    pub fn ok(output: impl Into<Value>) -> Self {
        ToolOutcome {
            status: ObserveStatus::Ok,
            output: output.into(),
            metrics: None,
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        ToolOutcome {
            status: ObserveStatus::Error,
            output: Value::String(message.into()),
            metrics: None,
        }
    }

    pub fn timeout(message: impl Into<String>) -> Self {
        ToolOutcome {
            status: ObserveStatus::Timeout,
            output: Value::String(message.into()),
            metrics: None,
        }
    }
}

/// A tool callable through ACT messages. Must be reentrant: the node calls it
/// from every connection thread.
pub trait ToolHandler: Send + Sync {
    /// `deadline` is in epoch seconds, when the caller set one.
    fn call(&self, params: &Map<String, Value>, deadline: Option<f64>) -> ToolOutcome;
}

impl<F> ToolHandler for F
where
    F: Fn(&Map<String, Value>, Option<f64>) -> ToolOutcome + Send + Sync,
{
    fn call(&self, params: &Map<String, Value>, deadline: Option<f64>) -> ToolOutcome {
        self(params, deadline)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("tool {0:?} is already registered")]
    DuplicateTool(String),
    #[error("tool name {0:?} is reserved")]
    ReservedName(String),
    #[error("tool name must be non-empty")]
    EmptyName,
}

#[derive(Default)]
pub struct ToolRegistry {
    tools: RwLock<HashMap<String, Arc<dyn ToolHandler>>>,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolRegistry").field("tools", &self.names()).finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &self,
        name: impl Into<String>,
        handler: impl ToolHandler + 'static,
    ) -> Result<(), RegistryError> {
        let name = name.into();
        if name.is_empty() {
            return Err(RegistryError::EmptyName);
        }
        if is_reserved_tool(&name) {
            return Err(RegistryError::ReservedName(name));
        }
        let mut tools = self.tools.write().unwrap_or_else(std::sync::PoisonError::into_inner);
        if tools.contains_key(&name) {
            return Err(RegistryError::DuplicateTool(name));
        }
        tools.insert(name, Arc::new(handler));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn ToolHandler>> {
        self.tools
            .read()
            .unwrap_or_else(std::sync::PoisonError::into_inner)
            .get(name)
            .cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .tools
            .read()
            .unwrap_or_else(std::sync::PoisonError::into_inner)
            .keys()
            .cloned()
            .collect();
        names.sort();
        names
    }
}

/// The built-in `calculator` tool: evaluates `params.expression` exactly.
pub fn builtin_calculator(params: &Map<String, Value>, _deadline: Option<f64>) -> ToolOutcome {
    let Some(expression) = params.get("expression").and_then(Value::as_str) else {
        return ToolOutcome::error("params.expression must be a string");
    };
    match Calculator::<BigRational>::new().evaluate_to_string(expression) {
        Ok(result) => ToolOutcome::ok(result),
        Err(e) => ToolOutcome::error(e.to_string()),
    }
}
