//! Typed parameter values for component specs, plus a strict reader that
//! factories use to pull their hyperparameters and reject unknown keys.

use std::cell::RefCell;
use std::collections::HashSet;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<ParamValue>),
    Map(Vec<(String, ParamValue)>),
}

impl ParamValue {
    pub fn type_name(&self) -> &'static str {
        match self {
            ParamValue::Bool(_) => "bool",
            ParamValue::Int(_) => "integer",
            ParamValue::Float(_) => "float",
            ParamValue::Str(_) => "string",
            ParamValue::List(_) => "list",
            ParamValue::Map(_) => "map",
        }
    }
}

/// A named component plus its keyword parameters: `type: folk_rnn` in a
/// config section, with every sibling key treated as a hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSpec {
    pub type_name: String,
    pub params: Vec<(String, ParamValue)>,
}

impl ComponentSpec {
    pub fn new(type_name: impl Into<String>) -> Self {
        Self { type_name: type_name.into(), params: Vec::new() }
    }

    pub fn with(mut self, key: impl Into<String>, value: ParamValue) -> Self {
        self.params.push((key.into(), value));
        self
    }

    pub fn get(&self, key: &str) -> Option<&ParamValue> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("component {component:?}: parameter {key:?}: {msg}")]
pub struct ParamError {
    pub component: String,
    pub key: String,
    pub msg: String,
}

/// Pulls typed parameters out of a [`ComponentSpec`] while remembering which
/// keys were consumed; [`ParamReader::finish`] turns any leftover key into an
/// error. Silent hyperparameter typos are the failure mode this guards.
pub struct ParamReader<'a> {
    spec: &'a ComponentSpec,
    taken: RefCell<HashSet<&'a str>>,
}

impl<'a> ParamReader<'a> {
    pub fn new(spec: &'a ComponentSpec) -> Self {
        Self { spec, taken: RefCell::new(HashSet::new()) }
    }

    fn error(&self, key: &str, msg: impl Into<String>) -> ParamError {
        ParamError {
            component: self.spec.type_name.clone(),
            key: key.to_string(),
            msg: msg.into(),
        }
    }

    fn lookup(&self, key: &str) -> Option<&'a ParamValue> {
        let found = self.spec.params.iter().find(|(k, _)| k == key);
        if let Some((k, v)) = found {
            self.taken.borrow_mut().insert(k.as_str());
            return Some(v);
        }
        None
    }

    pub fn opt_i64(&self, key: &str) -> Result<Option<i64>, ParamError> {
        match self.lookup(key) {
            None => Ok(None),
            Some(ParamValue::Int(v)) => Ok(Some(*v)),
            Some(other) => Err(self.error(key, format!("expected integer, got {}", other.type_name()))),
        }
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>, ParamError> {
        match self.opt_i64(key)? {
            None => Ok(None),
            Some(v) if v >= 0 => Ok(Some(v as usize)),
            Some(v) => Err(self.error(key, format!("expected non-negative integer, got {v}"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ParamError> {
        Ok(self.opt_usize(key)?.unwrap_or(default))
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>, ParamError> {
        match self.lookup(key) {
            None => Ok(None),
            Some(ParamValue::Float(v)) => Ok(Some(*v)),
            Some(ParamValue::Int(v)) => Ok(Some(*v as f64)),
            Some(other) => Err(self.error(key, format!("expected number, got {}", other.type_name()))),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ParamError> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    pub fn opt_bool(&self, key: &str) -> Result<Option<bool>, ParamError> {
        match self.lookup(key) {
            None => Ok(None),
            Some(ParamValue::Bool(v)) => Ok(Some(*v)),
            Some(other) => Err(self.error(key, format!("expected bool, got {}", other.type_name()))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, ParamError> {
        Ok(self.opt_bool(key)?.unwrap_or(default))
    }

    pub fn opt_str(&self, key: &str) -> Result<Option<&'a str>, ParamError> {
        match self.lookup(key) {
            None => Ok(None),
            Some(ParamValue::Str(v)) => Ok(Some(v.as_str())),
            Some(other) => Err(self.error(key, format!("expected string, got {}", other.type_name()))),
        }
    }

    pub fn require_str(&self, key: &str) -> Result<&'a str, ParamError> {
        self.opt_str(key)?.ok_or_else(|| self.error(key, "required parameter is missing"))
    }

    pub fn require_usize(&self, key: &str) -> Result<usize, ParamError> {
        self.opt_usize(key)?.ok_or_else(|| self.error(key, "required parameter is missing"))
    }

    /// Validate a positive (>= 1) integer parameter.
    pub fn positive_or(&self, key: &str, default: usize) -> Result<usize, ParamError> {
        let v = self.usize_or(key, default)?;
        if v == 0 {
            return Err(self.error(key, "must be at least 1"));
        }
        Ok(v)
    }

    /// Reject any parameter key the factory never consumed.
    pub fn finish(self) -> Result<(), ParamError> {
        let taken = self.taken.borrow();
        for (key, _) in &self.spec.params {
            if !taken.contains(key.as_str()) {
                return Err(ParamError {
                    component: self.spec.type_name.clone(),
                    key: key.clone(),
                    msg: "unknown parameter".to_string(),
                });
            }
        }
        Ok(())
    }
}
