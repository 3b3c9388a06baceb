//! Structural schemas for model responses.
//!
//! A deliberately small subset of JSON Schema: objects with required and
//! optional properties, arrays, strings (optionally enumerated), integers,
//! and nullable wrappers. Violations carry a JSON-path-like location so the
//! repair prompt can name the offending field.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Schema {
    Object {
        properties: BTreeMap<String, Schema>,
        #[serde(default)]
        required: Vec<String>,
    },
    Array {
        items: Box<Schema>,
        #[serde(default)]
        min_items: usize,
    },
    String {
        #[serde(default)]
        min_length: usize,
        #[serde(default, rename = "enum", skip_serializing_if = "Option::is_none")]
        allowed: Option<Vec<String>>,
    },
    Integer {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        minimum: Option<i64>,
    },
    Nullable {
        inner: Box<Schema>,
    },
    Any,
}

impl Schema {
    pub fn object<const N: usize>(required: [(&str, Schema); N]) -> Self {
        Schema::Object {
            required: required.iter().map(|(k, _)| (*k).to_owned()).collect(),
            properties: required
                .into_iter()
                .map(|(k, v)| (k.to_owned(), v))
                .collect(),
        }
    }

    /// Adds an optional property to an object schema.
    pub fn with_optional(mut self, name: &str, schema: Schema) -> Self {
        if let Schema::Object { properties, .. } = &mut self {
            properties.insert(name.to_owned(), schema);
        }
        self
    }

    pub fn array(items: Schema) -> Self {
        Schema::Array {
            items: Box::new(items),
            min_items: 0,
        }
    }

    pub fn non_empty_array(items: Schema) -> Self {
        Schema::Array {
            items: Box::new(items),
            min_items: 1,
        }
    }

    pub fn string() -> Self {
        Schema::String {
            min_length: 0,
            allowed: None,
        }
    }

    pub fn non_empty_string() -> Self {
        Schema::String {
            min_length: 1,
            allowed: None,
        }
    }

    pub fn one_of(values: &[&str]) -> Self {
        Schema::String {
            min_length: 0,
            allowed: Some(values.iter().map(|v| (*v).to_owned()).collect()),
        }
    }

    pub fn nullable(inner: Schema) -> Self {
        Schema::Nullable {
            inner: Box::new(inner),
        }
    }

    /// Collects every violation of `value` against this schema.
    pub fn validate(&self, value: &Value) -> Vec<Violation> {
        let mut out = Vec::new();
        self.check(value, "$", &mut out);
        out
    }

    fn check(&self, value: &Value, path: &str, out: &mut Vec<Violation>) {
        let mut push = |message: String| {
            out.push(Violation {
                path: path.to_owned(),
                message,
            })
        };
        match self {
            Schema::Any => {}
            Schema::Nullable { inner } => {
                if !value.is_null() {
                    inner.check(value, path, out);
                }
            }
            Schema::Object {
                properties,
                required,
            } => {
                let Some(map) = value.as_object() else {
                    return push(format!("expected an object, found {}", kind(value)));
                };
                for name in required {
                    if !map.contains_key(name) {
                        push(format!("missing required field `{name}`"));
                    }
                }
                for (name, schema) in properties {
                    if let Some(v) = map.get(name) {
                        schema.check(v, &format!("{path}.{name}"), out);
                    }
                }
            }
            Schema::Array { items, min_items } => {
                let Some(list) = value.as_array() else {
                    return push(format!("expected an array, found {}", kind(value)));
                };
                if list.len() < *min_items {
                    push(format!(
                        "expected at least {min_items} item(s), found {}",
                        list.len()
                    ));
                }
                for (i, item) in list.iter().enumerate() {
                    items.check(item, &format!("{path}[{i}]"), out);
                }
            }
            Schema::String {
                min_length,
                allowed,
            } => {
                let Some(s) = value.as_str() else {
                    return push(format!("expected a string, found {}", kind(value)));
                };
                if s.trim().chars().count() < *min_length {
                    push(format!(
                        "expected a non-empty string of at least {min_length} character(s)"
                    ));
                }
                if let Some(allowed) = allowed {
                    if !allowed.iter().any(|a| a == s) {
                        push(format!("`{s}` is not one of {allowed:?}"));
                    }
                }
            }
            Schema::Integer { minimum } => match value.as_i64() {
                None => push(format!("expected an integer, found {}", kind(value))),
                Some(n) => {
                    if let Some(min) = minimum {
                        if n < *min {
                            push(format!("{n} is below the minimum {min}"));
                        }
                    }
                }
            },
        }
    }
}

fn kind(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("schema `{0}` is already registered")]
    Duplicate(String),
    #[error("schema `{0}` is not registered")]
    Unknown(String),
}

#[derive(Debug, Default)]
pub struct SchemaRegistry {
    schemas: RwLock<HashMap<String, Schema>>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, schema_id: &str, schema: Schema) -> Result<(), RegistryError> {
        let mut schemas = self.schemas.write().expect("schema registry poisoned");
        if schemas.contains_key(schema_id) {
            return Err(RegistryError::Duplicate(schema_id.to_owned()));
        }
        schemas.insert(schema_id.to_owned(), schema);
        Ok(())
    }

    pub fn contains(&self, schema_id: &str) -> bool {
        self.schemas
            .read()
            .expect("schema registry poisoned")
            .contains_key(schema_id)
    }

    pub fn validate(
        &self,
        schema_id: &str,
        value: &Value,
    ) -> Result<Vec<Violation>, RegistryError> {
        let schemas = self.schemas.read().expect("schema registry poisoned");
        let schema = schemas
            .get(schema_id)
            .ok_or_else(|| RegistryError::Unknown(schema_id.to_owned()))?;
        Ok(schema.validate(value))
    }
}
