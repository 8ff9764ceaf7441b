//! Layered JSON configuration: built-in defaults, then a config file, then
//! `--set key=value` overrides. Keys that the defaults do not know are
//! rejected so typos surface as validation errors.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Recursively overlays `patch` onto `base`.
pub fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(CliError::Usage(format!("unknown config key {here:?}"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Parses `value` as JSON when it is valid JSON, else takes it as a string.
fn parse_value(value: &str) -> Value {
    serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()))
}

/// Applies one `a.b.c=value` override.
pub fn set(base: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let mut slot = &mut *base;
    for part in key.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
    }
    *slot = parse_value(value);
    Ok(())
}

/// Builds a typed config from defaults, an optional file and overrides.
pub fn layered<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Value>,
    sets: &[String],
) -> Result<T, CliError> {
    let mut v = serde_json::to_value(defaults).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(f) = file {
        merge(&mut v, f, "")?;
    }
    for s in sets {
        set(&mut v, s)?;
    }
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

/// The value a key would take after the file and overrides, if any sets it.
pub fn peek(file: Option<&Value>, sets: &[String], key: &str) -> Option<Value> {
    let from_set = sets.iter().rev().find_map(|s| {
        s.split_once('=')
            .filter(|(k, _)| *k == key)
            .map(|(_, v)| parse_value(v))
    });
    from_set.or_else(|| file.and_then(|f| f.get(key).cloned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct Inner {
        a: f64,
        b: Option<usize>,
    }

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct Outer {
        name: String,
        inner: Inner,
    }

    fn defaults() -> Outer {
        Outer {
            name: "x".into(),
            inner: Inner { a: 1.0, b: None },
        }
    }

    #[test]
    fn overrides_apply_in_order() {
        let file = serde_json::json!({"inner": {"a": 2.5}});
        let sets = vec!["inner.b=4".to_string(), "name=hello".to_string(), "inner.a=3".to_string()];
        let out = layered(&defaults(), Some(&file), &sets).unwrap();
        assert_eq!(
            out,
            Outer {
                name: "hello".into(),
                inner: Inner { a: 3.0, b: Some(4) }
            }
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file = serde_json::json!({"inner": {"c": 1}});
        assert!(layered(&defaults(), Some(&file), &[]).is_err());
        assert!(layered(&defaults(), None, &["nope=1".into()]).is_err());
        assert!(layered(&defaults(), None, &["inner.a".into()]).is_err());
    }

    #[test]
    fn ill_typed_values_are_rejected() {
        assert!(layered(&defaults(), None, &["inner.a=abc".into()]).is_err());
    }

    #[test]
    fn peek_prefers_last_set() {
        let file = serde_json::json!({"recipe": "a"});
        let sets = vec!["recipe=b".to_string(), "recipe=c".to_string()];
        assert_eq!(peek(Some(&file), &sets, "recipe"), Some(Value::String("c".into())));
        assert_eq!(peek(Some(&file), &[], "recipe"), Some(Value::String("a".into())));
        assert_eq!(peek(None, &[], "recipe"), None);
    }
}
