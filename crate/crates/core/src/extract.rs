//! Locating JSON values inside free-form model output.

use serde_json::{Deserializer, Value};

fn first_value_from(raw: &str, opener: char, accept: impl Fn(&Value) -> bool) -> Option<Value> {
    for (pos, _) in raw.match_indices(opener) {
        let mut stream = Deserializer::from_str(&raw[pos..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            if accept(&v) {
                return Some(v);
            }
        }
    }
    None
}

/// The first complete JSON array in `raw`; chatter and code fences around it
/// are ignored.
pub fn first_json_array(raw: &str) -> Option<Vec<Value>> {
    match first_value_from(raw, '[', Value::is_array)? {
        Value::Array(a) => Some(a),
        _ => None,
    }
}

pub fn first_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    match first_value_from(raw, '{', Value::is_object)? {
        Value::Object(m) => Some(m),
        _ => None,
    }
}
