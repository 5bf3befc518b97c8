//! Extraction of single-field JSON envelopes from free-form model output.

use serde_json::{Map, Value};

/// First syntactically valid JSON object embedded anywhere in `raw`.
pub fn first_json_object(raw: &str) -> Option<Map<String, Value>> {
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

/// String value of `field` (matched case-insensitively) in the first JSON
/// object of `raw`. An object with exactly one string field is accepted
/// under any key.
pub fn envelope_field(raw: &str, field: &str) -> Option<String> {
    let obj = first_json_object(raw)?;
    let wanted = field.to_lowercase();
    if let Some((_, v)) = obj.iter().find(|(k, _)| k.trim().to_lowercase() == wanted) {
        return v.as_str().map(str::to_string);
    }
    if obj.len() == 1 {
        return obj.values().next().and_then(Value::as_str).map(str::to_string);
    }
    None
}
