//! Validation of question/answer refinement records returned by a reviewer model.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RefineError {
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("expected a JSON object, found {0}")]
    NotAnObject(&'static str),
    #[error("expected exactly one JSON object, found more")]
    MultipleObjects,
    #[error("trailing content after the JSON object")]
    TrailingContent,
    #[error("missing field {0:?}")]
    MissingField(&'static str),
    #[error("field {0:?} must be a string")]
    NotAString(&'static str),
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("unknown status {0:?}: expected consistent, needs_fix or drop")]
    UnknownStatus(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementStatus {
    Consistent,
    NeedsFix,
    Drop,
}

impl RefinementStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Consistent => "consistent",
            Self::NeedsFix => "needs_fix",
            Self::Drop => "drop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub status: RefinementStatus,
    pub ori_q: String,
    pub ori_a: String,
    pub new_q: String,
    pub new_a: String,
    pub notes: String,
}

const FIELDS: [&str; 6] = ["status", "ori_q", "ori_a", "new_q", "new_a", "notes"];

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn take_str(obj: &mut Map<String, Value>, field: &'static str) -> Result<String, RefineError> {
    match obj.remove(field) {
        None => Err(RefineError::MissingField(field)),
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(RefineError::NotAString(field)),
    }
}

/// Parses a blob that must hold exactly one refinement object and nothing
/// else but whitespace.
pub fn validate_refinement(raw: &str) -> Result<RefinementRecord, RefineError> {
    let mut stream = serde_json::Deserializer::from_str(raw).into_iter::<Value>();
    let value = match stream.next() {
        None => return Err(RefineError::Malformed("empty input".into())),
        Some(Err(e)) => return Err(RefineError::Malformed(e.to_string())),
        Some(Ok(v)) => v,
    };
    match stream.next() {
        None => {}
        Some(Ok(_)) => return Err(RefineError::MultipleObjects),
        Some(Err(_)) => return Err(RefineError::TrailingContent),
    }
    let mut obj = match value {
        Value::Object(o) => o,
        other => return Err(RefineError::NotAnObject(kind(&other))),
    };

    let status = take_str(&mut obj, "status")?;
    let status = match status.as_str() {
        "consistent" => RefinementStatus::Consistent,
        "needs_fix" => RefinementStatus::NeedsFix,
        "drop" => RefinementStatus::Drop,
        _ => return Err(RefineError::UnknownStatus(status)),
    };
    let record = RefinementRecord {
        status,
        ori_q: take_str(&mut obj, FIELDS[1])?,
        ori_a: take_str(&mut obj, FIELDS[2])?,
        new_q: take_str(&mut obj, FIELDS[3])?,
        new_a: take_str(&mut obj, FIELDS[4])?,
        notes: take_str(&mut obj, FIELDS[5])?,
    };
    if let Some(extra) = obj.keys().min() {
        return Err(RefineError::UnknownField(extra.clone()));
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GOOD: &str = r#"{"status": "needs_fix", "ori_q": "Is there a fracture?", "ori_a": "yes",
        "new_q": "Is there a fracture of the left femur?", "new_a": "yes", "notes": "question too vague"}"#;

    #[test]
    fn accepts_well_formed() {
        let r = validate_refinement(GOOD).unwrap();
        assert_eq!(r.status, RefinementStatus::NeedsFix);
        assert_eq!(r.notes, "question too vague");
        assert!(validate_refinement(&format!("  {GOOD}\n\n")).is_ok());
    }

    #[test]
    fn rejects_bad_status() {
        let raw = GOOD.replace("needs_fix", "maybe");
        assert_eq!(validate_refinement(&raw), Err(RefineError::UnknownStatus("maybe".into())));
        let raw = GOOD.replace("needs_fix", "Drop");
        assert!(matches!(validate_refinement(&raw), Err(RefineError::UnknownStatus(_))));
    }

    #[test]
    fn rejects_two_objects() {
        assert_eq!(validate_refinement(&format!("{GOOD}{GOOD}")), Err(RefineError::MultipleObjects));
        assert_eq!(validate_refinement(&format!("{GOOD}\n{GOOD}")), Err(RefineError::MultipleObjects));
    }

    #[test]
    fn rejects_other_shapes() {
        assert_eq!(validate_refinement(&format!("{GOOD} trailing")), Err(RefineError::TrailingContent));
        assert!(matches!(validate_refinement("{\"status\": "), Err(RefineError::Malformed(_))));
        assert!(matches!(validate_refinement(""), Err(RefineError::Malformed(_))));
        assert_eq!(validate_refinement("[1]"), Err(RefineError::NotAnObject("an array")));
        let missing = GOOD.replace(r#""notes": "question too vague""#, r#""note": "x""#);
        assert_eq!(validate_refinement(&missing), Err(RefineError::MissingField("notes")));
        let extra = GOOD.replacen('{', r#"{"score": 3, "#, 1);
        assert_eq!(validate_refinement(&extra), Err(RefineError::UnknownField("score".into())));
        let typed = GOOD.replace(r#""ori_a": "yes""#, r#""ori_a": 1"#);
        assert_eq!(validate_refinement(&typed), Err(RefineError::NotAString("ori_a")));
    }

    proptest! {
        #[test]
        fn round_trip(
            status in prop::sample::select(vec![RefinementStatus::Consistent, RefinementStatus::NeedsFix, RefinementStatus::Drop]),
            fields in prop::collection::vec(".{0,20}", 5),
        ) {
            let rec = RefinementRecord {
                status,
                ori_q: fields[0].clone(),
                ori_a: fields[1].clone(),
                new_q: fields[2].clone(),
                new_a: fields[3].clone(),
                notes: fields[4].clone(),
            };
            let back = validate_refinement(&serde_json::to_string(&rec).unwrap()).unwrap();
            prop_assert_eq!(back, rec);
        }
    }
}
