//! Canonical text form shared by the wire protocol and the on-disk logs.
//!
//! A canonical document is a single JSON object with keys sorted bytewise,
//! no insignificant whitespace, and floats printed in their shortest
//! round-trip representation. Decoding is strict: unknown keys, missing keys
//! and wrongly typed values are all errors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde_json::{Map, Value};

use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecErrorKind {
    /// Not parseable as a single object.
    Malformed,
    /// Well-formed object with an unrecognised `t` tag.
    UnknownType,
    /// Missing, extra or mistyped field.
    Schema,
    /// Field well typed but outside its declared bound.
    OutOfRange,
    /// Value cannot be encoded (non-finite float).
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?}: {detail}")]
pub struct CodecError {
    pub kind: CodecErrorKind,
    pub detail: String,
}

impl CodecError {
    pub fn new(kind: CodecErrorKind, detail: impl Into<String>) -> Self {
        Self { kind, detail: detail.into() }
    }

    pub fn schema(detail: impl Into<String>) -> Self {
        Self::new(CodecErrorKind::Schema, detail)
    }

    pub fn out_of_range(detail: impl Into<String>) -> Self {
        Self::new(CodecErrorKind::OutOfRange, detail)
    }
}

pub type CodecResult<T> = Result<T, CodecError>;

/// Serialises an object in canonical form.
pub fn to_canonical(obj: Map<String, Value>) -> String {
    // `Map` is a BTreeMap, so keys come out sorted; `to_string` is compact.
    Value::Object(obj).to_string()
}

/// Canonical form of an arbitrary JSON value (objects at any depth get sorted keys).
pub fn value_to_canonical(v: &Value) -> String {
    v.to_string()
}

pub fn parse_object(text: &str) -> CodecResult<Map<String, Value>> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CodecError::new(CodecErrorKind::Malformed, "top-level value is not an object")),
        Err(e) => Err(CodecError::new(CodecErrorKind::Malformed, e.to_string())),
    }
}

pub fn num(v: f64) -> CodecResult<Value> {
    if !v.is_finite() {
        return Err(CodecError::new(CodecErrorKind::NonFinite, "non-finite number"));
    }
    Ok(Value::from(v))
}

pub fn nums(vs: &[f64]) -> CodecResult<Value> {
    vs.iter().map(|&v| num(v)).collect::<CodecResult<Vec<_>>>().map(Value::Array)
}

pub fn pose(p: &Pose) -> CodecResult<Value> {
    nums(&p.to_array())
}

/// Builder for canonical objects.
#[derive(Default)]
pub struct ObjectBuilder {
    map: Map<String, Value>,
}

impl ObjectBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tagged(tag: &str) -> Self {
        let mut b = Self::new();
        b.map.insert("t".into(), Value::from(tag));
        b
    }

    pub fn set(mut self, key: &str, v: impl Into<Value>) -> Self {
        self.map.insert(key.into(), v.into());
        self
    }

    pub fn set_opt(self, key: &str, v: Option<impl Into<Value>>) -> Self {
        match v {
            Some(v) => self.set(key, v),
            None => self,
        }
    }

    pub fn num(self, key: &str, v: f64) -> CodecResult<Self> {
        Ok(self.set(key, num(v)?))
    }

    pub fn build(self) -> Map<String, Value> {
        self.map
    }

    pub fn encode(self) -> String {
        to_canonical(self.map)
    }
}

/// Strict field reader: every key must be consumed before [`Fields::finish`].
pub struct Fields {
    map: Map<String, Value>,
    ctx: String,
}

impl Fields {
    pub fn new(map: Map<String, Value>, ctx: impl Into<String>) -> Self {
        Self { map, ctx: ctx.into() }
    }

    pub fn from_value(v: Value, ctx: impl Into<String>) -> CodecResult<Self> {
        let ctx = ctx.into();
        match v {
            Value::Object(map) => Ok(Self { map, ctx }),
            _ => Err(CodecError::schema(format!("{ctx}: expected object"))),
        }
    }

    fn err(&self, key: &str, what: &str) -> CodecError {
        CodecError::schema(format!("{}.{key}: {what}", self.ctx))
    }

    pub fn take(&mut self, key: &str) -> CodecResult<Value> {
        self.map.remove(key).ok_or_else(|| self.err(key, "missing"))
    }

    /// Absent and `null` both read as `None`.
    pub fn take_opt(&mut self, key: &str) -> Option<Value> {
        match self.map.remove(key) {
            Some(Value::Null) | None => None,
            Some(v) => Some(v),
        }
    }

    pub fn u64(&mut self, key: &str) -> CodecResult<u64> {
        let v = self.take(key)?;
        v.as_u64().ok_or_else(|| self.err(key, "expected non-negative integer"))
    }

    pub fn opt_u64(&mut self, key: &str) -> CodecResult<Option<u64>> {
        match self.take_opt(key) {
            None => Ok(None),
            Some(v) => v.as_u64().map(Some).ok_or_else(|| self.err(key, "expected non-negative integer")),
        }
    }

    pub fn f64(&mut self, key: &str) -> CodecResult<f64> {
        let v = self.take(key)?;
        as_f64(&v).ok_or_else(|| self.err(key, "expected number"))
    }

    pub fn opt_f64(&mut self, key: &str) -> CodecResult<Option<f64>> {
        match self.take_opt(key) {
            None => Ok(None),
            Some(v) => as_f64(&v).map(Some).ok_or_else(|| self.err(key, "expected number")),
        }
    }

    pub fn bool(&mut self, key: &str) -> CodecResult<bool> {
        let v = self.take(key)?;
        v.as_bool().ok_or_else(|| self.err(key, "expected boolean"))
    }

    pub fn string(&mut self, key: &str) -> CodecResult<String> {
        match self.take(key)? {
            Value::String(s) => Ok(s),
            _ => Err(self.err(key, "expected string")),
        }
    }

    pub fn opt_string(&mut self, key: &str) -> CodecResult<Option<String>> {
        match self.take_opt(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.err(key, "expected string or null")),
        }
    }

    pub fn strings(&mut self, key: &str) -> CodecResult<Vec<String>> {
        let v = self.take(key)?;
        let arr = v.as_array().ok_or_else(|| self.err(key, "expected array"))?;
        arr.iter()
            .map(|s| s.as_str().map(String::from).ok_or_else(|| self.err(key, "expected strings")))
            .collect()
    }

    pub fn f64s(&mut self, key: &str) -> CodecResult<Vec<f64>> {
        let v = self.take(key)?;
        f64_array(&v).ok_or_else(|| self.err(key, "expected array of numbers"))
    }

    pub fn pose(&mut self, key: &str) -> CodecResult<Pose> {
        let v = self.take(key)?;
        pose_from_value(&v).ok_or_else(|| self.err(key, "expected [x,y,z,qw,qx,qy,qz]"))
    }

    pub fn pose_map(&mut self, key: &str) -> CodecResult<BTreeMap<String, Pose>> {
        let v = self.take(key)?;
        let obj = v.as_object().ok_or_else(|| self.err(key, "expected object"))?;
        obj.iter()
            .map(|(k, v)| {
                pose_from_value(v)
                    .map(|p| (k.clone(), p))
                    .ok_or_else(|| self.err(key, "expected pose arrays"))
            })
            .collect()
    }

    pub fn object(&mut self, key: &str) -> CodecResult<Fields> {
        let v = self.take(key)?;
        let ctx = format!("{}.{key}", self.ctx);
        Fields::from_value(v, ctx)
    }

    pub fn finish(self) -> CodecResult<()> {
        match self.map.keys().next() {
            None => Ok(()),
            Some(k) => Err(CodecError::schema(format!("{}: unknown field `{k}`", self.ctx))),
        }
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    v.as_f64().filter(|f| f.is_finite())
}

fn f64_array(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(as_f64).collect()
}

pub fn pose_from_value(v: &Value) -> Option<Pose> {
    let a = f64_array(v)?;
    let arr: [f64; 7] = a.try_into().ok()?;
    Some(Pose::from_array(arr))
}
