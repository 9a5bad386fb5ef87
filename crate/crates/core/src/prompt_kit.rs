//! Fixed prompt templates and parsing of the dictionary-shaped replies they
//! request.
//!
//! Templates are plain UTF-8 files with `{{slot}}` markers. The bundled
//! defaults live in `assets/templates/` and are checksummed; experimenters
//! can point [`TemplateSet::load_dir`] at edited copies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::SectionId;

const BUNDLED_FORWARD: &str = include_str!("../assets/templates/forward_wrapper.v1.txt");
const BUNDLED_GRADIENT: &str = include_str!("../assets/templates/gradient.v1.txt");
const BUNDLED_UPDATE: &str = include_str!("../assets/templates/update.v1.txt");
const BUNDLED_P0: &str = include_str!("../assets/templates/p0_default.v1.txt");

/// SHA-256 of the bundled asset files.
pub const BUNDLED_CHECKSUMS: [(&str, &str); 4] = [
    (
        "forward_wrapper.v1.txt",
        "413de04ab001d88d6d50f052e801ae29bcf924fc95ee74cb0fef07076deb3bc3",
    ),
    (
        "gradient.v1.txt",
        "38948abcd51c85723ef176e01cadf1019656623cfbaecba766898f6fafa430e9",
    ),
    (
        "p0_default.v1.txt",
        "62733600e79a04b6a86f4f34352674cac90b49a00a03af3298634771432d6a9e",
    ),
    (
        "update.v1.txt",
        "0fe6faab2606b673c03ae3f3ca7cbb180d9f7b15c9ff7ac7395e8018c93666a4",
    ),
];

/// Appended as a follow-up user turn when a reply cannot be parsed.
pub const REPAIR_NUDGE: &str =
    "Your previous reply could not be parsed. Respond only with the dictionary object, with no other text.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("slot {0:?} is empty")]
    EmptySlot(&'static str),
    #[error("update prompt needs at least one suggestion")]
    NoSuggestions,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("{kind} template is missing slot {{{{{slot}}}}}")]
    MissingSlot { kind: TemplateKind, slot: String },
    #[error("{kind} template has unexpected slot {{{{{slot}}}}}")]
    UnexpectedSlot { kind: TemplateKind, slot: String },
    #[error("cannot read template {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("default instruction is empty")]
    EmptyDefault,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no dictionary object found in the reply")]
    NoDictionary,
    #[error("dictionary could not be parsed: {0}")]
    Syntax(String),
    #[error("missing required key {0:?}")]
    MissingKey(String),
    #[error("value of {key:?} is a {found}, expected text")]
    NotText { key: String, found: &'static str },
    #[error("value of {0:?} is empty")]
    EmptyValue(String),
}

impl ParseError {
    /// Stable short form: `no_dictionary`, `syntax`, `missing_key:<k>`,
    /// `not_text:<k>:<found>` or `empty_value:<k>`.
    pub fn code(&self) -> String {
        match self {
            ParseError::NoDictionary => "no_dictionary".into(),
            ParseError::Syntax(_) => "syntax".into(),
            ParseError::MissingKey(k) => format!("missing_key:{k}"),
            ParseError::NotText { key, found } => format!("not_text:{key}:{found}"),
            ParseError::EmptyValue(k) => format!("empty_value:{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    ForwardWrapper,
    Gradient,
    Update,
}

impl TemplateKind {
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            TemplateKind::ForwardWrapper => &["instruction", "section", "dialogue"],
            TemplateKind::Gradient => &[
                "instruction",
                "section",
                "dialogue",
                "ai_summary",
                "reference_summary",
            ],
            TemplateKind::Update => &["instruction", "suggestions"],
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            TemplateKind::ForwardWrapper => "forward_wrapper",
            TemplateKind::Gradient => "gradient",
            TemplateKind::Update => "update",
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

/// A template body whose slot markers are exactly those its kind requires.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    kind: TemplateKind,
    body: String,
}

impl PromptTemplate {
    pub fn new(kind: TemplateKind, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        let found: BTreeSet<String> = slot_markers(&body).into_iter().collect();
        for slot in found.iter() {
            if !kind.slots().contains(&slot.as_str()) {
                return Err(TemplateError::UnexpectedSlot {
                    kind,
                    slot: slot.clone(),
                });
            }
        }
        for slot in kind.slots() {
            if !found.contains(*slot) {
                return Err(TemplateError::MissingSlot {
                    kind,
                    slot: slot.to_string(),
                });
            }
        }
        Ok(Self { kind, body })
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.body.as_bytes()))
    }

    /// Single-pass substitution. Values are inserted verbatim, so braces
    /// inside them are never re-expanded.
    fn fill(&self, values: &[(&'static str, &str)]) -> Result<String, RenderError> {
        for (name, value) in values {
            if value.trim().is_empty() {
                return Err(RenderError::EmptySlot(name));
            }
        }
        let mut out = String::with_capacity(self.body.len() + values.iter().map(|v| v.1.len()).sum::<usize>());
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            let replaced = after.find("}}").and_then(|end| {
                let name = &after[..end];
                values
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, v)| (end, *v))
            });
            match replaced {
                Some((end, value)) => {
                    out.push_str(&rest[..start]);
                    out.push_str(value);
                    rest = &after[end + 2..];
                }
                None => {
                    out.push_str(&rest[..start + 2]);
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn slot_markers(body: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end)
                if !after[..end].is_empty()
                    && after[..end]
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '_') =>
            {
                out.push(after[..end].to_string());
                rest = &after[end + 2..];
            }
            _ => rest = after,
        }
    }
    out
}

/// The three fixed prompts plus the generic starting instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub forward: PromptTemplate,
    pub gradient: PromptTemplate,
    pub update: PromptTemplate,
    pub default_instruction: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::bundled()
    }
}

impl TemplateSet {
    pub fn bundled() -> Self {
        Self {
            forward: PromptTemplate::new(TemplateKind::ForwardWrapper, BUNDLED_FORWARD)
                .expect("bundled forward template is valid"),
            gradient: PromptTemplate::new(TemplateKind::Gradient, BUNDLED_GRADIENT)
                .expect("bundled gradient template is valid"),
            update: PromptTemplate::new(TemplateKind::Update, BUNDLED_UPDATE)
                .expect("bundled update template is valid"),
            default_instruction: BUNDLED_P0.trim_end().to_string(),
        }
    }

    /// Loads `forward_wrapper.txt`, `gradient.txt` and `update.txt` from
    /// `dir`; `p0_default.txt` is optional. Missing template files fall back
    /// to the bundled versions.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::bundled();
        let read = |name: &str| -> Result<Option<String>, TemplateError> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(None);
            }
            std::fs::read_to_string(&path).map(Some).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })
        };
        for kind in [TemplateKind::ForwardWrapper, TemplateKind::Gradient, TemplateKind::Update] {
            if let Some(body) = read(&format!("{}.txt", kind.file_stem()))? {
                let t = PromptTemplate::new(kind, body)?;
                match kind {
                    TemplateKind::ForwardWrapper => set.forward = t,
                    TemplateKind::Gradient => set.gradient = t,
                    TemplateKind::Update => set.update = t,
                }
            }
        }
        if let Some(p0) = read("p0_default.txt")? {
            let p0 = p0.trim_end().to_string();
            if p0.trim().is_empty() {
                return Err(TemplateError::EmptyDefault);
            }
            set.default_instruction = p0;
        }
        Ok(set)
    }

    /// Checksums of the active template bodies, keyed by kind.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        for t in [&self.forward, &self.gradient, &self.update] {
            m.insert(t.kind().to_string(), t.checksum());
        }
        m.insert(
            "p0_default".into(),
            hex::encode(Sha256::digest(self.default_instruction.as_bytes())),
        );
        m
    }

    pub fn render_forward(
        &self,
        instruction: &str,
        section: &SectionId,
        dialogue: &str,
    ) -> Result<String, RenderError> {
        self.forward.fill(&[
            ("instruction", instruction),
            ("section", section.as_str()),
            ("dialogue", dialogue),
        ])
    }

    pub fn render_gradient(
        &self,
        instruction: &str,
        section: &SectionId,
        dialogue: &str,
        ai_summary: &str,
        reference_summary: &str,
    ) -> Result<String, RenderError> {
        self.gradient.fill(&[
            ("instruction", instruction),
            ("section", section.as_str()),
            ("dialogue", dialogue),
            ("ai_summary", ai_summary),
            ("reference_summary", reference_summary),
        ])
    }

    /// Suggestions become numbered `Suggestions from summary [i]:` blocks,
    /// in input order.
    pub fn render_update<S: AsRef<str>>(
        &self,
        instruction: &str,
        suggestions: &[S],
    ) -> Result<String, RenderError> {
        if suggestions.is_empty() {
            return Err(RenderError::NoSuggestions);
        }
        let mut blocks = Vec::with_capacity(suggestions.len());
        for (i, s) in suggestions.iter().enumerate() {
            if s.as_ref().trim().is_empty() {
                return Err(RenderError::EmptySlot("suggestions"));
            }
            blocks.push(format!("Suggestions from summary [{}]:\n{}", i + 1, s.as_ref()));
        }
        self.update
            .fill(&[("instruction", instruction), ("suggestions", &blocks.join("\n"))])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyKind {
    Summary,
    Gradient,
    Update,
}

impl ReplyKind {
    pub fn required_keys(self) -> &'static [&'static str] {
        match self {
            ReplyKind::Summary => &["summary"],
            ReplyKind::Gradient => &["reasons", "suggestions"],
            ReplyKind::Update => &["final suggestion", "new instruction"],
        }
    }
}

/// How forgiving [`parse_structured`] is about the dictionary syntax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    /// Single quotes, trailing commas, bare keys, Python literals and raw
    /// newlines in strings are accepted; keys match case-insensitively with
    /// `_`/`-` treated as spaces.
    #[default]
    Lenient,
    /// Strict JSON and exact key names.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredReply {
    pub kind: ReplyKind,
    pub fields: BTreeMap<String, String>,
    pub raw: String,
}

impl StructuredReply {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    /// Required field; present by construction.
    pub fn field(&self, key: &str) -> &str {
        self.get(key).unwrap_or_default()
    }

    /// Dictionary form of the fields as a JSON object.
    pub fn to_dict_text(&self) -> String {
        serde_json::to_string(&self.fields).expect("string map serializes")
    }
}

/// Extracts and validates the dictionary in a model reply.
///
/// Leading prose, code fences and trailing text are skipped by locating the
/// first balanced top-level `{...}` group. Required keys for `kind` must be
/// present with non-empty text values; lists and objects are rejected.
pub fn parse_structured(text: &str, kind: ReplyKind, mode: ParseMode) -> Result<StructuredReply, ParseError> {
    let group = first_brace_group(text, mode).ok_or(ParseError::NoDictionary)?;
    let value = match mode {
        ParseMode::Strict => serde_json::from_str::<Value>(group).map_err(|e| ParseError::Syntax(e.to_string()))?,
        ParseMode::Lenient => match serde_json::from_str::<Value>(group) {
            Ok(v) => v,
            Err(_) => lenient::parse(group).map_err(ParseError::Syntax)?,
        },
    };
    let Value::Object(map) = value else {
        return Err(ParseError::Syntax("top-level value is not an object".into()));
    };

    let mut fields = BTreeMap::new();
    let mut kinds = BTreeMap::new();
    for (k, v) in map {
        let key = match mode {
            ParseMode::Strict => k,
            ParseMode::Lenient => normalize_key(&k),
        };
        let (text, found) = match v {
            Value::String(s) => (Some(s.trim().to_string()), "text"),
            Value::Number(n) => (Some(n.to_string()), "text"),
            Value::Bool(b) => (Some(b.to_string()), "text"),
            Value::Null => (None, "null"),
            Value::Array(ref a) => (Some(Value::Array(a.clone()).to_string()), "list"),
            Value::Object(ref o) => (Some(Value::Object(o.clone()).to_string()), "object"),
        };
        kinds.insert(key.clone(), found);
        fields.insert(key, text.unwrap_or_default());
    }
    for key in kind.required_keys() {
        match kinds.get(*key) {
            None => return Err(ParseError::MissingKey(key.to_string())),
            Some(&"list") => {
                return Err(ParseError::NotText {
                    key: key.to_string(),
                    found: "list",
                })
            }
            Some(&"object") => {
                return Err(ParseError::NotText {
                    key: key.to_string(),
                    found: "object",
                })
            }
            _ => {}
        }
        if fields[*key].is_empty() {
            return Err(ParseError::EmptyValue(key.to_string()));
        }
    }
    Ok(StructuredReply {
        kind,
        fields,
        raw: text.to_string(),
    })
}

fn normalize_key(k: &str) -> String {
    k.replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// First balanced `{...}` span, skipping braces inside string literals.
fn first_brace_group(text: &str, mode: ParseMode) -> Option<&str> {
    let start = text.find('{')?;
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut quote: Option<u8> = None;
    let mut escaped = false;
    for (i, &c) in bytes.iter().enumerate().skip(start) {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == b'\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            b'"' => quote = Some(c),
            b'\'' if mode == ParseMode::Lenient && starts_string(bytes, i) => quote = Some(c),
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// A single quote opens a string only where a JSON value or key may start,
/// so apostrophes in bare prose do not swallow the closing brace.
fn starts_string(bytes: &[u8], i: usize) -> bool {
    bytes[..i]
        .iter()
        .rev()
        .find(|c| !c.is_ascii_whitespace())
        .is_some_and(|c| matches!(c, b'{' | b',' | b':' | b'['))
}

mod lenient {
    //! Forgiving JSON-like reader for model output.

    use serde_json::{Map, Number, Value};

    pub fn parse(src: &str) -> Result<Value, String> {
        let mut p = Parser {
            s: src.as_bytes(),
            src,
            i: 0,
        };
        let v = p.value()?;
        p.ws();
        if p.i != p.s.len() {
            return Err(format!("trailing characters at offset {}", p.i));
        }
        Ok(v)
    }

    struct Parser<'a> {
        s: &'a [u8],
        src: &'a str,
        i: usize,
    }

    impl Parser<'_> {
        fn ws(&mut self) {
            while self.i < self.s.len() && self.s[self.i].is_ascii_whitespace() {
                self.i += 1;
            }
        }

        fn peek(&self) -> Option<u8> {
            self.s.get(self.i).copied()
        }

        fn value(&mut self) -> Result<Value, String> {
            self.ws();
            match self.peek() {
                Some(b'{') => self.object(),
                Some(b'[') => self.array(),
                Some(b'"') | Some(b'\'') => self.string().map(Value::String),
                Some(c) if c == b'-' || c.is_ascii_digit() => self.number(),
                Some(_) => {
                    let word = self.bare_word();
                    match word.as_str() {
                        "true" | "True" => Ok(Value::Bool(true)),
                        "false" | "False" => Ok(Value::Bool(false)),
                        "null" | "None" => Ok(Value::Null),
                        "" => Err(format!("unexpected character at offset {}", self.i)),
                        w => Err(format!("unexpected token {w:?}")),
                    }
                }
                None => Err("unexpected end of input".into()),
            }
        }

        fn bare_word(&mut self) -> String {
            let start = self.i;
            while self.i < self.s.len() && (self.s[self.i].is_ascii_alphanumeric() || self.s[self.i] == b'_') {
                self.i += 1;
            }
            self.src[start..self.i].to_string()
        }

        fn object(&mut self) -> Result<Value, String> {
            self.i += 1;
            let mut map = Map::new();
            loop {
                self.ws();
                match self.peek() {
                    Some(b'}') => {
                        self.i += 1;
                        return Ok(Value::Object(map));
                    }
                    None => return Err("unterminated object".into()),
                    _ => {}
                }
                let key = match self.peek() {
                    Some(b'"') | Some(b'\'') => self.string()?,
                    _ => {
                        let w = self.bare_word();
                        if w.is_empty() {
                            return Err(format!("expected key at offset {}", self.i));
                        }
                        w
                    }
                };
                self.ws();
                if self.peek() != Some(b':') {
                    return Err(format!("expected ':' after key {key:?}"));
                }
                self.i += 1;
                let v = self.value()?;
                map.insert(key, v);
                self.ws();
                match self.peek() {
                    Some(b',') => self.i += 1,
                    Some(b'}') => {}
                    _ => return Err(format!("expected ',' or '}}' at offset {}", self.i)),
                }
            }
        }

        fn array(&mut self) -> Result<Value, String> {
            self.i += 1;
            let mut items = Vec::new();
            loop {
                self.ws();
                match self.peek() {
                    Some(b']') => {
                        self.i += 1;
                        return Ok(Value::Array(items));
                    }
                    None => return Err("unterminated list".into()),
                    _ => {}
                }
                items.push(self.value()?);
                self.ws();
                match self.peek() {
                    Some(b',') => self.i += 1,
                    Some(b']') => {}
                    _ => return Err(format!("expected ',' or ']' at offset {}", self.i)),
                }
            }
        }

        fn string(&mut self) -> Result<String, String> {
            let quote = self.s[self.i];
            self.i += 1;
            let mut out = String::new();
            loop {
                let rest = &self.src[self.i..];
                let mut chars = rest.chars();
                let c = chars.next().ok_or("unterminated string")?;
                self.i += c.len_utf8();
                if c as u32 == quote as u32 {
                    return Ok(out);
                }
                if c != '\\' {
                    out.push(c);
                    continue;
                }
                let e = self.src[self.i..].chars().next().ok_or("unterminated escape")?;
                self.i += e.len_utf8();
                match e {
                    'n' => out.push('\n'),
                    't' => out.push('\t'),
                    'r' => out.push('\r'),
                    'b' => out.push('\u{8}'),
                    'f' => out.push('\u{c}'),
                    'u' => {
                        let hex = self.src.get(self.i..self.i + 4).ok_or("short \\u escape")?;
                        let code = u32::from_str_radix(hex, 16).map_err(|_| "bad \\u escape")?;
                        self.i += 4;
                        out.push(char::from_u32(code).unwrap_or('\u{FFFD}'));
                    }
                    other => out.push(other),
                }
            }
        }

        fn number(&mut self) -> Result<Value, String> {
            let start = self.i;
            while self.i < self.s.len() && matches!(self.s[self.i], b'-' | b'+' | b'.' | b'e' | b'E' | b'0'..=b'9') {
                self.i += 1;
            }
            let text = &self.src[start..self.i];
            if let Ok(n) = text.parse::<i64>() {
                return Ok(Value::Number(n.into()));
            }
            text.parse::<f64>()
                .ok()
                .and_then(Number::from_f64)
                .map(Value::Number)
                .ok_or_else(|| format!("bad number {text:?}"))
        }
    }
}
