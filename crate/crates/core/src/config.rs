//! Experiment configuration: parsing, validation and parameter-space
//! enumeration.
//!
//! The file is line oriented. `#` starts a comment, `[section]` opens a
//! section, and every other line is either `key = value` or, inside
//! `[aggregate]`, a rule. See the guide's configuration chapter for the
//! full grammar.

use std::fmt;
use std::path::PathBuf;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregate::AggregationRule;
use crate::engine::TimePoint;
use crate::expr::{Env, Value};
use crate::num::{fmt_real_literal, parse_finite};

/// Relative tolerance for deciding whether a range's stop value is hit.
pub const RANGE_ENDPOINT_TOLERANCE: f64 = 1e-9;

/// Upper bound on the planned unit count; beyond this `f64` loses integers.
pub const MAX_UNITS: u64 = 1 << 53;

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Int(i64),
    Real(f64),
    Text(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Int,
    Real,
    Text,
}

impl ParamValue {
    pub fn kind(&self) -> ValueKind {
        match self {
            ParamValue::Int(_) => ValueKind::Int,
            ParamValue::Real(_) => ValueKind::Real,
            ParamValue::Text(_) => ValueKind::Text,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(i) => Some(*i as f64),
            ParamValue::Real(x) => Some(*x),
            ParamValue::Text(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ParamValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            ParamValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn to_value(&self) -> Value {
        match self {
            ParamValue::Text(s) => Value::Text(s.clone()),
            v => Value::Num(v.as_f64().unwrap()),
        }
    }
}

/// Literal form: integers bare, reals always with a fraction or exponent,
/// text quoted.
impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(i) => write!(f, "{}", i),
            ParamValue::Real(x) => f.write_str(&fmt_real_literal(*x)),
            ParamValue::Text(s) => write_quoted(f, s),
        }
    }
}

fn write_quoted(f: &mut impl fmt::Write, s: &str) -> fmt::Result {
    f.write_char('"')?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            c => f.write_char(c)?,
        }
    }
    f.write_char('"')
}

fn quoted(s: &str) -> String {
    let mut out = String::new();
    write_quoted(&mut out, s).unwrap();
    out
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSpec {
    pub name: String,
    pub values: Vec<ParamValue>,
}

impl ParameterSpec {
    pub fn kind(&self) -> ValueKind {
        self.values[0].kind()
    }

    pub fn is_numeric(&self) -> bool {
        self.kind() != ValueKind::Text
    }
}

/// Ordered parameter specs; the Cartesian product of their values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSpace {
    pub specs: Vec<ParameterSpec>,
}

/// One combination of parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPoint {
    pub index: u64,
    pub assignments: Vec<(String, ParamValue)>,
}

impl ParameterPoint {
    pub fn new(index: u64, assignments: Vec<(String, ParamValue)>) -> ParameterPoint {
        ParameterPoint { index, assignments }
    }

    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.assignments
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }
}

impl Env for ParameterPoint {
    fn lookup(&self, name: &str) -> Option<Value> {
        self.get(name).map(ParamValue::to_value)
    }
}

impl fmt::Display for ParameterPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .assignments
            .iter()
            .map(|(n, v)| format!("{}={}", n, v))
            .collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

impl ParameterSpace {
    pub fn spec(&self, name: &str) -> Option<&ParameterSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Product of the value-list sizes, or `None` on `u64` overflow.
    pub fn checked_point_count(&self) -> Option<u64> {
        self.specs
            .iter()
            .try_fold(1u64, |acc, s| acc.checked_mul(s.values.len() as u64))
    }

    pub fn point_count(&self) -> u64 {
        self.checked_point_count().expect("validated space")
    }

    /// Decodes a mixed-radix index; the last parameter varies fastest.
    pub fn point(&self, index: u64) -> ParameterPoint {
        assert!(index < self.point_count(), "point index out of range");
        let mut rest = index;
        let mut assignments = vec![(String::new(), ParamValue::Int(0)); self.specs.len()];
        for (slot, spec) in assignments.iter_mut().zip(&self.specs).rev() {
            let n = spec.values.len() as u64;
            *slot = (spec.name.clone(), spec.values[(rest % n) as usize].clone());
            rest /= n;
        }
        ParameterPoint { index, assignments }
    }

    /// Inverse of [`ParameterSpace::point`].
    pub fn index_of(&self, assignments: &[(String, ParamValue)]) -> Option<u64> {
        if assignments.len() != self.specs.len() {
            return None;
        }
        let mut index = 0u64;
        for (spec, (name, value)) in self.specs.iter().zip(assignments) {
            if &spec.name != name {
                return None;
            }
            let pos = spec.values.iter().position(|v| v == value)?;
            index = index * spec.values.len() as u64 + pos as u64;
        }
        Some(index)
    }

    /// Every point, in index order.
    pub fn enumerate_points(&self) -> Vec<ParameterPoint> {
        (0..self.point_count()).map(|i| self.point(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RangeError {
    #[error("zero step")]
    ZeroStep,
    #[error("non-finite range bound")]
    NonFinite,
    #[error("step sign does not lead from start to stop")]
    WrongDirection,
    #[error("range too long")]
    TooLong,
}

/// Expands `start : step : stop`.
///
/// The count is fixed once from the endpoints; values are `start + i*step`,
/// and when the stop value is reached (within a relative tolerance of
/// [`RANGE_ENDPOINT_TOLERANCE`]) the last value is `stop` exactly.
pub fn expand_range(start: f64, step: f64, stop: f64) -> Result<Vec<f64>, RangeError> {
    if !(start.is_finite() && step.is_finite() && stop.is_finite()) {
        return Err(RangeError::NonFinite);
    }
    if step == 0.0 {
        return Err(RangeError::ZeroStep);
    }
    let q = (stop - start) / step;
    let nearest = q.round();
    let tol = RANGE_ENDPOINT_TOLERANCE * q.abs().max(1.0);
    let hits_stop = (q - nearest).abs() <= tol;
    let last = if hits_stop { nearest } else { q.floor() };
    if last < 0.0 {
        return Err(RangeError::WrongDirection);
    }
    if last >= 1e7 {
        return Err(RangeError::TooLong);
    }
    let n = last as usize + 1;
    let mut out: Vec<f64> = (0..n).map(|i| start + i as f64 * step).collect();
    if hits_stop {
        out[n - 1] = stop;
    }
    Ok(out)
}

fn expand_int_range(start: i64, step: i64, stop: i64) -> Result<Vec<i64>, RangeError> {
    if step == 0 {
        return Err(RangeError::ZeroStep);
    }
    let span = stop as i128 - start as i128;
    if span != 0 && (span < 0) != (step < 0) {
        return Err(RangeError::WrongDirection);
    }
    let n = span / step as i128 + 1;
    if n > 10_000_000 {
        return Err(RangeError::TooLong);
    }
    Ok((0..n as i64).map(|i| start + i * step).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workers {
    /// Detected core count.
    Auto,
    Fixed(usize),
}

impl Workers {
    pub fn resolve(self) -> usize {
        match self {
            Workers::Fixed(n) => n,
            Workers::Auto => std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSection {
    pub name: String,
    pub repeats: u64,
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub workers: Workers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointPolicy {
    pub interval_seconds: u64,
    pub keep: usize,
    pub path: Option<PathBuf>,
}

impl Default for CheckpointPolicy {
    fn default() -> Self {
        CheckpointPolicy {
            interval_seconds: 60,
            keep: 2,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlotSection {
    /// Template rendered into `<name>.plt` instead of the default script.
    pub template: Option<PathBuf>,
    /// Overrides the `<name>.plt` script file name.
    pub script: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub task: TaskSection,
    pub space: ParameterSpace,
    pub rules: Vec<AggregationRule>,
    pub checkpoint: CheckpointPolicy,
    pub plot: PlotSection,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigErrorKind {
    Syntax { expected: String },
    UnknownSection(String),
    UnknownKey { section: String, key: String },
    DuplicateKey(String),
    DuplicateParameter(String),
    DuplicateValue(String),
    EmptyValueSet,
    ZeroStep,
    StepDirection,
    NonFinite,
    MixedKinds(String),
    InvalidValue { key: String, reason: String },
    InvalidRule(String),
    DuplicateRule(String),
    UndeclaredParameter { rule: String, name: String },
    NonNumericParameter { rule: String, name: String },
    TaskLevelRule(String),
    TooManyUnits,
}

impl fmt::Display for ConfigErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ConfigErrorKind::*;
        match self {
            Syntax { expected } => write!(f, "syntax error: expected {}", expected),
            UnknownSection(s) => write!(f, "unknown section [{}]", s),
            UnknownKey { section, key } => write!(f, "unknown key `{}` in [{}]", key, section),
            DuplicateKey(k) => write!(f, "key `{}` given twice", k),
            DuplicateParameter(p) => write!(f, "duplicate parameter `{}`", p),
            DuplicateValue(v) => write!(f, "duplicate value {} in set", v),
            EmptyValueSet => f.write_str("empty value set"),
            ZeroStep => f.write_str("range with zero step"),
            StepDirection => f.write_str("range step points away from stop"),
            NonFinite => f.write_str("non-finite number"),
            MixedKinds(p) => write!(f, "parameter `{}` mixes text and numbers", p),
            InvalidValue { key, reason } => write!(f, "invalid value for `{}`: {}", key, reason),
            InvalidRule(msg) => write!(f, "invalid rule: {}", msg),
            DuplicateRule(r) => write!(f, "result id `{}` has more than one rule", r),
            UndeclaredParameter { rule, name } => {
                write!(f, "rule `{}` references undeclared parameter `{}`", rule, name)
            }
            NonNumericParameter { rule, name } => {
                write!(f, "rule `{}` conditions on text parameter `{}`", rule, name)
            }
            TaskLevelRule(r) => write!(
                f,
                "rule `{}`: task-level time points carry no run observations",
                r
            ),
            TooManyUnits => write!(f, "points x repeats exceeds 2^53"),
        }
    }
}

/// A problem at a (1-based) line and column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub column: usize,
    pub kind: ConfigErrorKind,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}:{}: {}", self.line, self.column, self.kind)
    }
}

/// Every error found in one parse.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.0.iter().map(ConfigError::to_string).collect();
        f.write_str(&lines.join("\n"))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Task,
    Params,
    Aggregate,
    Checkpoint,
    Plot,
}

impl Section {
    fn name(self) -> &'static str {
        match self {
            Section::Task => "task",
            Section::Params => "params",
            Section::Aggregate => "aggregate",
            Section::Checkpoint => "checkpoint",
            Section::Plot => "plot",
        }
    }
}

/// Removes a trailing `#` comment that is not inside quotes.
fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match c {
            _ if escaped => escaped = false,
            '\\' if in_quotes => escaped = true,
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Splits on `sep` outside of quotes.
fn split_outside_quotes(s: &str, sep: char) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut in_quotes = false;
    let mut escaped = false;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            _ if escaped => escaped = false,
            '\\' if in_quotes => escaped = true,
            '"' => in_quotes = !in_quotes,
            c if c == sep && !in_quotes => {
                parts.push(&s[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

fn unquote(s: &str) -> Option<String> {
    let inner = s.strip_prefix('"')?.strip_suffix('"')?;
    let mut out = String::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some(e @ ('"' | '\\')) => out.push(e),
                _ => return None,
            },
            '"' => return None,
            c => out.push(c),
        }
    }
    Some(out)
}

#[derive(Debug)]
enum ScalarError {
    Syntax(&'static str),
    NonFinite,
}

fn parse_scalar(raw: &str) -> Result<ParamValue, ScalarError> {
    let s = raw.trim();
    if s.is_empty() {
        return Err(ScalarError::Syntax("a value"));
    }
    if s.starts_with('"') {
        return unquote(s)
            .map(ParamValue::Text)
            .ok_or(ScalarError::Syntax("a closing quote"));
    }
    if let Ok(i) = s.parse::<i64>() {
        return Ok(ParamValue::Int(i));
    }
    let lower = s.to_ascii_lowercase();
    let bare = lower.trim_start_matches(['+', '-']);
    if matches!(bare, "inf" | "infinity" | "nan") {
        return Err(ScalarError::NonFinite);
    }
    if let Some(x) = parse_finite(s) {
        return Ok(ParamValue::Real(x));
    }
    if s.parse::<f64>().is_ok() {
        return Err(ScalarError::NonFinite);
    }
    if s.contains(|c: char| c.is_whitespace() || matches!(c, '{' | '}' | ',' | ':' | '"' | '=')) {
        return Err(ScalarError::Syntax("a single scalar"));
    }
    Ok(ParamValue::Text(s.to_string()))
}

struct ParserState {
    errors: Vec<ConfigError>,
    line: usize,
}

impl ParserState {
    fn err(&mut self, column: usize, kind: ConfigErrorKind) {
        self.errors.push(ConfigError {
            line: self.line,
            column,
            kind,
        });
    }
}

fn column_of(line: &str, part: &str) -> usize {
    let offset = part.as_ptr() as usize - line.as_ptr() as usize;
    line[..offset].chars().count() + 1
}

/// Parses and validates a configuration; all errors are reported together.
pub fn parse_config(text: &str) -> Result<Config, ConfigErrors> {
    let mut st = ParserState {
        errors: Vec::new(),
        line: 0,
    };
    let mut section: Option<Section> = None;
    let mut seen_keys: Vec<(&'static str, String)> = Vec::new();

    let mut task = TaskSection {
        name: "task".into(),
        repeats: 1,
        max_steps: None,
        seed: 0,
        workers: Workers::Auto,
    };
    let mut specs: Vec<ParameterSpec> = Vec::new();
    let mut rules: Vec<(usize, AggregationRule)> = Vec::new();
    let mut checkpoint = CheckpointPolicy::default();
    let mut plot = PlotSection::default();

    for (idx, full) in text.lines().enumerate() {
        st.line = idx + 1;
        let body = strip_comment(full);
        let trimmed = body.trim();
        if trimmed.is_empty() {
            continue;
        }
        let col = column_of(full, trimmed);
        if let Some(rest) = trimmed.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                st.err(col + trimmed.chars().count(), ConfigErrorKind::Syntax {
                    expected: "`]`".into(),
                });
                section = None;
                continue;
            };
            section = match name.trim() {
                "task" => Some(Section::Task),
                "params" => Some(Section::Params),
                "aggregate" => Some(Section::Aggregate),
                "checkpoint" => Some(Section::Checkpoint),
                "plot" => Some(Section::Plot),
                other => {
                    st.err(col + 1, ConfigErrorKind::UnknownSection(other.to_string()));
                    None
                }
            };
            continue;
        }
        let Some(sec) = section else {
            // Lines under an unknown section were already reported with it.
            if st.errors.last().is_none_or(|e| !matches!(e.kind, ConfigErrorKind::UnknownSection(_))) {
                st.err(col, ConfigErrorKind::Syntax {
                    expected: "a `[section]` header".into(),
                });
            }
            continue;
        };
        if sec == Section::Aggregate {
            match AggregationRule::parse(trimmed) {
                Ok(rule) => rules.push((st.line, rule)),
                Err(msg) => st.err(col, ConfigErrorKind::InvalidRule(msg)),
            }
            continue;
        }
        let Some((key_raw, value_raw)) = trimmed.split_once('=') else {
            st.err(col + trimmed.chars().count(), ConfigErrorKind::Syntax {
                expected: "`=`".into(),
            });
            continue;
        };
        let key = key_raw.trim();
        let value = value_raw.trim();
        let vcol = if value.is_empty() {
            col + trimmed.chars().count()
        } else {
            column_of(full, value)
        };
        if !is_identifier(key) {
            st.err(col, ConfigErrorKind::Syntax {
                expected: "an identifier key".into(),
            });
            continue;
        }
        if seen_keys.iter().any(|(s, k)| *s == sec.name() && k == key) {
            let kind = if sec == Section::Params {
                ConfigErrorKind::DuplicateParameter(key.to_string())
            } else {
                ConfigErrorKind::DuplicateKey(key.to_string())
            };
            st.err(col, kind);
            continue;
        }
        seen_keys.push((sec.name(), key.to_string()));

        match sec {
            Section::Params => {
                if let Some(values) = parse_param_values(&mut st, key, value, vcol) {
                    specs.push(ParameterSpec {
                        name: key.to_string(),
                        values,
                    });
                }
            }
            Section::Task => {
                parse_task_key(&mut st, &mut task, key, value, vcol);
            }
            Section::Checkpoint => {
                let invalid = |reason: &str| ConfigErrorKind::InvalidValue {
                    key: key.into(),
                    reason: reason.into(),
                };
                match key {
                    "interval_seconds" => match value.parse::<u64>() {
                        Ok(v) => checkpoint.interval_seconds = v,
                        Err(_) => st.err(vcol, invalid("expected a non-negative integer")),
                    },
                    "keep" => match value.parse::<usize>() {
                        Ok(v) if v >= 1 => checkpoint.keep = v,
                        _ => st.err(vcol, invalid("expected an integer >= 1")),
                    },
                    "path" => match text_scalar(value) {
                        Some(p) => checkpoint.path = Some(PathBuf::from(p)),
                        None => st.err(vcol, invalid("expected a path")),
                    },
                    _ => st.err(col, ConfigErrorKind::UnknownKey {
                        section: "checkpoint".into(),
                        key: key.into(),
                    }),
                }
            }
            Section::Plot => {
                let invalid = |reason: &str| ConfigErrorKind::InvalidValue {
                    key: key.into(),
                    reason: reason.into(),
                };
                match key {
                    "template" => match text_scalar(value) {
                        Some(p) => plot.template = Some(PathBuf::from(p)),
                        None => st.err(vcol, invalid("expected a path")),
                    },
                    "script" => match text_scalar(value) {
                        Some(p) => plot.script = Some(p),
                        None => st.err(vcol, invalid("expected a file name")),
                    },
                    _ => st.err(col, ConfigErrorKind::UnknownKey {
                        section: "plot".into(),
                        key: key.into(),
                    }),
                }
            }
            Section::Aggregate => unreachable!(),
        }
    }

    let space = ParameterSpace { specs };
    let mut seen_rules: Vec<&str> = Vec::new();
    for (line, rule) in &rules {
        st.line = *line;
        if seen_rules.contains(&rule.result_id.as_str()) {
            st.err(1, ConfigErrorKind::DuplicateRule(rule.result_id.clone()));
        }
        seen_rules.push(&rule.result_id);
        if matches!(rule.timepoint, TimePoint::BeforeTask | TimePoint::AfterTask) {
            st.err(1, ConfigErrorKind::TaskLevelRule(rule.result_id.clone()));
        }
        for cond in &rule.conditions {
            if !cond.is_numeric() {
                st.err(1, ConfigErrorKind::InvalidRule(format!(
                    "condition `{}` is not numeric",
                    cond
                )));
            }
            for name in cond.names() {
                match space.spec(name) {
                    None => st.err(1, ConfigErrorKind::UndeclaredParameter {
                        rule: rule.result_id.clone(),
                        name: name.to_string(),
                    }),
                    Some(spec) if !spec.is_numeric() => {
                        st.err(1, ConfigErrorKind::NonNumericParameter {
                            rule: rule.result_id.clone(),
                            name: name.to_string(),
                        })
                    }
                    Some(_) => {}
                }
            }
        }
    }
    let units = space
        .checked_point_count()
        .and_then(|p| p.checked_mul(task.repeats));
    if units.is_none_or(|u| u > MAX_UNITS) {
        st.line = 0;
        st.err(0, ConfigErrorKind::TooManyUnits);
    }

    if !st.errors.is_empty() {
        return Err(ConfigErrors(st.errors));
    }
    Ok(Config {
        task,
        space,
        rules: rules.into_iter().map(|(_, r)| r).collect(),
        checkpoint,
        plot,
    })
}

fn text_scalar(value: &str) -> Option<String> {
    match parse_scalar(value).ok()? {
        ParamValue::Text(s) => Some(s),
        ParamValue::Int(i) => Some(i.to_string()),
        ParamValue::Real(_) => Some(value.to_string()),
    }
}

fn parse_task_key(st: &mut ParserState, task: &mut TaskSection, key: &str, value: &str, vcol: usize) {
    let invalid = |reason: &str| ConfigErrorKind::InvalidValue {
        key: key.into(),
        reason: reason.into(),
    };
    match key {
        "name" => match text_scalar(value) {
            Some(n)
                if !n.is_empty()
                    && n.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) =>
            {
                task.name = n
            }
            _ => st.err(vcol, invalid("expected a name of letters, digits, `_`, `-`, `.`")),
        },
        "repeats" => match value.parse::<u64>() {
            Ok(n) if n >= 1 => task.repeats = n,
            _ => st.err(vcol, invalid("expected an integer >= 1")),
        },
        "max_steps" => match value.parse::<u64>() {
            Ok(n) => task.max_steps = Some(n),
            Err(_) => st.err(vcol, invalid("expected a non-negative integer")),
        },
        "seed" => match value.parse::<u64>() {
            Ok(n) => task.seed = n,
            Err(_) => st.err(vcol, invalid("expected an unsigned 64-bit integer")),
        },
        "workers" => match value {
            "auto" | "\"auto\"" => task.workers = Workers::Auto,
            v => match v.parse::<usize>() {
                Ok(n) if n >= 1 => task.workers = Workers::Fixed(n),
                _ => st.err(vcol, invalid("expected `auto` or an integer >= 1")),
            },
        },
        _ => st.err(vcol, ConfigErrorKind::UnknownKey {
            section: "task".into(),
            key: key.into(),
        }),
    }
}

fn parse_param_values(
    st: &mut ParserState,
    name: &str,
    value: &str,
    vcol: usize,
) -> Option<Vec<ParamValue>> {
    let scalar_err = |e: ScalarError| match e {
        ScalarError::Syntax(expected) => ConfigErrorKind::Syntax {
            expected: expected.into(),
        },
        ScalarError::NonFinite => ConfigErrorKind::NonFinite,
    };
    let values: Vec<ParamValue> = if let Some(inner) = value.strip_prefix('{') {
        let Some(inner) = inner.strip_suffix('}') else {
            st.err(vcol + value.chars().count(), ConfigErrorKind::Syntax {
                expected: "`}`".into(),
            });
            return None;
        };
        if inner.trim().is_empty() {
            st.err(vcol, ConfigErrorKind::EmptyValueSet);
            return None;
        }
        let mut out = Vec::new();
        for part in split_outside_quotes(inner, ',') {
            match parse_scalar(part) {
                Ok(v) => out.push(v),
                Err(e) => {
                    st.err(vcol, scalar_err(e));
                    return None;
                }
            }
        }
        out
    } else if split_outside_quotes(value, ':').len() > 1 {
        let parts = split_outside_quotes(value, ':');
        if parts.len() != 3 {
            st.err(vcol, ConfigErrorKind::Syntax {
                expected: "`start : step : stop`".into(),
            });
            return None;
        }
        let mut bounds = Vec::new();
        for part in parts {
            match parse_scalar(part) {
                Ok(v) if v.kind() != ValueKind::Text => bounds.push(v),
                Ok(_) => {
                    st.err(vcol, ConfigErrorKind::Syntax {
                        expected: "numeric range bounds".into(),
                    });
                    return None;
                }
                Err(e) => {
                    st.err(vcol, scalar_err(e));
                    return None;
                }
            }
        }
        let range_err = |e: RangeError| match e {
            RangeError::ZeroStep => ConfigErrorKind::ZeroStep,
            RangeError::NonFinite => ConfigErrorKind::NonFinite,
            RangeError::WrongDirection => ConfigErrorKind::StepDirection,
            RangeError::TooLong => ConfigErrorKind::InvalidValue {
                key: name.into(),
                reason: "range too long".into(),
            },
        };
        let expanded = match (&bounds[0], &bounds[1], &bounds[2]) {
            (ParamValue::Int(a), ParamValue::Int(s), ParamValue::Int(b)) => {
                expand_int_range(*a, *s, *b).map(|v| v.into_iter().map(ParamValue::Int).collect())
            }
            (a, s, b) => expand_range(a.as_f64()?, s.as_f64()?, b.as_f64()?)
                .map(|v| v.into_iter().map(ParamValue::Real).collect()),
        };
        match expanded {
            Ok(v) => v,
            Err(e) => {
                st.err(vcol, range_err(e));
                return None;
            }
        }
    } else {
        match parse_scalar(value) {
            Ok(v) => vec![v],
            Err(e) => {
                st.err(vcol, scalar_err(e));
                return None;
            }
        }
    };

    let has_text = values.iter().any(|v| v.kind() == ValueKind::Text);
    let has_num = values.iter().any(|v| v.kind() != ValueKind::Text);
    if has_text && has_num {
        st.err(vcol, ConfigErrorKind::MixedKinds(name.to_string()));
        return None;
    }
    // Integers listed alongside reals are promoted.
    let values: Vec<ParamValue> = if values.iter().any(|v| v.kind() == ValueKind::Real) {
        values
            .into_iter()
            .map(|v| ParamValue::Real(v.as_f64().unwrap()))
            .collect()
    } else {
        values
    };
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            st.err(vcol, ConfigErrorKind::DuplicateValue(v.to_string()));
            return None;
        }
    }
    Some(values)
}

impl Config {
    /// The run-determining content: task identity, parameters, rules.
    ///
    /// Worker count, checkpoint policy and plot settings are left out, so a
    /// checkpoint stays valid when a run moves to a machine with a different
    /// core count or a different output location.
    pub fn semantic_text(&self) -> String {
        let mut out = String::new();
        out.push_str("[task]\n");
        out.push_str(&format!("name = {}\n", quoted(&self.task.name)));
        out.push_str(&format!("repeats = {}\n", self.task.repeats));
        if let Some(m) = self.task.max_steps {
            out.push_str(&format!("max_steps = {}\n", m));
        }
        out.push_str(&format!("seed = {}\n", self.task.seed));
        out.push_str("[params]\n");
        for spec in &self.space.specs {
            let vals: Vec<String> = spec.values.iter().map(ParamValue::to_string).collect();
            out.push_str(&format!("{} = {{{}}}\n", spec.name, vals.join(", ")));
        }
        out.push_str("[aggregate]\n");
        for rule in &self.rules {
            out.push_str(&format!("{}\n", rule));
        }
        out
    }

    /// Full canonical re-serialization; re-parses to an identical `Config`.
    pub fn canonical_text(&self) -> String {
        let mut out = self.semantic_text();
        let task_end = out.find("[params]").unwrap();
        let workers = match self.task.workers {
            Workers::Auto => "workers = auto\n".to_string(),
            Workers::Fixed(n) => format!("workers = {}\n", n),
        };
        out.insert_str(task_end, &workers);
        out.push_str("[checkpoint]\n");
        out.push_str(&format!(
            "interval_seconds = {}\nkeep = {}\n",
            self.checkpoint.interval_seconds, self.checkpoint.keep
        ));
        if let Some(p) = &self.checkpoint.path {
            out.push_str(&format!("path = {}\n", quoted(&p.to_string_lossy())));
        }
        out.push_str("[plot]\n");
        if let Some(t) = &self.plot.template {
            out.push_str(&format!("template = {}\n", quoted(&t.to_string_lossy())));
        }
        if let Some(s) = &self.plot.script {
            out.push_str(&format!("script = {}\n", quoted(s)));
        }
        out
    }

    /// SHA-256 of [`Config::semantic_text`].
    pub fn canonical_hash(&self) -> [u8; 32] {
        Sha256::digest(self.semantic_text().as_bytes()).into()
    }

    pub fn canonical_hash_hex(&self) -> String {
        to_hex(&self.canonical_hash())
    }

    pub fn units_total(&self) -> u64 {
        self.space.point_count() * self.task.repeats
    }
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn errors(text: &str) -> Vec<ConfigError> {
        parse_config(text).unwrap_err().0
    }

    fn reals(values: &[ParamValue]) -> Vec<f64> {
        values.iter().map(|v| v.as_f64().unwrap()).collect()
    }

    #[test]
    fn range_expansion() {
        let c = parse_config("[params]\nbeta = 0.1 : 0.1 : 0.3\n").unwrap();
        assert_eq!(reals(&c.space.specs[0].values), vec![0.1, 0.2, 0.3]);
        assert_eq!(expand_range(0.0, 1.0, 3.0).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(expand_range(5.0, -1.0, 3.0).unwrap(), vec![5.0, 4.0, 3.0]);
        assert_eq!(expand_range(0.0, 0.4, 1.0).unwrap(), vec![0.0, 0.4, 0.8]);
        assert_eq!(expand_range(2.0, 1.0, 2.0).unwrap(), vec![2.0]);
        assert_eq!(expand_range(0.1, 0.0, 0.3), Err(RangeError::ZeroStep));
        assert_eq!(expand_range(0.0, -1.0, 3.0), Err(RangeError::WrongDirection));
    }

    /// Independent count formula: n = round((stop - start)/step) + 1, value_i = start + i*step.
    #[test]
    fn range_matches_count_formula() {
        let (start, step, stop) = (0.1f64, 0.1f64, 0.3f64);
        let n = ((stop - start) / step).round() as usize + 1;
        assert_eq!(n, 3);
        let got = expand_range(start, step, stop).unwrap();
        assert_eq!(got.len(), n);
        for (i, v) in got.iter().enumerate() {
            assert!((v - (start + i as f64 * step)).abs() <= 1e-9);
        }
        assert_eq!(*got.last().unwrap(), stop);
    }

    #[test]
    fn int_ranges_stay_integers() {
        let c = parse_config("[params]\nn = 0 : 5 : 20\nm = 3 : -1 : 1\n").unwrap();
        assert_eq!(
            c.space.specs[0].values,
            [0, 5, 10, 15, 20].map(ParamValue::Int).to_vec()
        );
        assert_eq!(c.space.specs[1].values, [3, 2, 1].map(ParamValue::Int).to_vec());
    }

    #[test]
    fn sets_and_repeats() {
        let c = parse_config("[params]\nn = {10, 20}\n[task]\nrepeats = 2\n").unwrap();
        assert_eq!(c.space.point_count(), 2);
        assert_eq!(c.task.repeats, 2);
        assert_eq!(c.units_total(), 4);
    }

    #[test]
    fn zero_step_is_an_error() {
        let e = errors("[params]\nbeta = 0.1 : 0 : 0.3\n");
        assert_eq!(e[0].kind, ConfigErrorKind::ZeroStep);
        assert_eq!((e[0].line, e[0].column), (2, 8));
    }

    #[test]
    fn reports_every_error_with_lines() {
        let text = "\
# leading comment
[task]
repeats = 0
bogus = 1
[params]
a = {}
b = {1, 1}
b = 3
c = {1, \"x\"}
d = 1 : 1 : nan
[weird]
x = 1
[aggregate]
y : mean @ after_run by zz
y : mean @ after_run
t : mean @ before_task
q : mean @ after_run by label
r mean
[params]
label = {\"a\", \"b\"}
";
        let errs = errors(text);
        let kinds: Vec<(usize, ConfigErrorKind)> = errs.iter().map(|e| (e.line, e.kind.clone())).collect();
        assert!(matches!(kinds[0], (3, ConfigErrorKind::InvalidValue { .. })));
        assert!(matches!(kinds[1], (4, ConfigErrorKind::UnknownKey { .. })));
        assert_eq!(kinds[2], (6, ConfigErrorKind::EmptyValueSet));
        assert_eq!(kinds[3], (7, ConfigErrorKind::DuplicateValue("1".into())));
        assert_eq!(kinds[4], (8, ConfigErrorKind::DuplicateParameter("b".into())));
        assert_eq!(kinds[5], (9, ConfigErrorKind::MixedKinds("c".into())));
        assert_eq!(kinds[6], (10, ConfigErrorKind::NonFinite));
        assert_eq!(kinds[7], (11, ConfigErrorKind::UnknownSection("weird".into())));
        assert!(matches!(kinds[8], (18, ConfigErrorKind::InvalidRule(_))));
        assert_eq!(
            kinds[9],
            (14, ConfigErrorKind::UndeclaredParameter { rule: "y".into(), name: "zz".into() })
        );
        assert_eq!(kinds[10], (15, ConfigErrorKind::DuplicateRule("y".into())));
        assert_eq!(kinds[11], (16, ConfigErrorKind::TaskLevelRule("t".into())));
        assert_eq!(
            kinds[12],
            (17, ConfigErrorKind::NonNumericParameter { rule: "q".into(), name: "label".into() })
        );
        assert_eq!(kinds.len(), 13);
    }

    #[test]
    fn syntax_errors_carry_columns() {
        let e = errors("[task\n");
        assert_eq!((e[0].line, e[0].column), (1, 6));
        let e = errors("repeats = 2\n");
        assert!(matches!(e[0].kind, ConfigErrorKind::Syntax { .. }));
        let e = errors("[params]\n  beta 0.1\n");
        assert_eq!((e[0].line, e[0].column), (2, 11));
        let e = errors("[params]\nx = \"open\n");
        assert_eq!((e[0].line, e[0].column), (2, 5));
    }

    #[test]
    fn enumerate_small_spaces() {
        let c = parse_config("[params]\na = {1, 2}\nb = {x, \"y\"}\n").unwrap();
        let pts = c.space.enumerate_points();
        let flat: Vec<String> = pts.iter().map(|p| p.to_string()).collect();
        assert_eq!(
            flat,
            vec![
                "{a=1, b=\"x\"}",
                "{a=1, b=\"y\"}",
                "{a=2, b=\"x\"}",
                "{a=2, b=\"y\"}"
            ]
        );
        let c = parse_config("[params]\na = 1:1:3\nb = 1:1:4\nc = 1:1:5\n").unwrap();
        assert_eq!(c.space.enumerate_points().len(), 60);
        let empty = ParameterSpace::default();
        let pts = empty.enumerate_points();
        assert_eq!(pts.len(), 1);
        assert!(pts[0].assignments.is_empty());
    }

    #[test]
    fn comments_and_quotes() {
        let c = parse_config(
            "[task] # the task\nname = \"sir\" # n\n[params]\nlabel = {\"a#b\", \"q\\\"x\"}\n",
        )
        .unwrap();
        assert_eq!(c.task.name, "sir");
        assert_eq!(
            c.space.specs[0].values,
            vec![ParamValue::Text("a#b".into()), ParamValue::Text("q\"x".into())]
        );
    }

    #[test]
    fn hash_ignores_cosmetics_and_workers() {
        let a = parse_config("[task]\nrepeats=2\nworkers = 4\n[params]\nx={1,2}\n").unwrap();
        let b = parse_config("# c\n[params]\n  x = { 1 , 2 }  # c\n[task]\nrepeats = 2\n").unwrap();
        assert_eq!(a.canonical_hash(), b.canonical_hash());
        let c = parse_config("[task]\nrepeats=2\n[params]\nx={1,3}\n").unwrap();
        assert_ne!(a.canonical_hash(), c.canonical_hash());
        assert_eq!(a.canonical_hash_hex().len(), 64);
    }

    #[test]
    fn never_panics_on_garbage() {
        for text in ["\u{0}\u{ff}[", "[[]]", "=", "[params]\n=\n:", "[aggregate]\n:@by", "[params]\nx = 1:2", "[params]\nx={\"a\",}"] {
            let _ = parse_config(text);
        }
    }

    fn arb_spec() -> impl Strategy<Value = Vec<ParamValue>> {
        prop_oneof![
            prop::collection::btree_set(-50i64..50, 1..6)
                .prop_map(|s| s.into_iter().map(ParamValue::Int).collect()),
            prop::collection::btree_set(-5000i64..5000, 1..6)
                .prop_map(|s| s.into_iter().map(|i| ParamValue::Real(i as f64 / 7.0)).collect()),
            prop::collection::btree_set("[a-z \"#\\\\]{0,5}", 1..4)
                .prop_map(|s| s.into_iter().map(ParamValue::Text).collect()),
        ]
    }

    fn arb_config() -> impl Strategy<Value = Config> {
        (
            prop::collection::vec(arb_spec(), 0..5),
            1u64..6,
            any::<u64>(),
            prop::option::of(0u64..100),
        )
            .prop_map(|(specs, repeats, seed, max_steps)| {
                let specs: Vec<ParameterSpec> = specs
                    .into_iter()
                    .enumerate()
                    .map(|(i, values)| ParameterSpec {
                        name: format!("p{}", i),
                        values,
                    })
                    .collect();
                let numeric: Vec<String> = specs
                    .iter()
                    .filter(|s| s.is_numeric())
                    .map(|s| s.name.clone())
                    .collect();
                let mut rules = vec![AggregationRule::parse("y : mean, hist(3) @ user:peak").unwrap()];
                if !numeric.is_empty() {
                    rules.push(
                        AggregationRule::parse(&format!(
                            "z : count, stderr @ after_step by {}, -{}^2",
                            numeric.join(", "),
                            numeric[0]
                        ))
                        .unwrap(),
                    );
                }
                Config {
                    task: TaskSection {
                        name: "t".into(),
                        repeats,
                        max_steps,
                        seed,
                        workers: Workers::Fixed(3),
                    },
                    space: ParameterSpace { specs },
                    rules,
                    checkpoint: CheckpointPolicy {
                        interval_seconds: 5,
                        keep: 3,
                        path: Some("out/ck \"x\".txt".into()),
                    },
                    plot: PlotSection {
                        template: None,
                        script: Some("s.plt".into()),
                    },
                }
            })
    }

    proptest! {
        #[test]
        fn canonical_text_round_trips(cfg in arb_config()) {
            let text = cfg.canonical_text();
            let back = parse_config(&text).map_err(|e| TestCaseError::fail(format!("{}\n{}", e, text)))?;
            prop_assert_eq!(back, cfg);
        }

        #[test]
        fn point_count_is_product(sizes in prop::collection::vec(1usize..=6, 0..=4)) {
            let space = ParameterSpace {
                specs: sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| ParameterSpec {
                        name: format!("p{}", i),
                        values: (0..n as i64).map(ParamValue::Int).collect(),
                    })
                    .collect(),
            };
            let points = space.enumerate_points();
            prop_assert_eq!(points.len(), sizes.iter().product::<usize>());
            for (i, p) in points.iter().enumerate() {
                prop_assert_eq!(p.index, i as u64);
                prop_assert_eq!(space.index_of(&p.assignments), Some(i as u64));
            }
        }

        #[test]
        fn ranges_never_overshoot(start in -1e3f64..1e3, step in 1e-3f64..10.0, span in 0.0f64..1e3, down in any::<bool>()) {
            let (step, stop) = if down { (-step, start - span) } else { (step, start + span) };
            let values = expand_range(start, step, stop).unwrap();
            let q = (stop - start) / step;
            for v in &values {
                let beyond = if down { stop - v } else { v - stop };
                prop_assert!(beyond <= 1e-9 * q.abs().max(1.0) * step.abs());
            }
            prop_assert_eq!(values[0], start);
        }

        #[test]
        fn parse_is_total(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse_config(&text);
        }
    }
}
