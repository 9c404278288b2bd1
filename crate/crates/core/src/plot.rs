//! Gnuplot output: data files, default scripts and the template engine.
//!
//! Templates are ordinary Gnuplot scripts with `@{expr}` directives. Each
//! directive is an expression over the run context (`config.beta`,
//! `table.final.file`, `run.name`, ...), replaced by the canonical text of
//! its value. `@@` stands for a literal `@`; any other `@` is copied as is,
//! so Gnuplot's own `@macro` syntax keeps working.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::aggregate::{AggregationRule, ResultTable};
use crate::config::{Config, ParamValue};
use crate::expr::{Env, Expr, ExprError, Value};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("line {line}: unterminated `@{{` directive")]
    Unterminated { line: usize },
    #[error("line {line}: bad directive: {source}")]
    BadDirective { line: usize, source: ExprError },
    #[error("line {line}: unknown binding `{name}`")]
    UnknownBinding { line: usize, name: String },
    #[error("line {line}: {source}")]
    Eval { line: usize, source: ExprError },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Text(String),
    Directive { expr: Expr, line: usize },
}

/// A parsed template.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotTemplate {
    segments: Vec<Segment>,
}

impl PlotTemplate {
    pub fn parse(text: &str) -> Result<PlotTemplate, PlotError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut line = 1;
        let mut rest = text;
        while let Some(at) = rest.find('@') {
            let (before, tail) = rest.split_at(at);
            line += before.matches('\n').count();
            literal.push_str(before);
            if let Some(after) = tail.strip_prefix("@@") {
                literal.push('@');
                rest = after;
            } else if let Some(body) = tail.strip_prefix("@{") {
                let end = directive_end(body).ok_or(PlotError::Unterminated { line })?;
                let expr = Expr::parse(&body[..end]).map_err(|source| PlotError::BadDirective { line, source })?;
                if !literal.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Directive { expr, line });
                rest = &body[end + 1..];
            } else {
                literal.push('@');
                rest = &tail[1..];
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Text(literal));
        }
        Ok(PlotTemplate { segments })
    }
}

/// Offset of the `}` closing a directive body; quotes may hide braces.
/// Directives end on their own line.
fn directive_end(body: &str) -> Option<usize> {
    let mut in_quotes = false;
    let mut escaped = false;
    for (i, c) in body.char_indices() {
        match c {
            '\n' => return None,
            _ if escaped => escaped = false,
            '\\' if in_quotes => escaped = true,
            '"' => in_quotes = !in_quotes,
            '}' if !in_quotes => return Some(i),
            _ => {}
        }
    }
    None
}

/// Escapes text so that it renders back to itself.
pub fn escape(text: &str) -> String {
    text.replace('@', "@@")
}

/// Names visible to template directives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotContext {
    bindings: BTreeMap<String, Value>,
}

impl PlotContext {
    pub fn new() -> PlotContext {
        PlotContext::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: Value) -> &mut Self {
        self.bindings.insert(name.into(), value);
        self
    }

    /// The standard bindings of a finished (or partial) run. Parameters
    /// with one value bind as scalars, swept ones as lists.
    pub fn for_run(config: &Config, tables: &[EmittedTable], completed: u64) -> PlotContext {
        let mut ctx = PlotContext::new();
        for spec in &config.space.specs {
            let value = match spec.values.as_slice() {
                [one] => one.to_value(),
                many => Value::List(many.iter().map(ParamValue::to_value).collect()),
            };
            ctx.bind(format!("config.{}", spec.name), value);
        }
        for t in tables {
            ctx.bind(format!("table.{}.file", t.rule_id), Value::Text(t.file_name.clone()));
            ctx.bind(format!("table.{}.rows", t.rule_id), Value::Num(t.rows as f64));
        }
        ctx.bind("run.name", Value::Text(config.task.name.clone()));
        ctx.bind("run.units_total", Value::Num(config.units_total() as f64));
        ctx.bind("run.completed", Value::Num(completed as f64));
        ctx
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.bindings.keys().map(String::as_str)
    }
}

impl Env for PlotContext {
    fn lookup(&self, name: &str) -> Option<Value> {
        self.bindings.get(name).cloned()
    }
}

pub fn render(template: &PlotTemplate, ctx: &PlotContext) -> Result<String, PlotError> {
    let mut out = String::new();
    for seg in &template.segments {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Directive { expr, line } => {
                let value = expr.eval(ctx).map_err(|e| match e {
                    ExprError::UnknownName(name) => PlotError::UnknownBinding { line: *line, name },
                    source => PlotError::Eval { line: *line, source },
                })?;
                out.push_str(&value.to_text());
            }
        }
    }
    Ok(out)
}

/// Writes `bytes` to `<path>.tmp` and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// One data file written by [`emit_tables`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedTable {
    pub rule_id: String,
    pub path: PathBuf,
    /// Name relative to the output directory, as scripts refer to it.
    pub file_name: String,
    pub rows: usize,
}

/// Writes `<name>.<rule_id>.dat` for every table.
pub fn emit_tables(name: &str, tables: &[ResultTable], out_dir: &Path) -> io::Result<Vec<EmittedTable>> {
    let mut out = Vec::new();
    for table in tables {
        let file_name = format!("{}.{}.dat", name, table.rule.result_id);
        let path = out_dir.join(&file_name);
        write_atomic(&path, table.to_text().as_bytes())?;
        out.push(EmittedTable {
            rule_id: table.rule.result_id.clone(),
            path,
            file_name,
            rows: table.rows.len(),
        });
    }
    Ok(out)
}

fn quoted(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// A standalone script plotting one table.
///
/// The x axis is the first key column and the y axis the mean, with
/// stderr error bars when the rule has them. A second key is not split
/// into series automatically; the script carries a comment with the
/// filter to do it by hand. A rule without keys plots a single point.
pub fn default_script(rule: &AggregationRule, table_path: &str) -> String {
    let columns = rule.columns();
    let col = |name: &str| columns.iter().position(|c| c == name).map(|i| i + 1);
    let keys: Vec<String> = rule.key_components().iter().map(|e| e.to_string()).collect();
    let output = match table_path.strip_suffix(".dat") {
        Some(stem) => format!("{}.pdf", stem),
        None => format!("{}.pdf", table_path),
    };

    let mut s = String::new();
    let _ = writeln!(s, "# {}", rule);
    s.push_str("set terminal pdf\n");
    let _ = writeln!(s, "set output {}", quoted(&output));
    let (y_col, y_name) = match col("mean") {
        Some(c) => (c, "mean"),
        None => {
            let _ = writeln!(s, "# warning: rule has no mean column, plotting count");
            (col("count").expect("count column"), "count")
        }
    };
    let x = match keys.first() {
        Some(first) => {
            let _ = writeln!(s, "set xlabel {}", quoted(first));
            "1".to_string()
        }
        None => {
            let _ = writeln!(s, "# warning: rule has no key columns, plotting a single point");
            "(0)".to_string()
        }
    };
    let _ = writeln!(s, "set ylabel {}", quoted(&rule.result_id));
    if keys.len() >= 2 {
        let _ = writeln!(
            s,
            "# series split by {} (column 2) is not automatic; filter with using {}:($2==V ? ${} : 1/0)",
            keys[1], x, y_col
        );
    }
    let stderr_col = if y_name == "mean" { col("stderr") } else { None };
    match stderr_col {
        Some(e) => {
            let _ = writeln!(
                s,
                "plot {} using {}:{}:{} with yerrorlines title {}",
                quoted(table_path),
                x,
                y_col,
                e,
                quoted(&rule.result_id)
            );
        }
        None => {
            let _ = writeln!(
                s,
                "plot {} using {}:{} with linespoints title {}",
                quoted(table_path),
                x,
                y_col,
                quoted(&rule.result_id)
            );
        }
    }
    s
}

/// Default scripts for several tables, one after another.
pub fn default_scripts(rules: &[AggregationRule], tables: &[EmittedTable]) -> String {
    let mut out = String::new();
    for (i, t) in tables.iter().enumerate() {
        if let Some(rule) = rules.iter().find(|r| r.result_id == t.rule_id) {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&default_script(rule, &t.file_name));
        }
    }
    out
}

/// Cheap sanity check of a script: quotes balance on every line, a
/// `set output` comes before the first `plot`, and every data file named
/// by a `plot` exists under `base_dir`.
pub fn smoke_check(script: &str, base_dir: &Path) -> Result<(), String> {
    let mut output_set = false;
    for (i, line) in script.lines().enumerate() {
        let n = i + 1;
        let code = line.trim_start();
        if code.starts_with('#') {
            continue;
        }
        let mut quotes = 0;
        let mut escaped = false;
        for c in code.chars() {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => quotes += 1,
                _ => {}
            }
        }
        if quotes % 2 != 0 {
            return Err(format!("line {}: unbalanced quotes", n));
        }
        if code.starts_with("set output") {
            output_set = true;
        }
        if let Some(args) = code.strip_prefix("plot ") {
            if !output_set {
                return Err(format!("line {}: plot before set output", n));
            }
            for file in quoted_strings(args).into_iter().step_by(2) {
                if !base_dir.join(&file).exists() {
                    return Err(format!("line {}: data file {} not found", n, file));
                }
            }
        }
    }
    Ok(())
}

/// Quoted strings of a plot clause: file, title, file, title, ...
fn quoted_strings(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Option<String> = None;
    let mut escaped = false;
    for c in s.chars() {
        match (&mut cur, c) {
            (Some(buf), _) if escaped => {
                buf.push(c);
                escaped = false;
            }
            (Some(_), '\\') => escaped = true,
            (Some(_), '"') => out.push(cur.take().unwrap()),
            (Some(buf), _) => buf.push(c),
            (None, '"') => cur = Some(String::new()),
            (None, _) => {}
        }
    }
    out
}
