//! Streaming aggregation of recorded values.
//!
//! Every [`AggregationRule`] selects the values recorded under one result id
//! at one time point and groups them into cells keyed by condition
//! expressions over the run's parameters. Each committed run unit keeps its
//! own [`PartialStat`] per cell; [`AggState::finalize`] merges those in
//! ascending unit order, so a table never depends on which worker finished
//! first.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::config::ParameterPoint;
use crate::engine::{Observation, TimePoint};
use crate::expr::{Expr, ExprError};
use crate::num::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stat {
    Count,
    Sum,
    Mean,
    Var,
    Stderr,
    Min,
    Max,
    Hist(usize),
}

impl Stat {
    pub fn parse(s: &str) -> Result<Stat, String> {
        let s = s.trim();
        Ok(match s {
            "count" => Stat::Count,
            "sum" => Stat::Sum,
            "mean" => Stat::Mean,
            "var" => Stat::Var,
            "stderr" => Stat::Stderr,
            "min" => Stat::Min,
            "max" => Stat::Max,
            _ => {
                let inner = s
                    .strip_prefix("hist(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| format!("unknown statistic `{}`", s))?;
                let k: usize = inner
                    .trim()
                    .parse()
                    .map_err(|_| format!("bad bin count in `{}`", s))?;
                if k == 0 {
                    return Err("hist(k) requires k >= 1".into());
                }
                Stat::Hist(k)
            }
        })
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stat::Count => f.write_str("count"),
            Stat::Sum => f.write_str("sum"),
            Stat::Mean => f.write_str("mean"),
            Stat::Var => f.write_str("var"),
            Stat::Stderr => f.write_str("stderr"),
            Stat::Min => f.write_str("min"),
            Stat::Max => f.write_str("max"),
            Stat::Hist(k) => write!(f, "hist({})", k),
        }
    }
}

/// What to collect, when, and grouped by what.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationRule {
    pub result_id: String,
    pub stats: Vec<Stat>,
    pub timepoint: TimePoint,
    /// Empty means a single global cell.
    pub conditions: Vec<Expr>,
}

impl AggregationRule {
    /// Parses `result_id : stat, ... @ timepoint [by expr, ...]`.
    pub fn parse(line: &str) -> Result<AggregationRule, String> {
        let (id, rest) = line
            .split_once(':')
            .ok_or("expected `:` after result id")?;
        let result_id = id.trim();
        if !crate::config::is_identifier(result_id) {
            return Err(format!("invalid result id `{}`", result_id));
        }
        let (stats_text, rest) = rest.split_once('@').ok_or("expected `@ timepoint`")?;
        let mut stats = Vec::new();
        for s in stats_text.split(',') {
            let stat = Stat::parse(s)?;
            if stats.iter().any(|have: &Stat| {
                std::mem::discriminant(have) == std::mem::discriminant(&stat)
            }) {
                return Err(format!("statistic `{}` listed twice", stat));
            }
            stats.push(stat);
        }
        let rest = rest.trim_start();
        let tp_end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        let timepoint: TimePoint = rest[..tp_end].parse()?;
        let tail = rest[tp_end..].trim();
        let conditions = if tail.is_empty() {
            Vec::new()
        } else {
            let exprs = tail
                .strip_prefix("by")
                .filter(|r| r.starts_with(char::is_whitespace) || r.starts_with('('))
                .ok_or("expected `by` before condition expressions")?;
            Expr::parse_list(exprs).map_err(|e| format!("condition: {}", e))?
        };
        Ok(AggregationRule {
            result_id: result_id.to_string(),
            stats,
            timepoint,
            conditions,
        })
    }

    pub fn has(&self, stat: Stat) -> bool {
        self.stats.contains(&stat)
    }

    pub fn hist_bins(&self) -> Option<usize> {
        self.stats.iter().find_map(|s| match s {
            Stat::Hist(k) => Some(*k),
            _ => None,
        })
    }

    /// Scalar key expressions with tuples flattened.
    pub fn key_components(&self) -> Vec<&Expr> {
        self.conditions.iter().flat_map(|e| e.components()).collect()
    }

    /// Requested statistics in table order; `count` always leads.
    pub fn table_stats(&self) -> Vec<Stat> {
        let mut out: Vec<Stat> = self.stats.clone();
        out.push(Stat::Count);
        out.sort();
        out.dedup();
        out
    }

    /// Column names of the emitted table, keys first.
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self
            .key_components()
            .iter()
            .map(|e| e.to_string().replace(char::is_whitespace, ""))
            .collect();
        for stat in self.table_stats() {
            match stat {
                Stat::Hist(k) => {
                    cols.push("hist_lo".into());
                    cols.push("hist_hi".into());
                    cols.extend((1..=k).map(|i| format!("hist_{}", i)));
                }
                s => cols.push(s.to_string()),
            }
        }
        cols
    }

    pub fn cell_key(&self, point: &ParameterPoint) -> Result<CellKey, ExprError> {
        let mut key = Vec::new();
        for cond in &self.conditions {
            key.extend(cond.eval_numbers(point)?);
        }
        Ok(CellKey::new(key))
    }
}

impl fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} : ", self.result_id)?;
        let stats: Vec<String> = self.stats.iter().map(Stat::to_string).collect();
        write!(f, "{} @ {}", stats.join(", "), self.timepoint)?;
        if !self.conditions.is_empty() {
            let conds: Vec<String> = self.conditions.iter().map(Expr::to_string).collect();
            write!(f, " by {}", conds.join(", "))?;
        }
        Ok(())
    }
}

/// One cell's key; compares by numeric value, component by component.
#[derive(Debug, Clone)]
pub struct CellKey(Vec<f64>);

impl CellKey {
    pub fn new(values: Vec<f64>) -> CellKey {
        // -0 and 0 must land in the same cell.
        CellKey(values.into_iter().map(|v| v + 0.0).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Single-token text form: comma-joined, `_` for the empty key.
    pub fn canonical(&self) -> String {
        if self.0.is_empty() {
            "_".to_string()
        } else {
            self.0.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
        }
    }

    pub fn parse_canonical(s: &str) -> Option<CellKey> {
        if s == "_" {
            return Some(CellKey(Vec::new()));
        }
        s.split(',')
            .map(crate::num::parse_finite)
            .collect::<Option<Vec<f64>>>()
            .map(CellKey::new)
    }
}

impl PartialEq for CellKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for CellKey {}

impl PartialOrd for CellKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CellKey {
    fn cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.total_cmp(b) {
                Ordering::Equal => {}
                o => return o,
            }
        }
        self.0.len().cmp(&other.0.len())
    }
}

/// Running count, mean, sum of squared deviations, extremes.
///
/// `values` is kept only for rules with a histogram: bin edges depend on the
/// merged extremes, so they cannot be fixed until finalize.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialStat {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
    pub min: f64,
    pub max: f64,
    pub values: Option<Vec<f64>>,
}

impl Default for PartialStat {
    fn default() -> Self {
        PartialStat::empty()
    }
}

impl PartialStat {
    pub fn empty() -> PartialStat {
        PartialStat {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            values: None,
        }
    }

    pub fn with_values() -> PartialStat {
        PartialStat {
            values: Some(Vec::new()),
            ..PartialStat::empty()
        }
    }

    pub fn from_values(values: &[f64]) -> PartialStat {
        let mut s = PartialStat::empty();
        for &v in values {
            s.observe(v);
        }
        s
    }

    /// Welford update. The caller guarantees `value` is finite.
    pub fn observe(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
        self.min = self.min.min(value);
        self.max = self.max.max(value);
        self.mean = self.mean.clamp(self.min, self.max);
        if let Some(vs) = &mut self.values {
            let at = vs.partition_point(|x| x.total_cmp(&value).is_le());
            vs.insert(at, value);
        }
    }

    /// Pairwise combination of two disjoint summaries.
    pub fn merge(&self, other: &PartialStat) -> PartialStat {
        let values = match (&self.values, &other.values) {
            (None, None) => None,
            (a, b) => {
                let mut all: Vec<f64> = a.iter().chain(b.iter()).flatten().copied().collect();
                all.sort_by(f64::total_cmp);
                Some(all)
            }
        };
        if other.count == 0 {
            return PartialStat { values, ..self.clone() };
        }
        if self.count == 0 {
            return PartialStat { values, ..other.clone() };
        }
        let n = self.count + other.count;
        let (na, nb, nf) = (self.count as f64, other.count as f64, n as f64);
        let delta = other.mean - self.mean;
        let min = self.min.min(other.min);
        let max = self.max.max(other.max);
        PartialStat {
            count: n,
            mean: (self.mean + delta * nb / nf).clamp(min, max),
            m2: self.m2 + other.m2 + delta * delta * na * nb / nf,
            min,
            max,
            values,
        }
    }

    /// Sample variance (n - 1 denominator); `None` below two observations.
    pub fn variance(&self) -> Option<f64> {
        (self.count >= 2).then(|| self.m2 / (self.count - 1) as f64)
    }

    pub fn stderr(&self) -> Option<f64> {
        self.variance().map(|v| (v / self.count as f64).sqrt())
    }

    pub fn sum(&self) -> f64 {
        self.mean * self.count as f64
    }

    /// `k` equal-width bins over `[min, max]`; the last bin is closed.
    pub fn histogram(&self, k: usize) -> Vec<u64> {
        let mut bins = vec![0u64; k];
        let Some(vs) = &self.values else {
            return bins;
        };
        let width = (self.max - self.min) / k as f64;
        for &v in vs {
            let idx = if v >= self.max || width == 0.0 {
                k - 1
            } else {
                (((v - self.min) / width).floor() as usize).min(k - 1)
            };
            bins[idx] += 1;
        }
        bins
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggError {
    #[error("unit {0} already committed")]
    DuplicateCommit(u64),
    #[error("rule `{rule}`: non-finite value {value}")]
    NonFinite { rule: String, value: f64 },
    #[error("rule `{rule}`: condition failed: {source}")]
    Condition { rule: String, source: ExprError },
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
}

/// One unit's reduced observations: at most one cell per rule.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnitContribution {
    pub cells: Vec<Option<(CellKey, PartialStat)>>,
}

impl UnitContribution {
    /// Reduces a unit's observation buffer against the rules.
    pub fn build(
        rules: &[AggregationRule],
        point: &ParameterPoint,
        observations: &[Observation],
    ) -> Result<UnitContribution, AggError> {
        let mut cells = Vec::with_capacity(rules.len());
        for rule in rules {
            let key = rule.cell_key(point).map_err(|source| AggError::Condition {
                rule: rule.result_id.clone(),
                source,
            })?;
            let mut stat = if rule.hist_bins().is_some() {
                PartialStat::with_values()
            } else {
                PartialStat::empty()
            };
            for obs in observations
                .iter()
                .filter(|o| o.timepoint == rule.timepoint && o.result_id == rule.result_id)
            {
                if !obs.value.is_finite() {
                    return Err(AggError::NonFinite {
                        rule: rule.result_id.clone(),
                        value: obs.value,
                    });
                }
                stat.observe(obs.value);
            }
            cells.push((stat.count > 0).then_some((key, stat)));
        }
        Ok(UnitContribution { cells })
    }
}

type Cells = BTreeMap<CellKey, BTreeMap<u64, PartialStat>>;

/// Committed per-unit partials for every rule.
#[derive(Debug, Clone, PartialEq)]
pub struct AggState {
    rules: Vec<AggregationRule>,
    cells: Vec<Cells>,
    committed: BTreeSet<u64>,
}

impl AggState {
    pub fn new(rules: Vec<AggregationRule>) -> AggState {
        let cells = vec![Cells::new(); rules.len()];
        AggState {
            rules,
            cells,
            committed: BTreeSet::new(),
        }
    }

    pub fn rules(&self) -> &[AggregationRule] {
        &self.rules
    }

    pub fn committed(&self) -> &BTreeSet<u64> {
        &self.committed
    }

    pub fn is_committed(&self, unit: u64) -> bool {
        self.committed.contains(&unit)
    }

    /// Inserts all of a unit's partials, or nothing if it was already committed.
    pub fn commit_unit(&mut self, unit: u64, contribution: UnitContribution) -> Result<(), AggError> {
        if !self.committed.insert(unit) {
            return Err(AggError::DuplicateCommit(unit));
        }
        for (cells, entry) in self.cells.iter_mut().zip(contribution.cells) {
            if let Some((key, stat)) = entry {
                cells.entry(key).or_default().insert(unit, stat);
            }
        }
        Ok(())
    }

    /// Marks a unit committed without contributions (restoring from a checkpoint).
    pub fn restore_committed(&mut self, unit: u64) {
        self.committed.insert(unit);
    }

    /// Puts back one stored partial (restoring from a checkpoint).
    pub fn restore_partial(
        &mut self,
        rule_id: &str,
        key: CellKey,
        unit: u64,
        stat: PartialStat,
    ) -> Result<(), AggError> {
        let idx = self
            .rules
            .iter()
            .position(|r| r.result_id == rule_id)
            .ok_or_else(|| AggError::UnknownRule(rule_id.to_string()))?;
        self.cells[idx].entry(key).or_default().insert(unit, stat);
        Ok(())
    }

    /// `(cell, unit, partial)` entries of one rule, cells then units ascending.
    pub fn entries(&self, rule: usize) -> impl Iterator<Item = (&CellKey, u64, &PartialStat)> {
        self.cells[rule]
            .iter()
            .flat_map(|(k, units)| units.iter().map(move |(u, s)| (k, *u, s)))
    }

    pub fn cell_count(&self, rule: usize) -> usize {
        self.cells[rule].len()
    }

    /// Merges each cell's partials in ascending unit order.
    pub fn finalize(&self, rule: usize) -> ResultTable {
        let rows = self.cells[rule]
            .iter()
            .map(|(key, units)| {
                let merged = units
                    .values()
                    .fold(PartialStat::empty(), |acc, s| acc.merge(s));
                (key.clone(), merged)
            })
            .collect();
        ResultTable {
            rule: self.rules[rule].clone(),
            rows,
        }
    }

    pub fn finalize_all(&self) -> Vec<ResultTable> {
        (0..self.rules.len()).map(|i| self.finalize(i)).collect()
    }
}

/// A finalized table: one row per cell, ascending by key.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub rule: AggregationRule,
    pub rows: Vec<(CellKey, PartialStat)>,
}

impl ResultTable {
    pub fn header(&self) -> String {
        format!("# {}", self.rule.columns().join(" "))
    }

    /// Whitespace-separated text, directly loadable by Gnuplot.
    pub fn to_text(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        let stats = self.rule.table_stats();
        for (key, s) in &self.rows {
            let mut fields: Vec<String> = key.values().iter().map(|v| fmt_f64(*v)).collect();
            let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), fmt_f64);
            for stat in &stats {
                match stat {
                    Stat::Count => fields.push(s.count.to_string()),
                    Stat::Sum => fields.push(fmt_f64(s.sum())),
                    Stat::Mean => fields.push(fmt_f64(s.mean)),
                    Stat::Var => fields.push(opt(s.variance())),
                    Stat::Stderr => fields.push(opt(s.stderr())),
                    Stat::Min => fields.push(fmt_f64(s.min)),
                    Stat::Max => fields.push(fmt_f64(s.max)),
                    Stat::Hist(k) => {
                        fields.push(fmt_f64(s.min));
                        fields.push(fmt_f64(s.max));
                        fields.extend(s.histogram(*k).iter().map(u64::to_string));
                    }
                }
            }
            out.push_str(&fields.join(" "));
            out.push('\n');
        }
        out
    }
}
