//! Portable checkpoints.
//!
//! A checkpoint holds the set of committed units and every committed
//! per-unit partial statistic. It is plain UTF-8 text with LF endings and a
//! trailing CRC32, so the same file resumes identically on any machine.
//!
//! ```text
//! LEOCKPT 1
//! config_hash = <64 hex>
//! master_seed = <u64>
//! units_total = <u64>
//! completed = 0-3,7,9-12
//! [agg <rule_id>]
//! <cell_key> <unit> <count> <mean> <m2> <min> <max> [<value>...]
//! crc32 = <8 hex over all preceding bytes>
//! ```
//!
//! Trailing values are present only for histogram rules and list the
//! unit's observations in ascending order.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::aggregate::{AggState, CellKey, PartialStat};
use crate::config::{to_hex, Config};
use crate::engine::{plan, RunLedger, RunUnit};
use crate::num::{fmt_f64, parse_finite};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "LEOCKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: crc mismatch")]
    CrcMismatch,
    #[error("corrupt checkpoint: truncated (no crc32 trailer)")]
    Truncated,
    #[error("incompatible version {0} (supported: {FORMAT_VERSION})")]
    IncompatibleVersion(String),
    #[error("checkpoint line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config changed since checkpoint: {0}")]
    ConfigChanged(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
}

/// Ascending, disjoint, inclusive ranges.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RangeSet(Vec<(u64, u64)>);

impl RangeSet {
    pub fn from_set(set: &BTreeSet<u64>) -> RangeSet {
        let mut ranges: Vec<(u64, u64)> = Vec::new();
        for &i in set {
            match ranges.last_mut() {
                Some((_, hi)) if *hi + 1 == i => *hi = i,
                _ => ranges.push((i, i)),
            }
        }
        RangeSet(ranges)
    }

    pub fn ranges(&self) -> &[(u64, u64)] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        self.0.iter().flat_map(|&(lo, hi)| lo..=hi)
    }

    pub fn len(&self) -> u64 {
        self.0.iter().map(|(lo, hi)| hi - lo + 1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: u64) -> bool {
        let at = self.0.partition_point(|&(_, hi)| hi < i);
        self.0.get(at).is_some_and(|&(lo, _)| lo <= i)
    }

    pub fn to_set(&self) -> BTreeSet<u64> {
        self.iter().collect()
    }

    /// Parses `0-3,7,9-12` (empty text is the empty set).
    pub fn parse(text: &str, units_total: u64) -> Result<RangeSet, String> {
        let mut ranges: Vec<(u64, u64)> = Vec::new();
        if text.is_empty() {
            return Ok(RangeSet(ranges));
        }
        for part in text.split(',') {
            let (lo, hi) = match part.split_once('-') {
                Some((a, b)) => (parse_u64(a)?, parse_u64(b)?),
                None => {
                    let v = parse_u64(part)?;
                    (v, v)
                }
            };
            if lo > hi {
                return Err(format!("descending range `{}`", part));
            }
            if hi >= units_total {
                return Err(format!("range `{}` beyond units_total {}", part, units_total));
            }
            if let Some(&(_, prev)) = ranges.last() {
                if lo <= prev.saturating_add(1) {
                    return Err(format!("range `{}` overlaps or touches the previous one", part));
                }
            }
            ranges.push((lo, hi));
        }
        Ok(RangeSet(ranges))
    }
}

impl std::fmt::Display for RangeSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, (lo, hi)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            if lo == hi {
                write!(f, "{}", lo)?;
            } else {
                write!(f, "{}-{}", lo, hi)?;
            }
        }
        Ok(())
    }
}

fn parse_u64(s: &str) -> Result<u64, String> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("bad integer `{}`", s));
    }
    s.parse().map_err(|_| format!("bad integer `{}`", s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub key: CellKey,
    pub unit: u64,
    pub stat: PartialStat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: [u8; 32],
    pub master_seed: u64,
    pub units_total: u64,
    pub completed: RangeSet,
    /// Per rule, in config order.
    pub agg: Vec<(String, Vec<CheckpointEntry>)>,
}

/// Captures the committed state at a commit boundary.
pub fn snapshot(ledger: &RunLedger, state: &AggState, config: &Config) -> Checkpoint {
    let agg = state
        .rules()
        .iter()
        .enumerate()
        .map(|(i, rule)| {
            let entries = state
                .entries(i)
                .map(|(key, unit, stat)| CheckpointEntry {
                    key: key.clone(),
                    unit,
                    stat: stat.clone(),
                })
                .collect();
            (rule.result_id.clone(), entries)
        })
        .collect();
    Checkpoint {
        format_version: FORMAT_VERSION,
        config_hash: config.canonical_hash(),
        master_seed: config.task.seed,
        units_total: ledger.units_total,
        completed: RangeSet::from_set(&ledger.completed),
        agg,
    }
}

impl Checkpoint {
    pub fn completed_count(&self) -> u64 {
        self.completed.len()
    }

    pub fn config_hash_hex(&self) -> String {
        to_hex(&self.config_hash)
    }

    /// The exact file bytes.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", MAGIC, self.format_version);
        let _ = writeln!(out, "config_hash = {}", self.config_hash_hex());
        let _ = writeln!(out, "master_seed = {}", self.master_seed);
        let _ = writeln!(out, "units_total = {}", self.units_total);
        let _ = writeln!(out, "completed = {}", self.completed);
        for (rule, entries) in &self.agg {
            let _ = writeln!(out, "[agg {}]", rule);
            for e in entries {
                let s = &e.stat;
                let _ = write!(
                    out,
                    "{} {} {} {} {} {} {}",
                    e.key.canonical(),
                    e.unit,
                    s.count,
                    fmt_f64(s.mean),
                    fmt_f64(s.m2),
                    fmt_f64(s.min),
                    fmt_f64(s.max)
                );
                for v in s.values.iter().flatten() {
                    let _ = write!(out, " {}", fmt_f64(*v));
                }
                out.push('\n');
            }
        }
        let crc = crc32fast::hash(out.as_bytes());
        let _ = writeln!(out, "crc32 = {:08x}", crc);
        out
    }

    /// Parses and verifies file bytes.
    pub fn parse(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let perr = |line: usize, message: String| CheckpointError::Parse { line, message };
        let first_end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
        let first = String::from_utf8_lossy(&bytes[..first_end]);
        let version = first
            .strip_prefix(MAGIC)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| perr(1, "not a checkpoint file".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(CheckpointError::IncompatibleVersion(version.to_string()));
        }

        if !bytes.ends_with(b"\n") {
            return Err(CheckpointError::Truncated);
        }
        let trailer = b"\ncrc32 = ";
        let trailer_at = bytes[..bytes.len() - 1]
            .windows(trailer.len())
            .rposition(|w| w == trailer)
            .ok_or(CheckpointError::Truncated)?;
        let body = &bytes[..trailer_at + 1];
        let crc_text = &bytes[trailer_at + trailer.len()..bytes.len() - 1];
        if crc_text.len() != 8 {
            return Err(CheckpointError::Truncated);
        }
        let stored = std::str::from_utf8(crc_text)
            .ok()
            .and_then(|s| u32::from_str_radix(s, 16).ok())
            .ok_or(CheckpointError::CrcMismatch)?;
        if crc32fast::hash(body) != stored {
            return Err(CheckpointError::CrcMismatch);
        }
        let body = std::str::from_utf8(body).map_err(|_| CheckpointError::CrcMismatch)?;

        let mut lines = body.lines().enumerate().skip(1).map(|(i, l)| (i + 1, l));
        let mut header = |key: &str| -> Result<(usize, String), CheckpointError> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| perr(0, format!("missing `{}`", key)))?;
            let value = line
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(" = "))
                .ok_or_else(|| perr(n, format!("expected `{} = ...`", key)))?;
            Ok((n, value.to_string()))
        };
        let (n, hash_hex) = header("config_hash")?;
        let config_hash = parse_hash(&hash_hex).ok_or_else(|| perr(n, "bad config hash".into()))?;
        let (n, seed) = header("master_seed")?;
        let master_seed = parse_u64(&seed).map_err(|m| perr(n, m))?;
        let (n, total) = header("units_total")?;
        let units_total = parse_u64(&total).map_err(|m| perr(n, m))?;
        let (n, ranges) = header("completed")?;
        let completed = RangeSet::parse(&ranges, units_total).map_err(|m| perr(n, m))?;

        let mut agg: Vec<(String, Vec<CheckpointEntry>)> = Vec::new();
        for (n, line) in body.lines().enumerate().skip(5).map(|(i, l)| (i + 1, l)) {
            if let Some(rule) = line.strip_prefix("[agg ").and_then(|r| r.strip_suffix(']')) {
                if !crate::config::is_identifier(rule) || agg.iter().any(|(r, _)| r == rule) {
                    return Err(perr(n, format!("bad rule section `{}`", rule)));
                }
                agg.push((rule.to_string(), Vec::new()));
                continue;
            }
            let Some((_, entries)) = agg.last_mut() else {
                return Err(perr(n, "entry outside an [agg] section".into()));
            };
            let entry = parse_entry(line).map_err(|m| perr(n, m))?;
            if !completed.contains(entry.unit) {
                return Err(perr(n, format!("unit {} is not listed as completed", entry.unit)));
            }
            if let Some(prev) = entries.last() {
                if (&prev.key, prev.unit) >= (&entry.key, entry.unit) {
                    return Err(perr(n, "entries out of order".into()));
                }
            }
            entries.push(entry);
        }
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            config_hash,
            master_seed,
            units_total,
            completed,
            agg,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::parse(&fs::read(path)?)
    }
}

fn parse_hash(hex: &str) -> Option<[u8; 32]> {
    if hex.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(hex.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn parse_entry(line: &str) -> Result<CheckpointEntry, String> {
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() < 7 {
        return Err("expected at least 7 fields".into());
    }
    let key = CellKey::parse_canonical(fields[0]).ok_or("bad cell key")?;
    let unit = parse_u64(fields[1])?;
    let count = parse_u64(fields[2])?;
    let num = |s: &str| parse_finite(s).ok_or_else(|| format!("bad number `{}`", s));
    let (mean, m2, min, max) = (num(fields[3])?, num(fields[4])?, num(fields[5])?, num(fields[6])?);
    if count == 0 || m2 < 0.0 || !(min <= mean && mean <= max) {
        return Err("inconsistent statistics".into());
    }
    let values = if fields.len() > 7 {
        let vs = fields[7..].iter().map(|s| num(s)).collect::<Result<Vec<f64>, _>>()?;
        if vs.len() as u64 != count {
            return Err("value list length differs from count".into());
        }
        Some(vs)
    } else {
        None
    };
    Ok(CheckpointEntry {
        key,
        unit,
        stat: PartialStat {
            count,
            mean,
            m2,
            min,
            max,
            values,
        },
    })
}

/// Where checkpoints go and how many old ones to keep.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    pub path: PathBuf,
    /// Files kept including `path` itself; older ones are `path.1`, `path.2`, ...
    pub keep: usize,
    /// Test hook: write only this many bytes of the temporary file, then fail.
    pub fault_after_bytes: Option<usize>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

impl CheckpointStore {
    pub fn new(path: impl Into<PathBuf>, keep: usize) -> CheckpointStore {
        CheckpointStore {
            path: path.into(),
            keep: keep.max(1),
            fault_after_bytes: None,
        }
    }

    pub fn rotated(&self, generation: usize) -> PathBuf {
        if generation == 0 {
            self.path.clone()
        } else {
            with_suffix(&self.path, &format!(".{}", generation))
        }
    }

    /// Writes `<path>.tmp`, syncs it, rotates older files, then renames it
    /// over `<path>`. `<path>` is a complete checkpoint at every instant.
    pub fn write(&self, cp: &Checkpoint) -> io::Result<()> {
        let bytes = cp.to_text().into_bytes();
        let tmp = with_suffix(&self.path, ".tmp");
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        {
            let mut f = File::create(&tmp)?;
            if let Some(n) = self.fault_after_bytes {
                f.write_all(&bytes[..n.min(bytes.len())])?;
                return Err(io::Error::other("injected write fault"));
            }
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        if self.keep >= 2 && self.path.exists() {
            for g in (1..self.keep - 1).rev() {
                let from = self.rotated(g);
                if from.exists() {
                    fs::rename(&from, self.rotated(g + 1))?;
                }
            }
            let staged = with_suffix(&self.rotated(1), ".tmp");
            fs::copy(&self.path, &staged)?;
            fs::rename(&staged, self.rotated(1))?;
        }
        fs::rename(&tmp, &self.path)?;
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            if let Ok(d) = File::open(dir) {
                let _ = d.sync_all();
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::load(&self.path)
    }
}

/// What is left to do after a checkpoint.
#[derive(Debug)]
pub struct Resumed {
    pub remaining: Vec<RunUnit>,
    pub state: AggState,
    pub ledger: RunLedger,
}

/// Rebuilds the ledger and aggregation state and plans the missing units.
pub fn resume(cp: &Checkpoint, config: &Config) -> Result<Resumed, CheckpointError> {
    if cp.config_hash != config.canonical_hash() {
        return Err(CheckpointError::ConfigChanged(format!(
            "checkpoint hash {} != config hash {}",
            cp.config_hash_hex(),
            config.canonical_hash_hex()
        )));
    }
    if cp.master_seed != config.task.seed {
        return Err(CheckpointError::ConfigChanged(format!(
            "checkpoint seed {} != config seed {}",
            cp.master_seed, config.task.seed
        )));
    }
    let units_total = config.units_total();
    if cp.units_total != units_total {
        return Err(CheckpointError::ConfigChanged(format!(
            "checkpoint has {} units, config plans {}",
            cp.units_total, units_total
        )));
    }
    let ids: Vec<&str> = cp.agg.iter().map(|(r, _)| r.as_str()).collect();
    let want: Vec<&str> = config.rules.iter().map(|r| r.result_id.as_str()).collect();
    if ids != want {
        return Err(CheckpointError::ConfigChanged(format!(
            "checkpoint rules {:?} != config rules {:?}",
            ids, want
        )));
    }

    let mut state = AggState::new(config.rules.clone());
    let mut ledger = RunLedger::new(units_total);
    for u in cp.completed.iter() {
        state.restore_committed(u);
        ledger.completed.insert(u);
    }
    for (rule, entries) in &cp.agg {
        let hist = config
            .rules
            .iter()
            .find(|r| &r.result_id == rule)
            .and_then(|r| r.hist_bins())
            .is_some();
        for e in entries {
            if e.stat.values.is_some() != hist {
                return Err(CheckpointError::ConfigChanged(format!(
                    "rule `{}` histogram data does not match the config",
                    rule
                )));
            }
            state
                .restore_partial(rule, e.key.clone(), e.unit, e.stat.clone())
                .map_err(|e| CheckpointError::ConfigChanged(e.to_string()))?;
        }
    }
    let remaining = plan(&config.space, config.task.repeats, config.task.seed)
        .map_err(|e| CheckpointError::ConfigChanged(e.to_string()))?
        .into_iter()
        .filter(|u| !ledger.completed.contains(&u.unit_index))
        .collect();
    Ok(Resumed {
        remaining,
        state,
        ledger,
    })
}

/// Line diff of two canonical config texts (`-` old, `+` new).
pub fn config_diff(old: &str, new: &str) -> String {
    let old_lines: Vec<&str> = old.lines().collect();
    let new_lines: Vec<&str> = new.lines().collect();
    let mut out = String::new();
    for l in &old_lines {
        if !new_lines.contains(l) {
            let _ = writeln!(out, "- {}", l);
        }
    }
    for l in &new_lines {
        if !old_lines.contains(l) {
            let _ = writeln!(out, "+ {}", l);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::{AggregationRule, UnitContribution};
    use crate::config::parse_config;
    use crate::engine::{Observation, TimePoint};
    use proptest::prelude::*;

    const CFG: &str = "\
[task]
name = demo
repeats = 2
seed = 11
[params]
x = {1, 2.5}
y = {0, 1, 2, 3, 4}
[aggregate]
v : mean, var @ after_run by x
h : hist(2) @ after_step by x, y
";

    fn sample_state(config: &Config, units: &[u64]) -> (RunLedger, AggState) {
        let mut ledger = RunLedger::new(config.units_total());
        let mut state = AggState::new(config.rules.clone());
        for &u in units {
            let unit = RunUnit::new(u, config.task.repeats, config.task.seed);
            let point = config.space.point(unit.point_index);
            let obs: Vec<Observation> = (0..3)
                .map(|k| Observation {
                    timepoint: if k == 0 { TimePoint::AfterRun } else { TimePoint::AfterStep },
                    result_id: if k == 0 { "v" } else { "h" }.into(),
                    value: u as f64 * 0.1 + k as f64,
                })
                .collect();
            let c = UnitContribution::build(&config.rules, &point, &obs).unwrap();
            state.commit_unit(u, c).unwrap();
            ledger.completed.insert(u);
        }
        (ledger, state)
    }

    #[test]
    fn rle_encoding() {
        let set: BTreeSet<u64> = [0, 1, 2, 3, 7, 9, 10, 11, 12].into_iter().collect();
        let r = RangeSet::from_set(&set);
        assert_eq!(r.to_string(), "0-3,7,9-12");
        assert_eq!(RangeSet::parse("0-3,7,9-12", 13).unwrap(), r);
        assert_eq!(r.len(), 9);
        assert!(r.contains(10) && !r.contains(8));
        assert_eq!(RangeSet::from_set(&BTreeSet::new()).to_string(), "");
        for bad in ["3-1", "0-3,2", "0-3,4", "x", "1,,2", "-", "0-20"] {
            assert!(RangeSet::parse(bad, 13).is_err(), "{}", bad);
        }
    }

    #[test]
    fn snapshot_before_and_after() {
        let config = parse_config(CFG).unwrap();
        let (ledger, state) = sample_state(&config, &[]);
        let cp = snapshot(&ledger, &state, &config);
        assert!(cp.completed.is_empty());
        assert!(cp.agg.iter().all(|(_, e)| e.is_empty()));
        assert!(cp.to_text().contains("\ncompleted = \n"));

        let all: Vec<u64> = (0..config.units_total()).collect();
        let (ledger, state) = sample_state(&config, &all);
        let cp = snapshot(&ledger, &state, &config);
        assert_eq!(cp.completed.to_string(), "0-19");
    }

    #[test]
    fn text_round_trip() {
        let config = parse_config(CFG).unwrap();
        let (ledger, state) = sample_state(&config, &[0, 1, 2, 5, 6, 19]);
        let cp = snapshot(&ledger, &state, &config);
        let text = cp.to_text();
        assert!(text.starts_with("LEOCKPT 1\nconfig_hash = "));
        assert!(text.contains("\n[agg v]\n1 0 1 0 0 0 0\n"));
        assert_eq!(Checkpoint::parse(text.as_bytes()).unwrap(), cp);
    }

    #[test]
    fn rejects_tampering() {
        let config = parse_config(CFG).unwrap();
        let (ledger, state) = sample_state(&config, &[0, 3]);
        let text = snapshot(&ledger, &state, &config).to_text();

        let flipped = text.replacen("master_seed = 11", "master_seed = 12", 1);
        assert!(matches!(Checkpoint::parse(flipped.as_bytes()), Err(CheckpointError::CrcMismatch)));

        let v99 = text.replacen("LEOCKPT 1", "LEOCKPT 99", 1);
        let err = Checkpoint::parse(v99.as_bytes()).unwrap_err();
        assert!(matches!(err, CheckpointError::IncompatibleVersion(ref v) if v == "99"));

        let cut = &text.as_bytes()[..text.len() / 2];
        assert!(matches!(Checkpoint::parse(cut), Err(CheckpointError::Truncated)));
        assert!(Checkpoint::parse(b"").is_err());
    }

    #[test]
    fn malformed_body_reports_line() {
        let body = "LEOCKPT 1\nconfig_hash = 00\nmaster_seed = 1\nunits_total = 4\ncompleted = 0-9\n";
        let crc = crc32fast::hash(body.as_bytes());
        let text = format!("{}crc32 = {:08x}\n", body, crc);
        match Checkpoint::parse(text.as_bytes()) {
            Err(CheckpointError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{:?}", other),
        }
        let body = format!(
            "LEOCKPT 1\nconfig_hash = {}\nmaster_seed = 1\nunits_total = 4\ncompleted = 0-9\n",
            "0".repeat(64)
        );
        let text = format!("{}crc32 = {:08x}\n", body, crc32fast::hash(body.as_bytes()));
        match Checkpoint::parse(text.as_bytes()) {
            Err(CheckpointError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn write_load_rotate_and_fault() {
        let dir = tempfile::tempdir().unwrap();
        let config = parse_config(CFG).unwrap();
        let mut store = CheckpointStore::new(dir.path().join("run.ckpt"), 2);

        let (l1, s1) = sample_state(&config, &[0]);
        let cp1 = snapshot(&l1, &s1, &config);
        store.write(&cp1).unwrap();
        assert_eq!(store.load().unwrap(), cp1);

        let (l2, s2) = sample_state(&config, &[0, 1]);
        let cp2 = snapshot(&l2, &s2, &config);
        store.write(&cp2).unwrap();
        assert_eq!(Checkpoint::load(&store.rotated(0)).unwrap(), cp2);
        assert_eq!(Checkpoint::load(&store.rotated(1)).unwrap(), cp1);
        assert!(!store.rotated(2).exists());

        let (l3, s3) = sample_state(&config, &[0, 1, 2]);
        let cp3 = snapshot(&l3, &s3, &config);
        let len = cp3.to_text().len();
        store.fault_after_bytes = Some(len / 2);
        assert!(store.write(&cp3).is_err());
        assert_eq!(store.load().unwrap(), cp2);
        assert_eq!(Checkpoint::load(&store.rotated(1)).unwrap(), cp1);
    }

    #[test]
    fn keep_three_generations() {
        let dir = tempfile::tempdir().unwrap();
        let config = parse_config(CFG).unwrap();
        let store = CheckpointStore::new(dir.path().join("c"), 3);
        let mut cps = Vec::new();
        for n in 1..=4u64 {
            let units: Vec<u64> = (0..n).collect();
            let (l, s) = sample_state(&config, &units);
            let cp = snapshot(&l, &s, &config);
            store.write(&cp).unwrap();
            cps.push(cp);
        }
        assert_eq!(store.load().unwrap(), cps[3]);
        assert_eq!(Checkpoint::load(&store.rotated(1)).unwrap(), cps[2]);
        assert_eq!(Checkpoint::load(&store.rotated(2)).unwrap(), cps[1]);
        assert!(!store.rotated(3).exists());
    }

    #[test]
    fn resume_plans_the_complement() {
        let config = parse_config(
            "[task]\nrepeats = 1\n[params]\nx = 0:1:9\n[aggregate]\nv : mean @ after_run by x\n",
        )
        .unwrap();
        let mut ledger = RunLedger::new(10);
        let mut state = AggState::new(config.rules.clone());
        for u in 0..4 {
            state.commit_unit(u, UnitContribution::default()).unwrap();
            ledger.completed.insert(u);
        }
        let cp = snapshot(&ledger, &state, &config);
        let r = resume(&cp, &config).unwrap();
        let idx: Vec<u64> = r.remaining.iter().map(|u| u.unit_index).collect();
        assert_eq!(idx, vec![4, 5, 6, 7, 8, 9]);
        assert_eq!(r.state.committed().len(), 4);
        assert!(r.state.clone().commit_unit(2, UnitContribution::default()).is_err());

        let all: BTreeSet<u64> = (0..10).collect();
        let full = Checkpoint {
            completed: RangeSet::from_set(&all),
            ..cp.clone()
        };
        assert!(resume(&full, &config).unwrap().remaining.is_empty());

        let edited = parse_config(
            "[task]\nrepeats = 1\n[params]\nx = 0:1:10\n[aggregate]\nv : mean @ after_run by x\n",
        )
        .unwrap();
        assert!(matches!(resume(&cp, &edited), Err(CheckpointError::ConfigChanged(_))));
    }

    #[test]
    fn diff_lists_changed_lines() {
        let d = config_diff("a\nb\nc\n", "a\nB\nc\n");
        assert_eq!(d, "- b\n+ B\n");
    }

    #[test]
    fn rule_definition_names() {
        let r = AggregationRule::parse("h : hist(2) @ after_step by x, y").unwrap();
        assert_eq!(r.hist_bins(), Some(2));
    }

    proptest! {
        #[test]
        fn rle_round_trips(set in prop::collection::btree_set(0u64..200, 0..80)) {
            let r = RangeSet::from_set(&set);
            prop_assert_eq!(r.to_set(), set.clone());
            prop_assert_eq!(RangeSet::parse(&r.to_string(), 200).unwrap(), r);
        }
    }
}
