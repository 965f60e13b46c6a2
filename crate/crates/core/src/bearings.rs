//! FEMTO / PRONOSTIA accelerated-life bearing records.
//!
//! Expected layout: one directory per experiment, named `<id>` or
//! `Bearing<id>` (for example `Bearing1_3`), holding one `acc_*.csv` file per
//! 0.1 s segment. Each row is one sample; the last two fields are horizontal
//! and vertical acceleration. When at least four leading fields are present
//! they are read as `hour, minute, second, microsecond`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;

use crate::dataset::{Dataset, Experiment};
use crate::error::{io_err, Error, Result};
use crate::gradcore::Tensor;

pub const FEMTO_SEGMENT_LEN: usize = 2556;
pub const FEMTO_CHANNELS: usize = 2;
/// Time normalisation for bearing data, seconds.
pub const FEMTO_TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Set {
    Train,
    Test,
}

/// Operating condition of the test rig.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    A,
    B,
    C,
}

impl Condition {
    pub fn rpm(self) -> f64 {
        match self {
            Condition::A => 1800.0,
            Condition::B => 1650.0,
            Condition::C => 1500.0,
        }
    }

    pub fn load_kn(self) -> f64 {
        match self {
            Condition::A => 4.0,
            Condition::B => 4.2,
            Condition::C => 5.0,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Condition::A => "A",
            Condition::B => "B",
            Condition::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Condition::A),
            "B" => Ok(Condition::B),
            "C" => Ok(Condition::C),
            _ => Err(Error::Config(format!("unknown operating condition `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitEntry {
    pub id: String,
    pub set: Set,
    pub condition: Condition,
    /// Seconds from the first observation.
    pub failure_time: f64,
    pub expected_count: usize,
}

/// Experiment assignment to training and test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitTable {
    entries: Vec<SplitEntry>,
}

impl SplitTable {
    pub fn new(entries: Vec<SplitEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.id == e.id) {
                return Err(Error::Config(format!("duplicate experiment `{}` in split", e.id)));
            }
            if !(e.failure_time.is_finite() && e.failure_time >= 0.0) || e.expected_count == 0 {
                return Err(Error::Config(format!("experiment `{}`: bad failure time or count", e.id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[SplitEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&SplitEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn ids(&self, set: Set) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.set == set)
            .map(|e| e.id.as_str())
            .collect()
    }
}

/// The reference split: 8 training and 9 test experiments.
pub fn default_split() -> SplitTable {
    use Condition::*;
    use Set::*;
    let rows: [(&str, Set, Condition, f64, usize); 17] = [
        ("1_2", Train, A, 8700.0, 871),
        ("1_3", Train, A, 23740.0, 2375),
        ("1_4", Train, A, 14270.0, 1428),
        ("1_5", Train, A, 24620.0, 2463),
        ("2_1", Train, B, 9100.0, 911),
        ("2_5", Train, B, 23100.0, 2311),
        ("2_6", Train, B, 7000.0, 701),
        ("3_3", Train, C, 4330.0, 434),
        ("1_1", Test, A, 28072.0, 2803),
        ("1_6", Test, A, 24470.0, 2448),
        ("1_7", Test, A, 22580.0, 2259),
        ("2_2", Test, B, 7960.0, 797),
        ("2_3", Test, B, 19540.0, 1955),
        ("2_4", Test, B, 7500.0, 751),
        ("2_7", Test, B, 2290.0, 230),
        ("3_1", Test, C, 5140.0, 515),
        ("3_2", Test, C, 16360.0, 1637),
    ];
    let entries = rows
        .iter()
        .map(|&(id, set, condition, failure_time, expected_count)| SplitEntry {
            id: id.to_string(),
            set,
            condition,
            failure_time,
            expected_count,
        })
        .collect();
    SplitTable::new(entries).expect("reference split is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FemtoOptions {
    /// Seconds between consecutive segments when no clock is used.
    pub spacing: f64,
    /// Read timestamps from the leading clock fields when present.
    pub use_file_clock: bool,
    /// Require the observation count to equal the expected count exactly.
    /// Otherwise a mismatch of up to `count_tolerance` only warns.
    pub strict: bool,
    pub count_tolerance: usize,
}

impl Default for FemtoOptions {
    fn default() -> Self {
        Self {
            spacing: 10.0,
            use_file_clock: true,
            strict: true,
            count_tolerance: 2,
        }
    }
}

struct ParsedSegment {
    data: Tensor,
    clock: Option<f64>,
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains(',') {
        line.split(',').map(str::trim).collect()
    } else if line.contains(';') {
        line.split(';').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

fn parse_segment(path: &Path) -> Result<ParsedSegment> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut horiz = Vec::with_capacity(FEMTO_SEGMENT_LEN);
    let mut vert = Vec::with_capacity(FEMTO_SEGMENT_LEN);
    let mut clock = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields = split_fields(line);
        if fields.len() < 2 {
            return Err(bad(format!("expected at least 2 fields, found {}", fields.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("`{s}` is not a finite number")))
        };
        let n = fields.len();
        horiz.push(num(fields[n - 2])?);
        vert.push(num(fields[n - 1])?);
        if horiz.len() == 1 && n >= 6 {
            let c: Vec<f64> = fields[..4].iter().map(|s| num(s)).collect::<Result<_>>()?;
            clock = Some(c[0] * 3600.0 + c[1] * 60.0 + c[2] + c[3] * 1e-6);
        }
    }
    if horiz.len() != FEMTO_SEGMENT_LEN {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("segment has {} samples, expected {FEMTO_SEGMENT_LEN}", horiz.len()),
        });
    }
    horiz.extend(vert);
    let data = Tensor::new(vec![FEMTO_CHANNELS, FEMTO_SEGMENT_LEN], horiz)?;
    Ok(ParsedSegment { data, clock })
}

fn experiment_dir(root: &Path, id: &str) -> Result<PathBuf> {
    [id.to_string(), format!("Bearing{id}")]
        .iter()
        .map(|name| root.join(name))
        .find(|p| p.is_dir())
        .ok_or_else(|| Error::Missing(format!("experiment {id}: no directory `{id}` or `Bearing{id}` under {}", root.display())))
}

/// Numeric key for names like `acc_00012.csv`, falling back to the name.
fn file_order(path: &Path) -> (u64, String) {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let digits: String = name.chars().filter(char::is_ascii_digit).collect();
    (digits.parse().unwrap_or(u64::MAX), name)
}

fn segment_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let is_acc = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("acc") && n.ends_with(".csv"));
        if is_acc && path.is_file() {
            files.push(path);
        }
    }
    files.sort_by_cached_key(|p| file_order(p));
    Ok(files)
}

/// Relative clock times in seconds, unwrapping midnight rollovers.
fn clock_times(clocks: &[f64]) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(clocks.len());
    let mut offset = 0.0;
    for (k, &c) in clocks.iter().enumerate() {
        if k > 0 && c <= clocks[k - 1] - 43_200.0 {
            offset += 86_400.0;
        }
        out.push(c + offset - clocks[0]);
    }
    out.windows(2).all(|w| w[1] > w[0]).then_some(out)
}

/// Loads one experiment listed in the split.
pub fn load_experiment(root: &Path, entry: &SplitEntry, opts: &FemtoOptions) -> Result<Experiment> {
    let dir = experiment_dir(root, &entry.id)?;
    let files = segment_files(&dir)?;
    let n = files.len();
    if n != entry.expected_count {
        let diff = n.abs_diff(entry.expected_count);
        let msg = format!("experiment {}: {n} segments, expected {}", entry.id, entry.expected_count);
        if opts.strict || diff > opts.count_tolerance || n == 0 {
            return Err(Error::Format { path: dir, msg });
        }
        warn!("{msg}");
    }
    let parsed = files.par_iter().map(|f| parse_segment(f)).collect::<Result<Vec<_>>>()?;

    let clocks: Option<Vec<f64>> = parsed.iter().map(|s| s.clock).collect();
    let from_clock = match clocks.filter(|_| opts.use_file_clock) {
        Some(c) => {
            let t = clock_times(&c);
            if t.is_none() {
                warn!("experiment {}: segment clocks are not increasing; using {} s spacing", entry.id, opts.spacing);
            }
            t
        }
        None => None,
    };
    let timestamps = from_clock.unwrap_or_else(|| (0..n).map(|k| k as f64 * opts.spacing).collect());

    let last = *timestamps.last().expect("at least one segment");
    let mut failure_time = entry.failure_time;
    if failure_time < last {
        warn!(
            "experiment {}: last observation at {last} s is past the listed failure time {failure_time} s",
            entry.id
        );
        failure_time = last;
    }
    let segments = parsed.into_iter().map(|s| s.data).collect();
    Experiment::new(&entry.id, entry.condition.to_string(), timestamps, segments, failure_time, None)
}

/// Loads every experiment of the split: `(train, test)`, in split order.
pub fn load_femto(root: &Path, split: &SplitTable, opts: &FemtoOptions) -> Result<(Vec<Experiment>, Vec<Experiment>)> {
    if !(opts.spacing.is_finite() && opts.spacing > 0.0) {
        return Err(Error::Config(format!("segment spacing must be positive, got {}", opts.spacing)));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for entry in split.entries() {
        let exp = load_experiment(root, entry, opts)?;
        match entry.set {
            Set::Train => train.push(exp),
            Set::Test => test.push(exp),
        }
    }
    Ok((train, test))
}

/// Loads the split into the common dataset representation.
pub fn ingest(root: &Path, split: &SplitTable, opts: &FemtoOptions) -> Result<Dataset> {
    let (train, test) = load_femto(root, split, opts)?;
    Ok(Dataset {
        kind: "femto".into(),
        time_scale: FEMTO_TIME_SCALE,
        train,
        test,
    })
}
