//! Per-update trace CSVs, bound verification over them, and summary tables.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{Flavor, MetricRecord, Guarantee};

pub const TRACE_COLUMNS: [&str; 14] = [
    "step",
    "episode",
    "state",
    "action",
    "reward",
    "td",
    "evb",
    "piv",
    "eiv",
    "rho_max",
    "rho_min",
    "upper_bound",
    "lower_bound",
    "flavor",
];

/// Default absolute tolerance for bound checks.
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

/// One logged update with its context.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub episode: u64,
    /// Tabular state id, or `;`-joined features.
    pub state: String,
    pub action: usize,
    pub reward: f64,
    pub record: MetricRecord<f64>,
}

/// Receives trace rows as a run produces them.
pub trait TraceSink {
    fn push(&mut self, row: &TraceRow) -> Result<()>;
}

/// Discards rows.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl TraceSink for NullSink {
    fn push(&mut self, _row: &TraceRow) -> Result<()> {
        Ok(())
    }
}

impl TraceSink for Vec<TraceRow> {
    fn push(&mut self, row: &TraceRow) -> Result<()> {
        Vec::push(self, row.clone());
        Ok(())
    }
}

pub fn join_features(x: &[f64]) -> String {
    x.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

/// Streams rows to CSV. Floats use the shortest decimal that round-trips.
pub struct TraceWriter<W: Write> {
    out: W,
    line: String,
}

impl TraceWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        TraceWriter::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{}", TRACE_COLUMNS.join(","))?;
        Ok(Self { out, line: String::with_capacity(256) })
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> TraceSink for TraceWriter<W> {
    fn push(&mut self, row: &TraceRow) -> Result<()> {
        use std::fmt::Write as _;
        let r = &row.record;
        self.line.clear();
        // state strings never contain commas or quotes, so no CSV quoting is needed
        let _ = writeln!(
            self.line,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.step,
            row.episode,
            row.state,
            row.action,
            row.reward,
            r.td,
            r.evb,
            r.piv,
            r.eiv,
            r.rho_max,
            r.rho_min,
            r.upper_bound,
            r.lower_bound,
            r.flavor.as_str()
        );
        self.out.write_all(self.line.as_bytes())?;
        Ok(())
    }
}

/// Parses a trace file written by [`TraceWriter`].
pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::new();
    for_each_row(path, |row| {
        rows.push(row);
        Ok(())
    })?;
    Ok(rows)
}

fn for_each_row(path: &Path, mut f: impl FnMut(TraceRow) -> Result<()>) -> Result<()> {
    let malformed = |reason: String| Error::MalformedTrace { path: path.to_path_buf(), reason };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if header.iter().ne(TRACE_COLUMNS.iter().copied()) {
        return Err(malformed(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut record = csv::StringRecord::new();
    let mut line = 1u64;
    while reader.read_record(&mut record).map_err(|e| malformed(e.to_string()))? {
        line += 1;
        if record.len() != TRACE_COLUMNS.len() {
            return Err(malformed(format!("line {line}: expected {} fields, got {}", TRACE_COLUMNS.len(), record.len())));
        }
        let field = |i: usize| &record[i];
        let float = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| malformed(format!("line {line}: bad {} {:?}", TRACE_COLUMNS[i], field(i))))
        };
        let int = |i: usize| -> Result<u64> {
            field(i).parse::<u64>().map_err(|_| malformed(format!("line {line}: bad {} {:?}", TRACE_COLUMNS[i], field(i))))
        };
        let flavor: Flavor = field(13).parse().map_err(|_| malformed(format!("line {line}: bad flavor {:?}", field(13))))?;
        f(TraceRow {
            step: int(0)?,
            episode: int(1)?,
            state: field(2).to_string(),
            action: int(3)? as usize,
            reward: float(4)?,
            record: MetricRecord {
                td: float(5)?,
                evb: float(6)?,
                piv: float(7)?,
                eiv: float(8)?,
                rho_max: float(9)?,
                rho_min: float(10)?,
                upper_bound: float(11)?,
                lower_bound: float(12)?,
                flavor,
            },
        })?;
    }
    Ok(())
}

/// Violation counts per guarantee.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsTally {
    pub tolerance: f64,
    pub records: u64,
    pub violations: [u64; 4],
    /// Largest excess observed per guarantee, including excesses within tolerance.
    pub max_excess: [f64; 4],
    pub nonzero_evb: u64,
}

impl BoundsTally {
    pub fn new(tolerance: f64) -> Self {
        Self { tolerance, records: 0, violations: [0; 4], max_excess: [f64::NEG_INFINITY; 4], nonzero_evb: 0 }
    }

    pub fn observe(&mut self, r: &MetricRecord<f64>) {
        self.records += 1;
        if r.evb != 0.0 {
            self.nonzero_evb += 1;
        }
        for v in r.violations(f64::NEG_INFINITY) {
            let t = guarantee_index(v.guarantee);
            self.max_excess[t] = self.max_excess[t].max(v.excess);
            if v.excess > self.tolerance {
                self.violations[t] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &BoundsTally) {
        self.records += other.records;
        self.nonzero_evb += other.nonzero_evb;
        for t in 0..4 {
            self.violations[t] += other.violations[t];
            self.max_excess[t] = self.max_excess[t].max(other.max_excess[t]);
        }
    }

    pub fn total_violations(&self) -> u64 {
        self.violations.iter().sum()
    }

    pub fn is_clean(&self) -> bool {
        self.total_violations() == 0
    }

    pub fn nonzero_evb_fraction(&self) -> f64 {
        if self.records == 0 {
            0.0
        } else {
            self.nonzero_evb as f64 / self.records as f64
        }
    }
}

fn guarantee_index(t: Guarantee) -> usize {
    Guarantee::ALL.iter().position(|x| *x == t).unwrap_or(0)
}

/// Wraps another sink and tallies every row passing through it.
pub struct CheckedSink<'a> {
    pub inner: &'a mut dyn TraceSink,
    pub tally: BoundsTally,
}

impl<'a> CheckedSink<'a> {
    pub fn new(inner: &'a mut dyn TraceSink, tolerance: f64) -> Self {
        Self { inner, tally: BoundsTally::new(tolerance) }
    }
}

impl TraceSink for CheckedSink<'_> {
    fn push(&mut self, row: &TraceRow) -> Result<()> {
        self.tally.observe(&row.record);
        self.inner.push(row)
    }
}

/// Trace files (`trace*.csv`) under `dir`, sorted, searched recursively.
pub fn find_traces(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if dir.is_file() {
        out.push(dir.to_path_buf());
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("trace") && n.ends_with(".csv")) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsReport {
    pub files: Vec<(PathBuf, BoundsTally)>,
    pub total: BoundsTally,
}

impl BoundsReport {
    pub fn is_clean(&self) -> bool {
        self.total.is_clean()
    }

    pub fn render(&self) -> String {
        let mut s = format!("files {}  records {}  tolerance {:e}\n", self.files.len(), self.total.records, self.total.tolerance);
        for (i, t) in Guarantee::ALL.iter().enumerate() {
            let max = self.total.max_excess[i];
            let max = if max.is_finite() { format!("{max:e}") } else { "-".into() };
            s.push_str(&format!("{:<11} violations {:>8}  max excess {}\n", t.label(), self.total.violations[i], max));
        }
        s
    }
}

/// Re-checks every record in every trace under `dir`.
pub fn verify_bounds(dir: &Path, tolerance: f64) -> Result<BoundsReport> {
    let paths = find_traces(dir)?;
    let mut total = BoundsTally::new(tolerance);
    let mut files = Vec::with_capacity(paths.len());
    for path in paths {
        let mut tally = BoundsTally::new(tolerance);
        for_each_row(&path, |row| {
            tally.observe(&row.record);
            Ok(())
        })?;
        total.merge(&tally);
        files.push((path, tally));
    }
    Ok(BoundsReport { files, total })
}

pub const SCATTER_COLUMNS: [&str; 9] =
    ["file", "flavor", "abs_td", "upper_bound", "lower_bound", "abs_evb", "abs_piv", "abs_eiv", "rho_max"];

/// Writes `summary/scatter.csv` (one row per record) and `summary/bounds.csv`
/// (one row per trace file) under `dir`. Returns the number of scatter rows.
pub fn emit_summary(dir: &Path, tolerance: f64) -> Result<u64> {
    let out_dir = dir.join("summary");
    std::fs::create_dir_all(&out_dir)?;
    let mut scatter = csv::Writer::from_path(out_dir.join("scatter.csv"))?;
    scatter.write_record(SCATTER_COLUMNS)?;
    let mut bounds = csv::Writer::from_path(out_dir.join("bounds.csv"))?;
    let mut head = vec!["file".to_string(), "records".into(), "nonzero_evb_fraction".into()];
    head.extend(Guarantee::ALL.iter().map(|t| format!("{}_violations", t.label())));
    bounds.write_record(&head)?;
    let mut rows = 0u64;
    for path in find_traces(dir)? {
        let name = path.strip_prefix(dir).unwrap_or(&path).display().to_string();
        let mut tally = BoundsTally::new(tolerance);
        for_each_row(&path, |row| {
            let r = &row.record;
            tally.observe(r);
            rows += 1;
            scatter.write_record([
                name.clone(),
                r.flavor.as_str().to_string(),
                r.td.abs().to_string(),
                r.upper_bound.to_string(),
                r.lower_bound.to_string(),
                r.evb.abs().to_string(),
                r.piv.abs().to_string(),
                r.eiv.abs().to_string(),
                r.rho_max.to_string(),
            ])?;
            Ok(())
        })?;
        let mut line = vec![name, tally.records.to_string(), tally.nonzero_evb_fraction().to_string()];
        line.extend(tally.violations.iter().map(u64::to_string));
        bounds.write_record(&line)?;
    }
    scatter.flush()?;
    bounds.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Temperature;

    fn sample_rows() -> Vec<TraceRow> {
        let beta = Temperature::new(0.7).unwrap();
        vec![
            TraceRow {
                step: 0,
                episode: 0,
                state: "3".into(),
                action: 2,
                reward: -0.004,
                record: MetricRecord::plain(&[0.1, 0.2], &[0.1, 0.9], 1, 0.7, 1.0, Flavor::Plain),
            },
            TraceRow {
                step: 7,
                episode: 1,
                state: join_features(&[0.01, -1.0 / 3.0, 2e-17, 5.0]),
                action: 0,
                reward: 1.0,
                record: MetricRecord::soft(&[0.3, -0.4], &[1.0 / 7.0, -0.4], 0, 1.0 / 7.0 - 0.3, beta, Flavor::FaSoft),
            },
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace_seed0.csv");
        let mut w = TraceWriter::create(&path).unwrap();
        for r in sample_rows() {
            w.push(&r).unwrap();
        }
        w.finish().unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back, sample_rows());
    }

    #[test]
    fn header_only_trace_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        TraceWriter::create(&dir.path().join("trace_a.csv")).unwrap().finish().unwrap();
        let report = verify_bounds(dir.path(), DEFAULT_TOLERANCE).unwrap();
        assert_eq!(report.total.records, 0);
        assert!(report.is_clean());
        assert_eq!(emit_summary(dir.path(), DEFAULT_TOLERANCE).unwrap(), 0);
        let text = std::fs::read_to_string(dir.path().join("summary/scatter.csv")).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn malformed_traces_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace_bad.csv");
        std::fs::write(&p, "step,episode\n1,2\n").unwrap();
        assert!(matches!(verify_bounds(dir.path(), 1e-9), Err(Error::MalformedTrace { .. })));
        let mut text = TRACE_COLUMNS.join(",");
        text.push_str("\n0,0,1,0,0,x,0,0,0,0,0,0,0,plain\n");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(verify_bounds(dir.path(), 1e-9), Err(Error::MalformedTrace { .. })));
    }

    #[test]
    fn planted_fault_is_detected() {
        let mut rows = sample_rows();
        let mut clean = BoundsTally::new(1e-9);
        rows.iter().for_each(|r| clean.observe(&r.record));
        assert!(clean.is_clean());
        rows[0].record.evb *= 10.0;
        let mut bad = BoundsTally::new(1e-9);
        rows.iter().for_each(|r| bad.observe(&r.record));
        assert!(bad.violations[0] >= 1);
    }

    #[test]
    fn violations_non_increasing_in_tolerance() {
        let mut rows = sample_rows();
        rows[1].record.eiv *= 1.5;
        rows[0].record.piv = 0.75;
        let mut last = u64::MAX;
        for tol in [0.0, 1e-9, 1e-3, 0.05, 0.1, 1.0] {
            let mut t = BoundsTally::new(tol);
            rows.iter().for_each(|r| t.observe(&r.record));
            assert!(t.total_violations() <= last);
            last = t.total_violations();
        }
        assert_eq!(last, 0);
    }
}
