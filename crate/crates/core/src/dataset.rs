//! Minute-cadence ingestion, gap repair, target derivation, chronological
//! splitting and leakage-free min-max scaling.
//!
//! # CSV layout
//!
//! Input files carry a header row. The first column is an ISO-8601 UTC
//! timestamp on a whole minute; the remaining columns are the ten channels
//! named in the [`Schema`], in any order. Empty cells, `NaN`, and any of a
//! channel's declared sentinel values mark a gap.
//!
//! Consecutive rows more than one minute apart start a new contiguous
//! segment; missing minutes are never synthesized.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::physics::{clock_angle, newell_coupling, CompositeLossConfig, OutputUnits, TargetLayout, N_TARGETS};

/// Number of input channels.
pub const N_CHANNELS: usize = 10;

/// The ten measured channels, in feature-column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "B_N")]
    BN,
    #[serde(rename = "B_E")]
    BE,
    #[serde(rename = "Bz_geo")]
    BzGeo,
    #[serde(rename = "Bx_imf")]
    BxImf,
    #[serde(rename = "By_imf")]
    ByImf,
    #[serde(rename = "Bz_imf")]
    BzImf,
    T,
    #[serde(rename = "rho")]
    Rho,
    V,
    P,
}

impl Channel {
    pub const ALL: [Channel; N_CHANNELS] = [
        Channel::BN,
        Channel::BE,
        Channel::BzGeo,
        Channel::BxImf,
        Channel::ByImf,
        Channel::BzImf,
        Channel::T,
        Channel::Rho,
        Channel::V,
        Channel::P,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::BN => "B_N",
            Channel::BE => "B_E",
            Channel::BzGeo => "Bz_geo",
            Channel::BxImf => "Bx_imf",
            Channel::ByImf => "By_imf",
            Channel::BzImf => "Bz_imf",
            Channel::T => "T",
            Channel::Rho => "rho",
            Channel::V => "V",
            Channel::P => "P",
        }
    }

    pub fn index(self) -> usize {
        Channel::ALL.iter().position(|&c| c == self).expect("roster member")
    }

    pub fn from_name(name: &str) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn default_unit(self) -> &'static str {
        match self {
            Channel::T => "K",
            Channel::Rho => "cm^-3",
            Channel::V => "km/s",
            Channel::P => "nPa",
            _ => "nT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: Channel,
    /// CSV header; defaults to the channel name.
    #[serde(default)]
    pub column: Option<String>,
    #[serde(default)]
    pub unit: Option<String>,
    /// Fill values that mark a missing cell.
    #[serde(default)]
    pub sentinels: Vec<f64>,
}

impl ChannelSpec {
    pub fn column(&self) -> &str {
        self.column.as_deref().unwrap_or(self.name.name())
    }
}

/// Versioned description of an input CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub version: u32,
    #[serde(default = "default_timestamp_column")]
    pub timestamp_column: String,
    pub channels: Vec<ChannelSpec>,
}

fn default_timestamp_column() -> String {
    "timestamp".to_string()
}

impl Default for Schema {
    /// OMNI-style fill values on every channel.
    fn default() -> Self {
        let channels = Channel::ALL
            .iter()
            .map(|&c| ChannelSpec {
                name: c,
                column: None,
                unit: Some(c.default_unit().to_string()),
                sentinels: match c {
                    Channel::T => vec![9_999_999.0],
                    Channel::V => vec![99_999.9, 999_999.0],
                    _ => vec![9_999.99, 99_999.9, 999_999.0],
                },
            })
            .collect();
        Self {
            version: Self::VERSION,
            timestamp_column: default_timestamp_column(),
            channels,
        }
    }
}

impl Schema {
    pub const VERSION: u32 = 1;

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Schema = toml::from_str(text).map_err(|e| Error::Config(format!("schema: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != Self::VERSION {
            return Err(Error::Config(format!(
                "unsupported schema version {} (expected {})",
                self.version,
                Self::VERSION
            )));
        }
        for c in Channel::ALL {
            let n = self.channels.iter().filter(|s| s.name == c).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "schema must declare channel {} exactly once (found {n})",
                    c.name()
                )));
            }
        }
        Ok(())
    }

    fn spec(&self, c: Channel) -> &ChannelSpec {
        self.channels.iter().find(|s| s.name == c).expect("validated")
    }
}

/// Timestamped ten-channel record. Gap cells hold `NaN` and are flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    /// Minutes since the Unix epoch, strictly increasing.
    pub timestamps: Vec<i64>,
    /// One column per [`Channel::ALL`] entry.
    pub values: Vec<Vec<f64>>,
    pub gaps: Vec<Vec<bool>>,
}

impl RawSeries {
    pub fn new(timestamps: Vec<i64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != N_CHANNELS {
            return Err(Error::shape("RawSeries channels", N_CHANNELS, values.len()));
        }
        for v in &values {
            if v.len() != timestamps.len() {
                return Err(Error::shape("RawSeries column", timestamps.len(), v.len()));
            }
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Dataset("timestamps must strictly increase".into()));
        }
        let gaps = values
            .iter()
            .map(|col| col.iter().map(|v| !v.is_finite()).collect())
            .collect();
        Ok(Self {
            timestamps,
            values,
            gaps,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channel(&self, c: Channel) -> &[f64] {
        &self.values[c.index()]
    }

    pub fn gap_count(&self) -> usize {
        self.gaps.iter().flatten().filter(|&&g| g).count()
    }

    /// Marks a cell as missing.
    pub fn set_gap(&mut self, c: Channel, row: usize) {
        self.values[c.index()][row] = f64::NAN;
        self.gaps[c.index()][row] = true;
    }
}

/// Formats minutes since the epoch as `YYYY-MM-DDTHH:MM:SSZ`.
pub fn format_timestamp(minutes: i64) -> String {
    DateTime::<Utc>::from_timestamp(minutes * 60, 0)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| minutes.to_string())
}

fn parse_timestamp(s: &str) -> std::result::Result<i64, String> {
    let s = s.trim();
    let dt: NaiveDateTime = if let Ok(d) = DateTime::parse_from_rfc3339(s) {
        d.with_timezone(&Utc).naive_utc()
    } else {
        let trimmed = s.trim_end_matches('Z');
        ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(trimmed, f).ok())
            .ok_or_else(|| format!("unparseable timestamp {s:?}"))?
    };
    if dt.second() != 0 || dt.nanosecond() != 0 {
        return Err(format!("cadence violation: timestamp {s:?} is not on a whole minute"));
    }
    Ok(dt.and_utc().timestamp().div_euclid(60))
}

/// Parses a CSV file according to `schema`.
pub fn ingest_csv(path: &Path, schema: &Schema) -> Result<RawSeries> {
    schema.validate()?;
    let data_err = |line: usize, message: String| Error::Data {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some(schema.timestamp_column.as_str()) {
        return Err(data_err(
            1,
            format!(
                "first column must be {:?}, found {:?}",
                schema.timestamp_column,
                headers.get(0).unwrap_or("")
            ),
        ));
    }
    // Column position -> channel.
    let mut col_channel = Vec::new();
    for (pos, h) in headers.iter().enumerate().skip(1) {
        let ch = schema
            .channels
            .iter()
            .find(|s| s.column() == h)
            .ok_or_else(|| data_err(1, format!("unknown column {h:?}")))?;
        if col_channel.iter().any(|&(_, c)| c == ch.name) {
            return Err(data_err(1, format!("duplicate column {h:?}")));
        }
        col_channel.push((pos, ch.name));
    }
    for c in Channel::ALL {
        if !col_channel.iter().any(|&(_, cc)| cc == c) {
            return Err(data_err(1, format!("missing column for channel {}", c.name())));
        }
    }

    let mut timestamps = Vec::new();
    let mut values = vec![Vec::new(); N_CHANNELS];
    let mut gaps = vec![Vec::new(); N_CHANNELS];
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| data_err(line, e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(data_err(
                line,
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        let ts = parse_timestamp(&rec[0]).map_err(|m| data_err(line, m))?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(data_err(
                    line,
                    format!("timestamp {} does not increase (duplicate or out of order)", &rec[0]),
                ));
            }
        }
        timestamps.push(ts);
        for &(pos, ch) in &col_channel {
            let cell = &rec[pos];
            let spec = schema.spec(ch);
            let parsed = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                None
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| data_err(line, format!("malformed value {cell:?} in column {}", spec.column())))?;
                if spec.sentinels.iter().any(|&s| s == v) || !v.is_finite() {
                    None
                } else {
                    Some(v)
                }
            };
            let k = ch.index();
            values[k].push(parsed.unwrap_or(f64::NAN));
            gaps[k].push(parsed.is_none());
        }
    }
    Ok(RawSeries {
        timestamps,
        values,
        gaps,
    })
}

/// Writes `series` in the layout [`ingest_csv`] reads. Gaps are written as
/// the channel's first sentinel, or left empty when it has none.
pub fn write_csv(series: &RawSeries, path: &Path, schema: &Schema) -> Result<()> {
    schema.validate()?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![schema.timestamp_column.clone()];
    header.extend(Channel::ALL.iter().map(|&c| schema.spec(c).column().to_string()));
    w.write_record(&header)?;
    for r in 0..series.len() {
        let mut rec = vec![format_timestamp(series.timestamps[r])];
        for c in Channel::ALL {
            let k = c.index();
            if series.gaps[k][r] {
                rec.push(schema.spec(c).sentinels.first().map(|s| s.to_string()).unwrap_or_default());
            } else {
                rec.push(format!("{}", series.values[k][r]));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub rows: usize,
    pub gap_cells: usize,
    pub per_channel: Vec<(String, f64)>,
    /// Gap cells over all cells.
    pub fraction: f64,
    pub trimmed_rows: usize,
}

/// Linear interpolation in time across every interior gap. Rows before the
/// first (after the last) fully observed position of any channel are
/// trimmed. Statistics describe the input series.
pub fn interpolate_gaps(series: &RawSeries) -> Result<(RawSeries, GapReport)> {
    let rows = series.len();
    let gap_cells = series.gap_count();
    let per_channel = Channel::ALL
        .iter()
        .map(|&c| {
            let n = series.gaps[c.index()].iter().filter(|&&g| g).count();
            (c.name().to_string(), if rows == 0 { 0.0 } else { n as f64 / rows as f64 })
        })
        .collect();
    let mut start = 0;
    let mut end = rows;
    for c in Channel::ALL {
        let g = &series.gaps[c.index()];
        let first = g.iter().position(|&x| !x);
        let last = g.iter().rposition(|&x| !x);
        match (first, last) {
            (Some(f), Some(l)) => {
                start = start.max(f);
                end = end.min(l + 1);
            }
            _ => {
                return Err(Error::Dataset(format!("channel {} is entirely missing", c.name())));
            }
        }
    }
    if start >= end {
        return Err(Error::Dataset("no row range where every channel is observed".into()));
    }
    let timestamps = series.timestamps[start..end].to_vec();
    let mut values = Vec::with_capacity(N_CHANNELS);
    for k in 0..N_CHANNELS {
        let src = &series.values[k][start..end];
        let gap = &series.gaps[k][start..end];
        let mut col = src.to_vec();
        let mut prev: Option<usize> = None;
        let mut i = 0;
        while i < col.len() {
            if !gap[i] {
                prev = Some(i);
                i += 1;
                continue;
            }
            let next = (i..col.len()).find(|&j| !gap[j]).expect("trimmed to present end");
            let p = prev.expect("trimmed to present start");
            let (t0, t1) = (timestamps[p] as f64, timestamps[next] as f64);
            let (v0, v1) = (col[p], col[next]);
            for j in i..next {
                let frac = (timestamps[j] as f64 - t0) / (t1 - t0);
                col[j] = v0 + frac * (v1 - v0);
            }
            i = next;
        }
        values.push(col);
    }
    let n = timestamps.len();
    let report = GapReport {
        rows,
        gap_cells,
        per_channel,
        fraction: if rows == 0 { 0.0 } else { gap_cells as f64 / (rows * N_CHANNELS) as f64 },
        trimmed_rows: rows - n,
    };
    Ok((
        RawSeries {
            timestamps,
            values,
            gaps: vec![vec![false; n]; N_CHANNELS],
        },
        report,
    ))
}

/// Normalized or physical supervised rows.
///
/// Row `i` holds features at minute `t` and targets at `t + 1`;
/// `timestamps[i]` is the target minute. `segment_starts` lists the row
/// indices that begin a contiguous run (always including 0 when nonempty).
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedSet {
    pub x: Matrix,
    pub y: Matrix,
    pub timestamps: Vec<i64>,
    pub segment_starts: Vec<usize>,
    pub layout: TargetLayout,
}

impl SupervisedSet {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Contiguous row ranges.
    pub fn segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.segment_starts.len());
        for (i, &s) in self.segment_starts.iter().enumerate() {
            let e = self.segment_starts.get(i + 1).copied().unwrap_or(self.len());
            if e > s {
                out.push(s..e);
            }
        }
        out
    }

    /// Rows in `range`, with segment boundaries re-based.
    pub fn slice(&self, range: Range<usize>) -> SupervisedSet {
        let mut starts = vec![0];
        starts.extend(
            self.segment_starts
                .iter()
                .filter(|&&s| s > range.start && s < range.end)
                .map(|&s| s - range.start),
        );
        if range.is_empty() {
            starts.clear();
        }
        SupervisedSet {
            x: self.x.slice_rows(range.clone()),
            y: self.y.slice_rows(range.clone()),
            timestamps: self.timestamps[range].to_vec(),
            segment_starts: starts,
            layout: self.layout,
        }
    }

    /// Final `n` rows (or all of them).
    pub fn tail(&self, n: usize) -> SupervisedSet {
        let start = self.len().saturating_sub(n);
        self.slice(start..self.len())
    }

    /// Writes `features.csv`, `targets.csv` and `segments.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let fpath = dir.join("features.csv");
        let tpath = dir.join("targets.csv");
        let spath = dir.join("segments.txt");
        let write = |path: &Path, m: &Matrix, names: &[&str]| -> Result<()> {
            let mut w = csv::Writer::from_path(path)?;
            let mut header = vec!["timestamp".to_string()];
            header.extend(names.iter().map(|s| s.to_string()));
            w.write_record(&header)?;
            for r in 0..m.rows() {
                let mut rec = vec![format_timestamp(self.timestamps[r])];
                rec.extend(m.row(r).iter().map(|v| format!("{v}")));
                w.write_record(&rec)?;
            }
            w.flush()?;
            Ok(())
        };
        let fnames: Vec<&str> = Channel::ALL.iter().map(|c| c.name()).collect();
        write(&fpath, &self.x, &fnames)?;
        write(&tpath, &self.y, &self.layout.column_names())?;
        let mut f = fs::File::create(&spath)?;
        for s in &self.segment_starts {
            writeln!(f, "{s}")?;
        }
        Ok(vec![fpath, tpath, spath])
    }

    /// Reads a set written by [`SupervisedSet::save`] with the default layout.
    pub fn load(dir: &Path) -> Result<SupervisedSet> {
        let read = |path: &Path, cols: usize| -> Result<(Vec<i64>, Matrix)> {
            let mut r = csv::Reader::from_path(path)?;
            let mut ts = Vec::new();
            let mut data = Vec::new();
            for (i, rec) in r.records().enumerate() {
                let rec = rec?;
                let bad = |m: String| Error::Data {
                    path: path.to_path_buf(),
                    line: i + 2,
                    message: m,
                };
                if rec.len() != cols + 1 {
                    return Err(bad(format!("expected {} fields", cols + 1)));
                }
                ts.push(parse_timestamp(&rec[0]).map_err(bad)?);
                for cell in rec.iter().skip(1) {
                    data.push(cell.parse::<f64>().map_err(|_| bad(format!("malformed value {cell:?}")))?);
                }
            }
            let rows = ts.len();
            Ok((ts, Matrix::from_vec(rows, cols, data)?))
        };
        let (ts, x) = read(&dir.join("features.csv"), N_CHANNELS)?;
        let (ts2, y) = read(&dir.join("targets.csv"), N_TARGETS)?;
        if ts != ts2 {
            return Err(Error::Dataset("feature and target timestamps differ".into()));
        }
        let segment_starts = fs::read_to_string(dir.join("segments.txt"))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<usize>().map_err(|e| Error::Dataset(format!("segments.txt: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(SupervisedSet {
            x,
            y,
            timestamps: ts,
            segment_starts,
            layout: TargetLayout::default(),
        })
    }
}

/// Builds one-step-ahead supervised rows from a gap-free series.
///
/// For consecutive minutes `t, t+1` inside a contiguous segment the targets
/// at `t+1` are the forward-difference horizontal rate
/// `sqrt(ΔB_N² + ΔB_E²)` (nT/min), `B_N`, `B_E`, the Newell coupling, `V`,
/// IMF `B_Z` and the clock angle. Features are the ten channels at `t`.
pub fn derive_targets(series: &RawSeries) -> Result<SupervisedSet> {
    if series.gap_count() > 0 {
        return Err(Error::Dataset("series still has gaps; interpolate first".into()));
    }
    let layout = TargetLayout::default();
    let n = series.len();
    let mut runs: Vec<Range<usize>> = Vec::new();
    let mut s = 0;
    for i in 1..=n {
        if i == n || series.timestamps[i] - series.timestamps[i - 1] != 1 {
            runs.push(s..i);
            s = i;
        }
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut timestamps = Vec::new();
    let mut segment_starts = Vec::new();
    let col = |c: Channel| series.channel(c);
    for run in runs {
        if run.len() < 2 {
            return Err(Error::Dataset(format!(
                "segment at {} is shorter than 2 minutes",
                format_timestamp(series.timestamps[run.start])
            )));
        }
        segment_starts.push(timestamps.len());
        for t in run.start..run.end - 1 {
            let u = t + 1;
            for c in Channel::ALL {
                x.push(col(c)[t]);
            }
            let dbn = col(Channel::BN)[u] - col(Channel::BN)[t];
            let dbe = col(Channel::BE)[u] - col(Channel::BE)[t];
            let theta = clock_angle(col(Channel::ByImf)[u], col(Channel::BzImf)[u]);
            let v = col(Channel::V)[u];
            let bz = col(Channel::BzImf)[u];
            let mut row = [0.0; N_TARGETS];
            row[layout.dbh_dt] = (dbn * dbn + dbe * dbe).sqrt();
            row[layout.b_n] = col(Channel::BN)[u];
            row[layout.b_e] = col(Channel::BE)[u];
            row[layout.dphi_dt] = newell_coupling(v, bz, theta)?;
            row[layout.v] = v;
            row[layout.bz_imf] = bz;
            row[layout.theta] = theta;
            y.extend_from_slice(&row);
            timestamps.push(series.timestamps[u]);
        }
    }
    let rows = timestamps.len();
    Ok(SupervisedSet {
        x: Matrix::from_vec(rows, N_CHANNELS, x)?,
        y: Matrix::from_vec(rows, N_TARGETS, y)?,
        timestamps,
        segment_starts,
        layout,
    })
}

/// Chronological train / validation / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Share of all rows used for training (including validation).
    pub train_fraction: f64,
    /// Share of the training rows held out for validation, taken from its end.
    pub validation_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            validation_fraction: 0.2,
        }
    }
}

/// Splits rows in time order into train, validation and test parts.
pub fn split(set: &SupervisedSet, spec: &SplitSpec) -> Result<(SupervisedSet, SupervisedSet, SupervisedSet)> {
    for f in [spec.train_fraction, spec.validation_fraction] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("split fractions must lie in (0, 1), got {f}")));
        }
    }
    let n = set.len();
    if n < 10 {
        return Err(Error::Dataset(format!("need at least 10 rows to split, got {n}")));
    }
    let n_fit = (spec.train_fraction * n as f64).round() as usize;
    let n_val = (spec.validation_fraction * n_fit as f64).round() as usize;
    let n_train = n_fit - n_val;
    if n_train == 0 || n_val == 0 || n_fit == n {
        return Err(Error::Dataset(format!("{n} rows leave an empty split part")));
    }
    Ok((
        set.slice(0..n_train),
        set.slice(n_train..n_fit),
        set.slice(n_fit..n),
    ))
}

/// Per-column min-max scaling fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(rows: &Matrix) -> Result<Self> {
        if rows.rows() == 0 {
            return Err(Error::Dataset("cannot fit a scaler on zero rows".into()));
        }
        let mut min = vec![f64::INFINITY; rows.cols()];
        let mut max = vec![f64::NEG_INFINITY; rows.cols()];
        for r in 0..rows.rows() {
            for (c, &v) in rows.row(r).iter().enumerate() {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn width(&self) -> usize {
        self.min.len()
    }

    pub fn range(&self, c: usize) -> f64 {
        self.max[c] - self.min[c]
    }

    /// `(x - min) / (max - min)`; constant columns map to 0.
    pub fn transform(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.width() {
            return Err(Error::shape("MinMaxScaler::transform", self.width(), m.cols()));
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                let range = self.range(c);
                *v = if range > 0.0 { (*v - self.min[c]) / range } else { 0.0 };
            }
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.width() {
            return Err(Error::shape("MinMaxScaler::inverse_transform", self.width(), m.cols()));
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = self.min[c] + *v * self.range(c);
            }
        }
        Ok(out)
    }

    /// Affine map from scaled outputs back to physical units.
    pub fn output_units(&self) -> OutputUnits {
        OutputUnits {
            offset: self.min.clone(),
            scale: (0..self.width()).map(|c| self.range(c)).collect(),
        }
    }
}

/// Split and normalized data ready for training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: SupervisedSet,
    pub val: SupervisedSet,
    pub test: SupervisedSet,
    pub feature_scaler: MinMaxScaler,
    pub target_scaler: MinMaxScaler,
}

impl PreparedData {
    /// Splits `set` and scales every part with bounds fitted on the
    /// training part only.
    pub fn new(set: &SupervisedSet, spec: &SplitSpec) -> Result<Self> {
        let (train, val, test) = split(set, spec)?;
        let feature_scaler = MinMaxScaler::fit(&train.x)?;
        let target_scaler = MinMaxScaler::fit(&train.y)?;
        let scale = |s: SupervisedSet| -> Result<SupervisedSet> {
            Ok(SupervisedSet {
                x: feature_scaler.transform(&s.x)?,
                y: target_scaler.transform(&s.y)?,
                ..s
            })
        };
        Ok(Self {
            train: scale(train)?,
            val: scale(val)?,
            test: scale(test)?,
            feature_scaler: feature_scaler.clone(),
            target_scaler: target_scaler.clone(),
        })
    }

    pub fn layout(&self) -> TargetLayout {
        self.train.layout
    }

    /// Composite loss wired to this data's target scaling.
    pub fn loss_config(&self, lambda: f64) -> CompositeLossConfig {
        loss_config_for(&self.target_scaler, self.layout(), lambda)
    }
}

/// Loss configuration whose residuals are evaluated in physical units and
/// normalized by the training ranges of `dB_H/dt` (squared) and `dΦ/dt`.
pub fn loss_config_for(target_scaler: &MinMaxScaler, layout: TargetLayout, lambda: f64) -> CompositeLossConfig {
    let inv = |r: f64| if r > 0.0 { 1.0 / r } else { 1.0 };
    let dbh = target_scaler.range(layout.dbh_dt);
    let dphi = target_scaler.range(layout.dphi_dt);
    CompositeLossConfig {
        lambda,
        layout,
        dt_minutes: 1.0,
        units: target_scaler.output_units(),
        r1_scale: inv(dbh * dbh),
        r2_scale: inv(dphi),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header() -> String {
        let mut h = vec!["timestamp".to_string()];
        h.extend(Channel::ALL.iter().map(|c| c.name().to_string()));
        h.join(",")
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const ROW: &str = "10,20,30,1,2,-3,100000,5,400,2";

    #[test]
    fn ingest_well_formed() {
        let text = format!(
            "{}\n2015-03-17T04:00:00Z,{ROW}\n2015-03-17T04:01:00Z,{ROW}\n2015-03-17T04:02:00Z,{ROW}\n",
            header()
        );
        let f = write_tmp(&text);
        let s = ingest_csv(f.path(), &Schema::default()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.gap_count(), 0);
        assert_eq!(s.timestamps[1] - s.timestamps[0], 1);
        assert_eq!(s.channel(Channel::V), &[400.0, 400.0, 400.0]);
    }

    #[test]
    fn ingest_sentinel_sets_gap() {
        let bad = "10,20,30,1,2,-3,100000,5,999999,2";
        let text = format!("{}\n2015-03-17T04:00:00Z,{ROW}\n2015-03-17T04:01:00Z,{bad}\n", header());
        let s = ingest_csv(write_tmp(&text).path(), &Schema::default()).unwrap();
        assert!(s.gaps[Channel::V.index()][1]);
        assert!(!s.gaps[Channel::V.index()][0]);
        assert_eq!(s.gap_count(), 1);
    }

    #[test]
    fn ingest_duplicate_timestamp_names_line() {
        let text = format!("{}\n2015-03-17T04:00:00Z,{ROW}\n2015-03-17T04:00:00Z,{ROW}\n", header());
        let err = ingest_csv(write_tmp(&text).path(), &Schema::default()).unwrap_err();
        match err {
            Error::Data { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn ingest_rejects_malformed_unknown_and_off_minute() {
        let text = format!("{}\n2015-03-17T04:00:00Z,{}\n", header(), "x,20,30,1,2,-3,100000,5,400,2");
        assert!(matches!(
            ingest_csv(write_tmp(&text).path(), &Schema::default()),
            Err(Error::Data { line: 2, .. })
        ));
        let text = format!("{},extra\n2015-03-17T04:00:00Z,{ROW},1\n", header());
        assert!(ingest_csv(write_tmp(&text).path(), &Schema::default()).is_err());
        let text = format!("{}\n2015-03-17T04:00:30Z,{ROW}\n", header());
        let err = ingest_csv(write_tmp(&text).path(), &Schema::default()).unwrap_err();
        assert!(err.to_string().contains("cadence"));
    }

    #[test]
    fn schema_roundtrip_and_validation() {
        let s = Schema::default();
        let back = Schema::from_toml(&s.to_toml()).unwrap();
        assert_eq!(s, back);
        let mut bad = s.clone();
        bad.channels.pop();
        assert!(bad.validate().is_err());
        assert!(Schema::from_toml("version = 1\nbogus = 2\nchannels = []").is_err());
    }

    fn series_with(col: Vec<f64>) -> RawSeries {
        let n = col.len();
        let mut values = vec![vec![1.0; n]; N_CHANNELS];
        values[0] = col;
        RawSeries::new((0..n as i64).collect(), values).unwrap()
    }

    #[test]
    fn interpolation_fixture() {
        let s = series_with(vec![10.0, f64::NAN, f64::NAN, 16.0]);
        let (out, report) = interpolate_gaps(&s).unwrap();
        assert_eq!(out.values[0], vec![10.0, 12.0, 14.0, 16.0]);
        assert_eq!(report.gap_cells, 2);
        assert_eq!(out.gap_count(), 0);
    }

    #[test]
    fn interpolation_noop_and_trim() {
        let s = series_with(vec![1.0, 2.0, 3.0]);
        assert_eq!(interpolate_gaps(&s).unwrap().0, s);
        let s = series_with(vec![f64::NAN, 2.0, 3.0, f64::NAN]);
        let (out, r) = interpolate_gaps(&s).unwrap();
        assert_eq!(out.values[0], vec![2.0, 3.0]);
        assert_eq!(r.trimmed_rows, 2);
        let s = series_with(vec![f64::NAN; 3]);
        assert!(interpolate_gaps(&s).is_err());
    }

    #[test]
    fn gap_fraction_of_constructed_fixture() {
        // 100 rows x 10 channels, 80 gap cells placed at interior rows.
        let n = 100;
        let mut values = vec![(0..n).map(|i| i as f64).collect::<Vec<_>>(); N_CHANNELS];
        let mut count = 0;
        for (k, col) in values.iter_mut().enumerate() {
            for i in (1 + k % 3..n - 1).step_by(12).take(8) {
                col[i] = f64::NAN;
                count += 1;
            }
        }
        assert_eq!(count, 80);
        let s = RawSeries::new((0..n as i64).collect(), values).unwrap();
        let (_, r) = interpolate_gaps(&s).unwrap();
        assert_eq!(r.gap_cells, 80);
        assert_eq!(r.fraction, 0.08);
    }

    #[test]
    fn derive_pythagorean_rate() {
        let mut values = vec![vec![1.0; 2]; N_CHANNELS];
        values[Channel::BN.index()] = vec![10.0, 13.0];
        values[Channel::BE.index()] = vec![20.0, 16.0];
        values[Channel::V.index()] = vec![400.0, 400.0];
        let s = RawSeries::new(vec![0, 1], values).unwrap();
        let set = derive_targets(&s).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.y[(0, set.layout.dbh_dt)], 5.0);
        assert_eq!(set.y[(0, set.layout.b_n)], 13.0);
        assert_eq!(set.x[(0, Channel::BN.index())], 10.0);
    }

    #[test]
    fn derive_constant_series() {
        let mut values = vec![vec![2.0; 5]; N_CHANNELS];
        values[Channel::V.index()] = vec![450.0; 5];
        values[Channel::BzImf.index()] = vec![-4.0; 5];
        let s = RawSeries::new((0..5).collect(), values).unwrap();
        let set = derive_targets(&s).unwrap();
        let th = clock_angle(2.0, -4.0);
        let phi = newell_coupling(450.0, -4.0, th).unwrap();
        for r in 0..set.len() {
            assert_eq!(set.y[(r, 0)], 0.0);
            assert_eq!(set.y[(r, 3)], phi);
        }
    }

    #[test]
    fn derive_segments_and_short_segment_error() {
        let values = vec![vec![1.0; 5]; N_CHANNELS];
        let s = RawSeries::new(vec![0, 1, 2, 10, 11], values.clone()).unwrap();
        let set = derive_targets(&s).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.segment_starts, vec![0, 2]);
        assert_eq!(set.segments(), vec![0..2, 2..3]);
        let s = RawSeries::new(vec![0, 1, 2, 10, 20], values).unwrap();
        assert!(derive_targets(&s).is_err());
    }

    fn set_of(n: usize) -> SupervisedSet {
        let x = Matrix::from_vec(n, N_CHANNELS, (0..n * N_CHANNELS).map(|v| v as f64).collect()).unwrap();
        let y = Matrix::from_vec(n, N_TARGETS, (0..n * N_TARGETS).map(|v| v as f64).collect()).unwrap();
        SupervisedSet {
            x,
            y,
            timestamps: (0..n as i64).collect(),
            segment_starts: vec![0],
            layout: TargetLayout::default(),
        }
    }

    #[test]
    fn split_sizes_and_order() {
        let set = set_of(100);
        let (a, b, c) = split(&set, &SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (64, 16, 20));
        assert_eq!(a.segments(), vec![0..64]);
        assert_eq!(b.segments(), vec![0..16]);
        assert!(a.timestamps.last() < b.timestamps.first());
        assert!(b.timestamps.last() < c.timestamps.first());
        assert!(split(&set_of(9), &SplitSpec::default()).is_err());
    }

    #[test]
    fn split_preserves_boundaries() {
        let mut set = set_of(100);
        set.segment_starts = vec![0, 30, 70, 90];
        let (a, b, c) = split(&set, &SplitSpec::default()).unwrap();
        assert_eq!(a.segment_starts, vec![0, 30]);
        assert_eq!(b.segment_starts, vec![0, 6]);
        assert_eq!(c.segment_starts, vec![0, 10]);
    }

    #[test]
    fn scaler_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 3.0], vec![10.0, 3.0]]).unwrap();
        let s = MinMaxScaler::fit(&m).unwrap();
        let t = s.transform(&Matrix::from_rows(&[vec![5.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(t.as_slice(), &[0.5, 0.0]);
        let out = s.transform(&Matrix::from_rows(&[vec![20.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(out[(0, 0)], 2.0);
    }

    #[test]
    fn supervised_set_save_load() {
        let mut set = set_of(12);
        set.segment_starts = vec![0, 5];
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        let back = SupervisedSet::load(dir.path()).unwrap();
        assert_eq!(back, set);
    }

    proptest! {
        #[test]
        fn scaler_round_trip(vals in prop::collection::vec(-1e4f64..1e4, 6..40)) {
            let n = vals.len() / 2;
            let m = Matrix::from_vec(n, 2, vals[..2 * n].to_vec()).unwrap();
            let s = MinMaxScaler::fit(&m).unwrap();
            let back = s.inverse_transform(&s.transform(&m).unwrap()).unwrap();
            for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
                let distinct = s.range(0) > 0.0 && s.range(1) > 0.0;
                if distinct {
                    prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                }
            }
        }

        #[test]
        fn interpolation_idempotent(vals in prop::collection::vec(prop::option::weighted(0.7, -50f64..50.0), 3..30)) {
            let mut col: Vec<f64> = vals.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
            col[0] = 1.0;
            let last = col.len() - 1;
            col[last] = 2.0;
            let s = series_with(col);
            let (once, _) = interpolate_gaps(&s).unwrap();
            let (twice, _) = interpolate_gaps(&once).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
