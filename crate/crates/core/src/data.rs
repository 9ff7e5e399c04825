//! Block, POI, weather and disaster records: ingestion, aggregation, labels,
//! standardization and class balancing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weeks per period.
pub const DEFAULT_WEEKS: usize = 104;
pub const DAYS_PER_WEEK: usize = 7;

/// Direction of change in commercial land share.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChangeClass {
    Increase,
    NoChange,
    Decrease,
}

impl ChangeClass {
    pub const ALL: [ChangeClass; 3] = [ChangeClass::Increase, ChangeClass::NoChange, ChangeClass::Decrease];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ChangeClass::Increase => "Increase",
            ChangeClass::NoChange => "NoChange",
            ChangeClass::Decrease => "Decrease",
        }
    }
}

impl fmt::Display for ChangeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub epsilon: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5 }
    }
}

/// Class of the change `y_end - y_start` with a symmetric no-change band.
pub fn derive_label(y_start: f64, y_end: f64, config: &LabelConfig) -> ChangeClass {
    let delta = y_end - y_start;
    if delta > config.epsilon {
        ChangeClass::Increase
    } else if delta < -config.epsilon {
        ChangeClass::Decrease
    } else {
        ChangeClass::NoChange
    }
}

/// One block as observed in one period.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockRecord {
    pub block_id: String,
    pub centroid: (f64, f64),
    pub z: Vec<f64>,
    pub y_start: f64,
    pub y_end: f64,
}

impl BlockRecord {
    pub fn delta_y(&self) -> f64 {
        self.y_end - self.y_start
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoiRecord {
    pub poi_id: String,
    pub block: usize,
    pub sector: u16,
    /// Weekly visit counts over the whole record.
    pub visits: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisasterEvent {
    pub event_id: String,
    /// Global week index.
    pub week: usize,
    /// Block index to impact magnitude, ascending by block.
    pub severity_by_block: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodWindow {
    pub start_week: usize,
    pub label: String,
}

/// Daily `[precipitation, wind, pressure]`, `None` where a day is missing.
pub type DailyWeather = Vec<Option<[f64; 3]>>;

/// How gaps in the daily weather record are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingDays {
    #[default]
    Error,
    /// Linear interpolation across gaps of at most this many days.
    Interpolate(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub block_ids: Vec<String>,
    index: HashMap<String, usize>,
    /// `records[period][block]`.
    pub records: Vec<Vec<BlockRecord>>,
    pub pois: Vec<PoiRecord>,
    pois_by_block: Vec<Vec<usize>>,
    /// Daily weather per block over the whole record.
    pub weather: Vec<DailyWeather>,
    pub disasters: Vec<DisasterEvent>,
    pub periods: Vec<PeriodWindow>,
    /// Weeks per period.
    pub t: usize,
    /// Weeks in the whole record.
    pub total_weeks: usize,
}

/// Locations of the four input tables.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPaths {
    pub blocks: PathBuf,
    pub pois: PathBuf,
    pub weather: PathBuf,
    pub disasters: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            blocks: dir.join("blocks.csv"),
            pois: dir.join("pois.csv"),
            weather: dir.join("weather.csv"),
            disasters: dir.join("disasters.csv"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    pub t: usize,
    pub missing_days: MissingDays,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { t: DEFAULT_WEEKS, missing_days: MissingDays::Error }
    }
}

impl Dataset {
    /// Assembles and cross-checks a dataset from in-memory parts.
    ///
    /// `records[p][i]` must describe block `block_ids[i]` in period `p`.
    pub fn new(
        block_ids: Vec<String>,
        records: Vec<Vec<BlockRecord>>,
        pois: Vec<PoiRecord>,
        weather: Vec<DailyWeather>,
        disasters: Vec<DisasterEvent>,
        period_labels: Vec<String>,
        t: usize,
        total_weeks: usize,
    ) -> Result<Self> {
        let n = block_ids.len();
        let mut index = HashMap::with_capacity(n);
        for (i, id) in block_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate block id {id:?}")));
            }
        }
        if t == 0 || total_weeks < t {
            return Err(Error::Data(format!("record of {total_weeks} weeks cannot hold {t}-week periods")));
        }
        if records.len() != period_labels.len() || records.is_empty() {
            return Err(Error::Data("every period needs block records".into()));
        }
        let z_dim = records[0].first().map_or(0, |r| r.z.len());
        for (p, period) in records.iter().enumerate() {
            if period.len() != n {
                return Err(Error::Data(format!(
                    "period {:?} lists {} blocks, expected {n}",
                    period_labels[p],
                    period.len()
                )));
            }
            for (rec, id) in period.iter().zip(&block_ids) {
                if &rec.block_id != id {
                    return Err(Error::Data(format!("period {:?}: record order differs at {id:?}", period_labels[p])));
                }
                if rec.z.len() != z_dim {
                    return Err(Error::Data(format!(
                        "block {id:?}: attribute vector length {} != {z_dim}",
                        rec.z.len()
                    )));
                }
                if rec.centroid != records[0][index[id]].centroid {
                    return Err(Error::Data(format!("block {id:?}: centroid differs between periods")));
                }
            }
        }
        let mut pois_by_block = vec![Vec::new(); n];
        for (k, poi) in pois.iter().enumerate() {
            if poi.block >= n {
                return Err(Error::Data(format!("POI {:?} references block index {}", poi.poi_id, poi.block)));
            }
            if poi.visits.len() != total_weeks {
                return Err(Error::Data(format!(
                    "POI {:?}: {} weekly values, expected {total_weeks}",
                    poi.poi_id,
                    poi.visits.len()
                )));
            }
            pois_by_block[poi.block].push(k);
        }
        if weather.len() != n {
            return Err(Error::Data(format!("weather for {} blocks, expected {n}", weather.len())));
        }
        for e in &disasters {
            if e.week >= total_weeks {
                return Err(Error::Data(format!("event {:?} at week {} is outside the record", e.event_id, e.week)));
            }
        }
        let periods = period_windows(period_labels, t, total_weeks);
        Ok(Self { block_ids, index, records, pois, pois_by_block, weather, disasters, periods, t, total_weeks })
    }

    pub fn n_blocks(&self) -> usize {
        self.block_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn z_dim(&self) -> usize {
        self.records[0].first().map_or(0, |r| r.z.len())
    }

    pub fn block_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn centroids(&self) -> Vec<(f64, f64)> {
        self.records[0].iter().map(|r| r.centroid).collect()
    }

    pub fn pois_of(&self, block: usize) -> impl Iterator<Item = &PoiRecord> {
        self.pois_by_block[block].iter().map(|&k| &self.pois[k])
    }

    pub fn labels(&self, period: usize, config: &LabelConfig) -> Vec<ChangeClass> {
        self.records[period].iter().map(|r| derive_label(r.y_start, r.y_end, config)).collect()
    }

    /// Events inside `period` as `(local week, severity)` per block.
    pub fn block_events(&self, period: usize) -> Vec<Vec<(usize, f64)>> {
        let start = self.periods[period].start_week;
        let mut out = vec![Vec::new(); self.n_blocks()];
        for e in &self.disasters {
            if e.week < start || e.week >= start + self.t {
                continue;
            }
            for (&b, &d) in &e.severity_by_block {
                out[b].push((e.week - start, d));
            }
        }
        for events in &mut out {
            events.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        }
        out
    }
}

/// Equally spaced windows: the first starts at week 0, the last ends at the
/// end of the record.
fn period_windows(labels: Vec<String>, t: usize, total_weeks: usize) -> Vec<PeriodWindow> {
    let p = labels.len();
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let start_week = if p > 1 { i * (total_weeks - t) / (p - 1) } else { 0 };
            PeriodWindow { start_week, label }
        })
        .collect()
}

/// Weekly block visits `v` and active-POI counts `p` for one period.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSeries {
    pub visits: Vec<u64>,
    pub active: Vec<u64>,
}

pub fn aggregate_block_series(dataset: &Dataset, block: &str, period: usize) -> Result<BlockSeries> {
    let b = dataset.block_index(block).ok_or_else(|| Error::Data(format!("unknown block {block:?}")))?;
    let window = period_range(dataset, period)?;
    Ok(series_for(dataset, b, window))
}

pub(crate) fn series_for(dataset: &Dataset, b: usize, window: std::ops::Range<usize>) -> BlockSeries {
    let len = window.len();
    let mut visits = vec![0u64; len];
    let mut active = vec![0u64; len];
    for poi in dataset.pois_of(b) {
        for (t, &x) in poi.visits[window.clone()].iter().enumerate() {
            visits[t] += x;
            active[t] += u64::from(x >= 1);
        }
    }
    BlockSeries { visits, active }
}

pub fn period_range(dataset: &Dataset, period: usize) -> Result<std::ops::Range<usize>> {
    let w = dataset
        .periods
        .get(period)
        .ok_or_else(|| Error::Data(format!("period {period} out of range ({} periods)", dataset.n_periods())))?;
    Ok(w.start_week..w.start_week + dataset.t)
}

/// Weekly `[precipitation sum, wind max, pressure mean]` for the `t` weeks
/// starting at `start_week`.
pub fn weekly_aggregate_weather(
    daily: &[Option<[f64; 3]>],
    start_week: usize,
    t: usize,
    missing: MissingDays,
) -> Result<Vec<[f64; 3]>> {
    let first = start_week * DAYS_PER_WEEK;
    let last = first + t * DAYS_PER_WEEK;
    if daily.len() < last {
        return Err(Error::Data(format!("weather covers {} days, need {last}", daily.len())));
    }
    let days = fill_days(&daily[first..last], first, missing)?;
    Ok(days
        .chunks_exact(DAYS_PER_WEEK)
        .map(|week| {
            let precip = week.iter().map(|d| d[0]).sum();
            let wind = week.iter().map(|d| d[1]).fold(f64::NEG_INFINITY, f64::max);
            let pressure = week.iter().map(|d| d[2]).sum::<f64>() / DAYS_PER_WEEK as f64;
            [precip, wind, pressure]
        })
        .collect())
}

fn fill_days(days: &[Option<[f64; 3]>], offset: usize, missing: MissingDays) -> Result<Vec<[f64; 3]>> {
    let gap_error = |d: usize| Error::Data(format!("weather missing for day {}", offset + d));
    let max_gap = match missing {
        MissingDays::Error => {
            return days.iter().enumerate().map(|(d, x)| x.ok_or_else(|| gap_error(d))).collect();
        }
        MissingDays::Interpolate(max_gap) => max_gap,
    };
    let mut out = Vec::with_capacity(days.len());
    let mut d = 0;
    while d < days.len() {
        if let Some(x) = days[d] {
            out.push(x);
            d += 1;
            continue;
        }
        let gap_end = (d..days.len()).find(|&e| days[e].is_some()).unwrap_or(days.len());
        if d == 0 || gap_end == days.len() || gap_end - d > max_gap {
            return Err(gap_error(d));
        }
        let (a, b) = (days[d - 1].expect("present"), days[gap_end].expect("present"));
        let span = (gap_end - d + 1) as f64;
        for k in d..gap_end {
            let w = (k - d + 1) as f64 / span;
            out.push([0, 1, 2].map(|c| a[c] + w * (b[c] - a[c])));
        }
        d = gap_end;
    }
    Ok(out)
}

/// Per-column z-scores with population standard deviation. Non-finite inputs
/// are ignored when fitting and pass through unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(width: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut count = vec![0usize; width];
        let mut sum = vec![0.0; width];
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for row in &rows {
            for (c, &x) in row.iter().enumerate().take(width) {
                if x.is_finite() {
                    count[c] += 1;
                    sum[c] += x;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect();
        let mut sq = vec![0.0; width];
        for row in &rows {
            for (c, &x) in row.iter().enumerate().take(width) {
                if x.is_finite() {
                    sq[c] += (x - mean[c]).powi(2);
                }
            }
        }
        let sd = sq.iter().zip(&count).map(|(s, &n)| if n > 0 { (s / n as f64).sqrt() } else { 0.0 }).collect();
        Self { mean, sd }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, column: usize, x: f64) -> f64 {
        let sd = self.sd[column];
        if !x.is_finite() {
            x
        } else if sd > 0.0 {
            (x - self.mean[column]) / sd
        } else {
            0.0
        }
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for (c, x) in row.iter_mut().enumerate() {
            *x = self.apply(c, *x);
        }
    }
}

/// Oversamples every class with replacement up to the majority count.
/// `labels` is indexed by sample id; the result is sorted.
pub fn resample_balanced(indices: &[usize], labels: &[ChangeClass], seed: u64) -> Result<Vec<usize>> {
    let mut by_class: [Vec<usize>; 3] = Default::default();
    for &i in indices {
        let class = labels.get(i).ok_or_else(|| Error::Data(format!("sample {i} has no label")))?;
        by_class[class.index()].push(i);
    }
    if let Some(c) = ChangeClass::ALL.iter().find(|c| by_class[c.index()].is_empty()) {
        return Err(Error::Data(format!("class {c} has no samples to resample from")));
    }
    let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * target);
    for members in &by_class {
        out.extend_from_slice(members);
        for _ in members.len()..target {
            out.push(*members.choose(&mut rng).expect("non-empty class"));
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Multiplicity of each sample id `0..n` in a resampled multiset.
pub fn multiplicities(resampled: &[usize], n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for &i in resampled {
        w[i] += 1.0;
    }
    w
}

// ---------------------------------------------------------------------------- loading

pub fn load_dataset(paths: &DatasetPaths, options: &LoadOptions) -> Result<Dataset> {
    let blocks = read_blocks(&paths.blocks)?;
    let (pois, total_weeks) = read_pois(&paths.pois, &blocks.index)?;
    if total_weeks < options.t {
        return Err(Error::Data(format!(
            "{}: {total_weeks} week columns, fewer than the {}-week period",
            paths.pois.display(),
            options.t
        )));
    }
    let weather = read_weather(&paths.weather, &blocks.index, total_weeks * DAYS_PER_WEEK)?;
    let disasters = read_disasters(&paths.disasters, &blocks.index, total_weeks)?;
    let dataset = Dataset::new(
        blocks.ids,
        blocks.records,
        pois,
        weather,
        disasters,
        blocks.period_labels,
        options.t,
        total_weeks,
    )?;
    // surface weather gaps at load time rather than mid-training
    for (b, daily) in dataset.weather.iter().enumerate() {
        for w in &dataset.periods {
            weekly_aggregate_weather(daily, w.start_week, dataset.t, options.missing_days)
                .map_err(|e| Error::Data(format!("block {:?}: {e}", dataset.block_ids[b])))?;
        }
    }
    Ok(dataset)
}

fn open(path: &Path) -> Result<(csv::Reader<std::fs::File>, csv::StringRecord, String)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    let headers = reader.headers().map_err(|e| Error::Data(format!("{name}: {e}")))?.clone();
    Ok((reader, headers, name))
}

/// Column positions looked up by header name.
struct Columns<'a> {
    file: &'a str,
    headers: &'a csv::StringRecord,
}

impl Columns<'_> {
    fn find(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column {name:?}", self.file)))
    }

    /// Columns named `prefix0, prefix1, ...` in index order.
    fn numbered(&self, prefix: &str) -> Result<Vec<usize>> {
        let mut found: Vec<(usize, usize)> = self
            .headers
            .iter()
            .enumerate()
            .filter_map(|(pos, h)| h.trim().strip_prefix(prefix).and_then(|s| s.parse().ok()).map(|k| (k, pos)))
            .collect();
        found.sort_unstable();
        for (expected, &(k, _)) in found.iter().enumerate() {
            if k != expected {
                return Err(Error::Data(format!("{}: column {prefix}{expected} missing", self.file)));
            }
        }
        Ok(found.into_iter().map(|(_, pos)| pos).collect())
    }
}

struct Row<'a> {
    file: &'a str,
    line: u64,
    record: &'a csv::StringRecord,
    headers: &'a csv::StringRecord,
}

impl Row<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::row(self.file, self.line, message)
    }

    fn text(&self, col: usize) -> Result<&str> {
        self.record
            .get(col)
            .map(str::trim)
            .ok_or_else(|| self.err(format!("missing value for column {:?}", &self.headers[col])))
    }

    fn float(&self, col: usize) -> Result<f64> {
        let raw = self.text(col)?;
        let x: f64 =
            raw.parse().map_err(|_| self.err(format!("column {:?}: {raw:?} is not a number", &self.headers[col])))?;
        if !x.is_finite() {
            return Err(self.err(format!("column {:?}: non-finite value {raw:?}", &self.headers[col])));
        }
        Ok(x)
    }

    fn int<T: std::str::FromStr>(&self, col: usize) -> Result<T> {
        let raw = self.text(col)?;
        raw.parse()
            .map_err(|_| self.err(format!("column {:?}: {raw:?} is not a non-negative integer", &self.headers[col])))
    }

    fn block(&self, col: usize, index: &HashMap<String, usize>) -> Result<usize> {
        let id = self.text(col)?;
        index.get(id).copied().ok_or_else(|| self.err(format!("unknown block_id {id:?}")))
    }
}

fn rows<'a>(
    reader: &'a mut csv::Reader<std::fs::File>,
    file: &'a str,
) -> impl Iterator<Item = Result<(u64, csv::StringRecord)>> + 'a {
    reader.records().map(move |r| {
        let record = r.map_err(|e| Error::Data(format!("{file}: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        Ok((line, record))
    })
}

struct BlockTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    records: Vec<Vec<BlockRecord>>,
    period_labels: Vec<String>,
}

fn read_blocks(path: &Path) -> Result<BlockTable> {
    let (mut reader, headers, file) = open(path)?;
    let cols = Columns { file: &file, headers: &headers };
    let (c_id, c_x, c_y) = (cols.find("block_id")?, cols.find("cx")?, cols.find("cy")?);
    let (c_period, c_start, c_end) = (cols.find("period_id")?, cols.find("y_start")?, cols.find("y_end")?);
    let c_z = cols.numbered("z_")?;

    let mut ids = Vec::new();
    let mut index = HashMap::new();
    let mut period_labels: Vec<String> = Vec::new();
    let mut by_period: Vec<HashMap<usize, BlockRecord>> = Vec::new();
    for item in rows(&mut reader, &file) {
        let (line, record) = item?;
        let row = Row { file: &file, line, record: &record, headers: &headers };
        if record.len() != headers.len() {
            return Err(row.err(format!("{} fields, header has {}", record.len(), headers.len())));
        }
        let id = row.text(c_id)?.to_string();
        if id.is_empty() {
            return Err(row.err("empty block_id"));
        }
        let centroid = (row.float(c_x)?, row.float(c_y)?);
        let z = c_z.iter().map(|&c| row.float(c)).collect::<Result<Vec<_>>>()?;
        let mut y = [row.float(c_start)?, row.float(c_end)?];
        for v in &mut y {
            if !(0.0..=1.0).contains(v) {
                log::warn!("{file}, row {line}: share {v} clamped to [0, 1]");
                *v = v.clamp(0.0, 1.0);
            }
        }
        let label = row.text(c_period)?.to_string();
        let p = match period_labels.iter().position(|l| *l == label) {
            Some(p) => p,
            None => {
                period_labels.push(label);
                by_period.push(HashMap::new());
                period_labels.len() - 1
            }
        };
        let b = *index.entry(id.clone()).or_insert_with(|| {
            ids.push(id.clone());
            ids.len() - 1
        });
        let rec = BlockRecord { block_id: id.clone(), centroid, z, y_start: y[0], y_end: y[1] };
        if by_period[p].insert(b, rec).is_some() {
            return Err(row.err(format!("block {id:?} listed twice for period {:?}", period_labels[p])));
        }
    }
    if ids.is_empty() {
        return Err(Error::Data(format!("{file}: no blocks")));
    }
    let mut records = Vec::with_capacity(by_period.len());
    for (p, mut map) in by_period.into_iter().enumerate() {
        let mut period = Vec::with_capacity(ids.len());
        for (b, id) in ids.iter().enumerate() {
            let rec = map.remove(&b).ok_or_else(|| {
                Error::Data(format!("{file}: block {id:?} has no row for period {:?}", period_labels[p]))
            })?;
            period.push(rec);
        }
        records.push(period);
    }
    Ok(BlockTable { ids, index, records, period_labels })
}

fn read_pois(path: &Path, index: &HashMap<String, usize>) -> Result<(Vec<PoiRecord>, usize)> {
    let (mut reader, headers, file) = open(path)?;
    let cols = Columns { file: &file, headers: &headers };
    let (c_id, c_block, c_sector) = (cols.find("poi_id")?, cols.find("block_id")?, cols.find("naics3")?);
    let c_weeks = cols.numbered("w")?;
    let weeks = c_weeks.len();
    let expected_fields = 3 + weeks;
    let mut pois = Vec::new();
    for item in rows(&mut reader, &file) {
        let (line, record) = item?;
        let row = Row { file: &file, line, record: &record, headers: &headers };
        if record.len() != expected_fields {
            return Err(
                row.err(format!("visits row has {} weekly values, expected {weeks}", record.len().saturating_sub(3)))
            );
        }
        let block = row.block(c_block, index)?;
        let sector: u16 = row.int(c_sector)?;
        if !(100..=999).contains(&sector) {
            return Err(row.err(format!("naics3 {sector} is not a 3-digit code")));
        }
        let visits = c_weeks.iter().map(|&c| row.int::<u64>(c)).collect::<Result<Vec<_>>>()?;
        pois.push(PoiRecord { poi_id: row.text(c_id)?.to_string(), block, sector, visits });
    }
    Ok((pois, weeks))
}

fn read_weather(path: &Path, index: &HashMap<String, usize>, days: usize) -> Result<Vec<DailyWeather>> {
    let (mut reader, headers, file) = open(path)?;
    let cols = Columns { file: &file, headers: &headers };
    let c_block = cols.find("block_id")?;
    let c_day = cols.find("day_index")?;
    let c_vals = [cols.find("precip")?, cols.find("wind")?, cols.find("pressure")?];
    let mut weather = vec![vec![None; days]; index.len()];
    for item in rows(&mut reader, &file) {
        let (line, record) = item?;
        let row = Row { file: &file, line, record: &record, headers: &headers };
        let b = row.block(c_block, index)?;
        let day: usize = row.int(c_day)?;
        if day >= days {
            return Err(row.err(format!("day_index {day} outside the {days}-day record")));
        }
        let values = [row.float(c_vals[0])?, row.float(c_vals[1])?, row.float(c_vals[2])?];
        if weather[b][day].replace(values).is_some() {
            return Err(row.err(format!("duplicate weather for day {day}")));
        }
    }
    Ok(weather)
}

fn read_disasters(path: &Path, index: &HashMap<String, usize>, weeks: usize) -> Result<Vec<DisasterEvent>> {
    let (mut reader, headers, file) = open(path)?;
    let cols = Columns { file: &file, headers: &headers };
    let (c_id, c_week) = (cols.find("event_id")?, cols.find("week")?);
    let (c_block, c_sev) = (cols.find("block_id")?, cols.find("severity")?);
    let mut events: Vec<DisasterEvent> = Vec::new();
    for item in rows(&mut reader, &file) {
        let (line, record) = item?;
        let row = Row { file: &file, line, record: &record, headers: &headers };
        let id = row.text(c_id)?;
        let week: usize = row.int(c_week)?;
        if week >= weeks {
            return Err(row.err(format!("week {week} outside the {weeks}-week record")));
        }
        let b = row.block(c_block, index)?;
        let severity = row.float(c_sev)?;
        if severity < 0.0 {
            return Err(row.err(format!("negative severity {severity}")));
        }
        let event = match events.iter_mut().position(|e| e.event_id == id) {
            Some(k) => &mut events[k],
            None => {
                events.push(DisasterEvent { event_id: id.to_string(), week, severity_by_block: BTreeMap::new() });
                events.last_mut().expect("just pushed")
            }
        };
        if event.week != week {
            return Err(row.err(format!("event {id:?} given weeks {} and {week}", event.week)));
        }
        if event.severity_by_block.insert(b, severity).is_some() {
            return Err(row.err(format!("event {id:?} lists block {:?} twice", row.text(c_block)?)));
        }
    }
    Ok(events)
}

/// Replacement attribute values for one block, in one period or all.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeOverride {
    pub block: usize,
    pub period: Option<usize>,
    /// `(attribute index, value)` pairs.
    pub values: Vec<(usize, f64)>,
}

/// Reads a what-if attribute table: `block_id`, optional `period_id`, and
/// any subset of the dataset's `z_<k>` columns. Empty cells keep the
/// original value.
pub fn read_attribute_overrides(path: &Path, dataset: &Dataset) -> Result<Vec<AttributeOverride>> {
    let (mut reader, headers, file) = open(path)?;
    let cols = Columns { file: &file, headers: &headers };
    let c_id = cols.find("block_id")?;
    let c_period = headers.iter().position(|h| h.trim() == "period_id");
    let mut c_z = Vec::new();
    for (pos, h) in headers.iter().enumerate() {
        if pos == c_id || Some(pos) == c_period {
            continue;
        }
        let k = h.trim().strip_prefix("z_").and_then(|s| s.parse::<usize>().ok()).filter(|&k| k < dataset.z_dim());
        match k {
            Some(k) => c_z.push((pos, k)),
            None => return Err(Error::Data(format!("{file}: unknown override column {:?}", h.trim()))),
        }
    }
    let mut out = Vec::new();
    for item in rows(&mut reader, &file) {
        let (line, record) = item?;
        let row = Row { file: &file, line, record: &record, headers: &headers };
        let block = row.block(c_id, &dataset.index)?;
        let period = match c_period.map(|c| row.text(c)).transpose()? {
            None | Some("") => None,
            Some(label) => Some(
                dataset
                    .periods
                    .iter()
                    .position(|p| p.label == label)
                    .ok_or_else(|| row.err(format!("unknown period_id {label:?}")))?,
            ),
        };
        let mut values = Vec::new();
        for &(pos, k) in &c_z {
            if !row.text(pos)?.is_empty() {
                values.push((k, row.float(pos)?));
            }
        }
        out.push(AttributeOverride { block, period, values });
    }
    Ok(out)
}

/// Reads extra disaster rows in the `disasters.csv` layout. Event ids must
/// not clash with the dataset's own events.
pub fn read_extra_disasters(path: &Path, dataset: &Dataset) -> Result<Vec<DisasterEvent>> {
    let events = read_disasters(path, &dataset.index, dataset.total_weeks)?;
    if let Some(e) = events.iter().find(|e| dataset.disasters.iter().any(|d| d.event_id == e.event_id)) {
        return Err(Error::Data(format!("{}: event id {:?} already exists", path.display(), e.event_id)));
    }
    Ok(events)
}

impl Dataset {
    /// Applies what-if changes in place.
    pub fn apply_overrides(&mut self, attributes: &[AttributeOverride], disasters: Vec<DisasterEvent>) {
        for o in attributes {
            for (p, period) in self.records.iter_mut().enumerate() {
                if o.period.is_none_or(|q| q == p) {
                    for &(k, v) in &o.values {
                        period[o.block].z[k] = v;
                    }
                }
            }
        }
        self.disasters.extend(disasters);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_examples() {
        let cfg = LabelConfig::default();
        assert_eq!(derive_label(0.10, 0.10, &cfg), ChangeClass::NoChange);
        assert_eq!(derive_label(0.05, 0.12, &cfg), ChangeClass::Increase);
        assert_eq!(derive_label(0.30, 0.299995, &cfg), ChangeClass::NoChange);
        assert_eq!(derive_label(0.30, 0.20, &cfg), ChangeClass::Decrease);
    }

    #[test]
    fn weather_rules() {
        let mut daily: DailyWeather = vec![Some([1.0, 0.0, 1013.0]); 7];
        for (d, w) in [2.0, 9.0, 3.0, 1.0, 0.0, 4.0, 5.0].into_iter().enumerate() {
            daily[d].as_mut().unwrap()[1] = w;
        }
        let weeks = weekly_aggregate_weather(&daily, 0, 1, MissingDays::Error).unwrap();
        assert_eq!(weeks, vec![[7.0, 9.0, 1013.0]]);
    }

    #[test]
    fn weather_gaps() {
        let mut daily: DailyWeather = (0..7).map(|d| Some([d as f64, 0.0, 0.0])).collect();
        daily[3] = None;
        daily[4] = None;
        let err = weekly_aggregate_weather(&daily, 0, 1, MissingDays::Error).unwrap_err();
        assert!(err.to_string().contains("day 3"), "{err}");
        let filled = weekly_aggregate_weather(&daily, 0, 1, MissingDays::Interpolate(2)).unwrap();
        assert!((filled[0][0] - 21.0).abs() < 1e-12);
        assert!(weekly_aggregate_weather(&daily, 0, 1, MissingDays::Interpolate(1)).is_err());
    }

    #[test]
    fn standardizer_examples() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]];
        let s = Standardizer::fit(2, rows.iter().map(Vec::as_slice));
        assert_eq!(s.mean, vec![2.0, 5.0]);
        let sd = (2.0f64 / 3.0).sqrt();
        assert!((s.sd[0] - sd).abs() < 1e-15);
        assert_eq!(s.apply(1, 5.0), 0.0);
        assert!(s.apply(0, f64::NAN).is_nan());
    }

    #[test]
    fn resampling_balances_to_majority() {
        let mut labels = vec![ChangeClass::Increase; 2];
        labels.extend(vec![ChangeClass::NoChange; 10]);
        labels.extend(vec![ChangeClass::Decrease; 3]);
        let idx: Vec<usize> = (0..15).collect();
        let out = resample_balanced(&idx, &labels, 7).unwrap();
        let mut counts = [0; 3];
        for &i in &out {
            counts[labels[i].index()] += 1;
        }
        assert_eq!(counts, [10, 10, 10]);
        assert_eq!(out, resample_balanced(&idx, &labels, 7).unwrap());
        assert!(resample_balanced(&idx[2..12], &labels, 7).is_err());
    }
}
