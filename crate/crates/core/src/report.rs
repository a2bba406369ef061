//! Group-by aggregation of scores into grids, curves and perfect-match
//! tables.
//!
//! Medians are exact; for an even count the lower of the two middle values
//! is taken.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_string;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::metrics::ScoreRecord;
use crate::probekit::ProbeRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    BucketFrequency,
    Offset,
    PrefixLen,
    SuffixLen,
}

impl GroupKey {
    pub fn name(self) -> &'static str {
        match self {
            GroupKey::BucketFrequency => "bucket_frequency",
            GroupKey::Offset => "offset",
            GroupKey::PrefixLen => "prefix_len",
            GroupKey::SuffixLen => "suffix_len",
        }
    }

    fn of(self, p: &ProbeRecord) -> u64 {
        match self {
            GroupKey::BucketFrequency => u64::from(p.bucket_frequency),
            GroupKey::Offset => p.offset as u64,
            GroupKey::PrefixLen => p.prefix_len as u64,
            GroupKey::SuffixLen => p.suffix_len as u64,
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "freq" | "frequency" | "bucket_frequency" => Ok(GroupKey::BucketFrequency),
            "offset" => Ok(GroupKey::Offset),
            "prefix_len" | "prefix" => Ok(GroupKey::PrefixLen),
            "suffix_len" | "suffix" => Ok(GroupKey::SuffixLen),
            other => Err(Error::Config(format!("unknown group key `{other}`"))),
        }
    }
}

/// Parse a comma-separated key list such as `offset,prefix_len`.
pub fn parse_group_keys(s: &str) -> Result<Vec<GroupKey>> {
    let mut keys: Vec<GroupKey> = s.split(',').filter(|k| !k.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    keys.sort_unstable();
    keys.dedup();
    Ok(keys)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RougeL,
    Lccs,
    Ttr,
    Ppl,
    Mauve,
    EmRate,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::RougeL => "rouge_l",
            Metric::Lccs => "lccs",
            Metric::Ttr => "ttr",
            Metric::Ppl => "ppl",
            Metric::Mauve => "mauve",
            Metric::EmRate => "em_rate",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rouge_l" => Ok(Metric::RougeL),
            "lccs" => Ok(Metric::Lccs),
            "ttr" => Ok(Metric::Ttr),
            "ppl" => Ok(Metric::Ppl),
            "mauve" => Ok(Metric::Mauve),
            "em" | "em_rate" => Ok(Metric::EmRate),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stat {
    #[default]
    Mean,
    Median,
}

impl FromStr for Stat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(Stat::Mean),
            "median" => Ok(Stat::Median),
            other => Err(Error::Config(format!("unknown statistic `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

/// Mean and lower median; `None` for an empty input. Values are sorted
/// first so the result does not depend on input order.
pub fn summarize(values: &mut [f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(Summary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: values[(values.len() - 1) / 2],
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Group {
    pub model_tag: String,
    pub bucket_frequency: Option<u64>,
    pub offset: Option<u64>,
    pub prefix_len: Option<u64>,
    pub suffix_len: Option<u64>,
}

impl Group {
    pub fn get(&self, key: GroupKey) -> Option<u64> {
        match key {
            GroupKey::BucketFrequency => self.bucket_frequency,
            GroupKey::Offset => self.offset,
            GroupKey::PrefixLen => self.prefix_len,
            GroupKey::SuffixLen => self.suffix_len,
        }
    }

    fn set(&mut self, key: GroupKey, v: u64) {
        let slot = match key {
            GroupKey::BucketFrequency => &mut self.bucket_frequency,
            GroupKey::Offset => &mut self.offset,
            GroupKey::PrefixLen => &mut self.prefix_len,
            GroupKey::SuffixLen => &mut self.suffix_len,
        };
        *slot = Some(v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub group: Group,
    pub count: usize,
    pub rouge_l: Summary,
    pub lccs: Summary,
    pub ttr: Summary,
    pub ppl: Option<Summary>,
    pub mauve: Option<Summary>,
    pub em_rate: f64,
}

impl AggregateRow {
    pub fn value(&self, metric: Metric, stat: Stat) -> Option<f64> {
        let pick = |s: &Summary| match stat {
            Stat::Mean => s.mean,
            Stat::Median => s.median,
        };
        match metric {
            Metric::RougeL => Some(pick(&self.rouge_l)),
            Metric::Lccs => Some(pick(&self.lccs)),
            Metric::Ttr => Some(pick(&self.ttr)),
            Metric::Ppl => self.ppl.as_ref().map(pick),
            Metric::Mauve => self.mauve.as_ref().map(pick),
            Metric::EmRate => Some(self.em_rate),
        }
    }
}

fn join<'a>(scores: &'a [ScoreRecord], probes: &'a [ProbeRecord]) -> Result<Vec<(&'a ScoreRecord, &'a ProbeRecord)>> {
    let by_id: HashMap<&str, &ProbeRecord> = probes.iter().map(|p| (p.probe_id.as_str(), p)).collect();
    scores
        .iter()
        .map(|s| {
            by_id
                .get(s.probe_id.as_str())
                .map(|p| (s, *p))
                .ok_or_else(|| Error::DanglingProbe(s.probe_id.clone()))
        })
        .collect()
}

/// Exact group-by over `(model_tag, keys...)`. Rows come out in group
/// order.
pub fn aggregate(scores: &[ScoreRecord], probes: &[ProbeRecord], keys: &[GroupKey]) -> Result<Vec<AggregateRow>> {
    #[derive(Default)]
    struct Acc {
        rouge_l: Vec<f64>,
        lccs: Vec<f64>,
        ttr: Vec<f64>,
        ppl: Vec<f64>,
        mauve: Vec<f64>,
        em: usize,
        count: usize,
    }

    let mut groups: BTreeMap<Group, Acc> = BTreeMap::new();
    for (s, p) in join(scores, probes)? {
        let mut g = Group {
            model_tag: s.model_tag.clone(),
            bucket_frequency: None,
            offset: None,
            prefix_len: None,
            suffix_len: None,
        };
        for &k in keys {
            g.set(k, k.of(p));
        }
        let acc = groups.entry(g).or_default();
        acc.count += 1;
        acc.rouge_l.push(s.rouge_l);
        acc.lccs.push(s.lccs);
        acc.ttr.push(s.ttr);
        acc.ppl.extend(s.ppl);
        acc.mauve.extend(s.mauve);
        acc.em += usize::from(s.em);
    }

    Ok(groups
        .into_iter()
        .map(|(group, mut a)| AggregateRow {
            group,
            count: a.count,
            rouge_l: summarize(&mut a.rouge_l).expect("group is nonempty"),
            lccs: summarize(&mut a.lccs).expect("group is nonempty"),
            ttr: summarize(&mut a.ttr).expect("group is nonempty"),
            ppl: summarize(&mut a.ppl),
            mauve: summarize(&mut a.mauve),
            em_rate: a.em as f64 / a.count as f64,
        })
        .collect())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}")).unwrap_or_default()
}

/// Matrix CSV: header row of x labels, first column of y labels, cells with
/// three decimals. Missing cells are empty; two rows landing on one cell
/// with different values are an error.
pub fn emit_grid(rows: &[AggregateRow], x_key: GroupKey, y_key: GroupKey, metric: Metric, stat: Stat) -> Result<String> {
    let mut cells: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    let mut xs = BTreeSet::new();
    let mut ys = BTreeSet::new();
    for r in rows {
        let (Some(x), Some(y)) = (r.group.get(x_key), r.group.get(y_key)) else {
            return Err(Error::Invalid(format!(
                "grid needs rows grouped by {x_key} and {y_key}"
            )));
        };
        xs.insert(x);
        ys.insert(y);
        let Some(v) = r.value(metric, stat) else { continue };
        if let Some(prev) = cells.insert((x, y), v) {
            if prev.to_bits() != v.to_bits() {
                return Err(Error::Invalid(format!(
                    "conflicting values for grid cell ({x_key}={x}, {y_key}={y}): {prev} vs {v}"
                )));
            }
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![format!("{y_key}\\{x_key}")];
    header.extend(xs.iter().map(u64::to_string));
    w.write_record(&header).map_err(csv_err)?;
    for &y in &ys {
        let mut rec = vec![y.to_string()];
        rec.extend(xs.iter().map(|&x| fmt_opt(cells.get(&(x, y)).copied(), 3)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Flat CSV of aggregate rows, six decimals.
pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model_tag", "bucket_frequency", "offset", "prefix_len", "suffix_len", "count"];
    let metrics = ["rouge_l", "lccs", "ttr", "ppl", "mauve"];
    let cols: Vec<String> = metrics
        .iter()
        .flat_map(|m| [format!("{m}_mean"), format!("{m}_median")])
        .collect();
    header.extend(cols.iter().map(String::as_str));
    header.push("em_rate");
    w.write_record(&header).map_err(csv_err)?;
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![
            r.group.model_tag.clone(),
            opt(r.group.bucket_frequency),
            opt(r.group.offset),
            opt(r.group.prefix_len),
            opt(r.group.suffix_len),
            r.count.to_string(),
        ];
        for s in [Some(r.rouge_l), Some(r.lccs), Some(r.ttr), r.ppl, r.mauve] {
            rec.push(fmt_opt(s.map(|s| s.mean), 6));
            rec.push(fmt_opt(s.map(|s| s.median), 6));
        }
        rec.push(format!("{:.6}", r.em_rate));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x_key: GroupKey,
    pub metric: Metric,
    pub stat: Stat,
    pub median_rule: String,
    pub series: Vec<Series>,
}

/// One series per group with `x_key` removed, points sorted by x.
pub fn plot_data(rows: &[AggregateRow], x_key: GroupKey, metric: Metric, stat: Stat) -> Result<PlotData> {
    let mut series: BTreeMap<Group, Vec<(u64, f64)>> = BTreeMap::new();
    for r in rows {
        let x = r
            .group
            .get(x_key)
            .ok_or_else(|| Error::Invalid(format!("plot needs rows grouped by {x_key}")))?;
        let Some(v) = r.value(metric, stat) else { continue };
        let mut g = r.group.clone();
        match x_key {
            GroupKey::BucketFrequency => g.bucket_frequency = None,
            GroupKey::Offset => g.offset = None,
            GroupKey::PrefixLen => g.prefix_len = None,
            GroupKey::SuffixLen => g.suffix_len = None,
        }
        series.entry(g).or_default().push((x, v));
    }
    Ok(PlotData {
        x_key,
        metric,
        stat,
        median_rule: "lower".into(),
        series: series
            .into_iter()
            .map(|(g, mut points)| {
                points.sort_by_key(|p| p.0);
                let mut label = g.model_tag.clone();
                for k in [GroupKey::BucketFrequency, GroupKey::Offset, GroupKey::PrefixLen, GroupKey::SuffixLen] {
                    if let Some(v) = g.get(k) {
                        label.push_str(&format!(" {k}={v}"));
                    }
                }
                Series { label, points }
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerfectMatchRow {
    pub model_tag: String,
    pub frequency: u32,
    pub max_suffix_len_with_em: usize,
    pub em_count: usize,
}

/// Per model and bucket frequency, the longest suffix length reproduced
/// exactly at least once, and how many probes at that length were exact.
/// Frequencies without any exact match get no row.
pub fn perfect_match_table(scores: &[ScoreRecord], probes: &[ProbeRecord]) -> Result<Vec<PerfectMatchRow>> {
    let mut em: BTreeMap<(String, u32), BTreeMap<usize, usize>> = BTreeMap::new();
    for (s, p) in join(scores, probes)? {
        if s.em {
            *em.entry((s.model_tag.clone(), p.bucket_frequency))
                .or_default()
                .entry(p.suffix_len)
                .or_default() += 1;
        }
    }
    Ok(em
        .into_iter()
        .map(|((model_tag, frequency), by_len)| {
            let (&len, &count) = by_len.iter().next_back().expect("only nonempty maps are inserted");
            PerfectMatchRow {
                model_tag,
                frequency,
                max_suffix_len_with_em: len,
                em_count: count,
            }
        })
        .collect())
}

pub fn perfect_match_csv(rows: &[PerfectMatchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(["model_tag", "frequency", "max_suffix_len_with_em", "em_count"])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub group_keys: Vec<GroupKey>,
    pub metric: Metric,
    #[serde(default)]
    pub stat: Stat,
    /// `(x, y)` axes of the matrix CSV.
    #[serde(default)]
    pub grid: Option<(GroupKey, GroupKey)>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            group_keys: vec![GroupKey::BucketFrequency, GroupKey::Offset, GroupKey::PrefixLen],
            metric: Metric::RougeL,
            stat: Stat::Mean,
            grid: Some((GroupKey::PrefixLen, GroupKey::BucketFrequency)),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, |w| w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e)))
}

/// Write `aggregate.csv`, `plot_<metric>.json`, `perfect_match.csv` and,
/// when a grid is requested, `grid_<metric>.csv` into `dir`.
pub fn write_report(dir: &Path, scores: &[ScoreRecord], probes: &[ProbeRecord], opts: &ReportOptions) -> Result<Vec<AggregateRow>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows = aggregate(scores, probes, &opts.group_keys)?;
    write_text(&dir.join("aggregate.csv"), &aggregate_csv(&rows)?)?;
    if let Some(&x) = opts.group_keys.first() {
        let plot = plot_data(&rows, x, opts.metric, opts.stat)?;
        let text = to_canonical_string(&plot).map_err(|e| Error::json("plot data", e))?;
        write_text(&dir.join(format!("plot_{}.json", opts.metric.name())), &(text + "\n"))?;
    }
    if let Some((x, y)) = opts.grid {
        let grid_rows = aggregate(scores, probes, &[x, y])?;
        let tags: BTreeSet<&str> = grid_rows.iter().map(|r| r.group.model_tag.as_str()).collect();
        for tag in &tags {
            let own: Vec<AggregateRow> = grid_rows.iter().filter(|r| r.group.model_tag == *tag).cloned().collect();
            let csv = emit_grid(&own, x, y, opts.metric, opts.stat)?;
            let name = if tags.len() == 1 {
                format!("grid_{}.csv", opts.metric.name())
            } else {
                format!("grid_{}_{}.csv", opts.metric.name(), sanitize(tag))
            };
            write_text(&dir.join(name), &csv)?;
        }
    }
    write_text(&dir.join("perfect_match.csv"), &perfect_match_csv(&perfect_match_table(scores, probes)?)?)?;
    Ok(rows)
}

fn sanitize(tag: &str) -> String {
    tag.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}
