//! CSV and JSON file formats shared by the command-line tools.
//!
//! Every tabular format is long-form CSV with a fixed, documented header;
//! empty fields encode missing values. Writers emit rows site-major (site
//! outer, time inner) and format floats with the shortest round-trip
//! representation, so identical inputs produce byte-identical files and a
//! read → write cycle reproduces the input exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{AnomalyLabels, CellFlag, DetectorMethod};
use crate::impale::{EventLabels, EventState};
use crate::model::{ModelError, ObservationSet};
use crate::network::{NetworkError, Segment, SitePlacement, StreamNetwork};
use crate::simulate::AnomalyType;

/// Errors raised while reading or writing data files.
#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    /// A problem tied to one file: unreadable, uncreatable, or
    /// schema-violating content. Always names the file.
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn schema_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Schema {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Opens a CSV file for reading, naming the file in any open failure.
fn csv_reader(path: &Path) -> Result<csv::Reader<File>, IoError> {
    csv::Reader::from_path(path).map_err(|e| schema_err(path, format!("cannot open: {e}")))
}

/// Creates a CSV file for writing, naming the file in any open failure.
fn csv_writer(path: &Path) -> Result<csv::Writer<File>, IoError> {
    csv::Writer::from_path(path).map_err(|e| schema_err(path, format!("cannot create: {e}")))
}

/// Shortest decimal string that parses back to exactly `v`.
fn fmt_f64(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v}").unwrap();
    s
}

fn parse_finite(path: &Path, field: &str, raw: &str, line: u64) -> Result<f64, IoError> {
    let v: f64 = raw
        .parse()
        .map_err(|_| schema_err(path, format!("line {line}: bad {field} `{raw}`")))?;
    if !v.is_finite() {
        return Err(schema_err(
            path,
            format!("line {line}: non-finite {field} `{raw}`"),
        ));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Network files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SegmentRow {
    segment_id: String,
    /// Empty marks the outlet.
    downstream_id: Option<String>,
    length: f64,
    additive_weight: f64,
}

#[derive(Serialize, Deserialize)]
struct SiteRow {
    site_id: String,
    segment_id: String,
    upstream_offset: f64,
    x: f64,
    y: f64,
}

/// Reads the segment and site CSVs and assembles the validated network.
///
/// Segment file columns: `segment_id,downstream_id,length,additive_weight`
/// with an empty `downstream_id` marking the outlet. Site file columns:
/// `site_id,segment_id,upstream_offset,x,y`.
pub fn read_network(
    segments_path: impl AsRef<Path>,
    sites_path: impl AsRef<Path>,
) -> Result<StreamNetwork, IoError> {
    let mut segments = Vec::new();
    for row in csv_reader(segments_path.as_ref())?.deserialize() {
        let row: SegmentRow = row?;
        segments.push(Segment {
            id: row.segment_id,
            downstream_id: row.downstream_id,
            length: row.length,
            additive_weight: row.additive_weight,
        });
    }
    let mut sites = Vec::new();
    for row in csv_reader(sites_path.as_ref())?.deserialize() {
        let row: SiteRow = row?;
        sites.push(SitePlacement {
            site_id: row.site_id,
            segment_id: row.segment_id,
            upstream_offset: row.upstream_offset,
            xy: (row.x, row.y),
        });
    }
    Ok(StreamNetwork::build(segments, sites)?)
}

/// Writes the network back out in the format [`read_network`] consumes.
pub fn write_network(
    net: &StreamNetwork,
    segments_path: impl AsRef<Path>,
    sites_path: impl AsRef<Path>,
) -> Result<(), IoError> {
    let mut w = csv_writer(segments_path.as_ref())?;
    for seg in net.segments() {
        w.serialize(SegmentRow {
            segment_id: seg.id.clone(),
            downstream_id: seg.downstream_id.clone(),
            length: seg.length,
            additive_weight: seg.additive_weight,
        })?;
    }
    w.flush()?;
    let mut w = csv_writer(sites_path.as_ref())?;
    for site in net.sites() {
        w.serialize(SiteRow {
            site_id: site.site_id.clone(),
            segment_id: site.segment_id.clone(),
            upstream_offset: site.upstream_offset,
            x: site.xy.0,
            y: site.xy.1,
        })?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Long-format grids (observations, labels, truth)
// ---------------------------------------------------------------------------

/// Row indices of a complete long-format (site, time) grid: `cells[(i, j)]`
/// is the record describing site `sites[i]` at tick `times[j]`.
struct LongGrid {
    sites: Vec<String>,
    times: Vec<i64>,
    cells: DMatrix<usize>,
}

/// Indexes long-format records by (site, time). Sites keep first-appearance
/// order; times are sorted ascending. Every combination must appear exactly
/// once.
fn index_long_grid(
    path: &Path,
    records: &[(u64, csv::StringRecord)],
    site_col: usize,
    time_col: usize,
) -> Result<LongGrid, IoError> {
    if records.is_empty() {
        return Err(schema_err(path, "no data rows"));
    }
    let mut sites: Vec<String> = Vec::new();
    let mut site_ix: HashMap<String, usize> = HashMap::new();
    let mut keyed: Vec<(usize, i64)> = Vec::with_capacity(records.len());
    let mut times: Vec<i64> = Vec::new();
    for (line, rec) in records {
        let sid = &rec[site_col];
        let s = *site_ix.entry(sid.to_string()).or_insert_with(|| {
            sites.push(sid.to_string());
            sites.len() - 1
        });
        let t: i64 = rec[time_col].parse().map_err(|_| {
            schema_err(
                path,
                format!("line {line}: bad time `{}`", &rec[time_col]),
            )
        })?;
        keyed.push((s, t));
        times.push(t);
    }
    times.sort_unstable();
    times.dedup();
    let time_ix: HashMap<i64, usize> = times.iter().enumerate().map(|(j, &t)| (t, j)).collect();

    let (s, t_len) = (sites.len(), times.len());
    if records.len() != s * t_len {
        return Err(schema_err(
            path,
            format!(
                "{} rows do not fill the {s}×{t_len} (site × time) grid",
                records.len()
            ),
        ));
    }
    let mut cells = DMatrix::from_element(s, t_len, usize::MAX);
    for (r, &(i, t)) in keyed.iter().enumerate() {
        let j = time_ix[&t];
        if cells[(i, j)] != usize::MAX {
            return Err(schema_err(
                path,
                format!("duplicate row for site `{}` at time {t}", sites[i]),
            ));
        }
        cells[(i, j)] = r;
    }
    // Row count matched and no duplicates, so every cell is filled.
    Ok(LongGrid {
        sites,
        times,
        cells,
    })
}

fn read_records(path: &Path) -> Result<(csv::StringRecord, Vec<(u64, csv::StringRecord)>), IoError>
{
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers()?.clone();
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        records.push((line, rec));
    }
    Ok((headers, records))
}

fn expect_headers(path: &Path, headers: &csv::StringRecord, want: &[&str]) -> Result<(), IoError> {
    let got: Vec<&str> = headers.iter().collect();
    if got != want {
        return Err(schema_err(
            path,
            format!("header is {got:?}, expected {want:?}"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

/// Reads a long-format observations CSV: `site_id,time,value,<covariates>`
/// with an empty `value` marking a missing response. Covariate cells must be
/// complete. Returns the set plus the covariate column names (the intercept
/// is implicit and not a column).
pub fn read_observations(
    path: impl AsRef<Path>,
) -> Result<(ObservationSet, Vec<String>), IoError> {
    let path = path.as_ref();
    let (headers, records) = read_records(path)?;
    let head: Vec<&str> = headers.iter().collect();
    if head.len() < 3 || head[..3] != ["site_id", "time", "value"] {
        return Err(schema_err(
            path,
            format!("header starts {head:?}, expected site_id,time,value,<covariates>"),
        ));
    }
    let covariates: Vec<String> = head[3..].iter().map(|s| s.to_string()).collect();
    for (k, name) in covariates.iter().enumerate() {
        if name.is_empty() || covariates[..k].contains(name) {
            return Err(schema_err(path, format!("bad covariate column `{name}`")));
        }
    }

    let grid = index_long_grid(path, &records, 0, 1)?;
    let (s, t_len, k) = (grid.sites.len(), grid.times.len(), covariates.len());
    let mut y = DMatrix::zeros(s, t_len);
    let mut missing = DMatrix::from_element(s, t_len, false);
    let mut x = vec![DMatrix::from_element(s, 1 + k, 1.0); t_len];
    for i in 0..s {
        for j in 0..t_len {
            let (line, rec) = &records[grid.cells[(i, j)]];
            if rec[2].is_empty() {
                missing[(i, j)] = true;
                y[(i, j)] = f64::NAN;
            } else {
                y[(i, j)] = parse_finite(path, "value", &rec[2], *line)?;
            }
            for (c, name) in covariates.iter().enumerate() {
                let raw = rec.get(3 + c).unwrap_or("");
                if raw.is_empty() {
                    return Err(schema_err(
                        path,
                        format!("line {line}: covariate `{name}` is empty; covariates must be complete"),
                    ));
                }
                x[j][(i, 1 + c)] = parse_finite(path, name, raw, *line)?;
            }
        }
    }
    let obs = ObservationSet::new(y, missing, x, grid.sites, grid.times)?;
    Ok((obs, covariates))
}

/// Writes observations in the format [`read_observations`] consumes.
/// `covariate_names` labels the design columns after the implicit intercept.
pub fn write_observations(
    path: impl AsRef<Path>,
    obs: &ObservationSet,
    covariate_names: &[String],
) -> Result<(), IoError> {
    let path = path.as_ref();
    if covariate_names.len() + 1 != obs.n_covariates() {
        return Err(schema_err(
            path,
            format!(
                "{} covariate names for {} non-intercept design columns",
                covariate_names.len(),
                obs.n_covariates() - 1
            ),
        ));
    }
    let mut w = csv_writer(path)?;
    let mut header = vec!["site_id".to_string(), "time".into(), "value".into()];
    header.extend(covariate_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..obs.n_sites() {
        for j in 0..obs.n_times() {
            let mut row = vec![
                obs.site_order()[i].clone(),
                obs.time_index()[j].to_string(),
                if obs.is_missing(i, j) {
                    String::new()
                } else {
                    fmt_f64(obs.y()[(i, j)])
                },
            ];
            for c in 0..covariate_names.len() {
                row.push(fmt_f64(obs.x(j)[(i, 1 + c)]));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Anomaly labels
// ---------------------------------------------------------------------------

/// Writes detector output as `site_id,time,flag,score,method`: flag is 1/0
/// and empty at missing cells, score is empty exactly where flag is.
pub fn write_labels(
    path: impl AsRef<Path>,
    labels: &AnomalyLabels,
    site_order: &[String],
    time_index: &[i64],
) -> Result<(), IoError> {
    let path = path.as_ref();
    if site_order.len() != labels.n_sites() || time_index.len() != labels.n_times() {
        return Err(schema_err(
            path,
            format!(
                "{}×{} ids for a {}×{} label grid",
                site_order.len(),
                time_index.len(),
                labels.n_sites(),
                labels.n_times()
            ),
        ));
    }
    let mut w = csv_writer(path)?;
    w.write_record(["site_id", "time", "flag", "score", "method"])?;
    for i in 0..labels.n_sites() {
        for j in 0..labels.n_times() {
            let (flag, score) = match labels.flags[(i, j)] {
                CellFlag::Missing => (String::new(), String::new()),
                CellFlag::Anomalous => ("1".into(), fmt_f64(labels.scores[(i, j)])),
                CellFlag::Normal => ("0".into(), fmt_f64(labels.scores[(i, j)])),
            };
            w.write_record([
                site_order[i].as_str(),
                &time_index[j].to_string(),
                &flag,
                &score,
                labels.method.as_str(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a labels CSV back into [`AnomalyLabels`] plus its site and time
/// ids. All rows must carry the same method; the stored threshold is the
/// smallest flagged score (1 when nothing is flagged).
pub fn read_labels(
    path: impl AsRef<Path>,
) -> Result<(AnomalyLabels, Vec<String>, Vec<i64>), IoError> {
    let path = path.as_ref();
    let (headers, records) = read_records(path)?;
    expect_headers(path, &headers, &["site_id", "time", "flag", "score", "method"])?;
    let grid = index_long_grid(path, &records, 0, 1)?;
    let (s, t_len) = (grid.sites.len(), grid.times.len());

    let method = DetectorMethod::from_str(&records[0].1[4])
        .map_err(|e| schema_err(path, format!("line {}: {e}", records[0].0)))?;
    let mut flags = DMatrix::from_element(s, t_len, CellFlag::Normal);
    let mut scores = DMatrix::from_element(s, t_len, f64::NAN);
    let mut threshold = 1.0f64;
    for i in 0..s {
        for j in 0..t_len {
            let (line, rec) = &records[grid.cells[(i, j)]];
            if &rec[4] != method.as_str() {
                return Err(schema_err(
                    path,
                    format!("line {line}: mixed methods `{}` and `{method}`", &rec[4]),
                ));
            }
            match (&rec[2], &rec[3]) {
                ("", "") => flags[(i, j)] = CellFlag::Missing,
                ("", _) | (_, "") => {
                    return Err(schema_err(
                        path,
                        format!("line {line}: flag and score must be empty together"),
                    ));
                }
                (flag, raw) => {
                    let score = parse_finite(path, "score", raw, *line)?;
                    if !(0.0..=1.0).contains(&score) {
                        return Err(schema_err(
                            path,
                            format!("line {line}: score {score} outside [0, 1]"),
                        ));
                    }
                    scores[(i, j)] = score;
                    match flag {
                        "0" => {}
                        "1" => {
                            flags[(i, j)] = CellFlag::Anomalous;
                            threshold = threshold.min(score);
                        }
                        other => {
                            return Err(schema_err(
                                path,
                                format!("line {line}: bad flag `{other}` (expected 0, 1, or empty)"),
                            ));
                        }
                    }
                }
            }
        }
    }
    let labels = AnomalyLabels {
        flags,
        scores,
        method,
        iteration: 1,
        threshold,
    };
    Ok((labels, grid.sites, grid.times))
}

// ---------------------------------------------------------------------------
// Ground-truth labels
// ---------------------------------------------------------------------------

/// Writes cell-level truth as `site_id,time,type`, one row per cell with an
/// empty type marking a clean cell.
pub fn write_truth(
    path: impl AsRef<Path>,
    truth: &DMatrix<Option<AnomalyType>>,
    site_order: &[String],
    time_index: &[i64],
) -> Result<(), IoError> {
    let path = path.as_ref();
    if site_order.len() != truth.nrows() || time_index.len() != truth.ncols() {
        return Err(schema_err(
            path,
            format!(
                "{}×{} ids for a {}×{} truth grid",
                site_order.len(),
                time_index.len(),
                truth.nrows(),
                truth.ncols()
            ),
        ));
    }
    let mut w = csv_writer(path)?;
    w.write_record(["site_id", "time", "type"])?;
    for i in 0..truth.nrows() {
        for j in 0..truth.ncols() {
            w.write_record([
                site_order[i].as_str(),
                &time_index[j].to_string(),
                truth[(i, j)].map_or("", |ty| ty.as_str()),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a truth CSV back into the per-cell type grid plus its site and
/// time ids.
pub fn read_truth(
    path: impl AsRef<Path>,
) -> Result<(DMatrix<Option<AnomalyType>>, Vec<String>, Vec<i64>), IoError> {
    let path = path.as_ref();
    let (headers, records) = read_records(path)?;
    expect_headers(path, &headers, &["site_id", "time", "type"])?;
    let grid = index_long_grid(path, &records, 0, 1)?;
    let mut truth = DMatrix::from_element(grid.sites.len(), grid.times.len(), None);
    for i in 0..grid.sites.len() {
        for j in 0..grid.times.len() {
            let (line, rec) = &records[grid.cells[(i, j)]];
            if !rec[2].is_empty() {
                truth[(i, j)] = Some(
                    AnomalyType::from_str(&rec[2])
                        .map_err(|e| schema_err(path, format!("line {line}: {e}")))?,
                );
            }
        }
    }
    Ok((truth, grid.sites, grid.times))
}

// ---------------------------------------------------------------------------
// Event labels
// ---------------------------------------------------------------------------

/// Writes catchment-level event labels as `time,state,probability`.
pub fn write_events(
    path: impl AsRef<Path>,
    events: &EventLabels,
    time_index: &[i64],
) -> Result<(), IoError> {
    let path = path.as_ref();
    if time_index.len() != events.n_times() {
        return Err(schema_err(
            path,
            format!(
                "{} time ids for {} event ticks",
                time_index.len(),
                events.n_times()
            ),
        ));
    }
    let mut w = csv_writer(path)?;
    w.write_record(["time", "state", "probability"])?;
    for (j, t) in time_index.iter().enumerate() {
        w.write_record([
            &t.to_string(),
            events.states[j].as_str(),
            &fmt_f64(events.probabilities[j]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an events CSV back into [`EventLabels`] plus its time ids, which
/// must be strictly increasing.
pub fn read_events(path: impl AsRef<Path>) -> Result<(EventLabels, Vec<i64>), IoError> {
    let path = path.as_ref();
    let (headers, records) = read_records(path)?;
    expect_headers(path, &headers, &["time", "state", "probability"])?;
    if records.is_empty() {
        return Err(schema_err(path, "no data rows"));
    }
    let mut times = Vec::with_capacity(records.len());
    let mut states = Vec::with_capacity(records.len());
    let mut probabilities = Vec::with_capacity(records.len());
    for (line, rec) in &records {
        let t: i64 = rec[0]
            .parse()
            .map_err(|_| schema_err(path, format!("line {line}: bad time `{}`", &rec[0])))?;
        if times.last().is_some_and(|&prev| prev >= t) {
            return Err(schema_err(
                path,
                format!("line {line}: time {t} does not increase"),
            ));
        }
        times.push(t);
        states.push(
            EventState::from_str(&rec[1])
                .map_err(|e| schema_err(path, format!("line {line}: {e}")))?,
        );
        let p = parse_finite(path, "probability", &rec[2], *line)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(schema_err(
                path,
                format!("line {line}: probability {p} outside [0, 1]"),
            ));
        }
        probabilities.push(p);
    }
    Ok((
        EventLabels {
            states,
            probabilities,
        },
        times,
    ))
}

// ---------------------------------------------------------------------------
// JSON configs and reports
// ---------------------------------------------------------------------------

/// Reads any JSON-serializable value (configs, metric reports, state files).
pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, IoError> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| schema_err(path, format!("cannot open: {e}")))?;
    serde_json::from_reader(f).map_err(|e| schema_err(path, e.to_string()))
}

/// Writes pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| schema_err(path, format!("cannot create: {e}")))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
