//! Ingest of long-format monitoring records, exclusions, missingness
//! profiles, lake ranking and the pre-test / test split.
//!
//! The CSV layout is `midas,lake,date,seccbot,zS_m,<covariate...>`. Every
//! column that is not one of the five reserved names is treated as a
//! covariate, in header order.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Months, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const COL_LAKE_ID: &str = "midas";
pub const COL_LAKE_NAME: &str = "lake";
pub const COL_DATE: &str = "date";
pub const COL_SECCBOT: &str = "seccbot";
pub const COL_SDD: &str = "zS_m";

/// Covariate names treated as chlorophyll (compared case-insensitively).
pub const DEFAULT_LEAKAGE_FEATURES: &[&str] = &[
    "chla",
    "chl_a",
    "chl-a",
    "chlorophyll",
    "chlorophyll_a",
    "chlorophyll-a",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing mandatory column `{0}`")]
    MissingColumn(&'static str),
    #[error("duplicate column `{0}` in header")]
    DuplicateColumn(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("series for lake {0} has no records")]
    EmptySeries(u32),
    #[error("series for lake {0} has no covariates")]
    NoFeatures(u32),
    #[error("requested {requested} lakes but only {available} are available")]
    TooFewLakes { requested: usize, available: usize },
    #[error("lake {lake_id}: insufficient history for a {years}-year test block ({pre} pre-test, {test} test rows)")]
    InsufficientHistory {
        lake_id: u32,
        years: u32,
        pre: usize,
        test: usize,
    },
    #[error("test block length must be at least one year")]
    ZeroYears,
}

/// A row that could not be parsed; ingest keeps going and reports these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    /// 1-based line number in the source file (header is line 1).
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub lake_id: u32,
    pub lake_name: String,
    pub date: NaiveDate,
    /// Secchi depth in meters, `None` when not observed.
    pub sdd: Option<f64>,
    /// Covariate values aligned with the owning series' `feature_schema`.
    pub covariates: Vec<Option<f64>>,
    pub sdd_to_bottom: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LakeSeries {
    pub lake_id: u32,
    pub lake_name: String,
    pub feature_schema: Vec<String>,
    pub records: Vec<Record>,
}

impl LakeSeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_schema.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_schema.iter().position(|f| f == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    /// Cell values (after trimming) that denote a missing entry. The empty
    /// cell is always missing.
    pub na_tokens: Vec<String>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            na_tokens: vec!["NA".to_string()],
        }
    }
}

impl IngestConfig {
    fn is_na(&self, cell: &str) -> bool {
        cell.is_empty() || self.na_tokens.iter().any(|t| t == cell)
    }
}

/// Result of ingest: the parsed lakes plus every rejected row.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Ingested {
    pub feature_schema: Vec<String>,
    pub lakes: Vec<LakeSeries>,
    pub rejected: Vec<RowError>,
}

struct Columns {
    lake_id: usize,
    lake_name: Option<usize>,
    date: usize,
    seccbot: Option<usize>,
    sdd: usize,
    covariates: Vec<usize>,
}

fn resolve_columns(header: &csv::StringRecord) -> Result<(Columns, Vec<String>), DatasetError> {
    let mut seen = BTreeMap::new();
    for (i, name) in header.iter().enumerate() {
        let name = name.trim();
        if seen.insert(name.to_string(), i).is_some() {
            return Err(DatasetError::DuplicateColumn(name.to_string()));
        }
    }
    let find = |name: &'static str| seen.get(name).copied();
    let lake_id = find(COL_LAKE_ID).ok_or(DatasetError::MissingColumn(COL_LAKE_ID))?;
    let date = find(COL_DATE).ok_or(DatasetError::MissingColumn(COL_DATE))?;
    let sdd = find(COL_SDD).ok_or(DatasetError::MissingColumn(COL_SDD))?;
    let reserved = [COL_LAKE_ID, COL_LAKE_NAME, COL_DATE, COL_SECCBOT, COL_SDD];
    let mut covariates = Vec::new();
    let mut schema = Vec::new();
    for (i, name) in header.iter().enumerate() {
        let name = name.trim();
        if !reserved.contains(&name) {
            covariates.push(i);
            schema.push(name.to_string());
        }
    }
    Ok((
        Columns {
            lake_id,
            lake_name: find(COL_LAKE_NAME),
            date,
            seccbot: find(COL_SECCBOT),
            sdd,
            covariates,
        },
        schema,
    ))
}

pub fn parse_date(cell: &str) -> Option<NaiveDate> {
    if let Ok(d) = NaiveDate::parse_from_str(cell, "%Y-%m-%d") {
        return Some(d);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(cell, fmt) {
            return Some(dt.date());
        }
    }
    chrono::DateTime::parse_from_rfc3339(cell)
        .ok()
        .map(|dt| dt.date_naive())
}

fn parse_value(config: &IngestConfig, column: &str, cell: &str) -> Result<Option<f64>, String> {
    let cell = cell.trim();
    if config.is_na(cell) {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) => Err(format!("non-finite value `{cell}` in column `{column}`")),
        Err(_) => Err(format!(
            "cannot parse `{cell}` in column `{column}` as a number"
        )),
    }
}

fn parse_row(
    config: &IngestConfig,
    cols: &Columns,
    schema: &[String],
    row: &csv::StringRecord,
) -> Result<Record, String> {
    let cell = |i: usize| row.get(i).unwrap_or("").trim();

    let id_cell = cell(cols.lake_id);
    let lake_id = id_cell
        .parse::<u32>()
        .map_err(|_| format!("invalid lake id `{id_cell}`"))?;
    let lake_name = cols
        .lake_name
        .map(|i| cell(i).to_string())
        .unwrap_or_default();
    let date_cell = cell(cols.date);
    let date = parse_date(date_cell).ok_or_else(|| format!("invalid date `{date_cell}`"))?;
    let sdd = parse_value(config, COL_SDD, cell(cols.sdd))?;
    if let Some(v) = sdd {
        if v <= 0.0 {
            return Err(format!("Secchi depth must be positive, got {v}"));
        }
    }
    let sdd_to_bottom = match cols.seccbot.map(cell) {
        None => false,
        Some(s) if s.is_empty() => false,
        Some(s) if s.eq_ignore_ascii_case("yes") || s.eq_ignore_ascii_case("y") => true,
        Some(s) if s.eq_ignore_ascii_case("no") || s.eq_ignore_ascii_case("n") => false,
        Some(s) if config.is_na(s) => false,
        Some(s) => return Err(format!("invalid seccbot flag `{s}`")),
    };
    let covariates = cols
        .covariates
        .iter()
        .zip(schema)
        .map(|(&i, name)| parse_value(config, name, cell(i)))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(Record {
        lake_id,
        lake_name,
        date,
        sdd,
        covariates,
        sdd_to_bottom,
    })
}

/// Parse a long-format CSV into one series per lake, ordered by lake id.
///
/// Rows inside each series are stably sorted by date. Rows that fail to
/// parse are collected in [`Ingested::rejected`] with their line numbers;
/// only a header problem aborts the whole parse.
pub fn parse_dataset<R: Read>(reader: R, config: &IngestConfig) -> Result<Ingested, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let (cols, schema) = resolve_columns(&header)?;

    let mut by_lake: BTreeMap<u32, Vec<Record>> = BTreeMap::new();
    let mut rejected = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(idx as u64 + 2, |p| p.line());
                rejected.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map_or(idx as u64 + 2, |p| p.line());
        if row.len() != header.len() {
            rejected.push(RowError {
                line,
                message: format!("expected {} fields, found {}", header.len(), row.len()),
            });
            continue;
        }
        match parse_row(config, &cols, &schema, &row) {
            Ok(rec) => by_lake.entry(rec.lake_id).or_default().push(rec),
            Err(message) => rejected.push(RowError { line, message }),
        }
    }

    let lakes = by_lake
        .into_iter()
        .map(|(lake_id, mut records)| {
            records.sort_by_key(|r| r.date);
            let lake_name = records
                .iter()
                .map(|r| r.lake_name.as_str())
                .find(|n| !n.is_empty())
                .unwrap_or("")
                .to_string();
            LakeSeries {
                lake_id,
                lake_name,
                feature_schema: schema.clone(),
                records,
            }
        })
        .collect();

    Ok(Ingested {
        feature_schema: schema,
        lakes,
        rejected,
    })
}

/// Write series back out in the ingest layout. Missing cells are written
/// as `NA`.
pub fn write_dataset<W: Write>(writer: W, lakes: &[LakeSeries]) -> Result<(), DatasetError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let schema: &[String] = lakes.first().map_or(&[], |l| &l.feature_schema);
    let mut header = vec![COL_LAKE_ID, COL_LAKE_NAME, COL_DATE, COL_SECCBOT, COL_SDD]
        .into_iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    header.extend(schema.iter().cloned());
    wtr.write_record(&header)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    for lake in lakes {
        for r in &lake.records {
            let mut row = vec![
                r.lake_id.to_string(),
                lake.lake_name.clone(),
                r.date.format("%Y-%m-%d").to_string(),
                if r.sdd_to_bottom { "Yes" } else { "No" }.to_string(),
                fmt(r.sdd),
            ];
            row.extend(r.covariates.iter().map(|v| fmt(*v)));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Drop chlorophyll-type covariates and every SDD-to-bottom record.
pub fn apply_exclusions(series: &LakeSeries) -> LakeSeries {
    apply_exclusions_with(series, DEFAULT_LEAKAGE_FEATURES)
}

pub fn apply_exclusions_with(series: &LakeSeries, leakage: &[&str]) -> LakeSeries {
    let keep: Vec<usize> = series
        .feature_schema
        .iter()
        .enumerate()
        .filter(|(_, name)| !leakage.iter().any(|l| l.eq_ignore_ascii_case(name)))
        .map(|(i, _)| i)
        .collect();
    let feature_schema = keep
        .iter()
        .map(|&i| series.feature_schema[i].clone())
        .collect();
    let records = series
        .records
        .iter()
        .filter(|r| !r.sdd_to_bottom)
        .map(|r| Record {
            covariates: keep.iter().map(|&i| r.covariates[i]).collect(),
            ..r.clone()
        })
        .collect();
    LakeSeries {
        lake_id: series.lake_id,
        lake_name: series.lake_name.clone(),
        feature_schema,
        records,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessProfile {
    /// `(feature, fraction missing)` in schema order.
    pub per_feature: Vec<(String, f64)>,
    pub lake_mean: f64,
}

pub fn missingness_profile(series: &LakeSeries) -> Result<MissingnessProfile, DatasetError> {
    if series.is_empty() {
        return Err(DatasetError::EmptySeries(series.lake_id));
    }
    if series.feature_schema.is_empty() {
        return Err(DatasetError::NoFeatures(series.lake_id));
    }
    let t = series.len() as f64;
    let per_feature: Vec<(String, f64)> = series
        .feature_schema
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let missing = series
                .records
                .iter()
                .filter(|r| r.covariates[j].is_none())
                .count();
            (name.clone(), missing as f64 / t)
        })
        .collect();
    let lake_mean = per_feature.iter().map(|(_, m)| m).sum::<f64>() / per_feature.len() as f64;
    Ok(MissingnessProfile {
        per_feature,
        lake_mean,
    })
}

/// One entry of a lake ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLake {
    pub lake_id: u32,
    pub lake_name: String,
    pub lake_mean_missingness: f64,
    pub n_records: usize,
}

/// Rank lakes ascending by mean covariate missingness; ties go to the longer
/// record, then to the smaller lake id.
pub fn rank_lakes(all: &[LakeSeries]) -> Result<Vec<RankedLake>, DatasetError> {
    let mut ranked = all
        .iter()
        .map(|s| {
            Ok(RankedLake {
                lake_id: s.lake_id,
                lake_name: s.lake_name.clone(),
                lake_mean_missingness: missingness_profile(s)?.lake_mean,
                n_records: s.len(),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    ranked.sort_by(|a, b| {
        a.lake_mean_missingness
            .total_cmp(&b.lake_mean_missingness)
            .then_with(|| b.n_records.cmp(&a.n_records))
            .then_with(|| a.lake_id.cmp(&b.lake_id))
    });
    Ok(ranked)
}

pub fn select_top_lakes(all: &[LakeSeries], k: usize) -> Result<Vec<u32>, DatasetError> {
    if k > all.len() {
        return Err(DatasetError::TooFewLakes {
            requested: k,
            available: all.len(),
        });
    }
    Ok(rank_lakes(all)?
        .into_iter()
        .take(k)
        .map(|r| r.lake_id)
        .collect())
}

/// Pre-test pool and recent test block of one lake. Only rows with an
/// observed SDD appear in either half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSeries {
    pub pre: LakeSeries,
    pub test: LakeSeries,
    /// Positions of `pre` rows in the series the split was made from.
    pub pre_rows: Vec<usize>,
    /// Positions of `test` rows in the series the split was made from.
    pub test_rows: Vec<usize>,
    /// Rows strictly after this date form the test block.
    pub boundary: NaiveDate,
}

impl SplitSeries {
    pub fn n_pre(&self) -> usize {
        self.pre.len()
    }

    pub fn n_test(&self) -> usize {
        self.test.len()
    }
}

/// Hold out rows dated strictly after `latest - years` as the test block.
pub fn split_test_block(series: &LakeSeries, years: u32) -> Result<SplitSeries, DatasetError> {
    if years == 0 {
        return Err(DatasetError::ZeroYears);
    }
    let observed: Vec<usize> = series
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.sdd.is_some())
        .map(|(i, _)| i)
        .collect();
    let insufficient = |pre, test| DatasetError::InsufficientHistory {
        lake_id: series.lake_id,
        years,
        pre,
        test,
    };
    let latest = observed
        .iter()
        .map(|&i| series.records[i].date)
        .max()
        .ok_or_else(|| insufficient(0, 0))?;
    let boundary = latest
        .checked_sub_months(Months::new(12 * years))
        .unwrap_or(NaiveDate::MIN);

    let (test_rows, pre_rows): (Vec<usize>, Vec<usize>) = observed
        .into_iter()
        .partition(|&i| series.records[i].date.cmp(&boundary) == Ordering::Greater);
    if pre_rows.is_empty() || test_rows.is_empty() {
        return Err(insufficient(pre_rows.len(), test_rows.len()));
    }
    let subset = |rows: &[usize]| LakeSeries {
        lake_id: series.lake_id,
        lake_name: series.lake_name.clone(),
        feature_schema: series.feature_schema.clone(),
        records: rows.iter().map(|&i| series.records[i].clone()).collect(),
    };
    Ok(SplitSeries {
        pre: subset(&pre_rows),
        test: subset(&test_rows),
        pre_rows,
        test_rows,
        boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn series(lake_id: u32, rows: Vec<(NaiveDate, Option<f64>, Vec<Option<f64>>)>) -> LakeSeries {
        let p = rows.first().map_or(0, |r| r.2.len());
        LakeSeries {
            lake_id,
            lake_name: format!("Lake {lake_id}"),
            feature_schema: (0..p).map(|j| format!("f{j}")).collect(),
            records: rows
                .into_iter()
                .map(|(date, sdd, covariates)| Record {
                    lake_id,
                    lake_name: format!("Lake {lake_id}"),
                    date,
                    sdd,
                    covariates,
                    sdd_to_bottom: false,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_file_with_header() {
        let csv = "midas,lake,date,seccbot,zS_m,TSc\n";
        let out = parse_dataset(csv.as_bytes(), &IngestConfig::default()).unwrap();
        assert!(out.lakes.is_empty());
        assert!(out.rejected.is_empty());
        assert_eq!(out.feature_schema, vec!["TSc"]);
    }

    #[test]
    fn shuffled_rows_are_grouped_and_sorted() {
        let csv = "midas,lake,date,seccbot,zS_m,TSc\n\
                   20,B,2001-06-01,No,3.0,11\n\
                   10,A,2003-06-01,No,4.0,12\n\
                   20,B,1999-06-01,,3.5,13\n\
                   10,A,2001-06-01,No,4.2,14\n\
                   20,B,2000-06-01,No,3.1,15\n\
                   10,A,2002-06-01,No,4.1,16\n";
        let out = parse_dataset(csv.as_bytes(), &IngestConfig::default()).unwrap();
        assert_eq!(out.lakes.len(), 2);
        for lake in &out.lakes {
            assert_eq!(lake.len(), 3);
            assert!(lake.records.windows(2).all(|w| w[0].date <= w[1].date));
        }
        assert_eq!(out.lakes[0].lake_id, 10);
        assert_eq!(out.lakes[0].lake_name, "A");
        assert_eq!(out.lakes[1].records[0].covariates, vec![Some(13.0)]);
    }

    #[test]
    fn na_cell_marks_only_that_entry() {
        let csv = "midas,lake,date,seccbot,zS_m,TSc,zTm\n\
                   5,Pond,2010-07-01,No,4.5,NA,3.25\n\
                   5,Pond,2010-08-01,No,,18.5,\n";
        let out = parse_dataset(csv.as_bytes(), &IngestConfig::default()).unwrap();
        let recs = &out.lakes[0].records;
        assert_eq!(recs[0].sdd, Some(4.5));
        assert_eq!(recs[0].covariates, vec![None, Some(3.25)]);
        assert_eq!(recs[1].sdd, None);
        assert_eq!(recs[1].covariates, vec![Some(18.5), None]);
    }

    #[test]
    fn custom_na_token() {
        let csv = "midas,date,zS_m,TSc\n5,2010-07-01,4.5,-999\n";
        let cfg = IngestConfig {
            na_tokens: vec!["-999".into()],
        };
        let out = parse_dataset(csv.as_bytes(), &cfg).unwrap();
        assert_eq!(out.lakes[0].records[0].covariates, vec![None]);
    }

    #[test]
    fn missing_mandatory_column_is_schema_error() {
        let csv = "midas,lake,seccbot,zS_m\n";
        let err = parse_dataset(csv.as_bytes(), &IngestConfig::default()).unwrap_err();
        assert!(matches!(err, DatasetError::MissingColumn("date")));
        let csv = "midas,date,TSc\n";
        let err = parse_dataset(csv.as_bytes(), &IngestConfig::default()).unwrap_err();
        assert!(matches!(err, DatasetError::MissingColumn("zS_m")));
    }

    #[test]
    fn bad_rows_are_collected_with_line_numbers() {
        let csv = "midas,date,zS_m,TSc\n\
                   1,2010-07-01,4.5,1\n\
                   1,2010-13-01,4.5,1\n\
                   1,2010-07-03,abc,1\n\
                   x,2010-07-04,4.5,1\n\
                   1,2010-07-05,-1,1\n\
                   1,2010-07-06,4.0,2\n";
        let out = parse_dataset(csv.as_bytes(), &IngestConfig::default()).unwrap();
        assert_eq!(out.lakes[0].len(), 2);
        let lines: Vec<u64> = out.rejected.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![3, 4, 5, 6]);
    }

    #[test]
    fn write_then_parse_preserves_series() {
        let s = series(
            7,
            vec![
                (date(2000, 1, 1), Some(2.5), vec![Some(1.0), None]),
                (date(2000, 2, 1), None, vec![Some(0.125), Some(-3.0)]),
            ],
        );
        let mut buf = Vec::new();
        write_dataset(&mut buf, std::slice::from_ref(&s)).unwrap();
        let back = parse_dataset(buf.as_slice(), &IngestConfig::default()).unwrap();
        assert_eq!(back.lakes, vec![s]);
    }

    #[test]
    fn exclusions() {
        let mut s = series(
            1,
            (0..10)
                .map(|i| (date(2000, 1, 1 + i), Some(2.0), vec![Some(1.0), Some(2.0)]))
                .collect(),
        );
        assert_eq!(apply_exclusions(&s), s);

        for i in [1, 4, 8] {
            s.records[i].sdd_to_bottom = true;
        }
        s.feature_schema[1] = "Chla".into();
        let out = apply_exclusions(&s);
        assert_eq!(out.len(), 7);
        assert_eq!(out.feature_schema, vec!["f0"]);
        assert!(out.records.iter().all(|r| r.covariates.len() == 1));
        assert_eq!(apply_exclusions(&out), out);
    }

    #[test]
    fn missingness_counts() {
        let s = series(
            1,
            vec![
                (date(2000, 1, 1), Some(1.0), vec![Some(1.0), None]),
                (date(2000, 1, 2), Some(1.0), vec![Some(1.0), None]),
                (date(2000, 1, 3), Some(1.0), vec![Some(1.0), Some(3.0)]),
                (date(2000, 1, 4), Some(1.0), vec![Some(1.0), None]),
            ],
        );
        let prof = missingness_profile(&s).unwrap();
        assert_eq!(prof.per_feature[0].1, 0.0);
        assert_eq!(prof.per_feature[1].1, 0.75);
        assert_eq!(prof.lake_mean, 0.375);

        let empty = series(2, vec![]);
        assert!(missingness_profile(&empty).is_err());
    }

    fn lake_with_missing(lake_id: u32, t: usize, missing: usize) -> LakeSeries {
        series(
            lake_id,
            (0..t)
                .map(|i| {
                    let v = if i < missing { None } else { Some(1.0) };
                    (
                        date(2000, 1, 1) + chrono::Days::new(i as u64),
                        Some(1.0),
                        vec![v],
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn top_lakes_order_and_ties() {
        let lakes = vec![
            lake_with_missing(1, 10, 2),
            lake_with_missing(2, 10, 5),
            lake_with_missing(3, 10, 1),
        ];
        assert_eq!(select_top_lakes(&lakes, 2).unwrap(), vec![3, 1]);
        assert_eq!(select_top_lakes(&lakes, 3).unwrap(), vec![3, 1, 2]);
        assert!(matches!(
            select_top_lakes(&lakes, 4),
            Err(DatasetError::TooFewLakes { .. })
        ));

        // equal missingness: longer record first, then smaller id
        let tied = vec![
            lake_with_missing(9, 10, 0),
            lake_with_missing(4, 10, 0),
            lake_with_missing(5, 20, 0),
        ];
        assert_eq!(select_top_lakes(&tied, 3).unwrap(), vec![5, 4, 9]);
    }

    #[test]
    fn split_even_annual() {
        let s = series(
            1,
            (2011..=2020)
                .map(|y| (date(y, 7, 1), Some(3.0), vec![Some(1.0)]))
                .collect(),
        );
        let split = split_test_block(&s, 5).unwrap();
        assert_eq!(split.n_pre(), 5);
        assert_eq!(split.n_test(), 5);
        assert_eq!(split.boundary, date(2015, 7, 1));
    }

    #[test]
    fn split_boundary_convention() {
        // monthly samples 1990-01-31 .. 2020-12-31
        let mut rows = Vec::new();
        for y in 1990..=2020 {
            for m in 1..=12u32 {
                let last = date(y, m, 1)
                    .checked_add_months(Months::new(1))
                    .unwrap()
                    .pred_opt()
                    .unwrap();
                rows.push((last, Some(3.0), vec![Some(1.0)]));
            }
        }
        let s = series(1, rows);
        let split = split_test_block(&s, 5).unwrap();
        assert_eq!(split.boundary, date(2015, 12, 31));
        assert_eq!(split.test.records[0].date, date(2016, 1, 31));
        assert_eq!(split.pre.records.last().unwrap().date, date(2015, 12, 31));
        assert_eq!(split.n_test(), 60);
    }

    #[test]
    fn split_single_year_is_insufficient() {
        let s = series(
            1,
            (1..=6)
                .map(|m| (date(2019, m, 1), Some(3.0), vec![Some(1.0)]))
                .collect(),
        );
        assert!(matches!(
            split_test_block(&s, 5),
            Err(DatasetError::InsufficientHistory { pre: 0, .. })
        ));
    }

    #[test]
    fn split_drops_missing_sdd_and_keeps_row_positions() {
        let s = series(
            1,
            vec![
                (date(2000, 1, 1), Some(3.0), vec![Some(1.0)]),
                (date(2001, 1, 1), None, vec![Some(1.0)]),
                (date(2002, 1, 1), Some(3.0), vec![Some(1.0)]),
                (date(2010, 1, 1), None, vec![Some(1.0)]),
                (date(2011, 1, 1), Some(3.0), vec![Some(1.0)]),
            ],
        );
        let split = split_test_block(&s, 2).unwrap();
        assert_eq!(split.pre_rows, vec![0, 2]);
        assert_eq!(split.test_rows, vec![4]);
    }

    prop_compose! {
        fn arb_lakes()(specs in prop::collection::vec((1usize..12, 0usize..12, 1usize..4), 1..8))
            -> Vec<LakeSeries> {
            specs
                .into_iter()
                .enumerate()
                .map(|(i, (t, miss, p))| {
                    let rows = (0..t)
                        .map(|r| {
                            let cov = (0..p)
                                .map(|j| if (r + j) % 12 < miss { None } else { Some(r as f64) })
                                .collect();
                            (date(2000, 1, 1) + chrono::Days::new(r as u64), Some(1.0), cov)
                        })
                        .collect();
                    series(100 + i as u32, rows)
                })
                .collect()
        }
    }

    proptest! {
        #[test]
        fn lake_mean_is_exact_mean_of_fractions(lakes in arb_lakes()) {
            use num_rational::Ratio;
            for s in &lakes {
                let prof = missingness_profile(s).unwrap();
                let t = s.len() as i64;
                let mut exact = Ratio::from_integer(0i64);
                for (j, (_, m)) in prof.per_feature.iter().enumerate() {
                    prop_assert!((0.0..=1.0).contains(m));
                    let count = s.records.iter().filter(|r| r.covariates[j].is_none()).count() as i64;
                    let mj = Ratio::new(count, t);
                    prop_assert!((m - *mj.numer() as f64 / *mj.denom() as f64).abs() < 1e-15);
                    exact += mj;
                }
                exact /= prof.per_feature.len() as i64;
                let exact_f = *exact.numer() as f64 / *exact.denom() as f64;
                prop_assert!((prof.lake_mean - exact_f).abs() < 1e-15);
            }
        }

        #[test]
        fn ranking_is_permutation_invariant(lakes in arb_lakes(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = lakes.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let k = lakes.len();
            prop_assert_eq!(select_top_lakes(&lakes, k).unwrap(), select_top_lakes(&shuffled, k).unwrap());
        }

        #[test]
        fn split_partitions_observed_rows(
            gaps in prop::collection::vec((1u64..200, prop::bool::ANY), 2..60),
            years in 1u32..4,
        ) {
            let mut d = date(2000, 1, 1);
            let rows: Vec<_> = gaps.iter().map(|&(g, obs)| {
                d = d + chrono::Days::new(g);
                (d, if obs { Some(2.0) } else { None }, vec![Some(1.0)])
            }).collect();
            let s = series(1, rows);
            if let Ok(split) = split_test_block(&s, years) {
                let mut all: Vec<usize> = split.pre_rows.iter().chain(&split.test_rows).copied().collect();
                all.sort_unstable();
                let observed: Vec<usize> = (0..s.len()).filter(|&i| s.records[i].sdd.is_some()).collect();
                prop_assert_eq!(all, observed);
                let max_pre = split.pre.records.iter().map(|r| r.date).max().unwrap();
                let min_test = split.test.records.iter().map(|r| r.date).min().unwrap();
                prop_assert!(max_pre < min_test);
            }
        }
    }
}
