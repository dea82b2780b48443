//! Trip telemetry ingestion: CSV parsing with per-row rejection, drive-cycle
//! exclusion rules, per-unit aggregation into the 14 covariates plus the
//! fuel-consumption target, and pooled max-min scaling.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariate order is fixed; every matrix, CSV and report uses it.
pub const COVARIATE_NAMES: [&str; 14] = [
    "share_soc_start_high",
    "share_soc_end_low",
    "n_weekday_trips",
    "n_weekend_trips",
    "avg_trip_distance",
    "max_trip_distance",
    "avg_trip_speed",
    "max_trip_speed",
    "share_distance_hybrid",
    "share_trips_trailer",
    "avg_engine_starts",
    "temp_avg",
    "temp_min",
    "temp_max",
];

pub const TARGET_NAME: &str = "target";

/// Column labels for a covariate vector of any width: the Table-1 names for
/// the full 14, generic `x1..xI` otherwise (synthetic studies with fewer
/// covariates).
pub fn covariate_names(n: usize) -> Vec<String> {
    if n == COVARIATE_NAMES.len() {
        COVARIATE_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=n).map(|i| format!("x{i}")).collect()
    }
}

/// One key-on/key-off drive cycle. One CSV row is one cycle is one trip.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveCycleRecord {
    pub unit_id: String,
    pub cycle_id: String,
    pub start_time: DateTime<Utc>,
    /// km
    pub distance: f64,
    /// seconds
    pub duration: f64,
    /// grams
    pub fuel: f64,
    /// km
    pub odometer: f64,
    /// percent
    pub soc_start: f64,
    /// percent
    pub soc_end: f64,
    /// km/h
    pub avg_speed: f64,
    /// km/h
    pub max_speed: f64,
    /// km, at most `distance`
    pub hybrid_distance: f64,
    pub trailer_attached: bool,
    pub engine_starts: u32,
    /// degrees Celsius
    pub ambient_temp_avg: f64,
    pub ambient_temp_min: f64,
    pub ambient_temp_max: f64,
}

const TRIP_COLUMNS: [&str; 17] = [
    "unit_id",
    "cycle_id",
    "start_time",
    "distance",
    "duration",
    "fuel",
    "odometer",
    "soc_start",
    "soc_end",
    "avg_speed",
    "max_speed",
    "hybrid_distance",
    "trailer_attached",
    "engine_starts",
    "ambient_temp_avg",
    "ambient_temp_min",
    "ambient_temp_max",
];

/// A row (or a whole unit) that could not be used, with the reason.
#[derive(Debug, Clone, Serialize)]
pub struct RejectedRow {
    pub unit_id: String,
    pub cycle_id: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct ParseOutcome {
    pub records: Vec<DriveCycleRecord>,
    pub rejects: Vec<RejectedRow>,
}

/// Parses trip telemetry CSV. A missing column is fatal; a malformed or
/// invariant-violating row goes to the rejects report with the offending
/// cell named, never silently dropped.
pub fn parse_cycles<R: Read>(reader: R) -> Result<ParseOutcome> {
    let mut csv_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let mut idx = BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        idx.insert(h.to_string(), i);
    }
    for col in TRIP_COLUMNS {
        if !idx.contains_key(col) {
            return Err(Error::MissingColumn(col.to_string()));
        }
    }

    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for row in csv_reader.records() {
        let row = row?;
        let field = |name: &str| row.get(idx[name]).unwrap_or("").to_string();
        let unit_id = field("unit_id");
        let cycle_id = field("cycle_id");
        match parse_row(&row, &idx) {
            Ok(rec) => records.push(rec),
            Err(reason) => rejects.push(RejectedRow { unit_id, cycle_id, reason }),
        }
    }
    Ok(ParseOutcome { records, rejects })
}

fn parse_row(row: &csv::StringRecord, idx: &BTreeMap<String, usize>) -> std::result::Result<DriveCycleRecord, String> {
    let raw = |name: &str| row.get(idx[name]).unwrap_or("");
    let float = |name: &str| -> std::result::Result<f64, String> {
        raw(name)
            .parse::<f64>()
            .map_err(|_| format!("field `{name}`: invalid number `{}`", raw(name)))
    };
    let non_negative = |name: &str| -> std::result::Result<f64, String> {
        let v = float(name)?;
        if v < 0.0 {
            return Err(format!("field `{name}`: negative value {v}"));
        }
        Ok(v)
    };

    let unit_id = raw("unit_id").to_string();
    if unit_id.is_empty() {
        return Err("field `unit_id`: empty".into());
    }
    let cycle_id = raw("cycle_id").to_string();
    if cycle_id.is_empty() {
        return Err("field `cycle_id`: empty".into());
    }
    let start_time = DateTime::parse_from_rfc3339(raw("start_time"))
        .map_err(|_| format!("field `start_time`: invalid timestamp `{}`", raw("start_time")))?
        .with_timezone(&Utc);

    let distance = non_negative("distance")?;
    let duration = non_negative("duration")?;
    let fuel = non_negative("fuel")?;
    let odometer = non_negative("odometer")?;
    let soc_start = float("soc_start")?;
    let soc_end = float("soc_end")?;
    for (name, v) in [("soc_start", soc_start), ("soc_end", soc_end)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(format!("field `{name}`: {v} outside [0,100]"));
        }
    }
    let avg_speed = non_negative("avg_speed")?;
    let max_speed = non_negative("max_speed")?;
    let hybrid_distance = non_negative("hybrid_distance")?;
    if hybrid_distance > distance {
        return Err(format!(
            "field `hybrid_distance`: {hybrid_distance} exceeds distance {distance}"
        ));
    }
    let trailer_attached = match raw("trailer_attached").to_ascii_lowercase().as_str() {
        "true" | "1" => true,
        "false" | "0" => false,
        other => return Err(format!("field `trailer_attached`: invalid boolean `{other}`")),
    };
    let engine_starts = raw("engine_starts")
        .parse::<u32>()
        .map_err(|_| format!("field `engine_starts`: invalid count `{}`", raw("engine_starts")))?;
    let ambient_temp_avg = float("ambient_temp_avg")?;
    let ambient_temp_min = float("ambient_temp_min")?;
    let ambient_temp_max = float("ambient_temp_max")?;
    if !(ambient_temp_min <= ambient_temp_avg && ambient_temp_avg <= ambient_temp_max) {
        return Err(format!(
            "ambient temperatures violate min <= avg <= max ({ambient_temp_min}, {ambient_temp_avg}, {ambient_temp_max})"
        ));
    }

    Ok(DriveCycleRecord {
        unit_id,
        cycle_id,
        start_time,
        distance,
        duration,
        fuel,
        odometer,
        soc_start,
        soc_end,
        avg_speed,
        max_speed,
        hybrid_distance,
        trailer_attached,
        engine_starts,
        ambient_temp_avg,
        ambient_temp_min,
        ambient_temp_max,
    })
}

#[derive(Debug)]
pub struct FilterOutcome {
    pub kept: Vec<DriveCycleRecord>,
    pub excluded: Vec<(DriveCycleRecord, String)>,
}

/// Drive-cycle exclusion rules. All inequalities are strict, so records at
/// exactly 100 km odometer, 200 km/h, 0.5 km or 60 s are kept.
pub fn filter_cycles(records: Vec<DriveCycleRecord>) -> FilterOutcome {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for rec in records {
        let reason = if rec.odometer < 100.0 {
            Some("odometer < 100 km")
        } else if rec.avg_speed > 200.0 {
            Some("avg_speed > 200 km/h")
        } else if rec.distance < 0.5 {
            Some("distance < 0.5 km")
        } else if rec.duration < 60.0 {
            Some("duration < 60 s")
        } else {
            None
        };
        match reason {
            Some(r) => excluded.push((rec, r.to_string())),
            None => kept.push(rec),
        }
    }
    FilterOutcome { kept, excluded }
}

/// Per-unit feature row. `group` is 0 for control, 1 for treatment;
/// `covariates` follows [`COVARIATE_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFeatureRow {
    pub unit_id: String,
    pub group: u8,
    pub target: f64,
    pub covariates: Vec<f64>,
}

/// Aggregates all kept trips of one unit into its feature row. Weekday and
/// weekend counts come from the UTC day of week; the schema carries no
/// timezone. Temperature averaging is unweighted across trips.
pub fn aggregate_unit(records: &[DriveCycleRecord], group: u8) -> Result<UnitFeatureRow> {
    assert!(!records.is_empty(), "aggregate_unit needs at least one record");
    let unit_id = records[0].unit_id.clone();
    debug_assert!(records.iter().all(|r| r.unit_id == unit_id));

    let n = records.len() as f64;
    let total_distance: f64 = records.iter().map(|r| r.distance).sum();
    let total_duration: f64 = records.iter().map(|r| r.duration).sum();
    if total_distance <= 0.0 {
        return Err(Error::UnitRejected {
            unit_id,
            reason: "total distance is zero; cannot form g/km target".into(),
        });
    }
    if total_duration <= 0.0 {
        return Err(Error::UnitRejected {
            unit_id,
            reason: "total duration is zero; cannot form trip speed".into(),
        });
    }

    let total_fuel: f64 = records.iter().map(|r| r.fuel).sum();
    let count = |pred: fn(&DriveCycleRecord) -> bool| records.iter().filter(|r| pred(r)).count() as f64;

    let n_weekday = count(|r| r.start_time.weekday().number_from_monday() <= 5);
    let n_weekend = n - n_weekday;

    let covariates = vec![
        count(|r| r.soc_start > 80.0) / n,
        count(|r| r.soc_end < 21.0) / n,
        n_weekday,
        n_weekend,
        total_distance / n,
        records.iter().map(|r| r.distance).fold(f64::MIN, f64::max),
        3600.0 * total_distance / total_duration,
        records.iter().map(|r| r.max_speed).fold(f64::MIN, f64::max),
        records.iter().map(|r| r.hybrid_distance).sum::<f64>() / total_distance,
        count(|r| r.trailer_attached) / n,
        records.iter().map(|r| f64::from(r.engine_starts)).sum::<f64>() / n,
        records.iter().map(|r| r.ambient_temp_avg).sum::<f64>() / n,
        records.iter().map(|r| r.ambient_temp_min).fold(f64::MAX, f64::min),
        records.iter().map(|r| r.ambient_temp_max).fold(f64::MIN, f64::max),
    ];

    Ok(UnitFeatureRow { unit_id, group, target: total_fuel / total_distance, covariates })
}

/// Per-column (min, max) recorded when scaling, so raw values stay
/// recoverable. `covariates` aligns with the covariate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub target: (f64, f64),
    pub covariates: Vec<(f64, f64)>,
}

impl ScalingParams {
    /// Identity parameters for data already living in [0,1].
    pub fn identity(n_covariates: usize, target: (f64, f64)) -> Self {
        Self { target, covariates: vec![(0.0, 1.0); n_covariates] }
    }
}

/// N units × 14 covariates plus the target, either raw or max-min scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<UnitFeatureRow>,
    pub scaling_params: Option<ScalingParams>,
    pub scaled: bool,
}

impl FeatureMatrix {
    pub fn unscaled(rows: Vec<UnitFeatureRow>) -> Self {
        Self { rows, scaling_params: None, scaled: false }
    }

    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    pub fn n_units(&self) -> usize {
        self.rows.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.rows.first().map_or(0, |r| r.covariates.len())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        covariate_names(self.n_covariates())
    }

    pub fn covariate_column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.covariates[j]).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.target).collect()
    }

    pub fn groups(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.group).collect()
    }

    pub fn unit_ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.unit_id.clone()).collect()
    }

    pub fn group_counts(&self) -> (usize, usize) {
        let treated = self.rows.iter().filter(|r| r.group == 1).count();
        (self.rows.len() - treated, treated)
    }
}

#[derive(Debug)]
pub struct ScaleOutcome {
    pub matrix: FeatureMatrix,
    /// Constant columns, forced to 0.0 everywhere.
    pub degenerate_columns: Vec<String>,
}

/// Max-min scales every covariate column and the target over all units,
/// both groups pooled. Constant columns scale to 0.0 and are reported.
pub fn minmax_scale(matrix: &FeatureMatrix) -> Result<ScaleOutcome> {
    if matrix.is_scaled() {
        return Err(Error::InvalidConfig("feature matrix is already scaled".into()));
    }
    if matrix.n_units() < 2 {
        return Err(Error::TooFewUnits(matrix.n_units()));
    }

    let names = matrix.covariate_names();
    let n_cov = matrix.n_covariates();
    let mut degenerate = Vec::new();

    let mut scale_column = |values: &[f64], name: &str| -> ((f64, f64), Vec<f64>) {
        let min = values.iter().cloned().fold(f64::MAX, f64::min);
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        if max == min {
            log::warn!("column `{name}` is constant at {min}; scaled to 0.0 everywhere");
            degenerate.push(name.to_string());
            ((min, max), vec![0.0; values.len()])
        } else {
            ((min, max), values.iter().map(|v| (v - min) / (max - min)).collect())
        }
    };

    let (target_mm, target_scaled) = scale_column(&matrix.targets(), TARGET_NAME);
    let mut cov_params = Vec::with_capacity(n_cov);
    let mut cov_scaled = Vec::with_capacity(n_cov);
    for j in 0..n_cov {
        let (mm, vals) = scale_column(&matrix.covariate_column(j), &names[j]);
        cov_params.push(mm);
        cov_scaled.push(vals);
    }

    let rows = matrix
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| UnitFeatureRow {
            unit_id: r.unit_id.clone(),
            group: r.group,
            target: target_scaled[i],
            covariates: (0..n_cov).map(|j| cov_scaled[j][i]).collect(),
        })
        .collect();

    Ok(ScaleOutcome {
        matrix: FeatureMatrix {
            rows,
            scaling_params: Some(ScalingParams { target: target_mm, covariates: cov_params }),
            scaled: true,
        },
        degenerate_columns: degenerate,
    })
}

/// Inverts [`minmax_scale`] using the recorded parameters.
pub fn unscale(matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
    let params = matrix
        .scaling_params
        .as_ref()
        .ok_or(Error::InvalidConfig("no scaling parameters recorded".into()))?;
    let back = |v: f64, (min, max): (f64, f64)| v * (max - min) + min;
    let rows = matrix
        .rows
        .iter()
        .map(|r| UnitFeatureRow {
            unit_id: r.unit_id.clone(),
            group: r.group,
            target: back(r.target, params.target),
            covariates: r
                .covariates
                .iter()
                .zip(&params.covariates)
                .map(|(&v, &mm)| back(v, mm))
                .collect(),
        })
        .collect();
    Ok(FeatureMatrix::unscaled(rows))
}

#[derive(Debug)]
pub struct BuildOutcome {
    /// Unscaled feature matrix, rows sorted by unit id.
    pub matrix: FeatureMatrix,
    /// Units dropped because aggregation failed (reason recorded).
    pub unit_rejects: Vec<RejectedRow>,
    /// Units present in telemetry but absent from the assignment file.
    pub unassigned: Vec<String>,
}

/// Groups kept records per unit, joins the control/treatment assignment and
/// aggregates. Units without an assignment are dropped with a warning.
pub fn build_features(
    records: Vec<DriveCycleRecord>,
    assignments: &BTreeMap<String, u8>,
) -> Result<BuildOutcome> {
    if records.is_empty() {
        return Err(Error::NoCyclesAfterFilter);
    }
    let mut per_unit: BTreeMap<String, Vec<DriveCycleRecord>> = BTreeMap::new();
    for rec in records {
        per_unit.entry(rec.unit_id.clone()).or_default().push(rec);
    }

    let mut rows = Vec::new();
    let mut unit_rejects = Vec::new();
    let mut unassigned = Vec::new();
    for (unit_id, recs) in &per_unit {
        let Some(&group) = assignments.get(unit_id) else {
            log::warn!("unit `{unit_id}` has no group assignment; dropped");
            unassigned.push(unit_id.clone());
            continue;
        };
        match aggregate_unit(recs, group) {
            Ok(row) => rows.push(row),
            Err(Error::UnitRejected { unit_id, reason }) => {
                log::warn!("unit `{unit_id}` rejected: {reason}");
                unit_rejects.push(RejectedRow { unit_id, cycle_id: String::new(), reason });
            }
            Err(other) => return Err(other),
        }
    }
    Ok(BuildOutcome { matrix: FeatureMatrix::unscaled(rows), unit_rejects, unassigned })
}

/// Reads the `unit_id,group` assignment CSV; group must be 0 or 1.
pub fn parse_assignments<R: Read>(reader: R) -> Result<BTreeMap<String, u8>> {
    let mut csv_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let (unit_idx, group_idx) = match (find("unit_id"), find("group")) {
        (Some(u), Some(g)) => (u, g),
        (None, _) => return Err(Error::MissingColumn("unit_id".into())),
        (_, None) => return Err(Error::MissingColumn("group".into())),
    };
    let mut out = BTreeMap::new();
    for row in csv_reader.records() {
        let row = row?;
        let unit = row.get(unit_idx).unwrap_or("").to_string();
        let group_raw = row.get(group_idx).unwrap_or("");
        let group: u8 = group_raw.parse().map_err(|_| {
            Error::InvalidConfig(format!("assignment group for `{unit}` must be 0 or 1, got `{group_raw}`"))
        })?;
        if group > 1 {
            return Err(Error::InvalidConfig(format!(
                "assignment group for `{unit}` must be 0 or 1, got {group}"
            )));
        }
        out.insert(unit, group);
    }
    Ok(out)
}

/// Writes the features CSV: `unit_id,group,target,<covariate names>`.
pub fn write_features_csv<W: Write>(matrix: &FeatureMatrix, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["unit_id".to_string(), "group".to_string(), TARGET_NAME.to_string()];
    header.extend(matrix.covariate_names());
    w.write_record(&header)?;
    for row in &matrix.rows {
        let mut rec = vec![row.unit_id.clone(), row.group.to_string(), format!("{}", row.target)];
        rec.extend(row.covariates.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a features CSV back. The matrix counts as scaled when every target
/// and covariate value lies in [0,1] (the convention all tools here write).
pub fn read_features_csv<R: Read>(reader: R) -> Result<FeatureMatrix> {
    let mut csv_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    if headers.len() < 4 {
        return Err(Error::MalformedFeatures("expected unit_id,group,target,covariates".into()));
    }
    for (i, expected) in ["unit_id", "group", TARGET_NAME].iter().enumerate() {
        if headers.get(i) != Some(expected) {
            return Err(Error::MalformedFeatures(format!("column {i} must be `{expected}`")));
        }
    }
    let n_cov = headers.len() - 3;
    let mut rows = Vec::new();
    for row in csv_reader.records() {
        let row = row?;
        if row.len() != headers.len() {
            return Err(Error::MalformedFeatures("ragged row".into()));
        }
        let group: u8 = row[1]
            .parse()
            .map_err(|_| Error::MalformedFeatures(format!("bad group `{}`", &row[1])))?;
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::MalformedFeatures(format!("bad number `{s}`")))
        };
        let target = parse_f(&row[2])?;
        let covariates = (0..n_cov).map(|j| parse_f(&row[3 + j])).collect::<Result<Vec<_>>>()?;
        rows.push(UnitFeatureRow { unit_id: row[0].to_string(), group, target, covariates });
    }
    let in_unit = |v: f64| (0.0..=1.0).contains(&v);
    let scaled = !rows.is_empty()
        && rows.iter().all(|r| in_unit(r.target) && r.covariates.iter().all(|&v| in_unit(v)));
    Ok(FeatureMatrix { rows, scaling_params: None, scaled })
}

/// Writes the rejects CSV: `unit_id,cycle_id,reason`.
pub fn write_rejects_csv<W: Write>(rejects: &[RejectedRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit_id", "cycle_id", "reason"])?;
    for r in rejects {
        w.write_record([&r.unit_id, &r.cycle_id, &r.reason])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    pub(crate) fn trip_row(
        unit: &str,
        cycle: &str,
        start: &str,
        distance: f64,
        duration: f64,
        fuel: f64,
        odometer: f64,
        soc: (f64, f64),
        speeds: (f64, f64),
        hybrid: f64,
        trailer: bool,
        starts: u32,
        temps: (f64, f64, f64),
    ) -> String {
        format!(
            "{unit},{cycle},{start},{distance},{duration},{fuel},{odometer},{},{},{},{},{hybrid},{trailer},{starts},{},{},{}",
            soc.0, soc.1, speeds.0, speeds.1, temps.0, temps.1, temps.2
        )
    }

    fn header() -> String {
        TRIP_COLUMNS.join(",")
    }

    fn clean_row(unit: &str, cycle: &str) -> String {
        trip_row(
            unit,
            cycle,
            "2021-01-06T09:00:00Z",
            10.0,
            1800.0,
            500.0,
            15000.0,
            (90.0, 15.0),
            (20.0, 65.0),
            8.0,
            false,
            3,
            (5.0, 2.0, 9.0),
        )
    }

    fn example_record() -> DriveCycleRecord {
        let csv = format!("{}\n{}\n", header(), clean_row("veh-001", "c1"));
        parse_cycles(csv.as_bytes()).unwrap().records.pop().unwrap()
    }

    #[test]
    fn parse_single_valid_row() {
        let csv = format!("{}\n{}\n", header(), clean_row("veh-001", "c1"));
        let out = parse_cycles(csv.as_bytes()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert!(out.rejects.is_empty());
        let rec = &out.records[0];
        assert_eq!(rec.unit_id, "veh-001");
        assert_abs_diff_eq!(rec.distance, 10.0);
        assert!(!rec.trailer_attached);
    }

    #[test]
    fn parse_rejects_bad_soc_cell() {
        let bad = clean_row("veh-001", "c1").replace("90", "abc");
        let csv = format!("{}\n{bad}\n", header());
        let out = parse_cycles(csv.as_bytes()).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.rejects.len(), 1);
        assert!(out.rejects[0].reason.contains("soc_start"));
        assert!(out.rejects[0].reason.contains("abc"));
    }

    #[test]
    fn parse_rejects_negative_distance() {
        let mut rows = vec![clean_row("a", "c1"), clean_row("b", "c2"), clean_row("c", "c3")];
        rows[1] = trip_row(
            "b",
            "c2",
            "2021-01-06T09:00:00Z",
            -1.0,
            600.0,
            100.0,
            500.0,
            (50.0, 40.0),
            (30.0, 70.0),
            0.0,
            false,
            1,
            (5.0, 1.0, 8.0),
        );
        let csv = format!("{}\n{}\n", header(), rows.join("\n"));
        let out = parse_cycles(csv.as_bytes()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.rejects.len(), 1);
        assert!(out.rejects[0].reason.contains("distance"));
    }

    #[test]
    fn parse_missing_column_is_fatal() {
        let csv = "unit_id,cycle_id\nveh-001,c1\n";
        match parse_cycles(csv.as_bytes()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "start_time"),
            other => panic!("expected MissingColumn, got {other:?}"),
        }
    }

    #[test]
    fn filter_excludes_short_distance() {
        let mut rec = example_record();
        rec.distance = 0.3;
        rec.hybrid_distance = 0.0;
        let out = filter_cycles(vec![rec]);
        assert!(out.kept.is_empty());
        assert_eq!(out.excluded[0].1, "distance < 0.5 km");
    }

    #[test]
    fn filter_keeps_boundary_values() {
        let mut rec = example_record();
        rec.odometer = 100.0;
        rec.avg_speed = 200.0;
        rec.distance = 0.5;
        rec.hybrid_distance = 0.2;
        rec.duration = 60.0;
        let out = filter_cycles(vec![rec]);
        assert_eq!(out.kept.len(), 1);
        assert!(out.excluded.is_empty());
    }

    #[test]
    fn filter_one_violation_per_rule() {
        let mut records = vec![example_record(); 5];
        records[0].odometer = 99.0;
        records[1].avg_speed = 201.0;
        records[2].distance = 0.4;
        records[2].hybrid_distance = 0.0;
        records[3].duration = 59.0;
        let out = filter_cycles(records);
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.excluded.len(), 4);
        let reasons: Vec<&str> = out.excluded.iter().map(|(_, r)| r.as_str()).collect();
        assert_eq!(
            reasons,
            vec!["odometer < 100 km", "avg_speed > 200 km/h", "distance < 0.5 km", "duration < 60 s"]
        );
    }

    #[test]
    fn filter_is_idempotent() {
        let mut records = vec![example_record(); 4];
        records[1].distance = 0.3;
        records[1].hybrid_distance = 0.0;
        let first = filter_cycles(records);
        let again = filter_cycles(first.kept.clone());
        assert_eq!(again.kept, first.kept);
        assert!(again.excluded.is_empty());
    }

    /// Two-trip aggregation example: (10 km, 500 g, weekday, soc 90→15) and
    /// (20 km, 1000 g, weekend, soc 50→30).
    #[test]
    fn aggregate_two_trip_example() {
        let trips = format!(
            "{}\n{}\n{}\n",
            header(),
            trip_row(
                "veh-001",
                "c1",
                "2021-01-06T09:00:00Z", // Wednesday
                10.0,
                1800.0,
                500.0,
                15000.0,
                (90.0, 15.0),
                (20.0, 65.0),
                8.0,
                false,
                3,
                (5.0, 2.0, 9.0),
            ),
            trip_row(
                "veh-001",
                "c2",
                "2021-01-09T10:00:00Z", // Saturday
                20.0,
                3600.0,
                1000.0,
                15200.0,
                (50.0, 30.0),
                (20.0, 90.0),
                15.0,
                true,
                5,
                (7.0, 3.0, 12.0),
            ),
        );
        let records = parse_cycles(trips.as_bytes()).unwrap().records;
        let row = aggregate_unit(&records, 0).unwrap();
        assert_abs_diff_eq!(row.target, 50.0, epsilon = 1e-12);
        let expected = [
            0.5,                       // share_soc_start_high
            0.5,                       // share_soc_end_low
            1.0,                       // weekday trips
            1.0,                       // weekend trips
            15.0,                      // avg distance
            20.0,                      // max distance
            3600.0 * 30.0 / 5400.0,    // avg speed = 20 km/h
            90.0,                      // max speed
            23.0 / 30.0,               // hybrid share
            0.5,                       // trailer share
            4.0,                       // engine starts
            6.0,                       // temp avg
            2.0,                       // temp min
            12.0,                      // temp max
        ];
        for (got, want) in row.covariates.iter().zip(expected) {
            assert_abs_diff_eq!(got, &want, epsilon = 1e-12);
        }
    }

    #[test]
    fn aggregate_single_trip() {
        let rec = example_record();
        let row = aggregate_unit(&[rec.clone()], 1).unwrap();
        assert_abs_diff_eq!(row.covariates[4], rec.distance, epsilon = 1e-12);
        assert_abs_diff_eq!(row.covariates[5], rec.distance, epsilon = 1e-12);
        assert_eq!(row.group, 1);
    }

    #[test]
    fn aggregate_trailer_free_unit() {
        let records = vec![example_record(), example_record()];
        let row = aggregate_unit(&records, 0).unwrap();
        assert_eq!(row.covariates[9], 0.0);
    }

    #[test]
    fn aggregate_rejects_zero_distance() {
        let mut rec = example_record();
        rec.distance = 0.0;
        rec.hybrid_distance = 0.0;
        match aggregate_unit(&[rec], 0) {
            Err(Error::UnitRejected { reason, .. }) => assert!(reason.contains("distance")),
            other => panic!("expected UnitRejected, got {other:?}"),
        }
    }

    fn matrix_from_columns(targets: &[f64], cov: &[Vec<f64>]) -> FeatureMatrix {
        let rows = (0..targets.len())
            .map(|i| UnitFeatureRow {
                unit_id: format!("u{i}"),
                group: (i % 2) as u8,
                target: targets[i],
                covariates: cov.iter().map(|c| c[i]).collect(),
            })
            .collect();
        FeatureMatrix::unscaled(rows)
    }

    #[test]
    fn scale_simple_column() {
        let m = matrix_from_columns(&[2.0, 4.0, 6.0], &[vec![2.0, 4.0, 6.0]]);
        let out = minmax_scale(&m).unwrap();
        assert_eq!(out.matrix.targets(), vec![0.0, 0.5, 1.0]);
        assert_eq!(out.matrix.covariate_column(0), vec![0.0, 0.5, 1.0]);
        assert!(out.degenerate_columns.is_empty());
    }

    #[test]
    fn scale_constant_column_goes_to_zero() {
        let m = matrix_from_columns(&[1.0, 2.0, 3.0], &[vec![5.0, 5.0, 5.0]]);
        let out = minmax_scale(&m).unwrap();
        assert_eq!(out.matrix.covariate_column(0), vec![0.0, 0.0, 0.0]);
        assert_eq!(out.degenerate_columns, vec!["x1".to_string()]);
    }

    #[test]
    fn scale_roundtrip_recovers_input() {
        let m = matrix_from_columns(
            &[3.0, 9.0, 6.0],
            &[vec![0.1, 0.9, 0.4], vec![-5.0, 10.0, 2.5]],
        );
        let out = minmax_scale(&m).unwrap();
        let back = unscale(&out.matrix).unwrap();
        for (orig, rec) in m.rows.iter().zip(&back.rows) {
            assert_abs_diff_eq!(orig.target, rec.target, epsilon = 1e-12);
            for (a, b) in orig.covariates.iter().zip(&rec.covariates) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn scale_requires_two_units() {
        let m = matrix_from_columns(&[1.0], &[vec![1.0]]);
        assert!(matches!(minmax_scale(&m), Err(Error::TooFewUnits(1))));
    }

    #[test]
    fn build_features_drops_unassigned_units() {
        let trips = format!(
            "{}\n{}\n{}\n",
            header(),
            clean_row("veh-001", "c1"),
            clean_row("veh-404", "c9"),
        );
        let records = parse_cycles(trips.as_bytes()).unwrap().records;
        let mut assign = BTreeMap::new();
        assign.insert("veh-001".to_string(), 0u8);
        let out = build_features(records, &assign).unwrap();
        assert_eq!(out.matrix.n_units(), 1);
        assert_eq!(out.unassigned, vec!["veh-404".to_string()]);
    }

    #[test]
    fn features_csv_roundtrip() {
        let m = matrix_from_columns(&[0.2, 0.8], &[vec![0.0, 1.0], vec![0.5, 0.25]]);
        let mut buf = Vec::new();
        write_features_csv(&m, &mut buf).unwrap();
        let back = read_features_csv(buf.as_slice()).unwrap();
        assert_eq!(back.rows, m.rows);
        assert!(back.scaled, "values in [0,1] read back as scaled");
    }

    #[test]
    fn features_csv_detects_unscaled() {
        let m = matrix_from_columns(&[2.0, 8.0], &[vec![0.0, 1.0]]);
        let mut buf = Vec::new();
        write_features_csv(&m, &mut buf).unwrap();
        let back = read_features_csv(buf.as_slice()).unwrap();
        assert!(!back.scaled);
    }

    proptest! {
        #[test]
        fn aggregation_is_permutation_invariant(seedshift in 0u64..1000) {
            let mut records: Vec<DriveCycleRecord> = (0..6)
                .map(|i| {
                    let mut r = example_record();
                    r.cycle_id = format!("c{i}");
                    r.distance = 1.0 + ((i as u64 + seedshift) % 7) as f64;
                    r.hybrid_distance = r.distance * 0.5;
                    r.fuel = 40.0 * r.distance;
                    r.soc_start = 10.0 + 12.0 * i as f64;
                    r
                })
                .collect();
            let forward = aggregate_unit(&records, 0).unwrap();
            records.reverse();
            records.rotate_left((seedshift % 6) as usize);
            let shuffled = aggregate_unit(&records, 0).unwrap();
            prop_assert!((forward.target - shuffled.target).abs() < 1e-12);
            for (a, b) in forward.covariates.iter().zip(&shuffled.covariates) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn shares_stay_in_unit_interval(n_trips in 1usize..10, socs in proptest::collection::vec(0.0f64..100.0, 10)) {
            let records: Vec<DriveCycleRecord> = (0..n_trips)
                .map(|i| {
                    let mut r = example_record();
                    r.cycle_id = format!("c{i}");
                    r.soc_start = socs[i];
                    r.soc_end = socs[(i + 1) % socs.len()];
                    r.trailer_attached = i % 3 == 0;
                    r
                })
                .collect();
            let row = aggregate_unit(&records, 0).unwrap();
            for idx in [0usize, 1, 8, 9] {
                prop_assert!((0.0..=1.0).contains(&row.covariates[idx]));
            }
            prop_assert!(row.covariates[2] >= 0.0 && row.covariates[2].fract() == 0.0);
            prop_assert!(row.covariates[3] >= 0.0 && row.covariates[3].fract() == 0.0);
        }

        #[test]
        fn scale_roundtrip_property(
            targets in proptest::collection::vec(-100.0f64..100.0, 3..12),
            shift in -50.0f64..50.0,
        ) {
            let cov: Vec<f64> = targets.iter().map(|t| t * 0.3 + shift).collect();
            let m = matrix_from_columns(&targets, &[cov]);
            let out = minmax_scale(&m).unwrap();
            for row in &out.matrix.rows {
                prop_assert!((0.0..=1.0).contains(&row.target));
                prop_assert!((0.0..=1.0).contains(&row.covariates[0]));
            }
            let back = unscale(&out.matrix).unwrap();
            for (orig, rec) in m.rows.iter().zip(&back.rows) {
                prop_assert!((orig.target - rec.target).abs() <= 1e-12 * orig.target.abs().max(1.0));
            }
        }
    }
}
