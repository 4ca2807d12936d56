//! Weather-station CSV ingestion.
//!
//! Stations file: `station_id,name,latitude,longitude`. Measurements file:
//! `station_id,date,<column>...` with ISO dates (which compare correctly as
//! strings). Per station, the input period's rows of the input columns are
//! fitted to a Gaussian by maximum likelihood; the target period's rows of
//! the target columns become the raw target sample set.

use std::collections::HashMap;
use std::path::Path;

use crate::data::{split, Dataset, Meta, SplitKind};
use crate::gaussian::{mle_fit, GaussianField, SampleSet};
use crate::graph::geo_graph;
use crate::{Error, Result};

/// Inclusive ISO date range.
#[derive(Debug, Clone)]
pub struct DateRange {
    pub start: String,
    pub end: String,
}

impl DateRange {
    pub fn contains(&self, date: &str) -> bool {
        self.start.as_str() <= date && date <= self.end.as_str()
    }
}

/// Everything the loader needs besides the two file paths.
#[derive(Debug, Clone)]
pub struct WeatherSpec {
    pub radius_km: f64,
    pub input_columns: Vec<String>,
    pub target_columns: Vec<String>,
    pub input_period: DateRange,
    pub target_period: DateRange,
    pub split_seed: u64,
}

struct Station {
    id: String,
    coord: (f64, f64),
}

fn required_column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("missing required column '{name}'")))
}

fn parse_stations(path: &Path) -> Result<Vec<Station>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let id_col = required_column(&headers, "station_id")?;
    let lat_col = required_column(&headers, "latitude")?;
    let lon_col = required_column(&headers, "longitude")?;
    required_column(&headers, "name")?;
    let mut stations = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse = |col: usize, what: &str| -> Result<f64> {
            record[col]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Schema(format!("bad {what} value '{}'", &record[col])))
        };
        stations.push(Station {
            id: record[id_col].to_string(),
            coord: (parse(lat_col, "latitude")?, parse(lon_col, "longitude")?),
        });
    }
    Ok(stations)
}

/// Builds a dataset from weather CSVs: stations become nodes linked within
/// `radius_km`, inputs are MLE Gaussians over the input period, targets are
/// the raw target-period rows. Stations without usable rows in either period
/// are dropped with a warning, as are stations left without any neighbor.
pub fn load_weather(
    stations_path: &Path,
    measurements_path: &Path,
    spec: &WeatherSpec,
) -> Result<(Dataset, Vec<String>)> {
    let stations = parse_stations(stations_path)?;
    if stations.len() < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 stations, found {}",
            stations.len()
        )));
    }

    let mut reader = csv::Reader::from_path(measurements_path)?;
    let headers = reader.headers()?.clone();
    let id_col = required_column(&headers, "station_id")?;
    let date_col = required_column(&headers, "date")?;
    let in_cols: Vec<usize> = spec
        .input_columns
        .iter()
        .map(|c| required_column(&headers, c))
        .collect::<Result<_>>()?;
    let out_cols: Vec<usize> = spec
        .target_columns
        .iter()
        .map(|c| required_column(&headers, c))
        .collect::<Result<_>>()?;

    let mut input_rows: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
    let mut target_rows: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let id = record[id_col].to_string();
        let date = &record[date_col];
        let take = |cols: &[usize]| -> Option<Vec<f64>> {
            cols.iter()
                .map(|&c| record[c].trim().parse::<f64>().ok())
                .collect()
        };
        if spec.input_period.contains(date) {
            if let Some(row) = take(&in_cols) {
                input_rows.entry(id.clone()).or_default().push(row);
            }
        }
        if spec.target_period.contains(date) {
            if let Some(row) = take(&out_cols) {
                target_rows.entry(id).or_default().push(row);
            }
        }
    }

    let mut warnings = Vec::new();
    let mut kept = Vec::new();
    for st in &stations {
        let n_in = input_rows.get(&st.id).map_or(0, Vec::len);
        let n_out = target_rows.get(&st.id).map_or(0, Vec::len);
        if n_in < 2 || n_out == 0 {
            warnings.push(format!(
                "dropping station {}: {n_in} input rows, {n_out} target rows",
                st.id
            ));
        } else {
            kept.push(st);
        }
    }
    if kept.len() < 2 {
        return Err(Error::Parameter(
            "fewer than 2 stations have usable measurements".into(),
        ));
    }

    // Degree-zero stations cannot carry sheaf degree blocks; drop them too.
    loop {
        let coords: Vec<(f64, f64)> = kept.iter().map(|s| s.coord).collect();
        let graph = geo_graph(&coords, spec.radius_km)?;
        let isolated: Vec<usize> = (0..kept.len()).filter(|&v| graph.degree(v) == 0).collect();
        if isolated.is_empty() {
            let inputs = GaussianField::new(
                kept.iter()
                    .map(|st| {
                        let rows = &input_rows[&st.id];
                        mle_fit(&SampleSet::from_rows(rows)?)
                    })
                    .collect::<Result<_>>()?,
            )?;
            let targets = kept
                .iter()
                .map(|st| SampleSet::from_rows(&target_rows[&st.id]))
                .collect::<Result<Vec<_>>>()?;
            let split = split(kept.len(), (0.6, 0.2, 0.2), spec.split_seed)?;
            let ds = Dataset {
                graph,
                inputs,
                targets,
                split,
                meta: Meta {
                    generator: "weather".to_string(),
                    params: serde_json::json!({
                        "radius_km": spec.radius_km,
                        "input_columns": spec.input_columns,
                        "target_columns": spec.target_columns,
                        "input_period": [spec.input_period.start, spec.input_period.end],
                        "target_period": [spec.target_period.start, spec.target_period.end],
                    }),
                    seed: spec.split_seed,
                },
            };
            // reuse the shared invariants
            let _ = ds.nodes_of(SplitKind::Train);
            return Ok((ds, warnings));
        }
        for &v in isolated.iter().rev() {
            warnings.push(format!(
                "dropping station {}: no neighbor within {} km",
                kept[v].id, spec.radius_km
            ));
            kept.remove(v);
        }
        if kept.len() < 2 {
            return Err(Error::Parameter(
                "fewer than 2 stations remain after dropping isolated ones".into(),
            ));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    fn spec() -> WeatherSpec {
        WeatherSpec {
            radius_km: 200.0,
            input_columns: vec!["temp".into(), "dew".into()],
            target_columns: vec!["humidity".into(), "pressure".into()],
            input_period: DateRange {
                start: "2018-03-01".into(),
                end: "2018-05-31".into(),
            },
            target_period: DateRange {
                start: "2018-06-01".into(),
                end: "2018-08-31".into(),
            },
            split_seed: 1,
        }
    }

    fn stations_csv() -> &'static str {
        "station_id,name,latitude,longitude\n\
         a,Alpha,45.0,-73.0\n\
         b,Beta,45.5,-73.5\n\
         c,Gamma,45.2,-73.2\n"
    }

    fn measurements_csv() -> String {
        let mut rows = String::from("station_id,date,temp,dew,humidity,pressure\n");
        for day in 1..=20 {
            for id in ["a", "b", "c"] {
                rows.push_str(&format!(
                    "{id},2018-03-{day:02},{},{},0,0\n",
                    day as f64 * 0.1,
                    day as f64 * 0.05
                ));
                rows.push_str(&format!(
                    "{id},2018-06-{day:02},0,0,{},{}\n",
                    50.0 + day as f64,
                    1000.0 + day as f64 * 0.2
                ));
            }
        }
        rows
    }

    #[test]
    fn loads_stations_within_radius() {
        let dir = std::env::temp_dir().join("gsnn_weather_ok");
        std::fs::create_dir_all(&dir).unwrap();
        let st = write_file(&dir, "stations.csv", stations_csv());
        let ms = write_file(&dir, "measurements.csv", &measurements_csv());
        let (ds, warnings) = load_weather(&st, &ms, &spec()).unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
        assert_eq!(ds.node_count(), 3);
        // all three stations are within ~60 km of each other
        assert_eq!(ds.graph.edge_count(), 3);
        assert_eq!(ds.input_dim(), 2);
        assert_eq!(ds.target_dim(), 2);
        assert_eq!(ds.targets[0].len(), 20);
    }

    #[test]
    fn constant_measurements_give_zero_covariance() {
        let dir = std::env::temp_dir().join("gsnn_weather_const");
        std::fs::create_dir_all(&dir).unwrap();
        let st = write_file(&dir, "stations.csv", stations_csv());
        let mut rows = String::from("station_id,date,temp,dew,humidity,pressure\n");
        for day in 1..=5 {
            for id in ["a", "b", "c"] {
                rows.push_str(&format!("{id},2018-03-{day:02},7.0,3.0,0,0\n"));
                rows.push_str(&format!("{id},2018-06-{day:02},0,0,55,1001\n"));
            }
        }
        let ms = write_file(&dir, "measurements.csv", &rows);
        let (ds, _) = load_weather(&st, &ms, &spec()).unwrap();
        assert_eq!(ds.inputs.node(0).cov().matrix().norm(), 0.0);
    }

    #[test]
    fn missing_column_is_a_schema_error_naming_it() {
        let dir = std::env::temp_dir().join("gsnn_weather_missing");
        std::fs::create_dir_all(&dir).unwrap();
        let st = write_file(&dir, "stations.csv", stations_csv());
        let ms = write_file(
            &dir,
            "measurements.csv",
            "station_id,date,temp,humidity,pressure\na,2018-03-01,1,2,3\n",
        );
        let err = load_weather(&st, &ms, &spec()).unwrap_err();
        match err {
            Error::Schema(msg) => assert!(msg.contains("dew"), "message should name the column: {msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn stations_without_rows_are_dropped_with_warning() {
        let dir = std::env::temp_dir().join("gsnn_weather_drop");
        std::fs::create_dir_all(&dir).unwrap();
        let st = write_file(&dir, "stations.csv", stations_csv());
        // station c has no measurements at all
        let mut rows = String::from("station_id,date,temp,dew,humidity,pressure\n");
        for day in 1..=6 {
            for id in ["a", "b"] {
                rows.push_str(&format!("{id},2018-03-{day:02},{day},1,0,0\n"));
                rows.push_str(&format!("{id},2018-06-{day:02},0,0,{day},1\n"));
            }
        }
        let ms = write_file(&dir, "measurements.csv", &rows);
        let (ds, warnings) = load_weather(&st, &ms, &spec()).unwrap();
        assert_eq!(ds.node_count(), 2);
        assert!(warnings.iter().any(|w| w.contains('c')));
    }
}
