use std::collections::HashMap;
use std::fs;
use std::path::Path;

use chrono::NaiveDateTime;

use super::TrafficDataset;
use crate::error::{Error, Result};

pub const SIGNALS_FILE: &str = "signals.csv";
pub const ADJACENCY_FILE: &str = "adjacency.csv";

const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
const TS_FORMATS: [&str; 4] = [TS_FORMAT, "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TS_FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub fn write_timestamp(t: &NaiveDateTime) -> String {
    t.format(TS_FORMAT).to_string()
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.into(), line, msg: msg.into() }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file))
}

/// Reads `signals.csv` and `adjacency.csv`.
///
/// Empty cells and 0.0 are missing. Adjacency pairs not listed have weight
/// 0 and self-loops are implied.
pub fn load_dataset(signals_path: &Path, adjacency_path: &Path) -> Result<TrafficDataset> {
    let (ids, timestamps, values, observed) = read_signals(signals_path)?;
    let adjacency = read_adjacency(adjacency_path, &ids, true)?;
    TrafficDataset::new(ids, timestamps, values, observed, adjacency)
}

/// Reads signals of roads absent from training.
///
/// Edges naming roads outside the signals file are ignored; without an
/// adjacency file every road is isolated.
pub fn load_new_roads(signals_path: &Path, adjacency_path: Option<&Path>) -> Result<TrafficDataset> {
    let (ids, timestamps, values, observed) = read_signals(signals_path)?;
    let m = ids.len();
    let adjacency = match adjacency_path {
        Some(p) => read_adjacency(p, &ids, false)?,
        None => vec![0.0; m * m],
    };
    TrafficDataset::new(ids, timestamps, values, observed, adjacency)
}

pub(crate) type Signals = (Vec<String>, Vec<NaiveDateTime>, Vec<f64>, Vec<bool>);

/// Parses a signals file into ids, timestamps and `M × K` values/mask.
pub(crate) fn read_signals(path: &Path) -> Result<Signals> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if header.len() < 2 || header.get(0) != Some("timestamp") {
        return Err(parse_err(path, 1, "header must be `timestamp,<id1>,<id2>,…`"));
    }
    let ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let m = ids.len();
    let mut seen = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        if id.is_empty() {
            return Err(parse_err(path, 1, format!("empty sensor id in column {}", i + 2)));
        }
        if seen.insert(id.clone(), i).is_some() {
            return Err(parse_err(path, 1, format!("duplicate sensor id {id:?}")));
        }
    }
    let mut timestamps = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut masks: Vec<Vec<bool>> = vec![Vec::new(); m];
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() != m + 1 {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", m + 1, rec.len())));
        }
        let ts =
            parse_timestamp(&rec[0]).ok_or_else(|| parse_err(path, line, format!("bad timestamp {:?}", &rec[0])))?;
        if let Some(prev) = timestamps.last() {
            if ts <= *prev {
                return Err(parse_err(path, line, "timestamps must be strictly increasing"));
            }
        }
        timestamps.push(ts);
        for j in 0..m {
            let cell = &rec[j + 1];
            if cell.is_empty() {
                columns[j].push(0.0);
                masks[j].push(false);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("column {:?}: cannot parse {cell:?}", ids[j])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("column {:?}: non-finite value", ids[j])));
            }
            columns[j].push(v);
            masks[j].push(v != 0.0);
        }
    }
    if timestamps.is_empty() {
        return Err(parse_err(path, 2, "no data rows"));
    }
    Ok((ids, timestamps, columns.concat(), masks.concat()))
}

fn read_adjacency(path: &Path, ids: &[String], strict: bool) -> Result<Vec<f64>> {
    let m = ids.len();
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["src", "dst", "weight"] {
        return Err(parse_err(path, 1, "header must be `src,dst,weight`"));
    }
    let mut adj = vec![0.0; m * m];
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if rec.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, found {}", rec.len())));
        }
        let lookup =
            |id: &str| index.get(id).copied().ok_or_else(|| parse_err(path, line, format!("unknown sensor id {id:?}")));
        let (src, dst) = match (lookup(&rec[0]), lookup(&rec[1])) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) if strict => return Err(e),
            _ => continue,
        };
        let w: f64 = rec[2].parse().map_err(|_| parse_err(path, line, format!("cannot parse weight {:?}", &rec[2])))?;
        if !(0.0..=1.0).contains(&w) {
            return Err(parse_err(path, line, format!("weight {w} out of range [0, 1]")));
        }
        adj[src * m + dst] = w;
    }
    Ok(adj)
}

/// Writes `signals.csv` and `adjacency.csv` into `dir`.
pub fn save_dataset(ds: &TrafficDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_signals(&dir.join(SIGNALS_FILE), ds.sensor_ids(), ds.timestamps(), |s, k| {
        ds.is_observed(s, k).then(|| ds.value(s, k))
    })?;
    let path = dir.join(ADJACENCY_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    let m = ds.num_sensors();
    let csv_err = |e: csv::Error| Error::io(&path, e.into());
    w.write_record(["src", "dst", "weight"]).map_err(csv_err)?;
    for i in 0..m {
        for j in 0..m {
            let wt = ds.weight(i, j);
            if i != j && wt > 0.0 {
                w.write_record([ds.sensor_ids()[i].as_str(), ds.sensor_ids()[j].as_str(), &wt.to_string()])
                    .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub(crate) fn write_signals(
    path: &Path,
    ids: &[String],
    timestamps: &[NaiveDateTime],
    cell: impl Fn(usize, usize) -> Option<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut header = vec!["timestamp".to_string()];
    header.extend(ids.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (k, t) in timestamps.iter().enumerate() {
        let mut rec = vec![write_timestamp(t)];
        rec.extend((0..ids.len()).map(|s| cell(s, k).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn small_signals() -> String {
        let mut s = String::from("timestamp,s1,s2,s3\n");
        for k in 0..10 {
            let v2 = if k == 4 { "0.0".to_string() } else { format!("{}", 50 + k) };
            s.push_str(&format!("2012-03-01T00:{:02}:00,{},{},{}\n", 5 * k, 60 + k, v2, 40));
        }
        s
    }

    #[test]
    fn loads_small_dataset_with_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let sig = write(dir.path(), "signals.csv", &small_signals());
        let adj = write(dir.path(), "adjacency.csv", "src,dst,weight\ns1,s2,0.5\n");
        let ds = load_dataset(&sig, &adj).unwrap();
        assert_eq!(ds.num_sensors(), 3);
        assert_eq!(ds.num_steps(), 10);
        assert_eq!(ds.missing_count(), 1);
        assert!(!ds.is_observed(1, 4));
        assert_eq!(ds.weight(0, 1), 0.5);
        assert_eq!(ds.weight(1, 0), 0.0);
        assert_eq!(ds.weight(2, 2), 1.0);
    }

    #[test]
    fn rejects_out_of_range_weight() {
        let dir = tempfile::tempdir().unwrap();
        let sig = write(dir.path(), "signals.csv", &small_signals());
        let adj = write(dir.path(), "adjacency.csv", "src,dst,weight\ns1,s2,1.5\n");
        let err = load_dataset(&sig, &adj).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn rejects_unknown_sensor_and_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let sig = write(dir.path(), "signals.csv", &small_signals());
        let adj = write(dir.path(), "adjacency.csv", "src,dst,weight\ns1,s9,0.5\n");
        assert!(load_dataset(&sig, &adj).unwrap_err().to_string().contains("unknown sensor"));
        let ragged =
            write(dir.path(), "ragged.csv", "timestamp,s1,s2\n2012-03-01T00:00:00,1,2\n2012-03-01T00:05:00,1\n");
        let err = read_signals(&ragged).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
    }

    #[test]
    fn rejects_duplicate_ids_and_backwards_time() {
        let dir = tempfile::tempdir().unwrap();
        let dup = write(dir.path(), "d.csv", "timestamp,a,a\n2012-03-01T00:00:00,1,2\n");
        assert!(read_signals(&dup).is_err());
        let back = write(dir.path(), "b.csv", "timestamp,a\n2012-03-01T00:05:00,1\n2012-03-01T00:00:00,1\n");
        assert!(read_signals(&back).unwrap_err().to_string().contains("increasing"));
    }

    #[test]
    fn metr_la_shaped_header() {
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = (0..207).map(|i| format!("7{i:05}")).collect();
        let mut s = format!("timestamp,{}\n", ids.join(","));
        for k in 0..3 {
            s.push_str(&format!("2012-03-01T00:{:02}:00", 5 * k));
            for _ in 0..207 {
                s.push_str(",64.5");
            }
            s.push('\n');
        }
        let sig = write(dir.path(), "signals.csv", &s);
        let adj = write(dir.path(), "adjacency.csv", "src,dst,weight\n");
        assert_eq!(load_dataset(&sig, &adj).unwrap().num_sensors(), 207);
    }
}
