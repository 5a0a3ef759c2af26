use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RawPerfMeasurement, TableKey};
use crate::error::{Error, Result};

/// One row of the latency CSV (`i,j,k,depthwise,latency_ms`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub depthwise: u8,
    pub latency_ms: f64,
}

pub fn parse_latency_csv(reader: impl Read) -> Result<BTreeMap<TableKey, f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["i", "j", "k", "depthwise", "latency_ms"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Schema(format!(
            "latency CSV header must be {}, found {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: LatencyRow = row?;
        if row.depthwise > 1 {
            return Err(Error::Schema(format!(
                "depthwise flag must be 0 or 1, got {}",
                row.depthwise
            )));
        }
        let key = TableKey::new(row.i, row.j, row.k, row.depthwise == 1);
        if !(row.latency_ms.is_finite() && row.latency_ms >= 0.0) {
            return Err(Error::NonFinite(key));
        }
        if out.insert(key, row.latency_ms).is_some() {
            return Err(Error::DuplicateKey(key));
        }
    }
    Ok(out)
}

pub fn read_latency_csv(path: impl AsRef<Path>) -> Result<BTreeMap<TableKey, f64>> {
    parse_latency_csv(std::fs::File::open(path)?)
}

/// Writes rows in key order. `None` leaves the latency cell empty, which is
/// how `gen-tables` emits a skeleton to be filled by measurement.
pub fn write_latency_csv<'a>(
    writer: impl Write,
    rows: impl IntoIterator<Item = (&'a TableKey, Option<f64>)>,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["i", "j", "k", "depthwise", "latency_ms"])?;
    for (key, latency) in rows {
        wtr.write_record([
            key.i.to_string(),
            key.j.to_string(),
            key.k.to_string(),
            (key.depthwise as u8).to_string(),
            latency.map(|t| t.to_string()).unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_importance(path: impl AsRef<Path>) -> Result<Vec<RawPerfMeasurement>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_importance(writer: impl Write, raw: &[RawPerfMeasurement]) -> Result<()> {
    serde_json::to_writer_pretty(writer, raw)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut table = BTreeMap::new();
        table.insert(TableKey::new(0, 2, 5, false), 1.25);
        table.insert(TableKey::new(0, 2, 1, true), 0.125);
        let mut buf = Vec::new();
        write_latency_csv(&mut buf, table.iter().map(|(k, v)| (k, Some(*v)))).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("i,j,k,depthwise,latency_ms\n0,2,1,1,0.125\n"));
        assert_eq!(parse_latency_csv(buf.as_slice()).unwrap(), table);
    }

    #[test]
    fn csv_errors() {
        let bad_header = "i,j,k,latency_ms\n0,1,3,0.5\n";
        assert!(matches!(
            parse_latency_csv(bad_header.as_bytes()),
            Err(Error::Schema(_))
        ));
        let dup = "i,j,k,depthwise,latency_ms\n0,1,3,0,0.5\n0,1,3,0,0.6\n";
        assert!(matches!(parse_latency_csv(dup.as_bytes()), Err(Error::DuplicateKey(_))));
        let flag = "i,j,k,depthwise,latency_ms\n0,1,3,2,0.5\n";
        assert!(matches!(parse_latency_csv(flag.as_bytes()), Err(Error::Schema(_))));
        let blank = "i,j,k,depthwise,latency_ms\n0,1,3,0,\n";
        assert!(parse_latency_csv(blank.as_bytes()).is_err());
    }

    #[test]
    fn importance_json_shape() {
        let text = r#"[{"i":0,"j":1,"k":3,"depthwise":false,"perf_pruned":0.5,"perf_original":0.75}]"#;
        let raw: Vec<RawPerfMeasurement> = serde_json::from_str(text).unwrap();
        assert_eq!(raw[0].key(), TableKey::new(0, 1, 3, false));
        let mut buf = Vec::new();
        write_importance(&mut buf, &raw).unwrap();
        let back: Vec<RawPerfMeasurement> = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back, raw);
    }
}
