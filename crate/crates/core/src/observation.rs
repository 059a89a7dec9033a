//! Observation time series and their CSV representation.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model time. Shipped models advance in integer steps.
pub type Time = u64;

/// Observation times `t_1 < ... < t_n` with one record of named fields per time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSeries {
    times: Vec<Time>,
    fields: Vec<String>,
    records: Vec<Vec<f64>>,
}

impl ObservationSeries {
    pub fn new(times: Vec<Time>, fields: Vec<String>, records: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidObservations("need at least one observation".into()));
        }
        if times.len() != records.len() {
            return Err(Error::InvalidObservations(format!(
                "{} times but {} records",
                times.len(),
                records.len()
            )));
        }
        if let Some(w) = times.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidObservations(format!(
                "times not strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some((j, r)) = records.iter().enumerate().find(|(_, r)| r.len() != fields.len()) {
            return Err(Error::InvalidObservations(format!(
                "record {j} has {} values, expected {}",
                r.len(),
                fields.len()
            )));
        }
        if records.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidObservations("non-finite observation value".into()));
        }
        Ok(Self {
            times,
            fields,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[Time] {
        &self.times
    }

    pub fn fields(&self) -> &[String] {
        &self.fields
    }

    pub fn records(&self) -> &[Vec<f64>] {
        &self.records
    }

    pub fn iter(&self) -> impl Iterator<Item = (Time, &[f64])> {
        self.times
            .iter()
            .copied()
            .zip(self.records.iter().map(Vec::as_slice))
    }

    /// Writes `time,<field...>` followed by one row per observation.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["time".to_string()];
        header.extend(self.fields.iter().cloned());
        w.write_record(&header)?;
        for (t, record) in self.iter() {
            let mut row = vec![t.to_string()];
            row.extend(record.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads the format produced by [`write_csv`](Self::write_csv).
    ///
    /// `origin` is only used to label errors.
    pub fn read_csv<R: Read>(reader: R, origin: &Path) -> Result<Self> {
        let data_err = |line: u64, message: String| Error::Data {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = r.headers()?.clone();
        if header.get(0) != Some("time") {
            return Err(data_err(1, "first column must be `time`".into()));
        }
        let fields: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut times = Vec::new();
        let mut records = Vec::new();
        for row in r.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let time: Time = row[0]
                .parse()
                .map_err(|_| data_err(line, format!("time `{}` is not a nonnegative integer", &row[0])))?;
            let mut values = Vec::with_capacity(fields.len());
            for (i, cell) in row.iter().enumerate().skip(1) {
                let v: f64 = cell.parse().map_err(|_| {
                    data_err(line, format!("field `{}`: `{cell}` is not a number", fields[i - 1]))
                })?;
                values.push(v);
            }
            times.push(time);
            records.push(values);
        }
        Self::new(times, fields, records).map_err(|e| data_err(0, e.to_string()))
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fields() -> Vec<String> {
        vec!["y".into()]
    }

    #[test]
    fn validation() {
        assert!(ObservationSeries::new(vec![], fields(), vec![]).is_err());
        assert!(ObservationSeries::new(vec![1, 1], fields(), vec![vec![0.0], vec![0.0]]).is_err());
        assert!(ObservationSeries::new(vec![1], fields(), vec![vec![0.0, 1.0]]).is_err());
        assert!(ObservationSeries::new(vec![1, 2], fields(), vec![vec![0.0]]).is_err());
        assert!(ObservationSeries::new(vec![1], fields(), vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let s = ObservationSeries::new(
            vec![1, 5, 9],
            vec!["prey".into(), "predators".into()],
            vec![vec![10.0, 2.0], vec![0.1, 3.0], vec![-2.5, 0.0]],
        )
        .unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "time,prey,predators\n1,10,2\n5,0.1,3\n9,-2.5,0\n");
        let back = ObservationSeries::read_csv(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn csv_errors_carry_line() {
        let text = "time,y\n1,0.5\n2,abc\n";
        let err = ObservationSeries::read_csv(text.as_bytes(), Path::new("d.csv")).unwrap_err();
        match err {
            Error::Data { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"));
            }
            other => panic!("unexpected {other}"),
        }
        let text = "t,y\n1,0.5\n";
        assert!(ObservationSeries::read_csv(text.as_bytes(), Path::new("d.csv")).is_err());
    }
}
