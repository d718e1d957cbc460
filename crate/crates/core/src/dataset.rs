//! SCADA series files: `timestamp,P,TN,TT,TA,WS,label`.

use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;

use crate::error::{Error, Result};
use crate::schema::{FeatureVector, CADENCE_SECS};

pub const CSV_HEADER: [&str; 7] = ["timestamp", "P", "TN", "TT", "TA", "WS", "label"];

pub fn write_csv<W: Write>(out: W, data: &[FeatureVector]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for x in data {
        w.serialize(x_to_row(x))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, data: &[FeatureVector]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_csv(std::io::BufWriter::new(f), data)
}

type Row = (String, f64, f64, f64, f64, f64, Option<u8>);

fn x_to_row(x: &FeatureVector) -> Row {
    (x.timestamp.format(crate::schema::TIMESTAMP_FORMAT).to_string(), x.p, x.tn, x.tt, x.ta, x.ws, x.label)
}

/// Reads a series and checks that timestamps strictly increase.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<FeatureVector>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header.len() < 6 || header[..6] != CSV_HEADER[..6] {
        return Err(Error::InvalidData(format!("unexpected header {header:?}")));
    }
    let mut out: Vec<FeatureVector> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.parse::<f64>().map_err(|_| Error::InvalidData(format!("line {line}: bad {} value {s:?}", CSV_HEADER[i])))
        };
        let label = match rec.get(6).unwrap_or("") {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => return Err(Error::InvalidData(format!("line {line}: bad label {other:?}"))),
        };
        let x = FeatureVector {
            timestamp: crate::schema::parse_timestamp(rec.get(0).unwrap_or(""))?,
            p: num(1)?,
            tn: num(2)?,
            tt: num(3)?,
            ta: num(4)?,
            ws: num(5)?,
            label,
        };
        x.validate()?;
        if let Some(prev) = out.last() {
            if x.timestamp <= prev.timestamp {
                return Err(Error::InvalidData(format!("line {line}: timestamps not increasing")));
            }
        }
        out.push(x);
    }
    Ok(out)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureVector>> {
    let f = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(f))
}

/// Samples with `from <= timestamp < to`.
pub fn slice_range(data: &[FeatureVector], from: NaiveDateTime, to: NaiveDateTime) -> &[FeatureVector] {
    let a = data.partition_point(|x| x.timestamp < from);
    let b = data.partition_point(|x| x.timestamp < to);
    &data[a..b.max(a)]
}

/// Number of cadence slots in `[from, to)`.
pub fn slot_count(from: NaiveDateTime, to: NaiveDateTime) -> u64 {
    let secs = (to - from).num_seconds();
    if secs <= 0 {
        0
    } else {
        ((secs + CADENCE_SECS - 1) / CADENCE_SECS) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::parse_timestamp;

    fn x(ts: &str, label: Option<u8>) -> FeatureVector {
        FeatureVector {
            timestamp: parse_timestamp(ts).unwrap(),
            p: 1200.0,
            tn: 31.0,
            tt: 55.0,
            ta: 12.3,
            ws: 7.25,
            label,
        }
    }

    #[test]
    fn round_trip() {
        let data =
            vec![x("2024-05-01T00:00:00", Some(0)), x("2024-05-01T00:10:00", Some(1)), x("2024-05-01T00:30:00", None)];
        let mut buf = Vec::new();
        write_csv(&mut buf, &data).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("timestamp,P,TN,TT,TA,WS,label\n2024-05-01T00:00:00,1200.0,31.0,55.0,12.3,7.25,0\n"));
        assert_eq!(read_csv(&buf[..]).unwrap(), data);
    }

    #[test]
    fn rejects_unsorted_and_bad_rows() {
        let text = "timestamp,P,TN,TT,TA,WS,label\n2024-05-01T00:10:00,1,1,1,1,1,0\n2024-05-01T00:00:00,1,1,1,1,1,0\n";
        assert!(read_csv(text.as_bytes()).is_err());
        let text = "timestamp,P,TN,TT,TA,WS,label\n2024-05-01T00:10:00,x,1,1,1,1,0\n";
        assert!(read_csv(text.as_bytes()).is_err());
        let text = "timestamp,P,TN,TT,TA,WS,label\n2024-05-01T00:10:00,1,1,1,1,1,2\n";
        assert!(read_csv(text.as_bytes()).is_err());
        assert!(read_csv("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn range_and_slots() {
        let data = vec![x("2024-04-30T23:50:00", None), x("2024-05-01T00:00:00", None), x("2024-06-01T00:00:00", None)];
        let from = parse_timestamp("2024-05-01").unwrap();
        let to = parse_timestamp("2024-06-01").unwrap();
        assert_eq!(slice_range(&data, from, to).len(), 1);
        assert_eq!(slot_count(from, to), 31 * 144);
    }
}
