//! CSV ingestion and emission.
//!
//! On-disk format: UTF-8, LF, header `uid,d,t,x,y`, one ping per row, with
//! 1-based x/y in `[1, 500]`. In memory everything is 0-based; writing shifts
//! back, so ingest(write(records)) is the identity modulo row order.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use super::{DataError, PingRecord};

pub fn ingest_csv(path: &Path) -> Result<Vec<PingRecord>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => DataError::Io(io),
            other => DataError::Parse { line: 0, msg: format!("{other:?}") },
        })?;
    {
        let headers = reader.headers().map_err(|e| DataError::Parse { line: 1, msg: e.to_string() })?;
        let joined = headers.iter().collect::<Vec<_>>().join(",");
        if joined != "uid,d,t,x,y" {
            return Err(DataError::Header(joined));
        }
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| DataError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != 5 {
            return Err(DataError::Parse { line, msg: format!("expected 5 fields, got {}", row.len()) });
        }
        let field = |i: usize, name: &'static str| -> Result<i64, DataError> {
            row[i].parse::<i64>().map_err(|_| DataError::Parse {
                line,
                msg: format!("field `{name}` is not an integer: `{}`", &row[i]),
            })
        };
        let uid = field(0, "uid")?;
        let day = field(1, "d")?;
        let slot = field(2, "t")?;
        let x = field(3, "x")?;
        let y = field(4, "y")?;
        if uid < 0 {
            return Err(DataError::Range { line, field: "uid", value: uid });
        }
        if !(0..75).contains(&day) {
            return Err(DataError::Range { line, field: "d", value: day });
        }
        if !(0..48).contains(&slot) {
            return Err(DataError::Range { line, field: "t", value: slot });
        }
        // raw coordinates are 1-based
        if !(1..=500).contains(&x) {
            return Err(DataError::Range { line, field: "x", value: x });
        }
        if !(1..=500).contains(&y) {
            return Err(DataError::Range { line, field: "y", value: y });
        }
        records.push(PingRecord {
            uid: uid as u32,
            day: day as u32,
            slot: slot as u32,
            x: (x - 1) as u32,
            y: (y - 1) as u32,
        });
    }

    records.sort_unstable();
    let mut seen: BTreeSet<(u32, u32, u32)> = BTreeSet::new();
    for rec in &records {
        if !seen.insert((rec.uid, rec.day, rec.slot)) {
            return Err(DataError::Duplicate { uid: rec.uid, day: rec.day, slot: rec.slot });
        }
    }
    Ok(records)
}

/// Write records with the 1-based coordinate convention.
pub fn write_csv(path: &Path, records: &[PingRecord]) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_csv_to(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv_to<W: Write>(w: &mut W, records: &[PingRecord]) -> Result<(), DataError> {
    writeln!(w, "uid,d,t,x,y")?;
    for r in records {
        writeln!(w, "{},{},{},{},{}", r.uid, r.day, r.slot, r.x + 1, r.y + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_and_shifts_to_zero_based() {
        let f = write_tmp("uid,d,t,x,y\n0,0,19,130,89\n");
        let recs = ingest_csv(f.path()).unwrap();
        assert_eq!(recs, vec![PingRecord { uid: 0, day: 0, slot: 19, x: 129, y: 88 }]);
    }

    #[test]
    fn header_only_gives_empty_list() {
        let f = write_tmp("uid,d,t,x,y\n");
        assert!(ingest_csv(f.path()).unwrap().is_empty());
    }

    #[test]
    fn coordinate_501_is_range_error() {
        let f = write_tmp("uid,d,t,x,y\n0,0,19,501,10\n");
        match ingest_csv(f.path()) {
            Err(DataError::Range { field: "x", value: 501, .. }) => {}
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn coordinate_zero_is_range_error_in_one_based_input() {
        let f = write_tmp("uid,d,t,x,y\n0,0,19,0,10\n");
        assert!(matches!(ingest_csv(f.path()), Err(DataError::Range { field: "x", .. })));
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let f = write_tmp("uid,d,t,x,y\n0,0,1,5,5\n0,zap,2,5,5\n");
        match ingest_csv(f.path()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        let f = write_tmp("uid,d,t,x,y\n7,3,9,10,10\n7,3,9,11,11\n");
        match ingest_csv(f.path()) {
            Err(DataError::Duplicate { uid: 7, day: 3, slot: 9 }) => {}
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn rows_sorted_by_uid_day_slot() {
        let f = write_tmp("uid,d,t,x,y\n2,0,0,1,1\n1,5,3,2,2\n1,2,9,3,3\n");
        let recs = ingest_csv(f.path()).unwrap();
        let keys: Vec<(u32, u32, u32)> = recs.iter().map(|r| (r.uid, r.day, r.slot)).collect();
        assert_eq!(keys, vec![(1, 2, 9), (1, 5, 3), (2, 0, 0)]);
    }

    #[test]
    fn wrong_header_rejected() {
        let f = write_tmp("user,day,slot,x,y\n");
        assert!(matches!(ingest_csv(f.path()), Err(DataError::Header(_))));
    }

    #[test]
    fn write_then_ingest_roundtrips() {
        let recs = vec![
            PingRecord::new(0, 0, 19, 129, 88).unwrap(),
            PingRecord::new(3, 74, 47, 0, 499).unwrap(),
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(f.path(), &recs).unwrap();
        assert_eq!(ingest_csv(f.path()).unwrap(), recs);
    }
}
