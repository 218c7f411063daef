//! Input CSV ingestion and the simulated-dataset writer.
//!
//! Layout: `id,Y,X_1,...,X_p,A@t_1,...,A@t_T`. Grid times in the `A@`
//! headers are plain numbers or clock times (`A@06:30`). An optional first
//! line `#time=clock` or `#time=numeric` forces the interpretation.

use std::io::Write;
use std::path::Path;

use super::config::{clock_grid, parse_clock};
use crate::error::{MftpError, Result, Violation};
use crate::fgrid::{validate_dataset, Dataset, OutcomeKind, RawRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeUnit {
    Numeric,
    Clock,
}

/// A validated dataset and how its header expressed time.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub data: Dataset,
    pub unit: TimeUnit,
}

fn header_error(path: &Path, msg: impl Into<String>) -> MftpError {
    MftpError::Validation(vec![Violation { row: 0, field: "header".into(), message: format!("{}: {}", path.display(), msg.into()) }])
}

fn parse_value(s: &str) -> f64 {
    match s.trim() {
        "" | "NA" | "NaN" | "nan" => f64::NAN,
        t => t.parse().unwrap_or(f64::NAN),
    }
}

pub fn read_dataset(path: &Path, binary: Option<bool>) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| MftpError::io(path, e))?;
    let (directive, body, offset) = match text.strip_prefix('#') {
        Some(rest) => {
            let (line, tail) = rest.split_once('\n').unwrap_or((rest, ""));
            (Some(line.trim().to_string()), tail, 1)
        }
        None => (None, text.as_str(), 0),
    };
    let forced = match directive.as_deref() {
        None => None,
        Some("time=clock") => Some(TimeUnit::Clock),
        Some("time=numeric") | Some("time=normalized") => Some(TimeUnit::Numeric),
        Some(d) => return Err(header_error(path, format!("unknown directive `#{d}`"))),
    };

    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(body.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.len() < 4 || &headers[0] != "id" || &headers[1] != "Y" {
        return Err(header_error(path, "expected `id,Y,...` followed by A@t columns"));
    }
    let mut p = 0;
    while 2 + p < headers.len() && headers[2 + p].starts_with("X_") {
        if headers[2 + p] != *format!("X_{}", p + 1) {
            return Err(header_error(path, format!("covariate column {} should be X_{}", &headers[2 + p], p + 1)));
        }
        p += 1;
    }
    let time_cols: Vec<&str> = headers.iter().skip(2 + p).collect();
    if time_cols.len() < 2 {
        return Err(header_error(path, "need at least two A@t columns"));
    }
    let mut stamps = Vec::with_capacity(time_cols.len());
    for h in &time_cols {
        let t = h
            .strip_prefix("A@")
            .ok_or_else(|| header_error(path, format!("unexpected column `{h}`")))?;
        stamps.push(t.to_string());
    }
    let unit = forced.unwrap_or(if stamps.iter().any(|s| s.contains(':')) { TimeUnit::Clock } else { TimeUnit::Numeric });
    let grid: Vec<f64> = stamps
        .iter()
        .map(|s| match unit {
            TimeUnit::Clock => parse_clock(s),
            TimeUnit::Numeric => s.parse::<f64>().ok().filter(|v| v.is_finite()),
        })
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| header_error(path, "unparseable grid time in A@ header"))?;

    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != headers.len() {
            violations.push(Violation {
                row,
                field: "row".into(),
                message: format!("line {}: {} fields, header has {}", row + 1 + offset, rec.len(), headers.len()),
            });
            continue;
        }
        let outcome = parse_value(&rec[1]);
        rows.push(RawRow {
            id: rec[0].to_string(),
            outcome,
            covariates: (0..p).map(|j| parse_value(&rec[2 + j])).collect(),
            values: (0..time_cols.len()).map(|j| parse_value(&rec[2 + p + j])).collect(),
        });
    }
    if !violations.is_empty() {
        return Err(MftpError::Validation(violations));
    }
    if rows.is_empty() {
        return Err(MftpError::InsufficientData(format!("{}: no data rows", path.display())));
    }
    let kind = binary.map(|b| if b { OutcomeKind::Binary } else { OutcomeKind::Continuous });
    let data = validate_dataset(grid, rows, kind).map_err(|e| match e {
        MftpError::Validation(v) => MftpError::Validation(
            v.into_iter()
                .map(|mut x| {
                    x.message = format!("{} line {}: {}", path.display(), x.row + 1 + offset, x.message);
                    x
                })
                .collect(),
        ),
        other => other,
    })?;
    Ok(Loaded { data, unit })
}

fn clock_label(minutes: f64) -> String {
    let total_ms = (minutes * 60_000.0).round() as u64;
    let h = total_ms / 3_600_000;
    let m = (total_ms / 60_000) % 60;
    let ms = total_ms % 60_000;
    if ms == 0 {
        format!("{h:02}:{m:02}")
    } else if ms % 1000 == 0 {
        format!("{h:02}:{m:02}:{:02}", ms / 1000)
    } else {
        format!("{h:02}:{m:02}:{:06.3}", ms as f64 / 1000.0)
    }
}

/// Write `data` in the input layout. With `clock`, the grid is laid out over
/// one day from midnight, the last point one step before the next midnight.
pub fn write_dataset(path: &Path, data: &Dataset, clock: bool) -> Result<()> {
    let mut header = vec!["id".to_string(), "Y".to_string()];
    header.extend((1..=data.p()).map(|j| format!("X_{j}")));
    let minutes = clock_grid(data.grid().len())?;
    for (j, u) in data.grid().points().iter().enumerate() {
        header.push(if clock {
            format!("A@{}", clock_label(minutes.original_points()[j]))
        } else {
            format!("A@{u}")
        });
    }
    let file = std::fs::File::create(path).map_err(|e| MftpError::io(path, e))?;
    let mut buf = std::io::BufWriter::new(file);
    if clock {
        writeln!(buf, "#time=clock").map_err(|e| MftpError::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(&header)?;
    for s in data.samples() {
        let mut rec = vec![s.id.clone(), s.outcome.to_string()];
        rec.extend(s.covariates.iter().map(|v| v.to_string()));
        rec.extend(s.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| MftpError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fgrid::{FunctionalSample, TimeGrid};

    fn toy() -> Dataset {
        let g = TimeGrid::uniform(5).unwrap();
        let samples = (0..4)
            .map(|i| FunctionalSample {
                id: format!("s{i}"),
                values: (0..5).map(|j| (i * j) as f64 * 0.25 + 0.1).collect(),
                covariates: vec![i as f64, 1.5],
                outcome: i as f64 - 0.5,
            })
            .collect();
        Dataset::new(g, samples, None).unwrap()
    }

    #[test]
    fn numeric_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let d = toy();
        write_dataset(&p, &d, false).unwrap();
        let l = read_dataset(&p, None).unwrap();
        assert_eq!(l.unit, TimeUnit::Numeric);
        assert_eq!(l.data.samples(), d.samples());
        assert_eq!(l.data.grid().points(), d.grid().points());
    }

    #[test]
    fn clock_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let d = toy();
        write_dataset(&p, &d, true).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("#time=clock\nid,Y,X_1,X_2,A@00:00,A@04:48,"), "{text}");
        let l = read_dataset(&p, None).unwrap();
        assert_eq!(l.unit, TimeUnit::Clock);
        assert_eq!(l.data.grid().original_points()[1], 288.0);
        for (a, b) in l.data.grid().points().iter().zip(d.grid().points()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(clock_label(390.5), "06:30:30");
        assert_eq!(clock_label(14.4), "00:14:24");
    }

    #[test]
    fn violations_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "id,Y,X_1,A@0,A@1\na,1,2,0,1\nb,NA,2,0,1\nc,1,2,x,1\n").unwrap();
        let e = read_dataset(&p, None).unwrap_err();
        let msg = e.to_string();
        assert_eq!(e.category(), "input");
        assert!(msg.contains("line 3") && msg.contains("line 4"), "{msg}");
        std::fs::write(&p, "id,Y,Z,A@0,A@1\na,1,2,0,1\n").unwrap();
        assert!(read_dataset(&p, None).is_err());
        std::fs::write(&p, "id,Y,A@0,A@0\na,1,0,1\n").unwrap();
        assert_eq!(read_dataset(&p, None).unwrap_err().category(), "input");
        std::fs::write(&p, "id,Y,A@0,A@1\na,1,0\n").unwrap();
        assert!(read_dataset(&p, None).is_err());
    }

    #[test]
    fn binary_override_checks_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "id,Y,A@0,A@1\na,1,0,1\nb,0,1,0\n").unwrap();
        assert_eq!(read_dataset(&p, None).unwrap().data.outcome_kind(), OutcomeKind::Binary);
        assert_eq!(read_dataset(&p, Some(false)).unwrap().data.outcome_kind(), OutcomeKind::Continuous);
        std::fs::write(&p, "id,Y,A@0,A@1\na,2,0,1\nb,0,1,0\n").unwrap();
        assert!(read_dataset(&p, Some(true)).is_err());
    }
}
