use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use super::IngestError;
use crate::geomodel::{DriverSeries, MagCoord, Observation, Region, DRIVER_VARIABLES};

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(false).from_reader(r)
}

fn csv_error(e: csv::Error) -> IngestError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IngestError::Io(io),
        kind => IngestError::Malformed { line, message: format!("{kind:?}") },
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize, IngestError> {
    headers.iter().position(|h| h == name).ok_or_else(|| IngestError::MissingColumn(name.into()))
}

fn parse_f64(field: &str, line: u64, column: &str) -> Result<f64, IngestError> {
    field.parse::<f64>().map_err(|_| IngestError::Malformed {
        line,
        message: format!("column '{column}': cannot parse '{field}' as a number"),
    })
}

fn parse_i64(field: &str, line: u64, column: &str) -> Result<i64, IngestError> {
    field.parse::<i64>().map_err(|_| IngestError::Malformed {
        line,
        message: format!("column '{column}': cannot parse '{field}' as an integer"),
    })
}

pub fn read_drivers_csv(path: impl AsRef<Path>) -> Result<DriverSeries, IngestError> {
    read_drivers(BufReader::new(File::open(path)?))
}

/// Parses a driver table. A single missing cadence step is filled by linear
/// interpolation, as are isolated empty or `NaN` cells.
pub fn read_drivers<R: Read>(r: R) -> Result<DriverSeries, IngestError> {
    let mut rdr = reader(r);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let t_idx = column_index(&headers, "t")?;
    let var_idx = DRIVER_VARIABLES
        .iter()
        .map(|v| column_index(&headers, v))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows: Vec<(u64, i64, Vec<f64>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let t = parse_i64(&rec[t_idx], line, "t")?;
        let mut values = Vec::with_capacity(var_idx.len());
        for (&i, name) in var_idx.iter().zip(DRIVER_VARIABLES) {
            let f = &rec[i];
            let v = if f.is_empty() || f.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                parse_f64(f, line, name)?
            };
            if v.is_infinite() {
                return Err(IngestError::Malformed { line, message: format!("column '{name}': infinite value") });
            }
            values.push(v);
        }
        rows.push((line, t, values));
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    for w in rows.windows(2) {
        if w[1].1 <= w[0].1 {
            return Err(IngestError::NonMonotonicTime { line: w[1].0 });
        }
    }
    let cadence = rows
        .windows(2)
        .map(|w| w[1].1 - w[0].1)
        .min()
        .unwrap_or(300);

    let n_vars = DRIVER_VARIABLES.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(rows.len()); n_vars];
    for (k, (line, t, values)) in rows.iter().enumerate() {
        if k > 0 {
            let gap = t - rows[k - 1].1;
            if gap == 2 * cadence {
                for (j, col) in columns.iter_mut().enumerate() {
                    col.push(0.5 * (rows[k - 1].2[j] + values[j]));
                }
            } else if gap != cadence {
                return Err(IngestError::Gap { line: *line, gap, cadence });
            }
        }
        for (j, col) in columns.iter_mut().enumerate() {
            col.push(values[j]);
        }
    }
    for (j, col) in columns.iter_mut().enumerate() {
        for i in 0..col.len() {
            if col[i].is_nan() {
                let prev = if i > 0 { col[i - 1] } else { f64::NAN };
                let next = col.get(i + 1).copied().unwrap_or(f64::NAN);
                if prev.is_nan() || next.is_nan() {
                    return Err(IngestError::MissingValue { column: DRIVER_VARIABLES[j].into(), row: i });
                }
                col[i] = 0.5 * (prev + next);
            }
        }
    }
    let named = DRIVER_VARIABLES.iter().map(|s| s.to_string()).zip(columns).collect();
    Ok(DriverSeries::new(rows[0].1, cadence, named))
}

pub fn write_drivers<W: Write>(mut w: W, drivers: &DriverSeries) -> std::io::Result<()> {
    write!(w, "t")?;
    for name in drivers.names() {
        write!(w, ",{name}")?;
    }
    writeln!(w)?;
    let cols: Vec<&[f64]> = drivers.names().iter().map(|n| drivers.column(n).unwrap()).collect();
    for k in 0..drivers.len() {
        write!(w, "{}", drivers.time(k))?;
        for c in &cols {
            write!(w, ",{}", c[k])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_observations_csv(path: impl AsRef<Path>) -> Result<(Vec<Observation>, usize), IngestError> {
    read_observations(BufReader::new(File::open(path)?))
}

/// Parses observations; returns them with the number of rows dropped for non-positive flux.
pub fn read_observations<R: Read>(r: R) -> Result<(Vec<Observation>, usize), IngestError> {
    let mut rdr = reader(r);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let ti = column_index(&headers, "t")?;
    let si = column_index(&headers, "sat_id")?;
    let lai = column_index(&headers, "mlat")?;
    let lti = column_index(&headers, "mlt")?;
    let ei = column_index(&headers, "eflux")?;
    let ri = headers.iter().position(|h| h == "region");

    let mut out = Vec::new();
    let mut dropped = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let t = parse_i64(&rec[ti], line, "t")?;
        let sat_id = rec[si].parse::<u32>().map_err(|_| IngestError::Malformed {
            line,
            message: format!("column 'sat_id': cannot parse '{}'", &rec[si]),
        })?;
        let mlat = parse_f64(&rec[lai], line, "mlat")?;
        let mlt = parse_f64(&rec[lti], line, "mlt")?;
        if !(0.0..=24.0).contains(&mlt) {
            return Err(IngestError::OutOfDomain { line, message: format!("mlt {mlt} outside [0, 24]") });
        }
        let coord = MagCoord::new(mlat, mlt)
            .map_err(|e| IngestError::OutOfDomain { line, message: e.to_string() })?;
        let eflux = parse_f64(&rec[ei], line, "eflux")?;
        if !eflux.is_finite() {
            return Err(IngestError::Malformed { line, message: format!("eflux '{}' is not finite", &rec[ei]) });
        }
        let region = match ri.map(|i| &rec[i]) {
            None | Some("") => None,
            Some(code) => Some(Region::from_code(code).ok_or_else(|| IngestError::Malformed {
                line,
                message: format!("unknown region '{code}'"),
            })?),
        };
        if eflux <= 0.0 {
            dropped += 1;
            continue;
        }
        out.push(Observation { t, sat_id, coord, eflux, region });
    }
    Ok((out, dropped))
}

pub fn write_observations<W: Write>(mut w: W, obs: &[Observation]) -> std::io::Result<()> {
    let labeled = !obs.is_empty() && obs.iter().all(|o| o.region.is_some());
    if labeled {
        writeln!(w, "t,sat_id,mlat,mlt,eflux,region")?;
    } else {
        writeln!(w, "t,sat_id,mlat,mlt,eflux")?;
    }
    for o in obs {
        write!(w, "{},{},{},{},{}", o.t, o.sat_id, o.coord.mlat(), o.coord.mlt(), o.eflux)?;
        match (labeled, o.region) {
            (true, Some(r)) => writeln!(w, ",{}", r.code())?,
            _ => writeln!(w)?,
        }
    }
    Ok(())
}
