//! Text and binary dumps for clouds, flows, and generic numeric tables.
//!
//! CSV values are printed with 17 significant digits, which round-trips
//! every `f64`. The binary format is columnar:
//!
//! ```text
//! magic  b"MFCOLS01"
//! u64    column count c
//! u64    row count r
//! c ×    (u32 name length, utf-8 name)
//! c ×    r little-endian f64 values
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use super::{MeasureError, MeasureFlow, ParticleCloud, TimeGrid};

const MAGIC: &[u8; 8] = b"MFCOLS01";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Named columns of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self, IoError> {
        if names.len() != columns.len() {
            return Err(IoError::Format("name/column count mismatch".into()));
        }
        if let Some(first) = columns.first() {
            if columns.iter().any(|c| c.len() != first.len()) {
                return Err(IoError::Format("ragged columns".into()));
            }
        }
        Ok(Self { names, columns })
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }
}

pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_table_csv<W: Write>(table: &Table, out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&table.names)?;
    for r in 0..table.rows() {
        w.write_record(table.columns.iter().map(|c| format_f64(c[r])))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table_csv<R: Read>(input: R) -> Result<Table, IoError> {
    let mut rdr = csv::Reader::from_reader(input);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let mut columns = vec![Vec::new(); names.len()];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| IoError::Format(format!("row {}: bad number {field:?}", line + 1)))?;
            columns[j].push(v);
        }
    }
    Table::new(names, columns)
}

pub fn write_table_binary<W: Write>(table: &Table, mut out: W) -> Result<(), IoError> {
    out.write_all(MAGIC)?;
    out.write_all(&(table.columns.len() as u64).to_le_bytes())?;
    out.write_all(&(table.rows() as u64).to_le_bytes())?;
    for name in &table.names {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
    }
    let mut buf = Vec::with_capacity(table.rows() * 8);
    for col in &table.columns {
        buf.clear();
        for v in col {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, IoError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_table_binary<R: Read>(mut input: R) -> Result<Table, IoError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IoError::Format("bad magic header".into()));
    }
    let cols = read_u64(&mut input)? as usize;
    let rows = read_u64(&mut input)? as usize;
    let mut names = Vec::with_capacity(cols);
    for _ in 0..cols {
        let mut len = [0u8; 4];
        input.read_exact(&mut len)?;
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut name)?;
        names.push(String::from_utf8(name).map_err(|_| IoError::Format("column name is not utf-8".into()))?);
    }
    let mut columns = Vec::with_capacity(cols);
    let mut b = [0u8; 8];
    for _ in 0..cols {
        let mut col = Vec::with_capacity(rows);
        for _ in 0..rows {
            input.read_exact(&mut b)?;
            col.push(f64::from_le_bytes(b));
        }
        columns.push(col);
    }
    Table::new(names, columns)
}

fn coord_names(dim: usize) -> Vec<String> {
    (0..dim).map(|j| format!("x{j}")).collect()
}

pub fn cloud_table(cloud: &ParticleCloud) -> Table {
    let d = cloud.dim();
    let columns = (0..d)
        .map(|j| cloud.points().iter().skip(j).step_by(d).copied().collect())
        .collect();
    Table {
        names: coord_names(d),
        columns,
    }
}

pub fn cloud_from_table(table: &Table) -> Result<ParticleCloud, IoError> {
    let d = table.columns.len();
    let n = table.rows();
    let mut pts = Vec::with_capacity(n * d);
    for r in 0..n {
        for c in &table.columns {
            pts.push(c[r]);
        }
    }
    Ok(ParticleCloud::new(d, pts)?)
}

/// Long format: one row per (knot, particle) with columns `knot, t, particle, x0, ...`.
pub fn flow_table(flow: &MeasureFlow) -> Table {
    let d = flow.dim();
    let mut names = vec!["knot".to_string(), "t".to_string(), "particle".to_string()];
    names.extend(coord_names(d));
    let mut columns = vec![Vec::new(); 3 + d];
    for (k, cloud) in flow.clouds().iter().enumerate() {
        let t = flow.grid().time(k);
        for p in 0..cloud.len() {
            columns[0].push(k as f64);
            columns[1].push(t);
            columns[2].push(p as f64);
            for (j, v) in cloud.point(p).iter().enumerate() {
                columns[3 + j].push(*v);
            }
        }
    }
    Table { names, columns }
}

pub fn flow_from_table(table: &Table) -> Result<MeasureFlow, IoError> {
    let (knot, t) = match (table.column("knot"), table.column("t")) {
        (Some(k), Some(t)) => (k, t),
        _ => return Err(IoError::Format("flow table needs knot and t columns".into())),
    };
    let coords: Vec<&[f64]> = table
        .names
        .iter()
        .zip(&table.columns)
        .filter(|(n, _)| n.starts_with('x'))
        .map(|(_, c)| c.as_slice())
        .collect();
    if coords.is_empty() || knot.is_empty() {
        return Err(IoError::Format("flow table has no coordinates".into()));
    }
    let n_knots = knot.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1;
    let mut buffers = vec![Vec::new(); n_knots];
    let mut horizon = 0.0f64;
    for r in 0..knot.len() {
        let k = knot[r] as usize;
        horizon = horizon.max(t[r]);
        for c in &coords {
            buffers[k].push(c[r]);
        }
    }
    let grid = TimeGrid::new(horizon, n_knots - 1)?;
    let clouds = buffers
        .into_iter()
        .map(|b| ParticleCloud::new(coords.len(), b))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MeasureFlow::new(grid, clouds)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_flow() -> MeasureFlow {
        let grid = TimeGrid::new(0.7, 2).unwrap();
        let clouds = vec![
            ParticleCloud::new(2, vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0]).unwrap(),
            ParticleCloud::new(2, vec![std::f64::consts::PI, 0.0, 1e10, -1.0]).unwrap(),
            ParticleCloud::new(2, vec![0.2, 0.3, 0.4, 0.5]).unwrap(),
        ];
        MeasureFlow::new(grid, clouds).unwrap()
    }

    #[test]
    fn flow_round_trips_through_csv_bit_exact() {
        let f = sample_flow();
        let mut buf = Vec::new();
        write_table_csv(&flow_table(&f), &mut buf).unwrap();
        let back = flow_from_table(&read_table_csv(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn flow_round_trips_through_binary() {
        let f = sample_flow();
        let mut buf = Vec::new();
        write_table_binary(&flow_table(&f), &mut buf).unwrap();
        let back = flow_from_table(&read_table_binary(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, f);
        buf[0] = b'X';
        assert!(read_table_binary(buf.as_slice()).is_err());
    }

    #[test]
    fn cloud_round_trip() {
        let c = ParticleCloud::new(3, vec![1.0, 2.0, 3.0, -0.1, 0.2, 1e-17]).unwrap();
        let mut buf = Vec::new();
        write_table_csv(&cloud_table(&c), &mut buf).unwrap();
        let back = cloud_from_table(&read_table_csv(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
