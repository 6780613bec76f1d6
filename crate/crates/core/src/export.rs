//! Compact binary dump shared by `BsdeSolution`, `ValueField` and
//! `PideSolution`.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "SDGJFLD1"
//! kind         u32      0 = bsde, 1 = value field, 2 = pide
//! t0, T        f64 f64
//! n_steps      u32
//! n_axes       u32
//! per axis     u32 count, then count x f64 nodes
//! n_fields     u32
//! per field    u16 name length, name (utf-8), u32 rank, rank x u64 shape,
//!              product(shape) x f64 values in row-major order
//! ```
//!
//! Integer-valued fields (selected control indices) are stored as f64.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::bsde::BsdeSolution;
use crate::error::{Error, Result};
use crate::game::ValueField;
use crate::grid::StateGrid;
use crate::levy_paths::TimeGrid;
use crate::pide::PideSolution;

pub const MAGIC: &[u8; 8] = b"SDGJFLD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpKind {
    Bsde = 0,
    Value = 1,
    Pide = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Field {
    fn from_rows(name: &str, rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self {
            name: name.into(),
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    fn from_index_rows(name: &str, rows: &[Vec<usize>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self {
            name: name.into(),
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().map(|i| *i as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dump {
    pub kind: DumpKind,
    pub grid: TimeGrid,
    pub sgrid: StateGrid,
    pub fields: Vec<Field>,
}

impl Dump {
    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }
}

impl From<&BsdeSolution> for Dump {
    fn from(s: &BsdeSolution) -> Self {
        Dump {
            kind: DumpKind::Bsde,
            grid: s.grid,
            sgrid: s.sgrid.clone(),
            fields: vec![
                Field::from_rows("y", &s.y),
                Field::from_rows("z", &s.z),
                Field::from_rows("k_bar", &s.k_bar),
                Field::from_rows("k", &s.k),
            ],
        }
    }
}

impl From<&ValueField> for Dump {
    fn from(f: &ValueField) -> Self {
        Dump {
            kind: DumpKind::Value,
            grid: f.grid,
            sgrid: f.sgrid.clone(),
            fields: vec![
                Field::from_rows("values", &f.values),
                Field::from_index_rows("argmax_u", &f.argmax_u),
                Field::from_index_rows("argmin_v", &f.argmin_v),
            ],
        }
    }
}

impl From<&PideSolution> for Dump {
    fn from(p: &PideSolution) -> Self {
        Dump {
            kind: DumpKind::Pide,
            grid: p.grid,
            sgrid: p.sgrid.clone(),
            fields: vec![Field::from_rows("values", &p.values)],
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} = {v} does not fit the dump header")))
}

pub fn write_dump<W: Write>(dump: &Dump, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(dump.kind as u32)?;
    w.write_f64::<LE>(dump.grid.t0)?;
    w.write_f64::<LE>(dump.grid.horizon)?;
    w.write_u32::<LE>(to_u32(dump.grid.n_steps, "n_steps")?)?;
    w.write_u32::<LE>(to_u32(dump.sgrid.dim(), "axes")?)?;
    for axis in &dump.sgrid.axes {
        w.write_u32::<LE>(to_u32(axis.len(), "axis length")?)?;
        for x in axis {
            w.write_f64::<LE>(*x)?;
        }
    }
    w.write_u32::<LE>(to_u32(dump.fields.len(), "fields")?)?;
    for f in &dump.fields {
        let name = f.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Config("field name too long".into()))?;
        w.write_u16::<LE>(len)?;
        w.write_all(name)?;
        w.write_u32::<LE>(to_u32(f.shape.len(), "rank")?)?;
        for s in &f.shape {
            w.write_u64::<LE>(*s as u64)?;
        }
        if f.shape.iter().product::<usize>() != f.data.len() {
            return Err(Error::Dimension(format!("field {} is ragged", f.name)));
        }
        for x in &f.data {
            w.write_f64::<LE>(*x)?;
        }
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Parse {
        pointer: "binary dump".into(),
        message: msg.into(),
    }
}

pub fn read_dump<R: Read>(mut r: R) -> Result<Dump> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let kind = match r.read_u32::<LE>()? {
        0 => DumpKind::Bsde,
        1 => DumpKind::Value,
        2 => DumpKind::Pide,
        k => return Err(bad(format!("unknown kind {k}"))),
    };
    let t0 = r.read_f64::<LE>()?;
    let horizon = r.read_f64::<LE>()?;
    let n_steps = r.read_u32::<LE>()? as usize;
    let grid = TimeGrid::new(t0, horizon, n_steps)?;
    let n_axes = r.read_u32::<LE>()? as usize;
    let mut axes = Vec::with_capacity(n_axes);
    for _ in 0..n_axes {
        let c = r.read_u32::<LE>()? as usize;
        axes.push((0..c).map(|_| r.read_f64::<LE>()).collect::<std::io::Result<Vec<_>>>()?);
    }
    let sgrid = StateGrid::new(axes)?;
    let n_fields = r.read_u32::<LE>()? as usize;
    let mut fields = Vec::with_capacity(n_fields);
    for _ in 0..n_fields {
        let len = r.read_u16::<LE>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("field name is not utf-8"))?;
        let rank = r.read_u32::<LE>()? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LE>().map(|s| s as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = (0..count).map(|_| r.read_f64::<LE>()).collect::<std::io::Result<Vec<_>>>()?;
        fields.push(Field { name, shape, data });
    }
    Ok(Dump {
        kind,
        grid,
        sgrid,
        fields,
    })
}
