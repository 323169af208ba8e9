//! Program export/import for cross-solver validation.
//!
//! A program is written as a JSON header next to a binary triplet
//! sidecar. The sidecar holds three contiguous little-endian arrays of
//! equal length: row indices (u64), column indices (u64), values (f64).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cone, ConicProgram};
use crate::error::{Error, Result};
use crate::sparse::CscMat;

#[derive(Serialize, Deserialize)]
struct ProgramHeader {
    nrows: usize,
    ncols: usize,
    nnz: usize,
    b: Vec<f64>,
    c: Vec<f64>,
    cones: Vec<Cone>,
    sidecar: String,
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn export_program(p: &ConicProgram, stem: &Path) -> Result<()> {
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");
    let header = ProgramHeader {
        nrows: p.num_rows(),
        ncols: p.num_cols(),
        nnz: p.a.nnz(),
        b: p.b.clone(),
        c: p.c.clone(),
        cones: p.cones.clone(),
        sidecar: bin_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    fs::write(&json_path, serde_json::to_vec_pretty(&header)?)?;

    let mut buf = Vec::with_capacity(p.a.nnz() * 24);
    for (r, _, _) in p.a.triplets() {
        buf.extend_from_slice(&(r as u64).to_le_bytes());
    }
    for (_, c, _) in p.a.triplets() {
        buf.extend_from_slice(&(c as u64).to_le_bytes());
    }
    for (_, _, v) in p.a.triplets() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(&bin_path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a program written by [`export_program`].
pub fn import_program(stem: &Path) -> Result<ConicProgram> {
    let json_path = stem.with_extension("json");
    let header: ProgramHeader = serde_json::from_slice(&fs::read(&json_path)?)?;
    let bin_path = json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.sidecar);
    let mut buf = Vec::new();
    fs::File::open(&bin_path)?.read_to_end(&mut buf)?;
    let expect = header.nnz * 24;
    if buf.len() != expect {
        return Err(Error::InvalidConfig(format!(
            "sidecar holds {} bytes, expected {expect}",
            buf.len()
        )));
    }
    let nnz = header.nnz;
    let mut triplets = Vec::with_capacity(nnz);
    for i in 0..nnz {
        let r = u64::from_le_bytes(buf[8 * i..8 * i + 8].try_into().unwrap()) as usize;
        let c =
            u64::from_le_bytes(buf[8 * (nnz + i)..8 * (nnz + i) + 8].try_into().unwrap()) as usize;
        let v = f64::from_le_bytes(
            buf[8 * (2 * nnz + i)..8 * (2 * nnz + i) + 8]
                .try_into()
                .unwrap(),
        );
        triplets.push((r, c, v));
    }
    let program = ConicProgram {
        a: CscMat::from_triplets(header.nrows, header.ncols, triplets),
        b: header.b,
        c: header.c,
        cones: header.cones,
    };
    program.validate()?;
    Ok(program)
}
