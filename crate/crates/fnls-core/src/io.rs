//! Binary field files, CSV tables and JSON-lines records.
//!
//! Binary files start with one JSON header line (terminated by `\n`) followed by
//! little-endian `f64` payload:
//!
//! * ensembles (`"format": "fnls-ensemble"`): per sample, the log weight then
//!   `2·(2·kmax+1)` values `re, im` for `k = −kmax..=kmax`;
//! * field series (`"fnls-fields"`): per snapshot, the time then the coefficients;
//! * kernels (`"fnls-kernel"`): `re, im` of `H_{kk'}`, row-major over `k` then `k'`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gibbs::{GibbsEnsemble, GibbsParams};
use crate::rao::KernelMatrix;
use crate::spectral::{SpectralField, C64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleHeader {
    pub format: String,
    pub alpha: f64,
    pub n: f64,
    pub sign: crate::gibbs::Sign,
    pub cutoff: Option<f64>,
    pub seed: u64,
    pub count: usize,
    pub kmax: usize,
}

fn put_f64s(w: &mut impl Write, xs: impl IntoIterator<Item = f64>) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn put_coeffs(w: &mut impl Write, c: &[C64]) -> Result<()> {
    put_f64s(w, c.iter().flat_map(|z| [z.re, z.im]))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    Ok(f64::from_le_bytes(b))
}

fn get_coeffs(r: &mut impl Read, len: usize) -> Result<Vec<C64>> {
    (0..len)
        .map(|_| Ok(C64::new(get_f64(r)?, get_f64(r)?)))
        .collect()
}

fn read_header<T: for<'de> Deserialize<'de>>(r: &mut impl BufRead, format: &str) -> Result<T> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let v: Value = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if v.get("format").and_then(Value::as_str) != Some(format) {
        return Err(Error::Format(format!("expected a {format} file")));
    }
    Ok(serde_json::from_value(v)?)
}

fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(())
}

pub fn write_ensemble(w: &mut impl Write, e: &GibbsEnsemble) -> Result<()> {
    let kmax = e.params.kmax();
    let header = EnsembleHeader {
        format: "fnls-ensemble".into(),
        alpha: e.params.alpha,
        n: e.params.n,
        sign: e.params.sign,
        cutoff: e.params.cutoff,
        seed: e.seed,
        count: e.len(),
        kmax,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for (u, lw) in e.samples.iter().zip(&e.log_weights) {
        put_f64s(w, [*lw])?;
        put_coeffs(w, u.resized(kmax).coeffs())?;
    }
    Ok(())
}

pub fn read_ensemble(r: impl Read) -> Result<GibbsEnsemble> {
    let mut r = BufReader::new(r);
    let h: EnsembleHeader = read_header(&mut r, "fnls-ensemble")?;
    let params = GibbsParams {
        alpha: h.alpha,
        n: h.n,
        sign: h.sign,
        cutoff: h.cutoff,
    };
    if params.kmax() != h.kmax {
        return Err(Error::Format("kmax disagrees with N".into()));
    }
    let mut samples = Vec::with_capacity(h.count);
    let mut log_weights = Vec::with_capacity(h.count);
    for _ in 0..h.count {
        log_weights.push(get_f64(&mut r)?);
        samples.push(SpectralField::from_coeffs(h.kmax, get_coeffs(&mut r, 2 * h.kmax + 1)?)?);
    }
    expect_eof(&mut r)?;
    Ok(GibbsEnsemble {
        params,
        seed: h.seed,
        samples,
        log_weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FieldsHeader {
    format: String,
    kmax: usize,
    count: usize,
}

pub fn write_fields(w: &mut impl Write, snapshots: &[(f64, SpectralField)]) -> Result<()> {
    let kmax = snapshots.iter().map(|s| s.1.kmax()).max().unwrap_or(0);
    serde_json::to_writer(
        &mut *w,
        &FieldsHeader {
            format: "fnls-fields".into(),
            kmax,
            count: snapshots.len(),
        },
    )?;
    w.write_all(b"\n")?;
    for (t, u) in snapshots {
        put_f64s(w, [*t])?;
        put_coeffs(w, u.resized(kmax).coeffs())?;
    }
    Ok(())
}

pub fn read_fields(r: impl Read) -> Result<Vec<(f64, SpectralField)>> {
    let mut r = BufReader::new(r);
    let h: FieldsHeader = read_header(&mut r, "fnls-fields")?;
    let out = (0..h.count)
        .map(|_| {
            let t = get_f64(&mut r)?;
            Ok((t, SpectralField::from_coeffs(h.kmax, get_coeffs(&mut r, 2 * h.kmax + 1)?)?))
        })
        .collect::<Result<Vec<_>>>()?;
    expect_eof(&mut r)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct KernelHeader {
    format: String,
    n: f64,
    l: f64,
    t: f64,
    kmax: usize,
    layout: String,
}

pub fn write_kernel(w: &mut impl Write, h: &KernelMatrix) -> Result<()> {
    serde_json::to_writer(
        &mut *w,
        &KernelHeader {
            format: "fnls-kernel".into(),
            n: h.n,
            l: h.l,
            t: h.t,
            kmax: h.kmax(),
            layout: "row-major k, k'".into(),
        },
    )?;
    w.write_all(b"\n")?;
    put_coeffs(w, h.entries())
}

pub fn read_kernel(r: impl Read) -> Result<KernelMatrix> {
    let mut r = BufReader::new(r);
    let h: KernelHeader = read_header(&mut r, "fnls-kernel")?;
    let dim = 2 * h.kmax + 1;
    let e = get_coeffs(&mut r, dim * dim)?;
    expect_eof(&mut r)?;
    let m = nalgebra::DMatrix::from_row_slice(dim, dim, &e);
    KernelMatrix::from_dense(h.t, h.n, h.l, &m)
}

/// One result row; keys are column names.
pub type Row = BTreeMap<String, Value>;

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// CSV with `config_digest` first and the remaining columns sorted by name.
pub fn write_csv(w: impl Write, digest: &str, rows: &[Row]) -> Result<()> {
    let mut cols: Vec<&String> = rows.iter().flat_map(|r| r.keys()).collect();
    cols.sort();
    cols.dedup();
    cols.retain(|c| c.as_str() != "config_digest");
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["config_digest"];
    header.extend(cols.iter().map(|c| c.as_str()));
    wr.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![digest.to_string()];
        rec.extend(cols.iter().map(|c| r.get(*c).map(cell).unwrap_or_default()));
        wr.write_record(&rec).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Writes `path` atomically through a temporary sibling.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
