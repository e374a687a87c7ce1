//! Cohort directories: `manifest.tsv` plus per-patient feature binaries.
//!
//! A feature file is a `u32` row count and a `u32` column count followed
//! by `rows·cols` row-major `f32` values, all little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Cohort, PatientRecord};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MANIFEST: &str = "manifest.tsv";
pub const MANIFEST_COLUMNS: [&str; 5] = ["patient_id", "survival_time", "event_observed", "pathology_file", "genomics_file"];

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode_features(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * m.len());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], what: &str) -> Result<Mat> {
    if bytes.len() < 8 {
        return Err(Error::Data(format!("{what}: truncated header ({} bytes)", bytes.len())));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(0), word(1));
    let body = &bytes[8..];
    let want = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Data(format!("{what}: header {rows}x{cols} overflows")))?;
    if body.len() != want {
        return Err(Error::Data(format!(
            "{what}: header says {rows}x{cols} ({want} bytes) but body has {} bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Mat::from_vec(rows, cols, data))
}

pub fn read_features(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}

/// One manifest row, with file paths as written (relative to the cohort
/// directory unless absolute).
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub patient_id: String,
    pub survival_time: f64,
    pub event_observed: bool,
    pub pathology_file: String,
    pub genomics_file: String,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Data("manifest.tsv is empty".into()))?;
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    if cols != MANIFEST_COLUMNS {
        return Err(Error::Data(format!(
            "manifest.tsv header must be {:?}, got {cols:?}",
            MANIFEST_COLUMNS
        )));
    }
    let mut rows = Vec::new();
    for (no, line) in lines {
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        let loc = format!("manifest.tsv line {}", no + 1);
        if f.len() != MANIFEST_COLUMNS.len() {
            return Err(Error::Data(format!("{loc}: expected 5 columns, got {}", f.len())));
        }
        let survival_time: f64 = f[1]
            .parse()
            .map_err(|_| Error::Data(format!("{loc}: survival_time '{}' is not a number", f[1])))?;
        let event_observed = match f[2] {
            "0" => false,
            "1" => true,
            other => return Err(Error::Data(format!("{loc}: event_observed must be 0 or 1, got '{other}'"))),
        };
        rows.push(ManifestRow {
            patient_id: f[0].to_string(),
            survival_time,
            event_observed,
            pathology_file: f[3].to_string(),
            genomics_file: f[4].to_string(),
        });
    }
    let mut ids: Vec<&str> = rows.iter().map(|r| r.patient_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Data(format!("duplicate patient_id '{}'", w[0])));
    }
    Ok(rows)
}

pub fn resolve(dir: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// Manifest rows and the resolved feature paths, in manifest order.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    parse_manifest(&text)
}

pub fn read_cohort_dir(dir: &Path) -> Result<Cohort> {
    let rows = read_manifest(dir)?;
    let patients = rows
        .into_iter()
        .map(|r| {
            Ok(PatientRecord {
                pathology_tokens: read_features(&resolve(dir, &r.pathology_file))?,
                genomic_groups: read_features(&resolve(dir, &r.genomics_file))?,
                patient_id: r.patient_id,
                survival_time: r.survival_time,
                event_observed: r.event_observed,
                time_bin: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Cohort::new(patients)
}

/// Writes `cohort` under `dir` (features in `dir/features/`). Returns
/// every file written.
pub fn write_cohort_dir(cohort: &Cohort, dir: &Path) -> Result<Vec<PathBuf>> {
    let feat = dir.join("features");
    fs::create_dir_all(&feat).map_err(|e| io_err(&feat, e))?;
    let mut manifest = MANIFEST_COLUMNS.join("\t");
    manifest.push('\n');
    let mut written = Vec::with_capacity(2 * cohort.len() + 1);
    for p in &cohort.patients {
        if p.patient_id.contains(['\t', '\n', '/']) {
            return Err(Error::Data(format!("patient_id '{}' cannot be written", p.patient_id)));
        }
        let pf = format!("features/{}.pathology.bin", p.patient_id);
        let gf = format!("features/{}.genomics.bin", p.patient_id);
        for (rel, m) in [(&pf, &p.pathology_tokens), (&gf, &p.genomic_groups)] {
            let path = dir.join(rel);
            fs::write(&path, encode_features(m)).map_err(|e| io_err(&path, e))?;
            written.push(path);
        }
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            p.patient_id,
            p.survival_time,
            u8::from(p.event_observed),
            pf,
            gf
        ));
    }
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| io_err(&mpath, e))?;
    written.insert(0, mpath);
    Ok(written)
}
