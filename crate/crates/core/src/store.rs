//! On-disk layout of a solved run.
//!
//! ```text
//! manifest.json             config echo + sha256 of every file below
//! diagnostics.json          per-level residuals and iteration counts
//! surfaces/k{k}/level_{idx:04}.csv   x0,x1,value
//! policy/k{k}/level_{idx:04}.csv     x0,x1,delta   (delta empty = hold)
//! funding/T{k}.csv                   x0,x1,theta   (k < K)
//! ```
//!
//! Every file is rendered in memory first, so the hash covers exactly the
//! bytes written. Fixed formatting makes reruns byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::{write_slice_csv, GridSpec, ValueSurface};
use crate::solver::{Action, Diagnostics, SolveResult};

pub const MANIFEST: &str = "manifest.json";
pub const DIAGNOSTICS: &str = "diagnostics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub levels: usize,
    /// Relative path -> lowercase hex sha256.
    pub files: BTreeMap<String, String>,
}

type Render<'a> = Box<dyn Fn() -> Vec<u8> + Sync + 'a>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn surface_path(k: usize, level: usize) -> String {
    format!("surfaces/k{k}/level_{level:04}.csv")
}

pub fn policy_path(k: usize, level: usize) -> String {
    format!("policy/k{k}/level_{level:04}.csv")
}

pub fn funding_path(k: usize) -> String {
    format!("funding/T{k}.csv")
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn render_policy(grid: &GridSpec, actions: &[Action]) -> Vec<u8> {
    let mut out = Vec::with_capacity(actions.len() * 24);
    writeln!(out, "x0,x1,delta").unwrap();
    for (idx, i, j) in grid.nodes() {
        match actions[idx] {
            Action::Hold => writeln!(out, "{},{},", grid.coord(i), grid.coord(j)),
            Action::Trade(d) => writeln!(out, "{},{},{:.16e}", grid.coord(i), grid.coord(j), d),
        }
        .unwrap();
    }
    out
}

fn render_funding(grid: &GridSpec, theta: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(theta.len() * 24);
    writeln!(out, "x0,x1,theta").unwrap();
    for (idx, i, j) in grid.nodes() {
        writeln!(out, "{},{},{:.16e}", grid.coord(i), grid.coord(j), theta[idx]).unwrap();
    }
    out
}

/// Writes a solved run into `dir` (created if needed) and returns its manifest.
pub fn save_run(dir: &Path, config: &RunConfig, result: &SolveResult) -> Result<Manifest> {
    let grid = *result.grid();
    let mut jobs: Vec<(String, Render<'_>)> = Vec::new();
    for k in 1..=result.config.schedule.len() {
        for level in 0..result.surfaces.levels(k).len() {
            jobs.push((
                surface_path(k, level),
                Box::new(move || {
                    let mut buf = Vec::new();
                    write_slice_csv(&mut buf, &grid, result.slice(k, level)).expect("writes to memory");
                    buf
                }),
            ));
            jobs.push((policy_path(k, level), Box::new(move || render_policy(&grid, result.actions(k, level)))));
        }
        if k < result.config.schedule.len() {
            jobs.push((funding_path(k), Box::new(move || render_funding(&grid, &result.funding_policy[k - 1]))));
        }
    }
    jobs.push((
        DIAGNOSTICS.to_string(),
        Box::new(|| {
            let mut s = serde_json::to_vec_pretty(&result.diagnostics.report_json()).expect("json");
            s.push(b'\n');
            s
        }),
    ));

    let rendered: Vec<(String, Vec<u8>)> = jobs.par_iter().map(|(p, f)| (p.clone(), f())).collect();
    let mut files = BTreeMap::new();
    for (rel, bytes) in &rendered {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        files.insert(rel.clone(), sha256_hex(bytes));
    }
    let manifest = Manifest { config: config.clone(), levels: result.segmentation.total_levels(), files };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Files whose current hash differs from the manifest (or that are missing).
pub fn verify_run(dir: &Path) -> Result<Vec<String>> {
    let m = read_manifest(dir)?;
    let mut bad = Vec::new();
    for (rel, hash) in &m.files {
        match fs::read(dir.join(rel)) {
            Ok(bytes) if &sha256_hex(&bytes) == hash => {}
            _ => bad.push(rel.clone()),
        }
    }
    Ok(bad)
}

/// Third column of every data row, `None` when empty.
fn read_column(path: &Path, expect_rows: usize) -> Result<Vec<Option<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::with_capacity(expect_rows);
    for (n, line) in text.lines().enumerate().skip(1) {
        let field = line.splitn(3, ',').nth(2).ok_or_else(|| {
            Error::Format(format!("{}:{}: expected 3 columns", path.display(), n + 1))
        })?;
        if field.is_empty() {
            out.push(None);
        } else {
            let v = field
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            out.push(Some(v));
        }
    }
    if out.len() != expect_rows {
        return Err(Error::Format(format!("{}: {} rows, expected {expect_rows}", path.display(), out.len())));
    }
    Ok(out)
}

fn read_values(path: &Path, rows: usize) -> Result<Vec<f64>> {
    read_column(path, rows)?
        .into_iter()
        .map(|v| v.ok_or_else(|| Error::Format(format!("{}: empty value", path.display()))))
        .collect()
}

/// Rebuilds a [`SolveResult`] from a run directory.
pub fn load_run(dir: &Path) -> Result<(RunConfig, SolveResult)> {
    let m = read_manifest(dir)?;
    let config = m.config.solver_config()?;
    let segmentation = config.segmentation()?;
    let grid = config.grid;
    let rows = grid.node_count();
    let big_k = config.schedule.len();

    let mut surfaces = Vec::with_capacity(big_k);
    let mut trade_policy = Vec::with_capacity(big_k);
    let mut funding_policy = Vec::with_capacity(big_k.saturating_sub(1));
    for k in 1..=big_k {
        let levels: Vec<usize> = (0..=segmentation.segment(k).steps).collect();
        let vals: Vec<Vec<f64>> = levels
            .par_iter()
            .map(|&l| read_values(&dir.join(surface_path(k, l)), rows))
            .collect::<Result<_>>()?;
        let acts: Vec<Vec<Action>> = levels
            .par_iter()
            .map(|&l| {
                Ok(read_column(&dir.join(policy_path(k, l)), rows)?
                    .into_iter()
                    .map(|d| d.map_or(Action::Hold, Action::Trade))
                    .collect())
            })
            .collect::<Result<_>>()?;
        surfaces.push(vals);
        trade_policy.push(acts);
        if k < big_k {
            funding_policy.push(read_values(&dir.join(funding_path(k)), rows)?);
        }
    }
    let diag_path = dir.join(DIAGNOSTICS);
    let diagnostics = match fs::read_to_string(&diag_path) {
        Ok(text) => {
            let v: serde_json::Value = serde_json::from_str(&text)?;
            Diagnostics { levels: serde_json::from_value(v["levels"].clone()).unwrap_or_default() }
        }
        Err(_) => Diagnostics::default(),
    };
    let result = SolveResult {
        config,
        segmentation,
        surfaces: ValueSurface { segments: surfaces },
        trade_policy,
        funding_policy,
        diagnostics,
    };
    Ok((m.config, result))
}

/// `dir/name`, creating `dir`.
pub fn output_file(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(dir.join(name))
}
