//! CSV exchange format for dilution curves and layer heatmaps.
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! parsing a file back reproduces the stored `f64` exactly.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::mass::{MassProfile, SegmentMasses};
use super::segments::Segment;
use crate::error::{RaveError, Result};

pub const DILUTION_HEADER: [&str; 5] = ["step", "alpha_sys", "alpha_img", "alpha_que", "alpha_ans"];

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> RaveError + '_ {
    move |source| RaveError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// One row per decoding step: `step,alpha_sys,alpha_img,alpha_que,alpha_ans`.
pub fn export_dilution_curve<W: Write>(profile: &MassProfile, sink: W) -> csv::Result<()> {
    if profile.steps.is_empty() {
        return Err(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "dilution curve needs at least one decoding step",
        )));
    }
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(DILUTION_HEADER)?;
    for s in &profile.steps {
        let mut rec = vec![s.step.to_string()];
        rec.extend(s.layer_avg.0.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `L x T` matrix of layer-resolved masses for `seg`; row `l` is layer `l`.
pub fn export_layer_heatmap<W: Write>(
    profile: &MassProfile,
    seg: Segment,
    sink: W,
) -> csv::Result<()> {
    let num_layers = profile.num_layers();
    if profile.steps.is_empty() || num_layers == 0 {
        return Err(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "heatmap needs layer-resolved masses for at least one step",
        )));
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(sink);
    for l in 0..num_layers {
        let rec: Vec<String> = profile
            .steps
            .iter()
            .map(|s| s.per_layer[l].get(seg).to_string())
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a dilution-curve CSV into `(step, masses)` rows.
pub fn read_dilution_curve<R: Read>(source: R) -> csv::Result<Vec<(usize, SegmentMasses)>> {
    let mut r = csv::Reader::from_reader(source);
    let header = r.headers()?.clone();
    if header.iter().ne(DILUTION_HEADER) {
        return Err(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected header {header:?}"),
        )));
    }
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let (step, sys, img, que, ans): (usize, f64, f64, f64, f64) = rec?;
        out.push((step, SegmentMasses([sys, img, que, ans])));
    }
    Ok(out)
}

/// Parses a heatmap CSV into rows of floats.
pub fn read_heatmap<R: Read>(source: R) -> csv::Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(source);
    r.deserialize().collect()
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| RaveError::io(path, e))
}

pub fn write_dilution_curve(profile: &MassProfile, path: &Path) -> Result<()> {
    export_dilution_curve(profile, create(path)?).map_err(csv_err(path))
}

pub fn write_layer_heatmap(profile: &MassProfile, seg: Segment, path: &Path) -> Result<()> {
    export_layer_heatmap(profile, seg, create(path)?).map_err(csv_err(path))
}

pub fn load_dilution_curve(path: &Path) -> Result<Vec<(usize, SegmentMasses)>> {
    let f = File::open(path).map_err(|e| RaveError::io(path, e))?;
    read_dilution_curve(f).map_err(csv_err(path))
}

pub fn load_heatmap(path: &Path) -> Result<Vec<Vec<f64>>> {
    let f = File::open(path).map_err(|e| RaveError::io(path, e))?;
    read_heatmap(f).map_err(csv_err(path))
}
