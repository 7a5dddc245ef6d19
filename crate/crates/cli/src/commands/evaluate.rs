//! `rnst evaluate`: standalone metric table for a reconstruction directory
//! against a reference directory, in the same report format as a run.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use crate::report::{RunReport, SliceRow};
use rnst_core::dataio::SliceSet;
use rnst_core::metrics::evaluate;

#[derive(clap::Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of reconstructed slices.
    #[arg(long)]
    pub recon: PathBuf,
    /// Directory of reference slices.
    #[arg(long)]
    pub reference: PathBuf,
    /// Slice label of the reconstruction set (auto-detected by default).
    #[arg(long)]
    pub label: Option<String>,
    /// Slice label of the reference set (auto-detected by default).
    #[arg(long)]
    pub reference_label: Option<String>,
    /// Where to write report.{csv,txt,json}; defaults to the recon dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let label = match args.label {
        Some(l) => l,
        None => super::detect_label(&args.recon)?,
    };
    let ref_label = match args.reference_label {
        Some(l) => l,
        None => super::detect_label(&args.reference)?,
    };
    let recon = SliceSet::load_dir(&args.recon, &label)
        .with_context(|| format!("loading reconstructions from {}", args.recon.display()))?;
    let reference = SliceSet::load_dir(&args.reference, &ref_label)
        .with_context(|| format!("loading references from {}", args.reference.display()))?;

    let mut rows = Vec::with_capacity(recon.len());
    let mut checksum = String::new();
    for (img, &index) in recon.slices.iter().zip(&recon.indices) {
        let Some(pos) = reference.indices.iter().position(|&i| i == index) else {
            bail!("reference slice {index} missing from {}", args.reference.display());
        };
        let metrics = evaluate(img, &reference.slices[pos])?;
        rows.push(SliceRow {
            label: label.clone(),
            index,
            input: None,
            recon: Some(metrics),
        });
    }
    // Standalone evaluation has no backbone; record the reference set
    // instead so the report is self-describing.
    checksum.push_str("n/a (standalone evaluation)");

    let report = RunReport::new(checksum, rows);
    let out = args.out.unwrap_or_else(|| args.recon.clone());
    report.write_all(&out)?;
    println!("{}", report.to_text());
    println!("report written to {}", out.display());
    Ok(())
}
