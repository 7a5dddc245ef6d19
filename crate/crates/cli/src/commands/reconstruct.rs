//! `rnst reconstruct`: run the full pipeline over a slice set.
//!
//! Run directory layout:
//!
//! ```text
//! out/
//!   config.toml          exact config snapshot (reproduces the run)
//!   weights.sha256       backbone checksum
//!   report.{csv,txt,json}
//!   timing.json          wall-clock per slice (not byte-reproducible)
//!   input/    <label>_NNNN.pfi (+.png)   inputs after corruption
//!   recon/    <label>_NNNN.pfi (+.png)   reconstructions
//!   reference/<label>_NNNN.pfi           references (phantom mode only)
//!   traces/   <label>_NNNN.trace.json
//!   iterates/ <label>_NNNN/iter_NNN.pfi  (with output.save_iterates)
//!   error_maps/<label>_NNNN.png          (with a reference)
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use crate::config::{Preset, RunConfig};
use crate::report::{RunReport, SliceRow, Timing};
use crate::trace::TraceFile;
use rnst_core::dataio::{pair_guidance, slice_file_name, SliceSet};
use rnst_core::features::Backbone;
use rnst_core::image::{add_awgn, Image, NoiseSpec};
use rnst_core::metrics::evaluate;
use rnst_core::phantom::{make_phantom_slice, PhantomSpec};

use super::{error_map, load_source, save_slice_atomic, save_slice_pair};

#[derive(clap::Args, Debug)]
pub struct ReconstructArgs {
    /// Run configuration file (TOML).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Shipped preset used instead of a config file.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Content slices: a directory or a single file (overrides the config).
    #[arg(long)]
    pub content: Option<PathBuf>,
    /// Guidance slices: a directory or a single file.
    #[arg(long)]
    pub guidance: Option<PathBuf>,
    /// Reference slices for evaluation: a directory or a single file.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

pub fn run(args: ReconstructArgs) -> Result<()> {
    let mut cfg = match (&args.config, args.preset) {
        (Some(path), None) => RunConfig::load(path)?,
        (None, Some(preset)) => preset.config(),
        (None, None) => bail!("pass --config FILE or --preset NAME"),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    apply_overrides(&mut cfg, &args)?;
    cfg.validate()?;
    let out_dir = cfg
        .out_dir
        .clone()
        .context("no output directory: set out_dir in the config or pass --out")?;
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let backbone = load_backbone(&cfg)?;
    log::info!("backbone: {} layers, sha256 {}", backbone.depth(), backbone.checksum());

    let (content, guidance, reference) = assemble_inputs(&cfg)?;
    let pairs = pair_guidance(&content, &guidance, &cfg.policy)?;

    // Snapshot everything needed to reproduce the run before starting it.
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(
        out_dir.join("weights.sha256"),
        format!("{}\n", backbone.checksum()),
    )?;

    let total_timer = Instant::now();
    let results: Vec<Result<(SliceRow, f64)>> = pairs
        .par_iter()
        .map(|(x_in, x_guid, index)| {
            process_slice(
                &cfg,
                &backbone,
                &out_dir,
                x_in,
                x_guid,
                *index,
                reference.as_ref(),
            )
        })
        .collect();

    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut failures = 0usize;
    for (result, (_, _, index)) in results.into_iter().zip(&pairs) {
        match result {
            Ok((row, secs)) => {
                timings.push((*index, secs));
                rows.push(row);
            }
            Err(e) => {
                failures += 1;
                log::error!("slice {index} failed: {e:#}");
            }
        }
    }

    let report = RunReport::new(backbone.checksum().to_string(), rows);
    report.write_all(&out_dir)?;
    let timing = Timing {
        per_slice_seconds: timings,
        total_seconds: total_timer.elapsed().as_secs_f64(),
    };
    std::fs::write(
        out_dir.join("timing.json"),
        serde_json::to_string_pretty(&timing)?,
    )?;

    println!("{}", report.to_text());
    if failures > 0 {
        bail!("{failures} slice(s) failed; partial results written to {}", out_dir.display());
    }
    println!("run written to {}", out_dir.display());
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, args: &ReconstructArgs) -> Result<()> {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        if let Some(noise) = &mut cfg.noise {
            noise.seed = seed;
        }
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(content) = &args.content {
        cfg.content.phantom = None;
        set_path(&mut cfg.content.dir, &mut cfg.content.file, content);
    }
    if let Some(guidance) = &args.guidance {
        let slot = cfg.guidance.get_or_insert_with(|| crate::config::SliceSource {
            dir: None,
            file: None,
            label: "guidance".into(),
        });
        set_path(&mut slot.dir, &mut slot.file, guidance);
    }
    if let Some(reference) = &args.reference {
        let slot = cfg.reference.get_or_insert_with(|| crate::config::SliceSource {
            dir: None,
            file: None,
            label: "reference".into(),
        });
        set_path(&mut slot.dir, &mut slot.file, reference);
    }
    Ok(())
}

fn set_path(dir: &mut Option<PathBuf>, file: &mut Option<PathBuf>, path: &Path) {
    if path.is_dir() {
        *dir = Some(path.to_path_buf());
        *file = None;
    } else {
        *file = Some(path.to_path_buf());
        *dir = None;
    }
}

pub(crate) fn load_backbone(cfg: &RunConfig) -> Result<Backbone> {
    if let Some(syn) = &cfg.weights.synthetic {
        return Ok(Backbone::synthetic(syn.depth, syn.seed));
    }
    let path = cfg.weights.path.as_ref().expect("validated");
    let backbone = Backbone::load(path)
        .with_context(|| format!("loading weights from {} (run `rnst fetch-weights` first)", path.display()))?;
    if let Some(expected) = &cfg.weights.sha256 {
        if backbone.checksum() != expected.to_lowercase() {
            bail!(
                "weights checksum mismatch for {}: expected {expected}, got {}",
                path.display(),
                backbone.checksum()
            );
        }
    }
    Ok(backbone)
}

/// Deterministic per-slice noise seed, derived from the base seed and slice
/// index so neighboring slices get independent noise.
fn slice_noise_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn assemble_inputs(cfg: &RunConfig) -> Result<(SliceSet, SliceSet, Option<SliceSet>)> {
    if let Some(phantom) = &cfg.content.phantom {
        let sigma = cfg.noise.map(|n| n.sigma).unwrap_or(0.0);
        let mut noisy = Vec::with_capacity(phantom.slices);
        let mut clean = Vec::with_capacity(phantom.slices);
        let mut guid = Vec::with_capacity(phantom.slices);
        for k in 0..phantom.slices {
            let spec = PhantomSpec {
                size: phantom.size,
                contrast_gamma: phantom.contrast_gamma,
                noise: NoiseSpec::new(sigma, cfg.seed),
            };
            let (c, n, g) = make_phantom_slice(&spec, k as u32)?;
            clean.push(c);
            noisy.push(n);
            guid.push(g);
        }
        let indices: Vec<usize> = (0..phantom.slices).collect();
        let label = &phantom.label;
        return Ok((
            SliceSet::new(label.clone(), noisy, indices.clone())?,
            SliceSet::new(format!("{label}_guid"), guid, indices.clone())?,
            Some(SliceSet::new(format!("{label}_ref"), clean, indices)?),
        ));
    }

    let mut content = load_source(
        cfg.content.dir.as_deref(),
        cfg.content.file.as_deref(),
        &cfg.content.label,
    )?;
    if let Some(noise) = &cfg.noise {
        for (img, &index) in content.slices.iter_mut().zip(&content.indices) {
            let spec = NoiseSpec::new(noise.sigma, slice_noise_seed(noise.seed, index));
            *img = add_awgn(img, &spec)?;
        }
    }
    let g = cfg.guidance.as_ref().expect("validated");
    let guidance = load_source(g.dir.as_deref(), g.file.as_deref(), &g.label)?;
    let reference = match &cfg.reference {
        Some(r) => Some(load_source(r.dir.as_deref(), r.file.as_deref(), &r.label)?),
        None => None,
    };
    Ok((content, guidance, reference))
}

#[allow(clippy::too_many_arguments)]
fn process_slice(
    cfg: &RunConfig,
    backbone: &Backbone,
    out_dir: &Path,
    x_in: &Image,
    x_guid: &Image,
    index: usize,
    reference: Option<&SliceSet>,
) -> Result<(SliceRow, f64)> {
    let label = &cfg.content.label;
    let reference_img = match reference {
        Some(set) => set
            .indices
            .iter()
            .position(|&i| i == index)
            .map(|pos| &set.slices[pos]),
        None => None,
    };

    let mut iterate_paths: Vec<PathBuf> = Vec::new();
    let iterates_dir = out_dir
        .join("iterates")
        .join(slice_file_name(label, index, "pfi").trim_end_matches(".pfi"));
    if cfg.output.save_iterates {
        std::fs::create_dir_all(&iterates_dir)
            .with_context(|| format!("creating {}", iterates_dir.display()))?;
    }

    let timer = Instant::now();
    let save_iterates = cfg.output.save_iterates;
    let (recon, trace) = rnst_core::rnst::reconstruct_observed(
        x_in,
        x_guid,
        backbone,
        &cfg.rnst,
        reference_img,
        |k, iterate| {
            if save_iterates {
                let path = iterates_dir.join(format!("iter_{k:03}.pfi"));
                save_slice_atomic(iterate, &path)
                    .map_err(|e| rnst_core::Error::InvalidParameter {
                        name: "save_iterates",
                        reason: format!("{e:#}"),
                    })?;
                iterate_paths.push(path);
            }
            Ok(())
        },
    )?;
    let elapsed = timer.elapsed().as_secs_f64();

    let input_path = save_slice_pair(x_in, &out_dir.join("input"), label, index, cfg.output.png_previews)?;
    let final_path = save_slice_pair(&recon, &out_dir.join("recon"), label, index, cfg.output.png_previews)?;

    let mut reference_path = None;
    if let (Some(r), Some(set)) = (reference_img, reference) {
        if set.label.ends_with("_ref") {
            // Phantom references exist only in memory; persist them so the
            // run directory is self-contained.
            reference_path = Some(save_slice_pair(
                r,
                &out_dir.join("reference"),
                label,
                index,
                false,
            )?);
        } else if let Some(dir) = cfg.reference.as_ref().and_then(|s| s.dir.clone()) {
            reference_path = Some(dir.join(slice_file_name(&set.label, index, "pfi")));
        }
    }

    if let (true, Some(r)) = (cfg.output.error_maps, reference_img) {
        let dir = out_dir.join("error_maps");
        std::fs::create_dir_all(&dir)?;
        save_slice_atomic(&error_map(&recon, r)?, &dir.join(slice_file_name(label, index, "png")))?;
    }

    let traces_dir = out_dir.join("traces");
    std::fs::create_dir_all(&traces_dir)?;
    let rel = |p: &Path| p.strip_prefix(out_dir).unwrap_or(p).to_path_buf();
    let trace_file = TraceFile {
        schema_version: crate::config::SCHEMA_VERSION,
        slice_label: label.clone(),
        slice_index: index,
        weights_checksum: trace.weights_checksum.clone(),
        config: cfg.clone(),
        records: trace.records.clone(),
        input_path: rel(&input_path),
        final_path: rel(&final_path),
        reference_path: reference_path.as_deref().map(rel),
        iterate_paths: iterate_paths.iter().map(|p| rel(p)).collect(),
    };
    trace_file.save(&traces_dir.join(format!("{}.trace.json", slice_file_name(label, index, "pfi").trim_end_matches(".pfi"))))?;

    let row = SliceRow {
        label: label.clone(),
        index,
        input: reference_img.map(|r| evaluate(x_in, r)).transpose()?,
        recon: reference_img.map(|r| evaluate(&recon, r)).transpose()?,
    };
    Ok((row, elapsed))
}
