use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vertseg_cli::config::RunConfig;
use vertseg_cli::pipeline::{run_compare, run_segment, Stage, StageError};
use vertseg_cli::{overlay, suite};
use vertseg_core::metrics::evaluate;
use vertseg_core::nifti::{read_labels, read_volume};
use vertseg_core::phantom::PhantomSpec;

#[derive(Parser)]
#[command(name = "vertseg", about = "Multi-atlas vertebra segmentation with joint label fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOverrides {
    /// Worker threads (overrides the config value).
    #[arg(long)]
    jobs: Option<usize>,
    /// RNG seed (overrides the config value).
    #[arg(long)]
    seed: Option<u64>,
    /// Enable per-stage mask dumps; traces land under each case directory.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline: registration, fusion, post-processing, evaluation.
    Segment {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: CommonOverrides,
    },
    /// Run two configurations differing only in atlas mode and compare them.
    Compare {
        /// Vertebra-only configuration (JSON).
        #[arg(long)]
        config_v: PathBuf,
        /// Joint vertebra-rib configuration (JSON).
        #[arg(long)]
        config_vr: PathBuf,
        /// Output directory for the comparison report.
        #[arg(long, default_value = "compare_out")]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: CommonOverrides,
    },
    /// Evaluate a segmentation against ground truth.
    Evaluate {
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Substructure region masks as name=path pairs.
        #[arg(long = "region", value_parser = parse_region)]
        regions: Vec<(String, PathBuf)>,
        /// Write the per-region CSV here (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic phantom data.
    Phantom {
        /// Phantom spec JSON; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory.
        #[arg(long, default_value = "phantom_out")]
        out_dir: PathBuf,
        /// Generate a full case suite with this many cases (a single phantom
        /// volume is written when omitted).
        #[arg(long)]
        cases: Option<usize>,
        /// Atlases per case.
        #[arg(long, default_value_t = 5)]
        atlases: usize,
        /// Atlas deformation magnitude (mm).
        #[arg(long, default_value_t = 2.5)]
        deform: f64,
        /// Gap between transverse process and rib, in voxels.
        #[arg(long)]
        gap: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a slice overlay PNG (ground truth + V/VR contours).
    Overlay {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        mask_v: Option<PathBuf>,
        #[arg(long)]
        mask_vr: Option<PathBuf>,
        /// Slice axis: 0 = x, 1 = y, 2 = z.
        #[arg(long, default_value_t = 2)]
        axis: usize,
        /// Slice index along the axis.
        #[arg(long)]
        index: usize,
        #[arg(long, default_value = "overlay.png")]
        out: PathBuf,
    },
}

fn parse_region(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected name=path, got {s:?}")),
    }
}

fn apply_overrides(config: &mut RunConfig, o: &CommonOverrides) {
    if let Some(jobs) = o.jobs {
        config.jobs = jobs;
    }
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if let Some(dir) = &o.trace_dir {
        config.trace = true;
        config.output_dir = dir.clone();
    }
}

fn stage_exit(err: StageError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(err.stage.exit_code() as u8)
}

fn io_exit(err: anyhow::Error, stage: Stage) -> ExitCode {
    eprintln!("error: stage {}: {err:#}", stage.name());
    ExitCode::from(stage.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Segment { config, overrides } => {
            let mut cfg = match RunConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return io_exit(e, Stage::Config),
            };
            apply_overrides(&mut cfg, &overrides);
            match run_segment(&cfg) {
                Ok(outcomes) => {
                    for o in &outcomes {
                        println!("case {}: {} mask(s) -> {}", o.case, o.masks.len(), o.case_dir.display());
                        for (sid, report) in &o.reports {
                            println!(
                                "  structure {sid}: DC {:.2}% ASD {:.3} mm ASDmax {:.3} mm",
                                report.whole.dice_pct, report.whole.asd_mm, report.whole.asd_max_mm
                            );
                        }
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => stage_exit(e),
            }
        }
        Command::Compare { config_v, config_vr, out_dir, overrides } => {
            let load = |p: &PathBuf| -> Result<RunConfig, anyhow::Error> {
                let mut c = RunConfig::load(p)?;
                apply_overrides(&mut c, &overrides);
                Ok(c)
            };
            let (cv, cvr) = match (load(&config_v), load(&config_vr)) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => return io_exit(e, Stage::Config),
            };
            match run_compare(&cv, &cvr, &out_dir) {
                Ok(report) => {
                    print!("{}", report.markdown());
                    ExitCode::SUCCESS
                }
                Err(e) => stage_exit(e),
            }
        }
        Command::Evaluate { seg, gt, regions, out } => {
            let result = (|| -> anyhow::Result<String> {
                let seg = read_labels(&seg)?;
                let gt = read_labels(&gt)?;
                let mut subs = std::collections::BTreeMap::new();
                for (name, path) in regions {
                    subs.insert(name, read_labels(&path)?);
                }
                let report = evaluate(&seg, &gt, &subs)?;
                let mut csv = String::from("region,dice_pct,asd_mm,asd_max_mm\n");
                csv.push_str(&format!(
                    "WV,{:.6},{:.6},{:.6}\n",
                    report.whole.dice_pct, report.whole.asd_mm, report.whole.asd_max_mm
                ));
                for (name, m) in &report.substructures {
                    csv.push_str(&format!(
                        "{name},{:.6},{:.6},{:.6}\n",
                        m.dice_pct, m.asd_mm, m.asd_max_mm
                    ));
                }
                Ok(csv)
            })();
            match result {
                Ok(csv) => {
                    if let Some(path) = out {
                        if let Err(e) = std::fs::write(&path, &csv) {
                            return io_exit(e.into(), Stage::Io);
                        }
                    } else {
                        print!("{csv}");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => io_exit(e, Stage::Evaluate),
            }
        }
        Command::Phantom { spec, out_dir, cases, atlases, deform, gap, seed } => {
            let result = (|| -> anyhow::Result<()> {
                let mut phantom_spec = match spec {
                    Some(p) => serde_json::from_reader(std::fs::File::open(&p)?)?,
                    None => PhantomSpec::default(),
                };
                phantom_spec.seed = seed;
                if let Some(g) = gap {
                    phantom_spec.rib_gap_voxels = g;
                }
                match cases {
                    Some(n) => {
                        let params = suite::SuiteParams {
                            cases: n,
                            atlases,
                            deform_mm: deform,
                            seed,
                            spec: phantom_spec,
                        };
                        let manifests = suite::generate_suite(&params, &out_dir)?;
                        for m in manifests {
                            println!("{}", m.display());
                        }
                    }
                    None => {
                        suite::write_single_phantom(&phantom_spec, &out_dir)?;
                        println!("{}", out_dir.join("phantom.nii").display());
                    }
                }
                Ok(())
            })();
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => io_exit(e, Stage::Io),
            }
        }
        Command::Overlay { target, gt, mask_v, mask_vr, axis, index, out } => {
            let result = (|| -> anyhow::Result<()> {
                let target = read_volume(&target)?;
                let gt = gt.map(|p| read_labels(&p)).transpose()?;
                let mask_v = mask_v.map(|p| read_labels(&p)).transpose()?;
                let mask_vr = mask_vr.map(|p| read_labels(&p)).transpose()?;
                let img = overlay::render_overlay(
                    &target,
                    gt.as_ref(),
                    mask_v.as_ref(),
                    mask_vr.as_ref(),
                    axis,
                    index,
                )?;
                img.save(&out)?;
                Ok(())
            })();
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => io_exit(e, Stage::Overlay),
            }
        }
    }
}
