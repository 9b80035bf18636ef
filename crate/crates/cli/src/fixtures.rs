//! Small synthetic inputs for every subcommand.

use std::path::PathBuf;

use clap::Args;
use coral_core::ingest::{
    depth_grid, intensity_grid, label_grid, write_correspondences, CorrespondenceData, PgmEncoding,
};
use coral_core::simworld::{generate_scene, render_wedge, SimConfig, SimSample, WedgeConfig};
use coral_core::solver::Label;

use crate::output::Outputs;
use crate::CliError;

/// Depth quantum of the wedge fixture, meters per unit.
pub const DEPTH_SCALE: f64 = 1e-4;

/// Points per engineered benchmark case.
const CASE_POINTS: usize = 20;

#[derive(Args, Debug)]
pub struct FixtureArgs {
    /// Seed of the simulated scenes [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: fixtures]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn csv_bytes(sample: &SimSample, cfg: &SimConfig, keep: &[usize], labels: Vec<Label>) -> Vec<u8> {
    let data = CorrespondenceData {
        width: cfg.width,
        height: cfg.height,
        correspondences: keep
            .iter()
            .enumerate()
            .map(|(id, &i)| {
                let mut c = sample.correspondences[i];
                c.id = id;
                c
            })
            .collect(),
        labels,
    };
    let mut bytes = Vec::new();
    write_correspondences(&mut bytes, &data).expect("writing to memory");
    bytes
}

pub fn run(args: FixtureArgs) -> Result<(), CliError> {
    let seed = args.seed.unwrap_or(0);
    let out_dir = args.out.unwrap_or_else(|| PathBuf::from("fixtures"));
    let sim = |e: coral_core::simworld::SimError| CliError::Runtime(e.to_string());
    let mut out = Outputs::default();

    // Noiseless scene; its first plane alone is a single exact homography.
    let exact_cfg = SimConfig::default();
    let exact = generate_scene(&exact_cfg, seed).map_err(sim)?;
    let plane0: Vec<usize> = (0..exact.labels.len()).filter(|&i| exact.labels[i] == Label::model(0)).collect();
    out.correspondences(
        "single_homography.csv",
        csv_bytes(&exact, &exact_cfg, &plane0, vec![Label::model(0); plane0.len()]),
    );

    let noisy_cfg = SimConfig {
        sigma_pixel: 1.0,
        outlier_ratio: 0.2,
        ..Default::default()
    };
    let noisy = generate_scene(&noisy_cfg, seed).map_err(sim)?;
    let all: Vec<usize> = (0..noisy.labels.len()).collect();
    out.correspondences("sim_scene.csv", csv_bytes(&noisy, &noisy_cfg, &all, noisy.labels.clone()));

    // Benchmark cases: exact single-plane data whose ground truth calls
    // 0, 2 and 4 of 20 inliers outliers, so the ME is 0, 0.1 and 0.2.
    let subset = &plane0[..CASE_POINTS.min(plane0.len())];
    let mut manifest = String::new();
    for (case, wrong) in [0usize, 2, 4].into_iter().enumerate() {
        let labels = (0..subset.len())
            .map(|i| if i < wrong { Label::OUTLIER } else { Label::model(0) })
            .collect();
        let name = format!("case{case}.csv");
        out.correspondences(&format!("benchmark/{name}"), csv_bytes(&exact, &exact_cfg, subset, labels));
        manifest.push_str(&format!(
            "[[case]]\nname = \"me_{wrong}_of_{}\"\nkind = \"homography\"\ncorrespondences = \"{name}\"\n\n",
            subset.len()
        ));
    }
    out.toml("benchmark/manifest.toml", manifest);

    let wedge = render_wedge(&WedgeConfig::default(), seed).map_err(sim)?;
    let depth: Vec<f64> = wedge.inv_depth.iter().map(|xi| 1.0 / xi).collect();
    let grid = |r: Result<_, coral_core::ingest::IngestError>| r.map_err(|e| CliError::Runtime(e.to_string()));
    out.pgm(
        "wedge/depth.pgm",
        &grid(depth_grid(wedge.width, wedge.height, &depth, DEPTH_SCALE))?,
        PgmEncoding::Binary,
    );
    out.pgm(
        "wedge/image.pgm",
        &grid(intensity_grid(wedge.width, wedge.height, &wedge.intensity))?,
        PgmEncoding::Ascii,
    );
    let labels: Vec<i32> = wedge.labels.iter().map(|l| l.raw()).collect();
    out.pgm("wedge/labels.pgm", &grid(label_grid(wedge.width, wedge.height, &labels))?, PgmEncoding::Ascii);

    for p in out.commit(&out_dir)? {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}
