//! Mean and median ME over a manifest of cases. Averages are computed on
//! exact fractions and rounded once, so engineered cases give exact values.

use std::path::{Path, PathBuf};

use clap::Args;
use coral_core::ingest::{load_correspondences, load_rgbd};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{self, SolverArgs};
use crate::fit::{self, HomographySettings, PlaneSettings};
use crate::output::Outputs;
use crate::CliError;

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub common: SolverArgs,
    /// TOML manifest with one `[[case]]` table per case; paths are relative to it
    pub manifest: PathBuf,
    /// Keypoint noise in pixels for homography cases [default: 1.0]
    #[arg(long)]
    pub sigma_pixel: Option<f64>,
    /// Inverse-depth noise for plane cases, 1/m [default: 0.005]
    #[arg(long)]
    pub sigma_xi: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum CaseKind {
    Homography,
    Planes,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Case {
    name: Option<String>,
    kind: CaseKind,
    correspondences: Option<PathBuf>,
    depth: Option<PathBuf>,
    image: Option<PathBuf>,
    labels: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    #[serde(default)]
    case: Vec<Case>,
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str, name: &str) -> Result<&'a PathBuf, CliError> {
    p.as_ref()
        .ok_or_else(|| CliError::Input(format!("case {name:?} needs `{key}`")))
}

/// Mean and median of exact fractions.
pub fn mean_median(values: &[BigRational]) -> Option<(BigRational, BigRational)> {
    if values.is_empty() {
        return None;
    }
    let n = BigInt::from(values.len());
    let sum = values.iter().fold(BigRational::zero(), |acc, v| acc + v);
    let mut sorted = values.to_vec();
    sorted.sort();
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2].clone()
    } else {
        (&sorted[m / 2 - 1] + &sorted[m / 2]) / BigRational::from_integer(BigInt::from(2))
    };
    Some((sum / BigRational::from_integer(n), median))
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

pub fn run(args: BenchmarkArgs) -> Result<(), CliError> {
    let file = config::load_file(args.common.config.as_deref())?;
    let text = std::fs::read_to_string(&args.manifest)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.manifest.display())))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", args.manifest.display())))?;
    if manifest.case.is_empty() {
        return Err(CliError::Input(format!("{}: manifest lists no cases", args.manifest.display())));
    }
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let hom = config::resolve(&args.common, &file, config::HOMOGRAPHY)?;
    let planes = config::resolve_without_pool(&args.common, &file, config::PLANES)?;
    let hs = HomographySettings::resolve(args.sigma_pixel, None, &file)?;
    let ps = PlaneSettings::resolve(args.sigma_xi, None, None, &file)?;

    let mut cases = Vec::new();
    let mut fractions = Vec::new();
    for (i, case) in manifest.case.iter().enumerate() {
        let name = case.name.clone().unwrap_or_else(|| format!("case{i}"));
        let (kind, points, wrong) = match case.kind {
            CaseKind::Homography => {
                let path = base.join(required(&case.correspondences, "correspondences", &name)?);
                let data = load_correspondences(&path).map_err(fit::ingest_error)?;
                let fit = fit::fit_homographies(&data, &hom, &hs)?;
                ("homography", data.labels.len(), fit::misclassified(&fit.labels, &data.labels))
            }
            CaseKind::Planes => {
                let depth = base.join(required(&case.depth, "depth", &name)?);
                let image = base.join(required(&case.image, "image", &name)?);
                let labels = base.join(required(&case.labels, "labels", &name)?);
                let frame = load_rgbd(&depth, &image, None).map_err(fit::ingest_error)?;
                let gt = fit::load_gt_labels(&labels, &frame)?;
                let (fit, _) = fit::fit_planes(&frame, &planes, &ps)?;
                ("planes", gt.len(), fit::misclassified(&fit.labels, &gt))
            }
        };
        if points == 0 {
            return Err(CliError::Input(format!("case {name:?} has no points")));
        }
        let me = BigRational::new(BigInt::from(wrong), BigInt::from(points));
        eprintln!("{name}: ME {:.4}", to_f64(&me));
        cases.push(json!({
            "name": name,
            "kind": kind,
            "points": points,
            "misclassified": wrong,
            "me": to_f64(&me),
        }));
        fractions.push(me);
    }
    let (mean, median) = mean_median(&fractions).expect("at least one case");
    let per_case: Vec<f64> = fractions.iter().map(to_f64).collect();
    let report: Value = json!({
        "command": "benchmark",
        "manifest": args.manifest.display().to_string(),
        "method": hom.method.unwrap_or_default(),
        "params": { "homography": hom.params(), "planes": planes.params() },
        "defaults": config::defaults_json(),
        "cases": cases,
        "per_case_me": per_case,
        "mean": to_f64(&mean),
        "median": to_f64(&median),
        "mean_fraction": mean.to_string(),
        "median_fraction": median.to_string(),
    });
    let mut out = Outputs::default();
    out.json("summary.json", report, &["cases", "per_case_me", "mean", "median"]);
    out.commit(&hom.out)?;
    eprintln!("mean ME {:.4}, median ME {:.4}", to_f64(&mean), to_f64(&median));
    Ok(())
}
