//! CSV output for simulated worlds and run reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::eval::{config_hash, RunReport, Summary, Timing};
use crate::filter::FilterStats;
use crate::geometry::Pose;
use crate::sim::SimWorld;
use crate::{Error, Result};

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn pose_fields(p: &Pose) -> Vec<String> {
    let q = p.rot.coords();
    [q[0], q[1], q[2], q[3], p.trans.x, p.trans.y, p.trans.z].iter().map(|x| x.to_string()).collect()
}

const POSE_HEADER: [&str; 7] = ["qx", "qy", "qz", "qw", "px", "py", "pz"];

/// One row per estimator output.
pub fn write_report_csv(report: &RunReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let axes = |name: &str| ["x", "y", "z"].map(|a| format!("{name}_{a}"));
    let mut header = vec!["t".to_string()];
    for name in ["est", "gt", "err", "sigma3"] {
        header.extend(axes(name));
    }
    header.push("nees".into());
    header.push("global_initialized".into());
    header.extend(axes("xt_err"));
    header.extend(axes("xt_sigma3"));
    header.push("nees_pose".into());
    w.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![r.t.to_string()];
        for v in [r.est, r.gt, r.err, r.sigma3] {
            rec.extend(v.iter().map(|x| x.to_string()));
        }
        rec.push(opt(r.nees));
        rec.push((r.global_initialized as u8).to_string());
        for v in [r.xt_err, r.xt_sigma3] {
            rec.extend((0..3).map(|i| opt(v.map(|a| a[i]))));
        }
        rec.push(opt(r.nees_pose));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every stream of a world into `dir`, one CSV each.
pub fn write_world(world: &SimWorld, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join("imu.csv"))?;
    w.write_record(["t", "wx", "wy", "wz", "ax", "ay", "az"])?;
    for s in &world.imu {
        w.write_record([s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z].map(|x| x.to_string()))?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("ground_truth.csv"))?;
    let mut header = vec!["t"];
    header.extend(POSE_HEADER);
    header.extend(["vx", "vy", "vz", "bgx", "bgy", "bgz", "bax", "bay", "baz"]);
    w.write_record(&header)?;
    for g in &world.truth {
        let mut rec = vec![g.t.to_string()];
        rec.extend(pose_fields(&g.pose));
        rec.extend(g.vel.iter().chain(g.bg.iter()).chain(g.ba.iter()).map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("features.csv"))?;
    w.write_record(["t", "feature", "u", "v"])?;
    for f in &world.frames {
        for (id, z) in &f.obs {
            w.write_record([f.t.to_string(), id.to_string(), z.x.to_string(), z.y.to_string()])?;
        }
    }
    w.flush()?;

    // Observers are packed as `keyframe:u:v` separated by `;`.
    let mut w = csv::Writer::from_path(dir.join("matches.csv"))?;
    w.write_record(["t", "keyframes", "landmark", "u", "v", "observers"])?;
    for m in &world.matches {
        let kfs = m.keyframes.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";");
        for p in &m.pairs {
            let obs = p.observers.iter().map(|(k, z)| format!("{k}:{}:{}", z[0], z[1])).collect::<Vec<_>>().join(";");
            w.write_record([
                m.t.to_string(),
                kfs.clone(),
                p.landmark.to_string(),
                p.query_px[0].to_string(),
                p.query_px[1].to_string(),
                obs,
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("map_keyframes.csv"))?;
    let mut header: Vec<String> = vec!["id".into()];
    header.extend(POSE_HEADER.iter().map(|s| s.to_string()));
    header.extend((0..36).map(|i| format!("cov_{}{}", i / 6, i % 6)));
    header.extend(POSE_HEADER.iter().map(|s| format!("true_{s}")));
    w.write_record(&header)?;
    for kf in world.map.keyframes() {
        let mut rec = vec![kf.id.to_string()];
        rec.extend(pose_fields(&kf.pose));
        rec.extend((0..36).map(|i| kf.cov[(i / 6, i % 6)].to_string()));
        rec.extend(pose_fields(&world.true_keyframes[kf.id as usize]));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("map_landmarks.csv"))?;
    w.write_record(["id", "anchor", "x", "y", "z", "anchor_u", "anchor_v", "true_gx", "true_gy", "true_gz"])?;
    for lm in world.map.landmarks() {
        let t = world.true_landmarks[&lm.id];
        let mut rec = vec![lm.id.to_string(), lm.anchor.to_string()];
        rec.extend([lm.p.x, lm.p.y, lm.p.z, lm.anchor_px.x, lm.anchor_px.y, t.x, t.y, t.z].map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Ties the CSVs written by [`write_world`] to the seed and configuration
/// that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    /// True `ᴳT_L` as `qx qy qz qw px py pz`; the ground truth of `x_t`.
    pub frame_offset: Vec<f64>,
    pub files: Vec<String>,
}

pub const WORLD_FILES: [&str; 6] =
    ["imu.csv", "ground_truth.csv", "features.csv", "matches.csv", "map_keyframes.csv", "map_landmarks.csv"];

/// [`write_world`] plus `manifest.json` and `config.toml`.
pub fn write_world_with_manifest(world: &SimWorld, config: &Config, dir: &Path) -> Result<StreamManifest> {
    write_world(world, dir)?;
    fs::write(dir.join("config.toml"), config.to_toml()?)?;
    let m = StreamManifest {
        schema_version: crate::config::SCHEMA_VERSION,
        seed: world.seed,
        config_hash: config_hash(config),
        frame_offset: {
            let (q, t) = (world.frame_offset.rot.coords(), world.frame_offset.trans);
            vec![q[0], q[1], q[2], q[3], t.x, t.y, t.z]
        },
        files: WORLD_FILES.iter().map(|s| s.to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(m)
}

/// One run as listed in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub label: String,
    pub seed: u64,
    pub csv: String,
    pub diverged: bool,
    pub error: Option<String>,
    /// True `ᴳp_L`, the reference for the `xt_err` columns.
    pub true_offset: [f64; 3],
    pub summary: Summary,
    pub stats: FilterStats,
    pub global_update_timing: Timing,
}

/// Per-configuration means over seeds. Diverged runs are counted but left
/// out of the means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub runs: usize,
    pub diverged: usize,
    pub rmse_mean: Option<f64>,
    pub nees_mean: Option<f64>,
    /// Over (step, axis) pairs.
    pub inside_3sigma_mean: Option<f64>,
    pub inside_3sigma_min: Option<f64>,
    /// Over steps, all axes inside.
    pub inside_3sigma_steps_mean: Option<f64>,
    /// Present when runs had `pose_nees` set.
    pub nees_pose_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: Config,
    pub runs: Vec<ManifestRun>,
    pub aggregates: Vec<Aggregate>,
}

impl Manifest {
    pub fn new(config: Config, runs: Vec<ManifestRun>) -> Self {
        let mut labels: Vec<String> = Vec::new();
        for r in &runs {
            if !labels.contains(&r.label) {
                labels.push(r.label.clone());
            }
        }
        let aggregates = labels
            .into_iter()
            .map(|label| {
                let all: Vec<&ManifestRun> = runs.iter().filter(|r| r.label == label).collect();
                let ok: Vec<&Summary> = all.iter().filter(|r| !r.diverged).map(|r| &r.summary).collect();
                let mean = |f: fn(&Summary) -> f64| {
                    let v: Vec<f64> = ok.iter().map(|s| f(s)).filter(|x| x.is_finite()).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                };
                Aggregate {
                    runs: all.len(),
                    diverged: all.len() - ok.len(),
                    rmse_mean: mean(|s| s.rmse),
                    nees_mean: mean(|s| s.nees_mean),
                    inside_3sigma_mean: mean(|s| s.inside_3sigma),
                    inside_3sigma_min: ok.iter().map(|s| s.inside_3sigma).reduce(f64::min),
                    inside_3sigma_steps_mean: mean(|s| s.inside_3sigma_steps),
                    nees_pose_mean: mean(|s| s.nees_pose_mean),
                    label,
                }
            })
            .collect();
        Self {
            schema_version: crate::config::SCHEMA_VERSION,
            config_hash: config_hash(&config),
            config,
            runs,
            aggregates,
        }
    }

    pub fn any_diverged(&self) -> bool {
        self.runs.iter().any(|r| r.diverged)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Writes `<label>_seed<seed>.csv` into `dir` and returns its manifest entry.
pub fn write_run(report: &RunReport, dir: &Path) -> Result<ManifestRun> {
    let name = format!("{}_seed{}.csv", report.label().replace('+', "_"), report.seed);
    write_report_csv(report, &dir.join(&name))?;
    Ok(ManifestRun {
        label: report.label(),
        seed: report.seed,
        csv: name,
        diverged: report.diverged,
        error: report.error.clone(),
        true_offset: report.true_offset,
        summary: report.summary.clone(),
        stats: report.stats.clone(),
        global_update_timing: report.global_update_timing.clone(),
    })
}
