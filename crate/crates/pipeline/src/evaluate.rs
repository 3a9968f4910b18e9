//! Sampling K forecasts per test scene and scoring them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use goalcast_core::envsim::{mix_seed, Split};
use goalcast_core::heatmap::decode_peak;
use goalcast_core::metrics::{evaluate_all, Bandwidth, ForecastSet, MetricReport, SceneEval, Units};
use goalcast_core::{Exec, Homography, Point2};
use goalcast_models::macro_models::{channel_rasters, LongGoalCvae, WaypointNet};
use goalcast_models::micro_model::{MicroBatch, TrajectoryCvae, STATE_DIM};
use goalcast_nn::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{load_dataset, Dataset};
use crate::error::{PipelineError, Result};
use crate::features::SceneFeatures;
use crate::layout::Layout;
use crate::train::{load_stage, split_features, Stage};

/// Trained networks of one run, loaded from checkpoints.
pub struct Forecaster {
    pub cfg: RunConfig,
    long_goal: LongGoalCvae,
    waypoint: Option<WaypointNet>,
    micro: Option<TrajectoryCvae>,
    store: ParamStore,
    pub checkpoint_hashes: BTreeMap<String, String>,
}

impl Forecaster {
    pub fn load(cfg: &RunConfig, layout: &Layout) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut hashes = BTreeMap::new();
        for stage in [Stage::LongGoal, Stage::Waypoint, Stage::Micro] {
            if !stage.enabled(cfg) {
                continue;
            }
            let (ck, hash) = load_stage(layout, cfg, stage)?;
            for (name, t) in ck.params.iter() {
                store.insert(name.clone(), t.clone());
            }
            hashes.insert(stage.name().to_string(), hash);
        }
        Ok(Self {
            cfg: cfg.clone(),
            long_goal: LongGoalCvae::new(cfg.long_goal_spec())?,
            waypoint: cfg.waypoint_spec().map(WaypointNet::new).transpose()?,
            micro: (!cfg.ablation.without_micro)
                .then(|| TrajectoryCvae::new(cfg.micro_spec()))
                .transpose()?,
            store,
            checkpoint_hashes: hashes,
        })
    }

    /// `k` world-coordinate futures for one scene.
    pub fn forecast(&self, f: &SceneFeatures, h: &Homography, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Point2>>> {
        Ok(self.forecast_detailed(f, h, k, rng)?.1)
    }

    /// Like [`Self::forecast`], also returning the `[k, 1, S, S]` long-goal
    /// heatmaps that were sampled.
    pub fn forecast_detailed(
        &self,
        f: &SceneFeatures,
        h: &Homography,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Vec<Vec<Point2>>)> {
        let s = self.cfg.dataset.raster_size;
        let scale = self.cfg.eval.prior_std_scale;
        let exec = Exec::Sequential;
        let cond = Tensor::from_vec(&[1, 2, s, s], f.cond());
        let lg = self.long_goal.sample(&self.store, &cond, k, scale, rng, exec)?;

        // Goal heatmaps per sample: waypoints then the (refined) long goal.
        let goal_maps: Vec<Vec<goalcast_core::Raster>> = match &self.waypoint {
            Some(net) => {
                let x: Vec<f64> = (0..k)
                    .flat_map(|i| f.waypoint_input(&lg.heatmaps.data()[i * s * s..(i + 1) * s * s]))
                    .collect();
                let y = net.predict(&self.store, &Tensor::from_vec(&[k, 3, s, s], x), exec)?;
                (0..k).map(|i| channel_rasters(&y, i)).collect()
            }
            None => (0..k).map(|i| channel_rasters(&lg.heatmaps, i)).collect(),
        };
        let goals_world = goal_maps
            .iter()
            .map(|maps| {
                maps.iter()
                    .map(|m| f.local_to_world(decode_peak(m)?, h))
                    .collect::<goalcast_core::Result<Vec<_>>>()
            })
            .collect::<goalcast_core::Result<Vec<_>>>()?;

        let Some(micro) = &self.micro else {
            // Without the trajectory model the decoded heatmap maxima are
            // the forecast.
            return Ok((lg.heatmaps, goals_world));
        };
        let n_goals = micro.spec.n_goals;
        let dim = lg.pooled.len();
        let rep = |row: &[f64]| -> Vec<f64> { (0..k).flat_map(|_| row.iter().copied()).collect() };
        let batch = MicroBatch {
            past_states: f
                .past_states
                .iter()
                .map(|st| Tensor::from_vec(&[k, STATE_DIM], rep(st)))
                .collect(),
            map_feature: Tensor::from_vec(&[k, dim], rep(lg.pooled.data())),
            goals: (0..n_goals)
                .map(|j| {
                    let v = goals_world.iter().flat_map(|g| {
                        let p = g[j] - f.origin;
                        [p.x, p.y]
                    });
                    Tensor::from_vec(&[k, 2], v.collect())
                })
                .collect(),
            future: None,
        };
        let rel = micro.sample(&self.store, &batch, scale, rng, exec)?;
        let trajectories = rel
            .into_iter()
            .map(|traj| traj.into_iter().map(|p| p + f.origin).collect())
            .collect();
        Ok((lg.heatmaps, trajectories))
    }
}

/// One scene's forecasts as written to `forecasts_k{K}.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub scene_id: String,
    pub samples: Vec<Vec<[f64; 2]>>,
}

/// Files written by one evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub tag: String,
    pub config_hash: String,
    pub training_hash: String,
    pub checkpoint_hashes: BTreeMap<String, String>,
    pub k: usize,
    pub metrics_csv: PathBuf,
    pub metrics_csv_sha256: String,
    pub report_json: PathBuf,
    pub forecasts: PathBuf,
}

fn scene_seed(eval_seed: u64, k: usize, scene_id: &str) -> u64 {
    let digest = Sha256::digest(scene_id.as_bytes());
    let id = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    mix_seed(&[eval_seed, k as u64, id])
}

/// Forecasts for every test scene plus the metric report.
pub fn evaluate_dataset(
    cfg: &RunConfig,
    fc: &Forecaster,
    ds: &Dataset,
    k: usize,
    exec: Exec,
) -> Result<(MetricReport, Vec<ForecastSet>)> {
    let feats = split_features(cfg, ds, Split::Test, exec)?;
    let sets = exec
        .map(&feats, |f| -> Result<ForecastSet> {
            let env = ds.grid(&f.env_id)?;
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.eval.seed, k, &f.scene_id));
            let samples = fc.forecast(f, &env.homography, k, &mut rng)?;
            Ok(ForecastSet::new(f.scene_id.clone(), samples, f.gt_future.clone())?)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let units = cfg.dataset.units;
    let envs = feats.iter().map(|f| ds.grid(&f.env_id)).collect::<goalcast_core::Result<Vec<_>>>()?;
    let identity = Homography::identity();
    let scored: Vec<ForecastSet> = match units {
        Units::Meters => sets.clone(),
        Units::Pixels => sets
            .iter()
            .zip(&envs)
            .map(|(s, e)| {
                let px = |t: &[Point2]| t.iter().map(|&p| e.homography.world_to_pixel(p)).collect::<goalcast_core::Result<Vec<_>>>();
                let samples = s.samples.iter().map(|t| px(t)).collect::<goalcast_core::Result<Vec<_>>>()?;
                Ok(ForecastSet::new(s.scene_id.clone(), samples, px(&s.gt_future)?)?)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let evals: Vec<SceneEval> = scored
        .iter()
        .zip(&envs)
        .map(|(fs, e)| SceneEval {
            forecast: fs.clone(),
            grid: &e.grid,
            homography: match units {
                Units::Meters => &e.homography,
                Units::Pixels => &identity,
            },
        })
        .collect();
    let bw = cfg.eval.kde_bandwidth.map_or(Bandwidth::Scott, Bandwidth::Fixed);
    let report = evaluate_all(&evals, units, bw, exec)?;
    Ok((report, sets))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

/// Evaluates the trained run at `k` samples and writes
/// `metrics_k{K}.csv`, `report_k{K}.json`, `forecasts_k{K}.jsonl` and
/// `record_k{K}.json` under the run's evaluation directory.
pub fn run_evaluation(cfg: &RunConfig, out: &Path, k: usize, exec: Exec) -> Result<(MetricReport, ExperimentRecord)> {
    if k == 0 {
        return Err(PipelineError::Usage("--k must be >= 1".into()));
    }
    let layout = Layout::new(out, cfg);
    let fc = Forecaster::load(cfg, &layout)?;
    let ds = load_dataset(&layout.data_dir())?;
    let (report, sets) = evaluate_dataset(cfg, &fc, &ds, k, exec)?;
    let dir = layout.eval_dir();
    fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    let csv = dir.join(format!("metrics_k{k}.csv"));
    let csv_text = report.to_csv();
    write(&csv, &csv_text)?;
    let json = dir.join(format!("report_k{k}.json"));
    report.write_json(&json)?;
    let forecasts = dir.join(format!("forecasts_k{k}.jsonl"));
    let mut lines = String::new();
    for s in &sets {
        let rec = ForecastRecord {
            scene_id: s.scene_id.clone(),
            samples: s.samples.iter().map(|t| t.iter().map(|p| [p.x, p.y]).collect()).collect(),
        };
        lines.push_str(&serde_json::to_string(&rec).expect("serialises"));
        lines.push('\n');
    }
    write(&forecasts, &lines)?;
    let record = ExperimentRecord {
        tag: layout.tag.clone(),
        config_hash: cfg.hash(),
        training_hash: cfg.training_hash(),
        checkpoint_hashes: fc.checkpoint_hashes.clone(),
        k,
        metrics_csv: csv,
        metrics_csv_sha256: hex::encode(Sha256::digest(csv_text.as_bytes())),
        report_json: json,
        forecasts,
    };
    write(
        &dir.join(format!("record_k{k}.json")),
        &serde_json::to_string_pretty(&record).expect("serialises"),
    )?;
    Ok((report, record))
}

/// Reads `forecasts_k{K}.jsonl`.
pub fn read_forecasts(path: &Path) -> Result<Vec<ForecastRecord>> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| {
                PipelineError::Data(goalcast_core::Error::Parse { path: path.to_path_buf(), msg: e.to_string() })
            })
        })
        .collect()
}
