//! Image outputs: forecast overlays as PNG and raw heatmap stacks as PGM.

use std::path::{Path, PathBuf};

use goalcast_core::envsim::Split;
use goalcast_core::heatmap::{ChannelRole, HeatmapStack};
use goalcast_core::Point2;
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{load_dataset, Dataset};
use crate::error::{PipelineError, Result};
use crate::evaluate::Forecaster;
use crate::features::{scene_features, SceneFeatures};
use crate::layout::Layout;

const UPSCALE: u32 = 4;
const PAST: Rgb<u8> = Rgb([60, 120, 255]);
const FUTURE: Rgb<u8> = Rgb([40, 220, 60]);
const PREDICTED: Rgb<u8> = Rgb([255, 210, 0]);

fn features_for(cfg: &RunConfig, ds: &Dataset, scene: &str) -> Result<SceneFeatures> {
    let rec = ds
        .records
        .iter()
        .find(|r| r.scene_id == scene)
        .ok_or_else(|| PipelineError::Usage(format!("no scene '{scene}' in the dataset")))?;
    let env = ds.grid(&rec.env_id)?;
    Ok(scene_features(cfg, &cfg.effective_sg_indices(), rec, &env)?)
}

/// Scene ids to render: the given one, or the first `count` test scenes.
fn pick(ds: &Dataset, scene: Option<&str>, count: usize) -> Vec<String> {
    match scene {
        Some(s) => vec![s.to_string()],
        None => ds.split(Split::Test).iter().take(count).map(|r| r.scene_id.clone()).collect(),
    }
}

/// Writes the semantic map, past, long-goal and waypoint channels of a
/// scene as PGM files.
pub fn inspect(cfg: &RunConfig, out: &Path, scene: Option<&str>, dest: &Path) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(out, cfg);
    let ds = load_dataset(&layout.data_dir())?;
    let mut written = Vec::new();
    for id in pick(&ds, scene, 1) {
        let f = features_for(cfg, &ds, &id)?;
        let mut stack = HeatmapStack::new(cfg.dataset.raster_size);
        stack.push(ChannelRole::SemanticMap, f.map.clone())?;
        stack.push(ChannelRole::PastTrajectory, f.past_heatmap.clone())?;
        stack.push(ChannelRole::LongGoal, f.goal_heatmap.clone())?;
        for (i, w) in f.waypoint_heatmaps.iter().enumerate() {
            stack.push(ChannelRole::ShortGoal(i), w.clone())?;
        }
        stack.validate_model_input()?;
        written.extend(stack.dump_pgm(dest, &id)?);
    }
    Ok(written)
}

fn blend(a: Rgb<u8>, b: Rgb<u8>, t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    Rgb(std::array::from_fn(|i| (a.0[i] as f64 * (1.0 - t) + b.0[i] as f64 * t).round() as u8))
}

fn dot(img: &mut RgbImage, p: Point2, colour: Rgb<u8>, radius: i64) {
    let (cx, cy) = (((p.x + 0.5) * UPSCALE as f64) as i64, ((p.y + 0.5) * UPSCALE as f64) as i64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (x, y) = (cx + dx, cy + dy);
            if dx * dx + dy * dy <= radius * radius && x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                img.put_pixel(x as u32, y as u32, colour);
            }
        }
    }
}

/// Local-map panel: map in grey, mean sampled long-goal heatmap in red,
/// ground-truth past (blue) and future (green), predicted trajectories
/// (yellow).
pub fn render_panel(f: &SceneFeatures, goal_heat: &[f64], predicted_local: &[Vec<Point2>], gt_future_local: &[Point2], past_local: &[Point2]) -> RgbImage {
    let s = f.map.width as u32;
    let mut img = RgbImage::new(s * UPSCALE, s * UPSCALE);
    let peak = goal_heat.iter().cloned().fold(0.0, f64::max).max(1e-12);
    for y in 0..s * UPSCALE {
        for x in 0..s * UPSCALE {
            let (r, c) = ((y / UPSCALE) as usize, (x / UPSCALE) as usize);
            let v = f.map.get(r, c);
            let grey = (255.0 * (1.0 - 0.7 * v)) as u8;
            let base = Rgb([grey, grey, grey]);
            img.put_pixel(x, y, blend(base, Rgb([230, 30, 30]), goal_heat[r * s as usize + c] / peak));
        }
    }
    for traj in predicted_local {
        traj.iter().for_each(|&p| dot(&mut img, p, PREDICTED, 1));
    }
    past_local.iter().for_each(|&p| dot(&mut img, p, PAST, 2));
    gt_future_local.iter().for_each(|&p| dot(&mut img, p, FUTURE, 2));
    img
}

/// Renders `plot_<scene>.png` for the chosen scenes using trained models.
pub fn plot(cfg: &RunConfig, out: &Path, scene: Option<&str>, count: usize, k: usize, dest: &Path) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(out, cfg);
    let fc = Forecaster::load(cfg, &layout)?;
    let ds = load_dataset(&layout.data_dir())?;
    std::fs::create_dir_all(dest).map_err(|e| PipelineError::io(dest, e))?;
    let s = cfg.dataset.raster_size;
    let mut written = Vec::new();
    for id in pick(&ds, scene, count) {
        let f = features_for(cfg, &ds, &id)?;
        let rec = ds.records.iter().find(|r| r.scene_id == id).expect("picked from dataset");
        let env = ds.grid(&rec.env_id)?;
        let h = &env.homography;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
        let (heat, trajs) = fc.forecast_detailed(&f, h, k, &mut rng)?;
        let mut mean = vec![0.0; s * s];
        for (i, v) in heat.data().iter().enumerate() {
            mean[i % (s * s)] += v / k as f64;
        }
        let to_local = |p: Point2| -> goalcast_core::Result<Point2> { Ok(f.frame.to_local(h.world_to_pixel(p)?)) };
        let local = |t: &[Point2]| t.iter().map(|&p| to_local(p)).collect::<goalcast_core::Result<Vec<_>>>();
        let predicted = trajs.iter().map(|t| local(t)).collect::<goalcast_core::Result<Vec<_>>>()?;
        let img = render_panel(&f, &mean, &predicted, &local(rec.future())?, &local(rec.past())?);
        let path = dest.join(format!("plot_{id}.png"));
        img.save(&path).map_err(|e| PipelineError::io(&path, std::io::Error::other(e)))?;
        written.push(path);
    }
    Ok(written)
}
