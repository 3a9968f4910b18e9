//! Per-scene network inputs: local map, heatmaps and relative trajectories.

use goalcast_core::envsim::SceneRecord;
use goalcast_core::heatmap::{encode_goal, encode_points};
use goalcast_core::raster::{extract_local_map, local_radius, LocalFrame, LocalMapSpec};
use goalcast_core::{Homography, Point2, Raster, Result};
use goalcast_models::micro_model::{past_states, STATE_DIM};

use crate::config::RunConfig;
use crate::data::EnvGrid;

/// Everything the three networks need for one scene.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    pub scene_id: String,
    pub env_id: String,
    pub frame: LocalFrame,
    pub map: Raster,
    pub past_heatmap: Raster,
    /// Long-goal target heatmap.
    pub goal_heatmap: Raster,
    /// Waypoint targets in step order.
    pub waypoint_heatmaps: Vec<Raster>,
    /// Past states relative to the last observed point, world units.
    pub past_states: Vec<[f64; STATE_DIM]>,
    /// Ground-truth goals (waypoints then long goal) relative to the last
    /// observed point, world units.
    pub goals_rel: Vec<Point2>,
    pub future_rel: Vec<Point2>,
    pub origin: Point2,
    pub gt_future: Vec<Point2>,
}

impl SceneFeatures {
    /// (map, past) channels, flattened `[2, S, S]`.
    pub fn cond(&self) -> Vec<f64> {
        [&self.map.data[..], &self.past_heatmap.data[..]].concat()
    }

    /// (long goal, past, map), the posterior input.
    pub fn posterior_input(&self) -> Vec<f64> {
        [&self.goal_heatmap.data[..], &self.past_heatmap.data[..], &self.map.data[..]].concat()
    }

    /// (map, past, long goal) with the given long-goal channel.
    pub fn waypoint_input(&self, goal: &[f64]) -> Vec<f64> {
        [&self.map.data[..], &self.past_heatmap.data[..], goal].concat()
    }

    /// (waypoints..., long goal) targets.
    pub fn waypoint_target(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.waypoint_heatmaps.iter().flat_map(|r| r.data.iter().copied()).collect();
        v.extend_from_slice(&self.goal_heatmap.data);
        v
    }

    /// Maps a local heatmap pixel to world coordinates, snapped to the
    /// centre of the global grid cell it falls in.
    pub fn local_to_world(&self, local: Point2, h: &Homography) -> Result<Point2> {
        let g = self.frame.to_global(local);
        h.pixel_to_world(Point2::new(g.x.round(), g.y.round()))
    }
}

fn clamp_to_raster(p: Point2, size: usize) -> Point2 {
    let hi = size as f64 - 1.0;
    Point2::new(p.x.clamp(0.0, hi), p.y.clamp(0.0, hi))
}

/// Builds the features of one record. `waypoint_steps` are 1-based future
/// steps; goals that leave the local window are clamped to its border in
/// the heatmap targets.
pub fn scene_features(
    cfg: &RunConfig,
    waypoint_steps: &[usize],
    rec: &SceneRecord,
    env: &EnvGrid,
) -> Result<SceneFeatures> {
    let d = &cfg.dataset;
    let h = &env.homography;
    let size = d.raster_size;
    let past = rec.past();
    let future = rec.future();
    let past_px = past.iter().map(|&p| h.world_to_pixel(p)).collect::<Result<Vec<_>>>()?;
    let radius = match d.local_radius_px {
        Some(r) => r,
        None => local_radius(&rec.points, h)?,
    };
    let spec = LocalMapSpec {
        center_px: *past_px.last().expect("validated window"),
        radius_px: radius,
        out_size: size,
    };
    let frame = spec.frame();
    let map = extract_local_map(&env.grid, &spec)?;
    let past_local: Vec<Point2> = past_px.iter().map(|&p| frame.to_local(p)).collect();
    let past_heatmap = encode_points(&past_local, size, size, d.heatmap_variance)?;
    let goal_heatmap_at = |p: Point2| -> Result<Raster> {
        let local = clamp_to_raster(frame.to_local(h.world_to_pixel(p)?), size);
        encode_goal(local, size, size, d.heatmap_variance)
    };
    let goal = *future.last().expect("validated window");
    let goal_heatmap = goal_heatmap_at(goal)?;
    let waypoint_heatmaps = waypoint_steps
        .iter()
        .map(|&s| goal_heatmap_at(future[s - 1]))
        .collect::<Result<Vec<_>>>()?;
    let origin = *past.last().expect("validated window");
    let goals_rel = waypoint_steps
        .iter()
        .map(|&s| future[s - 1])
        .chain(std::iter::once(goal))
        .map(|p| p - origin)
        .collect();
    Ok(SceneFeatures {
        scene_id: rec.scene_id.clone(),
        env_id: rec.env_id.clone(),
        frame,
        map,
        past_heatmap,
        goal_heatmap,
        waypoint_heatmaps,
        past_states: past_states(past, 1.0 / rec.fps),
        goals_rel,
        future_rel: future.iter().map(|&p| p - origin).collect(),
        origin,
        gt_future: future.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use goalcast_core::envsim::Split;
    use goalcast_core::heatmap::decode_peak;
    use goalcast_core::SemanticGrid;

    fn env() -> EnvGrid {
        EnvGrid {
            grid: SemanticGrid::binary(200, 200, vec![0; 40000]).unwrap(),
            homography: Homography::similarity(10.0, Point2::new(0.0, 0.0)).unwrap(),
        }
    }

    fn record() -> SceneRecord {
        SceneRecord {
            scene_id: "s".into(),
            env_id: "e".into(),
            split: Split::Train,
            points: (0..20).map(|t| Point2::new(5.0 + t as f64, 8.0)).collect(),
            fps: 2.5,
        }
    }

    #[test]
    fn targets_decode_back_to_ground_truth_pixels() {
        let cfg = RunConfig::preset("desk").unwrap();
        let env = env();
        let f = scene_features(&cfg, &[4, 8], &record(), &env).unwrap();
        assert_eq!(f.cond().len(), 2 * 64 * 64);
        assert_eq!(f.waypoint_target().len(), 3 * 64 * 64);
        assert_eq!(f.goals_rel.len(), 3);
        assert_eq!(f.goals_rel[2], Point2::new(12.0, 0.0));
        assert_eq!(f.goals_rel[0], Point2::new(4.0, 0.0));
        // Long goal at 24 m = 240 px lies outside the ±80 px window around
        // 120 px, so it is clamped onto the right border.
        let peak = decode_peak(&f.goal_heatmap).unwrap();
        assert_eq!(peak.x, 63.0);
        // Waypoint 4 steps ahead (160 px) is inside; decoding it and mapping
        // back lands within one source cell of the truth.
        let wp = decode_peak(&f.waypoint_heatmaps[0]).unwrap();
        let w = f.local_to_world(wp, &env.homography).unwrap();
        assert!((w.x - 16.0).abs() <= 0.3 && (w.y - 8.0).abs() <= 0.3, "{w:?}");
        let px = env.homography.world_to_pixel(w).unwrap();
        assert_eq!((px.x.fract(), px.y.fract()), (0.0, 0.0));
    }

    #[test]
    fn past_states_are_relative_to_last_observation() {
        let cfg = RunConfig::preset("desk").unwrap();
        let f = scene_features(&cfg, &[], &record(), &env()).unwrap();
        assert_eq!(f.past_states.len(), 8);
        assert_eq!(f.past_states[7][..2], [0.0, 0.0]);
        assert!((f.past_states[7][2] - 2.5).abs() < 1e-12);
        assert_eq!(f.future_rel[11], Point2::new(12.0, 0.0));
    }
}
