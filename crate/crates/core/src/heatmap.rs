//! Gaussian heatmap encoding of trajectory points and goals, and decoding
//! back to pixel coordinates.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{Point2, Raster};

/// Pixel variance of the heatmap kernel (σ² = 4).
pub const DEFAULT_VARIANCE: f64 = 4.0;

/// Renders an isotropic Gaussian bump `exp(-d²/(2·variance))` at the nearest
/// pixel of every point, combining bumps by per-pixel maximum. The kernel is
/// truncated to zero beyond 4σ. Points outside the raster produce clipped
/// bumps.
pub fn encode_points(points: &[Point2], height: usize, width: usize, variance: f64) -> Result<Raster> {
    if !(variance > 0.0) {
        return Err(Error::Domain(format!("heatmap variance must be > 0, got {variance}")));
    }
    let mut out = Raster::zeros(height, width);
    let cutoff2 = 16.0 * variance;
    let reach = cutoff2.sqrt().ceil() as i64;
    for p in points.iter().filter(|p| p.x.is_finite() && p.y.is_finite()) {
        let (r0, c0) = p.cell();
        let rows = (r0 - reach).max(0)..=(r0 + reach).min(height as i64 - 1);
        for r in rows {
            let dr = (r - r0) as f64;
            let cols = (c0 - reach).max(0)..=(c0 + reach).min(width as i64 - 1);
            for c in cols {
                let dc = (c - c0) as f64;
                let d2 = dr * dr + dc * dc;
                if d2 > cutoff2 {
                    continue;
                }
                let v = (-d2 / (2.0 * variance)).exp();
                let idx = r as usize * width + c as usize;
                if v > out.data[idx] {
                    out.data[idx] = v;
                }
            }
        }
    }
    Ok(out)
}

/// All past points in a single channel. An empty past yields an all-zero
/// channel and a warning message.
pub fn encode_past(
    past_px: &[Point2],
    height: usize,
    width: usize,
    variance: f64,
) -> Result<(Raster, Option<String>)> {
    let raster = encode_points(past_px, height, width, variance)?;
    let warning = past_px.is_empty().then(|| {
        log::warn!("empty past trajectory rendered as an all-zero heatmap");
        "empty past trajectory".to_string()
    });
    Ok((raster, warning))
}

pub fn encode_goal(point_px: Point2, height: usize, width: usize, variance: f64) -> Result<Raster> {
    encode_points(&[point_px], height, width, variance)
}

/// Argmax pixel as `(x = col, y = row)`; ties go to the smallest row, then
/// the smallest column.
pub fn decode_peak(hm: &Raster) -> Result<Point2> {
    if hm.data.is_empty() {
        return Err(Error::Decode("empty heatmap".into()));
    }
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in hm.data.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    if !(best_v > 0.0) {
        return Err(Error::Decode("heatmap has no positive value".into()));
    }
    Ok(Point2::new((best % hm.width) as f64, (best / hm.width) as f64))
}

/// Expected pixel coordinate under `softmax(hm / temperature)`.
pub fn softargmax(hm: &Raster, temperature: f64) -> Result<Point2> {
    if !(temperature > 0.0) {
        return Err(Error::Domain("softargmax temperature must be > 0".into()));
    }
    if hm.data.is_empty() {
        return Err(Error::Decode("empty heatmap".into()));
    }
    let m = hm.max();
    let (mut z, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, &v) in hm.data.iter().enumerate() {
        let e = ((v - m) / temperature).exp();
        z += e;
        sx += e * (i % hm.width) as f64;
        sy += e * (i / hm.width) as f64;
    }
    Ok(Point2::new(sx / z, sy / z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelRole {
    SemanticMap,
    PastTrajectory,
    LongGoal,
    ShortGoal(usize),
}

impl ChannelRole {
    fn tag(self) -> String {
        match self {
            ChannelRole::SemanticMap => "semantic-map".into(),
            ChannelRole::PastTrajectory => "past-traj".into(),
            ChannelRole::LongGoal => "long-goal".into(),
            ChannelRole::ShortGoal(k) => format!("short-goal-{k}"),
        }
    }
}

/// Channel-stacked rasters sharing one size.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub size: usize,
    pub channels: Vec<Raster>,
    pub roles: Vec<ChannelRole>,
}

impl HeatmapStack {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            channels: Vec::new(),
            roles: Vec::new(),
        }
    }

    pub fn push(&mut self, role: ChannelRole, raster: Raster) -> Result<()> {
        if raster.height != self.size || raster.width != self.size {
            return Err(Error::Domain(format!(
                "channel {} is {}x{}, stack is {}x{}",
                role.tag(),
                raster.height,
                raster.width,
                self.size,
                self.size
            )));
        }
        if raster.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!("channel {} has values outside [0,1]", role.tag())));
        }
        self.channels.push(raster);
        self.roles.push(role);
        Ok(())
    }

    pub fn channel(&self, role: ChannelRole) -> Option<&Raster> {
        self.roles.iter().position(|&r| r == role).map(|i| &self.channels[i])
    }

    /// A model input carries exactly one semantic-map channel.
    pub fn validate_model_input(&self) -> Result<()> {
        let maps = self.roles.iter().filter(|&&r| r == ChannelRole::SemanticMap).count();
        if maps != 1 {
            return Err(Error::Domain(format!("expected one semantic-map channel, found {maps}")));
        }
        Ok(())
    }

    /// Writes one `<prefix>_<idx>_<role>.pgm` per channel.
    pub fn dump_pgm(&self, dir: &Path, prefix: &str) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for (i, (ch, role)) in self.channels.iter().zip(&self.roles).enumerate() {
            let path = dir.join(format!("{prefix}_{i:02}_{}.pgm", role.tag()));
            ch.write_pgm(&path)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_point_peak() {
        let hm = encode_points(&[Point2::new(10.0, 10.0)], 32, 32, 4.0).unwrap();
        assert_eq!(hm.get(10, 10), 1.0);
        assert_eq!(decode_peak(&hm).unwrap(), Point2::new(10.0, 10.0));
        // Distance 2 from the peak: exp(-4/8).
        assert!((hm.get(12, 10) - 0.6065306597).abs() < 1e-9);
        assert!((hm.get(10, 8) - (-0.5f64).exp()).abs() < 1e-12);
        // Beyond 4σ = 8 px the kernel is exactly zero.
        assert_eq!(hm.get(10, 19), 0.0);
        assert!(hm.get(10, 18) > 0.0);
    }

    #[test]
    fn two_points_keep_two_unit_peaks() {
        let hm = encode_points(&[Point2::new(5.0, 10.0), Point2::new(45.0, 10.0)], 20, 60, 4.0).unwrap();
        assert_eq!(hm.get(10, 5), 1.0);
        assert_eq!(hm.get(10, 45), 1.0);
        assert_eq!(hm.get(10, 25), 0.0);
    }

    #[test]
    fn past_encoding_cases() {
        let pts: Vec<Point2> = (0..8).map(|i| Point2::new(4.0 + 3.0 * i as f64, 16.0)).collect();
        let (hm, warn) = encode_past(&pts, 32, 32, 4.0).unwrap();
        assert!(warn.is_none());
        assert_eq!(hm.max(), 1.0);
        for p in &pts {
            assert_eq!(hm.get(16, p.x as usize), 1.0);
        }
        let repeated = vec![Point2::new(7.0, 9.0); 8];
        let (a, _) = encode_past(&repeated, 32, 32, 4.0).unwrap();
        let b = encode_goal(Point2::new(7.0, 9.0), 32, 32, 4.0).unwrap();
        assert_eq!(a, b);
        let (z, warn) = encode_past(&[], 16, 16, 4.0).unwrap();
        assert!(warn.is_some());
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corner_goal_is_clipped() {
        let hm = encode_goal(Point2::new(0.0, 0.0), 32, 32, 4.0).unwrap();
        assert_eq!(decode_peak(&hm).unwrap(), Point2::new(0.0, 0.0));
        let interior = encode_goal(Point2::new(16.0, 16.0), 32, 32, 4.0).unwrap();
        let (sc, si): (f64, f64) = (hm.data.iter().sum(), interior.data.iter().sum());
        // Quarter bump plus the shared row/column through the corner.
        assert!(sc < si / 2.0 && sc > si / 4.0);
    }

    #[test]
    fn interior_goal_mass_is_translation_invariant() {
        // Direct summation of the truncated kernel around the origin.
        let mut oracle = 0.0;
        for dr in -8i32..=8 {
            for dc in -8i32..=8 {
                let d2 = (dr * dr + dc * dc) as f64;
                if d2 <= 64.0 {
                    oracle += (-d2 / 8.0).exp();
                }
            }
        }
        for (x, y) in [(20.0, 20.0), (31.0, 12.0), (9.0, 40.0)] {
            let hm = encode_goal(Point2::new(x, y), 64, 64, 4.0).unwrap();
            let s: f64 = hm.data.iter().sum();
            assert!((s - oracle).abs() < 1e-9, "{s} vs {oracle}");
        }
    }

    #[test]
    fn decode_tie_break_and_errors() {
        let c = Raster::filled(6, 6, 0.5);
        assert_eq!(decode_peak(&c).unwrap(), Point2::new(0.0, 0.0));
        let mut bi = Raster::zeros(40, 40);
        bi.set(5, 5, 0.9);
        bi.set(2, 30, 1.0);
        assert_eq!(decode_peak(&bi).unwrap(), Point2::new(30.0, 2.0));
        assert!(matches!(decode_peak(&Raster::zeros(4, 4)), Err(Error::Decode(_))));
        assert!(encode_points(&[], 4, 4, 0.0).is_err());
    }

    #[test]
    fn softargmax_cases() {
        let hm = encode_goal(Point2::new(20.0, 20.0), 41, 41, 4.0).unwrap();
        let p = softargmax(&hm, 0.5).unwrap();
        assert!((p.x - 20.0).abs() < 0.05 && (p.y - 20.0).abs() < 0.05);
        let flat = Raster::filled(10, 14, 0.3);
        let q = softargmax(&flat, 1.0).unwrap();
        assert!((q.x - 6.5).abs() < 1e-12 && (q.y - 4.5).abs() < 1e-12);
        let mut uni = Raster::zeros(16, 16);
        uni.set(3, 11, 0.8);
        uni.set(4, 11, 0.5);
        let cold = softargmax(&uni, 1e-3).unwrap();
        let peak = decode_peak(&uni).unwrap();
        assert!((cold.x - peak.x).abs() < 1e-9 && (cold.y - peak.y).abs() < 1e-9);
        assert!(softargmax(&uni, 0.0).is_err());
    }

    #[test]
    fn stack_validation() {
        let mut s = HeatmapStack::new(8);
        s.push(ChannelRole::PastTrajectory, Raster::zeros(8, 8)).unwrap();
        assert!(s.validate_model_input().is_err());
        s.push(ChannelRole::SemanticMap, Raster::filled(8, 8, 1.0)).unwrap();
        s.validate_model_input().unwrap();
        assert!(s.push(ChannelRole::LongGoal, Raster::zeros(4, 8)).is_err());
        assert!(s.push(ChannelRole::LongGoal, Raster::filled(8, 8, 1.5)).is_err());
        assert!(s.channel(ChannelRole::SemanticMap).is_some());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(x in 0usize..64, y in 0usize..64) {
            let p = Point2::new(x as f64, y as f64);
            let hm = encode_goal(p, 64, 64, DEFAULT_VARIANCE).unwrap();
            prop_assert_eq!(decode_peak(&hm).unwrap(), p);
            prop_assert!(hm.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn permutation_invariant(pts in proptest::collection::vec((0.0f64..30.0, 0.0f64..30.0), 1..6)) {
            let a: Vec<Point2> = pts.iter().map(|&(x, y)| Point2::new(x, y)).collect();
            let mut b = a.clone();
            b.reverse();
            prop_assert_eq!(encode_points(&a, 30, 30, 4.0).unwrap(), encode_points(&b, 30, 30, 4.0).unwrap());
        }

        #[test]
        fn interior_goals_are_translates(x in 10i64..50, y in 10i64..50, dx in -8i64..8, dy in -8i64..8) {
            let a = encode_goal(Point2::new(x as f64, y as f64), 60, 60, 4.0).unwrap();
            let b = encode_goal(Point2::new((x + dx) as f64, (y + dy) as f64), 60, 60, 4.0).unwrap();
            for r in 0..60i64 {
                for c in 0..60i64 {
                    let (r2, c2) = (r + dy, c + dx);
                    if (0..60).contains(&r2) && (0..60).contains(&c2) {
                        prop_assert_eq!(a.get(r as usize, c as usize), b.get(r2 as usize, c2 as usize));
                    }
                }
            }
        }
    }
}
