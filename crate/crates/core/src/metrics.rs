//! Forecast metrics: minimum ADE/FDE over K samples, KDE negative
//! log-likelihood and environment collision-free likelihood (ECFL).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::raster::{Homography, Point2, SemanticGrid};

/// K sampled futures for one scene plus its ground truth, world units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSet {
    pub scene_id: String,
    pub samples: Vec<Vec<Point2>>,
    pub gt_future: Vec<Point2>,
}

impl ForecastSet {
    pub fn new(scene_id: impl Into<String>, samples: Vec<Vec<Point2>>, gt_future: Vec<Point2>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Domain("forecast set needs K >= 1 samples".into()));
        }
        if gt_future.is_empty() || samples.iter().any(|s| s.len() != gt_future.len()) {
            return Err(Error::Domain("all samples must match the ground-truth horizon".into()));
        }
        Ok(Self {
            scene_id: scene_id.into(),
            samples,
            gt_future,
        })
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }
}

fn ade(sample: &[Point2], gt: &[Point2]) -> f64 {
    sample.iter().zip(gt).map(|(p, g)| p.dist(*g)).sum::<f64>() / gt.len() as f64
}

pub fn min_ade(fs: &ForecastSet) -> f64 {
    fs.samples
        .iter()
        .map(|s| ade(s, &fs.gt_future))
        .fold(f64::INFINITY, f64::min)
}

pub fn min_fde(fs: &ForecastSet) -> f64 {
    let last = fs.gt_future.len() - 1;
    fs.samples
        .iter()
        .map(|s| s[last].dist(fs.gt_future[last]))
        .fold(f64::INFINITY, f64::min)
}

/// Kernel bandwidth for the per-timestep KDE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Scott's rule: kernel covariance `cov · K^(-1/3)` for 2D data.
    Scott,
    /// Isotropic Gaussian kernel with this standard deviation.
    Fixed(f64),
}

/// Isotropic kernel std used when the samples of a step have (near) zero
/// spread.
pub const FALLBACK_BANDWIDTH: f64 = 0.2;
const MIN_VARIANCE: f64 = 1e-12;
const DENSITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct KdeNll {
    pub value: f64,
    pub warnings: Vec<String>,
}

/// Per-step 2D Gaussian KDE over the K sample positions, evaluated at the
/// ground truth; returns the negative mean log-density over the horizon.
pub fn kde_nll(fs: &ForecastSet, bandwidth: Bandwidth) -> Result<KdeNll> {
    let k = fs.k();
    if k < 2 {
        return Err(Error::InsufficientData("kde_nll needs K >= 2".into()));
    }
    let mut warnings = Vec::new();
    let mut total = 0.0;
    for (t, gt) in fs.gt_future.iter().enumerate() {
        let pts: Vec<Point2> = fs.samples.iter().map(|s| s[t]).collect();
        // Kernel covariance [[a, b], [b, c]].
        let (a, b, c) = match bandwidth {
            Bandwidth::Fixed(h) => (h * h, 0.0, h * h),
            Bandwidth::Scott => {
                let n = k as f64;
                let mx = pts.iter().map(|p| p.x).sum::<f64>() / n;
                let my = pts.iter().map(|p| p.y).sum::<f64>() / n;
                let mut sxx = 0.0;
                let mut sxy = 0.0;
                let mut syy = 0.0;
                for p in &pts {
                    sxx += (p.x - mx) * (p.x - mx);
                    sxy += (p.x - mx) * (p.y - my);
                    syy += (p.y - my) * (p.y - my);
                }
                let (sxx, sxy, syy) = (sxx / (n - 1.0), sxy / (n - 1.0), syy / (n - 1.0));
                let factor = n.powf(-1.0 / 3.0);
                let det = sxx * syy - sxy * sxy;
                if sxx < MIN_VARIANCE || syy < MIN_VARIANCE || det < MIN_VARIANCE * (sxx + syy) {
                    warnings.push(format!(
                        "{}: degenerate samples at step {t}, fixed bandwidth {FALLBACK_BANDWIDTH}",
                        fs.scene_id
                    ));
                    let h = FALLBACK_BANDWIDTH;
                    (h * h, 0.0, h * h)
                } else {
                    (sxx * factor, sxy * factor, syy * factor)
                }
            }
        };
        let det = a * c - b * b;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt());
        let density = pts
            .iter()
            .map(|p| {
                let (dx, dy) = (gt.x - p.x, gt.y - p.y);
                let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
                norm * (-0.5 * q).exp()
            })
            .sum::<f64>()
            / k as f64;
        total += density.max(DENSITY_FLOOR).ln();
    }
    Ok(KdeNll {
        value: -total / fs.gt_future.len() as f64,
        warnings,
    })
}

/// Percentage of samples whose every step lands on a navigable cell.
pub fn ecfl(fs: &ForecastSet, grid: &SemanticGrid, h: &Homography) -> f64 {
    let free = fs
        .samples
        .iter()
        .filter(|s| {
            s.iter().all(|&p| match h.world_to_pixel(p) {
                Ok(px) => grid.is_navigable_px(px),
                Err(_) => false,
            })
        })
        .count();
    100.0 * free as f64 / fs.k() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Meters,
    Pixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub kde_nll: f64,
    pub ecfl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub min_ade: f64,
    pub min_fde: f64,
    pub kde_nll: f64,
    pub ecfl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub units: Units,
    pub k: usize,
    pub scenes: Vec<SceneMetrics>,
    pub aggregate: Aggregate,
    pub warnings: Vec<String>,
}

/// Scene inputs for [`evaluate_all`].
pub struct SceneEval<'a> {
    pub forecast: ForecastSet,
    pub grid: &'a SemanticGrid,
    pub homography: &'a Homography,
}

/// All four metrics for every scene; scenes are reported sorted by id and
/// aggregated in that order.
pub fn evaluate_all(scenes: &[SceneEval<'_>], units: Units, bandwidth: Bandwidth, exec: Exec) -> Result<MetricReport> {
    if scenes.is_empty() {
        return Err(Error::InsufficientData("no scenes to evaluate".into()));
    }
    let k = scenes[0].forecast.k();
    let rows = exec.map(scenes, |s| -> Result<(SceneMetrics, Vec<String>)> {
        let fs = &s.forecast;
        let nll = if fs.k() >= 2 {
            kde_nll(fs, bandwidth)?
        } else {
            KdeNll {
                value: f64::NAN,
                warnings: vec![format!("{}: K = 1, kde_nll undefined", fs.scene_id)],
            }
        };
        Ok((
            SceneMetrics {
                scene_id: fs.scene_id.clone(),
                k: fs.k(),
                min_ade: min_ade(fs),
                min_fde: min_fde(fs),
                kde_nll: nll.value,
                ecfl: ecfl(fs, s.grid, s.homography),
            },
            nll.warnings,
        ))
    });
    let mut rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.0.scene_id.cmp(&b.0.scene_id));
    let n = rows.len() as f64;
    let mean = |f: fn(&SceneMetrics) -> f64| rows.iter().map(|r| f(&r.0)).sum::<f64>() / n;
    let aggregate = Aggregate {
        min_ade: mean(|m| m.min_ade),
        min_fde: mean(|m| m.min_fde),
        kde_nll: mean(|m| m.kde_nll),
        ecfl: mean(|m| m.ecfl),
    };
    let mut warnings = Vec::new();
    let mut out = Vec::with_capacity(rows.len());
    for (m, w) in rows {
        warnings.extend(w);
        out.push(m);
    }
    Ok(MetricReport {
        units,
        k,
        scenes: out,
        aggregate,
        warnings,
    })
}

pub const CSV_HEADER: &str = "scene_id,k,min_ade,min_fde,kde_nll,ecfl";

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for m in &self.scenes {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                m.scene_id, m.k, m.min_ade, m.min_fde, m.kde_nll, m.ecfl
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Parses a metric CSV produced by [`MetricReport::to_csv`].
pub fn read_metric_csv(path: &Path) -> Result<Vec<SceneMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(bad(1, "unexpected header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i + 2, "expected 6 columns"));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
        rows.push(SceneMetrics {
            scene_id: f[0].to_string(),
            k: f[1].trim().parse().map_err(|_| bad(i + 2, "bad k"))?,
            min_ade: num(f[2])?,
            min_fde: num(f[3])?,
            kde_nll: num(f[4])?,
            ecfl: num(f[5])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(n: usize, dx: f64, dy: f64) -> Vec<Point2> {
        (0..n).map(|i| Point2::new(i as f64 + dx, dy)).collect()
    }

    #[test]
    fn ade_fde_examples() {
        let gt = line(12, 0.0, 0.0);
        let exact = ForecastSet::new("a", vec![gt.clone()], gt.clone()).unwrap();
        assert_eq!(min_ade(&exact), 0.0);
        let off = ForecastSet::new("b", vec![line(12, 1.0, 0.0)], gt.clone()).unwrap();
        assert!((min_ade(&off) - 1.0).abs() < 1e-12);
        let two = ForecastSet::new("c", vec![line(12, 1.0, 0.0), line(12, 0.5, 0.0)], gt.clone()).unwrap();
        assert!((min_ade(&two) - 0.5).abs() < 1e-12);

        let mut wild: Vec<Point2> = line(12, 0.0, 7.0);
        wild[11] = gt[11];
        let fs = ForecastSet::new("d", vec![wild], gt.clone()).unwrap();
        assert_eq!(min_fde(&fs), 0.0);
        let mut final_off = gt.clone();
        final_off[11] = gt[11] + Point2::new(3.0, 4.0);
        assert!((min_fde(&ForecastSet::new("e", vec![final_off], gt.clone()).unwrap()) - 5.0).abs() < 1e-12);
        let mut near = gt.clone();
        near[11] = gt[11] + Point2::new(0.0, 0.2);
        let fs = ForecastSet::new("f", vec![line(12, 1.0, 0.0), near], gt).unwrap();
        assert!((min_fde(&fs) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn kde_two_sample_hand_value() {
        let fs = ForecastSet::new(
            "k",
            vec![vec![Point2::new(-1.0, 0.0)], vec![Point2::new(1.0, 0.0)]],
            vec![Point2::new(0.0, 0.0)],
        )
        .unwrap();
        let v = kde_nll(&fs, Bandwidth::Fixed(1.0)).unwrap().value;
        let expected = -((1.0 / (2.0 * std::f64::consts::PI)) * (-0.5f64).exp()).ln();
        assert!((v - 2.3379).abs() < 1e-4 && (v - expected).abs() < 1e-12);
        // Equal per-step values average to the same value.
        let fs2 = ForecastSet::new(
            "k2",
            vec![
                vec![Point2::new(-1.0, 0.0), Point2::new(4.0, 5.0)],
                vec![Point2::new(1.0, 0.0), Point2::new(6.0, 5.0)],
            ],
            vec![Point2::new(0.0, 0.0), Point2::new(5.0, 5.0)],
        )
        .unwrap();
        assert!((kde_nll(&fs2, Bandwidth::Fixed(1.0)).unwrap().value - expected).abs() < 1e-12);
        assert!(kde_nll(&ForecastSet::new("k1", vec![vec![Point2::default()]], vec![Point2::default()]).unwrap(), Bandwidth::Scott).is_err());
    }

    #[test]
    fn kde_prefers_the_mode() {
        let samples: Vec<Vec<Point2>> = [(0.0, 0.0), (0.1, 0.2), (-0.2, 0.1), (0.15, -0.1), (3.0, 3.0)]
            .iter()
            .map(|&(x, y)| vec![Point2::new(x, y)])
            .collect();
        let at_mode = ForecastSet::new("m", samples.clone(), vec![Point2::new(0.0, 0.05)]).unwrap();
        let far = ForecastSet::new("m", samples, vec![Point2::new(-4.0, 6.0)]).unwrap();
        assert!(kde_nll(&at_mode, Bandwidth::Scott).unwrap().value < kde_nll(&far, Bandwidth::Scott).unwrap().value);
    }

    #[test]
    fn kde_identical_samples_fall_back() {
        let fs = ForecastSet::new("z", vec![vec![Point2::new(1.0, 1.0)]; 4], vec![Point2::new(1.0, 1.0)]).unwrap();
        let r = kde_nll(&fs, Bandwidth::Scott).unwrap();
        assert_eq!(r.warnings.len(), 1);
        let expected = -(1.0 / (2.0 * std::f64::consts::PI * 0.04)).ln();
        assert!((r.value - expected).abs() < 1e-12);
    }

    #[test]
    fn kde_improves_toward_dense_cluster() {
        let mut samples: Vec<Vec<Point2>> = (0..6).map(|i| vec![Point2::new(0.1 * i as f64, 0.05 * (i % 2) as f64)]).collect();
        samples.push(vec![Point2::new(5.0, 4.0)]);
        let mut prev = f64::INFINITY;
        for step in 0..5 {
            let t = step as f64 / 4.0;
            let gt = Point2::new(3.0 * (1.0 - t) + 0.25 * t, 1.5 * (1.0 - t) + 0.02 * t);
            let v = kde_nll(&ForecastSet::new("p", samples.clone(), vec![gt]).unwrap(), Bandwidth::Scott).unwrap().value;
            assert!(v < prev, "{v} !< {prev}");
            prev = v;
        }
    }

    fn grid_with_wall() -> (SemanticGrid, Homography) {
        // 20x20 free grid with a wall column at x = 10.
        let cells = (0..400).map(|i| if i % 20 == 10 { 1 } else { 0 }).collect();
        (SemanticGrid::binary(20, 20, cells).unwrap(), Homography::identity())
    }

    #[test]
    fn ecfl_examples() {
        let (g, h) = grid_with_wall();
        let ok: Vec<Point2> = (0..12).map(|i| Point2::new(2.0, 1.0 + i as f64)).collect();
        let fs = ForecastSet::new("a", vec![ok.clone(), ok.clone()], ok.clone()).unwrap();
        assert_eq!(ecfl(&fs, &g, &h), 100.0);
        let mut hit = ok.clone();
        hit[3] = Point2::new(10.2, 4.0);
        let fs = ForecastSet::new("b", vec![ok.clone(), hit], ok.clone()).unwrap();
        assert_eq!(ecfl(&fs, &g, &h), 50.0);
        let mut out = ok.clone();
        out[11] = Point2::new(-3.0, 2.0);
        assert_eq!(ecfl(&ForecastSet::new("c", vec![out], ok).unwrap(), &g, &h), 0.0);
    }

    #[test]
    fn csv_round_trip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (g, h) = grid_with_wall();
        let gt: Vec<Point2> = (0..3).map(|i| Point2::new(2.0, i as f64)).collect();
        let scenes = vec![
            SceneEval { forecast: ForecastSet::new("s2", vec![gt.clone(), line(3, 1.0, 0.0)], gt.clone()).unwrap(), grid: &g, homography: &h },
            SceneEval { forecast: ForecastSet::new("s1", vec![gt.clone(), line(3, 3.0, 1.0)], gt.clone()).unwrap(), grid: &g, homography: &h },
        ];
        let rep = evaluate_all(&scenes, Units::Meters, Bandwidth::Scott, Exec::Sequential).unwrap();
        assert_eq!(rep.scenes[0].scene_id, "s1");
        let par = evaluate_all(&scenes, Units::Meters, Bandwidth::Scott, Exec::Parallel).unwrap();
        assert_eq!(rep, par);
        let p = dir.path().join("m.csv");
        rep.write_csv(&p).unwrap();
        let rows = read_metric_csv(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].scene_id, "s2");
        std::fs::write(&p, "bad,header\n").unwrap();
        assert!(read_metric_csv(&p).is_err());
    }

    proptest! {
        #[test]
        fn translation_invariance(dx in -50.0f64..50.0, dy in -50.0f64..50.0, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pt = || Point2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let gt: Vec<Point2> = (0..4).map(|_| pt()).collect();
            let samples: Vec<Vec<Point2>> = (0..5).map(|_| (0..4).map(|_| pt()).collect()).collect();
            let shift = Point2::new(dx, dy);
            let a = ForecastSet::new("t", samples.clone(), gt.clone()).unwrap();
            let b = ForecastSet::new(
                "t",
                samples.iter().map(|s| s.iter().map(|p| *p + shift).collect()).collect(),
                gt.iter().map(|p| *p + shift).collect(),
            ).unwrap();
            prop_assert!((min_ade(&a) - min_ade(&b)).abs() < 1e-9);
            prop_assert!((min_fde(&a) - min_fde(&b)).abs() < 1e-9);
            let (na, nb) = (kde_nll(&a, Bandwidth::Scott).unwrap().value, kde_nll(&b, Bandwidth::Scott).unwrap().value);
            prop_assert!((na - nb).abs() < 1e-6 * na.abs().max(1.0));
        }

        #[test]
        fn ecfl_invariant_to_order_and_duplication(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let (g, h) = grid_with_wall();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<Vec<Point2>> = (0..5)
                .map(|_| (0..6).map(|_| Point2::new(rng.random_range(-1.0..21.0), rng.random_range(-1.0..21.0))).collect())
                .collect();
            let gt = samples[0].clone();
            let base = ecfl(&ForecastSet::new("o", samples.clone(), gt.clone()).unwrap(), &g, &h);
            let mut rev = samples.clone();
            rev.reverse();
            prop_assert_eq!(base, ecfl(&ForecastSet::new("o", rev, gt.clone()).unwrap(), &g, &h));
            let doubled: Vec<Vec<Point2>> = samples.iter().chain(samples.iter()).cloned().collect();
            prop_assert_eq!(base, ecfl(&ForecastSet::new("o", doubled, gt).unwrap(), &g, &h));
        }
    }
}
