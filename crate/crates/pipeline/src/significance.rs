//! Friedman/Nemenyi and Bayesian signed-rank comparisons over metric CSVs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use goalcast_core::metrics::{read_metric_csv, SceneMetrics, Units};
use goalcast_core::stats::{
    average_ranks, bayesian_signed_rank, friedman, lower_is_better, nemenyi_cd, nemenyi_q, rope_for, significant_pairs,
    PairedScores, RankTable, SignedRankConfig, SignedRankResult,
};
use goalcast_core::{Error, Exec};
use serde::Serialize;

use crate::error::{PipelineError, Result};

/// ROPE half-width: `auto` picks the metric's default for the units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rope {
    Auto,
    Value(f64),
}

impl std::str::FromStr for Rope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Rope::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(Rope::Value(v)),
            _ => Err(format!("rope must be 'auto' or a non-negative number, got '{s}'")),
        }
    }
}

/// One method's metric CSV.
#[derive(Debug, Clone)]
pub struct MethodInput {
    pub label: String,
    pub path: PathBuf,
}

impl MethodInput {
    /// `label=path`, or a bare path labelled by its parent directory.
    pub fn parse(arg: &str) -> Self {
        if let Some((label, path)) = arg.split_once('=') {
            return Self { label: label.into(), path: PathBuf::from(path) };
        }
        let path = PathBuf::from(arg);
        let label = path
            .parent()
            .and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| arg.to_string());
        Self { label, path }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FriedmanSummary {
    pub chi2: f64,
    pub f_stat: f64,
    pub dof: (usize, usize),
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NemenyiSummary {
    pub q_alpha: f64,
    pub critical_difference: f64,
    pub significant_pairs: Vec<(String, String)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairSummary {
    pub method_a: String,
    pub method_b: String,
    #[serde(flatten)]
    pub result: SignedRankResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub metric: String,
    pub units: Units,
    pub rope: f64,
    pub scenes: usize,
    pub methods: Vec<String>,
    pub mean: Vec<f64>,
    pub average_ranks: Vec<f64>,
    pub friedman: Option<FriedmanSummary>,
    pub nemenyi: Option<NemenyiSummary>,
    pub signed_rank: Vec<PairSummary>,
    pub warnings: Vec<String>,
}

fn column(metric: &str) -> Result<(&'static str, fn(&SceneMetrics) -> f64)> {
    Ok(match metric.to_ascii_lowercase().as_str() {
        "ade" | "min_ade" => ("min_ade", |m| m.min_ade),
        "fde" | "min_fde" => ("min_fde", |m| m.min_fde),
        "nll" | "kde_nll" => ("kde_nll", |m| m.kde_nll),
        "ecfl" => ("ecfl", |m| m.ecfl),
        other => return Err(PipelineError::Usage(format!("unknown metric '{other}'"))),
    })
}

/// Compares methods scene by scene on one metric. Every CSV must cover the
/// same scene ids.
pub fn compare(inputs: &[MethodInput], metric: &str, rope: Rope, units: Units, seed: u64, exec: Exec) -> Result<StatsReport> {
    if inputs.len() < 2 {
        return Err(PipelineError::Usage("stats needs at least two metric CSVs".into()));
    }
    let (name, get) = column(metric)?;
    let rope = match rope {
        Rope::Auto => rope_for(name, units)?,
        Rope::Value(v) => v,
    };
    let low = lower_is_better(name)?;
    let mut tables: Vec<BTreeMap<String, f64>> = Vec::new();
    for m in inputs {
        let rows = read_metric_csv(&m.path)?;
        let map: BTreeMap<String, f64> = rows.iter().map(|r| (r.scene_id.clone(), get(r))).collect();
        if map.values().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("{} has non-finite {name} values", m.path.display())).into());
        }
        tables.push(map);
    }
    let scenes: Vec<String> = tables[0].keys().cloned().collect();
    if tables.iter().any(|t| t.len() != scenes.len() || !scenes.iter().all(|s| t.contains_key(s))) {
        return Err(Error::Domain("metric CSVs cover different scenes".into()).into());
    }
    let methods: Vec<String> = inputs.iter().map(|m| m.label.clone()).collect();
    let scores: Vec<Vec<f64>> = scenes.iter().map(|s| tables.iter().map(|t| t[s]).collect()).collect();
    let n = scenes.len() as f64;
    let mean = (0..methods.len())
        .map(|j| scores.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let rt = RankTable::from_scores(methods.clone(), scenes.clone(), &scores, &vec![low; scenes.len()])?;
    let avg = average_ranks(&rt);
    let mut warnings = Vec::new();
    let fr = match friedman(&rt) {
        Ok(f) => Some(FriedmanSummary { chi2: f.chi2, f_stat: f.f_stat, dof: f.dof, p_value: f.p_value() }),
        Err(e) => {
            warnings.push(format!("friedman: {e}"));
            None
        }
    };
    let nemenyi = match nemenyi_q(methods.len()) {
        Ok(q) => {
            let cd = nemenyi_cd(methods.len(), scenes.len(), q);
            Some(NemenyiSummary {
                q_alpha: q,
                critical_difference: cd,
                significant_pairs: significant_pairs(&avg, cd)
                    .into_iter()
                    .map(|(i, j)| (methods[i].clone(), methods[j].clone()))
                    .collect(),
            })
        }
        Err(e) => {
            warnings.push(format!("nemenyi: {e}"));
            None
        }
    };
    let cfg = SignedRankConfig { seed, ..SignedRankConfig::default() };
    let mut pairs = Vec::new();
    for a in 0..methods.len() {
        for b in a + 1..methods.len() {
            let sign = if low { -1.0 } else { 1.0 };
            let ps = PairedScores {
                method_a: methods[a].clone(),
                method_b: methods[b].clone(),
                diffs: scores.iter().map(|r| sign * (r[a] - r[b])).collect(),
                rope,
            };
            pairs.push(PairSummary {
                method_a: ps.method_a.clone(),
                method_b: ps.method_b.clone(),
                result: bayesian_signed_rank(&ps, &cfg, exec)?,
            });
        }
    }
    Ok(StatsReport {
        metric: name.into(),
        units,
        rope,
        scenes: scenes.len(),
        methods,
        mean,
        average_ranks: avg,
        friedman: fr,
        nemenyi,
        signed_rank: pairs,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use goalcast_core::metrics::CSV_HEADER;

    fn csv(dir: &Path, name: &str, ades: &[f64]) -> MethodInput {
        let mut text = format!("{CSV_HEADER}\n");
        for (i, a) in ades.iter().enumerate() {
            text.push_str(&format!("s{i},5,{a},{},1.0,100.0\n", 2.0 * a));
        }
        let path = dir.join(format!("{name}.csv"));
        std::fs::write(&path, text).unwrap();
        MethodInput { label: name.into(), path }
    }

    #[test]
    fn auto_rope_uses_metric_default() {
        let dir = tempfile::tempdir().unwrap();
        let a = csv(dir.path(), "a", &[1.0, 2.0, 3.0]);
        let b = csv(dir.path(), "b", &[1.1, 2.1, 3.1]);
        let r = compare(&[a.clone(), b.clone()], "ade", Rope::Auto, Units::Meters, 0, Exec::Sequential).unwrap();
        assert_eq!(r.rope, 0.5);
        assert_eq!(r.average_ranks, vec![1.0, 2.0]);
        let p = r.signed_rank[0].result;
        assert!(p.p_rope > 0.9, "{p:?}");
        let r = compare(&[a, b], "ade", Rope::Auto, Units::Pixels, 0, Exec::Sequential).unwrap();
        assert_eq!(r.rope, 1.0);
    }

    #[test]
    fn dominant_method_wins_and_ranks_first() {
        let dir = tempfile::tempdir().unwrap();
        let good = csv(dir.path(), "good", &[1.0; 30]);
        let bad = csv(dir.path(), "bad", &[5.0; 30]);
        let mid = csv(dir.path(), "mid", &[3.0; 30]);
        let r = compare(&[good, bad, mid], "ade", Rope::Value(0.5), Units::Meters, 1, Exec::Sequential).unwrap();
        assert_eq!(r.average_ranks, vec![1.0, 3.0, 2.0]);
        assert!(r.signed_rank[0].result.p_a_wins > 0.99);
        // Pairs are (good, bad), (good, mid), (bad, mid).
        assert!(r.signed_rank[1].result.p_a_wins > 0.99);
        assert!(r.signed_rank[2].result.p_b_wins > 0.99);
        assert_eq!(r.nemenyi.unwrap().significant_pairs.len(), 3);
    }

    #[test]
    fn rejects_mismatched_scenes_and_unknown_metric() {
        let dir = tempfile::tempdir().unwrap();
        let a = csv(dir.path(), "a", &[1.0, 2.0]);
        let b = csv(dir.path(), "b", &[1.0, 2.0, 3.0]);
        assert!(compare(&[a.clone(), b], "ade", Rope::Auto, Units::Meters, 0, Exec::Sequential).is_err());
        assert!(compare(&[a.clone(), a], "speed", Rope::Auto, Units::Meters, 0, Exec::Sequential).is_err());
        assert_eq!("auto".parse::<Rope>().unwrap(), Rope::Auto);
        assert!("-1".parse::<Rope>().is_err());
        assert_eq!(MethodInput::parse("out/eval/base/metrics_k20.csv").label, "base");
        assert_eq!(MethodInput::parse("x=y.csv").label, "x");
    }
}
