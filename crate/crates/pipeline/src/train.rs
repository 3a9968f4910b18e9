//! Staged training: long-goal warm-up, long-goal CVAE, waypoint network,
//! trajectory CVAE. Each stage reads its upstream checkpoints, keeps them
//! frozen, and writes its own parameters only.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use goalcast_core::envsim::{mix_seed, Split};
use goalcast_core::Exec;
use goalcast_models::gaussian::standard_normal;
use goalcast_models::macro_models::{long_goal_loss, waypoint_loss, LongGoalCvae, WaypointNet, LONG_GOAL_UNET_PREFIX};
use goalcast_models::micro_model::{micro_loss, MicroBatch, TrajectoryCvae, STATE_DIM};
use goalcast_nn::{Adam, Checkpoint, Graph, ParamStore, RngState, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::config::{RunConfig, SgInput};
use crate::data::{check_manifest, load_dataset, Dataset};
use crate::error::{PipelineError, Result};
use crate::features::{scene_features, SceneFeatures};
use crate::layout::Layout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Pretrain,
    LongGoal,
    Waypoint,
    Micro,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pretrain, Stage::LongGoal, Stage::Waypoint, Stage::Micro];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::LongGoal => "lg",
            Stage::Waypoint => "sg",
            Stage::Micro => "micro",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Parameter prefix stored in this stage's checkpoint.
    fn prefix(self) -> &'static str {
        match self {
            Stage::Pretrain => LONG_GOAL_UNET_PREFIX,
            Stage::LongGoal => "lg.",
            Stage::Waypoint => "sg.",
            Stage::Micro => "micro.",
        }
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Pretrain => &[],
            Stage::LongGoal => &[Stage::Pretrain],
            Stage::Waypoint => &[Stage::LongGoal],
            Stage::Micro => &[Stage::LongGoal],
        }
    }

    /// Whether the stage exists under the configured ablation.
    pub fn enabled(self, cfg: &RunConfig) -> bool {
        match self {
            Stage::Waypoint => !cfg.ablation.without_sg_net,
            Stage::Micro => !cfg.ablation.without_micro,
            _ => true,
        }
    }
}

/// One line of a stage log: epoch 0 is the untrained model.
pub type EpochLog = Map<String, Value>;

/// Checkpoint path and content hash of a finished stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub checkpoint_hash: String,
    pub log: Vec<EpochLog>,
}

/// Loads a stage checkpoint trained under the same configuration.
pub fn load_stage(layout: &Layout, cfg: &RunConfig, stage: Stage) -> Result<(Checkpoint, String)> {
    let path = layout.checkpoint(stage.name());
    if !path.exists() {
        return Err(PipelineError::State(format!(
            "no '{}' checkpoint at {}; run `train --stage {}` first",
            stage.name(),
            path.display(),
            stage.name()
        )));
    }
    Ok(Checkpoint::load(&path, Some(&cfg.training_hash()))?)
}

/// Features of every record in `split`, in file order.
pub fn split_features(cfg: &RunConfig, ds: &Dataset, split: Split, exec: Exec) -> Result<Vec<SceneFeatures>> {
    let recs = ds.split(split);
    if recs.is_empty() {
        return Err(goalcast_core::Error::InsufficientData(format!("no {} records", split.as_str())).into());
    }
    let steps = cfg.effective_sg_indices();
    exec.map(&recs, |r| -> Result<SceneFeatures> {
        let env = ds.grid(&r.env_id)?;
        Ok(scene_features(cfg, &steps, r, &env)?)
    })
    .into_iter()
    .collect()
}

fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>, shape: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(shape.iter().product());
    rows.for_each(|r| data.extend_from_slice(r));
    Tensor::from_vec(shape, data)
}

fn stage_rng(cfg: &RunConfig, stage: Stage) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.train.seed, 0x7A, stage as u64]))
}

fn batches(n: usize, size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        idx.shuffle(rng);
    }
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

fn fault(stage: Stage, batch: usize, msg: impl Into<String>) -> PipelineError {
    PipelineError::TrainingFault { stage: stage.name().into(), batch, msg: msg.into() }
}

/// Running means of named scalars plus a minimum tracker.
#[derive(Default)]
struct Meter {
    sums: BTreeMap<&'static str, f64>,
    mins: BTreeMap<&'static str, f64>,
    n: usize,
}

impl Meter {
    fn add(&mut self, vals: &[(&'static str, f64)]) {
        for &(k, v) in vals {
            *self.sums.entry(k).or_default() += v;
        }
        self.n += 1;
    }

    fn min(&mut self, key: &'static str, v: f64) {
        let e = self.mins.entry(key).or_insert(f64::INFINITY);
        *e = e.min(v);
    }

    fn finish(self, epoch: usize, extra: &[(&str, f64)]) -> EpochLog {
        let mut m = Map::new();
        m.insert("epoch".into(), json!(epoch));
        for (k, s) in self.sums {
            m.insert(k.into(), json!(s / self.n as f64));
        }
        for (k, v) in self.mins {
            m.insert(k.into(), json!(v));
        }
        for &(k, v) in extra {
            m.insert(k.into(), json!(v));
        }
        m
    }
}

struct LogWriter {
    file: fs::File,
    path: std::path::PathBuf,
    rows: Vec<EpochLog>,
}

impl LogWriter {
    fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
        Ok(Self { file, path: path.to_path_buf(), rows: Vec::new() })
    }

    fn push(&mut self, stage: Stage, row: EpochLog) -> Result<()> {
        log::info!("{} {}", stage.name(), Value::Object(row.clone()));
        writeln!(self.file, "{}", Value::Object(row.clone())).map_err(|e| PipelineError::io(&self.path, e))?;
        self.rows.push(row);
        Ok(())
    }
}

fn save_stage(
    layout: &Layout,
    cfg: &RunConfig,
    stage: Stage,
    store: &ParamStore,
    opt: Adam,
    rng: &ChaCha8Rng,
    upstream: BTreeMap<String, String>,
    epochs: usize,
) -> Result<String> {
    let mut params = ParamStore::new();
    params.copy_prefix_from(store, stage.prefix());
    let ck = Checkpoint {
        stage: stage.name().into(),
        config_hash: cfg.training_hash(),
        upstream,
        epoch: epochs as u64,
        rng: RngState::capture(rng),
        params,
        optimizer: Some(opt),
        meta: json!({ "tag": cfg.ablation.tag() }),
    };
    let path = layout.checkpoint(stage.name());
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    Ok(ck.save(&path)?)
}

/// Loads upstream checkpoints into one store and records their hashes.
fn upstream_params(layout: &Layout, cfg: &RunConfig, stage: Stage) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let mut store = ParamStore::new();
    let mut hashes = BTreeMap::new();
    for &up in stage.upstream() {
        if !up.enabled(cfg) {
            continue;
        }
        let (ck, hash) = load_stage(layout, cfg, up)?;
        store.copy_prefix_from(&ck.params, up.prefix());
        hashes.insert(up.name().to_string(), hash);
    }
    Ok((store, hashes))
}

/// Shared state for training stages of one run.
pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    pub layout: Layout,
    pub exec: Exec,
    train: Vec<SceneFeatures>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, out: &Path, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(out, cfg);
        check_manifest(&layout.data_dir(), &cfg.dataset_config())?;
        let ds = load_dataset(&layout.data_dir())?;
        let train = split_features(cfg, &ds, Split::Train, exec)?;
        Ok(Self { cfg, layout, exec, train })
    }

    pub fn train_samples(&self) -> usize {
        self.train.len()
    }

    /// Runs the requested stage, or all enabled stages in order.
    pub fn run(&self, stage: Option<Stage>) -> Result<Vec<StageOutcome>> {
        let stages: Vec<Stage> = match stage {
            Some(s) => vec![s],
            None => Stage::ALL.to_vec(),
        };
        let mut out = Vec::new();
        for s in stages {
            if !s.enabled(self.cfg) {
                log::info!("stage {} skipped by ablation {}", s.name(), self.cfg.ablation.tag());
                continue;
            }
            out.push(match s {
                Stage::Pretrain => self.pretrain()?,
                Stage::LongGoal => self.long_goal()?,
                Stage::Waypoint => self.waypoint()?,
                Stage::Micro => self.micro()?,
            });
        }
        Ok(out)
    }

    fn size(&self) -> usize {
        self.cfg.dataset.raster_size
    }

    fn tensor4(&self, idx: &[usize], c: usize, f: impl Fn(&SceneFeatures) -> Vec<f64>) -> Tensor {
        let s = self.size();
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| f(&self.train[i])).collect();
        stack(rows.iter().map(Vec::as_slice), &[idx.len(), c, s, s])
    }

    fn long_goal_model(&self) -> Result<LongGoalCvae> {
        Ok(LongGoalCvae::new(self.cfg.long_goal_spec())?)
    }

    /// Autoencoder warm-up of the long-goal U-Net with a zero latent.
    pub fn pretrain(&self) -> Result<StageOutcome> {
        let stage = Stage::Pretrain;
        let cfg = self.cfg;
        let model = self.long_goal_model()?;
        let mut rng = stage_rng(cfg, stage);
        let mut store = ParamStore::new();
        model.init(&mut store, &mut rng);
        let mut opt = Adam::new(cfg.model.lr_lg).with_clip(cfg.model.grad_clip);
        let mut log = LogWriter::create(&self.layout.log(stage.name()))?;
        let epochs = cfg.model.pretrain_epochs;
        let mut step = 0;
        for epoch in 0..=epochs {
            let order = batches(self.train.len(), cfg.train.batch_size, (epoch > 0).then_some(&mut rng));
            let mut meter = Meter::default();
            for idx in order {
                let mut g = Graph::new(self.exec);
                let cond = g.constant(self.tensor4(&idx, 2, SceneFeatures::cond));
                let target = self.tensor4(&idx, 1, |f| f.goal_heatmap.data.clone());
                let recon = model.forward_autoencoder(&mut g, &store, cond)?;
                let l = waypoint_loss(&mut g, recon, &target);
                let v = g.value(l).item();
                if !v.is_finite() {
                    return Err(fault(stage, step, format!("non-finite loss {v}")));
                }
                meter.add(&[("loss", v)]);
                if epoch > 0 {
                    let grads = g.backward(l);
                    opt.step(&mut store, grads.params());
                    step += 1;
                }
            }
            log.push(stage, meter.finish(epoch, &[]))?;
        }
        let hash = save_stage(&self.layout, cfg, stage, &store, opt, &rng, BTreeMap::new(), epochs)?;
        Ok(StageOutcome { stage, checkpoint_hash: hash, log: log.rows })
    }

    /// Long-goal CVAE from the warmed-up U-Net; the KL weight ramps linearly
    /// per batch over the first `anneal_epochs`.
    pub fn long_goal(&self) -> Result<StageOutcome> {
        let stage = Stage::LongGoal;
        let cfg = self.cfg;
        let model = self.long_goal_model()?;
        let (pre, upstream) = upstream_params(&self.layout, cfg, stage)?;
        let mut rng = stage_rng(cfg, stage);
        let mut store = ParamStore::new();
        model.init(&mut store, &mut rng);
        store.copy_prefix_from(&pre, LONG_GOAL_UNET_PREFIX);
        let mut opt = Adam::new(cfg.model.lr_lg).with_clip(cfg.model.grad_clip);
        let mut log = LogWriter::create(&self.layout.log(stage.name()))?;
        let floor = cfg.model.lg_free_bits / cfg.model.lg_latent as f64;
        let d = cfg.model.lg_latent;
        let per_epoch = self.train.len().div_ceil(cfg.train.batch_size);
        let ramp = (cfg.model.anneal_epochs * per_epoch) as f64;
        let mut step = 0usize;
        for epoch in 0..=cfg.train.lg_epochs {
            let order = batches(self.train.len(), cfg.train.batch_size, (epoch > 0).then_some(&mut rng));
            let mut meter = Meter::default();
            let mut anneal = 0.0;
            for idx in order {
                anneal = if epoch == 0 {
                    0.0
                } else if ramp == 0.0 {
                    1.0
                } else {
                    ((step + 1) as f64 / ramp).min(1.0)
                };
                let mut g = Graph::new(self.exec);
                let cond = g.constant(self.tensor4(&idx, 2, SceneFeatures::cond));
                let post = g.constant(self.tensor4(&idx, 3, SceneFeatures::posterior_input));
                let target = self.tensor4(&idx, 1, |f| f.goal_heatmap.data.clone());
                let eps = standard_normal(&mut rng, &[idx.len(), d]);
                let fwd = model.forward_train(&mut g, &store, cond, post, eps)?;
                let l = long_goal_loss(&mut g, &fwd, &target, floor, anneal);
                let total = g.value(l.total).item();
                if !total.is_finite() || !fwd.posterior.value(&g).all_finite() || !fwd.prior.value(&g).all_finite() {
                    return Err(fault(stage, step, format!("non-finite loss or latent (loss {total})")));
                }
                meter.add(&[("loss", total), ("focal", l.focal), ("kl", l.kl), ("kl_clamped", l.kl_clamped)]);
                meter.min("kl_clamped_min", l.kl_clamped);
                if epoch > 0 {
                    let grads = g.backward(l.total);
                    opt.step(&mut store, grads.params());
                    step += 1;
                }
            }
            log.push(stage, meter.finish(epoch, &[("anneal", anneal), ("kl_floor", cfg.model.lg_free_bits)]))?;
        }
        let hash = save_stage(&self.layout, cfg, stage, &store, opt, &rng, upstream, cfg.train.lg_epochs)?;
        Ok(StageOutcome { stage, checkpoint_hash: hash, log: log.rows })
    }

    /// Long-goal channel fed to the waypoint network for each training sample.
    fn waypoint_goal_inputs(&self, lg_store: &ParamStore, rng: &mut ChaCha8Rng) -> Result<Vec<Option<Vec<f64>>>> {
        if self.cfg.train.sg_input == SgInput::Gt {
            return Ok(vec![None; self.train.len()]);
        }
        let model = self.long_goal_model()?;
        let s = self.size();
        let seeds: Vec<u64> = (0..self.train.len()).map(|_| rng.random()).collect();
        let exec = self.exec;
        exec.map_range(self.train.len(), |i| -> Result<Option<Vec<f64>>> {
            let f = &self.train[i];
            let cond = Tensor::from_vec(&[1, 2, s, s], f.cond());
            let mut r = ChaCha8Rng::seed_from_u64(seeds[i]);
            let out = model.sample(lg_store, &cond, 1, 1.0, &mut r, Exec::Sequential)?;
            Ok(Some(out.heatmaps.into_data()))
        })
        .into_iter()
        .collect()
    }

    /// Waypoint network on a frozen long-goal stage.
    pub fn waypoint(&self) -> Result<StageOutcome> {
        let stage = Stage::Waypoint;
        let cfg = self.cfg;
        let spec = cfg.waypoint_spec().ok_or_else(|| PipelineError::Config("waypoint network is ablated".into()))?;
        let n_out = spec.out_channels;
        let model = WaypointNet::new(spec)?;
        let (lg, upstream) = upstream_params(&self.layout, cfg, stage)?;
        let mut rng = stage_rng(cfg, stage);
        let mut store = ParamStore::new();
        model.init(&mut store, &mut rng);
        let predicted = self.waypoint_goal_inputs(&lg, &mut rng)?;
        let mut opt = Adam::new(cfg.model.lr_sg).with_clip(cfg.model.grad_clip);
        let mut log = LogWriter::create(&self.layout.log(stage.name()))?;
        let mut step = 0;
        for epoch in 0..=cfg.train.sg_epochs {
            let order = batches(self.train.len(), cfg.train.batch_size, (epoch > 0).then_some(&mut rng));
            let mut meter = Meter::default();
            for idx in order {
                let use_pred: Vec<bool> = idx
                    .iter()
                    .map(|_| match cfg.train.sg_input {
                        SgInput::Gt => false,
                        SgInput::Predicted => true,
                        SgInput::Mixed => rng.random_bool(0.5),
                    })
                    .collect();
                let mut g = Graph::new(self.exec);
                let s = self.size();
                let rows: Vec<Vec<f64>> = idx
                    .iter()
                    .zip(&use_pred)
                    .map(|(&i, &p)| {
                        let f = &self.train[i];
                        match (&predicted[i], p) {
                            (Some(goal), true) => f.waypoint_input(goal),
                            _ => f.waypoint_input(&f.goal_heatmap.data),
                        }
                    })
                    .collect();
                let x = g.constant(stack(rows.iter().map(Vec::as_slice), &[idx.len(), 3, s, s]));
                let target = self.tensor4(&idx, n_out, SceneFeatures::waypoint_target);
                let y = model.forward(&mut g, &store, x)?;
                let l = waypoint_loss(&mut g, y, &target);
                let v = g.value(l).item();
                if !v.is_finite() {
                    return Err(fault(stage, step, format!("non-finite loss {v}")));
                }
                meter.add(&[("loss", v)]);
                if epoch > 0 {
                    let grads = g.backward(l);
                    opt.step(&mut store, grads.params());
                    step += 1;
                }
            }
            log.push(stage, meter.finish(epoch, &[]))?;
        }
        let hash = save_stage(&self.layout, cfg, stage, &store, opt, &rng, upstream, cfg.train.sg_epochs)?;
        Ok(StageOutcome { stage, checkpoint_hash: hash, log: log.rows })
    }

    /// Trajectory CVAE with teacher-forced ground-truth goals and map
    /// features from the frozen long-goal encoder.
    pub fn micro(&self) -> Result<StageOutcome> {
        let stage = Stage::Micro;
        let cfg = self.cfg;
        let spec = cfg.micro_spec();
        let model = TrajectoryCvae::new(spec.clone())?;
        let (lg, upstream) = upstream_params(&self.layout, cfg, stage)?;
        let lg_model = self.long_goal_model()?;
        let mut rng = stage_rng(cfg, stage);
        let mut store = ParamStore::new();
        model.init(&mut store, &mut rng);

        let s = self.size();
        let chunks = batches(self.train.len(), cfg.train.batch_size, None);
        let mut map_feat = Vec::with_capacity(self.train.len() * spec.map_dim);
        for idx in &chunks {
            let cond = stack(idx.iter().map(|&i| self.train[i].cond()).collect::<Vec<_>>().iter().map(Vec::as_slice), &[idx.len(), 2, s, s]);
            map_feat.extend_from_slice(lg_model.map_features(&lg, &cond, self.exec)?.data());
        }

        let with_prior = !cfg.ablation.without_ll_prior;
        let mut opt = Adam::new(cfg.model.lr_micro).with_clip(cfg.model.grad_clip);
        let mut log = LogWriter::create(&self.layout.log(stage.name()))?;
        let mut step = 0;
        for epoch in 0..=cfg.train.micro_epochs {
            let order = batches(self.train.len(), cfg.train.batch_size, (epoch > 0).then_some(&mut rng));
            let mut meter = Meter::default();
            for idx in order {
                let b = self.micro_batch(&idx, &map_feat, spec.map_dim);
                let n = idx.len();
                let eps_q = standard_normal(&mut rng, &[n, spec.z_dim]);
                let eps_p = standard_normal(&mut rng, &[n, spec.z_dim]);
                let mut g = Graph::new(self.exec);
                let fwd = model.forward_train(&mut g, &store, &b, eps_q, eps_p)?;
                let l = micro_loss(&mut g, &fwd, b.future.as_ref().expect("training batch"), cfg.model.beta, cfg.model.micro_free_bits, with_prior);
                let total = g.value(l.total).item();
                if !total.is_finite() || !fwd.posterior.value(&g).all_finite() {
                    return Err(fault(stage, step, format!("non-finite loss or latent (loss {total})")));
                }
                let mut vals = vec![("loss", total), ("recon_post", l.recon_post), ("kl", l.kl)];
                if let Some(rp) = l.recon_prior {
                    vals.push(("recon_prior", rp));
                }
                meter.add(&vals);
                if epoch > 0 {
                    let grads = g.backward(l.total);
                    opt.step(&mut store, grads.params());
                    step += 1;
                }
            }
            log.push(stage, meter.finish(epoch, &[]))?;
        }
        let hash = save_stage(&self.layout, cfg, stage, &store, opt, &rng, upstream, cfg.train.micro_epochs)?;
        Ok(StageOutcome { stage, checkpoint_hash: hash, log: log.rows })
    }

    fn micro_batch(&self, idx: &[usize], map_feat: &[f64], map_dim: usize) -> MicroBatch {
        let n = idx.len();
        let feats: Vec<&SceneFeatures> = idx.iter().map(|&i| &self.train[i]).collect();
        let seq = |len: usize, w: usize, get: &dyn Fn(&SceneFeatures, usize) -> Vec<f64>| -> Vec<Tensor> {
            (0..len)
                .map(|t| Tensor::from_vec(&[n, w], feats.iter().flat_map(|f| get(f, t)).collect()))
                .collect()
        };
        let past_len = feats[0].past_states.len();
        let n_goals = feats[0].goals_rel.len();
        let future_len = feats[0].future_rel.len();
        MicroBatch {
            past_states: seq(past_len, STATE_DIM, &|f, t| f.past_states[t].to_vec()),
            map_feature: Tensor::from_vec(
                &[n, map_dim],
                idx.iter().flat_map(|&i| map_feat[i * map_dim..(i + 1) * map_dim].iter().copied()).collect(),
            ),
            goals: seq(n_goals, 2, &|f, t| vec![f.goals_rel[t].x, f.goals_rel[t].y]),
            future: Some(seq(future_len, 2, &|f, t| vec![f.future_rel[t].x, f.future_rel[t].y])),
        }
    }
}

/// Reads a stage log back.
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match serde_json::from_str::<Value>(l) {
            Ok(Value::Object(m)) => Ok(m),
            _ => Err(PipelineError::Data(goalcast_core::Error::Parse {
                path: path.to_path_buf(),
                msg: format!("bad log line: {l}"),
            })),
        })
        .collect()
}
