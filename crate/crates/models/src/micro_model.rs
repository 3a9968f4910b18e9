//! Recurrent conditional VAE over world-coordinate futures.
//!
//! Positions enter the network relative to the last observed point and are
//! shifted back on the way out. The decoder emits a per-step Gaussian whose
//! mean is accumulated from predicted displacements.

use goalcast_core::{Exec, Point2};
use goalcast_nn::layers::{BiLstm, GruCell, Linear, LstmCell};
use goalcast_nn::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gaussian::{standard_normal, GaussVars, MIN_STD};
use crate::{Error, Result};

/// Position, velocity, acceleration.
pub const STATE_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroSpec {
    pub past_len: usize,
    pub future_len: usize,
    /// Waypoints plus the long goal.
    pub n_goals: usize,
    pub map_dim: usize,
    pub z_dim: usize,
    pub enc_hidden: usize,
    pub prior_hidden: usize,
    pub ctx_dim: usize,
    pub dec_hidden: usize,
    pub goal_feature: usize,
}

impl MicroSpec {
    pub fn standard(n_goals: usize, map_dim: usize) -> Self {
        Self {
            past_len: 8,
            future_len: 12,
            n_goals,
            map_dim,
            z_dim: 20,
            enc_hidden: 64,
            prior_hidden: 256,
            ctx_dim: 32,
            dec_hidden: 128,
            goal_feature: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.past_len,
            self.future_len,
            self.n_goals,
            self.z_dim,
            self.enc_hidden,
            self.prior_hidden,
            self.ctx_dim,
            self.dec_hidden,
            self.goal_feature,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("micro spec has a zero dimension: {self:?}")));
        }
        Ok(())
    }
}

/// Network inputs for a batch of `n` agents; all positions relative to the
/// last observed point.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroBatch {
    /// `past_len` tensors of `[n, 6]`.
    pub past_states: Vec<Tensor>,
    /// `[n, map_dim]`.
    pub map_feature: Tensor,
    /// `n_goals` tensors of `[n, 2]`, ordered by time; the last is the long goal.
    pub goals: Vec<Tensor>,
    /// `future_len` tensors of `[n, 2]`; required for training.
    pub future: Option<Vec<Tensor>>,
}

impl MicroBatch {
    pub fn rows(&self) -> usize {
        self.map_feature.shape()[0]
    }

    pub fn validate(&self, spec: &MicroSpec) -> Result<()> {
        let n = self.rows();
        let ok_seq = |v: &[Tensor], w: usize| v.iter().all(|t| t.shape() == [n, w]);
        if self.past_states.len() != spec.past_len || !ok_seq(&self.past_states, STATE_DIM) {
            return Err(Error::Config("past states do not match the micro spec".into()));
        }
        if self.map_feature.shape() != [n, spec.map_dim] {
            return Err(Error::Config("map feature width does not match the micro spec".into()));
        }
        if self.goals.len() != spec.n_goals || !ok_seq(&self.goals, 2) {
            return Err(Error::Config(format!(
                "expected {} goal points, got {}",
                spec.n_goals,
                self.goals.len()
            )));
        }
        if let Some(f) = &self.future {
            if f.len() != spec.future_len || !ok_seq(f, 2) {
                return Err(Error::Config("future does not match the micro spec".into()));
            }
        }
        Ok(())
    }
}

/// Relative position, velocity and acceleration per past step. Derivatives
/// are backward differences with zeros at the start of the sequence.
pub fn past_states(past: &[Point2], dt: f64) -> Vec<[f64; STATE_DIM]> {
    let Some(&origin) = past.last() else { return Vec::new() };
    let mut vel = vec![Point2::new(0.0, 0.0); past.len()];
    for t in 1..past.len() {
        vel[t] = (past[t] - past[t - 1]) * (1.0 / dt);
    }
    let mut out = Vec::with_capacity(past.len());
    for t in 0..past.len() {
        let acc = if t >= 2 { (vel[t] - vel[t - 1]) * (1.0 / dt) } else { Point2::new(0.0, 0.0) };
        let p = past[t] - origin;
        out.push([p.x, p.y, vel[t].x, vel[t].y, acc.x, acc.y]);
    }
    out
}

/// Training uses ground-truth goals, testing uses predicted ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalMode {
    Train,
    Test,
}

pub fn teacher_force_goals(mode: GoalMode, gt: &[Point2], predicted: &[Point2]) -> Result<Vec<Point2>> {
    if gt.len() != predicted.len() {
        return Err(Error::Config(format!(
            "goal count mismatch: {} ground-truth vs {} predicted",
            gt.len(),
            predicted.len()
        )));
    }
    Ok(match mode {
        GoalMode::Train => gt.to_vec(),
        GoalMode::Test => predicted.to_vec(),
    })
}

/// Per-step Gaussian trajectory in the graph.
#[derive(Debug, Clone)]
pub struct TrajectoryVars {
    pub mean: Vec<Var>,
    pub std: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct MicroForward {
    pub from_posterior: TrajectoryVars,
    pub from_prior: TrajectoryVars,
    pub posterior: GaussVars,
    pub prior: GaussVars,
}

#[derive(Debug, Clone, Copy)]
pub struct MicroLoss {
    pub total: Var,
    pub recon_post: f64,
    /// Absent when the prior-sample reconstruction term is disabled.
    pub recon_prior: Option<f64>,
    pub kl: f64,
}

/// Parameters live under `micro.`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCvae {
    pub spec: MicroSpec,
    past_enc: LstmCell,
    prior_fc: Linear,
    prior_head: Linear,
    ctx_fc: Linear,
    post_enc: BiLstm,
    post_fc: Linear,
    post_head: Linear,
    goal_enc: BiLstm,
    goal_fc: Linear,
    dec_init: Linear,
    dec: GruCell,
    dec_out: Linear,
}

impl TrajectoryCvae {
    pub fn new(spec: MicroSpec) -> Result<Self> {
        spec.validate()?;
        let s = &spec;
        let post_enc = BiLstm::new("micro.post.enc", 2, s.enc_hidden);
        let goal_enc = BiLstm::new("micro.goal.enc", 2, s.enc_hidden);
        Ok(Self {
            past_enc: LstmCell::new("micro.past.enc", STATE_DIM, s.enc_hidden),
            prior_fc: Linear::new("micro.prior.fc", s.enc_hidden, s.prior_hidden),
            prior_head: Linear::new("micro.prior.head", s.prior_hidden, 2 * s.z_dim),
            ctx_fc: Linear::new("micro.ctx.fc", s.prior_hidden + s.map_dim, s.ctx_dim),
            post_fc: Linear::new("micro.post.fc", post_enc.out_dim() + s.enc_hidden, s.prior_hidden),
            post_head: Linear::new("micro.post.head", s.prior_hidden, 2 * s.z_dim),
            goal_fc: Linear::new("micro.goal.fc", goal_enc.out_dim(), s.goal_feature),
            dec_init: Linear::new("micro.dec.init", s.ctx_dim + s.z_dim, s.dec_hidden),
            dec: GruCell::new("micro.dec.gru", 2 + s.goal_feature + s.z_dim, s.dec_hidden),
            dec_out: Linear::new("micro.dec.out", s.dec_hidden, 4),
            post_enc,
            goal_enc,
            spec,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.past_enc.init(store, rng);
        for l in [
            &self.prior_fc,
            &self.prior_head,
            &self.ctx_fc,
            &self.post_fc,
            &self.post_head,
            &self.goal_fc,
            &self.dec_init,
            &self.dec_out,
        ] {
            l.init(store, rng);
        }
        self.post_enc.init(store, rng);
        self.goal_enc.init(store, rng);
        self.dec.init(store, rng);
    }

    /// Past encoding, prior and decoder context.
    fn condition(&self, g: &mut Graph, store: &ParamStore, b: &MicroBatch) -> Result<(Var, GaussVars, Var)> {
        let xs: Vec<Var> = b.past_states.iter().map(|t| g.constant(t.clone())).collect();
        let hp = self.past_enc.encode(g, store, &xs)?;
        let h = self.prior_fc.forward(g, store, hp)?;
        let h = g.relu(h);
        let head = self.prior_head.forward(g, store, h)?;
        let prior = GaussVars::from_head(g, head, self.spec.z_dim);
        let mf = g.constant(b.map_feature.clone());
        let c = g.concat(&[h, mf]);
        let c = self.ctx_fc.forward(g, store, c)?;
        let ctx = g.relu(c);
        Ok((hp, prior, ctx))
    }

    fn posterior(&self, g: &mut Graph, store: &ParamStore, b: &MicroBatch, hp: Var) -> Result<GaussVars> {
        let future = b
            .future
            .as_ref()
            .ok_or_else(|| Error::Config("training batch has no future".into()))?;
        let mut seq: Vec<Var> = b
            .past_states
            .iter()
            .map(|t| {
                let v = g.constant(t.clone());
                g.slice(v, 0, 2)
            })
            .collect();
        seq.extend(future.iter().map(|t| g.constant(t.clone())));
        let e = self.post_enc.encode(g, store, &seq)?;
        let h = g.concat(&[e, hp]);
        let h = self.post_fc.forward(g, store, h)?;
        let h = g.relu(h);
        let head = self.post_head.forward(g, store, h)?;
        Ok(GaussVars::from_head(g, head, self.spec.z_dim))
    }

    fn goal_feature(&self, g: &mut Graph, store: &ParamStore, b: &MicroBatch) -> Result<Var> {
        let xs: Vec<Var> = b.goals.iter().map(|t| g.constant(t.clone())).collect();
        let e = self.goal_enc.encode(g, store, &xs)?;
        Ok(self.goal_fc.forward(g, store, e)?)
    }

    fn decode(&self, g: &mut Graph, store: &ParamStore, ctx: Var, z: Var, goal: Var) -> Result<TrajectoryVars> {
        let n = g.shape(ctx)[0];
        let init = g.concat(&[ctx, z]);
        let h0 = self.dec_init.forward(g, store, init)?;
        let mut h = g.tanh(h0);
        let mut prev = g.constant(Tensor::zeros(&[n, 2]));
        let mut out = TrajectoryVars { mean: Vec::new(), std: Vec::new() };
        for _ in 0..self.spec.future_len {
            let x = g.concat(&[prev, goal, z]);
            h = self.dec.step(g, store, x, h)?;
            let o = self.dec_out.forward(g, store, h)?;
            let delta = g.slice(o, 0, 2);
            let raw = g.slice(o, 2, 4);
            let sp = g.softplus(raw);
            let std = g.add_scalar(sp, MIN_STD);
            let mean = g.add(prev, delta);
            out.mean.push(mean);
            out.std.push(std);
            prev = mean;
        }
        Ok(out)
    }

    /// Decodes once from a posterior sample and once from a prior sample.
    /// `eps_post` and `eps_prior` are `[n, z_dim]` standard-normal noise.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        b: &MicroBatch,
        eps_post: Tensor,
        eps_prior: Tensor,
    ) -> Result<MicroForward> {
        b.validate(&self.spec)?;
        let (hp, prior, ctx) = self.condition(g, store, b)?;
        let posterior = self.posterior(g, store, b, hp)?;
        let goal = self.goal_feature(g, store, b)?;
        let zq = posterior.rsample(g, eps_post);
        let zp = prior.rsample(g, eps_prior);
        let from_posterior = self.decode(g, store, ctx, zq, goal)?;
        let from_prior = self.decode(g, store, ctx, zp, goal)?;
        Ok(MicroForward { from_posterior, from_prior, posterior, prior })
    }

    /// One prior draw per row (std multiplied by `std_scale`); returns the
    /// decoded means as relative positions, `n × future_len`.
    pub fn sample<R: Rng>(
        &self,
        store: &ParamStore,
        b: &MicroBatch,
        std_scale: f64,
        rng: &mut R,
        exec: Exec,
    ) -> Result<Vec<Vec<Point2>>> {
        if !store.contains("micro.dec.out.w") {
            return Err(Error::State("trajectory model parameters are not loaded".into()));
        }
        b.validate(&self.spec)?;
        let n = b.rows();
        let mut g = Graph::new(exec);
        let (_, prior, ctx) = self.condition(&mut g, store, b)?;
        let eps = standard_normal(rng, &[n, self.spec.z_dim]).map(|v| v * std_scale);
        let z = prior.rsample(&mut g, eps);
        let goal = self.goal_feature(&mut g, store, b)?;
        let out = self.decode(&mut g, store, ctx, z, goal)?;
        Ok((0..n)
            .map(|i| {
                out.mean
                    .iter()
                    .map(|&m| {
                        let d = g.value(m).data();
                        Point2::new(d[2 * i], d[2 * i + 1])
                    })
                    .collect()
            })
            .collect())
    }
}

fn trajectory_nll(g: &mut Graph, t: &TrajectoryVars, future: &[Tensor]) -> Var {
    let mut acc: Option<Var> = None;
    for ((&m, &s), y) in t.mean.iter().zip(&t.std).zip(future) {
        let l = g.gauss_nll(m, s, y);
        acc = Some(match acc {
            Some(a) => g.add(a, l),
            None => l,
        });
    }
    acc.expect("non-empty future")
}

/// `NLL_post + NLL_prior + β·max(floor, KL)`; NLLs are summed over steps and
/// coordinates and averaged over the batch, KL is the batch mean summed over
/// dimensions.
pub fn micro_loss(
    g: &mut Graph,
    fwd: &MicroForward,
    future: &[Tensor],
    beta: f64,
    kl_floor: f64,
    with_prior_recon: bool,
) -> MicroLoss {
    assert!(beta > 0.0 && kl_floor >= 0.0);
    let n = g.shape(fwd.posterior.mean)[0] as f64;
    let rq = trajectory_nll(g, &fwd.from_posterior, future);
    let rq = g.scale(rq, 1.0 / n);
    let kl = fwd.posterior.kl_per_dim(g, &fwd.prior);
    let kl = g.sum(kl);
    let klc = g.max_floor(kl, kl_floor);
    let klw = g.scale(klc, beta);
    let mut total = g.add(rq, klw);
    let mut recon_prior = None;
    if with_prior_recon {
        let rp = trajectory_nll(g, &fwd.from_prior, future);
        let rp = g.scale(rp, 1.0 / n);
        recon_prior = Some(g.value(rp).item());
        total = g.add(total, rp);
    }
    MicroLoss {
        total,
        recon_post: g.value(rq).item(),
        recon_prior,
        kl: g.value(kl).item(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> MicroSpec {
        MicroSpec {
            past_len: 3,
            future_len: 3,
            n_goals: 2,
            map_dim: 3,
            z_dim: 2,
            enc_hidden: 8,
            prior_hidden: 8,
            ctx_dim: 4,
            dec_hidden: 8,
            goal_feature: 2,
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn batch(spec: &MicroSpec, n: usize, seed: u64) -> MicroBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MicroBatch {
            past_states: (0..spec.past_len).map(|_| rand_tensor(&mut rng, &[n, STATE_DIM])).collect(),
            map_feature: rand_tensor(&mut rng, &[n, spec.map_dim]),
            goals: (0..spec.n_goals).map(|_| rand_tensor(&mut rng, &[n, 2])).collect(),
            future: Some((0..spec.future_len).map(|_| rand_tensor(&mut rng, &[n, 2])).collect()),
        }
    }

    fn setup(spec: &MicroSpec) -> (TrajectoryCvae, ParamStore) {
        let m = TrajectoryCvae::new(spec.clone()).unwrap();
        let mut store = ParamStore::new();
        m.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        (m, store)
    }

    fn loss_value(m: &TrajectoryCvae, store: &ParamStore, b: &MicroBatch, eps: &(Tensor, Tensor)) -> (Graph, MicroLoss) {
        let mut g = Graph::new(Exec::Sequential);
        let f = m.forward_train(&mut g, store, b, eps.0.clone(), eps.1.clone()).unwrap();
        let l = micro_loss(&mut g, &f, b.future.as_ref().unwrap(), 50.0, 0.0, true);
        (g, l)
    }

    #[test]
    fn tiny_profile_gradcheck() {
        let spec = tiny();
        let (m, store) = setup(&spec);
        let b = batch(&spec, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps = (standard_normal(&mut rng, &[2, 2]), standard_normal(&mut rng, &[2, 2]));
        let (g, l) = loss_value(&m, &store, &b, &eps);
        let grads = g.backward(l.total);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (name, an) in grads.params() {
            for j in 0..an.len() {
                let mut p = store.clone();
                p.get_mut(name).unwrap().data_mut()[j] += h;
                let mut q = store.clone();
                q.get_mut(name).unwrap().data_mut()[j] -= h;
                let (gp, lp) = loss_value(&m, &p, &b, &eps);
                let (gq, lq) = loss_value(&m, &q, &b, &eps);
                let num = (gp.value(lp.total).item() - gq.value(lq.total).item()) / (2.0 * h);
                let a = an.data()[j];
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-3);
                worst = worst.max(err);
                assert!(err < 1e-3, "{name}[{j}] analytic {a} numeric {num}");
            }
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn unit_gaussian_step_nll() {
        let mut g = Graph::new(Exec::Sequential);
        let m = g.constant(Tensor::zeros(&[1, 2]));
        let s = g.constant(Tensor::full(&[1, 2], 1.0));
        let l = g.gauss_nll(m, s, &Tensor::zeros(&[1, 2]));
        assert!((g.value(l).item() - 1.8379).abs() < 1e-4);
    }

    /// Forward pass whose posterior is replaced by the prior.
    fn tied(m: &TrajectoryCvae, store: &ParamStore, b: &MicroBatch, beta: f64, floor: f64) -> (Graph, MicroLoss) {
        let mut g = Graph::new(Exec::Sequential);
        let z = Tensor::zeros(&[b.rows(), m.spec.z_dim]);
        let mut f = m.forward_train(&mut g, store, b, z.clone(), z).unwrap();
        f.posterior = f.prior;
        let l = micro_loss(&mut g, &f, b.future.as_ref().unwrap(), beta, floor, true);
        (g, l)
    }

    #[test]
    fn loss_terms_behave() {
        let spec = tiny();
        let (m, store) = setup(&spec);
        let b = batch(&spec, 3, 4);
        let (g0, l) = tied(&m, &store, &b, 50.0, 0.0);
        assert_eq!(l.kl, 0.0);
        assert!((g0.value(l.total).item() - (l.recon_post + l.recon_prior.unwrap())).abs() < 1e-12);

        let eps = (Tensor::full(&[3, 2], 0.5), Tensor::full(&[3, 2], -0.5));
        let mut g1 = Graph::new(Exec::Sequential);
        let f1 = m.forward_train(&mut g1, &store, &b, eps.0.clone(), eps.1.clone()).unwrap();
        let a = micro_loss(&mut g1, &f1, b.future.as_ref().unwrap(), 50.0, 0.0, true);
        let c = micro_loss(&mut g1, &f1, b.future.as_ref().unwrap(), 100.0, 0.0, true);
        let base = a.recon_post + a.recon_prior.unwrap();
        let ka = g1.value(a.total).item() - base;
        let kc = g1.value(c.total).item() - base;
        assert!(a.kl > 0.0);
        assert!((kc - 2.0 * ka).abs() < 1e-9 * kc.abs().max(1.0));

        let d = micro_loss(&mut g1, &f1, b.future.as_ref().unwrap(), 50.0, 0.0, false);
        assert!(d.recon_prior.is_none());
        assert!((g1.value(d.total).item() - (a.recon_post + 50.0 * a.kl)).abs() < 1e-9);
    }

    #[test]
    fn sampling_contract() {
        let spec = tiny();
        let (m, store) = setup(&spec);
        let mut b = batch(&spec, 4, 5);
        b.future = None;
        let draw = |seed: u64, scale: f64| {
            m.sample(&store, &b, scale, &mut ChaCha8Rng::seed_from_u64(seed), Exec::Sequential).unwrap()
        };
        let a = draw(1, 1.0);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|t| t.len() == spec.future_len));
        assert_eq!(a, draw(1, 1.0));
        assert_ne!(a, draw(2, 1.0));
        assert_eq!(draw(1, 0.0), draw(2, 0.0));
        assert!(matches!(
            m.sample(&ParamStore::new(), &b, 1.0, &mut ChaCha8Rng::seed_from_u64(0), Exec::Sequential),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn standard_dimensions() {
        let spec = MicroSpec::standard(3, 32);
        let (m, store) = setup(&spec);
        assert_eq!(store.get("micro.dec.gru.wh").unwrap().shape(), &[128, 384]);
        assert_eq!(store.get("micro.prior.head.w").unwrap().shape(), &[256, 40]);
        let mut b = batch(&spec, 2, 6);
        let mut g = Graph::new(Exec::Sequential);
        let f = m
            .forward_train(&mut g, &store, &b, Tensor::zeros(&[2, 20]), Tensor::zeros(&[2, 20]))
            .unwrap();
        assert_eq!(f.from_prior.mean.len(), 12);
        assert_eq!(g.shape(f.prior.mean), &[2, 20]);
        b.goals.pop();
        assert!(matches!(
            m.forward_train(&mut g, &store, &b, Tensor::zeros(&[2, 20]), Tensor::zeros(&[2, 20])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn teacher_forcing_switch() {
        let gt = vec![Point2::new(1.0, 2.0), Point2::new(3.0, 4.0)];
        let pr = vec![Point2::new(0.0, 0.0), Point2::new(5.0, 5.0)];
        assert_eq!(teacher_force_goals(GoalMode::Train, &gt, &pr).unwrap(), gt);
        assert_eq!(teacher_force_goals(GoalMode::Test, &gt, &pr).unwrap(), pr);
        assert!(teacher_force_goals(GoalMode::Train, &gt, &pr[..1]).is_err());
    }

    #[test]
    fn past_state_differences() {
        let past: Vec<Point2> = [0.0, 1.0, 3.0, 6.0].iter().map(|&x| Point2::new(x, 0.0)).collect();
        let s = past_states(&past, 0.5);
        assert_eq!(s[3][0], 0.0);
        assert_eq!(s[0][0], -6.0);
        assert_eq!(s[0][2], 0.0);
        assert_eq!(s[1][2], 2.0);
        assert_eq!(s[3][2], 6.0);
        assert_eq!(s[1][4], 0.0);
        assert_eq!(s[2][4], 4.0);
        assert_eq!(s[3][4], 4.0);
    }
}
