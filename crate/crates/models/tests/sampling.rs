use goalcast_core::Exec;
use goalcast_models::macro_models::{LongGoalCvae, LongGoalSpec, WaypointNet};
use goalcast_models::micro_model::{MicroBatch, MicroSpec, TrajectoryCvae};
use goalcast_models::unet::UNetSpec;
use goalcast_models::Error;
use goalcast_nn::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 16;

fn tiny_long_goal() -> LongGoalSpec {
    LongGoalSpec {
        unet: UNetSpec {
            encoder_channels: vec![4, 4, 8],
            decoder_channels: vec![8, 4, 4],
            in_channels: 2,
            out_channels: 1,
        },
        latent_dim: 10,
        prior_channels: vec![8],
        posterior_channels: vec![4, 8],
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
}

#[test]
fn long_goal_samples_match_across_execution_modes() {
    let model = LongGoalCvae::new(tiny_long_goal()).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    model.init(&mut store, &mut rng);
    let cond = rand_tensor(&mut rng, &[1, 2, SIZE, SIZE]);

    let draw = |exec| {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        model.sample(&store, &cond, 5, 1.0, &mut rng, exec).unwrap()
    };
    let (a, b) = (draw(Exec::Sequential), draw(Exec::Parallel));
    assert_eq!(a.heatmaps.shape(), &[5, 1, SIZE, SIZE]);
    assert_eq!(a.heatmaps.data(), b.heatmaps.data());
    assert!(a.heatmaps.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn sampling_without_parameters_is_a_state_error() {
    let model = LongGoalCvae::new(tiny_long_goal()).unwrap();
    let cond = Tensor::zeros(&[1, 2, SIZE, SIZE]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = model.sample(&ParamStore::new(), &cond, 2, 1.0, &mut rng, Exec::Sequential).unwrap_err();
    assert!(matches!(err, Error::State(_)), "{err}");
}

#[test]
fn waypoint_net_emits_one_channel_per_goal() {
    let spec = UNetSpec { encoder_channels: vec![4, 8], decoder_channels: vec![8, 4], in_channels: 3, out_channels: 3 };
    let net = WaypointNet::new(spec).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    net.init(&mut store, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 3, SIZE, SIZE]);
    let out = net.predict(&store, &x, Exec::Parallel).unwrap();
    assert_eq!(out.shape(), &[2, 3, SIZE, SIZE]);
}

#[test]
fn trajectory_samples_cover_the_future_horizon() {
    let spec = MicroSpec { enc_hidden: 8, prior_hidden: 16, ctx_dim: 8, dec_hidden: 16, z_dim: 4, ..MicroSpec::standard(3, 5) };
    let model = TrajectoryCvae::new(spec.clone()).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    model.init(&mut store, &mut rng);
    let n = 4;
    let batch = MicroBatch {
        past_states: (0..spec.past_len).map(|_| rand_tensor(&mut rng, &[n, 6])).collect(),
        map_feature: rand_tensor(&mut rng, &[n, spec.map_dim]),
        goals: (0..spec.n_goals).map(|_| rand_tensor(&mut rng, &[n, 2])).collect(),
        future: None,
    };
    let out = model.sample(&store, &batch, 1.0, &mut rng, Exec::Sequential).unwrap();
    assert_eq!(out.len(), n);
    assert!(out.iter().all(|t| t.len() == spec.future_len));
    assert!(out.iter().flatten().all(|p| p.x.is_finite() && p.y.is_finite()));
}
