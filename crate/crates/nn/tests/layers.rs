use goalcast_core::Exec;
use goalcast_nn::layers::{BiLstm, Conv2d, GruCell, Linear, LstmCell};
use goalcast_nn::{Adam, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Loss of a small recurrent + conv network exercising every layer type.
fn loss(store: &ParamStore, xs: &[Tensor], img: &Tensor) -> (Graph, Var) {
    let mut g = Graph::new(Exec::Sequential);
    let seq: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
    let enc = BiLstm::new("bi", 2, 3).encode(&mut g, store, &seq).unwrap();
    let mut h = LstmCell::new("l", 2, 3).encode(&mut g, store, &seq).unwrap();
    let gru = GruCell::new("g", 2, 3);
    for &x in &seq {
        h = gru.step(&mut g, store, x, h).unwrap();
    }
    let im = g.constant(img.clone());
    let c = Conv2d::new("c", 1, 2, 3).forward(&mut g, store, im).unwrap();
    let c = g.tanh(c);
    let c = g.global_avg_pool(c);
    let f = g.concat(&[enc, h, c]);
    let y = Linear::new("fc", 11, 1).forward(&mut g, store, f).unwrap();
    let y = g.mul(y, y);
    let l = g.sum(y);
    (g, l)
}

fn setup() -> (ParamStore, Vec<Tensor>, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    BiLstm::new("bi", 2, 3).init(&mut store, &mut rng);
    LstmCell::new("l", 2, 3).init(&mut store, &mut rng);
    GruCell::new("g", 2, 3).init(&mut store, &mut rng);
    Conv2d::new("c", 1, 2, 3).init(&mut store, &mut rng);
    Linear::new("fc", 11, 1).init(&mut store, &mut rng);
    let xs = (0..4).map(|_| rand_tensor(&mut rng, &[2, 2])).collect();
    let img = rand_tensor(&mut rng, &[2, 1, 4, 4]);
    (store, xs, img)
}

#[test]
fn layer_parameter_gradients_match_finite_differences() {
    let (store, xs, img) = setup();
    let (g, l) = loss(&store, &xs, &img);
    let grads = g.backward(l);
    let h = 1e-6;
    let mut checked = 0;
    for (name, an) in grads.params() {
        for j in 0..an.len() {
            let mut p = store.clone();
            p.get_mut(name).unwrap().data_mut()[j] += h;
            let (gp, lp) = loss(&p, &xs, &img);
            let mut m = store.clone();
            m.get_mut(name).unwrap().data_mut()[j] -= h;
            let (gm, lm) = loss(&m, &xs, &img);
            let num = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
            let a = an.data()[j];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
            assert!(err < 1e-4, "{name}[{j}]: analytic {a} numeric {num}");
            checked += 1;
        }
    }
    assert_eq!(checked, store.num_scalars());
}

#[test]
fn sequential_and_parallel_training_agree_bitwise() {
    let run = |exec: Exec| {
        let (mut store, xs, img) = setup();
        let mut opt = Adam::new(1e-2);
        for _ in 0..5 {
            let mut g = Graph::new(exec);
            let seq: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let im = g.constant(img.clone());
            let c = Conv2d::new("c", 1, 2, 3).forward(&mut g, &store, im).unwrap();
            let c = g.global_avg_pool(c);
            let e = BiLstm::new("bi", 2, 3).encode(&mut g, &store, &seq).unwrap();
            let f = g.concat(&[c, e]);
            let f = g.mul(f, f);
            let l = g.sum(f);
            let grads = g.backward(l);
            opt.step(&mut store, grads.params());
        }
        store
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
}
