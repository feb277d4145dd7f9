use ni_core::config::ExperimentConfig;
use ni_core::fuzzy::gen_dataset;
use ni_core::fuzzy::FuzzyExpr;
use ni_core::model::{EvalOptions, Model, Session};
use ni_core::tensor::Storage;
use ni_core::train::multitask_mse;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let cfg = ExperimentConfig::desk_default();
    let mut model_cfg = cfg.model.clone();
    model_cfg.n_cls = 8;
    let model = Model::new(model_cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let exprs: Vec<FuzzyExpr> = (0..8).map(|_| FuzzyExpr::sample(5, &mut rng)).collect();
    let ds = gen_dataset(&exprs, 256, 2).unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..128 {
        xs.extend_from_slice(ds.input_row(i));
        ys.extend_from_slice(ds.target_row(i));
    }
    let x = Storage::new(vec![128, 5], xs).unwrap();
    let y = Storage::new(vec![128, 8], ys).unwrap();

    // warm up
    for _ in 0..3 {
        let sess = model.session();
        let pred = model.predict(&sess, &x, &EvalOptions::default()).unwrap();
        let t = sess.tape.constant(y.clone());
        let loss = multitask_mse(&pred, &t).unwrap();
        let _ = loss.backward().unwrap();
    }

    let iters = 10;
    let t0 = Instant::now();
    for _ in 0..iters {
        let sess = model.session();
        let _ = model.predict(&sess, &x, &EvalOptions::default()).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / iters as f64;

    let t0 = Instant::now();
    let mut sessions = Vec::new();
    for _ in 0..iters {
        let sess: Session = model.session();
        let pred = model.predict(&sess, &x, &EvalOptions::default()).unwrap();
        let t = sess.tape.constant(y.clone());
        let loss = multitask_mse(&pred, &t).unwrap();
        sessions.push((loss, sess));
    }
    let fwd_loss = t0.elapsed().as_secs_f64() / iters as f64;

    let t0 = Instant::now();
    for (loss, _sess) in &sessions {
        let _ = loss.backward().unwrap();
    }
    let bwd = t0.elapsed().as_secs_f64() / iters as f64;

    println!("forward:        {:7.1} ms", fwd * 1e3);
    println!("forward(kept):  {:7.1} ms", fwd_loss * 1e3);
    println!("backward:       {:7.1} ms", bwd * 1e3);
    println!("tape nodes: {}", sessions[0].1.tape.len());
}
