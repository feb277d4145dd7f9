use ni_core::config::ExperimentConfig;
use ni_core::fuzzy::{gen_dataset, FuzzyExpr};
use ni_core::model::Model;
use ni_core::train::{train_epochs, Selection, TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let cfg = ExperimentConfig::desk_default();
    let mut model_cfg = cfg.model.clone();
    model_cfg.n_cls = 8;
    let mut model = Model::new(model_cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let exprs: Vec<FuzzyExpr> = (0..8).map(|_| FuzzyExpr::sample(5, &mut rng)).collect();
    let ds = gen_dataset(&exprs, 2048, 2).unwrap(); // 12 steps/epoch
    let tc = TrainConfig { epochs: 1, batch_size: 128, seed: 3, eval_batch: 512, ..Default::default() };
    let mut state = TrainState::new(tc.optim.clone(), tc.seed);
    // warmup epoch
    train_epochs(&mut model, &ds, &Selection::Pretrain, &tc, &mut state, 1).unwrap();
    let t0 = Instant::now();
    train_epochs(&mut model, &ds, &Selection::Pretrain, &tc, &mut state, 1).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let steps = (ds.train_idx.len() + 127) / 128;
    println!("epoch: {:.2}s, {} steps -> {:.0} ms/step (incl. val of {} rows)",
        dt, steps, dt * 1e3 / steps as f64, ds.val_idx.len());
}
