fn main() {
    let mut cfg = ni_core::config::ExperimentConfig::desk_default();
    if let Some(e) = std::env::args().nth(1) {
        cfg.train.epochs = e.parse().unwrap();
    }
    print!("{}", cfg.to_toml().unwrap());
}
