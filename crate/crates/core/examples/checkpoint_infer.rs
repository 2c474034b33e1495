// Save a trained model, load it back and classify fresh streams.

use get_core::events::{generate_synthetic_stream, MotionModel};
use get_core::model::{classify, load_checkpoint, save_checkpoint, GetConfig};
use get_core::trainer::{toy_dataset, train_toy, TrainConfig, TOY_DURATION, TOY_EVENTS};
use get_core::Result;

pub fn run_example() -> Result<()> {
    let cfg = GetConfig::micro();
    let tcfg = TrainConfig {
        steps: 60,
        ..TrainConfig::default()
    };
    let trained = train_toy(&toy_dataset(0, 32, &cfg), &cfg, &tcfg)?;

    let path = std::env::temp_dir().join(format!("get-example-{}.getw", std::process::id()));
    save_checkpoint(&path, &cfg, &trained.params)?;
    let (loaded_cfg, params) = load_checkpoint(&path)?;
    std::fs::remove_file(&path)?;
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(params, trained.params);

    for (seed, motion) in [(100, MotionModel::MovingBar), (101, MotionModel::RotatingDot)] {
        let s = generate_synthetic_stream(seed, TOY_EVENTS, cfg.sensor_width, cfg.sensor_height, TOY_DURATION, motion);
        let (class, probs) = classify(&s, &params, &loaded_cfg)?;
        println!("{motion:?}: class {class}, probabilities {probs:.3?}");
    }
    Ok(())
}

fn main() -> Result<()> {
    run_example()
}
