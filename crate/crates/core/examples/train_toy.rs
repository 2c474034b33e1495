// Train the micro model to separate moving bars from rotating dots.

use get_core::model::GetConfig;
use get_core::trainer::{evaluate, toy_dataset, train_toy, TrainConfig};
use get_core::Result;

pub fn run_example_with(steps: usize) -> Result<()> {
    let cfg = GetConfig::micro();
    let data = toy_dataset(0, 64, &cfg);
    let tcfg = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let out = train_toy(&data, &cfg, &tcfg)?;
    for (step, loss) in out.losses.iter().enumerate().step_by((steps / 10).max(1)) {
        println!("step {step:>4}  loss {loss:.4}");
    }
    println!("final loss {:.4}", out.losses.last().unwrap());
    println!("train accuracy {:.1}%", 100.0 * evaluate(&data, &out.params, &cfg)?);
    Ok(())
}

pub fn run_example() -> Result<()> {
    run_example_with(40)
}

fn main() -> Result<()> {
    run_example_with(200)
}
