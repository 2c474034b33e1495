// Run one attention block in each of its variants on the same tokens.

use get_core::edsa::{edsa_block_forward, BlockVariant, EdsaParams, EdsaState, WindowLayout};
use get_core::params::{Binder, Initializer};
use get_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> Result<()> {
    let (grid, window, dim, groups) = ((8, 8), (4, 4), 12, 3);
    let params = EdsaParams::<f64>::init("", dim, groups, window, &mut Initializer::new(0, 0.2))?;
    let layout = WindowLayout::new(grid, window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = grid.0 * grid.1;
    let x = Tensor::new(vec![tokens, dim], (0..tokens * dim).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    println!("{} windows of {} tokens, {groups} groups of {} channels", layout.windows(), layout.window_len(), dim / groups);

    for variant in BlockVariant::ALL {
        let out = edsa_block_forward(&EdsaState::enter(x.clone()), &params, &layout, variant, &Binder::inference())?;
        let merged = out.merged()?;
        let norm = merged.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let group_norm = out.group.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{:<16} |out| = {norm:.4}  |group stream| = {group_norm:.4}", variant.to_string());
    }
    Ok(())
}

fn main() -> Result<()> {
    run_example()
}
