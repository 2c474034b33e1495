// Finite-difference checks of the differentiable operations, plus a
// deliberately wrong backward that the checker must reject.

use get_core::commands::{check_ops, OP_EPS, OP_TOL};
use get_core::tensor::finite_diff_check;
use get_core::{Result, Tensor};

pub fn run_example() -> Result<()> {
    let report = check_ops(0)?;
    println!("{}", report);

    // cube whose backward uses 3.1·x² instead of 3·x²
    let bad_cube = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
        let xs = x.to_vec();
        let data = xs.iter().map(|v| v * v * v).collect();
        let y = Tensor::from_op("bad_cube", x.shape().to_vec(), data, vec![x.clone()], move |g| {
            vec![Some(g.iter().zip(&xs).map(|(g, v)| g * 3.1 * v * v).collect())]
        });
        Ok(y.sum())
    };
    let bad = finite_diff_check(bad_cube, &[0.5, -1.0, 1.5], &[3], OP_EPS, OP_TOL)?;
    println!("corrupted backward: max rel err {:.3e}, passed = {}", bad.max_rel_err, bad.passed);
    assert!(report.passed && !bad.passed);
    Ok(())
}

fn main() -> Result<()> {
    run_example()
}
