// Aggregation geometry for a range of group counts, and the stage table of
// the default model.

use get_core::commands::cmd_shapes;
use get_core::gta::GtaGeometry;
use get_core::{GetConfig, Result};

pub fn run_example() -> Result<()> {
    println!(" G  C   GK GS  out groups  out channels  pad");
    for groups in 2..=12 {
        match GtaGeometry::new(groups, 4) {
            Ok(g) => println!(
                "{groups:>2}  4   {:>2} {:>2}  {:>10}  {:>12}  {:>3}",
                g.group_kernel,
                g.group_stride,
                g.groups_out,
                g.channels_out(),
                g.padding_groups()
            ),
            Err(e) => println!("{groups:>2}  4   {e}"),
        }
    }
    println!();
    println!("{}", cmd_shapes(&GetConfig::default())?);
    Ok(())
}

fn main() -> Result<()> {
    run_example()
}
