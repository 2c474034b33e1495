// Encode a synthetic stream three ways and round-trip it through the binary
// event format.

use get_core::events::{generate_synthetic_stream, load_events, save_events_binary, EventFormat, MotionModel};
use get_core::group_token::{encode_event_histogram, encode_group_tokens, encode_voxel_grid, GteConfig};
use get_core::Result;

pub fn run_example() -> Result<()> {
    let stream = generate_synthetic_stream(7, 50_000, 128, 128, 100_000, MotionModel::MovingBar);
    let (t0, t1) = stream.time_span().unwrap_or((0, 0));
    println!("{} events on a {}x{} sensor over {} us", stream.len(), stream.width, stream.height, t1 - t0);

    let cfg = GteConfig::new(12, 4, 12, 48)?;
    let tokens = encode_group_tokens(&stream, &cfg, 2)?;
    println!(
        "group tokens: {}x{} grid, {} channels, {} events counted",
        tokens.grid.0,
        tokens.grid.1,
        tokens.channels,
        tokens.total_count(&cfg)
    );

    let hist = encode_event_histogram(&stream, 2)?;
    let voxel = encode_voxel_grid(&stream, cfg.k, 2)?;
    println!("histogram {:?}, voxel grid {:?}", hist.shape(), voxel.shape());

    let path = std::env::temp_dir().join(format!("get-example-{}.bin", std::process::id()));
    save_events_binary(&stream, &path)?;
    let back = load_events(&path, EventFormat::Binary, Some((128, 128)))?;
    std::fs::remove_file(&path)?;
    assert_eq!(back, stream);
    println!("binary round trip ok");
    Ok(())
}

fn main() -> Result<()> {
    run_example()
}
