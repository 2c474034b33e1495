// Time the three encoders on one synthetic stream.
//
// `cargo run --release --example encode_bench -- 10000000 4` benchmarks ten
// million events on four threads.

use get_core::commands::{bench_stream, BenchOptions, EncoderKind};
use get_core::events::generate_synthetic_stream;
use get_core::Result;

pub fn run_example_with(events: usize, threads: usize) -> Result<()> {
    let opts = BenchOptions {
        events,
        threads,
        runs: 3,
        ..BenchOptions::default()
    };
    let stream = generate_synthetic_stream(
        opts.seed,
        events,
        opts.config.sensor_width,
        opts.config.sensor_height,
        opts.duration,
        opts.motion,
    );
    for encoder in EncoderKind::ALL {
        let report = bench_stream(encoder, &stream, &BenchOptions { encoder, ..opts.clone() })?;
        println!("{report}");
    }
    Ok(())
}

pub fn run_example() -> Result<()> {
    run_example_with(200_000, 1)
}

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let events = args.next().transpose().ok().flatten().unwrap_or(1_000_000);
    let threads = args.next().transpose().ok().flatten().unwrap_or(1);
    run_example_with(events, threads)
}
