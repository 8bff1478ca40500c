//! Peak retained bytes per engine and depth, and the deepest network each
//! engine can train under twice the standard engine's two-unroll footprint.

use modl_mel::cli::{cmd_bench_memory, RunConfig};
use modl_mel::mel::Engine;

fn main() -> modl_mel::Result<()> {
    let dir = std::env::temp_dir().join("modl_mel_memory_bench");
    let mut cfg = RunConfig::default();
    cfg.out_dir = dir.clone();
    let s = cmd_bench_memory(&cfg)?;
    for r in &s.rows {
        println!(
            "{:<8} N={:>2} peak {:>9} B  {:.4}s",
            r.engine, r.n_unrolls, r.peak_bytes, r.wall_time_s
        );
    }
    print!("{}", s.render());
    println!(
        "mel reaches N = {:?}, standard N = {:?}; rows in {}",
        s.max_feasible_for(Engine::Mel),
        s.max_feasible_for(Engine::Standard),
        dir.display()
    );
    Ok(())
}
