//! Peak hot-tier KV under a fixed budget stays flat as the context grows,
//! while full attention keeps everything resident.
//!
//! `cargo run --release --example memory_flatness`

use retro_pager::engine::EngineConfig;
use retro_pager::model::{Model, ModelConfig};
use retro_pager::suites::memory_check;

fn main() -> retro_pager::Result<()> {
    let model = Model::init(ModelConfig::toy())?;
    let lengths = [1024, 2048, 4096, 8192];
    let r = memory_check(&model, &EngineConfig::default(), &lengths, 0)?;
    println!("hot budget per layer: {} KV entries", r.hot_budget_tokens);
    println!("{:>8} {:>14} {:>16}", "tokens", "retrieval peak", "full attention");
    for (i, n) in r.lengths.iter().enumerate() {
        println!("{n:>8} {:>14} {:>16}", r.retrieval_peak_hot[i], r.full_peak_resident[i]);
    }
    println!("flat: {}, growing: {}", r.flat, r.growing);
    Ok(())
}
