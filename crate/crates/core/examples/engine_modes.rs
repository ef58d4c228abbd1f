//! Run one long context through the three engine modes and compare what
//! each attention call could see.
//!
//! `cargo run --release --example engine_modes`

use retro_pager::engine::{generate, EngineConfig, EngineMode};
use retro_pager::model::{Model, ModelConfig};
use retro_pager::suites::random_tokens;

fn main() -> retro_pager::Result<()> {
    let model = Model::init(ModelConfig::toy())?;
    let w = model.config.page_size;
    let context = random_tokens(&model, 64 * w, 3);
    let retrieval = EngineConfig { k_pages: 4, local_count: 1, max_new_tokens: 16, ..Default::default() };
    let modes = [
        ("retrieval", retrieval.clone()),
        ("sliding window", retrieval.sliding_window_equivalent()),
        ("full attention", EngineConfig { mode: EngineMode::FullAttention, ..retrieval.clone() }),
    ];
    for (name, cfg) in modes {
        let (out, trace) = generate(&model, &cfg, &context, &[4, 5, 6])?;
        let widest = trace.steps.iter().map(|s| s.attended_kv).max().unwrap_or(0);
        let violations = cfg.page_budget().map(|p| trace.budget_violations(p, w));
        println!(
            "{name:>15}: widest call {widest:>5} KV, peak hot {:>5}, budget violations {violations:?}, first tokens {:?}",
            trace.peak_hot_tokens(),
            &out[..4]
        );
    }
    Ok(())
}
