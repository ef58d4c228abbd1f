//! Decode once and dump the layer-by-page retrieval scores of the query
//! page as CSV, ready for a heat map.
//!
//! `cargo run --release --example score_trace > scores.csv`

use retro_pager::engine::{generate, EngineConfig};
use retro_pager::model::{Model, ModelConfig};
use retro_pager::suites::random_tokens;

fn main() -> retro_pager::Result<()> {
    let model = Model::init(ModelConfig::toy())?;
    let context = random_tokens(&model, 30 * 16, 1);
    let cfg = EngineConfig { k_pages: 4, max_new_tokens: 8, ..Default::default() };
    let (out, trace) = generate(&model, &cfg, &context, &[1, 2, 3])?;
    eprintln!("generated {out:?} with {} retrieval scorings while decoding", trace.decode_scorings);
    let query_page = trace.selections.iter().map(|s| s.query_page_index).max().unwrap_or(0);
    for s in trace.selections.iter().filter(|s| s.query_page_index == query_page) {
        eprintln!("layer {} selected {:?}", s.layer, s.selected);
    }
    print!("{}", trace.score_trace(query_page)?.to_csv());
    Ok(())
}
