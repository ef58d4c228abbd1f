//! With every page selectable, sparse prefill reproduces dense attention.
//!
//! `cargo run --release --example oracle_equivalence [tokens]`

use retro_pager::model::{Model, ModelConfig};
use retro_pager::suites::equivalence_check;

fn main() -> retro_pager::Result<()> {
    let n = std::env::args().nth(1).map_or(1024, |s| s.parse().expect("token count"));
    let model = Model::init(ModelConfig::toy())?;
    let r = equivalence_check(&model, n, 0)?;
    println!(
        "{} tokens, {} pages: max |logit diff| {:.3e} (tolerance {:.0e}) in {:.2} s -> {}",
        r.tokens,
        r.pages,
        r.max_abs_diff,
        r.tolerance,
        r.seconds,
        if r.pass { "equivalent" } else { "MISMATCH" }
    );
    Ok(())
}
