//! Adapt a toy model to sparse retrieval attention on a synthetic corpus.
//!
//! An optional JSON argument overrides recipe fields, for example
//! `'{"steps": 100, "lr_scale": 500}'`.

use retro_pager::recipes::{with_overrides, Stage2Recipe};

fn main() -> retro_pager::Result<()> {
    let recipe = match std::env::args().nth(1) {
        Some(json) => with_overrides(&Stage2Recipe::default(), &json)?,
        None => Stage2Recipe::default(),
    };
    let (_, out) = recipe.run()?;
    println!("loss at k = m vs dense: relative gap {:.2e}", out.saturated_rel_err);
    for (i, l) in out.losses.iter().enumerate().step_by((recipe.steps / 10).max(1)) {
        println!("step {:>4}  loss {l:.4}", i + 1);
    }
    let ma = &out.moving_average;
    if let (Some(first), Some(last)) = (ma.first(), ma.last()) {
        println!("{}-step moving average {first:.4} -> {last:.4}, strictly decreasing: {}", recipe.window, out.strictly_decreasing);
    }
    println!("{:.1} s", out.seconds);
    Ok(())
}
