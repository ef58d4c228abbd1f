//! Train a tiny copy model through both stages and compare needle accuracy
//! of retrieval against a sliding window with the same page budget.
//!
//! An optional JSON argument overrides recipe fields, for example
//! `'{"pretrain_steps": 100, "model": {"n_layers": 3}}'`.

use retro_pager::recipes::{with_overrides, NeedleRecipe};

fn main() -> retro_pager::Result<()> {
    let recipe = match std::env::args().nth(1) {
        Some(json) => with_overrides(&NeedleRecipe::default(), &json)?,
        None => NeedleRecipe::default(),
    };
    let (_, out) = recipe.run()?;
    let tail = |xs: &[f64]| xs[xs.len().saturating_sub(20)..].iter().sum::<f64>() / xs.len().clamp(1, 20) as f64;
    println!("pretrain loss {:.3} -> {:.3}", out.pretrain_losses.first().unwrap_or(&0.0), tail(&out.pretrain_losses));
    println!("stage-1 loss  {:.3} -> {:.3}", out.stage1_losses.first().unwrap_or(&0.0), tail(&out.stage1_losses));
    println!("stage-2 loss  {:.3} -> {:.3}", out.stage2_losses.first().unwrap_or(&0.0), tail(&out.stage2_losses));
    println!("needle-page recall per layer {:?}", out.needle_recall);
    for (depth, row) in &out.accuracy {
        println!("depth {depth}: {row:?}");
    }
    println!(
        "beyond the window: retrieval {:.3}, sliding window {:.3}",
        out.retrieval_beyond_window, out.sliding_beyond_window
    );
    println!("{:.1} s", out.seconds);
    Ok(())
}
