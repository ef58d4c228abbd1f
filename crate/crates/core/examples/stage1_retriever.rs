//! Train the bookmark path on synthetic pairwise data and report held-out
//! recall@1 before and after.
//!
//! An optional JSON argument overrides recipe fields, for example
//! `'{"steps": 500, "model": {"n_layers": 4}}'`.

use retro_pager::recipes::{with_overrides, Stage1Recipe};

fn main() -> retro_pager::Result<()> {
    let recipe = match std::env::args().nth(1) {
        Some(json) => with_overrides(&Stage1Recipe::default(), &json)?,
        None => Stage1Recipe::default(),
    };
    let (_, out) = recipe.run()?;
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    println!("chance  {}", fmt(&out.chance.per_layer));
    println!("before  {}", fmt(&out.before.per_layer));
    println!("after   {}", fmt(&out.after.per_layer));
    println!("recall@1: all layers {:.3}, layers 1 and up {:.3}", out.after.mean, out.after.content_mean);
    let tail = &out.losses[out.losses.len().saturating_sub(100)..];
    println!("final loss {:.4}", tail.iter().sum::<f64>() / tail.len().max(1) as f64);
    println!("{:.1} s", out.seconds);
    Ok(())
}
