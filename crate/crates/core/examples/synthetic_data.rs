//! Generate one record of each synthetic dataset and show its labels.
//!
//! `cargo run --release --example synthetic_data`

use retro_pager::data::{gen_needle, gen_pairwise, gen_synthetic_qa, to_jsonl, NeedleConfig, PairwiseConfig, QaConfig};

fn main() -> retro_pager::Result<()> {
    let w = 16;
    let p = gen_pairwise(&PairwiseConfig::default(), 7)?;
    println!(
        "pairwise: {} context tokens, query {:?}, positive span {:?} -> page {}",
        p.tokens.len(),
        p.query,
        p.positive_span,
        p.positive_page(w)?
    );
    let q = gen_synthetic_qa(&QaConfig::default(), 7)?;
    println!("qa: {} tokens, question {:?}, answer span {:?} -> page {}", q.tokens.len(), q.query, q.positive_span, q.positive_page(w)?);
    let n = gen_needle(&NeedleConfig { haystack_pages: 16, depth_fraction: 0.4, ..Default::default() }, 7)?;
    println!("needle: {:?} on page {} of 16, question {:?}, answer {:?}", n.needle, n.needle_page, n.question, n.answer);
    print!("{}", to_jsonl(&[p]));
    Ok(())
}
