//! Page a token stream, store per-layer KV blocks under a small hot budget,
//! and watch pages move between the hot and cold tiers.
//!
//! `cargo run --release --example paging_tiers`

use retro_pager::paging::{partition, augment, KvMatrix, PageKv, PagedKvStore, StoreConfig, Tier};

fn main() -> retro_pager::Result<()> {
    let w = 4;
    let tokens: Vec<u32> = (0..22).collect();
    let pages = partition(&tokens, w, 99)?;
    let seq = augment(&pages)?;
    println!("{} tokens -> {} pages, {} augmented positions", tokens.len(), pages.len(), seq.len());
    println!("bookmarks at {:?}", seq.bookmark_positions());
    assert_eq!(seq.de_augment(), tokens);

    let spill = std::env::temp_dir().join("retro-pager-paging-tiers");
    let d = 8;
    let store = PagedKvStore::new(StoreConfig {
        n_layers: 1,
        d_model: d,
        hot_budget_tokens: Some(3 * (w + 1)),
        sink_count: 1,
        spill_dir: Some(spill.clone()),
    })?;
    for (i, p) in pages.iter().enumerate() {
        let rows = p.tokens.len();
        let block = |scale: f32| KvMatrix::new(rows, d, (0..rows * d).map(|x| x as f32 * scale).collect());
        store.store_page(PageKv {
            layer: 0,
            page_index: i,
            start_position: seq.page_spans[i].start,
            normal_keys: block(0.5)?,
            normal_values: block(-0.5)?,
            bookmark_key: vec![i as f32; d],
            bookmark_value: vec![0.0; d],
        })?;
        let tiers: Vec<&str> = (0..=i)
            .map(|j| match store.tier_of(0, j) {
                Some(Tier::Hot) => "H",
                Some(Tier::Cold) => "c",
                None => "-",
            })
            .collect();
        println!("after page {i}: {}", tiers.join(" "));
    }
    let fetched = store.fetch_pages(0, &[1, 2])?;
    println!("fetched pages {:?} from the cold tier", fetched.iter().map(|p| p.page_index).collect::<Vec<_>>());
    let r = store.memory_report();
    println!(
        "hot {} cold {} peak {} reloads {} evictions {} bytes moved {}",
        r.hot_tokens, r.cold_tokens, r.peak_hot_tokens, r.reloads, r.evictions, r.bytes_moved
    );
    println!("spill files in {}", spill.display());
    Ok(())
}
