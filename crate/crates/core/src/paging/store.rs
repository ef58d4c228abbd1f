//! Two-tier page KV storage.
//!
//! Each layer owns a hot tier bounded by `hot_budget_tokens` KV entries and an
//! unbounded cold tier. Cold pages are kept as serialized little-endian `f32`
//! blocks, either in memory or as one file per page in a spill directory.
//! Bookmark keys live in a separate per-layer index that is never evicted, so
//! scoring pages never touches the cold tier.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size of the cold-block header: layer, page, rows, cols as `u32` LE.
pub const COLD_HEADER_BYTES: usize = 16;

/// Row-major `f32` matrix, heads concatenated along the columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KvMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl KvMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} KV block",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Keys and values of one page at one layer.
///
/// Keys are stored before rotary encoding; `start_position` is the augmented
/// position of the page's first token, so the attention path can rotate them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageKv {
    pub layer: usize,
    pub page_index: usize,
    pub start_position: usize,
    pub normal_keys: KvMatrix,
    pub normal_values: KvMatrix,
    pub bookmark_key: Vec<f32>,
    pub bookmark_value: Vec<f32>,
}

impl PageKv {
    /// Normal rows plus the bookmark.
    pub fn kv_entries(&self) -> usize {
        self.normal_keys.rows + 1
    }

    pub fn bookmark_position(&self) -> usize {
        self.start_position + self.normal_keys.rows
    }

    fn byte_len(&self) -> u64 {
        (COLD_HEADER_BYTES + 4 * (2 * self.normal_keys.data.len() + 2 * self.bookmark_key.len()))
            as u64
    }
}

/// Serialize a page block for the cold tier: 16-byte header, then keys,
/// values, bookmark key and bookmark value as little-endian `f32`.
pub fn encode_cold_block(kv: &PageKv) -> Vec<u8> {
    let mut out = Vec::with_capacity(kv.byte_len() as usize);
    for v in [kv.layer, kv.page_index, kv.normal_keys.rows, kv.normal_keys.cols] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let blocks = [
        &kv.normal_keys.data[..],
        &kv.normal_values.data[..],
        &kv.bookmark_key[..],
        &kv.bookmark_value[..],
    ];
    for block in blocks {
        for x in block {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_cold_block`]. `start_position` is not part of the
/// on-disk format and must be supplied by the caller.
pub fn decode_cold_block(bytes: &[u8], start_position: usize) -> Result<PageKv> {
    if bytes.len() < COLD_HEADER_BYTES {
        return Err(Error::Shape("cold block shorter than its header".into()));
    }
    let word = |i: usize| {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[4 * i..4 * i + 4]);
        u32::from_le_bytes(b) as usize
    };
    let (layer, page_index, rows, cols) = (word(0), word(1), word(2), word(3));
    let expected = COLD_HEADER_BYTES + 4 * (2 * rows * cols + 2 * cols);
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "cold block is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut floats = bytes[COLD_HEADER_BYTES..].chunks_exact(4).map(|c| {
        let mut b = [0u8; 4];
        b.copy_from_slice(c);
        f32::from_le_bytes(b)
    });
    let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f32>>();
    let keys = take(rows * cols);
    let values = take(rows * cols);
    let bookmark_key = take(cols);
    let bookmark_value = take(cols);
    Ok(PageKv {
        layer,
        page_index,
        start_position,
        normal_keys: KvMatrix::new(rows, cols, keys)?,
        normal_values: KvMatrix::new(rows, cols, values)?,
        bookmark_key,
        bookmark_value,
    })
}

pub fn spill_file_name(layer: usize, page: usize) -> String {
    format!("kv_L{layer}_P{page}.bin")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoreConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// Per-layer bound on hot KV entries; `None` keeps everything hot.
    pub hot_budget_tokens: Option<usize>,
    /// Pages `0..sink_count` are never demoted.
    pub sink_count: usize,
    pub spill_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Hot,
    Cold,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMemory {
    pub hot_tokens: usize,
    pub cold_tokens: usize,
    pub peak_hot_tokens: usize,
    pub reloads: u64,
    pub evictions: u64,
    pub bytes_moved: u64,
}

/// Aggregate tier counters. `hot_tokens`/`cold_tokens` and the event counters
/// are summed over layers; `peak_hot_tokens` is the largest per-layer peak, the
/// quantity the per-layer budget bounds.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub hot_tokens: usize,
    pub cold_tokens: usize,
    pub peak_hot_tokens: usize,
    pub reloads: u64,
    pub evictions: u64,
    pub bytes_moved: u64,
    pub per_layer: Vec<LayerMemory>,
}

enum ColdPayload {
    Memory(Vec<u8>),
    Disk(PathBuf),
}

struct ColdEntry {
    seq: u64,
    start_position: usize,
    entries: usize,
    payload: ColdPayload,
}

struct HotEntry {
    seq: u64,
    kv: PageKv,
}

#[derive(Default)]
struct LayerStore {
    hot: BTreeMap<usize, HotEntry>,
    cold: BTreeMap<usize, ColdEntry>,
    bookmark_index: BTreeMap<usize, Vec<f32>>,
    mem: LayerMemory,
}

/// Page KV store with a budget-bounded hot tier and an unbounded cold tier.
///
/// Mutations lock one layer at a time; the store is `Sync` and can be shared
/// between threads that work on different layers.
pub struct PagedKvStore {
    config: StoreConfig,
    layers: Vec<RwLock<LayerStore>>,
    seq: AtomicU64,
}

impl PagedKvStore {
    pub fn new(config: StoreConfig) -> Result<Self> {
        if config.n_layers == 0 || config.d_model == 0 {
            return Err(Error::InvalidConfig("store needs at least one layer and column".into()));
        }
        if config.hot_budget_tokens == Some(0) {
            return Err(Error::InvalidConfig("hot budget must be positive".into()));
        }
        if let Some(dir) = &config.spill_dir {
            fs::create_dir_all(dir)?;
        }
        let layers = (0..config.n_layers).map(|_| RwLock::new(LayerStore::default())).collect();
        Ok(Self { config, layers, seq: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    fn layer(&self, layer: usize) -> Result<&RwLock<LayerStore>> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::Shape(format!("layer {layer} out of range")))
    }

    fn validate(&self, kv: &PageKv) -> Result<()> {
        let d = self.config.d_model;
        let k = &kv.normal_keys;
        let v = &kv.normal_values;
        if k.cols != d || v.cols != d || k.rows != v.rows || k.rows == 0 {
            return Err(Error::Shape(format!(
                "page {} blocks are {}x{} / {}x{}, expected n x {d}",
                kv.page_index, k.rows, k.cols, v.rows, v.cols
            )));
        }
        if kv.bookmark_key.len() != d || kv.bookmark_value.len() != d {
            return Err(Error::Shape(format!("page {} bookmark width != {d}", kv.page_index)));
        }
        if kv.layer >= self.config.n_layers {
            return Err(Error::Shape(format!("layer {} out of range", kv.layer)));
        }
        Ok(())
    }

    /// Insert a page into the hot tier, demoting the oldest non-sink pages
    /// until the layer is back within budget.
    pub fn store_page(&self, kv: PageKv) -> Result<()> {
        self.validate(&kv)?;
        let mut layer = self.layer(kv.layer)?.write();
        let page = kv.page_index;
        if let Some(budget) = self.config.hot_budget_tokens {
            let pinned: usize = layer
                .hot
                .iter()
                .filter(|(&p, _)| p < self.config.sink_count && p != page)
                .map(|(_, e)| e.kv.kv_entries())
                .sum();
            if pinned + kv.kv_entries() > budget {
                return Err(Error::InvalidConfig(format!(
                    "hot budget {budget} cannot hold the sink pages plus page {page}"
                )));
            }
        }
        self.remove_existing(&mut layer, page)?;
        layer.bookmark_index.insert(page, kv.bookmark_key.clone());
        layer.mem.hot_tokens += kv.kv_entries();
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        layer.hot.insert(page, HotEntry { seq, kv });
        self.evict_until_within_budget(&mut layer, &HashSet::from([page]))?;
        layer.mem.peak_hot_tokens = layer.mem.peak_hot_tokens.max(layer.mem.hot_tokens);
        Ok(())
    }

    fn remove_existing(&self, layer: &mut LayerStore, page: usize) -> Result<()> {
        if let Some(old) = layer.hot.remove(&page) {
            layer.mem.hot_tokens -= old.kv.kv_entries();
        }
        if let Some(old) = layer.cold.remove(&page) {
            layer.mem.cold_tokens -= old.entries;
            if let ColdPayload::Disk(path) = old.payload {
                fs::remove_file(path)?;
            }
        }
        Ok(())
    }

    fn evict_until_within_budget(
        &self,
        layer: &mut LayerStore,
        protected: &HashSet<usize>,
    ) -> Result<()> {
        let Some(budget) = self.config.hot_budget_tokens else {
            return Ok(());
        };
        while layer.mem.hot_tokens > budget {
            let victim = layer
                .hot
                .iter()
                .filter(|(&p, _)| p >= self.config.sink_count && !protected.contains(&p))
                .min_by_key(|(_, e)| e.seq)
                .map(|(&p, _)| p);
            let Some(victim) = victim else {
                return Err(Error::InvalidState("no evictable page left in the hot tier".into()));
            };
            let entry = layer.hot.remove(&victim).expect("victim is hot");
            let bytes = encode_cold_block(&entry.kv);
            let entries = entry.kv.kv_entries();
            layer.mem.hot_tokens -= entries;
            layer.mem.cold_tokens += entries;
            layer.mem.evictions += 1;
            layer.mem.bytes_moved += bytes.len() as u64;
            let payload = match &self.config.spill_dir {
                Some(dir) => {
                    let path = dir.join(spill_file_name(entry.kv.layer, victim));
                    fs::write(&path, &bytes)?;
                    ColdPayload::Disk(path)
                }
                None => ColdPayload::Memory(bytes),
            };
            layer.cold.insert(
                victim,
                ColdEntry {
                    seq: entry.seq,
                    start_position: entry.kv.start_position,
                    entries,
                    payload,
                },
            );
        }
        Ok(())
    }

    /// Return the requested pages in request order. Cold pages count as
    /// reloads and are promoted when the budget allows it without demoting
    /// another page of the same request.
    pub fn fetch_pages(&self, layer_idx: usize, pages: &[usize]) -> Result<Vec<PageKv>> {
        let mut layer = self.layer(layer_idx)?.write();
        for &p in pages {
            if !layer.hot.contains_key(&p) && !layer.cold.contains_key(&p) {
                return Err(Error::MissingPage { layer: layer_idx, page: p });
            }
        }
        let requested: HashSet<usize> = pages.iter().copied().collect();
        let mut out = Vec::with_capacity(pages.len());
        for &p in pages {
            if let Some(e) = layer.hot.get(&p) {
                out.push(e.kv.clone());
                continue;
            }
            let cold = layer.cold.get(&p).expect("checked above");
            let bytes = match &cold.payload {
                ColdPayload::Memory(b) => b.clone(),
                ColdPayload::Disk(path) => fs::read(path)?,
            };
            let kv = decode_cold_block(&bytes, cold.start_position)?;
            layer.mem.reloads += 1;
            layer.mem.bytes_moved += bytes.len() as u64;
            if self.can_promote(&layer, kv.kv_entries(), &requested) {
                let cold = layer.cold.remove(&p).expect("checked above");
                if let ColdPayload::Disk(path) = &cold.payload {
                    fs::remove_file(path)?;
                }
                layer.mem.cold_tokens -= cold.entries;
                layer.mem.hot_tokens += cold.entries;
                layer.hot.insert(p, HotEntry { seq: cold.seq, kv: kv.clone() });
                self.evict_until_within_budget(&mut layer, &requested)?;
                layer.mem.peak_hot_tokens = layer.mem.peak_hot_tokens.max(layer.mem.hot_tokens);
            }
            out.push(kv);
        }
        Ok(out)
    }

    fn can_promote(&self, layer: &LayerStore, entries: usize, requested: &HashSet<usize>) -> bool {
        let Some(budget) = self.config.hot_budget_tokens else {
            return true;
        };
        let unevictable: usize = layer
            .hot
            .iter()
            .filter(|(&p, _)| p < self.config.sink_count || requested.contains(&p))
            .map(|(_, e)| e.kv.kv_entries())
            .sum();
        unevictable + entries <= budget
    }

    /// Bookmark keys of every stored page of `layer`, ordered by page index.
    pub fn bookmark_keys(&self, layer: usize) -> Result<Vec<(usize, Vec<f32>)>> {
        let layer = self.layer(layer)?.read();
        Ok(layer.bookmark_index.iter().map(|(&p, k)| (p, k.clone())).collect())
    }

    pub fn tier_of(&self, layer: usize, page: usize) -> Option<Tier> {
        let layer = self.layers.get(layer)?.read();
        if layer.hot.contains_key(&page) {
            Some(Tier::Hot)
        } else if layer.cold.contains_key(&page) {
            Some(Tier::Cold)
        } else {
            None
        }
    }

    pub fn hot_pages(&self, layer: usize) -> Vec<usize> {
        self.layers
            .get(layer)
            .map(|l| l.read().hot.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn page_count(&self, layer: usize) -> usize {
        self.layers.get(layer).map_or(0, |l| l.read().bookmark_index.len())
    }

    pub fn spill_dir(&self) -> Option<&Path> {
        self.config.spill_dir.as_deref()
    }

    pub fn memory_report(&self) -> MemoryReport {
        let per_layer: Vec<LayerMemory> = self.layers.iter().map(|l| l.read().mem.clone()).collect();
        MemoryReport {
            hot_tokens: per_layer.iter().map(|m| m.hot_tokens).sum(),
            cold_tokens: per_layer.iter().map(|m| m.cold_tokens).sum(),
            peak_hot_tokens: per_layer.iter().map(|m| m.peak_hot_tokens).max().unwrap_or(0),
            reloads: per_layer.iter().map(|m| m.reloads).sum(),
            evictions: per_layer.iter().map(|m| m.evictions).sum(),
            bytes_moved: per_layer.iter().map(|m| m.bytes_moved).sum(),
            per_layer,
        }
    }
}
