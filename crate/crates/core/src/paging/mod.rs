//! Bookmark-terminated pages and the two-tier page KV store.

mod page;
mod store;

pub use page::{augment, partition, partition_segments, AugmentedSequence, Page, PositionKind};
pub use store::{
    decode_cold_block, encode_cold_block, spill_file_name, KvMatrix, LayerMemory, MemoryReport,
    PageKv, PagedKvStore, StoreConfig, Tier, COLD_HEADER_BYTES,
};

/// Token id type used across the crate.
pub type TokenId = u32;
