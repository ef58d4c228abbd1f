use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::TokenId;
use crate::error::{Error, Result};

/// A contiguous span of at most `w` tokens. The bookmark is appended by [`augment`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub index: usize,
    pub tokens: Vec<TokenId>,
    pub bookmark_token: TokenId,
    /// Position of the first token in the original (un-augmented) sequence.
    pub global_offset: usize,
}

impl Page {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// KV entries the page occupies once augmented: its tokens plus the bookmark.
    pub fn kv_entries(&self) -> usize {
        self.tokens.len() + 1
    }
}

/// Split `tokens` into pages of `page_size`; the last page may be shorter.
pub fn partition(tokens: &[TokenId], page_size: usize, bookmark: TokenId) -> Result<Vec<Page>> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    if page_size == 0 {
        return Err(Error::InvalidConfig("page size must be at least 1".into()));
    }
    Ok(tokens
        .chunks(page_size)
        .enumerate()
        .map(|(index, chunk)| Page {
            index,
            tokens: chunk.to_vec(),
            bookmark_token: bookmark,
            global_offset: index * page_size,
        })
        .collect())
}

/// Partition several segments independently so each segment starts on a fresh
/// page, then number the pages consecutively. Used to put a query on its own
/// final page(s). Empty segments are skipped; all-empty input is an error.
pub fn partition_segments(
    segments: &[&[TokenId]],
    page_size: usize,
    bookmark: TokenId,
) -> Result<Vec<Page>> {
    let mut pages = Vec::new();
    let mut offset = 0;
    for seg in segments.iter().filter(|s| !s.is_empty()) {
        for mut page in partition(seg, page_size, bookmark)? {
            page.index = pages.len();
            page.global_offset += offset;
            pages.push(page);
        }
        offset += seg.len();
    }
    if pages.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(pages)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionKind {
    Normal,
    Bookmark,
}

/// Interleaved token stream: each page's tokens followed by its bookmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSequence {
    pub tokens: Vec<TokenId>,
    pub kinds: Vec<PositionKind>,
    /// Page index of every position.
    pub page_of: Vec<usize>,
    /// Augmented positions covered by each page, bookmark included.
    pub page_spans: Vec<Range<usize>>,
    pub pages: Vec<Page>,
}

/// Append one bookmark to the end of every page and flatten.
pub fn augment(pages: &[Page]) -> Result<AugmentedSequence> {
    if pages.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut seen = HashSet::with_capacity(pages.len());
    for (pos, page) in pages.iter().enumerate() {
        if !seen.insert(page.index) {
            return Err(Error::CorruptPages(format!("page index {} repeated", page.index)));
        }
        if page.index != pos {
            return Err(Error::CorruptPages(format!(
                "page at slot {pos} carries index {}",
                page.index
            )));
        }
        if page.tokens.is_empty() {
            return Err(Error::CorruptPages(format!("page {} has no tokens", page.index)));
        }
        if page.bookmark_token != pages[0].bookmark_token {
            return Err(Error::CorruptPages("pages disagree on the bookmark id".into()));
        }
    }
    let total: usize = pages.iter().map(Page::kv_entries).sum();
    let mut seq = AugmentedSequence {
        tokens: Vec::with_capacity(total),
        kinds: Vec::with_capacity(total),
        page_of: Vec::with_capacity(total),
        page_spans: Vec::with_capacity(pages.len()),
        pages: pages.to_vec(),
    };
    for page in pages {
        let start = seq.tokens.len();
        for &t in &page.tokens {
            seq.tokens.push(t);
            seq.kinds.push(PositionKind::Normal);
            seq.page_of.push(page.index);
        }
        seq.tokens.push(page.bookmark_token);
        seq.kinds.push(PositionKind::Bookmark);
        seq.page_of.push(page.index);
        seq.page_spans.push(start..seq.tokens.len());
    }
    Ok(seq)
}

impl AugmentedSequence {
    /// Build directly from token segments (context, then query, ...).
    pub fn from_segments(
        segments: &[&[TokenId]],
        page_size: usize,
        bookmark: TokenId,
    ) -> Result<Self> {
        augment(&partition_segments(segments, page_size, bookmark)?)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_pages(&self) -> usize {
        self.page_spans.len()
    }

    pub fn bookmark_position(&self, page: usize) -> usize {
        self.page_spans[page].end - 1
    }

    pub fn bookmark_positions(&self) -> Vec<usize> {
        self.page_spans.iter().map(|s| s.end - 1).collect()
    }

    pub fn normal_positions(&self) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == PositionKind::Normal)
            .map(|(i, _)| i)
            .collect()
    }

    /// Recover the original token stream by dropping bookmarks.
    pub fn de_augment(&self) -> Vec<TokenId> {
        self.tokens
            .iter()
            .zip(&self.kinds)
            .filter(|(_, k)| **k == PositionKind::Normal)
            .map(|(t, _)| *t)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BMK: TokenId = 99;

    #[test]
    fn ten_tokens_make_three_pages() {
        let toks: Vec<TokenId> = (0..10).collect();
        let pages = partition(&toks, 4, BMK).unwrap();
        let lens: Vec<_> = pages.iter().map(Page::len).collect();
        assert_eq!(lens, vec![4, 4, 2]);
        let offsets: Vec<_> = pages.iter().map(|p| p.global_offset).collect();
        assert_eq!(offsets, vec![0, 4, 8]);
    }

    #[test]
    fn full_page_of_128() {
        let toks: Vec<TokenId> = (0..128).collect();
        let pages = partition(&toks, 128, BMK).unwrap();
        assert_eq!(pages.len(), 1);
        assert_eq!(pages[0].len(), 128);
    }

    #[test]
    fn empty_and_zero_width_are_rejected() {
        assert!(matches!(partition(&[], 4, BMK), Err(Error::EmptyInput)));
        assert!(matches!(partition(&[1], 0, BMK), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn bookmarks_land_at_page_ends() {
        let toks: Vec<TokenId> = (0..10).collect();
        let seq = augment(&partition(&toks, 4, BMK).unwrap()).unwrap();
        assert_eq!(seq.len(), 13);
        let bmk: Vec<_> = seq
            .kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == PositionKind::Bookmark)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(bmk, vec![4, 9, 12]);
        assert_eq!(seq.bookmark_positions(), bmk);
    }

    #[test]
    fn single_token_page() {
        let seq = augment(&partition(&[7], 4, BMK).unwrap()).unwrap();
        assert_eq!(seq.tokens, vec![7, BMK]);
        assert_eq!(seq.kinds, vec![PositionKind::Normal, PositionKind::Bookmark]);
    }

    #[test]
    fn repeated_page_index_is_corrupt() {
        let mut pages = partition(&[1, 2, 3, 4, 5], 2, BMK).unwrap();
        pages[2].index = 1;
        assert!(matches!(augment(&pages), Err(Error::CorruptPages(_))));
    }

    #[test]
    fn segments_start_on_fresh_pages() {
        let pages = partition_segments(&[&[1, 2, 3, 4, 5], &[8, 9]], 4, BMK).unwrap();
        let lens: Vec<_> = pages.iter().map(Page::len).collect();
        assert_eq!(lens, vec![4, 1, 2]);
        assert_eq!(pages[2].index, 2);
        assert_eq!(pages[2].global_offset, 5);
    }

    proptest! {
        #[test]
        fn de_augment_reconstructs_input(
            toks in proptest::collection::vec(0u32..50, 1..200),
            w in 1usize..=16,
        ) {
            let pages = partition(&toks, w, BMK).unwrap();
            prop_assert_eq!(pages.len(), toks.len().div_ceil(w));
            for p in &pages[..pages.len() - 1] {
                prop_assert_eq!(p.len(), w);
            }
            let seq = augment(&pages).unwrap();
            prop_assert_eq!(seq.len(), toks.len() + pages.len());
            prop_assert_eq!(seq.de_augment(), toks);
        }
    }
}
