use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::paging::{MemoryReport, TokenId};
use crate::retriever::{RetrievalSelection, ScoreTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

/// One attention call: one page (or one generated token) at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub page: usize,
    pub layer: usize,
    /// Largest key set any query of this call attended to.
    pub attended_kv: usize,
    /// In-window positions visible to the last query of the call.
    pub window_len: usize,
    pub selected_pages: Vec<usize>,
}

/// Audit record of a prefill/decode run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub steps: Vec<StepRecord>,
    pub selections: Vec<RetrievalSelection>,
    /// Store counters after every encoded page and generated token.
    pub memory: Vec<MemoryReport>,
    pub generated: Vec<TokenId>,
    /// Retrieval scorings performed while decoding.
    pub decode_scorings: usize,
    /// Bookmark query of the final query page at every layer.
    pub query_bookmark_q: Vec<Vec<f64>>,
}

impl RunTrace {
    /// Calls whose attended set exceeds `pages × (w + 1) + window_len`.
    pub fn budget_violations(&self, pages: usize, page_size: usize) -> usize {
        self.steps
            .iter()
            .filter(|s| s.attended_kv > pages * (page_size + 1) + s.window_len)
            .count()
    }

    pub fn peak_hot_tokens(&self) -> usize {
        self.memory.iter().map(|m| m.peak_hot_tokens).max().unwrap_or(0)
    }

    /// Scores every layer assigned to the pages before `query_page`.
    pub fn score_trace(&self, query_page: usize) -> Result<ScoreTrace> {
        let sels: Vec<RetrievalSelection> =
            self.selections.iter().filter(|s| s.query_page_index == query_page).cloned().collect();
        ScoreTrace::from_selections(&sels)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `step,layer,attended_kv,selected_pages`, pages joined by `;`.
    pub fn write_audit_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,layer,attended_kv,selected_pages")?;
        for s in &self.steps {
            let pages: Vec<String> = s.selected_pages.iter().map(usize::to_string).collect();
            writeln!(out, "{},{},{},{}", s.step, s.layer, s.attended_kv, pages.join(";"))?;
        }
        Ok(())
    }
}
