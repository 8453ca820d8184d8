//! Fixed block attention mask between token segments.
//!
//! Visual segments attend to each other. Each individual prompt is paired
//! with its own visual segment only. The relational prompt bridges both
//! visual segments but never sees the individual prompts.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::layout::{SegmentKind, SegmentLayout};
use crate::tensor::{KeyPattern, Tensor};

/// Segment-level reachability, indexed `[query][key]` in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockReachability(pub [[bool; 5]; 5]);

const BLOCK: [[bool; 5]; 5] = {
    const T: bool = true;
    const F: bool = false;
    [
        // keys:  Rel IndC IndT VisC VisT
        [T, F, F, T, T], // Rel
        [F, T, F, T, F], // IndCond
        [F, F, T, F, T], // IndTgt
        [T, T, F, T, T], // VisCond
        [T, F, T, T, T], // VisTgt
    ]
};

pub fn ham_block_matrix() -> BlockReachability {
    BlockReachability(BLOCK)
}

impl BlockReachability {
    pub fn allows(&self, query: SegmentKind, key: SegmentKind) -> bool {
        self.0[query.index()][key.index()]
    }

    /// Rows of the matrix restricted to the segments present in `layout`.
    pub fn restricted(&self, layout: &SegmentLayout) -> Vec<Vec<bool>> {
        layout.kinds().map(|q| layout.kinds().map(|k| self.allows(q, k)).collect()).collect()
    }
}

/// Token-level mask description that never materializes the dense matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    total: usize,
    token_segment: Vec<u8>,
    ranges: Vec<Vec<Range<usize>>>,
}

impl BlockMask {
    pub fn new(layout: &SegmentLayout) -> Self {
        let block = ham_block_matrix();
        let ranges = layout
            .segments()
            .iter()
            .map(|q| {
                let mut out: Vec<Range<usize>> = Vec::new();
                for k in layout.segments() {
                    if !block.allows(q.kind, k.kind) {
                        continue;
                    }
                    match out.last_mut() {
                        Some(last) if last.end == k.offset => last.end = k.offset + k.len,
                        _ => out.push(k.range()),
                    }
                }
                out
            })
            .collect();
        let token_segment =
            layout.segments().iter().enumerate().flat_map(|(i, s)| std::iter::repeat_n(i as u8, s.len)).collect();
        BlockMask { total: layout.total(), token_segment, ranges }
    }

    pub fn is_allowed(&self, query: usize, key: usize) -> bool {
        self.allowed_keys(query).iter().any(|r| r.contains(&key))
    }
}

impl KeyPattern for BlockMask {
    fn num_tokens(&self) -> usize {
        self.total
    }

    fn allowed_keys(&self, query: usize) -> &[Range<usize>] {
        &self.ranges[self.token_segment[query] as usize]
    }
}

/// Dense binary mask together with its block form and source layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub dense: Tensor,
    pub layout: SegmentLayout,
    pub blocks: BlockMask,
}

impl AttentionMask {
    pub fn get(&self, query: usize, key: usize) -> bool {
        self.dense.get2(query, key) != 0.0
    }
}

impl KeyPattern for AttentionMask {
    fn num_tokens(&self) -> usize {
        self.blocks.num_tokens()
    }

    fn allowed_keys(&self, query: usize) -> &[Range<usize>] {
        self.blocks.allowed_keys(query)
    }
}

fn cache() -> &'static Mutex<HashMap<SegmentLayout, Arc<AttentionMask>>> {
    static CACHE: OnceLock<Mutex<HashMap<SegmentLayout, Arc<AttentionMask>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Token-level expansion of the block matrix for `layout`. Four-segment
/// layouts use the matrix with the relational row and column removed.
/// Results are cached per layout.
pub fn build_ham(layout: &SegmentLayout) -> Arc<AttentionMask> {
    if let Some(hit) = cache().lock().unwrap_or_else(|e| e.into_inner()).get(layout) {
        return Arc::clone(hit);
    }
    let block = ham_block_matrix();
    let kinds = layout.token_kinds();
    let n = kinds.len();
    let dense = Tensor::from_fn(&[n, n], |idx| if block.allows(kinds[idx / n], kinds[idx % n]) { 1.0 } else { 0.0 });
    let mask = Arc::new(AttentionMask { dense, layout: layout.clone(), blocks: BlockMask::new(layout) });
    cache().lock().unwrap_or_else(|e| e.into_inner()).insert(layout.clone(), Arc::clone(&mask));
    mask
}

pub fn is_attention_allowed(layout: &SegmentLayout, query: usize, key: usize) -> Result<bool> {
    let n = layout.total();
    for index in [query, key] {
        if index >= n {
            return Err(Error::OutOfRange { index, len: n });
        }
    }
    Ok(ham_block_matrix().allows(layout.segment_of(query)?, layout.segment_of(key)?))
}

/// Binary PGM (P5) rendering of the dense mask: white where attention is
/// allowed.
pub fn mask_to_pgm(mask: &AttentionMask) -> Vec<u8> {
    let n = mask.layout.total();
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend(mask.dense.data().iter().map(|&v| if v != 0.0 { 255u8 } else { 0 }));
    out
}

/// Text rendering of the block matrix for the segments in `layout`.
pub fn format_block_matrix(layout: &SegmentLayout) -> String {
    let rows = ham_block_matrix().restricted(layout);
    let kinds: Vec<SegmentKind> = layout.kinds().collect();
    let mut s = format!("{:>9}", "");
    for k in &kinds {
        s.push_str(&format!(" {:>9}", k.name()));
    }
    s.push('\n');
    for (q, row) in kinds.iter().zip(rows) {
        s.push_str(&format!("{:>9}", q.name()));
        for v in row {
            s.push_str(&format!(" {:>9}", v as u8));
        }
        s.push('\n');
    }
    s
}
