//! The concatenated token sequence: relational prompt, the two individual
//! prompts, the clean condition latent and the noised target latent, in that
//! order.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SegmentKind {
    Rel,
    IndCond,
    IndTgt,
    VisCond,
    VisTgt,
}

impl SegmentKind {
    /// Canonical sequence order.
    pub const ALL: [SegmentKind; 5] =
        [SegmentKind::Rel, SegmentKind::IndCond, SegmentKind::IndTgt, SegmentKind::VisCond, SegmentKind::VisTgt];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_text(self) -> bool {
        matches!(self, SegmentKind::Rel | SegmentKind::IndCond | SegmentKind::IndTgt)
    }

    pub fn name(self) -> &'static str {
        match self {
            SegmentKind::Rel => "rel",
            SegmentKind::IndCond => "ind_cond",
            SegmentKind::IndTgt => "ind_tgt",
            SegmentKind::VisCond => "vis_cond",
            SegmentKind::VisTgt => "vis_tgt",
        }
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Segment {
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Contiguous segments in canonical order. The full layout has all five; the
/// ablation layout omits `Rel`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "LayoutLengths", into = "LayoutLengths")]
pub struct SegmentLayout {
    segments: Vec<Segment>,
    total: usize,
}

/// Serialized form: five named integers, `rel = 0` meaning the layout has no
/// relational segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutLengths {
    pub rel: usize,
    pub ind_cond: usize,
    pub ind_tgt: usize,
    pub vis_cond: usize,
    pub vis_tgt: usize,
}

impl TryFrom<LayoutLengths> for SegmentLayout {
    type Error = Error;

    fn try_from(l: LayoutLengths) -> Result<Self> {
        if l.rel == 0 {
            SegmentLayout::without_rel(l.ind_cond, l.ind_tgt, l.vis_cond, l.vis_tgt)
        } else {
            build_layout(l.rel, l.ind_cond, l.ind_tgt, l.vis_cond, l.vis_tgt)
        }
    }
}

impl From<SegmentLayout> for LayoutLengths {
    fn from(layout: SegmentLayout) -> Self {
        let len = |k| layout.len_of(k);
        LayoutLengths {
            rel: len(SegmentKind::Rel),
            ind_cond: len(SegmentKind::IndCond),
            ind_tgt: len(SegmentKind::IndTgt),
            vis_cond: len(SegmentKind::VisCond),
            vis_tgt: len(SegmentKind::VisTgt),
        }
    }
}

/// Five-segment layout from per-segment token counts.
pub fn build_layout(
    rel: usize,
    ind_cond: usize,
    ind_tgt: usize,
    vis_cond: usize,
    vis_tgt: usize,
) -> Result<SegmentLayout> {
    SegmentLayout::from_parts(&[
        (SegmentKind::Rel, rel),
        (SegmentKind::IndCond, ind_cond),
        (SegmentKind::IndTgt, ind_tgt),
        (SegmentKind::VisCond, vis_cond),
        (SegmentKind::VisTgt, vis_tgt),
    ])
}

impl SegmentLayout {
    /// Four-segment layout without the relational prompt.
    pub fn without_rel(ind_cond: usize, ind_tgt: usize, vis_cond: usize, vis_tgt: usize) -> Result<Self> {
        SegmentLayout::from_parts(&[
            (SegmentKind::IndCond, ind_cond),
            (SegmentKind::IndTgt, ind_tgt),
            (SegmentKind::VisCond, vis_cond),
            (SegmentKind::VisTgt, vis_tgt),
        ])
    }

    fn from_parts(parts: &[(SegmentKind, usize)]) -> Result<Self> {
        let mut segments = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for &(kind, len) in parts {
            if len == 0 {
                return Err(Error::invalid(format!("segment {kind} must have at least one token")));
            }
            segments.push(Segment { kind, offset, len });
            offset += len;
        }
        Ok(SegmentLayout { segments, total: offset })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn kinds(&self) -> impl Iterator<Item = SegmentKind> + '_ {
        self.segments.iter().map(|s| s.kind)
    }

    pub fn has_rel(&self) -> bool {
        self.contains(SegmentKind::Rel)
    }

    pub fn contains(&self, kind: SegmentKind) -> bool {
        self.segments.iter().any(|s| s.kind == kind)
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    pub fn range(&self, kind: SegmentKind) -> Option<Range<usize>> {
        self.segment(kind).map(Segment::range)
    }

    pub fn offset_of(&self, kind: SegmentKind) -> Option<usize> {
        self.segment(kind).map(|s| s.offset)
    }

    /// Token count of `kind`, zero when the layout omits it.
    pub fn len_of(&self, kind: SegmentKind) -> usize {
        self.segment(kind).map_or(0, |s| s.len)
    }

    pub fn segment_of(&self, index: usize) -> Result<SegmentKind> {
        self.segments
            .iter()
            .find(|s| s.range().contains(&index))
            .map(|s| s.kind)
            .ok_or(Error::OutOfRange { index, len: self.total })
    }

    /// Per-token segment kinds, in sequence order.
    pub fn token_kinds(&self) -> Vec<SegmentKind> {
        self.segments.iter().flat_map(|s| std::iter::repeat_n(s.kind, s.len)).collect()
    }

    pub fn lengths(&self) -> LayoutLengths {
        self.clone().into()
    }
}

/// The model's input sequence with its layout and diffusion time.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub tokens: Tensor,
    pub layout: SegmentLayout,
    pub diffusion_t: f32,
}

fn check_t(t: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("diffusion time {t} outside [0, 1]")));
    }
    Ok(())
}

fn concat(parts: &[(SegmentKind, &Tensor)], t: f32) -> Result<ModelInput> {
    check_t(t)?;
    let width = parts[0].1.cols();
    for (kind, p) in parts {
        let (_, c) = p.dims2()?;
        if c != width {
            return Err(Error::shape("concat_model_input", format!("segment {kind} has width {c}, expected {width}")));
        }
    }
    let layout = SegmentLayout::from_parts(&parts.iter().map(|(k, p)| (*k, p.rows())).collect::<Vec<_>>())?;
    let tokens = Tensor::vstack(&parts.iter().map(|(_, p)| *p).collect::<Vec<_>>())?;
    Ok(ModelInput { tokens, layout, diffusion_t: t })
}

/// Concatenates the five segments in canonical order.
pub fn concat_model_input(
    c_rel: &Tensor,
    c_ind_cond: &Tensor,
    c_ind_tgt: &Tensor,
    z_cond: &Tensor,
    z_tgt_noised: &Tensor,
    t: f32,
) -> Result<ModelInput> {
    concat(
        &[
            (SegmentKind::Rel, c_rel),
            (SegmentKind::IndCond, c_ind_cond),
            (SegmentKind::IndTgt, c_ind_tgt),
            (SegmentKind::VisCond, z_cond),
            (SegmentKind::VisTgt, z_tgt_noised),
        ],
        t,
    )
}

/// Four-segment variant of [`concat_model_input`] without the relational prompt.
pub fn concat_model_input_without_rel(
    c_ind_cond: &Tensor,
    c_ind_tgt: &Tensor,
    z_cond: &Tensor,
    z_tgt_noised: &Tensor,
    t: f32,
) -> Result<ModelInput> {
    concat(
        &[
            (SegmentKind::IndCond, c_ind_cond),
            (SegmentKind::IndTgt, c_ind_tgt),
            (SegmentKind::VisCond, z_cond),
            (SegmentKind::VisTgt, z_tgt_noised),
        ],
        t,
    )
}

impl ModelInput {
    pub fn extract(&self, kind: SegmentKind) -> Result<Tensor> {
        let r = self.layout.range(kind).ok_or_else(|| Error::Missing(format!("segment {kind} in layout")))?;
        self.tokens.slice_rows(r.start, r.end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> SegmentLayout {
        build_layout(4, 8, 8, 16, 16).unwrap()
    }

    #[test]
    fn offsets_follow_canonical_order() {
        let l = example();
        let offsets: Vec<usize> = l.segments().iter().map(|s| s.offset).collect();
        assert_eq!(offsets, vec![0, 4, 12, 20, 36]);
        assert_eq!(l.total(), 52);
        let unit = build_layout(1, 1, 1, 1, 1).unwrap();
        assert_eq!(unit.segments().iter().map(|s| s.offset).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(unit.total(), 5);
        assert_eq!(l.kinds().collect::<Vec<_>>(), SegmentKind::ALL.to_vec());
    }

    #[test]
    fn zero_length_segment_is_rejected() {
        assert!(build_layout(4, 8, 8, 0, 16).is_err());
        assert!(SegmentLayout::without_rel(0, 1, 1, 1).is_err());
    }

    #[test]
    fn segment_lookup() {
        let l = example();
        assert_eq!(l.segment_of(0).unwrap(), SegmentKind::Rel);
        assert_eq!(l.segment_of(19).unwrap(), SegmentKind::IndTgt);
        assert_eq!(l.segment_of(51).unwrap(), SegmentKind::VisTgt);
        assert!(matches!(l.segment_of(52), Err(Error::OutOfRange { index: 52, len: 52 })));
    }

    #[test]
    fn concat_single_rows_in_order() {
        let rows: Vec<Tensor> = (0..5).map(|i| Tensor::matrix(1, 3, vec![i as f32; 3]).unwrap()).collect();
        let input = concat_model_input(&rows[0], &rows[1], &rows[2], &rows[3], &rows[4], 0.3).unwrap();
        assert_eq!(input.tokens.rows(), 5);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(input.tokens.row(i), r.data());
        }
        assert_eq!(input.extract(SegmentKind::VisCond).unwrap(), rows[3]);
    }

    #[test]
    fn concat_rejects_mixed_widths_and_bad_time() {
        let a = Tensor::zeros(&[2, 8]);
        let b = Tensor::zeros(&[2, 16]);
        assert!(concat_model_input(&a, &a, &a, &b, &a, 0.5).is_err());
        assert!(concat_model_input(&a, &a, &a, &a, &a, 1.5).is_err());
    }

    #[test]
    fn no_rel_layout_serializes_with_zero_rel() {
        let l = SegmentLayout::without_rel(2, 3, 4, 5).unwrap();
        let json = serde_json::to_string(&l).unwrap();
        assert_eq!(json, r#"{"rel":0,"ind_cond":2,"ind_tgt":3,"vis_cond":4,"vis_tgt":5}"#);
        let back: SegmentLayout = serde_json::from_str(&json).unwrap();
        assert_eq!(back, l);
        assert!(!back.has_rel());
        assert_eq!(back.total(), 14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn segments_partition_the_sequence(lens in proptest::array::uniform5(1usize..12)) {
                let l = build_layout(lens[0], lens[1], lens[2], lens[3], lens[4]).unwrap();
                prop_assert_eq!(l.total(), lens.iter().sum::<usize>());
                let kinds = l.token_kinds();
                for (i, k) in kinds.iter().enumerate() {
                    prop_assert_eq!(l.segment_of(i).unwrap(), *k);
                    let hits = l.segments().iter().filter(|s| s.range().contains(&i)).count();
                    prop_assert_eq!(hits, 1);
                }
            }

            #[test]
            fn concat_then_extract_is_identity(lens in proptest::array::uniform5(1usize..6), seed in 0u64..1000) {
                let mut rng = crate::tensor::Rng::new(seed);
                let parts: Vec<Tensor> = lens.iter().map(|&n| Tensor::randn(&[n, 4], 1.0, &mut rng)).collect();
                let input = concat_model_input(&parts[0], &parts[1], &parts[2], &parts[3], &parts[4], 0.5).unwrap();
                for (kind, p) in SegmentKind::ALL.iter().zip(&parts) {
                    prop_assert_eq!(&input.extract(*kind).unwrap(), p);
                }
            }
        }
    }
}
