//! Discrete hierarchical prompts and their token encoding.
//!
//! Every attribute field owns a contiguous block of token ids after the
//! shared PAD id 0. The relational prompt carries pattern, palette, lighting
//! and subject continuity; each individual prompt describes only its own shot.

use serde::{Deserialize, Serialize};

use super::scene::{
    EditPattern, Scene, Shape, LIGHTING_LEVELS, NUM_ANGLES, NUM_COLORS, NUM_PALETTES, SUBJECT_RADII, ZOOM_LEVELS,
};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const PAD: u32 = 0;
/// Relational prompt length in tokens.
pub const REL_LEN: usize = 4;
/// Individual prompt length in tokens.
pub const IND_LEN: usize = 9;
/// Positions within an individual prompt that dropout may blank.
pub const DETAIL_SLOTS: [usize; 2] = [3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    Pattern,
    RelPalette,
    Lighting,
    Continuity,
    Shape,
    Palette,
    Secondary,
    Color,
    Size,
    ShotSize,
    Composition,
    Angle,
    Flip,
}

impl Field {
    pub const ALL: [Field; 13] = [
        Field::Pattern,
        Field::RelPalette,
        Field::Lighting,
        Field::Continuity,
        Field::Shape,
        Field::Palette,
        Field::Secondary,
        Field::Color,
        Field::Size,
        Field::ShotSize,
        Field::Composition,
        Field::Angle,
        Field::Flip,
    ];

    pub fn cardinality(self) -> usize {
        match self {
            Field::Pattern => EditPattern::ALL.len(),
            Field::RelPalette | Field::Palette => NUM_PALETTES,
            Field::Lighting => LIGHTING_LEVELS.len(),
            Field::Continuity => 2,
            Field::Shape => Shape::ALL.len(),
            Field::Secondary => Shape::ALL.len() + 1,
            Field::Color => NUM_COLORS,
            Field::Size => SUBJECT_RADII.len(),
            Field::ShotSize => ZOOM_LEVELS.len(),
            Field::Composition => 3,
            Field::Angle => NUM_ANGLES,
            Field::Flip => 2,
        }
    }

    /// First token id of this field's block.
    pub fn base(self) -> u32 {
        let mut base = 1;
        for f in Field::ALL {
            if f == self {
                break;
            }
            base += f.cardinality() as u32;
        }
        base
    }

    pub fn encode(self, value: usize) -> Result<u32> {
        if value >= self.cardinality() {
            return Err(Error::UnknownCode(format!("{self:?} value {value}")));
        }
        Ok(self.base() + value as u32)
    }

    pub fn decode(self, code: u32) -> Result<usize> {
        let base = self.base();
        if code < base || code >= base + self.cardinality() as u32 {
            return Err(Error::UnknownCode(format!("{self:?} code {code}")));
        }
        Ok((code - base) as usize)
    }
}

/// Number of distinct token ids, PAD included.
pub fn vocab_size() -> usize {
    1 + Field::ALL.iter().map(|f| f.cardinality()).sum::<usize>()
}

const REL_FIELDS: [Field; REL_LEN] = [Field::Pattern, Field::RelPalette, Field::Lighting, Field::Continuity];
const IND_FIELDS: [Field; IND_LEN] = [
    Field::Shape,
    Field::Palette,
    Field::Secondary,
    Field::Color,
    Field::Size,
    Field::ShotSize,
    Field::Composition,
    Field::Angle,
    Field::Flip,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationalPrompt {
    pub pattern: EditPattern,
    pub palette: u8,
    pub lighting: u8,
    /// Same primary subject identity in both shots.
    pub continuity: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndividualPrompt {
    pub shape: Shape,
    pub palette: u8,
    pub secondary: Option<Shape>,
    pub color: u8,
    pub size: u8,
    pub shot_size: u8,
    pub composition: u8,
    pub angle: u8,
    pub flip: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchicalPrompt {
    pub relational: RelationalPrompt,
    pub cond: IndividualPrompt,
    pub tgt: IndividualPrompt,
}

fn lighting_level(l: f32) -> Result<u8> {
    LIGHTING_LEVELS
        .iter()
        .position(|&v| v == l)
        .map(|i| i as u8)
        .ok_or_else(|| Error::UnknownCode(format!("lighting {l}")))
}

impl IndividualPrompt {
    pub fn describe(scene: &Scene) -> Result<Self> {
        let zoom = scene.zoom_class().ok_or_else(|| Error::UnknownCode(format!("zoom {}", scene.camera.zoom)))?;
        let third = (scene.primary_view_x() * 3.0).floor().clamp(0.0, 2.0) as u8;
        Ok(IndividualPrompt {
            shape: scene.primary.shape,
            palette: scene.palette,
            secondary: scene.secondary.map(|s| s.shape),
            color: scene.primary.color,
            size: scene.primary.size,
            shot_size: zoom as u8,
            composition: third,
            angle: scene.camera.angle,
            flip: scene.camera.flip,
        })
    }

    pub fn codes(&self) -> Result<[u32; IND_LEN]> {
        let secondary = self.secondary.map_or(0, |s| s as usize + 1);
        let values = [
            self.shape as usize,
            self.palette as usize,
            secondary,
            self.color as usize,
            self.size as usize,
            self.shot_size as usize,
            self.composition as usize,
            self.angle as usize,
            self.flip as usize,
        ];
        let mut out = [PAD; IND_LEN];
        for (o, (f, v)) in out.iter_mut().zip(IND_FIELDS.iter().zip(values)) {
            *o = f.encode(v)?;
        }
        Ok(out)
    }

    pub fn decode(codes: &[u32]) -> Result<Self> {
        if codes.len() != IND_LEN {
            return Err(Error::shape("decode individual prompt", format!("{} codes", codes.len())));
        }
        let v: Vec<usize> = IND_FIELDS.iter().zip(codes).map(|(f, &c)| f.decode(c)).collect::<Result<_>>()?;
        Ok(IndividualPrompt {
            shape: Shape::ALL[v[0]],
            palette: v[1] as u8,
            secondary: v[2].checked_sub(1).map(|i| Shape::ALL[i]),
            color: v[3] as u8,
            size: v[4] as u8,
            shot_size: v[5] as u8,
            composition: v[6] as u8,
            angle: v[7] as u8,
            flip: v[8] == 1,
        })
    }
}

impl RelationalPrompt {
    pub fn codes(&self) -> Result<[u32; REL_LEN]> {
        let pattern = EditPattern::ALL.iter().position(|&p| p == self.pattern).unwrap_or(0);
        let values = [pattern, self.palette as usize, self.lighting as usize, self.continuity as usize];
        let mut out = [PAD; REL_LEN];
        for (o, (f, v)) in out.iter_mut().zip(REL_FIELDS.iter().zip(values)) {
            *o = f.encode(v)?;
        }
        Ok(out)
    }

    pub fn decode(codes: &[u32]) -> Result<Self> {
        if codes.len() != REL_LEN {
            return Err(Error::shape("decode relational prompt", format!("{} codes", codes.len())));
        }
        let v: Vec<usize> = REL_FIELDS.iter().zip(codes).map(|(f, &c)| f.decode(c)).collect::<Result<_>>()?;
        Ok(RelationalPrompt {
            pattern: EditPattern::ALL[v[0]],
            palette: v[1] as u8,
            lighting: v[2] as u8,
            continuity: v[3] == 1,
        })
    }
}

impl HierarchicalPrompt {
    /// Derives the prompt from the two scene records of a pair.
    pub fn describe(cond: &Scene, tgt: &Scene, pattern: EditPattern) -> Result<Self> {
        let continuity = cond.primary.shape == tgt.primary.shape && cond.primary.color == tgt.primary.color;
        Ok(HierarchicalPrompt {
            relational: RelationalPrompt {
                pattern,
                palette: cond.palette,
                lighting: lighting_level(cond.lighting)?,
                continuity,
            },
            cond: IndividualPrompt::describe(cond)?,
            tgt: IndividualPrompt::describe(tgt)?,
        })
    }

    /// Token ids for the three prompts without dropout.
    pub fn codes(&self) -> Result<PromptCodes> {
        Ok(PromptCodes {
            rel: self.relational.codes()?.to_vec(),
            ind_cond: self.cond.codes()?.to_vec(),
            ind_tgt: self.tgt.codes()?.to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCodes {
    pub rel: Vec<u32>,
    pub ind_cond: Vec<u32>,
    pub ind_tgt: Vec<u32>,
}

fn pad_to(mut codes: Vec<u32>, len: usize, what: &str) -> Result<Vec<u32>> {
    if codes.len() > len {
        return Err(Error::shape("encode prompt", format!("{what} needs {} tokens, segment holds {len}", codes.len())));
    }
    codes.resize(len, PAD);
    Ok(codes)
}

/// Applies detail dropout and pads each prompt to its segment length.
pub fn prompt_codes(
    prompt: &HierarchicalPrompt,
    rel_len: usize,
    ind_len: usize,
    dropout: f32,
    rng: &mut Rng,
    training: bool,
) -> Result<PromptCodes> {
    if !(0.0..=1.0).contains(&dropout) {
        return Err(Error::invalid(format!("dropout {dropout} outside [0, 1]")));
    }
    let mut codes = prompt.codes()?;
    if training {
        for seq in [&mut codes.ind_cond, &mut codes.ind_tgt] {
            for &slot in &DETAIL_SLOTS {
                if rng.bernoulli(dropout as f64) {
                    seq[slot] = PAD;
                }
            }
        }
    }
    Ok(PromptCodes {
        rel: pad_to(codes.rel, rel_len, "relational prompt")?,
        ind_cond: pad_to(codes.ind_cond, ind_len, "condition prompt")?,
        ind_tgt: pad_to(codes.ind_tgt, ind_len, "target prompt")?,
    })
}

/// Looks up embedding rows for a code sequence.
pub fn embed_codes(codes: &[u32], table: &Tensor) -> Result<Tensor> {
    let (vocab, d) = table.dims2()?;
    let mut data = Vec::with_capacity(codes.len() * d);
    for &c in codes {
        if c as usize >= vocab {
            return Err(Error::UnknownCode(format!("token {c} with vocabulary {vocab}")));
        }
        data.extend_from_slice(table.row(c as usize));
    }
    Tensor::new(vec![codes.len(), d], data)
}

/// Token embeddings for the relational and both individual prompts.
pub fn encode_prompt(
    prompt: &HierarchicalPrompt,
    table: &Tensor,
    dropout: f32,
    rng: &mut Rng,
    training: bool,
) -> Result<[Tensor; 3]> {
    let codes = prompt_codes(prompt, REL_LEN, IND_LEN, dropout, rng, training)?;
    Ok([embed_codes(&codes.rel, table)?, embed_codes(&codes.ind_cond, table)?, embed_codes(&codes.ind_tgt, table)?])
}
