//! Per-token loss masks for completion-only training (IT) and
//! instruction-inclusive training with template exclusion (IM).
//!
//! Masks are aligned to prediction targets: entry `t` weights the loss of
//! predicting `tokens[t + 1]` from `tokens[..=t]`, so a mask over `n` tokens
//! has `n - 1` entries.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{SegmentRole, TokenizedExample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Loss on completion tokens only.
    It,
    /// Loss on instruction and completion tokens; template tokens excluded.
    Im,
}

impl MaskMode {
    pub fn supervises(self, role: SegmentRole) -> bool {
        match (self, role) {
            (_, SegmentRole::Template) => false,
            (_, SegmentRole::Completion) => true,
            (MaskMode::It, SegmentRole::Instruction) => false,
            (MaskMode::Im, SegmentRole::Instruction) => true,
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::It => "it",
            MaskMode::Im => "im",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "it" => Ok(MaskMode::It),
            "im" => Ok(MaskMode::Im),
            other => Err(Error::Config(format!("unknown loss mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask {
    active: Vec<bool>,
}

impl LossMask {
    pub fn from_active(active: Vec<bool>) -> Self {
        Self { active }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, t: usize) -> bool {
        self.active[t]
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn weight(&self, t: usize) -> f64 {
        if self.active[t] {
            1.0
        } else {
            0.0
        }
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// `0`/`1` string, one character per target position.
    pub fn bits(&self) -> String {
        self.active.iter().map(|&a| if a { '1' } else { '0' }).collect()
    }
}

pub fn build_loss_mask(ex: &TokenizedExample, mode: MaskMode) -> Result<LossMask> {
    let active: Vec<bool> = ex.roles[1..].iter().map(|&r| mode.supervises(r)).collect();
    let mask = LossMask { active };
    if mask.active_count() == 0 {
        return Err(Error::NoSupervisedTokens);
    }
    Ok(mask)
}

/// Breakdown of a mask's active targets by segment role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub instr_active: usize,
    pub compl_active: usize,
    pub template_zeroed: usize,
}

impl MaskSummary {
    pub fn active_total(&self) -> usize {
        self.instr_active + self.compl_active
    }
}

pub fn mask_summary(mask: &LossMask, ex: &TokenizedExample) -> Result<MaskSummary> {
    if mask.len() + 1 != ex.len() {
        return Err(Error::Shape(format!(
            "mask of {} targets does not align with {} tokens",
            mask.len(),
            ex.len()
        )));
    }
    let mut summary = MaskSummary {
        instr_active: 0,
        compl_active: 0,
        template_zeroed: 0,
    };
    for (&active, &role) in mask.active.iter().zip(&ex.roles[1..]) {
        match (role, active) {
            (SegmentRole::Instruction, true) => summary.instr_active += 1,
            (SegmentRole::Completion, true) => summary.compl_active += 1,
            (SegmentRole::Template, false) => summary.template_zeroed += 1,
            (SegmentRole::Template, true) => unreachable!("template target marked active"),
            _ => {}
        }
    }
    Ok(summary)
}

/// One line per example for golden-file comparison:
/// `<id>\troles=<TIC...>\tit=<bits>\tim=<bits>`.
pub fn dump_line(ex: &TokenizedExample) -> Result<String> {
    let it = build_loss_mask(ex, MaskMode::It)?;
    let im = build_loss_mask(ex, MaskMode::Im)?;
    Ok(format!(
        "{}\troles={}\tit={}\tim={}",
        ex.source_id,
        ex.role_string(),
        it.bits(),
        im.bits()
    ))
}
