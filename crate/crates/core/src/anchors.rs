//! Anchor boxes, their log-ratio encoding against a per-level standard box,
//! grid configurations and training-time jitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anchor size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorBox {
    pub h: f64,
    pub w: f64,
}

impl AnchorBox {
    pub fn new(h: f64, w: f64) -> Result<Self> {
        if !(h > 0.0 && w > 0.0 && h.is_finite() && w.is_finite()) {
            return Err(Error::invalid(format!("anchor box must be positive, got {h}x{w}")));
        }
        Ok(AnchorBox { h, w })
    }
}

/// Normalizing box of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardBox {
    pub h: f64,
    pub w: f64,
    pub level: usize,
}

/// `(ln(ah / AH), ln(aw / AW))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorEncoding {
    pub eh: f64,
    pub ew: f64,
}

impl AnchorEncoding {
    pub const STANDARD: AnchorEncoding = AnchorEncoding { eh: 0.0, ew: 0.0 };

    pub fn new(eh: f64, ew: f64) -> Result<Self> {
        if !(eh.is_finite() && ew.is_finite()) {
            return Err(Error::NonFinite(format!("anchor encoding ({eh}, {ew})")));
        }
        Ok(AnchorEncoding { eh, ew })
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.eh, self.ew]
    }
}

/// A `scales x ratios` grid of anchors at the finest pyramid level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfiguration {
    pub scales: Vec<f64>,
    /// Height over width.
    pub ratios: Vec<f64>,
    pub base_size: f64,
    pub standard: StandardBox,
}

impl AnchorConfiguration {
    /// All anchors, scale-major: `(s0, r0), (s0, r1), ..., (s1, r0), ...`.
    pub fn boxes(&self) -> Vec<AnchorBox> {
        self.scales
            .iter()
            .flat_map(|&s| {
                self.ratios.iter().map(move |&r| AnchorBox {
                    h: self.base_size * s * r.sqrt(),
                    w: self.base_size * s / r.sqrt(),
                })
            })
            .collect()
    }

    /// The configuration's anchors encoded against `standard` (which should be
    /// the standard box the model was trained with).
    pub fn encodings_against(&self, standard: &StandardBox) -> Vec<AnchorEncoding> {
        self.boxes()
            .iter()
            .map(|b| encode(b, standard).expect("configuration boxes are positive"))
            .collect()
    }

    pub fn encodings(&self) -> Vec<AnchorEncoding> {
        self.encodings_against(&self.standard)
    }

    pub fn len(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scales `2^(k/n)` for `k = 0..n`, crossed with the given height/width ratios.
pub fn build_configuration(n: usize, ratios: &[f64], base_size: f64) -> Result<AnchorConfiguration> {
    if n == 0 {
        return Err(Error::invalid("anchor configuration needs at least one scale"));
    }
    if ratios.is_empty() {
        return Err(Error::invalid("anchor configuration needs at least one ratio"));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::invalid(format!("aspect ratio must be positive, got {r}")));
    }
    if !(base_size > 0.0 && base_size.is_finite()) {
        return Err(Error::invalid(format!("base size must be positive, got {base_size}")));
    }
    let mut ratios = ratios.to_vec();
    ratios.sort_by(f64::total_cmp);
    if ratios.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("aspect ratios must be distinct"));
    }
    let scales = (0..n).map(|k| 2f64.powf(k as f64 / n as f64)).collect();
    let mut cfg = AnchorConfiguration {
        scales,
        ratios,
        base_size,
        standard: StandardBox { h: 1.0, w: 1.0, level: 0 },
    };
    cfg.standard = standard_box(&cfg.boxes(), 0)?;
    Ok(cfg)
}

/// Mean anchor height and width.
pub fn standard_box(boxes: &[AnchorBox], level: usize) -> Result<StandardBox> {
    if boxes.is_empty() {
        return Err(Error::invalid("standard box of an empty anchor set"));
    }
    let n = boxes.len() as f64;
    Ok(StandardBox {
        h: boxes.iter().map(|b| b.h).sum::<f64>() / n,
        w: boxes.iter().map(|b| b.w).sum::<f64>() / n,
        level,
    })
}

pub fn encode(b: &AnchorBox, standard: &StandardBox) -> Result<AnchorEncoding> {
    if !(b.h > 0.0 && b.w > 0.0 && standard.h > 0.0 && standard.w > 0.0) {
        return Err(Error::invalid(format!(
            "cannot encode {}x{} against standard {}x{}",
            b.h, b.w, standard.h, standard.w
        )));
    }
    AnchorEncoding::new((b.h / standard.h).ln(), (b.w / standard.w).ln())
}

pub fn decode_encoding(enc: &AnchorEncoding, standard: &StandardBox) -> Result<AnchorBox> {
    if !(enc.eh.is_finite() && enc.ew.is_finite()) {
        return Err(Error::NonFinite(format!("anchor encoding ({}, {})", enc.eh, enc.ew)));
    }
    AnchorBox::new(standard.h * enc.eh.exp(), standard.w * enc.ew.exp())
}

/// The standard box doubles with every coarser pyramid level.
pub fn level_standard(base: &StandardBox, level: usize) -> Result<StandardBox> {
    if level < base.level {
        return Err(Error::invalid(format!(
            "target level {level} is below base level {}",
            base.level
        )));
    }
    let k = 2f64.powi((level - base.level) as i32);
    Ok(StandardBox {
        h: base.h * k,
        w: base.w * k,
        level,
    })
}

/// Independent uniform jitter in `[-delta, delta]` on each encoded component.
pub fn augment<R: Rng + ?Sized>(enc: &AnchorEncoding, rng: &mut R, delta: f64) -> Result<AnchorEncoding> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::invalid(format!("augmentation range must be >= 0, got {delta}")));
    }
    if delta == 0.0 {
        return Ok(*enc);
    }
    AnchorEncoding::new(
        enc.eh + rng.gen_range(-delta..=delta),
        enc.ew + rng.gen_range(-delta..=delta),
    )
}
