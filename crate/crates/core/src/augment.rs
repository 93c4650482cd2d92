//! Swap-and-attach video augmentation.
//!
//! Objects are exchanged between two clips and pasted in place on every frame,
//! so each donated object keeps its own trajectory and the recipient gains a
//! temporally coherent new object that may occlude its original ones.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{LabelMask, RgbImage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSequence {
    pub frames: Vec<RgbImage>,
    pub masks: Vec<LabelMask>,
    pub object_ids: BTreeSet<u8>,
}

impl TrainingSequence {
    pub fn new(frames: Vec<RgbImage>, masks: Vec<LabelMask>, object_ids: BTreeSet<u8>) -> Result<Self> {
        let seq = Self {
            frames,
            masks,
            object_ids,
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Builds a sequence whose object set is every non-zero label found in the masks.
    pub fn from_frames(frames: Vec<RgbImage>, masks: Vec<LabelMask>) -> Result<Self> {
        let ids = masks.iter().flat_map(LabelMask::object_ids).collect();
        Self::new(frames, masks, ids)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidInput("sequence has no frames".into()));
        }
        if self.frames.len() != self.masks.len() {
            return Err(Error::InvalidInput(format!(
                "{} frames but {} masks",
                self.frames.len(),
                self.masks.len()
            )));
        }
        if self.object_ids.contains(&0) {
            return Err(Error::InvalidInput("object id 0 is reserved for background".into()));
        }
        let (h, w) = (self.frames[0].height(), self.frames[0].width());
        for (t, (f, m)) in self.frames.iter().zip(&self.masks).enumerate() {
            if f.height() != h || f.width() != w || m.height() != h || m.width() != w {
                return Err(Error::shape(format!("frame {t} does not match {h}x{w}")));
            }
            if let Some(&bad) = m.labels().iter().find(|&&l| l != 0 && !self.object_ids.contains(&l)) {
                return Err(Error::InvalidInput(format!(
                    "mask {t} uses undeclared object id {bad}"
                )));
            }
        }
        Ok(())
    }

    /// Joint spatial crop of frames `start..start + len`.
    pub fn crop(&self, start: usize, len: usize, top: usize, left: usize, height: usize, width: usize) -> TrainingSequence {
        let frames = self.frames[start..start + len]
            .iter()
            .map(|f| f.crop(top, left, height, width))
            .collect();
        let masks = self.masks[start..start + len]
            .iter()
            .map(|m| m.crop(top, left, height, width))
            .collect();
        TrainingSequence {
            frames,
            masks,
            object_ids: self.object_ids.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapConfig {
    /// Objects donated by each sequence to the other.
    pub objects_per_pair: usize,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self { objects_per_pair: 1 }
    }
}

fn pick_objects(ids: &BTreeSet<u8>, count: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let ids: Vec<u8> = ids.iter().copied().collect();
    let count = count.min(ids.len());
    let mut picked: Vec<u8> = sample(rng, ids.len(), count).into_iter().map(|i| ids[i]).collect();
    picked.sort_unstable();
    picked
}

/// Pastes `objects` of `donor` onto `recipient` under fresh ids, frame by frame.
fn attach(recipient: &TrainingSequence, donor: &TrainingSequence, objects: &[u8]) -> Result<TrainingSequence> {
    let mut out = recipient.clone();
    let mut next_id = 1u8;
    for &obj in objects {
        while out.object_ids.contains(&next_id) {
            next_id = next_id
                .checked_add(1)
                .ok_or_else(|| Error::InvalidInput("no free object id left for an attached object".into()))?;
        }
        let fresh = next_id;
        out.object_ids.insert(fresh);
        for t in 0..out.len() {
            let (src_frame, src_mask) = (&donor.frames[t], &donor.masks[t]);
            let w = src_mask.width();
            for (i, _) in src_mask.labels().iter().enumerate().filter(|(_, &l)| l == obj) {
                let (y, x) = (i / w, i % w);
                out.frames[t].set(y, x, src_frame.get(y, x));
                out.masks[t].labels_mut()[i] = fresh;
            }
        }
    }
    Ok(out)
}

/// Exchanges objects between `a` and `b`; each receives the other's selected
/// objects pasted on top at their original per-frame coordinates.
pub fn swap_and_attach(
    a: &TrainingSequence,
    b: &TrainingSequence,
    rng_seed: u64,
) -> Result<(TrainingSequence, TrainingSequence)> {
    swap_and_attach_with(a, b, SwapConfig::default(), rng_seed)
}

pub fn swap_and_attach_with(
    a: &TrainingSequence,
    b: &TrainingSequence,
    cfg: SwapConfig,
    rng_seed: u64,
) -> Result<(TrainingSequence, TrainingSequence)> {
    a.validate()?;
    b.validate()?;
    if a.len() != b.len() || a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(format!(
            "cannot swap between {}x{}x{} and {}x{}x{} sequences",
            a.len(),
            a.height(),
            a.width(),
            b.len(),
            b.height(),
            b.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let from_b = pick_objects(&b.object_ids, cfg.objects_per_pair, &mut rng);
    let from_a = pick_objects(&a.object_ids, cfg.objects_per_pair, &mut rng);
    // Both directions read the original sequences, so the result does not depend
    // on which side donates first.
    let a_out = attach(a, b, &from_b)?;
    let b_out = attach(b, a, &from_a)?;
    Ok((a_out, b_out))
}

/// Outcome of [`maybe_augment`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaybeAugmented {
    pub a: TrainingSequence,
    pub b: TrainingSequence,
    pub applied: bool,
}

/// Applies [`swap_and_attach`] with the given probability (one Bernoulli draw per pair).
pub fn maybe_augment(
    a: &TrainingSequence,
    b: &TrainingSequence,
    probability: f64,
    rng_seed: u64,
) -> Result<MaybeAugmented> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(Error::InvalidArgument(format!(
            "augmentation probability {probability} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let applied = rng.gen::<f64>() < probability;
    if !applied {
        return Ok(MaybeAugmented {
            a: a.clone(),
            b: b.clone(),
            applied,
        });
    }
    let (a, b) = swap_and_attach(a, b, rng.gen())?;
    Ok(MaybeAugmented { a, b, applied })
}
