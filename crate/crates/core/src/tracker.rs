//! Per-sequence inference: patch embedding, template matching, affine readout,
//! bank update and multi-object aggregation.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{downsample_mask, FeatureGrid, LabelMask, ProbMask, RgbImage, ScoreChannel, ScoreStack, SCORE_CHANNELS};
use crate::matching::{assemble_multi, distance_matrix, DistanceMatrix, DistanceScoreParams, MatchingVariant};
use crate::real::{sigmoid, Real};
use crate::templates::{bank_init, bank_step, InertiaParams, TemplateBank};

/// Score channels followed by the two channels of the previous mask.
pub const READOUT_INPUTS: usize = SCORE_CHANNELS + 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub feature_dim: usize,
    pub stride: usize,
    pub patch_radius: usize,
    pub projection_seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            stride: 4,
            patch_radius: 1,
            projection_seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::Config(format!("feature_dim {} is below 2", self.feature_dim)));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(())
    }

    /// Length of the raw per-cell descriptor: neighbourhood mean colours plus two gradients.
    pub fn raw_dim(&self) -> usize {
        let side = 2 * self.patch_radius + 1;
        3 * side * side + 2
    }

    /// Feature grid size for a frame of `height x width` pixels.
    pub fn grid_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(self.stride), width.div_ceil(self.stride))
    }
}

/// Fixed random-projection patch embedder.
#[derive(Debug, Clone)]
pub struct Embedder {
    cfg: EmbedderConfig,
    /// Row-major `feature_dim x raw_dim`.
    projection: Vec<f64>,
}

impl Embedder {
    pub fn new(cfg: &EmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.projection_seed);
        let projection = (0..cfg.feature_dim * cfg.raw_dim())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            projection,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    pub fn embed<T: Real>(&self, frame: &RgbImage) -> Result<FeatureGrid<T>> {
        let s = self.cfg.stride;
        let (h0, w0) = (frame.height(), frame.width());
        if h0 < s || w0 < s {
            return Err(Error::InvalidInput(format!(
                "frame {h0}x{w0} is smaller than the stride {s}"
            )));
        }
        let (h, w) = self.cfg.grid_dims(h0, w0);

        // Cell means with edge replication, centred on zero.
        let mut cells = vec![[0.0f64; 3]; h * w];
        let norm = 1.0 / (255.0 * (s * s) as f64);
        for gy in 0..h {
            for gx in 0..w {
                let mut acc = [0u32; 3];
                for dy in 0..s {
                    let y = (gy * s + dy).min(h0 - 1);
                    for dx in 0..s {
                        let px = frame.get(y, (gx * s + dx).min(w0 - 1));
                        for k in 0..3 {
                            acc[k] += u32::from(px[k]);
                        }
                    }
                }
                cells[gy * w + gx] = acc.map(|v| v as f64 * norm - 0.5);
            }
        }
        let luma: Vec<f64> = cells
            .iter()
            .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
            .collect();
        let at = |y: isize, x: isize| -> usize {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            y * w + x
        };

        let (c_out, raw_dim) = (self.cfg.feature_dim, self.cfg.raw_dim());
        let r = self.cfg.patch_radius as isize;
        let n = h * w;
        let mut raw = vec![0.0f64; raw_dim];
        let mut col = vec![0.0f64; c_out];
        let mut data = vec![T::zero(); c_out * n];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut k = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        raw[k..k + 3].copy_from_slice(&cells[at(y + dy, x + dx)]);
                        k += 3;
                    }
                }
                raw[k] = 0.5 * (luma[at(y, x + 1)] - luma[at(y, x - 1)]).abs();
                raw[k + 1] = 0.5 * (luma[at(y + 1, x)] - luma[at(y - 1, x)]).abs();
                for (o, row) in col.iter_mut().zip(self.projection.chunks_exact(raw_dim)) {
                    *o = row.iter().zip(&raw).map(|(a, b)| a * b).sum();
                }
                let len = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                let p = y as usize * w + x as usize;
                if len >= crate::grid::NORM_EPS {
                    for (c, v) in col.iter().enumerate() {
                        data[c * n + p] = T::lit(v / len);
                    }
                }
            }
        }
        Ok(FeatureGrid::new(c_out, h, w, data)?.mark_normalized())
    }
}

/// Embeds one frame; see [`Embedder`] to reuse the projection across frames.
pub fn embed_frame<T: Real>(frame: &RgbImage, cfg: &EmbedderConfig) -> Result<FeatureGrid<T>> {
    Embedder::new(cfg)?.embed(frame)
}

/// Per-pixel affine map from the readout inputs to two class logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadoutParams<T = f32> {
    /// Row-major `2 x READOUT_INPUTS`; row 0 is background, row 1 foreground.
    pub weight: [T; 2 * READOUT_INPUTS],
    pub bias: [T; 2],
}

impl<T: Real> ReadoutParams<T> {
    pub fn zeros() -> Self {
        Self {
            weight: [T::zero(); 2 * READOUT_INPUTS],
            bias: [T::zero(); 2],
        }
    }

    /// Each class row weighs its own score channels and previous-mask channel.
    pub fn from_gains(global: f64, local: f64, coarse: f64, previous: f64) -> Self {
        let mut p = Self::zeros();
        let gain = |ch: ScoreChannel| match ch {
            ScoreChannel::GlobalBg | ScoreChannel::GlobalFg => global,
            ScoreChannel::LocalBg | ScoreChannel::LocalFg => local,
            _ => coarse,
        };
        for ch in ScoreChannel::ALL {
            let row = ch.index() % 2;
            p.weight[row * READOUT_INPUTS + ch.index()] = T::lit(gain(ch));
        }
        p.weight[SCORE_CHANNELS] = T::lit(previous);
        p.weight[READOUT_INPUTS + SCORE_CHANNELS + 1] = T::lit(previous);
        p
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ReadoutParams<U> {
        ReadoutParams {
            weight: self.weight.map(|v| v.cast()),
            bias: self.bias.map(|v| v.cast()),
        }
    }
}

impl<T: Real> Default for ReadoutParams<T> {
    fn default() -> Self {
        Self::from_gains(16.0, 16.0, 1.0, 0.0)
    }
}

/// Foreground-minus-background logit at one position.
pub(crate) fn readout_margin<T: Real>(inputs: &[T; READOUT_INPUTS], p: &ReadoutParams<T>) -> T {
    let (bg, fg) = p.weight.split_at(READOUT_INPUTS);
    let mut l = p.bias[1] - p.bias[0];
    for ((&x, &wb), &wf) in inputs.iter().zip(bg).zip(fg) {
        l = l + (wf - wb) * x;
    }
    l
}

/// Gathers `[z; m_prev]` at position `q`.
pub(crate) fn readout_inputs<T: Real>(z: &ScoreStack<T>, m_prev: &ProbMask<T>, q: usize) -> [T; READOUT_INPUTS] {
    let n = z.positions();
    let mut v = [T::zero(); READOUT_INPUTS];
    for (k, slot) in v.iter_mut().take(SCORE_CHANNELS).enumerate() {
        *slot = z.data()[k * n + q];
    }
    v[SCORE_CHANNELS] = m_prev.bg()[q];
    v[SCORE_CHANNELS + 1] = m_prev.fg()[q];
    v
}

/// Per-pixel two-class softmax of the affine readout.
pub fn readout<T: Real>(z: &ScoreStack<T>, m_prev: &ProbMask<T>, p: &ReadoutParams<T>) -> Result<ProbMask<T>> {
    if z.height() != m_prev.height() || z.width() != m_prev.width() {
        return Err(Error::shape(format!(
            "scores are {}x{} but the previous mask is {}x{}",
            z.height(),
            z.width(),
            m_prev.height(),
            m_prev.width()
        )));
    }
    let n = z.positions();
    let mut fg = Vec::with_capacity(n);
    for q in 0..n {
        fg.push(sigmoid(readout_margin(&readout_inputs(z, m_prev, q), p)));
    }
    let bg = fg.iter().map(|&f| T::one() - f).collect();
    Ok(ProbMask::from_parts_unchecked(z.height(), z.width(), bg, fg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Background scores `prod(1 - p_o)`; the label is the argmax, ties to the lower id.
    #[default]
    SoftProduct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig<T = f32> {
    pub embedder: EmbedderConfig,
    pub distance: DistanceScoreParams<T>,
    pub inertia: InertiaParams<T>,
    pub readout: ReadoutParams<T>,
    pub variant: MatchingVariant,
    pub aggregation: Aggregation,
}

impl<T: Real> TrackerConfig<T> {
    /// Distance scoring that decays from 0.5 at zero offset to about 0.18 five cells away.
    pub fn default_distance() -> DistanceScoreParams<T> {
        DistanceScoreParams {
            w1: T::one(),
            w2: T::lit(-0.3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.embedder.validate()?;
        let scalars = [
            self.distance.w1,
            self.distance.w2,
            self.inertia.a_short_bg,
            self.inertia.a_short_fg,
            self.inertia.a_long_bg,
            self.inertia.a_long_fg,
        ];
        if !scalars.iter().all(|v| v.is_finite()) || !self.readout.is_finite() {
            return Err(Error::Config("tracker parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> TrackerConfig<U> {
        TrackerConfig {
            embedder: self.embedder.clone(),
            distance: self.distance.cast(),
            inertia: self.inertia.cast(),
            readout: self.readout.cast(),
            variant: self.variant,
            aggregation: self.aggregation,
        }
    }
}

impl<T: Real> Default for TrackerConfig<T> {
    fn default() -> Self {
        Self {
            embedder: EmbedderConfig::default(),
            distance: Self::default_distance(),
            inertia: InertiaParams::default(),
            readout: ReadoutParams::default(),
            variant: MatchingVariant::default(),
            aggregation: Aggregation::default(),
        }
    }
}

/// One frame for several object chains that share the query features.
pub(crate) fn step_chains<T: Real>(
    banks: &[&TemplateBank<T>],
    m_prev: &[&ProbMask<T>],
    x: Arc<FeatureGrid<T>>,
    dm: &DistanceMatrix<T>,
    cfg: &TrackerConfig<T>,
) -> Result<Vec<(ProbMask<T>, TemplateBank<T>)>> {
    let assembled = assemble_multi(banks, &x, dm, &cfg.distance, cfg.variant, false)?;
    banks
        .iter()
        .zip(m_prev)
        .zip(assembled)
        .map(|((bank, m), a)| {
            let pred = readout(&a.scores, m, &cfg.readout)?;
            let next = bank_step(bank, Arc::clone(&x), &pred, &cfg.inertia)?;
            Ok((pred, next))
        })
        .collect()
}

/// Embeds `frame`, scores it against `bank`, reads out a mask and ingests it.
pub fn track_step<T: Real>(
    bank: &TemplateBank<T>,
    frame: &RgbImage,
    m_prev: &ProbMask<T>,
    cfg: &TrackerConfig<T>,
) -> Result<(ProbMask<T>, TemplateBank<T>)> {
    cfg.validate()?;
    let x = Arc::new(embed_frame::<T>(frame, &cfg.embedder)?);
    let dm = distance_matrix(x.height(), x.width())?;
    let mut out = step_chains(&[bank], &[m_prev], x, &dm, cfg)?;
    Ok(out.pop().expect("one chain"))
}

/// Label map at feature resolution from per-object foreground probabilities.
pub fn aggregate_multi_object<T: Real>(
    height: usize,
    width: usize,
    ids: &[u8],
    per_object_fg: &[&[T]],
) -> Result<LabelMask> {
    if ids.len() != per_object_fg.len() {
        return Err(Error::shape(format!(
            "{} object ids for {} probability maps",
            ids.len(),
            per_object_fg.len()
        )));
    }
    let n = height * width;
    if let Some(bad) = per_object_fg.iter().position(|m| m.len() != n) {
        return Err(Error::shape(format!("probability map {bad} is not {height}x{width}")));
    }
    // Ties resolve toward the lower id, with background lowest of all.
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&k| ids[k]);
    let mut labels = vec![0u8; n];
    for (q, label) in labels.iter_mut().enumerate() {
        let mut best = per_object_fg
            .iter()
            .fold(T::one(), |acc, m| acc * (T::one() - m[q]));
        for &k in &order {
            if per_object_fg[k][q] > best {
                best = per_object_fg[k][q];
                *label = ids[k];
            }
        }
    }
    LabelMask::new(height, width, labels)
}

/// Per-frame foreground probabilities of every object, at feature resolution.
#[derive(Debug, Clone)]
pub struct SequenceProbabilities<T = f32> {
    pub ids: Vec<u8>,
    pub grid: (usize, usize),
    /// `fg[t][k]` is object `ids[k]` at frame `t`; frame 0 holds the given masks.
    pub fg: Vec<Vec<Vec<T>>>,
}

/// Runs one independent chain per object and returns the soft predictions.
pub fn track_probabilities<T: Real>(
    frames: &[RgbImage],
    init_mask: &LabelMask,
    cfg: &TrackerConfig<T>,
) -> Result<SequenceProbabilities<T>> {
    cfg.validate()?;
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("no frames to track".into()))?;
    if init_mask.height() != first.height() || init_mask.width() != first.width() {
        return Err(Error::shape(format!(
            "init mask is {}x{} but frame 0 is {}x{}",
            init_mask.height(),
            init_mask.width(),
            first.height(),
            first.width()
        )));
    }
    let embedder = Embedder::new(&cfg.embedder)?;
    let grid = cfg.embedder.grid_dims(first.height(), first.width());
    let ids: Vec<u8> = init_mask.object_ids().into_iter().collect();
    let mut out = SequenceProbabilities {
        ids: ids.clone(),
        grid,
        fg: Vec::with_capacity(frames.len()),
    };
    if ids.is_empty() {
        return Ok(out);
    }

    let x0 = Arc::new(embedder.embed::<T>(first)?);
    let dm = distance_matrix(grid.0, grid.1)?;
    let mut prev = Vec::with_capacity(ids.len());
    let mut banks = Vec::with_capacity(ids.len());
    for &id in &ids {
        let m0 = downsample_mask::<T>(init_mask, id, cfg.embedder.stride)?;
        banks.push(bank_init(Arc::clone(&x0), &m0)?);
        prev.push(m0);
    }
    out.fg.push(prev.iter().map(|m| m.fg().to_vec()).collect());

    for (t, frame) in frames.iter().enumerate().skip(1) {
        if frame.height() != first.height() || frame.width() != first.width() {
            return Err(Error::shape(format!("frame {t} differs in size from frame 0")));
        }
        let x = Arc::new(embedder.embed::<T>(frame)?);
        let bank_refs: Vec<_> = banks.iter().collect();
        let prev_refs: Vec<_> = prev.iter().collect();
        let stepped = step_chains(&bank_refs, &prev_refs, x, &dm, cfg)?;
        let (preds, next): (Vec<_>, Vec<_>) = stepped.into_iter().unzip();
        out.fg.push(preds.iter().map(|m| m.fg().to_vec()).collect());
        prev = preds;
        banks = next;
    }
    Ok(out)
}

/// Segments every frame given the labelled first frame.
pub fn track_sequence<T: Real>(frames: &[RgbImage], init_mask: &LabelMask, cfg: &TrackerConfig<T>) -> Result<Vec<LabelMask>> {
    let probs = track_probabilities(frames, init_mask, cfg)?;
    let (h0, w0) = (init_mask.height(), init_mask.width());
    if probs.ids.is_empty() {
        let mut masks = vec![init_mask.clone()];
        masks.resize(frames.len(), LabelMask::background(h0, w0)?);
        return Ok(masks);
    }
    let (h, w) = probs.grid;
    let mut masks = Vec::with_capacity(frames.len());
    masks.push(init_mask.clone());
    for maps in probs.fg.iter().skip(1) {
        let refs: Vec<&[T]> = maps.iter().map(Vec::as_slice).collect();
        let coarse = aggregate_multi_object(h, w, &probs.ids, &refs)?;
        masks.push(coarse.upsample_nearest(cfg.embedder.stride, h0, w0));
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalio::{region_accuracy, synth_sequence, SynthSceneConfig};
    use crate::grid::Class;
    use crate::matching::{Locality, TemplateSet};

    fn frame(seed: u8) -> RgbImage {
        let data = (0..24 * 20 * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        RgbImage::new(24, 20, data).unwrap()
    }

    #[test]
    fn embedding_is_deterministic_and_unit_norm() {
        let cfg = EmbedderConfig::default();
        let a: FeatureGrid<f32> = embed_frame(&frame(1), &cfg).unwrap();
        let b: FeatureGrid<f32> = embed_frame(&frame(1), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.channels(), a.height(), a.width()), (32, 6, 5));
        a.check_invariants().unwrap();
        for p in 0..a.positions() {
            let n: f32 = a.column(p).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-5);
        }
        let other = EmbedderConfig {
            projection_seed: 9,
            ..cfg
        };
        assert_ne!(a, embed_frame::<f32>(&frame(1), &other).unwrap());
    }

    #[test]
    fn identical_neighbourhoods_give_identical_columns() {
        let mut img = RgbImage::filled(16, 24, [90, 90, 90]).unwrap();
        for (y0, x0) in [(4, 0), (4, 12)] {
            for y in y0..y0 + 4 {
                for x in x0 + 4..x0 + 8 {
                    img.set(y, x, [200, 10, 10]);
                }
            }
        }
        let g: FeatureGrid<f64> = embed_frame(&img, &EmbedderConfig::default()).unwrap();
        assert_eq!(g.column(g.width() + 1), g.column(g.width() + 4));
    }

    #[test]
    fn frame_smaller_than_stride_rejected() {
        let img = RgbImage::filled(3, 8, [0, 0, 0]).unwrap();
        assert!(embed_frame::<f32>(&img, &EmbedderConfig::default()).is_err());
        let bad = EmbedderConfig {
            feature_dim: 1,
            ..EmbedderConfig::default()
        };
        assert!(embed_frame::<f32>(&frame(0), &bad).is_err());
    }

    #[test]
    fn readout_examples() {
        let z = ScoreStack::<f64>::zeros(2, 3);
        let m = ProbMask::from_fg(2, 3, vec![0.3; 6]).unwrap();
        let uniform = readout(&z, &m, &ReadoutParams::zeros()).unwrap();
        assert!(uniform.fg().iter().chain(uniform.bg()).all(|&v| v == 0.5));
        let mut p = ReadoutParams::zeros();
        p.bias = [0.0, 10.0];
        let sat = readout(&z, &m, &p).unwrap();
        assert!(sat.fg().iter().all(|&v| v > 0.9999));
        let p = ReadoutParams::<f64>::default();
        let out = readout(&z, &m, &p).unwrap();
        for q in 0..6 {
            assert!((out.bg()[q] + out.fg()[q] - 1.0).abs() < 1e-12);
        }
        let wrong = ProbMask::from_fg(3, 2, vec![0.3; 6]).unwrap();
        assert!(readout(&z, &wrong, &p).is_err());
    }

    #[test]
    fn readout_matches_explicit_softmax() {
        let mut z = ScoreStack::<f64>::zeros(1, 2);
        for (k, ch) in ScoreChannel::ALL.iter().enumerate() {
            z.channel_mut(*ch).copy_from_slice(&[0.1 * k as f64, -0.05 * k as f64]);
        }
        let m = ProbMask::from_fg(1, 2, vec![0.25, 0.8]).unwrap();
        let mut p = ReadoutParams::<f64>::zeros();
        for (i, w) in p.weight.iter_mut().enumerate() {
            *w = ((i * 7) % 11) as f64 * 0.1 - 0.5;
        }
        p.bias = [0.3, -0.2];
        let out = readout(&z, &m, &p).unwrap();
        for q in 0..2 {
            let mut input: Vec<f64> = ScoreChannel::ALL.iter().map(|&ch| z.channel(ch)[q]).collect();
            input.push(m.bg()[q]);
            input.push(m.fg()[q]);
            let logit = |row: usize| {
                p.bias[row] + (0..READOUT_INPUTS).map(|i| p.weight[row * READOUT_INPUTS + i] * input[i]).sum::<f64>()
            };
            let (l0, l1) = (logit(0), logit(1));
            let want = l1.exp() / (l0.exp() + l1.exp());
            assert!((out.fg()[q] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_rules() {
        let l = aggregate_multi_object::<f64>(1, 1, &[4], &[&[0.9]]).unwrap();
        assert_eq!(l.labels(), &[4]);
        let l = aggregate_multi_object::<f64>(1, 2, &[1, 2], &[&[0.0, 0.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(l.labels(), &[0, 0]);
        let l = aggregate_multi_object::<f64>(1, 1, &[2, 1], &[&[0.8], &[0.8]]).unwrap();
        assert_eq!(l.labels(), &[1]);
        // Background (0.5) ties with the object and wins.
        let l = aggregate_multi_object::<f64>(1, 1, &[1], &[&[0.5]]).unwrap();
        assert_eq!(l.labels(), &[0]);
        assert!(aggregate_multi_object::<f64>(1, 2, &[1], &[&[0.5]]).is_err());
    }

    #[test]
    fn static_scene_step_recovers_init_mask() {
        let seq = synth_sequence(&SynthSceneConfig::static_scene(2)).unwrap();
        let cfg = TrackerConfig::<f64> {
            readout: ReadoutParams::from_gains(40.0, 120.0, 10.0, 20.0),
            ..TrackerConfig::default()
        };
        let x0 = Arc::new(embed_frame::<f64>(&seq.frames[0], &cfg.embedder).unwrap());
        let m0 = downsample_mask::<f64>(&seq.masks[0], 1, cfg.embedder.stride).unwrap();
        let bank = bank_init(x0, &m0).unwrap();
        let (pred, next) = track_step(&bank, &seq.frames[1], &m0, &cfg).unwrap();
        assert_eq!(next.frame_index, bank.frame_index + 1);
        assert!(pred.fg().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let want: Vec<bool> = m0.fg().iter().map(|&v| v >= 0.5).collect();
        let got = pred.hard_fg();
        let inter = want.iter().zip(&got).filter(|(a, b)| **a && **b).count();
        let union = want.iter().zip(&got).filter(|(a, b)| **a || **b).count();
        assert!(inter as f64 / union as f64 >= 0.99, "{inter}/{union}");
        let _ = Class::Foreground;
    }

    #[test]
    fn single_frame_and_empty_object_set() {
        let seq = synth_sequence(&SynthSceneConfig::static_scene(0)).unwrap();
        let cfg = TrackerConfig::<f32>::default();
        let out = track_sequence(&seq.frames[..1], &seq.masks[0], &cfg).unwrap();
        assert_eq!(out, vec![seq.masks[0].clone()]);
        let empty = LabelMask::background(seq.height(), seq.width()).unwrap();
        let out = track_sequence(&seq.frames[..3], &empty, &cfg).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|m| m.object_ids().is_empty()));
    }

    #[test]
    fn tracking_is_deterministic_and_passes_frame_zero_through() {
        let cfg_scene = SynthSceneConfig {
            objects: 2,
            distractors: 1,
            seed: 4,
            ..SynthSceneConfig::default()
        };
        let seq = synth_sequence(&cfg_scene).unwrap();
        let cfg = TrackerConfig::<f32>::default();
        let a = track_sequence(&seq.frames, &seq.masks[0], &cfg).unwrap();
        let b = track_sequence(&seq.frames, &seq.masks[0], &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], seq.masks[0]);
        assert_eq!(a.len(), seq.len());
    }

    #[test]
    fn translating_square_is_tracked() {
        let seq = synth_sequence(&SynthSceneConfig::translating_square(0)).unwrap();
        let out = track_sequence(&seq.frames, &seq.masks[0], &TrackerConfig::<f32>::default()).unwrap();
        let j: f64 = (1..seq.len())
            .map(|t| region_accuracy(&out[t], &seq.masks[t], 1).unwrap())
            .sum::<f64>()
            / (seq.len() - 1) as f64;
        assert!(j >= 0.9, "mean J {j}");
    }

    #[test]
    fn distance_scoring_prefers_the_true_object() {
        let seq = synth_sequence(&SynthSceneConfig::distractor_scene(1)).unwrap();
        let base = TrackerConfig::<f64> {
            variant: MatchingVariant {
                templates: TemplateSet::FineAndCoarse,
                locality: Locality::DistanceScoring,
            },
            ..TrackerConfig::default()
        };
        let target = seq.masks[1].labels().iter().position(|&l| l == 1).unwrap();
        let grid_w = base.embedder.grid_dims(seq.height(), seq.width()).1;
        let cell = |p: usize| (p / seq.width() / 4) * grid_w + (p % seq.width()) / 4;
        let colour = seq.frames[1].data()[3 * target..3 * target + 3].to_vec();
        let distractor = (0..seq.height() * seq.width())
            .find(|&p| seq.masks[1].labels()[p] == 0 && seq.frames[1].data()[3 * p..3 * p + 3] == colour[..])
            .unwrap();
        let probs = track_probabilities(&seq.frames[..2], &seq.masks[0], &base).unwrap();
        let fg = &probs.fg[1][0];
        assert!(fg[cell(target)] >= fg[cell(distractor)]);
    }
}
