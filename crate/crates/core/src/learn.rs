//! Training of the distance-scoring weights, inertia pre-activations and readout.
//!
//! The loss is pixel-wise cross-entropy over clips tracked from their first
//! frame. Gradients are exact adjoints of the unrolled tracker, including the
//! template-bank recursions and the distance score inside the local max. The
//! max passes its gradient to the first row-major maximizer only.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{maybe_augment, TrainingSequence};
use crate::error::{Error, Result};
use crate::grid::{dot, downsample_mask, LabelMask, RgbImage, norm, normalize_vec, Class, FeatureGrid, ProbMask, NORM_EPS, SCORE_CHANNELS};
use crate::matching::{assemble_multi, distance_matrix, DistanceMatrix, DistanceScoreParams, Locality, MatchingVariant};
use crate::real::sigmoid;
use crate::templates::{bank_init, bank_step, class_sum, overall_inertia, InertiaParams, TemplateBank};
use crate::tracker::{readout, readout_inputs, Embedder, EmbedderConfig, ReadoutParams, TrackerConfig, READOUT_INPUTS};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the log.
pub const PROB_CLAMP: f64 = 1e-7;

/// w1, w2, four inertia pre-activations, the readout matrix and bias.
pub const PARAM_COUNT: usize = 6 + 2 * READOUT_INPUTS + 2;

const W_OFFSET: usize = 6;
const B_OFFSET: usize = W_OFFSET + 2 * READOUT_INPUTS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainableParams {
    pub distance: DistanceScoreParams<f64>,
    pub inertia: InertiaParams<f64>,
    pub readout: ReadoutParams<f64>,
}

impl Default for TrainableParams {
    fn default() -> Self {
        Self::initial()
    }
}

impl TrainableParams {
    /// Starting point of training: a flat distance score (`w1 = 1`, `w2 = 0`),
    /// inertia pre-activations -1 (short) and +1 (long), and the default readout.
    pub fn initial() -> Self {
        Self {
            distance: DistanceScoreParams { w1: 1.0, w2: 0.0 },
            inertia: InertiaParams::default(),
            readout: ReadoutParams::default(),
        }
    }

    /// The built-in inference parameters of the tracker.
    pub fn tracker_default() -> Self {
        let cfg = TrackerConfig::<f64>::default();
        Self {
            distance: cfg.distance,
            inertia: cfg.inertia,
            readout: cfg.readout,
        }
    }

    /// Names of the flat parameter vector entries, in order.
    pub fn names() -> Vec<String> {
        let mut names: Vec<String> = ["w1", "w2", "a_short_bg", "a_short_fg", "a_long_bg", "a_long_fg"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for row in 0..2 {
            for i in 0..READOUT_INPUTS {
                names.push(format!("readout_weight[{row}][{i}]"));
            }
        }
        names.push("readout_bias[0]".into());
        names.push("readout_bias[1]".into());
        names
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![
            self.distance.w1,
            self.distance.w2,
            self.inertia.a_short_bg,
            self.inertia.a_short_fg,
            self.inertia.a_long_bg,
            self.inertia.a_long_fg,
        ];
        v.extend_from_slice(&self.readout.weight);
        v.extend_from_slice(&self.readout.bias);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != PARAM_COUNT {
            return Err(Error::InvalidArgument(format!(
                "expected {PARAM_COUNT} parameters, got {}",
                v.len()
            )));
        }
        let mut readout = ReadoutParams::zeros();
        readout.weight.copy_from_slice(&v[W_OFFSET..B_OFFSET]);
        readout.bias.copy_from_slice(&v[B_OFFSET..]);
        Ok(Self {
            distance: DistanceScoreParams { w1: v[0], w2: v[1] },
            inertia: InertiaParams {
                a_short_bg: v[2],
                a_short_fg: v[3],
                a_long_bg: v[4],
                a_long_fg: v[5],
            },
            readout,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    pub fn tracker_config(&self, embedder: &EmbedderConfig, variant: MatchingVariant) -> TrackerConfig<f64> {
        TrackerConfig {
            embedder: embedder.clone(),
            distance: self.distance,
            inertia: self.inertia,
            readout: self.readout,
            variant,
            ..TrackerConfig::default()
        }
    }
}

/// On-disk parameter document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub w1: f64,
    pub w2: f64,
    pub a_short_bg: f64,
    pub a_short_fg: f64,
    pub a_long_bg: f64,
    pub a_long_fg: f64,
    /// Row-major `2 x 12`.
    pub readout_weight: Vec<f64>,
    pub readout_bias: Vec<f64>,
    pub embedder_seed: u64,
    pub feature_dim: usize,
    pub stride: usize,
}

impl ParamsFile {
    pub fn new(params: &TrainableParams, embedder: &EmbedderConfig) -> Self {
        Self {
            w1: params.distance.w1,
            w2: params.distance.w2,
            a_short_bg: params.inertia.a_short_bg,
            a_short_fg: params.inertia.a_short_fg,
            a_long_bg: params.inertia.a_long_bg,
            a_long_fg: params.inertia.a_long_fg,
            readout_weight: params.readout.weight.to_vec(),
            readout_bias: params.readout.bias.to_vec(),
            embedder_seed: embedder.projection_seed,
            feature_dim: embedder.feature_dim,
            stride: embedder.stride,
        }
    }

    /// Validated parameters and embedder settings.
    pub fn split(&self) -> Result<(TrainableParams, EmbedderConfig)> {
        if self.readout_weight.len() != 2 * READOUT_INPUTS || self.readout_bias.len() != 2 {
            return Err(Error::Config(format!(
                "readout_weight needs {} entries and readout_bias 2, got {} and {}",
                2 * READOUT_INPUTS,
                self.readout_weight.len(),
                self.readout_bias.len()
            )));
        }
        let mut flat = vec![
            self.w1,
            self.w2,
            self.a_short_bg,
            self.a_short_fg,
            self.a_long_bg,
            self.a_long_fg,
        ];
        flat.extend_from_slice(&self.readout_weight);
        flat.extend_from_slice(&self.readout_bias);
        let params = TrainableParams::from_slice(&flat)?;
        if !params.is_finite() {
            return Err(Error::Config("parameters must be finite".into()));
        }
        let embedder = EmbedderConfig {
            feature_dim: self.feature_dim,
            stride: self.stride,
            projection_seed: self.embedder_seed,
            ..EmbedderConfig::default()
        };
        embedder.validate()?;
        Ok((params, embedder))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad parameter document: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Mean of `-log p_true` over pixels and frames, skipping the given frame 0.
pub fn cross_entropy_loss(pred: &[ProbMask<f64>], gt: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} predicted frames but {} label frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidInput("loss needs at least one frame after frame 0".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, (p, g)) in pred.iter().zip(gt).enumerate().skip(1) {
        if p.positions() != g.len() {
            return Err(Error::shape(format!("frame {t}: prediction and labels differ in size")));
        }
        total += frame_nll(p, g);
        count += g.len();
    }
    Ok(total / count as f64)
}

fn frame_nll(p: &ProbMask<f64>, gt: &[bool]) -> f64 {
    gt.iter()
        .enumerate()
        .map(|(q, &y)| {
            let pt = if y { p.fg()[q] } else { p.bg()[q] };
            -pt.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
        })
        .sum()
}

/// A clip reduced to what the loss needs: features, the first-frame mask and labels.
#[derive(Debug, Clone)]
pub struct Clip {
    pub features: Vec<Arc<FeatureGrid<f64>>>,
    pub m0: ProbMask<f64>,
    /// Foreground indicator per frame at feature resolution (downsampled area >= 0.5).
    pub gt: Vec<Vec<bool>>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub fn prepare_clip(seq: &TrainingSequence, object_id: u8, embedder: &Embedder) -> Result<Clip> {
    if seq.len() < 2 {
        return Err(Error::InvalidInput("training clips need at least 2 frames".into()));
    }
    let stride = embedder.config().stride;
    let features = seq
        .frames
        .iter()
        .map(|f| embedder.embed::<f64>(f).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    let soft = seq
        .masks
        .iter()
        .map(|m| downsample_mask::<f64>(m, object_id, stride))
        .collect::<Result<Vec<_>>>()?;
    let gt = soft.iter().map(|m| m.fg().iter().map(|&v| v >= 0.5).collect()).collect();
    Ok(Clip {
        features,
        m0: soft.into_iter().next().expect("non-empty"),
        gt,
    })
}

struct FrameRecord {
    /// Bank consumed at this frame (built from frames before it).
    bank: TemplateBank<f64>,
    scores: crate::grid::ScoreStack<f64>,
    local_arg: Option<[Vec<usize>; 2]>,
}

struct Forward {
    nll: f64,
    preds: Vec<ProbMask<f64>>,
    records: Vec<FrameRecord>,
}

fn check_clip(clip: &Clip) -> Result<()> {
    if clip.len() < 2 || clip.gt.len() != clip.len() {
        return Err(Error::InvalidInput("clip needs at least 2 frames and one label map per frame".into()));
    }
    Ok(())
}

fn forward(p: &TrainableParams, clip: &Clip, variant: MatchingVariant, dm: &DistanceMatrix<f64>, keep: bool) -> Result<Forward> {
    check_clip(clip)?;
    let t_len = clip.len();
    let mut bank = bank_init(Arc::clone(&clip.features[0]), &clip.m0)?;
    let mut preds = vec![clip.m0.clone()];
    let mut records = Vec::with_capacity(if keep { t_len } else { 0 });
    let mut nll = 0.0;
    for t in 1..t_len {
        let x = &clip.features[t];
        let mut a = assemble_multi(&[&bank], x, dm, &p.distance, variant, keep)?;
        let a = a.pop().expect("one bank");
        let pred = readout(&a.scores, &preds[t - 1], &p.readout)?;
        if pred.fg().iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                frame: t,
                message: "non-finite prediction".into(),
            });
        }
        nll += frame_nll(&pred, &clip.gt[t]);
        let next = if t + 1 < t_len {
            Some(bank_step(&bank, Arc::clone(x), &pred, &p.inertia)?)
        } else {
            None
        };
        if keep {
            records.push(FrameRecord {
                bank: bank.clone(),
                scores: a.scores,
                local_arg: a.local_arg,
            });
        }
        preds.push(pred);
        if let Some(next) = next {
            bank = next;
        }
    }
    if !nll.is_finite() {
        return Err(Error::Training {
            frame: t_len - 1,
            message: "non-finite loss".into(),
        });
    }
    Ok(Forward { nll, preds, records })
}

fn clip_dm(clip: &Clip) -> Result<DistanceMatrix<f64>> {
    let x = &clip.features[0];
    distance_matrix(x.height(), x.width())
}

fn clip_positions(clip: &Clip) -> usize {
    clip.features[0].positions()
}

/// Loss of one clip.
pub fn clip_loss(p: &TrainableParams, clip: &Clip, variant: MatchingVariant) -> Result<f64> {
    let f = forward(p, clip, variant, &clip_dm(clip)?, false)?;
    Ok(f.nll / ((clip.len() - 1) * clip_positions(clip)) as f64)
}

/// Soft predictions of one clip, frame 0 being the given mask.
pub fn clip_predictions(p: &TrainableParams, clip: &Clip, variant: MatchingVariant) -> Result<Vec<ProbMask<f64>>> {
    Ok(forward(p, clip, variant, &clip_dm(clip)?, false)?.preds)
}

/// Adjoints of the coarse prototypes and area sums of one bank.
#[derive(Clone)]
struct BankAdjoint {
    /// `[overall, short, long][class]`.
    proto: [[Vec<f64>; 2]; 3],
    area: [f64; 2],
}

impl BankAdjoint {
    fn zeros(c: usize) -> Self {
        let z = || [vec![0.0; c], vec![0.0; c]];
        Self {
            proto: [z(), z(), z()],
            area: [0.0; 2],
        }
    }
}

/// Backward of `N(v)`: `(gy - y (y . gy)) / |v|`, zero for a vanishing `v`.
fn normalize_backward(v: &[f64], gy: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n < NORM_EPS {
        return vec![0.0; v.len()];
    }
    let y: Vec<f64> = v.iter().map(|x| x / n).collect();
    let yg = dot(&y, gy);
    gy.iter().zip(&y).map(|(g, yy)| (g - yy * yg) / n).collect()
}

/// Backward of one `bank_step(prev, x, m)`: adds into `gm` and `grad`, returns
/// the adjoint of `prev`'s prototypes and area sums.
fn bank_step_backward(
    prev: &TemplateBank<f64>,
    x: &FeatureGrid<f64>,
    m: &ProbMask<f64>,
    inertia: &InertiaParams<f64>,
    gnext: &BankAdjoint,
    gm: &mut [Vec<f64>; 2],
    grad: &mut [f64],
) -> Result<BankAdjoint> {
    let c_dim = x.channels();
    let mut gprev = BankAdjoint::zeros(c_dim);
    for class in Class::BOTH {
        let k = class.index();
        let s = class_sum(x, m.channel(class));
        let cur = normalize_vec(&s);
        let a_now = m.area(class);
        let a_prev = prev.area_sum(class);
        let den = a_prev + a_now;
        let mu_o = overall_inertia(a_prev, a_now)?;
        let mu_s = inertia.mu_short(class);
        let mu_l = inertia.mu_long(class);

        let mut gcur = vec![0.0; c_dim];
        let mut ga_prev = gnext.area[k];
        let mut ga_now = gnext.area[k];
        let protos = [prev.overall.get(class), prev.short_term.get(class), prev.long_term.get(class)];
        for (kind, (proto, mu)) in protos.iter().zip([mu_o, mu_s, mu_l]).enumerate() {
            let v: Vec<f64> = proto.iter().zip(&cur).map(|(&a, &b)| mu * a + (1.0 - mu) * b).collect();
            let gv = normalize_backward(&v, &gnext.proto[kind][k]);
            for ((gp, gc), &g) in gprev.proto[kind][k].iter_mut().zip(gcur.iter_mut()).zip(&gv) {
                *gp += mu * g;
                *gc += (1.0 - mu) * g;
            }
            let gmu: f64 = gv.iter().zip(proto.iter().zip(&cur)).map(|(g, (a, b))| g * (a - b)).sum();
            match kind {
                0 => {
                    if den >= NORM_EPS {
                        ga_prev += gmu * a_now / (den * den);
                        ga_now -= gmu * a_prev / (den * den);
                    }
                }
                1 => grad[2 + k] += gmu * mu * (1.0 - mu),
                _ => grad[4 + k] += gmu * mu * (1.0 - mu),
            }
        }
        let gs = normalize_backward(&s, &gcur);
        let n = x.positions();
        for (q, g) in gm[k].iter_mut().enumerate() {
            let mut acc = ga_now;
            for (c, &w) in gs.iter().enumerate() {
                acc += x.data()[c * n + q] * w;
            }
            *g += acc;
        }
        gprev.area[k] = ga_prev;
    }
    Ok(gprev)
}

/// Loss of one clip and its gradient with respect to the flat parameter vector.
pub fn clip_loss_and_grad(p: &TrainableParams, clip: &Clip, variant: MatchingVariant) -> Result<(f64, Vec<f64>)> {
    let dm = clip_dm(clip)?;
    let fwd = forward(p, clip, variant, &dm, true)?;
    let t_len = clip.len();
    let n = clip_positions(clip);
    let c_dim = clip.features[0].channels();
    let scale = 1.0 / ((t_len - 1) * n) as f64;
    let loss = fwd.nll * scale;

    let mut grad = vec![0.0; PARAM_COUNT];
    let mut gm: Vec<[Vec<f64>; 2]> = (0..t_len).map(|_| [vec![0.0; n], vec![0.0; n]]).collect();
    // Adjoint of the bank produced at frame t (consumed at t + 1).
    let mut gbank = BankAdjoint::zeros(c_dim);
    let (wb, wf) = p.readout.weight.split_at(READOUT_INPUTS);
    let DistanceScoreParams { w1, w2 } = p.distance;

    for t in (1..t_len).rev() {
        let rec = &fwd.records[t - 1];
        let pred = &fwd.preds[t];
        let x = &clip.features[t];

        for (q, &y) in clip.gt[t].iter().enumerate() {
            let k = usize::from(y);
            let pt = pred.channel(Class::BOTH[k])[q];
            if pt > PROB_CLAMP && pt < 1.0 - PROB_CLAMP {
                gm[t][k][q] -= scale / pt;
            }
        }

        let gprev = if t + 1 < t_len {
            let (head, tail) = gm.split_at_mut(t + 1);
            let _ = tail;
            bank_step_backward(&rec.bank, x, pred, &p.inertia, &gbank, &mut head[t], &mut grad)?
        } else {
            BankAdjoint::zeros(c_dim)
        };
        let mut gbank_prev = gprev;

        // Readout.
        let mut gz = vec![vec![0.0; n]; SCORE_CHANNELS];
        for q in 0..n {
            let fg = pred.fg()[q];
            let gmar = (gm[t][1][q] - gm[t][0][q]) * fg * (1.0 - fg);
            if gmar == 0.0 {
                continue;
            }
            let inputs = readout_inputs(&rec.scores, &fwd.preds[t - 1], q);
            for i in 0..READOUT_INPUTS {
                grad[W_OFFSET + i] -= gmar * inputs[i];
                grad[W_OFFSET + READOUT_INPUTS + i] += gmar * inputs[i];
                let gi = gmar * (wf[i] - wb[i]);
                if i < SCORE_CHANNELS {
                    gz[i][q] = gi;
                } else {
                    gm[t - 1][i - SCORE_CHANNELS][q] += gi;
                }
            }
            grad[B_OFFSET] -= gmar;
            grad[B_OFFSET + 1] += gmar;
        }

        // Coarse prototypes of the consumed bank.
        if variant.uses_coarse() {
            let xd = x.data();
            for kind in 0..3 {
                for k in 0..2 {
                    let g = &gz[4 + 2 * kind + k];
                    let dst = &mut gbank_prev.proto[kind][k];
                    for (c, d) in dst.iter_mut().enumerate() {
                        *d += dot(g, &xd[c * n..(c + 1) * n]);
                    }
                }
            }
        }

        // Local matching: only the first maximizer receives gradient.
        if variant.uses_fine() {
            let arg = rec.local_arg.as_ref().expect("argmax tracked");
            let reference = &rec.bank.local.features;
            let w = x.width();
            for class in Class::BOTH {
                let k = class.index();
                let g = &gz[2 + k];
                let mask = rec.bank.local.mask.channel(class);
                for q in 0..n {
                    if g[q] == 0.0 {
                        continue;
                    }
                    let pstar = arg[k][q];
                    let sim: f64 = (0..c_dim).map(|c| reference.data()[c * n + pstar] * x.data()[c * n + q]).sum();
                    match variant.locality {
                        Locality::DistanceScoring => {
                            let d = dm.get(pstar, q);
                            let r = (w1 * d).max(0.0);
                            let dd = sigmoid(w2 * r);
                            let ds = dd * (1.0 - dd);
                            gm[t - 1][k][pstar] += g[q] * sim * dd;
                            let gd = g[q] * mask[pstar] * sim;
                            grad[1] += gd * ds * r;
                            if w1 * d > 0.0 {
                                grad[0] += gd * ds * w2 * d;
                            }
                        }
                        Locality::Unrestricted => gm[t - 1][k][pstar] += g[q] * sim,
                        Locality::HardWindow { radius } => {
                            let inside = (pstar / w).abs_diff(q / w) <= radius && (pstar % w).abs_diff(q % w) <= radius;
                            if inside {
                                gm[t - 1][k][pstar] += g[q] * sim;
                            }
                        }
                    }
                }
            }
        }
        gbank = gbank_prev;
    }
    Ok((loss, grad))
}

/// Mean loss over clips.
pub fn batch_loss(p: &TrainableParams, clips: &[Clip], variant: MatchingVariant) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut total = 0.0;
    for c in clips {
        total += clip_loss(p, c, variant)?;
    }
    Ok(total / clips.len() as f64)
}

/// Mean loss over clips and its gradient; clips are reduced in order.
pub fn batch_loss_and_grad(p: &TrainableParams, clips: &[Clip], variant: MatchingVariant) -> Result<(f64, Vec<f64>)> {
    if clips.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; PARAM_COUNT];
    for c in clips {
        let (l, g) = clip_loss_and_grad(p, c, variant)?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let inv = 1.0 / clips.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// Gradient of the batch loss; every sequence is tracked for its label 1.
pub fn grad(p: &TrainableParams, batch: &[TrainingSequence], embedder: &EmbedderConfig, variant: MatchingVariant) -> Result<Vec<f64>> {
    let e = Embedder::new(embedder)?;
    let clips = batch.iter().map(|s| prepare_clip(s, 1, &e)).collect::<Result<Vec<_>>>()?;
    Ok(batch_loss_and_grad(p, &clips, variant)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffEntry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffReport {
    pub step: f64,
    pub entries: Vec<FiniteDiffEntry>,
}

impl FiniteDiffReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.rel_error <= tol)
    }
}

/// Compares `analytic` against central differences of `f` at `x`.
///
/// The error of each entry is `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_report(
    names: &[String],
    x: &[f64],
    analytic: &[f64],
    step: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<FiniteDiffReport> {
    if names.len() != x.len() || analytic.len() != x.len() {
        return Err(Error::InvalidArgument("names, point and gradient lengths differ".into()));
    }
    let mut probe = x.to_vec();
    let mut entries = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        entries.push(FiniteDiffEntry {
            name: names[i].clone(),
            analytic: analytic[i],
            numeric,
            rel_error: (analytic[i] - numeric).abs() / numeric.abs().max(1.0),
        });
    }
    Ok(FiniteDiffReport { step, entries })
}

pub const FINITE_DIFF_STEP: f64 = 1e-3;

/// Checks the analytic gradient of the batch loss against central differences.
pub fn finite_diff_check(p: &TrainableParams, clips: &[Clip], variant: MatchingVariant) -> Result<FiniteDiffReport> {
    let (_, analytic) = batch_loss_and_grad(p, clips, variant)?;
    finite_diff_report(&TrainableParams::names(), &p.to_vec(), &analytic, FINITE_DIFF_STEP, |v| {
        batch_loss(&TrainableParams::from_slice(v)?, clips, variant)
    })
}

/// Central differences are only meaningful where no local-max winner and no
/// probability clamp changes inside `[x - step, x + step]` for any parameter.
pub fn stencil_is_smooth(p: &TrainableParams, clips: &[Clip], variant: MatchingVariant, step: f64) -> Result<bool> {
    let base = kink_signature(p, clips, variant)?;
    let x = p.to_vec();
    let mut probe = x.clone();
    for i in 0..x.len() {
        for dir in [-1.0, 1.0] {
            probe[i] = x[i] + dir * step;
            if kink_signature(&TrainableParams::from_slice(&probe)?, clips, variant)? != base {
                return Ok(false);
            }
        }
        probe[i] = x[i];
    }
    Ok(true)
}

fn kink_signature(p: &TrainableParams, clips: &[Clip], variant: MatchingVariant) -> Result<Vec<usize>> {
    let mut sig = Vec::new();
    for clip in clips {
        let fwd = forward(p, clip, variant, &clip_dm(clip)?, true)?;
        for (t, rec) in fwd.records.iter().enumerate() {
            if let Some(arg) = &rec.local_arg {
                sig.extend(arg.iter().flatten());
            }
            let pred = &fwd.preds[t + 1];
            sig.extend(
                pred.fg()
                    .iter()
                    .map(|&v| usize::from(v > PROB_CLAMP && v < 1.0 - PROB_CLAMP) + 2 * usize::from(v < 1.0 - PROB_CLAMP)),
            );
        }
    }
    Ok(sig)
}

/// A small randomized gradient-check problem.
#[derive(Debug, Clone)]
pub struct MicroInstance {
    pub params: TrainableParams,
    pub clips: Vec<Clip>,
    pub variant: MatchingVariant,
    /// Candidates discarded because a kink fell inside the difference stencil.
    pub redraws: usize,
}

const MICRO_MAX_DRAWS: usize = 1000;

/// Random noise frames, random blob masks and (unless given) random parameters,
/// redrawn until the loss is smooth on the finite-difference stencil.
pub fn micro_instance(
    seed: u64,
    clips: usize,
    variant: MatchingVariant,
    params: Option<&TrainableParams>,
) -> Result<MicroInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for redraws in 0..MICRO_MAX_DRAWS {
        let drawn = random_params(rng.gen());
        let params = *params.unwrap_or(&drawn);
        let cs = (0..clips).map(|_| micro_clip(rng.gen(), 4)).collect::<Result<Vec<_>>>()?;
        if stencil_is_smooth(&params, &cs, variant, FINITE_DIFF_STEP)? {
            return Ok(MicroInstance {
                params,
                clips: cs,
                variant,
                redraws,
            });
        }
    }
    Err(Error::InvalidInput(format!(
        "no smooth micro-instance for seed {seed} in {MICRO_MAX_DRAWS} draws"
    )))
}

/// Random-colour frames and a random blob mask, small enough for exhaustive checks.
fn micro_clip(seed: u64, frames: usize) -> Result<Clip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (16, 16);
    let mut fs = Vec::new();
    let mut ms = Vec::new();
    for _ in 0..frames {
        let data = (0..h * w * 3).map(|_| rng.gen()).collect();
        fs.push(RgbImage::new(h, w, data)?);
        let (y0, x0) = (rng.gen_range(0..8), rng.gen_range(0..8));
        let labels = (0..h * w)
            .map(|i| u8::from((y0..y0 + 7).contains(&(i / w)) && (x0..x0 + 7).contains(&(i % w))))
            .collect();
        ms.push(LabelMask::new(h, w, labels)?);
    }
    let seq = TrainingSequence::from_frames(fs, ms)?;
    let e = Embedder::new(&EmbedderConfig {
        feature_dim: 8,
        projection_seed: seed,
        ..EmbedderConfig::default()
    })?;
    prepare_clip(&seq, 1, &e)
}

fn random_params(seed: u64) -> TrainableParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut v = TrainableParams::initial().to_vec();
    v[0] = rng.gen_range(0.5..1.5);
    v[1] = rng.gen_range(-1.0..-0.1);
    for x in &mut v[2..6] {
        *x += rng.gen_range(-0.5..0.5);
    }
    for x in &mut v[W_OFFSET..] {
        *x = *x * 0.25 + rng.gen_range(-1.0..1.0);
    }
    TrainableParams::from_slice(&v).expect("fixed length")
}


#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update; a non-finite gradient leaves everything untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("parameter, gradient and state lengths differ"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite gradient for parameter {i}")));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Side of the square crop; larger than the frame means the whole frame.
    pub crop: usize,
    pub frames_per_clip: usize,
    pub min_fg_pixels: usize,
    pub batch_size: usize,
    /// Crop redraws per chosen sequence when the first frame shows no object.
    pub crop_retries: usize,
    /// Sequence draws per clip before giving up.
    pub max_attempts: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            crop: 384,
            frames_per_clip: 10,
            min_fg_pixels: 100,
            batch_size: 2,
            crop_retries: 10,
            max_attempts: 100,
        }
    }
}

fn sample_clip(dataset: &[TrainingSequence], cfg: &SampleConfig, rng: &mut ChaCha8Rng) -> Result<TrainingSequence> {
    for _ in 0..cfg.max_attempts {
        let seq = &dataset[rng.gen_range(0..dataset.len())];
        if seq.len() < 2 {
            continue;
        }
        let t_len = cfg.frames_per_clip.clamp(2, seq.len());
        let start = rng.gen_range(0..=seq.len() - t_len);
        let (ch, cw) = (cfg.crop.min(seq.height()), cfg.crop.min(seq.width()));
        for _ in 0..cfg.crop_retries.max(1) {
            let top = rng.gen_range(0..=seq.height() - ch);
            let left = rng.gen_range(0..=seq.width() - cw);
            let first = seq.masks[start].crop(top, left, ch, cw);
            let ids: Vec<u8> = first.object_ids().into_iter().collect();
            if ids.is_empty() {
                continue;
            }
            let target = ids[rng.gen_range(0..ids.len())];
            if first.count(target) < cfg.min_fg_pixels {
                break;
            }
            let mut clip = seq.crop(start, t_len, top, left, ch, cw);
            clip.masks = clip.masks.iter().map(|m| m.binarize(target)).collect();
            clip.object_ids = [1].into();
            return Ok(clip);
        }
    }
    Err(Error::InvalidInput(format!(
        "no clip with a visible object of at least {} pixels in its first frame after {} attempts",
        cfg.min_fg_pixels, cfg.max_attempts
    )))
}

/// Draws `batch_size` clips: joint crops of consecutive frames with one object
/// relabelled 1 and everything else background.
pub fn sample_batch(dataset: &[TrainingSequence], cfg: &SampleConfig, rng_seed: u64) -> Result<Vec<TrainingSequence>> {
    sample_batch_with(dataset, cfg, &mut ChaCha8Rng::seed_from_u64(rng_seed))
}

fn sample_batch_with(dataset: &[TrainingSequence], cfg: &SampleConfig, rng: &mut ChaCha8Rng) -> Result<Vec<TrainingSequence>> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    (0..cfg.batch_size).map(|_| sample_clip(dataset, cfg, rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub sample: SampleConfig,
    pub embedder: EmbedderConfig,
    pub variant: MatchingVariant,
    pub adam: AdamConfig,
    pub steps_per_epoch: usize,
    pub init: TrainableParams,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            sample: SampleConfig::default(),
            embedder: EmbedderConfig::default(),
            variant: MatchingVariant::default(),
            adam: AdamConfig::default(),
            steps_per_epoch: 1,
            init: TrainableParams::initial(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: TrainableParams,
    /// Mean training loss of each epoch, measured before each step's update.
    pub loss_history: Vec<f64>,
    pub steps: usize,
    pub augmented_pairs: usize,
}

/// Sample, augment, differentiate, update; repeated `steps_per_epoch` times per epoch.
pub fn fit(
    dataset: &[TrainingSequence],
    epochs: usize,
    cfg: &FitConfig,
    augment_probability: f64,
    rng_seed: u64,
) -> Result<FitResult> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if !(0.0..=1.0).contains(&augment_probability) {
        return Err(Error::InvalidArgument(format!(
            "augmentation probability {augment_probability} outside [0, 1]"
        )));
    }
    let embedder = Embedder::new(&cfg.embedder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut flat = cfg.init.to_vec();
    let mut adam = AdamState::new(PARAM_COUNT, cfg.adam);
    let mut history = Vec::with_capacity(epochs);
    let mut augmented_pairs = 0;
    for _ in 0..epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let mut batch = sample_batch_with(dataset, &cfg.sample, &mut rng)?;
            for pair in batch.chunks_mut(2) {
                let [a, b] = pair else { continue };
                if a.len() != b.len() || a.height() != b.height() || a.width() != b.width() {
                    continue;
                }
                let out = maybe_augment(a, b, augment_probability, rng.gen())?;
                if out.applied {
                    augmented_pairs += 1;
                    for (dst, src) in [(&mut *a, out.a), (&mut *b, out.b)] {
                        // Pasted objects become background around the designated target.
                        dst.frames = src.frames;
                        dst.masks = src.masks.iter().map(|m| m.binarize(1)).collect();
                    }
                }
            }
            let clips = batch
                .iter()
                .map(|s| prepare_clip(s, 1, &embedder))
                .collect::<Result<Vec<_>>>()?;
            let params = TrainableParams::from_slice(&flat)?;
            let (loss, g) = batch_loss_and_grad(&params, &clips, cfg.variant)?;
            adam_step(&mut flat, &g, &mut adam)?;
            epoch_loss += loss;
        }
        history.push(epoch_loss / cfg.steps_per_epoch.max(1) as f64);
    }
    let params = TrainableParams::from_slice(&flat)?;
    if !params.is_finite() {
        return Err(Error::Training {
            frame: 0,
            message: "parameters diverged".into(),
        });
    }
    Ok(FitResult {
        params,
        loss_history: history,
        steps: epochs * cfg.steps_per_epoch,
        augmented_pairs,
    })
}
