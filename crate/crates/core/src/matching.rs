//! Diversified similarity matching and learnable spatial distance scoring.
//!
//! Fine matching compares every template position with every query position
//! (an `(M*N) x (H*W)` similarity matrix) and keeps the per-query maximum. The
//! local (previous-frame) matching multiplies each similarity by a distance score
//! `sigmoid(w2 * max(0, w1 * d))` before the maximum, so that near references can
//! outrank distant look-alikes.
//!
//! The hot path never materialises the full similarity matrix: the Gram matrix of
//! reference and query features is produced in row blocks with a GEMM and folded
//! straight into the running maxima for both classes (and every object sharing
//! the same reference frame).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Class, FeatureGrid, ScoreChannel, ScoreStack};
use crate::real::{sigmoid, Real};
use crate::templates::{coarse_scores, FineTemplate, TemplateBank};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceScoreParams<T = f32> {
    pub w1: T,
    pub w2: T,
}

impl<T: Real> DistanceScoreParams<T> {
    pub fn cast<U: Real>(&self) -> DistanceScoreParams<U> {
        DistanceScoreParams {
            w1: self.w1.cast(),
            w2: self.w2.cast(),
        }
    }
}

/// `D = sigmoid(w2 * max(0, w1 * d))`.
pub fn distance_score<T: Real>(d: T, params: &DistanceScoreParams<T>) -> T {
    sigmoid(params.w2 * (params.w1 * d).max(T::zero()))
}

/// Euclidean distances between all pairs of positions on an `H x W` grid.
///
/// Distances depend only on the coordinate offset, so the matrix is stored as a
/// `(2H-1) x (2W-1)` offset table; [`DistanceMatrix::get`] expands it on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix<T = f32> {
    height: usize,
    width: usize,
    offsets: Vec<T>,
}

impl<T: Real> DistanceMatrix<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Side length of the square `(H*W) x (H*W)` matrix.
    pub fn size(&self) -> usize {
        self.height * self.width
    }

    fn offset_index(&self, p: usize, q: usize) -> usize {
        let (py, px) = (p / self.width, p % self.width);
        let (qy, qx) = (q / self.width, q % self.width);
        (qy + self.height - 1 - py) * (2 * self.width - 1) + (qx + self.width - 1 - px)
    }

    /// Distance between reference position `p` and query position `q` (row-major indices).
    pub fn get(&self, p: usize, q: usize) -> T {
        self.offsets[self.offset_index(p, q)]
    }

    /// Distance scores over the offset table.
    pub(crate) fn score_table(&self, params: &DistanceScoreParams<T>) -> Vec<T> {
        self.offsets
            .iter()
            .map(|&d| distance_score(d, params))
            .collect()
    }
}

pub fn distance_matrix<T: Real>(h: usize, w: usize) -> Result<DistanceMatrix<T>> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
    }
    let mut offsets = Vec::with_capacity((2 * h - 1) * (2 * w - 1));
    for dy in 0..2 * h - 1 {
        let dy = dy as f64 - (h as f64 - 1.0);
        for dx in 0..2 * w - 1 {
            let dx = dx as f64 - (w as f64 - 1.0);
            offsets.push(T::lit((dx * dx + dy * dy).sqrt()));
        }
    }
    Ok(DistanceMatrix {
        height: h,
        width: w,
        offsets,
    })
}

/// Row-major `(template positions) x (query positions)` similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity<T = f32> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Similarity<T> {
    pub fn get(&self, p: usize, q: usize) -> T {
        self.data[p * self.cols + q]
    }
}

fn check_query<T: Real>(template: &FeatureGrid<T>, query: &FeatureGrid<T>) -> Result<()> {
    if !query.is_normalized() {
        return Err(Error::InvalidInput("query features must be channel-normalized".into()));
    }
    if template.channels() != query.channels() {
        return Err(Error::shape(format!(
            "template has {} channels, query has {}",
            template.channels(),
            query.channels()
        )));
    }
    Ok(())
}

/// Inner products along the channel axis between every template and query position.
pub fn similarity<T: Real>(template: &FeatureGrid<T>, query: &FeatureGrid<T>) -> Result<Similarity<T>> {
    check_query(template, query)?;
    let (m, n, c) = (template.positions(), query.positions(), template.channels());
    let mut data = vec![T::zero(); m * n];
    T::gemm(
        m,
        c,
        n,
        template.data(),
        1,
        m as isize,
        query.data(),
        n as isize,
        1,
        &mut data,
        n as isize,
        1,
    );
    Ok(Similarity { rows: m, cols: n, data })
}

/// Per-query maximum over all template positions, with the first (lowest-index)
/// maximizer.
pub fn query_argmax<T: Real>(sim: &Similarity<T>) -> Result<(Vec<T>, Vec<usize>)> {
    if sim.rows == 0 {
        return Err(Error::InvalidArgument("empty template".into()));
    }
    let mut best = sim.data[..sim.cols].to_vec();
    let mut arg = vec![0usize; sim.cols];
    for p in 1..sim.rows {
        let row = &sim.data[p * sim.cols..(p + 1) * sim.cols];
        for q in 0..sim.cols {
            if row[q] > best[q] {
                best[q] = row[q];
                arg[q] = p;
            }
        }
    }
    Ok((best, arg))
}

pub fn query_max<T: Real>(sim: &Similarity<T>) -> Result<Vec<T>> {
    query_argmax(sim).map(|(v, _)| v)
}

/// How local-matching similarities are modulated before the query-wise maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Locality {
    /// Multiply by the learned distance score.
    DistanceScoring,
    /// Exclude references outside a `(2r+1)^2` square window.
    HardWindow { radius: usize },
    /// Plain non-local matching.
    Unrestricted,
}

/// Which template families feed the score stack; excluded channels are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSet {
    FineAndCoarse,
    FineOnly,
    CoarseOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchingVariant {
    pub templates: TemplateSet,
    pub locality: Locality,
}

impl Default for MatchingVariant {
    fn default() -> Self {
        Self {
            templates: TemplateSet::FineAndCoarse,
            locality: Locality::DistanceScoring,
        }
    }
}

impl MatchingVariant {
    pub fn uses_fine(&self) -> bool {
        self.templates != TemplateSet::CoarseOnly
    }

    pub fn uses_coarse(&self) -> bool {
        self.templates != TemplateSet::FineOnly
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Weighting<'a, T> {
    Plain,
    /// Distance scores over the offset table of a [`DistanceMatrix`].
    Table(&'a [T]),
    Window(usize),
}

/// Query-wise maxima for both classes of one mask.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FineScores<T> {
    pub bg: Vec<T>,
    pub fg: Vec<T>,
    /// First row-major maximizer per query position, when requested.
    pub arg: Option<[Vec<usize>; 2]>,
}

/// Rows of the reference Gram block processed per GEMM call.
fn block_rows(query_positions: usize) -> usize {
    (1 << 18) / query_positions.max(1)
}

/// Fused weighted similarity + query-wise max for several masks over one reference.
///
/// Candidate value for mask `k`, class `c`, reference `p`, query `q` is
/// `m_kc[p] * (<ref_p, query_q> * weight(p, q))`, or `-1` outside a hard window.
pub(crate) fn fine_match_multi<T: Real>(
    reference: &FeatureGrid<T>,
    masks: &[&crate::grid::ProbMask<T>],
    query: &FeatureGrid<T>,
    weighting: Weighting<'_, T>,
    track_argmax: bool,
) -> Result<Vec<FineScores<T>>> {
    check_query(reference, query)?;
    let nr = reference.positions();
    let nq = query.positions();
    for m in masks {
        if !reference.same_spatial(m.height(), m.width()) {
            return Err(Error::shape("template mask does not match template features"));
        }
    }
    let local = !matches!(weighting, Weighting::Plain);
    if local && !reference.same_spatial(query.height(), query.width()) {
        return Err(Error::shape(
            "local matching needs template and query on the same grid",
        ));
    }
    let (h, w) = (query.height(), query.width());
    let c = reference.channels();

    let neg_inf = T::neg_infinity();
    let mut out: Vec<FineScores<T>> = masks
        .iter()
        .map(|_| FineScores {
            bg: vec![neg_inf; nq],
            fg: vec![neg_inf; nq],
            arg: track_argmax.then(|| [vec![0; nq], vec![0; nq]]),
        })
        .collect();

    let block = block_rows(nq).clamp(1, nr);
    let mut gram = vec![T::zero(); block * nq];
    let mut weighted = vec![T::zero(); nq];
    let mut inside = vec![true; nq];
    let minus_one = -T::one();
    let mut zero_rows = vec![[false; 2]; masks.len()];

    for p0 in (0..nr).step_by(block) {
        let rows = block.min(nr - p0);
        T::gemm(
            rows,
            c,
            nq,
            &reference.data()[p0..],
            1,
            nr as isize,
            query.data(),
            nq as isize,
            1,
            &mut gram[..rows * nq],
            nq as isize,
            1,
        );
        for i in 0..rows {
            let p = p0 + i;
            let g = &gram[i * nq..(i + 1) * nq];
            let row: &[T] = match weighting {
                Weighting::Plain => g,
                Weighting::Table(table) => {
                    let (py, px) = (p / w, p % w);
                    for qy in 0..h {
                        let start = (qy + h - 1 - py) * (2 * w - 1) + (w - 1 - px);
                        let d = &table[start..start + w];
                        let dst = &mut weighted[qy * w..(qy + 1) * w];
                        for ((o, &s), &dv) in dst.iter_mut().zip(&g[qy * w..(qy + 1) * w]).zip(d) {
                            *o = s * dv;
                        }
                    }
                    &weighted
                }
                Weighting::Window(radius) => {
                    let (py, px) = (p / w, p % w);
                    for qy in 0..h {
                        let row_in = qy.abs_diff(py) <= radius;
                        for qx in 0..w {
                            inside[qy * w + qx] = row_in && qx.abs_diff(px) <= radius;
                        }
                    }
                    g
                }
            };
            let window = matches!(weighting, Weighting::Window(_));
            for (k, mask) in masks.iter().enumerate() {
                for class in Class::BOTH {
                    let mc = mask.channel(class)[p];
                    let scores = &mut out[k];
                    let (best, arg) = match class {
                        Class::Background => (&mut scores.bg, scores.arg.as_mut().map(|a| &mut a[0])),
                        Class::Foreground => (&mut scores.fg, scores.arg.as_mut().map(|a| &mut a[1])),
                    };
                    match (window, arg) {
                        (false, None) => {
                            // A zero weight contributes exactly 0 everywhere; fold it in once at the end.
                            if mc == T::zero() {
                                zero_rows[k][class.index()] = true;
                                continue;
                            }
                            for (b, &s) in best.iter_mut().zip(row) {
                                let v = mc * s;
                                *b = if v > *b { v } else { *b };
                            }
                        }
                        (false, Some(arg)) => {
                            for q in 0..nq {
                                let v = mc * row[q];
                                if v > best[q] {
                                    best[q] = v;
                                    arg[q] = p;
                                }
                            }
                        }
                        (true, arg) => {
                            let mut arg = arg;
                            for q in 0..nq {
                                let v = if inside[q] { mc * row[q] } else { minus_one };
                                if v > best[q] {
                                    best[q] = v;
                                    if let Some(a) = arg.as_deref_mut() {
                                        a[q] = p;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for (scores, zero) in out.iter_mut().zip(&zero_rows) {
        for (best, seen) in [(&mut scores.bg, zero[0]), (&mut scores.fg, zero[1])] {
            if seen {
                for b in best.iter_mut() {
                    if *b < T::zero() {
                        *b = T::zero();
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Plain (non-local) fine matching for both classes.
pub fn global_match<T: Real>(template: &FineTemplate<T>, query: &FeatureGrid<T>) -> Result<(Vec<T>, Vec<T>)> {
    let s = fine_match_multi(&template.features, &[&template.mask], query, Weighting::Plain, false)?;
    let s = s.into_iter().next().expect("one mask");
    Ok((s.bg, s.fg))
}

fn check_dm<T: Real>(dm: &DistanceMatrix<T>, query: &FeatureGrid<T>) -> Result<()> {
    if !query.same_spatial(dm.height, dm.width) {
        return Err(Error::shape(format!(
            "distance matrix is for a {}x{} grid, query is {}x{}",
            dm.height,
            dm.width,
            query.height(),
            query.width()
        )));
    }
    Ok(())
}

/// Local fine matching with each similarity multiplied by its distance score.
pub fn local_match<T: Real>(
    template: &FineTemplate<T>,
    query: &FeatureGrid<T>,
    dm: &DistanceMatrix<T>,
    params: &DistanceScoreParams<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    check_dm(dm, query)?;
    let table = dm.score_table(params);
    let s = fine_match_multi(&template.features, &[&template.mask], query, Weighting::Table(&table), false)?;
    let s = s.into_iter().next().expect("one mask");
    Ok((s.bg, s.fg))
}

/// Local fine matching restricted to a square window of the given half-size.
pub fn local_match_hard_window<T: Real>(
    template: &FineTemplate<T>,
    query: &FeatureGrid<T>,
    radius: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    let s = fine_match_multi(&template.features, &[&template.mask], query, Weighting::Window(radius), false)?;
    let s = s.into_iter().next().expect("one mask");
    Ok((s.bg, s.fg))
}

/// Scores of one bank plus, when tracked, the local-matching maximizers.
#[derive(Debug, Clone)]
pub(crate) struct Assembled<T> {
    pub scores: ScoreStack<T>,
    pub local_arg: Option<[Vec<usize>; 2]>,
}

/// Builds the ten-channel score stack for a query frame.
pub fn assemble_scores<T: Real>(
    bank: &TemplateBank<T>,
    query: &FeatureGrid<T>,
    dm: &DistanceMatrix<T>,
    params: &DistanceScoreParams<T>,
) -> Result<ScoreStack<T>> {
    assemble_scores_variant(bank, query, dm, params, MatchingVariant::default())
}

pub fn assemble_scores_variant<T: Real>(
    bank: &TemplateBank<T>,
    query: &FeatureGrid<T>,
    dm: &DistanceMatrix<T>,
    params: &DistanceScoreParams<T>,
    variant: MatchingVariant,
) -> Result<ScoreStack<T>> {
    let mut out = assemble_multi(&[bank], query, dm, params, variant, false)?;
    Ok(out.pop().expect("one bank").scores)
}

/// Score stacks for several banks against one query.
///
/// Banks whose fine templates share the same reference features (as the
/// per-object chains of one sequence do) share the similarity computation.
pub(crate) fn assemble_multi<T: Real>(
    banks: &[&TemplateBank<T>],
    query: &FeatureGrid<T>,
    dm: &DistanceMatrix<T>,
    params: &DistanceScoreParams<T>,
    variant: MatchingVariant,
    track_argmax: bool,
) -> Result<Vec<Assembled<T>>> {
    if !query.is_normalized() {
        return Err(Error::InvalidInput("query features must be channel-normalized".into()));
    }
    let (h, w) = (query.height(), query.width());
    let mut out: Vec<Assembled<T>> = banks
        .iter()
        .map(|_| Assembled {
            scores: ScoreStack::zeros(h, w),
            local_arg: None,
        })
        .collect();
    let Some(first) = banks.first() else {
        return Ok(out);
    };

    if variant.uses_fine() {
        let shared = banks.iter().all(|b| {
            std::sync::Arc::ptr_eq(&b.global.features, &first.global.features)
                && std::sync::Arc::ptr_eq(&b.local.features, &first.local.features)
        });
        let groups: Vec<Vec<usize>> = if shared {
            vec![(0..banks.len()).collect()]
        } else {
            (0..banks.len()).map(|i| vec![i]).collect()
        };
        let table;
        let weighting = match variant.locality {
            Locality::DistanceScoring => {
                check_dm(dm, query)?;
                table = dm.score_table(params);
                Weighting::Table(&table)
            }
            Locality::HardWindow { radius } => Weighting::Window(radius),
            Locality::Unrestricted => Weighting::Plain,
        };
        for group in groups {
            let lead = banks[group[0]];
            let global_masks: Vec<_> = group.iter().map(|&i| &banks[i].global.mask).collect();
            let local_masks: Vec<_> = group.iter().map(|&i| &banks[i].local.mask).collect();
            let global = fine_match_multi(&lead.global.features, &global_masks, query, Weighting::Plain, false)?;
            let local = fine_match_multi(&lead.local.features, &local_masks, query, weighting, track_argmax)?;
            for ((&i, g), l) in group.iter().zip(global).zip(local) {
                let s = &mut out[i].scores;
                s.channel_mut(ScoreChannel::GlobalBg).copy_from_slice(&g.bg);
                s.channel_mut(ScoreChannel::GlobalFg).copy_from_slice(&g.fg);
                s.channel_mut(ScoreChannel::LocalBg).copy_from_slice(&l.bg);
                s.channel_mut(ScoreChannel::LocalFg).copy_from_slice(&l.fg);
                out[i].local_arg = l.arg;
            }
        }
    }

    if variant.uses_coarse() {
        for (bank, a) in banks.iter().zip(out.iter_mut()) {
            if bank.overall.fg.len() != query.channels() {
                return Err(Error::shape("coarse template and query channels differ"));
            }
            let pairs = [
                (ScoreChannel::OverallBg, &bank.overall.bg),
                (ScoreChannel::OverallFg, &bank.overall.fg),
                (ScoreChannel::ShortBg, &bank.short_term.bg),
                (ScoreChannel::ShortFg, &bank.short_term.fg),
                (ScoreChannel::LongBg, &bank.long_term.bg),
                (ScoreChannel::LongFg, &bank.long_term.fg),
            ];
            for (ch, proto) in pairs {
                a.scores.channel_mut(ch).copy_from_slice(&coarse_scores(proto, query));
            }
        }
    }
    Ok(out)
}
