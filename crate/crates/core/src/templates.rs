//! Spatio-temporally diversified matching templates.
//!
//! A [`TemplateBank`] holds two fine (per-pixel) templates, the frame-0 global one
//! and the previous-frame local one, and three coarse (single prototype vector)
//! templates per class that are blended over time with different inertias:
//!
//! - overall: inertia is the ratio of accumulated mask area, so every frame counts
//!   in proportion to its class mass;
//! - short-term: learnable inertia initialised low, tracking recent frames;
//! - long-term: learnable inertia initialised high, remembering distant frames.
//!
//! Every coarse update is followed by re-normalization, which keeps the prototypes
//! on the unit sphere. State is O(1) in sequence length.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{normalize_vec, Class, FeatureGrid, ProbMask, NORM_EPS, UNIT_NORM_TOL};
use crate::real::{sigmoid, Real};

/// Per-pixel template: unit features weighted by class probabilities.
///
/// The background and foreground grids are `features ⊙ mask.bg` and
/// `features ⊙ mask.fg`; they are kept factored so both classes can share one
/// similarity computation against a query.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTemplate<T = f32> {
    pub features: Arc<FeatureGrid<T>>,
    pub mask: ProbMask<T>,
}

impl<T: Real> FineTemplate<T> {
    pub fn class_grid(&self, class: Class) -> FeatureGrid<T> {
        self.features
            .mask_weight(&self.mask, class)
            .expect("fine template shapes agree by construction")
    }

    pub fn bg(&self) -> FeatureGrid<T> {
        self.class_grid(Class::Background)
    }

    pub fn fg(&self) -> FeatureGrid<T> {
        self.class_grid(Class::Foreground)
    }
}

/// One prototype vector per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseTemplate<T = f32> {
    pub bg: Vec<T>,
    pub fg: Vec<T>,
}

impl<T: Real> CoarseTemplate<T> {
    pub fn get(&self, class: Class) -> &[T] {
        match class {
            Class::Background => &self.bg,
            Class::Foreground => &self.fg,
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        for class in Class::BOTH {
            let v = self.get(class);
            let n = crate::grid::norm(v).as_f64();
            let zero = v.iter().all(|&x| x == T::zero());
            if !zero && (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidInput(format!(
                    "{what} {class:?} prototype has norm {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Pre-activations of the learnable short/long-term inertias; `mu = sigmoid(a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InertiaParams<T = f32> {
    pub a_short_bg: T,
    pub a_short_fg: T,
    pub a_long_bg: T,
    pub a_long_fg: T,
}

impl<T: Real> Default for InertiaParams<T> {
    /// `mu_S = 1 / (1 + e)` and `mu_L = 1 / (1 + e^-1)`.
    fn default() -> Self {
        Self {
            a_short_bg: -T::one(),
            a_short_fg: -T::one(),
            a_long_bg: T::one(),
            a_long_fg: T::one(),
        }
    }
}

impl<T: Real> InertiaParams<T> {
    pub fn short_pre(&self, class: Class) -> T {
        match class {
            Class::Background => self.a_short_bg,
            Class::Foreground => self.a_short_fg,
        }
    }

    pub fn long_pre(&self, class: Class) -> T {
        match class {
            Class::Background => self.a_long_bg,
            Class::Foreground => self.a_long_fg,
        }
    }

    pub fn mu_short(&self, class: Class) -> T {
        sigmoid(self.short_pre(class))
    }

    pub fn mu_long(&self, class: Class) -> T {
        sigmoid(self.long_pre(class))
    }

    pub fn cast<U: Real>(&self) -> InertiaParams<U> {
        InertiaParams {
            a_short_bg: self.a_short_bg.cast(),
            a_short_fg: self.a_short_fg.cast(),
            a_long_bg: self.a_long_bg.cast(),
            a_long_fg: self.a_long_fg.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank<T = f32> {
    pub global: FineTemplate<T>,
    pub local: FineTemplate<T>,
    pub overall: CoarseTemplate<T>,
    pub short_term: CoarseTemplate<T>,
    pub long_term: CoarseTemplate<T>,
    /// Running sums of mask area per class, through the last ingested frame.
    pub area_sum_bg: T,
    pub area_sum_fg: T,
    /// Index of the next frame to be processed.
    pub frame_index: usize,
}

impl<T: Real> TemplateBank<T> {
    pub fn area_sum(&self, class: Class) -> T {
        match class {
            Class::Background => self.area_sum_bg,
            Class::Foreground => self.area_sum_fg,
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        self.overall.check("overall")?;
        self.short_term.check("short-term")?;
        self.long_term.check("long-term")?;
        if self.area_sum_bg < T::zero() || self.area_sum_fg < T::zero() {
            return Err(Error::InvalidInput("negative area sum".into()));
        }
        for fine in [&self.global, &self.local] {
            for class in Class::BOTH {
                let g = fine.class_grid(class);
                for p in 0..g.positions() {
                    let n = crate::grid::norm(&g.column(p)).as_f64();
                    if n > 1.0 + UNIT_NORM_TOL {
                        return Err(Error::InvalidInput(format!(
                            "fine template column {p} has norm {n}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn require_normalized<T: Real>(x: &FeatureGrid<T>) -> Result<()> {
    if !x.is_normalized() {
        return Err(Error::InvalidInput(
            "template features must be channel-normalized".into(),
        ));
    }
    Ok(())
}

pub fn build_fine<T: Real>(x: Arc<FeatureGrid<T>>, m: &ProbMask<T>) -> Result<FineTemplate<T>> {
    require_normalized(&x)?;
    if !x.same_spatial(m.height(), m.width()) {
        return Err(Error::shape(format!(
            "features are {}x{} but mask is {}x{}",
            x.height(),
            x.width(),
            m.height(),
            m.width()
        )));
    }
    Ok(FineTemplate {
        features: x,
        mask: m.clone(),
    })
}

/// Probability-weighted spatial sum of the features for one class (before normalization).
pub(crate) fn class_sum<T: Real>(features: &FeatureGrid<T>, weights: &[T]) -> Vec<T> {
    debug_assert_eq!(weights.len(), features.positions());
    (0..features.channels())
        .map(|c| {
            features
                .plane(c)
                .iter()
                .zip(weights)
                .fold(T::zero(), |acc, (&x, &w)| acc + x * w)
        })
        .collect()
}

/// Compresses a fine template into one normalized prototype per class.
pub fn compress<T: Real>(f: &FineTemplate<T>) -> CoarseTemplate<T> {
    let proto = |class| normalize_vec(&class_sum(&f.features, f.mask.channel(class)));
    CoarseTemplate {
        bg: proto(Class::Background),
        fg: proto(Class::Foreground),
    }
}

/// Area-ratio inertia of the overall template: `prev / (prev + now)`, or 0 when the
/// total is (numerically) zero, as on the first frame.
pub fn overall_inertia<T: Real>(area_sum_prev: T, area_now: T) -> Result<T> {
    if area_sum_prev < T::zero() || area_now < T::zero() {
        return Err(Error::InvalidArgument(format!(
            "mask areas must be non-negative, got {area_sum_prev} and {area_now}"
        )));
    }
    let total = area_sum_prev + area_now;
    if total < T::lit(NORM_EPS) {
        Ok(T::zero())
    } else {
        Ok(area_sum_prev / total)
    }
}

fn check_mu<T: Real>(mu: T) -> Result<()> {
    if !(mu >= T::zero() && mu <= T::one()) {
        return Err(Error::InvalidArgument(format!("inertia {mu} outside [0, 1]")));
    }
    Ok(())
}

/// Convex blend without re-normalization; its norm shrinks whenever the inputs differ.
pub fn ema_blend<T: Real>(prev: &[T], cur: &[T], mu: T) -> Result<Vec<T>> {
    check_mu(mu)?;
    if prev.len() != cur.len() {
        return Err(Error::shape("prototype lengths differ"));
    }
    Ok(prev
        .iter()
        .zip(cur)
        .map(|(&p, &c)| mu * p + (T::one() - mu) * c)
        .collect())
}

/// `N(mu * prev + (1 - mu) * cur)`.
pub fn ema_update<T: Real>(prev: &[T], cur: &[T], mu: T) -> Result<Vec<T>> {
    Ok(normalize_vec(&ema_blend(prev, cur, mu)?))
}

pub fn bank_init<T: Real>(x0: Arc<FeatureGrid<T>>, m0: &ProbMask<T>) -> Result<TemplateBank<T>> {
    let global = build_fine(x0, m0)?;
    let coarse = compress(&global);
    Ok(TemplateBank {
        local: global.clone(),
        overall: coarse.clone(),
        short_term: coarse.clone(),
        long_term: coarse,
        area_sum_bg: m0.area(Class::Background),
        area_sum_fg: m0.area(Class::Foreground),
        frame_index: 1,
        global,
    })
}

/// Ingests frame `i` with its (predicted or given) mask.
pub fn bank_step<T: Real>(
    bank: &TemplateBank<T>,
    x: Arc<FeatureGrid<T>>,
    m: &ProbMask<T>,
    inertia: &InertiaParams<T>,
) -> Result<TemplateBank<T>> {
    bank_step_with(bank, x, m, inertia, true)
}

/// [`bank_step`] with the coarse-template re-normalization optionally switched
/// off, which exposes the shrinking norm of repeated convex blending.
pub fn bank_step_with<T: Real>(
    bank: &TemplateBank<T>,
    x: Arc<FeatureGrid<T>>,
    m: &ProbMask<T>,
    inertia: &InertiaParams<T>,
    renormalize: bool,
) -> Result<TemplateBank<T>> {
    let update = if renormalize { ema_update::<T> } else { ema_blend::<T> };
    if x.channels() != bank.global.features.channels() {
        return Err(Error::shape("feature channels differ from the bank"));
    }
    let local = build_fine(x, m)?;
    let cur = compress(&local);

    let mut next = [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut areas = [T::zero(); 2];
    for class in Class::BOTH {
        let k = class.index();
        let c = cur.get(class);
        let area_now = m.area(class);
        let mu_o = overall_inertia(bank.area_sum(class), area_now)?;
        next[k] = update(bank.overall.get(class), c, mu_o)?;
        next[2 + k] = update(bank.short_term.get(class), c, inertia.mu_short(class))?;
        next[4 + k] = update(bank.long_term.get(class), c, inertia.mu_long(class))?;
        areas[k] = bank.area_sum(class) + area_now;
    }
    let [obg, ofg, sbg, sfg, lbg, lfg] = next;
    Ok(TemplateBank {
        global: bank.global.clone(),
        local,
        overall: CoarseTemplate { bg: obg, fg: ofg },
        short_term: CoarseTemplate { bg: sbg, fg: sfg },
        long_term: CoarseTemplate { bg: lbg, fg: lfg },
        area_sum_bg: areas[0],
        area_sum_fg: areas[1],
        frame_index: bank.frame_index + 1,
    })
}

/// Cosine-style score of a prototype against every query column.
pub fn coarse_scores<T: Real>(proto: &[T], query: &FeatureGrid<T>) -> Vec<T> {
    let n = query.positions();
    let mut out = vec![T::zero(); n];
    for (c, &w) in proto.iter().enumerate() {
        if w == T::zero() {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(query.plane(c)) {
            *o = *o + w * x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Arc<FeatureGrid<f64>> {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Arc::new(
            FeatureGrid::new(c, h, w, data)
                .unwrap()
                .l2_normalize_channels()
                .unwrap(),
        )
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ProbMask<f64> {
        ProbMask::from_fg(h, w, (0..h * w).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
        normalize_vec(&(0..c).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn build_fine_extremes_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = unit_grid(&mut rng, 4, 2, 2);
        let all_fg = ProbMask::from_fg(2, 2, vec![1.0; 4]).unwrap();
        let f = build_fine(x.clone(), &all_fg).unwrap();
        assert_eq!(f.fg().data(), x.data());
        assert!(f.bg().data().iter().all(|&v| v == 0.0));
        let all_bg = ProbMask::from_fg(2, 2, vec![0.0; 4]).unwrap();
        let f = build_fine(x.clone(), &all_bg).unwrap();
        assert_eq!(f.bg().data(), x.data());
        let quarter = ProbMask::from_fg(2, 2, vec![0.25, 1.0, 1.0, 1.0]).unwrap();
        let f = build_fine(x.clone(), &quarter).unwrap();
        for (a, b) in f.fg().column(0).iter().zip(x.column(0)) {
            assert_eq!(*a, 0.25 * b);
        }
    }

    #[test]
    fn build_fine_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = unit_grid(&mut rng, 4, 2, 2);
        let wrong = ProbMask::from_fg(3, 2, vec![1.0; 6]).unwrap();
        assert!(matches!(build_fine(x, &wrong), Err(Error::Shape(_))));
        let raw = Arc::new(FeatureGrid::<f64>::zeros(2, 1, 1).unwrap());
        let m = ProbMask::from_fg(1, 1, vec![1.0]).unwrap();
        assert!(matches!(build_fine(raw, &m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn compress_cases() {
        let v = vec![0.6f64, 0.8];
        let x = Arc::new(
            FeatureGrid::from_columns(1, 1, std::slice::from_ref(&v))
                .unwrap()
                .l2_normalize_channels()
                .unwrap(),
        );
        let c = compress(&build_fine(x, &ProbMask::from_fg(1, 1, vec![1.0]).unwrap()).unwrap());
        assert!((c.fg[0] - 0.6).abs() < 1e-15 && (c.fg[1] - 0.8).abs() < 1e-15);
        assert!(c.bg.iter().all(|&v| v == 0.0));

        let x = Arc::new(
            FeatureGrid::from_columns(1, 2, &[vec![1.0, 0.0], vec![0.0, 1.0]])
                .unwrap()
                .l2_normalize_channels()
                .unwrap(),
        );
        let m = ProbMask::from_fg(1, 2, vec![1.0, 1.0]).unwrap();
        let c = compress(&build_fine(x, &m).unwrap());
        let s = 1.0 / 2f64.sqrt();
        assert!((c.fg[0] - s).abs() < 1e-15 && (c.fg[1] - s).abs() < 1e-15);
    }

    #[test]
    fn overall_inertia_cases() {
        assert_eq!(overall_inertia(0.0, 10.0).unwrap(), 0.0);
        assert_eq!(overall_inertia(10.0, 10.0).unwrap(), 0.5);
        assert_eq!(overall_inertia(30.0, 10.0).unwrap(), 0.75);
        assert_eq!(overall_inertia(0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(overall_inertia(-1.0, 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ema_update_cases() {
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        assert_eq!(ema_update(&a, &b, 0.0).unwrap(), b);
        let mid = ema_update(&a, &b, 0.5).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((mid[0] - s).abs() < 1e-15 && (mid[1] - s).abs() < 1e-15);
        for mu in [0.0, 0.3, 0.99] {
            assert_eq!(ema_update(&a, &a, mu).unwrap(), a);
        }
        assert!(matches!(ema_update(&a, &b, 1.5), Err(Error::InvalidArgument(_))));
        assert!(matches!(ema_update(&a, &b, -0.1), Err(Error::InvalidArgument(_))));
        // antipodal inputs cancel exactly
        assert_eq!(ema_update(&a, &[-1.0, 0.0], 0.5).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn bank_init_sets_frame_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = unit_grid(&mut rng, 6, 3, 3);
        let m = random_mask(&mut rng, 3, 3);
        let bank = bank_init(x.clone(), &m).unwrap();
        assert_eq!(bank.overall, bank.short_term);
        assert_eq!(bank.short_term, bank.long_term);
        assert_eq!(bank.overall, compress(&bank.global));
        assert_eq!(bank.frame_index, 1);
        assert_eq!(bank.area_sum_fg, m.area(Class::Foreground));
        bank.check_invariants().unwrap();

        let all_fg = ProbMask::from_fg(3, 3, vec![1.0; 9]).unwrap();
        let bank = bank_init(x.clone(), &all_fg).unwrap();
        assert_eq!(bank.global.fg().data(), x.data());
    }

    #[test]
    fn bank_step_fixed_point_and_areas() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = unit_grid(&mut rng, 6, 4, 4);
        let m = random_mask(&mut rng, 4, 4);
        let bank = bank_init(x.clone(), &m).unwrap();
        let next = bank_step(&bank, x.clone(), &m, &InertiaParams::default()).unwrap();
        for (a, b) in [
            (&bank.overall, &next.overall),
            (&bank.short_term, &next.short_term),
            (&bank.long_term, &next.long_term),
        ] {
            for class in Class::BOTH {
                for (u, v) in a.get(class).iter().zip(b.get(class)) {
                    assert!((u - v).abs() <= 1e-5);
                }
            }
        }
        assert_eq!(next.frame_index, 2);
        assert_eq!(next.global, bank.global);

        let fg10 = ProbMask::from_fg(4, 4, [vec![1.0; 10], vec![0.0; 6]].concat()).unwrap();
        let fg6 = ProbMask::from_fg(4, 4, [vec![0.0; 10], vec![1.0; 6]].concat()).unwrap();
        let b = bank_init(x.clone(), &fg10).unwrap();
        let b = bank_step(&b, x, &fg6, &InertiaParams::default()).unwrap();
        assert_eq!(b.area_sum_fg, 16.0);
        assert_eq!(b.area_sum_bg, 16.0);
    }

    #[test]
    fn inertia_defaults_match_sigmoid_of_unit() {
        let p = InertiaParams::<f64>::default();
        assert!((p.mu_short(Class::Background) - 1.0 / (1.0 + 1f64.exp())).abs() < 1e-12);
        assert!((p.mu_long(Class::Foreground) - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn overall_template_stays_on_constant_input() {
        let v = vec![0.0, 1.0, 0.0];
        let x = Arc::new(
            FeatureGrid::from_columns(2, 2, &vec![v.clone(); 4])
                .unwrap()
                .l2_normalize_channels()
                .unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bank = bank_init(x.clone(), &random_mask(&mut rng, 2, 2)).unwrap();
        for _ in 0..20 {
            bank = bank_step(&bank, x.clone(), &random_mask(&mut rng, 2, 2), &InertiaParams::default()).unwrap();
            assert_eq!(bank.overall.fg, v);
            assert_eq!(bank.overall.bg, v);
        }
    }

    #[test]
    fn unnormalized_blend_never_exceeds_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_unit(&mut rng, 8);
        assert_eq!(ema_blend(&u, &u, 0.4).unwrap(), u);
        let mut proto = u.clone();
        for _ in 0..50 {
            let cur = random_unit(&mut rng, 8);
            let unit_blend = crate::grid::norm(&ema_blend(&u, &cur, 0.7).unwrap());
            assert!(unit_blend < 1.0);
            proto = ema_blend(&proto, &cur, 0.7).unwrap();
            assert!(crate::grid::norm(&proto) <= 1.0);
        }
        assert!(crate::grid::norm(&proto) < 0.9);
    }

    proptest! {
        #[test]
        fn coarse_norms_survive_random_steps(seed in 0u64..500, a in -4.0f64..4.0, b in -4.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inertia = InertiaParams { a_short_bg: a, a_short_fg: b, a_long_bg: b, a_long_fg: a };
            let mut bank = bank_init(unit_grid(&mut rng, 5, 3, 4), &random_mask(&mut rng, 3, 4)).unwrap();
            let mut prev_area = bank.area_sum_fg;
            for _ in 0..6 {
                bank = bank_step(&bank, unit_grid(&mut rng, 5, 3, 4), &random_mask(&mut rng, 3, 4), &inertia).unwrap();
                prop_assert!(bank.check_invariants().is_ok());
                prop_assert!(bank.area_sum_fg >= prev_area);
                prev_area = bank.area_sum_fg;
            }
        }

        #[test]
        fn sigmoid_inertia_stays_open_unit(a in -30.0f64..30.0) {
            let p = InertiaParams { a_short_bg: a, a_short_fg: a, a_long_bg: a, a_long_fg: a };
            let mu = p.mu_short(Class::Foreground);
            prop_assert!(mu > 0.0 && mu < 1.0);
        }
    }
}
