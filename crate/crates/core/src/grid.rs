//! Dense grid types and the reductions the matching pipeline is built from.
//!
//! Feature grids are stored channel-major (`data[c * H * W + y * W + x]`), so a
//! grid is also a `C x (H*W)` row-major matrix; the matching kernels rely on that.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::real::Real;

/// Columns whose norm falls below this are treated as exactly zero.
pub const NORM_EPS: f64 = 1e-12;

/// Tolerance of the unit-norm invariant of normalized grids and coarse templates.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Class channel of a two-class probability mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    Background,
    Foreground,
}

impl Class {
    pub const BOTH: [Class; 2] = [Class::Background, Class::Foreground];

    pub fn index(self) -> usize {
        match self {
            Class::Background => 0,
            Class::Foreground => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
    normalized: bool,
}

impl<T: Real> FeatureGrid<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "feature grid dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "feature grid {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            normalized: false,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![T::zero(); channels * height * width],
        )
    }

    /// Builds a grid from per-position columns given in row-major order.
    pub fn from_columns(height: usize, width: usize, columns: &[Vec<T>]) -> Result<Self> {
        if columns.len() != height * width {
            return Err(Error::shape(format!(
                "expected {} columns, got {}",
                height * width,
                columns.len()
            )));
        }
        let channels = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != channels) {
            return Err(Error::shape("columns have differing lengths"));
        }
        let n = height * width;
        let mut data = vec![T::zero(); channels * n];
        for (p, col) in columns.iter().enumerate() {
            for (c, &v) in col.iter().enumerate() {
                data[c * n + p] = v;
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of spatial positions, `H * W`.
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[c * self.positions() + y * self.width + x]
    }

    /// One channel as an `H*W` row-major slice.
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.positions();
        &self.data[c * n..(c + 1) * n]
    }

    /// Feature column at flat position `p = y * W + x`.
    pub fn column(&self, p: usize) -> Vec<T> {
        let n = self.positions();
        (0..self.channels).map(|c| self.data[c * n + p]).collect()
    }

    pub fn same_spatial(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    pub fn cast<U: Real>(&self) -> FeatureGrid<U> {
        FeatureGrid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v.cast()).collect(),
            normalized: self.normalized,
        }
    }

    /// Checks finiteness and, for normalized grids, the unit-column invariant.
    pub fn check_invariants(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite feature value at index {i}")));
        }
        if self.normalized {
            let n = self.positions();
            for p in 0..n {
                let norm = column_norm(&self.data, n, self.channels, p).as_f64();
                let zero = (0..self.channels).all(|c| self.data[c * n + p] == T::zero());
                if !zero && (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::InvalidInput(format!(
                        "column {p} of a normalized grid has norm {norm}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Divides every spatial column by its Euclidean norm; near-zero columns become zero.
    pub fn l2_normalize_channels(&self) -> Result<Self> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "cannot normalize a grid with non-finite values".into(),
            ));
        }
        let n = self.positions();
        let mut data = self.data.clone();
        let eps = T::lit(NORM_EPS);
        for p in 0..n {
            let norm = column_norm(&self.data, n, self.channels, p);
            for c in 0..self.channels {
                let v = &mut data[c * n + p];
                *v = if norm < eps { T::zero() } else { *v / norm };
            }
        }
        Ok(Self {
            data,
            normalized: true,
            ..*self
        })
    }

    /// Multiplies every channel elementwise by one class channel of `mask`.
    pub fn mask_weight(&self, mask: &ProbMask<T>, class: Class) -> Result<Self> {
        if !self.same_spatial(mask.height, mask.width) {
            return Err(Error::shape(format!(
                "grid is {}x{} but mask is {}x{}",
                self.height, self.width, mask.height, mask.width
            )));
        }
        let weights = mask.channel(class);
        let n = self.positions();
        let mut data = self.data.clone();
        for plane in data.chunks_exact_mut(n) {
            for (v, &w) in plane.iter_mut().zip(weights) {
                *v = *v * w;
            }
        }
        Ok(Self {
            data,
            normalized: false,
            ..*self
        })
    }

    /// Per-channel sum over all spatial positions, accumulated in row-major order.
    pub fn spatial_sum(&self) -> Vec<T> {
        self.data
            .chunks_exact(self.positions())
            .map(|plane| plane.iter().fold(T::zero(), |acc, &v| acc + v))
            .collect()
    }

    pub(crate) fn mark_normalized(mut self) -> Self {
        self.normalized = true;
        self
    }
}

fn column_norm<T: Real>(data: &[T], n: usize, channels: usize, p: usize) -> T {
    (0..channels)
        .fold(T::zero(), |acc, c| acc + data[c * n + p] * data[c * n + p])
        .sqrt()
}

pub fn l2_normalize_channels<T: Real>(g: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
    g.l2_normalize_channels()
}

pub fn mask_weight<T: Real>(
    g: &FeatureGrid<T>,
    mask: &ProbMask<T>,
    class: Class,
) -> Result<FeatureGrid<T>> {
    g.mask_weight(mask, class)
}

pub fn spatial_sum<T: Real>(g: &FeatureGrid<T>) -> Vec<T> {
    g.spatial_sum()
}

pub fn mask_area<T: Real>(p: &ProbMask<T>, class: Class) -> T {
    p.area(class)
}

/// L2 norm of a vector.
pub fn norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

/// Normalizes a vector to unit length, or returns the zero vector when its norm is below [`NORM_EPS`].
pub fn normalize_vec<T: Real>(v: &[T]) -> Vec<T> {
    let n = norm(v);
    if n < T::lit(NORM_EPS) {
        vec![T::zero(); v.len()]
    } else {
        v.iter().map(|&x| x / n).collect()
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Two-class per-pixel distribution at feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask<T = f32> {
    height: usize,
    width: usize,
    bg: Vec<T>,
    fg: Vec<T>,
}

impl<T: Real> ProbMask<T> {
    pub fn new(height: usize, width: usize, bg: Vec<T>, fg: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("mask dimensions must be positive"));
        }
        if bg.len() != height * width || fg.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} values per channel",
                height * width
            )));
        }
        let tol = T::lit(1e-5);
        for (i, (&b, &f)) in bg.iter().zip(&fg).enumerate() {
            let in_unit = |v: T| v >= T::zero() && v <= T::one();
            if !in_unit(b) || !in_unit(f) || (b + f - T::one()).abs() > tol {
                return Err(Error::InvalidInput(format!(
                    "mask pixel {i} is not a distribution: bg={b}, fg={f}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            bg,
            fg,
        })
    }

    /// Builds the mask from foreground probabilities, with `bg = 1 - fg`.
    pub fn from_fg(height: usize, width: usize, fg: Vec<T>) -> Result<Self> {
        let bg = fg.iter().map(|&f| T::one() - f).collect();
        Self::new(height, width, bg, fg)
    }

    pub(crate) fn from_parts_unchecked(height: usize, width: usize, bg: Vec<T>, fg: Vec<T>) -> Self {
        debug_assert_eq!(bg.len(), height * width);
        debug_assert_eq!(fg.len(), height * width);
        Self {
            height,
            width,
            bg,
            fg,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn bg(&self) -> &[T] {
        &self.bg
    }

    pub fn fg(&self) -> &[T] {
        &self.fg
    }

    pub fn channel(&self, class: Class) -> &[T] {
        match class {
            Class::Background => &self.bg,
            Class::Foreground => &self.fg,
        }
    }

    /// Total probability mass of one class.
    pub fn area(&self, class: Class) -> T {
        self.channel(class).iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn cast<U: Real>(&self) -> ProbMask<U> {
        ProbMask {
            height: self.height,
            width: self.width,
            bg: self.bg.iter().map(|&v| v.cast()).collect(),
            fg: self.fg.iter().map(|&v| v.cast()).collect(),
        }
    }

    /// Hard foreground decision per pixel (`fg >= 0.5`).
    pub fn hard_fg(&self) -> Vec<bool> {
        self.fg.iter().map(|&f| f >= T::lit(0.5)).collect()
    }
}

/// Full-resolution multi-object label mask; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("label mask dimensions must be positive"));
        }
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label mask {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn background(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Non-background ids present in the mask.
    pub fn object_ids(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().filter(|&l| l != 0).collect()
    }

    pub fn count(&self, object_id: u8) -> usize {
        self.labels.iter().filter(|&&l| l == object_id).count()
    }

    /// Binary mask of one object: 1 where the label equals `object_id`.
    pub fn binarize(&self, object_id: u8) -> LabelMask {
        LabelMask {
            height: self.height,
            width: self.width,
            labels: self
                .labels
                .iter()
                .map(|&l| u8::from(l == object_id))
                .collect(),
        }
    }

    /// Rectangular crop; panics if the window falls outside the mask.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> LabelMask {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut labels = Vec::with_capacity(height * width);
        for y in top..top + height {
            labels.extend_from_slice(&self.labels[y * self.width + left..y * self.width + left + width]);
        }
        LabelMask {
            height,
            width,
            labels,
        }
    }

    /// Nearest-neighbour upsampling of a feature-resolution mask by `stride`,
    /// cropped to `height x width`.
    pub fn upsample_nearest(&self, stride: usize, height: usize, width: usize) -> LabelMask {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (y / stride).min(self.height - 1);
            for x in 0..width {
                let sx = (x / stride).min(self.width - 1);
                labels.push(self.labels[sy * self.width + sx]);
            }
        }
        LabelMask {
            height,
            width,
            labels,
        }
    }
}

/// Area-average pooling of one object's indicator over `stride x stride` cells.
///
/// Dimensions that are not multiples of `stride` are padded by edge replication,
/// giving an output of `ceil(H0 / stride) x ceil(W0 / stride)`.
pub fn downsample_mask<T: Real>(mask: &LabelMask, object_id: u8, stride: usize) -> Result<ProbMask<T>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let (h0, w0) = (mask.height, mask.width);
    let h = h0.div_ceil(stride);
    let w = w0.div_ceil(stride);
    let cell = (stride * stride) as f64;
    let mut fg = Vec::with_capacity(h * w);
    for gy in 0..h {
        for gx in 0..w {
            let mut hits = 0usize;
            for dy in 0..stride {
                let y = (gy * stride + dy).min(h0 - 1);
                for dx in 0..stride {
                    let x = (gx * stride + dx).min(w0 - 1);
                    hits += usize::from(mask.labels[y * w0 + x] == object_id);
                }
            }
            fg.push(hits as f64 / cell);
        }
    }
    let bg = fg.iter().map(|&f| T::lit(1.0 - f)).collect();
    let fg = fg.into_iter().map(T::lit).collect();
    Ok(ProbMask::from_parts_unchecked(h, w, bg, fg))
}

/// The ten matching score channels, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreChannel {
    GlobalBg,
    GlobalFg,
    LocalBg,
    LocalFg,
    OverallBg,
    OverallFg,
    ShortBg,
    ShortFg,
    LongBg,
    LongFg,
}

impl ScoreChannel {
    pub const ALL: [ScoreChannel; 10] = [
        ScoreChannel::GlobalBg,
        ScoreChannel::GlobalFg,
        ScoreChannel::LocalBg,
        ScoreChannel::LocalFg,
        ScoreChannel::OverallBg,
        ScoreChannel::OverallFg,
        ScoreChannel::ShortBg,
        ScoreChannel::ShortFg,
        ScoreChannel::LongBg,
        ScoreChannel::LongFg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const SCORE_CHANNELS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStack<T = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> ScoreStack<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::zero(); SCORE_CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, ch: ScoreChannel) -> &[T] {
        let n = self.positions();
        &self.data[ch.index() * n..(ch.index() + 1) * n]
    }

    pub fn channel_mut(&mut self, ch: ScoreChannel) -> &mut [T] {
        let n = self.positions();
        &mut self.data[ch.index() * n..(ch.index() + 1) * n]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// True when every score lies in `[-1, 1]` (with a small rounding allowance).
    pub fn is_bounded(&self) -> bool {
        let lim = T::one() + T::lit(1e-6);
        self.data.iter().all(|v| v.abs() <= lim)
    }
}

/// 8-bit interleaved RGB frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("image dimensions must be positive"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "RGB image {height}x{width} needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(height, width, rgb.repeat(height * width))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rectangular crop; panics if the window falls outside the image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> RgbImage {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let row = 3 * (y * self.width + left);
            data.extend_from_slice(&self.data[row..row + 3 * width]);
        }
        RgbImage { height, width, data }
    }
}

const TBDF_MAGIC: &[u8; 4] = b"TBDF";

/// Writes a grid in the `TBDF` binary layout: magic, `C`, `H`, `W` as little-endian
/// `u32`, then `C*H*W` little-endian `f32` values in storage order.
pub fn write_tbdf<W: Write>(grid: &FeatureGrid<f32>, mut out: W) -> std::io::Result<()> {
    out.write_all(TBDF_MAGIC)?;
    for dim in [grid.channels, grid.height, grid.width] {
        let dim = u32::try_from(dim).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension exceeds u32")
        })?;
        out.write_all(&dim.to_le_bytes())?;
    }
    for v in &grid.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tbdf<R: Read>(mut input: R) -> Result<FeatureGrid<f32>> {
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|e| Error::Malformed(format!("TBDF header: {e}")))?;
    if &header[..4] != TBDF_MAGIC {
        return Err(Error::Malformed("missing TBDF magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let count = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Malformed("TBDF dimensions overflow".into()))?;
    let mut bytes = vec![0u8; count * 4];
    input
        .read_exact(&mut bytes)
        .map_err(|e| Error::Malformed(format!("TBDF payload: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    FeatureGrid::new(c, h, w, data)
}
