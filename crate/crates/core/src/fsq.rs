//! Finite scalar quantization with an implicit product codebook.
//!
//! A latent vector of width `W = groups · c` is split into `groups`
//! contiguous blocks of `c` channels. Channel `i` of each block is bounded
//! with `half_i · tanh(v)` and rounded onto a centered grid of exactly
//! `L_i` points. For even `L_i` the grid is half-integer:
//! `round(b + ½) − ½` with `half_i = (L_i − 1)/2`. A block's codeword maps
//! to a mixed-radix index (channel 0 fastest, all-minimum codeword = 0).
//!
//! `literal_bound` switches to `⌊L_i/2⌋ · tanh(v)` followed by plain
//! rounding. That variant reaches `L_i + 1` values for even `L_i`; indices
//! then use radix `2⌊L_i/2⌋ + 1`.

use crate::error::{shape_err, Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FsqSpec {
    levels: Vec<u32>,
    groups: usize,
    literal_bound: bool,
}

/// Codeword of one group: one centered grid value per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Codeword(pub Vec<f64>);

impl FsqSpec {
    pub fn new(levels: &[u32], groups: usize) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Fsq("at least one channel is required".into()));
        }
        if let Some(l) = levels.iter().find(|&&l| l < 2) {
            return Err(Error::Fsq(format!("level {l} < 2")));
        }
        if groups == 0 {
            return Err(Error::Fsq("groups must be positive".into()));
        }
        let spec = Self {
            levels: levels.to_vec(),
            groups,
            literal_bound: false,
        };
        if spec.radices().iter().try_fold(1u64, |acc, &r| acc.checked_mul(r)).is_none() {
            return Err(Error::Fsq("codebook size overflows u64".into()));
        }
        Ok(spec)
    }

    /// Spec for a total latent width; `width` must be a multiple of `c`.
    pub fn for_width(levels: &[u32], width: usize) -> Result<Self> {
        let c = levels.len().max(1);
        if width == 0 || width % c != 0 {
            return Err(Error::Fsq(format!(
                "latent width {width} is not a positive multiple of {c} channels"
            )));
        }
        Self::new(levels, width / c)
    }

    pub fn with_literal_bound(mut self, literal: bool) -> Self {
        self.literal_bound = literal;
        self
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels.len()
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn width(&self) -> usize {
        self.groups * self.levels.len()
    }

    pub fn literal_bound(&self) -> bool {
        self.literal_bound
    }

    /// Multiplier of `tanh` for channel `i`.
    pub fn half_width(&self, i: usize) -> f64 {
        let l = self.levels[i];
        if self.literal_bound {
            (l / 2) as f64
        } else {
            (l as f64 - 1.0) / 2.0
        }
    }

    fn offset(&self, i: usize) -> f64 {
        if !self.literal_bound && self.levels[i] % 2 == 0 {
            0.5
        } else {
            0.0
        }
    }

    /// Number of grid points of channel `i`.
    pub fn radix(&self, i: usize) -> u64 {
        if self.literal_bound {
            2 * (self.levels[i] / 2) as u64 + 1
        } else {
            self.levels[i] as u64
        }
    }

    fn radices(&self) -> Vec<u64> {
        (0..self.channels()).map(|i| self.radix(i)).collect()
    }

    /// Number of distinct codewords per group.
    pub fn codebook_size(&self) -> u64 {
        self.radices().iter().product()
    }

    /// Bounding function of channel `i`.
    pub fn bound_scalar(&self, i: usize, v: f64) -> f64 {
        self.half_width(i) * v.tanh()
    }

    /// Rounds an already bounded value of channel `i` onto its grid.
    pub fn round_scalar(&self, i: usize, b: f64) -> f64 {
        let o = self.offset(i);
        (b + o).round() - o
    }

    fn check_width(&self, width: usize, ctx: &str) -> Result<()> {
        if width != self.width() {
            return Err(shape_err(ctx, self.width(), width));
        }
        Ok(())
    }

    /// Bounds one group of `c` raw values.
    pub fn bound(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.channels() {
            return Err(shape_err("fsq bound", self.channels(), v.len()));
        }
        Ok(v.iter().enumerate().map(|(i, &x)| self.bound_scalar(i, x)).collect())
    }

    fn hard<T: Scalar>(&self, bounded: &Tensor<T>) -> Tensor<T> {
        let c = self.channels();
        let mut out = bounded.clone();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            let i = j % c;
            let o = T::of(self.offset(i));
            *v = (*v + o).round() - o;
        }
        out
    }

    fn scales<T: Scalar>(&self) -> Vec<T> {
        (0..self.channels()).map(|i| T::of(self.half_width(i))).collect()
    }

    /// Hard quantization of a `[B, W]` batch. Returns the quantized batch and
    /// `B · groups` codebook indices (row-major).
    pub fn quantize<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u64>)> {
        self.check_width(x.cols(), "fsq quantize")?;
        let scales: Vec<T> = self.scales();
        let c = self.channels();
        let mut bounded = x.clone();
        for (j, v) in bounded.data_mut().iter_mut().enumerate() {
            *v = scales[j % c] * v.tanh();
        }
        let z = self.hard(&bounded);
        let codes = self.codes(&z)?;
        Ok((z, codes))
    }

    /// Straight-through quantization on the tape: forward is
    /// [`Self::quantize`], backward is the Jacobian of the bound alone.
    pub fn quantize_ste<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check_width(g.value(x).cols(), "fsq quantize_ste")?;
        let bounded = g.scaled_tanh(x, &self.scales::<T>())?;
        let hard = self.hard(g.value(bounded));
        g.straight_through(bounded, hard)
    }

    /// Indices of every group of an already quantized `[B, W]` batch.
    pub fn codes<T: Scalar>(&self, z: &Tensor<T>) -> Result<Vec<u64>> {
        self.check_width(z.cols(), "fsq codes")?;
        let c = self.channels();
        let mut out = Vec::with_capacity(z.rows() * self.groups);
        for chunk in z.data().chunks(c) {
            let w = Codeword(chunk.iter().map(|v| v.to_f64_lossy()).collect());
            out.push(self.codeword_to_index(&w)?);
        }
        Ok(out)
    }

    pub fn codeword_to_index(&self, w: &Codeword) -> Result<u64> {
        if w.0.len() != self.channels() {
            return Err(shape_err("codeword", self.channels(), w.0.len()));
        }
        let mut index = 0u64;
        let mut stride = 1u64;
        for (i, &v) in w.0.iter().enumerate() {
            let digit = v + self.lowest_shift(i);
            let r = self.radix(i);
            if digit.fract() != 0.0 || digit < 0.0 || digit >= r as f64 {
                return Err(Error::Fsq(format!("value {v} is not on the grid of channel {i}")));
            }
            index += digit as u64 * stride;
            stride *= r;
        }
        Ok(index)
    }

    pub fn index_to_codeword(&self, index: u64) -> Result<Codeword> {
        let size = self.codebook_size();
        if index >= size {
            return Err(Error::IndexOutOfRange { index, size });
        }
        let mut rest = index;
        let mut values = Vec::with_capacity(self.channels());
        for i in 0..self.channels() {
            let r = self.radix(i);
            values.push((rest % r) as f64 - self.lowest_shift(i));
            rest /= r;
        }
        Ok(Codeword(values))
    }

    /// Distance from the lowest grid value of channel `i` to zero.
    fn lowest_shift(&self, i: usize) -> f64 {
        (self.radix(i) as f64 - 1.0) / 2.0
    }

    /// Whether every entry of `z` lies on its channel grid.
    pub fn is_valid<T: Scalar>(&self, z: &Tensor<T>) -> bool {
        z.cols() == self.width() && self.codes(z).is_ok()
    }
}

/// Cumulative record of which codewords each group has emitted.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CodeHistory {
    codebook_size: u64,
    seen: Vec<Vec<u64>>,
    counts: Vec<u64>,
}

impl CodeHistory {
    pub fn new(spec: &FsqSpec) -> Self {
        let size = spec.codebook_size();
        let words = size.div_ceil(64) as usize;
        Self {
            codebook_size: size,
            seen: vec![vec![0; words]; spec.groups()],
            counts: vec![0; spec.groups()],
        }
    }

    /// Adds row-major codes as returned by [`FsqSpec::quantize`].
    pub fn observe(&mut self, codes: &[u64]) {
        let groups = self.seen.len();
        for (k, &code) in codes.iter().enumerate() {
            let g = k % groups;
            let (w, b) = ((code / 64) as usize, code % 64);
            if self.seen[g][w] & (1 << b) == 0 {
                self.seen[g][w] |= 1 << b;
                self.counts[g] += 1;
            }
        }
    }

    /// Mean over groups of `distinct codes seen / |C|`.
    pub fn active_fraction(&self) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        let size = self.codebook_size as f64;
        self.counts.iter().map(|&c| c as f64 / size).sum::<f64>() / self.counts.len() as f64
    }

    pub fn distinct(&self, group: usize) -> u64 {
        self.counts[group]
    }
}

/// Active fraction of an explicit per-group index history.
pub fn active_fraction(history: &[Vec<u64>], spec: &FsqSpec) -> f64 {
    let mut h = CodeHistory::new(spec);
    for (g, codes) in history.iter().enumerate().take(spec.groups()) {
        for &c in codes.iter().filter(|&&c| c < h.codebook_size) {
            let (w, b) = ((c / 64) as usize, c % 64);
            if h.seen[g][w] & (1 << b) == 0 {
                h.seen[g][w] |= 1 << b;
                h.counts[g] += 1;
            }
        }
    }
    h.active_fraction()
}
