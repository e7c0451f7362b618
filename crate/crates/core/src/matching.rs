//! Coarse matching matrices (dual-softmax), band-restricted rewriting,
//! mutual-nearest-neighbour extraction and window-based fine refinement.

use nalgebra::{DMatrix, Point2};

use crate::error::{Result, SemError};
use crate::features::FeatureMap;
use crate::geometry::{band_mask, cell_center, EpipolarBand};

/// Dense `HW_ref x HW_src` matching matrix with dual-softmax semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    pub scores: DMatrix<f64>,
    /// `(width, height)` of the reference grid.
    pub ref_dims: (usize, usize),
    pub src_dims: (usize, usize),
    pub temperature: f64,
    /// Downsampling factor of the grids (pixels per cell).
    pub scale: usize,
}

impl MatchMatrix {
    pub fn rows(&self) -> usize {
        self.scores.nrows()
    }

    pub fn cols(&self) -> usize {
        self.scores.ncols()
    }

    pub fn transpose(&self) -> Self {
        Self {
            scores: self.scores.transpose(),
            ref_dims: self.src_dims,
            src_dims: self.ref_dims,
            temperature: self.temperature,
            scale: self.scale,
        }
    }

    /// Column of the first maximum in `row`, with its value.
    pub fn row_argmax(&self, row: usize) -> (usize, f64) {
        argmax(self.scores.row(row).iter().copied())
    }

    pub fn col_argmax(&self, col: usize) -> (usize, f64) {
        argmax(self.scores.column(col).iter().copied())
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Boolean `rows x cols` support; `true` marks a candidate pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl Support {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![true; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    /// One row per band, rasterized over a `grid_w x grid_h` target grid.
    ///
    /// Rows whose band misses every cell center fall back to full support.
    pub fn from_bands(bands: &[EpipolarBand], grid_w: usize, grid_h: usize) -> Self {
        let cols = grid_w * grid_h;
        let mut data = Vec::with_capacity(bands.len() * cols);
        for band in bands {
            let mut row = band_mask(band, grid_w, grid_h);
            if !row.iter().any(|&b| b) {
                row.iter_mut().for_each(|b| *b = true);
            }
            data.extend(row);
        }
        Self {
            rows: bands.len(),
            cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![false; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.get(r, c);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Elementwise OR.
    pub fn union(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        }
    }
}

/// Scaled inner products `tau * <f_ref(i), f_src(j)>`, filled only on the support.
pub fn similarity(f_ref: &FeatureMap, f_src: &FeatureMap, tau: f64, support: Option<&Support>) -> Result<DMatrix<f64>> {
    if f_ref.channels != f_src.channels {
        return Err(SemError::ShapeMismatch(format!(
            "channel counts differ: {} vs {}",
            f_ref.channels, f_src.channels
        )));
    }
    let (n, m) = (f_ref.cells(), f_src.cells());
    if let Some(s) = support {
        if (s.rows, s.cols) != (n, m) {
            return Err(SemError::ShapeMismatch(format!(
                "support is {}x{}, matrix is {n}x{m}",
                s.rows, s.cols
            )));
        }
    }
    let mut rows = vec![0.0; n * m];
    for (i, out) in rows.chunks_mut(m.max(1)).enumerate().take(n) {
        let a = f_ref.cell(i);
        for (j, o) in out.iter_mut().enumerate() {
            if support.is_none_or(|s| s.data[i * m + j]) {
                let dot: f64 = a.iter().zip(f_src.cell(j)).map(|(x, y)| x * y).sum();
                *o = tau * dot;
            }
        }
    }
    let sim = DMatrix::from_row_slice(n, m, &rows);
    Ok(sim)
}

/// Row-softmax times column-softmax of `sim`, each taken over the support.
/// Entries outside the support are zero.
pub fn dual_softmax_scores(sim: &DMatrix<f64>, support: Option<&Support>) -> DMatrix<f64> {
    let (n, m) = sim.shape();
    let inside = |i: usize, j: usize| support.is_none_or(|s| s.data[i * m + j]);

    // Row softmax on the transpose so each row is a contiguous column.
    let sim_t = sim.transpose();
    let mut row_t = DMatrix::zeros(m, n);
    for i in 0..n {
        let src = sim_t.column(i);
        let src = src.as_slice();
        let max = (0..m)
            .filter(|&j| inside(i, j))
            .map(|j| src[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut dst = row_t.column_mut(i);
        let dst = dst.as_mut_slice();
        let mut total = 0.0;
        for j in (0..m).filter(|&j| inside(i, j)) {
            let e = (src[j] - max).exp();
            dst[j] = e;
            total += e;
        }
        dst.iter_mut().for_each(|v| *v /= total);
    }
    let row_sm = row_t.transpose();

    let mut out = DMatrix::zeros(n, m);
    for j in 0..m {
        let src = sim.column(j);
        let src = src.as_slice();
        let max = (0..n)
            .filter(|&i| inside(i, j))
            .map(|i| src[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let rs = row_sm.column(j);
        let rs = rs.as_slice();
        let mut dst = out.column_mut(j);
        let dst = dst.as_mut_slice();
        let mut total = 0.0;
        for i in (0..n).filter(|&i| inside(i, j)) {
            let e = (src[i] - max).exp();
            dst[i] = e;
            total += e;
        }
        for i in 0..n {
            dst[i] = dst[i] / total * rs[i];
        }
    }
    out
}

fn dims(f: &FeatureMap) -> (usize, usize) {
    (f.width, f.height)
}

/// Global dual-softmax matching matrix of two coarse maps.
pub fn dual_softmax(f_ref: &FeatureMap, f_src: &FeatureMap, tau: f64) -> Result<MatchMatrix> {
    if !(tau > 0.0) {
        return Err(SemError::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let sim = similarity(f_ref, f_src, tau, None)?;
    Ok(MatchMatrix {
        scores: dual_softmax_scores(&sim, None),
        ref_dims: dims(f_ref),
        src_dims: dims(f_src),
        temperature: tau,
        scale: f_ref.scale,
    })
}

/// Candidate support from bands in both directions.
///
/// `(i, j)` is a candidate when `j` is in the band of reference cell `i` or
/// `i` is in the band of source cell `j`. Invalid bands open their whole row
/// (or column).
pub fn band_support(
    bands_ref: &[EpipolarBand],
    bands_src: &[EpipolarBand],
    ref_dims: (usize, usize),
    src_dims: (usize, usize),
) -> Result<Support> {
    let n = ref_dims.0 * ref_dims.1;
    let m = src_dims.0 * src_dims.1;
    if bands_ref.len() != n || bands_src.len() != m {
        return Err(SemError::ShapeMismatch(format!(
            "band lists have {} and {} entries, grids have {n} and {m} cells",
            bands_ref.len(),
            bands_src.len()
        )));
    }
    let forward = Support::from_bands(bands_ref, src_dims.0, src_dims.1);
    let backward = Support::from_bands(bands_src, ref_dims.0, ref_dims.1).transpose();
    Ok(forward.union(&backward))
}

/// Rebuilds the matching matrix restricted to the epipolar bands.
///
/// The previous matrix is replaced wholesale: similarities are recomputed on
/// the band support only, softmaxes run over that support, and everything
/// outside it is zero.
pub fn epipolar_rewrite(
    f_ref: &FeatureMap,
    f_src: &FeatureMap,
    bands_ref: &[EpipolarBand],
    bands_src: &[EpipolarBand],
    tau: f64,
) -> Result<MatchMatrix> {
    if !(tau > 0.0) {
        return Err(SemError::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let support = band_support(bands_ref, bands_src, dims(f_ref), dims(f_src))?;
    let support = (!support.is_full()).then_some(support);
    let sim = similarity(f_ref, f_src, tau, support.as_ref())?;
    Ok(MatchMatrix {
        scores: dual_softmax_scores(&sim, support.as_ref()),
        ref_dims: dims(f_ref),
        src_dims: dims(f_src),
        temperature: tau,
        scale: f_ref.scale,
    })
}

/// One correspondence between a reference and a source cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub ref_index: usize,
    pub src_index: usize,
    pub confidence: f64,
    /// Reference pixel (cell center).
    pub ref_pt: Point2<f64>,
    /// Source pixel: the cell center until refined, then the subpixel estimate.
    pub src_pt: Point2<f64>,
    /// Total variance of the refinement heatmap, in fine cells squared; 0 if unrefined.
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matches.iter().map(|m| (m.ref_index, m.src_index)).collect()
    }
}

/// Mutual-nearest-neighbour matches whose score reaches `threshold`.
pub fn extract_matches(m: &MatchMatrix, threshold: f64) -> MatchSet {
    let col_best: Vec<usize> = (0..m.cols()).map(|j| m.col_argmax(j).0).collect();
    let mut matches = Vec::new();
    for i in 0..m.rows() {
        let (j, score) = m.row_argmax(i);
        if score >= threshold && col_best[j] == i {
            let (rw, sw) = (m.ref_dims.0, m.src_dims.0);
            matches.push(Match {
                ref_index: i,
                src_index: j,
                confidence: score,
                ref_pt: cell_center(i % rw, i / rw, m.scale),
                src_pt: cell_center(j % sw, j / sw, m.scale),
                sigma2: 0.0,
            });
        }
    }
    MatchSet { matches }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Odd window side, in fine cells.
    pub window: usize,
    pub temperature: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            window: 5,
            temperature: 1.0,
        }
    }
}

/// Result of refining one match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub src_pt: Point2<f64>,
    pub sigma2: f64,
    /// Expected offset from the window center, in fine cells.
    pub expectation: (f64, f64),
}

fn fine_index(v: f64, scale: usize, len: usize) -> usize {
    ((v / scale as f64).floor().max(0.0) as usize).min(len - 1)
}

/// Window center clamped so the whole window lies in the map.
fn clamp_center(c: usize, half: usize, len: usize) -> usize {
    if len <= 2 * half {
        return len / 2;
    }
    c.clamp(half, len - 1 - half)
}

/// Refines a coarse match by correlating the reference fine descriptor
/// against a window of the source fine map.
///
/// The heatmap is the softmax of the scaled correlations; its expectation
/// gives the subpixel source location and the trace of its covariance gives
/// `sigma2` (fine cells squared). Windows at the border are shifted inward.
pub fn refine_match(
    ref_pt: &Point2<f64>,
    src_pt: &Point2<f64>,
    fine_ref: &FeatureMap,
    fine_src: &FeatureMap,
    config: &RefineConfig,
) -> Result<Refinement> {
    let w = config.window;
    if w.is_multiple_of(2) || w == 0 {
        return Err(SemError::InvalidConfig(format!(
            "refinement window must be odd, got {w}"
        )));
    }
    if fine_ref.channels != fine_src.channels {
        return Err(SemError::ShapeMismatch(
            "fine maps have different channel counts".into(),
        ));
    }
    let half = w / 2;
    let rx = fine_index(ref_pt.x, fine_ref.scale, fine_ref.width);
    let ry = fine_index(ref_pt.y, fine_ref.scale, fine_ref.height);
    let query = fine_ref.pixel(ry, rx);

    let cx = clamp_center(
        fine_index(src_pt.x, fine_src.scale, fine_src.width),
        half,
        fine_src.width,
    );
    let cy = clamp_center(
        fine_index(src_pt.y, fine_src.scale, fine_src.height),
        half,
        fine_src.height,
    );

    let mut logits = Vec::with_capacity(w * w);
    let mut offsets = Vec::with_capacity(w * w);
    for dy in -(half as isize)..=half as isize {
        for dx in -(half as isize)..=half as isize {
            let (x, y) = (cx as isize + dx, cy as isize + dy);
            if x < 0 || y < 0 || x >= fine_src.width as isize || y >= fine_src.height as isize {
                continue;
            }
            let dot: f64 = query
                .iter()
                .zip(fine_src.pixel(y as usize, x as usize))
                .map(|(a, b)| a * b)
                .sum();
            logits.push(config.temperature * dot);
            offsets.push((dx as f64, dy as f64));
        }
    }
    let heat = softmax(&logits);
    let (mut ex, mut ey) = (0.0, 0.0);
    for (p, (dx, dy)) in heat.iter().zip(&offsets) {
        ex += p * dx;
        ey += p * dy;
    }
    let mut var = 0.0;
    for (p, (dx, dy)) in heat.iter().zip(&offsets) {
        var += p * ((dx - ex).powi(2) + (dy - ey).powi(2));
    }
    let s = fine_src.scale as f64;
    Ok(Refinement {
        src_pt: Point2::new((cx as f64 + ex + 0.5) * s, (cy as f64 + ey + 0.5) * s),
        sigma2: var,
        expectation: (ex, ey),
    })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
