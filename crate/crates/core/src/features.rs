//! Dense feature maps, the toy strided-convolution backbone, and cross-scale
//! fusion between the 1/8 and 1/32 maps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SemError};
use crate::params::ParamStore;

/// Dense `H x W x C` descriptor grid at a fixed downsampling factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Denominator relative to the input image: 2, 8 or 32.
    pub scale: usize,
    /// Row-major `[y][x][c]`.
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, scale: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(SemError::BadDimensions(format!(
                "feature map must be non-empty, got {height}x{width}x{channels}"
            )));
        }
        if ![2, 8, 32].contains(&scale) {
            return Err(SemError::ScaleMismatch(format!("unsupported feature scale 1/{scale}")));
        }
        if data.len() != height * width * channels {
            return Err(SemError::BadDimensions(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SemError::BadDimensions("feature map contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            scale,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, scale: usize) -> Self {
        Self {
            height,
            width,
            channels,
            scale,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Descriptor of the flattened (row-major) cell index.
    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Flattens to an `HW x C` matrix, one cell per row.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.cells(), self.channels, &self.data)
    }

    /// Inverse of [`FeatureMap::to_matrix`].
    pub fn from_matrix(m: &DMatrix<f64>, height: usize, width: usize, scale: usize) -> Self {
        assert_eq!(m.nrows(), height * width, "row count must equal cell count");
        let channels = m.ncols();
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Self {
            height,
            width,
            channels,
            scale,
            data,
        }
    }
}

/// Grayscale image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(SemError::BadDimensions(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Plain `[y][x][c]` activation volume used inside the backbone.
struct Volume {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Volume {
    fn relu(mut self) -> Self {
        for v in self.data.iter_mut() {
            *v = v.max(0.0);
        }
        self
    }

    fn into_map(self, scale: usize) -> FeatureMap {
        FeatureMap {
            height: self.h,
            width: self.w,
            channels: self.c,
            scale,
            data: self.data,
        }
    }
}

/// 3x3 convolution with zero padding 1.
fn conv3x3(input: &Volume, weight: &[f64], bias: &[f64], out_c: usize, stride: usize) -> Volume {
    let oh = input.h.div_ceil(stride);
    let ow = input.w.div_ceil(stride);
    let ic = input.c;
    let mut data = vec![0.0; oh * ow * out_c];
    for oy in 0..oh {
        for ox in 0..ow {
            let out = &mut data[(oy * ow + ox) * out_c..(oy * ow + ox + 1) * out_c];
            out.copy_from_slice(bias);
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= input.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= input.w as isize {
                        continue;
                    }
                    let px = &input.data[(iy as usize * input.w + ix as usize) * ic..][..ic];
                    for (o, acc) in out.iter_mut().enumerate() {
                        let wbase = o * ic * 9 + ky * 3 + kx;
                        for (i, v) in px.iter().enumerate() {
                            *acc += weight[wbase + i * 9] * v;
                        }
                    }
                }
            }
        }
    }
    Volume {
        h: oh,
        w: ow,
        c: out_c,
        data,
    }
}

fn conv_stage(store: &ParamStore, name: &str, input: &Volume, stride: usize) -> Result<Volume> {
    let w = store.get(&format!("{name}.weight"))?;
    let out_c = w.dims.first().copied().unwrap_or(0);
    let expected = [out_c, input.c, 3, 3];
    let w = store.expect(&format!("{name}.weight"), &expected)?;
    let b = store.expect(&format!("{name}.bias"), &[out_c])?;
    Ok(conv3x3(input, &w.data, &b.data, out_c, stride))
}

/// Runs the toy backbone and returns the `(1/8, 1/32, 1/2)` maps.
///
/// Three stride-2 stages reach 1/8, two more reach 1/32, and a stride-1
/// convolution on the first stage gives the 1/2 refinement map. ReLU sits
/// between stages; the emitted maps are pre-activation.
pub fn extract_features(image: &GrayImage, params: &ParamStore) -> Result<(FeatureMap, FeatureMap, FeatureMap)> {
    if image.width == 0 || image.height == 0 || !image.width.is_multiple_of(32) || !image.height.is_multiple_of(32) {
        return Err(SemError::BadDimensions(format!(
            "image dimensions must be positive multiples of 32, got {}x{}",
            image.width, image.height
        )));
    }
    let input = Volume {
        h: image.height,
        w: image.width,
        c: 1,
        data: image.data.clone(),
    };
    let s1 = conv_stage(params, "backbone.stage1", &input, 2)?.relu();
    let s2 = conv_stage(params, "backbone.stage2", &s1, 2)?.relu();
    let f8 = conv_stage(params, "backbone.stage3", &s2, 2)?;
    let s4 = conv_stage(
        params,
        "backbone.stage4",
        &Volume {
            data: f8.data.clone(),
            ..f8
        }
        .relu(),
        2,
    )?
    .relu();
    let f32_ = conv_stage(params, "backbone.stage5", &s4, 2)?;
    let fine = conv_stage(params, "backbone.fine", &s1, 1)?;
    Ok((f8.into_map(8), f32_.into_map(32), fine.into_map(2)))
}

/// Maps at the three working resolutions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub coarse: FeatureMap,
    pub global: FeatureMap,
    pub fine: FeatureMap,
}

impl FeaturePyramid {
    /// Checks scales, channel agreement and the 4x size relation between the
    /// 1/8 and 1/32 maps.
    pub fn validate(&self) -> Result<()> {
        if self.coarse.scale != 8 || self.global.scale != 32 || self.fine.scale != 2 {
            return Err(SemError::ScaleMismatch(format!(
                "expected scales 8/32/2, got {}/{}/{}",
                self.coarse.scale, self.global.scale, self.fine.scale
            )));
        }
        if self.coarse.channels != self.global.channels {
            return Err(SemError::ShapeMismatch(format!(
                "1/8 map has {} channels, 1/32 map has {}",
                self.coarse.channels, self.global.channels
            )));
        }
        if self.coarse.width != 4 * self.global.width || self.coarse.height != 4 * self.global.height {
            return Err(SemError::ShapeMismatch(format!(
                "1/8 map {}x{} is not 4x the 1/32 map {}x{}",
                self.coarse.width, self.coarse.height, self.global.width, self.global.height
            )));
        }
        Ok(())
    }
}

/// [`extract_features`] packed as a pyramid.
pub fn extract_pyramid(image: &GrayImage, params: &ParamStore) -> Result<FeaturePyramid> {
    let (coarse, global, fine) = extract_features(image, params)?;
    Ok(FeaturePyramid { coarse, global, fine })
}

/// 1x1 convolution as a dense layer applied at each cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1 {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Conv1x1 {
    pub fn load(store: &ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.matrix(&format!("{name}.weight"), channels, channels)?,
            bias: store.vector(&format!("{name}.bias"), channels)?,
        })
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, acc) in out.iter_mut().enumerate() {
            *acc = self.bias[o] + self.weight.row(o).iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Weights of both directions of the cross-scale fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleFusion {
    pub down: Conv1x1,
    pub up: Conv1x1,
}

impl ScaleFusion {
    pub fn load(store: &ParamStore, channels: usize) -> Result<Self> {
        Ok(Self {
            down: Conv1x1::load(store, "fuse.down", channels)?,
            up: Conv1x1::load(store, "fuse.up", channels)?,
        })
    }
}

/// Exchanges information between the 1/8 and 1/32 maps.
///
/// `f32' = f32 + conv(avgpool4(f8))` and `f8' = f8 + conv(nearest4(f32))`,
/// both computed from the inputs.
pub fn fuse_scales(f8: &FeatureMap, f32_: &FeatureMap, fusion: &ScaleFusion) -> Result<(FeatureMap, FeatureMap)> {
    if f8.scale != 8 || f32_.scale != 32 {
        return Err(SemError::ScaleMismatch(format!(
            "expected scales 1/8 and 1/32, got 1/{} and 1/{}",
            f8.scale, f32_.scale
        )));
    }
    if f8.height != 4 * f32_.height || f8.width != 4 * f32_.width {
        return Err(SemError::ScaleMismatch(format!(
            "1/8 map {}x{} is not 4x the 1/32 map {}x{}",
            f8.height, f8.width, f32_.height, f32_.width
        )));
    }
    let c = f8.channels;
    if f32_.channels != c || fusion.down.weight.nrows() != c || fusion.up.weight.nrows() != c {
        return Err(SemError::ScaleMismatch("channel counts differ between scales".into()));
    }

    let mut out32 = f32_.clone();
    let mut pooled = vec![0.0; c];
    let mut conv = vec![0.0; c];
    for y in 0..f32_.height {
        for x in 0..f32_.width {
            pooled.iter_mut().for_each(|v| *v = 0.0);
            for dy in 0..4 {
                for dx in 0..4 {
                    for (p, v) in pooled.iter_mut().zip(f8.pixel(4 * y + dy, 4 * x + dx)) {
                        *p += v;
                    }
                }
            }
            pooled.iter_mut().for_each(|v| *v /= 16.0);
            fusion.down.apply(&pooled, &mut conv);
            for (o, v) in out32.pixel_mut(y, x).iter_mut().zip(&conv) {
                *o += v;
            }
        }
    }

    let mut out8 = f8.clone();
    let mut up = vec![vec![0.0; c]; f32_.cells()];
    for (i, u) in up.iter_mut().enumerate() {
        fusion.up.apply(f32_.cell(i), u);
    }
    for y in 0..f8.height {
        for x in 0..f8.width {
            let src = &up[(y / 4) * f32_.width + x / 4];
            for (o, v) in out8.pixel_mut(y, x).iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    Ok((out8, out32))
}
