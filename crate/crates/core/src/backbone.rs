//! Single-layer convolutional backbone: convolution, rectifier, max-pool and
//! per-position L2 normalization, with an exact backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    /// `channels` kernels laid out as `[c][dy][dx][rgb]`.
    pub filters: Vec<f64>,
    pub bias: Vec<f64>,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
    pub pool_stride: usize,
    /// Positions whose pooled vector has norm below this are flagged invalid.
    pub epsilon: f64,
}

/// Gradient with respect to [`BackboneParams::filters`] and [`BackboneParams::bias`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGradient {
    pub filters: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Spatial relation between feature positions and image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGeometry {
    pub image_height: usize,
    pub image_width: usize,
    pub map_height: usize,
    pub map_width: usize,
    /// Side of the square receptive field of one feature position, in pixels.
    pub receptive_field: usize,
    /// Pixel offset between neighbouring feature positions.
    pub step: usize,
}

impl FeatureGeometry {
    /// Pixel window `(row0, col0, row1, col1)` (exclusive ends) seen by a position.
    pub fn receptive_field_of(&self, row: usize, col: usize) -> (usize, usize, usize, usize) {
        let r0 = row * self.step;
        let c0 = col * self.step;
        (
            r0,
            c0,
            (r0 + self.receptive_field).min(self.image_height),
            (c0 + self.receptive_field).min(self.image_width),
        )
    }

    pub fn n_positions(&self) -> usize {
        self.map_height * self.map_width
    }
}

impl BackboneParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.channels >= 8, InvalidArgument, "need at least 8 channels, got {}", self.channels);
        ensure!(self.kernel % 2 == 1, InvalidArgument, "kernel size must be odd, got {}", self.kernel);
        ensure!(self.epsilon > 0.0, InvalidArgument, "epsilon must be positive");
        ensure!(
            self.stride >= 1 && self.pool >= 1 && self.pool_stride >= 1,
            InvalidArgument,
            "stride and pooling must be >= 1"
        );
        ensure!(
            self.filters.len() == self.channels * self.kernel_len() && self.bias.len() == self.channels,
            DimensionMismatch,
            "filter bank does not match {} channels of size {}",
            self.channels,
            self.kernel
        );
        Ok(())
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel * self.kernel * 3
    }

    pub fn depth(&self) -> usize {
        self.channels
    }

    fn conv_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if h < self.kernel || w < self.kernel {
            return None;
        }
        Some(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }

    pub fn geometry(&self, image_height: usize, image_width: usize) -> Result<FeatureGeometry> {
        let (ch, cw) = self.conv_dims(image_height, image_width).ok_or_else(|| {
            crate::Error::DimensionMismatch(format!(
                "image {image_height}x{image_width} smaller than kernel {}",
                self.kernel
            ))
        })?;
        ensure!(
            ch >= self.pool && cw >= self.pool,
            DimensionMismatch,
            "convolution output {ch}x{cw} smaller than pooling window {}",
            self.pool
        );
        let mh = (ch - self.pool) / self.pool_stride + 1;
        let mw = (cw - self.pool) / self.pool_stride + 1;
        ensure!(mh >= 2 && mw >= 2, DimensionMismatch, "feature map {mh}x{mw} smaller than 2x2");
        Ok(FeatureGeometry {
            image_height,
            image_width,
            map_height: mh,
            map_width: mw,
            receptive_field: (self.pool - 1) * self.stride + self.kernel,
            step: self.pool_stride * self.stride,
        })
    }

    /// Zero-bias bank of the given shape with deterministic placeholder filters.
    pub fn zeros(channels: usize, kernel: usize) -> Self {
        Self {
            filters: vec![0.0; channels * kernel * kernel * 3],
            bias: vec![0.0; channels],
            channels,
            kernel,
            stride: 1,
            pool: 4,
            pool_stride: 4,
            epsilon: 1e-6,
        }
    }
}

/// Grid of unit-norm feature vectors; positions may be flagged invalid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl FeatureMap {
    /// Normalizes raw vectors to unit length. Vectors whose norm is below `epsilon`
    /// (or non-finite) are flagged invalid and zeroed.
    pub fn from_raw(height: usize, width: usize, depth: usize, mut data: Vec<f64>, epsilon: f64) -> Result<Self> {
        ensure!(height >= 1 && width >= 1 && depth >= 1, InvalidArgument, "empty feature map");
        ensure!(
            data.len() == height * width * depth,
            DimensionMismatch,
            "expected {} values, got {}",
            height * width * depth,
            data.len()
        );
        let mut valid = vec![false; height * width];
        for (i, v) in data.chunks_exact_mut(depth).enumerate() {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n.is_finite() && n >= epsilon {
                v.iter_mut().for_each(|x| *x /= n);
                valid[i] = true;
            } else {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_positions(&self) -> usize {
        self.height * self.width
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    /// Vector at flat position `i` (row-major); `None` when invalid.
    pub fn vector(&self, i: usize) -> Option<&[f64]> {
        self.valid[i].then(|| &self.data[i * self.depth..(i + 1) * self.depth])
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Mean of the valid vectors (zero vector when none are valid).
    pub fn mean_vector(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.depth];
        let mut n = 0usize;
        for i in 0..self.n_positions() {
            if let Some(v) = self.vector(i) {
                acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                n += 1;
            }
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        acc
    }
}

/// Intermediate values kept by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    conv_h: usize,
    conv_w: usize,
    /// For every (pooled position, channel): flat conv-output index of the routed maximum,
    /// or `usize::MAX` when the rectified window is all zero.
    argmax: Vec<usize>,
    norms: Vec<f64>,
}

#[inline]
fn gather_patch(img: &Image, p: &BackboneParams, y: usize, x: usize, out: &mut [f64]) {
    let data = img.data();
    let w = img.width();
    let k = p.kernel;
    let (r0, c0) = (y * p.stride, x * p.stride);
    let mut o = 0;
    for dy in 0..k {
        let base = ((r0 + dy) * w + c0) * 3;
        for v in &data[base..base + k * 3] {
            out[o] = f64::from(*v);
            o += 1;
        }
    }
}

#[inline]
fn conv_at(img: &Image, p: &BackboneParams, y: usize, x: usize, patch: &mut [f64], out: &mut [f64]) {
    gather_patch(img, p, y, x, patch);
    let kl = patch.len();
    for (c, o) in out.iter_mut().enumerate() {
        let f = &p.filters[c * kl..(c + 1) * kl];
        let mut s = p.bias[c];
        for (a, b) in f.iter().zip(patch.iter()) {
            s += a * b;
        }
        *o = s;
    }
}

fn check_image(img: &Image, p: &BackboneParams) -> Result<FeatureGeometry> {
    ensure!(
        p.filters.len() == p.channels * p.kernel_len() && p.bias.len() == p.channels,
        DimensionMismatch,
        "inconsistent backbone parameters"
    );
    p.geometry(img.height(), img.width())
}

/// Pre-activation convolution outputs, laid out `[y][x][c]`.
fn conv_full(img: &Image, p: &BackboneParams, ch: usize, cw: usize) -> Vec<f64> {
    let c = p.channels;
    let mut out = vec![0.0; ch * cw * c];
    let mut patch = vec![0.0; p.kernel_len()];
    for y in 0..ch {
        for x in 0..cw {
            let o = (y * cw + x) * c;
            conv_at(img, p, y, x, &mut patch, &mut out[o..o + c]);
        }
    }
    out
}

/// Max-pools rectified conv outputs for one pooled cell, writing values and argmax routes.
fn pool_cell(conv: &[f64], cw: usize, p: &BackboneParams, py: usize, px: usize, vals: &mut [f64], routes: &mut [usize]) {
    let c = p.channels;
    vals.iter_mut().for_each(|v| *v = 0.0);
    routes.iter_mut().for_each(|r| *r = usize::MAX);
    for wy in 0..p.pool {
        for wx in 0..p.pool {
            let idx = (py * p.pool_stride + wy) * cw + px * p.pool_stride + wx;
            let row = &conv[idx * c..(idx + 1) * c];
            for ch in 0..c {
                // strict comparison keeps the lowest-index maximum
                if row[ch] > vals[ch] {
                    vals[ch] = row[ch];
                    routes[ch] = idx;
                }
            }
        }
    }
}

fn finish_map(geo: &FeatureGeometry, depth: usize, pooled: Vec<f64>, epsilon: f64) -> (FeatureMap, Vec<f64>) {
    let mut norms = Vec::with_capacity(geo.n_positions());
    for v in pooled.chunks_exact(depth) {
        norms.push(v.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    let map = FeatureMap::from_raw(geo.map_height, geo.map_width, depth, pooled, epsilon)
        .expect("shapes are consistent by construction");
    (map, norms)
}

/// Forward pass keeping what the backward pass needs.
pub fn forward(img: &Image, p: &BackboneParams) -> Result<(FeatureMap, ForwardCache)> {
    let geo = check_image(img, p)?;
    let (ch, cw) = p.conv_dims(img.height(), img.width()).expect("checked by geometry");
    let conv = conv_full(img, p, ch, cw);
    let c = p.channels;
    let n = geo.n_positions();
    let mut pooled = vec![0.0; n * c];
    let mut argmax = vec![usize::MAX; n * c];
    for py in 0..geo.map_height {
        for px in 0..geo.map_width {
            let i = py * geo.map_width + px;
            pool_cell(&conv, cw, p, py, px, &mut pooled[i * c..(i + 1) * c], &mut argmax[i * c..(i + 1) * c]);
        }
    }
    let (map, norms) = finish_map(&geo, c, pooled, p.epsilon);
    Ok((
        map,
        ForwardCache {
            conv_h: ch,
            conv_w: cw,
            argmax,
            norms,
        },
    ))
}

/// Extracts the unit-normalized feature map of an image.
pub fn extract_features(img: &Image, p: &BackboneParams) -> Result<FeatureMap> {
    forward(img, p).map(|(m, _)| m)
}

/// Gradient of a scalar loss with respect to the backbone parameters, given the
/// loss gradient `upstream` with respect to every feature vector (`[position][channel]`).
/// Invalid positions contribute nothing.
pub fn backbone_gradient_cached(
    img: &Image,
    p: &BackboneParams,
    map: &FeatureMap,
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<BackboneGradient> {
    let c = p.channels;
    ensure!(
        upstream.len() == map.n_positions() * c,
        DimensionMismatch,
        "upstream gradient has {} values, expected {}",
        upstream.len(),
        map.n_positions() * c
    );
    let kl = p.kernel_len();
    let mut g = BackboneGradient {
        filters: vec![0.0; c * kl],
        bias: vec![0.0; c],
    };
    let mut patch = vec![0.0; kl];
    let mut dv = vec![0.0; c];
    for i in 0..map.n_positions() {
        let Some(f) = map.vector(i) else { continue };
        let up = &upstream[i * c..(i + 1) * c];
        let proj: f64 = f.iter().zip(up).map(|(a, b)| a * b).sum();
        let norm = cache.norms[i];
        for ch in 0..c {
            dv[ch] = (up[ch] - f[ch] * proj) / norm;
        }
        for ch in 0..c {
            let route = cache.argmax[i * c + ch];
            if route == usize::MAX || dv[ch] == 0.0 {
                continue;
            }
            let (y, x) = (route / cache.conv_w, route % cache.conv_w);
            debug_assert!(y < cache.conv_h);
            gather_patch(img, p, y, x, &mut patch);
            let gf = &mut g.filters[ch * kl..(ch + 1) * kl];
            for (a, b) in gf.iter_mut().zip(&patch) {
                *a += dv[ch] * b;
            }
            g.bias[ch] += dv[ch];
        }
    }
    Ok(g)
}

/// Convenience wrapper that runs the forward pass itself.
pub fn backbone_gradient(img: &Image, p: &BackboneParams, upstream: &[f64]) -> Result<BackboneGradient> {
    let (map, cache) = forward(img, p)?;
    backbone_gradient_cached(img, p, &map, &cache, upstream)
}

/// Incremental extractor for query-heavy workloads: it remembers the previous image
/// and recomputes only the convolution outputs whose window touches a changed pixel.
/// Results are bit-identical to [`extract_features`].
#[derive(Debug, Clone)]
pub struct FeatureCache<'a> {
    params: &'a BackboneParams,
    state: Option<CacheState>,
}

#[derive(Debug, Clone)]
struct CacheState {
    image: Image,
    conv: Vec<f64>,
    pooled: Vec<f64>,
    geo: FeatureGeometry,
}

impl<'a> FeatureCache<'a> {
    pub fn new(params: &'a BackboneParams) -> Self {
        Self { params, state: None }
    }

    pub fn params(&self) -> &BackboneParams {
        self.params
    }

    pub fn extract(&mut self, img: &Image) -> Result<FeatureMap> {
        let p = self.params;
        let reusable = self
            .state
            .as_ref()
            .is_some_and(|s| s.image.height() == img.height() && s.image.width() == img.width());
        if !reusable {
            let geo = check_image(img, p)?;
            let (ch, cw) = p.conv_dims(img.height(), img.width()).expect("checked");
            let conv = conv_full(img, p, ch, cw);
            let c = p.channels;
            let mut pooled = vec![0.0; geo.n_positions() * c];
            let mut routes = vec![0usize; c];
            for py in 0..geo.map_height {
                for px in 0..geo.map_width {
                    let i = py * geo.map_width + px;
                    pool_cell(&conv, cw, p, py, px, &mut pooled[i * c..(i + 1) * c], &mut routes);
                }
            }
            self.state = Some(CacheState {
                image: img.clone(),
                conv,
                pooled,
                geo,
            });
        } else {
            self.update(img);
        }
        let s = self.state.as_ref().expect("state populated above");
        Ok(finish_map(&s.geo, p.channels, s.pooled.clone(), p.epsilon).0)
    }

    fn update(&mut self, img: &Image) {
        let p = self.params;
        let s = self.state.as_mut().expect("caller checked");
        let (h, w) = (img.height(), img.width());
        // prefix sums of the changed-pixel mask
        let mut pre = vec![0u32; (h + 1) * (w + 1)];
        let (old, new) = (s.image.data(), img.data());
        let mut any = false;
        for r in 0..h {
            let mut row = 0u32;
            for c in 0..w {
                let o = (r * w + c) * 3;
                let changed = old[o..o + 3] != new[o..o + 3];
                any |= changed;
                row += u32::from(changed);
                pre[(r + 1) * (w + 1) + c + 1] = pre[r * (w + 1) + c + 1] + row;
            }
        }
        if !any {
            return;
        }
        let (ch, cw) = p.conv_dims(h, w).expect("dims unchanged");
        let c = p.channels;
        let k = p.kernel;
        let mut patch = vec![0.0; p.kernel_len()];
        let mut dirty_conv = vec![false; ch * cw];
        for y in 0..ch {
            for x in 0..cw {
                let (r0, c0) = (y * p.stride, x * p.stride);
                let (r1, c1) = (r0 + k, c0 + k);
                let cnt = pre[r1 * (w + 1) + c1] + pre[r0 * (w + 1) + c0]
                    - pre[r0 * (w + 1) + c1]
                    - pre[r1 * (w + 1) + c0];
                if cnt > 0 {
                    let o = (y * cw + x) * c;
                    conv_at(img, p, y, x, &mut patch, &mut s.conv[o..o + c]);
                    dirty_conv[y * cw + x] = true;
                }
            }
        }
        let mut routes = vec![0usize; c];
        for py in 0..s.geo.map_height {
            for px in 0..s.geo.map_width {
                let touched = (0..p.pool).any(|wy| {
                    (0..p.pool).any(|wx| dirty_conv[(py * p.pool_stride + wy) * cw + px * p.pool_stride + wx])
                });
                if touched {
                    let i = py * s.geo.map_width + px;
                    pool_cell(&s.conv, cw, p, py, px, &mut s.pooled[i * c..(i + 1) * c], &mut routes);
                }
            }
        }
        s.image = img.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::rng_from_seed;

    fn random_params(seed: u64, channels: usize, kernel: usize) -> BackboneParams {
        let mut rng = rng_from_seed(seed);
        let mut p = BackboneParams::zeros(channels, kernel);
        p.filters.iter_mut().for_each(|f| *f = rng.random_range(-1.0..1.0));
        p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        p
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = rng_from_seed(seed);
        let data = (0..h * w * 3).map(|_| rng.random::<f32>()).collect();
        Image::from_vec(h, w, data).unwrap()
    }

    #[test]
    fn output_lattice_shape() {
        let p = random_params(1, 8, 5);
        let g = p.geometry(64, 64).unwrap();
        assert_eq!((g.map_height, g.map_width), (15, 15));
        assert_eq!(g.receptive_field, 8);
        assert_eq!(g.step, 4);
    }

    #[test]
    fn valid_vectors_are_unit_norm() {
        let p = random_params(2, 8, 3);
        let m = extract_features(&random_image(3, 24, 20), &p).unwrap();
        for i in 0..m.n_positions() {
            if let Some(v) = m.vector(i) {
                let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_image_zero_bias_is_all_invalid() {
        let mut p = random_params(4, 8, 3);
        p.bias.iter_mut().for_each(|b| *b = 0.0);
        let m = extract_features(&Image::filled(20, 20, [0.0; 3]), &p).unwrap();
        assert!((0..m.n_positions()).all(|i| !m.is_valid(i)));
    }

    #[test]
    fn too_small_image_is_error() {
        let p = random_params(5, 8, 5);
        assert!(extract_features(&Image::filled(8, 8, [0.5; 3]), &p).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = random_params(6, 8, 3);
        let img = random_image(7, 18, 18);
        let n = p.geometry(18, 18).unwrap().n_positions() * 8;
        let g = backbone_gradient(&img, &p, &vec![0.0; n]).unwrap();
        assert!(g.filters.iter().chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn incremental_matches_full_extraction() {
        let p = random_params(8, 8, 5);
        let base = random_image(9, 32, 32);
        let mut cache = FeatureCache::new(&p);
        assert_eq!(cache.extract(&base).unwrap(), extract_features(&base, &p).unwrap());
        let mut rng = rng_from_seed(10);
        let mut img = base.clone();
        for _ in 0..5 {
            let (r, c) = (rng.random_range(0..28), rng.random_range(0..28));
            for dr in 0..4 {
                for dc in 0..4 {
                    img.set(r + dr, c + dc, [rng.random(), rng.random(), rng.random()]);
                }
            }
            assert_eq!(cache.extract(&img).unwrap(), extract_features(&img, &p).unwrap());
            // revert half the time so changes both add and remove
            if rng.random_bool(0.5) {
                img = base.clone();
            }
        }
    }
}
