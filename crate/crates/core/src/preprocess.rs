//! Slice preprocessing and augmentation.
//!
//! Order: quantile clip → min/max normalize → grid distortion (train only) →
//! crop to square → center crop or resize to the network size. Images are
//! interpolated linearly, masks by nearest neighbour, so masks never gain
//! labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::{derive_seed, rng_from_seed, SeedPart};

/// A row-major 2D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Plane<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("{height}x{width} plane with {} values", data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self { height, width, data: vec![v; height * width] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    /// The `h`×`w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        assert!(top + h <= self.height && left + w <= self.width);
        let mut data = Vec::with_capacity(h * w);
        for y in top..top + h {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + w]);
        }
        Self { height: h, width: w, data }
    }

    /// Centered `h`×`w` window; odd margins lose their extra row/column at the bottom/right.
    pub fn center_crop(&self, h: usize, w: usize) -> Self {
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub target_size: [usize; 2],
    pub clip_quantile: f64,
    pub distortion_probability: f64,
    pub distortion_steps: usize,
    pub distortion_limit: f64,
    pub train_mode: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            target_size: [224, 224],
            clip_quantile: 0.999,
            distortion_probability: 0.8,
            distortion_steps: 10,
            distortion_limit: 0.3,
            train_mode: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size.contains(&0) {
            return Err(Error::Config("target size must be positive".into()));
        }
        if !(self.clip_quantile > 0.0 && self.clip_quantile <= 1.0) {
            return Err(Error::Config(format!("clip quantile {} outside (0, 1]", self.clip_quantile)));
        }
        if !(0.0..=1.0).contains(&self.distortion_probability) {
            return Err(Error::Config("distortion probability outside [0, 1]".into()));
        }
        if self.distortion_steps == 0 {
            return Err(Error::Config("distortion steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.distortion_limit) {
            return Err(Error::Config("distortion limit outside [0, 1)".into()));
        }
        Ok(())
    }
}

/// Quantile with linear interpolation between order statistics at rank `(n − 1)·q`.
pub fn quantile(values: &[f32], q: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::Validation("quantile of empty input".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Parameter(format!("quantile {q} outside (0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return Ok(sorted[sorted.len() - 1]);
    }
    let (a, b) = (sorted[lo] as f64, sorted[lo + 1] as f64);
    Ok((a + (h - lo as f64) * (b - a)) as f32)
}

/// Replaces values above `limit` with `limit`.
pub fn clip_to(plane: &Plane<f32>, limit: f32) -> Plane<f32> {
    Plane { data: plane.data.iter().map(|&v| v.min(limit)).collect(), ..*plane }
}

/// Clips a plane at its own `q`-quantile. Volumes use [`quantile`] over all
/// slices and [`clip_to`] per slice instead.
pub fn clip_quantile(plane: &Plane<f32>, q: f64) -> Result<Plane<f32>> {
    Ok(clip_to(plane, quantile(&plane.data, q)?))
}

/// `(x − min)/(max − min)`; constant planes map to zeros.
pub fn minmax_normalize(plane: &Plane<f32>) -> Plane<f32> {
    let (lo, hi) = plane
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    let data = if range > 0.0 {
        plane.data.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; plane.data.len()]
    };
    Plane { data, ..*plane }
}

pub fn crop_to_square<T: Copy>(plane: &Plane<T>) -> Plane<T> {
    let s = plane.height.min(plane.width);
    plane.center_crop(s, s)
}

/// Taps and weights of a triangle filter mapping `n_in` samples onto `n_out`.
/// When shrinking, the filter widens by the scale factor (anti-aliasing).
fn triangle_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let support = scale.max(1.0);
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor().max(0.0) as usize;
            let hi = ((center + support).ceil() as usize).min(n_in - 1);
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|i| (i, (1.0 - ((i as f64 - center) / support).abs()).max(0.0)))
                .filter(|&(_, w)| w > 0.0)
                .collect();
            if taps.is_empty() {
                taps.push((center.round().clamp(0.0, (n_in - 1) as f64) as usize, 1.0));
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bilinear resize with anti-aliasing on downscale.
pub fn resize_bilinear(plane: &Plane<f32>, h: usize, w: usize) -> Plane<f32> {
    let wx = triangle_weights(plane.width, w);
    let wy = triangle_weights(plane.height, h);
    let mut rows = vec![0.0f64; plane.height * w];
    for y in 0..plane.height {
        let src = &plane.data[y * plane.width..(y + 1) * plane.width];
        for (x, taps) in wx.iter().enumerate() {
            rows[y * w + x] = taps.iter().map(|&(i, t)| t * src[i] as f64).sum();
        }
    }
    let mut data = vec![0.0f32; h * w];
    for (y, taps) in wy.iter().enumerate() {
        for x in 0..w {
            data[y * w + x] = taps.iter().map(|&(i, t)| t * rows[i * w + x]).sum::<f64>() as f32;
        }
    }
    Plane { height: h, width: w, data }
}

pub fn resize_nearest<T: Copy>(plane: &Plane<T>, h: usize, w: usize) -> Plane<T> {
    let src = |o: usize, n_out: usize, n_in: usize| ((o * n_in * 2 + n_in) / (2 * n_out)).min(n_in - 1);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = src(y, h, plane.height);
        for x in 0..w {
            data.push(plane.at(sy, src(x, w, plane.width)));
        }
    }
    Plane { height: h, width: w, data }
}

/// Center crop when the plane covers the target, otherwise resize.
pub fn fit_to_network_image(plane: &Plane<f32>, target: [usize; 2]) -> Plane<f32> {
    if plane.height >= target[0] && plane.width >= target[1] {
        plane.center_crop(target[0], target[1])
    } else {
        resize_bilinear(plane, target[0], target[1])
    }
}

pub fn fit_to_network_mask(plane: &Plane<u8>, target: [usize; 2]) -> Plane<u8> {
    if plane.height >= target[0] && plane.width >= target[1] {
        plane.center_crop(target[0], target[1])
    } else {
        resize_nearest(plane, target[0], target[1])
    }
}

/// Piecewise-linear source coordinate for each of `n` output positions.
fn distortion_axis(n: usize, steps: usize, limit: f64, rng: &mut impl Rng) -> Vec<f64> {
    let factors: Vec<f64> = (0..steps).map(|_| rng.gen_range(1.0 - limit..=1.0 + limit)).collect();
    if n < 2 {
        return vec![0.0; n];
    }
    let extent = (n - 1) as f64;
    let total: f64 = factors.iter().sum();
    let mut knots = Vec::with_capacity(steps + 1);
    let mut acc = 0.0;
    knots.push(0.0);
    for f in &factors {
        acc += f;
        knots.push(acc / total * extent);
    }
    knots[steps] = extent;
    let cell = extent / steps as f64;
    (0..n)
        .map(|i| {
            let pos = i as f64 / cell;
            let j = (pos.floor() as usize).min(steps - 1);
            let t = pos - j as f64;
            knots[j] + t * (knots[j + 1] - knots[j])
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Seeded grid distortion applied identically to an image and its mask.
pub fn grid_distort(
    image: &Plane<f32>,
    mask: &Plane<u8>,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(Plane<f32>, Plane<u8>)> {
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(shape_err!(
            "image {}x{} and mask {}x{} differ",
            image.height,
            image.width,
            mask.height,
            mask.width
        ));
    }
    let mut rng = rng_from_seed(seed);
    if rng.gen::<f64>() >= config.distortion_probability {
        return Ok((image.clone(), mask.clone()));
    }
    let (h, w) = (image.height, image.width);
    let map_x = distortion_axis(w, config.distortion_steps, config.distortion_limit, &mut rng);
    let map_y = distortion_axis(h, config.distortion_steps, config.distortion_limit, &mut rng);
    let split = |v: f64, n: usize| {
        let i = (v.floor() as usize).min(n.saturating_sub(2));
        (i, (i + 1).min(n - 1), (v - i as f64) as f32)
    };
    let mut out = Vec::with_capacity(h * w);
    let mut out_mask = Vec::with_capacity(h * w);
    for &sy in &map_y {
        let (y0, y1, ty) = split(sy, h);
        let ny = (sy.round() as usize).min(h - 1);
        for &sx in &map_x {
            let (x0, x1, tx) = split(sx, w);
            let top = lerp(image.at(y0, x0), image.at(y0, x1), tx);
            let bottom = lerp(image.at(y1, x0), image.at(y1, x1), tx);
            out.push(lerp(top, bottom, ty));
            out_mask.push(mask.at(ny, (sx.round() as usize).min(w - 1)));
        }
    }
    Ok((Plane { height: h, width: w, data: out }, Plane { height: h, width: w, data: out_mask }))
}

/// Seed for one sample of one epoch, independent of processing order.
pub fn sample_seed(base: u64, patient: &str, phase: &str, slice: usize, epoch: usize) -> u64 {
    derive_seed(
        base,
        &[SeedPart::Str(patient), SeedPart::Str(phase), SeedPart::from(slice), SeedPart::from(epoch)],
    )
}

/// Runs one slice through the full pipeline. `clip_value` is the clipping
/// quantile of the slice's whole volume.
pub fn apply_pipeline(
    image: &Plane<f32>,
    mask: &Plane<u8>,
    clip_value: f32,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(Plane<f32>, Plane<u8>)> {
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(shape_err!("image and mask shapes differ"));
    }
    let img = minmax_normalize(&clip_to(image, clip_value));
    let (img, msk) = if config.train_mode {
        grid_distort(&img, mask, config, seed)?
    } else {
        (img, mask.clone())
    };
    let img = fit_to_network_image(&crop_to_square(&img), config.target_size);
    let msk = fit_to_network_mask(&crop_to_square(&msk), config.target_size);
    let img = Plane { data: img.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..img };
    Ok((img, msk))
}

/// Expands a label plane into `num_classes` one-hot channels.
pub fn one_hot(mask: &Plane<u8>, num_classes: usize) -> Result<Vec<f32>> {
    let n = mask.data.len();
    let mut out = vec![0.0; num_classes * n];
    for (i, &l) in mask.data.iter().enumerate() {
        if l as usize >= num_classes {
            return Err(Error::Validation(format!("label {l} outside {num_classes} classes")));
        }
        out[l as usize * n + i] = 1.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use std::collections::BTreeSet;

    fn ramp(h: usize, w: usize) -> Plane<f32> {
        Plane::new(h, w, (0..h * w).map(|v| v as f32).collect()).unwrap()
    }

    fn labels(h: usize, w: usize, seed: u64) -> Plane<u8> {
        let mut rng = rng_from_seed(seed);
        Plane::new(h, w, (0..h * w).map(|_| [0u8, 1, 3][rng.gen_range(0..3)]).collect()).unwrap()
    }

    #[test]
    fn quantile_drops_outlier() {
        let mut vals: Vec<f32> = (0..1000).map(|v| v as f32).collect();
        vals.push(20000.0);
        // oracle: sorted order statistics, rank (n-1)q
        let rank = 1000.0 * 0.999f64;
        let lo = rank.floor();
        let expect = lo + (rank - lo) * (if lo as usize + 1 < 1000 { 1.0 } else { 20000.0 - lo });
        let plane = Plane::new(1, 1001, vals).unwrap();
        let out = clip_quantile(&plane, 0.999).unwrap();
        let max = out.data.iter().cloned().fold(f32::MIN, f32::max);
        assert!((max as f64 - expect).abs() < 1e-3, "{max} vs {expect}");
        assert!(!out.data.contains(&20000.0));
        assert_eq!(&out.data[..999], &plane.data[..999]);
    }

    #[test]
    fn quantile_edge_cases() {
        let p = ramp(3, 3);
        assert_eq!(clip_quantile(&p, 1.0).unwrap(), p);
        let c = Plane::filled(2, 2, 5.0);
        assert_eq!(clip_quantile(&c, 0.5).unwrap(), c);
        assert!(quantile(&[], 0.5).is_err());
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.5);
    }

    #[test]
    fn normalization() {
        let p = Plane::new(1, 3, vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(minmax_normalize(&p).data, vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&Plane::filled(2, 2, 7.0)).data, vec![0.0; 4]);
    }

    #[test]
    fn square_cropping() {
        let p = ramp(256, 224);
        let s = crop_to_square(&p);
        assert_eq!((s.height, s.width), (224, 224));
        assert_eq!(s.at(0, 0), p.at(16, 0));
        let odd = ramp(225, 224);
        let s = crop_to_square(&odd);
        assert_eq!(s.at(0, 0), odd.at(0, 0));
        assert_eq!(s.at(223, 0), odd.at(223, 0));
        assert_eq!(crop_to_square(&ramp(8, 8)), ramp(8, 8));
    }

    #[test]
    fn fit_crops_or_resizes() {
        let big = ramp(300, 300);
        let c = fit_to_network_image(&big, [224, 224]);
        assert_eq!(c.at(0, 0), big.at(38, 38));
        let small = minmax_normalize(&ramp(200, 200));
        let r = fit_to_network_image(&small, [224, 224]);
        assert_eq!((r.height, r.width), (224, 224));
        assert!(r.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let m = fit_to_network_mask(&labels(200, 200, 1), [224, 224]);
        let seen: BTreeSet<u8> = m.data.iter().copied().collect();
        assert!(seen.is_subset(&[0, 1, 3].into()));
    }

    #[test]
    fn upscaling_matches_bilinear_interior() {
        // doubling a linear ramp keeps it linear away from the borders
        let p = Plane::new(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = resize_bilinear(&p, 2, 8);
        let row = &r.data[8..];
        for x in 1..7 {
            let center = (x as f32 + 0.5) / 2.0 - 0.5;
            assert!((row[x] - center).abs() < 1e-6);
        }
        assert_eq!(row[0], 0.0);
        assert_eq!(row[7], 3.0);
    }

    #[test]
    fn downscaling_antialiases() {
        let p = Plane::new(1, 8, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = resize_bilinear(&p, 1, 4);
        for v in &r.data[1..3] {
            assert!((v - 0.5).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn distortion_contracts() {
        let img = minmax_normalize(&ramp(40, 36));
        let mask = labels(40, 36, 2);
        let never = PipelineConfig { distortion_probability: 0.0, ..Default::default() };
        assert_eq!(grid_distort(&img, &mask, &never, 9).unwrap(), (img.clone(), mask.clone()));

        let always = PipelineConfig { distortion_probability: 1.0, ..Default::default() };
        let constant = Plane::filled(40, 36, 0.3);
        let (c, _) = grid_distort(&constant, &mask, &always, 4).unwrap();
        assert_eq!(c, constant);

        let a = grid_distort(&img, &mask, &always, 5).unwrap();
        assert_eq!(a, grid_distort(&img, &mask, &always, 5).unwrap());
        assert_ne!(a.0, img);
        assert!(grid_distort(&img, &labels(40, 35, 0), &always, 1).is_err());
    }

    #[test]
    fn distortion_rate_tracks_probability() {
        let img = minmax_normalize(&ramp(20, 20));
        let mask = labels(20, 20, 3);
        let cfg = PipelineConfig::default();
        let changed = (0..1000)
            .filter(|&s| grid_distort(&img, &mask, &cfg, s).unwrap().0 != img)
            .count();
        assert!((750..=850).contains(&changed), "{changed}");
    }

    #[test]
    fn pipeline_keeps_spacing_differences() {
        // same anatomy drawn at two pixel scales stays at two scales
        let disk = |n: usize, r: f32| {
            let c = n as f32 / 2.0;
            let data = (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as f32 + 0.5 - c, (i % n) as f32 + 0.5 - c);
                    u8::from(y * y + x * x < r * r)
                })
                .collect();
            Plane::new(n, n, data).unwrap()
        };
        let cfg = PipelineConfig { target_size: [32, 32], ..Default::default() };
        let img = Plane::filled(40, 40, 1.0);
        let (_, a) = apply_pipeline(&img, &disk(40, 6.0), 1.0, &cfg, 0).unwrap();
        let (_, b) = apply_pipeline(&img, &disk(40, 12.0), 1.0, &cfg, 0).unwrap();
        let area = |m: &Plane<u8>| m.data.iter().filter(|&&v| v == 1).count();
        assert!(area(&b) > 3 * area(&a));
    }

    #[test]
    fn one_hot_rows() {
        let m = Plane::new(1, 3, vec![0, 2, 1]).unwrap();
        assert_eq!(one_hot(&m, 3).unwrap(), vec![1., 0., 0., 0., 0., 1., 0., 1., 0.]);
        assert!(one_hot(&m, 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn pipeline_invariants(h in 12usize..70, w in 12usize..70, seed in any::<u64>(), train in any::<bool>()) {
            let mut rng = rng_from_seed(seed);
            let img = Plane::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..3000.0f32)).collect()).unwrap();
            let mask = labels(h, w, seed ^ 1);
            let cfg = PipelineConfig { target_size: [32, 32], train_mode: train, ..Default::default() };
            let clip = quantile(&img.data, cfg.clip_quantile).unwrap();
            let (a, m) = apply_pipeline(&img, &mask, clip, &cfg, seed).unwrap();
            prop_assert_eq!((a.height, a.width, m.height, m.width), (32, 32, 32, 32));
            prop_assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
            let input: BTreeSet<u8> = mask.data.iter().copied().collect();
            prop_assert!(m.data.iter().all(|v| input.contains(v)));
            let oh = one_hot(&m, 4).unwrap();
            for i in 0..32 * 32 {
                let s: f32 = (0..4).map(|c| oh[c * 1024 + i]).sum();
                prop_assert_eq!(s, 1.0);
            }
            let again = apply_pipeline(&img, &mask, clip, &cfg, seed).unwrap();
            prop_assert_eq!((a, m), again);
        }

        #[test]
        fn same_map_for_image_and_mask(seed in any::<u64>()) {
            // an image equal to a blocky label map must track the distorted mask
            let cells = labels(4, 4, seed);
            let mask = Plane::new(24, 24, (0..576).map(|i| cells.at(i / 24 / 6, i % 24 / 6)).collect()).unwrap();
            let img = Plane::new(24, 24, mask.data.iter().map(|&v| v as f32).collect()).unwrap();
            let cfg = PipelineConfig { distortion_probability: 1.0, ..Default::default() };
            let (di, dm) = grid_distort(&img, &mask, &cfg, seed).unwrap();
            let mut agree = 0;
            for (a, b) in di.data.iter().zip(&dm.data) {
                if (a - *b as f32).abs() < 0.5 { agree += 1; }
            }
            prop_assert!(agree * 10 >= di.data.len() * 8, "{agree}");
        }
    }
}
