//! Procedural clean/degraded image pairs for haze, rain, and snow.
//!
//! Clean images are low-frequency compositions (smooth sinusoidal color
//! gradients plus a few soft-edged disks) normalized into [0.1, 0.9]:
//! smooth enough that additive high-frequency degradations are
//! separable and removable, with headroom so rain and snow masks do not
//! saturate immediately. Everything is keyed by (family, seed, index)
//! through the counter RNG, so any sample can be regenerated bit-for-bit
//! in isolation.

use crate::backbone::BackboneParams;
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use crate::valve::{self, TaskVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

pub const DEFAULT_IMAGE_SIZE: usize = 32;
/// Clean images occupy [CLEAN_LO, CLEAN_HI]; the margin keeps additive
/// degradations from clipping everywhere at 1.0.
const CLEAN_LO: f64 = 0.1;
const CLEAN_HI: f64 = 0.9;
const STREAM_CLEAN: u64 = 0xC1EA;
const STREAM_DEGRADE: u64 = 0xDE64;
const MIN_SEPARATION_SAMPLES: usize = 32;

// ─── families and specs ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Haze,
    Rain,
    Snow,
}

impl Family {
    pub fn all() -> [Family; 3] {
        [Family::Haze, Family::Rain, Family::Snow]
    }

    fn tag(self) -> u64 {
        match self {
            Family::Haze => 1,
            Family::Rain => 2,
            Family::Snow => 3,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Haze => "haze",
            Family::Rain => "rain",
            Family::Snow => "snow",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Family> {
        match s {
            "haze" => Ok(Family::Haze),
            "rain" => Ok(Family::Rain),
            "snow" => Ok(Family::Snow),
            other => Err(Error::Config(format!("unknown degradation family {other:?}"))),
        }
    }
}

/// Per-family sampling ranges, all inclusive. Collapsing a range to a
/// point (lo == hi) pins that parameter, which the worked-example tests
/// rely on.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationRanges {
    pub haze_t: (f64, f64),
    pub haze_airlight: (f64, f64),
    pub rain_count: (u32, u32),
    pub rain_angle_deg: (f64, f64),
    pub rain_length: (f64, f64),
    pub rain_intensity: (f64, f64),
    pub snow_count: (u32, u32),
    pub snow_radius: (f64, f64),
    pub snow_intensity: (f64, f64),
}

impl Default for DegradationRanges {
    fn default() -> DegradationRanges {
        DegradationRanges {
            haze_t: (0.4, 0.8),
            haze_airlight: (0.7, 1.0),
            rain_count: (20, 60),
            rain_angle_deg: (60.0, 80.0),
            rain_length: (6.0, 14.0),
            rain_intensity: (0.2, 0.5),
            snow_count: (30, 80),
            snow_radius: (1.0, 3.0),
            snow_intensity: (0.4, 0.8),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DegradationSpec {
    pub family: Family,
    pub seed: u64,
    #[serde(default)]
    pub params: DegradationRanges,
    /// Apply the haze model before rain streaks (mixed-weather arm).
    #[serde(default)]
    pub compose_haze_rain: bool,
}

impl DegradationSpec {
    pub fn new(family: Family, seed: u64) -> DegradationSpec {
        DegradationSpec {
            family,
            seed,
            params: DegradationRanges::default(),
            compose_haze_rain: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplePair {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub family: Family,
    pub index: u64,
}

// ─── clean image synthesis ──────────────────────────────────────────────

/// Deterministic clean image: 2–4 smooth color gradients plus 1–3
/// soft disks, jointly min–max normalized into [0.1, 0.9].
pub fn generate_clean(seed: u64, index: u64, size: usize) -> Tensor {
    assert!(size >= 8, "clean images need size >= 8, got {size}");
    let mut rng = CounterRng::keyed(seed, &[STREAM_CLEAN, index]);
    let plane = size * size;
    let mut chans = vec![vec![0.0f64; plane]; 3];

    let n_gradients = 2 + rng.index(3);
    for _ in 0..n_gradients {
        let theta = rng.range(0.0, std::f64::consts::TAU);
        let (dx, dy) = (theta.cos(), theta.sin());
        let freq = rng.range(0.4, 1.1) * std::f64::consts::TAU / size as f64;
        let phase = rng.range(0.0, std::f64::consts::TAU);
        let base = rng.range(0.4, 1.0);
        let amps = [
            base * rng.range(0.5, 1.0) * if rng.next_f64() < 0.3 { -1.0 } else { 1.0 },
            base * rng.range(0.5, 1.0) * if rng.next_f64() < 0.3 { -1.0 } else { 1.0 },
            base * rng.range(0.5, 1.0) * if rng.next_f64() < 0.3 { -1.0 } else { 1.0 },
        ];
        for y in 0..size {
            for x in 0..size {
                let s = ((x as f64 * dx + y as f64 * dy) * freq + phase).sin();
                for c in 0..3 {
                    chans[c][y * size + x] += amps[c] * s;
                }
            }
        }
    }

    let n_shapes = 1 + rng.index(3);
    for _ in 0..n_shapes {
        let cx = rng.range(0.15, 0.85) * size as f64;
        let cy = rng.range(0.15, 0.85) * size as f64;
        let radius = rng.range(0.12, 0.30) * size as f64;
        let edge = 0.25 * radius;
        let amps = [
            rng.range(-0.7, 0.7),
            rng.range(-0.7, 0.7),
            rng.range(-0.7, 0.7),
        ];
        for y in 0..size {
            for x in 0..size {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let t = ((radius + edge - d) / (2.0 * edge)).clamp(0.0, 1.0);
                let w = t * t * (3.0 - 2.0 * t);
                if w > 0.0 {
                    for c in 0..3 {
                        chans[c][y * size + x] += amps[c] * w;
                    }
                }
            }
        }
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for ch in &chans {
        for &v in ch {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = hi - lo;
    let mut data = Vec::with_capacity(3 * plane);
    for ch in &chans {
        for &v in ch {
            if span < 1e-9 {
                data.push(0.5);
            } else {
                data.push(CLEAN_LO + (CLEAN_HI - CLEAN_LO) * (v - lo) / span);
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("clean synthesis stays finite")
}

// ─── degradations ───────────────────────────────────────────────────────

fn range_f(rng: &mut CounterRng, r: (f64, f64)) -> f64 {
    rng.range(r.0, r.1)
}

/// Near-vertical blurred streaks, deposited by max so crossings do not
/// double-brighten.
fn rain_mask(rng: &mut CounterRng, p: &DegradationRanges, size: usize) -> Vec<f64> {
    let mut mask = vec![0.0f64; size * size];
    let count = rng.range_u32(p.rain_count.0, p.rain_count.1);
    for _ in 0..count {
        let x0 = rng.range(0.0, size as f64);
        let y0 = rng.range(0.0, size as f64);
        let angle = range_f(rng, p.rain_angle_deg).to_radians();
        let length = range_f(rng, p.rain_length);
        let intensity = range_f(rng, p.rain_intensity);
        let (dx, dy) = (angle.cos(), angle.sin());
        let steps = (length / 0.5).ceil() as usize;
        for s in 0..steps {
            let t = s as f64 * 0.5;
            let px = x0 + t * dx;
            let py = y0 + t * dy;
            let xi = px.floor() as isize;
            let yi = py.floor() as isize;
            let fx = px - xi as f64;
            let fy = py - yi as f64;
            for (ox, oy, w) in [
                (0, 0, (1.0 - fx) * (1.0 - fy)),
                (1, 0, fx * (1.0 - fy)),
                (0, 1, (1.0 - fx) * fy),
                (1, 1, fx * fy),
            ] {
                let (x, y) = (xi + ox, yi + oy);
                if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
                    let at = y as usize * size + x as usize;
                    mask[at] = mask[at].max(intensity * w);
                }
            }
        }
    }
    blur3(&mask, size)
}

/// One pass of the 3x3 binomial kernel with zero padding.
fn blur3(mask: &[f64], size: usize) -> Vec<f64> {
    let k = [1.0, 2.0, 1.0];
    let mut out = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (j, ky) in k.iter().enumerate() {
                for (i, kx) in k.iter().enumerate() {
                    let yy = y as isize + j as isize - 1;
                    let xx = x as isize + i as isize - 1;
                    if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                        acc += ky * kx * mask[yy as usize * size + xx as usize];
                    }
                }
            }
            out[y * size + x] = acc / 16.0;
        }
    }
    out
}

/// Soft disks with quadratic-smoothstep falloff, max-combined.
fn snow_mask(rng: &mut CounterRng, p: &DegradationRanges, size: usize) -> Vec<f64> {
    let mut mask = vec![0.0f64; size * size];
    let count = rng.range_u32(p.snow_count.0, p.snow_count.1);
    for _ in 0..count {
        let cx = rng.range(0.0, size as f64);
        let cy = rng.range(0.0, size as f64);
        let radius = range_f(rng, p.snow_radius);
        let intensity = range_f(rng, p.snow_intensity);
        let reach = radius.ceil() as isize + 1;
        let (cxi, cyi) = (cx.floor() as isize, cy.floor() as isize);
        for y in (cyi - reach).max(0)..(cyi + reach + 1).min(size as isize) {
            for x in (cxi - reach).max(0)..(cxi + reach + 1).min(size as isize) {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let t = (1.0 - d / radius).max(0.0);
                let w = t * t * (3.0 - 2.0 * t);
                let at = y as usize * size + x as usize;
                mask[at] = mask[at].max(intensity * w);
            }
        }
    }
    mask
}

/// Degrade a clean image under `spec`'s family model. The RNG is
/// keyed by (seed, family, index), never by call order.
pub fn degrade(clean: &Tensor, spec: &DegradationSpec, index: u64) -> Tensor {
    let (size, plane) = match clean.shape() {
        [3, h, w] if h == w => (*h, h * w),
        other => panic!("degrade expects a square [3,H,W] image, got {other:?}"),
    };
    debug_assert!(clean.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let mut rng = CounterRng::keyed(spec.seed, &[spec.family.tag(), STREAM_DEGRADE, index]);
    let p = &spec.params;

    let mut data = clean.data().to_vec();
    let apply_haze = |data: &mut Vec<f64>, rng: &mut CounterRng| {
        let t = range_f(rng, p.haze_t);
        let a = range_f(rng, p.haze_airlight);
        for v in data.iter_mut() {
            *v = *v * t + a * (1.0 - t);
        }
    };
    let apply_mask = |data: &mut Vec<f64>, mask: &[f64]| {
        for c in 0..3 {
            for i in 0..plane {
                data[c * plane + i] = (data[c * plane + i] + mask[i]).min(1.0);
            }
        }
    };

    match spec.family {
        Family::Haze => apply_haze(&mut data, &mut rng),
        Family::Rain => {
            if spec.compose_haze_rain {
                apply_haze(&mut data, &mut rng);
            }
            let mask = rain_mask(&mut rng, p, size);
            apply_mask(&mut data, &mask);
        }
        Family::Snow => {
            let mask = snow_mask(&mut rng, p, size);
            apply_mask(&mut data, &mask);
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(clean.shape().to_vec(), data).expect("degradation stays finite")
}

pub fn sample_pair(spec: &DegradationSpec, index: u64, size: usize) -> SamplePair {
    let clean = generate_clean(spec.seed, index, size);
    let degraded = degrade(&clean, spec, index);
    SamplePair { clean, degraded, family: spec.family, index }
}

/// Stack pairs into ([N,3,H,W] degraded, [N,3,H,W] clean) batches.
pub fn batch(pairs: &[SamplePair]) -> Result<(Tensor, Tensor)> {
    let degraded: Vec<&Tensor> = pairs.iter().map(|p| &p.degraded).collect();
    let clean: Vec<&Tensor> = pairs.iter().map(|p| &p.clean).collect();
    Ok((Tensor::stack(&degraded)?, Tensor::stack(&clean)?))
}

// ─── family separation report ───────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct FamilySeparation {
    pub family: Family,
    pub mean_vector: TaskVector,
    /// s_sum between the two halves of this family's sample set; high
    /// values mean the signature is stable within the family.
    pub split_similarity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeparationReport {
    pub per_family: Vec<FamilySeparation>,
    /// s_sum between family mean vectors, one row per unordered pair.
    pub inter_family: Vec<(Family, Family, f64)>,
}

impl SeparationReport {
    pub fn min_split_similarity(&self) -> f64 {
        self.per_family.iter().map(|f| f.split_similarity).fold(f64::INFINITY, f64::min)
    }

    pub fn max_inter_similarity(&self) -> f64 {
        self.inter_family.iter().map(|(_, _, s)| *s).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Signature statistics of each family on untrained-encoder features:
/// per-family mean task vector, within-family split-half similarity,
/// and between-family similarity of the means.
pub fn family_statistics_separation(
    backbone: &BackboneParams,
    specs: &[DegradationSpec],
    n_per_family: usize,
    size: usize,
) -> Result<SeparationReport> {
    if n_per_family < MIN_SEPARATION_SAMPLES {
        return Err(Error::invalid(
            "family_statistics_separation",
            format!("need at least {MIN_SEPARATION_SAMPLES} samples per family, got {n_per_family}"),
        ));
    }
    let mut per_family = Vec::with_capacity(specs.len());
    let mut means = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut vectors = Vec::with_capacity(n_per_family);
        for index in 0..n_per_family as u64 {
            let pair = sample_pair(spec, index, size);
            let features = backbone.encode_tensor(&Tensor::stack(&[&pair.degraded])?)?;
            vectors.push(valve::extract_task_vector(&features)?);
        }
        let half = n_per_family / 2;
        let first = valve::mean_task_vector(&vectors[..half])?;
        let second = valve::mean_task_vector(&vectors[half..])?;
        let mean_vector = valve::mean_task_vector(&vectors)?;
        let split_similarity = valve::combined_similarity(&first, &second).s_sum;
        per_family.push(FamilySeparation { family: spec.family, mean_vector, split_similarity });
        means.push((spec.family, per_family.last().unwrap().mean_vector.clone()));
    }
    let mut inter_family = Vec::new();
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let s = valve::combined_similarity(&means[i].1, &means[j].1).s_sum;
            inter_family.push((means[i].0, means[j].0, s));
        }
    }
    Ok(SeparationReport { per_family, inter_family })
}

// ─── ppm dump ───────────────────────────────────────────────────────────

/// Binary PPM (P6, maxval 255) with round-half-up quantization.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        other => return Err(Error::shape("write_ppm", format!("expected [3,H,W], got {other:?}"))),
    };
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * plane + 32);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for i in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_keys_give_identical_bits() {
        for family in Family::all() {
            let spec = DegradationSpec::new(family, 77);
            let a = sample_pair(&spec, 5, 16);
            let b = sample_pair(&spec, 5, 16);
            assert_eq!(a.clean.data(), b.clean.data());
            assert_eq!(a.degraded.data(), b.degraded.data());
        }
    }

    #[test]
    fn clean_values_stay_in_unit_range_over_many_samples() {
        for index in 0..10_000u64 {
            let img = generate_clean(3, index, 8);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)), "index {index}");
        }
    }

    #[test]
    fn degraded_values_stay_in_unit_range() {
        for family in Family::all() {
            let spec = DegradationSpec::new(family, 9);
            for index in 0..300u64 {
                let pair = sample_pair(&spec, index, 16);
                assert!(pair.degraded.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn distinct_indices_differ() {
        for pair_idx in 0..1_000u64 {
            let a = generate_clean(4, 2 * pair_idx, 8);
            let b = generate_clean(4, 2 * pair_idx + 1, 8);
            let l1: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
            assert!(l1 > 0.0, "indices {} and {} collided", 2 * pair_idx, 2 * pair_idx + 1);
        }
    }

    #[test]
    fn haze_worked_example_white_image() {
        let mut spec = DegradationSpec::new(Family::Haze, 0);
        spec.params.haze_t = (0.5, 0.5);
        spec.params.haze_airlight = (0.8, 0.8);
        let white = Tensor::new(vec![3, 8, 8], vec![1.0; 192]).unwrap();
        let hazy = degrade(&white, &spec, 0);
        assert!(hazy.data().iter().all(|v| (v - 0.9).abs() < 1e-12));
    }

    #[test]
    fn haze_with_full_transmission_is_identity() {
        let mut spec = DegradationSpec::new(Family::Haze, 1);
        spec.params.haze_t = (1.0, 1.0);
        let clean = generate_clean(1, 0, 16);
        let hazy = degrade(&clean, &spec, 0);
        assert_eq!(hazy.data(), clean.data());
    }

    #[test]
    fn haze_with_zero_transmission_is_constant_airlight() {
        let mut spec = DegradationSpec::new(Family::Haze, 2);
        spec.params.haze_t = (0.0, 0.0);
        spec.params.haze_airlight = (0.75, 0.75);
        let clean = generate_clean(2, 0, 16);
        let hazy = degrade(&clean, &spec, 0);
        assert!(hazy.data().iter().all(|v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn rain_and_snow_only_brighten() {
        for family in [Family::Rain, Family::Snow] {
            let spec = DegradationSpec::new(family, 11);
            for index in 0..50u64 {
                let pair = sample_pair(&spec, index, 16);
                for (d, c) in pair.degraded.data().iter().zip(pair.clean.data()) {
                    assert!(d >= c, "additive masks never darken");
                }
                let l1: f64 =
                    pair.degraded.data().iter().zip(pair.clean.data()).map(|(d, c)| d - c).sum();
                assert!(l1 > 0.0, "degradation must actually touch the image");
            }
        }
    }

    #[test]
    fn composed_haze_rain_differs_from_plain_rain() {
        let plain = DegradationSpec::new(Family::Rain, 13);
        let mut composed = plain.clone();
        composed.compose_haze_rain = true;
        let clean = generate_clean(13, 0, 16);
        let a = degrade(&clean, &plain, 0);
        let b = degrade(&clean, &composed, 0);
        let l1: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(l1 > 0.1, "haze pre-pass must shift the image");
    }

    #[test]
    fn separation_report_is_deterministic_and_guards_sample_count() {
        let mut rng = CounterRng::keyed(0xD5, &[0]);
        let backbone = BackboneParams::init(8, &mut rng).unwrap();
        let specs: Vec<DegradationSpec> =
            Family::all().iter().map(|f| DegradationSpec::new(*f, 21)).collect();
        assert!(family_statistics_separation(&backbone, &specs, 8, 16).is_err());

        let a = family_statistics_separation(&backbone, &specs, 32, 16).unwrap();
        let b = family_statistics_separation(&backbone, &specs, 32, 16).unwrap();
        for (x, y) in a.per_family.iter().zip(&b.per_family) {
            assert_eq!(x.mean_vector.stats, y.mean_vector.stats);
            assert_eq!(x.split_similarity, y.split_similarity);
        }
        assert_eq!(a.inter_family.len(), 3);
    }

    #[test]
    fn families_separate_in_registry_z_space() {
        // The valve compares registry-z-scored signatures, so the
        // property the pipeline relies on is decision-level: with any
        // two families registered, the third must score below the 0.75
        // starting threshold (classified new) while an exact repeat of
        // a registered family must clear the 0.85 hard-old band.
        use crate::valve::{SignatureNormalization, SignatureRegistry};

        let mut rng = CounterRng::keyed(0xD6, &[1]);
        let backbone = BackboneParams::init(16, &mut rng).unwrap();
        let fams = Family::all();
        let vectors: Vec<_> = fams
            .iter()
            .map(|f| {
                let spec = DegradationSpec::new(*f, 33);
                let mut per_batch = Vec::new();
                for b in 0..4u64 {
                    let pairs: Vec<SamplePair> =
                        (0..2).map(|i| sample_pair(&spec, b * 2 + i, 32)).collect();
                    let refs: Vec<&Tensor> = pairs.iter().map(|p| &p.degraded).collect();
                    let x = Tensor::stack(&refs).unwrap();
                    let f = backbone.encode_tensor(&x).unwrap();
                    per_batch.push(crate::valve::extract_task_vector(&f).unwrap());
                }
                crate::valve::mean_task_vector(&per_batch).unwrap()
            })
            .collect();

        for (i, j, k) in [(0, 1, 2), (0, 2, 1), (1, 2, 0)] {
            let mut reg = SignatureRegistry::new(SignatureNormalization::RegistryZ);
            reg.register(vectors[i].clone());
            reg.register(vectors[j].clone());
            let arriving = reg.best_match(&vectors[k]).unwrap();
            assert!(
                arriving.s_sum < 0.75,
                "{} arriving with {}+{} registered scored {:.4}",
                fams[k], fams[i], fams[j], arriving.s_sum,
            );
            let repeat = reg.best_match(&vectors[i]).unwrap();
            assert!(
                repeat.s_sum > 0.85,
                "repeat of {} scored only {:.4}",
                fams[i], repeat.s_sum,
            );
            assert_eq!(repeat.best_match_task, Some(0));
        }
    }

    #[test]
    fn ppm_dump_round_half_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.ppm");
        // 1x2 image chosen to hit the rounding boundary: 0.5 → 128.
        let img = Tensor::new(
            vec![3, 1, 2],
            vec![0.0, 0.5, 1.0, 127.4 / 255.0, 127.6 / 255.0, 0.998],
        )
        .unwrap();
        write_ppm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        // Pixel (0,0): r=0.0→0, g=1.0→255, b=127.6/255→128;
        // pixel (0,1): r=0.5→128 (half up), g=127.4/255→127, b=0.998→254.
        assert_eq!(&bytes[header.len()..], &[0, 255, 128, 128, 127, 254]);
    }
}
