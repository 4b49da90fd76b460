use super::{DataError, Sample};
use crate::volume::{BinaryMask, ImageVolume, Shape3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Parameters of the perturbed-ellipsoid phantom corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub volume_size: [usize; 3],
    /// Inclusive range of the ellipsoid semi-axes, in voxels.
    pub semi_axis_range: [f64; 2],
    /// Relative amplitude of the low-frequency radial perturbation.
    pub perturbation: f64,
    /// Foreground intensity above the zero background.
    pub contrast: f64,
    pub noise_sigma: f64,
    pub samples: usize,
    pub seed: u64,
    pub spacing: [f64; 3],
    /// Gaussian blur of the clean image before noise, in voxels.
    pub blur_sigma: f64,
    /// Amplitude of a smooth multiplicative intensity field, in [0, 1).
    pub bias_amplitude: f64,
    /// Unlabeled balls attached to the shape's surface.
    pub distractors: usize,
    /// Inclusive range of distractor radii, in voxels.
    pub distractor_radius: [f64; 2],
    /// Distractor intensity as a fraction of `contrast`.
    pub distractor_contrast: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            volume_size: [64, 64, 64],
            semi_axis_range: [10.0, 20.0],
            perturbation: 0.2,
            contrast: 1.0,
            noise_sigma: 1.0,
            samples: 40,
            seed: 0,
            spacing: [1.0; 3],
            blur_sigma: 0.0,
            bias_amplitude: 0.0,
            distractors: 0,
            distractor_radius: [3.0, 6.0],
            distractor_contrast: 1.0,
        }
    }
}

const HARMONICS: usize = 4;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::InvalidSpec(m));
        if self.samples == 0 {
            return fail("sample count must be at least 1".into());
        }
        if self.volume_size.contains(&0) {
            return fail(format!("volume_size {:?} has an empty axis", self.volume_size));
        }
        let [lo, hi] = self.semi_axis_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return fail(format!(
                "semi_axis_range {:?} must satisfy 0 < min <= max",
                self.semi_axis_range
            ));
        }
        if !(0.0..1.0).contains(&self.perturbation) {
            return fail(format!("perturbation {} must lie in [0, 1)", self.perturbation));
        }
        let reach = self.reach();
        for (axis, &n) in ["H", "W", "D"].iter().zip(&self.volume_size) {
            if 2.0 * reach + 2.0 > n as f64 {
                return fail(format!(
                    "semi-axes up to {hi} with perturbation {} do not fit axis {axis} of size {n}",
                    self.perturbation
                ));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!(
                "noise_sigma {} must be finite and non-negative",
                self.noise_sigma
            ));
        }
        if !self.contrast.is_finite() {
            return fail("contrast must be finite".into());
        }
        if !self.spacing.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return fail(format!("spacing {:?} must be positive", self.spacing));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return fail(format!(
                "blur_sigma {} must be finite and non-negative",
                self.blur_sigma
            ));
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) {
            return fail(format!("bias_amplitude {} must lie in [0, 1)", self.bias_amplitude));
        }
        let [rlo, rhi] = self.distractor_radius;
        if self.distractors > 0 && !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return fail(format!(
                "distractor_radius {:?} must satisfy 0 < min <= max",
                self.distractor_radius
            ));
        }
        if !self.distractor_contrast.is_finite() {
            return fail("distractor_contrast must be finite".into());
        }
        Ok(())
    }

    /// Largest distance from the centre any foreground voxel can have.
    fn reach(&self) -> f64 {
        self.semi_axis_range[1] * (1.0 + self.perturbation)
    }

    pub fn shape(&self) -> Shape3 {
        Shape3::from_dims(self.volume_size)
    }
}

/// One random phantom: a rotated ellipsoid whose radius is modulated by a
/// sum of plane waves over the unit sphere.
struct Phantom {
    centre: [f64; 3],
    semi_axes: [f64; 3],
    /// Rows are the ellipsoid's principal directions.
    rotation: [[f64; 3]; 3],
    harmonics: Vec<([f64; 3], f64, f64)>,
    amplitude: f64,
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // uniform random unit quaternion
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
        b * (2.0 * PI * u3).cos(),
    );
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

impl Phantom {
    fn random(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let [lo, hi] = spec.semi_axis_range;
        let semi_axes = [0; 3].map(|_| if hi > lo { rng.gen_range(lo..=hi) } else { lo });
        let reach = spec.reach();
        let centre = spec.volume_size.map(|n| {
            let (a, b) = (reach, n as f64 - 1.0 - reach);
            if b > a {
                rng.gen_range(a..=b)
            } else {
                (n as f64 - 1.0) / 2.0
            }
        });
        let rotation = random_rotation(rng);
        let weights: Vec<f64> = (0..HARMONICS).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let harmonics = weights
            .into_iter()
            .map(|w| {
                let dir: [f64; 3] = UnitSphere.sample(rng);
                let freq = rng.gen_range(1.0..3.0);
                (dir.map(|d| d * freq), rng.gen_range(0.0..2.0 * PI), w / total)
            })
            .collect();
        Self {
            centre,
            semi_axes,
            rotation,
            harmonics,
            amplitude: spec.perturbation,
        }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.centre[0], p[1] - self.centre[1], p[2] - self.centre[2]];
        let local: [f64; 3] = std::array::from_fn(|r| {
            let row = self.rotation[r];
            (row[0] * d[0] + row[1] * d[1] + row[2] * d[2]) / self.semi_axes[r]
        });
        let norm = local.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1.0 - self.amplitude {
            return true;
        }
        if norm > 1.0 + self.amplitude {
            return false;
        }
        let u = local.map(|v| v / norm);
        let wave: f64 = self
            .harmonics
            .iter()
            .map(|(k, phase, w)| w * (k[0] * u[0] + k[1] * u[1] + k[2] * u[2] + phase).cos())
            .sum();
        norm <= 1.0 + self.amplitude * wave
    }
}

/// Balls straddling the shape's surface at random directions; they carry
/// intensity but no label, so only shape separates them from the target.
fn add_distractors(
    spec: &SyntheticSpec,
    phantom: &Phantom,
    label: &BinaryMask,
    clean: &mut [f64],
    rng: &mut ChaCha8Rng,
) {
    let shape = label.shape();
    let [lo, hi] = spec.distractor_radius;
    let level = spec.contrast * spec.distractor_contrast;
    for _ in 0..spec.distractors {
        let u: [f64; 3] = UnitSphere.sample(rng);
        let radius = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let mut t = 0.0;
        let point = |t: f64| std::array::from_fn::<f64, 3, _>(|a| phantom.centre[a] + t * u[a]);
        while phantom.contains(point(t)) && t < spec.reach() {
            t += 0.25;
        }
        let centre = point(t + 0.5 * radius);
        for (idx, v) in clean.iter_mut().enumerate() {
            let (i, j, k) = shape.coords(idx);
            let d2 = (i as f64 - centre[0]).powi(2) + (j as f64 - centre[1]).powi(2) + (k as f64 - centre[2]).powi(2);
            if d2 <= radius * radius && label.as_slice()[idx] == 0 {
                *v = level;
            }
        }
    }
}

/// Separable Gaussian with clamped borders.
fn gaussian_blur(values: &mut [f64], shape: Shape3, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|w| w / total).collect();
    let dims = shape.dims();
    for axis in 0..3 {
        let src = values.to_vec();
        for (idx, v) in values.iter_mut().enumerate() {
            let (i, j, k) = shape.coords(idx);
            let pos = [i, j, k];
            *v = kernel
                .iter()
                .enumerate()
                .map(|(o, w)| {
                    let mut p = pos;
                    p[axis] = (pos[axis] as isize + o as isize - radius).clamp(0, dims[axis] as isize - 1) as usize;
                    w * src[shape.index(p[0], p[1], p[2])]
                })
                .sum();
        }
    }
}

/// Multiply by `1 + a cos(k . x + phase)` with a random low frequency.
fn apply_bias(spec: &SyntheticSpec, values: &mut [f64], shape: Shape3, rng: &mut ChaCha8Rng) {
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let n = spec.volume_size.iter().copied().max().unwrap_or(1) as f64;
    let freq = rng.gen_range(0.5..1.5) * 2.0 * PI / n;
    let phase = rng.gen_range(0.0..2.0 * PI);
    for (idx, v) in values.iter_mut().enumerate() {
        let (i, j, k) = shape.coords(idx);
        let x = dir[0] * i as f64 + dir[1] * j as f64 + dir[2] * k as f64;
        *v *= 1.0 + spec.bias_amplitude * (freq * x + phase).cos();
    }
}

/// Deterministic phantom corpus; sample `i` is drawn from its own stream
/// of the spec's seed, so corpora of different sizes share prefixes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    let shape = spec.shape();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    (0..spec.samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let phantom = Phantom::random(spec, &mut rng);
            let label = BinaryMask::from_fn(shape, |a, b, c| phantom.contains([a as f64, b as f64, c as f64]));
            let mut clean: Vec<f64> = label.as_slice().iter().map(|&l| spec.contrast * l as f64).collect();
            add_distractors(spec, &phantom, &label, &mut clean, &mut rng);
            if spec.blur_sigma > 0.0 {
                gaussian_blur(&mut clean, shape, spec.blur_sigma);
            }
            if spec.bias_amplitude > 0.0 {
                apply_bias(spec, &mut clean, shape, &mut rng);
            }
            let image: Vec<f32> = clean
                .iter()
                .map(|&v| {
                    let n = if spec.noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    (v + n) as f32
                })
                .collect();
            let id = format!("case_{i:03}");
            let volume = ImageVolume::new(shape, image, spec.spacing)
                .map_err(|source| DataError::Volume { id: id.clone(), source })?;
            Sample::new(id, volume, Some(label))
        })
        .collect()
}
