use super::{BoundaryCache, Sample};
use crate::volume::{BinaryMask, Grid, ImageVolume, Shape3};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Copy the `size` window starting at `origin` (which may be negative or
/// run past the end); voxels outside the source take `fill`.
fn window<T: Copy + Default>(g: &Grid<T>, origin: [isize; 3], size: Shape3) -> Grid<T> {
    let s = g.shape();
    Grid::from_fn(size, |i, j, k| {
        s.checked_index(origin[0] + i as isize, origin[1] + j as isize, origin[2] + k as isize)
            .map_or(T::default(), |idx| g.as_slice()[idx])
    })
}

fn crop_sample(sample: &Sample, origin: [isize; 3], size: Shape3) -> Sample {
    let image = ImageVolume::from_grid(window(sample.image.voxels(), origin, size), sample.image.spacing())
        .expect("crop of a valid image is valid");
    let mask = |m: &BinaryMask| BinaryMask::from_grid_unchecked(window(m.voxels(), origin, size));
    Sample {
        id: sample.id.clone(),
        image,
        label: sample.label.as_ref().map(mask),
        boundary_cache: sample.boundary_cache.as_ref().map(|c| BoundaryCache {
            r: c.r,
            mask: mask(&c.mask),
        }),
    }
}

/// Random crop of `size`, zero-padded where the volume is smaller. With
/// probability `foreground_prob` (and a non-empty label) the crop contains
/// a uniformly chosen foreground voxel.
pub fn random_patch(sample: &Sample, size: Shape3, foreground_prob: f64, rng: &mut impl Rng) -> Sample {
    let dims = sample.image.shape().dims();
    let want = size.dims();
    let anchor = match &sample.label {
        Some(label) if rng.gen_bool(foreground_prob.clamp(0.0, 1.0)) => {
            let fg: Vec<usize> = label
                .as_slice()
                .iter()
                .enumerate()
                .filter_map(|(i, &v)| (v == 1).then_some(i))
                .collect();
            (!fg.is_empty()).then(|| {
                let (i, j, k) = sample.image.shape().coords(fg[rng.gen_range(0..fg.len())]);
                [i, j, k]
            })
        }
        _ => None,
    };
    let origin: [isize; 3] = std::array::from_fn(|a| {
        let (n, p) = (dims[a] as isize, want[a] as isize);
        let (mut lo, mut hi) = ((n - p).min(0), (n - p).max(0));
        if let Some(v) = anchor {
            let v = v[a] as isize;
            lo = lo.max(v - p + 1);
            hi = hi.min(v);
        }
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo
        }
    });
    crop_sample(sample, origin, size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Independent probability of flipping each axis.
    pub flip_prob: f64,
    /// Probability of an in-plane (H, W) rotation by a multiple of 90°.
    pub rotate_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            rotate_prob: 0.0,
        }
    }
}

/// Axis flips followed by `quarter_turns` in-plane rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub flips: [bool; 3],
    pub quarter_turns: u8,
}

impl Transform {
    /// Draws are made unconditionally so the stream position does not
    /// depend on the configuration. Non-square planes only rotate by 180°.
    pub fn random(cfg: &AugmentConfig, shape: Shape3, rng: &mut impl Rng) -> Self {
        let flips = [0; 3].map(|_| rng.gen::<f64>() < cfg.flip_prob);
        let rotate = rng.gen::<f64>() < cfg.rotate_prob;
        let turns = rng.gen_range(1..=3u8);
        let quarter_turns = match (rotate, shape.h == shape.w) {
            (false, _) => 0,
            (true, true) => turns,
            (true, false) => 2,
        };
        Self { flips, quarter_turns }
    }

    pub fn output_shape(&self, s: Shape3) -> Shape3 {
        if self.quarter_turns % 2 == 1 {
            Shape3::new(s.w, s.h, s.d)
        } else {
            s
        }
    }

    pub fn apply<T: Copy>(&self, g: &Grid<T>) -> Grid<T> {
        let s = g.shape();
        let out = self.output_shape(s);
        let turns = self.quarter_turns % 4;
        Grid::from_fn(out, |i, j, k| {
            // undo the rotation: output (i, j) -> flipped-input (a, b)
            let (a, b) = match turns {
                0 => (i, j),
                1 => (j, s.w - 1 - i),
                2 => (s.h - 1 - i, s.w - 1 - j),
                _ => (s.h - 1 - j, i),
            };
            let a = if self.flips[0] { s.h - 1 - a } else { a };
            let b = if self.flips[1] { s.w - 1 - b } else { b };
            let c = if self.flips[2] { s.d - 1 - k } else { k };
            g.get(a, b, c)
        })
    }

    pub fn apply_sample(&self, sample: &Sample) -> Sample {
        let mask = |m: &BinaryMask| BinaryMask::from_grid_unchecked(self.apply(m.voxels()));
        Sample {
            id: sample.id.clone(),
            image: ImageVolume::from_grid(self.apply(sample.image.voxels()), sample.image.spacing())
                .expect("permuted image stays valid"),
            label: sample.label.as_ref().map(mask),
            boundary_cache: sample.boundary_cache.as_ref().map(|c| BoundaryCache {
                r: c.r,
                mask: mask(&c.mask),
            }),
        }
    }
}

/// Random flips and in-plane 90° rotations applied identically to the
/// image, label and cached boundary.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    Transform::random(cfg, sample.image.shape(), rng).apply_sample(sample)
}
