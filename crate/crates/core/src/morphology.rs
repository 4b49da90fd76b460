//! Binary erosion with a cubic structuring element and the XOR boundary band.
//!
//! Voxels outside the volume count as background, so foreground touching the
//! border erodes away there. The band `mask XOR erode(mask, r)` is
//! `floor(r / 2)` voxels thick along the inner surface of the mask.

use crate::volume::{BinaryMask, Grid, LabelMap, ProbabilityMap, Shape3};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MorphologyError {
    #[error("invalid kernel size {0}: must be odd and at least 1")]
    InvalidKernel(i64),
}

/// Cubic `r x r x r` structuring element centred on the voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StructuringElement {
    size: usize,
}

impl StructuringElement {
    pub fn cube(r: i64) -> Result<Self, MorphologyError> {
        if r >= 1 && r % 2 == 1 {
            Ok(Self { size: r as usize })
        } else {
            Err(MorphologyError::InvalidKernel(r))
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }
}

fn kernel(r: usize) -> Result<StructuringElement, MorphologyError> {
    StructuringElement::cube(r as i64)
}

/// One pass of a sliding-window minimum along `axis`, out-of-volume = zero.
///
/// Cube minima factor into three such passes because the zero padding is
/// itself the minimum of every window that reaches outside the volume.
fn min_pass<T: Copy + PartialOrd + Default>(src: &[T], shape: Shape3, axis: usize, radius: usize) -> Vec<T> {
    let dims = shape.dims();
    let strides = [shape.w * shape.d, shape.d, 1];
    let n = dims[axis];
    let stride = strides[axis];
    let mut out = vec![T::default(); src.len()];
    let r = radius as isize;
    for base in 0..src.len() {
        let pos = (base / stride) % n;
        if pos != 0 {
            continue;
        }
        for p in 0..n as isize {
            let lo = p - r;
            let hi = p + r;
            let value = if lo < 0 || hi >= n as isize {
                T::default()
            } else {
                let mut m = src[base + lo as usize * stride];
                for q in lo + 1..=hi {
                    let v = src[base + q as usize * stride];
                    if v < m {
                        m = v;
                    }
                }
                m
            };
            out[base + p as usize * stride] = value;
        }
    }
    out
}

fn cube_min<T: Copy + PartialOrd + Default>(src: &[T], shape: Shape3, radius: usize) -> Vec<T> {
    if radius == 0 {
        return src.to_vec();
    }
    let a = min_pass(src, shape, 0, radius);
    let b = min_pass(&a, shape, 1, radius);
    min_pass(&b, shape, 2, radius)
}

/// Erode `mask` with an `r`-sided cube.
pub fn erode(mask: &BinaryMask, r: usize) -> Result<BinaryMask, MorphologyError> {
    let se = kernel(r)?;
    let data = cube_min(mask.as_slice(), mask.shape(), se.radius());
    Ok(BinaryMask::from_grid_unchecked(
        Grid::new(mask.shape(), data).expect("shape preserved"),
    ))
}

/// Boundary band `mask XOR erode(mask, r)`.
pub fn boundary_label(mask: &BinaryMask, r: usize) -> Result<BinaryMask, MorphologyError> {
    Ok(mask.xor(&erode(mask, r)?))
}

/// Boundary band of every foreground class, keyed by class id.
pub fn boundary_labels_multiclass(labelmap: &LabelMap, r: usize) -> Result<BTreeMap<u32, BinaryMask>, MorphologyError> {
    kernel(r)?;
    let mut classes: Vec<u32> = labelmap.as_slice().iter().copied().filter(|&c| c > 0).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let indicator = BinaryMask::from_grid_unchecked(labelmap.map(|v| (v == c) as u8));
            boundary_label(&indicator, r).map(|b| (c, b))
        })
        .collect()
}

/// Grey-level erosion: the minimum over the centred cube, out-of-volume = 0.
pub fn soft_erode(p: &ProbabilityMap, r: usize) -> Result<ProbabilityMap, MorphologyError> {
    let se = kernel(r)?;
    let data = cube_min(p.as_slice(), p.shape(), se.radius());
    Ok(ProbabilityMap::new(p.shape(), data).expect("minimum of unit values stays in range"))
}

/// Grey-level erosion on a raw buffer that also reports, per voxel, the
/// flat index of a voxel attaining the minimum (`None` when the window
/// reaches outside the volume and the padding value 0 wins).
pub fn soft_erode_with_argmin(
    values: &[f64],
    shape: Shape3,
    r: usize,
) -> Result<(Vec<f64>, Vec<Option<usize>>), MorphologyError> {
    let se = kernel(r)?;
    assert_eq!(values.len(), shape.len());
    let mut current: Vec<(f64, Option<usize>)> = values.iter().enumerate().map(|(i, &v)| (v, Some(i))).collect();
    let radius = se.radius();
    if radius > 0 {
        for axis in 0..3 {
            current = argmin_pass(&current, shape, axis, radius);
        }
    }
    Ok(current.into_iter().unzip())
}

fn argmin_pass(src: &[(f64, Option<usize>)], shape: Shape3, axis: usize, radius: usize) -> Vec<(f64, Option<usize>)> {
    let dims = shape.dims();
    let strides = [shape.w * shape.d, shape.d, 1];
    let n = dims[axis];
    let stride = strides[axis];
    let r = radius as isize;
    let mut out = vec![(0.0, None); src.len()];
    for base in 0..src.len() {
        if (base / stride) % n != 0 {
            continue;
        }
        for p in 0..n as isize {
            let (lo, hi) = (p - r, p + r);
            if lo < 0 || hi >= n as isize {
                continue;
            }
            let mut best = src[base + lo as usize * stride];
            for q in lo + 1..=hi {
                let cand = src[base + q as usize * stride];
                if cand.0 < best.0 {
                    best = cand;
                }
            }
            out[base + p as usize * stride] = best;
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

    /// Brute-force min over the full r^3 neighbourhood.
    fn naive_erode(mask: &BinaryMask, r: usize) -> BinaryMask {
        let s = mask.shape();
        let h = (r / 2) as isize;
        BinaryMask::from_fn(s, |i, j, k| {
            for di in -h..=h {
                for dj in -h..=h {
                    for dk in -h..=h {
                        match s.checked_index(i as isize + di, j as isize + dj, k as isize + dk) {
                            Some(idx) if mask.as_slice()[idx] == 1 => {}
                            _ => return false,
                        }
                    }
                }
            }
            true
        })
    }

    fn naive_soft_erode(p: &[f64], s: Shape3, r: usize) -> Vec<f64> {
        let h = (r / 2) as isize;
        (0..s.len())
            .map(|idx| {
                let (i, j, k) = s.coords(idx);
                let mut m = f64::INFINITY;
                for di in -h..=h {
                    for dj in -h..=h {
                        for dk in -h..=h {
                            let v = s
                                .checked_index(i as isize + di, j as isize + dj, k as isize + dk)
                                .map_or(0.0, |q| p[q]);
                            m = m.min(v);
                        }
                    }
                }
                m
            })
            .collect()
    }

    fn centered_cube(volume: usize, side: usize) -> BinaryMask {
        let lo = (volume - side) / 2;
        let hi = lo + side;
        let inside = |x: usize| (lo..hi).contains(&x);
        BinaryMask::from_fn(Shape3::cube(volume), |i, j, k| inside(i) && inside(j) && inside(k))
    }

    fn random_mask(rng: &mut ChaCha8Rng, shape: Shape3, density: f64) -> BinaryMask {
        BinaryMask::from_fn(shape, |_, _, _| rng.gen_bool(density))
    }

    #[test]
    fn rejects_even_and_zero_kernels() {
        let m = centered_cube(5, 3);
        assert_eq!(erode(&m, 0), Err(MorphologyError::InvalidKernel(0)));
        assert_eq!(erode(&m, 4), Err(MorphologyError::InvalidKernel(4)));
        assert!(boundary_label(&m, 2).is_err());
        assert!(StructuringElement::cube(-3).is_err());
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mask(&mut rng, Shape3::new(5, 6, 7), 0.6);
        assert_eq!(erode(&m, 1).unwrap(), m);
        assert!(boundary_label(&m, 1).unwrap().is_empty());
    }

    #[test]
    fn cube_erosion_counts() {
        let cube = centered_cube(9, 5);
        let e3 = erode(&cube, 3).unwrap();
        assert_eq!(e3, naive_erode(&cube, 3));
        assert_eq!(e3, centered_cube(9, 3));
        assert_eq!(e3.count(), 27);

        let e5 = erode(&cube, 5).unwrap();
        assert_eq!(e5, naive_erode(&cube, 5));
        assert_eq!(e5.count(), 1);
        assert!(e5.get(4, 4, 4));
    }

    #[test]
    fn cube_boundary_counts() {
        let cube = centered_cube(9, 5);
        let oracle = |r| cube.xor(&naive_erode(&cube, r)).count();
        assert_eq!(oracle(3), 98);
        assert_eq!(oracle(5), 124);
        assert_eq!(boundary_label(&cube, 3).unwrap().count(), 98);
        assert_eq!(boundary_label(&cube, 5).unwrap().count(), 124);
    }

    #[test]
    fn border_touching_foreground_erodes() {
        let full = BinaryMask::from_fn(Shape3::cube(4), |_, _, _| true);
        let e = erode(&full, 3).unwrap();
        assert_eq!(e, centered_cube(4, 2));
    }

    #[test]
    fn multiclass_single_class_matches_binary() {
        let cube = centered_cube(9, 5);
        let labels: LabelMap = cube.voxels().map(|v| v as u32);
        let out = boundary_labels_multiclass(&labels, 3).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[&1], boundary_label(&cube, 3).unwrap());
    }

    #[test]
    fn multiclass_background_only_is_empty() {
        let labels: LabelMap = Grid::filled(Shape3::cube(6), 0);
        assert!(boundary_labels_multiclass(&labels, 3).unwrap().is_empty());
    }

    #[test]
    fn multiclass_two_disjoint_cubes() {
        let s = Shape3::new(16, 9, 9);
        let labels: LabelMap = Grid::from_fn(s, |i, j, k| {
            let inner = (2..7).contains(&j) && (2..7).contains(&k);
            match i {
                1..=5 if inner => 1,
                9..=13 if inner => 2,
                _ => 0,
            }
        });
        let out = boundary_labels_multiclass(&labels, 3).unwrap();
        assert_eq!(out.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        for (c, band) in &out {
            let indicator = BinaryMask::from_grid(labels.map(|v| (v == *c) as u8)).unwrap();
            assert_eq!(*band, indicator.xor(&naive_erode(&indicator, 3)));
            assert_eq!(band.count(), 98);
        }
    }

    #[test]
    fn soft_erode_matches_binary_erode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_mask(&mut rng, Shape3::cube(8), 0.8);
        let soft = soft_erode(&m.to_probability(), 3).unwrap();
        assert_eq!(soft, erode(&m, 3).unwrap().to_probability());
    }

    #[test]
    fn soft_erode_constant_interior() {
        let s = Shape3::cube(6);
        let p = ProbabilityMap::constant(s, 0.7);
        let e = soft_erode(&p, 3).unwrap();
        for idx in 0..s.len() {
            let (i, j, k) = s.coords(idx);
            let interior = [i, j, k].iter().all(|&x| (1..5).contains(&x));
            assert_eq!(e.as_slice()[idx], if interior { 0.7 } else { 0.0 });
        }
    }

    #[test]
    fn soft_erode_matches_naive_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape3::cube(8);
        let values: Vec<f32> = (0..s.len()).map(|_| rng.gen()).collect();
        let p = ProbabilityMap::new(s, values.clone()).unwrap();
        let got = soft_erode(&p, 3).unwrap();
        let want = naive_soft_erode(&values.iter().map(|&v| v as f64).collect::<Vec<_>>(), s, 3);
        for (g, w) in got.as_slice().iter().zip(&want) {
            assert_eq!(*g as f64, *w);
        }
    }

    #[test]
    fn argmin_points_at_the_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Shape3::new(7, 6, 5);
        let values: Vec<f64> = (0..s.len()).map(|_| rng.gen_range(0.05..1.0)).collect();
        for r in [1, 3, 5] {
            let (mins, src) = soft_erode_with_argmin(&values, s, r).unwrap();
            let want = naive_soft_erode(&values, s, r);
            assert_eq!(mins, want);
            for (m, src) in mins.iter().zip(&src) {
                match src {
                    Some(q) => assert_eq!(values[*q], *m),
                    None => assert_eq!(*m, 0.0),
                }
            }
        }
    }

    #[test]
    fn agrees_with_naive_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let s = Shape3::new(rng.gen_range(1..=12), rng.gen_range(1..=12), rng.gen_range(1..=12));
            let density = rng.gen_range(0.3..0.95);
            let m = random_mask(&mut rng, s, density);
            for r in [1, 3, 5, 7, 9] {
                assert_eq!(erode(&m, r).unwrap(), naive_erode(&m, r));
            }
        }
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (1usize..8, 1usize..8, 1usize..8, any::<u64>(), 0.2f64..1.0).prop_map(|(h, w, d, seed, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_mask(&mut rng, Shape3::new(h, w, d), p)
        })
    }

    proptest! {
        #[test]
        fn erosion_is_anti_extensive(m in arb_mask(), r in prop::sample::select(vec![1usize, 3, 5, 7])) {
            prop_assert!(erode(&m, r).unwrap().is_subset_of(&m));
        }

        #[test]
        fn erosion_is_monotone_in_kernel(m in arb_mask()) {
            let e3 = erode(&m, 3).unwrap();
            let e5 = erode(&m, 5).unwrap();
            prop_assert!(e5.is_subset_of(&e3));
            prop_assert!(e3.is_subset_of(&erode(&m, 1).unwrap()));
        }

        #[test]
        fn erosion_is_monotone_in_argument(m in arb_mask(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sub = m.and(&random_mask(&mut rng, m.shape(), 0.7));
            prop_assert!(erode(&sub, 3).unwrap().is_subset_of(&erode(&m, 3).unwrap()));
        }

        #[test]
        fn boundary_partitions_the_mask(m in arb_mask(), r in prop::sample::select(vec![1usize, 3, 5])) {
            let e = erode(&m, r).unwrap();
            let b = boundary_label(&m, r).unwrap();
            prop_assert!(b.and(&e).is_empty());
            prop_assert_eq!(b.or(&e), m);
        }
    }
}
