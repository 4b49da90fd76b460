use crate::backbone::{Backbone, DualHeadModel, ModelError};
use crate::nn::{Mode, Tensor};
use crate::volume::{ImageVolume, ProbabilityMap, Shape3};

/// Anything that maps a single-item image patch to per-class head
/// probabilities of the same spatial shape.
pub trait Predictor {
    fn predict_patch(&mut self, patch: &Tensor) -> Result<(Tensor, Option<Tensor>), ModelError>;
}

impl<B: Backbone> Predictor for DualHeadModel<B> {
    fn predict_patch(&mut self, patch: &Tensor) -> Result<(Tensor, Option<Tensor>), ModelError> {
        let out = self.forward(patch, Mode::Eval)?;
        Ok((out.seg, out.boundary))
    }
}

/// Full-volume probabilities, one map per class.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutput {
    pub seg: Vec<ProbabilityMap>,
    pub boundary: Option<Vec<ProbabilityMap>>,
}

/// Window start offsets covering `n` voxels with windows of `patch` and
/// the given stride; the last window is flush with the end.
pub fn window_starts(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    if n <= patch {
        return vec![0];
    }
    let count = (n - patch).div_ceil(stride) + 1;
    (0..count).map(|i| (i * stride).min(n - patch)).collect()
}

struct Accumulator {
    sums: Vec<f64>,
    channels: usize,
}

impl Accumulator {
    fn add(&mut self, t: &Tensor, vol: Shape3, origin: [isize; 3]) {
        let s = t.spatial;
        for c in 0..self.channels {
            let src = t.channel(0, c);
            let dst = &mut self.sums[c * vol.len()..(c + 1) * vol.len()];
            for (idx, &v) in src.iter().enumerate() {
                let (i, j, k) = s.coords(idx);
                if let Some(o) =
                    vol.checked_index(origin[0] + i as isize, origin[1] + j as isize, origin[2] + k as isize)
                {
                    dst[o] += v as f64;
                }
            }
        }
    }

    fn finish(self, vol: Shape3, counts: &[u32]) -> Vec<ProbabilityMap> {
        (0..self.channels)
            .map(|c| {
                let data = self.sums[c * vol.len()..(c + 1) * vol.len()]
                    .iter()
                    .zip(counts)
                    .map(|(s, &n)| (s / n as f64) as f32)
                    .collect();
                ProbabilityMap::new(vol, data).expect("mean of probabilities is a probability")
            })
            .collect()
    }
}

/// Overlapping-window inference averaging both heads per voxel. Images
/// smaller than the patch are zero-padded symmetrically and cropped back.
pub fn sliding_window_infer<P: Predictor>(
    model: &mut P,
    image: &ImageVolume,
    patch: Shape3,
    strides: Shape3,
) -> Result<WindowOutput, ModelError> {
    let vol = image.shape();
    for (axis, (s, p)) in ["H", "W", "D"].iter().zip(strides.dims().into_iter().zip(patch.dims())) {
        if s == 0 || s > p {
            return Err(ModelError::InvalidConfig(format!(
                "stride {s} along {axis} must lie in 1..={p} (the patch size)"
            )));
        }
    }
    let dims = vol.dims();
    let pdims = patch.dims();
    let pad: [usize; 3] = std::array::from_fn(|a| pdims[a].saturating_sub(dims[a]) / 2);
    let padded: [usize; 3] = std::array::from_fn(|a| dims[a].max(pdims[a]));
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| window_starts(padded[a], pdims[a], strides.dims()[a]));

    let mut counts = vec![0u32; vol.len()];
    let mut seg_acc: Option<Accumulator> = None;
    let mut bnd_acc: Option<Accumulator> = None;
    for &x in &starts[0] {
        for &y in &starts[1] {
            for &z in &starts[2] {
                let origin = [
                    x as isize - pad[0] as isize,
                    y as isize - pad[1] as isize,
                    z as isize - pad[2] as isize,
                ];
                let data = (0..patch.len())
                    .map(|idx| {
                        let (i, j, k) = patch.coords(idx);
                        vol.checked_index(origin[0] + i as isize, origin[1] + j as isize, origin[2] + k as isize)
                            .map_or(0.0, |o| image.as_slice()[o])
                    })
                    .collect();
                let (seg, bnd) = model.predict_patch(&Tensor::from_vec(1, 1, patch, data))?;
                let new = |c: usize| Accumulator {
                    sums: vec![0.0; c * vol.len()],
                    channels: c,
                };
                seg_acc.get_or_insert_with(|| new(seg.c)).add(&seg, vol, origin);
                if let Some(b) = bnd {
                    bnd_acc.get_or_insert_with(|| new(b.c)).add(&b, vol, origin);
                }
                for idx in 0..patch.len() {
                    let (i, j, k) = patch.coords(idx);
                    if let Some(o) =
                        vol.checked_index(origin[0] + i as isize, origin[1] + j as isize, origin[2] + k as isize)
                    {
                        counts[o] += 1;
                    }
                }
            }
        }
    }
    Ok(WindowOutput {
        seg: seg_acc.expect("at least one window").finish(vol, &counts),
        boundary: bnd_acc.map(|a| a.finish(vol, &counts)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_model, BackboneConfig};

    /// Outputs a fixed function of the patch: constant, or the image value
    /// squashed into [0, 1].
    struct Stub {
        constant: Option<f32>,
        calls: usize,
    }

    impl Predictor for Stub {
        fn predict_patch(&mut self, patch: &Tensor) -> Result<(Tensor, Option<Tensor>), ModelError> {
            self.calls += 1;
            let mut t = patch.clone();
            for v in &mut t.data {
                *v = self.constant.unwrap_or(1.0 / (1.0 + (-*v).exp()));
            }
            Ok((t.clone(), Some(t)))
        }
    }

    fn image(s: Shape3) -> ImageVolume {
        ImageVolume::new(s, (0..s.len()).map(|i| ((i * 7) % 13) as f32 - 6.0).collect(), [1.0; 3]).unwrap()
    }

    #[test]
    fn starts_cover_the_axis() {
        assert_eq!(window_starts(10, 4, 3), vec![0, 3, 6]);
        assert_eq!(window_starts(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(window_starts(4, 4, 2), vec![0]);
        assert_eq!(window_starts(3, 4, 2), vec![0]);
    }

    #[test]
    fn small_image_uses_one_padded_window() {
        let img = image(Shape3::new(3, 5, 2));
        let mut stub = Stub {
            constant: None,
            calls: 0,
        };
        let out = sliding_window_infer(&mut stub, &img, Shape3::cube(8), Shape3::cube(4)).unwrap();
        assert_eq!(stub.calls, 1);
        assert_eq!(out.seg[0].shape(), img.shape());
        // pointwise stub: the cropped output is the stub applied to the image
        for (p, v) in out.seg[0].as_slice().iter().zip(img.as_slice()) {
            assert!((p - 1.0 / (1.0 + (-v).exp())).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_model_gives_constant_map() {
        let img = image(Shape3::new(11, 9, 7));
        for strides in [Shape3::cube(2), Shape3::new(4, 3, 1), Shape3::cube(4)] {
            let mut stub = Stub {
                constant: Some(0.375),
                calls: 0,
            };
            let out = sliding_window_infer(&mut stub, &img, Shape3::cube(4), strides).unwrap();
            assert!(out.seg[0].as_slice().iter().all(|&p| p == 0.375));
            assert!(out.boundary.unwrap()[0].as_slice().iter().all(|&p| p == 0.375));
        }
    }

    #[test]
    fn invalid_strides_are_rejected() {
        let img = image(Shape3::cube(8));
        let mut stub = Stub {
            constant: Some(0.5),
            calls: 0,
        };
        assert!(sliding_window_infer(&mut stub, &img, Shape3::cube(4), Shape3::new(5, 4, 4)).is_err());
        assert!(sliding_window_infer(&mut stub, &img, Shape3::cube(4), Shape3::new(0, 4, 4)).is_err());
    }

    /// A real model is not translation invariant at patch borders, so an
    /// overlapping voxel must equal the mean of its windows' predictions.
    #[test]
    fn overlap_average_matches_manual_window_mean() {
        let cfg = BackboneConfig {
            depth: 2,
            base_width: 2,
            feature_channels: 2,
            ..BackboneConfig::default()
        };
        let mut model = build_model(&cfg, 1, 5).unwrap();
        let img = image(Shape3::new(8, 4, 4));
        let patch = Shape3::cube(4);
        let tiled = sliding_window_infer(&mut model, &img, patch, patch).unwrap();
        let overlapped = sliding_window_infer(&mut model, &img, patch, Shape3::new(2, 4, 4)).unwrap();
        // voxel (3, 1, 2) lies in windows starting at H = 0 and H = 2
        let probe = img.shape().index(3, 1, 2);
        let mut window = |h0: usize| {
            let data: Vec<f32> = (0..patch.len())
                .map(|idx| {
                    let (i, j, k) = patch.coords(idx);
                    img.as_slice()[img.shape().index(h0 + i, j, k)]
                })
                .collect();
            let (seg, _) = model.predict_patch(&Tensor::from_vec(1, 1, patch, data)).unwrap();
            seg.data[patch.index(3 - h0, 1, 2)] as f64
        };
        let expected = ((window(0) + window(2)) / 2.0) as f32;
        assert_eq!(overlapped.seg[0].as_slice()[probe], expected);
        assert_eq!(tiled.seg[0].as_slice()[probe], window(0) as f32);
        assert_ne!(tiled.seg[0], overlapped.seg[0]);
    }
}
