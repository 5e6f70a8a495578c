//! Deterministic synthetic data: smooth blob volumes and known smooth
//! deformations with guaranteed positive Jacobians, for tests and
//! recovery studies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::DeformationField;
use crate::error::{Error, Result};
use crate::volume::{warp_volume, GridDomain, Volume};

/// Generation knobs. Widths are in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    /// Gaussian blobs summed into the intensity volume.
    pub blob_count: usize,
    pub blob_width: [f64; 2],
    /// Gaussian bump vector fields summed into the deformation.
    pub bump_count: usize,
    pub bump_width: [f64; 2],
    /// Peak displacement magnitude in voxels.
    pub delta_max: f64,
}

impl SynthSpec {
    pub fn new(dims: [usize; 3], seed: u64) -> Self {
        let scale = *dims.iter().min().unwrap() as f64;
        SynthSpec {
            dims,
            seed,
            blob_count: 8,
            blob_width: [0.06 * scale, 0.22 * scale],
            bump_count: 6,
            bump_width: [0.18 * scale, 0.35 * scale],
            delta_max: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::config(format!(
                "synth dims must be >= 8 per axis, got {:?}",
                self.dims
            )));
        }
        if self.delta_max < 0.0 {
            return Err(Error::config("delta_max must be >= 0"));
        }
        if self.blob_width[0] <= 0.0 || self.blob_width[1] < self.blob_width[0] {
            return Err(Error::config("blob_width range must be positive and ordered"));
        }
        if self.bump_width[0] <= 0.0 || self.bump_width[1] < self.bump_width[0] {
            return Err(Error::config("bump_width range must be positive and ordered"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Gaussian {
    center: [f64; 3],
    /// Per-axis widths (anisotropic).
    sigma: [f64; 3],
    /// Blob amplitude or bump displacement vector.
    amp: [f64; 3],
}

impl Gaussian {
    fn envelope(&self, p: [f64; 3]) -> f64 {
        let mut e = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.sigma[a];
            e += d * d;
        }
        (-0.5 * e).exp()
    }
}

fn draw_gaussian(dims: [usize; 3], width: [f64; 2], rng: &mut ChaCha8Rng) -> Gaussian {
    let mut center = [0.0; 3];
    let mut sigma = [0.0; 3];
    for a in 0..3 {
        center[a] = rng.gen_range(0.0..(dims[a] - 1) as f64);
        sigma[a] = rng.gen_range(width[0]..=width[1]);
    }
    Gaussian {
        center,
        sigma,
        amp: [0.0; 3],
    }
}

/// Sum of random anisotropic Gaussian blobs, min-max normalized to [0, 1].
pub fn make_smooth_volume(spec: &SynthSpec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blobs: Vec<Gaussian> = (0..spec.blob_count)
        .map(|_| {
            let mut g = draw_gaussian(spec.dims, spec.blob_width, &mut rng);
            g.amp = [rng.gen_range(0.2..=1.0); 3];
            g
        })
        .collect();
    let [nd, nh, nw] = spec.dims;
    let mut data = Vec::with_capacity(nd * nh * nw);
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let p = [d as f64, h as f64, w as f64];
                let v: f64 = blobs.iter().map(|g| g.amp[0] * g.envelope(p)).sum();
                data.push(v);
            }
        }
    }
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let out: Vec<f32> = if range > 0.0 {
        data.iter().map(|&v| ((v - lo) / range) as f32).collect()
    } else {
        vec![0.0; data.len()]
    };
    Volume::intensity(spec.dims, out)
}

/// A smooth displacement with its exact analytic evaluator.
pub struct SynthDeformation {
    pub field: DeformationField,
    bumps: Vec<Gaussian>,
    scale: f64,
}

impl SynthDeformation {
    /// Deformed position of an arbitrary (possibly off-grid) point.
    pub fn evaluate(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = p;
        for g in &self.bumps {
            let e = self.scale * g.envelope(p);
            for a in 0..3 {
                out[a] += e * g.amp[a];
            }
        }
        out
    }

    /// Peak displacement magnitude over the grid, in voxels.
    pub fn max_displacement(&self) -> f64 {
        let domain = self.field.domain;
        let pts = domain.grid_points::<f64>();
        self.field
            .positions
            .iter()
            .zip(&pts)
            .map(|(q, p)| {
                let mut s = 0.0;
                for a in 0..3 {
                    s += (q[a] as f64 - p[a]).powi(2);
                }
                s.sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Sum of Gaussian bump vector fields, rescaled so the peak displacement
/// is `delta_max` and every unit forward difference of the displacement
/// has norm < 0.4. The latter bounds the Frobenius norm of the
/// displacement Jacobian below 1, so `det(I + grad u) > 0` everywhere and
/// the map stays fold-free at stride 1.
pub fn make_smooth_deformation(spec: &SynthSpec) -> Result<SynthDeformation> {
    spec.validate()?;
    let domain = GridDomain::new(spec.dims);
    // Offset the stream so volumes and fields of one seed are independent.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5e1f_0f1e_1dca_11ed);
    let bumps: Vec<Gaussian> = (0..spec.bump_count)
        .map(|_| {
            let mut g = draw_gaussian(spec.dims, spec.bump_width, &mut rng);
            for a in 0..3 {
                g.amp[a] = rng.gen_range(-1.0..=1.0);
            }
            g
        })
        .collect();

    let pts = domain.grid_points::<f64>();
    let mut disp: Vec<[f64; 3]> = pts
        .iter()
        .map(|&p| {
            let mut u = [0.0; 3];
            for g in &bumps {
                let e = g.envelope(p);
                for a in 0..3 {
                    u[a] += e * g.amp[a];
                }
            }
            u
        })
        .collect();

    let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let peak = disp.iter().map(norm).fold(0.0, f64::max);
    let mut scale = if peak > 0.0 && spec.delta_max > 0.0 {
        spec.delta_max / peak
    } else {
        0.0
    };

    if scale > 0.0 {
        // Largest forward difference of the unscaled displacement.
        let [nd, nh, nw] = spec.dims;
        let idx = |d: usize, h: usize, w: usize| (d * nh + h) * nw + w;
        let mut max_diff = 0.0f64;
        for d in 0..nd {
            for h in 0..nh {
                for w in 0..nw {
                    let u = disp[idx(d, h, w)];
                    let mut consider = |v: [f64; 3]| {
                        let diff = [v[0] - u[0], v[1] - u[1], v[2] - u[2]];
                        max_diff = max_diff.max(norm(&diff));
                    };
                    if d + 1 < nd {
                        consider(disp[idx(d + 1, h, w)]);
                    }
                    if h + 1 < nh {
                        consider(disp[idx(d, h + 1, w)]);
                    }
                    if w + 1 < nw {
                        consider(disp[idx(d, h, w + 1)]);
                    }
                }
            }
        }
        if max_diff > 0.0 && scale * max_diff >= 0.4 {
            scale = 0.39 / max_diff;
        }
    }

    for (u, p) in disp.iter_mut().zip(&pts) {
        for a in 0..3 {
            u[a] = p[a] + scale * u[a];
        }
    }
    let positions: Vec<[f32; 3]> = disp
        .iter()
        .map(|u| [u[0] as f32, u[1] as f32, u[2] as f32])
        .collect();
    Ok(SynthDeformation {
        field: DeformationField { domain, positions },
        bumps,
        scale,
    })
}

/// A registration test pair: `target = warp(moving, gt_field)`, so the
/// ground-truth transform maps target coordinates into the moving volume.
pub fn make_pair(spec: &SynthSpec) -> Result<(Volume, Volume, SynthDeformation)> {
    let moving = make_smooth_volume(spec)?;
    let gt = make_smooth_deformation(spec)?;
    let target = warp_volume(&moving, &gt.field)?;
    Ok((target, moving, gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::jacobian_stats;

    #[test]
    fn volume_deterministic_and_bounded() {
        let spec = SynthSpec::new([12, 10, 14], 7);
        let a = make_smooth_volume(&spec).unwrap();
        let b = make_smooth_volume(&spec).unwrap();
        assert_eq!(a.intensity_data().unwrap(), b.intensity_data().unwrap());
        let data = a.intensity_data().unwrap();
        assert!(data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(data.iter().any(|&v| v == 0.0) && data.iter().any(|&v| v == 1.0));

        let other = make_smooth_volume(&SynthSpec::new([12, 10, 14], 8)).unwrap();
        assert_ne!(data, other.intensity_data().unwrap());
    }

    #[test]
    fn zero_blobs_zero_volume() {
        let mut spec = SynthSpec::new([8, 8, 8], 0);
        spec.blob_count = 0;
        let v = make_smooth_volume(&spec).unwrap();
        assert!(v.intensity_data().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_delta_gives_identity() {
        let mut spec = SynthSpec::new([8, 8, 8], 3);
        spec.delta_max = 0.0;
        let def = make_smooth_deformation(&spec).unwrap();
        let pts = def.field.domain.grid_points::<f64>();
        for (q, p) in def.field.positions.iter().zip(&pts) {
            for a in 0..3 {
                assert_eq!(q[a] as f64, p[a]);
            }
        }
        assert_eq!(def.evaluate([1.5, 2.5, 3.5]), [1.5, 2.5, 3.5]);
    }

    #[test]
    fn deformation_fold_free_across_seeds() {
        for seed in 0..6 {
            let mut spec = SynthSpec::new([16, 14, 12], seed);
            spec.delta_max = 4.0;
            let def = make_smooth_deformation(&spec).unwrap();
            let stats = jacobian_stats(&def.field, [1, 1, 1]).unwrap();
            assert_eq!(stats.nonpos_fraction, 0.0, "seed {seed}");
            assert!(stats.min_det > 0.0);
            assert!(def.max_displacement() <= spec.delta_max + 1e-6);
        }
    }

    #[test]
    fn evaluator_matches_dense_field() {
        let spec = SynthSpec::new([10, 12, 9], 17);
        let def = make_smooth_deformation(&spec).unwrap();
        let pts = def.field.domain.grid_points::<f64>();
        for (q, &p) in def.field.positions.iter().zip(&pts) {
            let e = def.evaluate(p);
            for a in 0..3 {
                assert!((q[a] as f64 - e[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pair_consistency() {
        let spec = SynthSpec::new([12, 12, 12], 23);
        let (target, moving, gt) = make_pair(&spec).unwrap();
        assert_eq!(target.dims, moving.dims);
        // Re-warping moving with the ground truth reproduces the target.
        let rewarp = warp_volume(&moving, &gt.field).unwrap();
        assert_eq!(
            rewarp.intensity_data().unwrap(),
            target.intensity_data().unwrap()
        );
        // Pair differs unless the deformation is trivial.
        assert_ne!(
            target.intensity_data().unwrap(),
            moving.intensity_data().unwrap()
        );
    }

    #[test]
    fn spec_validation() {
        assert!(make_smooth_volume(&SynthSpec::new([4, 8, 8], 0)).is_err());
        let mut bad = SynthSpec::new([8, 8, 8], 0);
        bad.delta_max = -1.0;
        assert!(make_smooth_deformation(&bad).is_err());
    }
}
