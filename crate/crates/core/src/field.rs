//! The coordinate-based neural field: Fourier positional encoding followed
//! by a sinusoidal MLP with a linear 3-output head.
//!
//! Forward evaluation is pure; parameters mutate only through the
//! optimizer. Batched entry points carry an explicit cache so the gradient
//! engine can run vector-Jacobian products against both parameters and
//! input coordinates.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{real, Real};
use crate::volume::GridDomain;

/// What the field output means: a displacement added to the input point,
/// or a stationary velocity to be integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Displacement,
    Velocity,
}

/// Fixed (never optimized) Gaussian Fourier frequency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierEncoding<F: Real> {
    pub sigma: f64,
    /// n x 3 frequency rows.
    pub omega: Array2<F>,
}

impl<F: Real> FourierEncoding<F> {
    pub fn n(&self) -> usize {
        self.omega.nrows()
    }

    /// Encoded dimension: one (cos, sin) pair per frequency.
    pub fn out_dim(&self) -> usize {
        2 * self.n()
    }

    /// Encodes a batch of normalized points; also returns the phase matrix
    /// (N x n of `2 pi w_i . p`) reused by [`FourierEncoding::vjp`].
    pub fn encode_batch(&self, pts: ArrayView2<F>) -> (Array2<F>, Array2<F>) {
        let two_pi = real::<F>(std::f64::consts::TAU);
        let phases = pts.dot(&self.omega.t()).mapv(|x| x * two_pi);
        let n = self.n();
        let mut z = Array2::zeros((pts.nrows(), 2 * n));
        for (mut row, prow) in z.outer_iter_mut().zip(phases.outer_iter()) {
            for i in 0..n {
                row[2 * i] = prow[i].cos();
                row[2 * i + 1] = prow[i].sin();
            }
        }
        (z, phases)
    }

    /// Cotangent of the encoding: maps `d loss / d z0` back to normalized
    /// point space.
    pub fn vjp(&self, phases: &Array2<F>, dz: ArrayView2<F>) -> Array2<F> {
        let n = self.n();
        let mut dphase = Array2::zeros(phases.raw_dim());
        for ((mut drow, prow), zrow) in dphase
            .outer_iter_mut()
            .zip(phases.outer_iter())
            .zip(dz.outer_iter())
        {
            for i in 0..n {
                drow[i] = zrow[2 * i + 1] * prow[i].cos() - zrow[2 * i] * prow[i].sin();
            }
        }
        let two_pi = real::<F>(std::f64::consts::TAU);
        dphase.dot(&self.omega).mapv(|x| x * two_pi)
    }
}

/// Draws the frequency matrix i.i.d. from N(0, sigma^2), deterministically
/// per seed.
pub fn init_fourier<F: Real>(n: usize, sigma: f64, seed: u64) -> Result<FourierEncoding<F>> {
    if n == 0 {
        return Err(Error::config("fourier frequency count must be >= 1"));
    }
    if !(sigma > 0.0) {
        return Err(Error::config("fourier sigma must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma).expect("valid normal");
    let omega = Array2::from_shape_fn((n, 3), |_| real::<F>(dist.sample(&mut rng)));
    Ok(FourierEncoding { sigma, omega })
}

/// Sinusoidal MLP weights. Hidden layers apply `sin(omega0 * (W z + b))`;
/// the final layer is linear with 3 outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<F: Real> {
    /// (W: out x in, b: out), ordered input to output.
    pub layers: Vec<(Array2<F>, Array1<F>)>,
    pub omega0: f64,
}

impl<F: Real> MlpParams<F> {
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].0.ncols()];
        dims.extend(self.layers.iter().map(|(w, _)| w.nrows()));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }
}

/// SIREN-style initialization. First layer U(+-1/fan_in), hidden layers
/// U(+-sqrt(6/fan_in)/omega0), final layer scaled by 1e-4 with zero bias so
/// the initial field is near zero (near-identity deformation).
pub fn init_siren<F: Real>(layer_dims: &[usize], omega0: f64, seed: u64) -> Result<MlpParams<F>> {
    if layer_dims.len() < 2 {
        return Err(Error::config("need at least one weight layer"));
    }
    if *layer_dims.last().unwrap() != 3 {
        return Err(Error::config("final layer must have 3 outputs"));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::config("zero-width layer"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = layer_dims.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
        let is_first = l == 0;
        let is_last = l == n_layers - 1;
        let mut limit = if is_first {
            1.0 / fan_in as f64
        } else {
            (6.0 / fan_in as f64).sqrt() / omega0
        };
        if is_last {
            limit *= 1e-4;
        }
        let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
            real::<F>(rng.gen_range(-limit..limit))
        });
        let b = if is_last {
            Array1::zeros(fan_out)
        } else {
            let blimit = 1.0 / (fan_in as f64).sqrt();
            Array1::from_shape_fn(fan_out, |_| real::<F>(rng.gen_range(-blimit..blimit)))
        };
        layers.push((w, b));
    }
    Ok(MlpParams { layers, omega0 })
}

/// Intermediate activations of one batched MLP pass, kept for the VJP.
pub struct MlpCache<F: Real> {
    /// Activations entering each layer: z0 .. z_{L-1}.
    acts: Vec<Array2<F>>,
    /// Pre-activations of hidden layers.
    pres: Vec<Array2<F>>,
}

impl<F: Real> MlpParams<F> {
    pub fn forward_batch(&self, z0: Array2<F>) -> Array2<F> {
        self.run(z0, false).0
    }

    pub fn forward_batch_cached(&self, z0: Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let (out, cache) = self.run(z0, true);
        (out, cache.expect("cache requested"))
    }

    fn run(&self, z0: Array2<F>, keep: bool) -> (Array2<F>, Option<MlpCache<F>>) {
        let w0 = real::<F>(self.omega0);
        let n_hidden = self.layers.len() - 1;
        let mut acts = Vec::new();
        let mut pres = Vec::new();
        let mut z = z0;
        for (w, b) in &self.layers[..n_hidden] {
            let mut pre = z.dot(&w.t());
            for mut row in pre.outer_iter_mut() {
                row += b;
            }
            let next = pre.mapv(|x| (w0 * x).sin());
            if keep {
                acts.push(z);
                pres.push(pre);
            }
            z = next;
        }
        let (wl, bl) = self.layers.last().unwrap();
        let mut out = z.dot(&wl.t());
        for mut row in out.outer_iter_mut() {
            row += bl;
        }
        if keep {
            acts.push(z);
            (out, Some(MlpCache { acts, pres }))
        } else {
            (out, None)
        }
    }

    /// Backpropagates `d_out` through the cached pass. Accumulates parameter
    /// gradients into `grad` (layout per [`flatten_params`]) and returns the
    /// cotangent at z0.
    pub fn vjp(&self, cache: &MlpCache<F>, d_out: ArrayView2<F>, grad: &mut [F]) -> Array2<F> {
        let w0 = real::<F>(self.omega0);
        let n_hidden = self.layers.len() - 1;
        let offsets = self.param_offsets();

        let (wl, _) = self.layers.last().unwrap();
        let zl = &cache.acts[n_hidden];
        accumulate_layer_grad(
            grad,
            offsets[n_hidden],
            &d_out.t().dot(zl),
            &d_out.sum_axis(Axis(0)),
        );
        let mut dz = d_out.dot(wl);

        for l in (0..n_hidden).rev() {
            let pre = &cache.pres[l];
            let mut dpre = dz;
            dpre.zip_mut_with(pre, |g, &p| *g = *g * w0 * (w0 * p).cos());
            let (w, _) = &self.layers[l];
            accumulate_layer_grad(
                grad,
                offsets[l],
                &dpre.t().dot(&cache.acts[l]),
                &dpre.sum_axis(Axis(0)),
            );
            dz = dpre.dot(w);
        }
        dz
    }

    /// Byte offsets of each layer's (W, b) block in the flat parameter vector.
    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for (w, b) in &self.layers {
            offsets.push(at);
            at += w.len() + b.len();
        }
        offsets
    }

    /// Flat layer-major parameter view: W1 row-major, b1, ..., WL, bL.
    pub fn flatten_params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in &self.layers {
            out.extend(w.iter().cloned());
            out.extend(b.iter().cloned());
        }
        out
    }

    pub fn set_params(&mut self, params: &[F]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(format!(
                "param vector length {} != {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for (w, b) in &mut self.layers {
            for x in w.iter_mut() {
                *x = params[at];
                at += 1;
            }
            for x in b.iter_mut() {
                *x = params[at];
                at += 1;
            }
        }
        Ok(())
    }
}

fn accumulate_layer_grad<F: Real>(grad: &mut [F], at: usize, dw: &Array2<F>, db: &Array1<F>) {
    let mut at = at;
    for x in dw.iter() {
        grad[at] += *x;
        at += 1;
    }
    for x in db.iter() {
        grad[at] += *x;
        at += 1;
    }
}

/// The optimizable object: encoding + MLP + output kind + coordinate domain.
#[derive(Debug, Clone)]
pub struct NeuralField<F: Real> {
    pub encoding: FourierEncoding<F>,
    pub mlp: MlpParams<F>,
    pub kind: FieldKind,
    pub domain: GridDomain,
}

/// Cache of one batched field pass, for [`NeuralField::batch_vjp`].
pub struct FieldCache<F: Real> {
    phases: Array2<F>,
    mlp: MlpCache<F>,
}

impl<F: Real> NeuralField<F> {
    pub fn new(
        encoding: FourierEncoding<F>,
        mlp: MlpParams<F>,
        kind: FieldKind,
        domain: GridDomain,
    ) -> Result<Self> {
        if mlp.layers[0].0.ncols() != encoding.out_dim() {
            return Err(Error::shape(format!(
                "first layer input {} != encoding output {}",
                mlp.layers[0].0.ncols(),
                encoding.out_dim()
            )));
        }
        Ok(NeuralField {
            encoding,
            mlp,
            kind,
            domain,
        })
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    fn normalized_batch(&self, pts_voxel: &[[F; 3]]) -> Array2<F> {
        let mut arr = Array2::zeros((pts_voxel.len(), 3));
        for (mut row, &p) in arr.outer_iter_mut().zip(pts_voxel) {
            let n = self.domain.normalize(p);
            row[0] = n[0];
            row[1] = n[1];
            row[2] = n[2];
        }
        arr
    }

    /// Field output (voxel-unit 3-vector) at a single voxel coordinate.
    pub fn forward(&self, p_voxel: [F; 3]) -> [F; 3] {
        self.forward_batch(&[p_voxel])[0]
    }

    /// Elementwise [`NeuralField::forward`] over a batch, order preserved.
    pub fn forward_batch(&self, pts_voxel: &[[F; 3]]) -> Vec<[F; 3]> {
        let pts = self.normalized_batch(pts_voxel);
        let (z0, _) = self.encoding.encode_batch(pts.view());
        let out = self.mlp.forward_batch(z0);
        out.outer_iter().map(|r| [r[0], r[1], r[2]]).collect()
    }

    pub fn forward_batch_cached(&self, pts_voxel: &[[F; 3]]) -> (Vec<[F; 3]>, FieldCache<F>) {
        let pts = self.normalized_batch(pts_voxel);
        let (z0, phases) = self.encoding.encode_batch(pts.view());
        let (out, mlp) = self.mlp.forward_batch_cached(z0);
        (
            out.outer_iter().map(|r| [r[0], r[1], r[2]]).collect(),
            FieldCache { phases, mlp },
        )
    }

    /// Backpropagates output cotangents through a cached pass. Parameter
    /// gradients accumulate into `grad`; when `input_grads` is given, the
    /// cotangent with respect to the voxel-space input points is written
    /// there.
    pub fn batch_vjp(
        &self,
        cache: &FieldCache<F>,
        cotangents: &[[F; 3]],
        grad: &mut [F],
        mut input_grads: Option<&mut Vec<[F; 3]>>,
    ) {
        let mut d_out = Array2::zeros((cotangents.len(), 3));
        for (mut row, &c) in d_out.outer_iter_mut().zip(cotangents) {
            row[0] = c[0];
            row[1] = c[1];
            row[2] = c[2];
        }
        let dz0 = self.mlp.vjp(&cache.mlp, d_out.view(), grad);
        if let Some(out) = input_grads.as_deref_mut() {
            let dpn = self.encoding.vjp(&cache.phases, dz0.view());
            let scale = self.domain.normalize_scale::<F>();
            out.clear();
            out.extend(
                dpn.outer_iter()
                    .map(|r| [r[0] * scale[0], r[1] * scale[1], r[2] * scale[2]]),
            );
        }
    }

    /// Re-instantiates the field at another precision.
    pub fn convert<G: Real>(&self) -> NeuralField<G> {
        NeuralField {
            encoding: FourierEncoding {
                sigma: self.encoding.sigma,
                omega: self.encoding.omega.mapv(|x| G::from_f64(x.to_f64())),
            },
            mlp: MlpParams {
                layers: self
                    .mlp
                    .layers
                    .iter()
                    .map(|(w, b)| {
                        (
                            w.mapv(|x| G::from_f64(x.to_f64())),
                            b.mapv(|x| G::from_f64(x.to_f64())),
                        )
                    })
                    .collect(),
                omega0: self.mlp.omega0,
            },
            kind: self.kind,
            domain: self.domain,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_domain() -> GridDomain {
        GridDomain::new([9, 9, 9])
    }

    #[test]
    fn fourier_shapes_and_determinism() {
        let enc = init_fourier::<f64>(128, 3.0, 7).unwrap();
        assert_eq!(enc.omega.shape(), &[128, 3]);
        assert_eq!(enc.out_dim(), 256);
        let again = init_fourier::<f64>(128, 3.0, 7).unwrap();
        assert_eq!(enc.omega, again.omega);
        let other = init_fourier::<f64>(128, 3.0, 8).unwrap();
        assert_ne!(enc.omega, other.omega);

        assert!(init_fourier::<f64>(0, 3.0, 1).is_err());
        assert!(init_fourier::<f64>(4, 0.0, 1).is_err());
    }

    #[test]
    fn fourier_entry_std_matches_sigma() {
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        let mut count = 0usize;
        for seed in 0..100_000u64 {
            let enc = init_fourier::<f64>(4, 3.0, seed).unwrap();
            for &x in enc.omega.iter() {
                sum += x;
                sumsq += x * x;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let std = (sumsq / count as f64 - mean * mean).sqrt();
        assert!((std - 3.0).abs() / 3.0 < 0.02, "std {std}");
    }

    #[test]
    fn encode_closed_forms() {
        let enc = init_fourier::<f64>(3, 1.0, 0).unwrap();
        let pts = ndarray::arr2(&[[0.0, 0.0, 0.0]]);
        let (z, _) = enc.encode_batch(pts.view());
        assert_eq!(z.row(0).to_vec(), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);

        let mut enc1 = init_fourier::<f64>(1, 1.0, 0).unwrap();
        enc1.omega = ndarray::arr2(&[[0.5, 0.0, 0.0]]);
        let pts = ndarray::arr2(&[[1.0, 0.0, 0.0]]);
        let (z, _) = enc1.encode_batch(pts.view());
        assert!((z[[0, 0]] - (-1.0)).abs() < 1e-12);
        assert!(z[[0, 1]].abs() < 1e-12);

        // All components bounded by [-1, 1].
        let enc = init_fourier::<f64>(16, 3.0, 3).unwrap();
        let pts = ndarray::arr2(&[[0.37, -0.9, 0.99], [-1.0, 1.0, 0.0]]);
        let (z, _) = enc.encode_batch(pts.view());
        assert!(z.iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    #[test]
    fn siren_layer_shapes() {
        let disp = init_siren::<f64>(&[256, 256, 256, 256, 3], 30.0, 1).unwrap();
        assert_eq!(disp.layers.len(), 4);
        assert_eq!(disp.param_count(), 3 * (256 * 256 + 256) + (3 * 256 + 3));

        let vel = init_siren::<f64>(&[256, 256, 256, 3], 30.0, 1).unwrap();
        assert_eq!(vel.layers.len(), 3);

        assert!(init_siren::<f64>(&[256], 30.0, 1).is_err());
        assert!(init_siren::<f64>(&[256, 4], 30.0, 1).is_err()); // final must be 3
    }

    #[test]
    fn near_zero_initial_output() {
        let enc = init_fourier::<f64>(32, 3.0, 11).unwrap();
        let mlp = init_siren::<f64>(&[64, 64, 64, 3], 30.0, 12).unwrap();
        let nf = NeuralField::new(enc, mlp, FieldKind::Displacement, tiny_domain()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|_| {
                [
                    rng.gen_range(0.0..8.0),
                    rng.gen_range(0.0..8.0),
                    rng.gen_range(0.0..8.0),
                ]
            })
            .collect();
        let out = nf.forward_batch(&pts);
        let max = out
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(max < 1e-2, "initial output magnitude {max}");
    }

    #[test]
    fn forward_zero_weights_returns_bias() {
        let enc = init_fourier::<f64>(4, 3.0, 5).unwrap();
        let mut mlp = init_siren::<f64>(&[8, 6, 3], 30.0, 5).unwrap();
        let n = mlp.param_count();
        mlp.set_params(&vec![0.0; n]).unwrap();
        // Set final bias to (1, 2, 3).
        let mut params = vec![0.0; n];
        let tail = n - 3;
        params[tail..].copy_from_slice(&[1.0, 2.0, 3.0]);
        mlp.set_params(&params).unwrap();
        let nf = NeuralField::new(enc, mlp, FieldKind::Displacement, tiny_domain()).unwrap();
        assert_eq!(nf.forward([1.0, 2.0, 3.0]), [1.0, 2.0, 3.0]);
        assert_eq!(nf.forward([5.0, 0.0, 7.0]), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn forward_matches_hand_computed_nested_sine() {
        // 1 hidden layer, hand-set small weights; compare against a direct
        // scalar computation of sin(w0 (W z0 + b)) followed by the head.
        let mut enc = init_fourier::<f64>(1, 1.0, 0).unwrap();
        enc.omega = ndarray::arr2(&[[0.25, -0.5, 0.125]]);
        let omega0 = 30.0;
        let w1 = ndarray::arr2(&[[0.3, -0.2], [0.05, 0.15]]);
        let b1 = ndarray::arr1(&[0.01, -0.02]);
        let wl = ndarray::arr2(&[[1.0, 2.0], [0.5, -0.5], [0.0, 1.0]]);
        let bl = ndarray::arr1(&[0.1, 0.2, 0.3]);
        let mlp = MlpParams {
            layers: vec![(w1.clone(), b1.clone()), (wl.clone(), bl.clone())],
            omega0,
        };
        let domain = tiny_domain();
        let nf = NeuralField::new(enc.clone(), mlp, FieldKind::Displacement, domain).unwrap();

        let p = [2.0, 5.5, 7.25];
        let pn = domain.normalize(p);
        let phase = std::f64::consts::TAU
            * (enc.omega[[0, 0]] * pn[0] + enc.omega[[0, 1]] * pn[1] + enc.omega[[0, 2]] * pn[2]);
        let z0 = [phase.cos(), phase.sin()];
        let z1 = [
            (omega0 * (w1[[0, 0]] * z0[0] + w1[[0, 1]] * z0[1] + b1[0])).sin(),
            (omega0 * (w1[[1, 0]] * z0[0] + w1[[1, 1]] * z0[1] + b1[1])).sin(),
        ];
        let expect = [
            wl[[0, 0]] * z1[0] + wl[[0, 1]] * z1[1] + bl[0],
            wl[[1, 0]] * z1[0] + wl[[1, 1]] * z1[1] + bl[1],
            wl[[2, 0]] * z1[0] + wl[[2, 1]] * z1[1] + bl[2],
        ];
        let got = nf.forward(p);
        for a in 0..3 {
            assert!((got[a] - expect[a]).abs() < 1e-12, "{got:?} vs {expect:?}");
        }

        // Bitwise repeatability.
        assert_eq!(nf.forward(p), nf.forward(p));
    }

    #[test]
    fn batch_equals_pointwise_and_preserves_order() {
        let enc = init_fourier::<f64>(8, 3.0, 2).unwrap();
        let mlp = init_siren::<f64>(&[16, 12, 3], 30.0, 3).unwrap();
        let nf = NeuralField::new(enc, mlp, FieldKind::Velocity, tiny_domain()).unwrap();
        let pts = vec![[1.0, 2.0, 3.0], [4.0, 4.0, 4.0], [0.0, 8.0, 1.5]];
        let batch = nf.forward_batch(&pts);
        assert_eq!(batch[0], nf.forward_batch(&[pts[0]])[0]);
        let permuted = nf.forward_batch(&[pts[2], pts[0], pts[1]]);
        assert_eq!(permuted[0], batch[2]);
        assert_eq!(permuted[1], batch[0]);
        assert_eq!(permuted[2], batch[1]);
    }

    #[test]
    fn large_batch_smoke() {
        // Full downsize batch at production scale: 54 * 64 * 48 points.
        let enc = init_fourier::<f32>(8, 3.0, 2).unwrap();
        let mlp = init_siren::<f32>(&[16, 16, 3], 30.0, 3).unwrap();
        let nf = NeuralField::new(enc, mlp, FieldKind::Displacement, GridDomain::new([160, 192, 144]))
            .unwrap();
        let pts: Vec<[f32; 3]> = (0..165_888)
            .map(|i| [(i % 54) as f32, ((i / 54) % 64) as f32, (i / 3456) as f32])
            .collect();
        let out = nf.forward_batch(&pts);
        assert_eq!(out.len(), 165_888);
        assert!(out.iter().all(|v| v.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn flatten_set_round_trip() {
        let mlp = init_siren::<f64>(&[8, 6, 3], 30.0, 17).unwrap();
        let flat = mlp.flatten_params();
        assert_eq!(flat.len(), mlp.param_count());
        let mut other = init_siren::<f64>(&[8, 6, 3], 30.0, 99).unwrap();
        other.set_params(&flat).unwrap();
        assert_eq!(other.layers, mlp.layers);
        assert!(other.set_params(&flat[1..]).is_err());
    }
}
