//! Loss assembly: windowed squared LNCC similarity, the local orientation
//! consistency hinge on Jacobian determinants, totals, and the two-phase
//! hybrid weighting. Also home to the deformation models the loss is
//! differentiated through.
//!
//! All window sums use zero padding normalized by the constant `w^3`, so
//! every lattice site carries a defined LNCC value and border windows show
//! the usual padding artifact.

use serde::{Deserialize, Serialize};

use crate::autograd::Objective;
use crate::deform::{apply_field_batch, det3, OdeConfig};
use crate::error::{Error, Result};
use crate::field::{FieldKind, NeuralField};
use crate::real::{real, Real};
use crate::sampling::{batch_coordinates, Block, SampleBatch};
use crate::volume::{sample_trilinear_with_coord_grad, GridDomain, Volume};

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// LNCC window extent (odd, >= 3), in lattice samples.
    pub window: usize,
    pub lambda_reg: f64,
    /// Denominator guard; bounds LNCC by 1 and zeroes constant windows.
    pub eps_lncc: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            window: 9,
            lambda_reg: 1000.0,
            eps_lncc: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::config("lncc window must be odd and >= 3"));
        }
        if self.lambda_reg < 0.0 {
            return Err(Error::config("lambda_reg must be >= 0"));
        }
        if !(self.eps_lncc > 0.0) {
            return Err(Error::config("eps_lncc must be > 0"));
        }
        Ok(())
    }
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub sim: f64,
    pub reg: f64,
    /// (sim-sum, locc-sum, site counts) per block, for logging.
    pub per_block: Vec<BlockLoss>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLoss {
    pub lncc_sum: f64,
    pub locc_sum: f64,
    pub lncc_sites: usize,
    pub locc_sites: usize,
}

/// Phase weighting of the hybrid scheme: phase 1 trains the first field
/// only, phase 2 the second only.
pub fn hybrid_loss(phase: u8, nf1_path: &LossReport, nf2_path: &LossReport) -> Result<f64> {
    match phase {
        1 => Ok(nf1_path.total),
        2 => Ok(nf2_path.total),
        other => Err(Error::config(format!("invalid hybrid phase {other}"))),
    }
}

// ---------------------------------------------------------------------------
// Box-filter window sums (zero padded)
// ---------------------------------------------------------------------------

fn box_pass_axis<F: Real>(src: &[F], dims: [usize; 3], axis: usize, radius: usize, dst: &mut [F]) {
    let strides = [dims[1] * dims[2], dims[2], 1];
    let len = dims[axis];
    let stride = strides[axis];
    let (oa, ob) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for ia in 0..dims[oa] {
        for ib in 0..dims[ob] {
            let base = ia * strides[oa] + ib * strides[ob];
            let mut sum = F::zero();
            for j in 0..len.min(radius + 1) {
                sum += src[base + j * stride];
            }
            dst[base] = sum;
            for i in 1..len {
                if i + radius < len {
                    sum += src[base + (i + radius) * stride];
                }
                if i >= radius + 1 {
                    sum -= src[base + (i - radius - 1) * stride];
                }
                dst[base + i * stride] = sum;
            }
        }
    }
}

/// Sum over the centered `w^3` window at every site, zero padded.
pub fn box_sum_3d<F: Real>(src: &[F], dims: [usize; 3], window: usize) -> Vec<F> {
    let radius = window / 2;
    let mut a = src.to_vec();
    let mut b = vec![F::zero(); src.len()];
    box_pass_axis(&a, dims, 0, radius, &mut b);
    box_pass_axis(&b, dims, 1, radius, &mut a);
    box_pass_axis(&a, dims, 2, radius, &mut b);
    b
}

// ---------------------------------------------------------------------------
// LNCC
// ---------------------------------------------------------------------------

/// Per-site intermediates of one LNCC evaluation, kept for the backward pass.
pub struct LnccMap<F: Real> {
    pub values: Vec<F>,
    dims: [usize; 3],
    window: usize,
    cross: Vec<F>,
    vt: Vec<F>,
    denom: Vec<F>,
    tbar: Vec<F>,
    mbar: Vec<F>,
}

/// Squared local normalized cross-correlation per site over the block
/// lattice.
pub fn lncc_map<F: Real>(
    target_vals: &[F],
    warped_vals: &[F],
    dims: [usize; 3],
    cfg: &LossConfig,
) -> Result<LnccMap<F>> {
    cfg.validate()?;
    let n = dims[0] * dims[1] * dims[2];
    if target_vals.len() != n || warped_vals.len() != n {
        return Err(Error::shape(format!(
            "lncc value grids must match block dims {dims:?}"
        )));
    }
    let w3 = real::<F>((cfg.window * cfg.window * cfg.window) as f64);
    let eps = real::<F>(cfg.eps_lncc);

    let tt: Vec<F> = target_vals.iter().map(|&x| x * x).collect();
    let mm: Vec<F> = warped_vals.iter().map(|&x| x * x).collect();
    let tm: Vec<F> = target_vals
        .iter()
        .zip(warped_vals)
        .map(|(&a, &b)| a * b)
        .collect();

    let st = box_sum_3d(target_vals, dims, cfg.window);
    let sm = box_sum_3d(warped_vals, dims, cfg.window);
    let stt = box_sum_3d(&tt, dims, cfg.window);
    let smm = box_sum_3d(&mm, dims, cfg.window);
    let stm = box_sum_3d(&tm, dims, cfg.window);

    let mut values = Vec::with_capacity(n);
    let mut cross = Vec::with_capacity(n);
    let mut vt = Vec::with_capacity(n);
    let mut denom = Vec::with_capacity(n);
    let mut tbar = Vec::with_capacity(n);
    let mut mbar = Vec::with_capacity(n);
    for i in 0..n {
        let tb = st[i] / w3;
        let mb = sm[i] / w3;
        let c = stm[i] - st[i] * mb;
        let a = stt[i] - st[i] * tb;
        let b = smm[i] - sm[i] * mb;
        let d = a * b + eps;
        values.push(c * c / d);
        cross.push(c);
        vt.push(a);
        denom.push(d);
        tbar.push(tb);
        mbar.push(mb);
    }
    Ok(LnccMap {
        values,
        dims,
        window: cfg.window,
        cross,
        vt,
        denom,
        tbar,
        mbar,
    })
}

impl<F: Real> LnccMap<F> {
    /// Backpropagates a uniform per-site cotangent `g` into the warped
    /// values. (The target side is constant in optimization.)
    pub fn backward_uniform(&self, warped_vals: &[F], target_vals: &[F], g: F) -> Vec<F> {
        let n = self.values.len();
        let two = real::<F>(2.0);
        // d lncc / d m_k = alpha_c (t_k - tbar_c) + beta_c (m_k - mbar_c)
        // for every site c whose window contains k; the sums over c are the
        // same box filter applied to the per-site coefficients.
        let mut alpha = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        let mut offset = Vec::with_capacity(n);
        for i in 0..n {
            let a = g * two * self.cross[i] / self.denom[i];
            let b = -g * two * self.cross[i] * self.cross[i] * self.vt[i]
                / (self.denom[i] * self.denom[i]);
            alpha.push(a);
            beta.push(b);
            offset.push(a * self.tbar[i] + b * self.mbar[i]);
        }
        let ba = box_sum_3d(&alpha, self.dims, self.window);
        let bb = box_sum_3d(&beta, self.dims, self.window);
        let bo = box_sum_3d(&offset, self.dims, self.window);
        (0..n)
            .map(|k| target_vals[k] * ba[k] + warped_vals[k] * bb[k] - bo[k])
            .collect()
    }
}

// ---------------------------------------------------------------------------
// LOCC
// ---------------------------------------------------------------------------

fn block_jacobian<F: Real>(
    positions: &[[F; 3]],
    block: &Block,
    d: usize,
    h: usize,
    w: usize,
) -> [[f64; 3]; 3] {
    let (nh, nw) = (block.dims[1], block.dims[2]);
    let idx = |d: usize, h: usize, w: usize| (d * nh + h) * nw + w;
    let p = positions[idx(d, h, w)];
    let pd = positions[idx(d + 1, h, w)];
    let ph = positions[idx(d, h + 1, w)];
    let pw = positions[idx(d, h, w + 1)];
    let mut j = [[0.0f64; 3]; 3];
    for r in 0..3 {
        j[r][0] = (pd[r].to_f64() - p[r].to_f64()) / block.stride[0] as f64;
        j[r][1] = (ph[r].to_f64() - p[r].to_f64()) / block.stride[1] as f64;
        j[r][2] = (pw[r].to_f64() - p[r].to_f64()) / block.stride[2] as f64;
    }
    j
}

fn cofactor(j: &[[f64; 3]; 3], r: usize, c: usize) -> f64 {
    let (r1, r2) = match r {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (c1, c2) = match c {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let minor = j[r1][c1] * j[r2][c2] - j[r1][c2] * j[r2][c1];
    if (r + c) % 2 == 0 {
        minor
    } else {
        -minor
    }
}

fn locc_block_forward<F: Real>(positions: &[[F; 3]], block: &Block) -> Result<(f64, usize)> {
    if block.dims.iter().any(|&d| d < 2) {
        return Err(Error::shape("locc needs block dims >= 2 per axis"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for d in 0..block.dims[0] - 1 {
        for h in 0..block.dims[1] - 1 {
            for w in 0..block.dims[2] - 1 {
                let det = det3(&block_jacobian(positions, block, d, h, w));
                if det < 0.0 {
                    sum -= det;
                }
                count += 1;
            }
        }
    }
    Ok((sum, count))
}

/// Accumulates `g * d locc_sum / d positions` into `d_pos`.
fn locc_block_backward<F: Real>(positions: &[[F; 3]], block: &Block, g: F, d_pos: &mut [[F; 3]]) {
    let (nh, nw) = (block.dims[1], block.dims[2]);
    let idx = |d: usize, h: usize, w: usize| (d * nh + h) * nw + w;
    for d in 0..block.dims[0] - 1 {
        for h in 0..block.dims[1] - 1 {
            for w in 0..block.dims[2] - 1 {
                let j = block_jacobian(positions, block, d, h, w);
                if det3(&j) >= 0.0 {
                    continue;
                }
                // penalty = -det, so d penalty / d J[r][c] = -cofactor.
                let at = [
                    idx(d + 1, h, w),
                    idx(d, h + 1, w),
                    idx(d, h, w + 1),
                ];
                let home = idx(d, h, w);
                for c in 0..3 {
                    let inv_stride = real::<F>(1.0 / block.stride[c] as f64);
                    for r in 0..3 {
                        let contrib = g * real::<F>(-cofactor(&j, r, c)) * inv_stride;
                        d_pos[at[c]][r] += contrib;
                        d_pos[home][r] -= contrib;
                    }
                }
            }
        }
    }
}

/// Mean hinge penalty `max(0, -det J)` over the interior lattice sites of
/// every block.
pub fn locc<F: Real>(batch: &SampleBatch, positions: &[[F; 3]]) -> Result<f64> {
    if positions.len() != batch.len() {
        return Err(Error::shape("positions length != batch size"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut at = 0usize;
    for block in &batch.blocks {
        let (s, c) = locc_block_forward(&positions[at..at + block.len()], block)?;
        sum += s;
        count += c;
        at += block.len();
    }
    Ok(sum / count as f64)
}

// ---------------------------------------------------------------------------
// Deformation models
// ---------------------------------------------------------------------------

/// A parameterized map from batch coordinates to deformed positions, with
/// a vector-Jacobian product against its parameters.
pub trait DeformModel<F: Real> {
    fn param_count(&self) -> usize;
    fn initial_params(&self) -> Vec<F>;
    fn forward(&self, params: &[F], coords: &[[F; 3]]) -> Result<Vec<[F; 3]>>;
    /// Accumulates `d loss / d params` into `grad` given position cotangents.
    fn vjp(&self, params: &[F], coords: &[[F; 3]], cotangents: &[[F; 3]], grad: &mut [F])
        -> Result<()>;
}

const MODEL_CHUNK: usize = 8192;

/// Neural-field model: optionally a frozen upstream field (hybrid phase 2)
/// followed by the trainable field applied per its kind.
pub struct FieldModel<F: Real> {
    /// Architecture + omega; weights are overwritten from the param vector.
    pub template: NeuralField<F>,
    pub ode: OdeConfig,
    /// Frozen first-stage field providing start positions.
    pub prelude: Option<NeuralField<F>>,
}

impl<F: Real> FieldModel<F> {
    pub fn new(template: NeuralField<F>, ode: OdeConfig) -> Self {
        FieldModel {
            template,
            ode,
            prelude: None,
        }
    }

    pub fn with_prelude(template: NeuralField<F>, ode: OdeConfig, prelude: NeuralField<F>) -> Self {
        FieldModel {
            template,
            ode,
            prelude: Some(prelude),
        }
    }

    fn instantiate(&self, params: &[F]) -> Result<NeuralField<F>> {
        let mut nf = self.template.clone();
        nf.mlp.set_params(params)?;
        Ok(nf)
    }

    fn start_positions(&self, coords: &[[F; 3]]) -> Result<Vec<[F; 3]>> {
        match &self.prelude {
            Some(nf1) => apply_field_batch(nf1, coords, &self.ode),
            None => Ok(coords.to_vec()),
        }
    }

    fn vjp_displacement(&self, nf: &NeuralField<F>, start: &[[F; 3]], cot: &[[F; 3]], grad: &mut [F]) {
        for (chunk, cchunk) in start.chunks(MODEL_CHUNK).zip(cot.chunks(MODEL_CHUNK)) {
            let (_, cache) = nf.forward_batch_cached(chunk);
            nf.batch_vjp(&cache, cchunk, grad, None);
        }
    }

    fn vjp_velocity(&self, nf: &NeuralField<F>, start: &[[F; 3]], cot: &[[F; 3]], grad: &mut [F]) {
        let h = real::<F>(self.ode.h);
        let half = h * real::<F>(0.5);
        let third = h / real::<F>(3.0);
        let sixth = h / real::<F>(6.0);
        let two = real::<F>(2.0);
        for (chunk, cchunk) in start.chunks(MODEL_CHUNK).zip(cot.chunks(MODEL_CHUNK)) {
            let n = chunk.len();
            // Forward replay keeping only the stage input points.
            let mut stages: Vec<[Vec<[F; 3]>; 4]> = Vec::with_capacity(self.ode.steps);
            let mut ys = chunk.to_vec();
            for _ in 0..self.ode.steps {
                let x1 = ys.clone();
                let k1 = nf.forward_batch(&x1);
                let x2: Vec<[F; 3]> = (0..n)
                    .map(|i| add3(ys[i], k1[i], half))
                    .collect();
                let k2 = nf.forward_batch(&x2);
                let x3: Vec<[F; 3]> = (0..n)
                    .map(|i| add3(ys[i], k2[i], half))
                    .collect();
                let k3 = nf.forward_batch(&x3);
                let x4: Vec<[F; 3]> = (0..n).map(|i| add3(ys[i], k3[i], h)).collect();
                let k4 = nf.forward_batch(&x4);
                for i in 0..n {
                    for a in 0..3 {
                        ys[i][a] +=
                            sixth * (k1[i][a] + two * k2[i][a] + two * k3[i][a] + k4[i][a]);
                    }
                }
                stages.push([x1, x2, x3, x4]);
            }
            // Reverse sweep; each stage recomputes its cached MLP pass.
            let mut lam = cchunk.to_vec();
            let mut dx = vec![[F::zero(); 3]; n];
            for [x1, x2, x3, x4] in stages.iter().rev() {
                let mut stage_vjp = |x: &Vec<[F; 3]>, dk: &[[F; 3]], dx: &mut Vec<[F; 3]>| {
                    let (_, cache) = nf.forward_batch_cached(x);
                    nf.batch_vjp(&cache, dk, grad, Some(dx));
                };
                let dk4: Vec<[F; 3]> = lam.iter().map(|&l| scale3(l, sixth)).collect();
                stage_vjp(x4, &dk4, &mut dx);
                let dx4 = dx.clone();

                let dk3: Vec<[F; 3]> = (0..n)
                    .map(|i| add3(scale3(lam[i], third), dx4[i], h))
                    .collect();
                stage_vjp(x3, &dk3, &mut dx);
                let dx3 = dx.clone();

                let dk2: Vec<[F; 3]> = (0..n)
                    .map(|i| add3(scale3(lam[i], third), dx3[i], half))
                    .collect();
                stage_vjp(x2, &dk2, &mut dx);
                let dx2 = dx.clone();

                let dk1: Vec<[F; 3]> = (0..n)
                    .map(|i| add3(scale3(lam[i], sixth), dx2[i], half))
                    .collect();
                stage_vjp(x1, &dk1, &mut dx);

                for i in 0..n {
                    for a in 0..3 {
                        lam[i][a] += dx[i][a] + dx2[i][a] + dx3[i][a] + dx4[i][a];
                    }
                }
            }
        }
    }
}

#[inline]
fn add3<F: Real>(y: [F; 3], k: [F; 3], s: F) -> [F; 3] {
    [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]]
}

#[inline]
fn scale3<F: Real>(v: [F; 3], s: F) -> [F; 3] {
    [v[0] * s, v[1] * s, v[2] * s]
}

impl<F: Real> DeformModel<F> for FieldModel<F> {
    fn param_count(&self) -> usize {
        self.template.param_count()
    }

    fn initial_params(&self) -> Vec<F> {
        self.template.mlp.flatten_params()
    }

    fn forward(&self, params: &[F], coords: &[[F; 3]]) -> Result<Vec<[F; 3]>> {
        let nf = self.instantiate(params)?;
        let start = self.start_positions(coords)?;
        let mut out = Vec::with_capacity(coords.len());
        for chunk in start.chunks(MODEL_CHUNK) {
            out.extend(apply_field_batch(&nf, chunk, &self.ode)?);
        }
        Ok(out)
    }

    fn vjp(
        &self,
        params: &[F],
        coords: &[[F; 3]],
        cotangents: &[[F; 3]],
        grad: &mut [F],
    ) -> Result<()> {
        let nf = self.instantiate(params)?;
        let start = self.start_positions(coords)?;
        match nf.kind {
            FieldKind::Displacement => self.vjp_displacement(&nf, &start, cotangents, grad),
            FieldKind::Velocity => self.vjp_velocity(&nf, &start, cotangents, grad),
        }
        Ok(())
    }
}

/// Dense per-voxel displacement baseline: one 3-vector parameter per grid
/// point, batch must be the full grid in enumeration order.
pub struct GridModel {
    pub domain: GridDomain,
}

impl<F: Real> DeformModel<F> for GridModel {
    fn param_count(&self) -> usize {
        3 * self.domain.voxel_count()
    }

    fn initial_params(&self) -> Vec<F> {
        vec![F::zero(); 3 * self.domain.voxel_count()]
    }

    fn forward(&self, params: &[F], coords: &[[F; 3]]) -> Result<Vec<[F; 3]>> {
        if coords.len() != self.domain.voxel_count() {
            return Err(Error::shape("grid model requires the full grid batch"));
        }
        Ok(coords
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                [
                    p[0] + params[3 * i],
                    p[1] + params[3 * i + 1],
                    p[2] + params[3 * i + 2],
                ]
            })
            .collect())
    }

    fn vjp(
        &self,
        _params: &[F],
        coords: &[[F; 3]],
        cotangents: &[[F; 3]],
        grad: &mut [F],
    ) -> Result<()> {
        if coords.len() != self.domain.voxel_count() {
            return Err(Error::shape("grid model requires the full grid batch"));
        }
        for (i, c) in cotangents.iter().enumerate() {
            grad[3 * i] += c[0];
            grad[3 * i + 1] += c[1];
            grad[3 * i + 2] += c[2];
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

/// The full registration objective over one sampled batch.
pub struct RegistrationObjective<'a, F: Real, M: DeformModel<F>> {
    pub target: &'a Volume,
    pub moving: &'a Volume,
    pub model: &'a M,
    pub batch: &'a SampleBatch,
    pub cfg: &'a LossConfig,
    _marker: std::marker::PhantomData<F>,
}

impl<'a, F: Real, M: DeformModel<F>> RegistrationObjective<'a, F, M> {
    pub fn new(
        target: &'a Volume,
        moving: &'a Volume,
        model: &'a M,
        batch: &'a SampleBatch,
        cfg: &'a LossConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if target.dims != moving.dims {
            return Err(Error::shape(format!(
                "target dims {:?} != moving dims {:?}",
                target.dims, moving.dims
            )));
        }
        Ok(RegistrationObjective {
            target,
            moving,
            model,
            batch,
            cfg,
            _marker: std::marker::PhantomData,
        })
    }

    fn target_values(&self, coords: &[[F; 3]]) -> Result<Vec<F>> {
        let data = self.target.intensity_data()?;
        let dims = self.target.dims;
        Ok(coords
            .iter()
            .map(|c| {
                let d = c[0].to_f64() as usize;
                let h = c[1].to_f64() as usize;
                let w = c[2].to_f64() as usize;
                F::from_f32(data[(d * dims[1] + h) * dims[2] + w])
            })
            .collect())
    }

    /// Shared forward/backward. `grad` = None evaluates only.
    fn run(&self, params: &[F], mut grad: Option<&mut [F]>) -> Result<LossReport> {
        let coords: Vec<[F; 3]> = batch_coordinates(self.batch);
        let n_sites = coords.len();
        let positions = self.model.forward(params, &coords)?;
        let (warped, warp_grads) =
            sample_trilinear_with_coord_grad(self.moving, &positions)?;
        let tvals = self.target_values(&coords)?;

        let mut per_block = Vec::with_capacity(self.batch.blocks.len());
        let mut lncc_total = 0.0f64;
        let mut locc_total = 0.0f64;
        let mut locc_sites_total = 0usize;

        // Forward per block, remembering caches for the backward pass.
        let mut caches = Vec::with_capacity(self.batch.blocks.len());
        let mut at = 0usize;
        for block in &self.batch.blocks {
            let len = block.len();
            let t = &tvals[at..at + len];
            let m = &warped[at..at + len];
            let map = lncc_map(t, m, block.dims, self.cfg)?;
            let lncc_sum: f64 = map.values.iter().map(|&x| x.to_f64()).sum();
            let (locc_sum, locc_sites) =
                locc_block_forward(&positions[at..at + len], block)?;
            lncc_total += lncc_sum;
            locc_total += locc_sum;
            locc_sites_total += locc_sites;
            per_block.push(BlockLoss {
                lncc_sum,
                locc_sum,
                lncc_sites: len,
                locc_sites,
            });
            caches.push(map);
            at += len;
        }

        let sim = -lncc_total / n_sites as f64;
        let reg = locc_total / locc_sites_total as f64;
        let total = sim + self.cfg.lambda_reg * reg;

        if let Some(grad) = grad.as_deref_mut() {
            if grad.len() != self.model.param_count() {
                return Err(Error::shape("gradient buffer length mismatch"));
            }
            let g_sim = real::<F>(-1.0 / n_sites as f64);
            let g_reg = real::<F>(self.cfg.lambda_reg / locc_sites_total as f64);
            let mut d_pos = vec![[F::zero(); 3]; n_sites];
            let mut at = 0usize;
            for (block, map) in self.batch.blocks.iter().zip(&caches) {
                let len = block.len();
                let t = &tvals[at..at + len];
                let m = &warped[at..at + len];
                let d_m = map.backward_uniform(m, t, g_sim);
                for i in 0..len {
                    for a in 0..3 {
                        d_pos[at + i][a] += d_m[i] * warp_grads[at + i][a];
                    }
                }
                locc_block_backward(
                    &positions[at..at + len],
                    block,
                    g_reg,
                    &mut d_pos[at..at + len],
                );
                at += len;
            }
            self.model.vjp(params, &coords, &d_pos, grad)?;
        }

        Ok(LossReport {
            total,
            sim,
            reg,
            per_block,
        })
    }

    pub fn report(&self, params: &[F]) -> Result<LossReport> {
        self.run(params, None)
    }

    pub fn report_and_grad(&self, params: &[F]) -> Result<(LossReport, Vec<F>)> {
        let mut grad = vec![F::zero(); self.model.param_count()];
        let report = self.run(params, Some(&mut grad))?;
        Ok((report, grad))
    }
}

impl<F: Real, M: DeformModel<F>> Objective<F> for RegistrationObjective<'_, F, M> {
    fn loss(&self, params: &[F]) -> Result<F> {
        Ok(real::<F>(self.run(params, None)?.total))
    }

    fn loss_and_grad(&self, params: &[F]) -> Result<(F, Vec<F>)> {
        let (report, grad) = self.report_and_grad(params)?;
        Ok((real::<F>(report.total), grad))
    }
}

/// One-shot total loss of a transform over a batch.
pub fn total_loss<F: Real, M: DeformModel<F>>(
    target: &Volume,
    moving: &Volume,
    model: &M,
    params: &[F],
    batch: &SampleBatch,
    cfg: &LossConfig,
) -> Result<LossReport> {
    RegistrationObjective::new(target, moving, model, batch, cfg)?.report(params)
}
