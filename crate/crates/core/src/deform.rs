//! Point transforms built from neural fields: direct displacement,
//! RK4-integrated stationary velocity, and the cascaded hybrid composition;
//! plus dense field rendering and Jacobian statistics.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldKind, NeuralField};
use crate::real::{real, Real};
use crate::volume::GridDomain;

/// Dense grid of deformed positions (voxel units), volume data layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub domain: GridDomain,
    pub positions: Vec<[f32; 3]>,
}

impl DeformationField {
    pub fn identity(domain: GridDomain) -> Self {
        DeformationField {
            positions: domain.grid_points(),
            domain,
        }
    }
}

/// Fixed-step RK4 configuration for velocity integration over t in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    pub h: f64,
    pub steps: usize,
}

impl OdeConfig {
    /// `steps` uniform RK4 steps covering [0, 1].
    pub fn with_steps(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("ode steps must be >= 1"));
        }
        Ok(OdeConfig {
            h: 1.0 / steps as f64,
            steps,
        })
    }

    /// Step size form; `1/h` must be a positive integer.
    pub fn with_step_size(h: f64) -> Result<Self> {
        if !(h > 0.0 && h <= 1.0) {
            return Err(Error::config("ode step size must be in (0, 1]"));
        }
        let steps = (1.0 / h).round() as usize;
        if steps == 0 || (steps as f64 * h - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("1/h must be integral, got h = {h}")));
        }
        Ok(OdeConfig { h, steps })
    }
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig { h: 0.25, steps: 4 }
    }
}

/// Classical RK4 flow of an autonomous vector field from t = 0 to 1.
pub fn rk4_flow<F: Real>(
    f: &dyn Fn([F; 3]) -> [F; 3],
    p: [F; 3],
    ode: &OdeConfig,
) -> [F; 3] {
    let h = real::<F>(ode.h);
    let half = h * real::<F>(0.5);
    let sixth = h / real::<F>(6.0);
    let two = real::<F>(2.0);
    let mut y = p;
    for _ in 0..ode.steps {
        let k1 = f(y);
        let k2 = f(add_scaled(y, k1, half));
        let k3 = f(add_scaled(y, k2, half));
        let k4 = f(add_scaled(y, k3, h));
        for a in 0..3 {
            y[a] += sixth * (k1[a] + two * k2[a] + two * k3[a] + k4[a]);
        }
    }
    y
}

#[inline]
fn add_scaled<F: Real>(y: [F; 3], k: [F; 3], s: F) -> [F; 3] {
    [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]]
}

/// Batched RK4 over a velocity-kind neural field (one field evaluation per
/// stage for the whole batch).
pub fn integrate_rk4_batch<F: Real>(
    nf: &NeuralField<F>,
    pts: &[[F; 3]],
    ode: &OdeConfig,
) -> Result<Vec<[F; 3]>> {
    if nf.kind != FieldKind::Velocity {
        return Err(Error::config("integrate_rk4 requires a velocity-kind field"));
    }
    let h = real::<F>(ode.h);
    let half = h * real::<F>(0.5);
    let sixth = h / real::<F>(6.0);
    let two = real::<F>(2.0);
    let mut ys = pts.to_vec();
    let mut stage = vec![[F::zero(); 3]; pts.len()];
    for _ in 0..ode.steps {
        let k1 = nf.forward_batch(&ys);
        for (s, (&y, &k)) in stage.iter_mut().zip(ys.iter().zip(&k1)) {
            *s = add_scaled(y, k, half);
        }
        let k2 = nf.forward_batch(&stage);
        for (s, (&y, &k)) in stage.iter_mut().zip(ys.iter().zip(&k2)) {
            *s = add_scaled(y, k, half);
        }
        let k3 = nf.forward_batch(&stage);
        for (s, (&y, &k)) in stage.iter_mut().zip(ys.iter().zip(&k3)) {
            *s = add_scaled(y, k, h);
        }
        let k4 = nf.forward_batch(&stage);
        for (i, y) in ys.iter_mut().enumerate() {
            for a in 0..3 {
                y[a] += sixth * (k1[i][a] + two * k2[i][a] + two * k3[i][a] + k4[i][a]);
            }
        }
    }
    Ok(ys)
}

pub fn integrate_rk4<F: Real>(
    nf: &NeuralField<F>,
    p: [F; 3],
    ode: &OdeConfig,
) -> Result<[F; 3]> {
    Ok(integrate_rk4_batch(nf, &[p], ode)?[0])
}

/// Deformed position under a displacement-kind field: p + F(p).
pub fn displace<F: Real>(nf: &NeuralField<F>, p: [F; 3]) -> Result<[F; 3]> {
    Ok(displace_batch(nf, &[p])?[0])
}

pub fn displace_batch<F: Real>(nf: &NeuralField<F>, pts: &[[F; 3]]) -> Result<Vec<[F; 3]>> {
    if nf.kind != FieldKind::Displacement {
        return Err(Error::config("displace requires a displacement-kind field"));
    }
    let out = nf.forward_batch(pts);
    Ok(pts
        .iter()
        .zip(out)
        .map(|(&p, u)| [p[0] + u[0], p[1] + u[1], p[2] + u[2]])
        .collect())
}

/// Applies one field per its kind.
pub fn apply_field_batch<F: Real>(
    nf: &NeuralField<F>,
    pts: &[[F; 3]],
    ode: &OdeConfig,
) -> Result<Vec<[F; 3]>> {
    match nf.kind {
        FieldKind::Displacement => displace_batch(nf, pts),
        FieldKind::Velocity => integrate_rk4_batch(nf, pts, ode),
    }
}

/// Cascade of two same-kind fields: NF2 starts from NF1's endpoint.
pub fn compose_hybrid<F: Real>(
    nf1: &NeuralField<F>,
    nf2: &NeuralField<F>,
    p: [F; 3],
    ode: &OdeConfig,
) -> Result<[F; 3]> {
    Ok(compose_hybrid_batch(nf1, nf2, &[p], ode)?[0])
}

pub fn compose_hybrid_batch<F: Real>(
    nf1: &NeuralField<F>,
    nf2: &NeuralField<F>,
    pts: &[[F; 3]],
    ode: &OdeConfig,
) -> Result<Vec<[F; 3]>> {
    if nf1.kind != nf2.kind {
        return Err(Error::config("hybrid fields must share a kind"));
    }
    let mid = apply_field_batch(nf1, pts, ode)?;
    apply_field_batch(nf2, &mid, ode)
}

/// A point transform closed over trained artifacts, for dense rendering
/// and warping.
pub enum Transform<'a, F: Real> {
    Identity,
    Single(&'a NeuralField<F>, OdeConfig),
    Hybrid(&'a NeuralField<F>, &'a NeuralField<F>, OdeConfig),
    /// Dense per-voxel displacements over `domain`, grid-enumeration order.
    DenseDisplacement(&'a [[F; 3]], GridDomain),
}

impl<F: Real> Transform<'_, F> {
    pub fn apply_batch(&self, pts: &[[F; 3]]) -> Result<Vec<[F; 3]>> {
        match self {
            Transform::Identity => Ok(pts.to_vec()),
            Transform::Single(nf, ode) => apply_field_batch(nf, pts, ode),
            Transform::Hybrid(nf1, nf2, ode) => compose_hybrid_batch(nf1, nf2, pts, ode),
            Transform::DenseDisplacement(disp, domain) => {
                if pts.len() != disp.len() {
                    return Err(Error::shape(
                        "dense displacement transform requires the full grid batch",
                    ));
                }
                let _ = domain;
                Ok(pts
                    .iter()
                    .zip(disp.iter())
                    .map(|(&p, u)| [p[0] + u[0], p[1] + u[1], p[2] + u[2]])
                    .collect())
            }
        }
    }
}

const RENDER_CHUNK: usize = 16384;

/// Evaluates a transform at every grid point of `domain`.
pub fn render_dense<F: Real>(transform: &Transform<F>, domain: GridDomain) -> Result<DeformationField> {
    let pts: Vec<[F; 3]> = domain.grid_points();
    let mut positions = Vec::with_capacity(pts.len());
    match transform {
        // Dense displacement is defined over the whole grid at once.
        Transform::DenseDisplacement(_, _) => {
            for p in transform.apply_batch(&pts)? {
                positions.push([p[0].to_f32(), p[1].to_f32(), p[2].to_f32()]);
            }
        }
        _ => {
            for chunk in pts.chunks(RENDER_CHUNK) {
                for p in transform.apply_batch(chunk)? {
                    positions.push([p[0].to_f32(), p[1].to_f32(), p[2].to_f32()]);
                }
            }
        }
    }
    Ok(DeformationField { domain, positions })
}

/// Jacobian regularity summary of a dense field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    /// Fraction of evaluated lattice sites with det J <= 0.
    pub nonpos_fraction: f64,
    pub min_det: f64,
    pub site_count: usize,
}

/// Determinants by forward differences at stride over the dense lattice,
/// excluding the trailing `stride` slab per axis.
pub fn jacobian_stats(field: &DeformationField, stride: [usize; 3]) -> Result<JacobianStats> {
    let dims = field.domain.dims;
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::config("jacobian stride must be positive"));
    }
    for a in 0..3 {
        if dims[a] <= stride[a] {
            return Err(Error::shape(format!(
                "axis {a}: dim {} too small for stride {}",
                dims[a], stride[a]
            )));
        }
    }
    let (nh, nw) = (dims[1], dims[2]);
    let idx = |d: usize, h: usize, w: usize| (d * nh + h) * nw + w;
    let mut nonpos = 0usize;
    let mut count = 0usize;
    let mut min_det = f64::INFINITY;
    for d in 0..dims[0] - stride[0] {
        for h in 0..dims[1] - stride[1] {
            for w in 0..dims[2] - stride[2] {
                let p = field.positions[idx(d, h, w)];
                let pd = field.positions[idx(d + stride[0], h, w)];
                let ph = field.positions[idx(d, h + stride[1], w)];
                let pw = field.positions[idx(d, h, w + stride[2])];
                let mut j = [[0.0f64; 3]; 3];
                for r in 0..3 {
                    j[r][0] = (pd[r] as f64 - p[r] as f64) / stride[0] as f64;
                    j[r][1] = (ph[r] as f64 - p[r] as f64) / stride[1] as f64;
                    j[r][2] = (pw[r] as f64 - p[r] as f64) / stride[2] as f64;
                }
                let det = det3(&j);
                if det <= 0.0 {
                    nonpos += 1;
                }
                min_det = min_det.min(det);
                count += 1;
            }
        }
    }
    Ok(JacobianStats {
        nonpos_fraction: nonpos as f64 / count as f64,
        min_det,
        site_count: count,
    })
}

#[inline]
pub(crate) fn det3(j: &[[f64; 3]; 3]) -> f64 {
    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
}

// ---------------------------------------------------------------------------
// Dense field export
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    dims: [usize; 3],
    kind: String,
    /// Per-site component order of the payload.
    component_order: String,
}

/// Writes the dense field to an `.nvol`-style container with kind "field":
/// 3 interleaved f32 per site in (d, h, w) component order.
pub fn save_field(field: &DeformationField, path: impl AsRef<Path>) -> Result<()> {
    let header = serde_json::to_vec(&FieldHeader {
        dims: field.domain.dims,
        kind: "field".to_string(),
        component_order: "dhw".to_string(),
    })
    .expect("header serializes");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(crate::volume::NVOL_MAGIC)?;
    f.write_all(&crate::FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    for p in &field.positions {
        for c in p {
            f.write_all(&c.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DeformationField> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let header: FieldHeader =
        serde_json::from_value(crate::volume::read_container_header(&mut f, crate::volume::NVOL_MAGIC)?)
            .map_err(|e| Error::format(format!("bad field header: {e}")))?;
    if header.kind != "field" {
        return Err(Error::format(format!(
            "expected kind \"field\", got {:?}",
            header.kind
        )));
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() != n * 12 {
        return Err(Error::format(format!(
            "payload length mismatch: expected {} bytes, got {}",
            n * 12,
            payload.len()
        )));
    }
    let positions = payload
        .chunks_exact(12)
        .map(|b| {
            [
                f32::from_le_bytes(b[0..4].try_into().unwrap()),
                f32::from_le_bytes(b[4..8].try_into().unwrap()),
                f32::from_le_bytes(b[8..12].try_into().unwrap()),
            ]
        })
        .collect();
    Ok(DeformationField {
        domain: GridDomain::new(header.dims),
        positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{init_fourier, init_siren, FieldKind};

    fn constant_field(kind: FieldKind, c: [f64; 3]) -> NeuralField<f64> {
        let enc = init_fourier::<f64>(2, 3.0, 1).unwrap();
        let mut mlp = init_siren::<f64>(&[4, 4, 3], 30.0, 1).unwrap();
        let n = mlp.param_count();
        let mut params = vec![0.0; n];
        params[n - 3..].copy_from_slice(&c);
        mlp.set_params(&params).unwrap();
        NeuralField::new(enc, mlp, kind, GridDomain::new([8, 8, 8])).unwrap()
    }

    #[test]
    fn displacement_basics() {
        let zero = constant_field(FieldKind::Displacement, [0.0; 3]);
        assert_eq!(displace(&zero, [1.0, 2.0, 3.0]).unwrap(), [1.0, 2.0, 3.0]);

        let c = constant_field(FieldKind::Displacement, [1.0, 2.0, 3.0]);
        assert_eq!(displace(&c, [1.0, 1.0, 1.0]).unwrap(), [2.0, 3.0, 4.0]);

        // Matches forward + addition bitwise.
        let p = [4.0, 5.5, 6.25];
        let u = c.forward(p);
        assert_eq!(displace(&c, p).unwrap(), [p[0] + u[0], p[1] + u[1], p[2] + u[2]]);

        let vel = constant_field(FieldKind::Velocity, [0.0; 3]);
        assert!(displace(&vel, p).is_err());
    }

    #[test]
    fn ode_config_invariants() {
        let ode = OdeConfig::default();
        assert_eq!(ode.steps, 4);
        assert_eq!(ode.h * ode.steps as f64, 1.0);
        assert_eq!(OdeConfig::with_step_size(0.25).unwrap().steps, 4);
        assert!(OdeConfig::with_step_size(0.3).is_err());
        assert!(OdeConfig::with_steps(0).is_err());
    }

    #[test]
    fn rk4_constant_velocity_is_exact() {
        let c = constant_field(FieldKind::Velocity, [1.5, -2.0, 0.5]);
        let p = [3.0, 3.0, 3.0];
        let out = integrate_rk4(&c, p, &OdeConfig::default()).unwrap();
        for a in 0..3 {
            assert!((out[a] - (p[a] + c.forward(p)[a])).abs() < 1e-12);
        }

        let zero = constant_field(FieldKind::Velocity, [0.0; 3]);
        assert_eq!(integrate_rk4(&zero, p, &OdeConfig::default()).unwrap(), p);

        let disp = constant_field(FieldKind::Displacement, [0.0; 3]);
        assert!(integrate_rk4(&disp, p, &OdeConfig::default()).is_err());
    }

    #[test]
    fn rk4_exponential_flow() {
        // dx/dt = x from x0 = 1 has exact endpoint e.
        let f = |p: [f64; 3]| [p[0], 0.0, 0.0];
        let out = rk4_flow(&f, [1.0, 0.0, 0.0], &OdeConfig::default());
        let err = (out[0] - std::f64::consts::E).abs();
        assert!(err < 1e-4, "rk4 error {err}");

        // Halving h shrinks the error by at least 8x (order >= 3 observed).
        let fine = rk4_flow(&f, [1.0, 0.0, 0.0], &OdeConfig::with_step_size(0.125).unwrap());
        let err_fine = (fine[0] - std::f64::consts::E).abs();
        assert!(err_fine * 8.0 <= err, "coarse {err} fine {err_fine}");
    }

    #[test]
    fn hybrid_composition() {
        let ode = OdeConfig::default();
        let c1 = constant_field(FieldKind::Displacement, [1.0, 0.0, 0.0]);
        let c2 = constant_field(FieldKind::Displacement, [0.0, 2.0, 0.5]);
        let p = [1.0, 1.0, 1.0];
        assert_eq!(compose_hybrid(&c1, &c2, p, &ode).unwrap(), [2.0, 3.0, 1.5]);

        let zero = constant_field(FieldKind::Displacement, [0.0; 3]);
        assert_eq!(compose_hybrid(&c1, &zero, p, &ode).unwrap(), displace(&c1, p).unwrap());
        assert_eq!(compose_hybrid(&zero, &c2, p, &ode).unwrap(), displace(&c2, p).unwrap());

        let vel = constant_field(FieldKind::Velocity, [0.0; 3]);
        assert!(compose_hybrid(&c1, &vel, p, &ode).is_err());
    }

    #[test]
    fn render_dense_matches_pointwise() {
        let c = constant_field(FieldKind::Displacement, [0.5, -0.25, 1.0]);
        let domain = GridDomain::new([5, 6, 7]);
        let rendered = render_dense(&Transform::Single(&c, OdeConfig::default()), domain).unwrap();
        assert_eq!(rendered.positions.len(), domain.voxel_count());
        let pts: Vec<[f64; 3]> = domain.grid_points();
        for &i in &[0usize, 17, 100, 209] {
            let direct = displace(&c, pts[i]).unwrap();
            for a in 0..3 {
                assert!((rendered.positions[i][a] as f64 - direct[a]).abs() < 1e-6);
            }
        }

        let id = render_dense(&Transform::<f64>::Identity, domain).unwrap();
        assert_eq!(id, DeformationField::identity(domain));
    }

    #[test]
    fn jacobian_stats_closed_forms() {
        let domain = GridDomain::new([6, 6, 6]);
        let id = DeformationField::identity(domain);
        let stats = jacobian_stats(&id, [1, 1, 1]).unwrap();
        assert_eq!(stats.nonpos_fraction, 0.0);
        assert!((stats.min_det - 1.0).abs() < 1e-12);
        assert_eq!(stats.site_count, 125);

        // Mirror along d: det = -1 everywhere.
        let mut mirror = id.clone();
        for p in &mut mirror.positions {
            p[0] = -p[0];
        }
        let stats = jacobian_stats(&mirror, [1, 1, 1]).unwrap();
        assert_eq!(stats.nonpos_fraction, 1.0);
        assert!((stats.min_det + 1.0).abs() < 1e-12);

        // Uniform scaling by 2: det = 8.
        let mut scaled = id.clone();
        for p in &mut scaled.positions {
            for c in p.iter_mut() {
                *c *= 2.0;
            }
        }
        let stats = jacobian_stats(&scaled, [2, 2, 2]).unwrap();
        assert!((stats.min_det - 8.0).abs() < 1e-9);
        assert_eq!(stats.nonpos_fraction, 0.0);

        assert!(jacobian_stats(&id, [6, 1, 1]).is_err());
        assert!(jacobian_stats(&id, [0, 1, 1]).is_err());
    }

    #[test]
    fn jacobian_translation_invariant() {
        let domain = GridDomain::new([5, 5, 5]);
        let mut field = DeformationField::identity(domain);
        for (i, p) in field.positions.iter_mut().enumerate() {
            p[0] += (i as f32 * 0.37).sin() * 0.2;
            p[1] += (i as f32 * 0.11).cos() * 0.2;
        }
        let base = jacobian_stats(&field, [1, 1, 1]).unwrap();
        let mut shifted = field.clone();
        for p in &mut shifted.positions {
            p[0] += 13.0;
            p[1] -= 4.0;
            p[2] += 0.5;
        }
        let moved = jacobian_stats(&shifted, [1, 1, 1]).unwrap();
        assert!((base.min_det - moved.min_det).abs() < 1e-5);
        assert_eq!(base.nonpos_fraction, moved.nonpos_fraction);
    }

    #[test]
    fn field_export_round_trip() {
        let domain = GridDomain::new([4, 3, 5]);
        let mut field = DeformationField::identity(domain);
        for (i, p) in field.positions.iter_mut().enumerate() {
            p[2] += i as f32 * 0.001;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.nvol");
        save_field(&field, &path).unwrap();
        assert_eq!(load_field(&path).unwrap(), field);
    }
}
