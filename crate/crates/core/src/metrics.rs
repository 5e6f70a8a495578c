//! Evaluation metrics: volumetric and surface DSC, SSIM, global NCC, and
//! the assembled report (Jacobian statistics come from the same code path
//! the regularizer uses).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::deform::{jacobian_stats, DeformationField};
use crate::error::{Error, Result};
use crate::objective::box_sum_3d;
use crate::volume::Volume;

/// Target/warped label volumes plus an optional structure subset.
#[derive(Debug, Clone)]
pub struct MaskPair<'a> {
    pub target: &'a Volume,
    pub warped: &'a Volume,
    /// Structures to score; `None` scores every nonzero label present.
    pub labels: Option<Vec<u16>>,
}

impl<'a> MaskPair<'a> {
    pub fn new(target: &'a Volume, warped: &'a Volume) -> Result<Self> {
        if target.dims != warped.dims {
            return Err(Error::shape(format!(
                "mask dims {:?} != {:?}",
                target.dims, warped.dims
            )));
        }
        Ok(MaskPair {
            target,
            warped,
            labels: None,
        })
    }

    /// Nonzero labels to score, either the configured subset or the union
    /// of labels present in both masks.
    pub fn label_set(&self) -> Result<Vec<u16>> {
        if let Some(labels) = &self.labels {
            return Ok(labels.clone());
        }
        let mut set = std::collections::BTreeSet::new();
        for &l in self.target.label_data()? {
            if l != 0 {
                set.insert(l);
            }
        }
        for &l in self.warped.label_data()? {
            if l != 0 {
                set.insert(l);
            }
        }
        Ok(set.into_iter().collect())
    }
}

/// Volumetric Dice overlap of one structure: `2|T∩W| / (|T|+|W|)`.
/// Both masks empty scores 1, exactly one empty scores 0.
pub fn dsc_volumetric(pair: &MaskPair, label: u16) -> Result<f64> {
    let t = pair.target.label_data()?;
    let w = pair.warped.label_data()?;
    let mut nt = 0usize;
    let mut nw = 0usize;
    let mut both = 0usize;
    for (&a, &b) in t.iter().zip(w) {
        let ia = a == label;
        let ib = b == label;
        nt += ia as usize;
        nw += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(match (nt, nw) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (nt + nw) as f64,
    })
}

/// Foreground voxels with at least one background 6-neighbor; the domain
/// border counts as background.
pub fn surface_mask(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let idx = |d: usize, h: usize, w: usize| (d * dims[1] + h) * dims[2] + w;
    let mut out = vec![false; mask.len()];
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                if !mask[idx(d, h, w)] {
                    continue;
                }
                let boundary = d == 0
                    || d == dims[0] - 1
                    || h == 0
                    || h == dims[1] - 1
                    || w == 0
                    || w == dims[2] - 1
                    || !mask[idx(d - 1, h, w)]
                    || !mask[idx(d + 1, h, w)]
                    || !mask[idx(d, h - 1, w)]
                    || !mask[idx(d, h + 1, w)]
                    || !mask[idx(d, h, w - 1)]
                    || !mask[idx(d, h, w + 1)];
                out[idx(d, h, w)] = boundary;
            }
        }
    }
    out
}

/// 1D lower-envelope squared distance transform at sample pitch `s`:
/// `out[p] = min_q (s(p-q))^2 + f[q]`.
fn dt1d(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let x = |i: usize| s * i as f64;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s_q;
        loop {
            match v.last() {
                None => {
                    s_q = f64::NEG_INFINITY;
                    break;
                }
                Some(&p) => {
                    s_q = (f[q] + x(q) * x(q) - f[p] - x(p) * x(p)) / (2.0 * x(q) - 2.0 * x(p));
                    if s_q <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        break;
                    }
                }
            }
        }
        v.push(q);
        z.push(s_q);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0usize;
    for p in 0..n {
        while z[k + 1] < x(p) {
            k += 1;
        }
        let d = x(p) - x(v[k]);
        out[p] = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (in mm via `spacing`) from every voxel
/// center to the nearest `true` voxel center.
pub fn edt_squared(mask: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut dist: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    let mut out_line = Vec::new();
    for axis in 0..3 {
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let len = dims[axis];
        line.resize(len, 0.0);
        out_line.resize(len, 0.0);
        for ia in 0..dims[oa] {
            for ib in 0..dims[ob] {
                let base = ia * strides[oa] + ib * strides[ob];
                for i in 0..len {
                    line[i] = dist[base + i * strides[axis]];
                }
                dt1d(&line, spacing[axis], &mut out_line);
                for i in 0..len {
                    dist[base + i * strides[axis]] = out_line[i];
                }
            }
        }
    }
    dist
}

/// Surface Dice at tolerance `tau_mm`: the fraction of surface voxels of
/// each mask lying within `tau_mm` of the other mask's surface.
pub fn dsc_surface(pair: &MaskPair, label: u16, tau_mm: f64, spacing: [f64; 3]) -> Result<f64> {
    if tau_mm < 0.0 {
        return Err(Error::config("tau_mm must be >= 0"));
    }
    let dims = pair.target.dims;
    let t_mask: Vec<bool> = pair.target.label_data()?.iter().map(|&l| l == label).collect();
    let w_mask: Vec<bool> = pair.warped.label_data()?.iter().map(|&l| l == label).collect();
    let st = surface_mask(&t_mask, dims);
    let sw = surface_mask(&w_mask, dims);
    let nt = st.iter().filter(|&&x| x).count();
    let nw = sw.iter().filter(|&&x| x).count();
    match (nt, nw) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let dt = edt_squared(&st, dims, spacing);
    let dw = edt_squared(&sw, dims, spacing);
    let tau2 = tau_mm * tau_mm;
    // Tolerate rounding in the squared distances at the threshold itself.
    let close = |d2: f64| d2 <= tau2 + 1e-9;
    let t_hits = st
        .iter()
        .zip(&dw)
        .filter(|(&s, &d2)| s && close(d2))
        .count();
    let w_hits = sw
        .iter()
        .zip(&dt)
        .filter(|(&s, &d2)| s && close(d2))
        .count();
    Ok((t_hits + w_hits) as f64 / (nt + nw) as f64)
}

const SSIM_WINDOW: usize = 7;

/// Mean SSIM over all fully-inside uniform 7^3 windows.
pub fn ssim(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::shape(format!("dims {:?} != {:?}", a.dims, b.dims)));
    }
    let dims = a.dims;
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::shape(format!(
            "ssim needs dims >= {SSIM_WINDOW} per axis, got {dims:?}"
        )));
    }
    let av = a.intensity_data()?;
    let bv = b.intensity_data()?;
    let lo = av
        .iter()
        .chain(bv)
        .fold(f64::INFINITY, |m, &x| m.min(x as f64));
    let hi = av
        .iter()
        .chain(bv)
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let l = (hi - lo).max(1e-6);
    let c1 = (0.01 * l) * (0.01 * l);
    let c2 = (0.03 * l) * (0.03 * l);

    let af: Vec<f64> = av.iter().map(|&x| x as f64).collect();
    let bf: Vec<f64> = bv.iter().map(|&x| x as f64).collect();
    let aa: Vec<f64> = af.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = bf.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = af.iter().zip(&bf).map(|(x, y)| x * y).collect();
    let sa = box_sum_3d(&af, dims, SSIM_WINDOW);
    let sb = box_sum_3d(&bf, dims, SSIM_WINDOW);
    let saa = box_sum_3d(&aa, dims, SSIM_WINDOW);
    let sbb = box_sum_3d(&bb, dims, SSIM_WINDOW);
    let sab = box_sum_3d(&ab, dims, SSIM_WINDOW);

    let r = SSIM_WINDOW / 2;
    let n = (SSIM_WINDOW * SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for d in r..dims[0] - r {
        for h in r..dims[1] - r {
            for w in r..dims[2] - r {
                let i = (d * dims[1] + h) * dims[2] + w;
                let mu_a = sa[i] / n;
                let mu_b = sb[i] / n;
                let var_a = saa[i] / n - mu_a * mu_a;
                let var_b = sbb[i] / n - mu_b * mu_b;
                let cov = sab[i] / n - mu_a * mu_b;
                sum += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Global Pearson correlation of two intensity volumes.
pub fn ncc(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::shape(format!("dims {:?} != {:?}", a.dims, b.dims)));
    }
    let av = a.intensity_data()?;
    let bv = b.intensity_data()?;
    let n = av.len() as f64;
    let mu_a = av.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mu_b = bv.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in av.iter().zip(bv) {
        let dx = x as f64 - mu_a;
        let dy = y as f64 - mu_b;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    Ok(cov / (va.sqrt() * vb.sqrt()).max(1e-12))
}

/// Knobs for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub tau_mm: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { tau_mm: 1.0 }
    }
}

/// Full evaluation result; DSC maps are keyed by decimal label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsc_v: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsc_s: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j_nonpos: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_dsc_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_dsc_s: Option<f64>,
    pub runtime_seconds: f64,
}

fn dsc_maps(
    pair: &MaskPair,
    cfg: &MetricConfig,
) -> Result<(BTreeMap<String, f64>, BTreeMap<String, f64>)> {
    let spacing = pair.target.spacing;
    let labels = pair.label_set()?;
    let mut vmap = BTreeMap::new();
    let mut smap = BTreeMap::new();
    for &label in &labels {
        vmap.insert(label.to_string(), dsc_volumetric(pair, label)?);
        smap.insert(
            label.to_string(),
            dsc_surface(pair, label, cfg.tau_mm, spacing)?,
        );
    }
    Ok((vmap, smap))
}

fn mean_score(m: &BTreeMap<String, f64>) -> Option<f64> {
    if m.is_empty() {
        None
    } else {
        Some(m.values().sum::<f64>() / m.len() as f64)
    }
}

/// Scores a registration result: SSIM of target vs warped, per-structure
/// DSC when masks are given, and the non-positive Jacobian fraction of the
/// dense field at stride 1.
pub fn evaluate(
    target: &Volume,
    warped: &Volume,
    field: &DeformationField,
    masks: Option<&MaskPair>,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let start = std::time::Instant::now();
    let ssim_score = ssim(target, warped)?;
    let stats = jacobian_stats(field, [1, 1, 1])?;

    let (dsc_v, dsc_s, mean_v, mean_s) = match masks {
        None => (None, None, None, None),
        Some(pair) => {
            let (vmap, smap) = dsc_maps(pair, cfg)?;
            let (mv, ms) = (mean_score(&vmap), mean_score(&smap));
            (Some(vmap), Some(smap), mv, ms)
        }
    };

    Ok(MetricReport {
        dsc_v,
        dsc_s,
        ssim: Some(ssim_score),
        j_nonpos: Some(stats.nonpos_fraction),
        mean_dsc_v: mean_v,
        mean_dsc_s: mean_s,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mask-only scoring: DSC maps without SSIM or Jacobian statistics.
pub fn evaluate_masks_only(pair: &MaskPair, cfg: &MetricConfig) -> Result<MetricReport> {
    let start = std::time::Instant::now();
    let (vmap, smap) = dsc_maps(pair, cfg)?;
    let (mv, ms) = (mean_score(&vmap), mean_score(&smap));
    Ok(MetricReport {
        dsc_v: Some(vmap),
        dsc_s: Some(smap),
        ssim: None,
        j_nonpos: None,
        mean_dsc_v: mv,
        mean_dsc_s: ms,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}
