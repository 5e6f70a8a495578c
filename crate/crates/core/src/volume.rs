//! Volume data model, file I/O, differentiable trilinear sampling and
//! dense warping.
//!
//! Volumes are dense 3D scalar grids stored flat with linear index
//! `(d * H + h) * W + w` (w fastest). Coordinates are continuous voxel
//! indices in `[0, dim-1]` per axis, ordered `[d, h, w]` throughout the
//! crate. Out-of-bounds queries are clamped to the boundary, so sampling
//! is a total function.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{real, Real};

pub const NVOL_MAGIC: &[u8; 4] = b"NVOL";

/// Scalar payload of a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    Intensity(Vec<f32>),
    Label(Vec<u16>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::Intensity(v) => v.len(),
            VolumeData::Label(v) => v.len(),
        }
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense 3D scalar grid with per-axis spacing in mm/voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: VolumeData,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: VolumeData) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("all dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config(format!(
                "all spacings must be > 0, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::format(format!(
                "payload length mismatch: dims {dims:?} need {n} scalars, got {}",
                data.len()
            )));
        }
        if let VolumeData::Intensity(v) = &data {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::numerical("intensity data contains NaN/Inf"));
            }
        }
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    pub fn intensity(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(dims, [1.0; 3], VolumeData::Intensity(data))
    }

    pub fn labels(dims: [usize; 3], data: Vec<u16>) -> Result<Self> {
        Self::new(dims, [1.0; 3], VolumeData::Label(data))
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn intensity_data(&self) -> Result<&[f32]> {
        match &self.data {
            VolumeData::Intensity(v) => Ok(v),
            VolumeData::Label(_) => Err(Error::config("expected intensity volume, got labels")),
        }
    }

    pub fn label_data(&self) -> Result<&[u16]> {
        match &self.data {
            VolumeData::Label(v) => Ok(v),
            VolumeData::Intensity(_) => Err(Error::config("expected label volume, got intensity")),
        }
    }

    pub fn domain(&self) -> GridDomain {
        GridDomain { dims: self.dims }
    }

    /// Min-max rescale of intensity data to `[0, 1]`. Constant volumes map to 0.
    pub fn normalized_minmax(&self) -> Result<Volume> {
        let data = self.intensity_data()?;
        let lo = data.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        let out = if span > 0.0 {
            data.iter().map(|&x| (x - lo) / span).collect()
        } else {
            vec![0.0; data.len()]
        };
        Volume::new(self.dims, self.spacing, VolumeData::Intensity(out))
    }
}

/// Mapping between continuous voxel coordinates and normalized
/// coordinates in `[-1, 1]^3` (affine per axis; degenerate axes map to 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDomain {
    pub dims: [usize; 3],
}

impl GridDomain {
    pub fn new(dims: [usize; 3]) -> Self {
        GridDomain { dims }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn normalize<F: Real>(&self, p: [F; 3]) -> [F; 3] {
        let mut out = [F::zero(); 3];
        for a in 0..3 {
            out[a] = if self.dims[a] > 1 {
                let half = real::<F>((self.dims[a] - 1) as f64 / 2.0);
                (p[a] - half) / half
            } else {
                F::zero()
            };
        }
        out
    }

    #[inline]
    pub fn denormalize<F: Real>(&self, x: [F; 3]) -> [F; 3] {
        let mut out = [F::zero(); 3];
        for a in 0..3 {
            out[a] = if self.dims[a] > 1 {
                let half = real::<F>((self.dims[a] - 1) as f64 / 2.0);
                x[a] * half + half
            } else {
                F::zero()
            };
        }
        out
    }

    /// Per-axis scale `d normalized / d voxel`.
    #[inline]
    pub fn normalize_scale<F: Real>(&self) -> [F; 3] {
        let mut out = [F::zero(); 3];
        for a in 0..3 {
            out[a] = if self.dims[a] > 1 {
                real::<F>(2.0 / (self.dims[a] - 1) as f64)
            } else {
                F::zero()
            };
        }
        out
    }

    /// Enumerates all grid points in `(d, h, w)`-major order.
    pub fn grid_points<F: Real>(&self) -> Vec<[F; 3]> {
        let mut out = Vec::with_capacity(self.voxel_count());
        for d in 0..self.dims[0] {
            for h in 0..self.dims[1] {
                for w in 0..self.dims[2] {
                    out.push([
                        real::<F>(d as f64),
                        real::<F>(h as f64),
                        real::<F>(w as f64),
                    ]);
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Trilinear sampling
// ---------------------------------------------------------------------------

#[inline]
fn cell_and_frac<F: Real>(x: F, dim: usize) -> (usize, F, bool) {
    // Clamp to [0, dim-1], then attribute to the floor cell; the top
    // boundary is nudged to the interior cell so the one-sided derivative
    // is defined there. `inside` is false only for queries clamped from
    // outside the domain.
    let top = real::<F>((dim - 1) as f64);
    let inside = x >= F::zero() && x <= top;
    let xc = x.max(F::zero()).min(top);
    if dim == 1 {
        return (0, F::zero(), inside);
    }
    let mut c0 = xc.floor().to_f64() as usize;
    if c0 > dim - 2 {
        c0 = dim - 2;
    }
    (c0, xc - real::<F>(c0 as f64), inside)
}

fn trilinear_one<F: Real>(data: &[f32], dims: [usize; 3], c: [F; 3]) -> (F, [F; 3]) {
    let (d0, fd, ind) = cell_and_frac(c[0], dims[0]);
    let (h0, fh, inh) = cell_and_frac(c[1], dims[1]);
    let (w0, fw, inw) = cell_and_frac(c[2], dims[2]);
    let (nh, nw) = (dims[1], dims[2]);
    let one = F::one();

    let stride_d = if dims[0] > 1 { nh * nw } else { 0 };
    let stride_h = if dims[1] > 1 { nw } else { 0 };
    let stride_w = if dims[2] > 1 { 1 } else { 0 };
    let base = (d0 * nh + h0) * nw + w0;

    let v000 = F::from_f32(data[base]);
    let v001 = F::from_f32(data[base + stride_w]);
    let v010 = F::from_f32(data[base + stride_h]);
    let v011 = F::from_f32(data[base + stride_h + stride_w]);
    let v100 = F::from_f32(data[base + stride_d]);
    let v101 = F::from_f32(data[base + stride_d + stride_w]);
    let v110 = F::from_f32(data[base + stride_d + stride_h]);
    let v111 = F::from_f32(data[base + stride_d + stride_h + stride_w]);

    // Interpolate along w, then h, then d; keep the intermediate lerps so
    // the analytic derivative reuses them.
    let c00 = v000 * (one - fw) + v001 * fw;
    let c01 = v010 * (one - fw) + v011 * fw;
    let c10 = v100 * (one - fw) + v101 * fw;
    let c11 = v110 * (one - fw) + v111 * fw;

    let c0 = c00 * (one - fh) + c01 * fh;
    let c1 = c10 * (one - fh) + c11 * fh;
    let value = c0 * (one - fd) + c1 * fd;

    let dd = c1 - c0;
    let dh = (c01 - c00) * (one - fd) + (c11 - c10) * fd;
    let dw0 = (v001 - v000) * (one - fh) + (v011 - v010) * fh;
    let dw1 = (v101 - v100) * (one - fh) + (v111 - v110) * fh;
    let dw = dw0 * (one - fd) + dw1 * fd;

    let zero = F::zero();
    let grad = [
        if ind { dd } else { zero },
        if inh { dh } else { zero },
        if inw { dw } else { zero },
    ];
    (value, grad)
}

/// Trilinear intensity sampling at continuous voxel coordinates.
pub fn sample_trilinear<F: Real>(v: &Volume, coords: &[[F; 3]]) -> Result<Vec<F>> {
    let data = v.intensity_data()?;
    Ok(coords
        .iter()
        .map(|&c| trilinear_one(data, v.dims, c).0)
        .collect())
}

/// Trilinear sampling plus the analytic derivative with respect to the
/// query coordinate (piecewise constant per cell; zero for queries clamped
/// from outside the domain).
pub fn sample_trilinear_with_coord_grad<F: Real>(
    v: &Volume,
    coords: &[[F; 3]],
) -> Result<(Vec<F>, Vec<[F; 3]>)> {
    let data = v.intensity_data()?;
    let mut vals = Vec::with_capacity(coords.len());
    let mut grads = Vec::with_capacity(coords.len());
    for &c in coords {
        let (val, g) = trilinear_one(data, v.dims, c);
        vals.push(val);
        grads.push(g);
    }
    Ok((vals, grads))
}

#[inline]
fn nearest_index(x: f32, dim: usize) -> usize {
    let xc = x.max(0.0).min((dim - 1) as f32);
    (xc + 0.5).floor() as usize
}

/// Warps `moving` with a dense field of deformed positions (voxel units,
/// same layout as volume data). Intensity volumes use trilinear sampling,
/// label volumes nearest neighbor.
pub fn warp_volume(moving: &Volume, field: &crate::deform::DeformationField) -> Result<Volume> {
    if field.domain.voxel_count() != field.positions.len() {
        return Err(Error::shape("deformation field grid size mismatch"));
    }
    let dims = field.domain.dims;
    match &moving.data {
        VolumeData::Intensity(data) => {
            let out: Vec<f32> = field
                .positions
                .iter()
                .map(|&p| trilinear_one::<f32>(data, moving.dims, p).0)
                .collect();
            Volume::new(dims, moving.spacing, VolumeData::Intensity(out))
        }
        VolumeData::Label(data) => {
            let out: Vec<u16> = field
                .positions
                .iter()
                .map(|&p| {
                    let d = nearest_index(p[0], moving.dims[0]);
                    let h = nearest_index(p[1], moving.dims[1]);
                    let w = nearest_index(p[2], moving.dims[2]);
                    data[(d * moving.dims[1] + h) * moving.dims[2] + w]
                })
                .collect();
            Volume::new(dims, moving.spacing, VolumeData::Label(out))
        }
    }
}

// ---------------------------------------------------------------------------
// .nvol container
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct NvolHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    kind: String,
}

/// Saves a volume to the `.nvol` container: magic "NVOL", u32 LE version,
/// u64 LE JSON header length, JSON header, little-endian payload.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let kind = match v.data {
        VolumeData::Intensity(_) => "f32",
        VolumeData::Label(_) => "u16",
    };
    let header = serde_json::to_vec(&NvolHeader {
        dims: v.dims,
        spacing: v.spacing,
        kind: kind.to_string(),
    })
    .expect("header serializes");

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(NVOL_MAGIC)?;
    f.write_all(&crate::FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    match &v.data {
        VolumeData::Intensity(data) => {
            for x in data {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        VolumeData::Label(data) => {
            for x in data {
                f.write_all(&x.to_le_bytes())?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

fn read_exact_vec(r: &mut impl IoRead, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub(crate) fn read_container_header(
    r: &mut impl IoRead,
    magic: &[u8; 4],
) -> Result<serde_json::Value> {
    let got = read_exact_vec(r, 4)?;
    if got != magic {
        return Err(Error::format(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let ver = u32::from_le_bytes(read_exact_vec(r, 4)?.try_into().unwrap());
    if ver != crate::FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported version {ver}, reader supports {}",
            crate::FORMAT_VERSION
        )));
    }
    let len = u64::from_le_bytes(read_exact_vec(r, 8)?.try_into().unwrap()) as usize;
    let header = read_exact_vec(r, len)?;
    serde_json::from_slice(&header).map_err(|e| Error::format(format!("bad JSON header: {e}")))
}

fn load_nvol(path: &Path) -> Result<Volume> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let header: NvolHeader = serde_json::from_value(read_container_header(&mut f, NVOL_MAGIC)?)
        .map_err(|e| Error::format(format!("bad nvol header: {e}")))?;
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let data = match header.kind.as_str() {
        "f32" => {
            if payload.len() != n * 4 {
                return Err(Error::format(format!(
                    "payload length mismatch: expected {} bytes, got {}",
                    n * 4,
                    payload.len()
                )));
            }
            VolumeData::Intensity(
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            )
        }
        "u16" => {
            if payload.len() != n * 2 {
                return Err(Error::format(format!(
                    "payload length mismatch: expected {} bytes, got {}",
                    n * 2,
                    payload.len()
                )));
            }
            VolumeData::Label(
                payload
                    .chunks_exact(2)
                    .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            )
        }
        other => return Err(Error::format(format!("unsupported nvol kind {other:?}"))),
    };
    Volume::new(header.dims, header.spacing, data)
}

// ---------------------------------------------------------------------------
// NIfTI-1 reader (single-file uncompressed subset)
// ---------------------------------------------------------------------------

fn load_nifti(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 352 {
        return Err(Error::format("NIfTI file shorter than header"));
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sizeof_hdr != 348 {
        return Err(Error::format(
            "unsupported NIfTI header (expected little-endian sizeof_hdr 348)",
        ));
    }
    if &bytes[344..347] != b"n+1" {
        return Err(Error::format("unsupported NIfTI magic (need \"n+1\")"));
    }
    let dim_at = |i: usize| i16::from_le_bytes(bytes[40 + 2 * i..42 + 2 * i].try_into().unwrap());
    let ndim = dim_at(0);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(format!("bad NIfTI dim[0] = {ndim}")));
    }
    // Volume layout in NIfTI is x fastest; dim[1..3] = (nx, ny, nz). We map
    // x -> w, y -> h, z -> d so the flat order carries over unchanged.
    let nx = dim_at(1).max(1) as usize;
    let ny = if ndim >= 2 { dim_at(2).max(1) as usize } else { 1 };
    let nz = if ndim >= 3 { dim_at(3).max(1) as usize } else { 1 };
    for i in 4..=usize::min(ndim as usize, 7) {
        if dim_at(i) > 1 {
            return Err(Error::format("multi-volume NIfTI not supported"));
        }
    }
    let datatype = i16::from_le_bytes(bytes[70..72].try_into().unwrap());
    let pix_at = |i: usize| f32::from_le_bytes(bytes[76 + 4 * i..80 + 4 * i].try_into().unwrap());
    let mut spacing = [pix_at(3) as f64, pix_at(2) as f64, pix_at(1) as f64];
    for s in &mut spacing {
        if !(*s > 0.0) {
            *s = 1.0;
        }
    }
    let vox_offset = f32::from_le_bytes(bytes[108..112].try_into().unwrap()) as usize;
    let n = nx * ny * nz;
    let dims = [nz, ny, nx];
    let elem = match datatype {
        2 => 1,
        4 => 2,
        16 => 4,
        other => {
            return Err(Error::format(format!(
                "unsupported NIfTI datatype {other} (supported: 2, 4, 16)"
            )))
        }
    };
    if bytes.len() < vox_offset + n * elem {
        return Err(Error::format("NIfTI payload truncated"));
    }
    let payload = &bytes[vox_offset..vox_offset + n * elem];
    let data: Vec<f32> = match datatype {
        2 => payload.iter().map(|&b| b as f32).collect(),
        4 => payload
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes(b.try_into().unwrap()) as f32)
            .collect(),
        16 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        _ => unreachable!(),
    };
    Volume::new(dims, spacing, VolumeData::Intensity(data))
}

/// Loads a volume from `.nvol` or a NIfTI-1 single-file uncompressed subset
/// (chosen by extension: `.nii` goes through the NIfTI reader).
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => load_nifti(path),
        _ => load_nvol(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::DeformationField;

    fn ramp_volume(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        let mut data = Vec::new();
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Volume::intensity(dims, data).unwrap()
    }

    #[test]
    fn layout_and_invariants() {
        let v = ramp_volume([2, 2, 2], |d, h, w| (d * 4 + h * 2 + w) as f32);
        assert_eq!(v.intensity_data().unwrap()[7], 7.0);
        assert!(Volume::intensity([2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Volume::intensity([2, 2, 2], vec![f32::NAN; 8]).is_err());
        assert!(Volume::new([0, 2, 2], [1.0; 3], VolumeData::Intensity(vec![])).is_err());
    }

    #[test]
    fn nvol_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nvol");

        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 33) as f32 / (1u32 << 31) as f32
        };
        let data: Vec<f32> = (0..48 * 48 * 48).map(|_| next()).collect();
        let v = Volume::new([48, 48, 48], [1.0, 2.0, 0.5], VolumeData::Intensity(data)).unwrap();
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(v, back);

        let labels = Volume::labels([3, 2, 4], (0..24).map(|i| i as u16 * 7).collect()).unwrap();
        let lp = dir.path().join("l.nvol");
        save_volume(&labels, &lp).unwrap();
        assert_eq!(load_volume(&lp).unwrap(), labels);
    }

    #[test]
    fn nvol_payload_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nvol");
        let header = br#"{"dims":[2,2,2],"spacing":[1.0,1.0,1.0],"kind":"f32"}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(NVOL_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        for _ in 0..7 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        std::fs::write(&p, bytes).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"));
    }

    #[test]
    fn save_to_empty_path_fails() {
        let v = ramp_volume([2, 2, 2], |_, _, _| 0.0);
        assert!(save_volume(&v, "").is_err());
    }

    #[test]
    fn nifti_reader_subset() {
        // Hand-built minimal n+1 file: 2x3x4 i16 ramp.
        let (nx, ny, nz) = (4usize, 3usize, 2usize);
        let mut hdr = vec![0u8; 352];
        hdr[0..4].copy_from_slice(&348i32.to_le_bytes());
        let dims: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
        for (i, d) in dims.iter().enumerate() {
            hdr[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        hdr[70..72].copy_from_slice(&4i16.to_le_bytes()); // datatype i16
        let pix: [f32; 4] = [1.0, 2.0, 3.0, 4.0];
        for (i, s) in pix.iter().enumerate() {
            hdr[76 + 4 * i..80 + 4 * i].copy_from_slice(&s.to_le_bytes());
        }
        hdr[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        hdr[344..348].copy_from_slice(b"n+1\0");
        let mut bytes = hdr;
        for i in 0..(nx * ny * nz) as i16 {
            bytes.extend_from_slice(&i.to_le_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        std::fs::write(&p, bytes).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.dims, [nz, ny, nx]);
        assert_eq!(v.spacing, [4.0, 3.0, 2.0]);
        let data = v.intensity_data().unwrap();
        assert_eq!(data[0], 0.0);
        assert_eq!(data[nx * ny * nz - 1], (nx * ny * nz - 1) as f32);
    }

    #[test]
    fn domain_normalize_round_trip() {
        let dom = GridDomain::new([48, 33, 5]);
        for p in [[0.0f64, 0.0, 0.0], [47.0, 32.0, 4.0], [13.25, 7.5, 2.125]] {
            let back = dom.denormalize(dom.normalize(p));
            for a in 0..3 {
                assert!((back[a] - p[a]).abs() <= 1e-12 * p[a].abs().max(1.0));
            }
        }
        // Degenerate axis maps to zero.
        let dom1 = GridDomain::new([1, 4, 4]);
        assert_eq!(dom1.normalize([0.0f64, 3.0, 3.0])[0], 0.0);
    }

    #[test]
    fn trilinear_at_voxel_and_affine() {
        let v = ramp_volume([4, 5, 6], |d, h, w| (d * 30 + h * 6 + w) as f32);
        let vals = sample_trilinear(&v, &[[1.0f64, 2.0, 3.0]]).unwrap();
        assert_eq!(vals[0], 30.0 + 12.0 + 3.0);

        let w_ramp = ramp_volume([3, 3, 6], |_, _, w| w as f32);
        let vals = sample_trilinear(&w_ramp, &[[1.0f64, 1.0, 2.5]]).unwrap();
        assert_eq!(vals[0], 2.5);
    }

    #[test]
    fn trilinear_clamps_out_of_bounds() {
        let v = ramp_volume([3, 3, 3], |d, h, w| (d * 9 + h * 3 + w) as f32);
        let vals = sample_trilinear(&v, &[[-5.0f64, 0.0, 0.0], [10.0, 10.0, 10.0]]).unwrap();
        assert_eq!(vals[0], 0.0);
        assert_eq!(vals[1], 26.0);
    }

    #[test]
    fn trilinear_grad_on_affine_and_constant() {
        let w_ramp = ramp_volume([4, 4, 8], |_, _, w| w as f32);
        let (_, grads) =
            sample_trilinear_with_coord_grad(&w_ramp, &[[1.5f64, 2.0, 3.75]]).unwrap();
        assert_eq!(grads[0], [0.0, 0.0, 1.0]);

        let constant = ramp_volume([4, 4, 4], |_, _, _| 3.5);
        let (_, grads) =
            sample_trilinear_with_coord_grad(&constant, &[[1.2f64, 2.7, 0.4]]).unwrap();
        assert_eq!(grads[0], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn trilinear_grad_matches_finite_differences() {
        let mut state = 99u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        let data: Vec<f32> = (0..512).map(|_| next() as f32).collect();
        let v = Volume::intensity([8, 8, 8], data).unwrap();
        let h = 1e-4f64;
        for _ in 0..50 {
            // Interior points away from cell faces so the FD stencil stays in one cell.
            let p = [
                1.0 + 5.0 * next(),
                1.0 + 5.0 * next(),
                1.0 + 5.0 * next(),
            ];
            let frac_ok = p.iter().all(|x| {
                let f = x.fract();
                f > 2.0 * h && f < 1.0 - 2.0 * h
            });
            if !frac_ok {
                continue;
            }
            let (_, grads) = sample_trilinear_with_coord_grad(&v, &[p]).unwrap();
            for a in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[a] += h;
                pm[a] -= h;
                let vp = sample_trilinear(&v, &[pp]).unwrap()[0];
                let vm = sample_trilinear(&v, &[pm]).unwrap()[0];
                let fd = (vp - vm) / (2.0 * h);
                let denom = fd.abs().max(1e-6);
                assert!(
                    (grads[0][a] - fd).abs() / denom < 1e-5,
                    "axis {a}: analytic {} vs fd {fd}",
                    grads[0][a]
                );
            }
        }
    }

    #[test]
    fn sampled_value_within_stencil_bounds() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        let data: Vec<f32> = (0..216).map(|_| next() as f32).collect();
        let v = Volume::intensity([6, 6, 6], data).unwrap();
        let lo = data_min(&v);
        let hi = data_max(&v);
        for _ in 0..200 {
            let p = [5.0 * next(), 5.0 * next(), 5.0 * next()];
            let val = sample_trilinear(&v, &[p]).unwrap()[0];
            assert!(val >= lo - 1e-6 && val <= hi + 1e-6);
        }
    }

    fn data_min(v: &Volume) -> f64 {
        v.intensity_data()
            .unwrap()
            .iter()
            .cloned()
            .fold(f32::INFINITY, f32::min) as f64
    }
    fn data_max(v: &Volume) -> f64 {
        v.intensity_data()
            .unwrap()
            .iter()
            .cloned()
            .fold(f32::NEG_INFINITY, f32::max) as f64
    }

    #[test]
    fn warp_identity_and_translation() {
        let v = ramp_volume([4, 4, 4], |d, h, w| (d * 16 + h * 4 + w) as f32);
        let id = DeformationField::identity(v.domain());
        let warped = warp_volume(&v, &id).unwrap();
        assert_eq!(warped, v);

        // Shift all positions by +1 along w: output(p) = moving(p + w-hat).
        let mut shifted = id.clone();
        for p in &mut shifted.positions {
            p[2] += 1.0;
        }
        let warped = warp_volume(&v, &shifted).unwrap();
        let out = warped.intensity_data().unwrap();
        let src = v.intensity_data().unwrap();
        for d in 0..4 {
            for h in 0..4 {
                for w in 0..3 {
                    assert_eq!(out[v.index(d, h, w)], src[v.index(d, h, w + 1)]);
                }
            }
        }
    }

    #[test]
    fn warp_labels_nearest_neighbor() {
        let labels = Volume::labels([3, 3, 3], (0..27).map(|i| (i * 11) as u16).collect()).unwrap();
        let id = DeformationField::identity(labels.domain());
        let warped = warp_volume(&labels, &id).unwrap();
        assert_eq!(warped, labels);
    }
}
