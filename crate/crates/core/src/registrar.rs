//! Optimization drivers for the six registration methods, plus
//! checkpointing and loss traces.
//!
//! A run owns its mutable state (parameters, Adam moments, sampling RNG)
//! and is fully determined by the config seed: same inputs, same build,
//! same trace.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{adam_step, AdamState};
use crate::deform::{render_dense, DeformationField, OdeConfig, Transform};
use crate::error::{Error, Result};
use crate::field::{init_fourier, init_siren, FieldKind, FourierEncoding, MlpParams, NeuralField};
use crate::objective::{DeformModel, FieldModel, GridModel, LossConfig, RegistrationObjective};
use crate::sampling::{SampleBatch, SamplerConfig};
use crate::volume::{GridDomain, Volume};

/// The six method names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NirD,
    NirH,
    NirDDiff,
    NirPDiff,
    NirHDiff,
    Grid,
}

impl Method {
    pub fn kind(&self) -> FieldKind {
        match self {
            Method::NirD | Method::NirH | Method::Grid => FieldKind::Displacement,
            Method::NirDDiff | Method::NirPDiff | Method::NirHDiff => FieldKind::Velocity,
        }
    }

    pub fn is_hybrid(&self) -> bool {
        matches!(self, Method::NirH | Method::NirHDiff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownsizeParams {
    pub stride: usize,
    pub randomize_offset: bool,
}

impl Default for DownsizeParams {
    fn default() -> Self {
        DownsizeParams {
            stride: 3,
            randomize_offset: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinipatchParams {
    pub count: usize,
    pub patch_size: usize,
}

impl Default for MinipatchParams {
    fn default() -> Self {
        MinipatchParams {
            count: 5,
            patch_size: 32,
        }
    }
}

/// Full run configuration; unset knobs take the published defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub method: Method,
    pub iterations: usize,
    /// First-stage budget for the hybrid methods.
    pub phase1_iterations: usize,
    pub lr: f64,
    /// Defaults per kind: 1000 (displacement), 100 (velocity).
    pub lambda_reg: Option<f64>,
    pub window: usize,
    pub eps_lncc: f64,
    pub downsize: DownsizeParams,
    pub minipatch: MinipatchParams,
    pub ode: OdeConfig,
    pub seed: u64,
    pub log_every: usize,
    /// Min-max rescale both volumes to [0, 1] before optimizing.
    pub normalize_intensity: bool,
    pub fourier_n: usize,
    pub fourier_sigma: f64,
    /// Defaults per kind: [256, 256, 256] (displacement), [256, 256]
    /// (velocity).
    pub hidden_dims: Option<Vec<usize>>,
    pub omega0: f64,
    /// Iterations after which to capture a dense-field snapshot.
    pub snapshot_iters: Vec<usize>,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            method: Method::NirD,
            iterations: 900,
            phase1_iterations: 200,
            lr: 1e-4,
            lambda_reg: None,
            window: 9,
            eps_lncc: 1e-5,
            downsize: DownsizeParams::default(),
            minipatch: MinipatchParams::default(),
            ode: OdeConfig::default(),
            seed: 0,
            log_every: 10,
            normalize_intensity: true,
            fourier_n: 128,
            fourier_sigma: 3.0,
            hidden_dims: None,
            omega0: 30.0,
            snapshot_iters: Vec::new(),
        }
    }
}

impl RegistrationConfig {
    pub fn for_method(method: Method) -> Self {
        RegistrationConfig {
            method,
            ..Default::default()
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        self.lambda_reg.unwrap_or(match self.method.kind() {
            FieldKind::Displacement => 1000.0,
            FieldKind::Velocity => 100.0,
        })
    }

    pub fn effective_hidden(&self) -> Vec<usize> {
        self.hidden_dims.clone().unwrap_or_else(|| match self.method.kind() {
            FieldKind::Displacement => vec![256, 256, 256],
            FieldKind::Velocity => vec![256, 256],
        })
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            window: self.window,
            lambda_reg: self.effective_lambda(),
            eps_lncc: self.eps_lncc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be > 0"));
        }
        if self.fourier_n == 0 {
            return Err(Error::config("fourier_n must be >= 1"));
        }
        if !(self.fourier_sigma > 0.0) {
            return Err(Error::config("fourier_sigma must be > 0"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be >= 1"));
        }
        if self.effective_hidden().is_empty() {
            return Err(Error::config("at least one hidden layer required"));
        }
        Ok(())
    }
}

// Stream separation salts: each consumer of the run seed gets its own
// deterministic sub-seed.
const SEED_OMEGA1: u64 = 0x6f6d_6567_6131;
const SEED_OMEGA2: u64 = 0x6f6d_6567_6132;
const SEED_MLP1: u64 = 0x6d6c_7031;
const SEED_MLP2: u64 = 0x6d6c_7032;
const SEED_SAMPLER1: u64 = 0x7361_6d70_31;
const SEED_SAMPLER2: u64 = 0x7361_6d70_32;

/// One logged optimization step (loss is pre-update).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub sim: f64,
    pub reg: f64,
    pub total: f64,
    pub seconds: f64,
}

/// The optimized transform of a finished run.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Single(NeuralField<f32>, OdeConfig),
    Hybrid(NeuralField<f32>, NeuralField<f32>, OdeConfig),
    /// Dense per-voxel displacements (grid baseline).
    Grid(GridDomain, Vec<[f32; 3]>),
}

impl TrainedModel {
    pub fn render(&self, domain: GridDomain) -> Result<DeformationField> {
        match self {
            TrainedModel::Single(nf, ode) => render_dense(&Transform::Single(nf, *ode), domain),
            TrainedModel::Hybrid(nf1, nf2, ode) => {
                render_dense(&Transform::Hybrid(nf1, nf2, *ode), domain)
            }
            TrainedModel::Grid(dom, disp) => {
                render_dense(&Transform::DenseDisplacement(disp, *dom), *dom)
            }
        }
    }
}

/// Artifacts of one registration run.
pub struct RegistrationResult {
    pub model: TrainedModel,
    /// Dense deformed positions over the full grid.
    pub field: DeformationField,
    pub trace: Vec<TracePoint>,
    /// Dense fields captured at the configured snapshot iterations.
    pub snapshots: Vec<(usize, DeformationField)>,
}

fn prepared(v: &Volume, normalize: bool) -> Result<Volume> {
    if normalize {
        v.normalized_minmax()
    } else {
        Ok(v.clone())
    }
}

fn build_field(
    cfg: &RegistrationConfig,
    domain: GridDomain,
    omega_seed: u64,
    mlp_seed: u64,
) -> Result<NeuralField<f32>> {
    let encoding = init_fourier(cfg.fourier_n, cfg.fourier_sigma, omega_seed)?;
    let mut layer_dims = vec![2 * cfg.fourier_n];
    layer_dims.extend(cfg.effective_hidden());
    layer_dims.push(3);
    let mlp = init_siren(&layer_dims, cfg.omega0, mlp_seed)?;
    NeuralField::new(encoding, mlp, cfg.method.kind(), domain)
}

struct TrainCtx<'a> {
    target: &'a Volume,
    moving: &'a Volume,
    cfg: &'a RegistrationConfig,
    loss: LossConfig,
    started: std::time::Instant,
}

impl TrainCtx<'_> {
    fn domain(&self) -> GridDomain {
        self.target.domain()
    }
}

/// Core loop shared by every method: draw, differentiate, step.
fn train<M, D>(
    ctx: &TrainCtx,
    model: &M,
    mut draw: D,
    iterations: usize,
    iter_offset: usize,
    trace: &mut Vec<TracePoint>,
    snapshots: &mut Vec<(usize, DeformationField)>,
    render_current: impl Fn(&[f32]) -> Result<DeformationField>,
) -> Result<Vec<f32>>
where
    M: DeformModel<f32>,
    D: FnMut() -> Result<SampleBatch>,
{
    let mut params = model.initial_params();
    let mut adam = AdamState::new(params.len(), ctx.cfg.lr);
    for it in 0..iterations {
        let iteration = iter_offset + it + 1;
        let batch = draw()?;
        let objective =
            RegistrationObjective::new(ctx.target, ctx.moving, model, &batch, &ctx.loss)?;
        let (report, grad) = objective.report_and_grad(&params)?;
        if !report.total.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss {} at iteration {iteration}; aborting",
                report.total
            )));
        }
        adam_step(&mut params, &grad, &mut adam)?;
        if it == 0 || iteration % ctx.cfg.log_every == 0 || it + 1 == iterations {
            trace.push(TracePoint {
                iteration,
                sim: report.sim,
                reg: report.reg,
                total: report.total,
                seconds: ctx.started.elapsed().as_secs_f64(),
            });
        }
        if ctx.cfg.snapshot_iters.contains(&iteration) {
            snapshots.push((iteration, render_current(&params)?));
        }
    }
    Ok(params)
}

fn train_single_field(
    ctx: &TrainCtx,
    template: NeuralField<f32>,
    prelude: Option<NeuralField<f32>>,
    sampler: SamplerConfig,
    iterations: usize,
    iter_offset: usize,
    sampler_seed: u64,
    trace: &mut Vec<TracePoint>,
    snapshots: &mut Vec<(usize, DeformationField)>,
) -> Result<NeuralField<f32>> {
    let model = match prelude {
        Some(nf1) => FieldModel::with_prelude(template, ctx.cfg.ode, nf1),
        None => FieldModel::new(template, ctx.cfg.ode),
    };
    let domain = ctx.domain();
    let mut rng = ChaCha8Rng::seed_from_u64(sampler_seed);
    let render = |params: &[f32]| -> Result<DeformationField> {
        let mut nf = model.template.clone();
        nf.mlp.set_params(params)?;
        match &model.prelude {
            Some(nf1) => render_dense(&Transform::Hybrid(nf1, &nf, ctx.cfg.ode), domain),
            None => render_dense(&Transform::Single(&nf, ctx.cfg.ode), domain),
        }
    };
    let params = train(
        ctx,
        &model,
        || sampler.draw(domain, &mut rng),
        iterations,
        iter_offset,
        trace,
        snapshots,
        render,
    )?;
    let mut nf = model.template.clone();
    nf.mlp.set_params(&params)?;
    Ok(nf)
}

/// Runs the configured method end to end.
pub fn register(target: &Volume, moving: &Volume, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    if target.dims != moving.dims {
        return Err(Error::shape(format!(
            "target dims {:?} != moving dims {:?}",
            target.dims, moving.dims
        )));
    }
    target.intensity_data()?;
    moving.intensity_data()?;
    let target = prepared(target, cfg.normalize_intensity)?;
    let moving = prepared(moving, cfg.normalize_intensity)?;
    let domain = target.domain();
    let ctx = TrainCtx {
        target: &target,
        moving: &moving,
        cfg,
        loss: cfg.loss_config(),
        started: std::time::Instant::now(),
    };

    let mut trace = Vec::new();
    let mut snapshots = Vec::new();

    let model = match cfg.method {
        Method::Grid => {
            let model = GridModel { domain };
            let batch = SampleBatch::full_grid(domain);
            let render = |params: &[f32]| -> Result<DeformationField> {
                let disp = displacements_from(params);
                render_dense(&Transform::DenseDisplacement(&disp, domain), domain)
            };
            let params = train(
                &ctx,
                &model,
                || Ok(batch.clone()),
                cfg.iterations,
                0,
                &mut trace,
                &mut snapshots,
                render,
            )?;
            TrainedModel::Grid(domain, displacements_from(&params))
        }
        Method::NirD | Method::NirDDiff | Method::NirPDiff => {
            let sampler = match cfg.method {
                Method::NirPDiff => SamplerConfig::Minipatch {
                    count: cfg.minipatch.count,
                    patch_size: cfg.minipatch.patch_size,
                },
                _ => SamplerConfig::Downsize {
                    stride: cfg.downsize.stride,
                    randomize_offset: cfg.downsize.randomize_offset,
                },
            };
            let template = build_field(cfg, domain, cfg.seed ^ SEED_OMEGA1, cfg.seed ^ SEED_MLP1)?;
            let nf = train_single_field(
                &ctx,
                template,
                None,
                sampler,
                cfg.iterations,
                0,
                cfg.seed ^ SEED_SAMPLER1,
                &mut trace,
                &mut snapshots,
            )?;
            TrainedModel::Single(nf, cfg.ode)
        }
        Method::NirH | Method::NirHDiff => {
            let template = build_field(cfg, domain, cfg.seed ^ SEED_OMEGA1, cfg.seed ^ SEED_MLP1)?;
            let sampler = SamplerConfig::Downsize {
                stride: cfg.downsize.stride,
                randomize_offset: cfg.downsize.randomize_offset,
            };
            let nf1 = train_single_field(
                &ctx,
                template,
                None,
                sampler,
                cfg.phase1_iterations,
                0,
                cfg.seed ^ SEED_SAMPLER1,
                &mut trace,
                &mut snapshots,
            )?;
            let phase2 = hybrid_phase2(&target, &moving, cfg, nf1)?;
            trace.extend(phase2.trace);
            snapshots.extend(phase2.snapshots);
            return Ok(RegistrationResult {
                field: phase2.field,
                model: phase2.model,
                trace,
                snapshots,
            });
        }
    };

    let field = model.render(domain)?;
    Ok(RegistrationResult {
        model,
        field,
        trace,
        snapshots,
    })
}

/// Second hybrid stage: freezes `nf1` and optimizes a fresh NF2 on
/// mini-patch batches routed through it. Fully determined by `cfg`, so
/// resuming from a phase-1 checkpoint reproduces the phase-2 trace.
pub fn hybrid_phase2(
    target: &Volume,
    moving: &Volume,
    cfg: &RegistrationConfig,
    nf1: NeuralField<f32>,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let target = prepared(target, cfg.normalize_intensity)?;
    let moving = prepared(moving, cfg.normalize_intensity)?;
    let domain = target.domain();
    let ctx = TrainCtx {
        target: &target,
        moving: &moving,
        cfg,
        loss: cfg.loss_config(),
        started: std::time::Instant::now(),
    };
    let template = build_field(cfg, domain, cfg.seed ^ SEED_OMEGA2, cfg.seed ^ SEED_MLP2)?;
    let sampler = SamplerConfig::Minipatch {
        count: cfg.minipatch.count,
        patch_size: cfg.minipatch.patch_size,
    };
    let mut trace = Vec::new();
    let mut snapshots = Vec::new();
    let nf2 = train_single_field(
        &ctx,
        template,
        Some(nf1.clone()),
        sampler,
        cfg.iterations,
        cfg.phase1_iterations,
        cfg.seed ^ SEED_SAMPLER2,
        &mut trace,
        &mut snapshots,
    )?;
    let model = TrainedModel::Hybrid(nf1, nf2, cfg.ode);
    let field = model.render(domain)?;
    Ok(RegistrationResult {
        model,
        field,
        trace,
        snapshots,
    })
}

/// Grid baseline entry point (same as `register` with the grid method).
pub fn grid_baseline(
    target: &Volume,
    moving: &Volume,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    let mut cfg = cfg.clone();
    cfg.method = Method::Grid;
    register(target, moving, &cfg)
}

fn displacements_from(params: &[f32]) -> Vec<[f32; 3]> {
    params
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CKPT_MAGIC: &[u8; 4] = b"NIRC";

/// A saved model plus the context needed to resume or apply it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub method: Method,
    pub seed: u64,
    pub iteration: usize,
    pub domain: GridDomain,
    pub ode: OdeConfig,
    pub model: TrainedModel,
}

#[derive(Serialize, Deserialize)]
struct FieldMeta {
    kind: FieldKind,
    layer_dims: Vec<usize>,
    n: usize,
    sigma: f64,
    omega0: f64,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    method: Method,
    seed: u64,
    iteration: usize,
    domain_dims: [usize; 3],
    ode: OdeConfig,
    fields: Vec<FieldMeta>,
    grid: bool,
}

fn field_meta(nf: &NeuralField<f32>) -> FieldMeta {
    FieldMeta {
        kind: nf.kind,
        layer_dims: nf.mlp.layer_dims(),
        n: nf.encoding.n(),
        sigma: nf.encoding.sigma,
        omega0: nf.mlp.omega0,
    }
}

fn push_field_blob(nf: &NeuralField<f32>, blob: &mut Vec<u8>) {
    for &x in nf.encoding.omega.iter() {
        blob.extend_from_slice(&x.to_le_bytes());
    }
    for x in nf.mlp.flatten_params() {
        blob.extend_from_slice(&x.to_le_bytes());
    }
}

/// Writes the "NIRC" container: magic, u32 version, u64 JSON length, JSON
/// header, then one f32 LE blob per field (omega row-major, then weights).
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut fields = Vec::new();
    let mut blob = Vec::new();
    let mut grid = false;
    match &ckpt.model {
        TrainedModel::Single(nf, _) => {
            fields.push(field_meta(nf));
            push_field_blob(nf, &mut blob);
        }
        TrainedModel::Hybrid(nf1, nf2, _) => {
            fields.push(field_meta(nf1));
            fields.push(field_meta(nf2));
            push_field_blob(nf1, &mut blob);
            push_field_blob(nf2, &mut blob);
        }
        TrainedModel::Grid(_, disp) => {
            grid = true;
            for v in disp {
                for &x in v {
                    blob.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    let header = serde_json::to_vec(&CkptHeader {
        method: ckpt.method,
        seed: ckpt.seed,
        iteration: ckpt.iteration,
        domain_dims: ckpt.domain.dims,
        ode: ckpt.ode,
        fields,
        grid,
    })
    .expect("header serializes");

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&crate::FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&blob)?;
    f.flush()?;
    Ok(())
}

fn take_f32s(blob: &[u8], at: &mut usize, count: usize) -> Result<Vec<f32>> {
    let bytes = count * 4;
    if *at + bytes > blob.len() {
        return Err(Error::format(format!(
            "checkpoint blob length mismatch: need {} bytes at offset {}, have {}",
            bytes,
            at,
            blob.len()
        )));
    }
    let out = blob[*at..*at + bytes]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *at += bytes;
    Ok(out)
}

fn read_field(
    meta: &FieldMeta,
    domain: GridDomain,
    blob: &[u8],
    at: &mut usize,
) -> Result<NeuralField<f32>> {
    if meta.layer_dims.len() < 2 || meta.layer_dims[0] != 2 * meta.n {
        return Err(Error::format("inconsistent checkpoint field metadata"));
    }
    let omega_vals = take_f32s(blob, at, meta.n * 3)?;
    let omega = Array2::from_shape_vec((meta.n, 3), omega_vals).expect("omega shape");
    let encoding = FourierEncoding {
        sigma: meta.sigma,
        omega,
    };
    let layers: Vec<(Array2<f32>, Array1<f32>)> = meta
        .layer_dims
        .windows(2)
        .map(|w| (Array2::zeros((w[1], w[0])), Array1::zeros(w[1])))
        .collect();
    let mut mlp = MlpParams {
        layers,
        omega0: meta.omega0,
    };
    let params = take_f32s(blob, at, mlp.param_count())?;
    mlp.set_params(&params)?;
    NeuralField::new(encoding, mlp, meta.kind, domain)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let header: CkptHeader =
        serde_json::from_value(crate::volume::read_container_header(&mut f, CKPT_MAGIC)?)
            .map_err(|e| Error::format(format!("bad checkpoint header: {e}")))?;
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    let domain = GridDomain::new(header.domain_dims);
    let mut at = 0usize;

    let model = if header.grid {
        let vals = take_f32s(&blob, &mut at, 3 * domain.voxel_count())?;
        TrainedModel::Grid(domain, displacements_from(&vals))
    } else {
        match header.fields.len() {
            1 => TrainedModel::Single(
                read_field(&header.fields[0], domain, &blob, &mut at)?,
                header.ode,
            ),
            2 => {
                let nf1 = read_field(&header.fields[0], domain, &blob, &mut at)?;
                let nf2 = read_field(&header.fields[1], domain, &blob, &mut at)?;
                TrainedModel::Hybrid(nf1, nf2, header.ode)
            }
            n => {
                return Err(Error::format(format!(
                    "checkpoint must hold 1 or 2 fields, found {n}"
                )))
            }
        }
    };
    if at != blob.len() {
        return Err(Error::format(format!(
            "checkpoint blob length mismatch: {} trailing bytes",
            blob.len() - at
        )));
    }
    Ok(Checkpoint {
        method: header.method,
        seed: header.seed,
        iteration: header.iteration,
        domain,
        ode: header.ode,
        model,
    })
}
