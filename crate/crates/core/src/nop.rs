//! Spectral neural operator surrogate for the Darcy solve, trained purely
//! through the weak-form residual of its own output.
//!
//! The network lifts (z, coordinates) pointwise into a channel space, applies
//! blocks of pointwise affine + truncated spectral convolution with SiLU
//! activations, projects back to one channel and multiplies by a sine mask
//! that vanishes identically on the boundary, so every prediction satisfies
//! the Dirichlet condition exactly.

use crate::calib::OptimState;
use crate::error::{Error, Result};
use crate::fem;
use crate::mesh::{Dim, Mesh};
use crate::randfield::{push_sample_with_table, NodalField, PriorSpec, SynthesisTable};
use crate::seeds::{rng_for, substream, Stream};
use crate::tape::{gradcheck, DarcyResidualCtx, NodeId, SpectralPlan, Tape, Tensor};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

/// Architecture of the operator network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnoConfig {
    pub dim: Dim,
    /// Mesh nodes per side the operator is configured for.
    pub n: usize,
    pub layers: usize,
    pub channels: usize,
    pub modes: usize,
}

impl FnoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.channels < 1 || self.modes < 1 || self.n < 3 {
            return Err(Error::invalid(
                "operator needs layers, channels, modes >= 1 and n >= 3",
            ));
        }
        Ok(())
    }

    pub fn mesh(&self) -> Mesh {
        Mesh { dim: self.dim, n: self.n }
    }

    /// Input features per grid point: the field value plus coordinates.
    pub fn feature_dim(&self) -> usize {
        1 + self.dim.as_usize()
    }

    fn grid_len(&self) -> usize {
        self.mesh().node_count()
    }
}

/// Shared per-configuration state: spectral plan, boundary mask, coordinate
/// feature rows.
#[derive(Debug)]
pub struct FnoContext {
    pub cfg: FnoConfig,
    pub plan: Arc<SpectralPlan>,
    pub mask: Arc<Tensor>,
    coord_rows: Vec<Vec<f64>>,
}

impl FnoContext {
    pub fn new(cfg: FnoConfig) -> Result<Self> {
        cfg.validate()?;
        let mesh = cfg.mesh();
        let plan = SpectralPlan::new(cfg.dim, cfg.n, cfg.modes);
        // sine mask with exact zeros on the boundary
        let mut mask = vec![0.0; mesh.node_count()];
        for (i, m) in mask.iter_mut().enumerate() {
            if !mesh.is_boundary(i) {
                let (x1, x2) = mesh.coords(i);
                *m = match cfg.dim {
                    Dim::One => (PI * x1).sin(),
                    Dim::Two => (PI * x1).sin() * (PI * x2).sin(),
                };
            }
        }
        let mask_shape = match cfg.dim {
            Dim::One => vec![cfg.n],
            Dim::Two => vec![cfg.n, cfg.n],
        };
        let coord_rows = match cfg.dim {
            Dim::One => vec![(0..mesh.node_count()).map(|i| mesh.coords(i).0).collect()],
            Dim::Two => vec![
                (0..mesh.node_count()).map(|i| mesh.coords(i).0).collect(),
                (0..mesh.node_count()).map(|i| mesh.coords(i).1).collect(),
            ],
        };
        Ok(FnoContext {
            cfg,
            plan,
            mask: Arc::new(Tensor::new(mask_shape, mask)),
            coord_rows,
        })
    }

    /// Input tensor [features, grid…] for one coefficient field.
    pub fn features(&self, z: &NodalField) -> Result<Tensor> {
        if z.mesh != self.cfg.mesh() {
            return Err(Error::shape("field mesh does not match operator config"));
        }
        let g = self.cfg.grid_len();
        let f = self.cfg.feature_dim();
        let mut data = Vec::with_capacity(f * g);
        data.extend_from_slice(&z.values);
        for row in &self.coord_rows {
            data.extend_from_slice(row);
        }
        let mut shape = vec![f];
        shape.extend(match self.cfg.dim {
            Dim::One => vec![self.cfg.n],
            Dim::Two => vec![self.cfg.n, self.cfg.n],
        });
        Ok(Tensor::new(shape, data))
    }
}

/// All weights of the operator network in a fixed flat order:
/// lift (w, b), per layer (spectral w, pointwise w, pointwise b),
/// projection (w, b).
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorParams {
    pub cfg: FnoConfig,
    pub tensors: Vec<Tensor>,
}

/// Uniform init with spectral weights scaled down by the retained mode count.
pub const INIT_SCHEME: &str =
    "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); spectral uniform(+-1/(channels*mode_slots))";

impl OperatorParams {
    /// Tensor names and shapes in storage order.
    pub fn layout(cfg: &FnoConfig) -> Result<Vec<(String, Vec<usize>)>> {
        cfg.validate()?;
        let c = cfg.channels;
        let slots = SpectralPlan::new(cfg.dim, cfg.n, cfg.modes).mode_slots();
        let mut out = vec![
            ("lift_w".to_string(), vec![c, cfg.feature_dim()]),
            ("lift_b".to_string(), vec![c]),
        ];
        for l in 0..cfg.layers {
            out.push((format!("spec_w_{l}"), vec![slots, c, c, 2]));
            out.push((format!("point_w_{l}"), vec![c, c]));
            out.push((format!("point_b_{l}"), vec![c]));
        }
        out.push(("proj_w".to_string(), vec![1, c]));
        out.push(("proj_b".to_string(), vec![1]));
        Ok(out)
    }

    pub fn zeros(cfg: FnoConfig) -> Result<Self> {
        let tensors = Self::layout(&cfg)?
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(shape))
            .collect();
        Ok(OperatorParams { cfg, tensors })
    }

    pub fn random(cfg: FnoConfig, seed: u64) -> Result<Self> {
        let layout = Self::layout(&cfg)?;
        let slots = SpectralPlan::new(cfg.dim, cfg.n, cfg.modes).mode_slots();
        let spec_scale = 1.0 / (cfg.channels * slots) as f64;
        let mut rng = rng_for(seed, Stream::InitOperator, 0);
        let tensors = layout
            .into_iter()
            .map(|(name, shape)| {
                let bound = if name.starts_with("spec_w") {
                    spec_scale
                } else if shape.len() == 1 {
                    // biases start at zero
                    0.0
                } else {
                    // fan-in is the trailing axis of the weight matrix
                    1.0 / (shape[1] as f64).sqrt()
                };
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        if bound == 0.0 {
                            0.0
                        } else {
                            rng.gen_range(-bound..bound)
                        }
                    })
                    .collect();
                Tensor::new(shape, data)
            })
            .collect();
        Ok(OperatorParams { cfg, tensors })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn from_flat(cfg: FnoConfig, flat: &[f64]) -> Result<Self> {
        let layout = Self::layout(&cfg)?;
        let mut tensors = Vec::with_capacity(layout.len());
        let mut off = 0;
        for (_, shape) in layout {
            let len: usize = shape.iter().product();
            if off + len > flat.len() {
                return Err(Error::shape("flat parameter vector is too short"));
            }
            tensors.push(Tensor::new(shape, flat[off..off + len].to_vec()));
            off += len;
        }
        if off != flat.len() {
            return Err(Error::shape("flat parameter vector is too long"));
        }
        Ok(OperatorParams { cfg, tensors })
    }

    /// Write the weights as a flat little-endian f64 blob plus a JSON sidecar
    /// describing the architecture and tensor shapes.
    pub fn save(&self, blob_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.param_count() * 8);
        for t in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(blob_path, bytes)?;
        let layout = Self::layout(&self.cfg)?;
        let mut offset = 0usize;
        let tensors: Vec<serde_json::Value> = layout
            .iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let v = serde_json::json!({ "name": name, "shape": shape, "offset": offset });
                offset += len;
                v
            })
            .collect();
        let sidecar = serde_json::json!({
            "version": 1,
            "config": self.cfg,
            "total_len": offset,
            "init_scheme": INIT_SCHEME,
            "tensors": tensors,
        });
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(blob_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
        let cfg: FnoConfig = serde_json::from_value(sidecar["config"].clone())?;
        let bytes = std::fs::read(blob_path)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::invalid("operator blob length is not a multiple of 8"));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_flat(cfg, &flat)
    }
}

fn forward_on_tape(
    tape: &mut Tape,
    ids: &[NodeId],
    feats: NodeId,
    ctx: &FnoContext,
) -> NodeId {
    let lift = tape.channel_contract(ids[0], feats);
    let mut h = tape.bias_add(lift, ids[1]);
    for l in 0..ctx.cfg.layers {
        let spec_w = ids[2 + 3 * l];
        let point_w = ids[3 + 3 * l];
        let point_b = ids[4 + 3 * l];
        let coeff = tape.spectral_fwd(h, ctx.plan.clone());
        let mixed = tape.mode_mul(spec_w, coeff);
        let spec = tape.spectral_inv(mixed, ctx.plan.clone());
        let lin = tape.channel_contract(point_w, h);
        let lin = tape.bias_add(lin, point_b);
        let sum = tape.add(lin, spec);
        h = tape.silu(sum);
    }
    let proj = tape.channel_contract(ids[ids.len() - 2], h);
    let proj = tape.bias_add(proj, ids[ids.len() - 1]);
    tape.mask_mul(proj, ctx.mask.clone())
}

/// Operator prediction for one coefficient field; vanishes on the boundary
/// for any weights.
pub fn fno_forward(params: &OperatorParams, z: &NodalField, ctx: &FnoContext) -> Result<NodalField> {
    if params.cfg != ctx.cfg {
        return Err(Error::shape("params and context configs differ"));
    }
    let feats = ctx.features(z)?;
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let f_id = tape.leaf(feats);
    let out = forward_on_tape(&mut tape, &ids, f_id, ctx);
    NodalField::new(z.mesh, tape.value(out).data().to_vec())
}

/// Value of the residual loss together with the per-sample squared norms.
#[derive(Debug, Clone)]
pub struct ResidualBatchLoss {
    pub loss: f64,
    pub per_sample: Vec<f64>,
}

fn sample_graph(
    params: &OperatorParams,
    ctx: &FnoContext,
    z: &NodalField,
    load: &[f64],
) -> Result<(Tape, Vec<NodeId>, NodeId)> {
    let feats = ctx.features(z)?;
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let f_id = tape.leaf(feats);
    let u_hat = forward_on_tape(&mut tape, &ids, f_id, ctx);
    let res_ctx = DarcyResidualCtx::new(z.mesh, z.values.clone(), load.to_vec());
    let r = tape.darcy_residual(u_hat, res_ctx);
    let d_o = z.mesh.interior_count() as f64;
    let msq = tape.mean_sq(r);
    let loss = tape.scale(msq, d_o); // ‖r‖² = d_o · mean(r²)
    Ok((tape, ids, loss))
}

/// Residual loss: mean over the batch of ‖interior residual‖²₂ with
/// u replaced by the operator prediction.
pub fn residual_loss_j4(
    params: &OperatorParams,
    z_batch: &[NodalField],
    f: &NodalField,
    ctx: &FnoContext,
) -> Result<ResidualBatchLoss> {
    residual_loss_j4_impl(params, z_batch, f, ctx, false).map(|(l, _)| l)
}

/// As [`residual_loss_j4`], also returning the flat gradient with respect to
/// every operator weight.
pub fn residual_loss_j4_grad(
    params: &OperatorParams,
    z_batch: &[NodalField],
    f: &NodalField,
    ctx: &FnoContext,
) -> Result<(ResidualBatchLoss, Vec<f64>)> {
    let (l, g) = residual_loss_j4_impl(params, z_batch, f, ctx, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn residual_loss_j4_impl(
    params: &OperatorParams,
    z_batch: &[NodalField],
    f: &NodalField,
    ctx: &FnoContext,
    with_grad: bool,
) -> Result<(ResidualBatchLoss, Option<Vec<f64>>)> {
    if z_batch.is_empty() {
        return Err(Error::invalid("residual loss needs a nonempty batch"));
    }
    let load = fem::load_vector(f);
    let n_r = z_batch.len() as f64;
    let per: Vec<(f64, Option<Vec<f64>>)> = z_batch
        .par_iter()
        .map(|z| -> Result<(f64, Option<Vec<f64>>)> {
            let (tape, ids, loss_id) = sample_graph(params, ctx, z, &load)?;
            let value = tape.value(loss_id).scalar_value();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: "operator residual loss".into(),
                    last_alpha: vec![],
                });
            }
            if !with_grad {
                return Ok((value, None));
            }
            let mut adj = tape.backward(loss_id)?;
            let mut flat = Vec::with_capacity(params.param_count());
            for (&id, t) in ids.iter().zip(&params.tensors) {
                flat.extend_from_slice(adj.take_or_zeros(id, t.shape()).data());
            }
            Ok((value, Some(flat)))
        })
        .collect::<Result<Vec<_>>>()?;

    let per_sample: Vec<f64> = per.iter().map(|(v, _)| *v).collect();
    let loss = per_sample.iter().sum::<f64>() / n_r;
    let grad = if with_grad {
        let mut acc = vec![0.0; params.param_count()];
        for (_, g) in &per {
            for (a, b) in acc.iter_mut().zip(g.as_ref().unwrap()) {
                *a += b / n_r;
            }
        }
        Some(acc)
    } else {
        None
    };
    Ok((ResidualBatchLoss { loss, per_sample }, grad))
}

/// One inner optimization run: `l_steps` optimizer updates on the operator
/// weights against the residual loss, drawing `n_r` prior samples per step
/// (or one fixed pool when `fixed_pool` is set). Deterministic per seed
/// block; returns the per-step loss trace.
#[allow(clippy::too_many_arguments)]
pub fn inner_loop(
    params: &mut OperatorParams,
    opt: &mut OptimState,
    spec: &PriorSpec,
    table: &SynthesisTable,
    f: &NodalField,
    ctx: &FnoContext,
    l_steps: usize,
    n_r: usize,
    seed_block: u64,
    fixed_pool: bool,
) -> Result<Vec<f64>> {
    if n_r < 1 {
        return Err(Error::invalid("inner loop needs n_r >= 1"));
    }
    let mut trace = Vec::with_capacity(l_steps);
    for l in 0..l_steps {
        let step_seed = substream(seed_block, Stream::Inner, if fixed_pool { 0 } else { l as u64 });
        let z_batch: Vec<NodalField> = (0..n_r)
            .into_par_iter()
            .map(|j| {
                push_sample_with_table(spec, substream(step_seed, Stream::Latent, j as u64), table)
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grad) = residual_loss_j4_grad(params, &z_batch, f, ctx)?;
        if !loss.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("inner loop step {l}"),
                last_alpha: vec![],
            });
        }
        trace.push(loss.loss);
        opt.step(&grad)?;
        *params = OperatorParams::from_flat(params.cfg, opt.iterate())?;
    }
    Ok(trace)
}

/// Mean relative L² error of the operator against the reference solver over
/// fresh draws from a prior; used to report surrogate fidelity.
pub fn surrogate_rel_l2(
    params: &OperatorParams,
    spec: &PriorSpec,
    table: &SynthesisTable,
    f: &NodalField,
    ctx: &FnoContext,
    n_draws: usize,
    seed: u64,
    tol: f64,
) -> Result<f64> {
    let errs: Vec<f64> = (0..n_draws)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let z = push_sample_with_table(spec, substream(seed, Stream::Eval, i as u64), table)?;
            let u_ref = fem::solve_darcy(&z, f, tol)?;
            let u_hat = fno_forward(params, &z, ctx)?;
            let mut num = 0.0;
            let mut den = 0.0;
            for (a, b) in u_hat.values.iter().zip(&u_ref.values) {
                num += (a - b) * (a - b);
                den += b * b;
            }
            Ok((num / den.max(1e-300)).sqrt())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / n_draws as f64)
}

/// Gradient check of the full residual-loss graph on a small configuration.
pub fn gradcheck_residual_loss(cfg: FnoConfig, n_r: usize, delta: f64, seed: u64) -> Result<f64> {
    let ctx = FnoContext::new(cfg)?;
    let mesh = cfg.mesh();
    let params = OperatorParams::random(cfg, seed)?;
    let spec = match cfg.dim {
        Dim::One => PriorSpec::level_set(false, 8.0, 1.0, 2.0, 4.0, 10.0, 6, 1, Dim::One)?,
        Dim::Two => PriorSpec::level_set(false, 5.0, 1.0, 2.0, 4.0, 5.0, 3, 3, Dim::Two)?,
    };
    let table = SynthesisTable::new(&spec, mesh)?;
    let z_batch: Vec<NodalField> = (0..n_r)
        .map(|j| push_sample_with_table(&spec, substream(seed, Stream::Latent, j as u64), &table))
        .collect::<Result<Vec<_>>>()?;
    let f = NodalField::constant(mesh, 10.0);
    let load = fem::load_vector(&f);
    let d_o = mesh.interior_count() as f64;
    let feats: Vec<Tensor> = z_batch
        .iter()
        .map(|z| ctx.features(z))
        .collect::<Result<Vec<_>>>()?;
    let res_ctxs: Vec<_> = z_batch
        .iter()
        .map(|z| DarcyResidualCtx::new(mesh, z.values.clone(), load.clone()))
        .collect();

    gradcheck(&params.tensors, delta, move |tape, ids| {
        let mut total: Option<NodeId> = None;
        for (ft, rc) in feats.iter().zip(&res_ctxs) {
            let f_id = tape.leaf(ft.clone());
            let u_hat = forward_on_tape(tape, ids, f_id, &ctx);
            let r = tape.darcy_residual(u_hat, rc.clone());
            let msq = tape.mean_sq(r);
            let li = tape.scale(msq, d_o);
            total = Some(match total {
                None => li,
                Some(t) => tape.add(t, li),
            });
        }
        tape.scale(total.unwrap(), 1.0 / n_r as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{LrSchedule, OptimState};
    use approx::assert_relative_eq;

    fn tiny_cfg() -> FnoConfig {
        FnoConfig {
            dim: Dim::One,
            n: 17,
            layers: 2,
            channels: 4,
            modes: 4,
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let cfg = tiny_cfg();
        let ctx = FnoContext::new(cfg).unwrap();
        let params = OperatorParams::zeros(cfg).unwrap();
        let z = NodalField::constant(cfg.mesh(), 1.5);
        let u = fno_forward(&params, &z, &ctx).unwrap();
        assert!(u.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boundary_is_exactly_zero_for_any_weights() {
        for dim_cfg in [
            tiny_cfg(),
            FnoConfig {
                dim: Dim::Two,
                n: 9,
                layers: 1,
                channels: 3,
                modes: 3,
            },
        ] {
            let ctx = FnoContext::new(dim_cfg).unwrap();
            let params = OperatorParams::random(dim_cfg, 3).unwrap();
            let mesh = dim_cfg.mesh();
            let z = crate::randfield::NodalField::from_fn(mesh, |x, y| 1.0 + x + y);
            let u = fno_forward(&params, &z, &ctx).unwrap();
            assert_eq!(u.values.len(), mesh.node_count());
            for i in 0..mesh.node_count() {
                if mesh.is_boundary(i) {
                    assert_eq!(u.values[i], 0.0);
                }
            }
            assert!(u.values.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn residual_loss_zero_weights_matches_load_norm() {
        // u_hat ≡ 0 leaves only the load term: 3 interior nodes × (h f)²
        let cfg = FnoConfig {
            dim: Dim::One,
            n: 5,
            layers: 1,
            channels: 2,
            modes: 2,
        };
        let ctx = FnoContext::new(cfg).unwrap();
        let mesh = cfg.mesh();
        let params = OperatorParams::zeros(cfg).unwrap();
        let f = NodalField::constant(mesh, 10.0);
        let z = NodalField::constant(mesh, 1.0);
        let loss = residual_loss_j4(&params, &[z.clone(), z], &f, &ctx).unwrap();
        for v in &loss.per_sample {
            assert_relative_eq!(*v, 18.75, max_relative = 1e-12);
        }
        assert_relative_eq!(loss.loss, 18.75, max_relative = 1e-12);
    }

    #[test]
    fn residual_loss_is_batch_order_invariant_and_matches_fem() {
        let cfg = tiny_cfg();
        let ctx = FnoContext::new(cfg).unwrap();
        let mesh = cfg.mesh();
        let params = OperatorParams::random(cfg, 9).unwrap();
        let f = NodalField::constant(mesh, 10.0);
        let spec =
            PriorSpec::level_set(false, 8.0, 1.0, 2.0, 4.0, 10.0, 6, 1, Dim::One).unwrap();
        let table = SynthesisTable::new(&spec, mesh).unwrap();
        let z1 = push_sample_with_table(&spec, 1, &table).unwrap();
        let z2 = push_sample_with_table(&spec, 2, &table).unwrap();
        let a = residual_loss_j4(&params, &[z1.clone(), z2.clone()], &f, &ctx).unwrap();
        let b = residual_loss_j4(&params, &[z2.clone(), z1.clone()], &f, &ctx).unwrap();
        assert_eq!(a.loss, b.loss);

        // the tape value agrees with the plain fem residual of the prediction
        let u_hat = fno_forward(&params, &z1, &ctx).unwrap();
        let r = fem::residual_1d(&z1, &u_hat, &f).unwrap();
        let norm_sq: f64 = r.iter().map(|v| v * v).sum();
        assert_relative_eq!(a.per_sample[0], norm_sq, max_relative = 1e-12);
    }

    #[test]
    fn inner_loop_zero_steps_is_identity() {
        let cfg = tiny_cfg();
        let ctx = FnoContext::new(cfg).unwrap();
        let mesh = cfg.mesh();
        let mut params = OperatorParams::random(cfg, 1).unwrap();
        let before = params.clone();
        let mut opt = OptimState::new_adam(params.flatten(), LrSchedule::constant(1e-3), false);
        let spec =
            PriorSpec::level_set(false, 8.0, 1.0, 2.0, 4.0, 10.0, 6, 1, Dim::One).unwrap();
        let table = SynthesisTable::new(&spec, mesh).unwrap();
        let f = NodalField::constant(mesh, 10.0);
        let trace =
            inner_loop(&mut params, &mut opt, &spec, &table, &f, &ctx, 0, 4, 7, false).unwrap();
        assert!(trace.is_empty());
        assert_eq!(params, before);
    }

    #[test]
    fn inner_loop_is_deterministic() {
        let cfg = tiny_cfg();
        let ctx = FnoContext::new(cfg).unwrap();
        let mesh = cfg.mesh();
        let spec =
            PriorSpec::level_set(false, 8.0, 1.0, 2.0, 4.0, 10.0, 6, 1, Dim::One).unwrap();
        let table = SynthesisTable::new(&spec, mesh).unwrap();
        let f = NodalField::constant(mesh, 10.0);
        let run = || {
            let mut params = OperatorParams::random(cfg, 1).unwrap();
            let mut opt =
                OptimState::new_adam(params.flatten(), LrSchedule::constant(1e-3), false);
            let trace =
                inner_loop(&mut params, &mut opt, &spec, &table, &f, &ctx, 5, 4, 7, false)
                    .unwrap();
            (params, trace)
        };
        let (p1, t1) = run();
        let (p2, t2) = run();
        assert_eq!(p1, p2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn training_on_fixed_pool_reduces_loss_tenfold() {
        let cfg = tiny_cfg();
        let ctx = FnoContext::new(cfg).unwrap();
        let mesh = cfg.mesh();
        let spec =
            PriorSpec::level_set(false, 8.0, 1.0, 2.0, 4.0, 10.0, 6, 1, Dim::One).unwrap();
        let table = SynthesisTable::new(&spec, mesh).unwrap();
        let f = NodalField::constant(mesh, 10.0);
        let mut params = OperatorParams::random(cfg, 2).unwrap();
        let mut opt = OptimState::new_adam(params.flatten(), LrSchedule::constant(3e-3), false);
        let trace =
            inner_loop(&mut params, &mut opt, &spec, &table, &f, &ctx, 200, 8, 3, true).unwrap();
        let first = trace[0];
        let last = *trace.last().unwrap();
        assert!(
            last <= first / 10.0,
            "loss went from {first} to {last} on a fixed pool"
        );
    }

    #[test]
    fn params_roundtrip_blob() {
        let cfg = tiny_cfg();
        let params = OperatorParams::random(cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let blob = dir.path().join("op.bin");
        let sidecar = dir.path().join("op.json");
        params.save(&blob, &sidecar).unwrap();
        let back = OperatorParams::load(&blob, &sidecar).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn residual_loss_gradcheck_small_config() {
        let cfg = tiny_cfg();
        let err = gradcheck_residual_loss(cfg, 2, 1e-4, 5).unwrap();
        assert!(err < 1e-4, "residual loss gradcheck err {err}");
    }
}
