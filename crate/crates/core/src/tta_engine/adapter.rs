use std::time::Instant;

use eta_tensor::{Adam, Graph, Scalar, Tensor, Var};
use serde::Serialize;

use super::config::{AdaptConfig, NormPolicy, OptimizerStatePolicy, EMA_RATE};
use super::losses::{frames_without_anchors, smooth_term, sparse_term};
use crate::data_synth::Batch;
use crate::depth_net::{DepthModel, ForwardOpts, NormMode};
use crate::energy_model::{masked_sparse, EnergyGrid, EnergyModel};
use crate::error::{Error, Result};

/// Loss terms from one evaluation; `None` marks a term that was not
/// computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossTerms {
    pub l_energy: Option<f64>,
    pub l_sparse: Option<f64>,
    pub l_smooth: Option<f64>,
    pub l_adapt: f64,
}

#[derive(Clone, Debug)]
pub struct IterLoss {
    pub iter: usize,
    pub terms: LossTerms,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutcome<T> {
    /// Losses before each of the `inner_iters` updates.
    pub iters: Vec<IterLoss>,
    /// Prediction from the first iteration's forward, before any update on
    /// this batch.
    pub pre: Tensor<T>,
    pub pre_energy: Option<Vec<EnergyGrid>>,
}

#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub pred: Tensor<T>,
    pub terms: LossTerms,
    pub energy: Option<Vec<EnergyGrid>>,
    pub wall_ms: f64,
}

/// Owns a depth model during test-time adaptation. Only ψ (and, under the
/// `ema` policy, running normalization statistics) ever change.
pub struct Adapter<T> {
    model: DepthModel<T>,
    energy: Option<EnergyModel<T>>,
    cfg: AdaptConfig,
    opt: Adam<T>,
}

struct Built<T> {
    g: Graph<T>,
    depth: Var,
    psi: Vec<Var>,
    loss: Var,
    terms: LossTerms,
    energy: Option<Vec<EnergyGrid>>,
}

impl<T: Scalar> Adapter<T> {
    /// `energy` is required when `w_energy > 0` and must be bound to `model`.
    pub fn new(model: DepthModel<T>, energy: Option<EnergyModel<T>>, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        if model.psi.is_none() {
            return Err(Error::invalid("insert the adaptation module before adapting"));
        }
        if cfg.w_energy > 0.0 && energy.is_none() {
            return Err(Error::Config {
                key: "w_energy".into(),
                message: "is positive but no energy model was supplied".into(),
            });
        }
        if let Some(e) = &energy {
            e.check_binding(&model)?;
        }
        let opt = Adam::new(cfg.learning_rate);
        Ok(Self { model, energy, cfg, opt })
    }

    /// The comparator without the energy term.
    pub fn baseline(model: DepthModel<T>, cfg: AdaptConfig) -> Result<Self> {
        Self::new(model, None, AdaptConfig { w_energy: 0.0, ..cfg })
    }

    pub fn model(&self) -> &DepthModel<T> {
        &self.model
    }

    pub fn energy(&self) -> Option<&EnergyModel<T>> {
        self.energy.as_ref()
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn into_model(self) -> DepthModel<T> {
        self.model
    }

    fn norm_mode(&self) -> NormMode {
        match self.cfg.norm_policy {
            NormPolicy::Batch => NormMode::Batch,
            NormPolicy::Frozen | NormPolicy::Ema => NormMode::Frozen,
        }
    }

    /// Forward pass plus every loss term whose weight is positive. ℓ_z and
    /// ℓ_s are also computed with zero weight when possible, for logging.
    fn build(&self, batch: &Batch<T>, grad: bool, with_energy: bool) -> Result<Built<T>> {
        let cfg = &self.cfg;
        let mut g = Graph::new();
        let i = g.constant(batch.image.clone());
        let z = g.constant(batch.sparse.clone());
        let m = g.constant(batch.sparse_mask.clone());
        let opts = ForwardOpts { norm: self.norm_mode(), grad_theta: false, grad_psi: grad };
        let f = self.model.forward(&mut g, i, z, m, opts)?;

        let mut weighted = Vec::with_capacity(3);
        let mut energy = None;
        let l_energy = match &self.energy {
            Some(e) if with_energy || cfg.w_energy > 0.0 => {
                let zs = masked_sparse(&batch.sparse, &batch.sparse_mask);
                let s = g.constant(zs);
                let ef = e.forward(&mut g, f.depth, s, false)?;
                let l = g.energy_loss(ef.energy, cfg.energy_clamp);
                energy = Some(grids_of(g.value(ef.energy), e, batch)?);
                if cfg.w_energy > 0.0 {
                    weighted.push((l, T::lit(cfg.w_energy)));
                }
                Some(l)
            }
            _ => None,
        };
        let l_sparse = if cfg.w_sparse > 0.0 {
            let l = sparse_term(&mut g, f.depth, &batch.sparse, &batch.sparse_mask, &batch.frame_ids)?;
            weighted.push((l, T::lit(cfg.w_sparse)));
            Some(l)
        } else if frames_without_anchors(&batch.sparse_mask).is_empty() {
            Some(g.masked_l1(f.depth, &batch.sparse, &batch.sparse_mask))
        } else {
            None
        };
        let l_smooth = smooth_term(&mut g, f.depth, &batch.image);
        if cfg.w_smooth > 0.0 {
            weighted.push((l_smooth, T::lit(cfg.w_smooth)));
        }
        let loss = g.weighted_sum(&weighted);
        let val = |v: Option<Var>| v.map(|v| g.value(v).item().to_f64().unwrap());
        let terms = LossTerms {
            l_energy: val(l_energy),
            l_sparse: val(l_sparse),
            l_smooth: val(Some(l_smooth)),
            l_adapt: g.value(loss).item().to_f64().unwrap(),
        };
        if !terms.l_adapt.is_finite() {
            return Err(Error::NonFinite(format!(
                "adaptation loss on batch starting at `{}`",
                batch.frame_ids.first().map(String::as_str).unwrap_or("")
            )));
        }
        Ok(Built { depth: f.depth, psi: f.psi, loss, terms, energy, g })
    }

    /// Runs `inner_iters` updates of ψ on one batch. Ground truth in the
    /// batch is ignored.
    pub fn step(&mut self, batch: &Batch<T>) -> Result<StepOutcome<T>> {
        if self.cfg.optimizer_state_policy == OptimizerStatePolicy::ResetPerBatch {
            self.opt.reset();
        }
        if self.cfg.norm_policy == NormPolicy::Ema {
            let mut g = Graph::new();
            let (i, z, m) = (
                g.constant(batch.image.clone()),
                g.constant(batch.sparse.clone()),
                g.constant(batch.sparse_mask.clone()),
            );
            let f = self.model.forward(&mut g, i, z, m, ForwardOpts::inference(NormMode::Batch))?;
            self.model.norm.commit(&f.batch_stats, EMA_RATE);
        }
        let mut iters = Vec::with_capacity(self.cfg.inner_iters);
        let mut pre = None;
        let mut pre_energy = None;
        for it in 0..self.cfg.inner_iters {
            let t0 = Instant::now();
            let b = self.build(batch, true, it == 0)?;
            let grads = b.g.backward(b.loss);
            let gr: Vec<Option<&Tensor<T>>> = b.psi.iter().map(|&v| grads.get(v)).collect();
            let psi = self.model.psi.as_mut().expect("checked at construction");
            self.opt.step(&mut psi.tensors_mut(), &gr);
            if it == 0 {
                pre = Some(b.g.value(b.depth).clone());
                pre_energy = b.energy;
            }
            iters.push(IterLoss { iter: it, terms: b.terms, wall_ms: t0.elapsed().as_secs_f64() * 1e3 });
        }
        Ok(StepOutcome { iters, pre: pre.expect("inner_iters >= 1"), pre_energy })
    }

    /// Prediction and losses with the current ψ, without updating anything.
    pub fn evaluate(&self, batch: &Batch<T>) -> Result<Evaluation<T>> {
        let t0 = Instant::now();
        let b = self.build(batch, false, true)?;
        Ok(Evaluation {
            pred: b.g.value(b.depth).clone(),
            terms: b.terms,
            energy: b.energy,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }
}

fn grids_of<T: Scalar>(e: &Tensor<T>, model: &EnergyModel<T>, batch: &Batch<T>) -> Result<Vec<EnergyGrid>> {
    let (n, _, rows, cols) = e.dims4();
    let (h, w) = batch.geometry();
    let tiles = model.arch.tiles(h, w)?;
    Ok((0..n)
        .map(|i| EnergyGrid {
            rows,
            cols,
            values: e.data()[i * rows * cols..(i + 1) * rows * cols].iter().map(|v| v.to_f64().unwrap()).collect(),
            tiles,
        })
        .collect())
}

/// One adaptation step (see [`Adapter::step`]).
pub fn adapt_step<T: Scalar>(adapter: &mut Adapter<T>, batch: &Batch<T>) -> Result<StepOutcome<T>> {
    adapter.step(batch)
}

/// Same as [`adapt_step`] but only for adapters without the energy term.
pub fn baseline_step<T: Scalar>(adapter: &mut Adapter<T>, batch: &Batch<T>) -> Result<StepOutcome<T>> {
    if adapter.cfg.w_energy != 0.0 {
        return Err(Error::invalid("baseline step requires w_energy = 0"));
    }
    adapter.step(batch)
}
