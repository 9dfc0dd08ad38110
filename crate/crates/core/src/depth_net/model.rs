use eta_tensor::{kaiming_normal, Graph, NormStats, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::DepthArch;
use crate::error::{Error, Result};

pub(crate) const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch when folding statistics into the running ones.
pub const NORM_MOMENTUM: f64 = 0.1;
/// Smallest depth the head can emit, as a fraction of `depth_scale`.
const DEPTH_FLOOR: f64 = 1e-4;

const ADAPTER_SEED_SALT: u64 = 0xada9_7e55;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Use running statistics.
    Frozen,
    /// Normalize with statistics of the current batch.
    Batch,
}

#[derive(Clone, Debug)]
pub struct NormState<T> {
    pub names: Vec<String>,
    pub mean: Vec<Vec<T>>,
    pub var: Vec<Vec<T>>,
    pub mode: NormMode,
}

impl<T: Scalar> NormState<T> {
    /// Folds batch statistics into the running ones. `batch_var` is the
    /// biased estimate; it is rescaled by `m / (m - 1)` before mixing.
    pub fn commit(&mut self, batch: &[BatchStats<T>], momentum: f64) {
        assert_eq!(batch.len(), self.mean.len());
        let a = T::lit(momentum);
        let keep = T::one() - a;
        for (i, s) in batch.iter().enumerate() {
            let m = s.count as f64;
            let corr = T::lit(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
            for c in 0..s.mean.len() {
                self.mean[i][c] = keep * self.mean[i][c] + a * s.mean[c];
                self.var[i][c] = keep * self.var[i][c] + a * s.var[c] * corr;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> NormState<U> {
        let cv = |v: &Vec<Vec<T>>| {
            v.iter()
                .map(|x| x.iter().map(|&y| U::lit(y.to_f64().unwrap())).collect())
                .collect()
        };
        NormState {
            names: self.names.clone(),
            mean: cv(&self.mean),
            var: cv(&self.var),
            mode: self.mode,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel that produced the statistics.
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    w: usize,
    gamma: usize,
    beta: usize,
    norm: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    img: Vec<ConvBn>,
    sp: Vec<ConvBn>,
    fuse: ConvBn,
    dec: Vec<ConvBn>,
    head_w: usize,
    head_b: usize,
}

/// Adaptation bottleneck parameters, indices into `psi`.
const PSI_DOWN_W: usize = 0;
const PSI_DOWN_B: usize = 1;
const PSI_UP_W: usize = 2;
const PSI_UP_B: usize = 3;

#[derive(Clone, Debug)]
pub struct DepthModel<T> {
    pub arch: DepthArch,
    pub theta: ParamStore<T>,
    pub psi: Option<ParamStore<T>>,
    pub norm: NormState<T>,
    /// Seed of the supervised run that produced `theta`, if any.
    pub train_seed: Option<u64>,
    layout: Layout,
}

/// Which parameters get gradients and how normalization behaves during a
/// graph forward.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts {
    pub norm: NormMode,
    pub grad_theta: bool,
    pub grad_psi: bool,
}

impl ForwardOpts {
    pub fn inference(norm: NormMode) -> Self {
        Self { norm, grad_theta: false, grad_psi: false }
    }
}

pub struct Forward<T> {
    pub depth: Var,
    pub theta: Vec<Var>,
    pub psi: Vec<Var>,
    /// Filled when normalization ran in batch mode.
    pub batch_stats: Vec<BatchStats<T>>,
}

fn conv_bn<T: Scalar>(
    p: &mut ParamStore<T>,
    names: &mut Vec<String>,
    name: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut ChaCha8Rng,
) -> ConvBn {
    let w = p.push(format!("{name}.conv.w"), kaiming_normal(&[c_out, c_in, 3, 3], 2f64.sqrt(), rng));
    let gamma = p.push(format!("{name}.bn.gamma"), Tensor::full(&[c_out], T::one()));
    let beta = p.push(format!("{name}.bn.beta"), Tensor::zeros(&[c_out]));
    names.push(name.to_string());
    ConvBn { w, gamma, beta, norm: names.len() - 1 }
}

fn build_theta<T: Scalar>(arch: &DepthArch) -> (ParamStore<T>, Vec<String>, Vec<usize>, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
    let mut p = ParamStore::new();
    let mut names = Vec::new();
    let s = arch.stages();
    let mut img = Vec::with_capacity(s);
    let mut c = 3;
    for (i, &w) in arch.image_widths.iter().enumerate() {
        img.push(conv_bn(&mut p, &mut names, &format!("img{i}"), c, w, &mut rng));
        c = w;
    }
    let mut sp = Vec::with_capacity(s);
    let mut c = 2;
    for (i, &w) in arch.sparse_widths.iter().enumerate() {
        sp.push(conv_bn(&mut p, &mut names, &format!("sp{i}"), c, w, &mut rng));
        c = w;
    }
    let fuse_in = arch.image_widths[s - 1] + arch.sparse_widths[s - 1];
    let fuse = conv_bn(&mut p, &mut names, "fuse", fuse_in, arch.fusion_width, &mut rng);
    let mut dec = Vec::with_capacity(s - 1);
    let mut c = arch.fusion_width;
    for (k, &w) in arch.decoder_widths.iter().enumerate() {
        let level = s - 2 - k;
        let c_in = c + arch.image_widths[level] + arch.sparse_widths[level];
        dec.push(conv_bn(&mut p, &mut names, &format!("dec{k}"), c_in, w, &mut rng));
        c = w;
    }
    let head_w = p.push("head.conv.w", kaiming_normal(&[1, c, 3, 3], 1.0, &mut rng));
    let head_b = p.push("head.conv.b", Tensor::zeros(&[1]));
    let mut widths: Vec<usize> = Vec::new();
    widths.extend(&arch.image_widths);
    widths.extend(&arch.sparse_widths);
    widths.push(arch.fusion_width);
    widths.extend(&arch.decoder_widths);
    (p, names, widths, Layout { img, sp, fuse, dec, head_w, head_b })
}

/// Fresh, unadapted model with deterministic initialization from `arch.seed`.
pub fn build_model<T: Scalar>(arch: &DepthArch) -> Result<DepthModel<T>> {
    arch.validate()?;
    let (theta, names, widths, layout) = build_theta(arch);
    Ok(DepthModel {
        arch: arch.clone(),
        theta,
        psi: None,
        norm: NormState {
            names,
            mean: widths.iter().map(|&c| vec![T::zero(); c]).collect(),
            var: widths.iter().map(|&c| vec![T::one(); c]).collect(),
            mode: NormMode::Frozen,
        },
        train_seed: None,
        layout,
    })
}

/// Parameter names split by whether adaptation may change them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub adaptable: Vec<String>,
    pub frozen: Vec<String>,
}

impl<T: Scalar> DepthModel<T> {
    pub fn has_adapter(&self) -> bool {
        self.psi.is_some()
    }

    /// Channels at the output of the adaptation slot.
    fn slot_channels(&self) -> usize {
        self.arch.image_widths[self.arch.adapt_slot]
    }

    /// Adds a residual bottleneck after encoder stage `arch.adapt_slot`. The
    /// up-projection starts at zero so the model output does not change.
    pub fn insert_adaptation(&mut self) -> Result<()> {
        if self.psi.is_some() {
            return Err(Error::invalid("adaptation module is already inserted"));
        }
        let s = self.arch.stages();
        if self.arch.adapt_slot >= s {
            return Err(Error::invalid(format!(
                "adapt_slot {} is out of range, encoder has {s} stages",
                self.arch.adapt_slot
            )));
        }
        let c = self.slot_channels();
        let r = self.arch.adapter_width(c);
        let mut rng = ChaCha8Rng::seed_from_u64(self.arch.seed ^ ADAPTER_SEED_SALT);
        let mut psi = ParamStore::new();
        psi.push("adapt.down.w", kaiming_normal(&[r, c, 1, 1], 2f64.sqrt(), &mut rng));
        psi.push("adapt.down.b", Tensor::zeros(&[r]));
        psi.push("adapt.up.w", Tensor::zeros(&[c, r, 1, 1]));
        psi.push("adapt.up.b", Tensor::zeros(&[c]));
        self.psi = Some(psi);
        Ok(())
    }

    pub fn norm_stat_names(&self) -> Vec<String> {
        self.norm
            .names
            .iter()
            .flat_map(|n| [format!("{n}.bn.running_mean"), format!("{n}.bn.running_var")])
            .collect()
    }

    /// Every parameter and normalization statistic, in a fixed order.
    pub fn all_parameter_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.theta.names().to_vec();
        if let Some(p) = &self.psi {
            v.extend(p.names().iter().cloned());
        }
        v.extend(self.norm_stat_names());
        v
    }

    /// With `adapt_norm_stats`, running statistics count as adaptable; they
    /// are never touched by gradients either way.
    pub fn partition_parameters(&self, adapt_norm_stats: bool) -> Result<Partition> {
        let psi = self
            .psi
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no adaptation module"))?;
        let mut adaptable: Vec<String> = psi.names().to_vec();
        let mut frozen: Vec<String> = self.theta.names().to_vec();
        if adapt_norm_stats {
            adaptable.extend(self.norm_stat_names());
        } else {
            frozen.extend(self.norm_stat_names());
        }
        Ok(Partition { adaptable, frozen })
    }

    pub fn cast<U: Scalar>(&self) -> DepthModel<U> {
        DepthModel {
            arch: self.arch.clone(),
            theta: self.theta.cast(),
            psi: self.psi.as_ref().map(|p| p.cast()),
            norm: self.norm.cast(),
            train_seed: self.train_seed,
            layout: self.layout.clone(),
        }
    }

    pub fn check_input(&self, image: &Tensor<T>, sparse: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
        if image.shape().len() != 4 || image.shape()[1] != 3 {
            return Err(Error::invalid(format!("image must be [N,3,H,W], got {:?}", image.shape())));
        }
        let (n, _, h, w) = image.dims4();
        let want = [n, 1, h, w];
        if sparse.shape() != want || mask.shape() != want {
            return Err(Error::invalid(format!(
                "sparse depth and mask must be {want:?}, got {:?} and {:?}",
                sparse.shape(),
                mask.shape()
            )));
        }
        let f = self.arch.downsample_factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} is not divisible by {f}; pad to {}x{}",
                h.div_ceil(f).max(1) * f,
                w.div_ceil(f).max(1) * f
            )));
        }
        Ok(())
    }

    fn stage(
        &self,
        g: &mut Graph<T>,
        x: Var,
        l: ConvBn,
        stride: usize,
        th: &[Var],
        opts: ForwardOpts,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Var {
        let y = g.conv2d(x, th[l.w], None, stride, 1);
        let ns = match opts.norm {
            NormMode::Batch => NormStats::Batch,
            NormMode::Frozen => NormStats::Fixed {
                mean: self.norm.mean[l.norm].clone(),
                var: self.norm.var[l.norm].clone(),
            },
        };
        let (n, _, h, w) = g.value(y).dims4();
        let (y, mean, var) = g.batch_norm(y, th[l.gamma], th[l.beta], ns, T::lit(BN_EPS));
        if opts.norm == NormMode::Batch {
            stats.push(BatchStats { mean, var, count: n * h * w });
        }
        g.relu(y)
    }

    /// Builds the forward pass into `g`. Inputs are graph nodes so callers
    /// can request gradients with respect to them.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        image: Var,
        sparse: Var,
        mask: Var,
        opts: ForwardOpts,
    ) -> Result<Forward<T>> {
        self.check_input(g.value(image), g.value(sparse), g.value(mask))?;
        let th: Vec<Var> = self
            .theta
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), opts.grad_theta))
            .collect();
        let ps: Vec<Var> = self
            .psi
            .iter()
            .flat_map(|p| p.tensors())
            .map(|t| g.leaf(t.clone(), opts.grad_psi))
            .collect();
        let lay = &self.layout;
        let s = self.arch.stages();
        let mut stats = Vec::new();

        let mut x = image;
        let mut img_feats = Vec::with_capacity(s);
        for (i, &l) in lay.img.iter().enumerate() {
            x = self.stage(g, x, l, if i == 0 { 1 } else { 2 }, &th, opts, &mut stats);
            if i == self.arch.adapt_slot && !ps.is_empty() {
                let h = g.conv2d(x, ps[PSI_DOWN_W], Some(ps[PSI_DOWN_B]), 1, 0);
                let h = g.relu(h);
                let h = g.conv2d(h, ps[PSI_UP_W], Some(ps[PSI_UP_B]), 1, 0);
                x = g.add(x, h);
            }
            img_feats.push(x);
        }

        let inv = T::lit(1.0 / self.arch.depth_scale);
        let zs = g.affine(sparse, inv, T::zero());
        let mut x = g.concat(&[zs, mask]);
        let mut sp_feats = Vec::with_capacity(s);
        for (i, &l) in lay.sp.iter().enumerate() {
            x = self.stage(g, x, l, if i == 0 { 1 } else { 2 }, &th, opts, &mut stats);
            sp_feats.push(x);
        }

        let y = g.concat(&[img_feats[s - 1], sp_feats[s - 1]]);
        let mut y = self.stage(g, y, lay.fuse, 1, &th, opts, &mut stats);
        for (k, &l) in lay.dec.iter().enumerate() {
            let level = s - 2 - k;
            let up = g.upsample2(y);
            let cat = g.concat(&[up, img_feats[level], sp_feats[level]]);
            y = self.stage(g, cat, l, 1, &th, opts, &mut stats);
        }
        let h = g.conv2d(y, th[lay.head_w], Some(th[lay.head_b]), 1, 1);
        let h = g.softplus(h);
        let scale = self.arch.depth_scale;
        let depth = g.affine(h, T::lit(scale / 4.0), T::lit(scale * DEPTH_FLOOR));
        Ok(Forward { depth, theta: th, psi: ps, batch_stats: stats })
    }

    /// Dense depth `[N,1,H,W]` in meters, normalizing in the model's mode.
    pub fn predict(&self, image: &Tensor<T>, sparse: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (i, z, m) = (g.constant(image.clone()), g.constant(sparse.clone()), g.constant(mask.clone()));
        let f = self.forward(&mut g, i, z, m, ForwardOpts::inference(self.norm.mode))?;
        Ok(g.value(f.depth).clone())
    }

    pub fn arch_json(&self) -> String {
        serde_json::to_string(&self.arch).expect("arch serializes")
    }

    /// Identity of the source weights; unaffected by the adaptation module,
    /// normalization state and scalar type.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.arch_json().as_bytes());
        for (name, t) in self.theta.iter() {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_f64().unwrap().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
