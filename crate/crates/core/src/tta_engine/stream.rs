use std::collections::HashSet;
use std::path::Path;

use eta_tensor::Scalar;
use serde::Serialize;

use super::adapter::{Adapter, LossTerms};
use crate::data_synth::{Batch, Sample};
use crate::energy_model::EnergyGrid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// Evaluated before update `iter` of the batch.
    Iteration,
    /// Evaluated after all updates of the batch.
    Post,
}

#[derive(Clone, Debug, Serialize)]
pub struct LossRecord {
    pub batch: usize,
    /// Frame id, or ids joined with `+` for multi-frame batches.
    pub frame_id: String,
    /// `0..inner_iters` for updates, `inner_iters` for the post evaluation.
    pub iter: usize,
    pub kind: RecordKind,
    pub terms: LossTerms,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AdaptReport {
    pub inner_iters: usize,
    pub records: Vec<LossRecord>,
}

impl AdaptReport {
    pub fn iteration_count(&self) -> usize {
        self.records.iter().filter(|r| r.kind == RecordKind::Iteration).count()
    }

    /// Records compared without timing.
    pub fn same_losses(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.batch == b.batch && a.frame_id == b.frame_id && a.iter == b.iter && a.terms == b.terms
            })
    }

    /// One row per loss evaluation: frame_id, iter, l_e, l_z, l_s, l_adapt,
    /// wall_ms. Terms that were not computed are left empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["frame_id", "iter", "l_e", "l_z", "l_s", "l_adapt", "wall_ms"])
            .map_err(|e| csv_err(path, e))?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.frame_id.clone(),
                r.iter.to_string(),
                opt(r.terms.l_energy),
                opt(r.terms.l_sparse),
                opt(r.terms.l_smooth),
                format!("{:.9e}", r.terms.l_adapt),
                format!("{:.3}", r.wall_ms),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.to_path_buf(), message: e.to_string() }
}

/// Predictions for one frame, before and after adapting on its batch.
#[derive(Clone, Debug)]
pub struct FrameResult {
    pub frame_id: String,
    pub pre: Vec<f32>,
    pub post: Vec<f32>,
    pub pre_energy: Option<EnergyGrid>,
    pub post_energy: Option<EnergyGrid>,
}

#[derive(Clone, Debug, Default)]
pub struct StreamOutcome {
    pub frames: Vec<FrameResult>,
    pub report: AdaptReport,
}

struct OrderCheck<'a> {
    seen: HashSet<String>,
    expected: Option<&'a [String]>,
    last: Option<String>,
    pos: usize,
}

impl OrderCheck<'_> {
    fn admit(&mut self, id: &str) -> Result<()> {
        if !self.seen.insert(id.to_string()) {
            return Err(Error::StreamOrder(format!("frame `{id}` appears twice")));
        }
        match self.expected {
            Some(exp) => {
                let want = exp.get(self.pos).ok_or_else(|| {
                    Error::StreamOrder(format!("frame `{id}` is beyond the {} expected frames", exp.len()))
                })?;
                if want != id {
                    return Err(Error::StreamOrder(format!("expected frame `{want}` at position {}, got `{id}`", self.pos)));
                }
            }
            None => {
                if let Some(prev) = &self.last {
                    if id <= prev.as_str() {
                        return Err(Error::StreamOrder(format!("frame `{id}` arrives after `{prev}`")));
                    }
                }
            }
        }
        self.last = Some(id.to_string());
        self.pos += 1;
        Ok(())
    }
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32().unwrap()).collect()
}

/// Adapts on `frames` in a single pass. Each batch is predicted, adapted on
/// and re-predicted; earlier batches are never revisited. Without
/// `expected_order`, frame ids must increase strictly.
pub fn run_stream<T: Scalar, I>(adapter: &mut Adapter<T>, frames: I, expected_order: Option<&[String]>) -> Result<StreamOutcome>
where
    I: IntoIterator<Item = Result<Sample>>,
{
    let bs = adapter.config().batch_size;
    let mut out = StreamOutcome { frames: Vec::new(), report: AdaptReport { inner_iters: adapter.config().inner_iters, records: Vec::new() } };
    let mut check = OrderCheck { seen: HashSet::new(), expected: expected_order, last: None, pos: 0 };
    let mut pending: Vec<Sample> = Vec::with_capacity(bs);
    let mut batch_idx = 0;
    let mut iter = frames.into_iter();
    loop {
        let next = iter.next().transpose()?;
        if let Some(mut s) = next {
            check.admit(&s.frame_id)?;
            s.gt = None;
            pending.push(s);
            if pending.len() < bs {
                continue;
            }
        }
        if pending.is_empty() {
            break;
        }
        process(adapter, &pending, batch_idx, &mut out)?;
        pending.clear();
        batch_idx += 1;
    }
    if let Some(exp) = expected_order {
        if check.pos != exp.len() {
            return Err(Error::StreamOrder(format!("stream ended after {} of {} expected frames", check.pos, exp.len())));
        }
    }
    Ok(out)
}

fn process<T: Scalar>(adapter: &mut Adapter<T>, samples: &[Sample], batch_idx: usize, out: &mut StreamOutcome) -> Result<()> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch: Batch<T> = Batch::from_samples(&refs)?;
    let label = batch.frame_ids.join("+");
    let step = adapter.step(&batch)?;
    let post = adapter.evaluate(&batch)?;
    for it in &step.iters {
        out.report.records.push(LossRecord {
            batch: batch_idx,
            frame_id: label.clone(),
            iter: it.iter,
            kind: RecordKind::Iteration,
            terms: it.terms,
            wall_ms: it.wall_ms,
        });
    }
    out.report.records.push(LossRecord {
        batch: batch_idx,
        frame_id: label,
        iter: step.iters.len(),
        kind: RecordKind::Post,
        terms: post.terms,
        wall_ms: post.wall_ms,
    });
    for (i, id) in batch.frame_ids.iter().enumerate() {
        out.frames.push(FrameResult {
            frame_id: id.clone(),
            pre: to_f32(step.pre.batch_item(i).data()),
            post: to_f32(post.pred.batch_item(i).data()),
            pre_energy: step.pre_energy.as_ref().map(|g| g[i].clone()),
            post_energy: post.energy.as_ref().map(|g| g[i].clone()),
        });
    }
    Ok(())
}
