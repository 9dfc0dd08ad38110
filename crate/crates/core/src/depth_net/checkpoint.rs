use std::path::Path;

use eta_tensor::{ParamStore, Scalar, Tensor};
use serde_json::json;

use super::arch::DepthArch;
use super::model::{build_model, DepthModel, NormMode};
use crate::archive::{Archive, ArrayData};
use crate::error::{Error, Result};

pub const DEPTH_CHECKPOINT_KIND: &str = "depth_model";

fn push_store<T: Scalar>(ar: &mut Archive, prefix: &str, p: &ParamStore<T>) {
    for (name, t) in p.iter() {
        ar.push(&format!("{prefix}.{name}"), t.shape(), ArrayData::F64(t.to_f64_vec()));
    }
}

fn fill_store<T: Scalar>(ar: &Archive, prefix: &str, p: &mut ParamStore<T>, path: &Path) -> Result<()> {
    for i in 0..p.len() {
        let key = format!("{prefix}.{}", p.name(i));
        let (shape, v) = ar.float_array(&key, path)?;
        if shape != p.get(i).shape() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("array `{key}` has shape {shape:?}, architecture expects {:?}", p.get(i).shape()),
            });
        }
        *p.get_mut(i) = Tensor::from_vec(&shape, v.into_iter().map(T::lit).collect());
    }
    Ok(())
}

impl<T: Scalar> DepthModel<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ar = Archive::new(json!({
            "kind": DEPTH_CHECKPOINT_KIND,
            "arch": self.arch,
            "fingerprint": self.fingerprint(),
            "norm_mode": self.norm.mode,
            "has_adapter": self.has_adapter(),
            "train_seed": self.train_seed,
        }));
        push_store(&mut ar, "theta", &self.theta);
        if let Some(psi) = &self.psi {
            push_store(&mut ar, "psi", psi);
        }
        for (i, name) in self.norm.names.iter().enumerate() {
            let c = self.norm.mean[i].len();
            let conv = |v: &[T]| ArrayData::F64(v.iter().map(|x| x.to_f64().unwrap()).collect());
            ar.push(&format!("norm.{name}.mean"), &[c], conv(&self.norm.mean[i]));
            ar.push(&format!("norm.{name}.var"), &[c], conv(&self.norm.var[i]));
        }
        ar.write(path)
    }

    /// Loads a checkpoint. With `expected` set, the stored architecture must
    /// match it exactly. The stored fingerprint is always re-verified.
    pub fn load(path: &Path, expected: Option<&DepthArch>) -> Result<Self> {
        let ar = Archive::read(path)?;
        let fmt = |m: String| Error::Format { path: path.to_path_buf(), message: m };
        let h = &ar.header;
        if h["kind"] != DEPTH_CHECKPOINT_KIND {
            return Err(fmt(format!("not a depth model checkpoint (kind {})", h["kind"])));
        }
        let arch: DepthArch =
            serde_json::from_value(h["arch"].clone()).map_err(|e| fmt(format!("bad architecture: {e}")))?;
        if let Some(want) = expected {
            if want != &arch {
                return Err(Error::InvalidInput(format!(
                    "checkpoint {} has architecture {}, expected {}",
                    path.display(),
                    serde_json::to_string(&arch).unwrap(),
                    serde_json::to_string(want).unwrap()
                )));
            }
        }
        let mut m: DepthModel<T> = build_model(&arch)?;
        fill_store(&ar, "theta", &mut m.theta, path)?;
        if h["has_adapter"] == true {
            m.insert_adaptation()?;
            fill_store(&ar, "psi", m.psi.as_mut().unwrap(), path)?;
        }
        for i in 0..m.norm.names.len() {
            let name = m.norm.names[i].clone();
            for (suffix, dst) in [("mean", &mut m.norm.mean[i]), ("var", &mut m.norm.var[i])] {
                let (_, v) = ar.float_array(&format!("norm.{name}.{suffix}"), path)?;
                if v.len() != dst.len() {
                    return Err(fmt(format!("norm.{name}.{suffix} has {} channels, expected {}", v.len(), dst.len())));
                }
                *dst = v.into_iter().map(T::lit).collect();
            }
        }
        m.train_seed = h["train_seed"].as_u64();
        m.norm.mode = serde_json::from_value(h["norm_mode"].clone()).unwrap_or(NormMode::Frozen);
        let stored = h["fingerprint"].as_str().unwrap_or_default();
        let actual = m.fingerprint();
        if stored != actual {
            return Err(Error::FingerprintMismatch { expected: stored.to_string(), found: actual });
        }
        Ok(m)
    }
}
