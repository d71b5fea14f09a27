//! Training checkpoints and tensor dumps in the safetensors container.
//!
//! A checkpoint stores parameters as little-endian `f64` under three
//! namespaces: `seg/<name>` for the segmentation network, `critic/<name>`
//! for the critic and `adam/{seg,critic}/{m,v}/<name>` for optimizer
//! moments. String metadata holds `format_version`, the JSON-encoded
//! `model`, `critic` and `train` configurations and, when present, the
//! loop position (`progress`) and optimizer step counts.
//!
//! Probability maps and feature dumps use the same container with `f32`
//! tensors.

use std::collections::HashMap;
use std::path::Path;

use crackclf_core::adversary::{Critic, CriticConfig};
use crackclf_core::optim::Adam;
use crackclf_core::segnet::{SegNet, SegNetConfig};
use crackclf_core::trainer::{ClfTrainer, DeepSupervision, Progress, TrainConfig};
use crackclf_core::{ParamStore, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{AppError, AppResult};

pub const FORMAT_VERSION: &str = "1";

/// Everything needed to resume training or to run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SegNetConfig,
    pub critic_config: Option<CriticConfig>,
    pub train: TrainConfig,
    pub segnet: ParamStore,
    pub critic: Option<ParamStore>,
    pub seg_opt: Option<Adam>,
    pub critic_opt: Option<Adam>,
    pub progress: Option<Progress>,
}

impl Checkpoint {
    /// Snapshot of a trainer around a [`SegNet`].
    pub fn from_trainer(t: &ClfTrainer<SegNet, DeepSupervision>) -> Self {
        Checkpoint {
            model: t.backbone().config().clone(),
            critic_config: t.critic().map(|c| c.config().clone()),
            train: t.config().clone(),
            segnet: t.backbone().params().clone(),
            critic: t.critic().map(|c| c.params().clone()),
            seg_opt: Some(t.segmenter_optimizer().clone()),
            critic_opt: t.critic_optimizer().cloned(),
            progress: Some(t.progress().clone()),
        }
    }

    pub fn network(&self) -> AppResult<SegNet> {
        Ok(SegNet::from_params(self.model.clone(), &self.segnet)?)
    }

    /// A trainer positioned where the checkpoint was taken. `train` replaces
    /// the stored training configuration (e.g. to extend `epochs`).
    pub fn into_trainer(
        self,
        loss: DeepSupervision,
        train: TrainConfig,
    ) -> AppResult<ClfTrainer<SegNet, DeepSupervision>> {
        let net = self.network()?;
        let critic = match (&self.critic_config, &self.critic) {
            (Some(cfg), Some(p)) if train.clf_enabled => Some(Critic::from_params(cfg.clone(), p)?),
            (_, _) if train.clf_enabled => {
                return Err(AppError::Mismatch(
                    "  the checkpoint has no critic but clf is enabled".into(),
                ));
            }
            _ => None,
        };
        let has_critic = critic.is_some();
        let mut t = ClfTrainer::with_critic(net, loss, critic, train);
        if let (Some(progress), Some(seg_opt)) = (self.progress, self.seg_opt) {
            let critic_opt = if has_critic { self.critic_opt } else { None };
            t.restore(progress, seg_opt, critic_opt)?;
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> AppResult<Vec<u8>> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut put_store = |prefix: &str, store: &ParamStore| {
            for (_, name, t) in store.iter() {
                tensors.push((format!("{prefix}/{name}"), t.shape().to_vec(), f64_bytes(t.data())));
            }
        };
        put_store("seg", &self.segnet);
        if let Some(c) = &self.critic {
            put_store("critic", c);
        }
        let mut put_adam = |who: &str, store: &ParamStore, adam: &Adam| {
            for ((_, name, _), (m, v)) in store.iter().zip(adam.m.iter().zip(&adam.v)) {
                tensors.push((format!("adam/{who}/m/{name}"), m.shape().to_vec(), f64_bytes(m.data())));
                tensors.push((format!("adam/{who}/v/{name}"), v.shape().to_vec(), f64_bytes(v.data())));
            }
        };
        if let Some(a) = &self.seg_opt {
            put_adam("seg", &self.segnet, a);
        }
        if let (Some(a), Some(c)) = (&self.critic_opt, &self.critic) {
            put_adam("critic", c, a);
        }

        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
        meta.insert("model".to_string(), to_json(&self.model)?);
        meta.insert("train".to_string(), to_json(&self.train)?);
        if let Some(c) = &self.critic_config {
            meta.insert("critic".to_string(), to_json(c)?);
        }
        if let Some(p) = &self.progress {
            meta.insert("progress".to_string(), to_json(p)?);
        }
        if let Some(a) = &self.seg_opt {
            meta.insert("adam_seg_t".to_string(), a.t.to_string());
        }
        if let Some(a) = &self.critic_opt {
            meta.insert("adam_critic_t".to_string(), a.t.to_string());
        }

        let views = tensors
            .iter()
            .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F64, s.clone(), b)?)))
            .collect::<Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| AppError::Config(e.to_string()))?;
        safetensors::serialize(views, &Some(meta)).map_err(|e| AppError::Config(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> AppResult<Self> {
        let bad = |m: String| AppError::format(origin, m);
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(format!("not a checkpoint: {e}")))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(format!("not a checkpoint: {e}")))?;
        match meta.get("format_version").map(String::as_str) {
            Some(FORMAT_VERSION) => {}
            v => return Err(bad(format!("unsupported checkpoint format {v:?}"))),
        }
        fn field<T: serde::de::DeserializeOwned>(
            meta: &HashMap<String, String>,
            key: &str,
            origin: &Path,
        ) -> AppResult<Option<T>> {
            meta.get(key)
                .map(|s| {
                    serde_json::from_str(s).map_err(|e| AppError::format(origin, format!("metadata `{key}`: {e}")))
                })
                .transpose()
        }
        let required = |key: &str| bad(format!("missing `{key}` metadata"));
        let model: SegNetConfig = field(&meta, "model", origin)?.ok_or_else(|| required("model"))?;
        let train: TrainConfig = field(&meta, "train", origin)?.ok_or_else(|| required("train"))?;
        let critic_config: Option<CriticConfig> = field(&meta, "critic", origin)?;
        let progress: Option<Progress> = field(&meta, "progress", origin)?;

        let segnet = read_store(&st, "seg", SegNet::zeroed(model.clone())?.params(), origin)?;
        let critic = match &critic_config {
            Some(c) => Some(read_store(&st, "critic", Critic::zeroed(c.clone())?.params(), origin)?),
            None => None,
        };
        let adam = |who: &str, store: &ParamStore, key: &str| -> AppResult<Option<Adam>> {
            let Some(t) = meta.get(key) else { return Ok(None) };
            let t = t
                .parse()
                .map_err(|_| bad(format!("metadata `{key}` is not an integer")))?;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (_, name, p) in store.iter() {
                m.push(read_tensor(&st, &format!("adam/{who}/m/{name}"), p.shape(), origin)?);
                v.push(read_tensor(&st, &format!("adam/{who}/v/{name}"), p.shape(), origin)?);
            }
            Ok(Some(Adam {
                config: train.adam(),
                t,
                m,
                v,
            }))
        };
        let seg_opt = adam("seg", &segnet, "adam_seg_t")?;
        let critic_opt = match &critic {
            Some(c) => adam("critic", c, "adam_critic_t")?,
            None => None,
        };
        Ok(Checkpoint {
            model,
            critic_config,
            train,
            segnet,
            critic,
            seg_opt,
            critic_opt,
            progress,
        })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        let bytes = self.to_bytes()?;
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| AppError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> AppResult<String> {
    serde_json::to_string(v).map_err(|e| AppError::Config(e.to_string()))
}

fn f64_bytes(d: &[f64]) -> Vec<u8> {
    d.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_bytes(d: &[f64]) -> Vec<u8> {
    d.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn read_tensor(st: &SafeTensors<'_>, name: &str, shape: &[usize], origin: &Path) -> AppResult<Tensor> {
    let view = st
        .tensor(name)
        .map_err(|_| AppError::Mismatch(format!("  `{name}` is missing from {}", origin.display())))?;
    if view.shape() != shape {
        return Err(AppError::Mismatch(format!(
            "  `{name}`: configuration expects {:?}, checkpoint has {:?}",
            shape,
            view.shape()
        )));
    }
    let data = match view.dtype() {
        Dtype::F64 => view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        d => {
            return Err(AppError::format(
                origin,
                format!("`{name}` has unsupported dtype {d:?}"),
            ))
        }
    };
    Ok(Tensor::from_vec(shape, data)?)
}

/// Fills a copy of `layout` from the tensors under `prefix/`. Extra tensors
/// under the prefix are reported as a mismatch.
fn read_store(st: &SafeTensors<'_>, prefix: &str, layout: &ParamStore, origin: &Path) -> AppResult<ParamStore> {
    let mut store = layout.clone();
    let mut problems = Vec::new();
    for id in layout.ids() {
        let name = layout.name(id);
        match read_tensor(st, &format!("{prefix}/{name}"), layout.get(id).shape(), origin) {
            Ok(t) => *store.get_mut(id) = t,
            Err(AppError::Mismatch(m)) => problems.push(m),
            Err(e) => return Err(e),
        }
    }
    let p = format!("{prefix}/");
    for n in st.names() {
        if let Some(rest) = n.strip_prefix(&p) {
            if layout.id(rest).is_none() {
                problems.push(format!("  `{n}` is not part of the configured model"));
            }
        }
    }
    if problems.is_empty() {
        Ok(store)
    } else {
        Err(AppError::Mismatch(problems.join("\n")))
    }
}

/// Writes named tensors as `f32`.
pub fn save_f32_tensors(path: &Path, tensors: &[(String, Tensor)]) -> AppResult<()> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), f32_bytes(t.data())))
        .collect();
    let views = bytes
        .iter()
        .map(|(n, s, b)| TensorView::new(Dtype::F32, s.clone(), b).map(|v| (n.clone(), v)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| AppError::format(path, e))?;
    let mut meta = HashMap::new();
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    let out = safetensors::serialize(views, &Some(meta)).map_err(|e| AppError::format(path, e))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| AppError::io(path, e))
}

/// Reads every tensor of a dump, in name order, widened to `f64`.
pub fn load_tensors(path: &Path) -> AppResult<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| AppError::format(path, e))?;
    let mut names: Vec<String> = st.names().into_iter().cloned().collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let shape = st.tensor(&n).map_err(|e| AppError::format(path, e))?.shape().to_vec();
            Ok((n.clone(), read_tensor(&st, &n, &shape, path)?))
        })
        .collect()
}

/// Line-per-field differences between two serialisable values.
pub fn config_diff<T: serde::Serialize>(section: &str, expected: &T, found: &T) -> Vec<String> {
    let a = serde_json::to_value(expected).unwrap_or_default();
    let b = serde_json::to_value(found).unwrap_or_default();
    let mut out = Vec::new();
    diff_values(section, &a, &b, &mut out);
    out
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let null = Value::Null;
                diff_values(
                    &format!("{path}.{k}"),
                    x.get(k).unwrap_or(&null),
                    y.get(k).unwrap_or(&null),
                    out,
                );
            }
        }
        _ if a != b => out.push(format!("  {path}: configuration {a}, checkpoint {b}")),
        _ => {}
    }
}
