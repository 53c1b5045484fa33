//! Model checkpoints as safetensors files.
//!
//! Every tensor is stored as F64 under its parameter name. The header
//! metadata carries `format`, `version`, the model config as JSON and the tag
//! vocabulary as JSON. Loading rebuilds the parameter layout from the config
//! and requires exactly that set of names and shapes.

use std::collections::HashMap;
use std::path::Path;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors, View};

use super::params::{BasicBlock, BatchNorm, ResNetStem};
use super::{BackboneParams, Model, ModelConfig, ModelError, ModelParams};
use crate::features::TagVocabulary;

pub const CHECKPOINT_FORMAT: &str = "webctx-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

fn err(e: impl std::fmt::Display) -> ModelError {
    ModelError::Checkpoint(e.to_string())
}

struct F64Tensor {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl F64Tensor {
    fn new(a: &ArrayD<f64>) -> Self {
        F64Tensor {
            shape: a.shape().to_vec(),
            bytes: a.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }
}

impl View for &F64Tensor {
    fn dtype(&self) -> Dtype {
        Dtype::F64
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> std::borrow::Cow<'_, [u8]> {
        std::borrow::Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

/// Serialized checkpoint bytes.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>, ModelError> {
    let tensors: Vec<(String, F64Tensor)> = model
        .params
        .to_named()
        .into_iter()
        .map(|(n, a)| (n, F64Tensor::new(&a)))
        .collect();
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
    meta.insert(
        "config".to_string(),
        serde_json::to_string(&model.config).map_err(err)?,
    );
    meta.insert(
        "vocab".to_string(),
        serde_json::to_string(&model.vocab).map_err(err)?,
    );
    safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(meta)).map_err(err)
}

pub fn save(model: &Model, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model, ModelError> {
    from_bytes(&std::fs::read(path)?)
}

fn decode(view: &safetensors::tensor::TensorView<'_>) -> Result<Vec<f64>, ModelError> {
    let data = view.data();
    match view.dtype() {
        Dtype::F64 => Ok(data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()),
        Dtype::F32 => Ok(data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()),
        d => Err(err(format!("unsupported dtype {d:?}"))),
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model, ModelError> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(err)?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| err("missing metadata"))?;
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| err(format!("missing metadata key {k:?}")))
    };
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(err("not a model checkpoint"));
    }
    if field("version")? != CHECKPOINT_VERSION {
        return Err(err(format!(
            "unsupported checkpoint version {}",
            field("version")?
        )));
    }
    let config: ModelConfig = serde_json::from_str(field("config")?).map_err(err)?;
    let vocab: Option<TagVocabulary> = serde_json::from_str(field("vocab")?).map_err(err)?;
    config.validate()?;
    let st = SafeTensors::deserialize(bytes).map_err(err)?;

    let mut params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
    let expected: Vec<String> = params.tensors().into_iter().map(|t| t.0).collect();
    let mut stored: Vec<String> = st.names().into_iter().map(String::from).collect();
    stored.sort();
    let mut wanted = expected.clone();
    wanted.sort();
    if stored != wanted {
        let missing: Vec<&String> = wanted.iter().filter(|n| !stored.contains(n)).collect();
        let extra: Vec<&String> = stored.iter().filter(|n| !wanted.contains(n)).collect();
        return Err(err(format!(
            "tensor set mismatch; missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for (name, mut dst, _) in params.tensors_mut() {
        let view = st.tensor(&name).map_err(err)?;
        if view.shape() != dst.shape() {
            return Err(err(format!(
                "{name}: stored shape {:?}, expected {:?}",
                view.shape(),
                dst.shape()
            )));
        }
        for (d, s) in dst.iter_mut().zip(decode(&view)?) {
            *d = s;
        }
    }
    Ok(Model {
        config,
        params,
        vocab,
    })
}

/// Loads residual-stem weights named as in torchvision's `resnet18`
/// (`conv1.weight`, `bn1.*`, `layer1.{0,1}.*`), F32 or F64. Other tensors in
/// the file are ignored.
pub fn load_resnet_stem(path: &Path) -> Result<BackboneParams, ModelError> {
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(err)?;
    let channels = st.tensor("conv1.weight").map_err(err)?.shape()[0];
    let mut r = ResNetStem::zeros(channels);
    let mut fill = |name: &str, dst: ndarray::ArrayViewMutD<'_, f64>| -> Result<(), ModelError> {
        let view = st.tensor(name).map_err(|e| err(format!("{name}: {e}")))?;
        if view.shape() != dst.shape() {
            return Err(err(format!(
                "{name}: shape {:?}, expected {:?}",
                view.shape(),
                dst.shape()
            )));
        }
        let mut dst = dst;
        for (d, s) in dst.iter_mut().zip(decode(&view)?) {
            *d = s;
        }
        Ok(())
    };
    let fill_bn =
        |prefix: &str,
         bn: &mut BatchNorm,
         fill: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f64>) -> Result<(), ModelError>|
         -> Result<(), ModelError> {
            fill(&format!("{prefix}.weight"), bn.gamma.view_mut().into_dyn())?;
            fill(&format!("{prefix}.bias"), bn.beta.view_mut().into_dyn())?;
            fill(
                &format!("{prefix}.running_mean"),
                bn.running_mean.view_mut().into_dyn(),
            )?;
            fill(
                &format!("{prefix}.running_var"),
                bn.running_var.view_mut().into_dyn(),
            )
        };
    fill("conv1.weight", r.conv1.view_mut().into_dyn())?;
    fill_bn("bn1", &mut r.bn1, &mut fill)?;
    for (
        i,
        BasicBlock {
            conv1,
            bn1,
            conv2,
            bn2,
        },
    ) in r.blocks.iter_mut().enumerate()
    {
        fill(
            &format!("layer1.{i}.conv1.weight"),
            conv1.view_mut().into_dyn(),
        )?;
        fill_bn(&format!("layer1.{i}.bn1"), bn1, &mut fill)?;
        fill(
            &format!("layer1.{i}.conv2.weight"),
            conv2.view_mut().into_dyn(),
        )?;
        fill_bn(&format!("layer1.{i}.bn2"), bn2, &mut fill)?;
    }
    Ok(BackboneParams::ResNetStem(Box::new(r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneKind, Model};

    fn small_config() -> ModelConfig {
        ModelConfig {
            proj_dim: 8,
            head_hidden: 6,
            pos_dim: 4,
            backbone_channels: 5,
            viewport: 64,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let vocab = TagVocabulary {
            tags: vec!["DIV".into(), "IMG".into()],
        };
        let cfg = ModelConfig {
            use_extra_features: true,
            ..small_config()
        };
        let mut m = Model::new(cfg, Some(vocab), 9).unwrap();
        m.params.head.bn.running_var[0] = 2.5;
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = Model::new(small_config(), None, 1).unwrap();
        let mut bytes = to_bytes(&m).unwrap();
        // Rewrite the stored config so the tensors no longer fit.
        let other = Model::new(
            ModelConfig {
                proj_dim: 9,
                ..small_config()
            },
            None,
            1,
        )
        .unwrap();
        let cfg_old = serde_json::to_string(&m.config).unwrap();
        let cfg_new = serde_json::to_string(&other.config).unwrap();
        let hay = String::from_utf8_lossy(&bytes).into_owned();
        assert!(hay.contains(&cfg_old.replace('"', "\\\"")));
        let idx = hay.find("proj_dim\\\":8").unwrap();
        bytes[idx + "proj_dim\\\":".len()] = b'9';
        assert!(cfg_new.contains("\"proj_dim\":9"));
        assert!(matches!(from_bytes(&bytes), Err(ModelError::Checkpoint(_))));
    }

    #[test]
    fn garbage_rejected() {
        assert!(from_bytes(b"not a checkpoint").is_err());
        let m = Model::new(
            ModelConfig {
                backbone: BackboneKind::Small,
                ..small_config()
            },
            None,
            1,
        )
        .unwrap();
        let bytes = safetensors::serialize(Vec::<(&str, &F64Tensor)>::new(), None).unwrap();
        assert!(from_bytes(&bytes).is_err());
        assert!(to_bytes(&m).is_ok());
    }

    #[test]
    fn resnet_weights_by_torchvision_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = ResNetStem::random(4, &mut rng);
        let mut named: Vec<(String, F64Tensor)> = Vec::new();
        let mut put = |n: &str, a: ArrayD<f64>| named.push((n.to_string(), F64Tensor::new(&a)));
        put("conv1.weight", r.conv1.clone().into_dyn());
        let bn = |p: &str, b: &BatchNorm, put: &mut dyn FnMut(&str, ArrayD<f64>)| {
            put(&format!("{p}.weight"), b.gamma.clone().into_dyn());
            put(&format!("{p}.bias"), b.beta.clone().into_dyn());
            put(
                &format!("{p}.running_mean"),
                b.running_mean.clone().into_dyn(),
            );
            put(
                &format!("{p}.running_var"),
                b.running_var.clone().into_dyn(),
            );
        };
        bn("bn1", &r.bn1, &mut put);
        for (i, b) in r.blocks.iter().enumerate() {
            put(
                &format!("layer1.{i}.conv1.weight"),
                b.conv1.clone().into_dyn(),
            );
            bn(&format!("layer1.{i}.bn1"), &b.bn1, &mut put);
            put(
                &format!("layer1.{i}.conv2.weight"),
                b.conv2.clone().into_dyn(),
            );
            bn(&format!("layer1.{i}.bn2"), &b.bn2, &mut put);
        }
        put("fc.weight", ArrayD::zeros(vec![2, 2]));
        let bytes =
            safetensors::serialize(named.iter().map(|(n, t)| (n.as_str(), t)), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r18.safetensors");
        std::fs::write(&path, bytes).unwrap();
        match load_resnet_stem(&path).unwrap() {
            BackboneParams::ResNetStem(loaded) => assert_eq!(*loaded, r),
            _ => panic!("wrong backbone"),
        }
    }
}
