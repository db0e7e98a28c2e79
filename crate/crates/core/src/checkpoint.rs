//! Checkpoints: one safetensors archive holding every network parameter
//! (keyed `<network>/<parameter>`), optional optimizer moments
//! (`adam/<network>/{m,v}/<parameter>`), and in its metadata the full
//! config, the architecture hash and the step.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nets::{build_models, Models, ParamStore};
use crate::optim::Optimizers;
use crate::tensor::Tensor;

const FORMAT: &str = "catstyle-checkpoint-1";

pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub models: Models<f32>,
    pub optimizers: Option<Optimizers<f32>>,
    pub step: usize,
    pub arch_hash: String,
}

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &ExperimentConfig,
    models: &Models<f32>,
    optimizers: Option<&Optimizers<f32>>,
    step: usize,
) -> Result<()> {
    let path = path.as_ref();
    let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (tag, store) in models.stores() {
        for p in store.iter() {
            entries.push((
                format!("{tag}/{}", p.name),
                p.value.shape().to_vec(),
                to_bytes(&p.value),
            ));
        }
    }
    let mut meta = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("config".to_string(), config.to_toml_string()),
        ("arch_hash".to_string(), models.arch_hash()),
        ("step".to_string(), step.to_string()),
    ]);
    if let Some(opts) = optimizers {
        for ((tag, opt), (_, store)) in opts.by_tag().into_iter().zip(models.stores()) {
            meta.insert(format!("adam_t/{tag}"), opt.t.to_string());
            for (p, mom) in store.iter().zip(&opt.moments) {
                if let Some((m, v)) = mom {
                    for (which, t) in [("m", m), ("v", v)] {
                        entries.push((
                            format!("adam/{tag}/{which}/{}", p.name),
                            t.shape().to_vec(),
                            to_bytes(t),
                        ));
                    }
                }
            }
        }
    }
    let views = entries
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| ckpt_err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| ckpt_err(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_tensor(st: &SafeTensors<'_>, name: &str, shape: &[usize], path: &Path) -> Result<Tensor<f32>> {
    let view = st
        .tensor(name)
        .map_err(|_| ckpt_err(path, format!("missing tensor {name}")))?;
    if view.dtype() != Dtype::F32 || view.shape() != shape {
        return Err(ckpt_err(
            path,
            format!(
                "tensor {name} is {:?}{:?}, expected F32{shape:?}",
                view.dtype(),
                view.shape()
            ),
        ));
    }
    let data = view
        .data()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(shape.to_vec(), data))
}

fn fill(store: &mut ParamStore<f32>, tag: &str, st: &SafeTensors<'_>, path: &Path) -> Result<()> {
    for i in 0..store.len() {
        let p = store.get(i);
        let t = read_tensor(st, &format!("{tag}/{}", p.name), p.value.shape(), path)?;
        *store.value_mut(i) = t;
    }
    Ok(())
}

/// Loads a checkpoint, rebuilding the networks from its embedded config.
/// When `expect` is given, the checkpoint must have the architecture that
/// config would build; otherwise [`Error::ArchitectureMismatch`] is returned.
pub fn load_checkpoint(path: impl AsRef<Path>, expect: Option<&ExperimentConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_err(path, "no metadata"))?;
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| ckpt_err(path, format!("metadata key {k} missing")))
    };
    if get("format")? != FORMAT {
        return Err(ckpt_err(path, format!("unknown format {}", get("format")?)));
    }
    let config = ExperimentConfig::from_toml_str(get("config")?)?;
    let stored_hash = get("arch_hash")?.clone();
    let step: usize = get("step")?
        .parse()
        .map_err(|_| ckpt_err(path, "step is not an integer"))?;
    if let Some(want) = expect {
        let expected = build_models::<f32>(want)?.arch_hash();
        if expected != stored_hash {
            return Err(Error::ArchitectureMismatch {
                expected,
                found: stored_hash,
            });
        }
    }
    let mut models = build_models::<f32>(&config)?;
    if models.arch_hash() != stored_hash {
        return Err(Error::ArchitectureMismatch {
            expected: models.arch_hash(),
            found: stored_hash,
        });
    }
    for (tag, store) in models.stores_mut() {
        fill(store, tag, &st, path)?;
    }
    let optimizers = if meta.contains_key("adam_t/encoder") {
        let mut opts = Optimizers::new(&models, &config);
        for ((tag, opt), (_, store)) in opts.by_tag_mut().into_iter().zip(models.stores()) {
            opt.t = get(&format!("adam_t/{tag}"))?
                .parse()
                .map_err(|_| ckpt_err(path, "optimizer step is not an integer"))?;
            for (p, mom) in store.iter().zip(opt.moments.iter_mut()) {
                if let Some((m, v)) = mom {
                    *m = read_tensor(&st, &format!("adam/{tag}/m/{}", p.name), p.value.shape(), path)?;
                    *v = read_tensor(&st, &format!("adam/{tag}/v/{}", p.name), p.value.shape(), path)?;
                }
            }
        }
        Some(opts)
    } else {
        None
    };
    Ok(Checkpoint {
        config,
        models,
        optimizers,
        step,
        arch_hash: stored_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            "dataset_name = \"synthetic_blocks\"\nwidth_divisor = 16\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn round_trip_restores_every_tensor_and_moment() {
        let c = cfg("seed = 5");
        let models = build_models::<f32>(&c).unwrap();
        let mut opts = Optimizers::new(&models, &c);
        opts.critic.t = 7;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/ck.safetensors");
        save_checkpoint(&p, &c, &models, Some(&opts), 42).unwrap();
        let ck = load_checkpoint(&p, Some(&c)).unwrap();
        assert_eq!(ck.step, 42);
        assert_eq!(ck.config, c);
        for ((_, a), (_, b)) in ck.models.stores().into_iter().zip(models.stores()) {
            assert_eq!(a, b);
        }
        assert_eq!(ck.optimizers.unwrap(), opts);
    }

    #[test]
    fn mismatched_architecture_is_reported_with_both_hashes() {
        let c = cfg("");
        let models = build_models::<f32>(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.safetensors");
        save_checkpoint(&p, &c, &models, None, 0).unwrap();
        let other = cfg("num_clusters = 3");
        match load_checkpoint(&p, Some(&other)) {
            Err(Error::ArchitectureMismatch { expected, found }) => {
                assert_eq!(found, models.arch_hash());
                assert_ne!(expected, found);
            }
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("mismatch accepted"),
        }
        assert!(load_checkpoint(&p, None).unwrap().optimizers.is_none());
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        std::fs::write(&p, b"nonsense").unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(Error::Checkpoint(_))));
    }
}
