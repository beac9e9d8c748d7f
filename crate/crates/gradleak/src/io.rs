//! On-disk formats: named-array binaries (checkpoints, gradients, recovered
//! batches), observation archives, attack result bundles, and PNG image grids.
//!
//! Binary layout: an 8-byte little-endian header length, a JSON header with
//! array names/shapes/dtype plus free-form metadata, then the raw f64
//! little-endian payloads concatenated in header order.

use crate::attacks::{AttackConfig, RecoveryResult};
use crate::error::{Error, Result};
use crate::fedsim::Observation;
use crate::models::{BnLayerStats, BnStats, Model, ModelConfig};
use crate::tensor::TensorData;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    arrays: Vec<ArrayEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub struct NamedArrays {
    pub arrays: Vec<(String, TensorData)>,
    pub meta: serde_json::Value,
}

impl NamedArrays {
    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_named_arrays(
    path: &Path,
    arrays: &[(String, &TensorData)],
    meta: serde_json::Value,
) -> Result<()> {
    let header = Header {
        version: FORMAT_VERSION,
        dtype: "f64".into(),
        arrays: arrays
            .iter()
            .map(|(n, t)| ArrayEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, t) in arrays {
        for v in t.values() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn read_named_arrays(path: &Path) -> Result<NamedArrays> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Format(format!("{}: missing header length", path.display())))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    if header.dtype != "f64" {
        return Err(Error::Format(format!(
            "{}: unsupported dtype {}",
            path.display(),
            header.dtype
        )));
    }
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in header.arrays {
        let numel: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        file.read_exact(&mut raw).map_err(|_| {
            Error::Format(format!(
                "{}: array `{}` expects {} bytes, file truncated",
                path.display(),
                entry.name,
                numel * 8
            ))
        })?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((entry.name, TensorData::new(entry.shape, data)?));
    }
    Ok(NamedArrays {
        arrays,
        meta: header.meta,
    })
}

// ---- model checkpoints -------------------------------------------------------

fn bn_arrays(bn: &BnStats) -> Vec<(String, &TensorData)> {
    let mut out = Vec::new();
    for (i, layer) in bn.layers.iter().enumerate() {
        out.push((format!("running_mean.{i}"), &layer.mean));
        out.push((format!("running_var.{i}"), &layer.var));
    }
    out
}

/// Write a model checkpoint: every named parameter plus BN running buffers,
/// with the model configuration embedded in the header metadata.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut arrays: Vec<(String, &TensorData)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), &p.data))
        .collect();
    arrays.extend(bn_arrays(&model.bn_stats));
    let meta = serde_json::json!({ "model": model.config });
    write_named_arrays(path, &arrays, meta)
}

fn model_config_from_meta(meta: &serde_json::Value, path: &Path) -> Result<ModelConfig> {
    serde_json::from_value(meta.get("model").cloned().ok_or_else(|| {
        Error::Format(format!("{}: header missing model config", path.display()))
    })?)
    .map_err(|e| Error::Format(format!("{}: bad model config: {e}", path.display())))
}

fn rebuild_params_and_bn(
    config: &ModelConfig,
    stored: &NamedArrays,
    path: &Path,
) -> Result<Model> {
    let mut model = Model::init(config.clone(), 0)?;
    for i in 0..model.params.len() {
        let name = model.params.get(i).name.clone();
        let data = stored
            .get(&name)
            .ok_or_else(|| Error::Format(format!("{}: missing array `{name}`", path.display())))?
            .clone();
        model.params.replace(i, data)?;
    }
    let mut layers = Vec::new();
    for i in 0.. {
        match (
            stored.get(&format!("running_mean.{i}")),
            stored.get(&format!("running_var.{i}")),
        ) {
            (Some(m), Some(v)) => layers.push(BnLayerStats {
                mean: m.clone(),
                var: v.clone(),
            }),
            _ => break,
        }
    }
    model.bn_stats = BnStats { layers };
    model.bn_stats.validate()?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let stored = read_named_arrays(path)?;
    let config = model_config_from_meta(&stored.meta, path)?;
    rebuild_params_and_bn(&config, &stored, path)
}

// ---- observation archive -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ObservationMeta {
    t: u64,
    batch_id: u64,
    batch_size: usize,
    defense: String,
    model: ModelConfig,
}

/// Write one capture under `dir/t{t:08}/`: a weights checkpoint, a gradient
/// file in the same binary format, and a metadata JSON.
pub fn save_observation(
    dir: &Path,
    obs: &Observation,
    model_config: &ModelConfig,
    defense_label: &str,
) -> Result<PathBuf> {
    let sub = dir.join(format!("t{:08}", obs.t));
    std::fs::create_dir_all(&sub)?;
    let mut weight_arrays: Vec<(String, &TensorData)> = obs
        .params
        .iter()
        .map(|p| (p.name.clone(), &p.data))
        .collect();
    weight_arrays.extend(bn_arrays(&obs.bn_stats));
    write_named_arrays(
        &sub.join("weights.bin"),
        &weight_arrays,
        serde_json::json!({ "model": model_config, "t": obs.t }),
    )?;
    let grad_arrays: Vec<(String, &TensorData)> = obs
        .params
        .iter()
        .zip(&obs.grads)
        .map(|(p, g)| (p.name.clone(), g))
        .collect();
    write_named_arrays(
        &sub.join("grads.bin"),
        &grad_arrays,
        serde_json::json!({ "t": obs.t }),
    )?;
    let meta = ObservationMeta {
        t: obs.t,
        batch_id: obs.batch_id,
        batch_size: obs.batch_size,
        defense: defense_label.to_string(),
        model: model_config.clone(),
    };
    std::fs::write(
        sub.join("meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(sub)
}

/// Read one capture directory back into an observation.
pub fn load_observation(sub: &Path) -> Result<(Observation, ModelConfig)> {
    let meta: ObservationMeta =
        serde_json::from_str(&std::fs::read_to_string(sub.join("meta.json"))?)?;
    let weights = read_named_arrays(&sub.join("weights.bin"))?;
    let model = rebuild_params_and_bn(&meta.model, &weights, &sub.join("weights.bin"))?;
    let grads_file = read_named_arrays(&sub.join("grads.bin"))?;
    let grads: Vec<TensorData> = model
        .params
        .iter()
        .map(|p| {
            grads_file
                .get(&p.name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("missing gradient for `{}`", p.name)))
        })
        .collect::<Result<_>>()?;
    let obs = Observation {
        t: meta.t,
        params: model.params.clone(),
        grads,
        bn_stats: model.bn_stats.clone(),
        batch_id: meta.batch_id,
        batch_size: meta.batch_size,
    };
    obs.validate()?;
    Ok((obs, meta.model))
}

/// Load every `t*` capture in a directory, ordered by timestamp.
pub fn load_observation_dir(
    dir: &Path,
) -> Result<(Vec<std::sync::Arc<Observation>>, ModelConfig)> {
    let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with('t'))
                    .unwrap_or(false)
        })
        .collect();
    subs.sort();
    if subs.is_empty() {
        return Err(Error::Format(format!(
            "no t* capture directories under {}",
            dir.display()
        )));
    }
    let mut observations = Vec::new();
    let mut config: Option<ModelConfig> = None;
    for sub in subs {
        let (obs, cfg) = load_observation(&sub)?;
        match &config {
            None => config = Some(cfg),
            Some(existing) => {
                if *existing != cfg {
                    return Err(Error::Format(format!(
                        "{}: model config differs from earlier captures",
                        sub.display()
                    )));
                }
            }
        }
        observations.push(std::sync::Arc::new(obs));
    }
    observations.sort_by_key(|o| o.t);
    Ok((observations, config.expect("non-empty")))
}

// ---- attack result bundle ------------------------------------------------------

/// Write an attack result bundle: metadata JSON (config, losses, timings),
/// the recovered batch as a raw float array file, and a PNG grid against the
/// ground truth when it is available.
pub fn save_attack_bundle(
    dir: &Path,
    result: &RecoveryResult,
    config: &AttackConfig,
    truth: Option<&TensorData>,
    extra_meta: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = serde_json::json!({
        "config": config,
        "result": result,
        "extra": extra_meta,
    });
    std::fs::write(dir.join("result.json"), serde_json::to_string_pretty(&meta)?)?;
    write_named_arrays(
        &dir.join("recovered.bin"),
        &[("recovered".to_string(), &result.images)],
        serde_json::json!({ "labels": result.labels }),
    )?;
    if let Some(truth) = truth {
        let identity: Vec<usize> = (0..truth.shape()[0]).collect();
        emit_grid(truth, &result.images, &identity, &dir.join("grid.png"))?;
    }
    Ok(())
}

// ---- image grids ----------------------------------------------------------------

fn to_rgb(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lossless 2-row grid: ground truth on top, recovered below; column `i`
/// shows `truth[i]` over `recovered[permutation[i]]`.
pub fn emit_grid(
    truth: &TensorData,
    recovered: &TensorData,
    permutation: &[usize],
    path: &Path,
) -> Result<()> {
    let [b, c, h, w] = truth.shape() else {
        return Err(Error::Structure(format!(
            "grid expects [B,C,H,W], got {:?}",
            truth.shape()
        )));
    };
    let (b, c, h, w) = (*b, *c, *h, *w);
    if recovered.shape() != truth.shape() {
        return Err(Error::Structure(format!(
            "grid shape mismatch: {:?} vs {:?}",
            recovered.shape(),
            truth.shape()
        )));
    }
    if permutation.len() != b {
        return Err(Error::Structure(format!(
            "permutation has {} entries for batch {b}",
            permutation.len()
        )));
    }
    let pad = 2u32;
    let width = b as u32 * (w as u32 + pad) + pad;
    let height = 2 * (h as u32 + pad) + pad;
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    let mut blit = |src: &TensorData, idx: usize, col: usize, row: usize| {
        let img_len = c * h * w;
        let base = idx * img_len;
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| src.values()[base + (ch * h + y) * w + x];
                let rgb = if c >= 3 {
                    [to_rgb(px(0)), to_rgb(px(1)), to_rgb(px(2))]
                } else {
                    let g = to_rgb(px(0));
                    [g, g, g]
                };
                img.put_pixel(
                    pad + col as u32 * (w as u32 + pad) + x as u32,
                    pad + row as u32 * (h as u32 + pad) + y as u32,
                    image::Rgb(rgb),
                );
            }
        }
    };
    for i in 0..b {
        blit(truth, i, i, 0);
        blit(recovered, permutation[i], i, 1);
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: png write failed: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic_dataset;
    use crate::fedsim::{client_step, IdentityDefense};
    use crate::models::{LeNetArch, ModelArch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn tiny_model(seed: u64) -> Model {
        Model::init(
            ModelConfig::new(ModelArch::LeNet(LeNetArch {
                input: (3, 8, 8),
                num_classes: 4,
                conv1: 4,
                conv2: 6,
                kernel: 3,
                hidden: 16,
                batchnorm: true,
            })),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn named_arrays_roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("arrays.bin");
        let a = TensorData::new(vec![2, 3], vec![1.5, -0.25, 3e-17, 7.0, f64::MIN, f64::MAX])
            .unwrap();
        let b = TensorData::new(vec![4], vec![0.0, -0.0, 1.0, 2.0]).unwrap();
        write_named_arrays(
            &path,
            &[("first".into(), &a), ("second".into(), &b)],
            serde_json::json!({"k": 1}),
        )
        .unwrap();
        let stored = read_named_arrays(&path).unwrap();
        assert_eq!(stored.arrays.len(), 2);
        let ra = stored.get("first").unwrap();
        assert_eq!(ra.shape(), a.shape());
        for (x, y) in ra.values().iter().zip(a.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(stored.meta["k"], 1);
    }

    #[test]
    fn truncated_array_file_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("arrays.bin");
        let a = TensorData::new(vec![8], (0..8).map(|i| i as f64).collect()).unwrap();
        write_named_arrays(&path, &[("x".into(), &a)], serde_json::Value::Null).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 9]).unwrap();
        assert!(matches!(read_named_arrays(&path), Err(Error::Format(_))));
    }

    #[test]
    fn model_checkpoint_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = tiny_model(3);
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for (p, q) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.data.values(), q.data.values());
            assert_eq!(p.is_final_fc_weight, q.is_final_fc_weight);
        }
        assert_eq!(model.bn_stats, loaded.bn_stats);
    }

    #[test]
    fn observation_archive_roundtrip() {
        let dir = tempdir().unwrap();
        let ds = synthetic_dataset(4, 8, 0, (3, 8, 8), 5);
        let model = tiny_model(7);
        let batch = ds.train.batch(&[0, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = client_step(&model, &batch, &mut IdentityDefense, &mut rng).unwrap();
        let obs = Observation {
            t: 500,
            params: model.params.clone(),
            grads: out.defended_grads,
            bn_stats: model.bn_stats.clone(),
            batch_id: batch.batch_id(),
            batch_size: 3,
        };
        save_observation(dir.path(), &obs, &model.config, "none").unwrap();
        let (loaded, cfg) = load_observation(&dir.path().join("t00000500")).unwrap();
        assert_eq!(cfg, model.config);
        assert_eq!(loaded.t, 500);
        assert_eq!(loaded.batch_id, obs.batch_id);
        assert_eq!(loaded.batch_size, 3);
        for (a, b) in obs.grads.iter().zip(&loaded.grads) {
            assert_eq!(a.values(), b.values());
        }
        let (all, _) = load_observation_dir(dir.path()).unwrap();
        assert_eq!(all.len(), 1);
    }

    #[test]
    fn grid_roundtrips_within_quantization() {
        let dir = tempdir().unwrap();
        let ds = synthetic_dataset(4, 8, 0, (3, 8, 8), 11);
        let truth = ds.train.batch(&[0, 1, 2, 3]).pixels;
        let recovered = ds.train.batch(&[3, 2, 1, 0]).pixels;
        let perm = [3usize, 2, 1, 0];
        let path = dir.path().join("grid.png");
        emit_grid(&truth, &recovered, &perm, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        // 2 rows x 4 columns with 2px padding.
        assert_eq!(img.width(), 4 * 10 + 2);
        assert_eq!(img.height(), 2 * 10 + 2);
        // Column i bottom row shows recovered[perm[i]] == truth[i].
        for (i, &p) in perm.iter().enumerate() {
            for y in 0..8u32 {
                for x in 0..8u32 {
                    let top = img.get_pixel(2 + i as u32 * 10 + x, 2 + y);
                    let idx = p * 3 * 64 + (y as usize) * 8 + x as usize;
                    let want = (recovered.values()[idx].clamp(0.0, 1.0) * 255.0).round() as u8;
                    let bottom = img.get_pixel(2 + i as u32 * 10 + x, 2 + 10 + y);
                    assert_eq!(bottom.0[0], want);
                    // Truth pixel within 1/255 of the stored float.
                    let t_idx = i * 3 * 64 + (y as usize) * 8 + x as usize;
                    let t = truth.values()[t_idx];
                    assert!((top.0[0] as f64 / 255.0 - t).abs() <= 1.0 / 255.0 + 1e-9);
                }
            }
        }
    }
}
