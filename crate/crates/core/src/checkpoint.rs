//! Checkpoint files: a text manifest followed by raw little-endian 32-bit
//! blobs.
//!
//! ```text
//! memefuse-checkpoint v1
//! meta <key>=<value>
//! ...
//! blob <name> <d0>x<d1>x... <byte-offset>
//! ...
//! data <total-bytes>
//! <binary section>
//! ```
//!
//! Blobs are laid out in lexicographic name order, so identical content
//! always produces bitwise-identical files. Model parameters store under
//! `param.<name>`; optimizer moments under `opt.m.<name>` / `opt.v.<name>`;
//! training-loop state goes in meta entries (floats as hex bit patterns so
//! resume is exact).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::{HeadBankConfig, Model, ModelConfig, ModelVariant};
use crate::image::ImageEncoderConfig;
use crate::optim::{Moments, OptimizerKind, OptimizerState};
use crate::params::ParamSet;
use crate::text::TextEncoderConfig;

const HEADER: &str = "memefuse-checkpoint v1";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    blobs: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key `{key}`")))
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Result<T> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("unreadable meta value for `{key}`")))
    }

    pub fn has_meta(&self, key: &str) -> bool {
        self.meta.contains_key(key)
    }

    pub fn add_blob(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.blobs.insert(name.to_string(), (shape.to_vec(), data));
    }

    pub fn blob(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.blobs
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Checkpoint(format!("missing blob `{name}`")))
    }

    pub fn blob_names(&self) -> impl Iterator<Item = &str> {
        self.blobs.keys().map(|s| s.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = String::new();
        let _ = writeln!(manifest, "{HEADER}");
        for (k, v) in &self.meta {
            let _ = writeln!(manifest, "meta {k}={v}");
        }
        let mut offset = 0usize;
        for (name, (shape, data)) in &self.blobs {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(manifest, "blob {name} {} {offset}", dims.join("x"));
            offset += 4 * data.len();
        }
        let _ = writeln!(manifest, "data {offset}");
        let mut bytes = manifest.into_bytes();
        for (_, data) in self.blobs.values() {
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut pos = 0usize;
        let mut next_line = |bytes: &[u8]| -> Result<String> {
            let start = pos;
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            if pos >= bytes.len() {
                return Err(Error::Checkpoint("manifest ended before data section".into()));
            }
            let line = std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?
                .to_string();
            pos += 1;
            Ok(line)
        };

        if next_line(&bytes)? != HEADER {
            return Err(Error::Checkpoint("bad header line".into()));
        }
        let mut meta = BTreeMap::new();
        let mut blob_specs: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let data_len;
        loop {
            let line = next_line(&bytes)?;
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::Checkpoint(format!("bad meta line `{line}`")))?;
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("blob ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(Error::Checkpoint(format!("bad blob line `{line}`")));
                }
                let shape: Vec<usize> = parts[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Checkpoint(format!("bad shape in `{line}`")))?;
                let offset: usize = parts[2]
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad offset in `{line}`")))?;
                blob_specs.push((parts[0].to_string(), shape, offset));
            } else if let Some(rest) = line.strip_prefix("data ") {
                data_len = rest
                    .parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad data line `{line}`")))?;
                break;
            } else {
                return Err(Error::Checkpoint(format!("unrecognized manifest line `{line}`")));
            }
        }
        let binary = &bytes[pos..];
        if binary.len() != data_len {
            return Err(Error::Checkpoint(format!(
                "binary section is {} bytes, manifest says {data_len}",
                binary.len()
            )));
        }
        let mut blobs = BTreeMap::new();
        for (name, shape, offset) in blob_specs {
            let numel: usize = shape.iter().product();
            let end = offset + 4 * numel;
            if end > binary.len() {
                return Err(Error::Checkpoint(format!(
                    "blob `{name}` spans past the binary section"
                )));
            }
            let data: Vec<f32> = binary[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blobs.insert(name, (shape, data));
        }
        Ok(Checkpoint { meta, blobs })
    }

    // ---- model parameters ----

    pub fn put_params(&mut self, prefix: &str, params: &ParamSet) {
        for (_, p) in params.iter() {
            self.add_blob(
                &format!("{prefix}.{}", p.name),
                p.tensor.shape(),
                p.tensor.values().to_vec(),
            );
        }
    }

    /// Copy blob values into an existing parameter set, validating every
    /// name and shape.
    pub fn read_params_into(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        for (id, name, shape) in params
            .iter()
            .map(|(id, p)| (id, p.name.clone(), p.tensor.shape().to_vec()))
            .collect::<Vec<_>>()
        {
            let (blob_shape, data) = self.blob(&format!("{prefix}.{name}"))?;
            if blob_shape != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {blob_shape:?} in the checkpoint but {shape:?} in the model"
                )));
            }
            params.tensor_mut(id).set_values(data.to_vec())?;
        }
        Ok(())
    }

    // ---- model config ----

    pub fn put_model_config(&mut self, config: &ModelConfig) {
        self.set_meta("model.variant", config.variant.name());
        self.set_meta("model.seed", config.seed);
        let t = &config.text;
        self.set_meta("text.vocab_size", t.vocab_size);
        self.set_meta("text.embed_dim", t.embed_dim);
        self.set_meta("text.hidden_dim", t.hidden_dim);
        self.set_meta("text.num_layers", t.num_layers);
        self.set_meta("text.num_heads", t.num_heads);
        self.set_meta("text.ff_dim", t.ff_dim);
        self.set_meta("text.max_seq_len", t.max_seq_len);
        self.set_meta("text.share_layers", t.share_layers);
        self.set_meta("text.factorized_embedding", t.factorized_embedding);
        let i = &config.image;
        self.set_meta("image.input_resolution", i.input_resolution);
        let join = |xs: &[usize]| {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        self.set_meta("image.stack_channels", join(&i.stack_channels));
        self.set_meta("image.convs_per_stack", join(&i.convs_per_stack));
        let h = &config.heads;
        self.set_meta("heads.hidden1", h.hidden1);
        self.set_meta("heads.hidden2", h.hidden2);
        self.set_meta("heads.head_dropout", format!("{:?}", h.head_dropout));
        self.set_meta("heads.feature_dropout", format!("{:?}", h.feature_dropout));
    }

    pub fn read_model_config(&self) -> Result<ModelConfig> {
        let five = |key: &str| -> Result<[usize; 5]> {
            let raw = self.meta_str(key)?;
            let parts: Vec<usize> = raw
                .split(',')
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Checkpoint(format!("unreadable meta value for `{key}`")))?;
            parts
                .try_into()
                .map_err(|_| Error::Checkpoint(format!("`{key}` needs exactly 5 entries")))
        };
        Ok(ModelConfig {
            variant: ModelVariant::parse(self.meta_str("model.variant")?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            seed: self.meta_parse("model.seed")?,
            text: TextEncoderConfig {
                vocab_size: self.meta_parse("text.vocab_size")?,
                embed_dim: self.meta_parse("text.embed_dim")?,
                hidden_dim: self.meta_parse("text.hidden_dim")?,
                num_layers: self.meta_parse("text.num_layers")?,
                num_heads: self.meta_parse("text.num_heads")?,
                ff_dim: self.meta_parse("text.ff_dim")?,
                max_seq_len: self.meta_parse("text.max_seq_len")?,
                share_layers: self.meta_parse("text.share_layers")?,
                factorized_embedding: self.meta_parse("text.factorized_embedding")?,
            },
            image: ImageEncoderConfig {
                input_resolution: self.meta_parse("image.input_resolution")?,
                stack_channels: five("image.stack_channels")?,
                convs_per_stack: five("image.convs_per_stack")?,
            },
            heads: HeadBankConfig {
                hidden1: self.meta_parse("heads.hidden1")?,
                hidden2: self.meta_parse("heads.hidden2")?,
                head_dropout: self.meta_parse("heads.head_dropout")?,
                feature_dropout: self.meta_parse("heads.feature_dropout")?,
            },
        })
    }

    // ---- optimizer state ----

    pub fn put_optimizer(&mut self, state: &OptimizerState, params: &ParamSet) {
        self.set_meta("opt.kind", state.kind.name());
        self.set_meta("opt.step", state.step);
        for ((_, p), m) in params.iter().zip(&state.moments) {
            let shape = p.tensor.shape();
            self.add_blob(&format!("opt.m.{}", p.name), shape, m.m.clone());
            self.add_blob(&format!("opt.v.{}", p.name), shape, m.v.clone());
        }
    }

    pub fn read_optimizer(&self, params: &ParamSet) -> Result<OptimizerState> {
        let kind = OptimizerKind::parse(self.meta_str("opt.kind")?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let step: u64 = self.meta_parse("opt.step")?;
        let mut moments = Vec::with_capacity(params.len());
        for (_, p) in params.iter() {
            let (_, m) = self.blob(&format!("opt.m.{}", p.name))?;
            let (_, v) = self.blob(&format!("opt.v.{}", p.name))?;
            if m.len() != p.tensor.numel() || v.len() != p.tensor.numel() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moments for `{}` have the wrong size",
                    p.name
                )));
            }
            moments.push(Moments {
                m: m.to_vec(),
                v: v.to_vec(),
            });
        }
        Ok(OptimizerState {
            kind,
            step,
            moments,
        })
    }

    // ---- exact floats and rng state in meta ----

    pub fn set_meta_f64_bits(&mut self, key: &str, value: f64) {
        self.set_meta(key, format!("{:016x}", value.to_bits()));
    }

    pub fn meta_f64_bits(&self, key: &str) -> Result<f64> {
        let raw = self.meta_str(key)?;
        u64::from_str_radix(raw, 16)
            .map(f64::from_bits)
            .map_err(|_| Error::Checkpoint(format!("unreadable float bits for `{key}`")))
    }

    pub fn set_meta_rng(&mut self, key: &str, state: [u64; 4]) {
        let words: Vec<String> = state.iter().map(|w| format!("{w:016x}")).collect();
        self.set_meta(key, words.join(","));
    }

    pub fn meta_rng(&self, key: &str) -> Result<[u64; 4]> {
        let raw = self.meta_str(key)?;
        let words: Vec<u64> = raw
            .split(',')
            .map(|w| u64::from_str_radix(w, 16))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint(format!("unreadable rng state for `{key}`")))?;
        words
            .try_into()
            .map_err(|_| Error::Checkpoint(format!("rng state `{key}` needs 4 words")))
    }
}

/// Save a model's config and parameters.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    ckpt.put_model_config(&model.config);
    ckpt.put_params("param", &model.params);
    ckpt.save(path)
}

/// Rebuild a model from a checkpoint: construct from the embedded config,
/// then overwrite every parameter from the blobs.
pub fn load_model(path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt.read_model_config()?;
    let mut model = Model::build(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    ckpt.read_params_into("param", &mut model.params)?;
    Ok(model)
}
