//! Versioned binary checkpoint: header (magic, format version, network
//! config, condition vocabulary, progress), then named tensors, little
//! endian. Two parameter sets are always present (`raw` and `ema`);
//! optimizer moments ride along optionally so training can resume exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::CondVocab;
use crate::error::{Error, Result};
use crate::nn::params::{NetConfig, NetParams};
use crate::nn::real::{Precision, Real};

const MAGIC: &[u8; 8] = b"MFLOWCK1";
const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training or to sample.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Real> {
    pub config: NetConfig,
    pub vocab: CondVocab,
    pub iters_done: u64,
    pub raw: NetParams<F>,
    pub ema: NetParams<F>,
    /// First and second optimizer moments plus the step counter.
    pub opt: Option<(NetParams<F>, NetParams<F>, u64)>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Format("string too long for checkpoint".into()));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = u16::from_le_bytes(read_exact::<2>(r)?) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid utf8 in checkpoint".into()))
}

fn write_tensor_set<F: Real>(w: &mut impl Write, prefix: &str, params: &NetParams<F>) -> Result<()> {
    for (name, shape, data) in params.named_tensors() {
        write_str(w, &format!("{prefix}/{name}"))?;
        w.write_all(&[F::PRECISION.tag()])?;
        w.write_all(&[shape.len() as u8])?;
        for dim in &shape {
            write_u64(w, *dim as u64)?;
        }
        let mut bytes = Vec::with_capacity(data.len() * F::BYTES);
        for &v in data {
            v.write_le_bytes(&mut bytes);
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

impl<F: Real> Checkpoint<F> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, FORMAT_VERSION)?;

        // NetConfig.
        write_u32(&mut w, self.config.n_layers as u32)?;
        write_u32(&mut w, self.config.model_dim as u32)?;
        write_u32(&mut w, self.config.ff_dim as u32)?;
        write_u32(&mut w, self.config.n_heads as u32)?;
        write_u32(&mut w, self.config.conv_kernel as u32)?;
        write_u32(&mut w, self.config.patch_len as u32)?;
        w.write_all(&[self.config.precision.tag()])?;
        write_u32(&mut w, self.config.cond_vocab_sizes.len() as u32)?;
        for &s in &self.config.cond_vocab_sizes {
            write_u32(&mut w, s as u32)?;
        }

        // Condition vocabulary.
        w.write_all(&(self.vocab.base_year as i64).to_le_bytes())?;
        write_u32(&mut w, self.vocab.n_years as u32)?;
        write_u32(&mut w, self.vocab.categories.len() as u32)?;
        for c in &self.vocab.categories {
            write_str(&mut w, c)?;
        }

        write_u64(&mut w, self.iters_done)?;
        let flags: u8 = if self.opt.is_some() { 1 } else { 0 };
        w.write_all(&[flags])?;
        if let Some((_, _, step)) = &self.opt {
            write_u64(&mut w, *step)?;
        }

        let sets = 2 + if self.opt.is_some() { 2 } else { 0 };
        let per_set = self.raw.named_tensors().len() as u32;
        write_u32(&mut w, per_set * sets)?;
        write_tensor_set(&mut w, "raw", &self.raw)?;
        write_tensor_set(&mut w, "ema", &self.ema)?;
        if let Some((m, v, _)) = &self.opt {
            write_tensor_set(&mut w, "opt/m", m)?;
            write_tensor_set(&mut w, "opt/v", v)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load a checkpoint, converting stored values to `F` if the file was
    /// written at a different precision.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let magic = read_exact::<8>(&mut r)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }

        let n_layers = read_u32(&mut r)? as usize;
        let model_dim = read_u32(&mut r)? as usize;
        let ff_dim = read_u32(&mut r)? as usize;
        let n_heads = read_u32(&mut r)? as usize;
        let conv_kernel = read_u32(&mut r)? as usize;
        let patch_len = read_u32(&mut r)? as usize;
        let precision_tag = read_exact::<1>(&mut r)?[0];
        let stored_precision = Precision::from_tag(precision_tag)
            .ok_or_else(|| Error::Format(format!("bad precision tag {precision_tag}")))?;
        let n_cond = read_u32(&mut r)? as usize;
        let mut cond_vocab_sizes = Vec::with_capacity(n_cond);
        for _ in 0..n_cond {
            cond_vocab_sizes.push(read_u32(&mut r)? as usize);
        }
        let config = NetConfig {
            n_layers,
            model_dim,
            ff_dim,
            n_heads,
            conv_kernel,
            patch_len,
            cond_vocab_sizes,
            precision: F::PRECISION,
        };
        config.validate()?;

        let base_year = i64::from_le_bytes(read_exact::<8>(&mut r)?) as i32;
        let n_years = read_u32(&mut r)? as usize;
        let n_categories = read_u32(&mut r)? as usize;
        let mut categories = Vec::with_capacity(n_categories);
        for _ in 0..n_categories {
            categories.push(read_str(&mut r)?);
        }
        let vocab = CondVocab { base_year, n_years, categories };

        let iters_done = read_u64(&mut r)?;
        let flags = read_exact::<1>(&mut r)?[0];
        let has_opt = flags & 1 != 0;
        let opt_step = if has_opt { read_u64(&mut r)? } else { 0 };

        let n_tensors = read_u32(&mut r)? as usize;
        let mut tensors: HashMap<String, Vec<F>> = HashMap::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = read_str(&mut r)?;
            let dtype = read_exact::<1>(&mut r)?[0];
            let dtype = Precision::from_tag(dtype)
                .ok_or_else(|| Error::Format(format!("bad dtype tag {dtype}")))?;
            if dtype != stored_precision {
                return Err(Error::Format("mixed dtypes in checkpoint".into()));
            }
            let ndim = read_exact::<1>(&mut r)?[0] as usize;
            let mut len = 1usize;
            for _ in 0..ndim {
                len *= read_u64(&mut r)? as usize;
            }
            let elem = match dtype {
                Precision::F32 => 4,
                Precision::F64 => 8,
            };
            let mut bytes = vec![0u8; len * elem];
            r.read_exact(&mut bytes)?;
            let mut data = Vec::with_capacity(len);
            match dtype {
                Precision::F32 => {
                    for chunk in bytes.chunks_exact(4) {
                        data.push(F::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64));
                    }
                }
                Precision::F64 => {
                    for chunk in bytes.chunks_exact(8) {
                        data.push(F::from_f64(f64::from_le_bytes(chunk.try_into().unwrap())));
                    }
                }
            }
            tensors.insert(name, data);
        }

        let fill = |prefix: &str, tensors: &HashMap<String, Vec<F>>| -> Result<NetParams<F>> {
            let mut params = NetParams::zeros(&config);
            let names: Vec<String> = params
                .named_tensors()
                .iter()
                .map(|(n, _, _)| n.clone())
                .collect();
            for (name, slice) in names.iter().zip(params.flat_slices_mut()) {
                let key = format!("{prefix}/{name}");
                let data = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {key}")))?;
                if data.len() != slice.len() {
                    return Err(Error::Format(format!(
                        "tensor {key} has {} values, config implies {}",
                        data.len(),
                        slice.len()
                    )));
                }
                slice.copy_from_slice(data);
            }
            Ok(params)
        };

        let raw = fill("raw", &tensors)?;
        let ema = fill("ema", &tensors)?;
        let opt = if has_opt {
            Some((fill("opt/m", &tensors)?, fill("opt/v", &tensors)?, opt_step))
        } else {
            None
        };

        Ok(Checkpoint { config, vocab, iters_done, raw, ema, opt })
    }
}

/// Hex SHA-256 over the EMA parameter set (names, shapes and raw values),
/// recorded in sampling manifests so it is checkable that every task command
/// ran against the same network.
pub fn params_checksum<F: Real>(params: &NetParams<F>) -> String {
    let mut hasher = Sha256::new();
    for (name, shape, data) in params.named_tensors() {
        hasher.update(name.as_bytes());
        for d in shape {
            hasher.update((d as u64).to_le_bytes());
        }
        let mut bytes = Vec::with_capacity(data.len() * F::BYTES);
        for &v in data {
            v.write_le_bytes(&mut bytes);
        }
        hasher.update(&bytes);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
