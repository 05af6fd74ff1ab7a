//! Network configuration and the flat parameter store.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::real::{Precision, Real};

/// Velocity-network hyperparameters. Shapes of every tensor are fully
/// determined by this struct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    /// Kernel length of the initial convolution over tokens; odd.
    pub conv_kernel: usize,
    /// Non-overlapping steps folded into one token.
    pub patch_len: usize,
    /// Vocabulary size per categorical condition field.
    pub cond_vocab_sizes: Vec<usize>,
    pub precision: Precision,
}

impl NetConfig {
    /// Small configuration that trains on a desk machine.
    pub fn desk(cond_vocab_sizes: Vec<usize>, precision: Precision) -> Self {
        NetConfig {
            n_layers: 4,
            model_dim: 64,
            ff_dim: 256,
            n_heads: 4,
            conv_kernel: 9,
            patch_len: 4,
            cond_vocab_sizes,
            precision,
        }
    }

    /// Full-scale configuration (12 layers, d=128, d_ff=512).
    pub fn paper_scale(cond_vocab_sizes: Vec<usize>, precision: Precision) -> Self {
        NetConfig {
            n_layers: 12,
            model_dim: 128,
            ff_dim: 512,
            n_heads: 8,
            conv_kernel: 9,
            patch_len: 4,
            cond_vocab_sizes,
            precision,
        }
    }

    /// Minimal configuration for gradient checks and unit tests.
    pub fn tiny(cond_vocab_sizes: Vec<usize>) -> Self {
        NetConfig {
            n_layers: 1,
            model_dim: 8,
            ff_dim: 16,
            n_heads: 2,
            conv_kernel: 3,
            patch_len: 2,
            cond_vocab_sizes,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.model_dim == 0 || self.ff_dim == 0 || self.n_heads == 0 {
            return Err(Error::invalid("all network dimensions must be positive"));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::invalid("model_dim must be even for sinusoidal embedding"));
        }
        if self.ff_dim < self.model_dim {
            return Err(Error::invalid("ff_dim must be >= model_dim"));
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel == 0 {
            return Err(Error::invalid("conv_kernel must be odd and positive"));
        }
        if self.patch_len == 0 {
            return Err(Error::invalid("patch_len must be positive"));
        }
        if self.cond_vocab_sizes.is_empty() || self.cond_vocab_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid("cond_vocab_sizes must be non-empty and positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn n_cond_fields(&self) -> usize {
        self.cond_vocab_sizes.len()
    }
}

/// A dense map `y = x W + b` with `w: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearP<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

/// Two dense maps with SiLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpP<F> {
    pub l1: LinearP<F>,
    pub l2: LinearP<F>,
}

/// 1-D convolution over the token axis, `w: [kernel, in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvP<F> {
    pub w: Array3<F>,
    pub b: Array1<F>,
}

/// The three modulation MLPs (scale, shift, gate) of one sub-layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationP<F> {
    pub lambda: MlpP<F>,
    pub beta: MlpP<F>,
    pub sigma: MlpP<F>,
}

/// One transformer layer: attention over [sequence ‖ condition tokens] plus a
/// feed-forward block, each wrapped in modulated layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerP<F> {
    pub wq: LinearP<F>,
    pub wk: LinearP<F>,
    pub wv: LinearP<F>,
    pub wo: LinearP<F>,
    pub attn_mod: ModulationP<F>,
    pub ff: MlpP<F>,
    pub ff_mod: ModulationP<F>,
}

/// Every learnable tensor of the velocity network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<F> {
    pub conv: ConvP<F>,
    pub pe_mlp: MlpP<F>,
    pub t_mlp: MlpP<F>,
    /// One embedding table per categorical condition field.
    pub cond_tables: Vec<Array2<F>>,
    /// Order-defining embedding added to condition token at slot j.
    pub slot_embed: Array2<F>,
    pub layers: Vec<LayerP<F>>,
    pub final_proj: LinearP<F>,
}

fn trunc_normal<F: Real, R: Rng>(rng: &mut R, std: f64) -> F {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return F::from_f64(z * std);
        }
    }
}

fn linear_init<F: Real, R: Rng>(rng: &mut R, n_in: usize, n_out: usize, std: f64) -> LinearP<F> {
    LinearP {
        w: Array2::from_shape_fn((n_in, n_out), |_| trunc_normal(rng, std)),
        b: Array1::zeros(n_out),
    }
}

fn linear_zeros<F: Real>(n_in: usize, n_out: usize) -> LinearP<F> {
    LinearP {
        w: Array2::zeros((n_in, n_out)),
        b: Array1::zeros(n_out),
    }
}

fn mlp_init<F: Real, R: Rng>(rng: &mut R, n_in: usize, hidden: usize, n_out: usize, std: f64) -> MlpP<F> {
    MlpP {
        l1: linear_init(rng, n_in, hidden, std),
        l2: linear_init(rng, hidden, n_out, std),
    }
}

impl<F: Real> NetParams<F> {
    /// Initialize: truncated normal (std 0.02) weights, zero biases, zero
    /// final projection, zero adaLN gates so the network starts as the
    /// identity map with zero output.
    pub fn init<R: Rng>(config: &NetConfig, rng: &mut R) -> Self {
        let d = config.model_dim;
        let std = 0.02;
        let mod_init = |rng: &mut R| ModulationP {
            lambda: mlp_init(rng, d, d, d, std),
            beta: mlp_init(rng, d, d, d, std),
            // Zero gate: the second map of the sigma MLP starts at zero.
            sigma: MlpP {
                l1: linear_init(rng, d, d, std),
                l2: linear_zeros(d, d),
            },
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerP {
                wq: linear_init(rng, d, d, std),
                wk: linear_init(rng, d, d, std),
                wv: linear_init(rng, d, d, std),
                wo: linear_init(rng, d, d, std),
                attn_mod: mod_init(rng),
                ff: MlpP {
                    l1: linear_init(rng, d, config.ff_dim, std),
                    l2: linear_init(rng, config.ff_dim, d, std),
                },
                ff_mod: mod_init(rng),
            })
            .collect();
        NetParams {
            conv: ConvP {
                w: Array3::from_shape_fn((config.conv_kernel, config.patch_len, d), |_| {
                    trunc_normal(rng, std)
                }),
                b: Array1::zeros(d),
            },
            pe_mlp: mlp_init(rng, d, d, d, std),
            t_mlp: mlp_init(rng, d, d, d, std),
            cond_tables: config
                .cond_vocab_sizes
                .iter()
                .map(|&v| Array2::from_shape_fn((v, d), |_| trunc_normal(rng, std)))
                .collect(),
            slot_embed: Array2::from_shape_fn((config.n_cond_fields(), d), |_| trunc_normal(rng, std)),
            layers,
            final_proj: linear_zeros(d, config.patch_len),
        }
    }

    /// Same shapes, all zeros: a gradient/optimizer-state buffer.
    pub fn zeros(config: &NetConfig) -> Self {
        let d = config.model_dim;
        let zmod = || ModulationP {
            lambda: MlpP { l1: linear_zeros(d, d), l2: linear_zeros(d, d) },
            beta: MlpP { l1: linear_zeros(d, d), l2: linear_zeros(d, d) },
            sigma: MlpP { l1: linear_zeros(d, d), l2: linear_zeros(d, d) },
        };
        NetParams {
            conv: ConvP {
                w: Array3::zeros((config.conv_kernel, config.patch_len, d)),
                b: Array1::zeros(d),
            },
            pe_mlp: MlpP { l1: linear_zeros(d, d), l2: linear_zeros(d, d) },
            t_mlp: MlpP { l1: linear_zeros(d, d), l2: linear_zeros(d, d) },
            cond_tables: config
                .cond_vocab_sizes
                .iter()
                .map(|&v| Array2::zeros((v, d)))
                .collect(),
            slot_embed: Array2::zeros((config.n_cond_fields(), d)),
            layers: (0..config.n_layers)
                .map(|_| LayerP {
                    wq: linear_zeros(d, d),
                    wk: linear_zeros(d, d),
                    wv: linear_zeros(d, d),
                    wo: linear_zeros(d, d),
                    attn_mod: zmod(),
                    ff: MlpP {
                        l1: linear_zeros(d, config.ff_dim),
                        l2: linear_zeros(config.ff_dim, d),
                    },
                    ff_mod: zmod(),
                })
                .collect(),
            final_proj: linear_zeros(d, config.patch_len),
        }
    }

    /// Set every element to zero, keeping shapes.
    pub fn zero_out(&mut self) {
        for s in self.flat_slices_mut() {
            for v in s {
                *v = F::zero();
            }
        }
    }

    /// Convert precision, e.g. to run a f32 checkpoint in f64.
    pub fn cast<G: Real>(&self) -> NetParams<G> {
        let conv_lin = |l: &LinearP<F>| LinearP {
            w: l.w.mapv(|v| G::from_f64(v.as_f64())),
            b: l.b.mapv(|v| G::from_f64(v.as_f64())),
        };
        let conv_mlp = |m: &MlpP<F>| MlpP { l1: conv_lin(&m.l1), l2: conv_lin(&m.l2) };
        let conv_mod = |m: &ModulationP<F>| ModulationP {
            lambda: conv_mlp(&m.lambda),
            beta: conv_mlp(&m.beta),
            sigma: conv_mlp(&m.sigma),
        };
        NetParams {
            conv: ConvP {
                w: self.conv.w.mapv(|v| G::from_f64(v.as_f64())),
                b: self.conv.b.mapv(|v| G::from_f64(v.as_f64())),
            },
            pe_mlp: conv_mlp(&self.pe_mlp),
            t_mlp: conv_mlp(&self.t_mlp),
            cond_tables: self
                .cond_tables
                .iter()
                .map(|t| t.mapv(|v| G::from_f64(v.as_f64())))
                .collect(),
            slot_embed: self.slot_embed.mapv(|v| G::from_f64(v.as_f64())),
            layers: self
                .layers
                .iter()
                .map(|l| LayerP {
                    wq: conv_lin(&l.wq),
                    wk: conv_lin(&l.wk),
                    wv: conv_lin(&l.wv),
                    wo: conv_lin(&l.wo),
                    attn_mod: conv_mod(&l.attn_mod),
                    ff: conv_mlp(&l.ff),
                    ff_mod: conv_mod(&l.ff_mod),
                })
                .collect(),
            final_proj: conv_lin(&self.final_proj),
        }
    }

    /// All tensors as `(name, shape, slice)` in the canonical order used by
    /// the checkpoint format and the flat iteration below.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out: Vec<(String, Vec<usize>, &[F])> = Vec::new();
        macro_rules! push {
            ($name:expr, $arr:expr) => {
                out.push(($name, $arr.shape().to_vec(), $arr.as_slice().unwrap()))
            };
        }
        macro_rules! push_lin {
            ($name:expr, $l:expr) => {{
                push!(format!("{}/w", $name), $l.w);
                push!(format!("{}/b", $name), $l.b);
            }};
        }
        macro_rules! push_mlp {
            ($name:expr, $m:expr) => {{
                push_lin!(format!("{}/l1", $name), $m.l1);
                push_lin!(format!("{}/l2", $name), $m.l2);
            }};
        }
        push!("conv/w".to_string(), self.conv.w);
        push!("conv/b".to_string(), self.conv.b);
        push_mlp!("pe", self.pe_mlp);
        push_mlp!("t", self.t_mlp);
        for (j, t) in self.cond_tables.iter().enumerate() {
            push!(format!("cond/table{j}"), t);
        }
        push!("cond/slot".to_string(), self.slot_embed);
        for (i, layer) in self.layers.iter().enumerate() {
            push_lin!(format!("layer{i}/attn/wq"), layer.wq);
            push_lin!(format!("layer{i}/attn/wk"), layer.wk);
            push_lin!(format!("layer{i}/attn/wv"), layer.wv);
            push_lin!(format!("layer{i}/attn/wo"), layer.wo);
            push_mlp!(format!("layer{i}/attn/mod/lambda"), layer.attn_mod.lambda);
            push_mlp!(format!("layer{i}/attn/mod/beta"), layer.attn_mod.beta);
            push_mlp!(format!("layer{i}/attn/mod/sigma"), layer.attn_mod.sigma);
            push_mlp!(format!("layer{i}/ff"), layer.ff);
            push_mlp!(format!("layer{i}/ff/mod/lambda"), layer.ff_mod.lambda);
            push_mlp!(format!("layer{i}/ff/mod/beta"), layer.ff_mod.beta);
            push_mlp!(format!("layer{i}/ff/mod/sigma"), layer.ff_mod.sigma);
        }
        push_lin!("final", self.final_proj);
        out
    }

    /// Flat slices in the same canonical order as [`Self::named_tensors`].
    pub fn flat_slices(&self) -> Vec<&[F]> {
        self.named_tensors().into_iter().map(|(_, _, s)| s).collect()
    }

    pub fn flat_slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        macro_rules! push {
            ($arr:expr) => {
                out.push($arr.as_slice_mut().unwrap())
            };
        }
        macro_rules! push_lin {
            ($l:expr) => {{
                push!($l.w);
                push!($l.b);
            }};
        }
        macro_rules! push_mlp {
            ($m:expr) => {{
                push_lin!($m.l1);
                push_lin!($m.l2);
            }};
        }
        push!(self.conv.w);
        push!(self.conv.b);
        push_mlp!(self.pe_mlp);
        push_mlp!(self.t_mlp);
        for t in self.cond_tables.iter_mut() {
            push!(t);
        }
        push!(self.slot_embed);
        for layer in self.layers.iter_mut() {
            push_lin!(layer.wq);
            push_lin!(layer.wk);
            push_lin!(layer.wv);
            push_lin!(layer.wo);
            push_mlp!(layer.attn_mod.lambda);
            push_mlp!(layer.attn_mod.beta);
            push_mlp!(layer.attn_mod.sigma);
            push_mlp!(layer.ff);
            push_mlp!(layer.ff_mod.lambda);
            push_mlp!(layer.ff_mod.beta);
            push_mlp!(layer.ff_mod.sigma);
        }
        push_lin!(self.final_proj);
        out
    }

    pub fn n_params(&self) -> usize {
        self.flat_slices().iter().map(|s| s.len()).sum()
    }

    /// `self += other * scale`, used for gradient accumulation.
    pub fn axpy(&mut self, other: &Self, scale: F) {
        let others = other.flat_slices();
        for (dst, src) in self.flat_slices_mut().into_iter().zip(others) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d = *d + *s * scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn vocab() -> Vec<usize> {
        vec![2, 12, 4, 7, 2, 2]
    }

    #[test]
    fn shapes_and_order_agree() {
        let cfg = NetConfig::tiny(vocab());
        cfg.validate().unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
        let mut p: NetParams<f64> = NetParams::init(&cfg, &mut rng);
        let named = p.named_tensors();
        let n_named = named.len();
        let total: usize = named.iter().map(|(_, _, s)| s.len()).collect::<Vec<_>>().iter().sum();
        assert_eq!(total, p.n_params());
        let flat = p.flat_slices_mut();
        assert_eq!(flat.len(), n_named);
    }

    #[test]
    fn init_zeroes_gates_and_final() {
        let cfg = NetConfig::tiny(vocab());
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        let p: NetParams<f64> = NetParams::init(&cfg, &mut rng);
        assert!(p.final_proj.w.iter().all(|&v| v == 0.0));
        assert!(p.layers[0].attn_mod.sigma.l2.w.iter().all(|&v| v == 0.0));
        assert!(p.layers[0].attn_mod.sigma.l2.b.iter().all(|&v| v == 0.0));
        assert!(p.layers[0].wq.w.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = NetConfig::desk(vocab(), Precision::F32);
        cfg.validate().unwrap();
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = NetConfig::desk(vocab(), Precision::F32);
        cfg.conv_kernel = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = NetConfig::desk(vocab(), Precision::F32);
        cfg.ff_dim = 8;
        assert!(cfg.validate().is_err());
    }
}
