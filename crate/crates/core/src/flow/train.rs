//! Conditional flow-matching training: minibatch AdamW on the velocity
//! regression loss, with an exponential moving average of the weights.
//!
//! Determinism: batch indices, times and noise are drawn sequentially from
//! named substreams before the parallel section; per-sample gradients are
//! accumulated into per-slot buffers and reduced in slot order, so the
//! result is bit-identical for a fixed seed regardless of thread count.

use rayon::prelude::*;

use crate::data::{Categorical, Dataset, Split};
use crate::error::{Error, Result};
use crate::flow::interpolate;
use crate::nn::{Checkpoint, NetConfig, NetParams, Real, SeqMeta, VelocityNet};
use crate::rng;

/// Optimizer and loop settings. The optimizer is AdamW with betas
/// (0.9, 0.999) and eps 1e-8.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub n_iters: u64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Validation-loss interval in iterations; 0 disables validation.
    pub val_interval: u64,
    pub log_interval: u64,
    /// Training times are drawn uniformly from [t_floor, 1).
    pub t_floor: f64,
}

impl TrainConfig {
    pub fn new(n_iters: u64, seed: u64) -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            n_iters,
            ema_decay: 0.999,
            seed,
            val_interval: 0,
            log_interval: 100,
            t_floor: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub iter: u64,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

pub struct TrainOutcome<F: Real> {
    pub checkpoint: Checkpoint<F>,
    pub log: Vec<LogRow>,
    /// Loss went non-finite; the checkpoint holds the last finite state.
    pub diverged: bool,
}

pub(crate) struct Prepared<F> {
    pub x1: Vec<F>,
    pub codes: Vec<usize>,
    pub meta: SeqMeta,
}

pub(crate) fn prepare_items<F: Real>(
    dataset: &Dataset,
    split: Split,
    vocab: &crate::data::CondVocab,
) -> Result<Vec<Prepared<F>>> {
    dataset
        .split_profiles(split)
        .into_iter()
        .map(|p| {
            let codes = Categorical::of_profile(p)?.codes(vocab)?;
            Ok(Prepared {
                x1: p.values().iter().map(|&v| F::from_f64(v)).collect(),
                codes,
                meta: SeqMeta::of_profile(p),
            })
        })
        .collect()
}

/// Squared velocity error over the valid steps, averaged by valid length.
pub fn cfm_element_loss<F: Real>(u: &[F], target: &[F], valid_len: usize) -> F {
    let mut acc = F::zero();
    for i in 0..valid_len {
        let e = u[i] - target[i];
        acc = acc + e * e;
    }
    acc / F::from_f64(valid_len as f64)
}

struct Draw<F> {
    item: usize,
    t: F,
    x0: Vec<F>,
}

fn make_draws<F: Real>(
    items: &[Prepared<F>],
    indices: &[usize],
    noise: &mut rand_chacha::ChaCha12Rng,
    t_floor: f64,
) -> Vec<Draw<F>> {
    use rand::Rng;
    indices
        .iter()
        .map(|&item| {
            let meta = &items[item].meta;
            let t = F::from_f64(noise.gen_range(t_floor..1.0));
            let x0: Vec<F> = (0..meta.padded_len)
                .map(|i| if i < meta.valid_len { F::standard_normal(noise) } else { F::zero() })
                .collect();
            Draw { item, t, x0 }
        })
        .collect()
}

/// Loss and per-slot gradients for one batch of draws. Returns the batch
/// mean loss; gradients land in `slot_grads` (one buffer per draw, zeroed
/// here).
fn cfm_batch<F: Real>(
    net: &VelocityNet<F>,
    items: &[Prepared<F>],
    draws: &[Draw<F>],
    slot_grads: &mut [NetParams<F>],
) -> Result<F> {
    let b = draws.len();
    let inv_b = F::from_f64(1.0 / b as f64);
    let losses: Vec<Result<F>> = slot_grads
        .par_iter_mut()
        .zip(draws.par_iter())
        .map(|(gbuf, draw)| {
            gbuf.zero_out();
            let it = &items[draw.item];
            let xt = interpolate(&draw.x0, &it.x1, draw.t);
            let (u, trace) = net.forward_traced(&xt, draw.t, &it.codes, &it.meta)?;
            let v = it.meta.valid_len;
            let inv_v = F::from_f64(1.0 / v as f64);
            let mut loss = F::zero();
            let mut d_out = vec![F::zero(); it.meta.padded_len];
            let two = F::from_f64(2.0);
            for i in 0..v {
                let target = it.x1[i] - draw.x0[i];
                let e = u[i] - target;
                loss = loss + e * e;
                d_out[i] = two * e * inv_v * inv_b;
            }
            net.backward(&trace, &d_out, &it.meta, gbuf);
            Ok(loss * inv_v)
        })
        .collect();
    let mut total = F::zero();
    for l in losses {
        total = total + l?;
    }
    Ok(total * inv_b)
}

/// Flow-matching loss and summed gradients for a batch of data profiles;
/// noise and times are drawn from `rng` (one t and one x0 per element).
pub fn cfm_loss<F: Real>(
    net: &VelocityNet<F>,
    batch: &[(Vec<F>, Vec<usize>, SeqMeta)],
    rng: &mut rand_chacha::ChaCha12Rng,
    t_floor: f64,
) -> Result<(F, NetParams<F>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let items: Vec<Prepared<F>> = batch
        .iter()
        .map(|(x1, codes, meta)| Prepared { x1: x1.clone(), codes: codes.clone(), meta: *meta })
        .collect();
    let indices: Vec<usize> = (0..items.len()).collect();
    let draws = make_draws(&items, &indices, rng, t_floor);
    let mut slot_grads: Vec<NetParams<F>> = (0..items.len()).map(|_| NetParams::zeros(&net.config)).collect();
    let loss = cfm_batch(net, &items, &draws, &mut slot_grads)?;
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite flow-matching loss"));
    }
    let mut total = NetParams::zeros(&net.config);
    for g in &slot_grads {
        total.axpy(g, F::one());
    }
    Ok((loss, total))
}

fn adamw_step<F: Real>(
    params: &mut NetParams<F>,
    grads: &NetParams<F>,
    m: &mut NetParams<F>,
    v: &mut NetParams<F>,
    step: u64,
    lr: f64,
    wd: f64,
) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let b1 = F::from_f64(B1);
    let b2 = F::from_f64(B2);
    let one_m_b1 = F::from_f64(1.0 - B1);
    let one_m_b2 = F::from_f64(1.0 - B2);
    let corr1 = F::from_f64(1.0 / (1.0 - B1.powi(step as i32)));
    let corr2 = F::from_f64(1.0 / (1.0 - B2.powi(step as i32)));
    let lr_f = F::from_f64(lr);
    let wd_f = F::from_f64(wd);
    let eps = F::from_f64(EPS);
    let gs = grads.flat_slices();
    let ms = m.flat_slices_mut();
    // Split borrows: collect raw slices first.
    let vs = v.flat_slices_mut();
    for (((p_s, g_s), m_s), v_s) in params.flat_slices_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        for i in 0..p_s.len() {
            let g = g_s[i];
            m_s[i] = b1 * m_s[i] + one_m_b1 * g;
            v_s[i] = b2 * v_s[i] + one_m_b2 * g * g;
            let mhat = m_s[i] * corr1;
            let vhat = v_s[i] * corr2;
            p_s[i] = p_s[i] - lr_f * (mhat / (vhat.sqrt() + eps) + wd_f * p_s[i]);
        }
    }
}

/// ema = decay * ema + (1 - decay) * raw.
pub fn ema_update<F: Real>(ema: &mut NetParams<F>, raw: &NetParams<F>, decay: f64) {
    let d = F::from_f64(decay);
    let one_m_d = F::from_f64(1.0 - decay);
    for (e_s, r_s) in ema.flat_slices_mut().into_iter().zip(raw.flat_slices()) {
        for (e, r) in e_s.iter_mut().zip(r_s.iter()) {
            *e = d * *e + one_m_d * *r;
        }
    }
}

fn validation_loss<F: Real>(net: &VelocityNet<F>, items: &[Prepared<F>], seed: u64, t_floor: f64) -> Result<f64> {
    use rand::Rng;
    // Identical draws on every call so successive evaluations are comparable.
    let mut vrng = rng::substream(seed, "val_noise");
    let draws: Vec<(F, Vec<F>)> = items
        .iter()
        .map(|it| {
            let t = F::from_f64(vrng.gen_range(t_floor..1.0));
            let x0: Vec<F> = (0..it.meta.padded_len)
                .map(|i| if i < it.meta.valid_len { F::standard_normal(&mut vrng) } else { F::zero() })
                .collect();
            (t, x0)
        })
        .collect();
    let losses: Vec<Result<f64>> = items
        .par_iter()
        .zip(draws.par_iter())
        .map(|(it, (t, x0))| {
            let xt = interpolate(x0, &it.x1, *t);
            let u = net.forward(&xt, *t, &it.codes, &it.meta)?;
            let target: Vec<F> = it.x1.iter().zip(x0.iter()).map(|(&a, &b)| a - b).collect();
            Ok(cfm_element_loss(&u, &target, it.meta.valid_len).as_f64())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / items.len() as f64)
}

/// Run minibatch flow-matching training, maintaining raw and EMA parameter
/// sets. On divergence (non-finite loss) training stops and the outcome
/// carries the last finite state with `diverged` set.
pub fn train<F: Real>(
    dataset: &Dataset,
    net_config: NetConfig,
    cfg: &TrainConfig,
    resume: Option<Checkpoint<F>>,
) -> Result<TrainOutcome<F>> {
    use rand::Rng;
    cfg.validate()?;
    net_config.validate()?;
    let vocab = dataset.vocab()?;
    if net_config.cond_vocab_sizes != vocab.sizes() {
        return Err(Error::invalid(format!(
            "network cond_vocab_sizes {:?} do not match dataset vocabulary {:?}",
            net_config.cond_vocab_sizes,
            vocab.sizes()
        )));
    }
    let items: Vec<Prepared<F>> = prepare_items(dataset, Split::Train, &vocab)?;
    if items.is_empty() {
        return Err(Error::invalid("train split is empty"));
    }
    let val_items: Vec<Prepared<F>> = prepare_items(dataset, Split::Val, &vocab)?;

    let (mut net, mut ema, mut m, mut v, mut adam_step_count, start_iter) = match resume {
        Some(ck) => {
            if ck.config.n_layers != net_config.n_layers
                || ck.config.model_dim != net_config.model_dim
                || ck.config.ff_dim != net_config.ff_dim
                || ck.config.n_heads != net_config.n_heads
                || ck.config.cond_vocab_sizes != net_config.cond_vocab_sizes
            {
                return Err(Error::invalid("resume checkpoint does not match the requested network config"));
            }
            let (m, v, step) = match ck.opt {
                Some((m, v, step)) => (m, v, step),
                None => (NetParams::zeros(&net_config), NetParams::zeros(&net_config), 0),
            };
            (
                VelocityNet::new(net_config.clone(), ck.raw)?,
                ck.ema,
                m,
                v,
                step,
                ck.iters_done,
            )
        }
        None => {
            let mut init_rng = rng::substream(cfg.seed, "init");
            let net = VelocityNet::init(net_config.clone(), &mut init_rng)?;
            let ema = net.params.clone();
            (
                net,
                ema,
                NetParams::zeros(&net_config),
                NetParams::zeros(&net_config),
                0,
                0,
            )
        }
    };

    let mut batch_rng = rng::substream(cfg.seed, "batch");
    let mut noise_rng = rng::substream(cfg.seed, "noise_train");
    // Fast-forward the streams on resume so a resumed run keeps drawing
    // fresh batches rather than replaying the first ones.
    for _ in 0..start_iter {
        for _ in 0..cfg.batch_size {
            let _ = batch_rng.gen_range(0..items.len());
        }
    }

    let mut slot_grads: Vec<NetParams<F>> =
        (0..cfg.batch_size).map(|_| NetParams::zeros(&net_config)).collect();
    let mut grad_accum = NetParams::zeros(&net_config);
    let mut log = Vec::new();
    let mut diverged = false;

    for iter in start_iter..cfg.n_iters {
        let indices: Vec<usize> =
            (0..cfg.batch_size).map(|_| batch_rng.gen_range(0..items.len())).collect();
        let draws = make_draws(&items, &indices, &mut noise_rng, cfg.t_floor);
        let loss = cfm_batch(&net, &items, &draws, &mut slot_grads)?;
        if !loss.is_finite() {
            log.push(LogRow { iter, loss: loss.as_f64(), val_loss: None });
            diverged = true;
            break;
        }
        grad_accum.zero_out();
        for g in &slot_grads {
            grad_accum.axpy(g, F::one());
        }
        adam_step_count += 1;
        adamw_step(
            &mut net.params,
            &grad_accum,
            &mut m,
            &mut v,
            adam_step_count,
            cfg.learning_rate,
            cfg.weight_decay,
        );
        ema_update(&mut ema, &net.params, cfg.ema_decay);

        let done = iter + 1;
        let want_log = cfg.log_interval > 0 && (done % cfg.log_interval == 0 || done == cfg.n_iters);
        let want_val = cfg.val_interval > 0
            && !val_items.is_empty()
            && (done % cfg.val_interval == 0 || done == cfg.n_iters);
        if want_log || want_val {
            let val_loss = if want_val {
                Some(validation_loss(&net, &val_items, cfg.seed, cfg.t_floor)?)
            } else {
                None
            };
            log.push(LogRow { iter: done, loss: loss.as_f64(), val_loss });
        }
    }

    let iters_done = if diverged {
        log.last().map(|r| r.iter).unwrap_or(start_iter)
    } else {
        cfg.n_iters
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: net_config,
            vocab,
            iters_done,
            raw: net.params,
            ema,
            opt: Some((m, v, adam_step_count)),
        },
        log,
        diverged,
    })
}
