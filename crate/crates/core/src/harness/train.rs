use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::data::{augment, Dataset, SegSample};
use crate::error::{Error, Result};
use crate::models::Network;
use crate::tensor::{Scalar, Tensor};

/// Stream offsets keeping sample order and augmentation draws apart.
const ORDER_STREAM: u64 = 1 << 50;
const AUGMENT_STREAM: u64 = 1 << 51;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    /// Rate for the first half; divided by 10 afterwards.
    pub lr: f64,
    pub iterations: usize,
    pub batch: usize,
    pub momentum: f64,
    /// Training crop; `None` trains on whole samples (all the same size).
    pub crop: Option<(usize, usize)>,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Loss is logged every this many iterations (0 = never).
    pub log_every: usize,
    /// Where to dump the network if the loss stops being finite.
    pub diagnostic_dir: Option<PathBuf>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.001,
            iterations: 1000,
            batch: 10,
            momentum: 0.9,
            crop: None,
            seed: 1,
            threads: None,
            log_every: 0,
            diagnostic_dir: None,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some((h, w)) = self.crop {
            if h == 0 || w == 0 {
                return Err(Error::config("crop size must be positive"));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::config("thread count must be at least 1"));
        }
        Ok(())
    }

    /// Last iteration run at the initial rate.
    pub fn drop_at(&self) -> usize {
        self.iterations / 2
    }

    /// Learning rate of 1-based iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if iter <= self.drop_at() {
            self.lr
        } else {
            self.lr / 10.0
        }
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = SgdConfig::default();
        let crop = match kv.get("crop") {
            None | Some("none") | Some("full") => None,
            Some(_) => Some(kv.size_or("crop", (0, 0))?),
        };
        let threads: usize = kv.parse_or("threads", 0)?;
        let cfg = SgdConfig {
            lr: kv.parse_or("lr", d.lr)?,
            iterations: kv.parse_or("iters", d.iterations)?,
            batch: kv.parse_or("batch", d.batch)?,
            momentum: kv.parse_or("momentum", d.momentum)?,
            crop,
            seed: kv.parse_or("seed", d.seed)?,
            threads: (threads > 0).then_some(threads),
            log_every: kv.parse_or("log_every", d.log_every)?,
            diagnostic_dir: kv.get("diagnostic_dir").map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Minibatch loss per iteration.
    pub losses: Vec<f64>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l:.9}\n", i + 1));
        }
        s
    }
}

/// Runs `f` on a pool of `threads` workers, or directly when `None`.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("cannot start {n} worker threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Stacks samples into `[N,3,H,W]` images and `[N,H,W]` labels.
pub fn stack_batch<T: Scalar>(samples: &[SegSample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples.first().ok_or_else(|| Error::arg("empty minibatch"))?;
    let (h, w) = (first.height(), first.width());
    let mut img = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut lab = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape(format!(
                "minibatch mixes {h}x{w} with {}x{}; set a crop size",
                s.height(),
                s.width()
            )));
        }
        img.extend(s.image.data().iter().map(|&v| T::of(f64::from(v))));
        lab.extend(s.labels.data.iter().map(|&v| T::of(f64::from(v))));
    }
    let n = samples.len();
    Ok((Tensor::from_vec(&[n, 3, h, w], img)?, Tensor::from_vec(&[n, h, w], lab)?))
}

/// Momentum SGD on `net` over `data`. Each minibatch holds `batch` samples
/// in a seeded per-epoch shuffle, each augmented from its own random stream
/// (crop if configured, flip with probability one half). Frozen parameters
/// are never touched. A non-finite loss stops training with a numeric
/// error, after saving the network to `diagnostic_dir` if set.
pub fn train<T: Scalar>(net: &mut Network<T>, data: &Dataset, cfg: &SgdConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    with_threads(cfg.threads, || train_inner(net, data, cfg))?
}

fn train_inner<T: Scalar>(net: &mut Network<T>, data: &Dataset, cfg: &SgdConfig) -> Result<TrainReport> {
    let start = Instant::now();
    let mut velocity: HashMap<String, Vec<T>> = HashMap::new();
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut cursor = 0usize;
    let mut drawn = 0u64;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iter in 1..=cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(ORDER_STREAM + epoch);
                order.shuffle(&mut rng);
                epoch += 1;
                cursor = 0;
            }
            let sample = &data.samples[order[cursor]];
            cursor += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(AUGMENT_STREAM + drawn);
            drawn += 1;
            let crop = cfg.crop.unwrap_or((sample.height(), sample.width()));
            batch.push(augment(sample, crop, &mut rng)?);
        }
        let (images, labels) = stack_batch::<T>(&batch)?;
        let loss = net.forward_backward(images, labels)?;
        let lv = loss.to_f64().unwrap_or(f64::NAN);
        if !lv.is_finite() {
            let checkpoint = match &cfg.diagnostic_dir {
                Some(dir) => {
                    net.save(dir)?;
                    Some(dir.clone())
                }
                None => None,
            };
            return Err(Error::Numeric {
                message: format!("loss became {lv} at iteration {iter}"),
                checkpoint,
            });
        }
        losses.push(lv);
        let lr = T::of(cfg.lr_at(iter));
        let mu = T::of(cfg.momentum);
        net.graph_mut().update_params(|name, w, g| {
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for ((vi, wi), &gi) in v.iter_mut().zip(w.data_mut()).zip(g.data()) {
                *vi = mu * *vi + lr * gi;
                *wi -= *vi;
            }
        });
        if cfg.log_every > 0 && iter % cfg.log_every == 0 {
            log::info!("iter {iter}: loss {lv:.5} lr {}", cfg.lr_at(iter));
        }
    }
    Ok(TrainReport {
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_at_half() {
        let cfg = SgdConfig {
            lr: 0.001,
            iterations: 400,
            ..SgdConfig::default()
        };
        assert_eq!(cfg.lr_at(1), 0.001);
        assert_eq!(cfg.lr_at(200), 0.001);
        assert_eq!(cfg.lr_at(201), 0.0001);
        assert_eq!(cfg.lr_at(400), 0.0001);
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            SgdConfig { lr: 0.0, ..SgdConfig::default() },
            SgdConfig { batch: 0, ..SgdConfig::default() },
            SgdConfig { momentum: 1.0, ..SgdConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
