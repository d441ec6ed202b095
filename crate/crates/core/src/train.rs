//! Adam training loop, evaluation, metric history and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::metrics::{Confusion, MetricSet};
use crate::model::{ForwardOptions, Model, ModelConfig, ParamId, ParamStore, SegSample};
use crate::tensor::{load_ptn, save_ptn, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub rounds: usize,
    /// Optimizer steps per round; 0 means one pass over the training set.
    pub steps_per_round: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 4,
            rounds: 400,
            steps_per_round: 0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr must be positive and batch_size ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update. Parameters in `frozen` are left untouched
    /// and their moments are not advanced.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], frozen: &[ParamId]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(invalid(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, t) in store.tensors_mut().enumerate() {
            if frozen.contains(&ParamId(i)) {
                continue;
            }
            let (m, v, gr) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (k, p) in t.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gr[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gr[k] * gr[k];
                *p -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One line of the metric history. Losses, rates and `sa_flops` are means
/// over the samples seen in the round; `dice` pools the confusion counts of
/// those samples' predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub l_seg: f64,
    pub l_ssa: f64,
    pub l_g: f64,
    pub dice: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub sa_flops: u64,
}

impl RoundRecord {
    pub const CSV_HEADER: &'static str = "round,l_seg,l_ssa,l_g,dice,alpha,lambda,sa_flops";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round, self.l_seg, self.l_ssa, self.l_g, self.dice, self.alpha, self.lambda, self.sa_flops
        )
    }
}

pub fn history_csv(history: &[RoundRecord]) -> String {
    let mut s = String::from(RoundRecord::CSV_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

/// Where a failing batch is written when the loss turns non-finite.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub exec: Exec,
    pub dump_dir: Option<PathBuf>,
}

fn dump_batch(dir: &Path, round: usize, batch: &[&SegSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let images: Vec<f64> = batch.iter().flat_map(|s| s.image.data().iter().copied()).collect();
    let masks: Vec<f64> = batch.iter().flat_map(|s| s.mask.iter().map(|&m| m as f64)).collect();
    let mut shape = vec![batch.len()];
    shape.extend_from_slice(batch[0].image.shape());
    let path = dir.join(format!("nonfinite_round{round}_images.ptn"));
    save_ptn(&path, &Tensor::new(shape, images)?)?;
    let n = batch[0].mask.len();
    save_ptn(dir.join(format!("nonfinite_round{round}_masks.ptn")), &Tensor::new([batch.len(), n], masks)?)?;
    Ok(path)
}

/// Trains `model` in place and returns one record per round.
pub fn train(model: &mut Model, data: &[SegSample], cfg: &TrainConfig, opts: &TrainOptions) -> Result<Vec<RoundRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("empty training set"));
    }
    let mut adam = Adam::new(&model.store, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let steps = if cfg.steps_per_round == 0 {
        data.len().div_ceil(cfg.batch_size)
    } else {
        cfg.steps_per_round
    };
    let frozen_ids = model.warmup_frozen();
    let mut history = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let warmup = round < model.cfg.prune.g_frozen_rounds;
        let frozen: &[ParamId] = if warmup { &frozen_ids } else { &[] };
        let fwd = ForwardOptions {
            warmup_active: warmup,
            frozen: None,
        };
        let (mut l_seg, mut l_ssa, mut l_g, mut alpha, mut lambda, mut flops) = (0.0, 0.0, 0.0, 0.0, 0.0, 0u64);
        let mut seen = 0usize;
        let mut conf = Confusion::default();

        for _ in 0..steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size {
                if cursor == order.len() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&data[order[cursor]]);
                cursor += 1;
            }
            let results = opts.exec.try_map(&batch, |s| model.sample_grad(s, fwd))?;
            if let Some(bad) = results.iter().find(|r| !r.loss.total.is_finite()) {
                let detail = match &opts.dump_dir {
                    Some(dir) => format!("{:?}; batch written to {}", bad.loss, dump_batch(dir, round + 1, &batch)?.display()),
                    None => format!("{:?}", bad.loss),
                };
                return Err(Error::NonFinite { round: round + 1, detail });
            }

            let mut grads: Vec<Vec<f64>> = model.store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
            let scale = 1.0 / batch.len() as f64;
            for (r, s) in results.iter().zip(&batch) {
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v * scale;
                    }
                }
                l_seg += r.loss.l_seg;
                l_ssa += r.loss.l_ssa;
                l_g += r.loss.l_g;
                let nb = r.decisions.len().max(1) as f64;
                alpha += r.decisions.iter().map(|d| d.measured_alpha).sum::<f64>() / nb;
                lambda += r.decisions.iter().map(|d| d.measured_lambda).sum::<f64>() / nb;
                flops += r.sa_flops;
                conf.add(&r.pred, &s.mask)?;
                seen += 1;
            }
            adam.step(&mut model.store, &grads, frozen)?;
        }
        let k = seen as f64;
        history.push(RoundRecord {
            round: round + 1,
            l_seg: l_seg / k,
            l_ssa: l_ssa / k,
            l_g: l_g / k,
            dice: conf.metrics().dice,
            alpha: alpha / k,
            lambda: lambda / k,
            sa_flops: (flops as f64 / k).round() as u64,
        });
    }
    Ok(history)
}

/// Pooled metrics of `model` (pruning active) over `data`.
pub fn evaluate(model: &Model, data: &[SegSample], exec: Exec) -> Result<MetricSet> {
    let confs = exec.try_map(data, |s| {
        let pred = model.predict(&s.image, ForwardOptions::default())?;
        Confusion::from_masks(&pred, &s.mask)
    })?;
    let mut total = Confusion::default();
    for c in &confs {
        total.merge(c);
    }
    Ok(total.metrics())
}

/// Mean measured self-attention multiplies per sample over `data`.
pub fn mean_sa_flops(model: &Model, data: &[SegSample], exec: Exec) -> Result<(f64, u64)> {
    let per = exec.try_map(data, |s| model.forward(&s.image, ForwardOptions::default()).map(|(_, d)| (d.sa_flops(), d.sa_flops_unpruned())))?;
    let unpruned = per.first().map(|p| p.1).unwrap_or(0);
    Ok((per.iter().map(|p| p.0 as f64).sum::<f64>() / per.len().max(1) as f64, unpruned))
}

/// Writes every parameter as `<name>.ptn` plus `config.cfg` holding
/// `config_text`.
pub fn save_checkpoint(dir: &Path, model: &Model, config_text: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (_, name, t) in model.store.iter() {
        save_ptn(dir.join(format!("{name}.ptn")), t)?;
    }
    fs::write(dir.join("config.cfg"), config_text)?;
    Ok(())
}

/// Loads the parameters named by `cfg` from `dir`.
pub fn load_params(dir: &Path, cfg: ModelConfig) -> Result<Model> {
    let template = Model::new(cfg.clone(), 0)?;
    let mut store = ParamStore::default();
    for (_, name, t) in template.store.iter() {
        let path = dir.join(format!("{name}.ptn"));
        let loaded = load_ptn(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if loaded.shape() != t.shape() {
            return Err(Error::Format(format!("{name}: shape {:?}, expected {:?}", loaded.shape(), t.shape())));
        }
        store.add(name, loaded);
    }
    Model::from_store(cfg, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::pruning::PruneConfig;

    fn tiny_data(count: usize) -> Vec<SegSample> {
        generate(
            &SyntheticSpec {
                count,
                height: 16,
                width: 16,
                seed: 3,
                ..Default::default()
            },
            Exec::Sequential,
        )
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            rounds: 4,
            steps_per_round: 2,
            seed: 1,
            ..Default::default()
        }
    }

    #[test]
    fn adam_matches_hand_computation() {
        let mut store = ParamStore::default();
        store.add("x", Tensor::full([2], 1.0));
        store.add("y", Tensor::full([1], 5.0));
        let cfg = TrainConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut adam = Adam::new(&store, &cfg);
        adam.step(&mut store, &[vec![2.0, -0.5], vec![3.0]], &[ParamId(1)]).unwrap();
        // first step moves each coordinate by lr·sign(g) up to eps
        let x = store.get(ParamId(0)).data();
        assert!((x[0] - 0.9).abs() < 1e-8 && (x[1] - 1.1).abs() < 1e-8);
        assert_eq!(store.get(ParamId(1)).data(), &[5.0]);

        let x0 = store.get(ParamId(0)).data()[0];
        adam.step(&mut store, &[vec![1.0, 1.0], vec![3.0]], &[]).unwrap();
        let (m, v) = (0.9 * 0.1 * 2.0 + 0.1 * 1.0, 0.999 * 0.001 * 4.0 + 0.001 * 1.0);
        let step = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((store.get(ParamId(0)).data()[0] - (x0 - step)).abs() < 1e-12);
        assert!(store.get(ParamId(1)).data()[0] < 5.0);
    }

    #[test]
    fn training_is_deterministic_across_executors() {
        let data = tiny_data(6);
        let run = |exec| {
            let mut m = Model::new(ModelConfig::tiny(), 2).unwrap();
            let h = train(&mut m, &data, &tiny_cfg(), &TrainOptions { exec, dump_dir: None }).unwrap();
            (history_csv(&h), m.store)
        };
        let (a, sa) = run(Exec::Sequential);
        let (b, sb) = run(Exec::default());
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(a.lines().count(), 5);
        assert_eq!(a.lines().next().unwrap(), RoundRecord::CSV_HEADER);
    }

    #[test]
    fn warmup_keeps_g_and_disables_pruning() {
        let data = tiny_data(4);
        let mut cfg = ModelConfig::tiny();
        cfg.prune = PruneConfig {
            g_frozen_rounds: 2,
            ..Default::default()
        };
        let mut m = Model::new(cfg, 2).unwrap();
        let g_id = m.warmup_frozen()[0];
        let h = train(&mut m, &data, &tiny_cfg(), &TrainOptions::default()).unwrap();
        assert_eq!(m.store.get(g_id).data(), &[-2.0]);
        assert_eq!((h[0].alpha, h[0].lambda), (0.0, 0.0));
        assert_eq!((h[1].alpha, h[1].lambda), (0.0, 0.0));
        assert!(h[2].alpha > 0.0 || h[2].lambda > 0.0);
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let data = tiny_data(4);
        let mut m = Model::new(ModelConfig::tiny(), 4).unwrap();
        let cfg = TrainConfig {
            lr: 3e-3,
            rounds: 30,
            steps_per_round: 1,
            ..Default::default()
        };
        let h = train(&mut m, &data, &cfg, &TrainOptions::default()).unwrap();
        assert!(h[29].l_seg < h[0].l_seg, "{} vs {}", h[29].l_seg, h[0].l_seg);
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let data = tiny_data(4);
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::new(ModelConfig::tiny(), 2).unwrap();
        let id = m.store.find("head.b").unwrap();
        m.store.get_mut(id).data_mut()[0] = f64::NAN;
        let opts = TrainOptions {
            exec: Exec::Sequential,
            dump_dir: Some(dir.path().to_path_buf()),
        };
        let cfg = TrainConfig {
            steps_per_round: 1,
            ..tiny_cfg()
        };
        let err = train(&mut m, &data, &cfg, &opts).unwrap_err();
        assert!(matches!(err, Error::NonFinite { round: 1, .. }), "{err}");
        let t = load_ptn(dir.path().join("nonfinite_round1_images.ptn")).unwrap();
        assert_eq!(t.shape(), [4, 1, 16, 16]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::new(ModelConfig::tiny(), 9).unwrap();
        save_checkpoint(dir.path(), &m, "# empty\n").unwrap();
        let back = load_params(dir.path(), ModelConfig::tiny()).unwrap();
        assert_eq!(back.store, m.store);
        assert!(load_params(dir.path(), ModelConfig::default()).is_err());
    }

    #[test]
    fn evaluate_is_deterministic() {
        let data = tiny_data(5);
        let m = Model::new(ModelConfig::tiny(), 9).unwrap();
        let a = evaluate(&m, &data, Exec::Sequential).unwrap();
        assert_eq!(a, evaluate(&m, &data, Exec::default()).unwrap());
        for v in [a.dice, a.iou, a.acc, a.se, a.sp] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
