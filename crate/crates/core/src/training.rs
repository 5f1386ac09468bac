//! Charbonnier loss, cosine schedule, scale sampling and the two-stage loop.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::config::{Config, TrainConfig};
use crate::dataio::{augment, clip_indices, sample_clip, save_checkpoint, Checkpoint, ClipIndex, TrainingSample};
use crate::error::{Error, Result};
use crate::evaluation::psnr_y;
use crate::frame::Frame;
use crate::livt::QuerySpec;
use crate::model::EvEnhancer;
use crate::nn::{Adam, InitScheme, ParamStore};
use crate::tensor::Tensor;

/// `mean(sqrt((pred - gt)^2 + eps2))`.
///
/// The mean is taken about the first element, so equal terms average to
/// exactly their common value.
pub fn charbonnier<'g>(pred: Var<'g>, gt: Var<'g>, eps2: f64) -> Result<Var<'g>> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("loss inputs {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let r = pred.sub(gt)?.square().add_scalar(eps2).sqrt();
    let shift = r.value().data().first().copied().unwrap_or(0.0);
    Ok(r.add_scalar(-shift).mean().add_scalar(shift))
}

pub fn charbonnier_value(pred: &Tensor, gt: &Tensor, eps2: f64) -> Result<f64> {
    let g = Graph::detached();
    Ok(charbonnier(g.constant(pred.clone()), g.constant(gt.clone()), eps2)?.value().data()[0])
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total`.
pub fn lr_schedule(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    let frac = if total == 0 { 1.0 } else { step.min(total) as f64 / total as f64 };
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Stage 1 uses the fixed `(stage1_s, t)`; stage 2 draws `s` uniformly from `stage2_scales`.
pub fn sample_scales(stage: u8, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<(f64, usize)> {
    match stage {
        1 => Ok((cfg.stage1_s, cfg.t)),
        2 => {
            if cfg.stage2_scales.is_empty() {
                return Err(Error::InvalidConfig("train.stage2_scales is empty".into()));
            }
            Ok((cfg.stage2_scales[rng.gen_range(0..cfg.stage2_scales.len())], cfg.t))
        }
        _ => Err(Error::InvalidConfig(format!("training stage must be 1 or 2, got {stage}"))),
    }
}

/// RNG for one optimization step, a pure function of `(seed, stage, step)`.
pub fn step_rng(seed: u64, stage: u8, step: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((stage as u64) << 56) | step as u64);
    r
}

/// Frame sequences to draw clips from.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub sequences: Vec<Vec<Frame>>,
}

impl Dataset {
    pub fn new(sequences: Vec<Vec<Frame>>) -> Self {
        Self { sequences }
    }

    pub fn clips(&self, t: usize, stride: usize) -> Vec<ClipIndex> {
        clip_indices(&self.sequences.iter().map(Vec::len).collect::<Vec<_>>(), t, stride)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Step { stage: u8, step: usize, loss: f64, lr: f64 },
    Val { stage: u8, step: usize, psnr: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub best_psnr: Option<f64>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    pub cfg: Config,
    pub store: ParamStore,
    pub model: EvEnhancer,
    pub adam: Adam,
    /// Stage of the next step.
    pub stage: u8,
    /// Steps completed within `stage`.
    pub step: usize,
    pub best_psnr: Option<f64>,
    data: Dataset,
    clips: Vec<ClipIndex>,
    cache: HashMap<(usize, usize, u64), TrainingSample>,
}

impl Trainer {
    pub fn new(cfg: &Config, data: Dataset) -> Result<Self> {
        Self::with_init(cfg, data, InitScheme::Standard)
    }

    pub fn with_init(cfg: &Config, data: Dataset, scheme: InitScheme) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = EvEnhancer::new(&mut store, cfg, scheme)?;
        let adam = Adam::new(&store, cfg.train.beta1, cfg.train.beta2);
        let clips = data.clips(cfg.train.t, cfg.data.clip_stride);
        if clips.is_empty() {
            return Err(Error::Range(format!("no sequence has the {} frames a clip needs", cfg.train.t + 1)));
        }
        Ok(Self { cfg: cfg.clone(), store, model, adam, stage: 1, step: 0, best_psnr: None, data, clips, cache: HashMap::new() })
    }

    /// Resume from `ck`; the data must be the same for a bit-exact continuation.
    pub fn from_checkpoint(ck: &Checkpoint, data: Dataset) -> Result<Self> {
        let mut t = Self::new(&ck.config, data)?;
        ck.restore(&mut t.store)?;
        if let Some(a) = &ck.adam {
            t.adam = a.clone();
        }
        t.stage = ck.stage;
        t.step = ck.step;
        t.best_psnr = ck.best_psnr;
        t.normalize_position();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.cfg, &self.store, Some(&self.adam), self.stage, self.step, self.best_psnr)
    }

    fn stage_iters(&self, stage: u8) -> usize {
        match stage {
            1 => self.cfg.train.stage1_iters,
            _ => self.cfg.train.stage2_iters,
        }
    }

    fn normalize_position(&mut self) {
        if self.stage == 1 && self.step >= self.stage_iters(1) {
            self.stage = 2;
            self.step = 0;
        }
    }

    pub fn is_done(&self) -> bool {
        self.stage == 2 && self.step >= self.stage_iters(2)
    }

    fn sample(&mut self, clip: ClipIndex, s: f64, t: usize) -> Result<TrainingSample> {
        let key = (clip.sequence, clip.start, s.to_bits());
        if let Some(smp) = self.cache.get(&key) {
            return Ok(smp.clone());
        }
        let frames = &self.data.sequences[clip.sequence];
        let smp = sample_clip(frames, t, s, clip.start, self.cfg.model.segments, self.cfg.data.threshold, None)?;
        self.cache.insert(key, smp.clone());
        Ok(smp)
    }

    /// Draw the batch for `(stage, step)`; the query pixels come from the same RNG.
    fn batch(&mut self, stage: u8, rng: &mut ChaCha8Rng) -> Result<Vec<TrainingSample>> {
        let mut out = Vec::with_capacity(self.cfg.train.batch_size);
        for _ in 0..self.cfg.train.batch_size {
            let (s, t) = sample_scales(stage, &self.cfg.train, rng)?;
            let clip = self.clips[rng.gen_range(0..self.clips.len())];
            let smp = self.sample(clip, s, t)?;
            out.push(if self.cfg.train.augment { augment(&smp, rng.gen(), self.cfg.train.crop)? } else { smp });
        }
        Ok(out)
    }

    /// Loss of the batch for `(stage, step)` at the current parameters, with gradients.
    fn loss_and_grads(&mut self, stage: u8, step: usize) -> Result<(f64, Vec<Tensor>)> {
        let mut rng = step_rng(self.cfg.seed, stage, step);
        let batch = self.batch(stage, &mut rng)?;
        let g = Graph::new(&self.store);
        let mut terms = Vec::new();
        for smp in &batch {
            let e = self.model.embed(&g, &smp.input())?;
            let cell_t = 1.0 / smp.t as f64;
            for (k, gt) in smp.gt.iter().enumerate() {
                let (pixels, target) = query_subset(gt, self.cfg.train.query_pixels, &mut rng);
                let pred = self.model.decode(&e, k as f64 / smp.t as f64, smp.s, cell_t, &pixels)?;
                terms.push(charbonnier(pred, g.constant(target), self.cfg.train.charbonnier_eps2)?);
            }
        }
        let n = terms.len() as f64;
        let loss = g.stack0(&terms)?.sum().scale(1.0 / n);
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite { stage, step });
        }
        let grads = g.backward(loss)?.for_store(&self.store);
        Ok((value, grads))
    }

    /// Loss the next step would see, without updating anything.
    pub fn peek_loss(&mut self) -> Result<f64> {
        self.normalize_position();
        let (stage, step) = (self.stage, self.step);
        Ok(self.loss_and_grads(stage, step)?.0)
    }

    /// Run one optimization step.
    pub fn train_step(&mut self) -> Result<LogRecord> {
        self.normalize_position();
        if self.is_done() {
            return Err(Error::Range("training budget already exhausted".into()));
        }
        let (stage, step) = (self.stage, self.step);
        let (loss, grads) = self.loss_and_grads(stage, step)?;
        let t = &self.cfg.train;
        let lr = lr_schedule(step, self.stage_iters(stage), t.lr_max, t.lr_min);
        self.adam.update(&mut self.store, &grads, lr)?;
        self.step += 1;
        self.normalize_position();
        Ok(LogRecord::Step { stage, step, loss, lr })
    }

    /// Mean Y-PSNR over every frame of the first clip at the stage-1 scale.
    pub fn validate(&mut self) -> Result<f64> {
        let (s, t) = (self.cfg.train.stage1_s, self.cfg.train.t);
        let smp = self.sample(self.clips[0], s, t)?;
        let pred = self.predict(&smp)?;
        let mut total = 0.0;
        for (p, g) in pred.iter().zip(&smp.gt) {
            total += psnr_y(&p.clamped(), g)?;
        }
        Ok(total / pred.len() as f64)
    }

    /// Render every GT frame of `smp` on the GT pixel grid.
    pub fn predict(&self, smp: &TrainingSample) -> Result<Vec<Frame>> {
        let q = QuerySpec::uniform(smp.s, smp.t)?;
        self.model.infer_sized(&self.store, &smp.input(), &q, smp.gt[0].height(), smp.gt[0].width())
    }

    /// Train to the end of stage 2. Writes `last.ckpt` and `best.ckpt` into
    /// `out_dir` when given and one JSON line per record into `log`.
    pub fn run(&mut self, out_dir: Option<&Path>, log: &mut dyn Write) -> Result<TrainSummary> {
        let mut losses = Vec::new();
        let mut best_path = None;
        let log_err = |e: std::io::Error| Error::io("<metrics log>", e);
        while !self.is_done() {
            let rec = self.train_step()?;
            let LogRecord::Step { stage, step, loss, .. } = rec else { unreachable!() };
            losses.push(loss);
            writeln!(log, "{}", serde_json::to_string(&rec).expect("log record serializes")).map_err(log_err)?;
            let every = self.cfg.train.val_every;
            let stage_end = step + 1 == self.stage_iters(stage);
            if (every > 0 && (step + 1) % every == 0) || stage_end {
                let psnr = self.validate()?;
                let val = LogRecord::Val { stage, step, psnr };
                writeln!(log, "{}", serde_json::to_string(&val).expect("log record serializes")).map_err(log_err)?;
                if self.best_psnr.is_none_or(|b| psnr > b) {
                    self.best_psnr = Some(psnr);
                    if let Some(dir) = out_dir {
                        let p = dir.join("best.ckpt");
                        save_checkpoint(&p, &self.checkpoint())?;
                        best_path = Some(p);
                    }
                }
            }
        }
        let final_checkpoint = match out_dir {
            Some(dir) => {
                let p = dir.join("last.ckpt");
                save_checkpoint(&p, &self.checkpoint())?;
                Some(p)
            }
            None => None,
        };
        Ok(TrainSummary { losses, best_psnr: self.best_psnr, final_checkpoint, best_checkpoint: best_path })
    }
}

/// `n` distinct random pixels of `gt` (all when `n` is 0 or too large) and their RGB as `N x 3`.
pub fn query_subset(gt: &Frame, n: usize, rng: &mut impl Rng) -> (Vec<(usize, usize)>, Tensor) {
    let (h, w) = (gt.height(), gt.width());
    let flat: Vec<usize> = if n == 0 || n >= h * w { (0..h * w).collect() } else { index::sample(rng, h * w, n).into_vec() };
    let pixels: Vec<(usize, usize)> = flat.iter().map(|&i| (i / w, i % w)).collect();
    let rgb = pixels.iter().flat_map(|&(y, x)| gt.pixel(y, x)).collect();
    (pixels, Tensor::from_parts(vec![flat.len(), 3], rgb))
}

/// Least-squares slope of `ys` against their index.
pub fn trend_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        num += (i as f64 - mx) * (y - my);
        den += (i as f64 - mx).powi(2);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::moving_square;
    use proptest::prelude::*;

    #[test]
    fn charbonnier_closed_forms() {
        let x = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1);
        assert_eq!(charbonnier_value(&x, &x, 1e-6).unwrap(), 1e-3);
        let y = x.map(|v| v + 1.0);
        assert!((charbonnier_value(&x, &y, 1e-6).unwrap() - (1.0f64 + 1e-6).sqrt()).abs() < 1e-15);
        assert!(charbonnier_value(&x, &Tensor::zeros(&[3, 4]), 1e-6).is_err());
    }

    proptest! {
        #[test]
        fn charbonnier_bounds_symmetry_and_shift(a in prop::collection::vec(-2.0f64..2.0, 6), b in prop::collection::vec(-2.0f64..2.0, 6), c in -1.0f64..1.0) {
            let (ta, tb) = (Tensor::new(&[6], a).unwrap(), Tensor::new(&[6], b).unwrap());
            let l = charbonnier_value(&ta, &tb, 1e-6).unwrap();
            prop_assert!(l >= 1e-3);
            prop_assert_eq!(l, charbonnier_value(&tb, &ta, 1e-6).unwrap());
            let shifted = charbonnier_value(&ta.map(|v| v + c), &tb.map(|v| v + c), 1e-6).unwrap();
            prop_assert!((shifted - l).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert!((lr_schedule(0, 1000, 1e-4, 1e-7) - 1e-4).abs() < 1e-12);
        assert!((lr_schedule(1000, 1000, 1e-4, 1e-7) - 1e-7).abs() < 1e-12);
        assert!((lr_schedule(500, 1000, 1e-4, 1e-7) - (1e-4 + 1e-7) / 2.0).abs() < 1e-12);
        let v: Vec<f64> = (0..=10).map(|s| lr_schedule(s, 10, 1.0, 0.0)).collect();
        assert!(v.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn scale_sampler_stages() {
        let cfg = TrainConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_scales(1, &cfg, &mut r).unwrap(), (4.0, 8));
        assert!(sample_scales(3, &cfg, &mut r).is_err());
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_scales(2, &cfg, &mut r).unwrap().0).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn stage_two_scales_are_uniform() {
        // Chi-square goodness of fit against the uniform distribution over 7 scales.
        let cfg = TrainConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let k = cfg.stage2_scales.len();
        let mut counts = vec![0usize; k];
        let n = 10_000;
        for _ in 0..n {
            let (s, t) = sample_scales(2, &cfg, &mut r).unwrap();
            assert_eq!(t, 8);
            counts[cfg.stage2_scales.iter().position(|&v| v == s).unwrap()] += 1;
        }
        let e = n as f64 / k as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 0.999 quantile of chi-square with 6 degrees of freedom.
        assert!(chi2 < 22.458, "{chi2} {counts:?}");
        assert!(counts.iter().all(|&c| c > 0));
    }

    fn tiny(iters: usize) -> Config {
        let mut c = Config::toy();
        c.model.channels = 4;
        c.model.res_blocks = 1;
        c.livt.channels = 4;
        c.livt.frequencies = 2;
        c.livt.mlp_hidden = vec![16, 16];
        c.train.t = 2;
        c.train.stage1_s = 2.0;
        c.train.stage1_iters = iters;
        c.train.stage2_iters = 2;
        c.train.stage2_scales = vec![1.0, 2.0];
        c.train.batch_size = 1;
        c.train.crop = 4;
        c.train.query_pixels = 64;
        c.train.lr_max = 2e-3;
        c.train.lr_min = 1e-4;
        c.train.val_every = 0;
        c
    }

    fn data() -> Dataset {
        Dataset::new(vec![moving_square(5, 12, 12, 1.0)])
    }

    #[test]
    fn resume_reproduces_the_next_loss_exactly() {
        let cfg = tiny(4);
        let mut a = Trainer::new(&cfg, data()).unwrap();
        for _ in 0..3 {
            a.train_step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mid.ckpt");
        save_checkpoint(&p, &a.checkpoint()).unwrap();
        let LogRecord::Step { loss: next_a, .. } = a.train_step().unwrap() else { panic!() };
        let ck = crate::dataio::load_checkpoint(&p).unwrap();
        let mut b = Trainer::from_checkpoint(&ck, data()).unwrap();
        let LogRecord::Step { loss: next_b, stage, step, .. } = b.train_step().unwrap() else { panic!() };
        assert_eq!((stage, step), (1, 3));
        assert_eq!(next_a.to_bits(), next_b.to_bits());
    }

    #[test]
    fn runs_are_reproducible_and_cross_into_stage_two() {
        let mut cfg = tiny(3);
        cfg.train.augment = false;
        let run = || {
            let mut t = Trainer::new(&cfg, data()).unwrap();
            let mut log = Vec::new();
            let s = t.run(None, &mut log).unwrap();
            (s.losses, String::from_utf8(log).unwrap())
        };
        let (a, log) = run();
        assert_eq!(a.len(), 5);
        assert_eq!(run().0, a);
        assert!(log.lines().any(|l| l.contains("\"stage\":2")));
        assert!(log.lines().filter(|l| l.contains("\"event\":\"val\"")).count() == 2);
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        let cfg = tiny(1);
        let mut t = Trainer::with_init(&cfg, data(), InitScheme::Dense).unwrap();
        let (_, grads) = t.loss_and_grads(1, 0).unwrap();
        let dead: Vec<&str> = t
            .store
            .ids()
            .zip(&grads)
            .filter(|(_, g)| g.max_abs() == 0.0)
            .map(|(id, _)| t.store.name(id))
            // The learnable bias table is an alternative to the cosine projection.
            .filter(|n| !n.ends_with("bias_table"))
            .collect();
        assert!(dead.is_empty(), "{dead:?}");
    }

    #[test]
    fn smoke_run_loss_trends_down() {
        let mut cfg = tiny(200);
        cfg.train.stage2_iters = 0;
        cfg.train.augment = false;
        let mut t = Trainer::new(&cfg, data()).unwrap();
        let s = t.run(None, &mut std::io::sink()).unwrap();
        assert_eq!(s.losses.len(), 200);
        assert!(s.losses.iter().all(|l| l.is_finite()));
        assert!(trend_slope(&s.losses) < 0.0);
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let cfg = tiny(2);
        let mut t = Trainer::new(&cfg, data()).unwrap();
        let id = t.store.ids().next().unwrap();
        t.store.get_mut(id).data_mut()[0] = f64::NAN;
        assert!(matches!(t.train_step(), Err(Error::NonFinite { stage: 1, step: 0 })));
    }
}
