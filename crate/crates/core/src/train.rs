//! Pretraining, recognition fine-tuning, evaluation and spotting.

use mubert_tensor::{Graph, Tensor};

use crate::config::TrainConfig;
use crate::data::manifest::Manifest;
use crate::data::synth::{generate_labeled_set, generate_pair, random_crop_resize, FramePairSample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{MuBert, PretrainInput};
use crate::objectives::{classification_loss, ConfusionMatrix, MetricsReport};
use crate::optim::{clip_grad_norm, cosine_lr, AdamW};
use crate::patch::patchify;
use crate::rng::{mix_seed, StreamRng};
use crate::swap::{blockwise_swap, SwapRecord};

const SWAP_TAG: u64 = 0x5EA9;
const CROP_TAG: u64 = 0xC409;
const ORDER_TAG: u64 = 0x0DE5;

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub reconstruction: f64,
    pub agreement: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainResult {
    pub model: MuBert<f32>,
    pub log: Vec<StepLog>,
    /// Per parameter: whether a nonzero gradient was seen in the first ten
    /// steps.
    pub gradient_seen: Vec<bool>,
}

/// Where pretraining pairs come from.
pub enum PairSource {
    Generated { seed: u64 },
    Samples(Vec<FramePairSample>),
}

impl PairSource {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        match &cfg.pretrain_manifest {
            Some(path) => {
                let samples = Manifest::load(path)?.samples(cfg.model.patch_size)?;
                if samples.is_empty() {
                    return Err(Error::data(format!("manifest {} is empty", path.display())));
                }
                Ok(PairSource::Samples(samples))
            }
            None => Ok(PairSource::Generated { seed: cfg.train_data_seed }),
        }
    }

    pub fn get(&self, cfg: &TrainConfig, index: u64) -> Result<FramePairSample> {
        match self {
            PairSource::Generated { seed } => generate_pair(&cfg.gen, mix_seed(*seed, index)),
            PairSource::Samples(s) => Ok(s[(index % s.len() as u64) as usize].clone()),
        }
    }
}

fn check_geometry(cfg: &TrainConfig, img: &Image) -> Result<()> {
    let m = &cfg.model;
    if img.height() != m.height || img.width() != m.width || img.channels() != m.channels {
        return Err(Error::data(format!(
            "frame is {}x{}x{}, model expects {}x{}x{}",
            img.height(),
            img.width(),
            img.channels(),
            m.height,
            m.width,
            m.channels
        )));
    }
    Ok(())
}

/// Swaps, crops and patchifies one pair into model inputs.
pub fn pretrain_input(
    cfg: &TrainConfig,
    sample: &FramePairSample,
    index: u64,
) -> Result<(PretrainInput<f32>, SwapRecord)> {
    check_geometry(cfg, &sample.frame_t)?;
    check_geometry(cfg, &sample.frame_td)?;
    let ps = cfg.model.patch_size;
    let pt = patchify(&sample.frame_t, ps)?;
    let ptd = patchify(&sample.frame_td, ps)?;
    let record = blockwise_swap(&pt, &ptd, &cfg.swap, mix_seed(cfg.seed ^ SWAP_TAG, index))?;
    let crop = if cfg.loss.beta > 0.0 {
        let mut rng = StreamRng::new(mix_seed(cfg.seed ^ CROP_TAG, index), 7);
        let c = random_crop_resize(&sample.frame_td, cfg.crop, &mut rng)?;
        Some(patchify(&c, ps)?.to_tensor())
    } else {
        None
    };
    let input = PretrainInput { swapped: record.swapped.to_tensor(), later: ptd.to_tensor(), crop, target: pt.to_tensor() };
    Ok((input, record))
}

fn accumulate(acc: &mut [Option<Tensor<f32>>], idx: usize, g: &Tensor<f32>) {
    match &mut acc[idx] {
        Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn finish_grads(acc: &mut [Option<Tensor<f32>>], n: usize, step: usize) -> Result<()> {
    let inv = 1.0 / n as f32;
    for g in acc.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
        if !g.all_finite() {
            return Err(Error::Numeric { step, msg: "non-finite gradient".into() });
        }
    }
    Ok(())
}

fn check_params(model: &MuBert<f32>, step: usize) -> Result<()> {
    match model.store.params().iter().find(|p| !p.value.all_finite()) {
        Some(p) => Err(Error::Numeric { step, msg: format!("parameter {} is non-finite after the update", p.name) }),
        None => Ok(()),
    }
}

/// Self-supervised pretraining from `model`. `on_step` sees every log
/// entry as it is produced.
pub fn pretrain_from(
    cfg: &TrainConfig,
    mut model: MuBert<f32>,
    source: &PairSource,
    mut on_step: impl FnMut(&StepLog),
) -> Result<PretrainResult> {
    cfg.validate()?;
    if model.config.n_patches() != cfg.model.n_patches() || model.config.d != cfg.model.d {
        return Err(Error::config("model does not match the configured geometry"));
    }
    let sched = &cfg.pretrain;
    let mut opt = AdamW::new(&model.store, cfg.optim);
    let mut log = Vec::with_capacity(sched.steps);
    let mut seen = vec![false; model.store.len()];
    for step in 0..sched.steps {
        let lr = cosine_lr(step, sched.steps, sched.lr, sched.warmup);
        let mut acc: Vec<Option<Tensor<f32>>> = vec![None; model.store.len()];
        let (mut loss, mut recon, mut agree) = (0.0, 0.0, 0.0);
        for b in 0..sched.batch {
            let index = (step * sched.batch + b) as u64;
            let sample = source.get(cfg, index)?;
            let (input, _) = pretrain_input(cfg, &sample, index)?;
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, true);
            let out = model.pretrain_forward(&mut g, &p, &input, &cfg.loss, cfg.agg_stop_gradient)?;
            let l = g.value(out.loss).item()? as f64;
            if !l.is_finite() {
                return Err(Error::Numeric { step, msg: format!("loss is {l} on sample {index}") });
            }
            loss += l;
            recon += g.value(out.reconstruction_loss).item()? as f64;
            agree += out.agreement_loss.map_or(Ok(0.0), |a| g.value(a).item())? as f64;
            let mut grads = g.backward(out.loss)?;
            for (i, &v) in p.vars().iter().enumerate() {
                if let Some(t) = grads.take(v) {
                    accumulate(&mut acc, i, &t);
                }
            }
        }
        finish_grads(&mut acc, sched.batch, step)?;
        if step < 10 {
            for (s, g) in seen.iter_mut().zip(&acc) {
                *s |= g.as_ref().is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
            }
        }
        let grad_norm = clip_grad_norm(&mut acc, sched.grad_clip);
        opt.step(&mut model.store, &acc, lr)?;
        check_params(&model, step)?;
        let n = sched.batch as f64;
        let entry = StepLog { step: step + 1, lr, loss: loss / n, reconstruction: recon / n, agreement: agree / n, grad_norm };
        on_step(&entry);
        log.push(entry);
    }
    Ok(PretrainResult { model, log, gradient_seen: seen })
}

pub fn pretrain(cfg: &TrainConfig, on_step: impl FnMut(&StepLog)) -> Result<PretrainResult> {
    cfg.validate()?;
    let model = MuBert::new(cfg.model.clone(), cfg.seed)?;
    let source = PairSource::from_config(cfg)?;
    pretrain_from(cfg, model, &source, on_step)
}

/// Renders a training log as whitespace-separated columns.
pub fn log_text(log: &[StepLog]) -> String {
    let mut s = String::from("step lr loss reconstruction agreement grad_norm\n");
    for e in log {
        s.push_str(&format!(
            "{} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e}\n",
            e.step, e.lr, e.loss, e.reconstruction, e.agreement, e.grad_norm
        ));
    }
    s
}

/// Labeled train and held-out sets, from manifests or the generator.
pub fn labeled_sets(cfg: &TrainConfig) -> Result<(Vec<FramePairSample>, Vec<FramePairSample>)> {
    let load = |path: &Option<std::path::PathBuf>, seed: u64, n: usize| -> Result<Vec<FramePairSample>> {
        match path {
            Some(p) => Manifest::load(p)?.samples(cfg.model.patch_size),
            None => generate_labeled_set(&cfg.gen, n, seed),
        }
    };
    let train = load(&cfg.train_manifest, cfg.train_data_seed, cfg.finetune.train_per_class)?;
    let test = load(&cfg.test_manifest, cfg.test_data_seed, cfg.finetune.test_per_class)?;
    Ok((train, test))
}

fn pair_tensors(cfg: &TrainConfig, s: &FramePairSample) -> Result<(Tensor<f32>, Tensor<f32>)> {
    check_geometry(cfg, &s.frame_t)?;
    check_geometry(cfg, &s.frame_td)?;
    let ps = cfg.model.patch_size;
    Ok((patchify(&s.frame_t, ps)?.to_tensor(), patchify(&s.frame_td, ps)?.to_tensor()))
}

fn label_of(s: &FramePairSample, classes: usize) -> Result<usize> {
    let l = s.label.ok_or_else(|| Error::data("fine-tuning sample has no label"))?;
    if l >= classes {
        return Err(Error::data(format!("label {l} outside the classifier's {classes} classes")));
    }
    Ok(l)
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub model: MuBert<f32>,
    pub log: Vec<StepLog>,
    pub report: MetricsReport,
}

/// Trains the recognition head (and optionally the backbone) on `train`
/// and reports metrics on `test`. The decoder is never updated.
pub fn finetune(
    cfg: &TrainConfig,
    model: MuBert<f32>,
    train: &[FramePairSample],
    test: &[FramePairSample],
    mut on_step: impl FnMut(&StepLog),
) -> Result<FinetuneResult> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::data("fine-tuning needs non-empty train and test sets"));
    }
    let classes = cfg.gen.classes.max(cfg.model.classes);
    let mut model = match &model.classifier {
        Some(_) if model.config.classes == classes => model,
        Some(_) => {
            return Err(Error::config(format!(
                "classifier has {} classes, data has {classes}",
                model.config.classes
            )))
        }
        None => model.with_classifier(classes, cfg.seed)?,
    };
    let inputs: Vec<_> = train.iter().map(|s| pair_tensors(cfg, s)).collect::<Result<_>>()?;
    let labels: Vec<usize> = train.iter().map(|s| label_of(s, classes)).collect::<Result<_>>()?;
    let sched = &cfg.finetune;
    let train_backbone = sched.train_backbone;
    let trainable = |name: &str| {
        if name.starts_with(crate::model::CLASSIFIER_PREFIX) {
            true
        } else {
            train_backbone && MuBert::<f32>::is_recognition_param(name)
        }
    };
    let mut opt = AdamW::new(&model.store, cfg.optim);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = StreamRng::new(mix_seed(cfg.seed, ORDER_TAG), 11);
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let lr = cosine_lr(step, sched.steps, sched.lr, sched.warmup);
        let mut acc: Vec<Option<Tensor<f32>>> = vec![None; model.store.len()];
        let mut loss = 0.0;
        for _ in 0..sched.batch {
            if cursor == order.len() {
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.index(i + 1));
                }
                cursor = 0;
            }
            let k = order[cursor];
            cursor += 1;
            let mut g = Graph::new();
            let p = model.store.bind_where(&mut g, trainable);
            let onset = g.constant(inputs[k].0.clone());
            let apex = g.constant(inputs[k].1.clone());
            let (logits, _) = model.classify(&mut g, &p, onset, apex)?;
            let l = classification_loss(&mut g, logits, labels[k])?;
            let lv = g.value(l).item()? as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric { step, msg: format!("classification loss is {lv}") });
            }
            loss += lv;
            let mut grads = g.backward(l)?;
            for (i, &v) in p.vars().iter().enumerate() {
                if g.requires_grad(v) {
                    if let Some(t) = grads.take(v) {
                        accumulate(&mut acc, i, &t);
                    }
                }
            }
        }
        finish_grads(&mut acc, sched.batch, step)?;
        let grad_norm = clip_grad_norm(&mut acc, sched.grad_clip);
        opt.step(&mut model.store, &acc, lr)?;
        check_params(&model, step)?;
        let entry = StepLog {
            step: step + 1,
            lr,
            loss: loss / sched.batch as f64,
            reconstruction: 0.0,
            agreement: 0.0,
            grad_norm,
        };
        on_step(&entry);
        log.push(entry);
    }
    let mut eval_cfg = cfg.clone();
    eval_cfg.model.classes = classes;
    let report = evaluate(&eval_cfg, &model, test)?;
    Ok(FinetuneResult { model, log, report })
}

/// Predicted class of an (onset, apex) pair.
pub fn predict(cfg: &TrainConfig, model: &MuBert<f32>, s: &FramePairSample) -> Result<usize> {
    let (a, b) = pair_tensors(cfg, s)?;
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let onset = g.constant(a);
    let apex = g.constant(b);
    let (logits, _) = model.classify(&mut g, &p, onset, apex)?;
    let v = g.value(logits).data();
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn evaluate(cfg: &TrainConfig, model: &MuBert<f32>, samples: &[FramePairSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let classes = model.config.classes;
    if classes < 2 {
        return Err(Error::usage("model has no classifier head"));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for s in samples {
        let truth = label_of(s, classes)?;
        cm.record(truth, predict(cfg, model, s)?)?;
    }
    MetricsReport::from_confusion(&cm, cfg.hash())
}

/// Per-patch maps of one pair: diagonal weights, saliency, and combined
/// weights, each of length `N_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpotMaps {
    pub grid: (usize, usize),
    pub diagonal: Vec<f64>,
    pub saliency: Option<Vec<f64>>,
    pub combined: Vec<f64>,
}

/// Evaluates the diagonal attention with queries from `later` and keys
/// from `earlier`.
pub fn spot_maps(model: &MuBert<f32>, earlier: &Image, later: &Image) -> Result<SpotMaps> {
    let m = &model.config;
    for img in [earlier, later] {
        if img.height() != m.height || img.width() != m.width || img.channels() != m.channels {
            return Err(Error::data(format!(
                "frame is {}x{}x{}, checkpoint expects {}x{}x{}",
                img.height(),
                img.width(),
                img.channels(),
                m.height,
                m.width,
                m.channels
            )));
        }
    }
    let a = patchify(earlier, m.patch_size)?.to_tensor::<f32>();
    let b = patchify(later, m.patch_size)?.to_tensor::<f32>();
    spot_maps_from_patches(model, a, b)
}

pub fn spot_maps_from_patches(model: &MuBert<f32>, earlier: Tensor<f32>, later: Tensor<f32>) -> Result<SpotMaps> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let a = g.constant(earlier);
    let b = g.constant(later);
    let f = model.pair_features(&mut g, &p, a, b)?;
    let to64 = |v: &Tensor<f32>| v.data().iter().map(|&x| x as f64).collect::<Vec<_>>();
    Ok(SpotMaps {
        grid: model.config.grid(),
        diagonal: to64(g.value(f.dma.diagonal)),
        saliency: f.saliency.map(|s| to64(g.value(s))),
        combined: to64(g.value(f.weights)),
    })
}
