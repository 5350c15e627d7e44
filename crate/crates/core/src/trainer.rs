//! Adam training of the student against cached teacher captures, with
//! checkpointing and a whole-pipeline gradient check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{sample_positions, student_pass, student_pass_with_tokens, DistillConfig, DistillLoss, LayerTerm};
use crate::dump::TensorDump;
use crate::encoder::{apply_lora, forward_capture, patch_tokens, EmbeddingCapture, LoraLayout, TrainablePlan, ViTConfig, ViTParams};
use crate::error::{invalid, Error, Result};
use crate::numeric::{Graph, Tensor};

pub type Grads = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_factor: f64,
    /// First epoch (1-based) trained at `lr · decay_factor`.
    pub decay_epoch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub distill: DistillConfig,
    pub plan: TrainablePlan,
}

/// Full schedule: 5 epochs of 2700 iterations at batch 24.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            steps_per_epoch: 2700,
            batch_size: 24,
            lr: 2e-4,
            decay_factor: 0.9,
            decay_epoch: 4,
            adam: AdamConfig::default(),
            seed: 0,
            distill: DistillConfig::default(),
            plan: TrainablePlan::four_mlps(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile for [`ViTConfig::tiny`].
    pub fn tiny() -> Self {
        Self {
            epochs: 1,
            steps_per_epoch: 200,
            batch_size: 1,
            lr: 1e-3,
            decay_factor: 1.0,
            decay_epoch: 1,
            distill: DistillConfig::for_depth(4),
            plan: TrainablePlan::EmbedAllMlps,
            ..Self::default()
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn validate(&self, vit: &ViTConfig) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return invalid("epochs, steps_per_epoch and batch_size must be positive");
        }
        if self.decay_epoch == 0 || self.decay_epoch > self.epochs {
            return invalid(format!("decay_epoch {} outside 1..={}", self.decay_epoch, self.epochs));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return invalid(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return invalid("Adam needs beta1, beta2 in [0, 1) and eps > 0");
        }
        self.plan.validate(vit)?;
        self.distill.validate(vit.depth)
    }
}

/// Learning rate in 1-based `epoch`: one decay at `decay_epoch`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch >= cfg.decay_epoch {
        cfg.lr * cfg.decay_factor
    } else {
        cfg.lr
    }
}

/// Student parameters plus Adam moments for exactly the trainable ones.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ViTParams,
    pub plan: TrainablePlan,
    pub m: Grads,
    pub v: Grads,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl TrainState {
    /// A LoRA plan must match the adapters already on `params`.
    pub fn new(params: ViTParams, plan: TrainablePlan) -> Result<Self> {
        plan.validate(&params.config)?;
        if let Some(layout) = plan.lora() {
            if params.lora_layout().as_ref() != Some(&canonical(layout)) {
                return invalid("LoRA plan does not match the adapters on the student");
            }
        }
        let mut m = Grads::new();
        params.weights.visit(|k, t| {
            if plan.trains(k) {
                m.insert(k.name.clone(), Tensor::zeros(t.dims()));
            }
        });
        Ok(Self {
            params,
            plan,
            v: m.clone(),
            m,
            step: 0,
        })
    }

    /// Student initialized from the teacher, with adapters attached when the plan asks for them.
    pub fn from_teacher(teacher: &ViTParams, plan: TrainablePlan, seed: u64) -> Result<Self> {
        let params = match plan.lora() {
            Some(layout) => apply_lora(teacher, layout, seed)?,
            None => teacher.clone(),
        };
        Self::new(params, plan)
    }

    pub fn epoch(&self, cfg: &TrainConfig) -> usize {
        (self.step / cfg.steps_per_epoch as u64) as usize + 1
    }
}

fn canonical(l: &LoraLayout) -> LoraLayout {
    let mut l = l.clone();
    l.layers.sort_unstable();
    l.layers.dedup();
    l.sites.sort();
    l.sites.dedup();
    l
}

/// One bias-corrected Adam update. Every gradient is checked before anything
/// is written, so a failing step leaves the state untouched.
pub fn adam_step(state: &mut TrainState, grads: &Grads, lr: f64, adam: &AdamConfig) -> Result<()> {
    for (name, g) in grads {
        if !state.m.contains_key(name) {
            return invalid(format!("gradient supplied for frozen parameter {name}"));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let t = state.step as i32 + 1;
    let (c1, c2) = (1.0 - adam.beta1.powi(t), 1.0 - adam.beta2.powi(t));
    let (m_all, v_all) = (&mut state.m, &mut state.v);
    let mut err = None;
    state.params.weights.visit_mut(|k, p| {
        let (Some(m), Some(v)) = (m_all.get_mut(&k.name), v_all.get_mut(&k.name)) else {
            return;
        };
        let g = grads.get(&k.name);
        if g.is_some_and(|g| g.dims() != p.dims()) {
            err = Some(format!("gradient of {} has the wrong shape", k.name));
            return;
        }
        let md = m.data_mut();
        let vd = v.data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            md[i] = adam.beta1 * md[i] + (1.0 - adam.beta1) * gi;
            vd[i] = adam.beta2 * vd[i] + (1.0 - adam.beta2) * gi * gi;
            *w -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + adam.eps);
        }
    });
    if let Some(e) = err {
        return invalid(e);
    }
    state.step += 1;
    Ok(())
}

/// Frame and event volume of one training pair, both `H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Tensor,
    pub events: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    /// `(layer, mean)` per regularized layer, averaged over the batch.
    pub layers: Vec<(usize, f64)>,
}

/// Teacher forward on every image, done once.
pub fn teacher_captures(teacher: &ViTParams, data: &[TrainSample]) -> Result<Vec<EmbeddingCapture>> {
    data.par_iter().map(|s| forward_capture(teacher, &s.image)).collect()
}

struct SampleOutcome {
    grads: Grads,
    loss: DistillLoss,
    max_abs_embedding: f64,
}

fn sample_gradients(
    state: &TrainState,
    teacher: &EmbeddingCapture,
    sample: &TrainSample,
    positions: &[usize],
    cfg: &DistillConfig,
) -> Result<SampleOutcome> {
    let mut g = Graph::new();
    let pass = student_pass(
        &mut g,
        &state.params,
        &state.plan,
        teacher,
        &sample.events,
        &sample.image,
        positions,
        cfg,
    )?;
    let mut back = g.backward(pass.loss);
    let mut grads = Grads::new();
    pass.weights.visit(|k, v| {
        if state.plan.trains(k) {
            if let Some(t) = back.take(*v) {
                grads.insert(k.name.clone(), t);
            }
        }
    });
    Ok(SampleOutcome {
        grads,
        loss: pass.breakdown,
        max_abs_embedding: pass.max_abs_embedding,
    })
}

fn average_losses(losses: &[DistillLoss]) -> DistillLoss {
    let n = losses.len() as f64;
    let mut terms: Vec<LayerTerm> = losses[0].terms.clone();
    for (i, t) in terms.iter_mut().enumerate() {
        t.mean = losses.iter().map(|l| l.terms[i].mean).sum::<f64>() / n;
        t.sum = losses.iter().map(|l| l.terms[i].sum).sum::<f64>() / n;
    }
    DistillLoss {
        total: losses.iter().map(|l| l.total).sum::<f64>() / n,
        terms,
    }
}

/// Runs `steps` optimizer steps (stopping early at the end of the schedule).
///
/// Step `s` draws its batch as samples `s·B … s·B + B − 1` modulo the data
/// size and its mixing positions from the seed's stream `s`, so a resumed run
/// replays exactly.
pub fn train_steps(
    teacher: &[EmbeddingCapture],
    state: &mut TrainState,
    data: &[TrainSample],
    cfg: &TrainConfig,
    steps: u64,
) -> Result<Vec<StepRecord>> {
    cfg.validate(&state.params.config)?;
    if state.plan != cfg.plan {
        return invalid("state and config disagree on the trainable plan");
    }
    if data.is_empty() || data.len() != teacher.len() {
        return invalid("need one teacher capture per training sample");
    }
    let k = state.params.config.tokens();
    let end = (state.step + steps).min(cfg.total_steps());
    let mut history = Vec::new();
    while state.step < end {
        let step = state.step;
        let epoch = state.epoch(cfg);
        let lr = lr_at(cfg, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step);
        let batch: Vec<(usize, Vec<usize>)> = (0..cfg.batch_size)
            .map(|j| {
                let idx = (step as usize * cfg.batch_size + j) % data.len();
                Ok((idx, sample_positions(k, cfg.distill.mixing_ratio, &mut rng)?))
            })
            .collect::<Result<_>>()?;
        let outcomes: Vec<SampleOutcome> = batch
            .par_iter()
            .map(|(i, pos)| sample_gradients(state, &teacher[*i], &data[*i], pos, &cfg.distill))
            .collect::<Result<_>>()?;

        let losses: Vec<DistillLoss> = outcomes.iter().map(|o| o.loss.clone()).collect();
        let loss = average_losses(&losses);
        if !loss.total.is_finite() {
            let peak = outcomes.iter().map(|o| o.max_abs_embedding).fold(0.0, f64::max);
            let layers: Vec<String> = loss.terms.iter().map(|t| format!("{}={}", t.layer, t.mean)).collect();
            return Err(Error::NonFinite(format!(
                "loss at step {step} (layers {}, max |embedding| {peak})",
                layers.join(" ")
            )));
        }
        let mut grads = Grads::new();
        let scale = 1.0 / cfg.batch_size as f64;
        for o in outcomes {
            for (name, g) in o.grads {
                match grads.get_mut(&name) {
                    Some(acc) => *acc = acc.add(&g)?,
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        for g in grads.values_mut() {
            *g = g.scale(scale);
        }
        adam_step(state, &grads, lr, &cfg.adam)?;
        history.push(StepRecord {
            step: step + 1,
            epoch,
            lr,
            total: loss.total,
            layers: loss.terms.iter().map(|t| (t.layer, t.mean)).collect(),
        });
    }
    Ok(history)
}

/// Trains from the current step to the end of the schedule.
pub fn train(
    teacher: &ViTParams,
    state: &mut TrainState,
    data: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    let caps = teacher_captures(teacher, data)?;
    train_steps(&caps, state, data, cfg, cfg.total_steps().saturating_sub(state.step))
}

/// Mean objective over `data` on pure event input.
pub fn eval_loss(teacher: &[EmbeddingCapture], student: &ViTParams, data: &[TrainSample], cfg: &DistillConfig) -> Result<f64> {
    if data.is_empty() || data.len() != teacher.len() {
        return invalid("need one teacher capture per sample");
    }
    let totals: Vec<f64> = data
        .par_iter()
        .zip(teacher)
        .map(|(s, t)| {
            let mut g = Graph::new();
            student_pass(&mut g, student, &TrainablePlan::None, t, &s.events, &s.image, &[], cfg).map(|p| p.breakdown.total)
        })
        .collect::<Result<_>>()?;
    Ok(totals.iter().sum::<f64>() / totals.len() as f64)
}

/// `step,total,layer_<s>…` with one row per step.
pub fn format_history(history: &[StepRecord]) -> String {
    let mut out = String::from("step,total");
    if let Some(first) = history.first() {
        for (l, _) in &first.layers {
            let _ = write!(out, ",layer_{l}");
        }
    }
    out.push('\n');
    for r in history {
        let _ = write!(out, "{},{:e}", r.step, r.total);
        for (_, v) in &r.layers {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    out
}

const CHECKPOINT_FORMAT: u32 = 1;
pub const TENSORS_FILE: &str = "tensors.evdt";
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format: u32,
    step: u64,
    vit: ViTConfig,
    lora: Option<LoraLayout>,
    train: TrainConfig,
}

/// Writes parameters and Adam moments to `dir/tensors.evdt` and the scalars
/// and configs to `dir/state.json`.
pub fn save_checkpoint(dir: impl AsRef<Path>, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut dump = TensorDump::new();
    for (name, t) in state.params.named() {
        dump.push(name, t);
    }
    for (name, t) in &state.m {
        dump.push(format!("adam.m.{name}"), t);
    }
    for (name, t) in &state.v {
        dump.push(format!("adam.v.{name}"), t);
    }
    dump.write(dir.join(TENSORS_FILE))?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        step: state.step,
        vit: state.params.config,
        lora: state.params.lora_layout(),
        train: cfg.clone(),
    };
    std::fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(TrainState, TrainConfig)> {
    let dir = dir.as_ref();
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(STATE_FILE))?)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format {}", meta.format)));
    }
    let dump = TensorDump::read(dir.join(TENSORS_FILE))?;
    let mut params = ViTParams::init(meta.vit, 0)?;
    if let Some(layout) = &meta.lora {
        params = apply_lora(&params, layout, 0)?;
    }
    params.load_named(|n| dump.tensor(n).ok())?;
    let mut state = TrainState::new(params, meta.train.plan.clone())?;
    for (prefix, moments) in [("adam.m.", &mut state.m), ("adam.v.", &mut state.v)] {
        for (name, t) in moments.iter_mut() {
            let stored = dump.tensor(&format!("{prefix}{name}"))?;
            if stored.dims() != t.dims() {
                return Err(Error::Format(format!("moment {prefix}{name} has the wrong shape")));
            }
            *t = stored;
        }
    }
    state.step = meta.step;
    Ok((state, meta.train))
}

/// Analytic versus central-difference gradient for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Checks the gradient of the full student objective (embedding, mixing,
/// encoder, weighted loss) for every trainable tensor. Tensors larger than
/// `per_tensor` are probed at that many seeded positions.
#[allow(clippy::too_many_arguments)]
pub fn check_pipeline_gradients(
    teacher: &EmbeddingCapture,
    student: &ViTParams,
    plan: &TrainablePlan,
    sample: &TrainSample,
    positions: &[usize],
    cfg: &DistillConfig,
    step: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<Vec<GroupCheck>> {
    if !(step > 0.0 && step <= 1e-3) {
        return invalid(format!("step must lie in (0, 1e-3], got {step}"));
    }
    let state = TrainState {
        params: student.clone(),
        plan: plan.clone(),
        m: Grads::new(),
        v: Grads::new(),
        step: 0,
    };
    let analytic = sample_gradients(&state, teacher, sample, positions, cfg)?.grads;
    // Image tokens carry no gradient, so the probe holds them at their unperturbed value.
    let image_tokens = patch_tokens(student, &sample.image)?;
    let loss_at = |p: &ViTParams| -> Result<f64> {
        let mut g = Graph::new();
        let pass = student_pass_with_tokens(
            &mut g,
            p,
            &TrainablePlan::None,
            teacher,
            &sample.events,
            Some(&image_tokens),
            positions,
            cfg,
        )?;
        let v = pass.breakdown.total;
        if !v.is_finite() {
            return Err(Error::NonFinite("loss while probing".into()));
        }
        Ok(v)
    };
    let mut names = Vec::new();
    student.weights.visit(|k, t| {
        if plan.trains(k) {
            names.push((k.name.clone(), t.len()));
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(names.len());
    for (name, len) in names {
        let probe: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            index::sample(&mut rng, len, per_tensor).into_vec()
        };
        let zeros = Tensor::zeros(&[len]);
        let grad = analytic.get(&name).unwrap_or(&zeros);
        let errors: Vec<f64> = probe
            .par_iter()
            .map(|&i| {
                let shifted = |delta: f64| {
                    let mut p = student.clone();
                    p.weights.visit_mut(|k, t| {
                        if k.name == name {
                            t.data_mut()[i] += delta;
                        }
                    });
                    loss_at(&p)
                };
                let numeric = (shifted(step)? - shifted(-step)?) / (2.0 * step);
                let a = grad.data()[i];
                Ok((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()))
            })
            .collect::<Result<_>>()?;
        out.push(GroupCheck {
            name,
            checked: probe.len(),
            max_rel_error: errors.into_iter().fold(0.0, f64::max),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{AffineSite, ParamKey};
    use crate::synth::{random_scene, render_sample};

    fn scalar_state(x: f64) -> TrainState {
        let mut params = ViTParams::init(ViTConfig::micro(), 0).unwrap();
        params.weights.pos_embed = Tensor::full(&[4, 8], x);
        TrainState::new(params, TrainablePlan::All).unwrap()
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 1), 2e-4);
        assert_eq!(lr_at(&cfg, 3), 2e-4);
        assert!((lr_at(&cfg, 4) - 1.8e-4).abs() < 1e-18);
        assert!((lr_at(&cfg, 5) - 1.8e-4).abs() < 1e-18);
        let flat = TrainConfig {
            decay_factor: 1.0,
            ..cfg.clone()
        };
        assert!((1..=5).all(|e| lr_at(&flat, e) == 2e-4));
        assert!(TrainConfig { decay_epoch: 6, ..cfg }.validate(&ViTConfig::vit_b()).is_err());
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut st = scalar_state(0.5);
        let mut grads = Grads::new();
        grads.insert("pos_embed".into(), Tensor::ones(&[4, 8]));
        adam_step(&mut st, &grads, 0.01, &AdamConfig::default()).unwrap();
        for &v in st.params.weights.pos_embed.data() {
            assert!((0.5 - v - 0.01).abs() < 1e-9);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradients_keep_params_and_decay_moments() {
        let mut st = scalar_state(0.5);
        let mut grads = Grads::new();
        grads.insert("pos_embed".into(), Tensor::ones(&[4, 8]));
        adam_step(&mut st, &grads, 0.01, &AdamConfig::default()).unwrap();
        let before = st.clone();
        adam_step(&mut st, &Grads::new(), 0.0, &AdamConfig::default()).unwrap();
        assert_eq!(st.params, before.params);
        let (m0, m1) = (before.m["pos_embed"].data()[0], st.m["pos_embed"].data()[0]);
        assert!(m1 < m0 && m1 > 0.0);
    }

    #[test]
    fn bad_gradients_abort_the_step() {
        let mut st = TrainState::new(ViTParams::init(ViTConfig::micro(), 0).unwrap(), TrainablePlan::Embed).unwrap();
        let before = st.clone();
        let mut grads = Grads::new();
        grads.insert("patch_embed.bias".into(), Tensor::zeros(&[8]));
        let mut nan = Tensor::zeros(&[48, 8]);
        nan.data_mut()[3] = f64::NAN;
        grads.insert("patch_embed.weight".into(), nan);
        let err = adam_step(&mut st, &grads, 0.1, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("patch_embed.weight"), "{err}");
        assert_eq!(st, before);
        let mut frozen = Grads::new();
        frozen.insert("pos_embed".into(), Tensor::zeros(&[4, 8]));
        assert!(adam_step(&mut st, &frozen, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn moments_cover_exactly_the_trainable_set() {
        let p = ViTParams::init(ViTConfig::micro(), 0).unwrap();
        let plan = TrainablePlan::EmbedMlps(vec![2]);
        let st = TrainState::new(p.clone(), plan.clone()).unwrap();
        let mut want = Vec::new();
        p.weights.visit(|k: &ParamKey, _| {
            if plan.trains(k) {
                want.push(k.name.clone());
            }
        });
        assert_eq!(st.m.keys().cloned().collect::<Vec<_>>(), {
            want.sort();
            want
        });
        let layout = LoraLayout {
            rank: 2,
            layers: vec![1],
            sites: vec![AffineSite::Fc1],
        };
        assert!(TrainState::new(p.clone(), TrainablePlan::Lora(layout.clone())).is_err());
        let lora = TrainState::from_teacher(&p, TrainablePlan::Lora(layout), 1).unwrap();
        assert!(lora.m.contains_key("block.1.fc1.lora_a"));
        assert!(!lora.m.contains_key("block.1.fc1.weight"));
    }

    fn micro_data(n: usize) -> Vec<TrainSample> {
        (0..n)
            .map(|i| {
                let s = render_sample(&random_scene(8, 8, 1, i as u64)).unwrap();
                TrainSample {
                    image: s.image,
                    events: s.volume,
                }
            })
            .collect()
    }

    fn micro_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            steps_per_epoch: 3,
            batch_size: 2,
            lr: 1e-3,
            decay_epoch: 2,
            distill: DistillConfig {
                mixing_ratio: 0.25,
                ..DistillConfig::for_depth(2)
            },
            plan: TrainablePlan::All,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_rate_keeps_loss_constant() {
        let teacher = ViTParams::init(ViTConfig::micro(), 1).unwrap();
        let data = micro_data(1);
        let mut cfg = micro_cfg();
        cfg.distill.mixing_ratio = 0.0;
        cfg.lr = f64::MIN_POSITIVE;
        let mut st = TrainState::from_teacher(&ViTParams::init(ViTConfig::micro(), 2).unwrap(), cfg.plan.clone(), 0).unwrap();
        let h = train(&teacher, &mut st, &data, &cfg).unwrap();
        assert_eq!(h.len(), 6);
        assert!(h.windows(2).all(|w| (w[0].total - w[1].total).abs() < 1e-12));
        assert_eq!(h[3].lr, f64::MIN_POSITIVE * 0.9);
    }

    #[test]
    fn resume_is_bitwise() {
        let teacher = ViTParams::init(ViTConfig::micro(), 1).unwrap();
        let data = micro_data(3);
        let cfg = micro_cfg();
        let caps = teacher_captures(&teacher, &data).unwrap();
        let fresh = TrainState::from_teacher(&ViTParams::init(ViTConfig::micro(), 2).unwrap(), cfg.plan.clone(), 0).unwrap();
        let mut straight = fresh.clone();
        let full = train_steps(&caps, &mut straight, &data, &cfg, 6).unwrap();

        let mut first = fresh;
        let mut h = train_steps(&caps, &mut first, &data, &cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &first, &cfg).unwrap();
        let (mut resumed, cfg2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(resumed, first);
        h.extend(train_steps(&caps, &mut resumed, &data, &cfg2, 3).unwrap());
        assert_eq!(h, full);
        for ((_, a), (_, b)) in straight.params.named().iter().zip(resumed.params.named()) {
            assert_eq!(a.to_le_bytes_f64(), b.to_le_bytes_f64());
        }
    }

    #[test]
    fn history_csv() {
        let h = vec![StepRecord {
            step: 1,
            epoch: 1,
            lr: 0.1,
            total: 0.5,
            layers: vec![(0, 0.25), (2, 0.25)],
        }];
        assert_eq!(format_history(&h), "step,total,layer_0,layer_2\n1,5e-1,2.5e-1,2.5e-1\n");
    }

    #[test]
    fn pipeline_gradients_micro() {
        let cfg = ViTConfig::micro();
        let teacher = ViTParams::init(cfg, 3).unwrap();
        let student = ViTParams::init(cfg, 4).unwrap();
        let data = micro_data(1);
        let cap = forward_capture(&teacher, &data[0].image).unwrap();
        let dc = DistillConfig::for_depth(2);
        let checks =
            check_pipeline_gradients(&cap, &student, &TrainablePlan::All, &data[0], &[1], &dc, 1e-5, 16, 0).unwrap();
        assert_eq!(checks.len(), student.named().len());
        for c in &checks {
            assert!(c.max_rel_error <= 1e-6, "{c:?}");
        }
    }
}
