//! The inference energy `L = L_con + μ·L_gen` and its two optimizers.
//!
//! `direct_optimize` treats every depth pixel as a free variable;
//! `descriptor_optimize` descends on the descriptor of a [`Generator`] and
//! pulls gradients back through its vector-Jacobian product. Both keep the
//! data-term anchor `Y` and the outlier depth range fixed for the whole run,
//! and both return the iterate with the smallest consistency loss among the
//! last `select_window` steps.

use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::consistency::{consistency_forward, ConsistencyConfig, ConsistencyForward, DepthRange};
use crate::error::{contract, domain, Error, Result};
use crate::generator::{Generator, ShapeDescriptor};
use crate::raster::{DepthImage, Reprojector};

/// Norm used by the data term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GenNorm {
    L1,
    #[default]
    L2,
}

impl std::str::FromStr for GenNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            other => Err(domain(format!("unknown norm {other:?}, expected L1 or L2"))),
        }
    }
}

impl std::fmt::Display for GenNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::L1 => "L1",
            Self::L2 => "L2",
        })
    }
}

/// Update rule applied to the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    /// Weight of the data term.
    pub mu: f64,
    pub gen_norm: GenNorm,
    pub steps: usize,
    pub learning_rate: f64,
    /// Number of trailing steps searched for the reported iterate.
    pub select_window: usize,
    pub optimizer: Optimizer,
    /// Halve the step (up to 10 times) whenever the total loss would rise.
    #[serde(default)]
    pub backtracking: bool,
    pub consistency: ConsistencyConfig,
}

impl EnergyConfig {
    /// Depth-map optimization defaults: μ = 1, L2, Adam at 0.0006, 100 steps.
    pub fn direct() -> Self {
        Self {
            mu: 1.0,
            gen_norm: GenNorm::L2,
            steps: 100,
            learning_rate: 0.0006,
            select_window: 10,
            optimizer: Optimizer::adam(),
            backtracking: false,
            consistency: ConsistencyConfig::default(),
        }
    }

    /// Descriptor optimization defaults: μ = 1, L2, plain gradient descent at 0.2, 100 steps.
    pub fn descriptor() -> Self {
        Self { learning_rate: 0.2, optimizer: Optimizer::GradientDescent, ..Self::direct() }
    }

    pub fn validate(&self, n_views: usize) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(domain(format!("mu must be finite and non-negative, got {}", self.mu)));
        }
        if self.steps == 0 {
            return Err(domain("steps must be at least 1"));
        }
        if self.select_window == 0 || self.select_window > self.steps {
            return Err(domain(format!(
                "select_window must lie in [1, steps = {}], got {}",
                self.steps, self.select_window
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(domain(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        self.consistency.validate(n_views)
    }
}

fn check_pairs(v: &[DepthImage], y: &[DepthImage]) -> Result<usize> {
    if v.len() != y.len() {
        return Err(contract(format!("{} views against {} references", v.len(), y.len())));
    }
    if v.iter().zip(y).any(|(a, b)| !a.same_shape(b)) {
        return Err(contract("view and reference sizes differ"));
    }
    Ok(v.iter().map(DepthImage::len).sum())
}

/// Mean-per-element distance between two view stacks: mean `|V − Y|` for
/// L1, root-mean-square for L2.
pub fn generator_loss(v: &[DepthImage], y: &[DepthImage], norm: GenNorm) -> Result<f64> {
    let p = check_pairs(v, y)?;
    if p == 0 {
        return Ok(0.0);
    }
    let diffs = v.iter().zip(y).flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x - y));
    Ok(match norm {
        GenNorm::L1 => diffs.map(f64::abs).sum::<f64>() / p as f64,
        GenNorm::L2 => (diffs.map(|d| d * d).sum::<f64>() / p as f64).sqrt(),
    })
}

/// Data-term value and its gradient with respect to every pixel of `v`.
pub fn generator_loss_grad(v: &[DepthImage], y: &[DepthImage], norm: GenNorm) -> Result<(f64, Vec<Vec<f64>>)> {
    let value = generator_loss(v, y, norm)?;
    let p = v.iter().map(DepthImage::len).sum::<usize>().max(1) as f64;
    let grads = v
        .iter()
        .zip(y)
        .map(|(a, b)| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| {
                    let d = x - y;
                    match norm {
                        GenNorm::L1 => d.signum() * (d != 0.0) as u8 as f64 / p,
                        GenNorm::L2 if value > 0.0 => d / (p * value),
                        GenNorm::L2 => 0.0,
                    }
                })
                .collect()
        })
        .collect();
    Ok((value, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub consistency: f64,
    pub generator: f64,
    pub total: f64,
}

/// `L_con(V) + μ·L_gen(V, Y)` with both components.
pub fn total_loss(
    v: &[DepthImage],
    y: &[DepthImage],
    inputs: &[DepthImage],
    rig: &CameraRig,
    cfg: &EnergyConfig,
) -> Result<LossComponents> {
    let con = consistency_forward(v, inputs, rig, &cfg.consistency)?.loss;
    let gen = generator_loss(v, y, cfg.gen_norm)?;
    Ok(LossComponents { consistency: con, generator: gen, total: con + cfg.mu * gen })
}

/// Gradient of the consistency loss with respect to every pixel of every
/// view, holding the assignments of `forward` fixed.
///
/// A pooled entry `|r − v_t|` sends `−sign(r − v_t)` to the target pixel
/// and `sign(r − v_t)·∂r/∂d_s` to the source pixel whose reprojection won,
/// both divided by `N·H·W`.
pub fn consistency_loss_backward(
    forward: &ConsistencyForward,
    views: &[DepthImage],
    rig: &CameraRig,
) -> Result<Vec<Vec<f64>>> {
    let tape = &forward.tape;
    let n = rig.len();
    if tape.n_views != n
        || views.len() != n
        || tape.width != rig.width
        || tape.height != rig.height
        || tape.assignments.len() != n
        || views.iter().any(|v| v.width() != tape.width || v.height() != tape.height)
    {
        return Err(contract("backward pass does not match its forward pass"));
    }
    let (w, h) = (tape.width, tape.height);
    let scale = 1.0 / (n * w * h) as f64;
    let mut grads = vec![vec![0.0; w * h]; n];
    let reprojectors: Vec<Vec<Reprojector>> = (0..n)
        .map(|t| (0..n).map(|s| Reprojector::new(&rig.views[s], &rig.views[t])).collect())
        .collect();
    for (t, asg) in tape.assignments.iter().enumerate() {
        for (i, a) in asg.iter().enumerate() {
            let Some(a) = a else { continue };
            grads[t][i] -= a.sign * scale;
            if let Some(sp) = a.source_pixel {
                let slope = reprojectors[t][a.source_view].depth_slope(sp % w, sp / w);
                grads[a.source_view][sp] += a.sign * slope * scale;
            }
        }
    }
    Ok(grads)
}

/// Losses of one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub consistency_loss: f64,
    pub generator_loss: f64,
    pub total_loss: f64,
    /// Step size used to reach this iterate (0 for the initial point and
    /// for steps rejected by backtracking).
    pub step_size: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EnergyReport {
    pub initial: Option<StepRecord>,
    /// Iterates `1..=steps`.
    pub steps: Vec<StepRecord>,
    /// Step number of the reported iterate.
    pub selected_step: usize,
    pub depth_range: Option<DepthRange>,
    pub initial_descriptor: Option<Vec<f64>>,
    pub descriptor: Option<Vec<f64>>,
    #[serde(skip)]
    pub final_views: Vec<DepthImage>,
}

impl EnergyReport {
    pub fn selected(&self) -> Option<&StepRecord> {
        self.steps.iter().find(|r| r.step == self.selected_step)
    }

    /// Checks that the selected step attains the minimum consistency loss of
    /// the trailing `window` steps.
    pub fn selection_is_window_minimum(&self, window: usize) -> bool {
        let tail = &self.steps[self.steps.len().saturating_sub(window)..];
        let Some(sel) = tail.iter().find(|r| r.step == self.selected_step) else { return false };
        tail.iter().all(|r| sel.consistency_loss <= r.consistency_loss)
    }
}

struct Evaluation {
    losses: LossComponents,
    grad: Option<Vec<f64>>,
}

struct DescentResult {
    initial: StepRecord,
    steps: Vec<StepRecord>,
    selected_step: usize,
    best: Vec<f64>,
}

struct UpdateRule {
    kind: Optimizer,
    velocity: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl UpdateRule {
    fn new(kind: Optimizer, n: usize) -> Self {
        Self { kind, velocity: vec![0.0; n], second: vec![0.0; n], t: 0 }
    }

    /// Direction for gradient `g` and the state that goes with it.
    fn propose(&self, g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        match self.kind {
            Optimizer::GradientDescent => (g.to_vec(), Vec::new(), Vec::new()),
            Optimizer::Momentum { beta } => {
                let v: Vec<f64> = self.velocity.iter().zip(g).map(|(v, g)| beta * v + g).collect();
                (v.clone(), v, Vec::new())
            }
            Optimizer::Adam { beta1, beta2, epsilon } => {
                let t = self.t + 1;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let m: Vec<f64> = self.velocity.iter().zip(g).map(|(m, g)| beta1 * m + (1.0 - beta1) * g).collect();
                let s: Vec<f64> = self.second.iter().zip(g).map(|(s, g)| beta2 * s + (1.0 - beta2) * g * g).collect();
                let dir = m.iter().zip(&s).map(|(m, s)| (m / c1) / ((s / c2).sqrt() + epsilon)).collect();
                (dir, m, s)
            }
        }
    }

    fn commit(&mut self, velocity: Vec<f64>, second: Vec<f64>) {
        match self.kind {
            Optimizer::GradientDescent => {}
            Optimizer::Momentum { .. } => self.velocity = velocity,
            Optimizer::Adam { .. } => {
                self.velocity = velocity;
                self.second = second;
            }
        }
        self.t += 1;
    }
}

const MAX_HALVINGS: usize = 10;

fn record(step: usize, e: &LossComponents, step_size: f64) -> StepRecord {
    StepRecord {
        step,
        consistency_loss: e.consistency,
        generator_loss: e.generator,
        total_loss: e.total,
        step_size,
    }
}

fn diverged(step: usize, e: &LossComponents, initial: Option<StepRecord>, steps: &[StepRecord]) -> Error {
    Error::Diverged {
        step,
        message: format!("non-finite loss (consistency {}, generator {})", e.consistency, e.generator),
        report: Box::new(EnergyReport { initial, steps: steps.to_vec(), ..Default::default() }),
    }
}

/// Shared descent loop over a flat parameter vector.
fn descend<F>(x0: Vec<f64>, cfg: &EnergyConfig, mut eval: F) -> Result<DescentResult>
where
    F: FnMut(&[f64], bool) -> Result<Evaluation>,
{
    let mut x = x0;
    let mut current = eval(&x, true)?;
    if !current.losses.total.is_finite() {
        return Err(diverged(0, &current.losses, None, &[]));
    }
    let initial = record(0, &current.losses, 0.0);
    let mut rule = UpdateRule::new(cfg.optimizer, x.len());
    let mut steps = Vec::with_capacity(cfg.steps);
    let window_start = cfg.steps - cfg.select_window + 1;
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    for k in 1..=cfg.steps {
        let need_grad = k < cfg.steps || cfg.backtracking;
        let g = current.grad.take().ok_or_else(|| contract("missing gradient"))?;
        let (dir, vel, sec) = rule.propose(&g);
        let mut alpha = cfg.learning_rate;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(x, d)| x - alpha * d).collect();
            if trial.iter().any(|v| !v.is_finite()) {
                let bad = LossComponents { consistency: f64::NAN, generator: f64::NAN, total: f64::NAN };
                return Err(diverged(k, &bad, Some(initial), &steps));
            }
            let e = eval(&trial, need_grad)?;
            if !e.losses.total.is_finite() {
                return Err(diverged(k, &e.losses, Some(initial), &steps));
            }
            if !cfg.backtracking || e.losses.total <= current.losses.total {
                accepted = Some((trial, e));
                break;
            }
            alpha *= 0.5;
        }
        let step_size = match accepted {
            Some((trial, e)) => {
                rule.commit(vel, sec);
                x = trial;
                current = e;
                alpha
            }
            None => {
                current.grad = Some(g);
                0.0
            }
        };
        steps.push(record(k, &current.losses, step_size));
        if k >= window_start && best.as_ref().is_none_or(|(c, _, _)| current.losses.consistency < *c) {
            best = Some((current.losses.consistency, k, x.clone()));
        }
    }
    let (_, selected_step, best) = best.expect("window is non-empty");
    Ok(DescentResult { initial, steps, selected_step, best })
}

fn to_views(flat: &[f64], like: &[DepthImage]) -> Result<Vec<DepthImage>> {
    let mut out = Vec::with_capacity(like.len());
    let mut off = 0;
    for v in like {
        let n = v.len();
        out.push(DepthImage::from_data(v.width(), v.height(), flat[off..off + n].to_vec(), v.background_depth())?);
        off += n;
    }
    Ok(out)
}

fn frozen_consistency(cfg: &EnergyConfig, reference: &[DepthImage], fallback: &[DepthImage]) -> Result<ConsistencyConfig> {
    let mut c = cfg.consistency;
    if c.depth_range.is_none() {
        c.depth_range = DepthRange::from_views(reference).or_else(|| DepthRange::from_views(fallback));
        if c.depth_range.is_none() {
            return Err(domain("no foreground to derive the depth range from"));
        }
    }
    Ok(c)
}

/// Gradient descent on the depth pixels themselves, anchored to the
/// initial views.
pub fn direct_optimize(
    initial_views: &[DepthImage],
    inputs: &[DepthImage],
    rig: &CameraRig,
    cfg: &EnergyConfig,
) -> Result<EnergyReport> {
    cfg.validate(rig.len())?;
    check_pairs(initial_views, inputs)?;
    let mut cfg = *cfg;
    cfg.consistency = frozen_consistency(&cfg, inputs, initial_views)?;
    let anchor = initial_views.to_vec();
    let x0: Vec<f64> = initial_views.iter().flat_map(|v| v.data().iter().copied()).collect();

    let result = descend(x0, &cfg, |x, need_grad| {
        if x.iter().any(|v| !v.is_finite()) {
            let nan = LossComponents { consistency: f64::NAN, generator: f64::NAN, total: f64::NAN };
            return Ok(Evaluation { losses: nan, grad: None });
        }
        let views = to_views(x, &anchor)?;
        let fwd = consistency_forward(&views, inputs, rig, &cfg.consistency)?;
        let (gen, gen_grad) = generator_loss_grad(&views, &anchor, cfg.gen_norm)?;
        let losses = LossComponents { consistency: fwd.loss, generator: gen, total: fwd.loss + cfg.mu * gen };
        let grad = if need_grad {
            let con_grad = consistency_loss_backward(&fwd, &views, rig)?;
            Some(
                con_grad
                    .iter()
                    .zip(&gen_grad)
                    .flat_map(|(c, g)| c.iter().zip(g).map(|(c, g)| c + cfg.mu * g))
                    .collect(),
            )
        } else {
            None
        };
        Ok(Evaluation { losses, grad })
    })?;

    Ok(EnergyReport {
        initial: Some(result.initial),
        steps: result.steps,
        selected_step: result.selected_step,
        depth_range: cfg.consistency.depth_range,
        initial_descriptor: None,
        descriptor: None,
        final_views: to_views(&result.best, &anchor)?,
    })
}

/// Gradient descent on a generator descriptor, starting from and anchored
/// to `z0`.
pub fn descriptor_optimize(
    generator: &dyn Generator,
    z0: &ShapeDescriptor,
    inputs: &[DepthImage],
    rig: &CameraRig,
    cfg: &EnergyConfig,
) -> Result<EnergyReport> {
    cfg.validate(rig.len())?;
    if z0.len() != generator.descriptor_dim() {
        return Err(contract(format!(
            "descriptor has {} entries, generator expects {}",
            z0.len(),
            generator.descriptor_dim()
        )));
    }
    let anchor = generator.forward(z0, inputs)?;
    check_pairs(&anchor, inputs)?;
    let mut cfg = *cfg;
    cfg.consistency = frozen_consistency(&cfg, &anchor, inputs)?;

    let result = descend(z0.values().to_vec(), &cfg, |z, need_grad| {
        let z = ShapeDescriptor::new(z.to_vec())?;
        let views = generator.forward(&z, inputs)?;
        let fwd = consistency_forward(&views, inputs, rig, &cfg.consistency)?;
        let (gen, gen_grad) = generator_loss_grad(&views, &anchor, cfg.gen_norm)?;
        let losses = LossComponents { consistency: fwd.loss, generator: gen, total: fwd.loss + cfg.mu * gen };
        let grad = if need_grad {
            let mut upstream = consistency_loss_backward(&fwd, &views, rig)?;
            for (u, g) in upstream.iter_mut().zip(&gen_grad) {
                for (u, g) in u.iter_mut().zip(g) {
                    *u += cfg.mu * g;
                }
            }
            Some(generator.backward(&z, inputs, &upstream)?)
        } else {
            None
        };
        Ok(Evaluation { losses, grad })
    })?;

    let best = ShapeDescriptor::new(result.best)?;
    let final_views = generator.forward(&best, inputs)?;
    Ok(EnergyReport {
        initial: Some(result.initial),
        steps: result.steps,
        selected_step: result.selected_step,
        depth_range: cfg.consistency.depth_range,
        initial_descriptor: Some(z0.values().to_vec()),
        descriptor: Some(best.into_values()),
        final_views,
    })
}
