use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::baselines::noisy_gating_baseline;
use crate::routing::{ssr_route, Branch, GatingScores, RouterConfig, RoutingDecision};
use crate::{Error, Result};

/// Two-layer tanh MLP `x -> w2 tanh(w1 x + b1) + b2`, mapping R^d to R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// h x d
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// d x h
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Expert {
    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            w1: Array2::zeros((h, d)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((d, h)),
            b2: Array1::zeros(d),
        }
    }

    fn random<R: Rng + ?Sized>(d: usize, h: usize, rng: &mut R) -> Self {
        let mut e = Self::zeros(d, h);
        let n1 = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, 1.0 / (h as f64).sqrt()).unwrap();
        e.w1.iter_mut().for_each(|v| *v = n1.sample(rng));
        e.w2.iter_mut().for_each(|v| *v = n2.sample(rng));
        e
    }

    /// Goes through the same batched kernel as [`combine`], so a token
    /// routed to one expert with weight 1 reproduces this bit for bit.
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        expert_batch(self, x.insert_axis(Axis(0))).1.row(0).to_owned()
    }

    fn params(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }
}

/// m x d token embeddings with optional regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub x: Array2<f64>,
    pub targets: Option<Array2<f64>>,
}

impl TokenBatch {
    pub fn new(x: Array2<f64>, targets: Option<Array2<f64>>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::invalid("empty token batch"));
        }
        crate::ot::check_finite(&x)?;
        if let Some(t) = &targets {
            if t.dim() != x.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "targets {:?} vs inputs {:?}",
                    t.dim(),
                    x.dim()
                )));
            }
        }
        Ok(Self { x, targets })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// One sparse MoE layer: gate, experts, router settings, and the optional
/// trainable noise gate used by the noisy-gating baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct MoEBlock {
    /// n x d
    pub gate: Array2<f64>,
    /// n x d; present only for the noisy-gating baseline.
    pub noise_gate: Option<Array2<f64>>,
    pub experts: Vec<Expert>,
    pub config: RouterConfig,
}

impl MoEBlock {
    /// Random block with `n` experts of hidden width `h`. Gate entries are
    /// N(0, gate_scale^2 / d).
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        n: usize,
        h: usize,
        gate_scale: f64,
        config: RouterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || h == 0 || n < 2 {
            return Err(Error::invalid(format!(
                "need d, h >= 1 and n >= 2, got d={d} h={h} n={n}"
            )));
        }
        config.validate(Some(n))?;
        let g = Normal::new(0.0, gate_scale / (d as f64).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
        let gate = Array2::from_shape_simple_fn((n, d), || g.sample(rng));
        let experts = (0..n).map(|_| Expert::random(d, h, rng)).collect();
        Ok(Self {
            gate,
            noise_gate: None,
            experts,
            config,
        })
    }

    /// Adds a zero-initialized trainable noise gate.
    pub fn with_noise_gate(mut self) -> Self {
        self.noise_gate = Some(Array2::zeros(self.gate.raw_dim()));
        self
    }

    pub fn dim(&self) -> usize {
        self.gate.ncols()
    }

    pub fn expert_count(&self) -> usize {
        self.gate.nrows()
    }

    pub fn hidden_width(&self) -> usize {
        self.experts[0].b1.len()
    }

    pub fn scores(&self, x: &Array2<f64>) -> Result<GatingScores> {
        GatingScores::new(x.dot(&self.gate.t()))
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Every parameter slice, in a fixed order: gate, noise gate (if any),
    /// then each expert's w1, b1, w2, b2.
    pub fn parameters(&self) -> impl Iterator<Item = &[f64]> {
        std::iter::once(self.gate.as_slice().unwrap())
            .chain(self.noise_gate.iter().map(|g| g.as_slice().unwrap()))
            .chain(self.experts.iter().flat_map(|e| e.params()))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        std::iter::once(self.gate.as_slice_mut().unwrap())
            .chain(self.noise_gate.iter_mut().map(|g| g.as_slice_mut().unwrap()))
            .chain(self.experts.iter_mut().flat_map(|e| e.params_mut()))
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "batch has d={} but block expects d={}",
                batch.x.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub outputs: Array2<f64>,
    pub decision: RoutingDecision,
    /// Clean scores `X W_g^T`.
    pub scores: GatingScores,
    /// Scores handed to the router; differ from `scores` only under the
    /// noisy-gating baseline.
    pub routed_scores: GatingScores,
    /// Standard-normal draws of the noisy-gating baseline.
    pub gating_noise: Option<Array2<f64>>,
}

/// Tokens routed to one expert: batch rows, their combination weights and
/// the position of the expert within each token's support.
struct ExpertGroup {
    rows: Vec<usize>,
    weights: Vec<f64>,
    slots: Vec<usize>,
}

fn group_by_expert(decision: &RoutingDecision, n: usize) -> Result<Vec<ExpertGroup>> {
    let mut groups: Vec<ExpertGroup> = (0..n)
        .map(|_| ExpertGroup {
            rows: Vec::new(),
            weights: Vec::new(),
            slots: Vec::new(),
        })
        .collect();
    for (i, route) in decision.tokens.iter().enumerate() {
        for (slot, (&j, &w)) in route.support.iter().zip(&route.weights).enumerate() {
            let group = groups
                .get_mut(j)
                .ok_or_else(|| Error::invalid(format!("expert {j} does not exist")))?;
            group.rows.push(i);
            group.weights.push(w);
            group.slots.push(slot);
        }
    }
    Ok(groups)
}

/// Hidden activations and outputs of `expert` for the rows of `x`.
fn expert_batch(expert: &Expert, x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
    let hidden = (x.dot(&expert.w1.t()) + &expert.b1).mapv(f64::tanh);
    let out = hidden.dot(&expert.w2.t()) + &expert.b2;
    (hidden, out)
}

/// `y_i = sum_{j in T_i} w_ij f_j(x_i)`, evaluating only selected experts.
pub fn combine(block: &MoEBlock, x: &Array2<f64>, decision: &RoutingDecision) -> Result<Array2<f64>> {
    if decision.token_count() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "decision covers {} tokens, batch has {}",
            decision.token_count(),
            x.nrows()
        )));
    }
    let mut y = Array2::zeros(x.raw_dim());
    for (expert, group) in block
        .experts
        .iter()
        .zip(group_by_expert(decision, block.expert_count())?)
    {
        if group.rows.is_empty() {
            continue;
        }
        let (_, out) = expert_batch(expert, x.select(Axis(0), &group.rows).view());
        for ((&i, &w), o) in group.rows.iter().zip(&group.weights).zip(out.rows()) {
            y.row_mut(i).scaled_add(w, &o);
        }
    }
    Ok(y)
}

/// Scores, routes and combines one batch.
pub fn moe_forward<R: Rng + ?Sized>(block: &MoEBlock, batch: &TokenBatch, rng: &mut R) -> Result<ForwardPass> {
    block.check_batch(batch)?;
    let scores = block.scores(&batch.x)?;
    let (routed_scores, gating_noise) = match &block.noise_gate {
        Some(w_noise) => {
            let noisy = noisy_gating_baseline(&scores, &batch.x, w_noise, rng)?;
            (noisy.scores, Some(noisy.eps))
        }
        None => (scores.clone(), None),
    };
    let decision = ssr_route(&routed_scores, &block.config, rng)?;
    let outputs = combine(block, &batch.x, &decision)?;
    Ok(ForwardPass {
        outputs,
        decision,
        scores,
        routed_scores,
        gating_noise,
    })
}

/// Parameter gradients, laid out like [`MoEBlock`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub gate: Array2<f64>,
    pub noise_gate: Option<Array2<f64>>,
    pub experts: Vec<Expert>,
}

impl Gradients {
    pub fn zeros_like(block: &MoEBlock) -> Self {
        Self {
            gate: Array2::zeros(block.gate.raw_dim()),
            noise_gate: block.noise_gate.as_ref().map(|g| Array2::zeros(g.raw_dim())),
            experts: vec![Expert::zeros(block.dim(), block.hidden_width()); block.expert_count()],
        }
    }

    /// Slices in the same order as [`MoEBlock::parameters`].
    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        std::iter::once(self.gate.as_slice().unwrap())
            .chain(self.noise_gate.iter().map(|g| g.as_slice().unwrap()))
            .chain(self.experts.iter().flat_map(|e| e.params()))
    }
}

/// Gradient of the loss with respect to every parameter, given
/// `upstream = dL/dY`.
///
/// Expert gradients flow for every selected (token, expert) pair on both
/// branches. The gate only receives gradient on the softmax branch, through
/// the softmax over each token's fixed top-k support; the Sinkhorn plan is
/// treated as a constant, so on that branch the gate gradient is exactly zero.
pub fn moe_backward(
    block: &MoEBlock,
    batch: &TokenBatch,
    forward: &ForwardPass,
    upstream: &Array2<f64>,
) -> Result<Gradients> {
    block.check_batch(batch)?;
    let decision = &forward.decision;
    if decision.token_count() != batch.len() || upstream.dim() != batch.x.dim() {
        return Err(Error::DimensionMismatch(format!(
            "decision for {} tokens, upstream {:?}, batch {:?}",
            decision.token_count(),
            upstream.dim(),
            batch.x.dim()
        )));
    }
    let n = block.expert_count();
    let mut grads = Gradients::zeros_like(block);
    let softmax_branch = decision.branch == Branch::Softmax;
    // dL/dw for every (token, support slot), needed on the softmax branch.
    let mut weight_grads: Vec<Vec<f64>> = decision.tokens.iter().map(|t| vec![0.0; t.support.len()]).collect();

    let groups = group_by_expert(decision, n)?;
    for ((expert, grad), group) in block.experts.iter().zip(grads.experts.iter_mut()).zip(groups) {
        if group.rows.is_empty() {
            continue;
        }
        let x = batch.x.select(Axis(0), &group.rows);
        let (hidden, out) = expert_batch(expert, x.view());
        let mut g_out = upstream.select(Axis(0), &group.rows);
        if softmax_branch {
            for (((&i, &slot), o), g) in group.rows.iter().zip(&group.slots).zip(out.rows()).zip(g_out.rows()) {
                weight_grads[i][slot] = o.dot(&g);
            }
        }
        for (mut g, &w) in g_out.rows_mut().into_iter().zip(&group.weights) {
            g *= w;
        }
        grad.b2 += &g_out.sum_axis(Axis(0));
        grad.w2 += &g_out.t().dot(&hidden);
        let g_z = g_out.dot(&expert.w2) * hidden.mapv(|v| 1.0 - v * v);
        grad.b1 += &g_z.sum_axis(Axis(0));
        grad.w1 += &g_z.t().dot(&x);
    }

    let mut score_grad = Array2::<f64>::zeros((batch.len(), n));
    if softmax_branch {
        for (i, (route, wg)) in decision.tokens.iter().zip(&weight_grads).enumerate() {
            let mean: f64 = route.weights.iter().zip(wg).map(|(w, g)| w * g).sum();
            for ((&j, &w), g) in route.support.iter().zip(&route.weights).zip(wg) {
                score_grad[[i, j]] = w * (g - mean);
            }
        }
    }

    if softmax_branch {
        score_grads_into(block, batch, forward, &score_grad, &mut grads)?;
    }
    Ok(grads)
}

/// Pushes `dL/d(routed scores)` back into the gate (and noise gate). Used by
/// the backward pass and by the score-based regularizers.
pub fn score_grads_into(
    block: &MoEBlock,
    batch: &TokenBatch,
    forward: &ForwardPass,
    score_grad: &Array2<f64>,
    grads: &mut Gradients,
) -> Result<()> {
    if score_grad.dim() != (batch.len(), block.expert_count()) {
        return Err(Error::DimensionMismatch("score gradient shape".into()));
    }
    grads.gate += &score_grad.t().dot(&batch.x);
    if let (Some(w_noise), Some(eps), Some(g_noise)) =
        (&block.noise_gate, &forward.gating_noise, grads.noise_gate.as_mut())
    {
        let logits = batch.x.dot(&w_noise.t());
        let sigmoid = logits.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let g_logits = score_grad * eps * &sigmoid;
        *g_noise += &g_logits.t().dot(&batch.x);
    }
    Ok(())
}

/// Shape-tagged array in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn from2(a: &Array2<f64>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    fn from1(a: &Array1<f64>) -> Self {
        Self {
            shape: vec![a.len()],
            data: a.to_vec(),
        }
    }

    fn to2(&self) -> Result<Array2<f64>> {
        match self.shape[..] {
            [r, c] => {
                Array2::from_shape_vec((r, c), self.data.clone()).map_err(|e| Error::DimensionMismatch(e.to_string()))
            }
            _ => Err(Error::DimensionMismatch(format!(
                "expected rank 2, got {:?}",
                self.shape
            ))),
        }
    }

    fn to1(&self) -> Result<Array1<f64>> {
        match self.shape[..] {
            [len] if len == self.data.len() => Ok(Array1::from(self.data.clone())),
            _ => Err(Error::DimensionMismatch(format!(
                "expected rank 1, got {:?}",
                self.shape
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExpertCheckpoint {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    config: RouterConfig,
    gate: Tensor,
    noise_gate: Option<Tensor>,
    experts: Vec<ExpertCheckpoint>,
}

impl MoEBlock {
    /// All parameters and the router config as one JSON document.
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ck = Checkpoint {
            config: self.config.clone(),
            gate: Tensor::from2(&self.gate),
            noise_gate: self.noise_gate.as_ref().map(Tensor::from2),
            experts: self
                .experts
                .iter()
                .map(|e| ExpertCheckpoint {
                    w1: Tensor::from2(&e.w1),
                    b1: Tensor::from1(&e.b1),
                    w2: Tensor::from2(&e.w2),
                    b2: Tensor::from1(&e.b2),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        let experts = ck
            .experts
            .iter()
            .map(|e| {
                Ok(Expert {
                    w1: e.w1.to2()?,
                    b1: e.b1.to1()?,
                    w2: e.w2.to2()?,
                    b2: e.b2.to1()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gate = ck.gate.to2()?;
        if experts.len() != gate.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} experts but gate has {} rows",
                experts.len(),
                gate.nrows()
            )));
        }
        Ok(Self {
            gate,
            noise_gate: ck.noise_gate.as_ref().map(Tensor::to2).transpose()?,
            experts,
            config: ck.config,
        })
    }
}
