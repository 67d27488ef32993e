//! Knockoff-tailored multilayer perceptron.
//!
//! The network reads an augmented row `(x_1..x_p, x̃_1..x̃_p)`. A linear
//! pairwise-coupling layer forms `F_j = Z_j x_j + Z̃_j x̃_j`, followed by ELU
//! hidden layers and a linear output:
//!
//! ```text
//! h⁰ = F,  hˡ = ELU(W⁽ˡ⁻¹⁾ᵀ hˡ⁻¹ + b⁽ˡ⁻¹⁾),  y = W⁽ᴸ⁾ᵀ hᴸ + b⁽ᴸ⁾
//! ```
//!
//! Weight matrices are stored `fan_in × fan_out`, row-major. For binary
//! responses `y` is the logit.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{row_major, Task};
use crate::error::{Error, Result};
use crate::knockoffs::AugmentedDataset;
use crate::rng::{self, stage};

pub const CHECKPOINT_FORMAT: &str = "coupling-mlp/v1";

#[inline]
fn elu(u: f64) -> f64 {
    if u > 0.0 {
        u
    } else {
        u.exp_m1()
    }
}

#[inline]
fn elu_d1(u: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else {
        u.exp()
    }
}

/// Second derivative; 0 for u ≥ 0 (the kink at 0 is assigned 0).
#[inline]
fn elu_d2(u: f64) -> f64 {
    if u < 0.0 {
        u.exp()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    #[serde(rename = "rows")]
    pub fan_in: usize,
    #[serde(rename = "cols")]
    pub fan_out: usize,
    /// `fan_in × fan_out`, row-major.
    #[serde(rename = "weights")]
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            fan_in,
            fan_out,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    #[inline]
    pub fn w(&self, i: usize, k: usize) -> f64 {
        self.weight[i * self.fan_out + k]
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (i, &h) in input.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            let row = &self.weight[i * self.fan_out..(i + 1) * self.fan_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += h * w;
            }
        }
    }

    /// `W · v` (fan_in-vector) for an adjoint `v` of length fan_out.
    fn back(&self, v: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for i in 0..self.fan_in {
            let row = &self.weight[i * self.fan_out..(i + 1) * self.fan_out];
            out.push(row.iter().zip(v).map(|(w, d)| w * d).sum());
        }
    }
}

/// Hidden widths `p, ⌈p/2⌉, ⌈p/4⌉`.
pub fn default_hidden(p: usize) -> Vec<usize> {
    vec![p.max(1), p.div_ceil(2).max(1), p.div_ceil(4).max(1)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub validation_fraction: f64,
    pub patience: usize,
    pub seed: u64,
    /// Hidden widths; `None` uses [`default_hidden`].
    pub hidden: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            validation_fraction: 0.1,
            patience: 10,
            seed: 0,
            hidden: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return bad("validation_fraction must be in (0, 0.5]");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if let Some(h) = &self.hidden {
            if h.is_empty() || h.contains(&0) {
                return bad("hidden widths must be nonempty and positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub n_train: usize,
    pub n_validation: usize,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingMlp {
    pub format: String,
    pub task: Task,
    pub p: usize,
    pub z: Vec<f64>,
    pub z_tilde: Vec<f64>,
    /// Hidden layers `W⁽⁰⁾..W⁽ᴸ⁻¹⁾` followed by the output layer `W⁽ᴸ⁾`.
    pub layers: Vec<Dense>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
}

/// Per-row forward values kept for differentiation.
struct Trace {
    /// pre-activations of each hidden layer
    pre: Vec<Vec<f64>>,
    /// activations h⁰ (= F) .. hᴸ
    act: Vec<Vec<f64>>,
    output: f64,
}

impl CouplingMlp {
    /// Network with all weights and biases zero and the given architecture.
    pub fn zeros(p: usize, hidden: &[usize], task: Task) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = p;
        for &h in hidden {
            layers.push(Dense::zeros(fan_in, h));
            fan_in = h;
        }
        layers.push(Dense::zeros(fan_in, 1));
        CouplingMlp {
            format: CHECKPOINT_FORMAT.to_string(),
            task,
            p,
            z: vec![0.0; p],
            z_tilde: vec![0.0; p],
            layers,
            training: None,
        }
    }

    /// Uniform fan-in initialization `U(−1/√fan_in, 1/√fan_in)` for weights and
    /// biases from stream `(seed, INIT, 0)`; coupling weights start at 1/√2.
    pub fn init(p: usize, hidden: &[usize], task: Task, seed: u64) -> Self {
        let mut model = Self::zeros(p, hidden, task);
        let mut rng = rng::stream(seed, stage::INIT, 0);
        for layer in &mut model.layers {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.random_range(-bound..bound);
            }
        }
        model.z.fill(std::f64::consts::FRAC_1_SQRT_2);
        model.z_tilde.fill(std::f64::consts::FRAC_1_SQRT_2);
        model
    }

    /// Input width, `2p`.
    pub fn input_dim(&self) -> usize {
        2 * self.p
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    /// Checks that the layer dimensions chain from `p` to a scalar.
    pub fn validate(&self) -> Result<()> {
        let corrupt = |m: String| Err(Error::Parse(format!("corrupt model: {m}")));
        if self.z.len() != self.p || self.z_tilde.len() != self.p {
            return corrupt("coupling weight length differs from p".into());
        }
        if self.layers.len() < 2 {
            return corrupt("need at least one hidden layer and an output layer".into());
        }
        let mut fan_in = self.p;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.fan_in != fan_in
                || layer.weight.len() != layer.fan_in * layer.fan_out
                || layer.bias.len() != layer.fan_out
            {
                return corrupt(format!("layer {l} does not chain"));
            }
            fan_in = layer.fan_out;
        }
        if fan_in != 1 {
            return corrupt("output layer must have width 1".into());
        }
        Ok(())
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input row".into()));
        }
        Ok(())
    }

    fn coupling(&self, row: &[f64]) -> Vec<f64> {
        let p = self.p;
        (0..p)
            .map(|j| self.z[j] * row[j] + self.z_tilde[j] * row[j + p])
            .collect()
    }

    fn trace(&self, row: &[f64]) -> Trace {
        let hidden = self.hidden_layers();
        let mut pre = Vec::with_capacity(hidden);
        let mut act = Vec::with_capacity(hidden + 1);
        act.push(self.coupling(row));
        for layer in &self.layers[..hidden] {
            let mut u = Vec::with_capacity(layer.fan_out);
            layer.apply(act.last().unwrap(), &mut u);
            act.push(u.iter().map(|&v| elu(v)).collect());
            pre.push(u);
        }
        let mut out = Vec::with_capacity(1);
        self.layers[hidden].apply(act.last().unwrap(), &mut out);
        Trace {
            pre,
            act,
            output: out[0],
        }
    }

    /// Adjoints ∂y/∂hˡ for l = 0..L (index 0 is ∂y/∂F).
    fn adjoints(&self, trace: &Trace) -> Vec<Vec<f64>> {
        let hidden = self.hidden_layers();
        let mut adj = vec![Vec::new(); hidden + 1];
        adj[hidden] = self.layers[hidden].weight.clone();
        let mut du = Vec::new();
        for l in (1..=hidden).rev() {
            du.clear();
            du.extend(
                adj[l]
                    .iter()
                    .zip(&trace.pre[l - 1])
                    .map(|(d, &u)| d * elu_d1(u)),
            );
            let mut next = Vec::new();
            self.layers[l - 1].back(&du, &mut next);
            adj[l - 1] = next;
        }
        adj
    }

    pub fn forward(&self, row: &[f64]) -> Result<f64> {
        self.check_row(row)?;
        Ok(self.trace(row).output)
    }

    /// Predictions for every row (logits for binary tasks).
    pub fn predict(&self, rows: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        rows.chunks(d).map(|r| self.forward(r)).collect()
    }

    /// Exact ∂y/∂x over all 2p inputs.
    pub fn input_gradient(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check_row(row)?;
        let mut out = vec![0.0; self.input_dim()];
        self.gradient_into(row, &mut out);
        Ok(out)
    }

    pub(crate) fn gradient_into(&self, row: &[f64], out: &mut [f64]) -> f64 {
        let trace = self.trace(row);
        let adj = self.adjoints(&trace);
        let p = self.p;
        for j in 0..p {
            out[j] = self.z[j] * adj[0][j];
            out[j + p] = self.z_tilde[j] * adj[0][j];
        }
        trace.output
    }

    /// Exact ∂²y/∂x∂x over all 2p inputs, row-major `2p × 2p`.
    pub fn input_hessian(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check_row(row)?;
        let d = self.input_dim();
        let mut out = vec![0.0; d * d];
        let h = self.coupling_hessian(row);
        let p = self.p;
        let c: Vec<f64> = self.z.iter().chain(&self.z_tilde).copied().collect();
        for a in 0..d {
            for b in 0..d {
                out[a * d + b] = c[a] * c[b] * h[(a % p) * p + b % p];
            }
        }
        Ok(out)
    }

    /// Hessian of the output with respect to the coupling outputs `F`
    /// (row-major `p × p`).
    ///
    /// Every pre-activation is linear in the previous activation, so the only
    /// curvature comes from ELU'': `H = Σ_l Σ_k (∂y/∂h_lk) ELU''(u_lk) ∇u_lk ∇u_lkᵀ`.
    pub fn coupling_hessian(&self, row: &[f64]) -> Vec<f64> {
        let p = self.p;
        let hidden = self.hidden_layers();
        let trace = self.trace(row);
        let adj = self.adjoints(&trace);
        let mut hess = vec![0.0; p * p];
        // ∇u of the current layer, fan_out × p row-major
        let first = &self.layers[0];
        let mut grad_u = vec![0.0; first.fan_out * p];
        for m in 0..p {
            for k in 0..first.fan_out {
                grad_u[k * p + m] = first.w(m, k);
            }
        }
        #[allow(clippy::needless_range_loop)] // l indexes three parallel traces
        for l in 1..=hidden {
            let width = self.layers[l - 1].fan_out;
            let u = &trace.pre[l - 1];
            for k in 0..width {
                let coef = adj[l][k] * elu_d2(u[k]);
                if coef == 0.0 {
                    continue;
                }
                let g = &grad_u[k * p..(k + 1) * p];
                for a in 0..p {
                    let ga = coef * g[a];
                    if ga == 0.0 {
                        continue;
                    }
                    let row_h = &mut hess[a * p..(a + 1) * p];
                    for (hb, &gb) in row_h.iter_mut().zip(g) {
                        *hb += ga * gb;
                    }
                }
            }
            if l < hidden {
                // ∇u_{l+1} = W⁽ˡ⁾ᵀ diag(ELU'(u_l)) ∇u_l
                let next = &self.layers[l];
                let mut scaled = grad_u;
                for k in 0..width {
                    let s = elu_d1(u[k]);
                    scaled[k * p..(k + 1) * p].iter_mut().for_each(|v| *v *= s);
                }
                let mut out = vec![0.0; next.fan_out * p];
                for i in 0..width {
                    let src = &scaled[i * p..(i + 1) * p];
                    for k in 0..next.fan_out {
                        let w = next.w(i, k);
                        if w == 0.0 {
                            continue;
                        }
                        let dst = &mut out[k * p..(k + 1) * p];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o += w * s;
                        }
                    }
                }
                grad_u = out;
            }
        }
        // exact symmetry
        for a in 0..p {
            for b in a + 1..p {
                let v = 0.5 * (hess[a * p + b] + hess[b * p + a]);
                hess[a * p + b] = v;
                hess[b * p + a] = v;
            }
        }
        hess
    }

    /// Coupling-layer gradient `∂y/∂F` and output.
    pub fn coupling_gradient(&self, row: &[f64]) -> (f64, Vec<f64>) {
        let trace = self.trace(row);
        let adj = self.adjoints(&trace);
        (trace.output, adj.into_iter().next().unwrap())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: CouplingMlp = serde_json::from_str(text)?;
        if model.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!(
                "unsupported checkpoint format {:?}",
                model.format
            )));
        }
        model.validate()?;
        Ok(model)
    }
}

/// Parameter-shaped gradient buffer.
struct Grads {
    z: Vec<f64>,
    z_tilde: Vec<f64>,
    layers: Vec<Dense>,
}

impl Grads {
    fn zeros_like(m: &CouplingMlp) -> Self {
        Grads {
            z: vec![0.0; m.p],
            z_tilde: vec![0.0; m.p],
            layers: m
                .layers
                .iter()
                .map(|l| Dense::zeros(l.fan_in, l.fan_out))
                .collect(),
        }
    }

    fn clear(&mut self) {
        self.z.fill(0.0);
        self.z_tilde.fill(0.0);
        for l in &mut self.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![&mut self.z, &mut self.z_tilde];
        for l in &mut self.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }
}

fn params_mut(m: &mut CouplingMlp) -> Vec<&mut [f64]> {
    let mut v: Vec<&mut [f64]> = vec![&mut m.z, &mut m.z_tilde];
    for l in &mut m.layers {
        v.push(&mut l.weight);
        v.push(&mut l.bias);
    }
    v
}

/// Loss of one prediction and its derivative with respect to the output.
fn loss_and_slope(task: Task, pred: f64, target: f64) -> (f64, f64) {
    match task {
        Task::Regression => {
            let r = pred - target;
            (r * r, 2.0 * r)
        }
        Task::Binary => {
            // softplus(f) − y f, computed stably
            let sp = if pred > 0.0 {
                pred + (-pred).exp().ln_1p()
            } else {
                pred.exp().ln_1p()
            };
            let prob = 1.0 / (1.0 + (-pred).exp());
            (sp - target * pred, prob - target)
        }
    }
}

impl CouplingMlp {
    /// Accumulates parameter gradients of `slope · y(row)` into `g`.
    fn backprop(&self, row: &[f64], slope: f64, g: &mut Grads) {
        let hidden = self.hidden_layers();
        let trace = self.trace(row);
        let mut delta = vec![slope];
        for l in (0..=hidden).rev() {
            let layer = &self.layers[l];
            let input = &trace.act[l];
            let gl = &mut g.layers[l];
            for (b, d) in gl.bias.iter_mut().zip(&delta) {
                *b += d;
            }
            for (i, &h) in input.iter().enumerate() {
                if h == 0.0 {
                    continue;
                }
                let grow = &mut gl.weight[i * layer.fan_out..(i + 1) * layer.fan_out];
                for (gw, d) in grow.iter_mut().zip(&delta) {
                    *gw += h * d;
                }
            }
            let mut back = Vec::with_capacity(layer.fan_in);
            layer.back(&delta, &mut back);
            if l > 0 {
                for (b, &u) in back.iter_mut().zip(&trace.pre[l - 1]) {
                    *b *= elu_d1(u);
                }
            }
            delta = back;
        }
        let p = self.p;
        for j in 0..p {
            g.z[j] += delta[j] * row[j];
            g.z_tilde[j] += delta[j] * row[j + p];
        }
    }

    fn mean_loss(&self, rows: &[f64], y: &[f64], idx: &[usize]) -> f64 {
        let d = self.input_dim();
        let total: f64 = idx
            .iter()
            .map(|&r| {
                loss_and_slope(
                    self.task,
                    self.trace(&rows[r * d..(r + 1) * d]).output,
                    y[r],
                )
                .0
            })
            .sum();
        total / idx.len().max(1) as f64
    }
}

/// Trains a fresh network on the augmented data.
///
/// A seeded `validation_fraction` of rows is held out; the parameters with
/// the lowest validation loss are returned after early stopping.
pub fn train(data: &AugmentedDataset, cfg: &TrainConfig) -> Result<CouplingMlp> {
    cfg.validate()?;
    let n = data.n_samples();
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 rows to train, got {n}"
        )));
    }
    if data.response.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("response".into()));
    }
    let p = data.p();
    let hidden = cfg.hidden.clone().unwrap_or_else(|| default_hidden(p));
    let mut model = CouplingMlp::init(p, &hidden, data.task, cfg.seed);
    let rows = row_major(&data.columns);
    let y = &data.response;
    let d = model.input_dim();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, stage::TRAIN, 0));
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let mut summary = TrainingSummary {
        epochs_run: 0,
        best_epoch: 0,
        best_validation_loss: model.mean_loss(&rows, y, &val_idx),
        n_train: train_idx.len(),
        n_validation: val_idx.len(),
        config: cfg.clone(),
    };
    if cfg.epochs == 0 {
        model.training = Some(summary);
        return Ok(model);
    }

    let mut best = model.clone();
    let mut grads = Grads::zeros_like(&model);
    let mut m1 = Grads::zeros_like(&model);
    let mut m2 = Grads::zeros_like(&model);
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut step = 0i32;
    let mut shuffle_rng = rng::stream(cfg.seed, stage::TRAIN, 1);
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            for &r in batch {
                let row = &rows[r * d..(r + 1) * d];
                let pred = model.trace(row).output;
                let (loss, slope) = loss_and_slope(model.task, pred, y[r]);
                epoch_loss += loss;
                model.backprop(row, slope * scale, &mut grads);
            }
            step += 1;
            let bc1 = 1.0 - beta1.powi(step);
            let bc2 = 1.0 - beta2.powi(step);
            let decay = cfg.weight_decay;
            let lr = cfg.learning_rate;
            let params = params_mut(&mut model);
            let gs = grads.slices_mut();
            let m1s = m1.slices_mut();
            let m2s = m2.slices_mut();
            for (k, (((pv, gv), mv), vv)) in
                params.into_iter().zip(gs).zip(m1s).zip(m2s).enumerate()
            {
                // biases sit at even slots ≥ 3; no decay on them
                let decayed = k < 2 || k % 2 == 0;
                for i in 0..pv.len() {
                    let mut g = gv[i];
                    if decayed {
                        g += decay * pv[i];
                    }
                    mv[i] = beta1 * mv[i] + (1.0 - beta1) * g;
                    vv[i] = beta2 * vv[i] + (1.0 - beta2) * g * g;
                    pv[i] -= lr * (mv[i] / bc1) / ((vv[i] / bc2).sqrt() + eps);
                }
            }
        }
        epoch_loss /= train_idx.len() as f64;
        let val_loss = model.mean_loss(&rows, y, &val_idx);
        if !epoch_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        summary.epochs_run = epoch;
        if val_loss < summary.best_validation_loss {
            summary.best_validation_loss = val_loss;
            summary.best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    best.training = Some(summary);
    Ok(best)
}

/// Coefficient of determination of `model` on the given rows.
pub fn r_squared(model: &CouplingMlp, data: &AugmentedDataset) -> Result<f64> {
    let pred = model.predict(&row_major(&data.columns))?;
    let y = &data.response;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = pred.iter().zip(y).map(|(f, t)| (f - t).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|t| (t - mean).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}
