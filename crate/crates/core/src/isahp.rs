//! Instance-wise self-attentive Hawkes model.
//!
//! For event `i` and candidate type `k`, inside the interval
//! `(t_{i-1}, t_i]` the intensity is
//!
//! ```text
//! λ_k(t) = μ_{i,k} + Σ_{t_j < t_i} α_{i,j,k} γ_{i,j,k} exp(-γ_{i,j,k} (t - t_j))
//! ```
//!
//! where the candidate embedding `x = g(0, k)` (or `g(t_i − t_{i−1}, k)`
//! under [`QueryTime::IntervalEnd`]) attends over the embeddings
//! `x_j = g(t_j − t_{j−1}, k_j)` of strictly earlier events:
//!
//! * `A_{i,j}` is the head-averaged masked softmax of `x K_h x_j`;
//! * `μ_{i,k} = softplus(μ̄_k) + sigmoid(w^μ_k · Σ_j A_{i,j} v_j)`;
//! * `α_{i,j,k} = softplus(A_{i,j} w^α_k · v_j)`;
//! * `γ_{i,j,k} = max(softplus(A_{i,j} w^γ_k · v_j + b^γ_k), 1e-4)`.
//!
//! `μ`, `α` and `γ` are constant within an interval, so the compensator is
//! exact. Pairs with `t_j ≥ t_i` are left out of every sum.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::eventseq::{Dataset, EventSequence};
use crate::graddiff::scalar::softplus_inv;
use crate::graddiff::{GradError, Gradients, ParamCheckpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::metrics::{argmax, TypePredictor};
use crate::trainer::Objective;

/// Lower bound on every decay rate.
pub const GAMMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CompensatorMode {
    /// Σ over all K candidate types.
    #[default]
    AllTypes,
    /// Only the type of the event closing each interval.
    ObservedType,
}

/// Gap fed to the candidate embedding of interval `(t_{i−1}, t_i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryTime {
    /// Zero: the embedding is taken at the start of the interval, so the
    /// intensity on it depends only on events up to `t_{i−1}`.
    #[default]
    IntervalStart,
    /// `t_i − t_{i−1}`, the gap of the event closing the interval. The
    /// intensity then sees where the interval ends.
    IntervalEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IsahpConfig {
    pub embed_dim: usize,
    pub value_dim: usize,
    pub heads: usize,
    pub type_hidden: usize,
    pub time_hidden: usize,
    pub omega1: f64,
    pub omega2: f64,
    pub compensator_mode: CompensatorMode,
    pub query_time: QueryTime,
}

impl Default for IsahpConfig {
    fn default() -> Self {
        Self {
            embed_dim: 10,
            value_dim: 10,
            heads: 2,
            type_hidden: 10,
            time_hidden: 10,
            omega1: 0.025,
            omega2: 0.25,
            compensator_mode: CompensatorMode::AllTypes,
            query_time: QueryTime::IntervalStart,
        }
    }
}

impl IsahpConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [self.embed_dim, self.value_dim, self.heads, self.type_hidden, self.time_hidden];
        if dims.contains(&0) {
            return Err(ModelError::Config("all ISAHP dimensions must be at least 1".into()));
        }
        if !(self.omega1 >= 0.0 && self.omega2 >= 0.0 && self.omega1.is_finite() && self.omega2.is_finite()) {
            return Err(ModelError::Config("omega1 and omega2 must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Ids {
    type_w: ParamId,
    type_b: ParamId,
    joint_dt: ParamId,
    joint_w: ParamId,
    joint_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    w_v: ParamId,
    keys: Vec<ParamId>,
    w_mu: ParamId,
    w_alpha: ParamId,
    w_gamma: ParamId,
    b_gamma: ParamId,
    mu_bar: ParamId,
}

fn shapes(cfg: &IsahpConfig, k: usize) -> Vec<(String, (usize, usize))> {
    let (m, mv) = (cfg.embed_dim, cfg.value_dim);
    let mut out = vec![
        ("type_w".to_string(), (k, cfg.type_hidden)),
        ("type_b".to_string(), (1, cfg.type_hidden)),
        ("joint_dt".to_string(), (1, cfg.time_hidden)),
        ("joint_w".to_string(), (cfg.type_hidden, cfg.time_hidden)),
        ("joint_b".to_string(), (1, cfg.time_hidden)),
        ("out_w".to_string(), (cfg.time_hidden, m)),
        ("out_b".to_string(), (1, m)),
        ("w_v".to_string(), (m, mv)),
    ];
    out.extend((0..cfg.heads).map(|h| (format!("key_{h}"), (m, m))));
    out.extend([
        ("w_mu".to_string(), (k, mv)),
        ("w_alpha".to_string(), (k, mv)),
        ("w_gamma".to_string(), (k, mv)),
        ("b_gamma".to_string(), (k, 1)),
        ("mu_bar".to_string(), (k, 1)),
    ]);
    out
}

impl Ids {
    fn resolve(store: &ParamStore, cfg: &IsahpConfig, k: usize) -> Result<Self, ModelError> {
        let mut ids = Vec::new();
        for (name, shape) in shapes(cfg, k) {
            let id = store
                .find(&name)
                .filter(|&id| store.get(id).shape() == shape)
                .ok_or_else(|| ModelError::Config(format!("parameter {name} with shape {shape:?} missing")))?;
            ids.push(id);
        }
        if store.len() != ids.len() {
            return Err(ModelError::Config("unexpected extra parameters".into()));
        }
        let h = cfg.heads;
        Ok(Self {
            type_w: ids[0],
            type_b: ids[1],
            joint_dt: ids[2],
            joint_w: ids[3],
            joint_b: ids[4],
            out_w: ids[5],
            out_b: ids[6],
            w_v: ids[7],
            keys: ids[8..8 + h].to_vec(),
            w_mu: ids[8 + h],
            w_alpha: ids[9 + h],
            w_gamma: ids[10 + h],
            b_gamma: ids[11 + h],
            mu_bar: ids[12 + h],
        })
    }
}

/// Parameters bound as leaves of one tape.
struct Bound {
    type_table: Var,
    joint_dt: Var,
    joint_w: Var,
    joint_b: Var,
    out_w: Var,
    out_b: Var,
    w_v: Var,
    keys: Vec<Var>,
    w_mu: Var,
    w_alpha: Var,
    w_gamma: Var,
    b_gamma: Var,
    mu_bar: Var,
}

/// Tape nodes for one sequence. Row `r` stands for the pair
/// `rows[r] = (event index, candidate type)`.
struct Graph {
    rows: Vec<(usize, usize)>,
    x_act: Var,
    values: Var,
    heads: Vec<Var>,
    attention: Var,
    mu: Var,
    alpha: Var,
    gamma: Var,
    lambda: Var,
    nll: Var,
}

/// Per-sequence values for the observed event types. Matrices are `L×L`
/// with row `i` the target event and column `j` the source; entries with
/// `t_j ≥ t_i` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceForward {
    pub embeddings: Tensor,
    pub values: Tensor,
    pub attention_heads: Vec<Tensor>,
    pub attention: Tensor,
    pub alpha: Tensor,
    pub gamma: Tensor,
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Interval parameters for every event and every candidate type.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    num_types: usize,
    times: Vec<f64>,
    mu: Vec<f64>,
    alpha: Tensor,
    gamma: Tensor,
}

impl Candidates {
    fn row(&self, i: usize, k: usize) -> usize {
        i * self.num_types + k
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn background(&self, i: usize, k: usize) -> f64 {
        self.mu[self.row(i, k)]
    }

    /// `(α, γ)` of source `j` on candidate `(i, k)`, or `None` unless
    /// `t_j < t_i`.
    pub fn heads(&self, i: usize, j: usize, k: usize) -> Option<(f64, f64)> {
        (self.times[j] < self.times[i]).then(|| {
            let r = self.row(i, k);
            (self.alpha.get(r, j), self.gamma.get(r, j))
        })
    }

    /// `λ_k(t)` for `t` in the `i`-th interval.
    pub fn intensity(&self, i: usize, k: usize, t: f64) -> f64 {
        let mut lam = self.background(i, k);
        for j in 0..self.times.len() {
            if let Some((a, g)) = self.heads(i, j, k) {
                lam += a * g * (-g * (t - self.times[j])).exp();
            }
        }
        lam
    }

    /// `∫ λ_k` over `(t_{i-1}, t_i]` in closed form.
    pub fn interval_compensator(&self, i: usize, k: usize) -> f64 {
        let start = if i == 0 { 0.0 } else { self.times[i - 1] };
        let end = self.times[i];
        let mut total = self.background(i, k) * (end - start);
        for j in 0..self.times.len() {
            if let Some((a, g)) = self.heads(i, j, k) {
                let s = self.times[j];
                total += a * ((-g * (start - s)).exp() - (-g * (end - s)).exp());
            }
        }
        total
    }
}

/// Type-pair samples of instance-level `α` gathered over a batch.
#[derive(Debug, Clone, PartialEq)]
struct PairSamples {
    num_types: usize,
    values: Vec<Vec<f64>>,
}

impl PairSamples {
    fn new(k: usize) -> Self {
        Self {
            num_types: k,
            values: vec![Vec::new(); k * k],
        }
    }

    fn push(&mut self, target: usize, source: usize, a: f64) {
        self.values[target * self.num_types + source].push(a);
    }

    fn merge(&mut self, other: &PairSamples) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.extend_from_slice(b);
        }
    }

    /// `(N, mean, centered variance)` per pair, row-major.
    fn stats(&self) -> Vec<(usize, f64, f64)> {
        self.values
            .iter()
            .map(|v| {
                if v.is_empty() {
                    return (0, 0.0, 0.0);
                }
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
                (v.len(), mean, var)
            })
            .collect()
    }
}

/// `Σ_{k,k'} ω₁ ᾱ + ω₂ σ²` over pairs with at least one sample.
fn tlr_value(samples: &PairSamples, omega1: f64, omega2: f64) -> f64 {
    samples
        .stats()
        .iter()
        .filter(|s| s.0 > 0)
        .map(|&(_, mean, var)| omega1 * mean.abs() + omega2 * var)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsahpCheckpoint {
    pub config: IsahpConfig,
    pub num_types: usize,
    pub time_scale: f64,
    pub params: ParamCheckpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsahpModel {
    config: IsahpConfig,
    num_types: usize,
    time_scale: f64,
    store: ParamStore,
    ids: Ids,
}

impl IsahpModel {
    /// Weights uniform in `±1/√fan_in`, attention keys and head vectors in
    /// `±1/√M`, `b^γ = softplus⁻¹(1)`. `μ̄_k` starts so that the
    /// empty-history background `μ̄_k + 0.5` is close to the empirical rate.
    pub fn init(ds: &Dataset, config: IsahpConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let k = ds.num_types();
        if k == 0 {
            return Err(ModelError::Config("dataset has no event types".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rates = ds.empirical_rates();
        let head_scale = 1.0 / (config.embed_dim as f64).sqrt();
        let mut store = ParamStore::new();
        for (name, (r, c)) in shapes(&config, k) {
            let uniform = |rng: &mut ChaCha8Rng, s: f64| Tensor::from_fn(r, c, |_, _| rng.random_range(-s..s));
            let value = match name.as_str() {
                "type_b" | "joint_b" | "out_b" => Tensor::zeros(r, c),
                "b_gamma" => Tensor::filled(r, c, softplus_inv(1.0)),
                "mu_bar" => Tensor::col_vector(rates.iter().map(|&x| softplus_inv((x - 0.5).max(1e-3))).collect()),
                n if n.starts_with("key_") || n.starts_with("w_mu") || n.starts_with("w_alpha") || n.starts_with("w_gamma") => {
                    uniform(&mut rng, head_scale)
                }
                // `joint_dt` is one row of the joint layer, whose fan-in is
                // the type hidden size plus one
                "joint_dt" => uniform(&mut rng, 1.0 / ((config.type_hidden + 1) as f64).sqrt()),
                "joint_w" => uniform(&mut rng, 1.0 / ((config.type_hidden + 1) as f64).sqrt()),
                _ => uniform(&mut rng, 1.0 / (r as f64).sqrt()),
            };
            store.register(name, value)?;
        }
        let ids = Ids::resolve(&store, &config, k)?;
        Ok(Self {
            config,
            num_types: k,
            time_scale: ds.mean_inter_event_time(),
            store,
            ids,
        })
    }

    pub fn from_checkpoint(ck: &IsahpCheckpoint) -> Result<Self, ModelError> {
        ck.config.validate()?;
        if !(ck.time_scale > 0.0 && ck.time_scale.is_finite()) {
            return Err(ModelError::Config("time_scale must be positive".into()));
        }
        let store = ParamStore::from_checkpoint(&ck.params)?;
        let ids = Ids::resolve(&store, &ck.config, ck.num_types)?;
        Ok(Self {
            config: ck.config.clone(),
            num_types: ck.num_types,
            time_scale: ck.time_scale,
            store,
            ids,
        })
    }

    pub fn to_checkpoint(&self) -> IsahpCheckpoint {
        IsahpCheckpoint {
            config: self.config.clone(),
            num_types: self.num_types,
            time_scale: self.time_scale,
            params: self.store.to_checkpoint(),
        }
    }

    pub fn config(&self) -> &IsahpConfig {
        &self.config
    }

    /// Replaces the regularization strengths and compensator mode; the
    /// architecture must stay the same.
    pub fn set_objective(&mut self, omega1: f64, omega2: f64, mode: CompensatorMode) -> Result<(), ModelError> {
        let cfg = IsahpConfig {
            omega1,
            omega2,
            compensator_mode: mode,
            ..self.config.clone()
        };
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    /// Mean inter-event time of the training data, the unit of `Δt` inside
    /// the embedding.
    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.store.find(name).map(|id| self.store.get(id))
    }

    /// Overwrites a named parameter; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let id = self
            .store
            .find(name)
            .ok_or_else(|| ModelError::Config(format!("no parameter {name}")))?;
        if self.store.get(id).shape() != value.shape() {
            return Err(ModelError::Config(format!("shape mismatch for {name}")));
        }
        self.store.values_mut(id).copy_from_slice(value.data());
        Ok(())
    }

    fn check_types(&self, seq: &EventSequence) -> Result<(), ModelError> {
        match seq.types().find(|&k| k >= self.num_types) {
            Some(k) => Err(ModelError::TypeOutOfRange {
                k,
                num_types: self.num_types,
            }),
            None => Ok(()),
        }
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        let s = &self.store;
        let ids = &self.ids;
        let type_w = tape.param(s, ids.type_w);
        let type_b = tape.param(s, ids.type_b);
        let pre = tape.add(type_w, type_b);
        Bound {
            type_table: tape.gelu(pre),
            joint_dt: tape.param(s, ids.joint_dt),
            joint_w: tape.param(s, ids.joint_w),
            joint_b: tape.param(s, ids.joint_b),
            out_w: tape.param(s, ids.out_w),
            out_b: tape.param(s, ids.out_b),
            w_v: tape.param(s, ids.w_v),
            keys: ids.keys.iter().map(|&id| tape.param(s, id)).collect(),
            w_mu: tape.param(s, ids.w_mu),
            w_alpha: tape.param(s, ids.w_alpha),
            w_gamma: tape.param(s, ids.w_gamma),
            b_gamma: tape.param(s, ids.b_gamma),
            mu_bar: tape.param(s, ids.mu_bar),
        }
    }

    fn one_hot(&self, tape: &mut Tape, types: &[usize]) -> Var {
        tape.constant(Tensor::from_fn(types.len(), self.num_types, |r, c| {
            f64::from(u8::from(types[r] == c))
        }))
    }

    /// `g(Δt, k)` for each row.
    fn embed_rows(&self, tape: &mut Tape, p: &Bound, types: &[usize], dts: &[f64]) -> Var {
        let sel = self.one_hot(tape, types);
        let dt = tape.constant(Tensor::col_vector(dts.iter().map(|d| d / self.time_scale).collect()));
        let h = tape.matmul(sel, p.type_table);
        let a = tape.matmul(dt, p.joint_dt);
        let b = tape.matmul(h, p.joint_w);
        let z = tape.add(a, b);
        let z = tape.add(z, p.joint_b);
        let z = tape.gelu(z);
        let x = tape.matmul(z, p.out_w);
        tape.add(x, p.out_b)
    }

    fn build(&self, tape: &mut Tape, seq: &EventSequence, all_types: bool) -> Graph {
        let k = self.num_types;
        let p = self.bind(tape);
        let ev = seq.events();
        let l = ev.len();
        let t: Vec<f64> = seq.times().collect();
        let prev = |i: usize| if i == 0 { 0.0 } else { t[i - 1] };
        let rows: Vec<(usize, usize)> = if all_types {
            (0..l).flat_map(|i| (0..k).map(move |c| (i, c))).collect()
        } else {
            ev.iter().enumerate().map(|(i, e)| (i, e.k)).collect()
        };
        let r = rows.len();
        let row_types: Vec<usize> = rows.iter().map(|&(_, c)| c).collect();
        let row_dt: Vec<f64> = rows.iter().map(|&(i, _)| t[i] - prev(i)).collect();
        let query_dt: Vec<f64> = match self.config.query_time {
            QueryTime::IntervalStart => vec![0.0; r],
            QueryTime::IntervalEnd => row_dt.clone(),
        };

        let xc = self.embed_rows(tape, &p, &row_types, &query_dt);
        let x_act = if all_types || self.config.query_time == QueryTime::IntervalStart {
            let types: Vec<usize> = seq.types().collect();
            let dts: Vec<f64> = (0..l).map(|i| t[i] - prev(i)).collect();
            self.embed_rows(tape, &p, &types, &dts)
        } else {
            xc
        };
        let values = tape.matmul(x_act, p.w_v);

        let valid = |row: usize, j: usize| t[j] < t[rows[row].0];
        let mask: Arc<[bool]> = (0..r * l).map(|n| valid(n / l, n % l)).collect();
        let heads: Vec<Var> = p
            .keys
            .iter()
            .map(|&key| {
                let q = tape.matmul(xc, key);
                let logits = tape.matmul_t(q, x_act);
                tape.masked_softmax(logits, mask.clone())
            })
            .collect();
        let mut attention = heads[0];
        for &h in &heads[1..] {
            attention = tape.add(attention, h);
        }
        let attention = tape.scale(attention, 1.0 / heads.len() as f64);
        let context = tape.matmul(attention, values);

        let sel = self.one_hot(tape, &row_types);
        let mu_bar = tape.softplus(p.mu_bar);
        let base = tape.matmul(sel, mu_bar);
        let proj = tape.matmul_t(context, p.w_mu);
        let proj = tape.mul(proj, sel);
        let proj = tape.row_sum(proj);
        let excite_bg = tape.sigmoid(proj);
        let mu = tape.add(base, excite_bg);

        let maskf = tape.constant(Tensor::from_fn(r, l, |a, b| f64::from(u8::from(valid(a, b)))));
        let wa = tape.matmul_t(p.w_alpha, values);
        let wa = tape.matmul(sel, wa);
        let alpha = tape.mul(attention, wa);
        let alpha = tape.softplus(alpha);
        let alpha = tape.mul(alpha, maskf);

        let wg = tape.matmul_t(p.w_gamma, values);
        let wg = tape.matmul(sel, wg);
        let bg = tape.matmul(sel, p.b_gamma);
        let gamma = tape.mul(attention, wg);
        let gamma = tape.add(gamma, bg);
        let gamma = tape.softplus(gamma);
        let gamma = tape.clamp_min(gamma, GAMMA_FLOOR);

        // lags are zeroed on masked pairs so exp stays finite there
        let lag = |end: &dyn Fn(usize) -> f64| {
            Tensor::from_fn(r, l, |a, b| if valid(a, b) { end(rows[a].0) - t[b] } else { 0.0 })
        };
        let d1 = tape.constant(lag(&|i| t[i]));
        let d0 = tape.constant(lag(&|i| prev(i)));
        let decay = |tape: &mut Tape, d: Var| {
            let z = tape.mul(gamma, d);
            let z = tape.scale(z, -1.0);
            tape.exp(z)
        };
        let e1 = decay(tape, d1);
        let e0 = decay(tape, d0);

        let ag = tape.mul(alpha, gamma);
        let jump = tape.mul(ag, e1);
        let excite = tape.row_sum(jump);
        let lambda = tape.add(mu, excite);

        let observed: Vec<f64> = rows.iter().map(|&(i, c)| f64::from(u8::from(ev[i].k == c))).collect();
        let comp_weight = match self.config.compensator_mode {
            CompensatorMode::AllTypes => vec![1.0; r],
            CompensatorMode::ObservedType => observed.clone(),
        };
        let obs = tape.constant(Tensor::col_vector(observed));
        let cw = tape.constant(Tensor::col_vector(comp_weight));
        let log_lambda = tape.log(lambda);
        let ll = tape.mul(obs, log_lambda);
        let ll = tape.sum(ll);

        let dt = tape.constant(Tensor::col_vector(row_dt));
        let flat = tape.mul(mu, dt);
        let diff = tape.sub(e0, e1);
        let mass = tape.mul(alpha, diff);
        let mass = tape.row_sum(mass);
        let per_row = tape.add(flat, mass);
        let per_row = tape.mul(cw, per_row);
        let comp = tape.sum(per_row);
        let nll = tape.sub(comp, ll);

        Graph {
            rows,
            x_act,
            values,
            heads,
            attention,
            mu,
            alpha,
            gamma,
            lambda,
            nll,
        }
    }

    fn non_finite(&self, tape: &Tape, g: &Graph, seq: &EventSequence) -> ModelError {
        let lam = tape.value(g.lambda).data();
        let event = lam.iter().position(|x| !(x.is_finite() && *x > 0.0)).map(|r| g.rows[r].0);
        ModelError::NonFinite {
            what: "sequence likelihood",
            seq_id: seq.seq_id().to_string(),
            event,
        }
    }

    /// `g(Δt_i, k)`, with `k` the event's own type unless overridden.
    pub fn embed(&self, seq: &EventSequence, i: usize, k_override: Option<usize>) -> Result<Vec<f64>, ModelError> {
        let ev = seq.events();
        if i >= ev.len() {
            return Err(ModelError::Config(format!("event index {i} out of range for {} events", ev.len())));
        }
        let k = k_override.unwrap_or(ev[i].k);
        if k >= self.num_types {
            return Err(ModelError::TypeOutOfRange {
                k,
                num_types: self.num_types,
            });
        }
        let dt = if i == 0 { ev[0].t } else { ev[i].t - ev[i - 1].t };
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let x = self.embed_rows(&mut tape, &p, &[k], &[dt]);
        Ok(tape.value(x).data().to_vec())
    }

    /// Candidate embedding of interval `i` for type `k`, the attention query
    /// of that interval.
    pub fn query(&self, seq: &EventSequence, i: usize, k: usize) -> Result<Vec<f64>, ModelError> {
        match self.config.query_time {
            QueryTime::IntervalEnd => self.embed(seq, i, Some(k)),
            QueryTime::IntervalStart => {
                self.embed(seq, i, Some(k))?;
                let mut tape = Tape::new();
                let p = self.bind(&mut tape);
                let x = self.embed_rows(&mut tape, &p, &[k], &[0.0]);
                Ok(tape.value(x).data().to_vec())
            }
        }
    }

    /// Per-head attention of embeddings `x` (one row per event) over
    /// strictly earlier events.
    pub fn attention(&self, x: &Tensor, times: &[f64]) -> Vec<Tensor> {
        let l = times.len();
        assert_eq!(x.rows(), l, "one embedding per timestamp");
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mask: Arc<[bool]> = (0..l * l).map(|n| times[n % l] < times[n / l]).collect();
        p.keys
            .iter()
            .map(|&key| {
                let q = tape.matmul(xv, key);
                let logits = tape.matmul_t(q, xv);
                let a = tape.masked_softmax(logits, mask.clone());
                tape.value(a).clone()
            })
            .collect()
    }

    /// Caches for the observed types of `seq`.
    pub fn forward(&self, seq: &EventSequence) -> Result<SequenceForward, ModelError> {
        self.check_types(seq)?;
        let l = seq.len();
        if l == 0 {
            let (m, mv) = (self.config.embed_dim, self.config.value_dim);
            return Ok(SequenceForward {
                embeddings: Tensor::zeros(0, m),
                values: Tensor::zeros(0, mv),
                attention_heads: vec![Tensor::zeros(0, 0); self.config.heads],
                attention: Tensor::zeros(0, 0),
                alpha: Tensor::zeros(0, 0),
                gamma: Tensor::zeros(0, 0),
                mu: Vec::new(),
                lambda: Vec::new(),
            });
        }
        let mut tape = Tape::new();
        let g = self.build(&mut tape, seq, false);
        let v = |x: Var| tape.value(x).clone();
        Ok(SequenceForward {
            embeddings: v(g.x_act),
            values: v(g.values),
            attention_heads: g.heads.iter().map(|&h| v(h)).collect(),
            attention: v(g.attention),
            alpha: v(g.alpha),
            gamma: v(g.gamma),
            mu: v(g.mu).into_data(),
            lambda: v(g.lambda).into_data(),
        })
    }

    /// Interval parameters for all candidate types.
    pub fn candidates(&self, seq: &EventSequence) -> Result<Candidates, ModelError> {
        self.check_types(seq)?;
        let times: Vec<f64> = seq.times().collect();
        if times.is_empty() {
            return Ok(Candidates {
                num_types: self.num_types,
                times,
                mu: Vec::new(),
                alpha: Tensor::zeros(0, 0),
                gamma: Tensor::zeros(0, 0),
            });
        }
        let mut tape = Tape::new();
        let g = self.build(&mut tape, seq, true);
        Ok(Candidates {
            num_types: self.num_types,
            times,
            mu: tape.value(g.mu).data().to_vec(),
            alpha: tape.value(g.alpha).clone(),
            gamma: tape.value(g.gamma).clone(),
        })
    }

    fn needs_all_rows(&self) -> bool {
        self.config.compensator_mode == CompensatorMode::AllTypes
    }

    /// `Σ_i [compensator_i − ln λ(t_i)]` without the regularizer.
    pub fn sequence_nll(&self, seq: &EventSequence) -> Result<f64, ModelError> {
        self.check_types(seq)?;
        if seq.is_empty() {
            return Ok(0.0);
        }
        let mut tape = Tape::new();
        let g = self.build(&mut tape, seq, self.needs_all_rows());
        let nll = tape.scalar(g.nll);
        if !nll.is_finite() {
            return Err(self.non_finite(&tape, &g, seq));
        }
        Ok(nll)
    }

    /// Observed-row `α` samples grouped by (target type, source type).
    fn collect_pairs(&self, tape: &Tape, g: &Graph, seq: &EventSequence, out: &mut PairSamples) {
        let ev = seq.events();
        let alpha = tape.value(g.alpha);
        for (r, &(i, c)) in g.rows.iter().enumerate() {
            if ev[i].k != c {
                continue;
            }
            for (j, e) in ev.iter().enumerate().take(i) {
                if e.t < ev[i].t {
                    out.push(c, e.k, alpha.get(r, j));
                }
            }
        }
    }

    /// Batch objective: summed NLL plus the type-level regularizer computed
    /// over the batch.
    pub fn total_loss(&self, batch: &[&EventSequence]) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Empty("batch has no sequences"));
        }
        let parts: Vec<(f64, PairSamples)> = batch
            .par_iter()
            .map(|seq| {
                self.check_types(seq)?;
                let mut samples = PairSamples::new(self.num_types);
                if seq.is_empty() {
                    return Ok((0.0, samples));
                }
                let mut tape = Tape::new();
                let g = self.build(&mut tape, seq, self.needs_all_rows());
                let nll = tape.scalar(g.nll);
                if !nll.is_finite() {
                    return Err(self.non_finite(&tape, &g, seq));
                }
                self.collect_pairs(&tape, &g, seq, &mut samples);
                Ok((nll, samples))
            })
            .collect::<Result<_, ModelError>>()?;
        let mut all = PairSamples::new(self.num_types);
        let mut total = 0.0;
        for (nll, s) in &parts {
            total += nll;
            all.merge(s);
        }
        Ok(total + tlr_value(&all, self.config.omega1, self.config.omega2))
    }

    fn total_loss_and_grad(&self, batch: &[&EventSequence]) -> Result<(f64, Gradients), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Empty("batch has no sequences"));
        }
        let all_rows = self.needs_all_rows();
        let built: Vec<Option<(Tape, Graph, f64, PairSamples)>> = batch
            .par_iter()
            .map(|seq| {
                self.check_types(seq)?;
                if seq.is_empty() {
                    return Ok(None);
                }
                let mut tape = Tape::new();
                let g = self.build(&mut tape, seq, all_rows);
                let nll = tape.scalar(g.nll);
                if !nll.is_finite() {
                    return Err(self.non_finite(&tape, &g, seq));
                }
                let mut samples = PairSamples::new(self.num_types);
                self.collect_pairs(&tape, &g, seq, &mut samples);
                Ok(Some((tape, g, nll, samples)))
            })
            .collect::<Result<_, ModelError>>()?;

        let mut all = PairSamples::new(self.num_types);
        let mut loss = 0.0;
        for (_, _, nll, s) in built.iter().flatten() {
            loss += nll;
            all.merge(s);
        }
        let (w1, w2) = (self.config.omega1, self.config.omega2);
        loss += tlr_value(&all, w1, w2);
        // d/dα_p of ω₁ᾱ + ω₂σ² is c1 + 2 c2 α_p for α_p in the pair's group
        let coeffs: Vec<(f64, f64)> = all
            .stats()
            .iter()
            .map(|&(n, mean, _)| {
                if n == 0 {
                    (0.0, 0.0)
                } else {
                    let n = n as f64;
                    (w1 / n - 2.0 * w2 * mean / n, w2 / n)
                }
            })
            .collect();
        let regularize = w1 > 0.0 || w2 > 0.0;

        let grads: Vec<Gradients> = built
            .into_par_iter()
            .zip(batch.par_iter())
            .filter_map(|(b, seq)| b.map(|b| (b, seq)))
            .map(|((mut tape, g, _, _), seq)| {
                let mut target = g.nll;
                if regularize {
                    let ev = seq.events();
                    let (r, l) = tape.value(g.alpha).shape();
                    let k = self.num_types;
                    let coef = |which: usize| {
                        Tensor::from_fn(r, l, |a, j| {
                            let (i, c) = g.rows[a];
                            if ev[i].k != c || ev[j].t >= ev[i].t {
                                return 0.0;
                            }
                            let pair = coeffs[c * k + ev[j].k];
                            if which == 1 {
                                pair.0
                            } else {
                                pair.1
                            }
                        })
                    };
                    let c1 = tape.constant(coef(1));
                    let c2 = tape.constant(coef(2));
                    let lin = tape.mul(c1, g.alpha);
                    let lin = tape.sum(lin);
                    let sq = tape.mul(g.alpha, g.alpha);
                    let sq = tape.mul(c2, sq);
                    let sq = tape.sum(sq);
                    let reg = tape.add(lin, sq);
                    target = tape.add(target, reg);
                }
                tape.backward(target, &self.store).map_err(|e| match e {
                    GradError::NonFinite { .. } => ModelError::NonFinite {
                        what: "gradient",
                        seq_id: seq.seq_id().to_string(),
                        event: None,
                    },
                    other => other.into(),
                })
            })
            .collect::<Result<_, ModelError>>()?;

        let mut total = self.store.zeros_like();
        for g in &grads {
            total.add_assign(g);
        }
        Ok((loss, total))
    }

    /// Instance-level `α_{i,j}` for the observed types, `L×L`.
    pub fn attribution(&self, seq: &EventSequence) -> Result<Tensor, ModelError> {
        Ok(self.forward(seq)?.alpha)
    }
}

impl Objective for IsahpModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn loss_and_grad(&self, batch: &[&EventSequence]) -> Result<(f64, Gradients), ModelError> {
        self.total_loss_and_grad(batch)
    }

    fn loss(&self, batch: &[&EventSequence]) -> Result<f64, ModelError> {
        self.total_loss(batch)
    }
}

impl TypePredictor for IsahpModel {
    fn predict_sequence(&self, seq: &EventSequence) -> Result<Vec<usize>, ModelError> {
        let c = self.candidates(seq)?;
        Ok((0..c.len())
            .map(|i| {
                let t = c.times[i];
                let lam: Vec<f64> = (0..self.num_types).map(|k| c.intensity(i, k, t)).collect();
                argmax(&lam)
            })
            .collect())
    }
}
