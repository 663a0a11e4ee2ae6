//! Exponential-kernel multivariate Hawkes baseline ("HExp").
//!
//! ```text
//! λ_k(t) = μ_k + Σ_{t_j < t} α[k][k_j] · exp(-γ[k][k_j] (t - t_j))
//! ```
//!
//! The negative log-likelihood over `[0, T]` uses the closed-form
//! compensator: event `j` adds `(α/γ)(1 - exp(-γ (T - t_j)))` to type `k`.
//! Gradients are exact and hand-derived, using the usual recursion for the
//! decayed sums `R[k][k'](t_i) = Σ_{t_j < t_i, k_j = k'} exp(-γ (t_i - t_j))`
//! together with its derivative in `γ`.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::eventseq::{CausalMatrix, Dataset, EventSequence};
use crate::graddiff::scalar::{sigmoid, softplus, softplus_inv};
use crate::graddiff::{Gradients, ParamId, ParamStore, Tensor};
use crate::simulate::MhpParams;
use crate::metrics::TypePredictor;
use crate::trainer::{train, Objective, TrainConfig, TrainError, TrainReport};

/// Gradients with respect to the decoded parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MhpGrad {
    pub mu: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
}

impl MhpGrad {
    fn zeros(k: usize) -> Self {
        Self {
            mu: vec![0.0; k],
            alpha: vec![vec![0.0; k]; k],
            gamma: vec![vec![0.0; k]; k],
        }
    }
}

/// Conditional intensity of type `k` at time `t` given events strictly
/// before `t`.
pub fn intensity(p: &MhpParams, seq: &EventSequence, k: usize, t: f64) -> f64 {
    p.mu[k]
        + seq
            .events()
            .iter()
            .take_while(|e| e.t < t)
            .map(|e| p.alpha[k][e.k] * (-p.gamma[k][e.k] * (t - e.t)).exp())
            .sum::<f64>()
}

/// `Σ_k ∫_0^T λ_k(t) dt` in closed form.
pub fn compensator(p: &MhpParams, seq: &EventSequence) -> f64 {
    let big_t = seq.t_end();
    let k = p.num_types();
    let mut total: f64 = p.mu.iter().sum::<f64>() * big_t;
    for e in seq.events() {
        for target in 0..k {
            let (a, g) = (p.alpha[target][e.k], p.gamma[target][e.k]);
            total += a / g * -(-g * (big_t - e.t)).exp_m1();
        }
    }
    total
}

/// NLL of one sequence and its gradient with respect to `mu`, `alpha`,
/// `gamma`, accumulated into `grad`.
fn sequence_nll(p: &MhpParams, seq: &EventSequence, grad: &mut MhpGrad) -> Result<f64, ModelError> {
    let k = p.num_types();
    let big_t = seq.t_end();
    let events = seq.events();
    let mut nll = 0.0;

    for target in 0..k {
        nll += p.mu[target] * big_t;
        grad.mu[target] += big_t;
    }
    for e in events {
        for target in 0..k {
            let (a, g) = (p.alpha[target][e.k], p.gamma[target][e.k]);
            let span = big_t - e.t;
            let decay = (-g * span).exp();
            let one_minus = -(-g * span).exp_m1();
            nll += a / g * one_minus;
            grad.alpha[target][e.k] += one_minus / g;
            grad.gamma[target][e.k] += a * (span * decay / g - one_minus / (g * g));
        }
    }

    // decayed sums over strictly earlier events and their d/dγ
    let mut r = vec![vec![0.0; k]; k];
    let mut dr = vec![vec![0.0; k]; k];
    let mut t_state = 0.0;
    let mut i = 0;
    while i < events.len() {
        let t = events[i].t;
        let delta = t - t_state;
        if delta > 0.0 {
            for a in 0..k {
                for b in 0..k {
                    let f = (-p.gamma[a][b] * delta).exp();
                    dr[a][b] = f * (dr[a][b] - delta * r[a][b]);
                    r[a][b] *= f;
                }
            }
            t_state = t;
        }
        let group_end = events[i..].iter().position(|e| e.t > t).map_or(events.len(), |n| i + n);
        for (idx, e) in events.iter().enumerate().take(group_end).skip(i) {
            let kt = e.k;
            let lam = p.mu[kt]
                + (0..k).map(|b| p.alpha[kt][b] * r[kt][b]).sum::<f64>();
            if !(lam.is_finite() && lam > 0.0) {
                return Err(ModelError::NonFinite {
                    what: "log-intensity",
                    seq_id: seq.seq_id().to_string(),
                    event: Some(idx),
                });
            }
            nll -= lam.ln();
            grad.mu[kt] -= 1.0 / lam;
            for b in 0..k {
                grad.alpha[kt][b] -= r[kt][b] / lam;
                grad.gamma[kt][b] -= p.alpha[kt][b] * dr[kt][b] / lam;
            }
        }
        for e in &events[i..group_end] {
            for row in r.iter_mut() {
                row[e.k] += 1.0;
            }
        }
        i = group_end;
    }
    if !nll.is_finite() {
        return Err(ModelError::NonFinite {
            what: "likelihood",
            seq_id: seq.seq_id().to_string(),
            event: None,
        });
    }
    Ok(nll)
}

/// Summed NLL over sequences with its gradient in decoded coordinates.
pub fn nll_and_grad<'a>(
    p: &MhpParams,
    seqs: impl IntoIterator<Item = &'a EventSequence>,
) -> Result<(f64, MhpGrad), ModelError> {
    let mut grad = MhpGrad::zeros(p.num_types());
    let mut total = 0.0;
    for s in seqs {
        total += sequence_nll(p, s, &mut grad)?;
    }
    Ok((total, grad))
}

/// `Σ_s [Σ_k ∫ λ_k − Σ_i ln λ_{k_i}(t_i)]` over the dataset.
pub fn hexp_nll(p: &MhpParams, ds: &Dataset) -> Result<f64, ModelError> {
    if ds.is_empty() {
        return Err(ModelError::Empty("dataset has no sequences"));
    }
    Ok(nll_and_grad(p, ds.sequences())?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct HexpConfig {
    /// When set, every decay is pinned to this value and not learned.
    #[serde(default)]
    pub fixed_gamma: Option<f64>,
}

/// HExp parameters stored unconstrained and decoded through softplus.
#[derive(Debug, Clone, PartialEq)]
pub struct HexpModel {
    num_types: usize,
    config: HexpConfig,
    store: ParamStore,
    mu: ParamId,
    alpha: ParamId,
    gamma: ParamId,
}

impl HexpModel {
    /// Near-Poisson start: `μ` at the empirical rates, `α = 0.01`, `γ = 1`
    /// (or the pinned decay).
    pub fn init(ds: &Dataset, config: HexpConfig) -> Self {
        let k = ds.num_types();
        let rates = ds.empirical_rates();
        let mu = Tensor::col_vector(rates.iter().map(|&r| softplus_inv(r.max(1e-6))).collect());
        let alpha = Tensor::filled(k, k, softplus_inv(0.01));
        let gamma = Tensor::filled(k, k, softplus_inv(config.fixed_gamma.unwrap_or(1.0)));
        Self::from_raw(k, config, mu, alpha, gamma)
    }

    fn from_raw(k: usize, config: HexpConfig, mu: Tensor, alpha: Tensor, gamma: Tensor) -> Self {
        let mut store = ParamStore::new();
        let mu = store.register("mu", mu).expect("fresh store");
        let alpha = store.register("alpha", alpha).expect("fresh store");
        let gamma = store.register("gamma", gamma).expect("fresh store");
        Self {
            num_types: k,
            config,
            store,
            mu,
            alpha,
            gamma,
        }
    }

    /// Encodes strictly positive parameters.
    pub fn from_params(p: &MhpParams, config: HexpConfig) -> Result<Self, ModelError> {
        let k = p.num_types();
        let enc = |x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(softplus_inv(x))
            } else {
                Err(ModelError::Config(format!("parameter {x} is not strictly positive")))
            }
        };
        let mu = p.mu.iter().map(|&x| enc(x)).collect::<Result<Vec<_>, _>>()?;
        let alpha = p.alpha.iter().flatten().map(|&x| enc(x)).collect::<Result<Vec<_>, _>>()?;
        let gamma = p.gamma.iter().flatten().map(|&x| enc(x)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_raw(
            k,
            config,
            Tensor::col_vector(mu),
            Tensor::new(k, k, alpha),
            Tensor::new(k, k, gamma),
        ))
    }

    pub fn from_store(num_types: usize, config: HexpConfig, store: ParamStore) -> Result<Self, ModelError> {
        let get = |n: &str, shape: (usize, usize)| {
            store
                .find(n)
                .filter(|&id| store.get(id).shape() == shape)
                .ok_or_else(|| ModelError::Config(format!("checkpoint lacks {n} with shape {shape:?}")))
        };
        let k = num_types;
        let (mu, alpha, gamma) = (get("mu", (k, 1))?, get("alpha", (k, k))?, get("gamma", (k, k))?);
        Ok(Self {
            num_types,
            config,
            store,
            mu,
            alpha,
            gamma,
        })
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn config(&self) -> &HexpConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn params(&self) -> MhpParams {
        let k = self.num_types;
        let dec = |id: ParamId| -> Vec<f64> { self.store.get(id).data().iter().map(|&x| softplus(x)).collect() };
        let rows = |v: Vec<f64>| v.chunks(k).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let gamma = match self.config.fixed_gamma {
            Some(g) => vec![vec![g; k]; k],
            None => rows(dec(self.gamma)),
        };
        MhpParams {
            mu: dec(self.mu),
            alpha: rows(dec(self.alpha)),
            gamma,
        }
    }

    fn raw_gradients(&self, g: &MhpGrad) -> Gradients {
        let mut out = self.store.zeros_like();
        let chain = |raw: &Tensor, dec: &[f64], dst: &mut Tensor| {
            for ((d, &x), &gd) in dst.data_mut().iter_mut().zip(raw.data()).zip(dec) {
                *d = gd * sigmoid(x);
            }
        };
        chain(self.store.get(self.mu), &g.mu, out.get_mut(self.mu));
        let flat_a: Vec<f64> = g.alpha.iter().flatten().copied().collect();
        chain(self.store.get(self.alpha), &flat_a, out.get_mut(self.alpha));
        if self.config.fixed_gamma.is_none() {
            let flat_g: Vec<f64> = g.gamma.iter().flatten().copied().collect();
            chain(self.store.get(self.gamma), &flat_g, out.get_mut(self.gamma));
        }
        out
    }
}

impl Objective for HexpModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn loss_and_grad(&self, batch: &[&EventSequence]) -> Result<(f64, Gradients), ModelError> {
        let (nll, g) = nll_and_grad(&self.params(), batch.iter().copied())?;
        Ok((nll, self.raw_gradients(&g)))
    }

    fn loss(&self, batch: &[&EventSequence]) -> Result<f64, ModelError> {
        Ok(nll_and_grad(&self.params(), batch.iter().copied())?.0)
    }
}

/// Branching ratios `α/γ` as type-level causal scores.
pub fn hexp_causality(m: &HexpModel) -> CausalMatrix {
    m.params().branching_matrix()
}

/// Argmax of `λ_k(t_i)` given events before `t_i`; ties go to the lower
/// type index.
pub fn predict_type(p: &MhpParams, seq: &EventSequence, i: usize) -> usize {
    let t = seq.events()[i].t;
    let lam: Vec<f64> = (0..p.num_types()).map(|k| intensity(p, seq, k, t)).collect();
    crate::metrics::argmax(&lam)
}

impl TypePredictor for HexpModel {
    fn predict_sequence(&self, seq: &EventSequence) -> Result<Vec<usize>, ModelError> {
        let p = self.params();
        Ok((0..seq.len()).map(|i| predict_type(&p, seq, i)).collect())
    }
}

/// Maximum-likelihood fit from the near-Poisson initialization.
pub fn fit_hexp(
    train_ds: &Dataset,
    validation: &Dataset,
    config: HexpConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&crate::trainer::EpochRecord),
) -> Result<(HexpModel, TrainReport), TrainError> {
    let mut model = HexpModel::init(train_ds, config);
    let report = train(&mut model, train_ds, validation, cfg, on_epoch)?;
    Ok((model, report))
}
