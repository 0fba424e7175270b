//! Conditional diffusion generator of pricing strategies.
//!
//! Actions `s = (v_r, I_b)` live in `[-1, 1]^2` during diffusion and are mapped
//! onto the pricing box on output. The denoiser `eps(s_t, t, c)` is trained to
//! maximize a learned critic `Q(s_0, c)` of the user's utility, with gradients
//! backpropagated through the whole reverse chain.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::incentive::{EnvState, GameOutcome, PricingGrid, PricingStrategy, QosMappings};
use crate::nn::{Adam, Mlp, MlpCache};
use crate::rng::{self, Rng};

pub const ACTION_DIM: usize = 2;
pub const TIME_EMBED_DIM: usize = 8;
pub const COND_DIM: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    betas: Vec<f64>,
}

impl BetaSchedule {
    /// Linearly spaced betas from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let betas = if steps == 1 {
            vec![start]
        } else {
            (0..steps).map(|i| start + (end - start) * i as f64 / (steps - 1) as f64).collect()
        };
        Self::from_betas(betas)
    }

    /// Arbitrary betas in [0, 1). Zero betas are allowed for degenerate checks.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        Ok(Self { betas })
    }

    pub fn default_for(steps: usize) -> Result<Self> {
        Self::linear(steps, 1e-3, 0.2)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// beta_t, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product of alphas up to `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.betas[..t].iter().map(|b| 1.0 - b).product()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

fn gaussian(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Closed-form forward marginal: `sqrt(abar_t) s_0 + sqrt(1 - abar_t) z`.
pub fn forward_sample(s0: &[f64], t: usize, schedule: &BetaSchedule, rng: &mut Rng) -> Result<Vec<f64>> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(s0.iter().map(|x| ab.sqrt() * x + (1.0 - ab).sqrt() * gaussian(rng)).collect())
}

fn noise_coef(schedule: &BetaSchedule, t: usize) -> f64 {
    let beta = schedule.beta(t);
    if beta == 0.0 {
        0.0
    } else {
        beta / (1.0 - schedule.alpha_bar(t)).sqrt()
    }
}

/// Posterior mean from a noise prediction and the posterior variance.
pub fn posterior_params(s_t: &[f64], eps: &[f64], t: usize, schedule: &BetaSchedule) -> Result<(Vec<f64>, f64)> {
    schedule.check(t)?;
    if s_t.len() != eps.len() {
        return Err(crate::error::mismatch(s_t.len(), eps.len()));
    }
    let k = noise_coef(schedule, t);
    let sa = schedule.alpha(t).sqrt();
    let mean = s_t.iter().zip(eps).map(|(s, e)| (s - k * e) / sa).collect();
    let denom = 1.0 - schedule.alpha_bar(t);
    let var = if denom == 0.0 {
        0.0
    } else {
        (1.0 - schedule.alpha_bar(t - 1)) * schedule.beta(t) / denom
    };
    Ok((mean, var))
}

/// Sinusoidal embedding of the step index.
pub fn time_embedding(t: usize) -> [f64; TIME_EMBED_DIM] {
    let mut out = [0.0; TIME_EMBED_DIM];
    let half = TIME_EMBED_DIM / 2;
    for i in 0..half {
        let freq = (-(100f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

fn denoiser_input(s: &[f64], cond: &[f64], t: usize, batch: usize) -> Vec<f64> {
    let cd = cond.len() / batch;
    let emb = time_embedding(t);
    let mut x = Vec::with_capacity(batch * (ACTION_DIM + cd + TIME_EMBED_DIM));
    for b in 0..batch {
        x.extend_from_slice(&s[b * ACTION_DIM..(b + 1) * ACTION_DIM]);
        x.extend_from_slice(&cond[b * cd..(b + 1) * cd]);
        x.extend_from_slice(&emb);
    }
    x
}

/// One reverse step with the given Gaussian draw (ignored at `t = 1`).
pub fn reverse_step_with(
    s_t: &[f64],
    t: usize,
    cond: &[f64],
    denoiser: &Mlp,
    schedule: &BetaSchedule,
    z: &[f64],
) -> Result<Vec<f64>> {
    schedule.check(t)?;
    let batch = s_t.len() / ACTION_DIM;
    let eps = denoiser.predict(&denoiser_input(s_t, cond, t, batch), batch)?;
    let (mean, _) = posterior_params(s_t, &eps, t, schedule)?;
    let sigma = if t > 1 { schedule.beta(t).sqrt() } else { 0.0 };
    Ok(mean.iter().zip(z).map(|(m, z)| m + sigma * z).collect())
}

/// One seeded reverse step.
pub fn reverse_step(
    s_t: &[f64],
    t: usize,
    cond: &[f64],
    denoiser: &Mlp,
    schedule: &BetaSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let z: Vec<f64> = (0..s_t.len()).map(|_| gaussian(rng)).collect();
    reverse_step_with(s_t, t, cond, denoiser, schedule, &z)
}

/// Gaussian draws driving one reverse chain: the start point and the
/// per-step noise (index `t - 1`; the draw for `t = 1` is unused).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainNoise {
    pub start: Vec<f64>,
    pub steps: Vec<Vec<f64>>,
}

impl ChainNoise {
    pub fn draw(batch: usize, steps: usize, rng: &mut Rng) -> Self {
        let n = batch * ACTION_DIM;
        let start = (0..n).map(|_| gaussian(rng)).collect();
        let steps = (0..steps).map(|_| (0..n).map(|_| gaussian(rng)).collect()).collect();
        Self { start, steps }
    }

    fn slice(&self, from: usize, to: usize) -> Self {
        let r = from * ACTION_DIM..to * ACTION_DIM;
        Self {
            start: self.start[r.clone()].to_vec(),
            steps: self.steps.iter().map(|s| s[r.clone()].to_vec()).collect(),
        }
    }
}

struct ChainTrace {
    /// Denoiser activations for t = T..1 (in that order).
    caches: Vec<MlpCache>,
    s0: Vec<f64>,
}

fn run_chain(denoiser: &Mlp, schedule: &BetaSchedule, cond: &[f64], noise: &ChainNoise) -> Result<ChainTrace> {
    let batch = noise.start.len() / ACTION_DIM;
    let mut s = noise.start.clone();
    let mut caches = Vec::with_capacity(schedule.steps());
    for t in (1..=schedule.steps()).rev() {
        let cache = denoiser.forward(&denoiser_input(&s, cond, t, batch), batch)?;
        let k = noise_coef(schedule, t);
        let sa = schedule.alpha(t).sqrt();
        let sigma = if t > 1 { schedule.beta(t).sqrt() } else { 0.0 };
        let z = &noise.steps[t - 1];
        s = s
            .iter()
            .zip(cache.output())
            .zip(z)
            .map(|((s, e), z)| (s - k * e) / sa + sigma * z)
            .collect();
        caches.push(cache);
    }
    Ok(ChainTrace { caches, s0: s })
}

/// Run the reverse chain and return `s_0` for every batch row.
pub fn sample_actions(denoiser: &Mlp, schedule: &BetaSchedule, cond: &[f64], noise: &ChainNoise) -> Result<Vec<f64>> {
    Ok(run_chain(denoiser, schedule, cond, noise)?.s0)
}

/// Backpropagate `grad_s0` through the chain; adds into `grad` (denoiser params).
fn chain_backward(
    denoiser: &Mlp,
    schedule: &BetaSchedule,
    trace: &ChainTrace,
    grad_s0: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    let batch = grad_s0.len() / ACTION_DIM;
    let in_dim = denoiser.input_dim();
    let mut g = grad_s0.to_vec();
    // caches[i] belongs to step t = T - i; walk back from t = 1 up to T.
    for (i, cache) in trace.caches.iter().enumerate().rev() {
        let t = schedule.steps() - i;
        let k = noise_coef(schedule, t);
        let sa = schedule.alpha(t).sqrt();
        let grad_eps: Vec<f64> = g.iter().map(|v| -k / sa * v).collect();
        let grad_in = denoiser.backward(cache, &grad_eps, grad)?;
        for b in 0..batch {
            for d in 0..ACTION_DIM {
                g[b * ACTION_DIM + d] = g[b * ACTION_DIM + d] / sa + grad_in[b * in_dim + d];
            }
        }
    }
    Ok(())
}

/// Affine normalization of the 11 environment features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEncoder {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Raw conditioning features: v_c, v_m, U_th, E_t, max APs and the
/// (scale, half-saturation) pair of each QoS curve.
pub fn env_features(env: &EnvState) -> [f64; COND_DIM] {
    let m = &env.mappings;
    [
        env.v_c,
        env.v_m,
        env.u_th,
        env.e_t as f64,
        env.max_aps as f64,
        m.perception.scale,
        m.perception.half_saturation,
        m.brisque.scale,
        m.brisque.half_saturation,
        m.tv.scale,
        m.tv.half_saturation,
    ]
}

impl ConditionEncoder {
    pub fn encode(&self, env: &EnvState) -> Vec<f64> {
        env_features(env)
            .iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(x, (c, s))| (x - c) / s)
            .collect()
    }
}

/// Draws economies around a base state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSampler {
    pub base: EnvState,
    pub v_c: [f64; 2],
    pub v_m: [f64; 2],
    pub u_th: [f64; 2],
    /// Multiplicative jitter on each QoS curve's scale.
    pub curve_scale: [f64; 2],
    pub max_aps: [u32; 2],
}

impl Default for EnvSampler {
    fn default() -> Self {
        Self {
            base: EnvState::economy_default(),
            v_c: [55.0, 65.0],
            v_m: [55.0, 65.0],
            u_th: [2700.0, 3100.0],
            curve_scale: [0.95, 1.05],
            max_aps: [4, 6],
        }
    }
}

fn uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

impl EnvSampler {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !(ok(self.v_c) && ok(self.v_m) && ok(self.u_th) && ok(self.curve_scale)) || self.max_aps[0] > self.max_aps[1] {
            return Err(Error::InvalidArgument("sampler ranges must be ordered [low, high]".into()));
        }
        if self.v_c[0] <= 0.0 || self.v_m[0] <= 0.0 || self.u_th[0] < 0.0 || self.curve_scale[0] < 0.0 {
            return Err(Error::InvalidArgument("sampler ranges must keep the environment valid".into()));
        }
        self.base.validate()
    }

    pub fn sample(&self, rng: &mut Rng) -> EnvState {
        let mut env = self.base.clone();
        env.v_c = uniform(rng, self.v_c);
        env.v_m = uniform(rng, self.v_m);
        env.u_th = uniform(rng, self.u_th);
        let base: QosMappings = self.base.mappings;
        env.mappings.perception.scale = base.perception.scale * uniform(rng, self.curve_scale);
        env.mappings.brisque.scale = base.brisque.scale * uniform(rng, self.curve_scale);
        env.mappings.tv.scale = base.tv.scale * uniform(rng, self.curve_scale);
        env.max_aps = rng.random_range(self.max_aps[0]..=self.max_aps[1]);
        env
    }

    /// `count` environments from the stream `(seed, label)`.
    pub fn draw(&self, count: usize, seed: u64, label: &str) -> Vec<EnvState> {
        let mut r = rng::stream(seed, label, 0);
        (0..count).map(|_| self.sample(&mut r)).collect()
    }

    /// Encoder centred on each range with its half-width as scale.
    pub fn encoder(&self) -> ConditionEncoder {
        let f = env_features(&self.base);
        let mid = |r: [f64; 2]| (r[0] + r[1]) / 2.0;
        let half = |r: [f64; 2]| (r[1] - r[0]) / 2.0;
        let m = &self.base.mappings;
        let cs = self.curve_scale;
        let aps = [self.max_aps[0] as f64, self.max_aps[1] as f64];
        let mut center = f.to_vec();
        let mut scale = vec![0.0; COND_DIM];
        let ranged = [
            (0, self.v_c),
            (1, self.v_m),
            (2, self.u_th),
            (4, aps),
            (5, [m.perception.scale * cs[0], m.perception.scale * cs[1]]),
            (7, [m.brisque.scale * cs[0], m.brisque.scale * cs[1]]),
            (9, [m.tv.scale * cs[0], m.tv.scale * cs[1]]),
        ];
        for (i, r) in ranged {
            center[i] = mid(r);
            scale[i] = half(r);
        }
        for i in 0..COND_DIM {
            if scale[i] <= 0.0 {
                scale[i] = center[i].abs().max(1.0);
            }
        }
        ConditionEncoder { center, scale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub diffusion_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Critic learning rate relative to the denoiser's.
    pub critic_lr_factor: f64,
    pub critic_steps: usize,
    pub exploration_noise: f64,
    /// Soft-update rate of the target critic.
    pub tau: f64,
    /// Kept for completeness; episodes are one step long so it never enters the update.
    pub discount: f64,
    pub hidden: usize,
    /// Utilities are multiplied by this before fitting the critic.
    pub reward_scale: f64,
    /// Extra penalty subtracted when the VSP threshold is violated.
    pub penalty: f64,
    /// Weight of the quadratic penalty keeping actions inside [-1, 1].
    pub box_weight: f64,
    /// Halve the learning rates every this many epochs.
    pub lr_halving_epochs: Option<usize>,
    /// Stop once the 50-epoch mean reward has not improved for this many epochs.
    pub plateau_patience: Option<usize>,
    pub pricing: PricingGrid,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: 10,
            epochs: 6000,
            batch_size: 256,
            learning_rate: 1e-3,
            critic_lr_factor: 3.0,
            critic_steps: 2,
            exploration_noise: 0.01,
            tau: 0.005,
            discount: 0.95,
            hidden: 64,
            reward_scale: 1e-3,
            penalty: 1000.0,
            box_weight: 5.0,
            lr_halving_epochs: Some(2000),
            plateau_patience: None,
            pricing: PricingGrid::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.diffusion_steps == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("steps, batch size and hidden width must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.critic_lr_factor > 0.0 && self.reward_scale > 0.0) {
            return Err(Error::InvalidArgument("learning rates and reward scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::InvalidArgument("tau and discount must lie in [0, 1]".into()));
        }
        if !(self.exploration_noise >= 0.0 && self.penalty >= 0.0 && self.box_weight >= 0.0) {
            return Err(Error::InvalidArgument("noise, penalty and box weight must be non-negative".into()));
        }
        if self.lr_halving_epochs == Some(0) {
            return Err(Error::InvalidArgument("lr_halving_epochs must be positive".into()));
        }
        self.pricing.validate()
    }
}

/// Trained generator plus everything needed to reuse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionPolicy {
    pub schedule: BetaSchedule,
    pub denoiser: Mlp,
    pub critic: Mlp,
    pub target_critic: Mlp,
    pub encoder: ConditionEncoder,
    pub pricing: PricingGrid,
}

impl DiffusionPolicy {
    pub fn new(schedule: BetaSchedule, hidden: usize, encoder: ConditionEncoder, pricing: PricingGrid, rng: &mut Rng) -> Self {
        let denoiser = Mlp::init(&[ACTION_DIM + COND_DIM + TIME_EMBED_DIM, hidden, hidden, ACTION_DIM], rng);
        let critic = Mlp::init(&[ACTION_DIM + COND_DIM, hidden, hidden, 1], rng);
        Self {
            schedule,
            denoiser,
            target_critic: critic.clone(),
            critic,
            encoder,
            pricing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.critic.validate()?;
        self.target_critic.validate()?;
        if self.denoiser.input_dim() != ACTION_DIM + COND_DIM + TIME_EMBED_DIM || self.denoiser.output_dim() != ACTION_DIM {
            return Err(Error::InvalidArgument("denoiser has the wrong input/output size".into()));
        }
        if self.critic.input_dim() != ACTION_DIM + COND_DIM || self.critic.output_dim() != 1 {
            return Err(Error::InvalidArgument("critic has the wrong input/output size".into()));
        }
        if self.encoder.center.len() != COND_DIM || self.encoder.scale.len() != COND_DIM {
            return Err(Error::InvalidArgument("condition encoder has the wrong size".into()));
        }
        self.pricing.validate()
    }

    pub fn to_strategy(&self, s: &[f64]) -> PricingStrategy {
        to_strategy(s, &self.pricing)
    }

    /// Generate one strategy for `env` from a seeded chain.
    pub fn generate(&self, env: &EnvState, seed: u64) -> Result<PricingStrategy> {
        generate_strategy(env, self, seed)
    }
}

/// Map an action in `[-1, 1]^2` (clamped) onto the pricing box.
pub fn to_strategy(s: &[f64], pricing: &PricingGrid) -> PricingStrategy {
    let u = |x: f64| (x.clamp(-1.0, 1.0) + 1.0) / 2.0;
    PricingStrategy {
        v_r: u(s[0]) * pricing.v_r_max,
        i_b: u(s[1]) * pricing.i_b_max,
    }
}

/// Reverse-diffuse from a seeded Gaussian start and map onto the pricing box.
pub fn generate_strategy(env: &EnvState, policy: &DiffusionPolicy, seed: u64) -> Result<PricingStrategy> {
    let mut r = rng::stream(seed, "generate", 0);
    let noise = ChainNoise::draw(1, policy.schedule.steps(), &mut r);
    let s0 = sample_actions(&policy.denoiser, &policy.schedule, &policy.encoder.encode(env), &noise)?;
    Ok(policy.to_strategy(&s0))
}

/// Training reward: the user's utility when the VSP threshold holds, otherwise
/// the shortfall minus a constant penalty.
pub fn reward(outcome: &GameOutcome, env: &EnvState, penalty: f64) -> f64 {
    if outcome.feasible(env) {
        outcome.u_us
    } else {
        -(env.u_th - outcome.u_vsp) - penalty
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub feasible_fraction: f64,
    /// Mean pricing of the explored actions.
    pub mean_v_r: f64,
    pub mean_i_b: f64,
    /// Fraction of raw chain outputs outside [-1, 1] in some coordinate.
    pub out_of_box: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub policy: DiffusionPolicy,
    pub curve: Vec<EpochStats>,
    pub stopped_early: bool,
}

/// Rows processed per parallel task; fixed so results do not depend on the
/// thread count.
const CHUNK: usize = 32;

fn critic_input(s: &[f64], cond: &[f64], batch: usize) -> Vec<f64> {
    let cd = cond.len() / batch;
    let mut x = Vec::with_capacity(batch * (ACTION_DIM + cd));
    for b in 0..batch {
        x.extend_from_slice(&s[b * ACTION_DIM..(b + 1) * ACTION_DIM]);
        x.extend_from_slice(&cond[b * cd..(b + 1) * cd]);
    }
    x
}

fn chunks(batch: usize) -> Vec<(usize, usize)> {
    (0..batch.div_ceil(CHUNK)).map(|i| (i * CHUNK, ((i + 1) * CHUNK).min(batch))).collect()
}

fn sum_grads(parts: Vec<(f64, Vec<f64>)>, n: usize) -> (f64, Vec<f64>) {
    let mut total = vec![0.0; n];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    (loss, total)
}

/// Mean-squared critic loss and its gradient.
pub fn critic_loss_grad(critic: &Mlp, s: &[f64], cond: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let batch = targets.len();
    let cd = cond.len() / batch;
    let parts = chunks(batch)
        .into_par_iter()
        .map(|(a, b)| {
            let n = b - a;
            let x = critic_input(&s[a * ACTION_DIM..b * ACTION_DIM], &cond[a * cd..b * cd], n);
            let cache = critic.forward(&x, n)?;
            let mut g = vec![0.0; critic.len()];
            let mut loss = 0.0;
            let dout: Vec<f64> = cache
                .output()
                .iter()
                .zip(&targets[a..b])
                .map(|(q, y)| {
                    loss += (q - y) * (q - y);
                    2.0 * (q - y) / batch as f64
                })
                .collect();
            critic.backward(&cache, &dout, &mut g)?;
            Ok((loss / batch as f64, g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_grads(parts, critic.len()))
}

/// Actor objective `mean(-Q(s_0, c) + box_weight * sum relu(|s_0| - 1)^2)` and
/// its gradient with respect to the denoiser parameters.
pub fn actor_loss_grad(
    policy: &DiffusionPolicy,
    cond: &[f64],
    noise: &ChainNoise,
    box_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let batch = noise.start.len() / ACTION_DIM;
    let cd = cond.len() / batch;
    let n_params = policy.denoiser.len();
    let parts = chunks(batch)
        .into_par_iter()
        .map(|(a, b)| {
            let n = b - a;
            let c = &cond[a * cd..b * cd];
            let trace = run_chain(&policy.denoiser, &policy.schedule, c, &noise.slice(a, b))?;
            let cache = policy.critic.forward(&critic_input(&trace.s0, c, n), n)?;
            let mut loss = 0.0;
            for (row, q) in cache.output().iter().enumerate() {
                loss -= q;
                for d in 0..ACTION_DIM {
                    let excess = (trace.s0[row * ACTION_DIM + d].abs() - 1.0).max(0.0);
                    loss += box_weight * excess * excess;
                }
            }
            let dq = vec![-1.0 / batch as f64; n];
            let mut critic_scratch = vec![0.0; policy.critic.len()];
            let gin = policy.critic.backward(&cache, &dq, &mut critic_scratch)?;
            let in_dim = policy.critic.input_dim();
            let mut gs = vec![0.0; n * ACTION_DIM];
            for row in 0..n {
                for d in 0..ACTION_DIM {
                    let s = trace.s0[row * ACTION_DIM + d];
                    let excess = (s.abs() - 1.0).max(0.0);
                    gs[row * ACTION_DIM + d] =
                        gin[row * in_dim + d] + box_weight * 2.0 * excess * s.signum() / batch as f64;
                }
            }
            let mut g = vec![0.0; n_params];
            chain_backward(&policy.denoiser, &policy.schedule, &trace, &gs, &mut g)?;
            Ok((loss / batch as f64, g))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_grads(parts, n_params))
}

fn diverged(epoch: usize, what: &str) -> Error {
    Error::Diverged {
        epoch,
        detail: format!("non-finite {what}"),
    }
}

/// Train a policy on environments drawn from `sampler`.
pub fn train_policy(sampler: &EnvSampler, cfg: &TrainConfig, seed: u64) -> Result<TrainingRun> {
    train_policy_with(sampler, cfg, seed, |_| {})
}

/// [`train_policy`] with a per-epoch callback (progress reporting).
pub fn train_policy_with(
    sampler: &EnvSampler,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainingRun> {
    sampler.validate()?;
    cfg.validate()?;
    let schedule = BetaSchedule::default_for(cfg.diffusion_steps)?;
    let mut init_rng = rng::stream(seed, "init", 0);
    let mut policy = DiffusionPolicy::new(schedule, cfg.hidden, sampler.encoder(), cfg.pricing, &mut init_rng);
    let mut actor_opt = Adam::new(policy.denoiser.len(), cfg.learning_rate);
    let mut critic_opt = Adam::new(policy.critic.len(), cfg.learning_rate * cfg.critic_lr_factor);
    let batch = cfg.batch_size;
    let steps = policy.schedule.steps();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best_avg = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let decay = cfg.lr_halving_epochs.map_or(1.0, |h| 0.5f64.powi((epoch / h) as i32));
        actor_opt.lr = cfg.learning_rate * decay;
        critic_opt.lr = cfg.learning_rate * cfg.critic_lr_factor * decay;

        let mut env_rng = rng::stream(seed, "train-env", epoch as u64);
        let envs: Vec<EnvState> = (0..batch).map(|_| sampler.sample(&mut env_rng)).collect();
        let cond: Vec<f64> = envs.iter().flat_map(|e| policy.encoder.encode(e)).collect();

        // Explore: sample the current policy, perturb, evaluate the real game.
        let mut explore_rng = rng::stream(seed, "explore", epoch as u64);
        let noise = ChainNoise::draw(batch, steps, &mut explore_rng);
        let mut actions = sample_actions(&policy.denoiser, &policy.schedule, &cond, &noise)?;
        let out_of_box = actions
            .chunks(ACTION_DIM)
            .filter(|a| a.iter().any(|v| v.abs() > 1.0))
            .count() as f64
            / batch as f64;
        for a in &mut actions {
            *a = (*a + cfg.exploration_noise * gaussian(&mut explore_rng)).clamp(-1.0, 1.0);
        }
        let strategies: Vec<PricingStrategy> = actions.chunks(ACTION_DIM).map(|a| policy.to_strategy(a)).collect();
        let outcomes: Vec<GameOutcome> = envs
            .par_iter()
            .zip(&strategies)
            .map(|(env, s)| GameOutcome::play(*s, env))
            .collect();
        let rewards: Vec<f64> = outcomes.iter().zip(&envs).map(|(o, env)| reward(o, env, cfg.penalty)).collect();
        let feasible = outcomes.iter().zip(&envs).filter(|(o, env)| o.feasible(env)).count();
        let targets: Vec<f64> = rewards.iter().map(|r| r * cfg.reward_scale).collect();

        let mut critic_loss = 0.0;
        for _ in 0..cfg.critic_steps {
            let (l, g) = critic_loss_grad(&policy.critic, &actions, &cond, &targets)?;
            if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(diverged(epoch, "critic loss"));
            }
            critic_opt.step(&mut policy.critic.params, &g);
            critic_loss = l;
        }

        let mut actor_rng = rng::stream(seed, "actor", epoch as u64);
        let actor_noise = ChainNoise::draw(batch, steps, &mut actor_rng);
        let (actor_loss, g) = actor_loss_grad(&policy, &cond, &actor_noise, cfg.box_weight)?;
        if !actor_loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(diverged(epoch, "actor loss"));
        }
        actor_opt.step(&mut policy.denoiser.params, &g);
        if !policy.denoiser.is_finite() || !policy.critic.is_finite() {
            return Err(diverged(epoch, "parameters"));
        }
        for (t, p) in policy.target_critic.params.iter_mut().zip(&policy.critic.params) {
            *t = (1.0 - cfg.tau) * *t + cfg.tau * p;
        }

        let stats = EpochStats {
            epoch,
            mean_reward: rewards.iter().sum::<f64>() / batch as f64,
            feasible_fraction: feasible as f64 / batch as f64,
            mean_v_r: strategies.iter().map(|s| s.v_r).sum::<f64>() / batch as f64,
            mean_i_b: strategies.iter().map(|s| s.i_b).sum::<f64>() / batch as f64,
            out_of_box,
            critic_loss,
            actor_loss,
            learning_rate: actor_opt.lr,
        };
        on_epoch(&stats);
        curve.push(stats);

        if let Some(patience) = cfg.plateau_patience {
            let window = curve.len().min(50);
            let avg = curve[curve.len() - window..].iter().map(|s| s.mean_reward).sum::<f64>() / window as f64;
            if avg > best_avg {
                best_avg = avg;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainingRun {
        policy,
        curve,
        stopped_early,
    })
}

/// Result of running a policy and the oracle on one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub policy: GameOutcome,
    pub policy_feasible: bool,
    pub oracle: Option<GameOutcome>,
    /// Policy utility over oracle utility; `None` without a feasible oracle point.
    pub ratio: Option<f64>,
}

pub fn compare_with_oracle(policy: &DiffusionPolicy, env: &EnvState, seed: u64) -> Result<PolicyComparison> {
    let s = policy.generate(env, seed)?;
    let out = GameOutcome::play(s, env);
    let oracle = crate::incentive::oracle_optimal_pricing(env, &policy.pricing)?;
    let ratio = oracle.map(|o| {
        if out.feasible(env) {
            out.u_us / o.u_us
        } else {
            f64::NEG_INFINITY
        }
    });
    Ok(PolicyComparison {
        policy_feasible: out.feasible(env),
        policy: out,
        oracle,
        ratio,
    })
}
