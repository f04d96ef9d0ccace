//! The temporally aligned diffusion block and its attention layers.

use super::layout::{Dims, LatentVar, LatentVideo, Layout};
use super::{forward_noise_var, reverse_step_var, DiffusionError, DiffusionSchedule, Result, ReverseNoise, ScheduleKind};
use crate::autodiff::{multi_head_attention, Tape, Var};
use crate::graph::{BodyGraph, GraphConvLayer};
use crate::nn::{Activation, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpDistConfig {
    /// Schedule length `T_d`.
    pub steps: usize,
    pub schedule: ScheduleKind,
    /// Number of forward steps actually taken (and reversed); `steps` runs
    /// the full chain.
    pub noise_depth: usize,
    /// Rows of the learned conditioning context.
    pub context_rows: usize,
    pub heads: usize,
    /// Graph-convolution / temporal-attention passes producing δ.
    pub passes: usize,
    /// 3-D convolution kernel extents over (T, H, W); all odd.
    pub kernel: [usize; 3],
    pub activation: Activation,
    pub reverse_noise: ReverseNoise,
}

impl Default for TpDistConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            schedule: ScheduleKind::Linear,
            noise_depth: 4,
            context_rows: 4,
            heads: 4,
            passes: 2,
            kernel: [3, 1, 1],
            activation: Activation::Relu,
            reverse_noise: ReverseNoise::Posterior,
        }
    }
}

impl TpDistConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        let bad = |m: String| Err(DiffusionError::Config(m));
        if self.steps < 2 {
            return Err(DiffusionError::TooFewSteps(self.steps));
        }
        if self.noise_depth == 0 || self.noise_depth > self.steps {
            return bad(format!("noise_depth must be in 1..={}, got {}", self.steps, self.noise_depth));
        }
        if self.context_rows == 0 || self.passes == 0 {
            return bad("context_rows and passes must be positive".into());
        }
        if self.heads == 0 || !channels.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide {channels} channels", self.heads));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return bad(format!("kernel extents must be odd, got {:?}", self.kernel));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a scalar position.
pub fn sinusoidal_embedding(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

/// Projected multi-head attention: queries from one sequence, keys and
/// values from another (or the same).
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), c, c, false, rng),
            k: Linear::new(store, &format!("{name}.k"), c, c, false, rng),
            v: Linear::new(store, &format!("{name}.v"), c, c, false, rng),
            o: Linear::new(store, &format!("{name}.o"), c, c, false, rng),
            heads,
        }
    }

    /// Same, with the output projection zeroed so that a residual branch
    /// starts as the identity.
    pub fn residual<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), c, c, false, rng),
            k: Linear::new(store, &format!("{name}.k"), c, c, false, rng),
            v: Linear::new(store, &format!("{name}.v"), c, c, false, rng),
            o: Linear::zeros(store, &format!("{name}.o"), c, c, false),
            heads,
        }
    }

    /// `query: [G, Lq, C]`; `context: [G, Lk, C]` or a shared `[Lk, C]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, query: Var, context: Var) -> Result<Var> {
        let g = tape.shape(query)[0];
        let q = self.q.forward(tape, p, query)?;
        let mut k = self.k.forward(tape, p, context)?;
        let mut v = self.v.forward(tape, p, context)?;
        if tape.shape(context).len() == 2 {
            let (l, c) = (tape.shape(k)[0], tape.shape(k)[1]);
            k = tape.reshape(k, &[1, l, c])?;
            k = tape.broadcast_to(k, &[g, l, c])?;
            v = tape.reshape(v, &[1, l, c])?;
            v = tape.broadcast_to(v, &[g, l, c])?;
        }
        let a = multi_head_attention(tape, q, k, v, self.heads)?;
        Ok(self.o.forward(tape, p, a)?)
    }
}

/// Learned conditioning rows `γ_A: [L, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticContext {
    pub gamma_a: Tensor,
}

/// Temporal summaries `δ` in `(B·H·W) × T × C` layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalDependencies {
    pub delta: LatentVar,
}

/// Self-attention over time, independently per spatial site.
pub fn temporal_self_attention(tape: &mut Tape, p: &Bound, layer: &AttentionLayer, x: &LatentVar) -> Result<TemporalDependencies> {
    if x.layout != Layout::Sites {
        return Err(DiffusionError::Layout {
            expected: Layout::Sites,
            got: x.layout,
        });
    }
    let var = layer.forward(tape, p, x.var, x.var)?;
    Ok(TemporalDependencies {
        delta: LatentVar::new(tape, var, Layout::Sites, x.dims)?,
    })
}

#[derive(Clone, Debug)]
struct TemporalStage {
    gc: GraphConvLayer,
    ln: LayerNorm,
    tsa: AttentionLayer,
}

impl TemporalStage {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, cfg: &TpDistConfig, rng: &mut R) -> Self {
        Self {
            gc: GraphConvLayer::new(store, &format!("{name}.gc"), c, c, cfg.activation, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), c),
            tsa: AttentionLayer::new(store, &format!("{name}.tsa"), c, cfg.heads, rng),
        }
    }

    /// Per-frame graph convolution, then a residual temporal self-attention.
    fn forward(&self, tape: &mut Tape, p: &Bound, x: LatentVar, adjacency: Var) -> Result<LatentVar> {
        let rows = x.vertex_rows(tape)?;
        let rows = self.gc.forward(tape, p, adjacency, rows)?;
        let h = LatentVar::from_vertex_rows(tape, rows, x.dims)?;
        let s = h.rearrange(tape, Layout::Sites)?;
        let u = self.ln.forward(tape, p, s.var)?;
        let pe = tape.constant(positional_encoding(x.dims));
        let u = tape.add_bcast(u, pe)?;
        let u = LatentVar::new(tape, u, Layout::Sites, x.dims)?;
        let d = temporal_self_attention(tape, p, &self.tsa, &u)?;
        let var = tape.add(s.var, d.delta.var)?;
        LatentVar::new(tape, var, Layout::Sites, x.dims)
    }
}

/// Deterministic graph-convolution and temporal-attention passes with no
/// noising, used in place of the diffusion block.
#[derive(Clone, Debug)]
pub struct TemporalStack {
    stages: Vec<TemporalStage>,
}

impl TemporalStack {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &TpDistConfig, channels: usize, rng: &mut R) -> Result<Self> {
        config.validate(channels)?;
        let stages = (0..config.passes)
            .map(|i| TemporalStage::new(store, &format!("temporal.pass{i}"), channels, config, rng))
            .collect();
        Ok(Self { stages })
    }

    /// `Frames` in, `Frames` out.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: LatentVar, adjacency: Var) -> Result<LatentVar> {
        let mut h = x;
        for stage in &self.stages {
            h = stage.forward(tape, p, h, adjacency)?;
        }
        h.rearrange(tape, Layout::Frames)
    }
}

fn positional_encoding(d: Dims) -> Tensor {
    let data = (0..d.t).flat_map(|t| sinusoidal_embedding(t as f64, d.c)).collect();
    Tensor::new(&[d.t, d.c], data).expect("positional encoding shape")
}

fn conv_kernel<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, k: [usize; 3], rng: &mut R) -> ParamId {
    let fan = c * k.iter().product::<usize>();
    let limit = (6.0 / (2 * fan) as f64).sqrt();
    store.add(name, Tensor::uniform(&[c, c, k[0], k[1], k[2]], -limit, limit, rng))
}

/// Result of one block evaluation.
#[derive(Clone, Copy, Debug)]
pub struct TpDistOutput {
    /// Denoised latent, `Frames` layout, same shape as the input.
    pub out: LatentVar,
    pub delta: TemporalDependencies,
    /// Mean squared error between predicted noise and the noise the state
    /// carries at each reverse step, averaged over steps (scalar).
    pub eps_loss: Var,
}

/// Forward noising with context cross-attention, δ extraction, and a
/// δ-conditioned reverse chain.
#[derive(Clone, Debug)]
pub struct TpDist {
    pub config: TpDistConfig,
    pub channels: usize,
    pub schedule: DiffusionSchedule,
    gamma: ParamId,
    noise_xattn: AttentionLayer,
    delta_conv: ParamId,
    stages: Vec<TemporalStage>,
    reverse_xattn: AttentionLayer,
    eps_conv: ParamId,
    eps_stage: TemporalStage,
    eps_out: Linear,
}

impl TpDist {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &TpDistConfig, channels: usize, rng: &mut R) -> Result<Self> {
        config.validate(channels)?;
        let c = channels;
        let schedule = DiffusionSchedule::new(config.steps, config.schedule)?;
        let gamma = store.add("tpdist.gamma_a", Tensor::randn(&[config.context_rows, c], 1.0, rng));
        let noise_xattn = AttentionLayer::residual(store, "tpdist.noise_xattn", c, config.heads, rng);
        let delta_conv = conv_kernel(store, "tpdist.delta_conv", c, config.kernel, rng);
        let stages = (0..config.passes)
            .map(|i| TemporalStage::new(store, &format!("tpdist.pass{i}"), c, config, rng))
            .collect();
        let reverse_xattn = AttentionLayer::residual(store, "tpdist.reverse_xattn", c, config.heads, rng);
        let eps_conv = conv_kernel(store, "tpdist.eps.conv", c, config.kernel, rng);
        let eps_stage = TemporalStage::new(store, "tpdist.eps", c, config, rng);
        let eps_out = Linear::zeros(store, "tpdist.eps.out", c, c, true);
        Ok(Self {
            config: config.clone(),
            channels,
            schedule,
            gamma,
            noise_xattn,
            delta_conv,
            stages,
            reverse_xattn,
            eps_conv,
            eps_stage,
            eps_out,
        })
    }

    /// Replaces the schedule (for example with all `α_t = 1`).
    pub fn with_schedule(mut self, schedule: DiffusionSchedule) -> Result<Self> {
        if schedule.n_steps() < self.config.noise_depth {
            return Err(DiffusionError::Config(format!(
                "schedule has {} steps, block needs {}",
                schedule.n_steps(),
                self.config.noise_depth
            )));
        }
        self.schedule = schedule;
        Ok(self)
    }

    pub fn context(&self, store: &ParamStore) -> SemanticContext {
        SemanticContext {
            gamma_a: store.get(self.gamma).clone(),
        }
    }

    fn conv(&self, tape: &mut Tape, p: &Bound, x: LatentVar, w: ParamId) -> Result<LatentVar> {
        let v = x.conv_view(tape)?;
        let v = tape.conv3d(v, p.var(w))?;
        let v = self.config.activation.apply(tape, v)?;
        LatentVar::from_conv_view(tape, v, x.dims)
    }

    fn context_xattn(&self, tape: &mut Tape, p: &Bound, x: LatentVar) -> Result<LatentVar> {
        let rows = x.vertex_rows(tape)?;
        let a = self.noise_xattn.forward(tape, p, rows, p.var(self.gamma))?;
        let rows = tape.add(rows, a)?;
        LatentVar::from_vertex_rows(tape, rows, x.dims)
    }

    fn eps_net(&self, tape: &mut Tape, p: &Bound, z: LatentVar, t: usize, adjacency: Var) -> Result<LatentVar> {
        let c = self.channels;
        let emb = Tensor::new(&[c, 1, 1], sinusoidal_embedding(t as f64, c))?;
        let emb = tape.constant(emb);
        let zin = tape.add_bcast(z.var, emb)?;
        let zin = LatentVar::new(tape, zin, Layout::Frames, z.dims)?;
        let h = self.conv(tape, p, zin, self.eps_conv)?;
        let s = self.eps_stage.forward(tape, p, h, adjacency)?;
        let rows = s.vertex_rows(tape)?;
        let rows = self.eps_out.forward(tape, p, rows)?;
        LatentVar::from_vertex_rows(tape, rows, z.dims)
    }

    /// Noise carried by the current state: `(z − √ᾱ_t·x_0) / √(1−ᾱ_t)`.
    fn noise_target(&self, tape: &mut Tape, z: Var, x0: Var, t: usize) -> Result<Var> {
        let bar = self.schedule.alpha_bar(t);
        if bar >= 1.0 {
            let zero = tape.scale(z, 0.0)?;
            return Ok(zero);
        }
        let signal = tape.scale(x0, bar.sqrt())?;
        let n = tape.sub(z, signal)?;
        Ok(tape.scale(n, 1.0 / (1.0 - bar).sqrt())?)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x0: LatentVar, adjacency: Var, seed: u64) -> Result<TpDistOutput> {
        if x0.layout != Layout::Frames {
            return Err(DiffusionError::Layout {
                expected: Layout::Frames,
                got: x0.layout,
            });
        }
        let d = x0.dims;
        if d.c != self.channels || tape.shape(adjacency)[0] != d.sites() {
            return Err(DiffusionError::Config(format!(
                "latent has {} channels and {} sites; block expects {} channels and {} graph vertices",
                d.c,
                d.sites(),
                self.channels,
                tape.shape(adjacency)[0]
            )));
        }
        let shape = Layout::Frames.shape(d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.config.noise_depth;

        let mut x = x0;
        for t in 1..=k {
            let e = Tensor::randn(&shape, 1.0, &mut rng);
            let eps = tape.constant(e);
            let var = forward_noise_var(tape, x.var, t, &self.schedule, eps)?;
            x = self.context_xattn(tape, p, LatentVar::new(tape, var, Layout::Frames, d)?)?;
        }

        let mut h = self.conv(tape, p, x, self.delta_conv)?;
        for stage in &self.stages {
            h = stage.forward(tape, p, h, adjacency)?;
        }
        let delta = h.rearrange(tape, Layout::Sites)?;

        let mut z = x;
        let mut eps_terms = Vec::with_capacity(k);
        for t in (1..=k).rev() {
            let s = z.rearrange(tape, Layout::Sites)?;
            let a = self.reverse_xattn.forward(tape, p, s.var, delta.var)?;
            let s = tape.add(s.var, a)?;
            z = LatentVar::new(tape, s, Layout::Sites, d)?.rearrange(tape, Layout::Frames)?;

            let eps_hat = self.eps_net(tape, p, z, t, adjacency)?;
            let target = self.noise_target(tape, z.var, x0.var, t)?;
            let diff = tape.sub(eps_hat.var, target)?;
            let sq = tape.square(diff)?;
            eps_terms.push(tape.mean(sq)?);

            let noise = (t > 1).then(|| Tensor::randn(&shape, 1.0, &mut rng));
            let var = reverse_step_var(tape, z.var, t, eps_hat.var, &self.schedule, noise.as_ref(), self.config.reverse_noise)?;
            z = LatentVar::new(tape, var, Layout::Frames, d)?;
        }
        let mut eps_loss = eps_terms[0];
        for &e in &eps_terms[1..] {
            eps_loss = tape.add(eps_loss, e)?;
        }
        let eps_loss = tape.scale(eps_loss, 1.0 / k as f64)?;
        Ok(TpDistOutput {
            out: z,
            delta: TemporalDependencies { delta },
            eps_loss,
        })
    }
}

/// Inference-only evaluation of a block on a `Frames` latent.
pub fn tpdist_block(block: &TpDist, store: &ParamStore, x0: &LatentVideo, graph: &BodyGraph, seed: u64) -> Result<LatentVideo> {
    if x0.dims().sites() != graph.n_coarse() {
        return Err(DiffusionError::Config(format!(
            "latent has {} sites but the coarse graph has {} vertices",
            x0.dims().sites(),
            graph.n_coarse()
        )));
    }
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(x0.data().clone());
    let x = LatentVar::new(&tape, x, x0.layout(), x0.dims())?;
    let adj = tape.constant(graph.coarse.adjacency.clone());
    let out = block.forward(&mut tape, &p, x, adj, seed)?;
    LatentVideo::new(tape.value(out.out.var).clone(), Layout::Frames, x0.dims())
}
