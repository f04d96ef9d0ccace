//! The full reconstruction model and its training objective.

use super::{LossWeights, ModelConfig, Result};
use crate::autodiff::{Tape, Var};
use crate::diffusion::{Dims, DiffusionSchedule, LatentVar, TemporalStack, TpDist};
use crate::graph::{generate_toy_body, resample_with, GraphConvLayer, ToyBody};
use crate::loss::{hh_loss, part_weights_from_variance, PartLabelMap};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
enum Temporal {
    Diffusion(TpDist),
    Deterministic(TemporalStack),
}

/// Frame encoder, graph stack, temporal block, up-projection and
/// per-vertex head.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub body: ToyBody,
    enc1: Linear,
    enc2: Linear,
    gtm: Vec<GraphConvLayer>,
    temporal: Temporal,
    up: Option<ParamId>,
    head_w: ParamId,
    head_b: ParamId,
    fine_map: PartLabelMap,
    coarse_map: PartLabelMap,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B·T, n, 3]` in model units.
    pub vertices: Var,
    /// Graph-stack output `[B·T, n_coarse, C]`.
    pub gtm: Var,
    /// Mean ε-prediction error, present with the diffusion block.
    pub eps_loss: Option<Var>,
}

/// Scalar terms of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub vertex: Var,
    pub hh: Option<Var>,
    pub eps: Option<Var>,
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let body = generate_toy_body(&config.body)?;
    let (n, nc, c) = (body.graph.n_vertices(), body.graph.n_coarse(), config.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let enc1 = Linear::new(&mut store, "encoder.0", n * 4, config.hidden, true, &mut rng);
    let enc2 = Linear::new(&mut store, "encoder.1", config.hidden, nc * c, true, &mut rng);
    let gtm = (0..config.gtm_layers)
        .map(|i| GraphConvLayer::new(&mut store, &format!("gtm.{i}"), c, c, config.activation, &mut rng))
        .collect();
    let temporal = if config.tpdist_on {
        Temporal::Diffusion(TpDist::new(&mut store, &config.tpdist, c, &mut rng)?)
    } else {
        Temporal::Deterministic(TemporalStack::new(&mut store, &config.tpdist, c, &mut rng)?)
    };
    let up = config
        .learn_resampling
        .then(|| store.add("upsample", body.graph.up.clone()));
    // small head so the untrained model starts near the rest pose
    let head_w = store.add("head.weight", Tensor::uniform(&[n, c, 3], -0.01, 0.01, &mut rng));
    let rest: Vec<f64> = body
        .rig
        .rest_vertices
        .iter()
        .flat_map(|v| [v.x, v.y, v.z])
        .map(|x| x / config.unit_mm)
        .collect();
    let head_b = store.add("head.bias", Tensor::new(&[n, 3], rest)?);
    let fine_map = PartLabelMap::from_level(&body.graph.fine)?;
    let coarse_map = PartLabelMap::from_level(&body.graph.coarse)?;
    Ok(Model {
        config: config.clone(),
        store,
        body,
        enc1,
        enc2,
        gtm,
        temporal,
        up,
        head_w,
        head_b,
        fine_map,
        coarse_map,
    })
}

impl Model {
    pub fn n_vertices(&self) -> usize {
        self.body.graph.n_vertices()
    }

    /// The diffusion schedule, absent when the diffusion block is off.
    pub fn schedule(&self) -> Option<&DiffusionSchedule> {
        match &self.temporal {
            Temporal::Diffusion(b) => Some(&b.schedule),
            Temporal::Deterministic(_) => None,
        }
    }

    /// `input: [B·T, n·4]` for `b` sequences of `t` frames each.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: Var, b: usize, t: usize, seed: u64) -> Result<Forward> {
        let cfg = &self.config;
        let (n, nc, c) = (self.n_vertices(), self.body.graph.n_coarse(), cfg.channels);
        let h = self.enc1.forward(tape, p, input)?;
        let h = cfg.activation.apply(tape, h)?;
        let h = self.enc2.forward(tape, p, h)?;
        let mut g = tape.reshape(h, &[b * t, nc, c])?;
        let adj = tape.constant(self.body.graph.coarse.adjacency.clone());
        for layer in &self.gtm {
            let u = layer.forward(tape, p, adj, g)?;
            g = tape.add(g, u)?;
        }
        let dims = Dims {
            b,
            t,
            c,
            h: cfg.latent_h,
            w: cfg.latent_w,
        };
        let latent = LatentVar::from_vertex_rows(tape, g, dims)?;
        let (latent, eps_loss) = match &self.temporal {
            Temporal::Diffusion(block) => {
                let o = block.forward(tape, p, latent, adj, seed)?;
                (o.out, Some(o.eps_loss))
            }
            Temporal::Deterministic(stack) => (stack.forward(tape, p, latent, adj)?, None),
        };
        let rows = latent.vertex_rows(tape)?;
        let up = match self.up {
            Some(id) => p.var(id),
            None => tape.constant(self.body.graph.up.clone()),
        };
        let fine = resample_with(tape, up, rows)?;
        let fine = tape.permute(fine, &[1, 0, 2])?;
        let v = tape.bmm(fine, p.var(self.head_w))?;
        let v = tape.permute(v, &[1, 0, 2])?;
        debug_assert_eq!(tape.shape(v), &[b * t, n, 3]);
        let vertices = tape.add_bcast(v, p.var(self.head_b))?;
        Ok(Forward {
            vertices,
            gtm: g,
            eps_loss,
        })
    }

    /// Weighted objective against `target: [B·T, n, 3]` in model units.
    pub fn loss(&self, tape: &mut Tape, fwd: &Forward, target: &Tensor, w: &LossWeights) -> Result<LossParts> {
        self.loss_with(tape, fwd, target, w, None)
    }

    /// Part weights derived from the graph-stack features of `fwd`.
    pub fn part_weights(&self, tape: &Tape, fwd: &Forward) -> Result<Vec<f64>> {
        Ok(part_weights_from_variance(tape.value(fwd.gtm), &self.coarse_map)?)
    }

    /// [`Model::loss`] with optionally fixed part weights.
    pub fn loss_with(&self, tape: &mut Tape, fwd: &Forward, target: &Tensor, w: &LossWeights, lambda: Option<&[f64]>) -> Result<LossParts> {
        let tv = tape.constant(target.clone());
        let d = tape.sub(fwd.vertices, tv)?;
        let sq = tape.square(d)?;
        let vertex = tape.mean(sq)?;
        let vertex = tape.scale(vertex, 3.0)?;
        let mut total = tape.scale(vertex, w.vertex)?;

        let hh = if self.config.hhloss_on {
            let hh = self.hh_term(tape, fwd, target, lambda)?;
            let term = tape.scale(hh, w.hh)?;
            total = tape.add(total, term)?;
            Some(hh)
        } else {
            None
        };
        if let Some(e) = fwd.eps_loss {
            let term = tape.scale(e, w.eps)?;
            total = tape.add(total, term)?;
        }
        Ok(LossParts {
            total,
            vertex,
            hh,
            eps: fwd.eps_loss,
        })
    }

    /// Part-distribution loss on frame-centred vertices at the coarse and
    /// fine levels, weighted by the graph-stack feature variance.
    fn hh_term(&self, tape: &mut Tape, fwd: &Forward, target: &Tensor, lambda: Option<&[f64]>) -> Result<Var> {
        let (f, n) = (target.shape()[0], target.shape()[1]);
        let mut centred = target.clone();
        let mut offsets = Vec::with_capacity(f * 3);
        for fi in 0..f {
            let frame = &mut centred.data_mut()[fi * n * 3..(fi + 1) * n * 3];
            let mut mean = [0.0; 3];
            for v in frame.chunks_exact(3) {
                for k in 0..3 {
                    mean[k] += v[k] / n as f64;
                }
            }
            for v in frame.chunks_exact_mut(3) {
                for k in 0..3 {
                    v[k] -= mean[k];
                }
            }
            offsets.extend(mean.iter().map(|m| -m));
        }
        let off = tape.constant(Tensor::new(&[f, 1, 3], offsets)?);
        let pred = tape.add_bcast(fwd.vertices, off)?;

        let lambda = match lambda {
            Some(l) => l.to_vec(),
            None => self.part_weights(tape, fwd)?,
        };
        let fine_map = self.fine_map.clone().with_lambda(lambda.clone())?;
        let mut total = hh_loss(tape, pred, &centred, &fine_map)?;
        if self.config.hierarchy_depth == 2 {
            let coarse_map = self.coarse_map.clone().with_lambda(lambda)?;
            let down = tape.constant(self.body.graph.down.clone());
            let pred_c = resample_with(tape, down, pred)?;
            let tc = tape.constant(centred.clone());
            let tc = resample_with(tape, down, tc)?;
            let true_c = tape.value(tc).clone();
            let c = hh_loss(tape, pred_c, &true_c, &coarse_map)?;
            total = tape.add(total, c)?;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Sample;
    use crate::synth::{generate_dataset, CorruptionConfig, MotionConfig};

    fn input(model: &Model, t: usize) -> Sample {
        let motion = MotionConfig {
            frames: t,
            ..Default::default()
        };
        let seqs = generate_dataset(&model.body, &motion, &CorruptionConfig::default(), 1, 9).unwrap();
        Sample::from_sequence(&seqs[0], model.config.unit_mm).unwrap()
    }

    #[test]
    fn forward_shape() {
        let model = build_model(&ModelConfig::default()).unwrap();
        let s = input(&model, 4);
        let mut tape = Tape::new();
        let p = model.store.bind_frozen(&mut tape);
        let x = tape.constant(s.input);
        let f = model.forward(&mut tape, &p, x, 1, 4, 0).unwrap();
        assert_eq!(tape.shape(f.vertices), &[4, 96, 3]);
    }

    #[test]
    fn builds_are_deterministic() {
        let a = build_model(&ModelConfig::default()).unwrap();
        let b = build_model(&ModelConfig::default()).unwrap();
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn no_schedule_without_diffusion() {
        let cfg = ModelConfig {
            tpdist_on: false,
            ..Default::default()
        };
        assert!(build_model(&cfg).unwrap().schedule().is_none());
        assert!(build_model(&ModelConfig::default()).unwrap().schedule().is_some());
    }

    #[test]
    fn hh_toggle_keeps_prediction() {
        let on = build_model(&ModelConfig::default()).unwrap();
        let off = build_model(&ModelConfig {
            hhloss_on: false,
            ..Default::default()
        })
        .unwrap();
        let s = input(&on, 4);
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let p = m.store.bind_frozen(&mut tape);
            let x = tape.constant(s.input.clone());
            let f = m.forward(&mut tape, &p, x, 1, 4, 3).unwrap();
            tape.value(f.vertices).clone()
        };
        assert_eq!(run(&on), run(&off));
    }
}
