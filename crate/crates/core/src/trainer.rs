//! One-step supervised training with teacher forcing.
//!
//! Every step draws `batch_size` windows of `n_hist + 1` ground-truth frames,
//! builds the normalized feature stack of the first `n_hist` frames, adds
//! input noise, splits the faces into `n_s` subsets and supervises the
//! prediction of the last frame. Per-sample gradients are computed in
//! parallel and summed in sample order, so a run depends only on the seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{add_noise, extract_frame, stack_frames, FrameFeatures, NormStats};
use crate::geometry::{singular_values_desc, DeformationState, GeodesicField, TriMesh, Vec3};
use crate::io::Sequence;
use crate::model::checkpoint::{Checkpoint, Dtype, OptimizerState};
use crate::model::{
    geodesic_attention_scaled, split_faces, AttentionBias, Model, ModelConfig, NetworkOutput, OutputGrad, Session,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_sv: f64,
    pub lambda_vel: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Number of face subsets during the first phase.
    pub split_count: usize,
    /// Length of the first phase in steps; afterwards every face attends to
    /// every other face.
    pub split_steps: u64,
    /// Standard deviation of the noise added to normalized inputs.
    pub sigma_n: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_sv: 1.0,
            lambda_vel: 3.0,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 4,
            steps: 1000,
            split_count: 4,
            split_steps: 0,
            sigma_n: 0.01,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_sv >= 0.0 && self.lambda_vel >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.batch_size == 0 || self.split_count == 0 {
            return bad("batch size and split count must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("learning rate must be positive and Adam betas in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) || !(self.sigma_n >= 0.0) {
            return bad("Adam epsilon must be positive and sigma_n non-negative");
        }
        Ok(())
    }

    pub fn split_at(&self, step: u64) -> usize {
        if step < self.split_steps {
            self.split_count
        } else {
            1
        }
    }
}

/// Ground truth for predicting frame `t + 1` from frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    /// `faces × 9`, row-major `Φ^{t+1} (Φ^t)⁻¹`.
    pub psi: Array2<f64>,
    /// `faces × 3`, singular values of `Φ^{t+1}`, descending.
    pub sigma: Array2<f64>,
    /// Mean-centroid displacement.
    pub q: Vec3,
}

impl FrameTargets {
    pub fn new(current: &DeformationState, next: &DeformationState, q: Vec3) -> Result<Self> {
        let nf = current.phi.len();
        if next.phi.len() != nf {
            return Err(Error::Dimension("states disagree on face count".into()));
        }
        let mut psi = Array2::zeros((nf, 9));
        let mut sigma = Array2::zeros((nf, 3));
        for f in 0..nf {
            let inv = current.phi[f].try_inverse().ok_or(Error::SingularGradient {
                face: f,
                det: current.phi[f].determinant(),
            })?;
            let p = next.phi[f] * inv;
            let back = p * current.phi[f];
            if (back - next.phi[f]).amax() > 1e-8 * (1.0 + next.phi[f].amax()) {
                return Err(Error::NonFinite(format!("relative gradient target of face {f}")));
            }
            for r in 0..3 {
                for c in 0..3 {
                    psi[(f, 3 * r + c)] = p[(r, c)];
                }
            }
            let sv = singular_values_desc(&next.phi[f]);
            for a in 0..3 {
                sigma[(f, a)] = sv[a];
            }
        }
        Ok(FrameTargets { psi, sigma, q })
    }

    pub fn face_count(&self) -> usize {
        self.psi.nrows()
    }

    pub fn select(&self, faces: &[usize]) -> FrameTargets {
        FrameTargets {
            psi: self.psi.select(ndarray::Axis(0), faces),
            sigma: self.sigma.select(ndarray::Axis(0), faces),
            q: self.q,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub deformation: f64,
    pub singular_values: f64,
    pub velocity: f64,
}

impl LossTerms {
    fn scaled_add(&mut self, other: &LossTerms, w: f64) {
        self.total += w * other.total;
        self.deformation += w * other.deformation;
        self.singular_values += w * other.singular_values;
        self.velocity += w * other.velocity;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-face mean L1 on Ψ and sorted Σ plus L1 on q, with the subgradient
/// (0 at kinks) with respect to the raw outputs.
pub fn loss(output: &NetworkOutput, targets: &FrameTargets, lambda_sv: f64, lambda_vel: f64) -> Result<(LossTerms, OutputGrad)> {
    let nf = targets.face_count();
    if output.psi.dim() != (nf, 9) || output.sigma.dim() != (nf, 3) || nf == 0 {
        return Err(Error::Dimension(format!(
            "outputs cover {} faces, targets {nf}",
            output.psi.nrows()
        )));
    }
    let inv = 1.0 / nf as f64;
    let mut grad = OutputGrad {
        psi: Array2::zeros((nf, 9)),
        sigma: Array2::zeros((nf, 3)),
        q: Vec3::zeros(),
    };
    let mut def = 0.0;
    for f in 0..nf {
        let mut row = 0.0;
        for k in 0..9 {
            let d = output.psi[(f, k)] - targets.psi[(f, k)];
            row += d.abs();
            grad.psi[(f, k)] = sign(d) * inv;
        }
        def += row;
    }
    def *= inv;
    let mut sv = 0.0;
    for f in 0..nf {
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| output.sigma[(f, b)].total_cmp(&output.sigma[(f, a)]));
        let mut row = 0.0;
        for (rank, &head) in order.iter().enumerate() {
            let d = output.sigma[(f, head)] - targets.sigma[(f, rank)];
            row += d.abs();
            grad.sigma[(f, head)] = lambda_sv * sign(d) * inv;
        }
        sv += row;
    }
    sv *= inv;
    let dq = output.q - targets.q;
    let vel = dq.abs().sum();
    grad.q = dq.map(|d| lambda_vel * sign(d));
    let total = def + lambda_sv * sv + lambda_vel * vel;
    if !total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((
        LossTerms {
            total,
            deformation: def,
            singular_values: sv,
            velocity: vel,
        },
        grad,
    ))
}

struct SequenceData {
    features: Vec<FrameFeatures>,
    /// `targets[t]` supervises frame `t + 1`.
    targets: Vec<FrameTargets>,
    geodesics: Option<Arc<GeodesicField>>,
    full_bias: Option<AttentionBias>,
}

/// Precomputed features and targets of every frame of a training corpus.
pub struct Dataset {
    n_hist: usize,
    sequences: Vec<SequenceData>,
    windows: Vec<(usize, usize)>,
    attention: Option<(f64, f64)>,
}

/// One training window: input frames `start .. start + n_hist`, supervised
/// frame `start + n_hist`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSample {
    pub sequence: usize,
    pub start: usize,
}

impl Dataset {
    /// `attention` is `(p_geo, geodesic scale)` for models with geodesic
    /// heads, `None` otherwise.
    pub fn build(corpus: &[Sequence], n_hist: usize, attention: Option<(f64, f64)>) -> Result<Self> {
        if n_hist < 2 {
            return Err(Error::Config("n_hist must be at least 2".into()));
        }
        let mut sequences = Vec::with_capacity(corpus.len());
        let mut windows = Vec::new();
        for (s, seq) in corpus.iter().enumerate() {
            seq.validate()?;
            if seq.len() < n_hist + 1 {
                return Err(Error::Config(format!(
                    "sequence {} has {} frames, training needs at least {}",
                    seq.name,
                    seq.len(),
                    n_hist + 1
                )));
            }
            sequences.push(prepare_sequence(seq, attention)?);
            windows.extend((0..seq.len() - n_hist).map(|start| (s, start)));
        }
        if windows.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        Ok(Dataset {
            n_hist,
            sequences,
            windows,
            attention,
        })
    }

    pub fn n_hist(&self) -> usize {
        self.n_hist
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn sample(&self, index: usize) -> TrainSample {
        let (sequence, start) = self.windows[index];
        TrainSample { sequence, start }
    }

    /// Raw (unnormalized) stack of a window.
    pub fn stack(&self, s: TrainSample) -> Array2<f64> {
        let seq = &self.sequences[s.sequence];
        let frames: Vec<&FrameFeatures> = seq.features[s.start..s.start + self.n_hist].iter().collect();
        stack_frames(&frames).expect("frames of one sequence share a face count")
    }

    pub fn targets(&self, s: TrainSample) -> &FrameTargets {
        &self.sequences[s.sequence].targets[s.start + self.n_hist - 1]
    }

    /// Statistics over every window of the corpus.
    pub fn fit_stats(&self) -> Result<NormStats> {
        NormStats::fit((0..self.len()).map(|k| self.stack(self.sample(k))))
    }

    fn bias(&self, sequence: usize, faces: &[usize]) -> Result<AttentionBias> {
        let seq = &self.sequences[sequence];
        match (self.attention, &seq.geodesics) {
            (Some((p_geo, scale)), Some(field)) => {
                if faces.len() == field.face_count() {
                    if let Some(b) = &seq.full_bias {
                        return Ok(b.clone());
                    }
                }
                geodesic_attention_scaled(field, faces, p_geo, scale)
            }
            _ => Ok(AttentionBias::uniform(faces.len())),
        }
    }
}

fn prepare_sequence(seq: &Sequence, attention: Option<(f64, f64)>) -> Result<SequenceData> {
    let colliders = seq.colliders()?;
    let meshes: Vec<TriMesh> = (0..seq.len()).map(|k| seq.garment_mesh(k)).collect::<Result<_>>()?;
    let states: Vec<DeformationState> = meshes
        .iter()
        .map(|m| DeformationState::from_positions(&seq.garment_rest, m.vertices()))
        .collect::<Result<_>>()?;
    // frame t needs the collider at t + 1, so the last frame has no features
    let features: Vec<FrameFeatures> = (0..seq.len() - 1)
        .map(|t| extract_frame(&meshes[t], &states[t], &colliders[t], &colliders[t + 1]))
        .collect::<Result<_>>()?;
    let targets: Vec<FrameTargets> = (0..seq.len() - 1)
        .map(|t| FrameTargets::new(&states[t], &states[t + 1], meshes[t + 1].mean_centroid() - meshes[t].mean_centroid()))
        .collect::<Result<_>>()?;
    let (geodesics, full_bias) = match attention {
        Some((p_geo, scale)) => {
            let field = Arc::new(GeodesicField::compute(&seq.garment_rest));
            let all: Vec<usize> = (0..field.face_count()).collect();
            let bias = geodesic_attention_scaled(&field, &all, p_geo, scale)?;
            (Some(field), Some(bias))
        }
        None => (None, None),
    };
    Ok(SequenceData {
        features,
        targets,
        geodesics,
        full_bias,
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(params: &[Array2<f64>]) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Adam {
            state: OptimizerState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    pub fn update(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], cfg: &TrainConfig) {
        let st = &mut self.state;
        st.step += 1;
        let t = st.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(st.m.iter_mut().zip(st.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_epsilon);
            });
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub n_s: usize,
    pub loss: LossTerms,
    pub wall_seconds: f64,
}

pub struct Trainer {
    model: Model,
    config: TrainConfig,
    adam: Adam,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model.params().tensors);
        Ok(Trainer { model, config, adam })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = checkpoint
            .optimizer
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        let shapes_ok = state.m.len() == checkpoint.model.params().tensors.len()
            && state
                .m
                .iter()
                .zip(&state.v)
                .zip(&checkpoint.model.params().tensors)
                .all(|((m, v), p)| m.dim() == p.dim() && v.dim() == p.dim());
        if !shapes_ok {
            return Err(Error::Format("optimizer moments do not match the model".into()));
        }
        Ok(Trainer {
            model: checkpoint.model,
            config,
            adam: Adam { state },
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.adam.state.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            metadata: serde_json::json!({
                "step": self.adam.state.step,
                "train": self.config,
            }),
            optimizer: Some(self.adam.state.clone()),
        }
    }

    /// Loss and summed parameter gradients of one window.
    fn sample_gradient(
        &self,
        data: &Dataset,
        sample: TrainSample,
        n_s: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LossTerms, Vec<Array2<f64>>)> {
        let mut tokens = self.model.stats().normalize(&data.stack(sample))?;
        add_noise(&mut tokens, self.config.sigma_n, rng)?;
        let targets = data.targets(sample);
        let parts = split_faces(tokens.nrows(), n_s.min(tokens.nrows()), rng)?;
        let w = 1.0 / parts.len() as f64;
        let mut terms = LossTerms::default();
        let mut grads = self.model.params().zeros_like();
        for part in &parts {
            let sub = tokens.select(ndarray::Axis(0), part);
            let bias = data.bias(sample.sequence, part)?;
            let mut session = Session::new();
            let out = session.forward(&self.model, &sub, &bias, Some(rng as &mut dyn RngCore))?;
            let (t, mut g) = loss(&out, &targets.select(part), self.config.lambda_sv, self.config.lambda_vel)?;
            g.psi *= w;
            g.sigma *= w;
            g.q *= w;
            for (acc, d) in grads.iter_mut().zip(session.backward(&self.model, &g)?) {
                *acc += &d;
            }
            terms.scaled_add(&t, w);
        }
        Ok((terms, grads))
    }

    /// One optimizer step; the batch and all randomness depend only on the
    /// seed and the step index.
    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        if data.n_hist() != self.model.config().n_hist {
            return Err(Error::Config(format!(
                "dataset windows hold {} frames, model expects {}",
                data.n_hist(),
                self.model.config().n_hist
            )));
        }
        let clock = Instant::now();
        let step = self.adam.state.step;
        let n_s = self.config.split_at(step);
        let mut rng = step_rng(self.config.seed, step);
        let jobs: Vec<(TrainSample, u64)> = (0..self.config.batch_size)
            .map(|_| (data.sample(rng.random_range(0..data.len())), rng.next_u64()))
            .collect();
        let results: Vec<Result<(LossTerms, Vec<Array2<f64>>)>> = jobs
            .par_iter()
            .map(|&(sample, seed)| self.sample_gradient(data, sample, n_s, &mut ChaCha8Rng::seed_from_u64(seed)))
            .collect();
        let w = 1.0 / self.config.batch_size as f64;
        let mut terms = LossTerms::default();
        let mut grads = self.model.params().zeros_like();
        for r in results {
            let (t, g) = r.map_err(|e| match e {
                Error::NonFinite(_) | Error::NonFiniteActivation(_) => Error::NonFiniteLoss { step: step as usize },
                other => other,
            })?;
            terms.scaled_add(&t, w);
            for (acc, d) in grads.iter_mut().zip(&g) {
                acc.scaled_add(w, d);
            }
        }
        if !terms.total.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss { step: step as usize });
        }
        self.adam.update(&mut self.model.params_mut().tensors, &grads, &self.config);
        Ok(StepRecord {
            step,
            n_s,
            loss: terms,
            wall_seconds: clock.elapsed().as_secs_f64(),
        })
    }

    /// Runs until `config.steps` total steps, appending metrics to
    /// `out_dir/metrics.jsonl` and writing checkpoints when `out_dir` is set.
    pub fn run(&mut self, data: &Dataset, out_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("metrics.jsonl"))?;
                Some(BufWriter::new(file))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.adam.state.step < self.config.steps {
            let rec = self.step(data)?;
            log::debug!("step {} loss {:.6e}", rec.step, rec.loss.total);
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                writeln!(w)?;
            }
            records.push(rec);
            let done = self.adam.state.step;
            if let (Some(dir), true) = (out_dir, self.config.checkpoint_every > 0 && done % self.config.checkpoint_every == 0) {
                self.checkpoint().save(&checkpoint_path(dir, Some(done)), Dtype::F64)?;
            }
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&checkpoint_path(dir, None), Dtype::F64)?;
        }
        Ok(records)
    }
}

/// `dir/step-<n>.ckpt`, or `dir/final.ckpt` without a step.
pub fn checkpoint_path(dir: &Path, step: Option<u64>) -> PathBuf {
    match step {
        Some(s) => dir.join(format!("step-{s:08}.ckpt")),
        None => dir.join("final.ckpt"),
    }
}

/// Fits statistics, initializes a model from `config.seed` with identity
/// output heads and trains it.
pub fn train(
    corpus: &[Sequence],
    model_config: &ModelConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Model, Vec<StepRecord>)> {
    model_config.validate()?;
    let attention = (model_config.n_conn > 0).then_some((model_config.p_geo, model_config.geo_scale));
    let data = Dataset::build(corpus, model_config.n_hist, attention)?;
    let stats = data.fit_stats()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(model_config.clone(), stats, &mut init_rng)?;
    model.zero_output_heads();
    let mut trainer = Trainer::new(model, config.clone())?;
    let records = trainer.run(&data, out_dir)?;
    Ok((trainer.into_model(), records))
}

/// Reads a metrics log written by [`Trainer::run`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::io::read_to_string(File::open(path)?)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;

    fn random_output(nf: usize, rng: &mut ChaCha8Rng) -> NetworkOutput {
        NetworkOutput {
            psi: Array2::from_shape_fn((nf, 9), |_| rng.random_range(-1.0..1.0)),
            sigma: Array2::from_shape_fn((nf, 3), |_| rng.random_range(0.1..2.0)),
            q: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        }
    }

    fn exact_targets(out: &NetworkOutput) -> FrameTargets {
        FrameTargets {
            psi: out.psi.clone(),
            sigma: Array2::from_shape_fn(out.sigma.dim(), |(f, a)| out.sigma_sorted()[f][a]),
            q: out.q,
        }
    }

    #[test]
    fn exact_prediction_has_zero_loss() {
        let out = random_output(7, &mut ChaCha8Rng::seed_from_u64(1));
        let (t, g) = loss(&out, &exact_targets(&out), 1.0, 3.0).unwrap();
        assert_eq!(t.total, 0.0);
        assert!(g.psi.iter().chain(g.sigma.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn velocity_example() {
        let out = random_output(5, &mut ChaCha8Rng::seed_from_u64(2));
        let mut tgt = exact_targets(&out);
        tgt.q -= Vec3::new(0.1, 0.0, 0.0);
        let (t, _) = loss(&out, &tgt, 1.0, 3.0).unwrap();
        assert!((t.total - 0.3).abs() < 1e-15, "{}", t.total);
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let nf = rng.random_range(1..30);
            let out = random_output(nf, &mut rng);
            let tgt = FrameTargets {
                psi: Array2::from_shape_fn((nf, 9), |_| rng.random_range(-1.0..1.0)),
                sigma: Array2::from_shape_fn((nf, 3), |_| rng.random_range(0.1..2.0)),
                q: Vec3::new(0.3, -0.2, 0.1),
            };
            let (t, _) = loss(&out, &tgt, 1.0, 3.0).unwrap();
            let mut def = 0.0;
            let mut sv = 0.0;
            for f in 0..nf {
                for k in 0..9 {
                    def += (out.psi[(f, k)] - tgt.psi[(f, k)]).abs() / nf as f64;
                }
                let mut s = vec![out.sigma[(f, 0)], out.sigma[(f, 1)], out.sigma[(f, 2)]];
                s.sort_by(|a, b| b.partial_cmp(a).unwrap());
                for a in 0..3 {
                    sv += (s[a] - tgt.sigma[(f, a)]).abs() / nf as f64;
                }
            }
            let vel: f64 = (0..3).map(|a| (out.q[a] - tgt.q[a]).abs()).sum();
            let oracle = def + sv + 3.0 * vel;
            assert!((t.total - oracle).abs() < 1e-12 * oracle.max(1.0));
        }
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = random_output(6, &mut rng);
        let tgt = FrameTargets {
            psi: Array2::from_shape_fn((6, 9), |_| rng.random_range(-1.0..1.0)),
            sigma: Array2::from_shape_fn((6, 3), |_| rng.random_range(0.1..2.0)),
            q: Vec3::new(0.3, -0.2, 0.1),
        };
        let (_, g) = loss(&out, &tgt, 1.5, 3.0).unwrap();
        let h = 1e-7;
        let eval = |o: &NetworkOutput| loss(o, &tgt, 1.5, 3.0).unwrap().0.total;
        for f in 0..6 {
            for a in 0..3 {
                let mut p = out.clone();
                p.sigma[(f, a)] += h;
                let mut m = out.clone();
                m.sigma[(f, a)] -= h;
                let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                assert!((fd - g.sigma[(f, a)]).abs() < 1e-6);
            }
            let mut p = out.clone();
            p.psi[(f, 4)] += h;
            let mut m = out.clone();
            m.psi[(f, 4)] -= h;
            assert!(((eval(&p) - eval(&m)) / (2.0 * h) - g.psi[(f, 4)]).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let out = random_output(4, &mut ChaCha8Rng::seed_from_u64(5));
        let tgt = exact_targets(&random_output(3, &mut ChaCha8Rng::seed_from_u64(6)));
        assert!(matches!(loss(&out, &tgt, 1.0, 3.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = vec![Array2::from_elem((2, 2), 1.0)];
        let grads = vec![Array2::from_shape_vec((2, 2), vec![0.5, -2.0, 1e-3, 0.0]).unwrap()];
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&params);
        adam.update(&mut params, &grads, &cfg);
        let p = &params[0];
        assert!((p[(0, 0)] - (1.0 - 1e-4)).abs() < 1e-10);
        assert!((p[(0, 1)] - (1.0 + 1e-4)).abs() < 1e-10);
        assert_eq!(p[(1, 1)], 1.0);
    }

    pub(crate) fn toy_corpus() -> Vec<Sequence> {
        let rest = shapes::grid(3, 3, 0.3, 0.3);
        let body = shapes::icosphere(1, 0.1);
        let frames = 8;
        let garment_frames = (0..frames)
            .map(|k| {
                let t = k as f64 * 0.05;
                rest.vertices()
                    .iter()
                    .map(|v| Vec3::new(v.x * (1.0 + 0.1 * t), v.y, v.z + 0.02 * (v.x * 9.0 + t).sin()) + Vec3::new(t, 0.0, 0.0))
                    .collect()
            })
            .collect();
        let collider_frames = (0..frames)
            .map(|k| body.vertices().iter().map(|v| v + Vec3::new(0.15 + 0.05 * k as f64, 0.15, -0.3)).collect())
            .collect();
        vec![Sequence {
            name: "toy".into(),
            frame_rate: 30.0,
            garment_rest: rest,
            garment_frames,
            collider_rest: body,
            collider_frames,
        }]
    }

    fn toy_model_config() -> ModelConfig {
        ModelConfig {
            n_hist: 3,
            n_layers: 1,
            n_embed: 16,
            n_ff: 16,
            n_heads: 2,
            n_conn: 1,
            p_drop: 0.0,
            p_geo: 2.0,
            geo_scale: 0.1,
        }
    }

    #[test]
    fn targets_reproduce_next_gradients() {
        let corpus = toy_corpus();
        let data = Dataset::build(&corpus, 3, None).unwrap();
        let seq = &corpus[0];
        let s1 = DeformationState::from_positions(&seq.garment_rest, &seq.garment_frames[4]).unwrap();
        let s0 = DeformationState::from_positions(&seq.garment_rest, &seq.garment_frames[3]).unwrap();
        let t = data.targets(TrainSample { sequence: 0, start: 1 });
        for f in 0..s0.phi.len() {
            let psi = crate::geometry::unflatten_row_major(t.psi.row(f).as_slice().unwrap());
            assert!((psi * s0.phi[f] - s1.phi[f]).amax() < 1e-8);
            for a in 0..3 {
                assert!((t.sigma[(f, a)] - s1.sigma[f][a]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn normalized_corpus_is_standardized() {
        let data = Dataset::build(&toy_corpus(), 3, None).unwrap();
        let stats = data.fit_stats().unwrap();
        let all: Vec<Array2<f64>> = (0..data.len())
            .map(|k| stats.normalize(&data.stack(data.sample(k))).unwrap())
            .collect();
        let refit = NormStats::fit(&all).unwrap();
        for (m, s) in refit.mean.iter().zip(&refit.std) {
            assert!(m.abs() < 1e-6);
            assert!((s - 1.0).abs() < 1e-6 || *s <= 1e-6 + crate::features::STD_FLOOR, "{s}");
        }
    }

    #[test]
    fn short_corpus_rejected() {
        let mut corpus = toy_corpus();
        corpus[0].garment_frames.truncate(3);
        corpus[0].collider_frames.truncate(3);
        assert!(matches!(Dataset::build(&corpus, 3, None), Err(Error::Config(_))));
    }

    #[test]
    fn overfitting_lowers_the_loss_and_is_repeatable() {
        let corpus = toy_corpus();
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 2,
            learning_rate: 1e-3,
            split_count: 2,
            split_steps: 50,
            seed: 11,
            ..TrainConfig::default()
        };
        let (_, a) = train(&corpus, &toy_model_config(), &cfg, None).unwrap();
        let (_, b) = train(&corpus, &toy_model_config(), &cfg, None).unwrap();
        let losses = |r: &[StepRecord]| r.iter().map(|s| s.loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        let head: f64 = a[..10].iter().map(|r| r.loss.total).sum();
        let tail: f64 = a[190..].iter().map(|r| r.loss.total).sum();
        assert!(tail < head, "{tail} vs {head}");
        assert_eq!(a[0].n_s, 2);
        assert_eq!(a[60].n_s, 1);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let corpus = toy_corpus();
        let mcfg = toy_model_config();
        let cfg = TrainConfig {
            steps: 12,
            batch_size: 2,
            learning_rate: 1e-3,
            checkpoint_every: 5,
            seed: 2,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let (full, records) = train(&corpus, &mcfg, &cfg, Some(dir.path())).unwrap();
        let logged = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(logged.len(), 12);
        let ckpt = Checkpoint::load(&checkpoint_path(dir.path(), Some(5))).unwrap();
        let data = Dataset::build(&corpus, 3, Some((mcfg.p_geo, mcfg.geo_scale))).unwrap();
        let mut resumed = Trainer::resume(ckpt, cfg).unwrap();
        assert_eq!(resumed.step_count(), 5);
        let rest = resumed.run(&data, None).unwrap();
        let tail: Vec<LossTerms> = records[5..].iter().map(|r| r.loss).collect();
        assert_eq!(rest.iter().map(|r| r.loss).collect::<Vec<_>>(), tail);
        assert_eq!(resumed.model().params(), full.params());
    }

    #[test]
    fn nan_loss_names_the_step() {
        let corpus = toy_corpus();
        let mcfg = toy_model_config();
        let data = Dataset::build(&corpus, 3, Some((mcfg.p_geo, mcfg.geo_scale))).unwrap();
        let stats = data.fit_stats().unwrap();
        let mut model = Model::new(mcfg, stats, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        model.params_mut().tensors[0][(0, 0)] = f64::NAN;
        let mut t = Trainer::new(model, TrainConfig::default()).unwrap();
        let err = t.step(&data).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 0 }), "{err}");
    }
}
