//! Auto-regressive frame prediction.
//!
//! One step turns the last `n_hist` garment frames and the collider at the
//! next time step into the next garment frame: features, network, gradient
//! composition, singular value replacement, Poisson reconstruction and
//! collision refinement. The refined frame is pushed back into the history.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use serde::Serialize;

use crate::collider::ColliderFrame;
use crate::error::{Error, Result, Stage};
use crate::features::{extract_frame_with_sdf, face_sdf, stack_frames, FrameFeatures};
use crate::geometry::{DeformationState, GeodesicField, Mat3, TriMesh, Vec3};
use crate::model::{geodesic_attention_scaled, AttentionBias, Model, NetworkOutput};
use crate::poisson::PoissonSystem;
use crate::refine::{RefineConfig, RefineReport, Refiner};

/// Replaces the singular values of `phi_bar` by `sigma` (descending, positive)
/// keeping its rotational part: `U diag(σ) Vᵀ` with `det(U Vᵀ) = +1`.
pub fn svd_replace(phi_bar: &Mat3, sigma: &Vec3) -> Result<Mat3> {
    if !phi_bar.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("gradient passed to singular value replacement".into()));
    }
    if !sigma.iter().all(|&s| s.is_finite() && s > 0.0) {
        return Err(Error::InvalidArgument(format!("singular values must be positive, got {sigma:?}")));
    }
    let mut svd = phi_bar.svd(true, true);
    svd.sort_by_singular_values();
    let mut u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    if u.determinant() * v_t.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    Ok(u * Mat3::from_diagonal(sigma) * v_t)
}

/// What a network sees for one frame.
#[derive(Debug, Clone, Copy)]
pub struct PredictorInput<'a> {
    /// Raw (unnormalized) feature stack, one token per face.
    pub stack: &'a Array2<f64>,
    pub bias: &'a AttentionBias,
    /// Deformation state of the most recent frame.
    pub current: &'a DeformationState,
}

pub trait Predictor {
    fn n_hist(&self) -> usize;

    /// `(p_geo, scale)` when the predictor needs a geodesic attention bias.
    fn attention_params(&self) -> Option<(f64, f64)>;

    fn predict(&self, input: &PredictorInput<'_>) -> Result<NetworkOutput>;
}

impl Predictor for Model {
    fn n_hist(&self) -> usize {
        self.config().n_hist
    }

    fn attention_params(&self) -> Option<(f64, f64)> {
        let c = self.config();
        (c.n_conn > 0).then_some((c.p_geo, c.geo_scale))
    }

    fn predict(&self, input: &PredictorInput<'_>) -> Result<NetworkOutput> {
        let tokens = self.stats().normalize(input.stack)?;
        self.forward(&tokens, input.bias)
    }
}

/// Predicts no deformation change: Ψ = I, Σ = current Σ and a fixed
/// velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityPredictor {
    pub n_hist: usize,
    pub velocity: Vec3,
}

impl Predictor for IdentityPredictor {
    fn n_hist(&self) -> usize {
        self.n_hist
    }

    fn attention_params(&self) -> Option<(f64, f64)> {
        None
    }

    fn predict(&self, input: &PredictorInput<'_>) -> Result<NetworkOutput> {
        let nf = input.current.sigma.len();
        let mut psi = Array2::zeros((nf, 9));
        let mut sigma = Array2::zeros((nf, 3));
        for f in 0..nf {
            for d in [0, 4, 8] {
                psi[(f, d)] = 1.0;
            }
            for a in 0..3 {
                sigma[(f, a)] = input.current.sigma[f][a];
            }
        }
        Ok(NetworkOutput {
            psi,
            sigma,
            q: self.velocity,
        })
    }
}

#[derive(Debug, Clone)]
struct HistoryFrame {
    positions: Vec<Vec3>,
    mesh: TriMesh,
    state: DeformationState,
    collider: Arc<ColliderFrame>,
    features: Option<FrameFeatures>,
}

/// Wall time spent in each stage of one predicted frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub features: Duration,
    pub sdf: Duration,
    pub network: Duration,
    pub poisson: Duration,
    pub refinement: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.features + self.sdf + self.network + self.poisson + self.refinement
    }
}

#[derive(Debug, Clone)]
pub struct FramePrediction {
    /// Refined positions (or the Poisson result when refinement is off).
    pub positions: Vec<Vec3>,
    pub unrefined: Vec<Vec3>,
    pub output: NetworkOutput,
    pub refinement: Option<RefineReport>,
    pub timings: StageTimings,
}

/// Ring buffer of the last `n_hist` frames plus the per-garment operators.
#[derive(Debug, Clone)]
pub struct RolloutState {
    rest: TriMesh,
    poisson: Arc<PoissonSystem>,
    refiner: Option<Refiner>,
    geodesics: Option<Arc<GeodesicField>>,
    bias: Option<((f64, f64), AttentionBias)>,
    history: VecDeque<HistoryFrame>,
    n_hist: usize,
}

impl RolloutState {
    pub fn new(
        rest: TriMesh,
        n_hist: usize,
        geodesics: Option<Arc<GeodesicField>>,
        refine: Option<RefineConfig>,
    ) -> Result<Self> {
        let poisson = Arc::new(PoissonSystem::build(&rest)?);
        Self::with_poisson(rest, poisson, n_hist, geodesics, refine)
    }

    /// Reuses an already factored Poisson system for the same rest mesh.
    pub fn with_poisson(
        rest: TriMesh,
        poisson: Arc<PoissonSystem>,
        n_hist: usize,
        geodesics: Option<Arc<GeodesicField>>,
        refine: Option<RefineConfig>,
    ) -> Result<Self> {
        if n_hist < 2 {
            return Err(Error::InvalidArgument("history length must be at least 2".into()));
        }
        if poisson.vertex_count() != rest.vertex_count() || poisson.face_count() != rest.face_count() {
            return Err(Error::Dimension("Poisson system built for another mesh".into()));
        }
        if let Some(g) = &geodesics {
            if g.face_count() != rest.face_count() {
                return Err(Error::Dimension(format!(
                    "geodesic field covers {} faces, garment has {}",
                    g.face_count(),
                    rest.face_count()
                )));
            }
        }
        let refiner = refine.map(|c| Refiner::new(rest.topology(), c)).transpose()?;
        Ok(RolloutState {
            rest,
            poisson,
            refiner,
            geodesics,
            bias: None,
            history: VecDeque::with_capacity(n_hist + 1),
            n_hist,
        })
    }

    /// Replaces the history by `frames` (oldest first) with their colliders.
    pub fn warm_start(&mut self, frames: &[Vec<Vec3>], colliders: &[Arc<ColliderFrame>]) -> Result<()> {
        if frames.len() != self.n_hist || colliders.len() != self.n_hist {
            return Err(Error::InvalidArgument(format!(
                "warm start needs {} frames and colliders, got {} and {}",
                self.n_hist,
                frames.len(),
                colliders.len()
            )));
        }
        self.history.clear();
        for (p, c) in frames.iter().zip(colliders) {
            self.push(p.clone(), c.clone())?;
        }
        Ok(())
    }

    fn push(&mut self, positions: Vec<Vec3>, collider: Arc<ColliderFrame>) -> Result<()> {
        let mesh = self.rest.with_positions(positions.clone())?;
        let state = DeformationState::from_positions(&self.rest, &positions)?;
        self.history.push_back(HistoryFrame {
            positions,
            mesh,
            state,
            collider,
            features: None,
        });
        while self.history.len() > self.n_hist {
            self.history.pop_front();
        }
        Ok(())
    }

    pub fn rest(&self) -> &TriMesh {
        &self.rest
    }

    pub fn n_hist(&self) -> usize {
        self.n_hist
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn latest(&self) -> Option<&[Vec3]> {
        self.history.back().map(|h| h.positions.as_slice())
    }

    pub fn latest_state(&self) -> Option<&DeformationState> {
        self.history.back().map(|h| &h.state)
    }

    /// Largest entry-wise difference between stored Φ and Φ recomputed from
    /// stored positions.
    pub fn consistency_error(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for h in &self.history {
            let fresh = DeformationState::from_positions(&self.rest, &h.positions)?;
            for (a, b) in fresh.phi.iter().zip(&h.state.phi) {
                worst = worst.max((a - b).amax());
            }
        }
        Ok(worst)
    }

    fn attention_bias(&mut self, params: Option<(f64, f64)>) -> Result<AttentionBias> {
        let nf = self.rest.face_count();
        let Some(key) = params else {
            return Ok(AttentionBias::uniform(nf));
        };
        if let Some((k, b)) = &self.bias {
            if *k == key {
                return Ok(b.clone());
            }
        }
        let field = self
            .geodesics
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("predictor needs a geodesic field".into()))?;
        let all: Vec<usize> = (0..nf).collect();
        let b = geodesic_attention_scaled(field, &all, key.0, key.1)?;
        self.bias = Some((key, b.clone()));
        Ok(b)
    }

    /// Predicts the next frame given the collider at that frame and pushes
    /// the result into the history.
    pub fn predict_frame<P: Predictor + ?Sized>(
        &mut self,
        predictor: &P,
        collider_next: Arc<ColliderFrame>,
    ) -> Result<FramePrediction> {
        if predictor.n_hist() != self.n_hist {
            return Err(Error::InvalidArgument(format!(
                "predictor expects {} history frames, rollout keeps {}",
                predictor.n_hist(),
                self.n_hist
            )));
        }
        if self.history.len() != self.n_hist {
            return Err(Error::InvalidArgument(format!(
                "history holds {} of {} frames; warm start first",
                self.history.len(),
                self.n_hist
            )));
        }
        let mut timings = StageTimings::default();

        // features of the newest frame need the collider one step ahead
        let last = self.history.len() - 1;
        for k in 0..self.history.len() {
            if self.history[k].features.is_some() {
                continue;
            }
            let next = if k == last {
                collider_next.clone()
            } else {
                self.history[k + 1].collider.clone()
            };
            let h = &self.history[k];
            let clock = Instant::now();
            let sdf = face_sdf(&h.mesh, &h.collider);
            timings.sdf += clock.elapsed();
            let clock = Instant::now();
            let feats = extract_frame_with_sdf(&h.mesh, &h.state, &sdf, &h.collider, &next)
                .map_err(|e| e.at_stage(Stage::Features))?;
            timings.features += clock.elapsed();
            self.history[k].features = Some(feats);
        }
        let clock = Instant::now();
        let frames: Vec<&FrameFeatures> = self
            .history
            .iter()
            .map(|h| h.features.as_ref().expect("features computed above"))
            .collect();
        let stack = stack_frames(&frames).map_err(|e| e.at_stage(Stage::Features))?;
        timings.features += clock.elapsed();

        let clock = Instant::now();
        let bias = self
            .attention_bias(predictor.attention_params())
            .map_err(|e| e.at_stage(Stage::Network))?;
        let current = &self.history[last];
        let output = predictor
            .predict(&PredictorInput {
                stack: &stack,
                bias: &bias,
                current: &current.state,
            })
            .map_err(|e| e.at_stage(Stage::Network))?;
        timings.network = clock.elapsed();

        let clock = Instant::now();
        let psi = output.psi_matrices();
        let sigma = output.sigma_sorted();
        let mut target = Vec::with_capacity(psi.len());
        for (f, (p, phi)) in psi.iter().zip(&current.state.phi).enumerate() {
            let phi_bar = p * phi;
            if !phi_bar.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("composed gradient of face {f}")).at_stage(Stage::Compose));
            }
            target.push(svd_replace(&phi_bar, &sigma[f]).map_err(|e| e.at_stage(Stage::SvdReplace))?);
        }
        let anchor = current.mesh.mean_centroid() + output.q;
        let unrefined = self
            .poisson
            .solve(&target, anchor)
            .map_err(|e| e.at_stage(Stage::Poisson))?;
        timings.poisson = clock.elapsed();

        let clock = Instant::now();
        let (positions, refinement) = match &self.refiner {
            Some(r) => {
                let report = r
                    .refine(&unrefined, &collider_next)
                    .map_err(|e| e.at_stage(Stage::Refine))?;
                (report.positions.clone(), Some(report))
            }
            None => (unrefined.clone(), None),
        };
        timings.refinement = clock.elapsed();

        self.push(positions.clone(), collider_next)
            .map_err(|e| e.at_stage(Stage::Poisson))?;
        Ok(FramePrediction {
            positions,
            unrefined,
            output,
            refinement,
            timings,
        })
    }

    /// Predicts `n_frames` frames. `colliders[0]` is the collider of the
    /// newest history frame; `colliders[k]` drives predicted frame `k`.
    pub fn rollout<P: Predictor + ?Sized>(
        &mut self,
        predictor: &P,
        colliders: &[Arc<ColliderFrame>],
        n_frames: usize,
    ) -> Result<Vec<FramePrediction>> {
        if n_frames == 0 {
            return Ok(Vec::new());
        }
        if colliders.len() < n_frames + 1 {
            return Err(Error::InvalidArgument(format!(
                "{n_frames} frames need {} collider frames, got {}",
                n_frames + 1,
                colliders.len()
            )));
        }
        let mut out = Vec::with_capacity(n_frames);
        for (k, c) in colliders[1..=n_frames].iter().enumerate() {
            let frame = self.predict_frame(predictor, c.clone())?;
            log::debug!("rollout frame {} done in {:?}", k + 1, frame.timings.total());
            out.push(frame);
        }
        Ok(out)
    }
}
