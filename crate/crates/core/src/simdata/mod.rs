//! Mass-spring cloth simulator that produces ground-truth sequences.
//!
//! Edge springs resist stretching, springs across each interior edge (between
//! the two opposite vertices) resist bending. Integration is symplectic Euler
//! with linear drag; after every substep vertices inside the analytic body
//! (plus a contact offset) are projected back out and lose their approaching
//! normal velocity, with Coulomb-style friction on the tangential part.
//! Everything runs on one thread in a fixed order, so a configuration always
//! produces the same bits.

pub mod body;
pub mod corpus;
pub mod garment;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::io::Sequence;

pub use body::{BodyShape, ColliderSpec, Motion, Pose};
pub use corpus::{cape_on_pendulum, default_corpus, panel_skirt_on_sphere, skirt_on_sphere, make_corpus, CorpusEntry, CorpusManifest, CorpusSource};
pub use garment::{Garment, GarmentShape, GarmentSpec, PinMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub frame_rate: f64,
    pub substeps: usize,
    /// N/m
    pub stretch_stiffness: f64,
    /// N/m
    pub bend_stiffness: f64,
    /// Damping along each spring, N·s/m.
    pub spring_damping: f64,
    /// Linear drag, 1/s.
    pub drag: f64,
    pub gravity: [f64; 3],
    pub friction: f64,
    /// kg/m²
    pub density: f64,
    /// Distance kept between cloth vertices and the analytic body, m.
    pub contact_offset: f64,
    /// Any vertex faster than this (m/s) aborts the run.
    pub max_speed: f64,
    /// Simulated time before the first recorded frame, with the body held
    /// at its initial pose.
    pub settle_time: f64,
    /// Standard deviation of a random initial velocity, m/s.
    pub initial_jitter: f64,
    pub seed: u64,
    pub collider: ColliderSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            frame_rate: 30.0,
            substeps: 80,
            stretch_stiffness: 60.0,
            bend_stiffness: 0.5,
            spring_damping: 0.01,
            drag: 0.8,
            gravity: [0.0, 0.0, -9.81],
            friction: 0.3,
            density: 0.15,
            contact_offset: 0.004,
            max_speed: 25.0,
            settle_time: 0.5,
            initial_jitter: 0.0,
            seed: 0,
            collider: ColliderSpec {
                shape: BodyShape::Sphere {
                    radius: 0.25,
                    subdivisions: 2,
                },
                center: [0.0; 3],
                motion: Motion::Static,
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Spring {
    a: usize,
    b: usize,
    rest: f64,
    k: f64,
}

/// Prepared simulation state for one garment.
struct Cloth {
    springs: Vec<Spring>,
    inv_mass: Vec<f64>,
    mass: Vec<f64>,
    pinned: Vec<usize>,
    /// Pin targets in the body frame (attached) or world frame (fixed).
    pin_targets: Vec<Vec3>,
}

fn build_cloth(garment: &Garment, cfg: &SimConfig) -> Result<Cloth> {
    let mesh = &garment.rest;
    let v = mesh.vertices();
    let topo = mesh.topology();
    let mut springs: Vec<Spring> = topo
        .edges()
        .iter()
        .map(|&[a, b]| Spring {
            a,
            b,
            rest: (v[a] - v[b]).norm(),
            k: cfg.stretch_stiffness,
        })
        .collect();
    // bending: opposite vertices of the two faces sharing an edge
    let mut by_edge: std::collections::BTreeMap<[usize; 2], Vec<usize>> = Default::default();
    for tri in mesh.faces() {
        for k in 0..3 {
            let (a, b, c) = (tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]);
            by_edge.entry([a.min(b), a.max(b)]).or_default().push(c);
        }
    }
    for opp in by_edge.values() {
        if let [c, d] = opp[..] {
            springs.push(Spring {
                a: c.min(d),
                b: c.max(d),
                rest: (v[c] - v[d]).norm(),
                k: cfg.bend_stiffness,
            });
        }
    }
    let mut mass = vec![0.0; mesh.vertex_count()];
    for (tri, area) in mesh.faces().iter().zip(mesh.areas()) {
        for &i in tri {
            mass[i] += cfg.density * area / 3.0;
        }
    }
    let pinned = match garment.pins {
        PinMode::None => Vec::new(),
        PinMode::TopFixed | PinMode::TopAttached => garment.top_row.clone(),
    };
    let pose0 = cfg.collider.pose(0.0);
    let pin_targets = pinned
        .iter()
        .map(|&i| match garment.pins {
            PinMode::TopAttached => pose0.inverse_apply(&v[i]),
            _ => v[i],
        })
        .collect();
    let mut inv_mass: Vec<f64> = mass.iter().map(|m| 1.0 / m).collect();
    for &i in &pinned {
        inv_mass[i] = 0.0;
    }
    Ok(Cloth {
        springs,
        inv_mass,
        mass,
        pinned,
        pin_targets,
    })
}

impl SimConfig {
    pub fn substep(&self) -> f64 {
        1.0 / (self.frame_rate * self.substeps as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.frame_rate > 0.0) || self.substeps == 0 {
            return bad("frame rate and substeps must be positive");
        }
        if !(self.stretch_stiffness > 0.0) || !(self.bend_stiffness > 0.0) {
            return bad("spring stiffnesses must be positive");
        }
        if !(self.density > 0.0) || self.drag < 0.0 || self.spring_damping < 0.0 || self.friction < 0.0 {
            return bad("density must be positive; drag, damping and friction non-negative");
        }
        if self.contact_offset < 0.0 || !(self.max_speed > 0.0) || self.settle_time < 0.0 || self.initial_jitter < 0.0 {
            return bad("contact offset, settle time and jitter must be non-negative, max speed positive");
        }
        self.collider.validate()
    }

    /// Explicit-integration stability bound: `dt · sqrt(max_i Σk / m_i) < 1`
    /// for springs and `dt · (drag + Σc / m_i) < 1` for damping.
    fn check_stability(&self, cloth: &Cloth) -> Result<()> {
        let n = cloth.mass.len();
        let mut k_sum = vec![0.0; n];
        let mut c_sum = vec![0.0; n];
        for s in &cloth.springs {
            for i in [s.a, s.b] {
                k_sum[i] += s.k;
                c_sum[i] += self.spring_damping;
            }
        }
        let dt = self.substep();
        let (mut omega, mut damp): (f64, f64) = (0.0, 0.0);
        for i in 0..n {
            omega = omega.max((k_sum[i] / cloth.mass[i]).sqrt());
            damp = damp.max(self.drag + c_sum[i] / cloth.mass[i]);
        }
        if dt * omega >= 1.0 || dt * damp >= 1.0 {
            let needed = ((omega.max(damp) / self.frame_rate).ceil() as usize).max(self.substeps + 1);
            return Err(Error::Config(format!(
                "substep {dt:.3e} s is unstable (stiffest vertex ω = {omega:.1} rad/s, damping {damp:.1} 1/s); use at least {needed} substeps per frame"
            )));
        }
        Ok(())
    }
}

struct Integrator<'a> {
    cfg: &'a SimConfig,
    cloth: &'a Cloth,
    attached: bool,
    x: Vec<Vec3>,
    v: Vec<Vec3>,
    force: Vec<Vec3>,
}

impl Integrator<'_> {
    fn step(&mut self, t_body: f64, dt: f64) {
        let g = Vec3::from(self.cfg.gravity);
        let cloth = self.cloth;
        for (f, m) in self.force.iter_mut().zip(&cloth.mass) {
            *f = g * *m;
        }
        for s in &cloth.springs {
            let d = self.x[s.b] - self.x[s.a];
            let len = d.norm();
            if len <= 0.0 {
                continue;
            }
            let dir = d / len;
            let rel_v = (self.v[s.b] - self.v[s.a]).dot(&dir);
            let f = dir * (s.k * (len - s.rest) + self.cfg.spring_damping * rel_v);
            self.force[s.a] += f;
            self.force[s.b] -= f;
        }
        for i in 0..self.x.len() {
            let a = self.force[i] * cloth.inv_mass[i] - self.v[i] * self.cfg.drag;
            self.v[i] += a * dt;
            self.x[i] += self.v[i] * dt;
        }
        let pose = self.cfg.collider.pose(t_body);
        for (k, &i) in cloth.pinned.iter().enumerate() {
            let target = if self.attached {
                pose.apply(&cloth.pin_targets[k])
            } else {
                cloth.pin_targets[k]
            };
            self.v[i] = (target - self.x[i]) / dt;
            self.x[i] = target;
        }
        let spec = &self.cfg.collider;
        for i in 0..self.x.len() {
            if cloth.inv_mass[i] == 0.0 {
                continue;
            }
            let (d, n) = spec.sdf(&self.x[i], t_body);
            let gap = d - self.cfg.contact_offset;
            if gap >= 0.0 {
                continue;
            }
            self.x[i] -= n * gap;
            let vb = spec.point_velocity(&self.x[i], t_body);
            let mut rel = self.v[i] - vb;
            let vn = rel.dot(&n);
            if vn < 0.0 {
                rel -= n * vn;
                let vt = rel.norm();
                if vt > 0.0 {
                    rel *= (1.0 - self.cfg.friction * (-vn) / vt).max(0.0);
                }
            }
            self.v[i] = vb + rel;
        }
    }

    fn max_speed(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for v in &self.v {
            let s = v.norm();
            if !s.is_finite() {
                return f64::INFINITY;
            }
            worst = worst.max(s);
        }
        worst
    }
}

/// Simulates `n_frames` frames (the first is the settled initial state).
pub fn simulate(name: &str, garment: &Garment, cfg: &SimConfig, n_frames: usize) -> Result<Sequence> {
    cfg.validate()?;
    let cloth = build_cloth(garment, cfg)?;
    cfg.check_stability(&cloth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nv = garment.rest.vertex_count();
    let mut v = vec![Vec3::zeros(); nv];
    if cfg.initial_jitter > 0.0 {
        let normal = rand_distr::Normal::new(0.0, cfg.initial_jitter).map_err(|e| Error::Config(e.to_string()))?;
        for (i, vi) in v.iter_mut().enumerate() {
            if cloth.inv_mass[i] > 0.0 {
                *vi = Vec3::new(rng.sample(normal), rng.sample(normal), rng.sample(normal));
            }
        }
    }
    let mut sim = Integrator {
        cfg,
        cloth: &cloth,
        attached: garment.pins == PinMode::TopAttached,
        x: garment.rest.vertices().to_vec(),
        v,
        force: vec![Vec3::zeros(); nv],
    };
    let dt = cfg.substep();
    let settle_steps = (cfg.settle_time / dt).round() as usize;
    for _ in 0..settle_steps {
        sim.step(0.0, dt);
        let speed = sim.max_speed();
        if !(speed <= cfg.max_speed) {
            return Err(Error::Unstable { frame: 0, speed });
        }
    }
    let body_local = cfg.collider.shape.tessellate();
    let mut garment_frames = Vec::with_capacity(n_frames);
    let mut collider_frames = Vec::with_capacity(n_frames);
    for frame in 0..n_frames {
        if frame > 0 {
            let t0 = (frame - 1) as f64 / cfg.frame_rate;
            for s in 0..cfg.substeps {
                sim.step(t0 + (s + 1) as f64 * dt, dt);
            }
            let speed = sim.max_speed();
            if !(speed <= cfg.max_speed) {
                return Err(Error::Unstable { frame, speed });
            }
        }
        let t = frame as f64 / cfg.frame_rate;
        garment_frames.push(sim.x.clone());
        collider_frames.push(cfg.collider.world_vertices(&body_local, t));
    }
    Ok(Sequence {
        name: name.to_string(),
        frame_rate: cfg.frame_rate,
        garment_rest: garment.rest.clone(),
        garment_frames,
        collider_rest: body_local,
        collider_frames,
    })
}

/// Deepest penetration of any garment vertex into the analytic body over the
/// whole sequence (0 when none), m.
pub fn analytic_penetration(seq: &Sequence, collider: &ColliderSpec) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, frame) in seq.garment_frames.iter().enumerate() {
        let t = k as f64 / seq.frame_rate;
        for p in frame {
            worst = worst.max(-collider.sdf(p, t).0);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TriMesh;

    fn momentum(mesh: &TriMesh, density: f64, prev: &[Vec3], next: &[Vec3], dt: f64) -> Vec3 {
        let mut mass = vec![0.0; mesh.vertex_count()];
        for (tri, area) in mesh.faces().iter().zip(mesh.areas()) {
            for &i in tri {
                mass[i] += density * area / 3.0;
            }
        }
        prev.iter()
            .zip(next)
            .zip(&mass)
            .map(|((a, b), m)| (b - a) * (*m / dt))
            .sum()
    }

    fn sheet(pins: PinMode) -> Garment {
        GarmentSpec {
            shape: GarmentShape::Sheet {
                width: 0.4,
                height: 0.4,
                nx: 10,
                nz: 10,
                origin: [0.0, 0.0, 1.0],
            },
            pins,
        }
        .build()
        .unwrap()
    }

    fn far_collider() -> ColliderSpec {
        ColliderSpec {
            shape: BodyShape::Sphere {
                radius: 0.1,
                subdivisions: 1,
            },
            center: [5.0, 5.0, 5.0],
            motion: Motion::Static,
        }
    }

    #[test]
    fn rest_state_without_gravity_is_still() {
        let cfg = SimConfig {
            gravity: [0.0; 3],
            collider: far_collider(),
            ..SimConfig::default()
        };
        let g = sheet(PinMode::None);
        let seq = simulate("still", &g, &cfg, 10).unwrap();
        for f in &seq.garment_frames {
            for (a, b) in f.iter().zip(g.rest.vertices()) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn momentum_decays_without_gravity() {
        let cfg = SimConfig {
            gravity: [0.0; 3],
            collider: far_collider(),
            initial_jitter: 0.05,
            settle_time: 0.0,
            seed: 9,
            ..SimConfig::default()
        };
        let g = sheet(PinMode::None);
        let seq = simulate("drift", &g, &cfg, 30).unwrap();
        let dt = 1.0 / cfg.frame_rate;
        let p: Vec<f64> = seq
            .garment_frames
            .windows(2)
            .map(|w| momentum(&g.rest, cfg.density, &w[0], &w[1], dt).norm())
            .collect();
        assert!(p[0] > 0.0);
        for w in p.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn pinned_sheet_converges() {
        let cfg = SimConfig {
            collider: far_collider(),
            drag: 6.0,
            settle_time: 0.0,
            ..SimConfig::default()
        };
        let seq = simulate("hang", &sheet(PinMode::TopFixed), &cfg, 501).unwrap();
        let last = &seq.garment_frames[500];
        let prev = &seq.garment_frames[499];
        let moved = last.iter().zip(prev).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(moved < 1e-5, "{moved}");
    }

    #[test]
    fn cloth_dropped_on_sphere_stays_outside() {
        let cfg = SimConfig {
            settle_time: 0.0,
            collider: ColliderSpec {
                shape: BodyShape::Sphere {
                    radius: 0.15,
                    subdivisions: 2,
                },
                center: [0.0, 0.0, 0.7],
                motion: Motion::Static,
            },
            ..SimConfig::default()
        };
        let flat = GarmentSpec {
            shape: GarmentShape::Sheet {
                width: 0.5,
                height: 0.5,
                nx: 12,
                nz: 12,
                origin: [0.0, 0.0, 0.0],
            },
            pins: PinMode::None,
        }
        .build()
        .unwrap();
        // lay the sheet horizontally above the sphere
        let verts = flat
            .rest
            .vertices()
            .iter()
            .map(|p| Vec3::new(p.x, p.z + 0.25, 0.9))
            .collect();
        let garment = Garment {
            rest: flat.rest.with_positions(verts).unwrap(),
            top_row: Vec::new(),
            pins: PinMode::None,
        };
        let seq = simulate("drop", &garment, &cfg, 40).unwrap();
        let depth = analytic_penetration(&seq, &cfg.collider);
        assert!(depth <= 1e-9, "{depth}");
        // it actually reached the sphere
        let lowest = seq.garment_frames[39].iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
        assert!(lowest < 0.85);
    }

    #[test]
    fn unstable_configuration_is_rejected() {
        let cfg = SimConfig {
            substeps: 1,
            collider: far_collider(),
            ..SimConfig::default()
        };
        let err = simulate("bad", &sheet(PinMode::None), &cfg, 3).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("substeps")), "{err}");
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let cfg = SimConfig {
            initial_jitter: 0.01,
            seed: 4,
            collider: far_collider(),
            settle_time: 0.1,
            ..SimConfig::default()
        };
        let g = sheet(PinMode::TopFixed);
        let a = simulate("a", &g, &cfg, 12).unwrap();
        let b = simulate("a", &g, &cfg, 12).unwrap();
        assert_eq!(a.garment_frames, b.garment_frames);
        assert_eq!(a.collider_frames, b.collider_frames);
    }
}
