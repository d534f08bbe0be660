//! Event-driven hard-sphere dynamics on the torus.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::torus::{
    minimal_image, relative_contact, scatter_unchecked, torus_distance, wrap_position,
    ParticleState, CONTACT_TOL,
};
use crate::vector::Vector;

/// Normal relative speeds below this are reported as grazing.
pub const GRAZING_TOL: f64 = 1e-9;
/// Events closer than this in time are reported as simultaneous.
pub const SIMULTANEOUS_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("particles {i} and {j} overlap: distance {distance} < eps {eps}")]
    InitialOverlap {
        i: usize,
        j: usize,
        distance: f64,
        eps: f64,
    },
    #[error("more than {max_events} events within a window of {window} at t = {time}")]
    EventAccumulation {
        time: f64,
        max_events: usize,
        window: f64,
        partial: Box<EventLogAny>,
    },
    #[error("invalid time horizon {0}")]
    InvalidHorizon(f64),
}

/// Dimension-erased event log carried by errors.
#[derive(Debug, Clone)]
pub struct EventLogAny {
    pub events: usize,
    pub t_reached: f64,
    pub csv: String,
}

/// Particles on the torus with hard-core diameter `eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct Configuration<const D: usize> {
    pub particles: Vec<ParticleState<D>>,
    pub eps: f64,
}

impl<const D: usize> Configuration<D> {
    /// Builds a configuration after checking pairwise exclusion.
    pub fn new(particles: Vec<ParticleState<D>>, eps: f64) -> Result<Self, SimError> {
        let c = Self { particles, eps };
        if let Some((i, j, distance)) = c.first_overlap() {
            return Err(SimError::InitialOverlap { i, j, distance, eps });
        }
        Ok(c)
    }

    pub fn new_unchecked(particles: Vec<ParticleState<D>>, eps: f64) -> Self {
        Self { particles, eps }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        D
    }

    pub fn first_overlap(&self) -> Option<(usize, usize, f64)> {
        let p = &self.particles;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let d = torus_distance(&p[i].x, &p[j].x);
                if d < self.eps - CONTACT_TOL {
                    return Some((i, j, d));
                }
            }
        }
        None
    }

    pub fn min_pair_distance(&self) -> f64 {
        let p = &self.particles;
        let mut best = f64::INFINITY;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                best = best.min(torus_distance(&p[i].x, &p[j].x));
            }
        }
        best
    }

    pub fn total_momentum(&self) -> Vector<D> {
        self.particles
            .iter()
            .fold(Vector::zero(), |acc, z| acc + z.v)
    }

    /// Sum of `|v|^2` (twice the kinetic energy).
    pub fn total_energy(&self) -> f64 {
        self.particles.iter().map(|z| z.v.norm_sq()).sum()
    }

    pub fn reverse_velocities(&self) -> Self {
        Self {
            particles: self
                .particles
                .iter()
                .map(|z| ParticleState { x: z.x, v: -z.v })
                .collect(),
            eps: self.eps,
        }
    }

    /// One row `[x..., v...]` per particle.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.particles
            .iter()
            .map(|z| z.x.0.iter().chain(z.v.0.iter()).copied().collect())
            .collect()
    }

    pub fn from_rows(rows: &[Vec<f64>], eps: f64) -> Result<Self, String> {
        let mut particles = Vec::with_capacity(rows.len());
        for (k, row) in rows.iter().enumerate() {
            if row.len() != 2 * D {
                return Err(format!("row {k} has {} entries, expected {}", row.len(), 2 * D));
            }
            particles.push(ParticleState::new(
                Vector::<D>::from_slice(&row[..D]).unwrap(),
                Vector::<D>::from_slice(&row[D..]).unwrap(),
            ));
        }
        Ok(Self { particles, eps })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "dim": D,
            "eps": self.eps,
            "particles": self.to_rows(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PathologyFlag {
    GrazingWithinTolerance,
    SimultaneousEvents,
    EventAccumulation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollisionEvent<const D: usize> {
    pub time: f64,
    pub i: usize,
    pub j: usize,
    /// Unit vector from particle `i` toward particle `j` at contact.
    pub nu: Vector<D>,
    pub pre: (Vector<D>, Vector<D>),
    pub post: (Vector<D>, Vector<D>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventLog<const D: usize> {
    pub events: Vec<CollisionEvent<D>>,
    pub t_final: f64,
    pub flags: BTreeSet<PathologyFlag>,
}

impl<const D: usize> EventLog<D> {
    pub fn csv_header() -> String {
        let mut cols = vec!["time".to_string(), "i".into(), "j".into()];
        for name in ["nu", "vi_pre", "vj_pre", "vi_post", "vj_post"] {
            for k in 1..=D {
                cols.push(format!("{name}_{k}"));
            }
        }
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::csv_header())?;
        for e in &self.events {
            write!(out, "{:e},{},{}", e.time, e.i, e.j)?;
            for v in [&e.nu, &e.pre.0, &e.pre.1, &e.post.0, &e.post.1] {
                for c in v.0 {
                    write!(out, ",{c:e}")?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }

    fn erased(&self, t_reached: f64) -> EventLogAny {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        EventLogAny {
            events: self.events.len(),
            t_reached,
            csv: String::from_utf8(buf).expect("ascii csv"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborMode {
    /// Cell grid above 512 particles, all pairs otherwise.
    Auto,
    AllPairs,
    CellGrid,
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub neighbor: NeighborMode,
    /// Abort when more than this many events fall in one window.
    pub max_events_in_window: usize,
    pub window: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            neighbor: NeighborMode::Auto,
            max_events_in_window: 10_000,
            window: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Pending {
    Collision { i: usize, j: usize, ci: u64, cj: u64 },
    Crossing { i: usize, ci: u64, axis: usize, step: i64 },
}

#[derive(Clone, Copy, Debug)]
struct Scheduled {
    time: f64,
    what: Pending,
}

impl Scheduled {
    fn key(&self) -> (u8, usize, usize) {
        match self.what {
            // crossings first so neighbor lists are current when a contact fires
            Pending::Crossing { i, axis, .. } => (0, i, axis),
            Pending::Collision { i, j, .. } => (1, i, j),
        }
    }
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap and we want the earliest event on top
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.key().cmp(&self.key()))
    }
}

struct CellGrid<const D: usize> {
    per_axis: usize,
    cell_of: Vec<[usize; D]>,
    members: Vec<Vec<usize>>,
}

impl<const D: usize> CellGrid<D> {
    fn index(&self, c: &[usize; D]) -> usize {
        c.iter().fold(0, |acc, &k| acc * self.per_axis + k)
    }

    fn neighbors(&self, i: usize) -> Vec<usize> {
        let m = self.per_axis as i64;
        let base = self.cell_of[i];
        let mut out = Vec::new();
        let mut offset = [-1i64; D];
        loop {
            let mut c = [0usize; D];
            for a in 0..D {
                c[a] = (base[a] as i64 + offset[a]).rem_euclid(m) as usize;
            }
            out.extend(self.members[self.index(&c)].iter().copied().filter(|&j| j != i));
            let mut a = 0;
            loop {
                if a == D {
                    out.sort_unstable();
                    return out;
                }
                if offset[a] < 1 {
                    offset[a] += 1;
                    break;
                }
                offset[a] = -1;
                a += 1;
            }
        }
    }

    fn remove(&mut self, i: usize) {
        let idx = self.index(&self.cell_of[i]);
        self.members[idx].retain(|&j| j != i);
    }

    fn insert(&mut self, i: usize) {
        let idx = self.index(&self.cell_of[i]);
        self.members[idx].push(i);
    }
}

/// Stateful event-driven integrator for one trajectory up to a fixed horizon.
pub struct Simulator<const D: usize> {
    eps: f64,
    horizon: f64,
    now: f64,
    x: Vec<Vector<D>>,
    v: Vec<Vector<D>>,
    t_ref: Vec<f64>,
    counts: Vec<u64>,
    heap: BinaryHeap<Scheduled>,
    grid: Option<CellGrid<D>>,
    log: EventLog<D>,
    recent: VecDeque<f64>,
    options: SimOptions,
}

impl<const D: usize> Simulator<D> {
    pub fn new(config: &Configuration<D>, horizon: f64, options: SimOptions) -> Result<Self, SimError> {
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(SimError::InvalidHorizon(horizon));
        }
        let n = config.len();
        let mut sim = Self {
            eps: config.eps,
            horizon,
            now: 0.0,
            x: config.particles.iter().map(|z| wrap_position(z.x)).collect(),
            v: config.particles.iter().map(|z| z.v).collect(),
            t_ref: vec![0.0; n],
            counts: vec![0; n],
            heap: BinaryHeap::new(),
            grid: None,
            log: EventLog {
                events: Vec::new(),
                t_final: horizon,
                flags: BTreeSet::new(),
            },
            recent: VecDeque::new(),
            options,
        };
        let per_axis = (0.999 / config.eps).floor() as usize;
        let use_grid = match sim.options.neighbor {
            NeighborMode::AllPairs => false,
            NeighborMode::CellGrid => per_axis >= 3,
            NeighborMode::Auto => n > 512 && per_axis >= 3,
        };
        if use_grid {
            sim.build_grid(per_axis);
            for i in 0..n {
                for j in sim.grid.as_ref().unwrap().neighbors(i) {
                    if j > i {
                        sim.check_overlap(i, j)?;
                    }
                }
            }
        } else if let Some((i, j, distance)) = config.first_overlap() {
            return Err(SimError::InitialOverlap {
                i,
                j,
                distance,
                eps: config.eps,
            });
        }
        for i in 0..n {
            if sim.grid.is_some() {
                sim.schedule_crossing(i);
            }
            sim.schedule_partners(i, |j| j > i);
        }
        Ok(sim)
    }

    fn check_overlap(&self, i: usize, j: usize) -> Result<(), SimError> {
        let d = torus_distance(&self.x[i], &self.x[j]);
        if d < self.eps - CONTACT_TOL {
            return Err(SimError::InitialOverlap {
                i: i.min(j),
                j: i.max(j),
                distance: d,
                eps: self.eps,
            });
        }
        Ok(())
    }

    fn build_grid(&mut self, per_axis: usize) {
        let n = self.x.len();
        let mut cells = CellGrid {
            per_axis,
            cell_of: vec![[0; D]; n],
            members: vec![Vec::new(); per_axis.pow(D as u32)],
        };
        for i in 0..n {
            let mut c = [0usize; D];
            for a in 0..D {
                c[a] = ((self.x[i][a] * per_axis as f64) as usize).min(per_axis - 1);
            }
            cells.cell_of[i] = c;
            cells.insert(i);
        }
        self.grid = Some(cells);
    }

    #[inline]
    fn position(&self, i: usize, t: f64) -> Vector<D> {
        self.x[i] + self.v[i] * (t - self.t_ref[i])
    }

    fn sync(&mut self, i: usize, t: f64) {
        self.x[i] = wrap_position(self.position(i, t));
        self.t_ref[i] = t;
    }

    fn crossing_time(&self, i: usize) -> Option<(f64, usize, i64)> {
        let grid = self.grid.as_ref()?;
        let m = grid.per_axis as f64;
        let x = self.position(i, self.now);
        let cell = grid.cell_of[i];
        let mut best: Option<(f64, usize, i64)> = None;
        for a in 0..D {
            let va = self.v[i][a];
            if va == 0.0 {
                continue;
            }
            // the particle position may sit in the periodic copy one box away from its cell
            let lo = cell[a] as f64 / m;
            let mut xa = x[a] - (x[a] - lo + 0.5).floor();
            if xa - lo > 0.5 {
                xa -= 1.0;
            }
            let (dt, step) = if va > 0.0 {
                (((lo + 1.0 / m) - xa) / va, 1)
            } else {
                ((xa - lo) / -va, -1)
            };
            let t = self.now + dt.max(0.0);
            if best.is_none_or(|(bt, _, _)| t < bt) {
                best = Some((t, a, step));
            }
        }
        best
    }

    fn schedule_crossing(&mut self, i: usize) {
        if let Some((time, axis, step)) = self.crossing_time(i) {
            if time <= self.horizon {
                self.heap.push(Scheduled {
                    time,
                    what: Pending::Crossing {
                        i,
                        ci: self.counts[i],
                        axis,
                        step,
                    },
                });
            }
        }
    }

    fn predict(&self, i: usize, j: usize, limit: f64) -> Option<f64> {
        let xi = self.position(i, self.now);
        let xj = self.position(j, self.now);
        let r0 = minimal_image(&xj, &xi);
        relative_contact(&r0, &(self.v[j] - self.v[i]), self.eps, limit - self.now)
            .map(|c| self.now + c.time)
    }

    fn schedule_partners(&mut self, i: usize, keep: impl Fn(usize) -> bool) {
        let partners: Vec<usize> = match &self.grid {
            Some(g) => g.neighbors(i),
            None => (0..self.x.len()).filter(|&j| j != i).collect(),
        };
        let own_limit = self.crossing_limit(i);
        for j in partners {
            if !keep(j) {
                continue;
            }
            let limit = own_limit.min(self.crossing_limit(j));
            if let Some(time) = self.predict(i, j, limit) {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                self.heap.push(Scheduled {
                    time,
                    what: Pending::Collision {
                        i: a,
                        j: b,
                        ci: self.counts[a],
                        cj: self.counts[b],
                    },
                });
            }
        }
    }

    fn crossing_limit(&self, i: usize) -> f64 {
        match self.grid {
            Some(_) => self
                .crossing_time(i)
                .map_or(self.horizon, |(t, _, _)| t.min(self.horizon)),
            None => self.horizon,
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn log(&self) -> &EventLog<D> {
        &self.log
    }

    /// Processes the next collision at or before the horizon and returns it, or `None` if
    /// the remaining trajectory up to the horizon is collision free.
    pub fn step(&mut self) -> Result<Option<&CollisionEvent<D>>, SimError> {
        self.step_until(self.horizon)
    }

    /// Like [`Self::step`] but ignores collisions after `until`.
    pub fn step_until(&mut self, until: f64) -> Result<Option<&CollisionEvent<D>>, SimError> {
        while let Some(top) = self.heap.peek().copied() {
            if top.time > until {
                return Ok(None);
            }
            self.heap.pop();
            match top.what {
                Pending::Crossing { i, ci, axis, step } => {
                    if ci != self.counts[i] {
                        continue;
                    }
                    self.now = top.time;
                    self.counts[i] += 1;
                    let grid = self.grid.as_mut().unwrap();
                    grid.remove(i);
                    let m = grid.per_axis as i64;
                    grid.cell_of[i][axis] = (grid.cell_of[i][axis] as i64 + step).rem_euclid(m) as usize;
                    grid.insert(i);
                    self.reschedule(&[i]);
                }
                Pending::Collision { i, j, ci, cj } => {
                    if ci != self.counts[i] || cj != self.counts[j] {
                        continue;
                    }
                    self.collide(top.time, i, j)?;
                    return Ok(self.log.events.last());
                }
            }
        }
        Ok(None)
    }

    fn reschedule(&mut self, moved: &[usize]) {
        for &i in moved {
            self.sync(i, self.now);
        }
        for (k, &i) in moved.iter().enumerate() {
            if self.grid.is_some() {
                self.schedule_crossing(i);
            }
            // pairs inside `moved` are scheduled once, from the earlier entry
            let earlier: Vec<usize> = moved[..k].to_vec();
            self.schedule_partners(i, |j| !earlier.contains(&j));
        }
    }

    fn collide(&mut self, time: f64, i: usize, j: usize) -> Result<(), SimError> {
        if let Some(prev) = self.log.events.last() {
            if time - prev.time < SIMULTANEOUS_TOL {
                self.log.flags.insert(PathologyFlag::SimultaneousEvents);
            }
        }
        self.recent.push_back(time);
        while self
            .recent
            .front()
            .is_some_and(|&t0| time - t0 > self.options.window)
        {
            self.recent.pop_front();
        }
        if self.recent.len() > self.options.max_events_in_window {
            self.log.flags.insert(PathologyFlag::EventAccumulation);
            return Err(SimError::EventAccumulation {
                time,
                max_events: self.options.max_events_in_window,
                window: self.options.window,
                partial: Box::new(self.log.erased(time)),
            });
        }
        self.now = time;
        self.sync(i, time);
        self.sync(j, time);
        let nu = minimal_image(&self.x[j], &self.x[i])
            .normalized()
            .unwrap_or_else(|| Vector::unit(0));
        let pre = (self.v[i], self.v[j]);
        if (pre.0 - pre.1).dot(&nu).abs() < GRAZING_TOL {
            self.log.flags.insert(PathologyFlag::GrazingWithinTolerance);
        }
        let post = scatter_unchecked(&pre.0, &pre.1, &nu);
        self.v[i] = post.0;
        self.v[j] = post.1;
        self.counts[i] += 1;
        self.counts[j] += 1;
        self.log.events.push(CollisionEvent {
            time,
            i,
            j,
            nu,
            pre,
            post,
        });
        self.reschedule(&[i, j]);
        Ok(())
    }

    /// Processes every collision up to `t` and returns the configuration at time `t`.
    pub fn advance_to(&mut self, t: f64) -> Result<Configuration<D>, SimError> {
        let t = t.min(self.horizon);
        while self.step_until(t)?.is_some() {}
        Ok(self.snapshot(t))
    }

    /// Configuration at time `t`, assuming no unprocessed collision precedes `t`.
    pub fn snapshot(&self, t: f64) -> Configuration<D> {
        Configuration {
            particles: (0..self.x.len())
                .map(|i| ParticleState {
                    x: wrap_position(self.position(i, t)),
                    v: self.v[i],
                })
                .collect(),
            eps: self.eps,
        }
    }

    pub fn finish(mut self) -> Result<(Configuration<D>, EventLog<D>), SimError> {
        let final_config = self.advance_to(self.horizon)?;
        Ok((final_config, self.log))
    }
}

/// Hard-sphere flow of `config` over `[0, t_final]`.
pub fn simulate<const D: usize>(
    config: &Configuration<D>,
    t_final: f64,
) -> Result<(Configuration<D>, EventLog<D>), SimError> {
    simulate_with(config, t_final, SimOptions::default())
}

pub fn simulate_with<const D: usize>(
    config: &Configuration<D>,
    t_final: f64,
    options: SimOptions,
) -> Result<(Configuration<D>, EventLog<D>), SimError> {
    Simulator::new(config, t_final, options)?.finish()
}

pub fn reverse_velocities<const D: usize>(config: &Configuration<D>) -> Configuration<D> {
    config.reverse_velocities()
}

/// Hard-sphere flow run backward in time by `t`.
pub fn flow_backward<const D: usize>(
    config: &Configuration<D>,
    t: f64,
) -> Result<Configuration<D>, SimError> {
    let (end, _) = simulate(&config.reverse_velocities(), t)?;
    Ok(end.reverse_velocities())
}

/// Backward flow that also reports how many collisions happened on the way.
pub fn flow_backward_counting<const D: usize>(
    config: &Configuration<D>,
    t: f64,
) -> Result<(Configuration<D>, usize), SimError> {
    let (end, log) = simulate(&config.reverse_velocities(), t)?;
    Ok((end.reverse_velocities(), log.events.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_gas(n: usize, eps: f64, seed: u64) -> Configuration<2> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut particles: Vec<ParticleState<2>> = Vec::new();
        while particles.len() < n {
            let x = Vector([rng.random::<f64>(), rng.random::<f64>()]);
            if particles.iter().all(|p| torus_distance(&p.x, &x) > eps) {
                let v = Vector([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                particles.push(ParticleState { x, v });
            }
        }
        Configuration::new(particles, eps).unwrap()
    }

    #[test]
    fn single_particle_free_flight() {
        let c = Configuration::new(vec![ParticleState::new([0.5, 0.5], [0.3, -0.7])], 0.1).unwrap();
        let (end, log) = simulate(&c, 1.0).unwrap();
        assert!(log.events.is_empty());
        let expected = crate::torus::free_flight(&c.particles[0], 1.0);
        assert!(torus_distance(&end.particles[0].x, &expected.x) < 1e-12);
    }

    #[test]
    fn head_on_pair() {
        let c = Configuration::new(
            vec![
                ParticleState::new([0.25, 0.5], [1.0, 0.0]),
                ParticleState::new([0.75, 0.5], [-1.0, 0.0]),
            ],
            0.1,
        )
        .unwrap();
        let (end, log) = simulate(&c, 0.5).unwrap();
        assert_eq!(log.events.len(), 1);
        let e = &log.events[0];
        assert!((e.time - 0.2).abs() < 1e-12);
        assert_eq!(e.post, (Vector([-1.0, 0.0]), Vector([1.0, 0.0])));
        assert_eq!(end.particles[0].v, Vector([-1.0, 0.0]));

        // backward past the collision restores the pre-collision state
        let back = flow_backward(&end, 0.5).unwrap();
        for (a, b) in back.particles.iter().zip(&c.particles) {
            assert!(torus_distance(&a.x, &b.x) < 1e-12);
            assert!((a.v - b.v).norm() < 1e-12);
        }
    }

    #[test]
    fn overlap_rejected() {
        let r = Configuration::new(
            vec![
                ParticleState::new([0.5, 0.5], [0.0, 0.0]),
                ParticleState::new([0.55, 0.5], [0.0, 0.0]),
            ],
            0.1,
        );
        assert!(matches!(r, Err(SimError::InitialOverlap { .. })));
    }

    #[test]
    fn conservation_and_exclusion_at_probes() {
        let c = random_gas(20, 0.05, 1);
        let p0 = c.total_momentum();
        let e0 = c.total_energy();
        let mut sim = Simulator::new(&c, 1.0, SimOptions::default()).unwrap();
        for k in 1..=100 {
            let snap = sim.advance_to(k as f64 / 100.0).unwrap();
            assert!(snap.min_pair_distance() >= 0.05 - 1e-9);
        }
        let (end, log) = sim.finish().unwrap();
        assert!(!log.events.is_empty());
        assert!((end.total_momentum() - p0).norm() < 1e-10);
        assert!((end.total_energy() - e0).abs() < 1e-10 * e0);
        assert!(log.events.windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn reversal_round_trip() {
        let c = random_gas(20, 0.05, 2);
        let (mid, _) = simulate(&c, 1.0).unwrap();
        let (back, _) = simulate(&mid.reverse_velocities(), 1.0).unwrap();
        let back = back.reverse_velocities();
        for (a, b) in back.particles.iter().zip(&c.particles) {
            assert!(torus_distance(&a.x, &b.x) < 1e-6);
            assert!((a.v - b.v).norm() < 1e-6);
        }
    }

    #[test]
    fn cell_grid_matches_all_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 150;
        let eps = 0.03;
        let mut particles: Vec<ParticleState<2>> = Vec::new();
        while particles.len() < n {
            let x = Vector([rng.random::<f64>(), rng.random::<f64>()]);
            if particles.iter().all(|p| torus_distance(&p.x, &x) > eps) {
                let v = Vector([rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
                particles.push(ParticleState { x, v });
            }
        }
        let c = Configuration::new(particles, eps).unwrap();
        let all = simulate_with(
            &c,
            0.2,
            SimOptions {
                neighbor: NeighborMode::AllPairs,
                ..Default::default()
            },
        )
        .unwrap();
        let grid = simulate_with(
            &c,
            0.2,
            SimOptions {
                neighbor: NeighborMode::CellGrid,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(all.1.events.len() > 50);
        assert_eq!(all.1.events.len(), grid.1.events.len());
        for (a, b) in all.1.events.iter().zip(&grid.1.events) {
            assert_eq!((a.i, a.j), (b.i, b.j));
            assert!((a.time - b.time).abs() < 1e-9);
        }
        for (a, b) in all.0.particles.iter().zip(&grid.0.particles) {
            assert!(torus_distance(&a.x, &b.x) < 1e-8);
        }
    }

    #[test]
    fn accumulation_aborts_with_partial_log() {
        let c = random_gas(20, 0.05, 3);
        let opts = SimOptions {
            max_events_in_window: 2,
            window: 10.0,
            ..Default::default()
        };
        match simulate_with(&c, 5.0, opts) {
            Err(SimError::EventAccumulation { partial, .. }) => assert_eq!(partial.events, 2),
            other => panic!("expected accumulation error, got {other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let c = Configuration::new(
            vec![
                ParticleState::new([0.25, 0.5], [1.0, 0.0]),
                ParticleState::new([0.75, 0.5], [-1.0, 0.0]),
            ],
            0.1,
        )
        .unwrap();
        let (_, log) = simulate(&c, 0.5).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "time,i,j,nu_1,nu_2,vi_pre_1,vi_pre_2,vj_pre_1,vj_pre_2,vi_post_1,vi_post_2,vj_post_1,vj_post_2"
        );
        assert_eq!(lines.next().unwrap().split(',').count(), 13);
    }

    #[test]
    fn rows_round_trip() {
        let c = random_gas(5, 0.05, 9);
        let back = Configuration::<2>::from_rows(&c.to_rows(), c.eps).unwrap();
        assert_eq!(back, c);
    }
}
