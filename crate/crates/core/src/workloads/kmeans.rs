//! Lloyd's k-means on seeded 2-D blobs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    DataObjectRegistry, Kernel, KernelSpec, Layout, RegionInfo, RegionKind, Runner, Step, Stop,
};
use crate::simcache::Addr;

pub(crate) const CLUSTERS: usize = 4;
const BLOCK: usize = 16;
const OBJECTIVE_BAND: f64 = 0.01;

pub(crate) struct KMeans {
    n: usize,
    tol: f64,
    coords: Vec<[f64; 2]>,
    seeds: Vec<usize>,
    points: Addr,
    centroids: Addr,
    membership: Addr,
    sums: Addr,
    stats: Addr,
    registry: DataObjectRegistry,
    regions: Vec<RegionInfo>,
    scratch: Addr,
}

impl KMeans {
    pub(crate) fn new(spec: &KernelSpec) -> Self {
        let n = spec.size;
        let mut layout = Layout::new();
        let points = layout.alloc("points", (n * 16) as u64, true);
        let centroids = layout.alloc("centroids", (CLUSTERS * 16) as u64, false);
        let membership = layout.alloc("membership", (n * 8) as u64, false);
        let sums = layout.alloc("sums", (CLUSTERS * 24) as u64, false);
        let stats = layout.alloc("stats", 8, false);
        let (registry, scratch) = layout.finish();

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let centers: Vec<[f64; 2]> = (0..CLUSTERS)
            .map(|_| [rng.gen_range(0.0..8.0), rng.gen_range(0.0..8.0)])
            .collect();
        let coords = (0..n)
            .map(|i| {
                let c = centers[i % CLUSTERS];
                [
                    c[0] + rng.gen_range(-1.5..1.5),
                    c[1] + rng.gen_range(-1.5..1.5),
                ]
            })
            .collect();
        let mut seeds = Vec::with_capacity(CLUSTERS);
        while seeds.len() < CLUSTERS {
            let s = rng.gen_range(0..n);
            if !seeds.contains(&s) {
                seeds.push(s);
            }
        }
        let regions = [
            ("assign", RegionKind::Loop),
            ("reset", RegionKind::Straight),
            ("accumulate", RegionKind::Loop),
            ("update", RegionKind::Straight),
        ]
        .into_iter()
        .enumerate()
        .map(|(id, (name, kind))| RegionInfo {
            id,
            name: name.into(),
            kind,
        })
        .collect();
        Self {
            n,
            tol: spec.tolerance,
            coords,
            seeds,
            points,
            centroids,
            membership,
            sums,
            stats,
            registry,
            regions,
            scratch,
        }
    }

    fn point(&self, rt: &mut Runner, i: usize) -> Result<[f64; 2], Stop> {
        let base = self.points + (i * 16) as Addr;
        Ok([rt.rd(base)?, rt.rd(base + 8)?])
    }

    fn centroid(&self, rt: &mut Runner, k: usize) -> Result<[f64; 2], Stop> {
        let base = self.centroids + (k * 16) as Addr;
        Ok([rt.rd(base)?, rt.rd(base + 8)?])
    }

    /// Nearest centroid and squared distance.
    fn nearest(&self, rt: &mut Runner, p: [f64; 2]) -> Result<(usize, f64), Stop> {
        let mut best = (0, f64::INFINITY);
        for k in 0..CLUSTERS {
            let c = self.centroid(rt, k)?;
            let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok(best)
    }
}

impl Kernel for KMeans {
    fn registry(&self) -> &DataObjectRegistry {
        &self.registry
    }

    fn regions(&self) -> &[RegionInfo] {
        &self.regions
    }

    fn scratch_base(&self) -> Addr {
        self.scratch
    }

    fn init(&self, rt: &mut Runner) -> Result<(), Stop> {
        for (i, p) in self.coords.iter().enumerate() {
            let base = self.points + (i * 16) as Addr;
            rt.wr(base, p[0])?;
            rt.wr(base + 8, p[1])?;
            rt.wr_u64(self.membership + (i * 8) as Addr, CLUSTERS as u64)?;
        }
        for (k, &s) in self.seeds.iter().enumerate() {
            let base = self.centroids + (k * 16) as Addr;
            rt.wr(base, self.coords[s][0])?;
            rt.wr(base + 8, self.coords[s][1])?;
        }
        for k in 0..CLUSTERS * 3 {
            rt.wr(self.sums + (k * 8) as Addr, 0.0)?;
        }
        rt.wr(self.stats, f64::INFINITY)?;
        rt.wr_u64(self.registry.iterator_addr, 1)
    }

    fn iterate(&self, rt: &mut Runner) -> Result<Step, Stop> {
        let n = self.n;
        let mut changes = 0usize;
        let mut objective = 0.0;

        rt.enter(0);
        for block in (0..n).step_by(BLOCK) {
            for i in block..(block + BLOCK).min(n) {
                let p = self.point(rt, i)?;
                let (k, d) = self.nearest(rt, p)?;
                objective += d;
                let slot = self.membership + (i * 8) as Addr;
                if rt.rd_u64(slot)? != k as u64 {
                    changes += 1;
                }
                rt.wr_u64(slot, k as u64)?;
            }
            rt.inner_end()?;
        }
        rt.exit()?;

        rt.enter(1);
        for k in 0..CLUSTERS * 3 {
            rt.wr(self.sums + (k * 8) as Addr, 0.0)?;
        }
        rt.exit()?;

        rt.enter(2);
        for block in (0..n).step_by(BLOCK) {
            for i in block..(block + BLOCK).min(n) {
                let k = rt.rd_u64(self.membership + (i * 8) as Addr)? as usize;
                if k >= CLUSTERS {
                    return Err(Stop::Fault(format!("point {i} assigned to cluster {k}")));
                }
                let p = self.point(rt, i)?;
                let s = self.sums + (k * 24) as Addr;
                let sx = rt.rd(s)?;
                rt.wr(s, sx + p[0])?;
                let sy = rt.rd(s + 8)?;
                rt.wr(s + 8, sy + p[1])?;
                let c = rt.rd(s + 16)?;
                rt.wr(s + 16, c + 1.0)?;
            }
            rt.inner_end()?;
        }
        rt.exit()?;

        rt.enter(3);
        for k in 0..CLUSTERS {
            let s = self.sums + (k * 24) as Addr;
            let count = rt.rd(s + 16)?;
            if count > 0.0 {
                let cx = rt.rd(s)? / count;
                let cy = rt.rd(s + 8)? / count;
                let base = self.centroids + (k * 16) as Addr;
                rt.wr(base, cx)?;
                rt.wr(base + 8, cy)?;
            }
        }
        let previous = rt.rd(self.stats)?;
        rt.wr(self.stats, objective)?;
        rt.exit()?;

        let settled = (previous - objective).abs() <= self.tol * objective;
        Ok(Step {
            converged: changes == 0 || settled,
            metric: objective,
            diverged: !objective.is_finite(),
        })
    }

    /// Recomputes the objective from the final centroids and compares it with
    /// the reference objective, when one is given.
    fn verify(&self, rt: &mut Runner, reference: Option<f64>) -> Result<(bool, f64), Stop> {
        let mut objective = 0.0;
        for i in 0..self.n {
            let p = self.point(rt, i)?;
            objective += self.nearest(rt, p)?.1;
        }
        let passed = match reference {
            Some(g) => (objective - g).abs() <= OBJECTIVE_BAND * g,
            None => objective.is_finite(),
        };
        Ok((passed, objective))
    }
}
