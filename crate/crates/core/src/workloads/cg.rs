//! Conjugate gradient on the 5-point Laplacian of an `m x m` grid
//! (`n = m * m` unknowns, Dirichlet boundary, matrix applied as a stencil).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    DataObjectRegistry, Kernel, KernelSpec, Layout, RegionInfo, RegionKind, Runner, Step, Stop,
};
use crate::simcache::Addr;

const DIVERGED: f64 = 1e6;
// Offsets inside the `scalars` object.
const RHO: Addr = 0;
const ALPHA: Addr = 8;
const BETA: Addr = 16;

pub(crate) struct CgSolve {
    m: usize,
    tol: f64,
    rhs: Vec<f64>,
    rhs_norm: f64,
    x: Addr,
    r: Addr,
    p: Addr,
    q: Addr,
    b: Addr,
    scalars: Addr,
    registry: DataObjectRegistry,
    regions: Vec<RegionInfo>,
    scratch: Addr,
}

impl CgSolve {
    pub(crate) fn new(spec: &KernelSpec) -> Self {
        let m = spec.size;
        let n = m * m;
        let bytes = (n * 8) as u64;
        let mut layout = Layout::new();
        let x = layout.alloc("x", bytes, false);
        let r = layout.alloc("r", bytes, false);
        let p = layout.alloc("p", bytes, false);
        let q = layout.alloc("q", bytes, false);
        let b = layout.alloc("b", bytes, true);
        let scalars = layout.alloc("scalars", 24, false);
        let (registry, scratch) = layout.finish();

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let regions = [
            ("matvec", RegionKind::Loop),
            ("pq_dot", RegionKind::Loop),
            ("alpha", RegionKind::Straight),
            ("update", RegionKind::Loop),
            ("beta", RegionKind::Straight),
            ("direction", RegionKind::Loop),
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
            m,
            tol: spec.tolerance,
            rhs,
            rhs_norm,
            x,
            r,
            p,
            q,
            b,
            scalars,
            registry,
            regions,
            scratch,
        }
    }

    #[inline]
    fn at(base: Addr, i: usize) -> Addr {
        base + (i * 8) as Addr
    }

    /// `(A v)[idx]` for the grid point `(gi, gj)`.
    fn apply(&self, rt: &mut Runner, v: Addr, gi: usize, gj: usize) -> Result<f64, Stop> {
        let m = self.m;
        let idx = gi * m + gj;
        let mut acc = 4.0 * rt.rd(Self::at(v, idx))?;
        if gi > 0 {
            acc -= rt.rd(Self::at(v, idx - m))?;
        }
        if gi + 1 < m {
            acc -= rt.rd(Self::at(v, idx + m))?;
        }
        if gj > 0 {
            acc -= rt.rd(Self::at(v, idx - 1))?;
        }
        if gj + 1 < m {
            acc -= rt.rd(Self::at(v, idx + 1))?;
        }
        Ok(acc)
    }
}

impl Kernel for CgSolve {
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
        let mut rho = 0.0;
        for (i, &bi) in self.rhs.iter().enumerate() {
            rt.wr(Self::at(self.b, i), bi)?;
            rt.wr(Self::at(self.x, i), 0.0)?;
            rt.wr(Self::at(self.r, i), bi)?;
            rt.wr(Self::at(self.p, i), bi)?;
            rt.wr(Self::at(self.q, i), 0.0)?;
            rho += bi * bi;
        }
        rt.wr(self.scalars + RHO, rho)?;
        rt.wr(self.scalars + ALPHA, 0.0)?;
        rt.wr(self.scalars + BETA, 0.0)?;
        rt.wr_u64(self.registry.iterator_addr, 1)
    }

    fn iterate(&self, rt: &mut Runner) -> Result<Step, Stop> {
        let m = self.m;

        rt.enter(0);
        for gi in 0..m {
            for gj in 0..m {
                let v = self.apply(rt, self.p, gi, gj)?;
                rt.wr(Self::at(self.q, gi * m + gj), v)?;
            }
            rt.inner_end()?;
        }
        rt.exit()?;

        rt.enter(1);
        let mut pq = 0.0;
        for gi in 0..m {
            for idx in gi * m..(gi + 1) * m {
                pq += rt.rd(Self::at(self.p, idx))? * rt.rd(Self::at(self.q, idx))?;
            }
            rt.inner_end()?;
        }
        rt.exit()?;

        rt.enter(2);
        let rho = rt.rd(self.scalars + RHO)?;
        rt.wr(self.scalars + ALPHA, rho / pq)?;
        rt.exit()?;

        rt.enter(3);
        let alpha = rt.rd(self.scalars + ALPHA)?;
        let mut rr = 0.0;
        for gi in 0..m {
            for idx in gi * m..(gi + 1) * m {
                let xi = rt.rd(Self::at(self.x, idx))? + alpha * rt.rd(Self::at(self.p, idx))?;
                rt.wr(Self::at(self.x, idx), xi)?;
                let ri = rt.rd(Self::at(self.r, idx))? - alpha * rt.rd(Self::at(self.q, idx))?;
                rt.wr(Self::at(self.r, idx), ri)?;
                rr += ri * ri;
            }
            rt.inner_end()?;
        }
        rt.exit()?;

        rt.enter(4);
        let rho_old = rt.rd(self.scalars + RHO)?;
        rt.wr(self.scalars + RHO, rr)?;
        rt.wr(self.scalars + BETA, rr / rho_old)?;
        let rel = rr.sqrt() / self.rhs_norm;
        rt.exit()?;
        let diverged = !rel.is_finite() || rel > DIVERGED;
        if rel <= self.tol || diverged {
            return Ok(Step {
                converged: !diverged,
                metric: rel,
                diverged,
            });
        }

        rt.enter(5);
        let beta = rt.rd(self.scalars + BETA)?;
        for gi in 0..m {
            for idx in gi * m..(gi + 1) * m {
                let pi = rt.rd(Self::at(self.r, idx))? + beta * rt.rd(Self::at(self.p, idx))?;
                rt.wr(Self::at(self.p, idx), pi)?;
            }
            rt.inner_end()?;
        }
        rt.exit()?;
        Ok(Step {
            converged: false,
            metric: rel,
            diverged: false,
        })
    }

    /// True residual `||b - A x|| / ||b||`, independent of the recurrence.
    fn verify(&self, rt: &mut Runner, _reference: Option<f64>) -> Result<(bool, f64), Stop> {
        let m = self.m;
        let mut sq = 0.0;
        for gi in 0..m {
            for gj in 0..m {
                let ax = self.apply(rt, self.x, gi, gj)?;
                let res = self.rhs[gi * m + gj] - ax;
                sq += res * res;
            }
        }
        let rel = sq.sqrt() / self.rhs_norm;
        Ok((rel <= self.tol, rel))
    }
}
