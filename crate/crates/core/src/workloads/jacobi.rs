//! Jacobi iteration for the screened Poisson problem
//! `(4 + s) u[i][j] - (neighbors) = f[i][j]` on an `n x n` grid with a zero
//! boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    DataObjectRegistry, Kernel, KernelSpec, Layout, RegionInfo, RegionKind, Runner, Step, Stop,
};
use crate::simcache::Addr;

const SCREEN: f64 = 1.0;
const DIVERGED: f64 = 1e6;

pub(crate) struct Jacobi2d {
    n: usize,
    tol: f64,
    rhs: Vec<f64>,
    rhs_norm: f64,
    u: Addr,
    u_new: Addr,
    f: Addr,
    res: Addr,
    resid: Addr,
    registry: DataObjectRegistry,
    regions: Vec<RegionInfo>,
    scratch: Addr,
}

impl Jacobi2d {
    pub(crate) fn new(spec: &KernelSpec) -> Self {
        let n = spec.size;
        let bytes = (n * n * 8) as u64;
        let mut layout = Layout::new();
        let u = layout.alloc("u", bytes, false);
        let u_new = layout.alloc("u_new", bytes, false);
        let f = layout.alloc("f", bytes, true);
        let res = layout.alloc("res", bytes, false);
        let resid = layout.alloc("resid", 8, false);
        let (registry, scratch) = layout.finish();

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut rhs = vec![0.0; n * n];
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                rhs[i * n + j] = rng.gen_range(-1.0..1.0);
            }
        }
        let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let regions = vec![
            RegionInfo {
                id: 0,
                name: "sweep".into(),
                kind: RegionKind::Loop,
            },
            RegionInfo {
                id: 1,
                name: "residual".into(),
                kind: RegionKind::Loop,
            },
            RegionInfo {
                id: 2,
                name: "check".into(),
                kind: RegionKind::Straight,
            },
            RegionInfo {
                id: 3,
                name: "copy".into(),
                kind: RegionKind::Loop,
            },
        ];
        Self {
            n,
            tol: spec.tolerance,
            rhs,
            rhs_norm,
            u,
            u_new,
            f,
            res,
            resid,
            registry,
            regions,
            scratch,
        }
    }

    #[inline]
    fn at(&self, base: Addr, i: usize, j: usize) -> Addr {
        base + ((i * self.n + j) * 8) as Addr
    }

    /// Residual of the grid at `base` at interior point `(i, j)`.
    fn point_residual(&self, rt: &mut Runner, base: Addr, i: usize, j: usize) -> Result<f64, Stop> {
        let c = rt.rd(self.at(base, i, j))?;
        let nb = rt.rd(self.at(base, i - 1, j))?
            + rt.rd(self.at(base, i + 1, j))?
            + rt.rd(self.at(base, i, j - 1))?
            + rt.rd(self.at(base, i, j + 1))?;
        let fij = rt.rd(self.at(self.f, i, j))?;
        Ok(fij + nb - (4.0 + SCREEN) * c)
    }
}

impl Kernel for Jacobi2d {
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
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                rt.wr(self.at(self.u, i, j), 0.0)?;
                rt.wr(self.at(self.u_new, i, j), 0.0)?;
                rt.wr(self.at(self.f, i, j), self.rhs[i * n + j])?;
                rt.wr(self.at(self.res, i, j), 0.0)?;
            }
        }
        rt.wr(self.resid, 1.0)?;
        rt.wr_u64(self.registry.iterator_addr, 1)
    }

    fn iterate(&self, rt: &mut Runner) -> Result<Step, Stop> {
        let n = self.n;
        rt.enter(0);
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let nb = rt.rd(self.at(self.u, i - 1, j))?
                    + rt.rd(self.at(self.u, i + 1, j))?
                    + rt.rd(self.at(self.u, i, j - 1))?
                    + rt.rd(self.at(self.u, i, j + 1))?;
                let fij = rt.rd(self.at(self.f, i, j))?;
                rt.wr(self.at(self.u_new, i, j), (fij + nb) / (4.0 + SCREEN))?;
            }
            rt.inner_end()?;
        }
        rt.exit()?;

        rt.enter(1);
        let mut sq = 0.0;
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let r = self.point_residual(rt, self.u_new, i, j)?;
                rt.wr(self.at(self.res, i, j), r)?;
                sq += r * r;
            }
            rt.inner_end()?;
        }
        rt.exit()?;

        rt.enter(2);
        rt.wr(self.resid, sq.sqrt() / self.rhs_norm)?;
        let rel = rt.rd(self.resid)?;
        rt.exit()?;

        rt.enter(3);
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let v = rt.rd(self.at(self.u_new, i, j))?;
                rt.wr(self.at(self.u, i, j), v)?;
            }
            rt.inner_end()?;
        }
        rt.exit()?;

        Ok(Step {
            converged: rel <= self.tol,
            metric: rel,
            diverged: !rel.is_finite() || rel > DIVERGED,
        })
    }

    fn verify(&self, rt: &mut Runner, _reference: Option<f64>) -> Result<(bool, f64), Stop> {
        let n = self.n;
        let mut sq = 0.0;
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let r = self.point_residual(rt, self.u, i, j)?;
                sq += r * r;
            }
        }
        let rel = sq.sqrt() / self.rhs_norm;
        Ok((rel <= self.tol, rel))
    }
}
