use nalgebra::{Matrix3, Vector3};

use super::warp::{Aggregation, Warp};

/// One correspondence candidate from one initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub init_bone: usize,
    pub init: Vector3<f64>,
    pub x_c: Vector3<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    /// Converged but within the dedup distance of an earlier candidate.
    pub duplicate: bool,
    pub occupancy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceResult {
    pub candidates: Vec<Candidate>,
    pub selected: Option<usize>,
}

impl CorrespondenceResult {
    pub fn any_converged(&self) -> bool {
        self.candidates.iter().any(|c| c.converged)
    }

    pub fn selected_candidate(&self) -> Option<&Candidate> {
        self.selected.map(|i| &self.candidates[i])
    }

    /// Occupancy of the selected candidate; 0 (empty space) when nothing
    /// converged.
    pub fn occupancy(&self) -> f64 {
        self.selected_candidate().and_then(|c| c.occupancy).unwrap_or(0.0)
    }
}

/// Index of the minimum (or maximum) occupancy; ties resolve to the lowest
/// index, `None` entries are ignored.
pub fn select_candidate(occupancies: &[Option<f64>], rule: Aggregation) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in occupancies.iter().enumerate() {
        if let Some(o) = *o {
            let better = match (best, rule) {
                (None, _) => true,
                (Some((_, b)), Aggregation::Min) => o < b,
                (Some((_, b)), Aggregation::Max) => o > b,
            };
            if better {
                best = Some((i, o));
            }
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy)]
pub struct BroydenOutcome {
    pub x: Vector3<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

impl Warp<'_> {
    /// Broyden's good method on `w(x) - target`, inverse-Jacobian estimate
    /// seeded with the exact warp Jacobian at `x0`.
    pub fn broyden(&self, x0: &Vector3<f64>, target: &Vector3<f64>) -> BroydenOutcome {
        let cfg = &self.ctx.search;
        let (w0, j0) = self.eval_with_jacobian(x0);
        let mut x = *x0;
        let mut g = w0 - target;
        let mut gn = g.norm();
        if gn < cfg.tolerance {
            return BroydenOutcome {
                x,
                converged: true,
                iterations: 0,
                residual: gn,
            };
        }
        let mut b = j0.try_inverse().unwrap_or_else(Matrix3::identity);
        for step in 1..=cfg.max_steps {
            let mut dx = -(b * g);
            let mut x_new = x + dx;
            let mut g_new = self.eval(&x_new) - target;
            let mut halvings = 0;
            while !(g_new.norm() <= gn) && halvings < cfg.max_halvings {
                dx *= 0.5;
                x_new = x + dx;
                g_new = self.eval(&x_new) - target;
                halvings += 1;
            }
            let dg = g_new - g;
            let bdg = b * dg;
            let denom = dx.dot(&bdg);
            if denom.abs() > 1e-30 && denom.is_finite() {
                b += (dx - bdg) * (dx.transpose() * b) / denom;
            }
            x = x_new;
            g = g_new;
            gn = g.norm();
            if !gn.is_finite() {
                break;
            }
            if gn < cfg.tolerance {
                return BroydenOutcome {
                    x,
                    converged: true,
                    iterations: step,
                    residual: gn,
                };
            }
        }
        BroydenOutcome {
            x,
            converged: false,
            iterations: cfg.max_steps,
            residual: gn,
        }
    }

    /// Candidates from every init bone, without occupancies.
    pub fn search_candidates(&self, x_d: &Vector3<f64>) -> Vec<Candidate> {
        let cfg = &self.ctx.search;
        let mut out: Vec<Candidate> = Vec::with_capacity(cfg.init_bones.len());
        for &bone in &cfg.init_bones {
            let init = self.ctx.transforms[bone].inverse().apply(x_d);
            if out.iter().any(|c| (c.init - init).norm() < 1e-12) {
                continue;
            }
            let r = self.broyden(&init, x_d);
            let duplicate = r.converged
                && out
                    .iter()
                    .any(|c| c.converged && !c.duplicate && (c.x_c - r.x).norm() < cfg.dedup_distance);
            out.push(Candidate {
                init_bone: bone,
                init,
                x_c: r.x,
                converged: r.converged,
                iterations: r.iterations,
                residual: r.residual,
                duplicate,
                occupancy: None,
            });
        }
        out
    }

    /// Search plus occupancy evaluation and selection.
    pub fn correspondence_search(&self, x_d: &Vector3<f64>, latent: &[f64]) -> CorrespondenceResult {
        let mut candidates = self.search_candidates(x_d);
        for c in candidates.iter_mut().filter(|c| c.converged && !c.duplicate) {
            let raw = self.nets.geometry_raw(&[c.x_c.x, c.x_c.y, c.x_c.z], latent);
            c.occupancy = Some(crate::nets::logistic(raw));
        }
        let occs: Vec<Option<f64>> = candidates.iter().map(|c| c.occupancy).collect();
        let selected = select_candidate(&occs, self.ctx.search.aggregation);
        CorrespondenceResult { candidates, selected }
    }

    pub fn deformed_occupancy(&self, x_d: &Vector3<f64>, latent: &[f64]) -> f64 {
        self.correspondence_search(x_d, latent).occupancy()
    }

    /// Newton refinement of `w(x) = target` from `x0` using exact Jacobians.
    pub fn newton_solve(&self, x0: &Vector3<f64>, target: &Vector3<f64>, iters: usize) -> Option<Vector3<f64>> {
        let mut x = *x0;
        for _ in 0..iters {
            let (w, j) = self.eval_with_jacobian(&x);
            let g = w - target;
            if g.norm() < 1e-14 {
                break;
            }
            x -= j.lu().solve(&g)?;
        }
        x.iter().all(|v| v.is_finite()).then_some(x)
    }
}
