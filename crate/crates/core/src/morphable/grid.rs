//! Uniform-grid nearest-vertex index.

use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct VertexGrid {
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: vertices of cell `c` are `indices[starts[c]..starts[c + 1]]`,
    /// sorted ascending.
    starts: Vec<usize>,
    indices: Vec<usize>,
}

impl VertexGrid {
    pub fn build(points: &[Vector3<f64>], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "grid cell size must be positive");
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            lo = Vector3::zeros();
            hi = Vector3::zeros();
        }
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).max(1));
        let mut grid = Self {
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            indices: Vec::new(),
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncells + 1];
        let keys: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for c in 0..ncells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut indices = vec![0usize; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            indices[fill[k]] = i;
            fill[k] += 1;
        }
        grid.starts = counts;
        grid.indices = indices;
        grid
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell).floor();
            if c.is_nan() || c < 0.0 {
                0
            } else {
                (c as usize).min(self.dims[a] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Nearest point to `q` by Euclidean distance, ties broken by lowest index.
    pub fn nearest(&self, points: &[Vector3<f64>], q: &Vector3<f64>) -> Option<usize> {
        if points.is_empty() {
            return None;
        }
        let center = self.cell_of(q);
        let max_ring = *self.dims.iter().max().unwrap();
        let mut best: Option<(f64, usize)> = None;
        for ring in 0..=max_ring {
            // Cells at Chebyshev index distance `ring` are at least
            // (ring - 1) * cell away from q.
            if let Some((d2, _)) = best {
                let bound = (ring as f64 - 1.0).max(0.0) * self.cell;
                if d2 < bound * bound {
                    break;
                }
            }
            self.visit_ring(center, ring, |cell| {
                for &i in &self.indices[self.starts[cell]..self.starts[cell + 1]] {
                    let d2 = (points[i] - q).norm_squared();
                    match best {
                        Some((bd, bi)) if d2 > bd || (d2 == bd && i > bi) => {}
                        _ => best = Some((d2, i)),
                    }
                }
            });
        }
        best.map(|(_, i)| i)
    }

    fn visit_ring(&self, c: [usize; 3], ring: usize, mut f: impl FnMut(usize)) {
        let r = ring as i64;
        let range = |a: usize| {
            let lo = (c[a] as i64 - r).max(0);
            let hi = (c[a] as i64 + r).min(self.dims[a] as i64 - 1);
            lo..=hi
        };
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    let cheb = (x - c[0] as i64)
                        .abs()
                        .max((y - c[1] as i64).abs())
                        .max((z - c[2] as i64).abs());
                    if cheb == r {
                        f(self.flat([x as usize, y as usize, z as usize]));
                    }
                }
            }
        }
    }
}
