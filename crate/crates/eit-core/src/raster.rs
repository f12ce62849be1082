//! Square image grids over [-1, 1]^2 and conversions to/from mesh fields.
//!
//! Grid convention: pixel `(row, col)` has center
//! `x = -1 + (col + 0.5) * 2/n`, `y = -1 + (row + 0.5) * 2/n`, i.e. row 0 is
//! the bottom of the domain. Everything outside the unit disk is padded with
//! the background value 1.

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::fem::Conductivity;
use crate::mesh::Mesh;
use crate::phantom::Phantom;

/// An `n x n` raster of a medium over [-1, 1]^2.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pixels: Array2<f64>,
}

impl ImageGrid {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        if pixels.nrows() != pixels.ncols() {
            return Err(CoreError::invalid("image grid must be square"));
        }
        Ok(ImageGrid { pixels })
    }

    pub fn from_flat(n: usize, data: Vec<f64>) -> Result<Self> {
        let pixels = Array2::from_shape_vec((n, n), data)
            .map_err(|e| CoreError::invalid(format!("bad image buffer: {e}")))?;
        Ok(ImageGrid { pixels })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn size(&self) -> usize {
        self.pixels.nrows()
    }

    /// Physical coordinates of a pixel center.
    pub fn pixel_center(n: usize, row: usize, col: usize) -> [f64; 2] {
        let h = 2.0 / n as f64;
        [-1.0 + (col as f64 + 0.5) * h, -1.0 + (row as f64 + 0.5) * h]
    }

    /// Bilinear sample at physical coordinates, clamping to the pixel-center
    /// lattice at the edges.
    pub fn sample_bilinear(&self, p: [f64; 2]) -> f64 {
        let n = self.size();
        let h = 2.0 / n as f64;
        let fx = ((p[0] + 1.0) / h - 0.5).clamp(0.0, (n - 1) as f64);
        let fy = ((p[1] + 1.0) / h - 0.5).clamp(0.0, (n - 1) as f64);
        let c0 = fx.floor() as usize;
        let r0 = fy.floor() as usize;
        let c1 = (c0 + 1).min(n - 1);
        let r1 = (r0 + 1).min(n - 1);
        let tx = fx - c0 as f64;
        let ty = fy - r0 as f64;
        let p00 = self.pixels[[r0, c0]];
        let p01 = self.pixels[[r0, c1]];
        let p10 = self.pixels[[r1, c0]];
        let p11 = self.pixels[[r1, c1]];
        p00 * (1.0 - tx) * (1.0 - ty)
            + p01 * tx * (1.0 - ty)
            + p10 * (1.0 - tx) * ty
            + p11 * tx * ty
    }
}

/// Evaluate an analytic phantom exactly at every pixel center inside the
/// unit disk; outside pixels are 1.
pub fn rasterize_phantom(phantom: &Phantom, n: usize) -> Result<ImageGrid> {
    if n < 8 {
        return Err(CoreError::invalid("image size must be >= 8"));
    }
    let mut pixels = Array2::from_elem((n, n), 1.0);
    for row in 0..n {
        for col in 0..n {
            let p = ImageGrid::pixel_center(n, row, col);
            if p[0] * p[0] + p[1] * p[1] <= 1.0 {
                pixels[[row, col]] = phantom.value_at(p);
            }
        }
    }
    Ok(ImageGrid { pixels })
}

/// Spatial index assigning pixels to containing triangles.
struct TriangleLocator<'m> {
    mesh: &'m Mesh,
    grid: Vec<Vec<usize>>,
    cells: usize,
}

impl<'m> TriangleLocator<'m> {
    fn new(mesh: &'m Mesh) -> Self {
        let cells = 32usize;
        let mut grid = vec![Vec::new(); cells * cells];
        let to_cell = |v: f64| -> usize {
            (((v + 1.0) / 2.0 * cells as f64).floor() as isize).clamp(0, cells as isize - 1)
                as usize
        };
        for (e, tri) in mesh.triangles().iter().enumerate() {
            let xs = tri.map(|v| mesh.nodes()[v][0]);
            let ys = tri.map(|v| mesh.nodes()[v][1]);
            let (x0, x1) = (
                xs.iter().cloned().fold(f64::INFINITY, f64::min),
                xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
            let (y0, y1) = (
                ys.iter().cloned().fold(f64::INFINITY, f64::min),
                ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
            for cy in to_cell(y0)..=to_cell(y1) {
                for cx in to_cell(x0)..=to_cell(x1) {
                    grid[cy * cells + cx].push(e);
                }
            }
        }
        TriangleLocator { mesh, grid, cells }
    }

    /// Containing triangle and barycentric coordinates of `p`, if any.
    fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        let to_cell = |v: f64| -> usize {
            (((v + 1.0) / 2.0 * self.cells as f64).floor() as isize)
                .clamp(0, self.cells as isize - 1) as usize
        };
        let cell = &self.grid[to_cell(p[1]) * self.cells + to_cell(p[0])];
        for &e in cell {
            if let Some(bary) = barycentric(self.mesh, e, p) {
                return Some((e, bary));
            }
        }
        None
    }
}

fn barycentric(mesh: &Mesh, e: usize, p: [f64; 2]) -> Option<[f64; 3]> {
    let [a, b, c] = mesh.triangles()[e];
    let (pa, pb, pc) = (mesh.nodes()[a], mesh.nodes()[b], mesh.nodes()[c]);
    let area2 = 2.0 * mesh.element_areas()[e];
    let l0 = ((pb[0] - p[0]) * (pc[1] - p[1]) - (pb[1] - p[1]) * (pc[0] - p[0])) / area2;
    let l1 = ((pc[0] - p[0]) * (pa[1] - p[1]) - (pc[1] - p[1]) * (pa[0] - p[0])) / area2;
    let l2 = 1.0 - l0 - l1;
    let eps = -1e-12;
    if l0 >= eps && l1 >= eps && l2 >= eps {
        Some([l0, l1, l2])
    } else {
        None
    }
}

/// Rasterize a nodal mesh field by barycentric interpolation (exact on
/// linear fields). Pixels outside the mesh are padded with 1.
pub fn rasterize_nodal(mesh: &Mesh, nodal: &[f64], n: usize) -> Result<ImageGrid> {
    if n < 8 {
        return Err(CoreError::invalid("image size must be >= 8"));
    }
    if nodal.len() != mesh.n_nodes() {
        return Err(CoreError::invalid("nodal field length mismatch"));
    }
    let locator = TriangleLocator::new(mesh);
    let mut pixels = Array2::from_elem((n, n), 1.0);
    for row in 0..n {
        for col in 0..n {
            let p = ImageGrid::pixel_center(n, row, col);
            if let Some((e, bary)) = locator.locate(p) {
                let [a, b, c] = mesh.triangles()[e];
                pixels[[row, col]] =
                    bary[0] * nodal[a] + bary[1] * nodal[b] + bary[2] * nodal[c];
            }
        }
    }
    Ok(ImageGrid { pixels })
}

/// Average per-element values onto nodes, weighting by element area.
pub fn element_to_nodal(mesh: &Mesh, element_values: &[f64]) -> Result<Vec<f64>> {
    if element_values.len() != mesh.n_elements() {
        return Err(CoreError::invalid("element field length mismatch"));
    }
    let mut acc = vec![0.0; mesh.n_nodes()];
    let mut weight = vec![0.0; mesh.n_nodes()];
    for (e, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.element_areas()[e];
        for &v in tri {
            acc[v] += area * element_values[e];
            weight[v] += area;
        }
    }
    Ok(acc
        .iter()
        .zip(&weight)
        .map(|(a, w)| if *w > 0.0 { a / w } else { 1.0 })
        .collect())
}

/// Rasterize a per-element conductivity: element values are first averaged
/// onto nodes, then interpolated barycentrically.
pub fn rasterize_conductivity(mesh: &Mesh, sigma: &Conductivity, n: usize) -> Result<ImageGrid> {
    let nodal = element_to_nodal(mesh, sigma.values())?;
    rasterize_nodal(mesh, &nodal, n)
}

/// Convert an image back to a per-element conductivity by bilinear sampling
/// at element centroids; values are floored at the solver's positivity bound
/// so reconstructed media remain admissible.
pub fn image_to_mesh(image: &ImageGrid, mesh: &Mesh) -> Result<Conductivity> {
    let values = (0..mesh.n_elements())
        .map(|e| {
            image
                .sample_bilinear(mesh.centroid(e))
                .max(crate::inverse::SIGMA_FLOOR)
        })
        .collect();
    Conductivity::new(values)
}

/// Bilinear resize of a square matrix to `n x n` (used to condition the
/// direct-learning baselines on measurements).
pub fn resize_bilinear(src: &Array2<f64>, n: usize) -> Array2<f64> {
    let m = src.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    if m == 1 {
        out.fill(src[[0, 0]]);
        return out;
    }
    let scale = (m - 1) as f64 / (n - 1).max(1) as f64;
    for r in 0..n {
        for c in 0..n {
            let fy = r as f64 * scale;
            let fx = c as f64 * scale;
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(m - 1);
            let x1 = (x0 + 1).min(m - 1);
            let ty = fy - y0 as f64;
            let tx = fx - x0 as f64;
            out[[r, c]] = src[[y0, x0]] * (1.0 - tx) * (1.0 - ty)
                + src[[y0, x1]] * tx * (1.0 - ty)
                + src[[y1, x0]] * (1.0 - tx) * ty
                + src[[y1, x1]] * tx * ty;
        }
    }
    out
}
