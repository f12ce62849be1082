//! P1 finite-element forward solver and the discrete Dirichlet-to-Neumann map.
//!
//! The elliptic problem `-div(sigma grad u) = 0` with Dirichlet data on the
//! unit circle is discretized with linear triangular elements. The D2N matrix
//! is the boundary Schur complement `M = K_bb - K_bi K_ii^-1 K_ib`, which is
//! symmetric by construction and positive semidefinite orthogonal to the
//! constant vector. `K_ii` is factored once per conductivity and shared by
//! all boundary excitations.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mesh::Mesh;
use crate::parallel::map_indexed;
use crate::skyline::{SkylineFactor, SkylineMatrix, SkylinePattern};

/// Per-element conductivity values; strictly positive to keep the problem
/// elliptic.
#[derive(Debug, Clone, PartialEq)]
pub struct Conductivity {
    values: Vec<f64>,
}

impl Conductivity {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(idx) = values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(CoreError::invalid(format!(
                "conductivity entry {idx} = {} is not strictly positive",
                values[idx]
            )));
        }
        Ok(Conductivity { values })
    }

    pub fn constant(n_elements: usize, value: f64) -> Result<Self> {
        Conductivity::new(vec![value; n_elements])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Where a mesh node lands in the interior/boundary partition.
#[derive(Debug, Clone, Copy)]
pub enum NodeLoc {
    Interior(usize),
    Boundary(usize),
}

/// Interior/boundary node partition with per-node positions.
#[derive(Debug)]
pub struct IndexSplit {
    pub interior: Vec<usize>,
    pub boundary: Vec<usize>,
    pub loc: Vec<NodeLoc>,
}

impl IndexSplit {
    fn new(mesh: &Mesh) -> Self {
        let (interior, boundary) = mesh.interior_boundary_split();
        let mut loc = vec![NodeLoc::Interior(usize::MAX); mesh.n_nodes()];
        for (pos, &node) in interior.iter().enumerate() {
            loc[node] = NodeLoc::Interior(pos);
        }
        for (pos, &node) in boundary.iter().enumerate() {
            loc[node] = NodeLoc::Boundary(pos);
        }
        IndexSplit {
            interior,
            boundary,
            loc,
        }
    }
}

/// Geometry-only element data: the conductivity-independent 3x3 stiffness
/// `area * grad(phi_a) . grad(phi_b)` of each triangle.
#[derive(Debug)]
pub struct P1Geometry {
    pub element_nodes: Vec<[usize; 3]>,
    pub element_stiffness: Vec<[[f64; 3]; 3]>,
}

impl P1Geometry {
    fn new(mesh: &Mesh) -> Self {
        let nodes = mesh.nodes();
        let mut element_stiffness = Vec::with_capacity(mesh.n_elements());
        for (e, tri) in mesh.triangles().iter().enumerate() {
            let p = [nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]];
            let area = mesh.element_areas()[e];
            // Constant basis gradients: grad(lambda_a) = rot90(opposite edge) / (2A).
            let grads = [
                [p[1][1] - p[2][1], p[2][0] - p[1][0]],
                [p[2][1] - p[0][1], p[0][0] - p[2][0]],
                [p[0][1] - p[1][1], p[1][0] - p[0][0]],
            ];
            let mut ke = [[0.0; 3]; 3];
            for a in 0..3 {
                for b in 0..3 {
                    ke[a][b] = (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1])
                        / (4.0 * area);
                }
            }
            element_stiffness.push(ke);
        }
        P1Geometry {
            element_nodes: mesh.triangles().to_vec(),
            element_stiffness,
        }
    }
}

/// Reusable per-mesh solver state: node partition, element geometry, and the
/// skyline profile of the interior stiffness block.
#[derive(Debug)]
pub struct FemContext {
    mesh: Mesh,
    split: Arc<IndexSplit>,
    geometry: Arc<P1Geometry>,
    kii_pattern: Arc<SkylinePattern>,
}

impl FemContext {
    pub fn new(mesh: Mesh) -> Self {
        let split = Arc::new(IndexSplit::new(&mesh));
        let geometry = Arc::new(P1Geometry::new(&mesh));
        let n_i = split.interior.len();
        let mut pairs = Vec::new();
        for tri in mesh.triangles() {
            for a in 0..3 {
                for b in (a + 1)..3 {
                    if let (NodeLoc::Interior(pa), NodeLoc::Interior(pb)) =
                        (split.loc[tri[a]], split.loc[tri[b]])
                    {
                        pairs.push((pa, pb));
                    }
                }
            }
        }
        let kii_pattern = SkylinePattern::from_pairs(n_i, pairs.into_iter());
        FemContext {
            mesh,
            split,
            geometry,
            kii_pattern,
        }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn split(&self) -> &IndexSplit {
        &self.split
    }

    pub fn geometry(&self) -> &P1Geometry {
        &self.geometry
    }

    /// Assemble the partitioned stiffness blocks for `sigma`.
    pub fn assemble(&self, sigma: &Conductivity) -> Result<StiffnessSystem> {
        if sigma.len() != self.mesh.n_elements() {
            return Err(CoreError::invalid(format!(
                "conductivity has {} entries, mesh has {} elements",
                sigma.len(),
                self.mesh.n_elements()
            )));
        }
        let n_i = self.split.interior.len();
        let n_b = self.split.boundary.len();
        let mut kii = SkylineMatrix::zeroed(self.kii_pattern.clone());
        let mut kib = Array2::<f64>::zeros((n_i, n_b));
        let mut kbb = Array2::<f64>::zeros((n_b, n_b));
        for (e, tri) in self.geometry.element_nodes.iter().enumerate() {
            let ke = &self.geometry.element_stiffness[e];
            let se = sigma.values()[e];
            let locs = [
                self.split.loc[tri[0]],
                self.split.loc[tri[1]],
                self.split.loc[tri[2]],
            ];
            for a in 0..3 {
                for b in 0..=a {
                    let v = se * ke[a][b];
                    match (locs[a], locs[b]) {
                        (NodeLoc::Interior(pa), NodeLoc::Interior(pb)) => {
                            kii.add(pa.max(pb), pa.min(pb), v);
                        }
                        (NodeLoc::Interior(pa), NodeLoc::Boundary(pb))
                        | (NodeLoc::Boundary(pb), NodeLoc::Interior(pa)) => {
                            kib[[pa, pb]] += v;
                        }
                        (NodeLoc::Boundary(pa), NodeLoc::Boundary(pb)) => {
                            kbb[[pa, pb]] += v;
                            if pa != pb {
                                kbb[[pb, pa]] += v;
                            }
                        }
                    }
                }
            }
        }
        Ok(StiffnessSystem {
            split: self.split.clone(),
            kii,
            kib,
            kbb,
        })
    }

    /// Assemble, factor `K_ii`, and solve the harmonic lifting of every
    /// boundary basis vector in one pass. The returned operator carries the
    /// full solution matrix `U` used by both the D2N map and the adjoint
    /// misfit gradient.
    pub fn forward(&self, sigma: &Conductivity) -> Result<ForwardOperator> {
        let system = self.assemble(sigma)?;
        let n_i = self.split.interior.len();
        let n_b = self.split.boundary.len();
        let kib = system.kib;
        let kbb = system.kbb;
        let factor = Arc::new(system.kii.factorize()?);

        // W = K_ii^-1 K_ib, one column per boundary node; columns are
        // independent and run on the parallel lane.
        let cols = {
            let factor = factor.clone();
            let kib_ref = &kib;
            map_indexed(n_b, move |j| {
                let mut rhs: Vec<f64> = (0..n_i).map(|i| kib_ref[[i, j]]).collect();
                factor.solve_in_place(&mut rhs);
                rhs
            })
        };
        let mut w = Array2::<f64>::zeros((n_i, n_b));
        for (j, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                w[[i, j]] = *v;
            }
        }
        // M = K_bb - K_ib^T W.
        let m = &kbb - &kib.t().dot(&w);
        Ok(ForwardOperator {
            split: self.split.clone(),
            factor,
            kib,
            interior_solutions: w,
            d2n: D2NMatrix { m },
        })
    }
}

/// Partitioned stiffness blocks for one conductivity.
#[derive(Debug)]
pub struct StiffnessSystem {
    split: Arc<IndexSplit>,
    pub kii: SkylineMatrix,
    pub kib: Array2<f64>,
    pub kbb: Array2<f64>,
}

impl StiffnessSystem {
    /// Reassemble the full dense stiffness matrix in mesh node ordering.
    /// Intended for tests and diagnostics on small meshes.
    pub fn to_dense_full(&self) -> Array2<f64> {
        let n_i = self.split.interior.len();
        let n = self.split.loc.len();
        let mut full = Array2::<f64>::zeros((n, n));
        for (pa, &na) in self.split.interior.iter().enumerate() {
            for (pb, &nb) in self.split.interior.iter().enumerate().take(pa + 1) {
                let v = self.kii.get(pa, pb);
                full[[na, nb]] = v;
                full[[nb, na]] = v;
            }
        }
        for (pa, &na) in self.split.interior.iter().enumerate() {
            for (pb, &nb) in self.split.boundary.iter().enumerate() {
                full[[na, nb]] = self.kib[[pa, pb]];
                full[[nb, na]] = self.kib[[pa, pb]];
            }
        }
        for (pa, &na) in self.split.boundary.iter().enumerate() {
            for (pb, &nb) in self.split.boundary.iter().enumerate() {
                full[[na, nb]] = self.kbb[[pa, pb]];
            }
        }
        let _ = n_i;
        full
    }

    /// Factor the interior block and keep the coupling blocks for solves.
    pub fn factorize(self) -> Result<FactoredSystem> {
        Ok(FactoredSystem {
            split: self.split,
            factor: self.kii.factorize()?,
            kib: self.kib,
        })
    }
}

/// Factored interior block plus coupling, enough to solve Dirichlet problems.
#[derive(Debug)]
pub struct FactoredSystem {
    split: Arc<IndexSplit>,
    factor: SkylineFactor,
    kib: Array2<f64>,
}

impl FactoredSystem {
    /// Solve the Dirichlet problem with boundary voltages `f`, returning the
    /// full nodal solution (boundary entries equal `f` exactly).
    pub fn solve_dirichlet(&self, f: &[f64]) -> Result<Vec<f64>> {
        let n_b = self.split.boundary.len();
        if f.len() != n_b {
            return Err(CoreError::invalid(format!(
                "boundary vector has {} entries, expected {n_b}",
                f.len()
            )));
        }
        let n_i = self.split.interior.len();
        let mut rhs = vec![0.0; n_i];
        for i in 0..n_i {
            let mut acc = 0.0;
            for (j, fj) in f.iter().enumerate() {
                acc += self.kib[[i, j]] * fj;
            }
            rhs[i] = -acc;
        }
        self.factor.solve_in_place(&mut rhs);
        let mut u = vec![0.0; self.split.loc.len()];
        for (pos, &node) in self.split.interior.iter().enumerate() {
            u[node] = rhs[pos];
        }
        for (pos, &node) in self.split.boundary.iter().enumerate() {
            u[node] = f[pos];
        }
        Ok(u)
    }
}

/// Dense discrete Dirichlet-to-Neumann matrix in boundary-node ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct D2NMatrix {
    m: Array2<f64>,
}

impl D2NMatrix {
    pub fn new(m: Array2<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(CoreError::invalid("D2N matrix must be square"));
        }
        Ok(D2NMatrix { m })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.m
    }

    pub fn n_boundary(&self) -> usize {
        self.m.nrows()
    }

    /// Relative Frobenius distance to `other`, normalized by `other`.
    pub fn rel_frobenius_distance(&self, other: &D2NMatrix) -> f64 {
        let diff = &self.m - &other.m;
        frobenius(&diff) / frobenius(&other.m)
    }

    /// Save as a raw little-endian f64 row-major blob plus JSON sidecar.
    /// The sidecar lands next to the blob with extension `.json`.
    pub fn save_blob(&self, path: &Path, sidecar: &MeasurementSidecar) -> Result<()> {
        let data: Vec<f64> = self.m.iter().copied().collect();
        crate::blob::write_f64_file(path, &data)?;
        let json_path = path.with_extension("json");
        let file = std::fs::File::create(json_path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), sidecar)?;
        Ok(())
    }

    pub fn load_blob(path: &Path) -> Result<(Self, MeasurementSidecar)> {
        let json_path = path.with_extension("json");
        let file = std::fs::File::open(&json_path)?;
        let sidecar: MeasurementSidecar = serde_json::from_reader(std::io::BufReader::new(file))?;
        let n = sidecar.n_b;
        let data = crate::blob::read_f64_file(path, Some(n * n))?;
        let m = Array2::from_shape_vec((n, n), data)
            .map_err(|e| CoreError::Format(format!("bad D2N blob shape: {e}")))?;
        Ok((D2NMatrix { m }, sidecar))
    }
}

/// Sidecar metadata stored beside each D2N measurement blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementSidecar {
    pub n_b: usize,
    pub sigma_id: String,
    pub noise_level: f64,
}

/// Forward solve artifacts for one conductivity: the factored interior block,
/// the harmonic solution matrix, and the D2N map.
pub struct ForwardOperator {
    split: Arc<IndexSplit>,
    factor: Arc<SkylineFactor>,
    kib: Array2<f64>,
    /// `-K_ii^-1 K_ib` would be the interior solution block; this stores
    /// `W = K_ii^-1 K_ib` (one column per boundary excitation).
    interior_solutions: Array2<f64>,
    d2n: D2NMatrix,
}

impl ForwardOperator {
    pub fn d2n(&self) -> &D2NMatrix {
        &self.d2n
    }

    pub fn into_d2n(self) -> D2NMatrix {
        self.d2n
    }

    pub fn factor(&self) -> &SkylineFactor {
        &self.factor
    }

    pub fn kib(&self) -> &Array2<f64> {
        &self.kib
    }

    /// Full harmonic solution matrix `U` (n_nodes x n_b): column `j` solves
    /// the Dirichlet problem with the `j`-th boundary basis vector.
    pub fn harmonic_matrix(&self) -> Array2<f64> {
        let n = self.split.loc.len();
        let n_b = self.split.boundary.len();
        let mut u = Array2::<f64>::zeros((n, n_b));
        for (pos, &node) in self.split.interior.iter().enumerate() {
            for j in 0..n_b {
                u[[node, j]] = -self.interior_solutions[[pos, j]];
            }
        }
        for (pos, &node) in self.split.boundary.iter().enumerate() {
            u[[node, pos]] = 1.0;
        }
        u
    }
}

/// Assemble the stiffness blocks for `sigma` on `mesh`.
///
/// Convenience wrapper; iterate through [`FemContext`] when solving many
/// conductivities on one mesh.
pub fn assemble_stiffness(mesh: &Mesh, sigma: &Conductivity) -> Result<StiffnessSystem> {
    FemContext::new(mesh.clone()).assemble(sigma)
}

/// Compute the discrete D2N matrix for `sigma` on `mesh`.
pub fn compute_d2n(mesh: &Mesh, sigma: &Conductivity) -> Result<D2NMatrix> {
    Ok(FemContext::new(mesh.clone()).forward(sigma)?.into_d2n())
}

pub(crate) fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Boundary mass matrix of the piecewise-linear trace space: tridiagonal
/// (cyclically) with `h/6` couplings, used to form Rayleigh quotients of the
/// D2N map against analytic disk eigenfunctions.
pub fn boundary_mass_matrix(mesh: &Mesh) -> Array2<f64> {
    let bnd = mesh.boundary_nodes();
    let n_b = bnd.len();
    let mut mass = Array2::<f64>::zeros((n_b, n_b));
    for j in 0..n_b {
        let a = mesh.nodes()[bnd[j]];
        let b = mesh.nodes()[bnd[(j + 1) % n_b]];
        let h = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        mass[[j, j]] += h / 3.0;
        mass[[(j + 1) % n_b, (j + 1) % n_b]] += h / 3.0;
        mass[[j, (j + 1) % n_b]] += h / 6.0;
        mass[[(j + 1) % n_b, j]] += h / 6.0;
    }
    mass
}

/// Rayleigh quotient `f^T M f / f^T B f` of the D2N matrix against the
/// boundary mass matrix.
pub fn d2n_rayleigh_quotient(d2n: &D2NMatrix, mass: &Array2<f64>, f: &Array1<f64>) -> f64 {
    let num = f.dot(&d2n.matrix().dot(f));
    let den = f.dot(&mass.dot(f));
    num / den
}
