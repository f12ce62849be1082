//! Ground-truth media: the Four Circles distribution and randomized
//! Shepp-Logan phantoms.
//!
//! Both families are analytic: a phantom is a closed-form function of the
//! plane, evaluated exactly wherever a value is needed (element centroids,
//! pixel centers). Sampling is deterministic per seed.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fem::Conductivity;
use crate::mesh::Mesh;

/// One circular inclusion of a [`CirclePhantom`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircleInclusion {
    pub center: [f64; 2],
    pub radius: f64,
    pub weight: f64,
}

/// Unit background plus weighted circular indicator functions; overlapping
/// inclusions add.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CirclePhantom {
    pub inclusions: Vec<CircleInclusion>,
}

impl CirclePhantom {
    pub fn value_at(&self, p: [f64; 2]) -> f64 {
        let mut v = 1.0;
        for inc in &self.inclusions {
            let dx = p[0] - inc.center[0];
            let dy = p[1] - inc.center[1];
            if dx * dx + dy * dy <= inc.radius * inc.radius {
                v += inc.weight;
            }
        }
        v
    }
}

/// Draw a Four Circles medium.
///
/// A subset of the four quadrant slots is selected uniformly at random
/// (each slot an independent fair coin). Slot `i` (1-based) has weight `2i`,
/// center uniform in its quadrant box, and radius uniform in [0.1, 0.4].
pub fn sample_four_circles(seed: u64) -> CirclePhantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let included: Vec<bool> = (0..4).map(|_| rng.gen_bool(0.5)).collect();
    let boxes = [
        [[0.1, 0.4], [0.1, 0.4]],
        [[-0.4, -0.1], [0.1, 0.4]],
        [[-0.4, -0.1], [-0.4, -0.1]],
        [[0.1, 0.4], [-0.4, -0.1]],
    ];
    let mut inclusions = Vec::new();
    for i in 0..4 {
        if !included[i] {
            continue;
        }
        let cx = rng.gen_range(boxes[i][0][0]..boxes[i][0][1]);
        let cy = rng.gen_range(boxes[i][1][0]..boxes[i][1][1]);
        let r = rng.gen_range(0.1..0.4);
        inclusions.push(CircleInclusion {
            center: [cx, cy],
            radius: r,
            weight: 2.0 * (i + 1) as f64,
        });
    }
    CirclePhantom { inclusions }
}

/// One ellipse of a Shepp-Logan phantom. `intensity` is additive on top of
/// the unit background wherever the point falls inside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    /// Rotation in radians, counterclockwise.
    pub rotation: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let (s, c) = self.rotation.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_axes[0]).powi(2) + (v / self.semi_axes[1]).powi(2) <= 1.0
    }
}

/// Ellipse-composite head phantom remapped to a positive conductivity scale:
/// unit background outside the head, minimum value 0.2 between the skull rim
/// and the brain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SheppLoganPhantom {
    pub ellipses: Vec<Ellipse>,
}

impl SheppLoganPhantom {
    pub fn value_at(&self, p: [f64; 2]) -> f64 {
        let mut v = 1.0;
        for e in &self.ellipses {
            if e.contains(p) {
                v += e.intensity;
            }
        }
        v
    }

    pub fn head(&self) -> &Ellipse {
        &self.ellipses[0]
    }
}

/// Affine remap slope applied to the canonical X-ray intensities: the raw
/// head value 2.0 maps to conductivity 0.2 on a unit background.
pub const SHEPP_LOGAN_REMAP_SLOPE: f64 = -0.4;

/// Canonical ten-ellipse Shepp-Logan table: (cx, cy, a, b, angle deg, raw
/// intensity).
const CANONICAL_SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (0.0, 0.0, 0.69, 0.92, 0.0, 2.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.02),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.02),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.01),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.01),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.01),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.01),
    (0.0, -0.605, 0.023, 0.023, 0.0, 0.01),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.01),
];

/// The unperturbed phantom on the conductivity scale.
pub fn canonical_shepp_logan() -> SheppLoganPhantom {
    let ellipses = CANONICAL_SHEPP_LOGAN
        .iter()
        .map(|&(cx, cy, a, b, deg, raw)| Ellipse {
            center: [cx, cy],
            semi_axes: [a, b],
            rotation: deg.to_radians(),
            intensity: SHEPP_LOGAN_REMAP_SLOPE * raw,
        })
        .collect();
    SheppLoganPhantom { ellipses }
}

/// Randomization ranges for [`sample_shepp_logan`]. Zero ranges reproduce the
/// canonical phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SheppLoganPerturbation {
    /// Semi-axes scaled by `U(1 - axis_scale, 1 + axis_scale)`.
    pub axis_scale: f64,
    /// Centers shifted by `U(-center_shift, center_shift)` per coordinate.
    pub center_shift: f64,
    /// Rotations shifted by `U(-rotation_deg, rotation_deg)` degrees.
    pub rotation_deg: f64,
}

impl Default for SheppLoganPerturbation {
    fn default() -> Self {
        SheppLoganPerturbation {
            axis_scale: 0.1,
            center_shift: 0.05,
            rotation_deg: 10.0,
        }
    }
}

/// Draw a randomized Shepp-Logan phantom: each ellipse's axes, center, and
/// rotation are independently perturbed, resampling (up to 100 attempts)
/// whenever the head escapes the unit disk or an interior ellipse escapes
/// the head.
pub fn sample_shepp_logan(
    seed: u64,
    perturbation: &SheppLoganPerturbation,
) -> Result<SheppLoganPhantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let phantom = perturb_once(&mut rng, perturbation);
        if phantom_is_valid(&phantom) {
            return Ok(phantom);
        }
    }
    Err(CoreError::numerical(
        "no valid Shepp-Logan perturbation found in 100 attempts",
    ))
}

fn symmetric_uniform(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.gen_range(-half_width..half_width)
    }
}

fn perturb_once(rng: &mut ChaCha8Rng, p: &SheppLoganPerturbation) -> SheppLoganPhantom {
    let base = canonical_shepp_logan();
    let ellipses = base
        .ellipses
        .into_iter()
        .map(|mut e| {
            e.semi_axes[0] *= 1.0 + symmetric_uniform(rng, p.axis_scale);
            e.semi_axes[1] *= 1.0 + symmetric_uniform(rng, p.axis_scale);
            e.center[0] += symmetric_uniform(rng, p.center_shift);
            e.center[1] += symmetric_uniform(rng, p.center_shift);
            e.rotation += symmetric_uniform(rng, p.rotation_deg).to_radians();
            e
        })
        .collect();
    SheppLoganPhantom { ellipses }
}

fn phantom_is_valid(phantom: &SheppLoganPhantom) -> bool {
    let head = phantom.head();
    // Head confined to the unit disk (conservative bound).
    let reach = (head.center[0].powi(2) + head.center[1].powi(2)).sqrt()
        + head.semi_axes[0].max(head.semi_axes[1]);
    if reach > 1.0 {
        return false;
    }
    // Every interior ellipse fully inside the head, probed on 64 rim points.
    for e in &phantom.ellipses[1..] {
        for k in 0..64 {
            let t = std::f64::consts::TAU * k as f64 / 64.0;
            let (s, c) = e.rotation.sin_cos();
            let u = e.semi_axes[0] * t.cos();
            let v = e.semi_axes[1] * t.sin();
            let p = [
                e.center[0] + c * u - s * v,
                e.center[1] + s * u + c * v,
            ];
            if !head.contains(p) {
                return false;
            }
        }
    }
    true
}

/// Either phantom family, behind one evaluation interface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Phantom {
    Circles(CirclePhantom),
    SheppLogan(SheppLoganPhantom),
}

impl Phantom {
    pub fn value_at(&self, p: [f64; 2]) -> f64 {
        match self {
            Phantom::Circles(c) => c.value_at(p),
            Phantom::SheppLogan(s) => s.value_at(p),
        }
    }
}

/// Sample a phantom onto a mesh: one value per element, taken at the element
/// centroid.
pub fn phantom_to_mesh(phantom: &Phantom, mesh: &Mesh) -> Result<Conductivity> {
    let values = (0..mesh.n_elements())
        .map(|e| phantom.value_at(mesh.centroid(e)))
        .collect();
    Conductivity::new(values)
}
