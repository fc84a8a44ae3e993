//! Thin-plate-spline machinery: the differentiable transform behind both the
//! pixel-level warp loss and the warped skip connections.
//!
//! A transform is parameterized by 25 target control points (a 50-vector),
//! interpolated with the full Bookstein formulation (affine part plus radial
//! kernel `U(r) = r^2 log r^2`, zero at the origin). Sources sit on a fixed
//! regular 5x5 lattice over `[-1, 1]^2`, so the system matrix is factored
//! once and solving for coefficients is a single matrix product — and,
//! crucially, linear in theta, which makes the grid generator's gradient a
//! pair of transposed products.
//!
//! All grid coordinates are normalized to `[-1, 1]` with the align-corners
//! convention: corner pixels map to exactly ±1 at every resolution, so one
//! theta generates consistent grids at all scales.

use ndarray::{Array2, Array3};
use num_traits::Float;
use std::collections::HashMap;
use std::sync::Mutex;

use crate::error::{Error, Result};

pub const LATTICE_SIDE: usize = 5;
pub const NUM_CONTROL_POINTS: usize = LATTICE_SIDE * LATTICE_SIDE;
pub const THETA_LEN: usize = 2 * NUM_CONTROL_POINTS;

/// Fractional parts closer than this to a pixel boundary are snapped, so
/// numerically-identity grids reproduce the source exactly.
const SNAP_EPS: f64 = 1e-6;

/// 50-vector of TPS target control-point coordinates, interleaved
/// `[x0, y0, x1, y1, ...]` in normalized device coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsTheta {
    values: Vec<f64>,
}

impl TpsTheta {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != THETA_LEN {
            return Err(Error::contract(format!(
                "theta must have {} values, got {}",
                THETA_LEN,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("theta contains non-finite values"));
        }
        Ok(TpsTheta { values })
    }

    /// Targets coincide with the source lattice: the identity transform.
    pub fn identity() -> Self {
        let mut values = Vec::with_capacity(THETA_LEN);
        for (x, y) in lattice_points() {
            values.push(x);
            values.push(y);
        }
        TpsTheta { values }
    }

    pub fn is_identity(&self) -> bool {
        self.values == TpsTheta::identity().values
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Target coordinates of control point `k` (row-major on the lattice).
    pub fn point(&self, k: usize) -> (f64, f64) {
        (self.values[2 * k], self.values[2 * k + 1])
    }

    /// Identity lattice shifted by a constant offset.
    pub fn translated(dx: f64, dy: f64) -> Self {
        let mut t = TpsTheta::identity();
        for k in 0..NUM_CONTROL_POINTS {
            t.values[2 * k] += dx;
            t.values[2 * k + 1] += dy;
        }
        t
    }

    /// Identity lattice mapped through an affine transform
    /// `(x, y) -> (a x + b y + c, d x + e y + f)`.
    pub fn affine(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Self {
        let mut values = Vec::with_capacity(THETA_LEN);
        for (x, y) in lattice_points() {
            values.push(a * x + b * y + c);
            values.push(d * x + e * y + f);
        }
        TpsTheta { values }
    }

    /// Mean euclidean distance to another theta over the 25 control points.
    pub fn mean_point_distance(&self, other: &TpsTheta) -> f64 {
        (0..NUM_CONTROL_POINTS)
            .map(|k| {
                let (ax, ay) = self.point(k);
                let (bx, by) = other.point(k);
                ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
            })
            .sum::<f64>()
            / NUM_CONTROL_POINTS as f64
    }
}

/// Source control points, row-major over the regular 5x5 lattice.
pub fn lattice_points() -> Vec<(f64, f64)> {
    let step = 2.0 / (LATTICE_SIDE - 1) as f64;
    let mut pts = Vec::with_capacity(NUM_CONTROL_POINTS);
    for i in 0..LATTICE_SIDE {
        for j in 0..LATTICE_SIDE {
            pts.push((-1.0 + step * j as f64, -1.0 + step * i as f64));
        }
    }
    pts
}

/// `U(r) = r^2 log r^2`, extended by continuity with `U(0) = 0`.
#[inline]
fn kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// The fixed source lattice plus the factored TPS system.
///
/// `solve_map` is the first 25 columns of the inverted 28x28 Bookstein system
/// matrix; applying it to target coordinates yields radial weights and affine
/// terms in one product. Grid bases are cached per resolution.
pub struct ControlLattice {
    points: Vec<(f64, f64)>,
    solve_map: Array2<f64>,
    basis_cache: Mutex<HashMap<(usize, usize), std::sync::Arc<Array2<f64>>>>,
}

impl Default for ControlLattice {
    fn default() -> Self {
        Self::new()
    }
}

impl ControlLattice {
    pub fn new() -> Self {
        let points = lattice_points();
        let n = NUM_CONTROL_POINTS;
        let dim = n + 3;
        let mut l = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                let dx = points[i].0 - points[j].0;
                let dy = points[i].1 - points[j].1;
                l[(i, j)] = kernel(dx * dx + dy * dy);
            }
            l[(i, n)] = 1.0;
            l[(i, n + 1)] = points[i].0;
            l[(i, n + 2)] = points[i].1;
            l[(n, i)] = 1.0;
            l[(n + 1, i)] = points[i].0;
            l[(n + 2, i)] = points[i].1;
        }
        let inv = l
            .try_inverse()
            .expect("regular lattice yields an invertible TPS system");
        let mut solve_map = Array2::zeros((dim, n));
        for r in 0..dim {
            for c in 0..n {
                solve_map[[r, c]] = inv[(r, c)];
            }
        }
        ControlLattice {
            points,
            solve_map,
            basis_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn source_points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Radial-basis row `[U(|p - s_1|), ..., U(|p - s_25|), 1, x, y]`.
    fn basis_row(&self, x: f64, y: f64, row: &mut [f64]) {
        for (k, (sx, sy)) in self.points.iter().enumerate() {
            let dx = x - sx;
            let dy = y - sy;
            row[k] = kernel(dx * dx + dy * dy);
        }
        row[NUM_CONTROL_POINTS] = 1.0;
        row[NUM_CONTROL_POINTS + 1] = x;
        row[NUM_CONTROL_POINTS + 2] = y;
    }

    /// Basis matrix for the regular mesh of one resolution, `(h*w, 28)`,
    /// rows ordered row-major over output pixels.
    pub fn mesh_basis(&self, height: usize, width: usize) -> std::sync::Arc<Array2<f64>> {
        let mut cache = self.basis_cache.lock().unwrap();
        cache
            .entry((height, width))
            .or_insert_with(|| {
                let mut basis = Array2::zeros((height * width, NUM_CONTROL_POINTS + 3));
                for i in 0..height {
                    let y = mesh_coord(i, height);
                    for j in 0..width {
                        let x = mesh_coord(j, width);
                        let mut row = basis.row_mut(i * width + j);
                        self.basis_row(x, y, row.as_slice_mut().unwrap());
                    }
                }
                std::sync::Arc::new(basis)
            })
            .clone()
    }
}

/// Process-wide lattice instance. The lattice is fixed by construction, so
/// everything can share one factorization and one grid-basis cache.
pub fn shared_lattice() -> &'static ControlLattice {
    static LATTICE: std::sync::OnceLock<ControlLattice> = std::sync::OnceLock::new();
    LATTICE.get_or_init(ControlLattice::new)
}

/// Align-corners mesh coordinate of index `i` out of `n`.
#[inline]
pub fn mesh_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Radial weights (25 x 2) and affine terms (3 x 2) of a solved transform.
/// Column 0 produces x-coordinates, column 1 y-coordinates; affine rows are
/// the constant, x and y coefficients.
#[derive(Debug, Clone)]
pub struct TpsCoefficients {
    pub radial: Array2<f64>,
    pub affine: Array2<f64>,
}

impl TpsCoefficients {
    /// Evaluate the interpolant at one normalized point.
    pub fn evaluate(&self, lattice: &ControlLattice, x: f64, y: f64) -> (f64, f64) {
        let mut out = [
            self.affine[[0, 0]] + self.affine[[1, 0]] * x + self.affine[[2, 0]] * y,
            self.affine[[0, 1]] + self.affine[[1, 1]] * x + self.affine[[2, 1]] * y,
        ];
        for (k, (sx, sy)) in lattice.source_points().iter().enumerate() {
            let dx = x - sx;
            let dy = y - sy;
            let u = kernel(dx * dx + dy * dy);
            out[0] += self.radial[[k, 0]] * u;
            out[1] += self.radial[[k, 1]] * u;
        }
        (out[0], out[1])
    }
}

/// Solve for the coefficients that map each source control point exactly to
/// its theta target. Linear in theta, hence differentiable everywhere.
pub fn tps_solve(theta: &TpsTheta, lattice: &ControlLattice) -> TpsCoefficients {
    let n = NUM_CONTROL_POINTS;
    let mut targets = Array2::zeros((n, 2));
    for k in 0..n {
        let (x, y) = theta.point(k);
        targets[[k, 0]] = x;
        targets[[k, 1]] = y;
    }
    let full = lattice.solve_map.dot(&targets);
    TpsCoefficients {
        radial: full.slice(ndarray::s![..n, ..]).to_owned(),
        affine: full.slice(ndarray::s![n.., ..]).to_owned(),
    }
}

/// H×W×2 field of normalized source coordinates; last axis is `(x, y)`.
#[derive(Debug, Clone)]
pub struct SamplingGrid {
    pub coords: Array3<f64>,
    pub scale_id: usize,
}

impl SamplingGrid {
    pub fn height(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[1]
    }

    /// The identity grid: the regular mesh of its own resolution.
    pub fn identity(height: usize, width: usize) -> Self {
        let mut coords = Array3::zeros((height, width, 2));
        for i in 0..height {
            for j in 0..width {
                coords[[i, j, 0]] = mesh_coord(j, width);
                coords[[i, j, 1]] = mesh_coord(i, height);
            }
        }
        SamplingGrid { coords, scale_id: 0 }
    }
}

/// Evaluate the interpolant over the regular mesh of the given resolution.
/// The same coefficients may be evaluated at any resolution.
pub fn generate_grid(
    coeffs: &TpsCoefficients,
    lattice: &ControlLattice,
    height: usize,
    width: usize,
) -> SamplingGrid {
    assert!(height >= 1 && width >= 1);
    let basis = lattice.mesh_basis(height, width);
    let n = NUM_CONTROL_POINTS;
    let mut full = Array2::zeros((n + 3, 2));
    full.slice_mut(ndarray::s![..n, ..]).assign(&coeffs.radial);
    full.slice_mut(ndarray::s![n.., ..]).assign(&coeffs.affine);
    let flat = basis.dot(&full); // (h*w, 2)
    let coords = flat.into_shape_with_order((height, width, 2)).unwrap();
    SamplingGrid { coords, scale_id: 0 }
}

/// Grid generation fused as a single linear map from theta, plus its
/// transpose. These are what the training path uses.
pub fn grid_from_theta(
    theta: &TpsTheta,
    lattice: &ControlLattice,
    height: usize,
    width: usize,
) -> SamplingGrid {
    generate_grid(&tps_solve(theta, lattice), lattice, height, width)
}

/// Pull a grid cotangent back to theta: `d_theta = S^T B^T d_grid`.
pub fn grid_theta_vjp(
    lattice: &ControlLattice,
    height: usize,
    width: usize,
    d_grid: &Array3<f64>,
) -> Vec<f64> {
    assert_eq!(d_grid.shape(), [height, width, 2]);
    let basis = lattice.mesh_basis(height, width);
    let flat = d_grid
        .to_shape((height * width, 2))
        .unwrap()
        .to_owned();
    let d_full = basis.t().dot(&flat); // (28, 2)
    let d_targets = lattice.solve_map.t().dot(&d_full); // (25, 2)
    let mut d_theta = vec![0.0; THETA_LEN];
    for k in 0..NUM_CONTROL_POINTS {
        d_theta[2 * k] = d_targets[[k, 0]];
        d_theta[2 * k + 1] = d_targets[[k, 1]];
    }
    d_theta
}

/// Out-of-range handling for the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Clamp coordinates to the border (used for feature warps).
    Border,
    /// Treat everything outside as zero (used for pixel-level cloth warps).
    Zeros,
}

#[inline]
fn unnormalize<F: Float>(coord: F, n: usize) -> F {
    let half = F::from(0.5).unwrap();
    (coord + F::one()) * half * F::from(n - 1).unwrap()
}

#[inline]
fn split_coord<F: Float>(p: F) -> (isize, F) {
    let floor = p.floor();
    let mut i = floor.to_isize().unwrap();
    let mut frac = p - floor;
    let snap = F::from(SNAP_EPS).unwrap();
    if frac < snap {
        frac = F::zero();
    } else if frac > F::one() - snap {
        i += 1;
        frac = F::zero();
    }
    (i, frac)
}

#[inline]
fn fetch<F: Float>(src: &Array3<F>, c: usize, y: isize, x: isize, pad: PadMode) -> F {
    let (h, w) = (src.shape()[1] as isize, src.shape()[2] as isize);
    match pad {
        PadMode::Border => {
            let yc = y.clamp(0, h - 1) as usize;
            let xc = x.clamp(0, w - 1) as usize;
            src[[c, yc, xc]]
        }
        PadMode::Zeros => {
            if y < 0 || y >= h || x < 0 || x >= w {
                F::zero()
            } else {
                src[[c, y as usize, x as usize]]
            }
        }
    }
}

/// Bilinear interpolation of `source` `(C, H, W)` at every grid coordinate.
/// Output resolution equals the grid resolution.
pub fn bilinear_sample<F: Float>(
    source: &Array3<F>,
    grid: &SamplingGrid,
    pad: PadMode,
) -> Array3<F> {
    let (c, sh, sw) = (source.shape()[0], source.shape()[1], source.shape()[2]);
    let (h, w) = (grid.height(), grid.width());
    let mut out = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let gx = F::from(grid.coords[[i, j, 0]]).unwrap();
            let gy = F::from(grid.coords[[i, j, 1]]).unwrap();
            let (x0, fx) = split_coord(unnormalize(gx, sw));
            let (y0, fy) = split_coord(unnormalize(gy, sh));
            if fx == F::zero() && fy == F::zero() {
                for ch in 0..c {
                    out[[ch, i, j]] = fetch(source, ch, y0, x0, pad);
                }
                continue;
            }
            let one = F::one();
            let (w00, w01) = ((one - fx) * (one - fy), fx * (one - fy));
            let (w10, w11) = ((one - fx) * fy, fx * fy);
            for ch in 0..c {
                let v00 = fetch(source, ch, y0, x0, pad);
                let v01 = fetch(source, ch, y0, x0 + 1, pad);
                let v10 = fetch(source, ch, y0 + 1, x0, pad);
                let v11 = fetch(source, ch, y0 + 1, x0 + 1, pad);
                out[[ch, i, j]] = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11;
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`bilinear_sample`]: pulls an output cotangent
/// back to the source values and the grid coordinates.
pub fn bilinear_sample_vjp<F: Float + std::ops::AddAssign>(
    source: &Array3<F>,
    grid: &SamplingGrid,
    pad: PadMode,
    d_out: &Array3<F>,
) -> (Array3<F>, Array3<f64>) {
    let (c, sh, sw) = (source.shape()[0], source.shape()[1], source.shape()[2]);
    let (h, w) = (grid.height(), grid.width());
    let mut d_src = Array3::zeros((c, sh, sw));
    let mut d_grid = Array3::zeros((h, w, 2));
    let in_range = |y: isize, x: isize| y >= 0 && y < sh as isize && x >= 0 && x < sw as isize;
    for i in 0..h {
        for j in 0..w {
            let gx = F::from(grid.coords[[i, j, 0]]).unwrap();
            let gy = F::from(grid.coords[[i, j, 1]]).unwrap();
            let (x0, fx) = split_coord(unnormalize(gx, sw));
            let (y0, fy) = split_coord(unnormalize(gy, sh));
            let one = F::one();
            let weights = [
                (y0, x0, (one - fx) * (one - fy)),
                (y0, x0 + 1, fx * (one - fy)),
                (y0 + 1, x0, (one - fx) * fy),
                (y0 + 1, x0 + 1, fx * fy),
            ];
            let mut ddx = 0.0f64; // d out / d x_pixel, accumulated over channels
            let mut ddy = 0.0f64;
            for ch in 0..c {
                let g = d_out[[ch, i, j]];
                if g == F::zero() {
                    continue;
                }
                let v00 = fetch(source, ch, y0, x0, pad);
                let v01 = fetch(source, ch, y0, x0 + 1, pad);
                let v10 = fetch(source, ch, y0 + 1, x0, pad);
                let v11 = fetch(source, ch, y0 + 1, x0 + 1, pad);
                let gf = g.to_f64().unwrap();
                ddx += gf
                    * ((v01 - v00) * (one - fy) + (v11 - v10) * fy)
                        .to_f64()
                        .unwrap();
                ddy += gf
                    * ((v10 - v00) * (one - fx) + (v11 - v01) * fx)
                        .to_f64()
                        .unwrap();
                for &(yy, xx, wgt) in &weights {
                    if wgt == F::zero() {
                        continue;
                    }
                    match pad {
                        PadMode::Border => {
                            let yc = yy.clamp(0, sh as isize - 1) as usize;
                            let xc = xx.clamp(0, sw as isize - 1) as usize;
                            d_src[[ch, yc, xc]] += wgt * g;
                        }
                        PadMode::Zeros => {
                            if in_range(yy, xx) {
                                d_src[[ch, yy as usize, xx as usize]] += wgt * g;
                            }
                        }
                    }
                }
            }
            // chain through unnormalization: d x_pixel / d x_norm = (W-1)/2
            d_grid[[i, j, 0]] = ddx * (sw as f64 - 1.0) * 0.5;
            d_grid[[i, j, 1]] = ddy * (sh as f64 - 1.0) * 0.5;
        }
    }
    (d_src, d_grid)
}

/// Warp one image or feature map by theta at its own resolution.
pub fn warp<F: Float>(
    theta: &TpsTheta,
    lattice: &ControlLattice,
    source: &Array3<F>,
    pad: PadMode,
) -> Array3<F> {
    // Identity theta is an exact no-op by definition; skip the resampling.
    if theta.is_identity() {
        return source.clone();
    }
    let grid = grid_from_theta(theta, lattice, source.shape()[1], source.shape()[2]);
    bilinear_sample(source, &grid, pad)
}

/// Warp every level of a feature pyramid with grids generated from the single
/// shared theta at each level's own resolution.
pub fn warp_multiscale<F: Float>(
    theta: &TpsTheta,
    lattice: &ControlLattice,
    pyramid: &[Array3<F>],
    pad: PadMode,
) -> Vec<Array3<F>> {
    pyramid.iter().map(|level| warp(theta, lattice, level, pad)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_theta(seed: u64, magnitude: f64) -> TpsTheta {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = TpsTheta::identity();
        let v: Vec<f64> = t
            .values()
            .iter()
            .map(|v| v + rng.gen_range(-magnitude..magnitude))
            .collect();
        t = TpsTheta::from_values(v).unwrap();
        t
    }

    #[test]
    fn identity_theta_solves_to_identity_affine() {
        let lattice = ControlLattice::new();
        let coeffs = tps_solve(&TpsTheta::identity(), &lattice);
        for k in 0..NUM_CONTROL_POINTS {
            assert_abs_diff_eq!(coeffs.radial[[k, 0]], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(coeffs.radial[[k, 1]], 0.0, epsilon = 1e-12);
        }
        let expect = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        for r in 0..3 {
            for c in 0..2 {
                assert_abs_diff_eq!(coeffs.affine[[r, c]], expect[r][c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn translation_theta_is_pure_affine() {
        let lattice = ControlLattice::new();
        let coeffs = tps_solve(&TpsTheta::translated(0.1, 0.0), &lattice);
        for k in 0..NUM_CONTROL_POINTS {
            assert!(coeffs.radial[[k, 0]].abs() <= 1e-10);
            assert!(coeffs.radial[[k, 1]].abs() <= 1e-10);
        }
        assert_abs_diff_eq!(coeffs.affine[[0, 0]], 0.1, epsilon = 1e-10);
        assert_abs_diff_eq!(coeffs.affine[[1, 0]], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(coeffs.affine[[0, 1]], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn random_theta_interpolates_control_points_exactly() {
        // Direct evaluation oracle: the solved interpolant must hit every
        // theta target when evaluated at its source control point.
        let lattice = ControlLattice::new();
        let theta = rand_theta(7, 0.3);
        let coeffs = tps_solve(&theta, &lattice);
        for (k, (sx, sy)) in lattice.source_points().iter().enumerate() {
            let (fx, fy) = coeffs.evaluate(&lattice, *sx, *sy);
            let (tx, ty) = theta.point(k);
            assert!((fx - tx).abs() <= 1e-9, "point {k}: {fx} vs {tx}");
            assert!((fy - ty).abs() <= 1e-9, "point {k}: {fy} vs {ty}");
        }
    }

    #[test]
    fn identity_grid_is_regular_mesh() {
        let lattice = ControlLattice::new();
        let coeffs = tps_solve(&TpsTheta::identity(), &lattice);
        let grid = generate_grid(&coeffs, &lattice, 8, 6);
        let mesh = SamplingGrid::identity(8, 6);
        let max = grid
            .coords
            .iter()
            .zip(mesh.coords.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max <= 1e-6, "max deviation {max}");
    }

    #[test]
    fn translation_grid_is_shifted_mesh() {
        let lattice = ControlLattice::new();
        let coeffs = tps_solve(&TpsTheta::translated(0.1, 0.0), &lattice);
        let grid = generate_grid(&coeffs, &lattice, 16, 12);
        for i in 0..16 {
            for j in 0..12 {
                assert_abs_diff_eq!(
                    grid.coords[[i, j, 0]],
                    mesh_coord(j, 12) + 0.1,
                    epsilon = 1e-9
                );
                assert_abs_diff_eq!(grid.coords[[i, j, 1]], mesh_coord(i, 16), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn grids_agree_at_coincident_mesh_points() {
        let lattice = ControlLattice::new();
        let theta = rand_theta(11, 0.2);
        let coeffs = tps_solve(&theta, &lattice);
        let coarse = generate_grid(&coeffs, &lattice, 8, 6);
        let fine = generate_grid(&coeffs, &lattice, 16, 12);
        let mut checked = 0;
        for i in 0..8 {
            for j in 0..6 {
                let (y, x) = (mesh_coord(i, 8), mesh_coord(j, 6));
                for fi in 0..16 {
                    for fj in 0..12 {
                        if (mesh_coord(fi, 16) - y).abs() < 1e-12
                            && (mesh_coord(fj, 12) - x).abs() < 1e-12
                        {
                            for d in 0..2 {
                                assert!(
                                    (coarse.coords[[i, j, d]] - fine.coords[[fi, fj, d]]).abs()
                                        <= 1e-5
                                );
                            }
                            checked += 1;
                        }
                    }
                }
            }
        }
        assert!(checked >= 4, "expected at least the four corners to coincide");
        // Nested resolutions share every coarse mesh point.
        let nested = generate_grid(&coeffs, &lattice, 15, 11);
        for i in 0..8 {
            for j in 0..6 {
                for d in 0..2 {
                    assert!(
                        (coarse.coords[[i, j, d]] - nested.coords[[2 * i, 2 * j, d]]).abs() <= 1e-5
                    );
                }
            }
        }
    }

    #[test]
    fn bilinear_identity_returns_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = Array3::from_shape_fn((3, 9, 7), |_| rng.gen_range(-1.0f64..1.0));
        let grid = SamplingGrid::identity(9, 7);
        let out = bilinear_sample(&src, &grid, PadMode::Border);
        let max = out
            .iter()
            .zip(src.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max <= 1e-6);
    }

    #[test]
    fn bilinear_constant_image_stays_constant() {
        let src = Array3::from_elem((2, 5, 5), 0.7f64);
        let mut grid = SamplingGrid::identity(4, 4);
        // arbitrary in-range coordinates
        grid.coords[[1, 2, 0]] = 0.31;
        grid.coords[[1, 2, 1]] = -0.72;
        grid.coords[[3, 3, 0]] = -0.99;
        let out = bilinear_sample(&src, &grid, PadMode::Border);
        for v in out.iter() {
            assert_abs_diff_eq!(*v, 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn bilinear_center_of_2x2_is_mean() {
        // [[0,1],[2,3]] sampled at the exact center -> 1.5
        let src = Array3::from_shape_vec((1, 2, 2), vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let mut grid = SamplingGrid::identity(1, 1);
        grid.coords[[0, 0, 0]] = 0.0;
        grid.coords[[0, 0, 1]] = 0.0;
        let out = bilinear_sample(&src, &grid, PadMode::Zeros);
        assert_abs_diff_eq!(out[[0, 0, 0]], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn warp_multiscale_identity_and_constant() {
        let lattice = ControlLattice::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pyramid: Vec<Array3<f64>> = [(16usize, 12usize), (8, 6), (4, 3), (2, 2), (1, 1)]
            .iter()
            .map(|&(h, w)| Array3::from_shape_fn((4, h, w), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let warped = warp_multiscale(&TpsTheta::identity(), &lattice, &pyramid, PadMode::Border);
        for (a, b) in warped.iter().zip(pyramid.iter()) {
            let max = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max <= 1e-5);
        }
        // constant maps survive any theta under border padding
        let theta = rand_theta(9, 0.25);
        let consts: Vec<Array3<f64>> = vec![Array3::from_elem((2, 8, 8), 0.25)];
        let warped = warp_multiscale(&theta, &lattice, &consts, PadMode::Border);
        for v in warped[0].iter() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-9);
        }
    }

    #[test]
    fn translation_displaces_impulse() {
        // A +0.1 x-translation of the sampling grid means output pixel (i, j)
        // reads source at x + 0.1: the impulse appears shifted left by the
        // pixel equivalent of 0.1 normalized units in the output.
        let lattice = ControlLattice::new();
        let theta = TpsTheta::translated(0.1, 0.0);
        let w = 21usize;
        let mut src = Array3::<f64>::zeros((1, 5, w));
        src[[0, 2, 10]] = 1.0; // impulse at x=10, the exact center
        let warped = warp(&theta, &lattice, &src, PadMode::Zeros);
        // 0.1 normalized units = 0.1 * (w-1)/2 = 1 pixel exactly
        let mut best = (0usize, 0.0f64);
        for j in 0..w {
            if warped[[0, 2, j]] > best.1 {
                best = (j, warped[[0, 2, j]]);
            }
        }
        assert_eq!(best.0, 9, "impulse should move one pixel against the shift");
        assert!(best.1 > 0.9);
    }

    #[test]
    fn gradient_check_bilinear_and_grid() {
        // Analytic VJPs vs central finite differences at f64, away from
        // pixel-boundary kinks.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for pad in [PadMode::Border, PadMode::Zeros] {
            let src = Array3::from_shape_fn((2, 8, 8), |_| rng.gen_range(-1.0f64..1.0));
            let mut grid = SamplingGrid::identity(8, 8);
            for v in grid.coords.iter_mut() {
                // keep fractional parts well inside (0, 1)
                *v += rng.gen_range(0.03..0.11);
            }
            let d_out = Array3::from_shape_fn((2, 8, 8), |_| rng.gen_range(-1.0f64..1.0));
            let loss = |s: &Array3<f64>, g: &SamplingGrid| -> f64 {
                bilinear_sample(s, g, pad)
                    .iter()
                    .zip(d_out.iter())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let (d_src, d_grid) = bilinear_sample_vjp(&src, &grid, pad, &d_out);
            let eps = 1e-6;
            for idx in [[0usize, 3, 4], [1, 0, 0], [0, 7, 7], [1, 5, 2]] {
                let mut plus = src.clone();
                plus[idx] += eps;
                let mut minus = src.clone();
                minus[idx] -= eps;
                let fd = (loss(&plus, &grid) - loss(&minus, &grid)) / (2.0 * eps);
                let an = d_src[idx];
                assert!(
                    (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1.0),
                    "src grad mismatch {fd} vs {an}"
                );
            }
            for idx in [[2usize, 3, 0], [5, 5, 1], [0, 1, 0], [7, 6, 1]] {
                let mut plus = grid.clone();
                plus.coords[idx] += eps;
                let mut minus = grid.clone();
                minus.coords[idx] -= eps;
                let fd = (loss(&src, &plus) - loss(&src, &minus)) / (2.0 * eps);
                let an = d_grid[idx];
                assert!(
                    (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1.0),
                    "grid grad mismatch {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn gradient_check_grid_from_theta() {
        let lattice = ControlLattice::new();
        let theta = rand_theta(23, 0.15);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let d_grid = Array3::from_shape_fn((8, 8, 2), |_| rng.gen_range(-1.0f64..1.0));
        let d_theta = grid_theta_vjp(&lattice, 8, 8, &d_grid);
        let loss = |t: &TpsTheta| -> f64 {
            grid_from_theta(t, &lattice, 8, 8)
                .coords
                .iter()
                .zip(d_grid.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let eps = 1e-6;
        for k in (0..THETA_LEN).step_by(7) {
            let mut vp = theta.values().to_vec();
            vp[k] += eps;
            let mut vm = theta.values().to_vec();
            vm[k] -= eps;
            let fd = (loss(&TpsTheta::from_values(vp).unwrap())
                - loss(&TpsTheta::from_values(vm).unwrap()))
                / (2.0 * eps);
            assert!(
                (fd - d_theta[k]).abs() <= 1e-3 * fd.abs().max(d_theta[k].abs()).max(1.0),
                "theta grad mismatch at {k}: {fd} vs {}",
                d_theta[k]
            );
        }
    }

    #[test]
    fn small_warps_do_not_fold() {
        // Positive jacobian determinant on a 32x24 mesh for theta within 0.2
        // of identity: the grid stays orientation-preserving.
        let lattice = ControlLattice::new();
        for seed in 0..5u64 {
            let theta = rand_theta(seed, 0.2);
            let grid = grid_from_theta(&theta, &lattice, 32, 24);
            for i in 0..31 {
                for j in 0..23 {
                    let dx_j = grid.coords[[i, j + 1, 0]] - grid.coords[[i, j, 0]];
                    let dy_j = grid.coords[[i, j + 1, 1]] - grid.coords[[i, j, 1]];
                    let dx_i = grid.coords[[i + 1, j, 0]] - grid.coords[[i, j, 0]];
                    let dy_i = grid.coords[[i + 1, j, 1]] - grid.coords[[i, j, 1]];
                    let det = dx_j * dy_i - dy_j * dx_i;
                    assert!(det > 0.0, "fold-over at ({i},{j}) seed {seed}: det={det}");
                }
            }
        }
    }

    #[test]
    fn affine_exactness_on_interior_mesh() {
        let lattice = ControlLattice::new();
        let theta = TpsTheta::affine(1.1, 0.12, -0.05, -0.2, 0.93, 0.08);
        let grid = grid_from_theta(&theta, &lattice, 16, 16);
        for i in 1..15 {
            for j in 1..15 {
                let (x, y) = (mesh_coord(j, 16), mesh_coord(i, 16));
                let ex = 1.1 * x + 0.12 * y - 0.05;
                let ey = -0.2 * x + 0.93 * y + 0.08;
                assert!((grid.coords[[i, j, 0]] - ex).abs() <= 1e-4);
                assert!((grid.coords[[i, j, 1]] - ey).abs() <= 1e-4);
            }
        }
    }
}
