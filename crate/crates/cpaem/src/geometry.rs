//! The latent-space polytope partition of a CPA network.
//!
//! Fixing an activation code `q` turns every hidden unit `(l, k)` into a
//! half-space constraint on the latent point: the unit's pre-activation
//! `h^l_k(z)` is affine in `z` on the region, and the code demands
//! `q^l_k · h^l_k(z) ≥ 0`. The set of latent points realizing a code is the
//! intersection of those half-spaces — a convex polytope. This module builds
//! those H-representations, walks the partition graph (flipping one facet
//! sign at a time), and prepares regions for exact Gaussian integration:
//! vertex enumeration, triangulation into simplices, and the signed
//! inclusion–exclusion decomposition of each simplex into "orthant-style"
//! pieces with at most `S` half-space constraints, which the
//! [`crate::gaussian`] module integrates in closed form.
//!
//! Everything is clipped to a bounding box `‖z‖_∞ ≤ radius` chosen so the
//! latent prior's mass outside is negligible; regions touching the box are
//! flagged `clipped`.

use std::collections::{HashMap, HashSet, VecDeque};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lp::{self, LpResult};
use crate::network::{ActivationCode, AffineMap, GenerativeNetwork};

/// Where a half-space row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceOrigin {
    /// The activation hyperplane of hidden layer `layer`, unit `unit`.
    Unit {
        /// Hidden layer index (0-based).
        layer: usize,
        /// Unit index within the layer.
        unit: usize,
    },
    /// A bounding-box face `±z_dim ≤ radius`.
    BoundingBox {
        /// Latent coordinate.
        dim: usize,
        /// `true` for `z_dim ≤ r`, `false` for `−z_dim ≤ r`.
        upper: bool,
    },
}

impl FaceOrigin {
    /// Whether the face is a box face (no neighbor across it).
    pub fn is_box(&self) -> bool {
        matches!(self, FaceOrigin::BoundingBox { .. })
    }
}

/// A polytope `{z : normals · z ≤ offsets}` with unit-norm rows and a face
/// origin per row.
#[derive(Debug, Clone)]
pub struct PolytopeH {
    /// Row-per-face normal matrix, `F × S`, rows unit norm.
    pub normals: DMatrix<f64>,
    /// Right-hand sides, length `F`.
    pub offsets: DVector<f64>,
    /// Provenance of each row.
    pub origins: Vec<FaceOrigin>,
    /// Set when a zero-normal row with a negative offset proved the region
    /// empty at construction time (no LP needed).
    pub infeasible: bool,
}

impl PolytopeH {
    /// Number of faces.
    pub fn num_faces(&self) -> usize {
        self.normals.nrows()
    }

    /// Ambient dimension.
    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    /// Whether `z` satisfies every face up to `tol`.
    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        !self.infeasible
            && (0..self.num_faces()).all(|i| self.normals.row(i).transpose().dot(z) <= self.offsets[i] + tol)
    }
}

/// Interior-point margin below which a region is treated as empty.
pub const EMPTY_MARGIN: f64 = 1e-9;
/// Slack used when testing a face for redundancy.
const REDUNDANCY_TOL: f64 = 1e-9;
/// Tolerance for merging duplicate faces and vertices.
const MERGE_TOL: f64 = 1e-7;
/// Feasibility slack for vertex candidates.
const VERTEX_FEAS_TOL: f64 = 1e-8;

/// The half-space representation of the region with activation code `code`,
/// clipped to `‖z‖_∞ ≤ bounding_radius`.
///
/// Hidden unit `(l, k)` with coded sign `q` contributes the row
/// `(−q·a_k)·z ≤ q·b_k` where `h^l(z) = A z + b` is the partial affine map of
/// layer `l` on this region. Rows are normalized to unit norm; zero-normal
/// rows are vacuous (dropped) when their offset permits `0 ≤ offset`, and
/// prove the region empty otherwise.
pub fn region_hrep(
    net: &GenerativeNetwork,
    code: &ActivationCode,
    bounding_radius: f64,
) -> PolytopeH {
    let s = net.latent_dim();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut offsets: Vec<f64> = Vec::new();
    let mut origins: Vec<FaceOrigin> = Vec::new();
    let mut infeasible = false;

    for l in 0..net.depth() - 1 {
        if !net.layers()[l].activation.branches() {
            continue;
        }
        let part = net.partial_affine(code, l);
        for k in 0..part.a.nrows() {
            let q = f64::from(code.signs[l][k]);
            let a_k = part.a.row(k).transpose();
            let norm = a_k.norm();
            if norm <= 1e-12 {
                // Constant constraint q·b_k ≥ 0: either vacuous or impossible.
                if q * part.b[k] < -1e-12 {
                    infeasible = true;
                }
                continue;
            }
            rows.push(-(q / norm) * a_k);
            offsets.push(q * part.b[k] / norm);
            origins.push(FaceOrigin::Unit { layer: l, unit: k });
        }
    }
    for d in 0..s {
        let mut up = DVector::zeros(s);
        up[d] = 1.0;
        rows.push(up.clone());
        offsets.push(bounding_radius);
        origins.push(FaceOrigin::BoundingBox { dim: d, upper: true });
        rows.push(-up);
        offsets.push(bounding_radius);
        origins.push(FaceOrigin::BoundingBox { dim: d, upper: false });
    }

    let f = rows.len();
    let normals = DMatrix::from_fn(f, s, |i, j| rows[i][j]);
    PolytopeH {
        normals,
        offsets: DVector::from_vec(offsets),
        origins,
        infeasible,
    }
}

/// Chebyshev center of the polytope: the deepest interior point and its
/// margin (radius of the largest inscribed ball). `None` when the polytope is
/// empty or the margin is below [`EMPTY_MARGIN`].
pub fn interior_point(poly: &PolytopeH) -> Result<Option<(DVector<f64>, f64)>> {
    if poly.infeasible {
        return Ok(None);
    }
    let s = poly.dim();
    let f = poly.num_faces();
    // Variables (z, t): maximize t s.t. n_i·z + t ≤ c_i (rows are unit norm).
    let mut a = DMatrix::zeros(f, s + 1);
    a.view_mut((0, 0), (f, s)).copy_from(&poly.normals);
    for i in 0..f {
        a[(i, s)] = 1.0;
    }
    let mut c = DVector::zeros(s + 1);
    c[s] = 1.0;
    match lp::solve_max(&c, &a, &poly.offsets)? {
        LpResult::Optimal { x, value } => {
            if value <= EMPTY_MARGIN {
                Ok(None)
            } else {
                Ok(Some((x.rows(0, s).into_owned(), value)))
            }
        }
        LpResult::Infeasible => Ok(None),
        LpResult::Unbounded => Err(Error::Numerical(
            "Chebyshev LP unbounded: polytope lacks bounding-box rows".into(),
        )),
    }
}

/// Drop redundant faces, keeping exactly one representative of duplicated
/// hyperplanes and every face whose removal would enlarge the polytope.
///
/// Duplicates (same unit normal and offset within tolerance) are merged
/// first — the pairwise LP test would otherwise discard *both* copies — then
/// each surviving row is kept iff maximizing its normal direction subject to
/// the other surviving rows exceeds its offset.
pub fn reduce_inequalities(poly: &PolytopeH) -> Result<PolytopeH> {
    if poly.infeasible || poly.num_faces() == 0 {
        return Ok(poly.clone());
    }
    let f = poly.num_faces();
    let s = poly.dim();
    let mut active = vec![true; f];

    // Merge near-identical rows (first occurrence wins).
    for i in 0..f {
        if !active[i] {
            continue;
        }
        for j in i + 1..f {
            if !active[j] {
                continue;
            }
            let dn = (poly.normals.row(i) - poly.normals.row(j)).abs().max();
            let dc = (poly.offsets[i] - poly.offsets[j]).abs();
            if dn <= MERGE_TOL && dc <= MERGE_TOL {
                active[j] = false;
            }
        }
    }

    // Sequential LP redundancy removal against the surviving set.
    for i in 0..f {
        if !active[i] {
            continue;
        }
        let others: Vec<usize> = (0..f).filter(|&j| j != i && active[j]).collect();
        if others.is_empty() {
            continue;
        }
        let a = DMatrix::from_fn(others.len(), s, |r, c| poly.normals[(others[r], c)]);
        let b = DVector::from_fn(others.len(), |r, _| poly.offsets[others[r]]);
        let dir = poly.normals.row(i).transpose();
        match lp::solve_max(&dir, &a, &b)? {
            LpResult::Optimal { value, .. } => {
                if value <= poly.offsets[i] + REDUNDANCY_TOL {
                    active[i] = false;
                }
            }
            LpResult::Unbounded => {} // removal would unbound the polytope: keep
            LpResult::Infeasible => {
                // A relaxation of a nonempty region cannot be infeasible; the
                // caller checks emptiness before reducing.
                return Err(Error::Numerical(
                    "redundancy LP infeasible on a relaxed system".into(),
                ));
            }
        }
    }

    let kept: Vec<usize> = (0..f).filter(|&i| active[i]).collect();
    Ok(PolytopeH {
        normals: DMatrix::from_fn(kept.len(), s, |r, c| poly.normals[(kept[r], c)]),
        offsets: DVector::from_fn(kept.len(), |r, _| poly.offsets[kept[r]]),
        origins: kept.iter().map(|&i| poly.origins[i]).collect(),
        infeasible: false,
    })
}

/// One region of the latent partition.
#[derive(Debug, Clone)]
pub struct Region {
    /// The activation code realized on this region.
    pub code: ActivationCode,
    /// Reduced H-representation (facets only, plus binding box faces).
    pub hrep: PolytopeH,
    /// Chebyshev center.
    pub interior: DVector<f64>,
    /// Chebyshev radius.
    pub margin: f64,
    /// The affine map the network computes here (`A_ω`, `b_ω`).
    pub affine: AffineMap,
    /// Whether a bounding-box face is binding (the true region extends
    /// beyond the box).
    pub clipped: bool,
}

/// The latent partition: all nonempty regions inside the bounding box.
#[derive(Debug, Clone)]
pub struct Partition {
    /// Regions in discovery (BFS) order — the deterministic iteration order.
    pub regions: Vec<Region>,
    index: HashMap<ActivationCode, usize>,
    /// Clipping radius used during enumeration.
    pub bounding_radius: f64,
}

impl Partition {
    /// Number of regions.
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    /// Whether the partition is empty (never true for a valid network).
    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Index of the region carrying `code`.
    pub fn find(&self, code: &ActivationCode) -> Option<usize> {
        self.index.get(code).copied()
    }

    /// Index of the region containing `z` (via its activation code).
    pub fn locate(&self, net: &GenerativeNetwork, z: &DVector<f64>) -> Option<usize> {
        self.find(&net.activation_code(z))
    }
}

/// Enumerate every nonempty region of the partition inside the bounding box
/// by breadth-first sign flips: starting from the code of `z = 0`, each
/// discovered region contributes one candidate neighbor per non-box facet
/// (flip that facet's unit sign); empty candidates are skipped silently.
///
/// Errors with [`Error::Resource`] if more than `max_regions` regions are
/// discovered.
pub fn enumerate_partition(
    net: &GenerativeNetwork,
    bounding_radius: f64,
    max_regions: usize,
) -> Result<Partition> {
    let s = net.latent_dim();
    let seed_code = net.activation_code(&DVector::zeros(s));

    let mut regions: Vec<Region> = Vec::new();
    let mut index: HashMap<ActivationCode, usize> = HashMap::new();
    let mut seen: HashSet<ActivationCode> = HashSet::new();
    let mut queue: VecDeque<ActivationCode> = VecDeque::new();
    seen.insert(seed_code.clone());
    queue.push_back(seed_code);

    while let Some(code) = queue.pop_front() {
        let hrep = region_hrep(net, &code, bounding_radius);
        let Some((interior, margin)) = interior_point(&hrep)? else {
            continue; // empty candidate: skip silently
        };
        let reduced = reduce_inequalities(&hrep)?;
        let clipped = reduced.origins.iter().any(FaceOrigin::is_box);
        debug_assert_eq!(
            net.activation_code(&interior),
            code,
            "interior point must reproduce the region code"
        );

        for origin in &reduced.origins {
            if let FaceOrigin::Unit { layer, unit } = *origin {
                let neighbor = code.flipped(layer, unit);
                if seen.insert(neighbor.clone()) {
                    queue.push_back(neighbor);
                }
            }
        }

        let affine = net.per_region_affine(&code);
        index.insert(code.clone(), regions.len());
        regions.push(Region {
            code,
            hrep: reduced,
            interior,
            margin,
            affine,
            clipped,
        });
        if regions.len() > max_regions {
            return Err(Error::Resource(format!(
                "partition exceeded the region cap ({max_regions})"
            )));
        }
    }

    Ok(Partition {
        regions,
        index,
        bounding_radius,
    })
}

/// All vertices of a (reduced, bounded) polytope by exhaustive intersection
/// of `S`-subsets of faces, keeping feasible solutions and merging nearby
/// duplicates. Output is sorted lexicographically for determinism.
pub fn vertex_enumeration(poly: &PolytopeH) -> Vec<DVector<f64>> {
    let s = poly.dim();
    let f = poly.num_faces();
    let mut vertices: Vec<DVector<f64>> = Vec::new();
    let mut subset = vec![0usize; s];
    enumerate_subsets(f, s, &mut subset, 0, 0, &mut |rows: &[usize]| {
        let a = DMatrix::from_fn(s, s, |i, j| poly.normals[(rows[i], j)]);
        let b = DVector::from_fn(s, |i, _| poly.offsets[rows[i]]);
        let lu = a.lu();
        if lu.determinant().abs() < 1e-10 {
            return;
        }
        if let Some(v) = lu.solve(&b) {
            if poly.contains(&v, VERTEX_FEAS_TOL)
                && !vertices.iter().any(|u| (u - &v).abs().max() <= MERGE_TOL)
            {
                vertices.push(v);
            }
        }
    });
    vertices.sort_by(|a, b| {
        for i in 0..s {
            match a[i].partial_cmp(&b[i]).expect("finite vertex coords") {
                std::cmp::Ordering::Equal => continue,
                ord => return ord,
            }
        }
        std::cmp::Ordering::Equal
    });
    vertices
}

/// Call `f` on every size-`k` subset of `0..n` (lexicographic order).
fn enumerate_subsets(
    n: usize,
    k: usize,
    subset: &mut Vec<usize>,
    depth: usize,
    start: usize,
    f: &mut impl FnMut(&[usize]),
) {
    if depth == k {
        f(subset);
        return;
    }
    for i in start..n {
        subset[depth] = i;
        enumerate_subsets(n, k, subset, depth + 1, i + 1, f);
    }
}

/// A nondegenerate `S`-simplex given by its `S+1` vertices.
#[derive(Debug, Clone)]
pub struct Simplex {
    /// The vertices.
    pub vertices: Vec<DVector<f64>>,
}

impl Simplex {
    /// Ambient (and intrinsic) dimension.
    pub fn dim(&self) -> usize {
        self.vertices.len() - 1
    }

    /// Lebesgue volume `|det[v_1−v_0, …, v_S−v_0]| / S!`.
    pub fn volume(&self) -> f64 {
        let s = self.dim();
        let m = DMatrix::from_fn(s, s, |i, j| self.vertices[j + 1][i] - self.vertices[0][i]);
        let mut fact = 1.0;
        for i in 1..=s {
            fact *= i as f64;
        }
        m.determinant().abs() / fact
    }

    /// The `S+1` facet half-spaces `{z : n_j · z ≤ c_j}` (unit normals),
    /// where facet `j` is spanned by all vertices except `v_j` and oriented
    /// so `v_j` (hence the interior) is on the `≤` side.
    pub fn halfspaces(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let s = self.dim();
        let mut normals = DMatrix::zeros(s + 1, s);
        let mut offsets = DVector::zeros(s + 1);
        for j in 0..=s {
            let face: Vec<&DVector<f64>> = (0..=s).filter(|&i| i != j).map(|i| &self.vertices[i]).collect();
            let diffs: Vec<DVector<f64>> = face[1..].iter().map(|v| *v - face[0]).collect();
            let complement = orthonormal_complement(&diffs, s)?;
            if complement.len() != 1 {
                return Err(Error::Numerical("degenerate simplex facet".into()));
            }
            let mut n = complement.into_iter().next().expect("one normal");
            let mut c = n.dot(face[0]);
            // Orient the opposite vertex to the interior side.
            if n.dot(&self.vertices[j]) > c {
                n = -n;
                c = -c;
            }
            normals.row_mut(j).copy_from(&n.transpose());
            offsets[j] = c;
        }
        Ok((normals, offsets))
    }
}

/// An orthonormal basis of the orthogonal complement of `span(rows)` in
/// `ℝ^dim`, via Gram–Schmidt over the standard basis (deterministic; exact
/// enough for the `dim ≤ 3` geometry this crate works at).
fn orthonormal_complement(rows: &[DVector<f64>], dim: usize) -> Result<Vec<DVector<f64>>> {
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(dim);
    for r in rows {
        let mut v = r.clone();
        for b in &basis {
            let p = b.dot(&v);
            v -= p * b;
        }
        let n = v.norm();
        if n < 1e-10 {
            return Err(Error::Numerical(
                "dependent rows in orthonormal complement".into(),
            ));
        }
        basis.push(v / n);
    }
    let rank = basis.len();
    let mut complement = Vec::with_capacity(dim - rank);
    for d in 0..dim {
        if basis.len() == dim {
            break;
        }
        let mut v = DVector::zeros(dim);
        v[d] = 1.0;
        for b in &basis {
            let p = b.dot(&v);
            v -= p * b;
        }
        let n = v.norm();
        if n > 1e-8 {
            let v = v / n;
            complement.push(v.clone());
            basis.push(v);
        }
    }
    if basis.len() != dim {
        return Err(Error::Numerical("orthonormal completion failed".into()));
    }
    Ok(complement)
}

/// Triangulate a convex polytope (given by its reduced H-rep and vertices)
/// into simplices that tile it: a fan from the first vertex over every facet
/// not containing it, with facets themselves fanned in their own plane.
/// Zero-volume simplices are dropped.
pub fn triangulate(poly: &PolytopeH, vertices: &[DVector<f64>]) -> Result<Vec<Simplex>> {
    let s = poly.dim();
    if vertices.len() < s + 1 {
        return Ok(Vec::new()); // lower-dimensional: measure zero
    }
    match s {
        1 => {
            let mut vs: Vec<f64> = vertices.iter().map(|v| v[0]).collect();
            vs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let lo = vs[0];
            let hi = *vs.last().expect("nonempty");
            if hi - lo <= 0.0 {
                return Ok(Vec::new());
            }
            Ok(vec![Simplex {
                vertices: vec![DVector::from_element(1, lo), DVector::from_element(1, hi)],
            }])
        }
        2 => {
            let ordered = sort_by_angle(vertices, None);
            let mut out = Vec::new();
            for i in 1..ordered.len() - 1 {
                let tri = Simplex {
                    vertices: vec![ordered[0].clone(), ordered[i].clone(), ordered[i + 1].clone()],
                };
                if tri.volume() > 1e-14 {
                    out.push(tri);
                }
            }
            Ok(out)
        }
        3 => {
            let apex = &vertices[0];
            let mut out = Vec::new();
            for face in 0..poly.num_faces() {
                let n = poly.normals.row(face).transpose();
                let c = poly.offsets[face];
                // Vertices incident to this facet.
                let incident: Vec<DVector<f64>> = vertices
                    .iter()
                    .filter(|v| (n.dot(v) - c).abs() <= MERGE_TOL * 10.0)
                    .cloned()
                    .collect();
                if incident.len() < 3 {
                    continue; // not a 2-face of the polytope
                }
                if (n.dot(apex) - c).abs() <= MERGE_TOL * 10.0 {
                    continue; // apex lies on the facet: fan is flat
                }
                // Fan the facet polygon in its own plane.
                let basis = orthonormal_complement(&[n.clone()], 3)?;
                let ordered = sort_by_angle(&incident, Some((&basis[0], &basis[1])));
                for i in 1..ordered.len() - 1 {
                    let tet = Simplex {
                        vertices: vec![
                            apex.clone(),
                            ordered[0].clone(),
                            ordered[i].clone(),
                            ordered[i + 1].clone(),
                        ],
                    };
                    if tet.volume() > 1e-14 {
                        out.push(tet);
                    }
                }
            }
            Ok(out)
        }
        other => Err(Error::InvalidInput(format!(
            "triangulation supports latent dimension ≤ 3, got {other}"
        ))),
    }
}

/// Sort points by angle around their centroid, either in the plane (`None`)
/// or inside the plane spanned by a 2-basis (`Some`).
fn sort_by_angle(
    points: &[DVector<f64>],
    plane: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Vec<DVector<f64>> {
    let n = points.len() as f64;
    let centroid = points.iter().fold(DVector::zeros(points[0].len()), |acc, p| acc + p) / n;
    let mut keyed: Vec<(f64, DVector<f64>)> = points
        .iter()
        .map(|p| {
            let d = p - &centroid;
            let (x, y) = match plane {
                None => (d[0], d[1]),
                Some((u, v)) => (u.dot(&d), v.dot(&d)),
            };
            (y.atan2(x), p.clone())
        })
        .collect();
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite angles"));
    keyed.into_iter().map(|(_, p)| p).collect()
}

/// One signed piece of the inclusion–exclusion decomposition of a simplex:
/// the region `{z : (rows · z)_i ≥ lower_i}` with `rows` invertible, taken
/// with sign `±1`. Entries of `lower` equal to `−∞` are unconstrained
/// directions (the basis-completion rows).
#[derive(Debug, Clone)]
pub struct SignedOrthantPiece {
    /// `+1.0` or `−1.0`.
    pub sign: f64,
    /// Invertible `S × S` row matrix: active constraint rows first (each a
    /// negated unit facet normal), then an orthonormal completion.
    pub rows: DMatrix<f64>,
    /// Lower bounds for `rows · z`, with `−∞` on completion rows.
    pub lower: DVector<f64>,
    /// Number of leading active (finite) rows.
    pub n_active: usize,
}

impl SignedOrthantPiece {
    /// Lower bounds after translating the piece by `−shift`
    /// (i.e. for the variable `y = z − shift`): `lower − rows·shift`.
    pub fn lower_shifted(&self, shift: &DVector<f64>) -> DVector<f64> {
        let rs = &self.rows * shift;
        DVector::from_fn(self.lower.len(), |i, _| self.lower[i] - rs[i])
    }
}

/// Decompose a simplex into signed pieces: for every subset `J` of its
/// `S+1` facet half-spaces with `|J| ≤ S` (the empty set included — its piece
/// is all of `ℝ^S`), emit `∩_{j∈J} {n_j·z ≤ c_j}` with sign `(−1)^{|J|+S}`.
/// The identity
/// `1_Δ = Σ_J (−1)^{|J|+S} · 1_{∩_{j∈J} H_j}`
/// holds because the complements of a simplex's facet half-spaces have empty
/// common intersection; it converts any integral over the simplex into
/// `2^{S+1} − 1` integrals over regions with at most `S` independent faces,
/// which a linear change of variables turns into rectangle-type integrals.
pub fn cone_decomposition(simplex: &Simplex) -> Result<Vec<SignedOrthantPiece>> {
    let s = simplex.dim();
    let (normals, offsets) = simplex.halfspaces()?;
    let mut pieces = Vec::with_capacity((1usize << (s + 1)) - 1);
    for mask in 0..(1u32 << (s + 1)) {
        let j_size = mask.count_ones() as usize;
        if j_size > s {
            continue;
        }
        let members: Vec<usize> = (0..=s).filter(|&j| mask & (1 << j) != 0).collect();
        let active: Vec<DVector<f64>> = members
            .iter()
            .map(|&j| -normals.row(j).transpose())
            .collect();
        let completion = orthonormal_complement(&active, s)?;
        let mut rows = DMatrix::zeros(s, s);
        let mut lower = DVector::from_element(s, f64::NEG_INFINITY);
        for (i, r) in active.iter().enumerate() {
            rows.row_mut(i).copy_from(&r.transpose());
            lower[i] = -offsets[members[i]];
        }
        for (i, r) in completion.iter().enumerate() {
            rows.row_mut(j_size + i).copy_from(&r.transpose());
        }
        let sign = if (j_size + s) % 2 == 0 { 1.0 } else { -1.0 };
        pieces.push(SignedOrthantPiece {
            sign,
            rows,
            lower,
            n_active: j_size,
        });
    }
    Ok(pieces)
}

/// Vertex-enumerate, triangulate, and cone-decompose a region in one step:
/// the flat list of signed pieces whose signed integrals reproduce integrals
/// over the region. Empty for lower-dimensional (measure-zero) regions.
pub fn region_pieces(region: &Region) -> Result<Vec<SignedOrthantPiece>> {
    let vertices = vertex_enumeration(&region.hrep);
    let simplices = triangulate(&region.hrep, &vertices)?;
    let mut pieces = Vec::new();
    for simplex in &simplices {
        pieces.extend(cone_decomposition(simplex)?);
    }
    Ok(pieces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{random_network, Activation};
    use crate::rng;
    use rand::Rng as _;

    fn unit_box(dim: usize, r: f64) -> PolytopeH {
        let mut normals = DMatrix::zeros(2 * dim, dim);
        let mut offsets = DVector::zeros(2 * dim);
        let mut origins = Vec::new();
        for d in 0..dim {
            normals[(2 * d, d)] = 1.0;
            offsets[2 * d] = r;
            origins.push(FaceOrigin::BoundingBox { dim: d, upper: true });
            normals[(2 * d + 1, d)] = -1.0;
            offsets[2 * d + 1] = r;
            origins.push(FaceOrigin::BoundingBox { dim: d, upper: false });
        }
        PolytopeH { normals, offsets, origins, infeasible: false }
    }

    fn random_net(dims: &[usize], act: Activation, seed: u64) -> GenerativeNetwork {
        random_network(dims, act, seed).expect("valid test net")
    }

    #[test]
    fn box_vertices_and_interior() {
        let poly = unit_box(2, 1.0);
        let verts = vertex_enumeration(&poly);
        assert_eq!(verts.len(), 4);
        let (center, margin) = interior_point(&poly).unwrap().expect("nonempty");
        assert!(center.abs().max() < 1e-9);
        assert!((margin - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reduce_drops_redundant_and_duplicate_faces() {
        // Box plus a slack face x ≤ 3 plus a duplicate of x ≤ 1.
        let mut poly = unit_box(2, 1.0);
        let f = poly.num_faces();
        let mut normals = DMatrix::zeros(f + 2, 2);
        normals.view_mut((0, 0), (f, 2)).copy_from(&poly.normals);
        normals[(f, 0)] = 1.0;
        normals[(f + 1, 0)] = 1.0;
        let mut offsets = DVector::zeros(f + 2);
        offsets.rows_mut(0, f).copy_from(&poly.offsets);
        offsets[f] = 3.0;
        offsets[f + 1] = 1.0;
        poly.normals = normals;
        poly.offsets = offsets;
        poly.origins.push(FaceOrigin::BoundingBox { dim: 0, upper: true });
        poly.origins.push(FaceOrigin::BoundingBox { dim: 0, upper: true });
        let reduced = reduce_inequalities(&poly).unwrap();
        assert_eq!(reduced.num_faces(), 4, "square has exactly 4 facets");
    }

    #[test]
    fn triangulated_volumes_tile_the_square() {
        let poly = unit_box(2, 1.0);
        let verts = vertex_enumeration(&poly);
        let tris = triangulate(&poly, &verts).unwrap();
        assert_eq!(tris.len(), 2);
        let vol: f64 = tris.iter().map(Simplex::volume).sum();
        assert!((vol - 4.0).abs() < 1e-9);
    }

    #[test]
    fn triangulated_volumes_tile_the_cube() {
        let poly = unit_box(3, 1.0);
        let verts = vertex_enumeration(&poly);
        assert_eq!(verts.len(), 8);
        let tets = triangulate(&poly, &verts).unwrap();
        let vol: f64 = tets.iter().map(Simplex::volume).sum();
        assert!((vol - 8.0).abs() < 1e-9, "volume {vol}");
    }

    #[test]
    fn random_polytope_triangulations_tile() {
        // Random bounded 2-D and 3-D polytopes: triangle fan volumes must sum
        // to the polytope volume (cross-checked by hit-or-miss Monte Carlo).
        let mut r = rng::seeded(77);
        for &dim in &[2usize, 3] {
            for trial in 0..5 {
                let mut poly = unit_box(dim, 1.0);
                // Slice with a few random half-spaces through the box.
                for _ in 0..3 {
                    let n = rng::standard_normal_vector(&mut r, dim).normalize();
                    let c = 0.3 + 0.5 * rng::standard_normal(&mut r).abs();
                    let f = poly.num_faces();
                    let mut normals = DMatrix::zeros(f + 1, dim);
                    normals.view_mut((0, 0), (f, dim)).copy_from(&poly.normals);
                    normals.row_mut(f).copy_from(&n.transpose());
                    let mut offsets = DVector::zeros(f + 1);
                    offsets.rows_mut(0, f).copy_from(&poly.offsets);
                    offsets[f] = c;
                    poly.normals = normals;
                    poly.offsets = offsets;
                    poly.origins.push(FaceOrigin::BoundingBox { dim: 0, upper: true });
                }
                let reduced = reduce_inequalities(&poly).unwrap();
                let verts = vertex_enumeration(&reduced);
                let tris = triangulate(&reduced, &verts).unwrap();
                let vol: f64 = tris.iter().map(Simplex::volume).sum();
                // Hit-or-miss estimate over the box.
                let n_mc = 200_000;
                let mut hits = 0usize;
                let mut rr = rng::stream(78, trial as u64 * 10 + dim as u64);
                for _ in 0..n_mc {
                    let z = DVector::from_fn(dim, |_, _| {
                        2.0 * rr.gen_range(0.0..1.0f64) - 1.0
                    });
                    if reduced.contains(&z, 0.0) {
                        hits += 1;
                    }
                }
                let box_vol = 2.0f64.powi(dim as i32);
                let mc = box_vol * hits as f64 / n_mc as f64;
                let se = box_vol * (0.25f64 / n_mc as f64).sqrt();
                assert!(
                    (vol - mc).abs() < 5.0 * se + 1e-3,
                    "dim {dim} trial {trial}: fan {vol} vs mc {mc} (se {se})"
                );
            }
        }
    }

    #[test]
    fn cone_piece_counts_and_s1_structure() {
        // Segment [a, b]: pieces are {z ≥ a} (+), {−z ≥ −b} (+), ℝ (−).
        let seg = Simplex {
            vertices: vec![DVector::from_element(1, -1.0), DVector::from_element(1, 2.0)],
        };
        let pieces = cone_decomposition(&seg).unwrap();
        assert_eq!(pieces.len(), 3, "2^{{S+1}} − 1 pieces at S = 1");
        let mut pos = 0;
        let mut neg = 0;
        for p in &pieces {
            if p.n_active == 0 {
                assert_eq!(p.sign, -1.0, "whole-space piece carries (−1)^S");
                neg += 1;
            } else {
                assert_eq!(p.n_active, 1);
                assert_eq!(p.sign, 1.0);
                // The active row encodes z ≥ −1 or −z ≥ −2.
                let r = p.rows[(0, 0)];
                let l = p.lower[0];
                assert!(
                    (r - 1.0).abs() < 1e-12 && (l + 1.0).abs() < 1e-12
                        || (r + 1.0).abs() < 1e-12 && (l + 2.0).abs() < 1e-12,
                    "unexpected piece row {r} lower {l}"
                );
                pos += 1;
            }
        }
        assert_eq!((pos, neg), (2, 1));

        let tri = Simplex {
            vertices: vec![
                DVector::from_column_slice(&[0.0, 0.0]),
                DVector::from_column_slice(&[1.0, 0.0]),
                DVector::from_column_slice(&[0.0, 1.0]),
            ],
        };
        assert_eq!(cone_decomposition(&tri).unwrap().len(), 7, "2^{{S+1}} − 1 at S = 2");
    }

    #[test]
    fn signed_indicator_identity_pointwise() {
        // At any point, the signed pieces' indicator functions must sum to
        // the simplex indicator — the heart of the decomposition.
        let mut r = rng::seeded(5);
        for _ in 0..5 {
            let tri = Simplex {
                vertices: vec![
                    rng::standard_normal_vector(&mut r, 2),
                    rng::standard_normal_vector(&mut r, 2),
                    rng::standard_normal_vector(&mut r, 2),
                ],
            };
            if tri.volume() < 1e-3 {
                continue;
            }
            let pieces = cone_decomposition(&tri).unwrap();
            let (normals, offsets) = tri.halfspaces().unwrap();
            for _ in 0..200 {
                let z = rng::standard_normal_vector(&mut r, 2) * 1.5;
                let in_simplex = (0..3).all(|j| normals.row(j).transpose().dot(&z) <= offsets[j]);
                let signed: f64 = pieces
                    .iter()
                    .map(|p| {
                        let rz = &p.rows * &z;
                        let inside = (0..p.n_active).all(|i| rz[i] >= p.lower[i]);
                        if inside {
                            p.sign
                        } else {
                            0.0
                        }
                    })
                    .sum();
                let expect = if in_simplex { 1.0 } else { 0.0 };
                assert!(
                    (signed - expect).abs() < 1e-12,
                    "indicator identity broken at {z:?}: {signed} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn partition_of_small_relu_net() {
        // One hidden layer of width 4 over a 1-D latent: at most 5 intervals,
        // and every region's interior must reproduce its code.
        let net = random_net(&[1, 4, 2], Activation::Relu, 42);
        let partition = enumerate_partition(&net, 8.0, 1_000_000).unwrap();
        assert!(partition.len() <= 9, "got {} regions", partition.len());
        assert!(!partition.is_empty());
        for region in &partition.regions {
            assert_eq!(net.activation_code(&region.interior), region.code);
            assert!(region.margin > EMPTY_MARGIN);
        }
        // Sampled latents must land in enumerated regions.
        let mut r = rng::seeded(7);
        for _ in 0..2000 {
            let z = rng::standard_normal_vector(&mut r, 1) * 2.0;
            if z.abs().max() < 8.0 {
                assert!(
                    partition.locate(&net, &z).is_some(),
                    "sample {z:?} fell outside the enumerated partition"
                );
            }
        }
    }

    #[test]
    fn partition_neighbors_are_symmetric() {
        let net = random_net(&[2, 5, 3, 2], Activation::LeakyRelu { eta: 0.2 }, 13);
        let partition = enumerate_partition(&net, 8.0, 1_000_000).unwrap();
        assert!(partition.len() > 3);
        for region in &partition.regions {
            for origin in &region.hrep.origins {
                if let FaceOrigin::Unit { layer, unit } = *origin {
                    let neighbor = region.code.flipped(layer, unit);
                    if let Some(idx) = partition.find(&neighbor) {
                        // The neighbor's matching facet leads back.
                        let back = partition.regions[idx].code.flipped(layer, unit);
                        assert_eq!(back, region.code);
                    }
                }
            }
        }
    }

    #[test]
    fn partition_region_cap_is_enforced() {
        let net = random_net(&[2, 6, 4, 2], Activation::Relu, 3);
        match enumerate_partition(&net, 8.0, 2) {
            Err(Error::Resource(_)) => {}
            other => panic!("expected resource error, got {other:?}"),
        }
    }

    #[test]
    fn linear_net_partition_is_single_box() {
        let net = random_net(&[2, 3], Activation::Relu, 8);
        let partition = enumerate_partition(&net, 8.0, 10).unwrap();
        assert_eq!(partition.len(), 1);
        let region = &partition.regions[0];
        assert!(region.code.is_empty());
        assert!(region.clipped);
        assert_eq!(region.hrep.num_faces(), 4);
        let verts = vertex_enumeration(&region.hrep);
        assert_eq!(verts.len(), 4);
    }
}
