//! Structured nested triangulations of the unit square.
//!
//! All meshes in this crate descend from one fixed initial triangulation of
//! `(0,1)²`: a 4×4 grid of squares, each split into two triangles. The
//! diagonal direction alternates by quadrant — cells in the lower-left and
//! upper-right 2×2 blocks are split from top-left to bottom-right, the other
//! two blocks from bottom-left to top-right — so the mesh has no global
//! translation symmetry along either axis.
//!
//! Refinement is uniform "red" refinement: every triangle is split into four
//! congruent children through its edge midpoints. Children are emitted
//! parent-major, so the children of element `p` on the next level are exactly
//! `4p .. 4p+4`, and ancestry between any two levels is index arithmetic.
//! Vertices of a mesh are a prefix of the vertices of its refinement; each
//! appended vertex is the midpoint of a recorded pair of coarser vertices,
//! which makes prolongation of P1 functions exact and trivial.

use serde::Serialize;

use crate::{Error, Result};

/// Number of grid cells per side of the initial mesh.
const INITIAL_CELLS: usize = 4;

/// A conforming triangulation of the closed unit square.
///
/// Stores, besides the raw geometry, everything the rest of the crate asks
/// for in inner loops: element areas, P1 hat-function gradients, boundary
/// flags, the free (interior) vertex numbering and vertex→element incidence.
#[derive(Debug, Clone)]
pub struct TriMesh {
    level: usize,
    coords: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    area: Vec<f64>,
    /// `grads[e][i]` is the (constant) gradient of the hat function of local
    /// vertex `i` on element `e`.
    grads: Vec<[[f64; 2]; 3]>,
    vertex_is_boundary: Vec<bool>,
    /// Interior vertices in increasing vertex order.
    free_vertices: Vec<usize>,
    /// Inverse of `free_vertices`; `None` for boundary vertices.
    free_index: Vec<Option<usize>>,
    /// Elements incident to each vertex, each list sorted increasingly.
    vertex_elements: Vec<Vec<usize>>,
    mesh_size: f64,
}

/// An interior face (edge shared by exactly two elements).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteriorFace {
    /// The two adjacent elements, `elems[0] < elems[1]`.
    pub elems: [usize; 2],
    /// The shared edge's vertices, `verts[0] < verts[1]`.
    pub verts: [usize; 2],
}

#[derive(Serialize)]
struct MeshJson<'a> {
    level: usize,
    vertices: &'a [[f64; 2]],
    triangles: &'a [[usize; 3]],
}

impl TriMesh {
    /// The fixed level-0 mesh: 32 triangles on a 4×4 grid of squares, with
    /// the quadrant-alternating diagonal pattern described in the module
    /// docs. All triangles are oriented counterclockwise.
    pub fn initial() -> TriMesh {
        let n = INITIAL_CELLS;
        let mut coords = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                coords.push([i as f64 / n as f64, j as f64 / n as f64]);
            }
        }
        let node = |i: usize, j: usize| j * (n + 1) + i;
        let mut triangles = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let (bl, br) = (node(i, j), node(i + 1, j));
                let (tl, tr) = (node(i, j + 1), node(i + 1, j + 1));
                if (i < n / 2) == (j < n / 2) {
                    // "\" diagonal from top-left to bottom-right.
                    triangles.push([bl, br, tl]);
                    triangles.push([br, tr, tl]);
                } else {
                    // "/" diagonal from bottom-left to top-right.
                    triangles.push([bl, br, tr]);
                    triangles.push([bl, tr, tl]);
                }
            }
        }
        Self::from_raw(0, coords, triangles)
    }

    /// Uniform red refinement. Returns the refined mesh together with the
    /// parent vertex pair of every appended midpoint vertex (aligned with the
    /// new vertex indices `self.n_vertices()..`).
    pub fn refined(&self) -> (TriMesh, Vec<[usize; 2]>) {
        let mut coords = self.coords.clone();
        let mut parents = Vec::new();
        // Midpoint lookup keyed by the (ordered) coarse edge. Indices are
        // assigned in deterministic first-encounter order.
        let mut midpoint = std::collections::HashMap::new();
        let mut mid = |a: usize, b: usize, coords: &mut Vec<[f64; 2]>| {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                let (pa, pb) = (coords[key.0], coords[key.1]);
                coords.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
                parents.push([key.0, key.1]);
                coords.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for &[v0, v1, v2] in &self.triangles {
            let m01 = mid(v0, v1, &mut coords);
            let m12 = mid(v1, v2, &mut coords);
            let m20 = mid(v2, v0, &mut coords);
            // Corner children first, central (medial) child last; all inherit
            // the parent's orientation.
            triangles.push([v0, m01, m20]);
            triangles.push([v1, m12, m01]);
            triangles.push([v2, m20, m12]);
            triangles.push([m01, m12, m20]);
        }
        (Self::from_raw(self.level + 1, coords, triangles), parents)
    }

    fn from_raw(level: usize, coords: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> TriMesh {
        let mut area = Vec::with_capacity(triangles.len());
        let mut grads = Vec::with_capacity(triangles.len());
        let mut mesh_size: f64 = 0.0;
        for &[a, b, c] in &triangles {
            let (pa, pb, pc) = (coords[a], coords[b], coords[c]);
            let signed =
                0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0]));
            assert!(signed > 0.0, "triangle ({a},{b},{c}) is not counterclockwise");
            area.push(signed);
            // ∇λ_i = (y_j − y_k, x_k − x_j) / (2·area) for (i,j,k) cyclic.
            let g = |pj: [f64; 2], pk: [f64; 2]| {
                [(pj[1] - pk[1]) / (2.0 * signed), (pk[0] - pj[0]) / (2.0 * signed)]
            };
            grads.push([g(pb, pc), g(pc, pa), g(pa, pb)]);
            for (p, q) in [(pa, pb), (pb, pc), (pc, pa)] {
                mesh_size = mesh_size.max(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt());
            }
        }

        let mut vertex_elements = vec![Vec::new(); coords.len()];
        for (e, tri) in triangles.iter().enumerate() {
            for &v in tri {
                vertex_elements[v].push(e);
            }
        }

        // Boundary vertices are the endpoints of faces incident to exactly
        // one element (purely topological; no coordinate comparisons).
        let mut face_count = std::collections::HashMap::new();
        for &[a, b, c] in &triangles {
            for (p, q) in [(a, b), (b, c), (c, a)] {
                *face_count.entry((p.min(q), p.max(q))).or_insert(0usize) += 1;
            }
        }
        let mut vertex_is_boundary = vec![false; coords.len()];
        for (&(p, q), &count) in &face_count {
            assert!(count <= 2, "face ({p},{q}) shared by more than two elements");
            if count == 1 {
                vertex_is_boundary[p] = true;
                vertex_is_boundary[q] = true;
            }
        }

        let free_vertices: Vec<usize> =
            (0..coords.len()).filter(|&v| !vertex_is_boundary[v]).collect();
        let mut free_index = vec![None; coords.len()];
        for (i, &v) in free_vertices.iter().enumerate() {
            free_index[v] = Some(i);
        }

        TriMesh {
            level,
            coords,
            triangles,
            area,
            grads,
            vertex_is_boundary,
            free_vertices,
            free_index,
            vertex_elements,
            mesh_size,
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len()
    }

    pub fn n_elements(&self) -> usize {
        self.triangles.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn triangle(&self, e: usize) -> [usize; 3] {
        self.triangles[e]
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn area(&self, e: usize) -> f64 {
        self.area[e]
    }

    /// Gradients of the three hat functions on element `e` (constant there).
    pub fn grads(&self, e: usize) -> &[[f64; 2]; 3] {
        &self.grads[e]
    }

    /// Corner coordinates of element `e`.
    pub fn corners(&self, e: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[e];
        [self.coords[a], self.coords[b], self.coords[c]]
    }

    pub fn centroid(&self, e: usize) -> [f64; 2] {
        let [pa, pb, pc] = self.corners(e);
        [(pa[0] + pb[0] + pc[0]) / 3.0, (pa[1] + pb[1] + pc[1]) / 3.0]
    }

    /// Global mesh size: the longest edge over all elements.
    pub fn mesh_size(&self) -> f64 {
        self.mesh_size
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.vertex_is_boundary[v]
    }

    /// Interior (non-boundary) vertices, increasing. These carry the degrees
    /// of freedom of the P1 space with homogeneous Dirichlet conditions.
    pub fn free_vertices(&self) -> &[usize] {
        &self.free_vertices
    }

    /// Position of vertex `v` in [`Self::free_vertices`], or `None` if `v`
    /// lies on the boundary.
    pub fn free_index(&self, v: usize) -> Option<usize> {
        self.free_index[v]
    }

    /// Elements incident to vertex `v`, sorted increasingly.
    pub fn vertex_elements(&self, v: usize) -> &[usize] {
        &self.vertex_elements[v]
    }

    /// All interior faces, each adjacent to exactly two elements. Ordering is
    /// deterministic (lexicographic in the vertex pair).
    pub fn interior_faces(&self) -> Vec<InteriorFace> {
        let mut by_face: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
            std::collections::BTreeMap::new();
        for (e, &[a, b, c]) in self.triangles.iter().enumerate() {
            for (p, q) in [(a, b), (b, c), (c, a)] {
                by_face.entry((p.min(q), p.max(q))).or_default().push(e);
            }
        }
        by_face
            .into_iter()
            .filter(|(_, elems)| elems.len() == 2)
            .map(|((p, q), elems)| InteriorFace {
                elems: [elems[0].min(elems[1]), elems[0].max(elems[1])],
                verts: [p, q],
            })
            .collect()
    }

    /// The element patch `N^m(S)`: starting from the seed element set `S`,
    /// `m` rounds of growing by vertex adjacency (all elements sharing at
    /// least one vertex with the current set). `m = 0` returns the seed
    /// itself. The result is sorted and duplicate-free.
    ///
    /// Errors if the seed is empty or contains an out-of-range element.
    pub fn patch(&self, seed: &[usize], m: usize) -> Result<Vec<usize>> {
        if seed.is_empty() {
            return Err(Error::InvalidInput("patch seed is empty".into()));
        }
        let mut in_patch = vec![false; self.triangles.len()];
        for &e in seed {
            if e >= self.triangles.len() {
                return Err(Error::InvalidInput(format!(
                    "patch seed element {e} out of range (mesh has {} elements)",
                    self.triangles.len()
                )));
            }
            in_patch[e] = true;
        }
        let mut frontier: Vec<usize> = seed.to_vec();
        frontier.sort_unstable();
        frontier.dedup();
        for _ in 0..m {
            let mut next = Vec::new();
            for &e in &frontier {
                for &v in &self.triangles[e] {
                    for &e2 in &self.vertex_elements[v] {
                        if !in_patch[e2] {
                            in_patch[e2] = true;
                            next.push(e2);
                        }
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        Ok((0..self.triangles.len()).filter(|&e| in_patch[e]).collect())
    }

    /// JSON export: `{"level", "vertices": [[x,y],..], "triangles": [[a,b,c],..]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&MeshJson {
            level: self.level,
            vertices: &self.coords,
            triangles: &self.triangles,
        })
        .expect("mesh serialization cannot fail")
    }
}

/// A stack of nested meshes, level 0 (the initial mesh) up to some maximum,
/// with the genealogy needed to move functions and indices between levels.
#[derive(Debug, Clone)]
pub struct MeshHierarchy {
    meshes: Vec<TriMesh>,
    /// `appended[k]` holds, for each vertex of level `k+1` that is not a
    /// level-`k` vertex, the pair of level-`k` vertices it bisects.
    appended: Vec<Vec<[usize; 2]>>,
}

impl MeshHierarchy {
    /// Build all meshes from level 0 through `max_level` inclusive.
    pub fn up_to(max_level: usize) -> MeshHierarchy {
        let mut meshes = vec![TriMesh::initial()];
        let mut appended = Vec::new();
        for _ in 0..max_level {
            let (next, parents) = meshes.last().unwrap().refined();
            meshes.push(next);
            appended.push(parents);
        }
        MeshHierarchy { meshes, appended }
    }

    pub fn max_level(&self) -> usize {
        self.meshes.len() - 1
    }

    /// The mesh at `level`. Panics if the hierarchy was not built that deep;
    /// public entry points validate levels before reaching here.
    pub fn mesh(&self, level: usize) -> &TriMesh {
        assert!(
            level < self.meshes.len(),
            "level {level} not in hierarchy (max {})",
            self.meshes.len() - 1
        );
        &self.meshes[level]
    }

    /// Ensure `level` exists in this hierarchy, as a `Result` for callers
    /// validating user input.
    pub fn check_level(&self, level: usize) -> Result<()> {
        if level >= self.meshes.len() {
            return Err(Error::InvalidInput(format!(
                "level {level} exceeds hierarchy maximum {}",
                self.meshes.len() - 1
            )));
        }
        Ok(())
    }

    /// Midpoint genealogy for `fine_level ≥ 1`: parents (as level-`fine_level - 1`
    /// vertex indices, which are also fine indices) of each vertex appended at
    /// `fine_level`, aligned with vertex indices `coarse.n_vertices()..`.
    pub fn appended_vertex_parents(&self, fine_level: usize) -> &[[usize; 2]] {
        assert!(fine_level >= 1 && fine_level <= self.max_level());
        &self.appended[fine_level - 1]
    }

    /// The level-`to_level` ancestor of element `elem` at `from_level`
    /// (`to_level ≤ from_level`). Pure index arithmetic thanks to the
    /// parent-major child ordering.
    pub fn ancestor(&self, elem: usize, from_level: usize, to_level: usize) -> usize {
        debug_assert!(to_level <= from_level);
        elem >> (2 * (from_level - to_level))
    }

    /// All level-`to_level` descendants of element `elem` at `from_level`
    /// (`to_level ≥ from_level`), as a contiguous index range.
    pub fn descendants(
        &self,
        elem: usize,
        from_level: usize,
        to_level: usize,
    ) -> std::ops::Range<usize> {
        debug_assert!(to_level >= from_level);
        let shift = 2 * (to_level - from_level);
        (elem << shift)..((elem + 1) << shift)
    }
}

/// Barycentric coordinates of `p` with respect to the (counterclockwise)
/// triangle `tri`. Exact for the dyadic-rational geometry used throughout.
pub(crate) fn barycentric(tri: &[[f64; 2]; 3], p: [f64; 2]) -> [f64; 3] {
    let [a, b, c] = *tri;
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (p[1] - a[1]) * (c[0] - a[0])) / det;
    let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])) / det;
    [1.0 - l1 - l2, l1, l2]
}
