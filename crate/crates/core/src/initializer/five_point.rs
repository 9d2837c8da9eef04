//! Minimal five-point relative pose solver.
//!
//! Follows the action-matrix formulation: the essential matrix is written as
//! `E = x E1 + y E2 + z E3 + E4` over the null space of the epipolar
//! constraints, the ten cubic constraints (`det E = 0` and the trace
//! condition `2 E E^T E - tr(E E^T) E = 0`) are expanded symbolically, and
//! Gauss-Jordan elimination expresses every degree-3 monomial over the ten
//! monomials of degree <= 2. Multiplication by `x` then acts linearly on that
//! basis; its eigenvectors are evaluations at the solutions.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector2, Vector3};

/// Linear polynomial in (x, y, z): coefficients for [x, y, z, 1].
#[derive(Debug, Clone, Copy)]
struct Poly1([f64; 4]);

/// Quadratic: coefficients for [x2, xy, xz, y2, yz, z2, x, y, z, 1].
#[derive(Debug, Clone, Copy)]
struct Poly2([f64; 10]);

/// Cubic: the ten degree-3 monomials
/// [x3, x2y, x2z, xy2, xyz, xz2, y3, y2z, yz2, z3] followed by the Poly2
/// monomials.
#[derive(Debug, Clone, Copy)]
struct Poly3([f64; 20]);

/// Product index table: (Poly1 monomial i) * (Poly1 monomial j) -> Poly2 slot.
const MUL11: [[usize; 4]; 4] = [
    [0, 1, 2, 6],
    [1, 3, 4, 7],
    [2, 4, 5, 8],
    [6, 7, 8, 9],
];

/// Product index table: (Poly2 monomial q) * (Poly1 monomial v) -> Poly3 slot.
const MUL21: [[usize; 4]; 10] = [
    [0, 1, 2, 10],  // x2 * {x,y,z,1}
    [1, 3, 4, 11],  // xy
    [2, 4, 5, 12],  // xz
    [3, 6, 7, 13],  // y2
    [4, 7, 8, 14],  // yz
    [5, 8, 9, 15],  // z2
    [10, 11, 12, 16], // x
    [11, 13, 14, 17], // y
    [12, 14, 15, 18], // z
    [16, 17, 18, 19], // 1
];

fn mul11(a: &Poly1, b: &Poly1) -> Poly2 {
    let mut out = [0.0; 10];
    for i in 0..4 {
        if a.0[i] == 0.0 {
            continue;
        }
        for j in 0..4 {
            out[MUL11[i][j]] += a.0[i] * b.0[j];
        }
    }
    Poly2(out)
}

fn mul21(a: &Poly2, b: &Poly1) -> Poly3 {
    let mut out = [0.0; 20];
    for q in 0..10 {
        if a.0[q] == 0.0 {
            continue;
        }
        for v in 0..4 {
            out[MUL21[q][v]] += a.0[q] * b.0[v];
        }
    }
    Poly3(out)
}

fn sub2(a: &Poly2, b: &Poly2) -> Poly2 {
    let mut out = [0.0; 10];
    for i in 0..10 {
        out[i] = a.0[i] - b.0[i];
    }
    Poly2(out)
}

fn add3(a: &Poly3, b: &Poly3) -> Poly3 {
    let mut out = [0.0; 20];
    for i in 0..20 {
        out[i] = a.0[i] + b.0[i];
    }
    Poly3(out)
}

fn scale3(a: &Poly3, s: f64) -> Poly3 {
    let mut out = a.0;
    for v in &mut out {
        *v *= s;
    }
    Poly3(out)
}

/// Essential matrices (up to 10) from exactly five normalized-coordinate
/// correspondences `a[i] <-> b[i]`, satisfying `b~^T E a~ = 0` with
/// homogeneous `p~ = (p.x, p.y, 1)`.
pub fn five_point_essentials(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> Vec<Matrix3<f64>> {
    assert_eq!(a.len(), 5);
    assert_eq!(b.len(), 5);

    // Null space of the 5x9 epipolar system via the 9x9 normal matrix.
    let mut qtq = nalgebra::SMatrix::<f64, 9, 9>::zeros();
    for (pa, pb) in a.iter().zip(b.iter()) {
        let row = [
            pb.x * pa.x,
            pb.x * pa.y,
            pb.x,
            pb.y * pa.x,
            pb.y * pa.y,
            pb.y,
            pa.x,
            pa.y,
            1.0,
        ];
        for i in 0..9 {
            for j in 0..9 {
                qtq[(i, j)] += row[i] * row[j];
            }
        }
    }
    let eig = SymmetricEigen::new(qtq);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .partial_cmp(&eig.eigenvalues[j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let basis: Vec<Matrix3<f64>> = order[..4]
        .iter()
        .map(|&c| {
            let v = eig.eigenvectors.column(c);
            Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
        })
        .collect();

    // E(x,y,z) entries as linear polynomials over (x, y, z, 1).
    let e_poly: [[Poly1; 3]; 3] = std::array::from_fn(|r| {
        std::array::from_fn(|c| {
            Poly1([
                basis[0][(r, c)],
                basis[1][(r, c)],
                basis[2][(r, c)],
                basis[3][(r, c)],
            ])
        })
    });

    // Constraint 1: det(E) = 0.
    let minor = |r1: usize, c1: usize, r2: usize, c2: usize| -> Poly2 {
        sub2(
            &mul11(&e_poly[r1][c1], &e_poly[r2][c2]),
            &mul11(&e_poly[r1][c2], &e_poly[r2][c1]),
        )
    };
    let det = add3(
        &add3(
            &mul21(&minor(1, 1, 2, 2), &e_poly[0][0]),
            &scale3(&mul21(&minor(1, 0, 2, 2), &e_poly[0][1]), -1.0),
        ),
        &mul21(&minor(1, 0, 2, 1), &e_poly[0][2]),
    );

    // Constraint 2: 2 E E^T E - tr(E E^T) E = 0 (nine cubics).
    let mut gram = [[Poly2([0.0; 10]); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let mut acc = Poly2([0.0; 10]);
            for k in 0..3 {
                let p = mul11(&e_poly[r][k], &e_poly[c][k]);
                for i in 0..10 {
                    acc.0[i] += p.0[i];
                }
            }
            gram[r][c] = acc;
        }
    }
    let mut trace = Poly2([0.0; 10]);
    for i in 0..10 {
        trace.0[i] = gram[0][0].0[i] + gram[1][1].0[i] + gram[2][2].0[i];
    }

    let mut system = DMatrix::<f64>::zeros(10, 20);
    for (col, v) in det.0.iter().enumerate() {
        system[(0, col)] = *v;
    }
    let mut row = 1;
    for r in 0..3 {
        for c in 0..3 {
            let mut cubic = Poly3([0.0; 20]);
            for k in 0..3 {
                cubic = add3(&cubic, &scale3(&mul21(&gram[r][k], &e_poly[k][c]), 2.0));
            }
            cubic = add3(&cubic, &scale3(&mul21(&trace, &e_poly[r][c]), -1.0));
            for (col, v) in cubic.0.iter().enumerate() {
                system[(row, col)] = *v;
            }
            row += 1;
        }
    }

    // Gauss-Jordan over the ten degree-3 columns.
    for col in 0..10 {
        let (pivot_row, pivot_val) = (col..10)
            .map(|r| (r, system[(r, col)].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap();
        if pivot_val < 1e-12 {
            return Vec::new(); // degenerate sample
        }
        system.swap_rows(col, pivot_row);
        let inv = 1.0 / system[(col, col)];
        for c in col..20 {
            system[(col, c)] *= inv;
        }
        for r in 0..10 {
            if r != col {
                let f = system[(r, col)];
                if f != 0.0 {
                    for c in col..20 {
                        system[(r, c)] -= f * system[(col, c)];
                    }
                }
            }
        }
    }

    // Multiplication-by-x over the basis [x2,xy,xz,y2,yz,z2,x,y,z,1]:
    // the first six basis monomials lift to the first six degree-3 monomials,
    // whose reductions sit in the eliminated rows.
    let mut action = DMatrix::<f64>::zeros(10, 10);
    for k in 0..6 {
        for m in 0..10 {
            action[(m, k)] = -system[(k, 10 + m)];
        }
    }
    action[(0, 6)] = 1.0; // x * x = x2
    action[(1, 7)] = 1.0; // x * y = xy
    action[(2, 8)] = 1.0; // x * z = xz
    action[(6, 9)] = 1.0; // x * 1 = x

    // Evaluation vectors are eigenvectors of the transpose.
    let at = action.transpose();
    let eigenvalues = action.complex_eigenvalues();
    let mut out = Vec::new();
    for lambda in eigenvalues.iter() {
        if lambda.im.abs() > 1e-6 * (1.0 + lambda.re.abs()) {
            continue;
        }
        let shifted = &at - DMatrix::identity(10, 10) * lambda.re;
        let svd = shifted.svd(false, true);
        let v_t = match &svd.v_t {
            Some(v) => v,
            None => continue,
        };
        let beta = v_t.row(9);
        if beta[9].abs() < 1e-12 {
            continue;
        }
        let x = beta[6] / beta[9];
        let y = beta[7] / beta[9];
        let z = beta[8] / beta[9];
        let e = basis[0] * x + basis[1] * y + basis[2] * z + basis[3];
        let norm = e.norm();
        if norm > 1e-12 {
            out.push(e / norm);
        }
    }
    out
}

/// The four (R, t) decompositions of an essential matrix, `|t| = 1`, mapping
/// view-a coordinates to view-b: `x_b = R x_a + t` up to scale.
pub fn decompose_essential(e: &Matrix3<f64>) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let svd = e.svd(true, true);
    let (Some(mut u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Vec::new();
    };
    let mut v = v_t.transpose();
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v.determinant() < 0.0 {
        v = -v;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v.transpose();
    let r2 = u * w.transpose() * v.transpose();
    let t = u.column(2).into_owned();
    vec![(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Midpoint-free linear (DLT) two-view triangulation in normalized
/// coordinates; returns the point in view-a's frame.
pub fn triangulate(
    pa: &Vector2<f64>,
    pb: &Vector2<f64>,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    // Rows of A X~ = 0 with P1 = [I | 0], P2 = [R | t].
    let mut a = nalgebra::SMatrix::<f64, 4, 4>::zeros();
    a.set_row(0, &nalgebra::RowVector4::new(-1.0, 0.0, pa.x, 0.0));
    a.set_row(1, &nalgebra::RowVector4::new(0.0, -1.0, pa.y, 0.0));
    let p2_rows = [
        nalgebra::RowVector4::new(r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x),
        nalgebra::RowVector4::new(r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y),
        nalgebra::RowVector4::new(r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z),
    ];
    a.set_row(2, &(p2_rows[2] * pb.x - p2_rows[0]));
    a.set_row(3, &(p2_rows[2] * pb.y - p2_rows[1]));
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let h = v_t.row(3);
    if h[3].abs() < 1e-14 {
        return None;
    }
    Some(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Squared Sampson distance of a pixel correspondence under the fundamental
/// matrix, in squared pixels.
pub fn sampson_sq(f: &Matrix3<f64>, pa_px: &Vector2<f64>, pb_px: &Vector2<f64>) -> f64 {
    let xa = Vector3::new(pa_px.x, pa_px.y, 1.0);
    let xb = Vector3::new(pb_px.x, pb_px.y, 1.0);
    let fa = f * xa;
    let ftb = f.transpose() * xb;
    let e = xb.dot(&fa);
    let denom = fa.x * fa.x + fa.y * fa.y + ftb.x * ftb.x + ftb.y * ftb.y;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    e * e / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rotation_matrix;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_geometry(rng: &mut StdRng) -> (Matrix3<f64>, Vector3<f64>, Vec<Vector3<f64>>) {
        let r = rotation_matrix(&Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        ));
        let t = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..0.3),
        )
        .normalize();
        let points = (0..8)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(2.0..5.0),
                )
            })
            .collect();
        (r, t, points)
    }

    fn project(p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(p.x / p.z, p.y / p.z)
    }

    #[test]
    fn recovers_exact_essential_matrix() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut solved = 0;
        for trial in 0..50 {
            let (r, t, points) = random_geometry(&mut rng);
            let in_b: Vec<Vector3<f64>> = points.iter().map(|p| r * p + t).collect();
            if in_b.iter().any(|p| p.z <= 0.1) {
                continue;
            }
            let pa: Vec<Vector2<f64>> = points.iter().map(project).collect();
            let pb: Vec<Vector2<f64>> = in_b.iter().map(project).collect();
            let es = five_point_essentials(&pa[..5], &pb[..5]);
            assert!(!es.is_empty(), "trial {trial}: no solutions");
            // The true E must be among the solutions: check epipolar residual
            // on the held-out correspondences.
            let best: f64 = es
                .iter()
                .map(|e| {
                    (5..8)
                        .map(|i| {
                            let xa = Vector3::new(pa[i].x, pa[i].y, 1.0);
                            let xb = Vector3::new(pb[i].x, pb[i].y, 1.0);
                            xb.dot(&(e * xa)).abs()
                        })
                        .fold(0.0, f64::max)
                })
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-9, "trial {trial}: best residual {best}");
            solved += 1;
        }
        assert!(solved >= 40, "only {solved} usable trials");
    }

    #[test]
    fn decomposition_contains_truth_with_cheirality() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..30 {
            let (r, t, points) = random_geometry(&mut rng);
            let in_b: Vec<Vector3<f64>> = points.iter().map(|p| r * p + t).collect();
            if in_b.iter().any(|p| p.z <= 0.1) {
                continue;
            }
            let tx = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
            let e = tx * r;
            let candidates = decompose_essential(&e);
            // The candidate agreeing with the true motion triangulates all
            // points in front of both cameras.
            let mut found = false;
            for (rc, tc) in candidates {
                let ok = points.iter().zip(in_b.iter()).all(|(p, q)| {
                    let pa = project(p);
                    let pb = project(q);
                    match triangulate(&pa, &pb, &rc, &tc) {
                        Some(x) => x.z > 0.0 && (rc * x + tc).z > 0.0,
                        None => false,
                    }
                });
                if ok {
                    // Scale-normalized motion matches.
                    let angle_err = (rc.transpose() * r).trace();
                    let t_align = tc.dot(&t).abs();
                    if (angle_err - 3.0).abs() < 1e-6 && t_align > 1.0 - 1e-6 {
                        found = true;
                    }
                }
            }
            assert!(found, "true motion not recovered");
        }
    }

    #[test]
    fn triangulation_recovers_depth() {
        let mut rng = StdRng::seed_from_u64(2);
        let (r, t, points) = random_geometry(&mut rng);
        for p in &points {
            let q = r * p + t;
            if q.z <= 0.1 {
                continue;
            }
            let x = triangulate(&project(p), &project(&q), &r, &t).unwrap();
            assert!((x - p).norm() < 1e-9);
        }
    }

    #[test]
    fn degenerate_sample_returns_no_solutions() {
        let pa = vec![Vector2::new(0.1, 0.2); 5];
        let pb = vec![Vector2::new(0.3, -0.1); 5];
        let es = five_point_essentials(&pa, &pb);
        // Coincident points cannot pin down the null space; whatever comes
        // back must at least be finite.
        for e in es {
            assert!(e.iter().all(|v| v.is_finite()));
        }
    }
}
