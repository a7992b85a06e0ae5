//! Pearson connectivity matrices and their edge-vector form.
//!
//! A connectivity matrix over `Q` regions is symmetric with unit
//! diagonal, so it is fully described by its `m = Q(Q-1)/2` upper
//! triangle. The canonical edge order is row-major over that triangle:
//! `(0,1), (0,2), ..., (0,Q-1), (1,2), ...` with 0-based region indices.
//! Everything downstream (shrinkage, reliability, CSV layouts) indexes
//! edges in this order.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::timeseries::{format_float, TimeSeriesMatrix};

/// Number of edges for `q` regions.
pub fn edge_count(q: usize) -> usize {
    q * (q - 1) / 2
}

/// Region count `Q` such that `Q(Q-1)/2 == m`, if one exists.
pub fn region_count_for(m: usize) -> Result<usize> {
    let disc = 1 + 8 * m;
    let s = (disc as f64).sqrt() as usize;
    // float sqrt can land one off for large m
    let s = [s.saturating_sub(1), s, s + 1]
        .into_iter()
        .find(|c| c * c == disc)
        .ok_or(Error::Length(m))?;
    let q = s.div_ceil(2);
    if q < 2 || edge_count(q) != m {
        return Err(Error::Length(m));
    }
    Ok(q)
}

/// Flat index of edge `(a, b)` with `a < b < q` in canonical order.
pub fn edge_index(a: usize, b: usize, q: usize) -> usize {
    debug_assert!(a < b && b < q);
    a * q - a * (a + 1) / 2 + (b - a - 1)
}

/// Region pair for flat edge index `k`, inverse of [`edge_index`].
pub fn edge_pair(k: usize, q: usize) -> (usize, usize) {
    debug_assert!(k < edge_count(q));
    let mut a = 0;
    let mut offset = 0;
    while offset + (q - a - 1) <= k {
        offset += q - a - 1;
        a += 1;
    }
    (a, a + 1 + (k - offset))
}

/// All edges of a `q`-region graph in canonical order.
pub fn edge_iter(q: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..q).flat_map(move |a| (a + 1..q).map(move |b| (a, b)))
}

/// Edge values for one subject (or one group summary) in canonical
/// order, tagged with the region ids they connect.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeVector {
    values: Vec<f64>,
    region_ids: Vec<String>,
}

impl EdgeVector {
    /// Wrap `values` whose length must equal `Q(Q-1)/2` for the given
    /// region ids.
    pub fn from_values(values: Vec<f64>, region_ids: Vec<String>) -> Result<Self> {
        let q = region_ids.len();
        if q < 2 {
            return Err(Error::Shape(format!("need at least 2 regions, got {q}")));
        }
        if values.len() != edge_count(q) {
            return Err(Error::Length(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("edge vector contains non-finite values".into()));
        }
        Ok(Self { values, region_ids })
    }

    /// Wrap `values`, inferring the region count from the length and
    /// assigning default ids `r1..rQ`.
    pub fn from_values_default(values: Vec<f64>) -> Result<Self> {
        let q = region_count_for(values.len())?;
        Self::from_values(values, crate::timeseries::default_region_ids(q))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn n_edges(&self) -> usize {
        self.values.len()
    }
}

/// Symmetric correlation-like matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    matrix: DMatrix<f64>,
    region_ids: Vec<String>,
}

impl ConnectivityMatrix {
    pub fn new(matrix: DMatrix<f64>, region_ids: Vec<String>) -> Result<Self> {
        let q = matrix.nrows();
        if q < 2 || matrix.ncols() != q {
            return Err(Error::Shape(format!(
                "connectivity matrix must be square with Q >= 2, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if region_ids.len() != q {
            return Err(Error::Shape(format!(
                "{} region ids for {q} regions",
                region_ids.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("connectivity matrix contains non-finite values".into()));
        }
        for i in 0..q {
            if matrix[(i, i)] != 1.0 {
                return Err(Error::Shape(format!(
                    "diagonal entry ({i}, {i}) is {} instead of 1",
                    matrix[(i, i)]
                )));
            }
            for j in i + 1..q {
                if matrix[(i, j)] != matrix[(j, i)] {
                    return Err(Error::Shape(format!(
                        "asymmetric entries at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { matrix, region_ids })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }
}

/// Full-sample Pearson correlation of every region pair.
///
/// Uses the textbook two-pass form: center each column by its mean, then
/// divide pair dot products by the root product of the centered sums of
/// squares. Rounding can push a coefficient marginally outside `[-1, 1]`,
/// so results are clamped. Columns with exactly zero variance make the
/// correlation undefined and are reported as an error listing every
/// offending region.
pub fn pearson_matrix(ts: &TimeSeriesMatrix) -> Result<ConnectivityMatrix> {
    let t = ts.n_samples();
    let q = ts.n_regions();
    if t < 3 {
        return Err(Error::OutOfRange(format!(
            "correlation needs at least 3 samples, got {t}"
        )));
    }
    let data = ts.data();
    let mut centered = DMatrix::zeros(t, q);
    let mut ss = vec![0.0f64; q];
    let mut degenerate = Vec::new();
    for c in 0..q {
        let mut sum = 0.0;
        for r in 0..t {
            sum += data[(r, c)];
        }
        let mean = sum / t as f64;
        let mut s = 0.0;
        for r in 0..t {
            let d = data[(r, c)] - mean;
            centered[(r, c)] = d;
            s += d * d;
        }
        ss[c] = s;
        if s == 0.0 {
            degenerate.push(ts.region_ids()[c].clone());
        }
    }
    if !degenerate.is_empty() {
        return Err(Error::DegenerateColumn { regions: degenerate });
    }
    let mut out = DMatrix::identity(q, q);
    for a in 0..q {
        for b in a + 1..q {
            let mut dot = 0.0;
            for r in 0..t {
                dot += centered[(r, a)] * centered[(r, b)];
            }
            let r = (dot / (ss[a] * ss[b]).sqrt()).clamp(-1.0, 1.0);
            out[(a, b)] = r;
            out[(b, a)] = r;
        }
    }
    ConnectivityMatrix::new(out, ts.region_ids().to_vec())
}

/// Upper triangle of `cm` in canonical edge order.
pub fn vectorize(cm: &ConnectivityMatrix) -> EdgeVector {
    let q = cm.n_regions();
    let values = edge_iter(q).map(|(a, b)| cm.matrix()[(a, b)]).collect();
    EdgeVector::from_values(values, cm.region_ids().to_vec())
        .expect("triangle of a valid matrix is a valid edge vector")
}

/// Rebuild the symmetric unit-diagonal matrix from its edge vector.
pub fn devectorize(ev: &EdgeVector) -> ConnectivityMatrix {
    let q = ev.n_regions();
    let mut out = DMatrix::identity(q, q);
    for (k, (a, b)) in edge_iter(q).enumerate() {
        out[(a, b)] = ev.values()[k];
        out[(b, a)] = ev.values()[k];
    }
    ConnectivityMatrix {
        matrix: out,
        region_ids: ev.region_ids().to_vec(),
    }
}

/// Edge-wise mean over subjects, summed left to right in subject order.
pub fn group_mean(subjects: &[EdgeVector]) -> Result<EdgeVector> {
    if subjects.len() < 2 {
        return Err(Error::TooFewSubjects {
            n: subjects.len(),
            min: 2,
        });
    }
    let first = &subjects[0];
    let m = first.n_edges();
    for (i, s) in subjects.iter().enumerate().skip(1) {
        if s.n_edges() != m || s.region_ids() != first.region_ids() {
            return Err(Error::ShapeMismatch(format!(
                "subject {i} has a different edge layout than subject 0"
            )));
        }
    }
    let n = subjects.len() as f64;
    let mut values = vec![0.0f64; m];
    for s in subjects {
        for (acc, v) in values.iter_mut().zip(s.values()) {
            *acc += v;
        }
    }
    for v in &mut values {
        *v /= n;
    }
    EdgeVector::from_values(values, first.region_ids().to_vec())
}

/// Fisher z (atanh) of each edge, with inputs clamped to
/// `+/-(1 - 1e-15)` so perfect correlations stay finite.
pub fn fisher_z_transform(ev: &EdgeVector) -> EdgeVector {
    const LIMIT: f64 = 1.0 - 1e-15;
    let values = ev
        .values()
        .iter()
        .map(|&v| v.clamp(-LIMIT, LIMIT).atanh())
        .collect();
    EdgeVector::from_values(values, ev.region_ids().to_vec())
        .expect("atanh of clamped input is finite")
}

/// Inverse of [`fisher_z_transform`].
pub fn inverse_fisher_z(ev: &EdgeVector) -> EdgeVector {
    let values = ev.values().iter().map(|&v| v.tanh()).collect();
    EdgeVector::from_values(values, ev.region_ids().to_vec())
        .expect("tanh output is finite")
}

/// Write an edge vector as `region_a,region_b,value` rows in canonical
/// order, one header line, LF endings, 17 significant digits.
pub fn write_edge_csv(ev: &EdgeVector, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(ev.n_edges() * 40);
    out.push_str("region_a,region_b,value\n");
    for (k, (a, b)) in edge_iter(ev.n_regions()).enumerate() {
        out.push_str(&format!(
            "{},{},{}\n",
            ev.region_ids()[a],
            ev.region_ids()[b],
            format_float(ev.values()[k])
        ));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Read an edge CSV written by [`write_edge_csv`]. Rows must appear in
/// canonical order; region ids are recovered from the first `Q - 1` rows.
pub fn read_edge_csv(path: &Path) -> Result<EdgeVector> {
    let content = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let mut lines = content.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim_end_matches('\r'));
    if header != Some("region_a,region_b,value") {
        return Err(Error::Schema {
            context: path.display().to_string(),
            message: format!("expected header region_a,region_b,value, got {header:?}"),
        });
    }
    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for (lineno, raw) in lines {
        let line = raw.trim_end_matches('\r');
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Schema {
                context: path.display().to_string(),
                message: format!("line {}: expected 3 fields, got {}", lineno + 1, fields.len()),
            });
        }
        let v: f64 = fields[2].trim().parse().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            column: 3,
            message: format!("{e}: {:?}", fields[2].trim()),
        })?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                path: path.to_path_buf(),
                line: lineno + 1,
                column: 3,
            });
        }
        rows.push((fields[0].trim().to_string(), fields[1].trim().to_string(), v));
    }
    let q = region_count_for(rows.len())?;
    let mut region_ids = Vec::with_capacity(q);
    region_ids.push(rows[0].0.clone());
    for row in rows.iter().take(q - 1) {
        region_ids.push(row.1.clone());
    }
    for (k, (a, b)) in edge_iter(q).enumerate() {
        if rows[k].0 != region_ids[a] || rows[k].1 != region_ids[b] {
            return Err(Error::Schema {
                context: path.display().to_string(),
                message: format!(
                    "line {}: expected edge ({}, {}), got ({}, {})",
                    k + 2,
                    region_ids[a],
                    region_ids[b],
                    rows[k].0,
                    rows[k].1
                ),
            });
        }
    }
    let values = rows.into_iter().map(|r| r.2).collect();
    EdgeVector::from_values(values, region_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::default_region_ids;
    use proptest::prelude::*;

    fn ts_from_cols(cols: &[&[f64]]) -> TimeSeriesMatrix {
        let t = cols[0].len();
        let q = cols.len();
        let data = DMatrix::from_fn(t, q, |r, c| cols[c][r]);
        TimeSeriesMatrix::new(data, default_region_ids(q), 1.0).unwrap()
    }

    #[test]
    fn pearson_hand_value() {
        let m = ts_from_cols(&[&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]]);
        let cm = pearson_matrix(&m).unwrap();
        assert_eq!(cm.matrix()[(0, 1)], 0.8);
        assert_eq!(cm.matrix()[(1, 0)], 0.8);
        assert_eq!(cm.matrix()[(0, 0)], 1.0);
    }

    #[test]
    fn pearson_perfect_and_inverse() {
        let m = ts_from_cols(&[
            &[1.0, 2.0, 3.0],
            &[2.0, 4.0, 6.0],
            &[3.0, 2.0, 1.0],
        ]);
        let cm = pearson_matrix(&m).unwrap();
        assert_eq!(cm.matrix()[(0, 1)], 1.0);
        assert_eq!(cm.matrix()[(0, 2)], -1.0);
    }

    #[test]
    fn pearson_needs_three_samples() {
        let m = ts_from_cols(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(matches!(pearson_matrix(&m), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn pearson_reports_every_constant_column() {
        let m = ts_from_cols(&[&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0], &[7.0, 7.0, 7.0]]);
        match pearson_matrix(&m) {
            Err(Error::DegenerateColumn { regions }) => {
                assert_eq!(regions, vec!["r2".to_string(), "r3".to_string()]);
            }
            other => panic!("expected DegenerateColumn, got {other:?}"),
        }
    }

    #[test]
    fn canonical_order_q3() {
        let pairs: Vec<_> = edge_iter(3).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(edge_index(0, 1, 3), 0);
        assert_eq!(edge_index(0, 2, 3), 1);
        assert_eq!(edge_index(1, 2, 3), 2);
    }

    #[test]
    fn region_count_inversions() {
        assert_eq!(region_count_for(1).unwrap(), 2);
        assert_eq!(region_count_for(3).unwrap(), 3);
        assert_eq!(region_count_for(6).unwrap(), 4);
        assert_eq!(region_count_for(15).unwrap(), 6);
        for bad in [0usize, 2, 4, 5, 7, 14] {
            assert!(matches!(region_count_for(bad), Err(Error::Length(_))));
        }
    }

    #[test]
    fn vectorize_devectorize_round_trip() {
        let ev = EdgeVector::from_values_default(vec![0.1, -0.2, 0.3]).unwrap();
        let cm = devectorize(&ev);
        assert_eq!(cm.matrix()[(0, 1)], 0.1);
        assert_eq!(cm.matrix()[(2, 1)], 0.3);
        assert_eq!(cm.matrix()[(1, 1)], 1.0);
        assert_eq!(vectorize(&cm), ev);
    }

    #[test]
    fn group_mean_hand_value() {
        let a = EdgeVector::from_values_default(vec![0.2, 0.4, 0.0]).unwrap();
        let b = EdgeVector::from_values_default(vec![0.4, 0.6, 0.2]).unwrap();
        let mean = group_mean(&[a.clone(), b]).unwrap();
        assert_eq!(mean.values(), &[(0.2f64 + 0.4) / 2.0, 0.5, 0.1]);
        assert!(matches!(
            group_mean(&[a]),
            Err(Error::TooFewSubjects { n: 1, min: 2 })
        ));
    }

    #[test]
    fn group_mean_rejects_mixed_layouts() {
        let a = EdgeVector::from_values_default(vec![0.2, 0.4, 0.0]).unwrap();
        let b = EdgeVector::from_values_default(vec![0.4]).unwrap();
        assert!(matches!(
            group_mean(&[a, b]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn fisher_z_is_finite_at_unit_correlation() {
        let ev = EdgeVector::from_values_default(vec![1.0, -1.0, 0.5]).unwrap();
        let z = fisher_z_transform(&ev);
        assert!(z.values()[0].is_finite());
        assert!(z.values()[1].is_finite());
        assert!((z.values()[2] - 0.5f64.atanh()).abs() < 1e-15);
        let back = inverse_fisher_z(&z);
        assert!((back.values()[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn edge_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.csv");
        let ev = EdgeVector::from_values(
            vec![1.0 / 3.0, -0.5, 1.0],
            vec!["dmn".into(), "sal".into(), "vis".into()],
        )
        .unwrap();
        write_edge_csv(&ev, &path).unwrap();
        let back = read_edge_csv(&path).unwrap();
        assert_eq!(back.region_ids(), ev.region_ids());
        for (x, y) in back.values().iter().zip(ev.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn edge_csv_rejects_scrambled_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.csv");
        std::fs::write(
            &path,
            "region_a,region_b,value\nr1,r2,0.1\nr2,r3,0.3\nr1,r3,0.2\n",
        )
        .unwrap();
        assert!(matches!(read_edge_csv(&path), Err(Error::Schema { .. })));
    }

    proptest! {
        #[test]
        fn edge_index_pair_inverse(q in 2usize..20, k_seed in any::<u64>()) {
            let m = edge_count(q);
            let k = (k_seed % m as u64) as usize;
            let (a, b) = edge_pair(k, q);
            prop_assert!(a < b && b < q);
            prop_assert_eq!(edge_index(a, b, q), k);
        }

        #[test]
        fn pearson_matrix_is_valid_correlation(
            seed in any::<u64>(),
            t in 3usize..20,
            q in 2usize..6,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = DMatrix::from_fn(t, q, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let ts = TimeSeriesMatrix::new(data, default_region_ids(q), 1.0).unwrap();
            let cm = pearson_matrix(&ts).unwrap();
            for i in 0..q {
                prop_assert_eq!(cm.matrix()[(i, i)], 1.0);
                for j in 0..q {
                    let v = cm.matrix()[(i, j)];
                    prop_assert!((-1.0..=1.0).contains(&v));
                    prop_assert_eq!(v, cm.matrix()[(j, i)]);
                }
            }
        }

        #[test]
        fn pearson_invariant_under_positive_affine(
            seed in any::<u64>(),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = 12;
            let data = DMatrix::from_fn(t, 3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let mut scaled = data.clone();
            for r in 0..t {
                scaled[(r, 0)] = scale * scaled[(r, 0)] + shift;
            }
            let a = pearson_matrix(&TimeSeriesMatrix::new(data, default_region_ids(3), 1.0).unwrap()).unwrap();
            let b = pearson_matrix(&TimeSeriesMatrix::new(scaled, default_region_ids(3), 1.0).unwrap()).unwrap();
            for (x, y) in a.matrix().iter().zip(b.matrix().iter()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn devectorize_round_trips_any_vector(
            values in prop::collection::vec(-2.0f64..2.0, 6)
        ) {
            let ev = EdgeVector::from_values_default(values).unwrap();
            prop_assert_eq!(vectorize(&devectorize(&ev)), ev);
        }
    }
}
