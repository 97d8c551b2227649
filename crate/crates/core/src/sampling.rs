//! Collocation-point generation and training-set refinement.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;

use crate::error::{Error, Result};
use crate::flow::BoxDomain;
use crate::parallel::{self, POINT_CHUNK};

/// A location in the joint spatial–parametric domain, spatial coordinates
/// first.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub coords: Vec<f64>,
}

impl Point {
    pub fn new(coords: Vec<f64>) -> Point {
        Point { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// A reproducible random stream: identical `(seed, id)` pairs yield
/// identical draw sequences, and distinct ids are independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub id: u64,
}

impl RngStream {
    pub fn new(seed: u64, id: u64) -> RngStream {
        RngStream { seed, id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.id);
        rng
    }
}

/// Ordered collocation points with per-stage provenance tags and optional
/// importance weights.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub points: Vec<Point>,
    pub tags: Vec<u32>,
    pub weights: Option<Vec<f64>>,
}

impl TrainingSet {
    /// A fresh set where every point carries the same stage tag.
    pub fn from_points(points: Vec<Point>, tag: u32) -> TrainingSet {
        let tags = vec![tag; points.len()];
        TrainingSet { points, tags, weights: None }
    }

    /// Attach strictly positive importance weights (one per point).
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<TrainingSet> {
        if weights.len() != self.points.len() {
            return Err(Error::DimensionMismatch {
                what: "training-set weights",
                expected: self.points.len(),
                actual: weights.len(),
            });
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidConfig(
                "importance weights must be strictly positive".into(),
            ));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_tag(&self) -> Option<u32> {
        self.tags.iter().copied().max()
    }

    /// Points carrying a given stage tag.
    pub fn stage_points(&self, tag: u32) -> Vec<&Point> {
        self.points
            .iter()
            .zip(&self.tags)
            .filter_map(|(p, &t)| (t == tag).then_some(p))
            .collect()
    }

    /// CSV export: `x_0..x_{ns-1}, xi_0..xi_{d-1}, stage, weight`
    /// (weight 1 when no importance weights are attached).
    pub fn write_csv<W: Write>(&self, spatial_dim: usize, out: &mut W) -> Result<()> {
        let dim = self.points.first().map_or(spatial_dim, |p| p.dim());
        let mut header = Vec::new();
        for i in 0..spatial_dim {
            header.push(format!("x_{i}"));
        }
        for i in 0..dim.saturating_sub(spatial_dim) {
            header.push(format!("xi_{i}"));
        }
        header.push("stage".into());
        header.push("weight".into());
        writeln!(out, "{}", header.join(","))?;
        for (i, p) in self.points.iter().enumerate() {
            let mut row: Vec<String> = p.coords.iter().map(|v| format!("{v}")).collect();
            row.push(format!("{}", self.tags[i]));
            let w = self.weights.as_ref().map_or(1.0, |w| w[i]);
            row.push(format!("{w}"));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// I.i.d. uniform points over the target domain.
pub fn uniform_sample(domain: &BoxDomain, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let d = domain.dim();
    (0..n)
        .map(|_| {
            Point::new(
                (0..d)
                    .map(|i| rng.gen_range(domain.lower[i]..domain.upper[i]))
                    .collect(),
            )
        })
        .collect()
}

const HALTON_PRIMES: [u64; 20] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71];

fn radical_inverse(mut n: u64, base: u64) -> f64 {
    let mut inv = 0.0;
    let mut denom = 1.0;
    while n > 0 {
        denom *= base as f64;
        inv += (n % base) as f64 / denom;
        n /= base;
    }
    inv
}

/// Low-discrepancy Halton points scaled to the target domain. Element `j`
/// of the output is sequence index `skip + j + 1` (the sequence starts at
/// 1/2 in the base-2 dimension).
pub fn halton_sample(domain: &BoxDomain, n: usize, skip: usize) -> Result<Vec<Point>> {
    let d = domain.dim();
    if d > HALTON_PRIMES.len() {
        return Err(Error::HaltonDimension { requested: d, max: HALTON_PRIMES.len() });
    }
    Ok((0..n)
        .map(|j| {
            let idx = (skip + j + 1) as u64;
            Point::new(
                (0..d)
                    .map(|i| {
                        let u = radical_inverse(idx, HALTON_PRIMES[i]);
                        domain.lower[i] + (domain.upper[i] - domain.lower[i]) * u
                    })
                    .collect(),
            )
        })
        .collect())
}

/// The `n` candidates with the largest squared residuals, ties broken by
/// candidate index ascending; returned in candidate order.
pub fn rar_select<F>(candidates: &[Point], residual_fn: F, n: usize) -> Result<Vec<Point>>
where
    F: Fn(&Point) -> f64 + Sync,
{
    if n > candidates.len() {
        return Err(Error::SelectionTooLarge { requested: n, available: candidates.len() });
    }
    let r2: Vec<f64> = parallel::chunked_map(candidates, POINT_CHUNK, |_, pts| {
        pts.iter()
            .map(|p| {
                let r = residual_fn(p);
                r * r
            })
            .collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| r2[b].partial_cmp(&r2[a]).unwrap().then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..n].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| candidates[i].clone()).collect())
}

/// Cutoff mask: 1 on the target domain, decaying linearly to 0 on the
/// boundary of the enlarged box, combining per-dimension factors by
/// minimum. Errors outside the closed enlarged box.
pub fn cutoff_h(point: &[f64], domain: &BoxDomain) -> Result<f64> {
    if point.len() != domain.dim() {
        return Err(Error::DimensionMismatch {
            what: "cutoff point",
            expected: domain.dim(),
            actual: point.len(),
        });
    }
    let mut h: f64 = 1.0;
    for (i, &v) in point.iter().enumerate() {
        let (bl, bu) = (domain.b_lower(i), domain.b_upper(i));
        if v < bl || v > bu {
            return Err(Error::OutsideSupport { dim: i, value: v });
        }
        let margin_width = domain.margin[i] * (domain.upper[i] - domain.lower[i]);
        let factor = if v < domain.lower[i] {
            (v - bl) / margin_width
        } else if v > domain.upper[i] {
            (bu - v) / margin_width
        } else {
            1.0
        };
        h = h.min(factor.clamp(0.0, 1.0));
    }
    Ok(h)
}

/// Refinement strategy for the training set between adaptivity stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    /// Union the new stage points into the set (equal weights).
    Grow,
    /// Replace the set with the new points, which carry importance weights.
    Replace,
}

/// Refine the training set with the next stage's generated points. New
/// points must carry a strictly larger stage tag than anything already in
/// the set.
pub fn refine_training_set(
    current: &TrainingSet,
    generated: TrainingSet,
    mode: RefineMode,
) -> Result<TrainingSet> {
    if let (Some(max_existing), Some(min_new)) =
        (current.max_tag(), generated.tags.iter().copied().min())
    {
        if min_new <= max_existing {
            return Err(Error::StageTagViolation { new_tag: min_new, max_existing });
        }
    }
    match mode {
        RefineMode::Grow => {
            let mut points = current.points.clone();
            let mut tags = current.tags.clone();
            points.extend(generated.points);
            tags.extend(generated.tags);
            Ok(TrainingSet { points, tags, weights: None })
        }
        RefineMode::Replace => {
            if generated.weights.is_none() {
                return Err(Error::InvalidConfig(
                    "replace-mode refinement requires importance weights on the new points".into(),
                ));
            }
            Ok(generated)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(d: usize) -> BoxDomain {
        BoxDomain::with_margin(vec![0.0; d], vec![1.0; d], 0.05).unwrap()
    }

    #[test]
    fn rng_stream_is_reproducible_and_independent() {
        let mut a = RngStream::new(7, 3).rng();
        let mut b = RngStream::new(7, 3).rng();
        let mut c = RngStream::new(7, 4).rng();
        let xa: f64 = a.gen();
        let xb: f64 = b.gen();
        let xc: f64 = c.gen();
        assert_eq!(xa.to_bits(), xb.to_bits());
        assert_ne!(xa.to_bits(), xc.to_bits());
    }

    #[test]
    fn uniform_sample_determinism_and_moments() {
        let b = unit_box(2);
        let mut r1 = RngStream::new(1, 0).rng();
        let mut r2 = RngStream::new(1, 0).rng();
        let p1 = uniform_sample(&b, 100, &mut r1);
        let p2 = uniform_sample(&b, 100, &mut r2);
        assert_eq!(p1, p2);
        assert!(uniform_sample(&b, 0, &mut r1).is_empty());

        let mut rng = RngStream::new(2, 0).rng();
        let pts = uniform_sample(&b, 100_000, &mut rng);
        for i in 0..2 {
            let mean: f64 = pts.iter().map(|p| p.coords[i]).sum::<f64>() / pts.len() as f64;
            assert!((mean - 0.5).abs() < 0.01, "coordinate {i} mean {mean}");
        }
    }

    #[test]
    fn halton_first_element_and_skip_property() {
        let b = unit_box(2);
        let pts = halton_sample(&b, 4, 0).unwrap();
        assert_eq!(pts[0].coords[0], 0.5); // base-2 first element
        // skip s then n equals skip 0 then n+s, last n.
        let skipped = halton_sample(&b, 5, 7).unwrap();
        let full = halton_sample(&b, 12, 0).unwrap();
        assert_eq!(skipped, full[7..].to_vec());
    }

    #[test]
    fn halton_dimension_limit() {
        let b = BoxDomain::with_margin(vec![0.0; 21], vec![1.0; 21], 0.05).unwrap();
        assert!(matches!(
            halton_sample(&b, 1, 0),
            Err(Error::HaltonDimension { .. })
        ));
    }

    /// Star-discrepancy estimate over anchored boxes with corners on a grid.
    fn star_discrepancy_estimate(points: &[Point], grid: usize) -> f64 {
        let n = points.len() as f64;
        let mut worst = 0.0f64;
        for i in 1..=grid {
            for j in 1..=grid {
                let (a, b) = (i as f64 / grid as f64, j as f64 / grid as f64);
                let count = points
                    .iter()
                    .filter(|p| p.coords[0] < a && p.coords[1] < b)
                    .count() as f64;
                worst = worst.max((count / n - a * b).abs());
            }
        }
        worst
    }

    #[test]
    fn halton_beats_uniform_star_discrepancy() {
        let b = BoxDomain::with_margin(vec![0.0, 0.0], vec![1.0, 1.0], 0.05).unwrap();
        let h = halton_sample(&b, 1000, 0).unwrap();
        let mut rng = RngStream::new(3, 0).rng();
        let u = uniform_sample(&b, 1000, &mut rng);
        let dh = star_discrepancy_estimate(&h, 16);
        let du = star_discrepancy_estimate(&u, 16);
        assert!(dh < du, "halton {dh} vs uniform {du}");
    }

    #[test]
    fn rar_select_examples() {
        let pts: Vec<Point> = (0..4).map(|i| Point::new(vec![i as f64])).collect();
        let residuals = [0.1, 5.0, 2.0, 0.3];
        let f = |p: &Point| residuals[p.coords[0] as usize];
        let top = rar_select(&pts, f, 2).unwrap();
        assert_eq!(top, vec![pts[1].clone(), pts[2].clone()]);

        // Ties broken by index ascending.
        let g = |_: &Point| 1.0;
        let tied = rar_select(&pts, g, 2).unwrap();
        assert_eq!(tied, vec![pts[0].clone(), pts[1].clone()]);

        assert!(matches!(
            rar_select(&pts, f, 9),
            Err(Error::SelectionTooLarge { .. })
        ));
    }

    #[test]
    fn rar_select_matches_full_sort_oracle() {
        let mut rng = RngStream::new(5, 0).rng();
        let pts: Vec<Point> = (0..200).map(|_| Point::new(vec![rng.gen_range(-1.0..1.0)])).collect();
        let f = |p: &Point| (3.0 * p.coords[0]).sin() + 0.2 * p.coords[0];
        let got = rar_select(&pts, f, 40).unwrap();
        // Oracle: full sort of squared residuals.
        let mut idx: Vec<usize> = (0..pts.len()).collect();
        idx.sort_by(|&a, &b| {
            let ra = f(&pts[a]).powi(2);
            let rb = f(&pts[b]).powi(2);
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut expect: Vec<usize> = idx[..40].to_vec();
        expect.sort_unstable();
        let expect: Vec<Point> = expect.into_iter().map(|i| pts[i].clone()).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn cutoff_values() {
        let b = unit_box(2);
        // Inside the target domain.
        assert_eq!(cutoff_h(&[0.3, 0.9], &b).unwrap(), 1.0);
        // On the enlarged boundary.
        let h = cutoff_h(&[b.b_lower(0), 0.5], &b).unwrap();
        assert_eq!(h, 0.0);
        // Halfway across the margin in one dimension.
        let halfway = 1.0 + 0.5 * 0.05;
        let h = cutoff_h(&[halfway, 0.5], &b).unwrap();
        assert!((h - 0.5).abs() < 1e-12);
        // Outside the enlarged box.
        assert!(cutoff_h(&[2.0, 0.5], &b).is_err());
    }

    #[test]
    fn cutoff_is_continuous_across_the_omega_edge() {
        let b = unit_box(1);
        let eps = 1e-9;
        let inside = cutoff_h(&[1.0 - eps], &b).unwrap();
        let outside = cutoff_h(&[1.0 + eps], &b).unwrap();
        assert!((inside - outside).abs() < 1e-6);
        // Tiny margin: indicator in the limit.
        let tight = BoxDomain::with_margin(vec![0.0], vec![1.0], 1e-9).unwrap();
        assert_eq!(cutoff_h(&[0.99], &tight).unwrap(), 1.0);
    }

    #[test]
    fn refine_grow_and_replace() {
        let s0 = TrainingSet::from_points(
            (0..1000).map(|i| Point::new(vec![i as f64 * 1e-3])).collect(),
            0,
        );
        let g1 = TrainingSet::from_points(
            (0..1000).map(|i| Point::new(vec![i as f64 * 1e-3 + 0.5])).collect(),
            1,
        );
        let grown = refine_training_set(&s0, g1.clone(), RefineMode::Grow).unwrap();
        assert_eq!(grown.len(), 2000);
        assert!(grown.tags[..1000].iter().all(|&t| t == 0));
        assert!(grown.tags[1000..].iter().all(|&t| t == 1));

        // Grow with empty generated set: unchanged.
        let empty = TrainingSet::from_points(vec![], 1);
        let same = refine_training_set(&s0, empty, RefineMode::Grow).unwrap();
        assert_eq!(same.len(), s0.len());

        // Replace keeps only the new points with positive weights.
        let weighted = g1.clone().with_weights(vec![2.0; 1000]).unwrap();
        let replaced = refine_training_set(&s0, weighted, RefineMode::Replace).unwrap();
        assert_eq!(replaced.len(), 1000);
        assert!(replaced.weights.unwrap().iter().all(|&w| w > 0.0));

        // Tag violation.
        let stale = TrainingSet::from_points(vec![Point::new(vec![0.1])], 0);
        assert!(matches!(
            refine_training_set(&s0, stale, RefineMode::Grow),
            Err(Error::StageTagViolation { .. })
        ));
    }

    #[test]
    fn csv_export_shape() {
        let mut set = TrainingSet::from_points(
            vec![Point::new(vec![0.1, 2.0]), Point::new(vec![0.2, -1.0])],
            0,
        );
        set.tags[1] = 0;
        let mut buf = Vec::new();
        set.write_csv(1, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x_0,xi_0,stage,weight");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(",0,1"));
    }
}
