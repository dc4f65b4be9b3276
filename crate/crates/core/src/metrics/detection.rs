//! Peak extraction from density maps and point-set matching.

use serde::{Deserialize, Serialize};

/// A location in pixel coordinates, `x` = column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

/// Local maxima of a row-major `h × w` map.
///
/// A pixel is a candidate when its value is at least `threshold` and no
/// greater than the value at that pixel is found in its `(2m+1)²` window.
/// Candidates are then accepted in descending value order, dropping any that
/// lie within `m` pixels (Chebyshev) of an accepted peak.
pub fn detect_peaks(map: &[f64], h: usize, w: usize, threshold: f64, min_distance: usize) -> Vec<Point> {
    assert_eq!(map.len(), h * w, "map length must be h × w");
    let m = min_distance as isize;
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map[y * w + x];
            if !(v >= threshold) {
                continue;
            }
            let mut is_max = true;
            'win: for dy in -m..=m {
                for dx in -m..=m {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    if map[yy as usize * w + xx as usize] > v {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                cands.push((v, y, x));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (_, y, x) in cands {
        let close = kept
            .iter()
            .any(|&(ky, kx)| ky.abs_diff(y) <= min_distance && kx.abs_diff(x) <= min_distance);
        if !close {
            kept.push((y, x));
        }
    }
    kept.into_iter().map(|(y, x)| Point::new(x as f64, y as f64)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatchStrategy {
    /// Accept pairs in ascending distance order.
    #[default]
    Greedy,
    /// Maximum-cardinality matching with minimum total distance.
    Optimal,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionMatchReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `(pred index, gt index, distance)`.
    pub matches: Vec<(usize, usize, f64)>,
}

impl DetectionMatchReport {
    pub fn from_counts(tp: usize, n_pred: usize, n_gt: usize, matches: Vec<(usize, usize, f64)>) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, n_pred);
        let recall = ratio(tp, n_gt);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        DetectionMatchReport {
            tp,
            fp: n_pred - tp,
            fn_: n_gt - tp,
            precision,
            recall,
            f1,
            matches,
        }
    }
}

/// One-to-one matching of `pred` to `gt` among pairs at most `radius` apart.
pub fn match_detections(pred: &[Point], gt: &[Point], radius: f64, strategy: MatchStrategy) -> DetectionMatchReport {
    let matches = match strategy {
        MatchStrategy::Greedy => greedy(pred, gt, radius),
        MatchStrategy::Optimal => optimal(pred, gt, radius),
    };
    DetectionMatchReport::from_counts(matches.len(), pred.len(), gt.len(), matches)
}

fn greedy(pred: &[Point], gt: &[Point], radius: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let d = p.dist(*g);
            if d <= radius {
                pairs.push((i, j, d));
            }
        }
    }
    pairs.sort_by(|a, b| a.2.total_cmp(&b.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut out = Vec::new();
    for (i, j, d) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j, d));
        }
    }
    out
}

fn optimal(pred: &[Point], gt: &[Point], radius: f64) -> Vec<(usize, usize, f64)> {
    let n = pred.len().max(gt.len());
    if pred.is_empty() || gt.is_empty() {
        return Vec::new();
    }
    // An unmatched pair costs more than any complete set of real matches, so
    // the minimum-cost assignment first maximizes the number of matches.
    let big = radius * (n as f64 + 1.0) + 1.0;
    let mut cost = vec![vec![big; n]; n];
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let d = p.dist(*g);
            if d <= radius {
                cost[i][j] = d;
            }
        }
    }
    let assign = hungarian(&cost);
    let mut out: Vec<_> = assign
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < pred.len() && j < gt.len() && cost[i][j] < big)
        .map(|(i, j)| (i, j, cost[i][j]))
        .collect();
    out.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    out
}

/// Minimum-cost perfect assignment on a square matrix; returns the column
/// assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    // 1-based potentials formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_map(h: usize, w: usize, centers: &[(f64, f64)], sigma: f64) -> Vec<f64> {
        let mut m = vec![0.0; h * w];
        let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
        for y in 0..h {
            for x in 0..w {
                for &(cx, cy) in centers {
                    let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    m[y * w + x] += norm * (-r2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        m
    }

    #[test]
    fn single_gaussian_gives_one_peak() {
        let sigma = 2.0;
        let map = gaussian_map(32, 32, &[(13.0, 17.0)], sigma);
        let thr = 0.5 / (2.0 * std::f64::consts::PI * sigma * sigma);
        let peaks = detect_peaks(&map, 32, 32, thr, 3);
        assert_eq!(peaks, vec![Point::new(13.0, 17.0)]);
    }

    #[test]
    fn empty_map_has_no_peaks() {
        assert!(detect_peaks(&[0.0; 64], 8, 8, 0.01, 2).is_empty());
    }

    #[test]
    fn two_gaussians_twenty_apart() {
        let map = gaussian_map(40, 48, &[(10.0, 20.0), (30.0, 20.0)], 2.0);
        let peaks = detect_peaks(&map, 40, 48, 0.02, 3);
        assert_eq!(peaks.len(), 2);
        for c in [Point::new(10.0, 20.0), Point::new(30.0, 20.0)] {
            assert!(peaks.iter().any(|p| p.dist(c) <= 1.0));
        }
    }

    #[test]
    fn plateau_yields_single_peak() {
        let mut map = vec![0.0; 25];
        map[12] = 1.0;
        map[13] = 1.0;
        assert_eq!(detect_peaks(&map, 5, 5, 0.5, 1).len(), 1);
    }

    #[test]
    fn exact_match_scores_one() {
        let pts = [Point::new(1.0, 2.0), Point::new(10.0, 10.0)];
        for s in [MatchStrategy::Greedy, MatchStrategy::Optimal] {
            let r = match_detections(&pts, &pts, 6.0, s);
            assert_eq!((r.tp, r.fp, r.fn_), (2, 0, 0));
            assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn no_predictions_scores_zero() {
        let r = match_detections(&[], &[Point::new(0.0, 0.0)], 6.0, MatchStrategy::Greedy);
        assert_eq!((r.precision, r.recall, r.f1, r.fn_), (0.0, 0.0, 0.0, 1));
    }

    #[test]
    fn optimal_beats_greedy_on_chain() {
        // greedy pairs p0-g1 (d=1) and strands both p1 and g0
        let pred = [Point::new(0.0, 0.0), Point::new(2.0, 0.0)];
        let gt = [Point::new(-1.5, 0.0), Point::new(1.0, 0.0)];
        let g = match_detections(&pred, &gt, 1.6, MatchStrategy::Greedy);
        let o = match_detections(&pred, &gt, 1.6, MatchStrategy::Optimal);
        assert_eq!(g.tp, 1);
        assert_eq!(o.tp, 2);
    }

    #[test]
    fn hungarian_small() {
        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&c);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
        assert_eq!(total, 5.0);
    }
}
