//! Brute-force reference implementations and a randomized comparison driver
//! for every evaluation metric.

use nucleo_core::loss::{dice_coefficient, mse_value};
use nucleo_core::metrics::classification::{accuracy, macro_f1, roc_auc};
use nucleo_core::metrics::detection::{match_detections, MatchStrategy, Point};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_TOL: f64 = 1e-9;

#[derive(Debug)]
pub struct OracleOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub failures: Vec<String>,
}

impl OracleOutcome {
    fn new(name: &'static str) -> Self {
        OracleOutcome { name, instances: 0, max_error: 0.0, failures: Vec::new() }
    }

    fn compare(&mut self, got: f64, want: f64, what: impl FnOnce() -> String) {
        let e = (got - want).abs();
        self.max_error = self.max_error.max(e);
        if !(e <= ORACLE_TOL) {
            self.failures.push(format!("{}: got {got}, want {want}", what()));
        }
    }

    fn require(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn oracle_dice(sr: &[bool], gt: &[bool]) -> f64 {
    let mut inter = 0.0;
    let mut a = 0.0;
    let mut b = 0.0;
    for i in 0..sr.len() {
        if sr[i] {
            a += 1.0;
        }
        if gt[i] {
            b += 1.0;
        }
        if sr[i] && gt[i] {
            inter += 1.0;
        }
    }
    if a + b == 0.0 {
        1.0
    } else {
        2.0 * inter / (a + b)
    }
}

fn oracle_mse(p: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - t[i]).powi(2);
    }
    s / p.len() as f64
}

fn oracle_accuracy(p: &[usize], l: &[usize]) -> f64 {
    let mut c = 0;
    for i in 0..p.len() {
        if p[i] == l[i] {
            c += 1;
        }
    }
    c as f64 / p.len() as f64
}

fn oracle_macro_f1(p: &[usize], l: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let tp = (0..p.len()).filter(|&i| p[i] == c && l[i] == c).count() as f64;
        let fp = (0..p.len()).filter(|&i| p[i] == c && l[i] != c).count() as f64;
        let fn_ = (0..p.len()).filter(|&i| p[i] != c && l[i] == c).count() as f64;
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        total += if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
    }
    total / k as f64
}

/// `P(s_pos > s_neg) + ½ P(tie)` over all positive/negative pairs.
fn oracle_auc(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Exhaustive search over partial one-to-one assignments: the most matches
/// within `radius`, then the least total distance.
fn oracle_matching(pred: &[Point], gt: &[Point], radius: f64) -> (usize, f64) {
    fn go(i: usize, pred: &[Point], gt: &[Point], r: f64, used: &mut Vec<bool>, n: usize, d: f64, best: &mut (usize, f64)) {
        if i == pred.len() {
            if n > best.0 || (n == best.0 && d < best.1) {
                *best = (n, d);
            }
            return;
        }
        go(i + 1, pred, gt, r, used, n, d, best);
        for j in 0..gt.len() {
            let dist = ((pred[i].x - gt[j].x).powi(2) + (pred[i].y - gt[j].y).powi(2)).sqrt();
            if !used[j] && dist <= r {
                used[j] = true;
                go(i + 1, pred, gt, r, used, n + 1, d + dist, best);
                used[j] = false;
            }
        }
    }
    let mut best = (0, f64::INFINITY);
    go(0, pred, gt, radius, &mut vec![false; gt.len()], 0, 0.0, &mut best);
    if best.0 == 0 {
        best.1 = 0.0;
    }
    best
}

fn oracle_prf(tp: usize, n_pred: usize, n_gt: usize) -> (f64, f64, f64) {
    let p = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let r = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.random_range(0..=extent as u32) as f64, rng.random_range(0..=extent as u32) as f64))
        .collect()
}

/// Compares each metric with its oracle on `instances` random cases.
pub fn run_metric_oracles(instances: usize, seed: u64) -> Vec<OracleOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut o = OracleOutcome::new("dice");
    for k in 0..instances {
        let n = rng.random_range(1..64);
        let density = rng.random_range(0.0..1.0);
        let sr: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
        let gt: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
        o.compare(dice_coefficient(&sr, &gt).unwrap(), oracle_dice(&sr, &gt), || format!("case {k}"));
        o.instances += 1;
    }
    out.push(o);

    let mut o = OracleOutcome::new("mse");
    for k in 0..instances {
        let n = rng.random_range(1..64);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        o.compare(mse_value(&p, &t).unwrap(), oracle_mse(&p, &t), || format!("case {k}"));
        o.instances += 1;
    }
    out.push(o);

    let mut acc = OracleOutcome::new("accuracy");
    let mut f1 = OracleOutcome::new("macro_f1");
    for k in 0..instances {
        let classes = rng.random_range(2..6);
        let n = rng.random_range(1..40);
        let l: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let p: Vec<usize> = (0..n)
            .map(|i| if rng.random_bool(0.5) { l[i] } else { rng.random_range(0..classes) })
            .collect();
        acc.compare(accuracy(&p, &l).unwrap(), oracle_accuracy(&p, &l), || format!("case {k}"));
        f1.compare(macro_f1(&p, &l, classes).unwrap(), oracle_macro_f1(&p, &l, classes), || format!("case {k}"));
        acc.instances += 1;
        f1.instances += 1;
    }
    out.push(acc);
    out.push(f1);

    let mut o = OracleOutcome::new("auc");
    for k in 0..instances {
        let classes = rng.random_range(2..5);
        let n = rng.random_range(2..31);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let levels = rng.random_range(2..12) as f64;
        let scores: Vec<f64> = (0..n * classes).map(|_| (rng.random_range(0.0..1.0) * levels).floor() / levels).collect();
        let r = roc_auc(&scores, &labels, classes).unwrap();
        let mut defined = Vec::new();
        for c in 0..classes {
            let s: Vec<f64> = (0..n).map(|i| scores[i * classes + c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            let want = oracle_auc(&s, &pos);
            match (r.per_class[c], want) {
                (Some(g), Some(w)) => {
                    o.compare(g, w, || format!("case {k} class {c}"));
                    defined.push(w);
                }
                (None, None) => {}
                (g, w) => o.require(false, || format!("case {k} class {c}: defined-ness differs {g:?} vs {w:?}")),
            }
        }
        match r.macro_auc {
            Some(m) => o.compare(m, defined.iter().sum::<f64>() / defined.len() as f64, || format!("case {k} macro")),
            None => o.require(defined.is_empty(), || format!("case {k}: macro missing")),
        }
        o.instances += 1;
    }
    out.push(o);

    let mut o = OracleOutcome::new("matching");
    let radius = 6.0;
    for k in 0..instances {
        let (n_pred, n_gt) = (rng.random_range(0..=6), rng.random_range(0..=6));
        let pred = random_points(&mut rng, n_pred, 24.0);
        let gt = random_points(&mut rng, n_gt, 24.0);
        let (best_n, best_d) = oracle_matching(&pred, &gt, radius);
        for strategy in [MatchStrategy::Greedy, MatchStrategy::Optimal] {
            let r = match_detections(&pred, &gt, radius, strategy);
            let (p, rc, f) = oracle_prf(r.tp, pred.len(), gt.len());
            o.compare(r.precision, p, || format!("case {k} {strategy:?} precision"));
            o.compare(r.recall, rc, || format!("case {k} {strategy:?} recall"));
            o.compare(r.f1, f, || format!("case {k} {strategy:?} f1"));
            let mut seen_p = vec![false; pred.len()];
            let mut seen_g = vec![false; gt.len()];
            let mut total = 0.0;
            for &(i, j, d) in &r.matches {
                let dist = ((pred[i].x - gt[j].x).powi(2) + (pred[i].y - gt[j].y).powi(2)).sqrt();
                o.require(!seen_p[i] && !seen_g[j] && dist <= radius && (dist - d).abs() <= ORACLE_TOL, || {
                    format!("case {k} {strategy:?}: invalid match ({i},{j},{d})")
                });
                seen_p[i] = true;
                seen_g[j] = true;
                total += dist;
            }
            o.require(r.tp == r.matches.len() && r.tp + r.fp == pred.len() && r.tp + r.fn_ == gt.len(), || {
                format!("case {k} {strategy:?}: inconsistent counts")
            });
            o.require(r.tp <= best_n, || format!("case {k} {strategy:?}: tp {} beats exhaustive {best_n}", r.tp));
            if strategy == MatchStrategy::Optimal {
                o.require(r.tp == best_n, || format!("case {k}: optimal tp {} vs exhaustive {best_n}", r.tp));
                o.compare(total, best_d, || format!("case {k}: optimal total distance"));
            }
        }
        o.instances += 1;
    }
    out.push(o);

    // Well separated ground truth: every prediction lies within half the
    // radius of one gt and farther than the radius from all others, or far
    // from all of them. Greedy must then agree with the optimum.
    let mut o = OracleOutcome::new("matching greedy == optimal (unambiguous)");
    for k in 0..instances {
        let spacing = 3.0 * radius;
        let n_gt = rng.random_range(0..=6);
        let gt: Vec<Point> = (0..n_gt).map(|i| Point::new(spacing * (i % 3) as f64, spacing * (i / 3) as f64)).collect();
        let mut pred = Vec::new();
        for g in &gt {
            if rng.random_bool(0.7) {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let d = rng.random_range(0.0..radius / 2.0);
                pred.push(Point::new(g.x + d * a.cos(), g.y + d * a.sin()));
            }
        }
        for _ in 0..rng.random_range(0..3) {
            pred.push(Point::new(-100.0 - rng.random_range(0.0..50.0), rng.random_range(0.0..50.0)));
        }
        let g = match_detections(&pred, &gt, radius, MatchStrategy::Greedy);
        let opt = match_detections(&pred, &gt, radius, MatchStrategy::Optimal);
        let (best_n, _) = oracle_matching(&pred, &gt, radius);
        let key = |r: &nucleo_core::metrics::DetectionMatchReport| {
            let mut m: Vec<(usize, usize)> = r.matches.iter().map(|&(i, j, _)| (i, j)).collect();
            m.sort();
            m
        };
        o.require(g.tp == best_n && opt.tp == best_n && key(&g) == key(&opt), || format!("case {k}: greedy {} optimal {} exhaustive {best_n}", g.tp, opt.tp));
        o.instances += 1;
    }
    out.push(o);
    out
}
