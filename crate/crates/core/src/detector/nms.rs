use std::cmp::Ordering;
use std::collections::HashMap;

use super::DetectionCandidate;

fn order(a: &DetectionCandidate, b: &DetectionCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.center[0].total_cmp(&b.center[0]))
        .then_with(|| a.center[1].total_cmp(&b.center[1]))
        .then_with(|| a.center[2].total_cmp(&b.center[2]))
}

fn to_mm(c: &[f64; 3], spacing: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| c[i] * spacing[i])
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Greedy suppression: keeps the best-scoring candidate, discards everything
/// within `radius_mm` of a kept one. Output is in descending score order.
pub fn nms_3d(cands: &[DetectionCandidate], radius_mm: f64, spacing: [f64; 3]) -> Vec<DetectionCandidate> {
    if radius_mm <= 0.0 {
        return nms_3d_brute_force(cands, radius_mm, spacing);
    }
    let mut sorted: Vec<&DetectionCandidate> = cands.iter().collect();
    sorted.sort_by(|a, b| order(a, b));
    let r2 = radius_mm * radius_mm;
    let cell = |p: [f64; 3]| -> [i64; 3] { p.map(|v| (v / radius_mm).floor() as i64) };
    let mut grid: HashMap<[i64; 3], Vec<[f64; 3]>> = HashMap::new();
    let mut kept = Vec::new();
    for c in sorted {
        let p = to_mm(&c.center, spacing);
        let k = cell(p);
        let mut suppressed = false;
        'search: for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(pts) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        if pts.iter().any(|&q| dist2(p, q) <= r2) {
                            suppressed = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        if !suppressed {
            grid.entry(k).or_default().push(p);
            kept.push(c.clone());
        }
    }
    kept
}

/// Quadratic reference implementation of [`nms_3d`].
pub fn nms_3d_brute_force(cands: &[DetectionCandidate], radius_mm: f64, spacing: [f64; 3]) -> Vec<DetectionCandidate> {
    let mut sorted = cands.to_vec();
    sorted.sort_by(order);
    let r2 = radius_mm * radius_mm;
    let mut kept: Vec<DetectionCandidate> = Vec::new();
    for c in sorted {
        let p = to_mm(&c.center, spacing);
        if kept.iter().all(|k| dist2(p, to_mm(&k.center, spacing)) > r2) {
            kept.push(c);
        }
    }
    kept
}
