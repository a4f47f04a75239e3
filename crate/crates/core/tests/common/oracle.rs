//! Brute-force reference evaluators. Nothing here calls into the metric,
//! open-set or warp code it is used to check.

#![allow(dead_code)]

/// Observed values, distinct and ascending, plus the next float above the
/// maximum. Zero is always reported as `+0.0`.
pub fn candidates(values: &[f64]) -> Vec<f64> {
    let mut c: Vec<f64> = values.iter().map(|&v| if v == 0.0 { 0.0 } else { v }).collect();
    c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    c.dedup();
    let max = *c.last().unwrap();
    c.push(max.next_up());
    c
}

pub fn fmr(impostor: &[f64], t: f64) -> f64 {
    let mut n = 0usize;
    for &s in impostor {
        if s >= t {
            n += 1;
        }
    }
    n as f64 / impostor.len() as f64
}

pub fn fnmr(genuine: &[f64], t: f64) -> f64 {
    let mut n = 0usize;
    for &s in genuine {
        if s < t {
            n += 1;
        }
    }
    n as f64 / genuine.len() as f64
}

pub fn threshold_at_fmr(impostor: &[f64], alpha: f64) -> f64 {
    for t in candidates(impostor) {
        if fmr(impostor, t) <= alpha {
            return t;
        }
    }
    unreachable!("the point above the maximum always has FMR 0")
}

/// `(threshold, eer, fmr, fnmr)`
pub fn eer(genuine: &[f64], impostor: &[f64]) -> (f64, f64, f64, f64) {
    let all: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    let mut best: Option<(f64, (f64, f64, f64, f64))> = None;
    for t in candidates(&all) {
        let a = fmr(impostor, t);
        let b = fnmr(genuine, t);
        let gap = (a - b).abs();
        match best {
            Some((g, _)) if g <= gap => {}
            _ => best = Some((gap, (t, (a + b) / 2.0, a, b))),
        }
    }
    best.unwrap().1
}

/// `(threshold, fmr, fnmr)` per candidate, ascending threshold.
pub fn roc(genuine: &[f64], impostor: &[f64]) -> Vec<(f64, f64, f64)> {
    let all: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    candidates(&all)
        .into_iter()
        .map(|t| (t, fmr(impostor, t), fnmr(genuine, t)))
        .collect()
}

/// One probe's raw scores against every gallery template.
pub struct OpenSetProbe {
    pub subject: String,
    pub known: bool,
    /// `(template subject, score)` for every gallery template.
    pub scores: Vec<(String, f64)>,
}

/// Best template score and the subject holding it (ties: smallest id).
fn rank1(p: &OpenSetProbe) -> (f64, String) {
    let mut best = f64::NEG_INFINITY;
    let mut who = String::new();
    for (subject, s) in &p.scores {
        if *s > best || (*s == best && *subject < who) {
            best = *s;
            who = subject.clone();
        }
    }
    (best, who)
}

/// `(fpir, tpir, threshold)` for thresholds `above max`, every distinct
/// per-probe maximum (descending), and `-inf`. Each point re-runs the full
/// probe × template double loop.
pub fn openset(probes: &[OpenSetProbe]) -> Vec<(f64, f64, f64)> {
    let maxima: Vec<f64> = probes.iter().map(|p| rank1(p).0).collect();
    let mut ts = candidates(&maxima);
    ts.reverse();
    ts.push(f64::NEG_INFINITY);
    let n_known = probes.iter().filter(|p| p.known).count();
    let n_unknown = probes.len() - n_known;
    ts.into_iter()
        .map(|t| {
            let (mut fp, mut tp) = (0usize, 0usize);
            for p in probes {
                let mut best = f64::NEG_INFINITY;
                let mut who = String::new();
                for (subject, s) in &p.scores {
                    if *s > best || (*s == best && *subject < who) {
                        best = *s;
                        who = subject.clone();
                    }
                }
                if best >= t {
                    if !p.known {
                        fp += 1;
                    } else if who == p.subject {
                        tp += 1;
                    }
                }
            }
            (fp as f64 / n_unknown as f64, tp as f64 / n_known as f64, t)
        })
        .collect()
}

pub fn closed_set_accuracy(probes: &[OpenSetProbe]) -> f64 {
    let known: Vec<&OpenSetProbe> = probes.iter().filter(|p| p.known).collect();
    let hits = known.iter().filter(|p| rank1(p).1 == p.subject).count();
    hits as f64 / known.len() as f64
}

/// Per-pixel bilinear resampling through an explicitly inverted 2x3 matrix
/// `m` acting on `(y, x)`. `pixel(y, x, c)` returns `None` outside the image.
pub fn naive_warp(
    pixel: impl Fn(i64, i64, usize) -> Option<f64>,
    channels: usize,
    m: [[f64; 3]; 2],
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ];
    let mut out = Vec::new();
    for i in 0..out_h {
        for j in 0..out_w {
            let dy = i as f64 - m[0][2];
            let dx = j as f64 - m[1][2];
            let sy = inv[0][0] * dy + inv[0][1] * dx;
            let sx = inv[1][0] * dy + inv[1][1] * dx;
            let y0 = sy.floor() as i64;
            let x0 = sx.floor() as i64;
            let wy = sy - y0 as f64;
            let wx = sx - x0 as f64;
            for c in 0..channels {
                let mut v = 0.0;
                for (yy, fy) in [(y0, 1.0 - wy), (y0 + 1, wy)] {
                    for (xx, fx) in [(x0, 1.0 - wx), (x0 + 1, wx)] {
                        v += fy * fx * pixel(yy, xx, c).unwrap_or(0.0);
                    }
                }
                out.push(v);
            }
        }
    }
    out
}
