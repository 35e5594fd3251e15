//! Brute-force loop oracles for the losses and the data pipeline.

use auroral::geomodel::{DriverSeries, GridMap, GridSpec, MagCoord, Observation};
use auroral::ingest::{build_features, clean_targets, CleanMode, FeatureKind, FeatureSchema};
use auroral::losses::{
    dist_loss_with_grad, fit_dist_weights, multitask_loss, sparse_masked_loss, tail_loss_with_grad, TailTerm,
    DEFAULT_TAIL_TERMS,
};
use auroral::train::composite_window;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Agreement bound for "exact to 64-bit round-off": a few ulps of the magnitude.
pub fn roundoff_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

pub fn all_close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| roundoff_close(*x, *y))
}

// --- loss oracles -----------------------------------------------------------

pub fn tail_oracle(y: &[f64], p: &[f64], terms: &[(f64, f64)]) -> (f64, Vec<f64>) {
    let n = y.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::new();
    for i in 0..y.len() {
        let mut mult = 1.0;
        for &(a, yr) in terms {
            if y[i] > yr && p[i] < yr {
                mult += a;
            }
        }
        total += (y[i] - p[i]) * (y[i] - p[i]) * mult;
        grad.push(2.0 * (p[i] - y[i]) * mult / n);
    }
    (total / n, grad)
}

pub fn dist_oracle(y_fit: &[f64], n_bins: usize, y: &[f64], p: &[f64]) -> (f64, Vec<f64>) {
    let mut lo = y_fit[0];
    let mut hi = y_fit[0];
    for &v in y_fit {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    let width = (hi - lo) / n_bins as f64;
    let bin = |v: f64| -> usize {
        let k = ((v - lo) / width).floor();
        if k < 0.0 {
            0
        } else if k >= n_bins as f64 {
            n_bins - 1
        } else {
            k as usize
        }
    };
    let mut counts = vec![0usize; n_bins];
    for &v in y_fit {
        counts[bin(v)] += 1;
    }
    let m = y_fit.len() as f64;
    let n = y.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::new();
    for i in 0..y.len() {
        let w = 1.0 / ((counts[bin(y[i])] as f64 + 1.0) * m);
        total += w * (y[i] - p[i]) * (y[i] - p[i]);
        grad.push(2.0 * w * (p[i] - y[i]) / n);
    }
    (total / n, grad)
}

/// Returns (value, mse part, cce part).
pub fn multitask_oracle(y: &[f64], flux: &[[f64; 3]], class: &[usize], probs: &[[f64; 3]], lambda: f64) -> (f64, f64, f64) {
    let n = y.len() as f64;
    let (mut se, mut ce) = (0.0, 0.0);
    for i in 0..y.len() {
        let mut sel = 0;
        for j in 1..3 {
            if probs[i][j] > probs[i][sel] {
                sel = j;
            }
        }
        se += (y[i] - flux[i][sel]).powi(2);
        ce += -(probs[i][class[i]].max(1e-12)).ln();
    }
    (se / n + lambda * ce / n, se / n, ce / n)
}

pub fn sparse_oracle(preds: &[Vec<f64>], targets: &[GridMap], normalize: bool) -> (f64, Vec<f64>) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        for c in 0..p.len() {
            if t.mask[c] {
                sum += (p[c] - t.values[c]).powi(2);
                count += 1;
            }
        }
    }
    let scale = if normalize { 1.0 / count as f64 } else { 1.0 };
    let mut grad = Vec::new();
    for (p, t) in preds.iter().zip(targets) {
        for c in 0..p.len() {
            grad.push(if t.mask[c] { 2.0 * (p[c] - t.values[c]) * scale } else { 0.0 });
        }
    }
    (sum * scale, grad)
}

#[derive(Debug, Default, Clone)]
pub struct LossOracleReport {
    pub cases: usize,
    pub tail_mismatches: usize,
    pub dist_mismatches: usize,
    pub multitask_mismatches: usize,
    pub sparse_mismatches: usize,
    pub worked_tail_value: f64,
}

impl LossOracleReport {
    pub fn ok(&self) -> bool {
        self.tail_mismatches + self.dist_mismatches + self.multitask_mismatches + self.sparse_mismatches == 0
            && (self.worked_tail_value - 260.26).abs() < 1e-9
    }
}

fn paper_pairs() -> Vec<(f64, f64)> {
    DEFAULT_TAIL_TERMS.iter().map(|t| (t.a, t.y_r)).collect()
}

/// Targets in log10 flux units with a heavy right tail, predictions nearby.
fn flux_pair(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let y: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.3) { rng.random_range(12.0..14.5) } else { rng.random_range(6.0..12.5) })
        .collect();
    let p = y.iter().map(|v| v + rng.random_range(-3.0..3.0)).collect();
    (y, p)
}

fn random_probs(rng: &mut ChaCha8Rng) -> [f64; 3] {
    match rng.random_range(0..4) {
        0 => {
            // one-hot, possibly a tie-free confident row
            let mut r = [0.0; 3];
            r[rng.random_range(0..3)] = 1.0;
            r
        }
        1 => [1.0 / 3.0; 3],
        _ => {
            let e: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
            let s: f64 = e.iter().sum();
            [e[0] / s, e[1] / s, e[2] / s]
        }
    }
}

pub fn loss_oracle_suite(n_cases: usize, seed: u64) -> LossOracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = paper_pairs();
    let terms: Vec<TailTerm> = DEFAULT_TAIL_TERMS.to_vec();
    let mut rep = LossOracleReport {
        cases: n_cases,
        worked_tail_value: tail_loss_with_grad(&[13.6], &[11.0], &terms).unwrap().0,
        ..Default::default()
    };
    for _ in 0..n_cases {
        let n = rng.random_range(1..40);

        let (y, p) = flux_pair(&mut rng, n);
        let (v, g) = tail_loss_with_grad(&y, &p, &terms).unwrap();
        let (ov, og) = tail_oracle(&y, &p, &pairs);
        if !roundoff_close(v, ov) || !all_close(&g, &og) {
            rep.tail_mismatches += 1;
        }

        let m = rng.random_range(2..200);
        let (y_fit, _) = flux_pair(&mut rng, m);
        let n_bins = rng.random_range(1..60);
        let dw = fit_dist_weights(&y_fit, n_bins);
        let (mut y, p) = flux_pair(&mut rng, n);
        if rng.random_bool(0.2) {
            y[0] = 3.0;
        }
        match dw {
            Ok(w) => {
                let (v, g) = dist_loss_with_grad(&y, &p, &w).unwrap();
                let (ov, og) = dist_oracle(&y_fit, n_bins, &y, &p);
                if !roundoff_close(v, ov) || !all_close(&g, &og) {
                    rep.dist_mismatches += 1;
                }
            }
            Err(_) => rep.dist_mismatches += 1,
        }

        let flux: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_: i32| rng.random_range(5.0..14.0))).collect();
        let probs: Vec<[f64; 3]> = (0..n).map(|_| random_probs(&mut rng)).collect();
        let class: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(5.0..14.0)).collect();
        let lambda = rng.random_range(0.0..3.0);
        let mut onehot = vec![0.0; 3 * n];
        for (i, &c) in class.iter().enumerate() {
            onehot[3 * i + c] = 1.0;
        }
        let out =
            multitask_loss(&y, &flux.concat(), &onehot, &probs.concat(), 3, lambda).expect("valid probability rows");
        let (ov, omse, occe) = multitask_oracle(&y, &flux, &class, &probs, lambda);
        if !roundoff_close(out.value, ov) || !roundoff_close(out.mse, omse) || !roundoff_close(out.cce, occe) {
            rep.multitask_mismatches += 1;
        }

        let spec = GridSpec::new(rng.random_range(4..10), rng.random_range(4..10)).unwrap();
        let b = rng.random_range(1..4);
        let mut targets = Vec::new();
        let mut preds = Vec::new();
        for k in 0..b {
            let mut t = GridMap::empty(spec);
            for c in 0..spec.len() {
                if rng.random_bool(0.2) || (k == 0 && c == 0) {
                    t.mask[c] = true;
                    t.values[c] = rng.random_range(6.0..14.0);
                } else {
                    t.values[c] = f64::NAN;
                }
            }
            targets.push(t);
            preds.push((0..spec.len()).map(|_| rng.random_range(6.0..14.0)).collect::<Vec<f64>>());
        }
        let normalize = rng.random_bool(0.5);
        let refs: Vec<&GridMap> = targets.iter().collect();
        let out = sparse_masked_loss(&preds.concat(), &refs, normalize).unwrap();
        let (ov, og) = sparse_oracle(&preds, &targets, normalize);
        let zero_off_mask = out.grad.iter().zip(refs.iter().flat_map(|t| t.mask.iter())).all(|(g, &m)| m || g.to_bits() == 0);
        if !roundoff_close(out.value, ov) || !all_close(&out.grad, &og) || !zero_off_mask {
            rep.sparse_mismatches += 1;
        }
    }
    rep
}

// --- pipeline oracles -------------------------------------------------------

pub fn percentile_oracle(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * p / 100.0;
    let i = h.floor() as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] + (h - i as f64) * (v[i + 1] - v[i])
}

/// Nearest driver sample to `target`, ties to the earlier one; `None` before the series.
pub fn lag_oracle(d: &DriverSeries, col: &[f64], target: i64) -> Option<f64> {
    if target < d.t0 {
        return None;
    }
    let mut best: Option<(i64, f64)> = None;
    for (k, &v) in col.iter().enumerate() {
        let dist = (d.t0 + k as i64 * d.cadence - target).abs();
        if best.is_none_or(|(bd, _)| dist < bd) {
            best = Some((dist, v));
        }
    }
    best.map(|b| b.1)
}

/// Mean of samples with time in `(t - window, t]`; needs history back to `t - window`.
pub fn average_oracle(d: &DriverSeries, col: &[f64], t: i64, window: i64) -> Option<f64> {
    if t - window < d.t0 {
        return None;
    }
    let (mut s, mut c) = (0.0, 0usize);
    for (k, &v) in col.iter().enumerate() {
        let tk = d.t0 + k as i64 * d.cadence;
        if tk > t - window && tk <= t {
            s += v;
            c += 1;
        }
    }
    (c > 0).then(|| s / c as f64)
}

pub fn cell_oracle(spec: GridSpec, c: MagCoord) -> usize {
    let dlat = (spec.lat_max - spec.lat_min) / spec.n_lat as f64;
    let row = (((c.mlat() - spec.lat_min) / dlat).floor() as usize).min(spec.n_lat - 1);
    let col = ((c.mlt() / (24.0 / spec.n_mlt as f64)).floor() as usize) % spec.n_mlt;
    row * spec.n_mlt + col
}

pub fn composite_oracle(obs: &[Observation], t_center: i64, spec: GridSpec) -> Option<GridMap> {
    let mut sum = vec![0.0; spec.len()];
    let mut cnt = vec![0usize; spec.len()];
    for o in obs {
        if (o.t - t_center).abs() <= 150 && o.eflux > 0.0 {
            let i = cell_oracle(spec, o.coord);
            sum[i] += o.eflux.log10();
            cnt[i] += 1;
        }
    }
    let mut m = GridMap::empty(spec);
    for i in 0..spec.len() {
        if cnt[i] > 0 {
            m.mask[i] = true;
            m.values[i] = sum[i] / cnt[i] as f64;
        }
    }
    (cnt.iter().any(|&c| c > 0)).then_some(m)
}

#[derive(Debug, Default, Clone)]
pub struct PipelineReport {
    pub cleaning_cases: usize,
    pub cleaning_mismatches: usize,
    pub feature_cases: usize,
    pub feature_mismatches: usize,
    pub composite_cases: usize,
    pub composite_mismatches: usize,
}

impl PipelineReport {
    pub fn ok(&self) -> bool {
        self.cleaning_mismatches + self.feature_mismatches + self.composite_mismatches == 0
            && self.cleaning_cases > 0
            && self.feature_cases > 0
            && self.composite_cases > 0
    }
}

pub fn random_drivers(rng: &mut ChaCha8Rng, vars: &[&str]) -> DriverSeries {
    let cadence = [60, 300, 600][rng.random_range(0..3)];
    let len = rng.random_range(80..200);
    let t0 = rng.random_range(-10_000..10_000);
    let cols = vars.iter().map(|v| (v.to_string(), (0..len).map(|_| rng.random_range(-50.0..50.0)).collect())).collect();
    DriverSeries::new(t0, cadence, cols)
}

pub fn random_obs(rng: &mut ChaCha8Rng, t_lo: i64, t_hi: i64, n: usize) -> Vec<Observation> {
    (0..n)
        .map(|_| Observation {
            t: rng.random_range(t_lo..=t_hi),
            sat_id: rng.random_range(1..4),
            coord: MagCoord::new(rng.random_range(45.0..=90.0), rng.random_range(0.0..24.0)).unwrap(),
            eflux: 10f64.powf(rng.random_range(6.0..14.0)),
            region: None,
        })
        .collect()
}

pub fn pipeline_oracle_suite(seed: u64) -> PipelineReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = PipelineReport::default();

    for case in 0..60 {
        let n = if case == 0 { 100_000 } else { rng.random_range(1..3000) };
        let obs: Vec<Observation> = random_obs(&mut rng, 0, 1000, n);
        let p = if rng.random_bool(0.5) { 99.995 } else { rng.random_range(50.0..100.0) };
        let flux: Vec<f64> = obs.iter().map(|o| o.eflux).collect();
        let thr = percentile_oracle(&flux, p);
        let expect: Vec<f64> = flux.iter().copied().filter(|&f| f <= thr).collect();
        let (kept, report) = clean_targets(obs, CleanMode::Percentile(p)).unwrap();
        let got: Vec<f64> = kept.iter().map(|o| o.eflux).collect();
        rep.cleaning_cases += 1;
        if got != expect || report.threshold != thr || report.n_dropped_outlier != n - expect.len() {
            rep.cleaning_mismatches += 1;
        }
    }

    let vars = ["AE", "Bz"];
    for _ in 0..40 {
        let d = random_drivers(&mut rng, &vars);
        let lags: Vec<u32> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0..60)).collect();
        let avgs: Vec<u32> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..240)).collect();
        let Ok(schema) = FeatureSchema::build(&vars, &dedup(lags), &dedup(avgs), true) else {
            rep.feature_mismatches += 1;
            continue;
        };
        let obs = random_obs(&mut rng, d.t0 - 600, d.t_end() + 600, 60);
        let (table, dropped) = build_features(&d, &obs, &schema).unwrap();
        let mut expected_rows: Vec<(i64, Vec<f64>)> = Vec::new();
        for o in &obs {
            if o.t < d.t0 || o.t > d.t_end() {
                continue;
            }
            let mut row = Vec::new();
            let mut ok = true;
            for k in schema.kinds() {
                let v = match k {
                    FeatureKind::SinMlt => Some((2.0 * std::f64::consts::PI * o.coord.mlt() / 24.0).sin()),
                    FeatureKind::CosMlt => Some((2.0 * std::f64::consts::PI * o.coord.mlt() / 24.0).cos()),
                    FeatureKind::MlatScaled => Some((o.coord.mlat() - 45.0) / 45.0),
                    FeatureKind::Lag { var, minutes } => {
                        lag_oracle(&d, d.column(var).unwrap(), o.t - i64::from(*minutes) * 60)
                    }
                    FeatureKind::Average { var, minutes } => {
                        average_oracle(&d, d.column(var).unwrap(), o.t, i64::from(*minutes) * 60)
                    }
                };
                match v {
                    Some(v) => row.push(v),
                    None => ok = false,
                }
            }
            if ok {
                expected_rows.push((o.t, row));
            }
        }
        rep.feature_cases += 1;
        let matches = table.len() == expected_rows.len()
            && dropped == obs.len() - expected_rows.len()
            && expected_rows.iter().enumerate().all(|(i, (t, row))| {
                // Spatial entries at round-off, driver-derived entries bit-exact.
                table.t[i] == *t
                    && schema.kinds().iter().zip(table.row(i)).zip(row).all(|((k, a), b)| {
                        if k.is_spatial() {
                            roundoff_close(*a, *b)
                        } else {
                            a == b
                        }
                    })
            });
        if !matches {
            rep.feature_mismatches += 1;
        }
    }

    for _ in 0..200 {
        let spec = GridSpec::new(rng.random_range(4..40), rng.random_range(4..40)).unwrap();
        let n = rng.random_range(1..80);
        let obs = random_obs(&mut rng, 0, 3000, n);
        let tc = rng.random_range(-200..3200);
        let got = composite_window(&obs, tc, spec).ok();
        let want = composite_oracle(&obs, tc, spec);
        rep.composite_cases += 1;
        let same = match (&got, &want) {
            (None, None) => true,
            (Some(a), Some(b)) => a.mask == b.mask && (0..spec.len()).all(|i| !a.mask[i] || a.values[i] == b.values[i]),
            _ => false,
        };
        if !same {
            rep.composite_mismatches += 1;
        }
    }
    rep
}

fn dedup(mut v: Vec<u32>) -> Vec<u32> {
    v.sort_unstable();
    v.dedup();
    v
}
