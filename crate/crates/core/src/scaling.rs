//! Fitting `L(N, D) = E + A / N^alpha + B / D^beta` to (parameters,
//! tokens, loss) triples with a Huber loss on log residuals.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    #[serde(rename = "N")]
    pub n: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub loss: f64,
}

#[allow(non_snake_case)]
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub A: f64,
    pub B: f64,
    pub E: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `beta / (alpha + beta)`
    pub a: f64,
    pub objective: f64,
}

impl ScalingFit {
    #[allow(non_snake_case)]
    pub fn new(A: f64, B: f64, E: f64, alpha: f64, beta: f64) -> Self {
        ScalingFit {
            A,
            B,
            E,
            alpha,
            beta,
            a: beta / (alpha + beta),
            objective: 0.0,
        }
    }
}

pub fn predict_loss(fit: &ScalingFit, n: f64, d: f64) -> f64 {
    fit.E + fit.A * n.powf(-fit.alpha) + fit.B * d.powf(-fit.beta)
}

/// Exponent of the compute-optimal model size, `beta / (alpha + beta)`.
pub fn compute_allocation_exponent(fit: &ScalingFit) -> f64 {
    fit.beta / (fit.alpha + fit.beta)
}

pub const DEFAULT_HUBER_DELTA: f64 = 1e-3;

fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Simplex coordinates: `[ln A, ln B, ln E, alpha, beta]`.
fn objective(theta: &[f64; 5], pts: &[ScalingPoint], delta: f64) -> f64 {
    let [la, lb, le, alpha, beta] = *theta;
    if !(alpha > 0.0 && beta > 0.0) {
        return f64::INFINITY;
    }
    let (a, b, e) = (la.exp(), lb.exp(), le.exp());
    let mut total = 0.0;
    for p in pts {
        let pred = e + a * p.n.powf(-alpha) + b * p.d.powf(-beta);
        if !(pred > 0.0 && pred.is_finite()) {
            return f64::INFINITY;
        }
        total += huber(pred.ln() - p.loss.ln(), delta);
    }
    if total.is_finite() {
        total
    } else {
        f64::INFINITY
    }
}

/// Relative least squares for `A` and `B` with the exponents and `E` fixed.
fn solve_intercepts(pts: &[ScalingPoint], e: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let (mut sxx, mut sxy, mut syy, mut sxr, mut syr) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in pts {
        let w = 1.0 / (p.loss * p.loss);
        let x = p.n.powf(-alpha);
        let y = p.d.powf(-beta);
        let r = p.loss - e;
        sxx += w * x * x;
        sxy += w * x * y;
        syy += w * y * y;
        sxr += w * x * r;
        syr += w * y * r;
    }
    let det = sxx * syy - sxy * sxy;
    let (a, b) = if det.abs() > 0.0 {
        ((syy * sxr - sxy * syr) / det, (sxx * syr - sxy * sxr) / det)
    } else {
        (sxr / sxx, syr / syy)
    };
    let floor = 1e-12;
    (a.max(floor), b.max(floor))
}

const NM_MAX_ITER: usize = 20_000;
const NM_RESTARTS: usize = 3;

/// Nelder-Mead with standard coefficients. Returns the best vertex.
fn nelder_mead(f: &dyn Fn(&[f64; 5]) -> f64, start: [f64; 5], step: [f64; 5]) -> ([f64; 5], f64) {
    const N: usize = 5;
    let mut simplex: Vec<([f64; N], f64)> = Vec::with_capacity(N + 1);
    simplex.push((start, f(&start)));
    for i in 0..N {
        let mut v = start;
        v[i] += step[i];
        simplex.push((v, f(&v)));
    }
    for _ in 0..NM_MAX_ITER {
        // stable sort keeps ties in insertion order
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[N].1;
        let spread = (0..N)
            .map(|i| simplex.iter().map(|v| (v.0[i] - simplex[0].0[i]).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if (worst - best).abs() <= 1e-16 * (1.0 + best.abs()) && spread < 1e-9 {
            break;
        }
        if spread < 1e-13 {
            break;
        }
        let mut centroid = [0.0; N];
        for v in &simplex[..N] {
            for (c, x) in centroid.iter_mut().zip(&v.0) {
                *c += x / N as f64;
            }
        }
        let along = |t: f64| {
            let mut p = [0.0; N];
            for ((p, c), w) in p.iter_mut().zip(&centroid).zip(&simplex[N].0) {
                *p = c + t * (w - c);
            }
            p
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            simplex[N] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[N].1 {
                let x = along(-0.5);
                (x, f(&x))
            } else {
                let x = along(0.5);
                (x, f(&x))
            };
            if fc < fr.min(simplex[N].1) {
                simplex[N] = (xc, fc);
            } else {
                let x0 = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    for (x, o) in v.0.iter_mut().zip(&x0) {
                        *x = o + 0.5 * (*x - o);
                    }
                    v.1 = f(&v.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

pub const GRID_EXPONENTS: [f64; 3] = [0.3, 0.5, 0.7];
pub const GRID_E: [f64; 3] = [0.3, 0.7, 1.0];

/// Multi-start fit. Every grid start `(alpha, beta, E)` gets least-squares
/// intercepts and is refined by restarted Nelder-Mead; the lowest objective
/// wins, ties going to the earlier start. Points are sorted first so the
/// result does not depend on input order.
pub fn fit_scaling_law(points: &[ScalingPoint], huber_delta: f64) -> Result<ScalingFit> {
    if points.len() < 5 {
        return Err(Error::IllPosedFit(format!("need at least 5 points, got {}", points.len())));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(p.n > 0.0 && p.d > 0.0 && p.loss > 0.0) || !(p.n.is_finite() && p.d.is_finite() && p.loss.is_finite()))
    {
        return Err(Error::invalid(format!("N, D and loss must be positive and finite: {p:?}")));
    }
    if !(huber_delta > 0.0) {
        return Err(Error::invalid("huber delta must be positive"));
    }
    let all_equal = |f: fn(&ScalingPoint) -> f64| points.iter().all(|p| f(p) == f(&points[0]));
    if all_equal(|p| p.n) {
        return Err(Error::IllPosedFit("all N are equal".into()));
    }
    if all_equal(|p| p.d) {
        return Err(Error::IllPosedFit("all D are equal".into()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.n.total_cmp(&b.n).then(a.d.total_cmp(&b.d)).then(a.loss.total_cmp(&b.loss)));
    let span = |f: fn(&ScalingPoint) -> f64| {
        let (lo, hi) = pts.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), p| (lo.min(f(p)), hi.max(f(p))));
        hi / lo
    };
    if span(|p| p.n) < 10.0 || span(|p| p.d) < 10.0 {
        log::warn!("points span less than a decade in N or D; the fit may be poorly determined");
    }

    let f = |t: &[f64; 5]| objective(t, &pts, huber_delta);
    let step = [0.5, 0.5, 0.1, 0.05, 0.05];
    let mut best: Option<([f64; 5], f64)> = None;
    for &alpha in &GRID_EXPONENTS {
        for &beta in &GRID_EXPONENTS {
            for &e in &GRID_E {
                let (a, b) = solve_intercepts(&pts, e, alpha, beta);
                let mut cur = ([a.ln(), b.ln(), e.ln(), alpha, beta], f64::INFINITY);
                for _ in 0..NM_RESTARTS {
                    cur = nelder_mead(&f, cur.0, step);
                }
                if best.is_none_or(|b| cur.1 < b.1) {
                    best = Some(cur);
                }
            }
        }
    }
    let (theta, obj) = best.expect("grid is nonempty");
    if !obj.is_finite() {
        return Err(Error::IllPosedFit("no finite objective found".into()));
    }
    let mut fit = ScalingFit::new(theta[0].exp(), theta[1].exp(), theta[2].exp(), theta[3], theta[4]);
    fit.objective = obj;
    Ok(fit)
}

/// Read `N,D,loss` rows (header required, column order free).
pub fn read_points_csv<R: Read>(r: R) -> Result<Vec<ScalingPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr
        .headers()
        .map_err(|e| Error::invalid(format!("csv header: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::invalid(format!("missing column `{name}`")))
    };
    let (ni, di, li) = (col("N")?, col("D")?, col("loss")?);
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::invalid(format!("csv row {}: {e}", row + 1)))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("csv row {}: {e}", row + 1)))
        };
        out.push(ScalingPoint {
            n: num(ni)?,
            d: num(di)?,
            loss: num(li)?,
        });
    }
    Ok(out)
}
