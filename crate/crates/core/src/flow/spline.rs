//! Monotone rational-quadratic spline transforms with linear tails.
//!
//! Inside `[-B, B]` each coordinate is warped by a strictly increasing
//! rational-quadratic segment per bin; outside, the map is the identity with
//! zero log-derivative. Bin widths/heights are floored and normalized to sum
//! to `2B`, knot derivatives are strictly positive, and the two boundary
//! derivatives are fixed at 1 so the map stays C1 across the tails.

use crate::ad::{Tape, Tensor, Var};

use super::FlowError;

/// Spline hyperparameters shared by every bijector of a flow.
#[derive(Debug, Clone, Copy)]
pub struct SplineSpec {
    pub bins: usize,
    pub tail_bound: f64,
    pub min_bin: f64,
    pub min_derivative: f64,
}

impl SplineSpec {
    /// Raw parameters per transformed coordinate: K widths, K heights, K+1
    /// derivatives.
    pub fn raw_params(&self) -> usize {
        3 * self.bins + 1
    }

    /// Shift making `min_derivative + softplus(raw + shift)` equal 1 at
    /// raw = 0, so a zero-initialized conditioner yields an identity spline.
    pub(crate) fn derivative_shift(&self) -> f64 {
        ((1.0 - self.min_derivative).exp() - 1.0).ln()
    }
}

/// Explicit per-coordinate spline parameters (already positive/normalized).
#[derive(Debug, Clone)]
pub struct SplineSegmentParams {
    /// K bin widths, positive, summing to 2B.
    pub bin_widths: Vec<f64>,
    /// K bin heights, positive, summing to 2B.
    pub bin_heights: Vec<f64>,
    /// K+1 knot derivatives, strictly positive.
    pub knot_derivatives: Vec<f64>,
    /// Tail bound B; the transform is the identity outside [-B, B].
    pub tail_bound: f64,
}

impl SplineSegmentParams {
    /// Identity spline: uniform bins, all derivatives 1.
    pub fn identity(bins: usize, tail_bound: f64) -> Self {
        SplineSegmentParams {
            bin_widths: vec![2.0 * tail_bound / bins as f64; bins],
            bin_heights: vec![2.0 * tail_bound / bins as f64; bins],
            knot_derivatives: vec![1.0; bins + 1],
            tail_bound,
        }
    }

    fn validate(&self) -> Result<(), FlowError> {
        let k = self.bin_widths.len();
        if k == 0 || self.bin_heights.len() != k || self.knot_derivatives.len() != k + 1 {
            return Err(FlowError::InvalidConfig(format!(
                "spline params need K widths, K heights, K+1 derivatives; got {}/{}/{}",
                k,
                self.bin_heights.len(),
                self.knot_derivatives.len()
            )));
        }
        if !(self.tail_bound > 0.0) {
            return Err(FlowError::InvalidConfig("tail bound must be positive".into()));
        }
        Ok(())
    }

    /// Knot abscissae/ordinates after flooring degenerate bins (clamped,
    /// never raised) and rescaling sums back to 2B.
    fn knots(&self, min_bin: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let b = self.tail_bound;
        let norm = |raw: &[f64]| -> Vec<f64> {
            let floored: Vec<f64> = raw.iter().map(|&w| w.max(min_bin)).collect();
            let total: f64 = floored.iter().sum();
            let scale = 2.0 * b / total;
            let mut knots = Vec::with_capacity(raw.len() + 1);
            knots.push(-b);
            let mut acc = -b;
            for w in floored {
                acc += w * scale;
                knots.push(acc);
            }
            knots
        };
        let xs = norm(&self.bin_widths);
        let ys = norm(&self.bin_heights);
        let ds: Vec<f64> = self
            .knot_derivatives
            .iter()
            .map(|&d| d.max(min_bin.min(1e-3)))
            .collect();
        (xs, ys, ds)
    }
}

/// Spline knots as tape variables, one row per transformed element.
pub(crate) struct SplineKnots {
    /// [e, K+1] strictly increasing abscissae from -B to B.
    pub x_knots: Var,
    /// [e, K+1] strictly increasing ordinates from -B to B.
    pub y_knots: Var,
    /// [e, K+1] positive derivatives, boundary entries pinned to 1.
    pub derivs: Var,
}

/// Map raw conditioner output `[e, 3K+1]` to normalized knots.
pub(crate) fn normalize_raw_params(tape: &mut Tape, raw: Var, spec: &SplineSpec) -> SplineKnots {
    let k = spec.bins;
    let e = tape.value(raw).rows();
    let b = spec.tail_bound;

    let knots_from = |tape: &mut Tape, slice: Var| -> Var {
        // softmax -> widths in [min_bin, ..] summing to 2B -> cumulative knots.
        let lse = tape.logsumexp_rows(slice);
        let centered = tape.sub_col(slice, lse);
        let sm = tape.exp(centered);
        let scaled = tape.scale(sm, 2.0 * b - k as f64 * spec.min_bin);
        let widths = tape.offset(scaled, spec.min_bin);
        let cum = tape.cumsum_rows(widths);
        let right = tape.offset(cum, -b);
        let left = tape.constant(Tensor::matrix(e, 1, vec![-b; e]));
        tape.concat_cols(left, right)
    };

    let wr = tape.slice_cols(raw, 0, k);
    let hr = tape.slice_cols(raw, k, 2 * k);
    let x_knots = knots_from(tape, wr);
    let y_knots = knots_from(tape, hr);

    // Interior derivatives via shifted softplus; boundaries fixed at 1.
    let dr = tape.slice_cols(raw, 2 * k, 3 * k + 1);
    let ones = tape.constant(Tensor::matrix(e, 1, vec![1.0; e]));
    let derivs = if k > 1 {
        let interior = tape.slice_cols(dr, 1, k);
        let shifted = tape.offset(interior, spec.derivative_shift());
        let sp = tape.softplus(shifted);
        let d_int = tape.offset(sp, spec.min_derivative);
        let head = tape.concat_cols(ones, d_int);
        tape.concat_cols(head, ones)
    } else {
        tape.concat_cols(ones, ones)
    };

    SplineKnots { x_knots, y_knots, derivs }
}

/// Knot variables from explicit per-coordinate parameters (constants).
pub(crate) fn knots_from_params(
    tape: &mut Tape,
    params: &[SplineSegmentParams],
    min_bin: f64,
) -> Result<(SplineKnots, f64), FlowError> {
    let e = params.len();
    let k = params[0].bin_widths.len();
    let b = params[0].tail_bound;
    let mut xs = Vec::with_capacity(e * (k + 1));
    let mut ys = Vec::with_capacity(e * (k + 1));
    let mut ds = Vec::with_capacity(e * (k + 1));
    for p in params {
        p.validate()?;
        if p.bin_widths.len() != k || (p.tail_bound - b).abs() > 0.0 {
            return Err(FlowError::InvalidConfig(
                "per-coordinate spline params must share K and tail bound".into(),
            ));
        }
        let (x, y, d) = p.knots(min_bin);
        xs.extend_from_slice(&x);
        ys.extend_from_slice(&y);
        ds.extend_from_slice(&d);
    }
    Ok((
        SplineKnots {
            x_knots: tape.constant(Tensor::matrix(e, k + 1, xs)),
            y_knots: tape.constant(Tensor::matrix(e, k + 1, ys)),
            derivs: tape.constant(Tensor::matrix(e, k + 1, ds)),
        },
        b,
    ))
}

fn locate_bins(knot_rows: &Tensor, points: &Tensor) -> Vec<usize> {
    let k = knot_rows.cols() - 1;
    let mut bins = Vec::with_capacity(points.len());
    for (i, &p) in points.data().iter().enumerate() {
        let row = &knot_rows.data()[i * (k + 1)..(i + 1) * (k + 1)];
        let mut b = k - 1;
        for j in 0..k {
            if p < row[j + 1] {
                b = j;
                break;
            }
        }
        bins.push(b);
    }
    bins
}

fn inside_mask(tape: &mut Tape, x: Var, b: f64) -> (Var, Var) {
    let vals = tape.value(x);
    let mask: Vec<f64> =
        vals.data().iter().map(|&v| if v.abs() <= b && v.is_finite() { 1.0 } else { 0.0 }).collect();
    let inv: Vec<f64> = mask.iter().map(|&m| 1.0 - m).collect();
    let shape = vals.shape().to_vec();
    let m = tape.constant(Tensor::new(shape.clone(), mask));
    let im = tape.constant(Tensor::new(shape, inv));
    (m, im)
}

struct BinLocals {
    x0: Var,
    wbin: Var,
    y0: Var,
    hbin: Var,
    slope: Var,
    d0: Var,
    d1: Var,
    dd_m2s: Var,
}

fn gather_bin_locals(tape: &mut Tape, knots: &SplineKnots, bins: &[usize]) -> BinLocals {
    let next: Vec<usize> = bins.iter().map(|&b| b + 1).collect();
    let x0 = tape.take_per_row(knots.x_knots, bins);
    let x1 = tape.take_per_row(knots.x_knots, &next);
    let y0 = tape.take_per_row(knots.y_knots, bins);
    let y1 = tape.take_per_row(knots.y_knots, &next);
    let d0 = tape.take_per_row(knots.derivs, bins);
    let d1 = tape.take_per_row(knots.derivs, &next);
    let wbin = tape.sub(x1, x0);
    let hbin = tape.sub(y1, y0);
    let slope = tape.div(hbin, wbin);
    let dd = tape.add(d0, d1);
    let s2 = tape.scale(slope, 2.0);
    let dd_m2s = tape.sub(dd, s2);
    BinLocals { x0, wbin, y0, hbin, slope, d0, d1, dd_m2s }
}

/// log of the spline derivative at parameter position `t` within a bin.
fn log_derivative_at(tape: &mut Tape, l: &BinLocals, t: Var, den: Var) -> Var {
    let omt = {
        let n = tape.neg(t);
        tape.offset(n, 1.0)
    };
    let tt = tape.mul(t, omt);
    let t2 = tape.square(t);
    let omt2 = tape.square(omt);
    let n1 = tape.mul(l.d1, t2);
    let n2 = {
        let stt = tape.mul(l.slope, tt);
        tape.scale(stt, 2.0)
    };
    let n3 = tape.mul(l.d0, omt2);
    let sum = {
        let a = tape.add(n1, n2);
        tape.add(a, n3)
    };
    let s2 = tape.square(l.slope);
    let dnum = tape.mul(s2, sum);
    let log_num = tape.log(dnum);
    let log_den = tape.log(den);
    let two_log_den = tape.scale(log_den, 2.0);
    tape.sub(log_num, two_log_den)
}

/// Forward (increasing) transform of a flat element vector `x` under per-row
/// knots. Returns the mapped values and per-element log-derivative.
pub(crate) fn forward_graph(
    tape: &mut Tape,
    x: Var,
    knots: &SplineKnots,
    tail_bound: f64,
) -> (Var, Var) {
    let (mask, inv_mask) = inside_mask(tape, x, tail_bound);
    let xc = tape.clamp(x, -tail_bound, tail_bound);
    let bins = locate_bins(tape.value(knots.x_knots), tape.value(xc));
    let l = gather_bin_locals(tape, knots, &bins);

    let t = {
        let dx = tape.sub(xc, l.x0);
        tape.div(dx, l.wbin)
    };
    let omt = {
        let n = tape.neg(t);
        tape.offset(n, 1.0)
    };
    let tt = tape.mul(t, omt);
    let den = {
        let v = tape.mul(l.dd_m2s, tt);
        tape.add(l.slope, v)
    };
    let num = {
        let t2 = tape.square(t);
        let st2 = tape.mul(l.slope, t2);
        let d0tt = tape.mul(l.d0, tt);
        let s = tape.add(st2, d0tt);
        tape.mul(l.hbin, s)
    };
    let y_in = {
        let frac = tape.div(num, den);
        tape.add(l.y0, frac)
    };
    let ld_in = log_derivative_at(tape, &l, t, den);

    let y = {
        let a = tape.mul(y_in, mask);
        let b = tape.mul(x, inv_mask);
        tape.add(a, b)
    };
    let ld = tape.mul(ld_in, mask);
    (y, ld)
}

/// Inverse transform. Returns `x` such that `forward(x) = y` and the
/// log-derivative of the inverse map (the negated forward log-derivative).
pub(crate) fn inverse_graph(
    tape: &mut Tape,
    y: Var,
    knots: &SplineKnots,
    tail_bound: f64,
) -> (Var, Var) {
    let (mask, inv_mask) = inside_mask(tape, y, tail_bound);
    let yc = tape.clamp(y, -tail_bound, tail_bound);
    let bins = locate_bins(tape.value(knots.y_knots), tape.value(yc));
    let l = gather_bin_locals(tape, knots, &bins);

    let dy = tape.sub(yc, l.y0);
    // Stable root of the bin-local quadratic in t.
    let a = {
        let sm = tape.sub(l.slope, l.d0);
        let first = tape.mul(l.hbin, sm);
        let second = tape.mul(dy, l.dd_m2s);
        tape.add(first, second)
    };
    let bq = {
        let first = tape.mul(l.hbin, l.d0);
        let second = tape.mul(dy, l.dd_m2s);
        tape.sub(first, second)
    };
    let c = {
        let sdy = tape.mul(l.slope, dy);
        tape.neg(sdy)
    };
    let disc = {
        let b2 = tape.square(bq);
        let ac = tape.mul(a, c);
        let four_ac = tape.scale(ac, 4.0);
        let d = tape.sub(b2, four_ac);
        tape.clamp(d, 0.0, f64::INFINITY)
    };
    let t = {
        let sq = tape.sqrt(disc);
        let denom = {
            let s = tape.add(bq, sq);
            tape.neg(s)
        };
        let num = tape.scale(c, 2.0);
        tape.div(num, denom)
    };
    let x_in = {
        let tw = tape.mul(t, l.wbin);
        tape.add(l.x0, tw)
    };
    let den = {
        let omt = {
            let n = tape.neg(t);
            tape.offset(n, 1.0)
        };
        let tt = tape.mul(t, omt);
        let v = tape.mul(l.dd_m2s, tt);
        tape.add(l.slope, v)
    };
    let ld_fwd = log_derivative_at(tape, &l, t, den);

    let x = {
        let a = tape.mul(x_in, mask);
        let b = tape.mul(y, inv_mask);
        tape.add(a, b)
    };
    let ld = {
        let n = tape.neg(ld_fwd);
        tape.mul(n, mask)
    };
    (x, ld)
}

/// Evaluate the forward spline on a vector of coordinates with explicit
/// per-coordinate parameters. Returns mapped values and the total
/// log-derivative over coordinates.
pub fn rq_spline_forward(
    u: &[f64],
    params: &[SplineSegmentParams],
) -> Result<(Vec<f64>, f64), FlowError> {
    eval_spline(u, params, false)
}

/// Inverse counterpart of [`rq_spline_forward`].
pub fn rq_spline_inverse(
    y: &[f64],
    params: &[SplineSegmentParams],
) -> Result<(Vec<f64>, f64), FlowError> {
    eval_spline(y, params, true)
}

fn eval_spline(
    points: &[f64],
    params: &[SplineSegmentParams],
    inverse: bool,
) -> Result<(Vec<f64>, f64), FlowError> {
    if points.len() != params.len() {
        return Err(FlowError::InvalidConfig(format!(
            "{} points but {} per-coordinate parameter sets",
            points.len(),
            params.len()
        )));
    }
    if let Some(i) = points.iter().position(|v| !v.is_finite()) {
        return Err(FlowError::NonFiniteInput { index: i });
    }
    let mut tape = Tape::new();
    let (knots, b) = knots_from_params(&mut tape, params, 1e-3)?;
    let x = tape.constant(Tensor::vector(points.to_vec()));
    let (y, ld) = if inverse {
        inverse_graph(&mut tape, x, &knots, b)
    } else {
        forward_graph(&mut tape, x, &knots, b)
    };
    let out = tape.value(y).data().to_vec();
    let logdet = tape.value(ld).data().iter().sum();
    Ok((out, logdet))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, bins: usize, b: f64) -> SplineSegmentParams {
        let raw: Vec<f64> = (0..bins).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let widths: Vec<f64> = raw.iter().map(|w| w / total * 2.0 * b).collect();
        let raw_h: Vec<f64> = (0..bins).map(|_| rng.random_range(0.1..1.0)).collect();
        let total_h: f64 = raw_h.iter().sum();
        let heights: Vec<f64> = raw_h.iter().map(|h| h / total_h * 2.0 * b).collect();
        let mut derivs: Vec<f64> = (0..=bins).map(|_| rng.random_range(0.2..2.5)).collect();
        derivs[0] = 1.0;
        derivs[bins] = 1.0;
        SplineSegmentParams {
            bin_widths: widths,
            bin_heights: heights,
            knot_derivatives: derivs,
            tail_bound: b,
        }
    }

    #[test]
    fn identity_outside_tails() {
        let p = vec![random_params(&mut ChaCha8Rng::seed_from_u64(1), 4, 5.0)];
        for u in [-8.0, 6.0, 5.5, -1000.0] {
            let (y, ld) = rq_spline_forward(&[u], &p).unwrap();
            assert_eq!(y[0], u);
            assert_eq!(ld, 0.0);
        }
    }

    #[test]
    fn uniform_bins_unit_derivatives_is_identity() {
        let p = vec![SplineSegmentParams::identity(4, 5.0)];
        for i in 0..41 {
            let u = -5.0 + 0.25 * i as f64;
            let (y, ld) = rq_spline_forward(&[u], &p).unwrap();
            assert!((y[0] - u).abs() < 1e-12, "u={u} y={}", y[0]);
            assert!(ld.abs() < 1e-12);
        }
    }

    #[test]
    fn log_det_matches_central_difference_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = vec![random_params(&mut rng, 5, 5.0)];
        let h = 1e-6;
        for i in 0..101 {
            let u = -5.0 + 10.0 * i as f64 / 100.0;
            // Stay away from the exact boundary where the tail kicks in.
            if u.abs() > 4.999 {
                continue;
            }
            let (_, ld) = rq_spline_forward(&[u], &p).unwrap();
            let (yp, _) = rq_spline_forward(&[u + h], &p).unwrap();
            let (ym, _) = rq_spline_forward(&[u - h], &p).unwrap();
            let slope = (yp[0] - ym[0]) / (2.0 * h);
            assert!(
                (ld - slope.ln()).abs() < 1e-4,
                "u={u}: logdet {ld} vs ln slope {}",
                slope.ln()
            );
        }
    }

    #[test]
    fn round_trip_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = vec![random_params(&mut rng, 4, 5.0)];
        let mut max_err: f64 = 0.0;
        let mut max_ld: f64 = 0.0;
        for _ in 0..1000 {
            let u = rng.random_range(-5.0..5.0);
            let (y, ld_f) = rq_spline_forward(&[u], &p).unwrap();
            let (u2, ld_i) = rq_spline_inverse(&y, &p).unwrap();
            max_err = max_err.max((u2[0] - u).abs());
            max_ld = max_ld.max((ld_f + ld_i).abs());
        }
        assert!(max_err < 1e-8, "round trip error {max_err}");
        assert!(max_ld < 1e-8, "logdet asymmetry {max_ld}");
    }

    #[test]
    fn identity_spline_inverse_is_identity() {
        let p = vec![SplineSegmentParams::identity(4, 5.0)];
        let (u, ld) = rq_spline_inverse(&[1.25], &p).unwrap();
        assert!((u[0] - 1.25).abs() < 1e-12);
        assert!(ld.abs() < 1e-12);
    }

    #[test]
    fn forward_is_strictly_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let p = vec![random_params(&mut rng, 4, 5.0)];
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=1000 {
                let u = -5.0 + 10.0 * i as f64 / 1000.0;
                let (y, _) = rq_spline_forward(&[u], &p).unwrap();
                assert!(y[0] > prev, "trial {trial}: not increasing at u={u}");
                prev = y[0];
            }
        }
    }

    #[test]
    fn degenerate_bins_are_clamped_not_raised() {
        let p = vec![SplineSegmentParams {
            bin_widths: vec![1e-9, 5.0, 4.99, 1e-12],
            bin_heights: vec![2.5, 2.5, 2.5, 2.5],
            knot_derivatives: vec![1.0, 0.5, 2.0, 0.5, 1.0],
            tail_bound: 5.0,
        }];
        let (y, ld) = rq_spline_forward(&[0.3], &p).unwrap();
        assert!(y[0].is_finite());
        assert!(ld.is_finite());
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let p = vec![SplineSegmentParams::identity(4, 5.0)];
        assert!(rq_spline_forward(&[f64::NAN], &p).is_err());
    }
}
