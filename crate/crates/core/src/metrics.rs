//! Shape similarity and complexity measures, and the method comparison report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::forward::{PillarLibrary, PillarSequence};
use crate::scalar::{lit, Scalar};
use crate::shape::FlowShape;

/// Pixel match rate: one minus the fraction of mismatched pixels.
pub fn pmr<T: Scalar>(p: &FlowShape, p_hat: &FlowShape) -> Result<T> {
    p.check_dims(p_hat)?;
    let mismatched = p.pixels().iter().zip(p_hat.pixels()).filter(|(a, b)| a != b).count();
    let total = p.pixels().len();
    Ok(T::one() - T::from_usize(mismatched).unwrap() / T::from_usize(total).unwrap())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams<T> {
    pub k1: T,
    pub k2: T,
    /// Dynamic range of the pixel values.
    pub dynamic_range: T,
    pub window: usize,
    pub stride: usize,
}

impl<T: Scalar> Default for SsimParams<T> {
    fn default() -> Self {
        Self {
            k1: lit(0.01),
            k2: lit(0.03),
            dynamic_range: T::one(),
            window: 8,
            stride: 1,
        }
    }
}

impl<T: Scalar> SsimParams<T> {
    pub fn c1(&self) -> T {
        let v = self.k1 * self.dynamic_range;
        v * v
    }

    pub fn c2(&self) -> T {
        let v = self.k2 * self.dynamic_range;
        v * v
    }
}

/// Mean structural similarity over all `window x window` patches at the given
/// stride, with uniform weights and population (co)variances.
pub fn ssim<T: Scalar>(x: &FlowShape, y: &FlowShape, params: &SsimParams<T>) -> Result<T> {
    x.check_dims(y)?;
    let (h, w) = x.dims();
    let win = params.window;
    if win == 0 || win > h || win > w {
        return Err(Error::InvalidParameter(format!(
            "SSIM window {win} does not fit a {h}x{w} image"
        )));
    }
    if params.stride == 0 {
        return Err(Error::InvalidParameter("SSIM stride must be at least 1".into()));
    }
    if params.dynamic_range.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidParameter("SSIM dynamic range must be positive".into()));
    }
    let (c1, c2) = (params.c1(), params.c2());
    let two = lit::<T>(2.0);
    let n = T::from_usize(win * win).unwrap();
    let xv: Vec<T> = x.pixels().iter().map(|&p| T::from_u8(p).unwrap()).collect();
    let yv: Vec<T> = y.pixels().iter().map(|&p| T::from_u8(p).unwrap()).collect();

    let mut total = T::zero();
    let mut windows = 0usize;
    for r0 in (0..=h - win).step_by(params.stride) {
        for c0 in (0..=w - win).step_by(params.stride) {
            let (mut sx, mut sy) = (T::zero(), T::zero());
            for r in r0..r0 + win {
                for c in c0..c0 + win {
                    sx += xv[r * w + c];
                    sy += yv[r * w + c];
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let (mut vx, mut vy, mut cxy) = (T::zero(), T::zero(), T::zero());
            for r in r0..r0 + win {
                for c in c0..c0 + win {
                    let dx = xv[r * w + c] - mx;
                    let dy = yv[r * w + c] - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
            }
            let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
            let num = (two * mx * my + c1) * (two * cxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            windows += 1;
        }
    }
    Ok(total / T::from_usize(windows).unwrap())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityReport<T> {
    /// Exposed 4-connected pixel edges.
    pub perimeter: usize,
    pub area: usize,
    /// `P^2 / (4 pi A)`.
    pub complexity: T,
}

/// Complexity threshold above which a target counts as a test shape.
pub const TEST_COMPLEXITY_GATE: f64 = 3.5;

impl<T: Scalar> ComplexityReport<T> {
    pub fn passes_test_gate(&self) -> bool {
        self.complexity > lit(TEST_COMPLEXITY_GATE)
    }
}

pub fn perimetric_complexity<T: Scalar>(s: &FlowShape) -> Result<ComplexityReport<T>> {
    let (h, w) = s.dims();
    let area = s.fluid_count();
    if area == 0 {
        return Err(Error::Empty("shape (no fluid pixels)"));
    }
    let mut perimeter = 0usize;
    for r in 0..h {
        for c in 0..w {
            if !s.get(r, c) {
                continue;
            }
            perimeter += (r == 0 || !s.get(r - 1, c)) as usize;
            perimeter += (r + 1 == h || !s.get(r + 1, c)) as usize;
            perimeter += (c == 0 || !s.get(r, c - 1)) as usize;
            perimeter += (c + 1 == w || !s.get(r, c + 1)) as usize;
        }
    }
    let p = T::from_usize(perimeter).unwrap();
    let a = T::from_usize(area).unwrap();
    Ok(ComplexityReport {
        perimeter,
        area,
        complexity: p * p / (lit::<T>(4.0) * T::PI() * a),
    })
}

/// Median of a non-empty slice (mean of the two middle values when even).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

pub type Predict<'a> = Box<dyn Fn(&FlowShape) -> Result<PillarSequence> + 'a>;

/// A named method that proposes a pillar sequence for a target shape.
pub struct Method<'a> {
    pub name: String,
    pub predict: Predict<'a>,
}

impl<'a> Method<'a> {
    pub fn new(name: impl Into<String>, predict: impl Fn(&FlowShape) -> Result<PillarSequence> + 'a) -> Self {
        Self {
            name: name.into(),
            predict: Box::new(predict),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub target_id: String,
    pub method: String,
    pub sequence: Option<PillarSequence>,
    pub pmr: f64,
    pub ssim: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodAverage {
    pub method: String,
    pub pmr: f64,
    pub ssim: f64,
    /// Rows that produced a sequence.
    pub succeeded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub averages: Vec<MethodAverage>,
}

/// Regenerates every method's sequence for every target and scores it.
/// A failing predictor yields a NaN row carrying the error message.
pub fn eval_report(targets: &[(String, FlowShape)], methods: &[Method<'_>], library: &PillarLibrary) -> Result<EvalReport> {
    if targets.is_empty() {
        return Err(Error::Empty("target list"));
    }
    if methods.is_empty() {
        return Err(Error::Empty("method list"));
    }
    let params = SsimParams::<f64>::default();
    let mut rows = Vec::with_capacity(targets.len() * methods.len());
    for (id, target) in targets {
        for m in methods {
            let outcome = (m.predict)(target).and_then(|seq| {
                let shape = library.render(&seq)?;
                let p = pmr::<f64>(target, &shape)?;
                let s = ssim(target, &shape, &params)?;
                Ok((seq, p, s))
            });
            rows.push(match outcome {
                Ok((seq, p, s)) => EvalRow {
                    target_id: id.clone(),
                    method: m.name.clone(),
                    sequence: Some(seq),
                    pmr: p,
                    ssim: s,
                    error: None,
                },
                Err(e) => EvalRow {
                    target_id: id.clone(),
                    method: m.name.clone(),
                    sequence: None,
                    pmr: f64::NAN,
                    ssim: f64::NAN,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    let averages = methods
        .iter()
        .map(|m| {
            let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.method == m.name && r.error.is_none()).collect();
            let pmrs: Vec<f64> = ok.iter().map(|r| r.pmr).collect();
            let ssims: Vec<f64> = ok.iter().map(|r| r.ssim).collect();
            MethodAverage {
                method: m.name.clone(),
                pmr: mean(&pmrs).unwrap_or(f64::NAN),
                ssim: mean(&ssims).unwrap_or(f64::NAN),
                succeeded: ok.len(),
            }
        })
        .collect();
    Ok(EvalReport { rows, averages })
}

impl EvalReport {
    pub fn average(&self, method: &str) -> Option<&MethodAverage> {
        self.averages.iter().find(|a| a.method == method)
    }

    /// `target_id,method,pmr,ssim` rows followed by one `average,<method>,..`
    /// row per method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target_id,method,pmr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", r.target_id, r.method, r.pmr, r.ssim);
        }
        for a in &self.averages {
            let _ = writeln!(out, "average,{},{:.6},{:.6}", a.method, a.pmr, a.ssim);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{ChannelSpec, MapGenParams};
    use proptest::prelude::*;

    fn shape_strategy() -> impl Strategy<Value = FlowShape> {
        proptest::collection::vec(0u8..=1, 1200).prop_map(|px| FlowShape::from_pixels(12, 100, px).unwrap())
    }

    #[test]
    fn pmr_examples() {
        let a = FlowShape::from_fn(12, 100, |r, c| (r * 7 + c) % 3 == 0);
        assert_eq!(pmr::<f64>(&a, &a).unwrap(), 1.0);
        assert_eq!(pmr::<f64>(&a, &a.complement()).unwrap(), 0.0);
        let mut b = a.clone();
        for i in 0..60 {
            let (r, c) = (i % 12, (i * 13) % 100);
            b.set(r, c, !a.get(r, c));
        }
        assert_eq!(pmr::<f64>(&a, &b).unwrap(), 0.95);
        assert!((pmr::<f32>(&a, &b).unwrap() - 0.95).abs() < 1e-6);
        assert!(pmr::<f64>(&a, &FlowShape::empty(12, 99)).is_err());
    }

    #[test]
    fn ssim_constant_images() {
        let zero = FlowShape::empty(12, 100);
        let one = FlowShape::full(12, 100);
        let params = SsimParams::<f64>::default();
        let c1 = 1e-4;
        assert!((ssim(&zero, &one, &params).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
        assert_eq!(ssim(&zero, &zero, &params).unwrap(), 1.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let s = FlowShape::empty(7, 100);
        assert!(ssim(&s, &s, &SsimParams::<f64>::default()).is_err());
        let bad = SsimParams::<f64> {
            stride: 0,
            ..Default::default()
        };
        let s = FlowShape::empty(12, 100);
        assert!(ssim(&s, &s, &bad).is_err());
    }

    #[test]
    fn ssim_stride_reduces_window_count_but_not_identity() {
        let a = FlowShape::from_fn(12, 100, |r, c| (r + c) % 5 < 2);
        let p = SsimParams::<f64> {
            stride: 3,
            ..Default::default()
        };
        assert_eq!(ssim(&a, &a, &p).unwrap(), 1.0);
    }

    #[test]
    fn complexity_examples() {
        let full = perimetric_complexity::<f64>(&FlowShape::full(12, 100)).unwrap();
        assert_eq!((full.perimeter, full.area), (224, 1200));
        assert!((full.complexity - 224.0 * 224.0 / (4.0 * std::f64::consts::PI * 1200.0)).abs() < 1e-12);
        assert!((full.complexity - 3.327).abs() < 1e-3);
        assert!(!full.passes_test_gate());
        let mut one = FlowShape::empty(12, 100);
        one.set(5, 50, true);
        let single = perimetric_complexity::<f64>(&one).unwrap();
        assert_eq!((single.perimeter, single.area), (4, 1));
        assert!((single.complexity - 4.0 / std::f64::consts::PI).abs() < 1e-12);
        assert!(perimetric_complexity::<f64>(&FlowShape::empty(12, 100)).is_err());
        let comb = FlowShape::from_fn(12, 100, |r, c| r % 2 == 0 && c % 2 == 0);
        assert!(perimetric_complexity::<f64>(&comb).unwrap().passes_test_gate());
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(mean(&[1.0, 2.0]), Some(1.5));
    }

    #[test]
    fn eval_report_rows_and_averages() {
        let lib = PillarLibrary::build(ChannelSpec::default(), &MapGenParams::default()).unwrap();
        let seqs: Vec<PillarSequence> = vec![vec![3, 9].into(), vec![14].into(), vec![28, 1, 5].into()];
        let targets: Vec<(String, FlowShape)> = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("t{i}"), lib.render(s).unwrap()))
            .collect();
        let truth = |t: &FlowShape| {
            let i = targets.iter().position(|(_, s)| s == t).unwrap();
            Ok(seqs[i].clone())
        };
        let methods = vec![
            Method::new("truth", truth),
            Method::new("empty", |_: &FlowShape| Ok(PillarSequence::new())),
            Method::new("broken", |_: &FlowShape| Err(Error::MissingModel("nothing"))),
        ];
        let report = eval_report(&targets, &methods, &lib).unwrap();
        assert_eq!(report.rows.len(), 9);
        let truth_avg = report.average("truth").unwrap();
        assert_eq!((truth_avg.pmr, truth_avg.ssim), (1.0, 1.0));
        let empty_rows: Vec<f64> = report.rows.iter().filter(|r| r.method == "empty").map(|r| r.pmr).collect();
        assert!((report.average("empty").unwrap().pmr - mean(&empty_rows).unwrap()).abs() < 1e-15);
        assert_eq!(report.average("broken").unwrap().succeeded, 0);
        assert!(report.rows.iter().any(|r| r.error.is_some()));
        let csv = report.to_csv();
        assert!(csv.starts_with("target_id,method,pmr,ssim\n"));
        assert_eq!(csv.lines().count(), 1 + 9 + 3);
        assert!(csv.contains("average,truth,1.000000,1.000000"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pmr_is_symmetric_and_bounded(a in shape_strategy(), b in shape_strategy()) {
            let ab = pmr::<f64>(&a, &b).unwrap();
            prop_assert_eq!(ab, pmr::<f64>(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(pmr::<f64>(&a, &a.complement()).unwrap(), 0.0);
        }

        #[test]
        fn ssim_symmetric_and_self_one(a in shape_strategy(), b in shape_strategy()) {
            let p = SsimParams::<f64>::default();
            prop_assert!((ssim(&a, &b, &p).unwrap() - ssim(&b, &a, &p).unwrap()).abs() < 1e-12);
            prop_assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn complexity_mirror_invariant(a in shape_strategy()) {
            prop_assume!(a.fluid_count() > 0);
            let x = perimetric_complexity::<f64>(&a).unwrap();
            let y = perimetric_complexity::<f64>(&a.mirror_columns()).unwrap();
            prop_assert_eq!(x, y);
        }

        #[test]
        fn complexity_translation_invariant(r0 in 1usize..5, c0 in 1usize..60, dr in 0usize..3, dc in 0usize..30,
                                            px in proptest::collection::vec(0u8..=1, 30)) {
            // 5x6 blob placed away from the border at two offsets
            let place = |ro: usize, co: usize| FlowShape::from_fn(12, 100, |r, c| {
                r >= ro && r < ro + 5 && c >= co && c < co + 6 && px[(r - ro) * 6 + (c - co)] == 1
            });
            let a = place(r0, c0);
            prop_assume!(a.fluid_count() > 0);
            let b = place(r0 + dr.min(10 - r0 - 4), c0 + dc);
            prop_assert_eq!(perimetric_complexity::<f64>(&a).unwrap(), perimetric_complexity::<f64>(&b).unwrap());
        }
    }
}
