use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ops;
use super::Image;
use crate::error::{Error, Result};

/// Every operator the catalog can draw on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    GaussianBlur,
    MotionBlur,
    GaussianNoise,
    PoissonNoise,
    Pixelate,
    QuantizeHist,
    QuantizeMedian,
    QuantizeOtsu,
    Ringing,
    CompressDct,
    BrightenGamma,
    DarkenGamma,
    BrightenShift,
    DarkenShift,
    ContrastScale,
    SaturationScale,
    Oversharpen,
    Mosaic,
    MaskInpaint,
    Grayscale,
    Canny,
    Identity,
    Invert,
}

/// `(field, min, max, integral)`.
type Range = (&'static str, f64, f64, bool);

impl DegradationKind {
    pub fn name(self) -> &'static str {
        use DegradationKind::*;
        match self {
            GaussianBlur => "gaussian_blur",
            MotionBlur => "motion_blur",
            GaussianNoise => "gaussian_noise",
            PoissonNoise => "poisson_noise",
            Pixelate => "pixelate",
            QuantizeHist => "quantize_hist",
            QuantizeMedian => "quantize_median",
            QuantizeOtsu => "quantize_otsu",
            Ringing => "ringing",
            CompressDct => "compress_dct",
            BrightenGamma => "brighten_gamma",
            DarkenGamma => "darken_gamma",
            BrightenShift => "brighten_shift",
            DarkenShift => "darken_shift",
            ContrastScale => "contrast_scale",
            SaturationScale => "saturation_scale",
            Oversharpen => "oversharpen",
            Mosaic => "mosaic",
            MaskInpaint => "mask_inpaint",
            Grayscale => "grayscale",
            Canny => "canny",
            Identity => "identity",
            Invert => "invert",
        }
    }

    /// Accepted parameter ranges, inclusive.
    pub fn ranges(self) -> &'static [Range] {
        use DegradationKind::*;
        match self {
            GaussianBlur => &[("sigma", 0.0, 5.0, false)],
            MotionBlur => &[("len", 1.0, 15.0, false), ("angle", 0.0, 180.0, false)],
            GaussianNoise => &[("sigma", 0.0, 0.5, false)],
            PoissonNoise => &[("peak", 1.0, 1000.0, false)],
            Pixelate | Mosaic => &[("block", 1.0, 16.0, true)],
            QuantizeHist | QuantizeMedian => &[("levels", 2.0, 64.0, true)],
            Ringing => &[("cutoff", 0.05, 1.0, false)],
            CompressDct => &[("quality", 1.0, 100.0, true)],
            BrightenGamma => &[("gamma", 0.1, 1.0, false)],
            DarkenGamma => &[("gamma", 1.0, 10.0, false)],
            BrightenShift | DarkenShift => &[("shift", 0.0, 0.5, false)],
            ContrastScale => &[("c", 0.0, 3.0, false)],
            SaturationScale => &[("s", 0.0, 3.0, false)],
            Oversharpen => &[("amount", 0.0, 5.0, false), ("sigma", 0.3, 3.0, false)],
            MaskInpaint => &[("n_rects", 0.0, 8.0, true)],
            Canny => &[("lo", 0.0, 4.0, false), ("hi", 0.0, 4.0, false)],
            QuantizeOtsu | Grayscale | Identity | Invert => &[],
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A fully specified, seeded operator application.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, params: &[(&str, f64)], seed: u64) -> Self {
        Self {
            kind,
            params: params.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            seed,
        }
    }

    fn out_of_range(&self, field: &str, value: f64, range: String) -> Error {
        Error::Parameter {
            kind: self.kind.name().into(),
            field: field.into(),
            value,
            range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = self.kind.ranges();
        for key in self.params.keys() {
            if !ranges.iter().any(|r| r.0 == key) {
                return Err(self.out_of_range(key, f64::NAN, "no such parameter".into()));
            }
        }
        for &(field, lo, hi, integral) in ranges {
            let value = self.params.get(field).copied().unwrap_or(f64::NAN);
            let ok = value >= lo && value <= hi && (!integral || value.fract() == 0.0);
            if !ok {
                let kind = if integral { "integer in " } else { "" };
                return Err(self.out_of_range(field, value, format!("{kind}[{lo}, {hi}]")));
            }
        }
        if self.kind == DegradationKind::Canny && self.get("lo") > self.get("hi") {
            return Err(self.out_of_range("lo", self.get("lo"), format!("[0, hi={}]", self.get("hi"))));
        }
        Ok(())
    }

    /// Parameter value; only call after [`validate`](Self::validate).
    pub fn get(&self, field: &str) -> f64 {
        self.params.get(field).copied().unwrap_or(f64::NAN)
    }

    /// Apply the operator. Output is clamped to `[0, 1]`.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        self.validate()?;
        ops::check_image(img)?;
        use DegradationKind::*;
        let p = |f: &str| self.get(f);
        let out = match self.kind {
            GaussianBlur => ops::gaussian_blur(img, p("sigma")),
            MotionBlur => ops::motion_blur(img, p("len"), p("angle")),
            GaussianNoise => ops::gaussian_noise(img, p("sigma"), self.seed),
            PoissonNoise => ops::poisson_noise(img, p("peak"), self.seed)?,
            Pixelate | Mosaic => ops::pixelate(img, p("block") as usize),
            QuantizeHist => ops::quantize_hist(img, p("levels") as usize),
            QuantizeMedian => ops::quantize_median(img, p("levels") as usize),
            QuantizeOtsu => ops::quantize_otsu(img),
            Ringing => ops::ringing(img, p("cutoff")),
            CompressDct => ops::compress_dct(img, p("quality")),
            BrightenGamma | DarkenGamma => ops::gamma(img, p("gamma")),
            BrightenShift => ops::shift(img, p("shift")),
            DarkenShift => ops::shift(img, -p("shift")),
            ContrastScale => ops::contrast(img, p("c")),
            SaturationScale => ops::saturation(img, p("s")),
            Oversharpen => ops::oversharpen(img, p("amount"), p("sigma")),
            MaskInpaint => ops::mask_inpaint(img, p("n_rects") as usize, self.seed),
            Grayscale => ops::grayscale(img),
            Canny => ops::canny(img, p("lo"), p("hi")),
            Identity => img.clone(),
            Invert => img.map(|x| 1.0 - x),
        };
        Ok(ops::clamp01(out))
    }
}

/// Convenience wrapper for [`DegradationSpec::apply`].
pub fn apply(spec: &DegradationSpec, img: &Image) -> Result<Image> {
    spec.apply(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_errors_name_the_field() {
        let spec = DegradationSpec::new(DegradationKind::GaussianNoise, &[("sigma", 0.9)], 0);
        match spec.validate() {
            Err(Error::Parameter { field, .. }) => assert_eq!(field, "sigma"),
            other => panic!("{other:?}"),
        }
        let spec = DegradationSpec::new(DegradationKind::Pixelate, &[("block", 2.5)], 0);
        assert!(spec.validate().is_err());
        let spec = DegradationSpec::new(DegradationKind::MotionBlur, &[("len", 3.0)], 0);
        assert!(spec.validate().is_err());
        let spec = DegradationSpec::new(DegradationKind::Grayscale, &[("sigma", 1.0)], 0);
        assert!(spec.validate().is_err());
        let spec = DegradationSpec::new(DegradationKind::Canny, &[("lo", 0.5), ("hi", 0.2)], 0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn names_match_serde() {
        for kind in [DegradationKind::QuantizeOtsu, DegradationKind::CompressDct, DegradationKind::Canny] {
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.name()));
        }
    }
}
