use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clean::gen_clean;
use super::spec::{DegradationKind, DegradationSpec};
use super::Image;
use crate::error::{Error, Result};

pub const SEVERITY_WORDS: [&str; 3] = ["slight", "moderate", "strong"];

/// How the operator relates the clean image to the model input and target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Input is the degraded image, target the clean one.
    Restore,
    /// Input is the clean image, target the operator output.
    Enhance,
    /// Input is the clean image, target a dense annotation of it.
    Annotate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamRange {
    pub field: &'static str,
    pub lo: f64,
    pub hi: f64,
    pub integral: bool,
}

const fn real(field: &'static str, lo: f64, hi: f64) -> ParamRange {
    ParamRange { field, lo, hi, integral: false }
}

const fn int(field: &'static str, lo: f64, hi: f64) -> ParamRange {
    ParamRange { field, lo, hi, integral: true }
}

#[derive(Clone, Debug)]
pub struct TaskDef {
    pub id: &'static str,
    pub kind: DegradationKind,
    pub direction: Direction,
    /// Instruction text; `{level}` is replaced by a severity word.
    pub template: &'static str,
    pub ranges: Vec<ParamRange>,
    /// Field whose position in its range sets the severity word, and whether
    /// larger values are more severe.
    pub severity: Option<(&'static str, bool)>,
    /// Defined by exemplar pairs rather than by a fixed operator intent.
    pub in_context: bool,
}

impl TaskDef {
    fn new(id: &'static str, kind: DegradationKind, direction: Direction, template: &'static str) -> Self {
        Self {
            id,
            kind,
            direction,
            template,
            ranges: Vec::new(),
            severity: None,
            in_context: false,
        }
    }

    fn range(mut self, r: ParamRange) -> Self {
        self.ranges.push(r);
        self
    }

    fn severity(mut self, field: &'static str, increasing: bool) -> Self {
        self.severity = Some((field, increasing));
        self
    }

    fn in_context(mut self) -> Self {
        self.in_context = true;
        self
    }

    pub fn instruction(&self, level: &str) -> String {
        self.template.replace("{level}", level)
    }

    /// Severity word for a drawn spec.
    pub fn level(&self, spec: &DegradationSpec) -> &'static str {
        let Some((field, increasing)) = self.severity else {
            return SEVERITY_WORDS[1];
        };
        let r = self.ranges.iter().find(|r| r.field == field).expect("severity field has a range");
        let mut u = if r.hi > r.lo { (spec.get(field) - r.lo) / (r.hi - r.lo) } else { 0.5 };
        if !increasing {
            u = 1.0 - u;
        }
        SEVERITY_WORDS[((u * 3.0) as usize).min(2)]
    }

    pub fn sample_spec<R: Rng + ?Sized>(&self, rng: &mut R) -> DegradationSpec {
        let params: Vec<(&str, f64)> = self
            .ranges
            .iter()
            .map(|r| {
                let v = if r.hi <= r.lo {
                    r.lo
                } else if r.integral {
                    rng.gen_range(r.lo as i64..=r.hi as i64) as f64
                } else {
                    rng.gen_range(r.lo..=r.hi)
                };
                (r.field, v)
            })
            .collect();
        DegradationSpec::new(self.kind, &params, rng.gen())
    }

    /// `(lq, hq)` for a clean image under this task's orientation.
    pub fn orient(&self, spec: &DegradationSpec, clean: &Image) -> Result<(Image, Image)> {
        let out = spec.apply(clean)?;
        Ok(match self.direction {
            Direction::Restore => (out, clean.clone()),
            Direction::Enhance | Direction::Annotate => (clean.clone(), out),
        })
    }
}

/// Registry of task ids.
#[derive(Clone, Debug)]
pub struct TaskCatalog {
    tasks: Vec<TaskDef>,
}

#[derive(Clone, Debug)]
pub struct Pair {
    pub task: String,
    pub lq: Image,
    pub hq: Image,
    pub instruction: String,
    pub spec: DegradationSpec,
    pub clean_seed: u64,
}

/// A query pair plus exemplar pairs produced by the same operator settings.
#[derive(Clone, Debug)]
pub struct IclSample {
    pub query: Pair,
    pub exemplars: Vec<(Image, Image)>,
}

impl TaskCatalog {
    pub fn standard() -> Self {
        use DegradationKind as K;
        use Direction::*;
        let tasks = vec![
            TaskDef::new("deblur_gaussian", K::GaussianBlur, Restore, "remove {level} gaussian blur")
                .range(real("sigma", 0.5, 2.0))
                .severity("sigma", true),
            TaskDef::new("deblur_motion", K::MotionBlur, Restore, "remove {level} motion blur")
                .range(real("len", 3.0, 9.0))
                .range(real("angle", 0.0, 180.0))
                .severity("len", true),
            TaskDef::new("denoise_gaussian", K::GaussianNoise, Restore, "remove {level} gaussian noise")
                .range(real("sigma", 0.02, 0.2))
                .severity("sigma", true),
            TaskDef::new("denoise_poisson", K::PoissonNoise, Restore, "remove {level} poisson noise")
                .range(real("peak", 10.0, 200.0))
                .severity("peak", false),
            TaskDef::new("depixelate", K::Pixelate, Restore, "remove {level} pixelation")
                .range(int("block", 2.0, 4.0))
                .severity("block", true),
            TaskDef::new("dequantize_hist", K::QuantizeHist, Restore, "remove {level} histogram quantization")
                .range(int("levels", 4.0, 16.0))
                .severity("levels", false),
            TaskDef::new("dequantize_median", K::QuantizeMedian, Restore, "remove {level} median quantization")
                .range(int("levels", 4.0, 16.0))
                .severity("levels", false),
            TaskDef::new("dequantize_otsu", K::QuantizeOtsu, Restore, "remove otsu quantization"),
            TaskDef::new("dering", K::Ringing, Restore, "remove {level} ringing artifacts")
                .range(real("cutoff", 0.3, 0.7))
                .severity("cutoff", false),
            TaskDef::new("decompress", K::CompressDct, Restore, "remove {level} compression artifacts")
                .range(int("quality", 10.0, 60.0))
                .severity("quality", false),
            TaskDef::new("desharpen", K::Oversharpen, Restore, "remove {level} oversharpening")
                .range(real("amount", 0.5, 2.0))
                .range(real("sigma", 0.8, 1.5))
                .severity("amount", true),
            TaskDef::new("inpaint", K::MaskInpaint, Restore, "fill in the missing regions").range(int("n_rects", 1.0, 3.0)),
            TaskDef::new("colorize", K::Grayscale, Restore, "colorize the image"),
            TaskDef::new("brighten_gamma", K::BrightenGamma, Enhance, "brighten the image").range(real("gamma", 0.4, 0.7)),
            TaskDef::new("darken_gamma", K::DarkenGamma, Enhance, "darken the image").range(real("gamma", 1.5, 2.5)),
            TaskDef::new("brighten_shift", K::BrightenShift, Enhance, "lift the brightness").range(real("shift", 0.1, 0.3)),
            TaskDef::new("darken_shift", K::DarkenShift, Enhance, "lower the brightness").range(real("shift", 0.1, 0.3)),
            TaskDef::new("contrast", K::ContrastScale, Enhance, "increase the contrast").range(real("c", 1.3, 2.0)),
            TaskDef::new("saturate", K::SaturationScale, Enhance, "increase the saturation").range(real("s", 1.3, 2.0)),
            TaskDef::new("mosaic", K::Mosaic, Enhance, "apply {level} mosaic")
                .range(int("block", 2.0, 4.0))
                .severity("block", true),
            TaskDef::new("canny", K::Canny, Annotate, "detect canny edges")
                .range(real("lo", 0.05, 0.1))
                .range(real("hi", 0.2, 0.3)),
            TaskDef::new("icl_identity", K::Identity, Enhance, "follow the example").in_context(),
            TaskDef::new("icl_invert", K::Invert, Enhance, "follow the example").in_context(),
        ];
        Self { tasks }
    }

    pub fn tasks(&self) -> &[TaskDef] {
        &self.tasks
    }

    pub fn ids(&self) -> Vec<&'static str> {
        self.tasks.iter().map(|t| t.id).collect()
    }

    pub fn get(&self, id: &str) -> Result<&TaskDef> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    /// Pin `field` of task `id` to a single value.
    pub fn fix_param(&mut self, id: &str, field: &str, value: f64) -> Result<()> {
        let task = self
            .tasks
            .iter_mut()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))?;
        let r = task.ranges.iter_mut().find(|r| r.field == field).ok_or_else(|| Error::Parameter {
            kind: task.kind.name().into(),
            field: field.into(),
            value,
            range: "no such parameter".into(),
        })?;
        let (_, lo, hi, integral) = *task
            .kind
            .ranges()
            .iter()
            .find(|k| k.0 == field)
            .expect("catalog ranges mirror operator ranges");
        if !(value >= lo && value <= hi) || (integral && value.fract() != 0.0) {
            return Err(Error::Parameter {
                kind: task.kind.name().into(),
                field: field.into(),
                value,
                range: format!("[{lo}, {hi}]"),
            });
        }
        r.lo = value;
        r.hi = value;
        Ok(())
    }
}

fn draw(task: &TaskDef, seed: u64) -> (DegradationSpec, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean_seed = rng.gen();
    (task.sample_spec(&mut rng), clean_seed)
}

/// Seeded `(lq, hq, instruction)` triplet for `task_id`.
pub fn make_pair(task_id: &str, catalog: &TaskCatalog, seed: u64, size: usize) -> Result<Pair> {
    let task = catalog.get(task_id)?;
    let (spec, clean_seed) = draw(task, seed);
    let clean = gen_clean(clean_seed, size);
    let (lq, hq) = task.orient(&spec, &clean)?;
    Ok(Pair {
        task: task.id.to_string(),
        lq,
        hq,
        instruction: task.instruction(task.level(&spec)),
        spec,
        clean_seed,
    })
}

/// Query plus `pairs` exemplars drawn from other clean images with the same
/// operator parameters.
pub fn make_icl_sample(task_id: &str, catalog: &TaskCatalog, seed: u64, size: usize, pairs: usize) -> Result<IclSample> {
    let task = catalog.get(task_id)?;
    let query = make_pair(task_id, catalog, seed, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(query.clean_seed ^ 0x1c1_e8e4);
    let exemplars = (0..pairs)
        .map(|_| {
            let clean = gen_clean(rng.gen(), size);
            let spec = DegradationSpec {
                seed: rng.gen(),
                ..query.spec.clone()
            };
            task.orient(&spec, &clean)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IclSample { query, exemplars })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_specs_validate() {
        let cat = TaskCatalog::standard();
        assert!(cat.tasks().len() >= 18);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in cat.tasks() {
            for _ in 0..5 {
                t.sample_spec(&mut rng).validate().unwrap();
            }
        }
    }

    #[test]
    fn denoise_instruction_mentions_noise() {
        let p = make_pair("denoise_gaussian", &TaskCatalog::standard(), 3, 16).unwrap();
        assert!(p.instruction.contains("noise"));
    }

    #[test]
    fn restore_targets_are_clean() {
        let cat = TaskCatalog::standard();
        for t in cat.tasks().iter().filter(|t| t.direction == Direction::Restore) {
            let p = make_pair(t.id, &cat, 11, 16).unwrap();
            assert!(p.hq.bit_eq(&gen_clean(p.clean_seed, 16)), "{}", t.id);
        }
    }

    #[test]
    fn canny_target_is_binary() {
        let p = make_pair("canny", &TaskCatalog::standard(), 5, 32).unwrap();
        assert!(p.hq.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(p.hq.data().contains(&1.0));
    }

    #[test]
    fn unknown_task() {
        assert!(matches!(
            make_pair("sharpen_everything", &TaskCatalog::standard(), 0, 8),
            Err(Error::UnknownTask(_))
        ));
    }

    #[test]
    fn fixed_parameters() {
        let mut cat = TaskCatalog::standard();
        cat.fix_param("denoise_gaussian", "sigma", 0.1).unwrap();
        for s in 0..4 {
            assert_eq!(make_pair("denoise_gaussian", &cat, s, 8).unwrap().spec.get("sigma"), 0.1);
        }
        assert!(cat.fix_param("denoise_gaussian", "gamma", 1.0).is_err());
    }

    #[test]
    fn exemplars_share_the_operator() {
        let cat = TaskCatalog::standard();
        let s = make_icl_sample("icl_invert", &cat, 9, 16, 2).unwrap();
        assert_eq!(s.exemplars.len(), 2);
        for (lq, hq) in &s.exemplars {
            assert!(lq.zip_map(hq, |a, b| a + b).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
            assert!(!lq.bit_eq(&s.query.lq));
        }
    }
}
