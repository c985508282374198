//! The four evaluation protocols: pointing game, restricted pointing
//! game, class-sensitivity, and the cascading parameter-randomization
//! sanity check. Protocols are generic over a map source so that stub
//! methods can exercise the harness itself.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{argmax_location, hog, spearman, HogParams};
use crate::model::{argmax_index, argmin_index, forward, randomize_cascading, ForwardTrace, Model};
use crate::parallel::map_indexed;
use crate::saliency::{compute_map, MethodOptions, MethodSpec, SaliencyMap};
use crate::tensor::Tensor;

/// Binary mask at image resolution.
#[derive(Debug, Clone)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn pixel_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// True when any mask pixel lies within Chebyshev distance `radius`
    /// of (y, x); radius 0 is strict membership.
    pub fn contains_within(&self, y: usize, x: usize, radius: usize) -> bool {
        if radius == 0 {
            return self.contains(y, x);
        }
        let y0 = y.saturating_sub(radius);
        let x0 = x.saturating_sub(radius);
        let y1 = (y + radius).min(self.height - 1);
        let x1 = (x + radius).min(self.width - 1);
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                if self.contains(yy, xx) {
                    return true;
                }
            }
        }
        false
    }
}

/// One labelled object in an image.
#[derive(Debug, Clone)]
pub struct SampleObject {
    pub class_index: usize,
    pub mask: Mask,
}

/// An evaluation image with its per-class ground-truth masks.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub objects: Vec<SampleObject>,
}

impl Sample {
    pub fn validate(&self, require_multi_class: bool) -> Result<()> {
        if self.image.ndim() != 3 {
            return Err(Error::shape(
                "sample",
                format!("image must be (channels, h, w), got {:?}", self.image.shape()),
            ));
        }
        if self.objects.is_empty() {
            return Err(Error::InvalidArgument("sample has no objects".into()));
        }
        let (h, w) = (self.image.shape()[1], self.image.shape()[2]);
        for obj in &self.objects {
            if obj.mask.height != h || obj.mask.width != w {
                return Err(Error::shape(
                    "sample",
                    format!(
                        "mask {}x{} does not match image {h}x{w}",
                        obj.mask.height, obj.mask.width
                    ),
                ));
            }
        }
        if require_multi_class {
            let mut classes: Vec<usize> = self.objects.iter().map(|o| o.class_index).collect();
            classes.sort_unstable();
            classes.dedup();
            if classes.len() < 2 {
                return Err(Error::InvalidArgument(
                    "pointing-game samples need at least 2 distinct classes".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One protocol result row; `params` echoes the configuration needed to
/// recompute the value.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalRecord {
    pub protocol: String,
    pub method: String,
    pub layer: Option<String>,
    pub params: String,
    pub value: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Protocol knobs; defaults mirror the toolkit conventions and are echoed
/// into every record.
#[derive(Debug, Clone, Copy)]
pub struct ProtocolOptions {
    pub hog: HogParams,
    pub tolerance_radius: usize,
    pub method_options: MethodOptions,
    pub seed: u64,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            hog: HogParams::default(),
            tolerance_radius: 0,
            method_options: MethodOptions::default(),
            seed: 0,
        }
    }
}

impl ProtocolOptions {
    fn echo_for(&self, source: &dyn MapSource, extra: &str) -> String {
        let mut parts = Vec::new();
        let m = source.params_echo();
        if !m.is_empty() {
            parts.push(m);
        }
        parts.push(format!("hog_cell={}", self.hog.cell));
        parts.push(format!("hog_bins={}", self.hog.bins));
        parts.push(format!("radius={}", self.tolerance_radius));
        if !extra.is_empty() {
            parts.push(extra.to_string());
        }
        parts.join(";")
    }
}

/// A source of saliency maps: the real method inventory, or a stub used
/// to check the harness itself.
pub trait MapSource: Sync {
    fn map_for(
        &self,
        model: &Model,
        trace: &ForwardTrace,
        class_index: usize,
    ) -> Result<SaliencyMap>;

    fn id(&self) -> String;

    fn layer(&self) -> Option<String> {
        None
    }

    fn params_echo(&self) -> String {
        String::new()
    }
}

/// The standard map source backed by a `MethodSpec`.
pub struct MethodSource {
    pub spec: MethodSpec,
    pub options: MethodOptions,
}

impl MapSource for MethodSource {
    fn map_for(
        &self,
        model: &Model,
        trace: &ForwardTrace,
        class_index: usize,
    ) -> Result<SaliencyMap> {
        compute_map(model, trace, class_index, &self.spec, self.options)
    }

    fn id(&self) -> String {
        self.spec.id()
    }

    fn layer(&self) -> Option<String> {
        self.spec.layer().map(str::to_string)
    }

    fn params_echo(&self) -> String {
        self.spec.params_echo()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PointingTrial {
    pub sample: usize,
    pub class_index: usize,
    pub row: usize,
    pub col: usize,
    pub hit: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointingDetail {
    pub trials: Vec<PointingTrial>,
}

/// Pointing game: one trial per (sample, object class); the map is
/// generated for that class and a hit requires the map's argmax to land
/// on the class's mask.
pub fn pointing_game_with(
    samples: &[Sample],
    source: &dyn MapSource,
    model: &Model,
    options: &ProtocolOptions,
) -> Result<(EvalRecord, PointingDetail)> {
    validate_samples(samples, true)?;
    let per_sample = try_map_samples(samples, |i, sample| {
        let trace = forward(model, &sample.image)?;
        let mut trials = Vec::new();
        for obj in &sample.objects {
            let map = source.map_for(model, &trace, obj.class_index)?;
            let (row, col) = argmax_location(&map.values);
            trials.push(PointingTrial {
                sample: i,
                class_index: obj.class_index,
                row,
                col,
                hit: obj.mask.contains_within(row, col, options.tolerance_radius),
            });
        }
        Ok(trials)
    })?;
    let trials: Vec<PointingTrial> = per_sample.into_iter().flatten().collect();
    let hits = trials.iter().filter(|t| t.hit).count();
    let record = EvalRecord {
        protocol: "pointing_game".into(),
        method: source.id(),
        layer: source.layer(),
        params: options.echo_for(source, ""),
        value: hits as f64 / trials.len() as f64,
        trials: trials.len(),
        seed: options.seed,
    };
    Ok((record, PointingDetail { trials }))
}

/// Restricted pointing game: one map per sample, generated for the model's
/// max output class; every object's mask is judged against that map. The
/// trial denominator matches the original pointing game exactly.
pub fn restricted_pointing_with(
    samples: &[Sample],
    source: &dyn MapSource,
    model: &Model,
    options: &ProtocolOptions,
) -> Result<(EvalRecord, PointingDetail)> {
    validate_samples(samples, true)?;
    let per_sample = try_map_samples(samples, |i, sample| {
        let trace = forward(model, &sample.image)?;
        let max_class = argmax_index(trace.logits().data());
        let map = source.map_for(model, &trace, max_class)?;
        let (row, col) = argmax_location(&map.values);
        let mut trials = Vec::new();
        for obj in &sample.objects {
            trials.push(PointingTrial {
                sample: i,
                class_index: obj.class_index,
                row,
                col,
                hit: obj.mask.contains_within(row, col, options.tolerance_radius),
            });
        }
        Ok(trials)
    })?;
    let trials: Vec<PointingTrial> = per_sample.into_iter().flatten().collect();
    let hits = trials.iter().filter(|t| t.hit).count();
    let record = EvalRecord {
        protocol: "restricted_pointing".into(),
        method: source.id(),
        layer: source.layer(),
        params: options.echo_for(source, ""),
        value: hits as f64 / trials.len() as f64,
        trials: trials.len(),
        seed: options.seed,
    };
    Ok((record, PointingDetail { trials }))
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityPair {
    pub sample: usize,
    pub max_class: usize,
    pub min_class: usize,
    pub correlation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityDetail {
    pub pairs: Vec<SensitivityPair>,
}

/// Class-sensitivity: Spearman-on-HOG similarity between the maps for the
/// max-logit and min-logit classes, averaged over samples. High values
/// mean the method barely reacts to the explained class.
pub fn class_sensitivity_with(
    samples: &[Sample],
    source: &dyn MapSource,
    model: &Model,
    options: &ProtocolOptions,
) -> Result<(EvalRecord, SensitivityDetail)> {
    if model.class_count() < 2 {
        return Err(Error::InvalidArgument(
            "class sensitivity needs at least 2 classes".into(),
        ));
    }
    validate_samples(samples, false)?;
    let pairs = try_map_samples(samples, |i, sample| {
        let trace = forward(model, &sample.image)?;
        let max_class = argmax_index(trace.logits().data());
        let min_class = argmin_index(trace.logits().data());
        let map_max = source.map_for(model, &trace, max_class)?;
        let map_min = source.map_for(model, &trace, min_class)?;
        let d_max = hog(&map_max.values, options.hog)?;
        let d_min = hog(&map_min.values, options.hog)?;
        Ok(SensitivityPair {
            sample: i,
            max_class,
            min_class,
            correlation: spearman(&d_max, &d_min)?,
        })
    })?;
    let mean = pairs.iter().map(|p| p.correlation).sum::<f64>() / pairs.len() as f64;
    let record = EvalRecord {
        protocol: "class_sensitivity".into(),
        method: source.id(),
        layer: source.layer(),
        params: options.echo_for(source, ""),
        value: mean,
        trials: pairs.len(),
        seed: options.seed,
    };
    Ok((record, SensitivityDetail { pairs }))
}

#[derive(Debug, Clone, Serialize)]
pub struct RandomizationStage {
    pub stage: usize,
    pub mean_similarity: f64,
    pub per_sample: Vec<f64>,
}

/// Cascading randomization sanity check. The explained class is fixed at
/// the original model's argmax; at each stage the last `stage` parametric
/// layers are reinitialized and the map similarity to the original is
/// measured by Spearman on HOG, averaged over samples.
pub fn randomization_curve_with(
    samples: &[Sample],
    source: &dyn MapSource,
    model: &Model,
    options: &ProtocolOptions,
) -> Result<Vec<RandomizationStage>> {
    validate_samples(samples, false)?;
    let originals = try_map_samples(samples, |_, sample| {
        let trace = forward(model, &sample.image)?;
        let class = argmax_index(trace.logits().data());
        let map = source.map_for(model, &trace, class)?;
        Ok((class, hog(&map.values, options.hog)?))
    })?;

    let stage_count = model.parametric_layers().len();
    let mut curve = Vec::with_capacity(stage_count + 1);
    for stage in 0..=stage_count {
        let randomized = randomize_cascading(model, stage, options.seed)?;
        let sims = try_map_samples(samples, |i, sample| {
            let trace = forward(&randomized, &sample.image)?;
            let (class, original_hog) = &originals[i];
            let map = source.map_for(&randomized, &trace, *class)?;
            let descriptor = hog(&map.values, options.hog)?;
            spearman(original_hog, &descriptor)
        })?;
        let mean = sims.iter().sum::<f64>() / sims.len() as f64;
        curve.push(RandomizationStage {
            stage,
            mean_similarity: mean,
            per_sample: sims,
        });
    }
    Ok(curve)
}

/// Spec-named wrappers over the `MethodSpec` inventory.
pub fn pointing_game(
    samples: &[Sample],
    method: &MethodSpec,
    model: &Model,
    options: &ProtocolOptions,
) -> Result<EvalRecord> {
    let source = MethodSource { spec: method.clone(), options: options.method_options };
    Ok(pointing_game_with(samples, &source, model, options)?.0)
}

pub fn restricted_pointing(
    samples: &[Sample],
    method: &MethodSpec,
    model: &Model,
    options: &ProtocolOptions,
) -> Result<EvalRecord> {
    let source = MethodSource { spec: method.clone(), options: options.method_options };
    Ok(restricted_pointing_with(samples, &source, model, options)?.0)
}

pub fn class_sensitivity(
    samples: &[Sample],
    method: &MethodSpec,
    model: &Model,
    options: &ProtocolOptions,
) -> Result<EvalRecord> {
    let source = MethodSource { spec: method.clone(), options: options.method_options };
    Ok(class_sensitivity_with(samples, &source, model, options)?.0)
}

pub fn randomization_curve(
    samples: &[Sample],
    method: &MethodSpec,
    model: &Model,
    options: &ProtocolOptions,
) -> Result<Vec<(usize, f64)>> {
    let source = MethodSource { spec: method.clone(), options: options.method_options };
    Ok(randomization_curve_with(samples, &source, model, options)?
        .into_iter()
        .map(|s| (s.stage, s.mean_similarity))
        .collect())
}

fn validate_samples(samples: &[Sample], require_multi_class: bool) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples provided".into()));
    }
    for (i, sample) in samples.iter().enumerate() {
        sample
            .validate(require_multi_class)
            .map_err(|e| Error::InvalidArgument(format!("sample {i}: {e}")))?;
    }
    Ok(())
}

/// Runs `f` over all samples (possibly in parallel) and returns results
/// in sample order, surfacing the first error deterministically.
fn try_map_samples<R: Send>(
    samples: &[Sample],
    f: impl Fn(usize, &Sample) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let results = map_indexed(samples.len(), |i| f(i, &samples[i]));
    results.into_iter().collect()
}
