use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::pro::{pro, DEFAULT_FPR_LIMIT};
use super::ranking::{auroc, average_precision};
use crate::error::{Error, Result};
use crate::features::{FeatureRecord, Mask};
use crate::inference::AnomalyOutput;
use crate::par;
use crate::tensor::Grid;

/// Metric values for one group of images; each is absent when its ground
/// truth is.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSet {
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pixel_pro: Option<f64>,
    pub n_images: usize,
    pub n_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pooled over all images.
    pub overall: MetricSet,
    /// Unweighted mean of the per-dataset values.
    pub mean: MetricSet,
    pub per_dataset: BTreeMap<String, MetricSet>,
}

pub const METRIC_NAMES: [&str; 4] = ["image_auroc", "image_ap", "pixel_auroc", "pixel_pro"];

impl MetricSet {
    pub fn values(&self) -> [Option<f64>; 4] {
        [self.image_auroc, self.image_ap, self.pixel_auroc, self.pixel_pro]
    }

    fn values_mut(&mut self) -> [&mut Option<f64>; 4] {
        [
            &mut self.image_auroc,
            &mut self.image_ap,
            &mut self.pixel_auroc,
            &mut self.pixel_pro,
        ]
    }
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn metric_set(items: &[(&AnomalyOutput, &FeatureRecord)]) -> Result<MetricSet> {
    let scores: Vec<f64> = items.iter().map(|(o, _)| o.score).collect();
    let labels: Vec<u8> = items.iter().map(|(_, r)| r.label).collect();
    let mut set = MetricSet {
        image_auroc: defined(auroc(&scores, &labels))?,
        image_ap: defined(average_precision(&scores, &labels))?,
        n_images: items.len(),
        ..Default::default()
    };
    if set.image_auroc.is_none() {
        set.image_ap = None;
    }
    let with_masks: Vec<(&Grid, &Mask)> = items
        .iter()
        .filter_map(|(o, r)| r.mask.as_ref().map(|m| (&o.map, m)))
        .collect();
    if !with_masks.is_empty() {
        let mut values = Vec::new();
        let mut truth = Vec::new();
        for (map, mask) in &with_masks {
            values.extend_from_slice(&map.data);
            truth.extend_from_slice(&mask.data);
        }
        set.n_pixels = values.len();
        set.pixel_auroc = defined(auroc(&values, &truth))?;
        let (maps, masks): (Vec<Grid>, Vec<Mask>) =
            with_masks.iter().map(|(g, m)| ((*g).clone(), (*m).clone())).unzip();
        set.pixel_pro = defined(pro(&maps, &masks, DEFAULT_FPR_LIMIT))?;
    }
    Ok(set)
}

fn pair_up<'a>(
    outputs: &'a [AnomalyOutput],
    records: &'a [FeatureRecord],
) -> Result<Vec<(&'a AnomalyOutput, &'a FeatureRecord)>> {
    if outputs.len() != records.len() {
        return Err(Error::Argument(format!(
            "{} outputs for {} records",
            outputs.len(),
            records.len()
        )));
    }
    outputs
        .iter()
        .zip(records)
        .map(|(o, r)| {
            if o.id != r.id {
                return Err(Error::Argument(format!(
                    "id mismatch: output `{}` vs record `{}`",
                    o.id, r.id
                )));
            }
            if let Some(m) = &r.mask {
                if o.map.shape() != (m.h, m.w) {
                    return Err(Error::Shape(format!("map for `{}` does not match its mask", o.id)));
                }
            }
            Ok((o, r))
        })
        .collect()
}

/// Image metrics on scores, pixel metrics on maps of mask-bearing records,
/// pooled and per dataset (class name).
pub fn evaluate(outputs: &[AnomalyOutput], records: &[FeatureRecord]) -> Result<EvalReport> {
    let pairs = pair_up(outputs, records)?;
    let mut groups: BTreeMap<&str, Vec<(&AnomalyOutput, &FeatureRecord)>> = BTreeMap::new();
    for p in &pairs {
        groups.entry(p.1.class_name.as_str()).or_default().push(*p);
    }
    let groups: Vec<(&str, Vec<_>)> = groups.into_iter().collect();
    let per = par::try_map(&groups, |(name, items)| {
        metric_set(items).map(|m| (name.to_string(), m))
    })?;
    let per_dataset: BTreeMap<String, MetricSet> = per.into_iter().collect();

    let mut mean = MetricSet {
        n_images: pairs.len(),
        n_pixels: per_dataset.values().map(|m| m.n_pixels).sum(),
        ..Default::default()
    };
    for (k, slot) in mean.values_mut().into_iter().enumerate() {
        let present: Vec<f64> = per_dataset.values().filter_map(|m| m.values()[k]).collect();
        if !present.is_empty() {
            *slot = Some(present.iter().sum::<f64>() / present.len() as f64);
        }
    }
    Ok(EvalReport {
        overall: metric_set(&pairs)?,
        mean,
        per_dataset,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation across runs.
    pub std: f64,
    pub runs: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            runs: values.len(),
        })
    }
}

/// Mean and std of each metric across runs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateSet(pub BTreeMap<String, MeanStd>);

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub overall: AggregateSet,
    pub mean: AggregateSet,
    pub per_dataset: BTreeMap<String, AggregateSet>,
}

fn aggregate_sets<'a>(sets: impl Iterator<Item = &'a MetricSet> + Clone) -> AggregateSet {
    let mut out = BTreeMap::new();
    for (k, name) in METRIC_NAMES.iter().enumerate() {
        let values: Vec<f64> = sets.clone().filter_map(|s| s.values()[k]).collect();
        if let Some(ms) = MeanStd::of(&values) {
            out.insert(name.to_string(), ms);
        }
    }
    AggregateSet(out)
}

/// Combines per-seed reports into mean ± std.
pub fn aggregate(reports: &[EvalReport]) -> AggregateReport {
    let mut names: Vec<&String> = reports.iter().flat_map(|r| r.per_dataset.keys()).collect();
    names.sort();
    names.dedup();
    AggregateReport {
        runs: reports.len(),
        overall: aggregate_sets(reports.iter().map(|r| &r.overall)),
        mean: aggregate_sets(reports.iter().map(|r| &r.mean)),
        per_dataset: names
            .into_iter()
            .map(|n| {
                let sets = reports.iter().filter_map(move |r| r.per_dataset.get(n));
                (n.clone(), aggregate_sets(sets))
            })
            .collect(),
    }
}

/// Plain-text table: one row per dataset plus mean and pooled rows,
/// columns paired as (image AUROC, AP) and (pixel AUROC, PRO).
pub fn format_table(agg: &AggregateReport) -> String {
    let pixels = agg
        .per_dataset
        .values()
        .chain([&agg.overall])
        .any(|s| s.0.contains_key("pixel_auroc") || s.0.contains_key("pixel_pro"));
    let columns: &[&str] = if pixels { &METRIC_NAMES } else { &METRIC_NAMES[..2] };
    let width = agg.per_dataset.keys().map(|k| k.len()).chain([7]).max().unwrap_or(7);
    let mut out = String::new();
    let _ = write!(out, "{:width$}", "dataset");
    for c in columns {
        let _ = write!(out, "  {c:>15}");
    }
    out.push('\n');
    let rows = agg
        .per_dataset
        .iter()
        .map(|(k, v)| (k.as_str(), v))
        .chain([("mean", &agg.mean), ("pooled", &agg.overall)]);
    for (name, set) in rows {
        let _ = write!(out, "{name:width$}");
        for c in columns {
            let cell = match set.0.get(*c) {
                Some(ms) => format!("{:.3}±{:.3}", ms.mean, ms.std),
                None => "-".to_string(),
            };
            let _ = write!(out, "  {cell:>15}");
        }
        out.push('\n');
    }
    out
}
