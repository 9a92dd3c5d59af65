use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ops::Range;

use super::{subset_union, DatasetView, Label, SplitManifest};
use crate::data::TrafficDataset;
use crate::error::{Error, Result};

/// Why a pipeline stage reads data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Purpose {
    ScalerFit,
    DecouplingFit,
    PretrainStep,
    PretrainValidation,
    TrainStep,
    TrainValidation,
    Evaluation,
}

impl Purpose {
    /// Whether reads feed a gradient step.
    pub fn is_gradient(self) -> bool {
        matches!(self, Purpose::PretrainStep | Purpose::TrainStep)
    }

    fn check(self, labels: &BTreeSet<Label>) -> std::result::Result<(), String> {
        use Label::*;
        let allowed: &[Label] = match self {
            Purpose::ScalerFit | Purpose::PretrainStep | Purpose::TrainStep => &[A],
            Purpose::DecouplingFit => &[A, B, D, E, G, H],
            Purpose::PretrainValidation => &[A, B, D, E],
            Purpose::TrainValidation => &[D, E],
            Purpose::Evaluation => &Label::ALL,
        };
        if let Some(bad) = labels.iter().find(|l| !allowed.contains(l)) {
            return Err(format!("{self:?} may not read set {bad}"));
        }
        if self == Purpose::PretrainValidation && labels.len() != 4 {
            return Err("pre-training validation must read exactly A∪B∪D∪E".into());
        }
        Ok(())
    }
}

/// One logged read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessRecord {
    pub purpose: Purpose,
    pub labels: BTreeSet<Label>,
    pub sensors: Vec<String>,
    pub steps: Range<usize>,
}

/// Gatekeeper for dataset reads: every view is checked against the
/// purpose's permitted cells and logged.
pub struct Protocol<'a> {
    ds: &'a TrafficDataset,
    manifest: &'a SplitManifest,
    log: RefCell<Vec<AccessRecord>>,
}

impl<'a> Protocol<'a> {
    pub fn new(ds: &'a TrafficDataset, manifest: &'a SplitManifest) -> Result<Self> {
        manifest.validate(ds)?;
        Ok(Self { ds, manifest, log: RefCell::new(Vec::new()) })
    }

    pub fn dataset(&self) -> &'a TrafficDataset {
        self.ds
    }

    pub fn manifest(&self) -> &'a SplitManifest {
        self.manifest
    }

    pub fn view(&self, purpose: Purpose, labels: &[Label]) -> Result<DatasetView<'a>> {
        let set: BTreeSet<Label> = labels.iter().copied().collect();
        purpose.check(&set).map_err(Error::Protocol)?;
        let view = subset_union(self.ds, self.manifest, labels)?;
        if purpose.is_gradient() && view.steps.end > self.manifest.t2 {
            return Err(Error::Protocol(format!("{purpose:?} reads past t2")));
        }
        self.log.borrow_mut().push(AccessRecord {
            purpose,
            labels: set,
            sensors: view.sensor_ids(),
            steps: view.steps.clone(),
        });
        Ok(view)
    }

    pub fn records(&self) -> Vec<AccessRecord> {
        self.log.borrow().clone()
    }

    pub fn into_records(self) -> Vec<AccessRecord> {
        self.log.into_inner()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::split::make_split;

    #[test]
    fn gradient_reads_limited_to_a() {
        let data = generate_synthetic(&SynthConfig { sensors: 10, days: 4, ..Default::default() }).unwrap();
        let ds = &data.dataset;
        let r = [0.7, 0.1, 0.2];
        let s = make_split(ds.sensor_ids(), ds.num_steps(), r, r, 0).unwrap();
        let p = Protocol::new(ds, &s).unwrap();
        assert!(p.view(Purpose::TrainStep, &[Label::A]).is_ok());
        for bad in [Label::C, Label::F, Label::I, Label::B] {
            assert!(matches!(p.view(Purpose::TrainStep, &[bad]), Err(Error::Protocol(_))));
        }
        assert!(p.view(Purpose::PretrainValidation, &[Label::A, Label::B]).is_err());
        assert!(p.view(Purpose::PretrainValidation, &[Label::A, Label::B, Label::D, Label::E]).is_ok());
        assert!(p.view(Purpose::Evaluation, &[Label::I]).is_ok());
        let log = p.into_records();
        assert_eq!(log.len(), 3);
        assert_eq!(log[0].purpose, Purpose::TrainStep);
    }
}
