use std::path::PathBuf;

use super::{Cohort, ImageKey, Subject, Timepoint};
use crate::error::{ensure, Result};
use crate::fieldcore::ltf::load_external_field;
use crate::fieldcore::{compose, identity_map, TransformField};

/// Provider of dense correspondences between images.
pub trait RegistrationOracle {
    /// Map on `target`'s grid sending each target point to the
    /// corresponding source point; warping the source image by it
    /// approximates the target image.
    fn register(&self, target: ImageKey, source: ImageKey) -> Result<TransformField>;
}

/// Exact map through template space, `T_source ∘ Ψ_target`. Registering
/// an image to itself returns the identity exactly.
pub fn oracle_registration(target: (&Subject, Timepoint), source: (&Subject, Timepoint)) -> Result<TransformField> {
    let ((ts, tt), (ss, st)) = (target, source);
    ensure!(
        ts.template_hash == ss.template_hash,
        InvalidInput,
        "subjects {} and {} come from different templates",
        ts.id,
        ss.id
    );
    if ts.id == ss.id && tt == st {
        return Ok(identity_map(ts.image(tt).grid()));
    }
    compose(&ss.to_subject[st.index()], &ts.to_template[tt.index()])
}

impl RegistrationOracle for Cohort {
    fn register(&self, target: ImageKey, source: ImageKey) -> Result<TransformField> {
        ensure!(
            target.subject < self.len() && source.subject < self.len(),
            InvalidInput,
            "image key out of range for a cohort of {} subjects",
            self.len()
        );
        oracle_registration(
            (&self.subjects[target.subject], target.timepoint),
            (&self.subjects[source.subject], source.timepoint),
        )
    }
}

/// Externally computed fields stored as `field_<target>_<source>.ltf`,
/// where image names are `<subject id>_<t0|t1>`.
#[derive(Clone, Debug)]
pub struct FieldDirOracle {
    pub dir: PathBuf,
    pub subject_ids: Vec<String>,
}

impl FieldDirOracle {
    pub fn new(dir: impl Into<PathBuf>, subject_ids: Vec<String>) -> Self {
        Self {
            dir: dir.into(),
            subject_ids,
        }
    }

    pub fn file_name(&self, target: ImageKey, source: ImageKey) -> Result<String> {
        let name = |k: ImageKey| -> Result<String> {
            let id = self.subject_ids.get(k.subject).ok_or_else(|| {
                crate::Error::InvalidInput(format!("no subject with index {}", k.subject))
            })?;
            Ok(format!("{id}_{}", k.timepoint.tag()))
        };
        Ok(format!("field_{}_{}.ltf", name(target)?, name(source)?))
    }
}

impl RegistrationOracle for FieldDirOracle {
    fn register(&self, target: ImageKey, source: ImageKey) -> Result<TransformField> {
        load_external_field(self.dir.join(self.file_name(target, source)?))
    }
}
