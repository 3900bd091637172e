use crate::error::{Error, Result};
use crate::labels::{build_oracle_labels, AnnotationSet, OracleLabels, SigmaRule};
use crate::numerics::Matrix;

/// One annotated video: features, annotations and the derived targets.
#[derive(Clone, Debug)]
pub struct Video {
    pub id: String,
    pub features: Matrix,
    pub annotations: AnnotationSet,
    pub labels: OracleLabels,
}

impl Video {
    pub fn new(features: Matrix, annotations: AnnotationSet, sigma_rule: SigmaRule) -> Result<Self> {
        if features.rows() != annotations.n_frames() {
            return Err(Error::Video {
                video: annotations.video_id.clone(),
                source: Box::new(Error::LengthMismatch {
                    left: features.rows(),
                    right: annotations.n_frames(),
                }),
            });
        }
        let labels = build_oracle_labels(&annotations, sigma_rule).map_err(|e| Error::Video {
            video: annotations.video_id.clone(),
            source: Box::new(e),
        })?;
        Ok(Self {
            id: annotations.video_id.clone(),
            features,
            annotations,
            labels,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.features.rows()
    }
}
