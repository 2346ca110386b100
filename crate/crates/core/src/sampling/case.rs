//! Case records: one volume with optional labels and mask, tagged by domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelGrid, Tensor};

/// Source (labelled) vs target (unlabelled at training time) domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "S")]
    Source,
    #[serde(rename = "T")]
    Target,
}

impl Domain {
    /// Domain label fed to the discriminator: 0 = source, 1 = target.
    pub fn label(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "S",
            Domain::Target => "T",
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug)]
pub struct CaseRecord {
    pub case_id: String,
    pub image: Tensor<f32>,
    pub labels: Option<LabelGrid>,
    pub mask: Option<LabelGrid>,
    pub domain: Domain,
}

impl CaseRecord {
    pub fn new(
        case_id: impl Into<String>,
        image: Tensor<f32>,
        labels: Option<LabelGrid>,
        mask: Option<LabelGrid>,
        domain: Domain,
    ) -> Result<Self> {
        let case_id = case_id.into();
        if image.rank() != 4 {
            return Err(Error::Dataset(format!(
                "case {case_id}: image must be [C, X, Y, Z], got {:?}",
                image.shape()
            )));
        }
        let spatial = image.spatial();
        for (what, grid) in [("labels", &labels), ("mask", &mask)] {
            if let Some(g) = grid {
                if g.shape() != spatial {
                    return Err(Error::Dataset(format!(
                        "case {case_id}: {what} extent {:?} does not match image {:?}",
                        g.shape(),
                        spatial
                    )));
                }
            }
        }
        Ok(CaseRecord { case_id, image, labels, mask, domain })
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.image.spatial()
    }

    /// Label-blind view for adversarial sampling: image and mask only.
    pub fn image_view(&self) -> ImageView<'_> {
        ImageView {
            case_id: &self.case_id,
            image: &self.image,
            mask: self.mask.as_ref(),
            domain: self.domain,
        }
    }

    /// Copy with the label map removed (unsupervised target cases).
    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }
}

/// Borrowed view of a case that structurally cannot leak labels.
#[derive(Clone, Copy, Debug)]
pub struct ImageView<'a> {
    pub case_id: &'a str,
    pub image: &'a Tensor<f32>,
    pub mask: Option<&'a LabelGrid>,
    pub domain: Domain,
}

impl ImageView<'_> {
    pub fn spatial(&self) -> [usize; 3] {
        self.image.spatial()
    }
}
